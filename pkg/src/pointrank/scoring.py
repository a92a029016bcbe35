"""Prompt construction, trajectory parsing, and score extraction.

Two scoring families are supported:

* binary relevance judgements (``yes``/``no``), turned into a ranking
  score by normalizing the two answer-token probabilities;
* fine-grained integer scores (0..3 or 0..10), turned into a ranking
  score by weighting the integer with its answer-token probability.

Shipped prompt templates cover all four schemes, and a per-benchmark
instruction table provides the relevance definitions they expect.
"""

from __future__ import annotations

import math
import re
from bisect import bisect_right
from dataclasses import dataclass, replace
from typing import Iterable, Protocol, Sequence

SCHEMES = ("binary_plain", "binary_think", "int_0_3", "int_0_10")

# Inclusive integer score range per scheme. Binary answers map to
# no -> 0, yes -> 1.
SCHEME_RANGES: dict[str, tuple[int, int]] = {
    "binary_plain": (0, 1),
    "binary_think": (0, 1),
    "int_0_3": (0, 3),
    "int_0_10": (0, 10),
}

DEFAULT_TOKEN_LIMIT = 2048

_PLACEHOLDERS = ("{instruction}", "{query}", "{document}")


class Tokenizer(Protocol):
    """Minimal token-counting interface used for truncation.

    The real systems this toolkit models truncate with a model-specific
    tokenizer; at desk scale a whitespace tokenizer is the default.
    """

    def count(self, text: str) -> int: ...

    def truncate(self, text: str, max_tokens: int) -> str: ...


class WhitespaceTokenizer:
    """Counts and truncates on whitespace-separated tokens."""

    def count(self, text: str) -> int:
        return len(text.split())

    def truncate(self, text: str, max_tokens: int) -> str:
        tokens = text.split()
        if len(tokens) <= max_tokens:
            return text
        return " ".join(tokens[:max_tokens])


DEFAULT_TOKENIZER = WhitespaceTokenizer()


@dataclass(frozen=True)
class PromptTemplate:
    """A scoring prompt with {instruction}, {query}, {document} slots."""

    template_text: str
    scheme: str
    max_query_tokens: int = DEFAULT_TOKEN_LIMIT
    max_doc_tokens: int = DEFAULT_TOKEN_LIMIT

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        for placeholder in _PLACEHOLDERS:
            n = self.template_text.count(placeholder)
            if n != 1:
                raise ValueError(
                    f"template must contain {placeholder} exactly once, found {n}"
                )


@dataclass(frozen=True)
class RenderedPrompt:
    """A rendered prompt plus flags recording silent truncation."""

    text: str
    query_truncated: bool
    document_truncated: bool


@dataclass(frozen=True)
class ParsedOutput:
    """Result of parsing one generated trajectory.

    ``formatted`` is true only when the output conforms to the expected
    structure and an in-range score could be extracted; otherwise the
    score is absent.
    """

    think_text: str
    score: int | None
    answer_token_prob: float | None
    formatted: bool
    raw_text: str

    def __post_init__(self) -> None:
        if self.formatted and self.score is None:
            raise ValueError("formatted output must carry a score")
        if not self.formatted and self.score is not None:
            raise ValueError("unformatted output must not carry a score")
        if self.answer_token_prob is not None and not (
            0.0 <= self.answer_token_prob <= 1.0
        ):
            raise ValueError("answer_token_prob must lie in [0, 1]")


def render_prompt(
    template: PromptTemplate,
    instruction: str,
    query_text: str,
    document_text: str,
    tokenizer: Tokenizer | None = None,
) -> RenderedPrompt:
    """Substitute the three placeholders, truncating query and document
    to the template's token limits.

    Truncation is silent (no error) but recorded in the returned flags.
    Output is byte-stable for identical inputs.
    """
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    query_truncated = tok.count(query_text) > template.max_query_tokens
    doc_truncated = tok.count(document_text) > template.max_doc_tokens
    if query_truncated:
        query_text = tok.truncate(query_text, template.max_query_tokens)
    if doc_truncated:
        document_text = tok.truncate(document_text, template.max_doc_tokens)
    text = (
        template.template_text.replace("{instruction}", instruction)
        .replace("{query}", query_text)
        .replace("{document}", document_text)
    )
    return RenderedPrompt(
        text=text, query_truncated=query_truncated, document_truncated=doc_truncated
    )


_THINK_ANSWER_RE = re.compile(
    r"\s*<think>(?P<think>.*?)</think>\s*<answer>(?P<answer>[^<>]*)</answer>\s*\Z",
    re.DOTALL,
)
_INT_RE = re.compile(r"[+-]?[0-9]+\Z")


def _unformatted(raw: str) -> ParsedOutput:
    return ParsedOutput(
        think_text="", score=None, answer_token_prob=None, formatted=False, raw_text=raw
    )


def _answer_to_score(answer: str, scheme: str) -> int | None:
    """Map a trimmed answer slot to an in-range integer score, or None."""
    answer = answer.strip()
    if scheme in ("binary_plain", "binary_think"):
        if answer == "yes":
            return 1
        if answer == "no":
            return 0
        return None
    if not _INT_RE.fullmatch(answer):
        return None
    value = int(answer)
    lo, hi = SCHEME_RANGES[scheme]
    if lo <= value <= hi:
        return value
    return None


def parse_output(raw: str, scheme: str) -> ParsedOutput:
    """Parse one raw generation under the given scheme.

    Never raises on malformed input: any shape other than the expected
    one yields ``formatted=False``. For the think schemes the expected
    shape is a single ``<think>...</think><answer>...</answer>`` pair
    spanning the whole output (surrounding whitespace tolerated); more
    than one ``<answer>`` tag is rejected. ``binary_plain`` expects the
    bare word ``yes`` or ``no``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if not isinstance(raw, str):
        return _unformatted(str(raw))
    if scheme == "binary_plain":
        score = _answer_to_score(raw, scheme)
        if score is None:
            return _unformatted(raw)
        return ParsedOutput(
            think_text="",
            score=score,
            answer_token_prob=None,
            formatted=True,
            raw_text=raw,
        )
    if raw.count("<answer>") != 1:
        return _unformatted(raw)
    match = _THINK_ANSWER_RE.fullmatch(raw)
    if match is None:
        return _unformatted(raw)
    score = _answer_to_score(match.group("answer"), scheme)
    if score is None:
        return _unformatted(raw)
    return ParsedOutput(
        think_text=match.group("think"),
        score=score,
        answer_token_prob=None,
        formatted=True,
        raw_text=raw,
    )


def with_answer_prob(
    parsed: ParsedOutput, answer_token_logprobs: Sequence[float] | None
) -> ParsedOutput:
    """Attach the answer-token probability from backend log-probs.

    When the answer spans several tokens (the two-character score "10"),
    the probability is the product of the token probabilities, i.e.
    ``exp(sum(logprobs))``.
    """
    if answer_token_logprobs is None or not parsed.formatted:
        return parsed
    prob = math.exp(sum(answer_token_logprobs))
    return replace(parsed, answer_token_prob=min(1.0, prob))


def binary_normalized_prob(p_yes: float, p_no: float) -> float:
    """Normalized probability of relevance from the two answer tokens:
    ``p_yes / (p_yes + p_no)``."""
    if p_yes < 0 or p_no < 0:
        raise ValueError("token probabilities must be non-negative")
    total = p_yes + p_no
    if total <= 0:
        raise ValueError("p_yes + p_no must be positive")
    return p_yes / total

def binary_relevance_score(parsed: ParsedOutput) -> float:
    """Ranking score for a binary-scheme output.

    Backends report the probability of the chosen answer token; the
    opposite token is assigned the complementary mass before
    normalization.
    """
    if not parsed.formatted:
        raise ValueError("cannot score an unformatted output")
    if parsed.answer_token_prob is None:
        raise ValueError("output carries no answer-token probability")
    p = parsed.answer_token_prob
    if parsed.score == 1:
        return binary_normalized_prob(p, 1.0 - p)
    return binary_normalized_prob(1.0 - p, p)


def fine_grained_score(parsed: ParsedOutput) -> float:
    """Final ranking score for an integer-scheme output: the extracted
    integer weighted by its answer-token probability."""
    if not parsed.formatted:
        raise ValueError("cannot score an unformatted output")
    if parsed.answer_token_prob is None:
        raise ValueError("output carries no answer-token probability")
    return float(parsed.score) * parsed.answer_token_prob


@dataclass(frozen=True)
class Histogram:
    """Bin ratios over [0, 1]; bins are half-open, the last is closed."""

    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]
    ratios: tuple[float, ...]


def default_bin_edges() -> tuple[float, ...]:
    """Extreme bins [0, 1e-5] and [1-1e-5, 1] plus ten equal interior
    bins, for probability-concentration analysis."""
    eps = 1e-5
    interior = [eps + k * (1.0 - 2.0 * eps) / 10.0 for k in range(1, 10)]
    return (0.0, eps, *interior, 1.0 - eps, 1.0)


def score_distribution(
    values: Iterable[float], bin_edges: Sequence[float] | None = None
) -> Histogram:
    """Histogram of normalized-score ratios over [0, 1].

    Each value falls in exactly one half-open bin ``[e_i, e_{i+1})``;
    the final bin is closed so 1.0 is counted. Ratios sum to 1.
    """
    edges = tuple(bin_edges) if bin_edges is not None else default_bin_edges()
    if len(edges) < 2:
        raise ValueError("need at least two bin edges")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing")
    if edges[0] != 0.0 or edges[-1] != 1.0:
        raise ValueError("bin edges must cover [0, 1]")
    values = list(values)
    if not values:
        raise ValueError("cannot build a distribution from no values")
    counts = [0] * (len(edges) - 1)
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"value {v} outside [0, 1]")
        idx = bisect_right(edges, v) - 1
        if idx == len(counts):  # v == 1.0 belongs to the closed last bin
            idx -= 1
        counts[idx] += 1
    n = len(values)
    return Histogram(
        bin_edges=edges,
        counts=tuple(counts),
        ratios=tuple(c / n for c in counts),
    )


# --------------------------------------------------------------------
# Shipped prompt templates (one per scheme) and the per-benchmark
# instruction strings they expect.
# --------------------------------------------------------------------

FINE_GRAINED_0_10_PROMPT = """\
Given a query and a document, please give a relevance score of 0 to 10.
The goal or relevance definition is: {instruction}

Here is the query:
{query}

Here is the document:
{document}

After thinking, directly choose a relevance score from [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10].
- 0 represents completely not related.
- 10 means perfectly related.

Desired output format:
<think>put your thinking here</think><answer> Only allows an integer here</answer>

Your output:
"""

FINE_GRAINED_0_3_PROMPT = """\
Given a query and a document, please give a relevance score of 0 to 3.
The goal or relevance definition is: {instruction}

Here is the query:
{query}

Here is the document:
{document}

After thinking, directly choose a relevance score from [0, 1, 2, 3].
- 0 represents completely not related.
- 3 means perfectly related.

Desired output format:
<think>put your thinking here</think><answer> Only allows an integer here</answer>

Your output:
"""

BINARY_PLAIN_PROMPT = """\
Given a query and a document, please give a relevance judgement of yes/no.
The goal or relevance definition is: {instruction}

Here is the query:
{query}

Here is the document:
{document}

Please directly choose a relevance judgement from [yes, no].
Only output one word, no other words are allowed.

Your output:
"""

BINARY_THINK_PROMPT = """\
Given a query and a document, please give a relevance judgement of yes/no.
The goal or relevance definition is: {instruction}

Here is the query:
{query}

Here is the document:
{document}

After thinking, please directly choose a relevance judgement from [yes, no].

Desired output format:
<think>put your thinking here</think><answer> Only allows yes/no here</answer>

Your output:
"""

DEFAULT_TEMPLATES: dict[str, PromptTemplate] = {
    "int_0_10": PromptTemplate(FINE_GRAINED_0_10_PROMPT, "int_0_10"),
    "int_0_3": PromptTemplate(FINE_GRAINED_0_3_PROMPT, "int_0_3"),
    "binary_plain": PromptTemplate(BINARY_PLAIN_PROMPT, "binary_plain"),
    "binary_think": PromptTemplate(BINARY_THINK_PROMPT, "binary_think"),
}

_BRIGHT_DEFAULT_INSTRUCTION = (
    "A document is relevant if it contains information that helps answer or "
    "address the query. A document is not relevant if it doesn't contain "
    "information that helps answer the query, even if it mentions similar "
    "topics."
)

INSTRUCTIONS: dict[str, str] = {
    "bright/aops": (
        "We want to find different but similar math problems to the query. "
        "A document is relevant if it uses the same class of functions and "
        "shares any overlapping techniques."
    ),
    "bright/leetcode": (
        "I am looking to find different problems that share similar data "
        "structures (of any kind) or algorithms (e.g. DFS, DP, sorting, "
        "traversals, etc.). I am looking for problems that share one or both "
        "of these similarities to the query. Does the passage below share any "
        "similarities? e.g. if there was a textbook on leetcode problems, "
        "this would be in the same book even though it could be in a "
        "different chapter."
    ),
    "bright/pony": (
        "I will use the programming language pony. But to solve the problem "
        "above, I need to know things about pony. A passage is relevant if "
        "it contains docs that match any part (even basic parts) of the code "
        "I will have to write for the above program."
    ),
    "bright/theoremqa_questions": (
        "We want to find a document which uses the same mathematical process "
        "as the query. A document is relevant if it uses the same "
        "mathematical process as the query."
    ),
    "bright/theoremqa_theorems": (
        "We want to find a document which uses the same mathematical process "
        "as the query. A document is relevant if it uses the same "
        "mathematical process as the query."
    ),
    "bright/default": _BRIGHT_DEFAULT_INSTRUCTION,
    "beir": "Given a query, retrieval relevant passage.",
    "trec_dl": "Given a query, retrieval relevant passage.",
    "followir": (
        "Retrieval the relevant passage for the given query. Be careful "
        "about the extra requirements about relevance in the query."
    ),
}


def instruction_for(subset: str) -> str:
    """Instruction string for a benchmark subset; unknown BRIGHT subsets
    fall back to the generic BRIGHT instruction."""
    key = subset.lower()
    if key in INSTRUCTIONS:
        return INSTRUCTIONS[key]
    if key.startswith("bright"):
        return INSTRUCTIONS["bright/default"]
    raise KeyError(f"no instruction registered for subset {subset!r}")
