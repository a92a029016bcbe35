"""Pluggable generative scorer backends and the latency harness.

The mock backend is a seeded, deterministic stand-in for an LLM scorer:
it reads a document marker out of the prompt, looks up a latent
relevance grade, and emits a think/answer generation whose score is the
grade plus Gaussian noise. Its answer-token probability decreases
smoothly with the noise magnitude so probability-weighted scores stay
informative. A derived per-request seed makes responses independent of
request order and concurrency.

The HTTP backend speaks the OpenAI-compatible completions wire format
and requires token log-probabilities.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import httpx
import numpy as np

from .data import QueryGroup
from .errors import BackendConfigError, BackendError
from .scoring import (
    ParsedOutput,
    PromptTemplate,
    binary_relevance_score,
    fine_grained_score,
    parse_output,
    render_prompt,
    with_answer_prob,
)


@dataclass(frozen=True)
class ScoreRequest:
    prompt: str
    scheme: str
    n: int = 1
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("generation count must be >= 1")


@dataclass(frozen=True)
class Generation:
    """One generated trajectory with log-probs over its answer span."""

    text: str
    answer_token_logprobs: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ScoreResponse:
    generations: tuple[Generation, ...]
    latency: float = 0.0


class ScorerBackend:
    """Base interface: thread-safe generation plus prompt preparation."""

    def generate(self, request: ScoreRequest) -> ScoreResponse:
        raise NotImplementedError

    def prepare_document(self, doc_id: str, text: str) -> str:
        """Hook for backends that need to recognize the document inside
        the rendered prompt. Default: pass the text through."""
        return text


def derive_seed(*parts: object) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class MockBackendConfig:
    """Deterministic mock scorer settings.

    ``oracle`` maps doc_id to a latent relevance grade in [0, 1]; the
    emitted integer is the grade scaled to the scheme's range plus
    Gaussian noise. With probability ``malformation_prob`` a generation
    is malformed. Per-call latency is ``latency_base`` plus uniform
    jitter and is actually slept, so wall-clock measurements are real.
    """

    seed: int
    oracle: Mapping[str, float]
    noise_std: float = 0.0
    malformation_prob: float = 0.0
    latency_base: float = 0.0
    latency_jitter: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.malformation_prob <= 1.0:
            raise ValueError("malformation_prob must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.latency_base < 0 or self.latency_jitter < 0:
            raise ValueError("latency parameters must be >= 0")
        for doc_id, grade in self.oracle.items():
            if not 0.0 <= grade <= 1.0:
                raise ValueError(
                    f"latent grade {grade} for {doc_id!r} outside [0, 1]"
                )


_DOC_MARKER_RE = re.compile(r"\[\[doc:(?P<doc_id>[^\]]+)\]\]")

_MALFORMED_SHAPES = (
    "I believe the relevance is {s}.",
    "<think>{s}</think>answer: {s}",
    "<think>partial reasoning</think><answer></answer>",
    "<answer>{s}</answer><answer>{s}</answer>",
)


def embed_doc_marker(doc_id: str, text: str) -> str:
    return f"[[doc:{doc_id}]] {text}"


class MockBackend(ScorerBackend):
    """Seeded oracle-driven scorer; same (seed, request) always yields
    byte-identical responses, regardless of concurrency."""

    def __init__(self, config: MockBackendConfig):
        self.config = config

    def prepare_document(self, doc_id: str, text: str) -> str:
        return embed_doc_marker(doc_id, text)

    def _scheme_max(self, scheme: str) -> int:
        return 3 if scheme == "int_0_3" else 10

    def generate(self, request: ScoreRequest) -> ScoreResponse:
        cfg = self.config
        match = _DOC_MARKER_RE.search(request.prompt)
        if match is None:
            raise BackendConfigError("prompt carries no [[doc:...]] marker")
        doc_id = match.group("doc_id")
        if doc_id not in cfg.oracle:
            raise BackendConfigError(f"no oracle grade for doc_id {doc_id!r}")
        latent = cfg.oracle[doc_id]

        request_rng = np.random.default_rng(derive_seed(cfg.seed, request.prompt))
        latency = cfg.latency_base + request_rng.uniform(0.0, cfg.latency_jitter)

        generations = []
        for i in range(request.n):
            rng = np.random.default_rng(derive_seed(cfg.seed, request.prompt, i))
            noise = rng.normal(0.0, cfg.noise_std) if cfg.noise_std > 0 else 0.0
            scaled = latent * self._scheme_max(request.scheme) + noise
            if rng.random() < cfg.malformation_prob:
                shape = _MALFORMED_SHAPES[int(rng.integers(len(_MALFORMED_SHAPES)))]
                generations.append(Generation(text=shape.format(s=round(scaled))))
                continue
            if request.scheme in ("binary_plain", "binary_think"):
                word = "yes" if round(latent * 10 + noise) > 0 else "no"
                if request.scheme == "binary_plain":
                    text = word
                else:
                    text = f"<think>relevance check</think><answer>{word}</answer>"
            else:
                top = self._scheme_max(request.scheme)
                score = int(min(max(round(scaled), 0), top))
                text = f"<think>relevance check</think><answer>{score}</answer>"
            generations.append(
                Generation(text=text, answer_token_logprobs=(-abs(noise),))
            )
        if latency > 0:
            time.sleep(latency)
        return ScoreResponse(generations=tuple(generations), latency=latency)


@dataclass(frozen=True)
class HttpBackendConfig:
    """OpenAI-compatible completions endpoint settings.

    ``url`` is the full completions URL. The token is read from the
    environment by the CLI; it never lives in config files.
    """

    url: str
    model: str
    api_token: str | None = None
    timeout: float = 30.0
    max_attempts: int = 3
    backoff_base: float = 0.25
    max_tokens: int = 512


_ANSWER_SPAN_RE = re.compile(r"<answer>([^<>]*)</answer>")


def _answer_char_span(text: str, scheme: str) -> tuple[int, int] | None:
    """Character range of the answer payload inside a generation."""
    if scheme == "binary_plain":
        stripped = text.strip()
        if not stripped:
            return None
        start = text.index(stripped)
        return start, start + len(stripped)
    match = _ANSWER_SPAN_RE.search(text)
    if match is None:
        return None
    content = match.group(1)
    trimmed = content.strip()
    if not trimmed:
        return None
    start = match.start(1) + content.index(trimmed)
    return start, start + len(trimmed)


class HttpBackend(ScorerBackend):
    """Client for completion endpoints that report token log-probs.

    Transport failures and 5xx responses are retried with exponential
    backoff; a provider that does not return log-probs is a terminal
    configuration error.
    """

    def __init__(self, config: HttpBackendConfig, client: httpx.Client | None = None):
        self.config = config
        headers = {}
        if config.api_token:
            headers["Authorization"] = f"Bearer {config.api_token}"
        self._client = client or httpx.Client(
            timeout=config.timeout, headers=headers
        )

    def _post(self, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.config.max_attempts):
            if attempt > 0:
                time.sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                response = self._client.post(self.config.url, json=payload)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = BackendError(
                    f"server error {response.status_code}"
                )
                continue
            if response.status_code >= 400:
                raise BackendConfigError(
                    f"request rejected with status {response.status_code}: "
                    f"{response.text[:200]}"
                )
            return response.json()
        raise BackendError(
            f"request failed after {self.config.max_attempts} attempts: {last_error}"
        )

    def generate(self, request: ScoreRequest) -> ScoreResponse:
        payload = {
            "model": self.config.model,
            "prompt": request.prompt,
            "n": request.n,
            "temperature": request.temperature,
            "max_tokens": self.config.max_tokens,
            "logprobs": 0,
        }
        started = time.perf_counter()
        data = self._post(payload)
        latency = time.perf_counter() - started
        choices = data.get("choices")
        if not isinstance(choices, list) or len(choices) != request.n:
            raise BackendError(
                f"expected {request.n} choices, got "
                f"{len(choices) if isinstance(choices, list) else type(choices)}"
            )
        generations = []
        for choice in choices:
            text = choice.get("text", "")
            logprobs = choice.get("logprobs")
            if not logprobs or "tokens" not in logprobs:
                raise BackendConfigError(
                    "provider response carries no token log-probs; enable "
                    "logprobs support or use the mock backend"
                )
            tokens: Sequence[str] = logprobs["tokens"]
            token_logprobs: Sequence[float] = logprobs["token_logprobs"]
            offsets = logprobs.get("text_offset")
            if offsets is None:
                offsets = []
                pos = 0
                for token in tokens:
                    offsets.append(pos)
                    pos += len(token)
            span = _answer_char_span(text, request.scheme)
            answer_lps: tuple[float, ...] | None = None
            if span is not None:
                a, b = span
                picked = [
                    float(lp)
                    for token, start, lp in zip(tokens, offsets, token_logprobs)
                    if lp is not None and start < b and start + len(token) > a
                ]
                if picked:
                    answer_lps = tuple(picked)
            generations.append(
                Generation(text=text, answer_token_logprobs=answer_lps)
            )
        return ScoreResponse(generations=tuple(generations), latency=latency)


# --------------------------------------------------------------------
# Pointwise scoring runner
# --------------------------------------------------------------------


@dataclass(frozen=True)
class PointwiseResult:
    """Scores per (query_id, doc_id) plus an end-to-end wall-clock
    measurement and failure/parse accounting."""

    scores: Mapping[tuple[str, str], float]
    wall_clock_seconds: float
    parallelism: int
    n_requests: int
    failures: Mapping[tuple[str, str], str] = field(default_factory=dict)
    unparsed: int = 0

    def failed_queries(self) -> frozenset[str]:
        return frozenset(qid for qid, _ in self.failures)


def score_generation(generation: Generation, scheme: str) -> float | None:
    """Scalar ranking score of one generation, or None when the output
    is unformatted."""
    parsed = parse_output(generation.text, scheme)
    if not parsed.formatted:
        return None
    parsed = with_answer_prob(parsed, generation.answer_token_logprobs)
    if parsed.answer_token_prob is None:
        return None
    if scheme in ("binary_plain", "binary_think"):
        return binary_relevance_score(parsed)
    return fine_grained_score(parsed)


def run_pointwise(
    groups: Sequence[QueryGroup],
    backend: ScorerBackend,
    parallelism: int,
    template: PromptTemplate,
    temperature: float = 0.0,
) -> PointwiseResult:
    """Score every (query, document) pair independently.

    At most ``parallelism`` requests are in flight at once. Scores are
    keyed by (query_id, doc_id) and do not depend on the parallelism
    level; unformatted outputs score 0 and are counted. The worker pool
    is spun up before the clock starts, so the wall-clock figure
    reflects steady-state parallel scoring rather than thread startup.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    pairs = [(group, doc) for group in groups for doc in group.candidates]

    def score_pair(group: QueryGroup, doc) -> tuple[float | None, str | None]:
        prompt = render_prompt(
            template,
            group.instruction,
            group.query_text,
            backend.prepare_document(doc.doc_id, doc.text),
        ).text
        request = ScoreRequest(
            prompt=prompt, scheme=template.scheme, n=1, temperature=temperature
        )
        try:
            response = backend.generate(request)
        except BackendError as exc:
            return None, str(exc)
        if len(response.generations) != request.n:
            return None, "backend returned wrong generation count"
        return score_generation(response.generations[0], template.scheme), None

    scores: dict[tuple[str, str], float] = {}
    failures: dict[tuple[str, str], str] = {}
    unparsed = 0
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        # a barrier forces the pool to actually spawn every worker
        barrier = threading.Barrier(parallelism)
        for warmup in [pool.submit(barrier.wait) for _ in range(parallelism)]:
            warmup.result()
        started = time.perf_counter()
        futures = {
            pool.submit(score_pair, group, doc): (group.query_id, doc.doc_id)
            for group, doc in pairs
        }
        for future, key in futures.items():
            score, error = future.result()
            if error is not None:
                failures[key] = error
            elif score is None:
                unparsed += 1
                scores[key] = 0.0
            else:
                scores[key] = score
    wall_clock = time.perf_counter() - started
    return PointwiseResult(
        scores=scores,
        wall_clock_seconds=wall_clock,
        parallelism=parallelism,
        n_requests=len(pairs),
        failures=failures,
        unparsed=unparsed,
    )


# --------------------------------------------------------------------
# Latency modelling
# --------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyModel:
    """Per-call latency: base plus uniform jitter, in seconds."""

    base: float = 0.1
    jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.base < 0 or self.jitter < 0:
            raise ValueError("latency parameters must be >= 0")

    def sample(self, rng: np.random.Generator) -> float:
        return self.base + rng.uniform(0.0, self.jitter)


def listwise_call_count(n_docs: int, window: int, stride: int) -> int:
    """Number of sequential sliding-window calls over a candidate list:
    1 + ceil((N - w) / stride)."""
    if not 1 <= stride < window <= n_docs:
        raise ValueError(
            f"need 1 <= stride < window <= n_docs, got stride={stride}, "
            f"window={window}, n_docs={n_docs}"
        )
    return 1 + math.ceil((n_docs - window) / stride)


def simulate_listwise_latency(
    n_docs: int, window: int, stride: int, model: LatencyModel, seed: int = 0
) -> float:
    """Total duration of a sliding-window pass: the windows are strictly
    sequential, so the duration is the sum of the sampled call
    latencies."""
    calls = listwise_call_count(n_docs, window, stride)
    rng = np.random.default_rng(seed)
    return float(sum(model.sample(rng) for _ in range(calls)))


def simulate_pointwise_latency(
    n_docs: int, parallelism: int, model: LatencyModel, seed: int = 0
) -> float:
    """Makespan of N independent calls on ``parallelism`` workers,
    assigning each call to the earliest-free worker. With constant
    latency t this is ceil(N / P) * t."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    rng = np.random.default_rng(seed)
    workers = [0.0] * min(parallelism, n_docs)
    heapq.heapify(workers)
    makespan = 0.0
    for _ in range(n_docs):
        free_at = heapq.heappop(workers)
        done = free_at + model.sample(rng)
        makespan = max(makespan, done)
        heapq.heappush(workers, done)
    return makespan


@dataclass(frozen=True)
class LatencyReportRow:
    method: str
    n_docs: int
    setting: str
    duration_seconds: float


def latency_report_text(rows: Sequence[LatencyReportRow]) -> str:
    lines = ["method\tN\tsetting\twall_clock_s"]
    for row in rows:
        lines.append(
            f"{row.method}\t{row.n_docs}\t{row.setting}\t"
            f"{row.duration_seconds:.6f}"
        )
    return "\n".join(lines) + "\n"


def mock_oracle_from_groups(groups: Sequence[QueryGroup]) -> dict[str, float]:
    """Latent grades for the mock scorer derived from dataset labels,
    normalized by the maximum grade present (binary labels map to
    {0.0, 1.0}). Assumes doc_ids are globally unique across groups."""
    max_grade = max(
        (grade for g in groups for grade in g.labels.values()), default=0
    )
    scale = float(max_grade) if max_grade > 0 else 1.0
    oracle: dict[str, float] = {}
    for group in groups:
        for doc in group.candidates:
            oracle[doc.doc_id] = group.grade(doc.doc_id) / scale
    return oracle


def save_rollout_dump(
    path: str,
    entries: Sequence[tuple[str, str, int, str, float]],
) -> None:
    """Line-delimited rollout records: (query_id, doc_id, rollout_idx,
    raw_text, ref_score)."""
    with open(path, "w", encoding="utf-8") as handle:
        for qid, did, idx, raw, ref in entries:
            handle.write(
                json.dumps(
                    {
                        "query_id": qid,
                        "doc_id": did,
                        "rollout_idx": idx,
                        "raw_text": raw,
                        "ref_score": ref,
                    }
                )
                + "\n"
            )
