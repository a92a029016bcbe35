"""Training-data synthesis: stratified negatives, consensus selection,
and length filtering.

For each query the candidate pool is enriched from a deep retrieval
ranking: the top ranks supply hard negatives, the middle medium, the
rest easy. Every (query, document) pair is scored several times by a
teacher scorer; the generation whose integer score is closest to the
mean of the group is kept. A query is emitted only when all of its 20
documents yield a usable, length-bounded trajectory, so emitted queries
always carry exactly 20 documents with exactly one positive.
"""

from __future__ import annotations

import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

from .backends import ScoreRequest, ScorerBackend, derive_seed
from .data import QueryGroup, RunEntry
from .errors import BackendConfigError, BackendError, DataError
from .scoring import (
    DEFAULT_TEMPLATES,
    ParsedOutput,
    Tokenizer,
    WhitespaceTokenizer,
    parse_output,
    render_prompt,
    with_answer_prob,
)

MAX_RANKING_DEPTH = 1000

STRATUM_POSITIVE = "positive"
STRATUM_PRESUPPLIED = "presupplied_negative"
STRATUM_HARD = "hard"
STRATUM_MEDIUM = "medium"
STRATUM_EASY = "easy"


@dataclass(frozen=True)
class RetrievalRanking:
    """Deep first-stage ranking for one query: (doc_id, score) pairs in
    descending score order, at most 1,000 deep."""

    query_id: str
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        if len(self.entries) > MAX_RANKING_DEPTH:
            raise ValueError(
                f"ranking for {self.query_id!r} exceeds depth {MAX_RANKING_DEPTH}"
            )
        for (_, s1), (_, s2) in zip(self.entries, self.entries[1:]):
            if s2 > s1:
                raise ValueError(
                    f"ranking for {self.query_id!r} has ascending scores"
                )

    def doc_at_rank(self, rank: int) -> str:
        return self.entries[rank - 1][0]

    @property
    def depth(self) -> int:
        return len(self.entries)


def rankings_from_run(
    entries: Sequence[RunEntry],
) -> dict[str, RetrievalRanking]:
    """Group TREC run entries into per-query rankings, truncated to the
    supported depth."""
    by_query: dict[str, list[RunEntry]] = {}
    for entry in entries:
        by_query.setdefault(entry.query_id, []).append(entry)
    rankings = {}
    for qid, rows in by_query.items():
        rows = sorted(rows, key=lambda e: e.rank)[:MAX_RANKING_DEPTH]
        rankings[qid] = RetrievalRanking(
            query_id=qid, entries=tuple((e.doc_id, e.score) for e in rows)
        )
    return rankings


class StratumCounts(NamedTuple):
    hard: int
    medium: int
    easy: int

    @property
    def total(self) -> int:
        return self.hard + self.medium + self.easy


@dataclass(frozen=True)
class SynthesisConfig:
    """Stratum rank ranges and pipeline knobs.

    Ranges are inclusive 1-based retrieval ranks and must be disjoint
    and ordered. Each emitted query carries ``docs_per_query`` documents
    (one positive plus 19 negatives).
    """

    hard_range: tuple[int, int] = (1, 10)
    medium_range: tuple[int, int] = (11, 100)
    easy_range: tuple[int, int] = (101, 1000)
    docs_per_query: int = 20
    consensus_samples: int = 3
    max_output_tokens: int = 2048
    seed: int = 0

    def __post_init__(self) -> None:
        ranges = (self.hard_range, self.medium_range, self.easy_range)
        for lo, hi in ranges:
            if not 1 <= lo <= hi:
                raise ValueError(f"bad stratum range ({lo}, {hi})")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if lo <= hi:
                raise ValueError("stratum ranges must be disjoint and ordered")
        if self.docs_per_query < 2:
            raise ValueError("docs_per_query must be >= 2")
        if self.consensus_samples < 1:
            raise ValueError("consensus_samples must be >= 1")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    def range_for(self, stratum: str) -> tuple[int, int]:
        return {
            STRATUM_HARD: self.hard_range,
            STRATUM_MEDIUM: self.medium_range,
            STRATUM_EASY: self.easy_range,
        }[stratum]


def default_stratum_counts(
    n_presupplied_negatives: int, negatives_needed: int = 19
) -> StratumCounts:
    """Split the negatives still needed after any pre-existing synthetic
    negatives: up to 10 hard, then the remainder half medium (rounding
    up) and half easy."""
    remaining = negatives_needed - n_presupplied_negatives
    if remaining < 0:
        raise ValueError(
            f"{n_presupplied_negatives} pre-existing negatives exceed the "
            f"{negatives_needed} needed"
        )
    hard = min(10, remaining)
    rest = remaining - hard
    medium = math.ceil(rest / 2)
    return StratumCounts(hard=hard, medium=medium, easy=rest - medium)


@dataclass(frozen=True)
class SampledNegative:
    doc_id: str
    rank: int
    stratum: str


def sample_negatives(
    ranking: RetrievalRanking,
    exclude: frozenset[str] | set[str],
    counts: StratumCounts,
    seed: int,
    config: SynthesisConfig = SynthesisConfig(),
) -> list[SampledNegative]:
    """Draw stratified negatives from a retrieval ranking.

    Hard negatives are taken top-down from the hard range; medium and
    easy negatives are sampled uniformly without replacement from their
    ranges. Documents in ``exclude`` (positives and pre-existing
    candidates) never appear; a shortfall in one stratum is backfilled
    by requesting more from the next, easier stratum. If the easiest
    stratum cannot cover the remainder, the call fails naming the range
    and shortfall.
    """
    rng = random.Random(seed)
    pools: dict[str, list[tuple[int, str]]] = {}
    for stratum in (STRATUM_HARD, STRATUM_MEDIUM, STRATUM_EASY):
        lo, hi = config.range_for(stratum)
        hi = min(hi, ranking.depth)
        pools[stratum] = [
            (rank, ranking.doc_at_rank(rank))
            for rank in range(lo, hi + 1)
            if ranking.doc_at_rank(rank) not in exclude
        ]

    sampled: list[SampledNegative] = []
    carry = 0
    for stratum, requested in (
        (STRATUM_HARD, counts.hard),
        (STRATUM_MEDIUM, counts.medium),
        (STRATUM_EASY, counts.easy),
    ):
        want = requested + carry
        pool = pools[stratum]
        take = min(want, len(pool))
        if stratum == STRATUM_HARD:
            chosen = pool[:take]
        else:
            chosen = sorted(rng.sample(pool, take))
        sampled.extend(
            SampledNegative(doc_id=doc_id, rank=rank, stratum=stratum)
            for rank, doc_id in chosen
        )
        carry = want - take
    if carry > 0:
        lo, hi = config.easy_range
        raise DataError(
            f"ranking for {ranking.query_id!r}: stratum ({lo}, {hi}) is short "
            f"{carry} document(s) after backfilling"
        )
    return sampled


def consensus_select(
    generations: Sequence[ParsedOutput],
) -> tuple[ParsedOutput, float]:
    """Pick the generation whose score is closest to the group mean.

    The consensus score is the arithmetic mean of the formatted
    generations' scores; ties on distance go to the earliest
    generation. At least one formatted generation is required.
    """
    formatted = [g for g in generations if g.formatted]
    if not formatted:
        raise ValueError("consensus needs at least one formatted generation")
    consensus = sum(g.score for g in formatted) / len(formatted)
    selected = min(formatted, key=lambda g: abs(g.score - consensus))
    return selected, consensus


@dataclass(frozen=True)
class SftRecord:
    """One (prompt, trajectory, score) training example with
    provenance."""

    query_id: str
    doc_id: str
    prompt: str
    trajectory: str
    consensus_score: float
    grade: int
    stratum: str
    profile: str

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "prompt": self.prompt,
            "trajectory": self.trajectory,
            "consensus_score": self.consensus_score,
            "grade": self.grade,
            "stratum": self.stratum,
            "profile": self.profile,
        }


def filter_by_length(
    records: Sequence[SftRecord],
    max_output_tokens: int,
    tokenizer: Tokenizer | None = None,
) -> tuple[list[SftRecord], int]:
    """Keep records whose trajectory is at most ``max_output_tokens``
    tokens long (the limit itself is inclusive); report the drop count."""
    tok = tokenizer if tokenizer is not None else WhitespaceTokenizer()
    kept = [r for r in records if tok.count(r.trajectory) <= max_output_tokens]
    return kept, len(records) - len(kept)


@dataclass
class SynthesisReport:
    """Counts per stratum and drop reasons for one synthesis run."""

    queries_total: int = 0
    queries_emitted: int = 0
    records_emitted: int = 0
    instances_dropped_by_length: int = 0
    instances_failed: int = 0
    stratum_counts: dict[str, int] = field(default_factory=dict)
    dropped_queries: dict[str, str] = field(default_factory=dict)

    def as_text(self) -> str:
        lines = [
            "synthesis report",
            f"queries_total\t{self.queries_total}",
            f"queries_emitted\t{self.queries_emitted}",
            f"records_emitted\t{self.records_emitted}",
            f"instances_dropped_by_length\t{self.instances_dropped_by_length}",
            f"instances_failed\t{self.instances_failed}",
        ]
        for stratum in sorted(self.stratum_counts):
            lines.append(f"stratum_{stratum}\t{self.stratum_counts[stratum]}")
        for qid in sorted(self.dropped_queries):
            lines.append(f"dropped\t{qid}\t{self.dropped_queries[qid]}")
        return "\n".join(lines) + "\n"


_TEACHER_ATTEMPTS = 3


def _request_teacher(
    teacher: ScorerBackend, request: ScoreRequest
) -> tuple[list[ParsedOutput], str | None]:
    """Request k generations with retries; parse and attach answer-token
    probabilities. Returns (parsed, failure_reason)."""
    last_error: str | None = None
    for _ in range(_TEACHER_ATTEMPTS):
        try:
            response = teacher.generate(request)
        except BackendConfigError as exc:
            return [], f"teacher misconfigured: {exc}"
        except BackendError as exc:
            last_error = str(exc)
            continue
        if len(response.generations) != request.n:
            return [], "teacher returned wrong generation count"
        parsed = [
            with_answer_prob(
                parse_output(gen.text, request.scheme), gen.answer_token_logprobs
            )
            for gen in response.generations
        ]
        return parsed, None
    return [], f"teacher failed after {_TEACHER_ATTEMPTS} attempts: {last_error}"


def build_sft_dataset(
    groups: Sequence[QueryGroup],
    rankings: Mapping[str, RetrievalRanking],
    teacher: ScorerBackend,
    config: SynthesisConfig = SynthesisConfig(),
    corpus: Mapping[str, str] | None = None,
    profile: str = "custom",
    tokenizer: Tokenizer | None = None,
    temperature: float = 1.0,
    parallelism: int = 1,
) -> tuple[list[SftRecord], SynthesisReport]:
    """Run the full synthesis pipeline over a set of query groups.

    Each input group must carry exactly one positive; its remaining
    candidates are treated as pre-existing synthetic negatives and the
    rest of the 20-document set is sampled from the query's retrieval
    ranking (texts resolved through ``corpus``). Every document is
    scored ``consensus_samples`` times by the teacher; failures and
    over-long selections drop the whole query so emitted queries stay
    structurally uniform.
    """
    corpus = corpus or {}
    tok = tokenizer if tokenizer is not None else WhitespaceTokenizer()
    template = DEFAULT_TEMPLATES["int_0_10"]
    report = SynthesisReport(queries_total=len(groups))
    records: list[SftRecord] = []

    plan: list[tuple[QueryGroup, list[tuple[str, str, int, str]]]] = []
    for group in groups:
        positives = group.positive_ids()
        if len(positives) != 1:
            raise DataError(
                f"query {group.query_id!r} must have exactly 1 positive, "
                f"found {len(positives)}"
            )
        if group.query_id not in rankings:
            raise DataError(f"no retrieval ranking for query {group.query_id!r}")
        n_pre = len(group.candidates) - 1
        counts = default_stratum_counts(
            n_pre, negatives_needed=config.docs_per_query - 1
        )
        sampled = sample_negatives(
            rankings[group.query_id],
            exclude={d.doc_id for d in group.candidates},
            counts=counts,
            seed=derive_seed(config.seed, group.query_id),
            config=config,
        )
        positive_id = next(iter(positives))
        docs: list[tuple[str, str, int, str]] = []  # (doc_id, text, grade, stratum)
        for doc in group.candidates:
            stratum = (
                STRATUM_POSITIVE if doc.doc_id == positive_id else STRATUM_PRESUPPLIED
            )
            docs.append((doc.doc_id, doc.text, group.grade(doc.doc_id), stratum))
        for neg in sampled:
            if neg.doc_id not in corpus:
                raise DataError(
                    f"query {group.query_id!r}: sampled doc {neg.doc_id!r} "
                    "missing from the corpus"
                )
            docs.append((neg.doc_id, corpus[neg.doc_id], 0, neg.stratum))
        plan.append((group, docs))

    def score_instance(
        group: QueryGroup, doc_id: str, text: str
    ) -> tuple[str, list[ParsedOutput], str | None]:
        prompt = render_prompt(
            template,
            group.instruction,
            group.query_text,
            teacher.prepare_document(doc_id, text),
            tokenizer=tok,
        ).text
        request = ScoreRequest(
            prompt=prompt,
            scheme=template.scheme,
            n=config.consensus_samples,
            temperature=temperature,
        )
        parsed, failure = _request_teacher(teacher, request)
        return prompt, parsed, failure

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        futures = {
            (group.query_id, doc_id): pool.submit(score_instance, group, doc_id, text)
            for group, docs in plan
            for doc_id, text, _, _ in docs
        }
        results = {key: future.result() for key, future in futures.items()}

    for group, docs in plan:
        query_records: list[SftRecord] = []
        drop_reason: str | None = None
        for doc_id, _text, grade, stratum in docs:
            prompt, parsed, failure = results[(group.query_id, doc_id)]
            if failure is not None:
                report.instances_failed += 1
                drop_reason = f"{doc_id}: {failure}"
                continue
            try:
                selected, consensus = consensus_select(parsed)
            except ValueError:
                report.instances_failed += 1
                drop_reason = f"{doc_id}: no formatted generation"
                continue
            query_records.append(
                SftRecord(
                    query_id=group.query_id,
                    doc_id=doc_id,
                    prompt=prompt,
                    trajectory=selected.raw_text,
                    consensus_score=consensus,
                    grade=grade,
                    stratum=stratum,
                    profile=profile,
                )
            )
        kept, dropped = filter_by_length(
            query_records, config.max_output_tokens, tokenizer=tok
        )
        report.instances_dropped_by_length += dropped
        if drop_reason is None and dropped > 0:
            drop_reason = f"{dropped} trajectory(ies) over the token limit"
        if drop_reason is not None or len(kept) != config.docs_per_query:
            report.dropped_queries[group.query_id] = (
                drop_reason or "incomplete document set"
            )
            continue
        records.extend(kept)
        report.queries_emitted += 1
        for record in kept:
            report.stratum_counts[record.stratum] = (
                report.stratum_counts.get(record.stratum, 0) + 1
            )
    report.records_emitted = len(records)
    return records, report


def write_sft_dataset(records: Sequence[SftRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_record()) + "\n")
