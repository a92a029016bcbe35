"""Deterministic ranking from scores and IR metrics (DCG, nDCG@k, MRR).

Gains follow the graded convention ``2^rel - 1`` with a
``1 / log2(rank + 1)`` discount. IDCG is computed over all judged
documents for the query, including judged-but-unretrieved ones, which
matches how nDCG@10 is conventionally reported on shared benchmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .data import QueryGroup, RelevanceJudgments, RunEntry
from .errors import DataError


@dataclass(frozen=True)
class RankedList:
    """Documents for one query ordered by non-increasing score.

    Ties are broken by ascending doc_id so rankings are reproducible.
    """

    query_id: str
    entries: tuple[tuple[str, float], ...]  # (doc_id, score), best first

    def __post_init__(self) -> None:
        for (d1, s1), (d2, s2) in zip(self.entries, self.entries[1:]):
            if s2 > s1:
                raise ValueError(
                    f"query {self.query_id!r}: scores increase at {d2!r}"
                )
            if s2 == s1 and d2 < d1:
                raise ValueError(
                    f"query {self.query_id!r}: tie between {d1!r} and {d2!r} "
                    "not broken by ascending doc_id"
                )

    def doc_ids(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.entries)


def rank_by_score(group: QueryGroup, scores: Mapping[str, float]) -> RankedList:
    """Sort a query's candidates by descending score.

    Every candidate must have a score; ties are broken by ascending
    doc_id.
    """
    missing = [d.doc_id for d in group.candidates if d.doc_id not in scores]
    if missing:
        raise DataError(
            f"query {group.query_id!r}: no score for doc_id(s) {missing}"
        )
    ordered = sorted(
        ((d.doc_id, float(scores[d.doc_id])) for d in group.candidates),
        key=lambda pair: (-pair[1], pair[0]),
    )
    return RankedList(query_id=group.query_id, entries=tuple(ordered))


def ranked_list_to_run_entries(ranked: RankedList, run_tag: str) -> list[RunEntry]:
    return [
        RunEntry(ranked.query_id, doc_id, rank, score, run_tag)
        for rank, (doc_id, score) in enumerate(ranked.entries, start=1)
    ]


def _gain(grade: int) -> float:
    return float(2**grade - 1)


def dcg_at_k(gains_in_ranked_order: Sequence[int], k: int) -> float:
    """Discounted cumulative gain over the first k positions.

    Position p (1-based) contributes ``(2^rel - 1) / log2(p + 1)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    total = 0.0
    for pos, grade in enumerate(gains_in_ranked_order[:k], start=1):
        total += _gain(grade) / math.log2(pos + 1)
    return total


def ndcg_at_k(
    ranked_grades: Sequence[int], all_grades: Sequence[int], k: int
) -> float:
    """nDCG@k = DCG@k / IDCG@k.

    ``all_grades`` holds the grades of every judged document for the
    query (retrieved or not); the ideal ordering sorts them descending.
    Returns 0 when there is nothing relevant to gain (IDCG = 0).
    """
    dcg = dcg_at_k(ranked_grades, k)
    ideal = sorted(all_grades, reverse=True)
    idcg = dcg_at_k(ideal, k)
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def mrr(ranked_grades: Sequence[int]) -> float:
    """Reciprocal rank of the first positive grade, 0 if none."""
    for pos, grade in enumerate(ranked_grades, start=1):
        if grade > 0:
            return 1.0 / pos
    return 0.0


@dataclass(frozen=True)
class QueryMetrics:
    query_id: str
    ndcg: float
    mrr: float


@dataclass(frozen=True)
class MetricReport:
    k: int
    per_query: tuple[QueryMetrics, ...]
    mean_ndcg: float
    mean_mrr: float

    def as_text(self) -> str:
        """Delimited text: one row per query plus an aggregate row."""
        lines = [f"query_id\tndcg@{self.k}\tmrr"]
        for qm in self.per_query:
            lines.append(f"{qm.query_id}\t{qm.ndcg:.6f}\t{qm.mrr:.6f}")
        lines.append(f"all\t{self.mean_ndcg:.6f}\t{self.mean_mrr:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_run(
    entries: Sequence[RunEntry], qrels: RelevanceJudgments, k: int
) -> MetricReport:
    """Score a run against qrels, averaging over the shared queries.

    Documents missing from the qrels count as grade 0. Queries present
    in only one of the two inputs are ignored; an empty intersection is
    an error.
    """
    by_query: dict[str, list[RunEntry]] = {}
    for entry in entries:
        by_query.setdefault(entry.query_id, []).append(entry)
    shared = sorted(set(by_query) & qrels.query_ids())
    if not shared:
        raise DataError("run and qrels share no query ids")
    per_query = []
    for qid in shared:
        rows = sorted(by_query[qid], key=lambda e: e.rank)
        judged = qrels.for_query(qid)
        ranked_grades = [judged.get(e.doc_id, 0) for e in rows]
        per_query.append(
            QueryMetrics(
                query_id=qid,
                ndcg=ndcg_at_k(ranked_grades, list(judged.values()), k),
                mrr=mrr(ranked_grades),
            )
        )
    n = len(per_query)
    return MetricReport(
        k=k,
        per_query=tuple(per_query),
        mean_ndcg=sum(q.ndcg for q in per_query) / n,
        mean_mrr=sum(q.mrr for q in per_query) / n,
    )
