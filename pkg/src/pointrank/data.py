"""Domain types plus dataset, qrels, and run-file persistence.

Query groups are stored one-per-line as JSON records with candidates
inline, so synthesis output stays streamable. Qrels and run files use
the standard TREC 4- and 6-column text formats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import DataError

# Run scores are always written with 6 fractional digits so files are
# bit-identical across platforms.
SCORE_FORMAT = "{:.6f}"


@dataclass(frozen=True)
class Document:
    """One candidate document for a query."""

    doc_id: str
    text: str
    first_stage_score: float | None = None

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise DataError("document has empty doc_id")


@dataclass(frozen=True)
class QueryGroup:
    """One query with its instruction, candidate documents, and labels.

    The unit of reranking, reward computation, and data synthesis.
    Labels map doc_id to a non-negative relevance grade; grade 0 means
    negative, grade > 0 positive.
    """

    query_id: str
    query_text: str
    instruction: str
    candidates: tuple[Document, ...]
    labels: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.query_id:
            raise DataError("query group has empty query_id")
        if not self.candidates:
            raise DataError(f"query {self.query_id!r} has no candidates")
        seen: set[str] = set()
        for doc in self.candidates:
            if doc.doc_id in seen:
                raise DataError(
                    f"query {self.query_id!r} has duplicate doc_id {doc.doc_id!r}"
                )
            seen.add(doc.doc_id)
        for doc_id, grade in self.labels.items():
            if doc_id not in seen:
                raise DataError(
                    f"query {self.query_id!r} labels unknown doc_id {doc_id!r}"
                )
            if grade < 0:
                raise DataError(
                    f"query {self.query_id!r} has negative grade for {doc_id!r}"
                )

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    def grade(self, doc_id: str) -> int:
        return int(self.labels.get(doc_id, 0))

    def positive_ids(self) -> frozenset[str]:
        return frozenset(d for d, g in self.labels.items() if g > 0)

    def negative_ids(self) -> frozenset[str]:
        positives = self.positive_ids()
        return frozenset(d.doc_id for d in self.candidates) - positives


@dataclass(frozen=True)
class RelevanceJudgments:
    """Graded relevance judgments keyed by (query_id, doc_id)."""

    grades: Mapping[tuple[str, str], int]

    def __post_init__(self) -> None:
        for (qid, did), grade in self.grades.items():
            if grade < 0:
                raise DataError(f"negative grade for ({qid!r}, {did!r})")

    def grade(self, query_id: str, doc_id: str) -> int:
        return int(self.grades.get((query_id, doc_id), 0))

    def for_query(self, query_id: str) -> dict[str, int]:
        return {
            did: g for (qid, did), g in self.grades.items() if qid == query_id
        }

    def query_ids(self) -> frozenset[str]:
        return frozenset(qid for qid, _ in self.grades)


@dataclass(frozen=True)
class RunEntry:
    """One row of a TREC run file."""

    query_id: str
    doc_id: str
    rank: int
    score: float
    run_tag: str

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise DataError(
                f"run entry ({self.query_id!r}, {self.doc_id!r}) has rank {self.rank}"
            )


def load_query_groups(path: str) -> list[QueryGroup]:
    """Load query groups from a line-delimited JSON dataset.

    Each line must be an object with ``query_id``, ``query_text``,
    ``instruction``, ``candidates`` (list of ``{doc_id, text,
    first_stage_score?}``), and optional ``labels`` (``{doc_id: grade}``).
    Returns groups in file order. Malformed lines and duplicate
    query_ids raise :class:`DataError` with the offending line number.
    """
    groups: list[QueryGroup] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON ({exc.msg})", line=lineno, path=path)
            try:
                group = query_group_from_record(record)
            except (DataError, KeyError, TypeError, ValueError) as exc:
                detail = exc.args[0] if exc.args else exc.__class__.__name__
                if isinstance(exc, KeyError):
                    detail = f"missing field {detail!r}"
                raise DataError(str(detail), line=lineno, path=path)
            if group.query_id in seen_ids:
                raise DataError(
                    f"duplicate query_id {group.query_id!r}", line=lineno, path=path
                )
            seen_ids.add(group.query_id)
            groups.append(group)
    return groups


def query_group_from_record(record: Mapping) -> QueryGroup:
    """Build a QueryGroup from one parsed dataset record."""
    candidates = tuple(
        Document(
            doc_id=str(c["doc_id"]),
            text=str(c.get("text", "")),
            first_stage_score=(
                float(c["first_stage_score"])
                if c.get("first_stage_score") is not None
                else None
            ),
        )
        for c in record["candidates"]
    )
    labels = {str(k): int(v) for k, v in record.get("labels", {}).items()}
    return QueryGroup(
        query_id=str(record["query_id"]),
        query_text=str(record["query_text"]),
        instruction=str(record.get("instruction", "")),
        candidates=candidates,
        labels=labels,
    )


def query_group_to_record(group: QueryGroup) -> dict:
    """Inverse of :func:`query_group_from_record`."""
    return {
        "query_id": group.query_id,
        "query_text": group.query_text,
        "instruction": group.instruction,
        "candidates": [
            {
                "doc_id": d.doc_id,
                "text": d.text,
                **(
                    {"first_stage_score": d.first_stage_score}
                    if d.first_stage_score is not None
                    else {}
                ),
            }
            for d in group.candidates
        ],
        "labels": dict(group.labels),
    }


def write_query_groups(groups: Iterable[QueryGroup], path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for group in groups:
            handle.write(json.dumps(query_group_to_record(group)) + "\n")


def load_qrels(path: str) -> RelevanceJudgments:
    """Load TREC 4-column qrels: ``qid iter docid grade``.

    The iteration column is ignored. Non-integer or negative grades
    raise :class:`DataError` with the line number.
    """
    grades: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(
                    f"expected 4 columns, got {len(parts)}", line=lineno, path=path
                )
            qid, _unused_iter, did, grade_str = parts
            try:
                grade = int(grade_str)
            except ValueError:
                raise DataError(
                    f"non-integer grade {grade_str!r}", line=lineno, path=path
                )
            if grade < 0:
                raise DataError(f"negative grade {grade}", line=lineno, path=path)
            grades[(qid, did)] = grade
    return RelevanceJudgments(grades=grades)


def validate_run_entries(entries: Iterable[RunEntry]) -> None:
    """Check per-query run invariants: ranks 1..k with no gaps, scores
    non-increasing in rank order."""
    by_query: dict[str, list[RunEntry]] = {}
    for entry in entries:
        by_query.setdefault(entry.query_id, []).append(entry)
    for qid, rows in by_query.items():
        rows = sorted(rows, key=lambda e: e.rank)
        for i, entry in enumerate(rows, start=1):
            if entry.rank != i:
                raise DataError(
                    f"query {qid!r}: rank gap, expected rank {i} got {entry.rank}"
                )
        for prev, cur in zip(rows, rows[1:]):
            if cur.score > prev.score:
                raise DataError(
                    f"query {qid!r}: score inversion at rank {cur.rank} "
                    f"({cur.score} > {prev.score})"
                )


def write_run(entries: list[RunEntry], path: str) -> None:
    """Write a TREC 6-column run file.

    Lines are ``qid Q0 docid rank score runtag`` with scores formatted
    at 6 fractional digits. Invariants are validated before anything is
    written, so a failing call leaves no partial file.
    """
    validate_run_entries(entries)
    with open(path, "w", encoding="utf-8") as handle:
        for entry in entries:
            score = SCORE_FORMAT.format(entry.score)
            handle.write(
                f"{entry.query_id} Q0 {entry.doc_id} {entry.rank} {score} {entry.run_tag}\n"
            )


def load_run(path: str) -> list[RunEntry]:
    """Load a TREC 6-column run file written by :func:`write_run`."""
    entries: list[RunEntry] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(
                    f"expected 6 columns, got {len(parts)}", line=lineno, path=path
                )
            qid, _q0, did, rank_str, score_str, tag = parts
            try:
                rank = int(rank_str)
                score = float(score_str)
            except ValueError:
                raise DataError(
                    f"bad rank/score {rank_str!r}/{score_str!r}", line=lineno, path=path
                )
            entries.append(RunEntry(qid, did, rank, score, tag))
    validate_run_entries(entries)
    return entries


def load_corpus(path: str) -> dict[str, str]:
    """Load a document corpus from line-delimited ``{doc_id, text}`` JSON.

    Used by the synthesis pipeline to resolve texts of documents that
    appear only in a retrieval ranking.
    """
    corpus: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                doc_id = str(record["doc_id"])
                text = str(record["text"])
            except (json.JSONDecodeError, KeyError, TypeError):
                raise DataError("invalid corpus record", line=lineno, path=path)
            if doc_id in corpus:
                raise DataError(f"duplicate doc_id {doc_id!r}", line=lineno, path=path)
            corpus[doc_id] = text
    return corpus
