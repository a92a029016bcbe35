"""Dataset, qrels, and run-file persistence."""

import json

import pytest

from pointrank.data import (
    Document,
    QueryGroup,
    RelevanceJudgments,
    RunEntry,
    load_corpus,
    load_qrels,
    load_query_groups,
    load_run,
    write_query_groups,
    write_run,
)
from pointrank.errors import DataError


def make_group_record(qid="q1", doc_ids=("d1", "d2")):
    return {
        "query_id": qid,
        "query_text": "some query",
        "instruction": "judge relevance",
        "candidates": [
            {"doc_id": d, "text": f"text of {d}", "first_stage_score": 1.0}
            for d in doc_ids
        ],
        "labels": {doc_ids[0]: 1},
    }


class TestQueryGroupLoading:
    def test_two_wellformed_lines(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        records = [make_group_record("q1"), make_group_record("q2")]
        path.write_text("".join(json.dumps(r) + "\n" for r in records))
        groups = load_query_groups(str(path))
        assert [g.query_id for g in groups] == ["q1", "q2"]
        assert groups[0].n_candidates == 2
        assert groups[0].grade("d1") == 1

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_query_groups(str(path)) == []

    def test_missing_query_id_names_line(self, tmp_path):
        record = make_group_record()
        del record["query_id"]
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(DataError) as excinfo:
            load_query_groups(str(path))
        assert excinfo.value.line == 1

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(make_group_record()) + "\n{not json\n")
        with pytest.raises(DataError) as excinfo:
            load_query_groups(str(path))
        assert excinfo.value.line == 2

    def test_duplicate_query_id(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        path.write_text(
            json.dumps(make_group_record("q1"))
            + "\n"
            + json.dumps(make_group_record("q1"))
            + "\n"
        )
        with pytest.raises(DataError, match="duplicate query_id"):
            load_query_groups(str(path))

    def test_duplicate_doc_id_within_group(self, tmp_path):
        path = tmp_path / "dup_doc.jsonl"
        path.write_text(json.dumps(make_group_record(doc_ids=("d1", "d1"))) + "\n")
        with pytest.raises(DataError, match="duplicate doc_id"):
            load_query_groups(str(path))

    def test_label_for_unknown_doc(self, tmp_path):
        record = make_group_record()
        record["labels"] = {"ghost": 1}
        path = tmp_path / "ghost.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(DataError, match="unknown doc_id"):
            load_query_groups(str(path))

    def test_loader_is_total_over_garbage(self, tmp_path):
        """Every malformed input becomes a DataError, never a crash."""
        garbage = [
            "null",
            "[]",
            '"just a string"',
            '{"query_id": "q"}',
            '{"query_id": "q", "query_text": "t", "candidates": []}',
            '{"query_id": "q", "query_text": "t", "candidates": [{"text": "x"}]}',
            '{"query_id": "q", "query_text": "t", "candidates": 3}',
        ]
        for i, line in enumerate(garbage):
            path = tmp_path / f"g{i}.jsonl"
            path.write_text(line + "\n")
            with pytest.raises(DataError):
                load_query_groups(str(path))

    def test_round_trip(self, tmp_path):
        groups = load_query_groups_from_records(
            tmp_path, [make_group_record("q1"), make_group_record("q2")]
        )
        out = tmp_path / "again.jsonl"
        write_query_groups(groups, str(out))
        assert load_query_groups(str(out)) == groups


def load_query_groups_from_records(tmp_path, records):
    path = tmp_path / "in.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return load_query_groups(str(path))


class TestQrels:
    def test_single_record(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1 1\n")
        qrels = load_qrels(str(path))
        assert qrels.grade("q1", "d1") == 1
        assert qrels.grade("q1", "other") == 0

    def test_two_records(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1 2\nq1 0 d2 0\n")
        qrels = load_qrels(str(path))
        assert qrels.for_query("q1") == {"d1": 2, "d2": 0}

    def test_non_integer_grade(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1 x\n")
        with pytest.raises(DataError) as excinfo:
            load_qrels(str(path))
        assert excinfo.value.line == 1

    def test_negative_grade_rejected(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1 -1\n")
        with pytest.raises(DataError):
            load_qrels(str(path))

    def test_judgments_type_rejects_negative(self):
        with pytest.raises(DataError):
            RelevanceJudgments(grades={("q", "d"): -2})


class TestRunFiles:
    def test_exact_line_format(self, tmp_path):
        path = tmp_path / "run.txt"
        write_run([RunEntry("q1", "d1", 1, 0.5, "tag")], str(path))
        assert path.read_text() == "q1 Q0 d1 1 0.500000 tag\n"

    def test_two_entries_ranked(self, tmp_path):
        path = tmp_path / "run.txt"
        entries = [
            RunEntry("q1", "a", 1, 0.9, "t"),
            RunEntry("q1", "b", 2, 0.1, "t"),
        ]
        write_run(entries, str(path))
        lines = path.read_text().splitlines()
        assert lines == ["q1 Q0 a 1 0.900000 t", "q1 Q0 b 2 0.100000 t"]

    def test_rank_gap_errors_before_write(self, tmp_path):
        path = tmp_path / "run.txt"
        entries = [
            RunEntry("q1", "a", 1, 0.9, "t"),
            RunEntry("q1", "b", 3, 0.1, "t"),
        ]
        with pytest.raises(DataError, match="rank gap"):
            write_run(entries, str(path))
        assert not path.exists()

    def test_score_inversion_rejected(self, tmp_path):
        entries = [
            RunEntry("q1", "a", 1, 0.1, "t"),
            RunEntry("q1", "b", 2, 0.9, "t"),
        ]
        with pytest.raises(DataError, match="score inversion"):
            write_run(entries, str(tmp_path / "run.txt"))

    def test_round_trip_exact(self, tmp_path):
        """write_run followed by load_run reproduces entries exactly at
        6-decimal score precision."""
        entries = [
            RunEntry("q1", "a", 1, 0.123456, "t"),
            RunEntry("q1", "b", 2, 0.1, "t"),
            RunEntry("q2", "c", 1, -2.25, "t"),
        ]
        path = tmp_path / "run.txt"
        write_run(entries, str(path))
        assert load_run(str(path)) == entries


class TestDomainTypes:
    def test_document_requires_id(self):
        with pytest.raises(DataError):
            Document(doc_id="", text="x")

    def test_group_requires_candidates(self):
        with pytest.raises(DataError):
            QueryGroup(
                query_id="q", query_text="t", instruction="", candidates=()
            )

    def test_positive_and_negative_ids(self):
        group = QueryGroup(
            query_id="q",
            query_text="t",
            instruction="",
            candidates=(Document("a", ""), Document("b", "")),
            labels={"a": 2},
        )
        assert group.positive_ids() == {"a"}
        assert group.negative_ids() == {"b"}


class TestCorpus:
    def test_load(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text('{"doc_id": "d1", "text": "hello"}\n')
        assert load_corpus(str(path)) == {"d1": "hello"}

    def test_duplicate_rejected(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text(
            '{"doc_id": "d1", "text": "a"}\n{"doc_id": "d1", "text": "b"}\n'
        )
        with pytest.raises(DataError, match="duplicate"):
            load_corpus(str(path))
