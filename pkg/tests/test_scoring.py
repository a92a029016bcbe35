"""Prompt rendering, output parsing, and score extraction."""

import math

import pytest
from hypothesis import given, strategies as st

from pointrank.scoring import (
    DEFAULT_TEMPLATES,
    INSTRUCTIONS,
    ParsedOutput,
    PromptTemplate,
    WhitespaceTokenizer,
    binary_normalized_prob,
    binary_relevance_score,
    default_bin_edges,
    fine_grained_score,
    instruction_for,
    parse_output,
    render_prompt,
    score_distribution,
    with_answer_prob,
)


class TestRenderPrompt:
    def test_instruction_appears_verbatim(self):
        rendered = render_prompt(
            DEFAULT_TEMPLATES["int_0_10"],
            INSTRUCTIONS["beir"],
            "how tall is everest",
            "everest is 8849 m",
        )
        assert "Given a query, retrieval relevant passage." in rendered.text
        assert "how tall is everest" in rendered.text
        assert not rendered.query_truncated
        assert not rendered.document_truncated

    def test_empty_document_still_wellformed(self):
        rendered = render_prompt(
            DEFAULT_TEMPLATES["int_0_10"], "inst", "query", ""
        )
        assert "Here is the document:\n\n" in rendered.text

    def test_long_document_truncated_to_limit(self):
        doc = " ".join(f"w{i}" for i in range(3000))
        rendered = render_prompt(
            DEFAULT_TEMPLATES["int_0_10"], "inst", "query", doc
        )
        assert rendered.document_truncated
        assert "w2047" in rendered.text
        assert "w2048" not in rendered.text

    def test_byte_stable(self):
        args = (DEFAULT_TEMPLATES["binary_think"], "i", "q", "d")
        assert render_prompt(*args).text == render_prompt(*args).text

    def test_custom_token_limits(self):
        template = PromptTemplate(
            DEFAULT_TEMPLATES["int_0_10"].template_text,
            "int_0_10",
            max_query_tokens=2,
            max_doc_tokens=2,
        )
        rendered = render_prompt(template, "i", "a b c", "x y z")
        assert rendered.query_truncated and rendered.document_truncated
        assert "a b\n" in rendered.text and "x y\n" in rendered.text

    def test_template_requires_each_placeholder_once(self):
        with pytest.raises(ValueError, match="exactly once"):
            PromptTemplate("{instruction} {query}", "int_0_10")
        with pytest.raises(ValueError, match="exactly once"):
            PromptTemplate(
                "{instruction} {query} {document} {document}", "int_0_10"
            )

    def test_instruction_lookup_fallback(self):
        assert instruction_for("bright/biology") == INSTRUCTIONS["bright/default"]
        assert instruction_for("trec_dl") == INSTRUCTIONS["beir"]
        with pytest.raises(KeyError):
            instruction_for("unknown_benchmark")


class TestParseOutput:
    def test_wellformed_int(self):
        parsed = parse_output("<think>ok</think><answer>7</answer>", "int_0_10")
        assert parsed.formatted and parsed.score == 7
        assert parsed.think_text == "ok"

    def test_out_of_range_is_unformatted(self):
        parsed = parse_output("<think>x</think><answer>11</answer>", "int_0_10")
        assert not parsed.formatted and parsed.score is None

    def test_plain_text_is_unformatted(self):
        assert not parse_output("score is 7", "int_0_10").formatted

    def test_range_depends_on_scheme(self):
        raw = "<think>x</think><answer>7</answer>"
        assert parse_output(raw, "int_0_10").formatted
        assert not parse_output(raw, "int_0_3").formatted

    def test_whitespace_inside_answer_tolerated(self):
        parsed = parse_output(
            "<think>x</think><answer>  10 \n</answer>", "int_0_10"
        )
        assert parsed.formatted and parsed.score == 10

    def test_other_characters_in_answer_rejected(self):
        for payload in ("7.", "7 points", "1_0", "0x7", ""):
            raw = f"<think>x</think><answer>{payload}</answer>"
            assert not parse_output(raw, "int_0_10").formatted, payload

    def test_multiple_answer_tags_rejected(self):
        raw = "<think>a</think><answer>7</answer><answer>8</answer>"
        assert not parse_output(raw, "int_0_10").formatted
        nested = "<think>x<answer>0</answer>y</think><answer>7</answer>"
        assert not parse_output(nested, "int_0_10").formatted

    def test_surrounding_whitespace_tolerated(self):
        raw = "\n <think>a</think> <answer>3</answer>\n"
        assert parse_output(raw, "int_0_10").formatted

    def test_trailing_garbage_rejected(self):
        raw = "<think>a</think><answer>3</answer> indeed"
        assert not parse_output(raw, "int_0_10").formatted

    def test_binary_think(self):
        parsed = parse_output("<think>r</think><answer> yes</answer>", "binary_think")
        assert parsed.formatted and parsed.score == 1
        parsed = parse_output("<think>r</think><answer>no</answer>", "binary_think")
        assert parsed.formatted and parsed.score == 0
        assert not parse_output(
            "<think>r</think><answer>maybe</answer>", "binary_think"
        ).formatted

    def test_binary_plain(self):
        assert parse_output("yes", "binary_plain").score == 1
        assert parse_output(" no \n", "binary_plain").score == 0
        assert not parse_output("Yes", "binary_plain").formatted
        assert not parse_output("yes no", "binary_plain").formatted

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValueError):
            parse_output("yes", "int_0_100")

    @given(st.binary(max_size=300))
    def test_never_crashes_on_bytes(self, blob):
        raw = blob.decode("latin-1")
        for scheme in ("int_0_10", "int_0_3", "binary_think", "binary_plain"):
            parsed = parse_output(raw, scheme)
            assert parsed.formatted == (parsed.score is not None)

    @given(st.text(max_size=300))
    def test_never_crashes_on_text(self, raw):
        parsed = parse_output(raw, "int_0_10")
        if parsed.formatted:
            assert 0 <= parsed.score <= 10


class TestParsedOutputInvariants:
    def test_formatted_requires_score(self):
        with pytest.raises(ValueError):
            ParsedOutput("", None, None, True, "")

    def test_unformatted_forbids_score(self):
        with pytest.raises(ValueError):
            ParsedOutput("", 3, None, False, "")

    def test_prob_range_checked(self):
        with pytest.raises(ValueError):
            ParsedOutput("", 3, 1.5, True, "")


class TestBinaryNormalizedProb:
    def test_direct(self):
        assert binary_normalized_prob(0.8, 0.2) == pytest.approx(0.8)

    def test_symmetric_point(self):
        assert binary_normalized_prob(0.5, 0.5) == pytest.approx(0.5)

    def test_both_zero_errors(self):
        with pytest.raises(ValueError):
            binary_normalized_prob(0.0, 0.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            binary_normalized_prob(-0.1, 0.5)

    @given(
        st.floats(min_value=1e-6, max_value=1.0),
        st.floats(min_value=1e-6, max_value=1.0),
    )
    def test_complement_sums_to_one(self, a, b):
        total = binary_normalized_prob(a, b) + binary_normalized_prob(b, a)
        assert total == pytest.approx(1.0, abs=1e-12)


class TestFineGrainedScore:
    def make(self, score, prob):
        return ParsedOutput("", score, prob, True, "")

    def test_product(self):
        assert fine_grained_score(self.make(8, 0.9)) == pytest.approx(7.2)

    def test_zero_score(self):
        assert fine_grained_score(self.make(0, 0.77)) == 0.0

    def test_half_confidence_ten(self):
        assert fine_grained_score(self.make(10, 0.5)) == pytest.approx(5.0)

    def test_unformatted_errors(self):
        unformatted = ParsedOutput("", None, None, False, "junk")
        with pytest.raises(ValueError):
            fine_grained_score(unformatted)

    def test_missing_prob_errors(self):
        with pytest.raises(ValueError):
            fine_grained_score(ParsedOutput("", 5, None, True, ""))

    def test_monotone_in_score_and_prob(self):
        for prob in (0.2, 0.7, 1.0):
            values = [fine_grained_score(self.make(s, prob)) for s in range(11)]
            assert values == sorted(values)
        for score in (1, 5, 10):
            values = [
                fine_grained_score(self.make(score, p))
                for p in (0.1, 0.4, 0.8, 1.0)
            ]
            assert values == sorted(values)

    def test_answer_prob_product_rule(self):
        parsed = parse_output("<think>t</think><answer>10</answer>", "int_0_10")
        attached = with_answer_prob(parsed, (math.log(0.8), math.log(0.5)))
        assert attached.answer_token_prob == pytest.approx(0.4)
        assert fine_grained_score(attached) == pytest.approx(4.0)

    def test_binary_relevance_score_uses_complement(self):
        yes = with_answer_prob(
            parse_output("<think>a</think><answer>yes</answer>", "binary_think"),
            (math.log(0.9),),
        )
        no = with_answer_prob(
            parse_output("<think>a</think><answer>no</answer>", "binary_think"),
            (math.log(0.9),),
        )
        assert binary_relevance_score(yes) == pytest.approx(0.9)
        assert binary_relevance_score(no) == pytest.approx(0.1)


class TestScoreDistribution:
    def test_extreme_bins(self):
        hist = score_distribution([0.0, 1.0])
        assert hist.ratios[0] == pytest.approx(0.5)
        assert hist.ratios[-1] == pytest.approx(0.5)
        assert sum(hist.ratios[1:-1]) == 0.0

    def test_point_mass_lands_in_one_bin(self):
        hist = score_distribution([0.5] * 100)
        containing = [
            i
            for i in range(len(hist.ratios))
            if hist.bin_edges[i] <= 0.5
            and (0.5 < hist.bin_edges[i + 1] or hist.bin_edges[i + 1] == 1.0)
        ]
        assert hist.ratios[containing[-1]] == pytest.approx(1.0)
        assert sum(hist.ratios) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_values_over_ten_equal_bins(self):
        """Counting oracle over fixed decile edges."""
        edges = [i / 10 for i in range(11)]
        values = [0.05 + i / 10 for i in range(10)]
        hist = score_distribution(values, bin_edges=edges)
        expected = [sum(1 for v in values if lo <= v < hi) / len(values)
                    for lo, hi in zip(edges, edges[1:])]
        # oracle: each decile contains exactly one value
        assert expected == [0.1] * 10
        assert list(hist.ratios) == pytest.approx(expected)

    def test_default_edges_include_extremes(self):
        edges = default_bin_edges()
        assert edges[0] == 0.0 and edges[1] == 1e-5
        assert edges[-2] == 1.0 - 1e-5 and edges[-1] == 1.0

    def test_out_of_range_value_errors(self):
        with pytest.raises(ValueError):
            score_distribution([0.5, 1.2])

    def test_bad_edges_rejected(self):
        with pytest.raises(ValueError):
            score_distribution([0.5], bin_edges=[0.0, 0.5, 0.5, 1.0])
        with pytest.raises(ValueError):
            score_distribution([0.5], bin_edges=[0.1, 0.5, 1.0])

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=200))
    def test_ratios_nonnegative_and_sum_to_one(self, values):
        hist = score_distribution(values)
        assert all(r >= 0 for r in hist.ratios)
        assert sum(hist.ratios) == pytest.approx(1.0, abs=1e-12)


class TestWhitespaceTokenizer:
    def test_count_and_truncate(self):
        tok = WhitespaceTokenizer()
        assert tok.count("a b  c") == 3
        assert tok.truncate("a b c", 2) == "a b"
        assert tok.truncate("a b", 5) == "a b"
