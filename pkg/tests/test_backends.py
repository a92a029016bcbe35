"""Mock and HTTP scorer backends, the pointwise runner, and the
latency simulators."""

import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from pointrank.backends import (
    Generation,
    HttpBackend,
    HttpBackendConfig,
    LatencyModel,
    MockBackend,
    MockBackendConfig,
    ScoreRequest,
    listwise_call_count,
    mock_oracle_from_groups,
    run_pointwise,
    score_generation,
    simulate_listwise_latency,
    simulate_pointwise_latency,
)
from pointrank.data import Document, QueryGroup
from pointrank.errors import BackendConfigError, BackendError
from pointrank.scoring import DEFAULT_TEMPLATES, parse_output


def make_groups(n_queries=2, n_docs=4):
    groups = []
    for qi in range(n_queries):
        candidates = tuple(
            Document(f"q{qi}d{di}", f"text {qi} {di}") for di in range(n_docs)
        )
        labels = {f"q{qi}d0": 1}
        groups.append(
            QueryGroup(
                query_id=f"q{qi}",
                query_text=f"query {qi}",
                instruction="judge",
                candidates=candidates,
                labels=labels,
            )
        )
    return groups


def mock_request(backend, doc_id="q0d0", scheme="int_0_10", n=1):
    prompt = f"score this: {backend.prepare_document(doc_id, 'text')}"
    return ScoreRequest(prompt=prompt, scheme=scheme, n=n)


class TestMockBackend:
    def test_noiseless_oracle_hits_top_score(self):
        backend = MockBackend(MockBackendConfig(seed=1, oracle={"d": 1.0}))
        for _ in range(3):
            response = backend.generate(mock_request(backend, "d"))
            parsed = parse_output(response.generations[0].text, "int_0_10")
            assert parsed.formatted and parsed.score == 10
            assert parsed and response.generations[0].answer_token_logprobs == (0.0,)

    def test_scheme_scaling(self):
        backend = MockBackend(MockBackendConfig(seed=1, oracle={"d": 1.0}))
        response = backend.generate(mock_request(backend, "d", scheme="int_0_3"))
        assert parse_output(response.generations[0].text, "int_0_3").score == 3

    def test_binary_schemes(self):
        backend = MockBackend(
            MockBackendConfig(seed=1, oracle={"pos": 1.0, "neg": 0.0})
        )
        yes = backend.generate(mock_request(backend, "pos", scheme="binary_think"))
        assert parse_output(yes.generations[0].text, "binary_think").score == 1
        no = backend.generate(mock_request(backend, "neg", scheme="binary_plain"))
        assert no.generations[0].text == "no"

    def test_full_malformation(self):
        backend = MockBackend(
            MockBackendConfig(seed=1, oracle={"d": 1.0}, malformation_prob=1.0)
        )
        response = backend.generate(mock_request(backend, "d", n=5))
        for generation in response.generations:
            assert not parse_output(generation.text, "int_0_10").formatted

    def test_byte_identical_across_runs(self):
        config = MockBackendConfig(
            seed=7, oracle={"d": 0.6}, noise_std=1.0, malformation_prob=0.2
        )
        r1 = MockBackend(config).generate(mock_request(MockBackend(config), "d", n=8))
        r2 = MockBackend(config).generate(mock_request(MockBackend(config), "d", n=8))
        assert r1.generations == r2.generations

    def test_generations_vary_within_request(self):
        backend = MockBackend(
            MockBackendConfig(seed=3, oracle={"d": 0.5}, noise_std=2.0)
        )
        response = backend.generate(mock_request(backend, "d", n=6))
        scores = {
            parse_output(g.text, "int_0_10").score for g in response.generations
        }
        assert len(scores) > 1

    def test_unknown_marker_is_config_error(self):
        backend = MockBackend(MockBackendConfig(seed=1, oracle={"d": 1.0}))
        with pytest.raises(BackendConfigError, match="no oracle grade"):
            backend.generate(
                ScoreRequest(prompt="[[doc:ghost]] hm", scheme="int_0_10")
            )
        with pytest.raises(BackendConfigError, match="marker"):
            backend.generate(ScoreRequest(prompt="no marker", scheme="int_0_10"))

    def test_oracle_from_groups_normalizes_grades(self):
        groups = [
            QueryGroup(
                query_id="q",
                query_text="t",
                instruction="",
                candidates=(Document("a", ""), Document("b", ""), Document("c", "")),
                labels={"a": 2, "b": 1},
            )
        ]
        assert mock_oracle_from_groups(groups) == {"a": 1.0, "b": 0.5, "c": 0.0}


class TestRunPointwise:
    def test_scores_independent_of_parallelism(self):
        groups = make_groups()
        config = MockBackendConfig(
            seed=5, oracle=mock_oracle_from_groups(groups), noise_std=1.0
        )
        results = [
            run_pointwise(
                groups,
                MockBackend(config),
                parallelism=p,
                template=DEFAULT_TEMPLATES["int_0_10"],
            )
            for p in (1, 4, 16)
        ]
        assert results[0].scores == results[1].scores == results[2].scores

    def test_noiseless_scores_order_by_grade(self):
        groups = make_groups(n_queries=1)
        config = MockBackendConfig(seed=5, oracle=mock_oracle_from_groups(groups))
        result = run_pointwise(
            groups, MockBackend(config), 4, DEFAULT_TEMPLATES["int_0_10"]
        )
        assert result.scores[("q0", "q0d0")] == pytest.approx(10.0)
        for di in (1, 2, 3):
            assert result.scores[("q0", f"q0d{di}")] == pytest.approx(0.0)

    def test_unparsed_counted_and_scored_zero(self):
        groups = make_groups(n_queries=1)
        config = MockBackendConfig(
            seed=5, oracle=mock_oracle_from_groups(groups), malformation_prob=1.0
        )
        result = run_pointwise(
            groups, MockBackend(config), 2, DEFAULT_TEMPLATES["int_0_10"]
        )
        assert result.unparsed == 4
        assert set(result.scores.values()) == {0.0}

    def test_parallel_speedup_with_simulated_latency(self):
        groups = make_groups(n_queries=1, n_docs=12)
        config = MockBackendConfig(
            seed=1,
            oracle=mock_oracle_from_groups(groups),
            latency_base=0.05,
        )
        parallel = run_pointwise(
            groups, MockBackend(config), 12, DEFAULT_TEMPLATES["int_0_10"]
        )
        serial = run_pointwise(
            groups, MockBackend(config), 1, DEFAULT_TEMPLATES["int_0_10"]
        )
        assert parallel.scores == serial.scores
        assert parallel.wall_clock_seconds < serial.wall_clock_seconds / 3
        assert serial.wall_clock_seconds >= 12 * 0.05

    def test_backend_failure_recorded(self):
        groups = make_groups(n_queries=1)
        # oracle missing one doc: that pair fails, others succeed
        oracle = mock_oracle_from_groups(groups)
        del oracle["q0d3"]
        result = run_pointwise(
            groups,
            MockBackend(MockBackendConfig(seed=1, oracle=oracle)),
            2,
            DEFAULT_TEMPLATES["int_0_10"],
        )
        assert ("q0", "q0d3") in result.failures
        assert result.failed_queries() == {"q0"}
        assert len(result.scores) == 3


class TestScoreGeneration:
    def test_fine_grained_path(self):
        generation = Generation(
            text="<think>t</think><answer>8</answer>",
            answer_token_logprobs=(math.log(0.9),),
        )
        assert score_generation(generation, "int_0_10") == pytest.approx(7.2)

    def test_binary_path(self):
        generation = Generation(
            text="<think>t</think><answer>no</answer>",
            answer_token_logprobs=(math.log(0.8),),
        )
        assert score_generation(generation, "binary_think") == pytest.approx(0.2)

    def test_unformatted_returns_none(self):
        assert score_generation(Generation(text="garbage"), "int_0_10") is None

    def test_missing_logprobs_returns_none(self):
        generation = Generation(text="<think>t</think><answer>8</answer>")
        assert score_generation(generation, "int_0_10") is None


class _StubHandler(BaseHTTPRequestHandler):
    """Canned OpenAI-compatible completions endpoint."""

    script = None  # list of (status, payload) consumed per request
    seen = None

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        type(self).seen.append(body)
        status, payload = type(self).script[min(len(type(self).seen) - 1, len(type(self).script) - 1)]
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    servers = []

    def start(script):
        handler = type(
            "Handler", (_StubHandler,), {"script": script, "seen": []}
        )
        server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        url = f"http://127.0.0.1:{server.server_address[1]}/v1/completions"
        return url, handler

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


def completion_payload(text="<think>ok</think><answer>7</answer>", n=1):
    tokens = ["<think>", "ok", "</think>", "<answer>", "7", "</answer>"]
    offsets = []
    pos = 0
    for token in tokens:
        offsets.append(pos)
        pos += len(token)
    choice = {
        "text": text,
        "logprobs": {
            "tokens": tokens,
            "token_logprobs": [-0.1, -0.2, -0.1, -0.05, -0.3, -0.02],
            "text_offset": offsets,
        },
    }
    return {"choices": [dict(choice) for _ in range(n)]}


def http_backend(url, attempts=3):
    return HttpBackend(
        HttpBackendConfig(
            url=url,
            model="test-model",
            max_attempts=attempts,
            backoff_base=0.01,
            timeout=5.0,
        )
    )


class TestHttpBackend:
    def test_round_trip(self, stub_server):
        url, handler = stub_server([(200, completion_payload())])
        backend = http_backend(url)
        response = backend.generate(
            ScoreRequest(prompt="score me", scheme="int_0_10")
        )
        generation = response.generations[0]
        assert generation.text == "<think>ok</think><answer>7</answer>"
        # the answer span is the token "7"
        assert generation.answer_token_logprobs == (-0.3,)
        assert handler.seen[0]["model"] == "test-model"
        assert handler.seen[0]["logprobs"] == 0
        assert score_generation(generation, "int_0_10") == pytest.approx(
            7 * math.exp(-0.3)
        )

    def test_retries_on_server_errors(self, stub_server):
        url, handler = stub_server(
            [(500, {}), (500, {}), (200, completion_payload())]
        )
        backend = http_backend(url)
        response = backend.generate(ScoreRequest(prompt="p", scheme="int_0_10"))
        assert len(handler.seen) == 3
        assert response.generations[0].text.endswith("</answer>")

    def test_gives_up_after_attempts(self, stub_server):
        url, handler = stub_server([(500, {})])
        backend = http_backend(url, attempts=3)
        with pytest.raises(BackendError, match="after 3 attempts"):
            backend.generate(ScoreRequest(prompt="p", scheme="int_0_10"))
        assert len(handler.seen) == 3

    def test_missing_logprobs_is_terminal(self, stub_server):
        payload = {"choices": [{"text": "<think>a</think><answer>3</answer>"}]}
        url, _ = stub_server([(200, payload)])
        backend = http_backend(url)
        with pytest.raises(BackendConfigError, match="log-probs"):
            backend.generate(ScoreRequest(prompt="p", scheme="int_0_10"))

    def test_client_error_is_terminal(self, stub_server):
        url, handler = stub_server([(401, {"error": "bad token"})])
        backend = http_backend(url)
        with pytest.raises(BackendConfigError, match="401"):
            backend.generate(ScoreRequest(prompt="p", scheme="int_0_10"))
        assert len(handler.seen) == 1

    def test_transport_failure_exhausts_retries(self):
        backend = HttpBackend(
            HttpBackendConfig(
                url="http://127.0.0.1:9/v1/completions",
                model="m",
                max_attempts=2,
                backoff_base=0.01,
                timeout=0.2,
            )
        )
        with pytest.raises(BackendError, match="after 2 attempts"):
            backend.generate(ScoreRequest(prompt="p", scheme="int_0_10"))

    def test_wrong_choice_count_rejected(self, stub_server):
        url, _ = stub_server([(200, completion_payload(n=2))])
        backend = http_backend(url)
        with pytest.raises(BackendError, match="expected 1 choices"):
            backend.generate(ScoreRequest(prompt="p", scheme="int_0_10"))


class TestLatencySimulators:
    def test_sliding_window_call_count(self):
        assert listwise_call_count(100, 20, 10) == 9
        assert listwise_call_count(100, 20, 19) == 6  # 1 + ceil(80/19)

    def test_single_window_when_it_covers_everything(self):
        assert listwise_call_count(20, 20, 10) == 1

    def test_invalid_window_stride(self):
        with pytest.raises(ValueError):
            listwise_call_count(100, 20, 20)
        with pytest.raises(ValueError):
            listwise_call_count(10, 20, 5)
        with pytest.raises(ValueError):
            listwise_call_count(100, 20, 0)

    def test_listwise_duration_constant_latency(self):
        model = LatencyModel(base=0.1, jitter=0.0)
        assert simulate_listwise_latency(100, 20, 10, model) == pytest.approx(0.9)

    def test_pointwise_duration_wave_model(self):
        model = LatencyModel(base=0.1, jitter=0.0)
        assert simulate_pointwise_latency(100, 32, model) == pytest.approx(0.4)
        assert simulate_pointwise_latency(100, 100, model) == pytest.approx(0.1)
        assert simulate_pointwise_latency(100, 1, model) == pytest.approx(10.0)

    def test_pointwise_beats_sequential_windows(self):
        model = LatencyModel(base=0.08, jitter=0.02)
        for n, w, stride in ((50, 10, 5), (100, 20, 10), (30, 20, 10)):
            if listwise_call_count(n, w, stride) < 2:
                continue
            pointwise = simulate_pointwise_latency(n, n, model, seed=1)
            listwise = simulate_listwise_latency(n, w, stride, model, seed=1)
            assert pointwise < listwise

    def test_deterministic_with_seed(self):
        model = LatencyModel(base=0.05, jitter=0.05)
        a = simulate_listwise_latency(60, 20, 10, model, seed=3)
        b = simulate_listwise_latency(60, 20, 10, model, seed=3)
        assert a == b
