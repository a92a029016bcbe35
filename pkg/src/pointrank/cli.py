"""Command-line entry point.

Subcommands: rerank, eval, reward, synthesize, train-toy, bench-latency.
Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
All numeric output uses fixed 6-decimal formatting; runs with the mock
backend are end-to-end deterministic given --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import backends, fusion, grpo, metrics, rewards, synthesis
from .data import (
    load_qrels,
    load_query_groups,
    load_run,
    load_corpus,
    write_run,
)
from .errors import BackendError, DataError, PointrankError
from .scoring import DEFAULT_TEMPLATES, PromptTemplate, parse_output

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3

API_TOKEN_ENV = "POINTRANK_API_TOKEN"


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; this toolkit
    reserves 2 for data errors, so remap to 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pointrank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    rerank = sub.add_parser("rerank", help="score, rank, and write a TREC run")
    rerank.add_argument("--input", required=True, help="query-group JSONL dataset")
    rerank.add_argument("--run-out", required=True, help="output TREC run file")
    rerank.add_argument("--backend", choices=("mock", "http"), default="mock")
    rerank.add_argument(
        "--scheme",
        choices=tuple(DEFAULT_TEMPLATES),
        default="int_0_10",
    )
    rerank.add_argument("--template-file", help="custom prompt template text file")
    rerank.add_argument("--run-tag", default="pointrank")
    rerank.add_argument("--seed", type=int, help="mandatory for the mock backend")
    rerank.add_argument("--parallelism", type=int, default=8)
    rerank.add_argument(
        "--fusion",
        help="fusion strategy name (raw_weighted, minmax_blend, zscore_blend) "
        "or path to a key=value fusion config file",
    )
    rerank.add_argument(
        "--fused-run-out", help="output run file for the fused ranking"
    )
    rerank.add_argument("--mock-noise-std", type=float, default=0.0)
    rerank.add_argument("--mock-malform-prob", type=float, default=0.0)
    rerank.add_argument("--mock-latency-base", type=float, default=0.0)
    rerank.add_argument("--mock-latency-jitter", type=float, default=0.0)
    rerank.add_argument("--endpoint", help="completions URL for the http backend")
    rerank.add_argument("--model", help="model name for the http backend")

    evaluate = sub.add_parser("eval", help="score a run file against qrels")
    evaluate.add_argument("--run", required=True)
    evaluate.add_argument("--qrels", required=True)
    evaluate.add_argument("--k", type=int, default=10)
    evaluate.add_argument("--report-out")

    reward = sub.add_parser("reward", help="compute rule rewards for rollouts")
    reward.add_argument("--rollouts", required=True, help="rollout dump JSONL")
    reward.add_argument("--qrels", required=True, help="labels (grade > 0 = positive)")
    reward.add_argument(
        "--reward", choices=rewards.REWARD_NAMES, default="rr"
    )
    reward.add_argument(
        "--scheme", choices=tuple(DEFAULT_TEMPLATES), default="int_0_10"
    )
    reward.add_argument("--out", required=True, help="reward dump JSONL")

    synth = sub.add_parser("synthesize", help="build an SFT dataset")
    synth.add_argument("--input", required=True, help="query groups (1 positive each)")
    synth.add_argument("--rankings", required=True, help="TREC run of deep retrieval")
    synth.add_argument("--corpus", required=True, help="doc_id/text JSONL corpus")
    synth.add_argument("--out", required=True, help="output SFT dataset JSONL")
    synth.add_argument("--report-out")
    synth.add_argument("--backend", choices=("mock", "http"), default="mock")
    synth.add_argument("--seed", type=int)
    synth.add_argument("--consensus-samples", type=int, default=3)
    synth.add_argument("--max-output-tokens", type=int, default=2048)
    synth.add_argument("--profile", default="custom")
    synth.add_argument("--parallelism", type=int, default=1)
    synth.add_argument("--mock-noise-std", type=float, default=0.5)
    synth.add_argument("--mock-malform-prob", type=float, default=0.0)
    synth.add_argument("--endpoint")
    synth.add_argument("--model")

    train = sub.add_parser("train-toy", help="GRPO-train the toy policy")
    train.add_argument("--input", help="query-group JSONL dataset")
    train.add_argument(
        "--synthetic-queries",
        type=int,
        help="generate a separable toy dataset with this many queries",
    )
    train.add_argument("--reward", choices=rewards.REWARD_NAMES, default="rr")
    train.add_argument("--steps", type=int, default=200)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--grpo-config", help="key=value file (rollout_n, ...)")
    train.add_argument("--learning-rate", type=float, default=0.5)
    train.add_argument("--mini-batches", type=int, default=4)
    train.add_argument("--stats-out", help="per-step stats stream (JSONL)")
    train.add_argument("--policy-out", help="final policy parameters (JSON)")

    bench = sub.add_parser(
        "bench-latency", help="pointwise vs sliding-window latency table"
    )
    bench.add_argument("--n-docs", type=int, default=100)
    bench.add_argument("--latency-base", type=float, default=0.1)
    bench.add_argument("--latency-jitter", type=float, default=0.0)
    bench.add_argument("--parallelism", type=_int_list, default=[1, 8, 32, 100])
    bench.add_argument("--windows", type=_int_list, default=[20])
    bench.add_argument("--strides", type=_int_list, default=[10])
    bench.add_argument("--seed", type=int, default=0)

    return parser


def _load_template(args) -> PromptTemplate:
    if getattr(args, "template_file", None):
        text = Path(args.template_file).read_text(encoding="utf-8")
        return PromptTemplate(template_text=text, scheme=args.scheme)
    return DEFAULT_TEMPLATES[args.scheme]


def _build_backend(args, groups) -> backends.ScorerBackend:
    if args.backend == "mock":
        if args.seed is None:
            raise ValueError("--seed is mandatory for mock runs")
        oracle = backends.mock_oracle_from_groups(groups)
        return backends.MockBackend(
            backends.MockBackendConfig(
                seed=args.seed,
                oracle=oracle,
                noise_std=args.mock_noise_std,
                malformation_prob=args.mock_malform_prob,
                latency_base=getattr(args, "mock_latency_base", 0.0),
                latency_jitter=getattr(args, "mock_latency_jitter", 0.0),
            )
        )
    if not args.endpoint or not args.model:
        raise ValueError("--endpoint and --model are required for the http backend")
    return backends.HttpBackend(
        backends.HttpBackendConfig(
            url=args.endpoint,
            model=args.model,
            api_token=os.environ.get(API_TOKEN_ENV),
        )
    )


def _fusion_config(value: str) -> fusion.FusionConfig:
    presets = {
        "raw_weighted": fusion.RAW_SUM_100,
        "minmax_blend": fusion.MINMAX_10_90,
        "zscore_blend": fusion.ZSCORE_20_80,
    }
    if value in presets:
        return presets[value]
    if Path(value).exists():
        return fusion.load_fusion_config(value)
    raise ValueError(
        f"--fusion must name a strategy ({', '.join(presets)}) or a config file"
    )


def cmd_rerank(args) -> int:
    groups = load_query_groups(args.input)
    backend = _build_backend(args, groups)
    template = _load_template(args)
    result = backends.run_pointwise(
        groups, backend, parallelism=args.parallelism, template=template
    )
    if result.failures:
        failed = "; ".join(
            f"({qid}, {did}): {reason}"
            for (qid, did), reason in sorted(result.failures.items())
        )
        raise BackendError(f"scoring failed for {len(result.failures)} pair(s): {failed}")

    all_entries = []
    fused_entries = []
    fusion_config = _fusion_config(args.fusion) if args.fusion else None
    if fusion_config is not None and not args.fused_run_out:
        raise ValueError("--fused-run-out is required when --fusion is set")
    for group in groups:
        scores = {
            doc.doc_id: result.scores[(group.query_id, doc.doc_id)]
            for doc in group.candidates
        }
        ranked = metrics.rank_by_score(group, scores)
        all_entries.extend(metrics.ranked_list_to_run_entries(ranked, args.run_tag))
        if fusion_config is not None:
            first_stage = {}
            for doc in group.candidates:
                if doc.first_stage_score is None:
                    raise DataError(
                        f"query {group.query_id!r}: doc {doc.doc_id!r} has no "
                        "first_stage_score; fusion needs one"
                    )
                first_stage[doc.doc_id] = doc.first_stage_score
            fused = fusion.fuse(scores, first_stage, fusion_config)
            fused_ranked = metrics.rank_by_score(group, fused.scores)
            fused_entries.extend(
                metrics.ranked_list_to_run_entries(
                    fused_ranked, args.run_tag + "-fused"
                )
            )
    write_run(all_entries, args.run_out)
    print(f"wrote {len(all_entries)} entries to {args.run_out}")
    if fusion_config is not None:
        write_run(fused_entries, args.fused_run_out)
        print(f"wrote {len(fused_entries)} fused entries to {args.fused_run_out}")
    print(f"wall_clock_s\t{result.wall_clock_seconds:.6f}")
    print(f"unparsed\t{result.unparsed}")
    return EXIT_OK


def cmd_eval(args) -> int:
    entries = load_run(args.run)
    qrels = load_qrels(args.qrels)
    report = metrics.evaluate_run(entries, qrels, k=args.k)
    text = report.as_text()
    sys.stdout.write(text)
    if args.report_out:
        Path(args.report_out).write_text(text, encoding="utf-8")
    return EXIT_OK


def _load_rollout_dump(path: str, scheme: str):
    """Group rollout dump records by query: parsed outputs per doc plus
    reference scores."""
    per_query: dict[str, dict[str, dict[int, str]]] = {}
    refs: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                qid = str(rec["query_id"])
                did = str(rec["doc_id"])
                idx = int(rec["rollout_idx"])
                raw = str(rec["raw_text"])
                ref = float(rec["ref_score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise DataError("invalid rollout record", line=lineno, path=path)
            per_query.setdefault(qid, {}).setdefault(did, {})[idx] = raw
            refs.setdefault(qid, {})[did] = ref
    parsed_per_query = {}
    for qid, docs in per_query.items():
        counts = {len(idx_map) for idx_map in docs.values()}
        if len(counts) != 1:
            raise DataError(
                f"query {qid!r}: rollout counts differ across documents "
                f"({sorted(counts)}); dump is incomplete"
            )
        (g,) = counts
        parsed_docs = {}
        for did, idx_map in docs.items():
            if sorted(idx_map) != list(range(g)):
                raise DataError(
                    f"query {qid!r} doc {did!r}: rollout indices are not 0..{g - 1}"
                )
            parsed_docs[did] = tuple(
                parse_output(idx_map[i], scheme) for i in range(g)
            )
        parsed_per_query[qid] = parsed_docs
    return parsed_per_query, refs


def cmd_reward(args) -> int:
    parsed_per_query, refs = _load_rollout_dump(args.rollouts, args.scheme)
    qrels = load_qrels(args.qrels)
    assignments = []
    for qid in sorted(parsed_per_query):
        docs = parsed_per_query[qid]
        judged = qrels.for_query(qid)
        positives = frozenset(d for d in docs if judged.get(d, 0) > 0)
        matrix = rewards.RolloutMatrix(
            query_id=qid,
            rollouts=docs,
            positives=positives,
            negatives=frozenset(docs) - positives,
            reference_scores=refs[qid],
        )
        assignments.append(rewards.compute_reward(args.reward, matrix))
    rewards.write_reward_dump(assignments, args.out)
    histogram: dict[str, int] = {}
    for assignment in assignments:
        for branch, count in assignment.branch_histogram().items():
            histogram[branch] = histogram.get(branch, 0) + count
    for branch in sorted(histogram):
        print(f"{branch}\t{histogram[branch]}")
    print(f"wrote rewards for {len(assignments)} queries to {args.out}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    groups = load_query_groups(args.input)
    rankings = synthesis.rankings_from_run(load_run(args.rankings))
    corpus = load_corpus(args.corpus)
    if args.backend == "mock":
        if args.seed is None:
            raise ValueError("--seed is mandatory for mock runs")
        oracle = backends.mock_oracle_from_groups(groups)
        for doc_id in corpus:
            oracle.setdefault(doc_id, 0.0)
        teacher: backends.ScorerBackend = backends.MockBackend(
            backends.MockBackendConfig(
                seed=args.seed,
                oracle=oracle,
                noise_std=args.mock_noise_std,
                malformation_prob=args.mock_malform_prob,
            )
        )
    else:
        teacher = _build_backend(args, groups)
    config = synthesis.SynthesisConfig(
        consensus_samples=args.consensus_samples,
        max_output_tokens=args.max_output_tokens,
        seed=args.seed or 0,
    )
    records, report = synthesis.build_sft_dataset(
        groups,
        rankings,
        teacher,
        config=config,
        corpus=corpus,
        profile=args.profile,
        parallelism=args.parallelism,
    )
    synthesis.write_sft_dataset(records, args.out)
    text = report.as_text()
    sys.stdout.write(text)
    if args.report_out:
        Path(args.report_out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    if bool(args.input) == bool(args.synthetic_queries):
        raise ValueError("provide exactly one of --input / --synthetic-queries")
    if args.input:
        dataset = load_query_groups(args.input)
    else:
        dataset = grpo.synthetic_training_groups(
            n_queries=args.synthetic_queries, seed=args.seed
        )
    config = grpo.GrpoConfig()
    extras: dict[str, str] = {}
    if args.grpo_config:
        config, extras = grpo.load_grpo_config(args.grpo_config)
    learning_rate = float(extras.get("learning_rate", args.learning_rate))
    mini_batches = int(extras.get("mini_batches", args.mini_batches))
    policy, stats = grpo.train_toy_policy(
        dataset,
        args.reward,
        config=config,
        steps=args.steps,
        seed=args.seed,
        learning_rate=learning_rate,
        mini_batches=mini_batches,
    )
    if args.stats_out:
        grpo.write_stats_stream(stats, args.stats_out)
    if args.policy_out:
        policy.save(args.policy_out)
    if stats:
        first, last = stats[0], stats[-1]
        final_ndcg = grpo.mean_dataset_ndcg(policy, dataset)
        print(f"steps\t{len(stats)}")
        print(f"mean_reward_first\t{first.mean_reward:.6f}")
        print(f"mean_reward_last\t{last.mean_reward:.6f}")
        print(f"mean_ndcg10_initial\t{first.mean_ndcg10:.6f}")
        print(f"mean_ndcg10_final\t{final_ndcg:.6f}")
    else:
        print("steps\t0")
    return EXIT_OK


def cmd_bench_latency(args) -> int:
    model = backends.LatencyModel(base=args.latency_base, jitter=args.latency_jitter)
    rows = []
    for p in args.parallelism:
        duration = backends.simulate_pointwise_latency(
            args.n_docs, p, model, seed=args.seed
        )
        rows.append(
            backends.LatencyReportRow(
                method="pointwise",
                n_docs=args.n_docs,
                setting=f"P={p}",
                duration_seconds=duration,
            )
        )
    for window in args.windows:
        for stride in args.strides:
            duration = backends.simulate_listwise_latency(
                args.n_docs, window, stride, model, seed=args.seed
            )
            calls = backends.listwise_call_count(args.n_docs, window, stride)
            rows.append(
                backends.LatencyReportRow(
                    method="listwise",
                    n_docs=args.n_docs,
                    setting=f"w={window},stride={stride},calls={calls}",
                    duration_seconds=duration,
                )
            )
    sys.stdout.write(backends.latency_report_text(rows))
    return EXIT_OK


_COMMANDS = {
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "reward": cmd_reward,
    "synthesize": cmd_synthesize,
    "train-toy": cmd_train_toy,
    "bench-latency": cmd_bench_latency,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"pointrank: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"pointrank: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, PointrankError, OSError) as exc:
        print(f"pointrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
