"""Pointwise generative reranking toolkit.

Fine-grained 0-10 relevance scoring with answer-probability weighting,
listwise-derived RL rewards over score rollouts, group-relative policy
optimization math with a toy trainer, stratified SFT data synthesis,
BM25 hybrid score fusion, IR metrics, and a pointwise-vs-listwise
latency harness.
"""

from .data import (
    Document,
    QueryGroup,
    RelevanceJudgments,
    RunEntry,
    load_qrels,
    load_query_groups,
    load_run,
    write_run,
)
from .errors import BackendConfigError, BackendError, DataError, PointrankError
from .fusion import FusionConfig, fuse, minmax_normalize, zscore_normalize
from .grpo import (
    GrpoConfig,
    PolicyStepStats,
    ToyPolicy,
    TrajectoryLogProbs,
    clipped_term,
    group_advantages,
    grpo_objective,
    kl_k3,
    train_toy_policy,
)
from .metrics import RankedList, dcg_at_k, mrr, ndcg_at_k, rank_by_score
from .rewards import (
    RankAssignment,
    RewardAssignment,
    RolloutMatrix,
    global_ranks,
    reward_ndcg,
    reward_rr,
    reward_se,
)
from .scoring import (
    ParsedOutput,
    PromptTemplate,
    binary_normalized_prob,
    fine_grained_score,
    parse_output,
    render_prompt,
    score_distribution,
)
from .synthesis import (
    SynthesisConfig,
    build_sft_dataset,
    consensus_select,
    filter_by_length,
    sample_negatives,
)

__version__ = "0.1.0"

__all__ = [
    "BackendConfigError",
    "BackendError",
    "DataError",
    "Document",
    "FusionConfig",
    "GrpoConfig",
    "ParsedOutput",
    "PointrankError",
    "PolicyStepStats",
    "PromptTemplate",
    "QueryGroup",
    "RankAssignment",
    "RankedList",
    "RelevanceJudgments",
    "RewardAssignment",
    "RolloutMatrix",
    "RunEntry",
    "SynthesisConfig",
    "ToyPolicy",
    "TrajectoryLogProbs",
    "binary_normalized_prob",
    "build_sft_dataset",
    "clipped_term",
    "consensus_select",
    "dcg_at_k",
    "filter_by_length",
    "fine_grained_score",
    "fuse",
    "global_ranks",
    "group_advantages",
    "grpo_objective",
    "kl_k3",
    "load_qrels",
    "load_query_groups",
    "load_run",
    "minmax_normalize",
    "mrr",
    "ndcg_at_k",
    "parse_output",
    "rank_by_score",
    "render_prompt",
    "reward_ndcg",
    "reward_rr",
    "reward_se",
    "sample_negatives",
    "score_distribution",
    "train_toy_policy",
    "write_run",
    "zscore_normalize",
]
