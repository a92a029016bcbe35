"""Group-relative policy optimization at desk scale.

The math layer implements the objective pieces exactly as used for the
reranker training runs: group-normalized advantages, the clipped
importance-sampling surrogate, and the low-variance per-token KL
estimator ``r - log r - 1``. The trainer layer applies them to a toy
parametric policy (a linear scorer with a softmax over the 11 integer
score classes) so the full sample-rank-reward-update loop can be
exercised and verified without an LLM.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import parse_kv_file
from .data import Document, QueryGroup
from .errors import DataError
from .metrics import ndcg_at_k
from .rewards import compute_reward, rollout_matrix_from_group
from .scoring import ParsedOutput

N_SCORE_CLASSES = 11  # integer scores 0..10
ADVANTAGE_EPS = 1e-8

# --------------------------------------------------------------------
# Objective mathematics
# --------------------------------------------------------------------


@dataclass(frozen=True)
class GrpoConfig:
    """Group size, clip range and KL strength.

    Defaults follow the recorded reranker training configuration
    (rollout_n = 5, clip_ratio = 0.2, kl_loss_coef = 0.001).
    """

    group_size: int = 5
    clip_ratio: float = 0.2
    kl_coef: float = 0.001

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if self.kl_coef < 0.0:
            raise ValueError("kl_coef must be >= 0")


# Config-file keys use the names of the original training configuration
# for traceability.
_GRPO_FILE_KEYS = {
    "rollout_n": ("group_size", int),
    "clip_ratio": ("clip_ratio", float),
    "kl_loss_coef": ("kl_coef", float),
}


def load_grpo_config(path: str) -> tuple[GrpoConfig, dict[str, str]]:
    """Read a GrpoConfig from a ``key = value`` file.

    Returns the config plus any unrecognized keys (e.g. trainer
    settings) for the caller to interpret.
    """
    fields = parse_kv_file(path)
    kwargs: dict[str, float | int] = {}
    extras: dict[str, str] = {}
    for key, value in fields.items():
        if key in _GRPO_FILE_KEYS:
            name, cast = _GRPO_FILE_KEYS[key]
            try:
                kwargs[name] = cast(value)
            except ValueError:
                raise DataError(f"bad value for {key!r}: {value!r}", path=path)
        else:
            extras[key] = value
    try:
        return GrpoConfig(**kwargs), extras  # type: ignore[arg-type]
    except ValueError as exc:
        raise DataError(str(exc), path=path)


@dataclass(frozen=True)
class TrajectoryLogProbs:
    """Per-token log-probabilities of one trajectory under the current,
    rollout-time, and reference policies."""

    logp_new: tuple[float, ...]
    logp_old: tuple[float, ...]
    logp_ref: tuple[float, ...]

    def __post_init__(self) -> None:
        n = len(self.logp_new)
        if n < 1:
            raise ValueError("trajectory must have at least one token")
        if len(self.logp_old) != n or len(self.logp_ref) != n:
            raise ValueError("log-prob sequences must be aligned")
        for seq in (self.logp_new, self.logp_old, self.logp_ref):
            if any(lp > 0.0 for lp in seq):
                raise ValueError("log-probabilities must be <= 0")

    def __len__(self) -> int:
        return len(self.logp_new)


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """Normalize a group of rewards: (r - mean) / (std + 1e-8).

    Uses the population standard deviation; an all-equal group yields
    all-zero advantages.
    """
    if len(rewards) < 2:
        raise ValueError("a group needs at least 2 rewards")
    n = len(rewards)
    mean = sum(rewards) / n
    std = math.sqrt(sum((r - mean) ** 2 for r in rewards) / n)
    return [(r - mean) / (std + ADVANTAGE_EPS) for r in rewards]


def clipped_term(
    logp_new: float, logp_old: float, advantage: float, clip_ratio: float
) -> float:
    """Clipped importance-sampling surrogate for one token:
    min(rho * A, clip(rho, 1-eps, 1+eps) * A) with
    rho = exp(logp_new - logp_old)."""
    ratio = math.exp(logp_new - logp_old)
    clipped = min(max(ratio, 1.0 - clip_ratio), 1.0 + clip_ratio)
    return min(ratio * advantage, clipped * advantage)


def kl_k3(logp_ref: float, logp_new: float) -> float:
    """Low-variance per-token KL estimate: r - log r - 1 with
    r = ref/new probability ratio. Non-negative by convexity of exp."""
    diff = logp_ref - logp_new
    value = math.exp(diff) - diff - 1.0
    return max(0.0, value)


def grpo_objective(
    group: Sequence[TrajectoryLogProbs],
    advantages: Sequence[float],
    config: GrpoConfig,
) -> float:
    """Objective of one rollout group: the mean over trajectories of the
    token-mean of (clipped surrogate - beta * KL).

    The trajectory advantage is broadcast to every one of its tokens.
    """
    if len(group) != len(advantages):
        raise ValueError(
            f"got {len(group)} trajectories but {len(advantages)} advantages"
        )
    if not group:
        raise ValueError("empty trajectory group")
    total = 0.0
    for traj, advantage in zip(group, advantages):
        token_sum = 0.0
        for lp_new, lp_old, lp_ref in zip(
            traj.logp_new, traj.logp_old, traj.logp_ref
        ):
            token_sum += clipped_term(
                lp_new, lp_old, advantage, config.clip_ratio
            ) - config.kl_coef * kl_k3(lp_ref, lp_new)
        total += token_sum / len(traj)
    return total / len(group)


# --------------------------------------------------------------------
# Toy parametric policy
# --------------------------------------------------------------------

FeatureFn = Callable[[str, str], np.ndarray]


def featurize(query_text: str, doc_text: str) -> np.ndarray:
    """Hand-crafted features for one (query, document) pair: a bias
    term, token-set Jaccard overlap, query-token coverage, and a bounded
    document-length signal."""
    q = set(query_text.split())
    d = set(doc_text.split())
    union = q | d
    inter = q & d
    jaccard = len(inter) / len(union) if union else 0.0
    coverage = len(inter) / len(q) if q else 0.0
    length_signal = min(1.0, len(d) / 32.0)
    return np.array([1.0, jaccard, coverage, length_signal], dtype=np.float64)


N_FEATURES = 4


class ToyPolicy:
    """Linear scorer: softmax over the integer score classes 0..10,
    with logits theta @ features."""

    def __init__(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[0] != N_SCORE_CLASSES:
            raise ValueError(
                f"theta must have {N_SCORE_CLASSES} rows, got {theta.shape}"
            )
        self.theta = theta

    @classmethod
    def initial(cls, n_features: int = N_FEATURES) -> "ToyPolicy":
        """Zero parameters: a uniform score distribution for every pair,
        so the initial ranking carries no information."""
        return cls(np.zeros((N_SCORE_CLASSES, n_features)))

    def log_probs(self, features: np.ndarray) -> np.ndarray:
        """Log of the categorical score distribution, rows per pair.

        ``features`` has shape (n, n_features); the result is
        (n, N_SCORE_CLASSES).
        """
        logits = features @ self.theta.T
        logits = logits - logits.max(axis=-1, keepdims=True)
        return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))

    def probs(self, features: np.ndarray) -> np.ndarray:
        return np.exp(self.log_probs(features))

    def expected_scores(self, features: np.ndarray) -> np.ndarray:
        """Mean of the score distribution; used for deterministic
        ranking and as a reference score in [0, 10]."""
        return self.probs(features) @ np.arange(N_SCORE_CLASSES, dtype=np.float64)

    def sample_scores(
        self, features: np.ndarray, count: int, rng: np.random.Generator
    ) -> np.ndarray:
        """Sample ``count`` integer scores per row; shape (n, count)."""
        cum = np.cumsum(self.probs(features), axis=1)
        draws = rng.random((features.shape[0], count))
        return (draws[:, :, None] < cum[:, None, :]).argmax(axis=2)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump({"theta": self.theta.tolist()}, handle)
            handle.write("\n")

    @classmethod
    def load(cls, path: str) -> "ToyPolicy":
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
        return cls(np.array(payload["theta"], dtype=np.float64))


@dataclass(frozen=True)
class PolicyStepStats:
    """Per-step training record, streamable as line-delimited JSON."""

    step: int
    mean_reward: float
    objective: float
    mean_kl: float
    clip_fraction: float
    grad_norm: float
    mean_ndcg10: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.clip_fraction <= 1.0:
            raise ValueError("clip_fraction must lie in [0, 1]")

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "mean_reward": self.mean_reward,
            "objective": self.objective,
            "mean_kl": self.mean_kl,
            "clip_fraction": self.clip_fraction,
            "grad_norm": self.grad_norm,
            "mean_ndcg10": self.mean_ndcg10,
        }


def batch_objective(
    theta: np.ndarray,
    features: np.ndarray,
    classes: np.ndarray,
    logp_old: np.ndarray,
    logp_ref: np.ndarray,
    advantages: np.ndarray,
    config: GrpoConfig,
) -> float:
    """Mean per-sample objective of a flat batch of single-token
    trajectories under the policy parameters ``theta``.

    Agrees with averaging :func:`grpo_objective` over the batch's
    rollout groups, since every trajectory here has length one.
    """
    policy = ToyPolicy(theta)
    logp_new = policy.log_probs(features)[np.arange(len(classes)), classes]
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio)
    surrogate = np.minimum(ratio * advantages, clipped * advantages)
    diff = logp_ref - logp_new
    kl = np.maximum(0.0, np.exp(diff) - diff - 1.0)
    return float(np.mean(surrogate - config.kl_coef * kl))


def batch_gradient(
    theta: np.ndarray,
    features: np.ndarray,
    classes: np.ndarray,
    logp_old: np.ndarray,
    logp_ref: np.ndarray,
    advantages: np.ndarray,
    config: GrpoConfig,
) -> tuple[np.ndarray, float, float, float]:
    """Analytic gradient of :func:`batch_objective` with respect to
    theta, plus (objective, mean KL, clip-active fraction).

    The surrogate contributes gradient only where the unclipped branch
    attains the min; the KL estimator contributes beta * (r - 1) per
    sample through the chosen class's log-probability.
    """
    policy = ToyPolicy(theta)
    log_p = policy.log_probs(features)
    p = np.exp(log_p)
    idx = np.arange(len(classes))
    logp_new = log_p[idx, classes]
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio)
    unclipped_value = ratio * advantages
    clipped_value = clipped * advantages
    surrogate = np.minimum(unclipped_value, clipped_value)
    grad_surrogate = np.where(
        unclipped_value <= clipped_value, ratio * advantages, 0.0
    )
    diff = logp_ref - logp_new
    ref_ratio = np.exp(diff)
    kl = np.maximum(0.0, ref_ratio - diff - 1.0)
    coeff = grad_surrogate + config.kl_coef * (ref_ratio - 1.0)

    onehot = np.zeros_like(p)
    onehot[idx, classes] = 1.0
    grad = ((coeff[:, None] * (onehot - p)).T @ features) / len(classes)

    objective = float(np.mean(surrogate - config.kl_coef * kl))
    mean_kl = float(np.mean(kl))
    clip_fraction = float(np.mean(clipped_value < unclipped_value))
    return grad, objective, mean_kl, clip_fraction


def synthetic_training_groups(
    n_queries: int = 64, docs_per_query: int = 20, seed: int = 0
) -> list[QueryGroup]:
    """Separable toy dataset: one positive per query sharing most of the
    query's tokens, negatives sharing at most one."""
    rng = np.random.default_rng(seed)
    groups = []
    for qi in range(n_queries):
        query_tokens = [f"tok{qi}_{k}" for k in range(8)]
        positive_slot = int(rng.integers(docs_per_query))
        candidates = []
        labels = {}
        for j in range(docs_per_query):
            doc_id = f"q{qi}d{j:02d}"
            fillers = [f"fill{qi}_{j}_{k}" for k in range(int(rng.integers(6, 14)))]
            if j == positive_slot:
                text = " ".join(query_tokens[:6] + fillers[:4])
                labels[doc_id] = 1
            else:
                overlap = query_tokens[:1] if rng.random() < 0.3 else []
                text = " ".join(overlap + fillers)
            candidates.append(Document(doc_id=doc_id, text=text))
        groups.append(
            QueryGroup(
                query_id=f"q{qi}",
                query_text=" ".join(query_tokens),
                instruction="toy relevance",
                candidates=tuple(candidates),
                labels=labels,
            )
        )
    return groups


def mean_dataset_ndcg(
    policy: ToyPolicy,
    groups: Sequence[QueryGroup],
    group_features: Sequence[np.ndarray] | None = None,
    feature_fn: FeatureFn = featurize,
    k: int = 10,
) -> float:
    """Mean nDCG@k over the dataset when ranking each group's documents
    by the policy's expected score (ties by doc_id)."""
    if group_features is None:
        group_features = [
            np.stack([feature_fn(g.query_text, d.text) for d in g.candidates])
            for g in groups
        ]
    total = 0.0
    for group, features in zip(groups, group_features):
        expected = policy.expected_scores(features)
        order = sorted(
            range(len(group.candidates)),
            key=lambda i: (-expected[i], group.candidates[i].doc_id),
        )
        ranked_grades = [group.grade(group.candidates[i].doc_id) for i in order]
        all_grades = [group.grade(d.doc_id) for d in group.candidates]
        total += ndcg_at_k(ranked_grades, all_grades, k)
    return total / len(groups)


# The toy policy emits bare integer scores; reuse one parsed rollout per
# score class instead of re-validating a dataclass per sample.
_PARSED_BY_SCORE = tuple(
    ParsedOutput(
        think_text="", score=s, answer_token_prob=None, formatted=True, raw_text=""
    )
    for s in range(N_SCORE_CLASSES)
)


def train_toy_policy(
    dataset: Sequence[QueryGroup],
    reward_name: str,
    config: GrpoConfig = GrpoConfig(),
    steps: int = 200,
    seed: int = 0,
    learning_rate: float = 0.5,
    mini_batches: int = 4,
    feature_fn: FeatureFn = featurize,
) -> tuple[ToyPolicy, list[PolicyStepStats]]:
    """Train the toy policy with GRPO on rule-based rewards.

    Each step samples ``group_size`` score rollouts per (query, doc)
    pair from the pre-update policy, computes listwise rewards over the
    whole query group, normalizes advantages within each pair's rollout
    group, and ascends the analytic objective gradient over
    ``mini_batches`` shuffled slices. The initial parameters double as
    the frozen reference policy for the KL term and the reference
    scores. Fully deterministic given the seed.

    In each step's stats, ``mean_reward`` and ``mean_ndcg10`` describe
    the policy the step sampled from (so step 0 reports the initial
    policy), while ``objective``, ``mean_kl`` and ``clip_fraction`` are
    evaluated on the step's samples after its updates.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    for group in dataset:
        if not group.positive_ids():
            raise DataError(
                f"query {group.query_id!r} has no positive document; "
                "listwise rewards are undefined"
            )
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if mini_batches < 1:
        raise ValueError("mini_batches must be >= 1")

    rng = np.random.default_rng(seed)
    policy = ToyPolicy.initial()
    ref_policy = ToyPolicy(policy.theta.copy())

    group_features = [
        np.stack([feature_fn(g.query_text, d.text) for d in g.candidates])
        for g in dataset
    ]
    ref_scores = [
        {
            doc.doc_id: float(score)
            for doc, score in zip(g.candidates, ref_policy.expected_scores(f))
        }
        for g, f in zip(dataset, group_features)
    ]
    ref_logp_all = [ref_policy.log_probs(f) for f in group_features]

    stats: list[PolicyStepStats] = []
    G = config.group_size
    for step in range(steps):
        old_policy = ToyPolicy(policy.theta.copy())
        sampling_ndcg = mean_dataset_ndcg(old_policy, dataset, group_features)

        feat_rows: list[np.ndarray] = []
        class_rows: list[int] = []
        old_rows: list[float] = []
        ref_rows: list[float] = []
        adv_rows: list[float] = []
        reward_rows: list[float] = []

        for gi, group in enumerate(dataset):
            features = group_features[gi]
            samples = old_policy.sample_scores(features, G, rng)
            old_logp = old_policy.log_probs(features)
            rollouts = {
                doc.doc_id: [_PARSED_BY_SCORE[samples[di, j]] for j in range(G)]
                for di, doc in enumerate(group.candidates)
            }
            matrix = rollout_matrix_from_group(group, rollouts, ref_scores[gi])
            assignment = compute_reward(reward_name, matrix)
            for di, doc in enumerate(group.candidates):
                doc_rewards = [
                    assignment.rewards[(doc.doc_id, j)].value for j in range(G)
                ]
                advantages = group_advantages(doc_rewards)
                for j in range(G):
                    cls = int(samples[di, j])
                    feat_rows.append(features[di])
                    class_rows.append(cls)
                    old_rows.append(float(old_logp[di, cls]))
                    ref_rows.append(float(ref_logp_all[gi][di, cls]))
                    adv_rows.append(advantages[j])
                    reward_rows.append(doc_rewards[j])

        feats = np.stack(feat_rows)
        classes = np.array(class_rows, dtype=np.int64)
        logp_old = np.array(old_rows)
        logp_ref = np.array(ref_rows)
        advantages_arr = np.array(adv_rows)

        order = rng.permutation(len(classes))
        grad_norms = []
        for chunk in np.array_split(order, mini_batches):
            if len(chunk) == 0:
                continue
            grad, _, _, _ = batch_gradient(
                policy.theta,
                feats[chunk],
                classes[chunk],
                logp_old[chunk],
                logp_ref[chunk],
                advantages_arr[chunk],
                config,
            )
            policy.theta = policy.theta + learning_rate * grad
            grad_norms.append(float(np.linalg.norm(grad)))

        _, objective, mean_kl, clip_fraction = batch_gradient(
            policy.theta, feats, classes, logp_old, logp_ref, advantages_arr, config
        )
        stats.append(
            PolicyStepStats(
                step=step,
                mean_reward=float(np.mean(reward_rows)),
                objective=objective,
                mean_kl=mean_kl,
                clip_fraction=clip_fraction,
                grad_norm=float(np.mean(grad_norms)) if grad_norms else 0.0,
                mean_ndcg10=sampling_ndcg,
            )
        )
    return policy, stats


def write_stats_stream(stats: Sequence[PolicyStepStats], path: str) -> None:
    """Line-delimited per-step records, ready for external plotting."""
    with open(path, "w", encoding="utf-8") as handle:
        for record in stats:
            handle.write(json.dumps(record.to_record()) + "\n")
