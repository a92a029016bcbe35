"""Listwise-derived rule rewards over groups of score rollouts.

For one query with N candidate documents and G sampled generations per
document, all N x G extracted scores are sorted together; the global
rank of each rollout drives three rule-based rewards:

* squared-error reward: tracks a reference score per document,
  independent of the other documents;
* reciprocal-rank reward: positives earn 1/rank, negatives ranked above
  any positive are penalized, correctly-low negatives earn the smooth
  squared-error reward;
* rank-discount reward: same branch structure with magnitudes taken
  from each rollout's share of an ideal log-discount gain.

Malformed rollouts always receive exactly -1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

from .data import QueryGroup
from .errors import PointrankError
from .scoring import ParsedOutput

UNFORMATTED_REWARD = -1.0

BRANCH_POSITIVE = "positive_rr"
BRANCH_PENALTY = "negative_penalty"
BRANCH_SMOOTH = "negative_smooth"
BRANCH_UNFORMATTED = "unformatted"


class DegenerateGroupError(PointrankError):
    """The rollout group cannot support listwise rewards (no positives,
    or no formatted rollout to rank)."""


@dataclass(frozen=True)
class RolloutMatrix:
    """N x G parsed rollouts for one query group.

    ``reference_scores`` holds the per-document score t_i produced by
    the reference scorer; it feeds the smooth squared-error branch.
    """

    query_id: str
    rollouts: Mapping[str, tuple[ParsedOutput, ...]]
    positives: frozenset[str]
    negatives: frozenset[str]
    reference_scores: Mapping[str, float]

    def __post_init__(self) -> None:
        if not self.rollouts:
            raise ValueError(f"query {self.query_id!r}: empty rollout matrix")
        sizes = {len(r) for r in self.rollouts.values()}
        if len(sizes) != 1:
            raise ValueError(
                f"query {self.query_id!r}: unequal rollout counts {sorted(sizes)}"
            )
        if sizes == {0}:
            raise ValueError(f"query {self.query_id!r}: zero rollouts per document")
        docs = set(self.rollouts)
        if self.positives | self.negatives != docs:
            raise ValueError(
                f"query {self.query_id!r}: positive/negative sets do not cover "
                "all documents"
            )
        if self.positives & self.negatives:
            raise ValueError(
                f"query {self.query_id!r}: positive and negative sets overlap"
            )
        missing_refs = docs - set(self.reference_scores)
        if missing_refs:
            raise ValueError(
                f"query {self.query_id!r}: missing reference scores for "
                f"{sorted(missing_refs)}"
            )
        for doc_id, t in self.reference_scores.items():
            if not 0.0 <= t <= 10.0:
                raise ValueError(
                    f"query {self.query_id!r}: reference score {t} for "
                    f"{doc_id!r} outside [0, 10]"
                )

    @property
    def group_size(self) -> int:
        return len(next(iter(self.rollouts.values())))


def rollout_matrix_from_group(
    group: QueryGroup,
    rollouts: Mapping[str, Sequence[ParsedOutput]],
    reference_scores: Mapping[str, float],
) -> RolloutMatrix:
    """Assemble a RolloutMatrix using the group's labels to split
    documents into positives (grade > 0) and negatives."""
    doc_ids = [d.doc_id for d in group.candidates]
    missing = [d for d in doc_ids if d not in rollouts]
    if missing:
        raise ValueError(f"query {group.query_id!r}: no rollouts for {missing}")
    return RolloutMatrix(
        query_id=group.query_id,
        rollouts={d: tuple(rollouts[d]) for d in doc_ids},
        positives=group.positive_ids(),
        negatives=group.negative_ids(),
        reference_scores=dict(reference_scores),
    )


@dataclass(frozen=True)
class RankAssignment:
    """Global ranks of all formatted rollouts for one query.

    Tied scores share the minimum rank of their tie block. Unformatted
    rollouts carry no rank and are absent from ``ranks``. The fields
    ``phi_pos_min`` / ``phi_pos_max`` are the extreme ranks over the
    positive documents' formatted rollouts; they are None when the
    positives produced no formatted rollout at all.
    """

    query_id: str
    ranks: Mapping[tuple[str, int], int]
    phi_pos_min: int | None
    phi_pos_max: int | None


def global_ranks(matrix: RolloutMatrix) -> RankAssignment:
    """Rank all formatted rollouts of the matrix by descending score.

    Ties are resolved by assigning the minimum rank of the tied block;
    equivalently, rank = 1 + number of strictly greater scores. A matrix
    with zero formatted rollouts is degenerate and raises.
    """
    scored: list[tuple[str, int, int]] = []  # (doc_id, rollout_idx, score)
    for doc_id, outputs in matrix.rollouts.items():
        for j, parsed in enumerate(outputs):
            if parsed.formatted:
                scored.append((doc_id, j, parsed.score))
    if not scored:
        raise DegenerateGroupError(
            f"query {matrix.query_id!r}: no formatted rollout to rank"
        )
    all_scores = sorted((s for _, _, s in scored), reverse=True)
    ranks: dict[tuple[str, int], int] = {}
    for doc_id, j, score in scored:
        # bisect on the descending score list gives the count of
        # strictly greater scores
        lo, hi = 0, len(all_scores)
        while lo < hi:
            mid = (lo + hi) // 2
            if all_scores[mid] > score:
                lo = mid + 1
            else:
                hi = mid
        ranks[(doc_id, j)] = lo + 1
    positive_ranks = [
        rank for (doc_id, _), rank in ranks.items() if doc_id in matrix.positives
    ]
    return RankAssignment(
        query_id=matrix.query_id,
        ranks=ranks,
        phi_pos_min=min(positive_ranks) if positive_ranks else None,
        phi_pos_max=max(positive_ranks) if positive_ranks else None,
    )


class RolloutReward(NamedTuple):
    value: float
    branch: str


@dataclass(frozen=True)
class RewardAssignment:
    """Reward and branch label per (document, rollout)."""

    query_id: str
    rewards: Mapping[tuple[str, int], RolloutReward]

    def __post_init__(self) -> None:
        for key, rr in self.rewards.items():
            if rr.branch == BRANCH_UNFORMATTED and rr.value != UNFORMATTED_REWARD:
                raise ValueError(f"unformatted rollout {key} must reward -1")

    def values(self) -> dict[tuple[str, int], float]:
        return {key: rr.value for key, rr in self.rewards.items()}

    def branch_histogram(self) -> dict[str, int]:
        hist: dict[str, int] = {}
        for rr in self.rewards.values():
            hist[rr.branch] = hist.get(rr.branch, 0) + 1
        return hist


def reward_se(parsed: ParsedOutput, reference_score: float) -> float:
    """Squared-error reward: 1 - (s - t)^2 / 100 when formatted, -1
    otherwise. Lies in [0, 1] for s, t in [0, 10]."""
    if not 0.0 <= reference_score <= 10.0:
        raise ValueError(f"reference score {reference_score} outside [0, 10]")
    if not parsed.formatted:
        return UNFORMATTED_REWARD
    return 1.0 - (parsed.score - reference_score) ** 2 / 100.0


def _check_listwise_preconditions(
    matrix: RolloutMatrix, ranks: RankAssignment
) -> None:
    if not matrix.positives:
        raise DegenerateGroupError(
            f"query {matrix.query_id!r}: no positive documents; listwise "
            "rewards are undefined"
        )
    if ranks.phi_pos_min is None or ranks.phi_pos_max is None:
        raise DegenerateGroupError(
            f"query {matrix.query_id!r}: positives produced no formatted "
            "rollout, so rank comparisons are undefined"
        )


def reward_rr(matrix: RolloutMatrix, ranks: RankAssignment) -> RewardAssignment:
    """Reciprocal-rank listwise reward.

    Formatted rollouts of positive documents earn 1/rank. Formatted
    negatives ranked at or above the worst positive are penalized by
    -1/(best positive rank); negatives ranked strictly below all
    positives earn the smooth squared-error reward against their
    reference score. Everything else earns -1.
    """
    _check_listwise_preconditions(matrix, ranks)
    rewards: dict[tuple[str, int], RolloutReward] = {}
    for doc_id, outputs in matrix.rollouts.items():
        for j, parsed in enumerate(outputs):
            key = (doc_id, j)
            if not parsed.formatted:
                rewards[key] = RolloutReward(UNFORMATTED_REWARD, BRANCH_UNFORMATTED)
                continue
            phi = ranks.ranks[key]
            if doc_id in matrix.positives:
                rewards[key] = RolloutReward(1.0 / phi, BRANCH_POSITIVE)
            elif phi <= ranks.phi_pos_max:
                rewards[key] = RolloutReward(
                    -1.0 / ranks.phi_pos_min, BRANCH_PENALTY
                )
            else:
                value = reward_se(parsed, matrix.reference_scores[doc_id])
                rewards[key] = RolloutReward(value, BRANCH_SMOOTH)
    return RewardAssignment(query_id=matrix.query_id, rewards=rewards)


def rank_discount(rank: int) -> float:
    """Log-discount gain share of one rollout: 1 / log2(rank + 1)."""
    return 1.0 / math.log2(rank + 1)


def ideal_discounted_gain(n_positive_rollouts: int) -> float:
    """Ideal total gain with every positive rollout ranked first:
    sum of 1/log2(k+1) for k = 1..n."""
    return sum(rank_discount(k) for k in range(1, n_positive_rollouts + 1))


def reward_ndcg(matrix: RolloutMatrix, ranks: RankAssignment) -> RewardAssignment:
    """Rank-discount listwise reward.

    The branch structure mirrors the reciprocal-rank reward, with
    magnitudes taken from the rollout's contribution to an ideal
    log-discounted gain in which all positive rollouts rank first.
    """
    _check_listwise_preconditions(matrix, ranks)
    idcg = ideal_discounted_gain(len(matrix.positives) * matrix.group_size)
    rewards: dict[tuple[str, int], RolloutReward] = {}
    for doc_id, outputs in matrix.rollouts.items():
        for j, parsed in enumerate(outputs):
            key = (doc_id, j)
            if not parsed.formatted:
                rewards[key] = RolloutReward(UNFORMATTED_REWARD, BRANCH_UNFORMATTED)
                continue
            phi = ranks.ranks[key]
            if doc_id in matrix.positives:
                rewards[key] = RolloutReward(
                    rank_discount(phi) / idcg, BRANCH_POSITIVE
                )
            elif phi <= ranks.phi_pos_max:
                rewards[key] = RolloutReward(
                    -rank_discount(ranks.phi_pos_min) / idcg, BRANCH_PENALTY
                )
            else:
                value = reward_se(parsed, matrix.reference_scores[doc_id])
                rewards[key] = RolloutReward(value, BRANCH_SMOOTH)
    return RewardAssignment(query_id=matrix.query_id, rewards=rewards)


REWARD_NAMES = ("se", "ndcg", "rr")


def compute_reward(
    name: str, matrix: RolloutMatrix, ranks: RankAssignment | None = None
) -> RewardAssignment:
    """Dispatch on reward name; computes ranks when needed and omitted."""
    if name == "se":
        rewards = {
            (doc_id, j): RolloutReward(
                reward_se(parsed, matrix.reference_scores[doc_id]),
                BRANCH_SMOOTH if parsed.formatted else BRANCH_UNFORMATTED,
            )
            for doc_id, outputs in matrix.rollouts.items()
            for j, parsed in enumerate(outputs)
        }
        return RewardAssignment(query_id=matrix.query_id, rewards=rewards)
    if ranks is None:
        ranks = global_ranks(matrix)
    if name == "rr":
        return reward_rr(matrix, ranks)
    if name == "ndcg":
        return reward_ndcg(matrix, ranks)
    raise ValueError(f"unknown reward {name!r}; expected one of {REWARD_NAMES}")


def write_reward_dump(assignments: Iterable[RewardAssignment], path: str) -> None:
    """Line-delimited reward records: query_id, doc_id, rollout_idx,
    branch, reward."""
    with open(path, "w", encoding="utf-8") as handle:
        for assignment in assignments:
            for (doc_id, j), rr in sorted(assignment.rewards.items()):
                handle.write(
                    json.dumps(
                        {
                            "query_id": assignment.query_id,
                            "doc_id": doc_id,
                            "rollout_idx": j,
                            "branch": rr.branch,
                            "reward": rr.value,
                        }
                    )
                    + "\n"
                )
