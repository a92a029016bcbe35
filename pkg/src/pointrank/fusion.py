"""Hybrid score fusion of first-stage (e.g. BM25) and reranker scores.

Three recipes are supported, all applied per query over its candidate
list:

* ``raw_weighted``      - multiplier * rerank + first_stage
* ``minmax_blend``      - weighted sum of min-max normalized scores
* ``zscore_blend``      - weighted sum of z-score normalized scores

Normalization uses the population standard deviation so two-element
lists behave sensibly. Constant score lists normalize to all zeros and
are flagged rather than rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

from .config import parse_kv_file
from .errors import DataError

STRATEGIES = ("raw_weighted", "minmax_blend", "zscore_blend")


@dataclass(frozen=True)
class FusionConfig:
    strategy: str
    weight_rerank: float = 0.8
    weight_first_stage: float = 0.2
    raw_multiplier: float = 100.0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        if not 0.0 <= self.weight_rerank <= 1.0:
            raise ValueError("weight_rerank must lie in [0, 1]")
        if not 0.0 <= self.weight_first_stage <= 1.0:
            raise ValueError("weight_first_stage must lie in [0, 1]")
        if self.strategy != "raw_weighted":
            if abs(self.weight_rerank + self.weight_first_stage - 1.0) > 1e-9:
                raise ValueError("blend weights must sum to 1")


# Recipes reported alongside published BRIGHT results: a raw weighted
# sum (100 * rerank + BM25), a 0.1/0.9 min-max blend, and a 0.2/0.8
# z-score blend.
RAW_SUM_100 = FusionConfig("raw_weighted", raw_multiplier=100.0)
MINMAX_10_90 = FusionConfig(
    "minmax_blend", weight_first_stage=0.1, weight_rerank=0.9
)
ZSCORE_20_80 = FusionConfig(
    "zscore_blend", weight_first_stage=0.2, weight_rerank=0.8
)


class NormalizedScores(NamedTuple):
    values: list[float]
    degenerate: bool


def zscore_normalize(values: Sequence[float]) -> NormalizedScores:
    """Standardize to mean 0 and population standard deviation 1.

    A constant list has no scale to recover; it maps to all zeros with
    the degenerate flag set.
    """
    if len(values) < 2:
        raise ValueError("z-score normalization needs at least 2 values")
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    std = math.sqrt(var)
    if std == 0.0:
        return NormalizedScores([0.0] * n, degenerate=True)
    return NormalizedScores([(v - mean) / std for v in values], degenerate=False)


def minmax_normalize(values: Sequence[float]) -> NormalizedScores:
    """Rescale to [0, 1] via (x - min) / (max - min); constant lists map
    to all zeros with the degenerate flag set."""
    if len(values) < 2:
        raise ValueError("min-max normalization needs at least 2 values")
    lo = min(values)
    hi = max(values)
    if hi == lo:
        return NormalizedScores([0.0] * len(values), degenerate=True)
    return NormalizedScores([(v - lo) / (hi - lo) for v in values], degenerate=False)


@dataclass(frozen=True)
class FusionResult:
    scores: dict[str, float]
    degenerate_rerank: bool = False
    degenerate_first_stage: bool = False


def fuse(
    rerank_scores: Mapping[str, float],
    first_stage_scores: Mapping[str, float],
    config: FusionConfig,
) -> FusionResult:
    """Combine per-document rerank and first-stage scores for one query.

    Both mappings must cover exactly the same candidate set; a mismatch
    is reported with the symmetric difference. Normalization (for the
    blend strategies) happens within this candidate list.
    """
    rerank_docs = set(rerank_scores)
    first_docs = set(first_stage_scores)
    if rerank_docs != first_docs:
        diff = sorted(rerank_docs.symmetric_difference(first_docs))
        raise DataError(f"fusion inputs disagree on doc_ids: {diff}")
    doc_ids = sorted(rerank_docs)
    rr = [float(rerank_scores[d]) for d in doc_ids]
    fs = [float(first_stage_scores[d]) for d in doc_ids]

    if config.strategy == "raw_weighted":
        fused = [config.raw_multiplier * r + f for r, f in zip(rr, fs)]
        return FusionResult(scores=dict(zip(doc_ids, fused)))

    normalize = (
        minmax_normalize if config.strategy == "minmax_blend" else zscore_normalize
    )
    rr_norm = normalize(rr)
    fs_norm = normalize(fs)
    fused = [
        config.weight_rerank * r + config.weight_first_stage * f
        for r, f in zip(rr_norm.values, fs_norm.values)
    ]
    return FusionResult(
        scores=dict(zip(doc_ids, fused)),
        degenerate_rerank=rr_norm.degenerate,
        degenerate_first_stage=fs_norm.degenerate,
    )


def load_fusion_config(path: str) -> FusionConfig:
    """Read a FusionConfig from a plain-text ``key = value`` file.

    Recognized keys: strategy, weight_rerank, weight_first_stage,
    raw_multiplier. Blank lines and ``#`` comments are ignored.
    """
    fields = parse_kv_file(path)
    if "strategy" not in fields:
        raise DataError("fusion config must set 'strategy'", path=path)
    kwargs: dict[str, float | str] = {"strategy": fields.pop("strategy")}
    for key, value in fields.items():
        if key not in ("weight_rerank", "weight_first_stage", "raw_multiplier"):
            raise DataError(f"unknown fusion config key {key!r}", path=path)
        try:
            kwargs[key] = float(value)
        except ValueError:
            raise DataError(f"non-numeric value for {key!r}", path=path)
    try:
        return FusionConfig(**kwargs)  # type: ignore[arg-type]
    except ValueError as exc:
        raise DataError(str(exc), path=path)
