"""Normalisation statistics and aggregation of the three indices."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

SOURCES = ("evaluation_set", "frozen_corpus")
AGGREGATION_MODES = ("direct-addition", "linear-addition", "sigmoid-addition", "sigmoid-multiplication")
_MODE_ALIASES = {
    "direct": "direct-addition",
    "linear": "linear-addition",
    "sigmoid": "sigmoid-addition",
    "sigmoid-add": "sigmoid-addition",
    "sigmoid-mult": "sigmoid-multiplication",
    "sigmoid-mul": "sigmoid-multiplication",
}


class DegenerateStatsError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    index_name: str
    mean: float
    std: float
    source: str = "evaluation_set"

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)) or self.std <= 0:
            raise DegenerateStatsError(f"{self.index_name}: std must be positive and finite")
        if self.source not in SOURCES:
            raise ValueError(f"unknown stats source {self.source!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path, **extra) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({**self.to_dict(), **extra}, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        data = json.loads(Path(path).read_text())
        if isinstance(data, list):
            if len(data) != 1:
                raise ValueError(f"{path}: expected a single stats record")
            data = data[0]
        return cls(data["index_name"], float(data["mean"]), float(data["std"]), data.get("source", "evaluation_set"))


def compute_norm_stats(raw_scores: Sequence[float], index_name: str, source: str = "evaluation_set") -> NormStats:
    """Mean and population standard deviation (divide by n) of raw scores."""
    x = np.asarray(raw_scores, dtype=np.float64).ravel()
    if x.size < 2:
        raise DegenerateStatsError("need at least two raw scores")
    std = float(x.std())
    if std == 0:
        raise DegenerateStatsError(f"{index_name}: raw scores have zero variance")
    return NormStats(index_name, float(x.mean()), std, source)


def zscore(raw, stats: NormStats):
    return (np.asarray(raw, dtype=np.float64) - stats.mean) / stats.std


def rescale(raw, stats: NormStats):
    """Gaussian normalisation followed by the negative sigmoid, 1 / (1 + e^z).

    Used for the "lower raw is better" indices (NIQE, TPQI).
    """
    out = expit(-zscore(raw, stats))
    return float(out) if np.ndim(out) == 0 else out


def bvqi(q_a: float, q_s: float, q_t: float) -> float:
    return float(q_a + q_s + q_t)


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}; choose from {AGGREGATION_MODES}")
    return mode


def aggregate_variant(q_a: float, q_s: float, q_t: float, mode: str) -> float:
    """Combine already-aligned components: sum for the addition modes, product
    for sigmoid-multiplication. Alignment itself is :func:`align_components`."""
    mode = normalize_mode(mode)
    if mode == "sigmoid-multiplication":
        return float(q_a * q_s * q_t)
    return float(q_a + q_s + q_t)


def align_components(
    semantic_raw: float,
    niqe_frames: Sequence[float],
    tpqi: float,
    mode: str,
    stats: dict[str, NormStats] | None = None,
) -> tuple[float, float, float]:
    """Bring raw indices to a common orientation (higher is better) and scale.

    direct: raw values, NIQE/TPQI negated. linear: Gaussian normalisation
    only. sigmoid: the normal index pipeline (sigmoid of the semantic raw
    score, negative sigmoid of the normalised NIQE/TPQI).
    """
    mode = normalize_mode(mode)
    niqe_frames = np.asarray(niqe_frames, dtype=np.float64)
    if mode == "direct-addition":
        return float(semantic_raw), -float(niqe_frames.mean()), -float(tpqi)
    if stats is None:
        raise ValueError(f"{mode} needs normalisation stats")
    if mode == "linear-addition":
        return (
            float(zscore(semantic_raw, stats["semantic"])),
            -float(zscore(niqe_frames, stats["niqe"]).mean()),
            -float(zscore(tpqi, stats["tpqi"])),
        )
    return (
        float(expit(semantic_raw)),
        float(np.mean(rescale(niqe_frames, stats["niqe"]))),
        float(rescale(tpqi, stats["tpqi"])),
    )


@dataclass
class IndexBundle:
    video_id: str
    q_a: float
    q_s: float
    q_t: float
    q_unified: float
    q_a_per_pair: dict[str, float] = field(default_factory=dict)
    q_implicit: float | None = None
    variant: str = "bvqi-local"

    def to_dict(self) -> dict:
        return asdict(self)
