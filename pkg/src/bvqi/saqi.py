"""Semantic affinity quality index and its localized variant.

Everything here is pure numpy over encoder outputs: visual features are
arrays, text features are vectors. Computation is done in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import yaml
from scipy.special import expit

logger = logging.getLogger(__name__)


class DegenerateFeatureError(ValueError):
    pass


@dataclass(frozen=True)
class PromptPair:
    positive: str
    negative: str

    def __post_init__(self):
        if not self.positive.strip() or not self.negative.strip():
            raise ValueError("prompt descriptions must be nonempty")

    @property
    def rendered_positive(self) -> str:
        return build_prompt(self.positive)

    @property
    def rendered_negative(self) -> str:
        return build_prompt(self.negative)

    @property
    def name(self) -> str:
        return f"{self.positive}-{self.negative}".replace(" ", "_")

    def swapped(self) -> "PromptPair":
        return PromptPair(self.negative, self.positive)


DEFAULT_PAIRS = (PromptPair("high quality", "low quality"), PromptPair("good", "bad"))


@dataclass
class QualityMap:
    values: np.ndarray  # (rows, cols) in (0, 1)
    frame_index: int
    pair_id: str = "all"


def build_prompt(description: str) -> str:
    if not description or not description.strip():
        raise ValueError("description must be nonempty")
    return "a " + description + " photo"


def load_prompt_pairs(path: str | Path) -> list[PromptPair]:
    """Read ``[{positive: ..., negative: ...}, ...]`` from a YAML/JSON file."""
    data = yaml.safe_load(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("prompt_pairs", data.get("pairs"))
    if not isinstance(data, list) or not data:
        raise ValueError(f"{path}: expected a nonempty list of prompt pairs")
    pairs = []
    for item in data:
        if isinstance(item, dict):
            pairs.append(PromptPair(str(item["positive"]), str(item["negative"])))
        else:
            pos, neg = item
            pairs.append(PromptPair(str(pos), str(neg)))
    return pairs


def _unit(x: np.ndarray, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    ok = norm > 0
    return np.divide(x, norm, out=np.zeros_like(x), where=ok), ok[..., 0]


def cosine(visual: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Cosine of every row of ``visual`` (..., D) with ``text`` (D,).

    Zero-norm visual rows give 0.
    """
    t, t_ok = _unit(np.asarray(text)[None])
    if not t_ok.all():
        raise DegenerateFeatureError("text feature has zero norm")
    v, _ = _unit(visual)
    return v @ t[0]


def affinity(visual: np.ndarray, text: np.ndarray) -> float:
    """Mean over frames of the cosine between frame features (N, D) and text (D,)."""
    visual = np.atleast_2d(np.asarray(visual, dtype=np.float64))
    if len(visual) == 0:
        raise ValueError("need at least one frame feature")
    ok = np.linalg.norm(visual, axis=-1) > 0
    if not ok.any():
        raise DegenerateFeatureError("all frame features have zero norm")
    if not ok.all():
        logger.warning("%d zero-norm frame features counted as zero affinity", int((~ok).sum()))
    return float(np.mean(cosine(visual, text)))


def differential_affinity(visual: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> float:
    return affinity(visual, positive) - affinity(visual, negative)


def mpda(visual: np.ndarray, text_pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Sum of antonym-differential affinities over prompt pairs."""
    if not text_pairs:
        raise ValueError("need at least one prompt pair")
    return float(sum(differential_affinity(visual, p, n) for p, n in text_pairs))


def saqi_score(visual: np.ndarray, text_pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    return float(expit(mpda(visual, text_pairs)))


def local_affinity(local: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Per-pixel cosine map for a local grid (..., H, W, D)."""
    local = np.asarray(local, dtype=np.float64)
    bad = ~(np.linalg.norm(local, axis=-1) > 0)
    if bad.any():
        logger.warning("%d zero-norm local features set to zero affinity", int(bad.sum()))
    return cosine(local, text)


def local_mpda(local: np.ndarray, text_pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    if not text_pairs:
        raise ValueError("need at least one prompt pair")
    return sum(local_affinity(local, p) - local_affinity(local, n) for p, n in text_pairs)


def saqi_local(
    local: np.ndarray,
    text_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    pair_id: str = "all",
) -> tuple[float, list[QualityMap]]:
    """Localized index for local grids (N, H, W, D).

    Each feature pixel gets the sigmoid of its summed local differential
    affinity; the video score is the mean over all pixels of all frames.
    """
    local = np.asarray(local)
    if local.ndim == 3:
        local = local[None]
    maps = expit(local_mpda(local, text_pairs))
    return float(maps.mean()), [QualityMap(m, i, pair_id) for i, m in enumerate(maps)]


def saqi_local_per_pair(
    local: np.ndarray, text_pairs: Sequence[tuple[np.ndarray, np.ndarray]]
) -> list[float]:
    """Localized index computed separately for each pair (fusion inputs)."""
    return [saqi_local(local, [tp])[0] for tp in text_pairs]


def _colorize(values: np.ndarray) -> np.ndarray:
    # red for low, green for high; 0.5 maps to an even red/green mix
    v = np.clip(values, 0.0, 1.0)[..., None]
    red = np.array([255.0, 0.0, 0.0])
    green = np.array([0.0, 255.0, 0.0])
    return (1.0 - v) * red + v * green


def render_quality_map(qmap: QualityMap | np.ndarray, frame: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a bilinearly upsampled quality map over an RGB frame (uint8 out)."""
    values = qmap.values if isinstance(qmap, QualityMap) else np.asarray(qmap)
    if values.ndim != 2:
        raise ValueError(f"quality map must be 2-D, got {values.shape}")
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ValueError(f"frame must be (H, W, 3), got {frame.shape}")
    h, w = frame.shape[:2]
    up = cv2.resize(values.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
    base = frame.astype(np.float64) if frame.dtype == np.uint8 else frame.astype(np.float64) * 255.0
    out = (1.0 - alpha) * base + alpha * _colorize(up)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def heatmap_filename(video_id: str, frame: int, pair: str) -> str:
    return f"{video_id}_f{frame}_{pair}.png"


def write_png(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")
    return path


@dataclass
class SemanticResult:
    """Stats-free semantic outputs for one video."""

    mpda: float
    q_a: float
    q_a_local: float
    q_a_per_pair: dict[str, float] = field(default_factory=dict)
    q_a_local_per_pair: dict[str, float] = field(default_factory=dict)
