"""Temporal naturalness: curvature of simulated perceptual trajectories.

Each frame of the temporal view is mapped to two response vectors (an LGN
stand-in and a V1 Gabor-energy stand-in). The angle between successive
displacement vectors measures how far the trajectory bends; natural motion
yields straighter paths.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from .fusion import NormStats, rescale
from .media import rgb_to_luma

CURVATURE_FLOOR = 1e-8
LGN_SIGMAS = (1.0, 2.0)
LGN_STABILIZER = 0.1
GABOR_ORIENTATIONS = (0.0, 45.0, 90.0, 135.0)
GABOR_WAVELENGTHS = (4.0, 8.0)


class InsufficientFramesError(ValueError):
    pass


class Domain(str, enum.Enum):
    LGN = "LGN"
    V1 = "V1"


@dataclass
class PerceptualTrajectory:
    domain: Domain
    vectors: np.ndarray  # (M, D)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) < 1:
            raise ValueError("trajectory needs a (frames, dim) array")

    def curvatures(self) -> np.ndarray:
        return curvature_series(self.vectors)


def _gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 3:
        g = rgb_to_luma(frame)
        return g if frame.dtype != np.uint8 else g / 255.0
    g = frame.astype(np.float64)
    return g / 255.0 if frame.dtype == np.uint8 else g


def lgn_response(frame: np.ndarray) -> np.ndarray:
    """Difference of Gaussians divided by local RMS energy plus a stabilizer."""
    g = _gray(frame)
    center, surround = LGN_SIGMAS
    dog = ndimage.gaussian_filter(g, center, mode="reflect") - ndimage.gaussian_filter(g, surround, mode="reflect")
    energy = np.sqrt(ndimage.gaussian_filter(dog * dog, surround, mode="reflect"))
    return (dog / (energy + LGN_STABILIZER)).ravel()


@lru_cache(maxsize=None)
def gabor_pair(theta_deg: float, wavelength: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean even and odd Gabor kernels; at 0 degrees the carrier runs along x."""
    sigma = 0.56 * wavelength
    half = int(math.ceil(3 * sigma))
    y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    t = math.radians(theta_deg)
    u = x * math.cos(t) + y * math.sin(t)
    env = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    even = env * np.cos(2 * math.pi * u / wavelength)
    even -= env * (even.sum() / env.sum())
    odd = env * np.sin(2 * math.pi * u / wavelength)
    return even, odd


def gabor_energies(frame: np.ndarray) -> np.ndarray:
    """(channels, H, W) quadrature energy maps; channel order is scale-major:
    (wavelength 4: 0, 45, 90, 135), (wavelength 8: 0, 45, 90, 135)."""
    g = _gray(frame)
    out = []
    for lam in GABOR_WAVELENGTHS:
        for theta in GABOR_ORIENTATIONS:
            even, odd = gabor_pair(theta, lam)
            pad = even.shape[0] // 2
            p = np.pad(g, pad, mode="reflect")
            re = fftconvolve(p, even, mode="valid")
            im = fftconvolve(p, odd, mode="valid")
            out.append(np.sqrt(re * re + im * im))
    return np.stack(out)


def v1_response(frame: np.ndarray) -> np.ndarray:
    return gabor_energies(frame).ravel()


def trajectory_curvature(x_prev, x_cur, x_next) -> float:
    """Angle in [0, pi] between successive displacements; 0 if either is null."""
    v1 = np.asarray(x_cur, dtype=np.float64) - np.asarray(x_prev, dtype=np.float64)
    v2 = np.asarray(x_next, dtype=np.float64) - np.asarray(x_cur, dtype=np.float64)
    if v1.shape != v2.shape:
        raise ValueError("vectors must have equal dimension")
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0 or n2 == 0:
        return 0.0
    # equals arccos of the clamped cosine, but stays accurate near 0 and pi
    u1, u2 = v1 / n1, v2 / n2
    return float(2.0 * np.arctan2(np.linalg.norm(u1 - u2), np.linalg.norm(u1 + u2)))


def curvature_series(vectors: np.ndarray) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    return np.array([trajectory_curvature(x[j - 1], x[j], x[j + 1]) for j in range(1, len(x) - 1)])


def _mean_curvatures(frames: Iterable[np.ndarray]) -> tuple[float, float, int]:
    """Stream frames once and return the mean V1 and LGN curvature.

    Only the last two responses per domain are kept in memory.
    """
    hist = {Domain.V1: [], Domain.LGN: []}
    sums = {Domain.V1: 0.0, Domain.LGN: 0.0}
    count = 0
    for frame in frames:
        count += 1
        for dom, fn in ((Domain.V1, v1_response), (Domain.LGN, lgn_response)):
            h = hist[dom]
            h.append(fn(frame))
            if len(h) == 3:
                sums[dom] += trajectory_curvature(*h)
                h.pop(0)
    if count < 3:
        raise InsufficientFramesError(f"need at least 3 frames, got {count}")
    n = count - 2
    return sums[Domain.V1] / n, sums[Domain.LGN] / n, count


def tpqi_from_curvatures(mean_v1: float, mean_lgn: float) -> float:
    return 0.5 * math.log(max(mean_v1, CURVATURE_FLOOR)) + 0.5 * math.log(max(mean_lgn, CURVATURE_FLOOR))


def tpqi_raw(frames: Iterable[np.ndarray]) -> float:
    """Half log mean V1 curvature plus half log mean LGN curvature.

    ``frames`` is the temporal view (any iterable of RGB or gray frames).
    """
    v1, lgn, _ = _mean_curvatures(frames)
    return tpqi_from_curvatures(v1, lgn)


def temporal_naturalness(raw: float, stats: NormStats) -> float:
    return float(rescale(raw, stats))
