"""Spatial naturalness: NIQE raw distances on the 1 fps view and their
Gaussian-normalised, sigmoid-rescaled average.

The NIQE pipeline follows the published MATLAB release: 7x7 Gaussian
(sigma 7/6) MSCN with C = 1 on the 0-255 luminance scale, 96x96 patches at
two scales (the second a bicubic half-size copy), 18 AGGD features per
scale and a Mahalanobis-style distance between multivariate Gaussians.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.special import gamma

from .fusion import NormStats, rescale
from .media import rgb_to_luma

logger = logging.getLogger(__name__)

FEATURE_DIM = 36
PAIR_SHIFTS = ((0, 1), (1, 0), (1, 1), (1, -1))
_GAMMA_GRID = np.arange(0.2, 10.0005, 0.001)
_R_GAMMA = gamma(2.0 / _GAMMA_GRID) ** 2 / (gamma(1.0 / _GAMMA_GRID) * gamma(3.0 / _GAMMA_GRID))


class DegenerateFitError(ValueError):
    pass


class DegenerateFrameError(ValueError):
    pass


class AggdFit(NamedTuple):
    alpha: float
    sigma_left: float
    sigma_right: float


@dataclass
class PristineModel:
    mean: np.ndarray  # (36,)
    covariance: np.ndarray  # (36, 36)
    patch_size: int = 96
    sharpness_threshold: float = 0.75

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        if self.mean.shape != (FEATURE_DIM,) or self.covariance.shape != (FEATURE_DIM, FEATURE_DIM):
            raise ValueError("pristine model must have a 36-d mean and 36x36 covariance")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8):
            raise ValueError("pristine covariance is not symmetric")

    def save(self, path: str | Path) -> Path:
        """Flat text: 36 mean values, 1296 row-major covariance values,
        patch size, sharpness threshold; one number per line."""
        path = Path(path)
        values = [*self.mean, *self.covariance.ravel()]
        lines = [repr(float(v)) for v in values] + [str(int(self.patch_size)), repr(float(self.sharpness_threshold))]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PristineModel":
        path = Path(path)
        if path.suffix == ".mat":
            return cls.from_mat(path)
        vals = [float(x) for x in path.read_text().split()]
        n = FEATURE_DIM + FEATURE_DIM**2
        if len(vals) != n + 2:
            raise ValueError(f"{path}: expected {n + 2} numbers, found {len(vals)}")
        return cls(
            np.array(vals[:FEATURE_DIM]),
            np.array(vals[FEATURE_DIM:n]).reshape(FEATURE_DIM, FEATURE_DIM),
            int(vals[n]),
            vals[n + 1],
        )

    @classmethod
    def from_mat(cls, path: str | Path, patch_size: int = 96) -> "PristineModel":
        """Read MATLAB-style parameter files (``mu_prisparam``/``cov_prisparam``)."""
        from scipy.io import loadmat

        m = loadmat(str(path))
        for mu_key, cov_key in (("mu_prisparam", "cov_prisparam"), ("pop_mu", "pop_cov")):
            if mu_key in m:
                return cls(m[mu_key], m[cov_key], patch_size)
        raise ValueError(f"{path}: no recognised NIQE parameter arrays")

    @classmethod
    def default(cls) -> "PristineModel":
        with resources.as_file(resources.files("bvqi.data") / "niqe_pristine.txt") as p:
            return cls.load(p)


@dataclass
class NiqeRawScores:
    scores: np.ndarray
    frame_indices: list[int]


def gaussian_window(size: int = 7, sigma: float = 7.0 / 6.0) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _local_moments(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = gaussian_window()
    mu = ndimage.correlate(image, w, mode="nearest")
    sigma = np.sqrt(np.abs(ndimage.correlate(image * image, w, mode="nearest") - mu * mu))
    return mu, sigma


def compute_mscn(image: np.ndarray, c: float = 1.0) -> np.ndarray:
    """Mean-subtracted contrast-normalised coefficients of a 0-255 gray image."""
    image = np.asarray(image, dtype=np.float64)
    mu, sigma = _local_moments(image)
    return (image - mu) / (sigma + c)


def _aggd_batch(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise AGGD moment matching on (P, n) samples; NaN rows on failure."""
    x = np.asarray(x, dtype=np.float64)
    sq = x * x
    neg, pos = x < 0, x > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        left = np.sqrt((sq * neg).sum(1) / neg.sum(1))
        right = np.sqrt((sq * pos).sum(1) / pos.sum(1))
        gam = left / right
        rhat = np.mean(np.abs(x), 1) ** 2 / np.mean(sq, 1)
        rnorm = rhat * (gam**3 + 1) * (gam + 1) / (gam**2 + 1) ** 2
    ok = np.isfinite(rnorm)
    alpha = np.full(len(x), np.nan)
    pos_idx = np.argmin((_R_GAMMA[None, :] - rnorm[ok, None]) ** 2, axis=1)
    alpha[ok] = _GAMMA_GRID[pos_idx]
    with np.errstate(invalid="ignore"):
        ratio = np.sqrt(gamma(1.0 / alpha) / gamma(3.0 / alpha))
    return alpha, left * ratio, right * ratio


def fit_aggd(samples: Sequence[float] | np.ndarray) -> AggdFit:
    """Asymmetric generalized Gaussian fit by moment matching.

    Shape is searched on the 0.2:0.001:10 grid used by the reference code;
    the scales are the left/right ``beta`` parameters.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2 or np.ptp(x) == 0:
        raise DegenerateFitError("need at least two distinct samples")
    a, bl, br = _aggd_batch(x[None])
    if not np.isfinite(a[0]):
        raise DegenerateFitError("samples lie on one side of zero")
    return AggdFit(float(a[0]), float(bl[0]), float(br[0]))


def _patches(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    rows, cols = h // size, w // size
    return (
        img[: rows * size, : cols * size]
        .reshape(rows, size, cols, size)
        .swapaxes(1, 2)
        .reshape(rows * cols, size, size)
    )


def _subband_features(mscn_patches: np.ndarray) -> np.ndarray:
    """18 features per patch: MSCN shape/scale + 4 x (shape, mean, left, right)."""
    p = len(mscn_patches)
    flat = mscn_patches.reshape(p, -1)
    a, bl, br = _aggd_batch(flat)
    feats = [a, (bl + br) / 2.0]
    for shift in PAIR_SHIFTS:
        prod = (mscn_patches * np.roll(mscn_patches, shift, axis=(1, 2))).reshape(p, -1)
        a, bl, br = _aggd_batch(prod)
        with np.errstate(invalid="ignore"):
            eta = (br - bl) * (gamma(2.0 / a) / gamma(1.0 / a))
        feats += [a, eta, bl, br]
    return np.stack(feats, axis=1)


def _half_size(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    out = Image.fromarray(img.astype(np.float32), mode="F").resize((w // 2, h // 2), Image.BICUBIC)
    return np.asarray(out, dtype=np.float64)


def patch_features(gray: np.ndarray, patch_size: int = 96) -> tuple[np.ndarray, np.ndarray]:
    """(P, 36) two-scale patch features and per-patch sharpness (mean local sigma)."""
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {w}x{h} is smaller than patch size {patch_size}")
    gray = gray[: h - h % patch_size, : w - w % patch_size]
    mu, sigma = _local_moments(gray)
    mscn = (gray - mu) / (sigma + 1.0)
    feats1 = _subband_features(_patches(mscn, patch_size))
    sharp = _patches(sigma, patch_size).mean(axis=(1, 2))
    feats2 = _subband_features(_patches(compute_mscn(_half_size(gray)), patch_size // 2))
    return np.hstack([feats1, feats2]), sharp


def _gray255(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    scale = 1.0 if frame.dtype == np.uint8 else 255.0
    if frame.ndim == 3:
        return rgb_to_luma(frame) * scale
    return frame.astype(np.float64) * scale


def _select_sharp(feats: np.ndarray, sharp: np.ndarray, threshold: float) -> np.ndarray:
    keep = sharp > threshold * sharp.max()
    if not keep.any():
        logger.warning("no patch passes the sharpness threshold; using all patches")
        return feats
    return feats[keep]


def mvg_distance(mu1, cov1, mu2, cov2, eig_floor: float = 1e-10) -> float:
    """sqrt((mu1 - mu2)^T ((cov1 + cov2) / 2)^+ (mu1 - mu2)) with an eigenvalue floor."""
    d = np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    cov = (np.asarray(cov1) + np.asarray(cov2)) / 2.0
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2.0)
    inv = np.where(vals > eig_floor, 1.0 / np.where(vals > eig_floor, vals, 1.0), 0.0)
    proj = vecs.T @ d
    return float(np.sqrt(max(float(proj @ (inv * proj)), 0.0)))


def niqe_frame(frame: np.ndarray, model: PristineModel, sharp_only: bool = False) -> float:
    """Raw NIQE distance of one frame (RGB uint8 / float in [0, 1], or gray).

    By default all patches enter the test-side fit, as in the reference
    implementation; ``sharp_only`` applies the pristine-fitting sharpness
    selection to the test image too.
    """
    feats, sharp = patch_features(_gray255(frame), model.patch_size)
    if sharp_only:
        feats = _select_sharp(feats, sharp, model.sharpness_threshold)
    feats = feats[np.all(np.isfinite(feats), axis=1)]
    if len(feats) == 0:
        raise DegenerateFrameError("no patch produced finite NIQE features")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False) if len(feats) > 1 else np.zeros((FEATURE_DIM, FEATURE_DIM))
    return mvg_distance(model.mean, model.covariance, mu, cov)


def niqe_raw_scores(
    frames: np.ndarray, model: PristineModel, frame_indices: Sequence[int] | None = None
) -> NiqeRawScores:
    """Score every frame of the spatial view; degenerate frames are skipped."""
    idx = list(frame_indices) if frame_indices is not None else list(range(len(frames)))
    scores, kept = [], []
    for i, frame in zip(idx, frames):
        try:
            scores.append(niqe_frame(frame, model))
            kept.append(i)
        except DegenerateFrameError:
            logger.warning("frame %d has no usable NIQE patches; skipped", i)
    if not scores:
        raise DegenerateFrameError("no frame of the spatial view could be scored")
    return NiqeRawScores(np.asarray(scores), kept)


def spatial_naturalness(raw: NiqeRawScores | np.ndarray, stats: NormStats) -> float:
    """Mean over the sampled frames of the negative-sigmoid normalised NIQE."""
    scores = raw.scores if isinstance(raw, NiqeRawScores) else np.asarray(raw, dtype=np.float64)
    return float(np.mean(rescale(scores, stats)))


def build_pristine(
    images: Iterable[np.ndarray], patch_size: int = 96, sharpness_threshold: float = 0.75
) -> PristineModel:
    """Fit the pristine MVG from the sharpest patches of natural images."""
    rows = []
    for img in images:
        feats, sharp = patch_features(_gray255(img), patch_size)
        if sharp.max() <= 0:
            continue
        feats = feats[sharp > sharpness_threshold * sharp.max()]
        rows.append(feats[np.all(np.isfinite(feats), axis=1)])
    feats = np.vstack(rows) if rows else np.empty((0, FEATURE_DIM))
    if len(feats) < 2:
        raise ValueError("not enough sharp patches to fit a pristine model")
    return PristineModel(feats.mean(axis=0), np.cov(feats, rowvar=False), patch_size, sharpness_threshold)
