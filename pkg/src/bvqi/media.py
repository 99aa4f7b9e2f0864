"""Video decoding and construction of the three index-specific views.

The semantic view feeds the vision-language encoder (N uniformly sampled
frames, bicubic-resized to 224x224), the spatial view feeds NIQE (first
frame of every second, original resolution) and the temporal view feeds
the perceptual-trajectory index (every frame, short side 270).
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import cv2
import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
MIN_SIDE = 32


class DecodeError(RuntimeError):
    """The file could not be opened or decoded as video."""


class EmptyVideoError(DecodeError):
    """The container decoded to zero frames."""


class FrameTooSmallError(ValueError):
    pass


@dataclass
class FrameSequence:
    """Decoded RGB frames in display order.

    ``frames`` is a (M, H, W, 3) array, uint8 or float in [0, 1].
    """

    frames: np.ndarray
    fps: float
    duration_s: float = field(default=-1.0)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"expected (M, H, W, 3) frames, got {self.frames.shape}")
        if len(self.frames) < 1:
            raise EmptyVideoError("frame sequence is empty")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.duration_s < 0:
            self.duration_s = len(self.frames) / self.fps

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class ViewConfig:
    num_frames: int = 32
    semantic_size: int = 224
    temporal_short_side: int = 270
    # fallback for image directories and containers without usable fps metadata
    default_fps: float = 25.0


@dataclass
class VideoViews:
    semantic_view: np.ndarray  # (N, 224, 224, 3) float32 in [0, 1]
    semantic_indices: list[int]
    spatial_view: np.ndarray  # (S, H, W, 3) uint8
    spatial_indices: list[int]
    temporal_view: np.ndarray  # (M, h, w, 3) uint8
    fps: float


def sample_uniform_frames(num_total: int, num_samples: int) -> list[int]:
    """Start-anchored uniform sampling, ``idx_i = floor(i * M / N)``.

    When ``num_total < num_samples`` indices repeat (nearest-index rule).
    """
    if num_total < 1 or num_samples < 1:
        raise ValueError("frame counts must be >= 1")
    return [(i * num_total) // num_samples for i in range(num_samples)]


def second_bucket_indices(num_total: int, fps: float) -> list[int]:
    """First frame of each one-second bucket that contains at least one frame."""
    if num_total < 1:
        raise ValueError("num_total must be >= 1")
    seen, idx = set(), []
    for i in range(num_total):
        k = _second_of(i, fps)
        if k not in seen:
            seen.add(k)
            idx.append(i)
    return idx


def _second_of(index: int, fps: float) -> int:
    return int(math.floor(index / fps + 1e-9))


def temporal_size(height: int, width: int, short_side: int) -> tuple[int, int]:
    """Target (height, width) with the short side fixed and aspect preserved."""
    if min(height, width) == short_side:
        return height, width
    if height <= width:
        return short_side, max(1, int(round(width * short_side / height)))
    return max(1, int(round(height * short_side / width))), short_side


def to_float(frame: np.ndarray) -> np.ndarray:
    if frame.dtype == np.uint8:
        return frame.astype(np.float32) / 255.0
    return frame.astype(np.float32)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    if frame.dtype == np.uint8:
        return frame
    return np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)


def resize_bicubic(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Antialiased bicubic resize of (B, H, W, 3) frames to float32 in [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(to_float(frames))).permute(0, 3, 1, 2)
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=size, mode="bicubic", align_corners=False, antialias=True)
    return x.clamp_(0.0, 1.0).permute(0, 2, 3, 1).contiguous().numpy()


def resize_temporal(frame: np.ndarray, short_side: int) -> np.ndarray:
    h, w = frame.shape[:2]
    th, tw = temporal_size(h, w, short_side)
    frame = to_uint8(frame)
    if (th, tw) == (h, w):
        return frame
    interp = cv2.INTER_AREA if th < h else cv2.INTER_CUBIC
    return cv2.resize(frame, (tw, th), interpolation=interp)


def rgb_to_luma(frame: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma, same scale as the input."""
    frame = np.asarray(frame, dtype=np.float64)
    return frame[..., 0] * 0.299 + frame[..., 1] * 0.587 + frame[..., 2] * 0.114


def _check_size(height: int, width: int):
    if height < MIN_SIDE or width < MIN_SIDE:
        raise FrameTooSmallError(
            f"frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {width}x{height}"
        )


def make_views(video: FrameSequence, config: ViewConfig = ViewConfig()) -> VideoViews:
    _check_size(video.height, video.width)
    sem_idx = sample_uniform_frames(video.num_frames, config.num_frames)
    uniq = sorted(set(sem_idx))
    resized = resize_bicubic(video.frames[uniq], (config.semantic_size, config.semantic_size))
    lookup = {i: k for k, i in enumerate(uniq)}
    semantic = resized[[lookup[i] for i in sem_idx]]

    spa_idx = second_bucket_indices(video.num_frames, video.fps)
    spatial = np.stack([to_uint8(video.frames[i]) for i in spa_idx])
    temporal = np.stack([resize_temporal(f, config.temporal_short_side) for f in video.frames])
    return VideoViews(semantic, sem_idx, spatial, spa_idx, temporal, video.fps)


def _numbered_images(directory: Path) -> list[Path]:
    files = [p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]

    def key(p: Path):
        nums = re.findall(r"\d+", p.stem)
        return (int(nums[-1]) if nums else -1, p.name)

    return sorted(files, key=key)


def _read_image(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DecodeError(f"cannot decode image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def iter_frames(path: str | Path, fps: float | None = None) -> tuple[Iterator[np.ndarray], float]:
    """Open ``path`` and return a lazy RGB frame iterator together with its fps.

    ``path`` may be a video container, a single image, or a directory of
    numbered images; for the last two ``fps`` comes from the argument.
    """
    path = Path(path)
    if not path.exists():
        raise DecodeError(f"no such file: {path}")
    if path.is_dir():
        files = _numbered_images(path)
        return (_read_image(p) for p in files), float(fps or ViewConfig.default_fps)
    if path.suffix.lower() in IMAGE_SUFFIXES:
        return iter([_read_image(path)]), float(fps or ViewConfig.default_fps)

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        cap.release()
        raise DecodeError(f"cannot open video {path}")
    meta_fps = cap.get(cv2.CAP_PROP_FPS)
    if fps is None:
        fps = meta_fps if meta_fps and meta_fps > 0 and math.isfinite(meta_fps) else None
    if fps is None:
        logger.warning("%s: no fps metadata, assuming %s", path, ViewConfig.default_fps)
        fps = ViewConfig.default_fps

    def gen():
        try:
            while True:
                ok, frame = cap.read()
                if not ok:
                    break
                yield cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
        finally:
            cap.release()

    return gen(), float(fps)


def decode_video(path: str | Path, fps: float | None = None) -> FrameSequence:
    frames, rate = iter_frames(path, fps)
    try:
        data = list(frames)
    except cv2.error as exc:
        raise DecodeError(f"decode failed for {path}: {exc}") from exc
    if not data:
        raise EmptyVideoError(f"{path} contains no decodable frames")
    shapes = {f.shape for f in data}
    if len(shapes) != 1:
        raise DecodeError(f"{path}: inconsistent frame sizes {sorted(shapes)}")
    return FrameSequence(np.stack(data), rate)


def load_views(path: str | Path, config: ViewConfig = ViewConfig(), fps: float | None = None) -> VideoViews:
    """Streaming equivalent of ``make_views(decode_video(path))``.

    Keeps only the downscaled frames and the per-second full-resolution
    frames in memory, which matters for long 1080p clips.
    """
    frames, rate = iter_frames(path, fps)
    small, temporal, full = [], [], {}
    shape = None
    count = 0
    for frame in frames:
        if shape is None:
            shape = frame.shape
            _check_size(shape[0], shape[1])
        elif frame.shape != shape:
            raise DecodeError(f"{path}: inconsistent frame sizes")
        small.append(resize_bicubic(frame[None], (config.semantic_size, config.semantic_size))[0])
        temporal.append(resize_temporal(frame, config.temporal_short_side))
        # the first frame seen in a bucket is its start; no total count needed
        k = _second_of(count, rate)
        if k not in full:
            full[k] = (count, frame)
        count += 1
    if count == 0:
        raise EmptyVideoError(f"{path} contains no decodable frames")
    sem_idx = sample_uniform_frames(count, config.num_frames)
    spa_idx = second_bucket_indices(count, rate)
    by_index = dict(full.values())
    spatial = np.stack([by_index[i] for i in spa_idx])
    return VideoViews(
        np.stack([small[i] for i in sem_idx]),
        sem_idx,
        spatial,
        spa_idx,
        np.stack(temporal),
        rate,
    )


def write_video(path: str | Path, frames: Iterable[np.ndarray], fps: float) -> Path:
    """Write RGB uint8 frames to an mp4v/MJPG container (test fixtures, demos)."""
    path = Path(path)
    frames = [to_uint8(f) for f in frames]
    h, w = frames[0].shape[:2]
    fourcc = cv2.VideoWriter_fourcc(*("MJPG" if path.suffix.lower() == ".avi" else "mp4v"))
    writer = cv2.VideoWriter(str(path), fourcc, float(fps), (w, h))
    if not writer.isOpened():
        raise DecodeError(f"cannot open writer for {path}")
    for f in frames:
        writer.write(cv2.cvtColor(f, cv2.COLOR_RGB2BGR))
    writer.release()
    return path
