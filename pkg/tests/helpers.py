"""Synthetic media shared by the test suite."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
from skimage import data

from bvqi.media import write_video


def source_image() -> np.ndarray:
    return data.astronaut()


def degraded_clip(level: int, seed: int = 0, frames: int = 16, size=(384, 288), base=None) -> np.ndarray:
    """Slow pan over a natural image; noise, blur and jitter grow with ``level``."""
    rng = np.random.default_rng(seed)
    img = (source_image() if base is None else base).astype(np.float32)
    w, h = size
    img = cv2.resize(img, (w + 64, h + 64), interpolation=cv2.INTER_AREA)
    out = []
    for t in range(frames):
        jx, jy = (rng.integers(-level, level + 1, 2) if level else (0, 0))
        x = int(np.clip(2 * t + 16 + jx, 0, 64))
        y = int(np.clip(t + 16 + jy, 0, 64))
        f = img[y : y + h, x : x + w]
        if level:
            f = cv2.GaussianBlur(f, (0, 0), 0.35 * level)
            f = f + rng.normal(0, 3.0 * level, f.shape)
        out.append(np.clip(f, 0, 255).astype(np.uint8))
    return np.stack(out)


def write_clip(path: Path, frames: np.ndarray, fps: float = 8.0) -> Path:
    """Lossless fixture: a directory of numbered PNG frames, or a container."""
    path = Path(path)
    if path.suffix:
        return write_video(path, frames, fps)
    path.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        cv2.imwrite(str(path / f"{i:04d}.png"), cv2.cvtColor(f, cv2.COLOR_RGB2BGR))
    return path
