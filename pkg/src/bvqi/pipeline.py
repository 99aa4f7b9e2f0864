"""Per-video scoring: views -> encoder features -> raw indices -> bundles.

Raw (statistics-free) indices are computed once per video and cached under
the video's content hash plus the scorer fingerprint. Normalisation needs
the whole evaluation set, so bundles are assembled in a second pass.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import saqi as sq
from .fusion import IndexBundle, NormStats, align_components, aggregate_variant, bvqi, compute_norm_stats, rescale
from .media import ViewConfig, load_views
from .spatial import PristineModel, niqe_raw_scores
from .temporal import tpqi_raw
from .vlm import ClipAdapter, FeatureCache, file_digest

logger = logging.getLogger(__name__)

VARIANTS = ("bvqi", "bvqi-local", "saqi", "saqi-local", "niqe", "tpqi")
STATS_INDICES = ("niqe", "tpqi")


class MissingStatsError(FileNotFoundError):
    pass


@dataclass
class ScorerConfig:
    weights: str | None = None
    prompt_pairs: list[sq.PromptPair] = field(default_factory=lambda: list(sq.DEFAULT_PAIRS))
    view: ViewConfig = field(default_factory=ViewConfig)
    pristine: str | None = None
    device: str = "cpu"
    batch_size: int = 16
    cache_dir: str | None = None
    use_cache: bool = True
    seed: int = 0

    def describe(self) -> dict:
        d = asdict(self)
        d["prompt_pairs"] = [[p.positive, p.negative] for p in self.prompt_pairs]
        for k in ("device", "batch_size", "cache_dir", "use_cache"):
            d.pop(k)
        return d


@dataclass
class RawIndices:
    """Statistics-free outputs for one video."""

    video_id: str
    path: str
    content_hash: str
    mpda: float
    q_a: float
    q_a_local: float
    q_a_per_pair: dict[str, float]
    q_a_local_per_pair: dict[str, float]
    niqe_frames: list[float]
    niqe_indices: list[int]
    tpqi: float
    num_frames: int
    fps: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RawIndices":
        return cls(**d)


def video_id_of(path: str | Path) -> str:
    return Path(path).stem


def set_stats(raws: Sequence[RawIndices], source: str = "evaluation_set") -> dict[str, NormStats]:
    """NIQE stats pool every frame-level score of the set; TPQI uses one per video."""
    niqe = np.concatenate([r.niqe_frames for r in raws])
    return {
        "niqe": compute_norm_stats(niqe, "niqe", source),
        "tpqi": compute_norm_stats([r.tpqi for r in raws], "tpqi", source),
    }


def save_stats(stats: dict[str, NormStats], directory: str | Path, **extra) -> list[Path]:
    directory = Path(directory)
    return [stats[k].save(directory / f"{k}.json", **extra) for k in STATS_INDICES]


def load_stats(directory: str | Path) -> dict[str, NormStats]:
    directory = Path(directory)
    missing = [k for k in STATS_INDICES if not (directory / f"{k}.json").exists()]
    if missing:
        raise MissingStatsError(
            f"no normalisation stats for {', '.join(missing)} in {directory}; "
            "run `bvqi stats <manifest> --out <dir>` first"
        )
    return {k: NormStats.load(directory / f"{k}.json") for k in STATS_INDICES}


def make_bundle(raw: RawIndices, stats: dict[str, NormStats], variant: str = "bvqi-local") -> IndexBundle:
    q_s = float(np.mean(rescale(np.asarray(raw.niqe_frames), stats["niqe"])))
    q_t = float(rescale(raw.tpqi, stats["tpqi"]))
    local = variant != "bvqi"
    q_a = raw.q_a_local if local else raw.q_a
    per_pair = raw.q_a_local_per_pair if local else raw.q_a_per_pair
    return IndexBundle(raw.video_id, q_a, q_s, q_t, bvqi(q_a, q_s, q_t), dict(per_pair), None, variant)


def variant_score(raw: RawIndices, stats: dict[str, NormStats], variant: str) -> float:
    """Scalar prediction of one index variant (higher means better quality)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if variant == "saqi":
        return raw.q_a
    if variant == "saqi-local":
        return raw.q_a_local
    b = make_bundle(raw, stats, variant if variant.startswith("bvqi") else "bvqi-local")
    return {"niqe": b.q_s, "tpqi": b.q_t}.get(variant, b.q_unified)


def aggregated_scores(raws: Sequence[RawIndices], mode: str, stats: dict[str, NormStats]) -> list[float]:
    """Scores under one of the four aggregation strategies (global semantic branch)."""
    sem = dict(stats)
    sem["semantic"] = compute_norm_stats([r.mpda for r in raws], "semantic")
    return [aggregate_variant(*align_components(r.mpda, r.niqe_frames, r.tpqi, mode, sem), mode) for r in raws]


class Scorer:
    """Computes raw indices for videos with a shared frozen encoder."""

    def __init__(
        self,
        config: ScorerConfig | None = None,
        adapter: ClipAdapter | None = None,
        pristine: PristineModel | None = None,
    ):
        self.config = config or ScorerConfig()
        if adapter is None:
            if self.config.weights is None:
                raise ValueError("a weight file is required (see `bvqi init-weights` for a test checkpoint)")
            adapter = ClipAdapter.from_file(self.config.weights, device=self.config.device,
                                            batch_size=self.config.batch_size)
        self.adapter = adapter
        if pristine is None:
            pristine = PristineModel.load(self.config.pristine) if self.config.pristine else PristineModel.default()
        self.pristine = pristine
        self.cache = FeatureCache(self.config.cache_dir) if self.config.use_cache else None
        self.text_pairs = [
            (self.adapter.encode_text(p.rendered_positive).vector, self.adapter.encode_text(p.rendered_negative).vector)
            for p in self.config.prompt_pairs
        ]

    @property
    def fingerprint(self) -> str:
        payload = self.config.describe()
        payload["weights"] = self.adapter.weights_checksum
        payload["pristine"] = hashlib.sha256(
            np.concatenate([self.pristine.mean, self.pristine.covariance.ravel()]).tobytes()
        ).hexdigest()
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def _feature_key(self, content_hash: str) -> str:
        h = hashlib.sha256(f"{content_hash}:{self.adapter.weights_checksum}:{self.config.view}".encode())
        return h.hexdigest()

    def semantic_features(self, views, content_hash: str | None = None):
        """(global (N, D), local (N, H, W, D)) for the semantic view, cached by content."""
        n = len(views.semantic_view)
        key = self._feature_key(content_hash) if content_hash and self.cache else None
        if key:
            recs = self.cache.get_all(key, "semantic", n)
            if recs is not None:
                return np.stack([r["global"] for r in recs]), np.stack([r["local"] for r in recs])
        feats = self.adapter.encode_frames(views.semantic_view, keep_raw=False)
        if key:
            for i in range(n):
                self.cache.put(key, "semantic", i, {"global": feats.global_[i], "local": feats.local[i]})
        return feats.global_, feats.local

    def local_features(self, path: str | Path) -> np.ndarray:
        content = file_digest(path)
        key = self._feature_key(content) if self.cache else None
        if key:
            recs = self.cache.get_all(key, "semantic", self.config.view.num_frames)
            if recs is not None:
                return np.stack([r["local"] for r in recs])
        views = load_views(path, self.config.view)
        return self.semantic_features(views, content)[1]

    def semantic_from_features(self, glob: np.ndarray, local: np.ndarray) -> sq.SemanticResult:
        names = [p.name for p in self.config.prompt_pairs]
        per_pair = {n: float(expit(sq.differential_affinity(glob, p, q))) for n, (p, q) in zip(names, self.text_pairs)}
        local_pp = dict(zip(names, sq.saqi_local_per_pair(local, self.text_pairs)))
        m = sq.mpda(glob, self.text_pairs)
        return sq.SemanticResult(m, float(expit(m)), sq.saqi_local(local, self.text_pairs)[0], per_pair, local_pp)

    def raw(self, path: str | Path) -> RawIndices:
        path = Path(path)
        content = file_digest(path)
        name = "indices-" + self.fingerprint[:24]
        if self.cache:
            hit = self.cache.get_json(content, name)
            if hit is not None:
                hit.update(video_id=video_id_of(path), path=str(path))
                return RawIndices.from_dict(hit)
        views = load_views(path, self.config.view)
        glob, local = self.semantic_features(views, content)
        sem = self.semantic_from_features(glob, local)
        niqe = niqe_raw_scores(views.spatial_view, self.pristine, views.spatial_indices)
        result = RawIndices(
            video_id_of(path),
            str(path),
            content,
            sem.mpda,
            sem.q_a,
            sem.q_a_local,
            sem.q_a_per_pair,
            sem.q_a_local_per_pair,
            [float(x) for x in niqe.scores],
            niqe.frame_indices,
            tpqi_raw(views.temporal_view),
            len(views.temporal_view),
            views.fps,
        )
        if self.cache:
            self.cache.put_json(content, name, result.to_dict())
        return result

    def raw_many(
        self,
        paths: Sequence[str | Path],
        jobs: int = 1,
        on_error: Callable[[Path, Exception], None] | None = None,
    ) -> list[RawIndices | None]:
        """Score many videos; results keep input order. Failures become None
        when ``on_error`` is given, otherwise they propagate."""

        def one(p):
            try:
                return self.raw(p)
            except Exception as exc:  # noqa: BLE001 - routed to the caller's handler
                if on_error is None:
                    raise
                on_error(Path(p), exc)
                return None

        if jobs <= 1:
            return [one(p) for p in paths]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, paths))

    def quality_maps(self, path: str | Path) -> tuple[list[sq.QualityMap], np.ndarray, list[int]]:
        """Local quality maps for every semantic-view frame, with those frames."""
        views = load_views(path, self.config.view)
        _, local = self.semantic_features(views, file_digest(path))
        _, maps = sq.saqi_local(local, self.text_pairs)
        for m, idx in zip(maps, views.semantic_indices):
            m.frame_index = idx
        return maps, views.semantic_view, views.semantic_indices
