"""Manifests, correlation metrics and the evaluation harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .fusion import NormStats
from .pipeline import RawIndices, Scorer, aggregated_scores, set_stats, variant_score

logger = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.05


class CorrelationError(ValueError):
    pass


class TooManyFailuresError(RuntimeError):
    pass


@dataclass
class ManifestEntry:
    video_path: str
    mos: float | None = None
    width: int | None = None
    height: int | None = None
    fps: float | None = None


@dataclass
class DatasetManifest:
    name: str
    entries: list[ManifestEntry]

    def __post_init__(self):
        paths = [e.video_path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError(f"{self.name}: duplicate video paths in manifest")
        for e in self.entries:
            if e.mos is not None and not math.isfinite(e.mos):
                raise ValueError(f"{self.name}: non-finite MOS for {e.video_path}")

    def __len__(self):
        return len(self.entries)

    @property
    def paths(self) -> list[str]:
        return [e.video_path for e in self.entries]

    @property
    def mos(self) -> np.ndarray:
        if any(e.mos is None for e in self.entries):
            raise ValueError(f"{self.name}: manifest has no MOS labels")
        return np.array([e.mos for e in self.entries], dtype=np.float64)

    @property
    def labelled(self) -> bool:
        return all(e.mos is not None for e in self.entries)

    def subset(self, indices: Sequence[int], suffix: str) -> "DatasetManifest":
        return DatasetManifest(f"{self.name}-{suffix}", [self.entries[i] for i in indices])

    @classmethod
    def load(cls, path: str | Path, name: str | None = None) -> "DatasetManifest":
        """CSV with header ``video_path[,mos][,width,height,fps]``.

        Relative video paths resolve against the manifest's directory.
        """
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or "video_path" not in reader.fieldnames:
                raise ValueError(f"{path}: manifest needs a video_path column")
            entries = []
            for row in reader:
                vp = Path(row["video_path"])
                if not vp.is_absolute():
                    vp = path.parent / vp

                def opt(key, cast):
                    v = (row.get(key) or "").strip()
                    return cast(v) if v else None

                entries.append(ManifestEntry(str(vp), opt("mos", float), opt("width", int), opt("height", int), opt("fps", float)))
        if not entries:
            raise ValueError(f"{path}: manifest is empty")
        return cls(name or path.stem, entries)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        cols = ["video_path", "mos", "width", "height", "fps"]
        used = [c for c in cols if c == "video_path" or any(getattr(e, c) is not None for e in self.entries)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(used)
            for e in self.entries:
                w.writerow(["" if getattr(e, c) is None else getattr(e, c) for c in used])
        return path


def _check(pred, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise CorrelationError("predictions and labels differ in length")
    if len(p) < 3:
        raise CorrelationError("correlation needs at least 3 items")
    if np.ptp(p) == 0 or np.ptp(y) == 0:
        raise CorrelationError("correlation is undefined for constant input")
    return p, y


def srcc(pred, labels) -> float:
    p, y = _check(pred, labels)
    return float(stats.spearmanr(p, y).statistic)


def krcc(pred, labels) -> float:
    p, y = _check(pred, labels)
    return float(stats.kendalltau(p, y, variant="b").statistic)


def logistic4(x, b1, b2, b3, b4):
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / np.abs(b4))) + b2


def fit_logistic(pred, labels) -> np.ndarray:
    p, y = _check(pred, labels)
    p0 = [y.max(), y.min(), float(np.mean(p)), float(np.std(p)) or 1.0]
    if stats.pearsonr(p, y).statistic < 0:
        p0[0], p0[1] = p0[1], p0[0]
    with warnings.catch_warnings():
        # an unestimable covariance is irrelevant; only the fitted curve is used
        warnings.simplefilter("ignore", optimize.OptimizeWarning)
        params, _ = optimize.curve_fit(logistic4, p, y, p0=p0, maxfev=20000)
    return params


def plcc(pred, labels, fit: bool = False) -> float:
    """Pearson correlation, optionally after the 4-parameter logistic mapping."""
    p, y = _check(pred, labels)
    if fit and len(p) <= 4:
        logger.warning("logistic fit needs at least 5 items; reporting raw PLCC")
    elif fit:
        try:
            mapped = logistic4(p, *fit_logistic(p, y))
            if np.ptp(mapped) > 0:
                p = mapped
        except RuntimeError:
            logger.warning("logistic fit failed; reporting raw PLCC")
    return float(stats.pearsonr(p, y).statistic)


def all_metrics(pred, labels) -> dict[str, float]:
    return {
        "srcc": srcc(pred, labels),
        "krcc": krcc(pred, labels),
        "plcc": plcc(pred, labels),
        "plcc_fitted": plcc(pred, labels, fit=True),
    }


def split_dataset(manifest: DatasetManifest, seed: int, ratio: float = 0.8) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded permutation; the first round(ratio * n) entries train."""
    n = len(manifest)
    if n < 5:
        raise ValueError("need at least 5 entries to split")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(ratio * n))
    return manifest.subset(sorted(perm[:k]), f"train{seed}"), manifest.subset(sorted(perm[k:]), f"test{seed}")


@dataclass
class EvalReport:
    dataset: str
    variant: str
    metrics: dict[str, float]
    scores: list[dict]
    fingerprint: str
    stats_source: dict[str, str]
    skipped: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def markdown(self) -> str:
        head = "| dataset | variant | videos | " + " | ".join(self.metrics) + " |"
        sep = "|" + "---|" * (3 + len(self.metrics))
        row = f"| {self.dataset} | {self.variant} | {len(self.scores)} | " + " | ".join(
            f"{v:.4f}" for v in self.metrics.values()
        ) + " |"
        return "\n".join([head, sep, row]) + "\n"

    def save(self, directory: str | Path, plot: bool = True) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = f"{self.dataset}_{self.variant}"
        out = {"json": directory / f"{stem}.json", "markdown": directory / f"{stem}.md"}
        out["json"].write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        out["markdown"].write_text(self.markdown())
        if plot and all(s.get("mos") is not None for s in self.scores):
            out["plot"] = scatter_plot(self, directory / f"{stem}.png")
        return out


def scatter_plot(report: EvalReport, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter([s["prediction"] for s in report.scores], [s["mos"] for s in report.scores], s=8)
    ax.set_xlabel(f"{report.variant} prediction")
    ax.set_ylabel("MOS")
    srcc_v = report.metrics.get("srcc")
    ax.set_title(report.dataset + (f" (SRCC {srcc_v:.3f})" if srcc_v is not None else ""))
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def score_manifest(scorer: Scorer, manifest: DatasetManifest, jobs: int = 1) -> tuple[list[RawIndices], list[int], list[str]]:
    """Raw indices for every decodable entry; aborts above 5% failures."""
    failed: list[str] = []

    def on_error(path, exc):
        logger.warning("skipping %s: %s", path, exc)
        failed.append(str(path))

    raws = scorer.raw_many(manifest.paths, jobs=jobs, on_error=on_error)
    if len(failed) > MAX_FAILURE_RATE * len(manifest):
        raise TooManyFailuresError(
            f"{len(failed)}/{len(manifest)} videos could not be scored:\n  " + "\n  ".join(failed)
        )
    kept = [i for i, r in enumerate(raws) if r is not None]
    return [raws[i] for i in kept], kept, failed


def evaluate(
    scorer: Scorer,
    manifest: DatasetManifest,
    stats: dict[str, NormStats] | None = None,
    variant: str = "bvqi-local",
    aggregate: str | None = None,
    jobs: int = 1,
) -> EvalReport:
    """Score a labelled manifest and correlate with MOS.

    Without ``stats`` the normalisation statistics come from this set.
    ``aggregate`` switches to one of the aggregation-ablation strategies.
    """
    t0 = time.perf_counter()
    raws, kept, failed = score_manifest(scorer, manifest, jobs)
    if stats is None:
        stats = set_stats(raws)
    if aggregate:
        preds = aggregated_scores(raws, aggregate, stats)
        variant = f"{variant}-{aggregate}"
    else:
        preds = [variant_score(r, stats, variant) for r in raws]
    mos = [manifest.entries[i].mos for i in kept]
    metrics = all_metrics(preds, mos)
    rows = [
        {"video_id": r.video_id, "video_path": r.path, "prediction": p, "mos": m}
        for r, p, m in zip(raws, preds, mos)
    ]
    return EvalReport(
        manifest.name,
        variant,
        metrics,
        rows,
        scorer.fingerprint,
        {k: v.source for k, v in stats.items()},
        failed,
        time.perf_counter() - t0,
    )


def cross_evaluate(
    state,
    train_name: str,
    others: Sequence[tuple[DatasetManifest, dict[str, NormStats]]],
    scorer: Scorer,
    jobs: int = 1,
) -> list[EvalReport]:
    """Evaluate a fine-tuned model on foreign datasets with their own stats."""
    from .finetune import predict_manifest

    reports = []
    for manifest, stats in others:
        if not stats:
            raise ValueError(f"{manifest.name}: normalisation stats are required")
        t0 = time.perf_counter()
        preds, raws, failed = predict_manifest(state, scorer, manifest, stats, jobs)
        kept = {r.path for r in raws}
        mos = [e.mos for e in manifest.entries if e.video_path in kept]
        rows = [
            {"video_id": r.video_id, "video_path": r.path, "prediction": p, "mos": m}
            for r, p, m in zip(raws, preds, mos)
        ]
        reports.append(
            EvalReport(
                manifest.name,
                f"{state.variant}-from-{train_name}",
                all_metrics(preds, mos),
                rows,
                scorer.fingerprint,
                {k: v.source for k, v in stats.items()},
                failed,
                time.perf_counter() - t0,
            )
        )
    return reports
