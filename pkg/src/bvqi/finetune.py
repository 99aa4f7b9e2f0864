"""Parameter-efficient fine-tuning on cached frozen-encoder features.

Trainable pieces, depending on the variant:

* cp: one learnable context embedding per prompt (4 for two pairs), spliced
  into ``a [context] <description> photo``, plus the fusion weights.
* cp-ip: cp plus an implicit perceptron scored directly from local features.
* w-only: the fusion weights alone.
* direct-text-feature: the four text features themselves plus fusion weights.

The fused score is ``W . [q_pair_1, ..., q_pair_P, (q_implicit), q_s, q_t]``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import saqi as sq
from .bench import DatasetManifest, all_metrics, score_manifest, split_dataset, srcc
from .fusion import NormStats
from .pipeline import RawIndices, Scorer, make_bundle, set_stats
from .vlm import ClipAdapter

logger = logging.getLogger(__name__)

FT_VARIANTS = ("cp", "cp-ip", "w-only", "direct-text-feature")
_ALIASES = {"cp+ip": "cp-ip", "w": "w-only", "direct": "direct-text-feature"}
SPLIT_SEEDS = tuple(42 * i for i in range(1, 11))
IMPLICIT_HIDDEN = 64


class CacheMissError(KeyError):
    pass


def normalize_variant(variant: str) -> str:
    v = _ALIASES.get(variant.lower(), variant.lower())
    if v not in FT_VARIANTS:
        raise ValueError(f"unknown fine-tuning variant {variant!r}; choose from {FT_VARIANTS}")
    return v


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    lr: float = 1e-3
    split_ratio: float = 0.8
    seed: int = 42
    context_length: int = 1
    rank_weight: float = 1.0
    rank_margin: float = 0.0

    def __post_init__(self):
        if not 1 <= self.context_length <= 8:
            raise ValueError("context length must be between 1 and 8")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 (batch statistics)")


class ImplicitPrompt(nn.Module):
    """1024 -> 64 with bias, GELU, mean over hidden units, non-affine BN, sigmoid.

    Applied to every local feature pixel; the video value is the mean over
    pixels and frames before normalisation.
    """

    def __init__(self, dim: int, hidden: int = IMPLICIT_HIDDEN):
        super().__init__()
        self.hidden = nn.Linear(dim, hidden)
        self.norm = nn.BatchNorm1d(1, affine=False)

    def forward(self, local: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.hidden(local)).mean(dim=-1)
        pooled = h.flatten(1).mean(dim=1, keepdim=True)
        return torch.sigmoid(self.norm(pooled))[:, 0]


class PromptTuner(nn.Module):
    """Trainable state on top of a frozen adapter."""

    def __init__(
        self,
        adapter: ClipAdapter,
        variant: str = "cp",
        pairs: Sequence[sq.PromptPair] = sq.DEFAULT_PAIRS,
        context_length: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        self.adapter = adapter
        self.variant = normalize_variant(variant)
        self.pairs = list(pairs)
        self.context_length = context_length
        self.descriptions = [d for p in self.pairs for d in (p.positive, p.negative)]
        dim = adapter.config.embed_dim
        init_ctx = adapter.placeholder_embedding(context_length)
        contexts = init_ctx[None].repeat(len(self.descriptions), 1, 1)
        if self.variant in ("cp", "cp-ip"):
            self.context = nn.Parameter(contexts)
        else:
            with torch.no_grad():
                feats = torch.stack([adapter.encode_text_with_context(c, d) for c, d in zip(contexts, self.descriptions)])
            if self.variant == "direct-text-feature":
                self.text = nn.Parameter(feats)
            else:
                self.register_buffer("text", feats)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.implicit = ImplicitPrompt(dim) if self.variant == "cp-ip" else None
        n_comp = len(self.pairs) + (1 if self.implicit is not None else 0) + 2
        self.fusion = nn.Parameter(torch.ones(n_comp))

    def text_features(self) -> torch.Tensor:
        if self.variant in ("cp", "cp-ip"):
            return torch.stack(
                [self.adapter.encode_text_with_context(c, d) for c, d in zip(self.context, self.descriptions)]
            )
        return self.text

    def components(self, local: torch.Tensor, q_s: torch.Tensor, q_t: torch.Tensor) -> torch.Tensor:
        """(B, K) component matrix for local features (B, N, H, W, D)."""
        t = F.normalize(self.text_features(), dim=-1)
        v = F.normalize(local, dim=-1)
        cos = v @ t.T
        da = cos[..., 0::2] - cos[..., 1::2]
        q_pairs = torch.sigmoid(da).flatten(1, -2).mean(dim=1)
        comps = [q_pairs]
        if self.implicit is not None:
            comps.append(self.implicit(local)[:, None])
        comps += [q_s[:, None], q_t[:, None]]
        return torch.cat(comps, dim=1)

    def forward(self, local, q_s, q_t) -> torch.Tensor:
        return fused_score(self.components(local, q_s, q_t), self.fusion)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def checkpoint(self) -> dict:
        state = {k: v for k, v in self.state_dict().items() if not k.startswith("adapter.")}
        return {
            "variant": self.variant,
            "context_length": self.context_length,
            "pairs": [[p.positive, p.negative] for p in self.pairs],
            "state_dict": state,
            "backbone": self.adapter.weights_checksum,
        }

    def save(self, path: str | Path, **extra) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({**self.checkpoint(), **extra}, str(path))
        return path

    @classmethod
    def load(cls, path: str | Path, adapter: ClipAdapter) -> "PromptTuner":
        blob = torch.load(str(path), map_location="cpu", weights_only=True)
        if blob.get("backbone") != adapter.weights_checksum:
            logger.warning("checkpoint was trained against different backbone weights")
        pairs = [sq.PromptPair(a, b) for a, b in blob["pairs"]]
        tuner = cls(adapter, blob["variant"], pairs, blob["context_length"])
        tuner.load_state_dict(blob["state_dict"], strict=False)
        return tuner.eval()


def fused_score(components, weights):
    """Dot product of components (..., K) with fusion weights (K,)."""
    if components.shape[-1] != weights.shape[-1]:
        raise ValueError(f"{components.shape[-1]} components but {weights.shape[-1]} fusion weights")
    return components @ weights


def count_trainable_params(state: PromptTuner, variant: str | None = None) -> int:
    if variant is not None and normalize_variant(variant) != state.variant:
        raise ValueError(f"state is a {state.variant} model, not {variant}")
    return sum(p.numel() for p in state.trainable_parameters())


def plcc_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = pred - pred.mean()
    t = target - target.mean()
    return 1.0 - (p * t).sum() / (p.norm() * t.norm() + 1e-8)


def rank_loss(pred: torch.Tensor, target: torch.Tensor, margin: float = 0.0) -> torch.Tensor:
    """Pairwise hinge on batch-standardised predictions."""
    z = (pred - pred.mean()) / (pred.std(unbiased=False) + 1e-8)
    sign = torch.sign(target[:, None] - target[None, :])
    hinge = F.relu(margin - sign * (z[:, None] - z[None, :]))
    mask = sign != 0
    return hinge[mask].mean() if mask.any() else pred.sum() * 0.0


@dataclass
class TrainingData:
    """Per-video inputs: local features (lazy sequence), q_s, q_t, MOS."""

    local: Sequence[np.ndarray]
    q_s: np.ndarray
    q_t: np.ndarray
    mos: np.ndarray

    def __len__(self):
        return len(self.q_s)

    def batch(self, idx):
        try:
            local = np.stack([self.local[i] for i in idx]).astype(np.float32)
        except (KeyError, FileNotFoundError) as exc:
            raise CacheMissError(f"missing cached features: {exc}") from exc
        return (
            torch.from_numpy(local),
            torch.as_tensor(self.q_s[idx], dtype=torch.float32),
            torch.as_tensor(self.q_t[idx], dtype=torch.float32),
            torch.as_tensor(self.mos[idx], dtype=torch.float32),
        )


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    trainable: int = 0


def train(tuner: PromptTuner, data: TrainingData, config: TrainConfig) -> TrainResult:
    """Optimise the variant's parameters; the backbone stays frozen."""
    if len(data) < 2:
        raise ValueError("training needs at least two videos")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    params = tuner.trainable_parameters()
    opt = torch.optim.Adam(params, lr=config.lr)
    steps = config.epochs * len(_batches(np.arange(len(data)), config.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    result = TrainResult(trainable=sum(p.numel() for p in params))
    tuner.train()
    for epoch in range(config.epochs):
        total = 0.0
        for idx in _batches(rng.permutation(len(data)), config.batch_size):
            local, q_s, q_t, mos = data.batch(idx)
            pred = tuner(local, q_s, q_t)
            loss = plcc_loss(pred, mos) + config.rank_weight * rank_loss(pred, mos, config.rank_margin)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        result.losses.append(total / len(data))
        logger.debug("epoch %d loss %.4f", epoch, result.losses[-1])
    tuner.eval()
    return result


@torch.no_grad()
def predict(tuner: PromptTuner, data: TrainingData, batch_size: int = 16) -> np.ndarray:
    tuner.eval()
    out = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        local, q_s, q_t, _ = data.batch(idx)
        out.append(tuner(local, q_s, q_t).numpy())
    return np.concatenate(out) if out else np.empty(0)


class LazyLocal(Sequence):
    """Local features fetched through the scorer's content-addressed cache."""

    def __init__(self, scorer: Scorer, paths: Sequence[str]):
        self.scorer = scorer
        self.paths = list(paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        return self.scorer.local_features(self.paths[i])


def build_data(scorer: Scorer, raws: Sequence[RawIndices], stats: dict[str, NormStats], mos=None) -> TrainingData:
    bundles = [make_bundle(r, stats) for r in raws]
    mos = np.zeros(len(raws)) if mos is None else np.asarray(mos, dtype=np.float64)
    return TrainingData(
        LazyLocal(scorer, [r.path for r in raws]),
        np.array([b.q_s for b in bundles]),
        np.array([b.q_t for b in bundles]),
        mos,
    )


def predict_manifest(tuner: PromptTuner, scorer: Scorer, manifest: DatasetManifest, stats, jobs: int = 1):
    raws, _, failed = score_manifest(scorer, manifest, jobs)
    return [float(x) for x in predict(tuner, build_data(scorer, raws, stats))], raws, failed


@dataclass
class SplitReport:
    seed: int
    train_size: int
    test_size: int
    metrics: dict[str, float]
    train_srcc: float
    checkpoint: str | None
    trainable: int


def run_splits(
    scorer: Scorer,
    manifest: DatasetManifest,
    variant: str = "cp-ip",
    config: TrainConfig | None = None,
    seeds: Sequence[int] = SPLIT_SEEDS,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> dict:
    """The fine-tuning protocol: one 8:2 split per seed, mean/std of test metrics.

    q_s and q_t are normalised with statistics of the full dataset.
    """
    config = config or TrainConfig()
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    raws, kept, failed = score_manifest(scorer, manifest, jobs)
    stats = set_stats(raws)
    by_path = {r.path: r for r in raws}
    labelled = manifest.subset(kept, "ok")
    reports = []
    for seed in seeds:
        tr, te = split_dataset(labelled, seed, config.split_ratio)
        tr_data = build_data(scorer, [by_path[p] for p in tr.paths], stats, tr.mos)
        te_data = build_data(scorer, [by_path[p] for p in te.paths], stats, te.mos)
        tuner = PromptTuner(scorer.adapter, variant, scorer.config.prompt_pairs, config.context_length, seed)
        cfg = TrainConfig(**{**asdict(config), "seed": seed})
        res = train(tuner, tr_data, cfg)
        ckpt = None
        if out_dir is not None:
            ckpt = str(tuner.save(Path(out_dir) / f"{tuner.variant}_seed{seed}.pt",
                                  fingerprint=scorer.fingerprint, train_config=asdict(cfg)))
        reports.append(
            SplitReport(
                seed,
                len(tr),
                len(te),
                all_metrics(predict(tuner, te_data), te.mos),
                srcc(predict(tuner, tr_data), tr.mos),
                ckpt,
                res.trainable,
            )
        )
        logger.info("seed %d: test SRCC %.4f (%d trainable)", seed, reports[-1].metrics["srcc"], res.trainable)
    summary = {}
    for key in reports[0].metrics:
        vals = np.array([r.metrics[key] for r in reports])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return {
        "dataset": manifest.name,
        "variant": normalize_variant(variant),
        "trainable_parameters": reports[0].trainable,
        "splits": [asdict(r) for r in reports],
        "summary": summary,
        "skipped": failed,
        "fingerprint": scorer.fingerprint,
    }


def zero_shot_local(adapter: ClipAdapter, local: np.ndarray, pairs=sq.DEFAULT_PAIRS, context_length: int = 1) -> float:
    """Zero-shot localized index with literal placeholder prompts (``a X good photo``)."""
    words = " ".join(["X"] * context_length)
    text = [
        (adapter.encode_text(sq.build_prompt(f"{words} {p.positive}")).vector,
         adapter.encode_text(sq.build_prompt(f"{words} {p.negative}")).vector)
        for p in pairs
    ]
    return sq.saqi_local(local, text)[0]

