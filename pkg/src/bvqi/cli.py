"""Command-line entry point.

Every tunable can live in a YAML config file (``--config``); command-line
flags override it. Exit codes: 0 ok, 1 internal error, 2 user/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__

logger = logging.getLogger("bvqi")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2

# config-file keys and their defaults; flags with the same dest override them
DEFAULTS = {
    "weights": None,
    "prompt_pairs": None,
    "num_frames": 32,
    "semantic_size": 224,
    "temporal_short_side": 270,
    "pristine": None,
    "stats": None,
    "out": "bvqi-out",
    "device": "cpu",
    "cache_dir": None,
    "no_cache": False,
    "seed": 0,
    "jobs": 1,
    "batch_size": 16,
    "variant": None,
    "aggregate": None,
    "epochs": 30,
    "lr": 1e-3,
    "context_length": 1,
    "splits": 10,
    "source": "evaluation_set",
}


class UserError(Exception):
    pass


def _user_errors():
    from .bench import CorrelationError, TooManyFailuresError
    from .fusion import DegenerateStatsError
    from .media import DecodeError, FrameTooSmallError
    from .saqi import DegenerateFeatureError
    from .vlm import TokenizationError

    return (
        UserError,
        FileNotFoundError,
        DecodeError,
        FrameTooSmallError,
        CorrelationError,
        TooManyFailuresError,
        DegenerateStatsError,
        DegenerateFeatureError,
        TokenizationError,
        yaml.YAMLError,
    )


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise UserError(f"{path}: config must be a mapping")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise UserError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg.update(data)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    return cfg


def config_fingerprint(cfg: dict) -> str:
    keep = {k: v for k, v in cfg.items() if k not in ("out", "jobs", "device", "cache_dir", "no_cache")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True, default=str).encode()).hexdigest()


def make_scorer(cfg: dict):
    from .media import ViewConfig
    from .pipeline import Scorer, ScorerConfig
    from .saqi import DEFAULT_PAIRS, load_prompt_pairs

    if not cfg["weights"]:
        raise UserError("no backbone weights given (--weights or `weights:` in the config file)")
    if not Path(cfg["weights"]).exists():
        raise UserError(f"weight file not found: {cfg['weights']}")
    pairs = list(DEFAULT_PAIRS)
    if cfg["prompt_pairs"]:
        pp = cfg["prompt_pairs"]
        if isinstance(pp, str):
            pairs = load_prompt_pairs(pp)
        else:
            from .saqi import PromptPair

            pairs = [PromptPair(str(p["positive"]), str(p["negative"])) if isinstance(p, dict) else PromptPair(*p) for p in pp]
    view = ViewConfig(cfg["num_frames"], cfg["semantic_size"], cfg["temporal_short_side"])
    import torch

    torch.manual_seed(cfg["seed"])
    return Scorer(
        ScorerConfig(
            weights=str(cfg["weights"]),
            prompt_pairs=pairs,
            view=view,
            pristine=cfg["pristine"],
            device=cfg["device"],
            batch_size=cfg["batch_size"],
            cache_dir=cfg["cache_dir"],
            use_cache=not cfg["no_cache"],
            seed=cfg["seed"],
        )
    )


def _load_stats(directory):
    from .pipeline import MissingStatsError, load_stats

    if not directory:
        raise UserError(
            "normalisation stats are required; compute them with `bvqi stats <manifest> --out <dir>` "
            "and pass --stats <dir>"
        )
    try:
        return load_stats(directory)
    except MissingStatsError as exc:
        raise UserError(str(exc)) from exc


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _render_maps(scorer, video: Path, out: Path, video_id: str) -> list[Path]:
    from .media import to_uint8
    from .saqi import heatmap_filename, render_quality_map, write_png

    maps, frames, _ = scorer.quality_maps(video)
    written, seen = [], set()
    for m, frame in zip(maps, frames):
        if m.frame_index in seen:
            continue
        seen.add(m.frame_index)
        path = out / heatmap_filename(video_id, m.frame_index, m.pair_id)
        written.append(write_png(path, render_quality_map(m, to_uint8(frame))))
    return written


# commands -----------------------------------------------------------------


def cmd_score(args, cfg) -> int:
    from .pipeline import make_bundle

    stats = _load_stats(cfg["stats"])
    scorer = make_scorer(cfg)
    out = Path(cfg["out"])
    variant = cfg["variant"] or "bvqi-local"
    if variant not in ("bvqi", "bvqi-local"):
        raise UserError("score supports --variant bvqi or bvqi-local")
    fp = config_fingerprint(cfg)
    raws = scorer.raw_many(args.videos, jobs=cfg["jobs"])
    for video, raw in zip(args.videos, raws):
        bundle = make_bundle(raw, stats, variant)
        payload = {**bundle.to_dict(), "config_fingerprint": fp, "scorer_fingerprint": scorer.fingerprint}
        payload.pop("q_implicit")
        if args.local:
            payload["quality_maps"] = [str(p) for p in _render_maps(scorer, Path(video), out / "qmaps", bundle.video_id)]
        _write_json(out / f"{bundle.video_id}.json", payload)
        print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_stats(args, cfg) -> int:
    from .bench import DatasetManifest, score_manifest
    from .pipeline import save_stats, set_stats

    manifest = DatasetManifest.load(args.manifest)
    scorer = make_scorer(cfg)
    raws, _, failed = score_manifest(scorer, manifest, cfg["jobs"])
    stats = set_stats(raws, cfg["source"])
    out = Path(cfg["out"])
    paths = save_stats(stats, out, config_fingerprint=config_fingerprint(cfg))
    _write_json(out / "provenance.json", {
        "manifest": str(args.manifest),
        "videos": len(raws),
        "skipped": failed,
        "config_fingerprint": config_fingerprint(cfg),
        "scorer_fingerprint": scorer.fingerprint,
    })
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    from .bench import DatasetManifest, evaluate

    manifest = DatasetManifest.load(args.manifest)
    if not manifest.labelled:
        raise UserError(f"{args.manifest}: benchmarking needs a mos column")
    stats = _load_stats(cfg["stats"]) if cfg["stats"] else None
    out = Path(cfg["out"])
    fp = config_fingerprint(cfg)
    variant = cfg["variant"] or "bvqi-local"
    runs = []
    if args.per_pair:
        from .saqi import load_prompt_pairs

        if not cfg["prompt_pairs"] or not isinstance(cfg["prompt_pairs"], str):
            raise UserError("--per-pair needs --prompt-pairs <file>")
        for pair in load_prompt_pairs(cfg["prompt_pairs"]):
            sub = dict(cfg, prompt_pairs=[[pair.positive, pair.negative]])
            runs.append((pair.name, make_scorer(sub)))
    else:
        runs.append((None, make_scorer(cfg)))
    for tag, scorer in runs:
        report = evaluate(scorer, manifest, stats, variant, cfg["aggregate"], cfg["jobs"])
        if tag:
            report.variant = f"{report.variant}-{tag}"
        payload = report.to_dict()
        payload["config_fingerprint"] = fp
        report.save(out)
        _write_json(out / f"{report.dataset}_{report.variant}.json", payload)
        print(report.markdown(), end="")
    return EXIT_OK


def cmd_finetune(args, cfg) -> int:
    from .bench import DatasetManifest
    from .finetune import SPLIT_SEEDS, TrainConfig, normalize_variant, run_splits

    manifest = DatasetManifest.load(args.manifest)
    if not manifest.labelled:
        raise UserError(f"{args.manifest}: fine-tuning needs a mos column")
    variant = normalize_variant(cfg["variant"] or "cp-ip")
    tc = TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr=cfg["lr"],
                     context_length=cfg["context_length"])
    n = int(cfg["splits"])
    seeds = SPLIT_SEEDS[:n] if n <= len(SPLIT_SEEDS) else tuple(42 * i for i in range(1, n + 1))
    scorer = make_scorer(cfg)
    out = Path(cfg["out"])
    result = run_splits(scorer, manifest, variant, tc, seeds, out, cfg["jobs"])
    logger.info("%s: %d trainable parameters", variant, result["trainable_parameters"])
    result["config_fingerprint"] = config_fingerprint(cfg)
    result["context_length"] = tc.context_length
    _write_json(out / f"{manifest.name}_{variant}_L{tc.context_length}.json", result)
    s = result["summary"]
    print(f"{variant} (L={tc.context_length}, {result['trainable_parameters']} trainable): "
          f"SRCC {s['srcc']['mean']:.4f} +/- {s['srcc']['std']:.4f}, PLCC {s['plcc']['mean']:.4f}")
    return EXIT_OK


def cmd_qmap(args, cfg) -> int:
    from .pipeline import video_id_of

    scorer = make_scorer(cfg)
    out = Path(cfg["out"])
    for video in args.videos:
        for p in _render_maps(scorer, Path(video), out, video_id_of(video)):
            print(p)
    return EXIT_OK


def cmd_cross_bench(args, cfg) -> int:
    from .bench import DatasetManifest, cross_evaluate
    from .finetune import PromptTuner

    scorer = make_scorer(cfg)
    if not Path(args.checkpoint).exists():
        raise UserError(f"checkpoint not found: {args.checkpoint}")
    state = PromptTuner.load(args.checkpoint, scorer.adapter)
    targets = []
    for target in args.targets:
        if "=" not in target:
            raise UserError(f"target {target!r} must look like MANIFEST=STATS_DIR")
        manifest, stats_dir = target.split("=", 1)
        targets.append((DatasetManifest.load(manifest), _load_stats(stats_dir)))
    out = Path(cfg["out"])
    fp = config_fingerprint(cfg)
    for report in cross_evaluate(state, args.train_name, targets, scorer, cfg["jobs"]):
        report.save(out)
        _write_json(out / f"{report.dataset}_{report.variant}.json", {**report.to_dict(), "config_fingerprint": fp})
        print(report.markdown(), end="")
    return EXIT_OK


def cmd_build_pristine(args, cfg) -> int:
    from .media import IMAGE_SUFFIXES, _read_image
    from .spatial import build_pristine

    folder = Path(args.images)
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if folder.is_dir() else []
    if not files:
        raise UserError(f"no images found in {folder}")
    model = build_pristine((_read_image(p) for p in files), args.patch_size, args.threshold)
    print(model.save(args.output))
    return EXIT_OK


def cmd_init_weights(args, cfg) -> int:
    from .vlm import make_tiny_weights

    print(make_tiny_weights(args.output, cfg["seed"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="YAML config file; flags override its values")
    g.add_argument("--weights", help="backbone weight file")
    g.add_argument("--prompt-pairs", dest="prompt_pairs", help="YAML/JSON list of {positive, negative}")
    g.add_argument("--num-frames", dest="num_frames", type=int)
    g.add_argument("--pristine", help="NIQE pristine model file (.txt or .mat)")
    g.add_argument("--stats", help="directory holding niqe.json and tpqi.json")
    g.add_argument("--out", help="output directory")
    g.add_argument("--device")
    g.add_argument("--cache-dir", dest="cache_dir", help="feature cache (default $BVQI_CACHE_DIR or ~/.cache/bvqi)")
    g.add_argument("--no-cache", dest="no_cache", action="store_true")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, help="videos scored in parallel")
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bvqi", description="Opinion-unaware video quality indices.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", parents=[common], help="score videos with precomputed stats")
    p.add_argument("videos", nargs="+")
    p.add_argument("--variant", choices=["bvqi", "bvqi-local"])
    p.add_argument("--local", action="store_true", help="also write quality-map PNGs")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("stats", parents=[common], help="compute NIQE/TPQI normalisation stats")
    p.add_argument("manifest")
    p.add_argument("--source", choices=["evaluation_set", "frozen_corpus"])
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bench", parents=[common], help="correlate an index with MOS")
    p.add_argument("manifest")
    p.add_argument("--variant", choices=["bvqi", "bvqi-local", "saqi", "saqi-local", "niqe", "tpqi"])
    p.add_argument("--aggregate", help="direct | linear | sigmoid | sigmoid-mult")
    p.add_argument("--per-pair", dest="per_pair", action="store_true", help="evaluate each prompt pair alone")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("finetune", parents=[common], help="parameter-efficient fine-tuning over seeded splits")
    p.add_argument("manifest")
    p.add_argument("--variant", help="cp | cp-ip | w-only | direct-text-feature")
    p.add_argument("--context-length", dest="context_length", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--splits", type=int, help="number of seeded splits (seeds 42, 84, ...)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("qmap", parents=[common], help="write local quality-map overlays")
    p.add_argument("videos", nargs="+")
    p.set_defaults(func=cmd_qmap)

    p = sub.add_parser("cross-bench", parents=[common], help="evaluate a checkpoint on other datasets")
    p.add_argument("checkpoint")
    p.add_argument("targets", nargs="+", metavar="MANIFEST=STATS_DIR")
    p.add_argument("--train-name", dest="train_name", default="train")
    p.set_defaults(func=cmd_cross_bench)

    p = sub.add_parser("build-pristine", parents=[common], help="fit a NIQE pristine model from images")
    p.add_argument("images")
    p.add_argument("output")
    p.add_argument("--patch-size", dest="patch_size", type=int, default=96)
    p.add_argument("--threshold", type=float, default=0.75)
    p.set_defaults(func=cmd_build_pristine)

    p = sub.add_parser("init-weights", parents=[common], help="write a small random backbone checkpoint")
    p.add_argument("output")
    p.set_defaults(func=cmd_init_weights)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        np.random.seed(cfg["seed"])
        return args.func(args, cfg)
    except _user_errors() as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
