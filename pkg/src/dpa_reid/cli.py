"""``dpa`` command-line entry point.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from .config import load_config
from .data import SynthSpec, load_manifest, synth_generate
from .exceptions import DpaError
from .training import ABLATION_ARMS, run_ablation, run_eval, run_train

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
PRESETS = ("preset_sgd_cosine.conf", "preset_adam_multistep.conf")


def preset_path(name: str = PRESETS[0]) -> Path:
    return Path(str(resources.files("dpa_reid") / "presets" / name))


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "data", None):
        overrides["data.manifest"] = args.data
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        overrides["train.epochs"] = epochs
        base = load_config(args.config or preset_path(), {k: v for k, v in overrides.items() if k != "train.epochs"})
        # a short run keeps the configured warm-up only if it still fits
        overrides["schedule.warmup_epochs"] = min(base.warmup_epochs, max(0, epochs - 1))
    return load_config(args.config or preset_path(), overrides)


def cmd_synth(args) -> int:
    cfg = _config(args)
    spec = SynthSpec(
        num_identities=args.ids if args.ids is not None else cfg.synth_ids,
        images_per_identity=args.per_id if args.per_id is not None else cfg.synth_per_id,
        cameras=args.cameras if args.cameras is not None else cfg.synth_cameras,
        image_size=args.image_size if args.image_size is not None else cfg.synth_image_size,
        seed=cfg.seed,
        held_out_identities=args.held_out if args.held_out is not None else cfg.synth_held_out,
    )
    manifest = synth_generate(spec, args.out)
    print(f"wrote {len(manifest.entries)} images and manifest.json to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest, loader = load_manifest(cfg.manifest_path())
    _, history = run_train(cfg, manifest, loader, args.out)
    first, last = history.records[0], history.records[-1]
    print(f"epochs {len(history.records)}: total loss {first.total:.4f} -> {last.total:.4f}")
    if not history.loss_decreased:
        print("check failed: final epoch loss is not below the first epoch loss", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest, loader = load_manifest(cfg.manifest_path())
    ckpt = None
    if not args.random_weights:
        ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "checkpoint.dpac"
        if not ckpt.is_file():
            print(f"checkpoint not found: {ckpt} (use --random-weights to score an untrained model)",
                  file=sys.stderr)
            return EXIT_USAGE
    report = run_eval(cfg, manifest, loader, args.out, ckpt)
    print(" ".join(f"{k}={v:.4f}" for k, v in report.metrics().items()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradsuite

    results = gradsuite.run_suite(seed=args.seed or 0)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} items passed")
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    manifest, loader = load_manifest(cfg.manifest_path())
    rows = run_ablation(cfg, manifest, loader, args.out, args.arms)
    for r in rows:
        print(f"{r['method']:<9s} mAP={r['mAP']:.4f} rank1={r['rank1']:.4f} rank5={r['rank5']:.4f} "
              f"mINP={r['mINP']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpa", description="Dual-pooling attention re-identification toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="run configuration (default: SGD/cosine preset)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=out_required)

    p = sub.add_parser("synth", help="generate the synthetic vehicle dataset")
    common(p)
    p.add_argument("--ids", type=int)
    p.add_argument("--per-id", type=int)
    p.add_argument("--held-out", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint + train_log.csv")
    common(p)
    p.add_argument("--data", help="manifest.json (overrides data.manifest)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics.csv and ranks.csv")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--random-weights", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient-check suite")
    common(p, out_required=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate baseline, CpA, SpA and DpA arms")
    common(p)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--arms", nargs="+", choices=ABLATION_ARMS)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DpaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
