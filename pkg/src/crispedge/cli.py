"""Batch command line: ``crispedge generate|train|eval|predict``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._validation import ConfigError, ShapeError
from .config import dump_config, load_config
from .data import generate_synthetic, load_nuclei_dataset, load_samples, read_volume, save_samples, split_dataset, write_volume
from .metrics import format_report
from .training import (
    TrainingDivergedError,
    evaluate_run,
    format_log,
    load_phase1,
    load_phase2,
    predict,
    save_phase1,
    save_phase2,
    train_phase1,
    train_phase2,
)

logger = logging.getLogger("crispedge")


class CLIError(RuntimeError):
    pass


def _config(args, overrides=None):
    overrides = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _load_dataset(cfg):
    if cfg.data.nuclei_dir:
        return load_nuclei_dataset(cfg.data.nuclei_dir, cfg.data.nuclei_size)
    d = cfg.dataset_dir
    if not (d / "manifest.json").exists():
        raise CLIError(f"dataset not found: {d / 'manifest.json'} (run `crispedge generate` first)")
    return load_samples(d)


def _split(cfg):
    return split_dataset(_load_dataset(cfg), cfg.data.test_frac, cfg.seed)


def _checkpoints(cfg, args) -> Path:
    return Path(args.checkpoints) if getattr(args, "checkpoints", None) else Path(cfg.output_dir) / "checkpoints"


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else cfg.dataset_dir
    samples = generate_synthetic(cfg.synth)
    save_samples(samples, out, seed=cfg.seed, rank=cfg.synth.rank)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {"train.gate_enabled": False} if args.no_gate else {}
    cfg = _config(args, overrides)
    ckpt = _checkpoints(cfg, args)
    train, test = _split(cfg)
    ckpt.mkdir(parents=True, exist_ok=True)
    (ckpt / "config.txt").write_text(dump_config(cfg))
    (ckpt / "split.json").write_text(
        json.dumps({"train": [s.id for s in train], "test": [s.id for s in test]}, indent=2) + "\n"
    )
    log = []
    if args.phase in ("1", "both"):
        p1 = train_phase1(train, cfg.train, cfg.net, cache_for=test)
        save_phase1(p1, ckpt / "phase1")
        log += p1.log
    if args.phase in ("2", "both"):
        if not (ckpt / "phase1" / "object_net.pt").exists():
            raise CLIError(f"phase-1 artifacts missing: {ckpt / 'phase1'} (train --phase 1 first)")
        p1 = load_phase1(ckpt / "phase1")
        p2 = train_phase2(train, p1, cfg.train, cfg.net)
        save_phase2(p2, ckpt / "phase2")
        if not log:
            log = list(p1.log)
        log += p2.log
    (Path(cfg.output_dir)).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "train_log.csv").write_text(format_log(log))
    print(f"checkpoints written to {ckpt}")
    return 0


def _load_artifacts(ckpt: Path):
    for sub in ("phase1", "phase2"):
        if not (ckpt / sub).is_dir():
            raise CLIError(f"checkpoint directory missing: {ckpt / sub}")
    return load_phase1(ckpt / "phase1"), load_phase2(ckpt / "phase2")


def _plot_sweep(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ods_rows = [r for r in rows if r.metric == "sweep_ods"]
    ois_rows = [r for r in rows if r.metric == "sweep_ois"]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([r.d for r in ods_rows], [r.f for r in ods_rows], "o-", label="ODS")
    ax.plot([r.d for r in ois_rows], [r.f for r in ois_rows], "s--", label="OIS")
    ax.set_xlabel("tolerance d (fraction of diagonal)")
    ax.set_ylabel("F-measure")
    ax.invert_xaxis()
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(args) -> int:
    cfg = _config(args)
    p1, p2 = _load_artifacts(_checkpoints(cfg, args))
    _, test = _split(cfg)
    rows = evaluate_run(p1, p2, test, cfg.eval, dataset=cfg.data.name, sweep=cfg.sweep if args.sweep else None)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    main_rows = [r for r in rows if not r.metric.startswith("sweep")]
    (out / "metrics.csv").write_text(format_report(main_rows))
    if args.sweep:
        sweep_rows = [r for r in rows if r.metric.startswith("sweep")]
        (out / "crispness.csv").write_text(format_report(sweep_rows))
        _plot_sweep(sweep_rows, out / "crispness.png")
    print(f"metrics written to {out}")
    return 0


def _read_input(path: Path, rank: int) -> np.ndarray:
    if not path.exists():
        raise CLIError(f"input not found: {path}")
    try:
        if path.suffix == ".raw":
            arr = read_volume(path).astype(np.float32)
        else:
            from PIL import Image

            with Image.open(path) as im:
                if im.mode.startswith("I"):
                    arr = np.asarray(im, dtype=np.float32)
                    arr = arr / max(float(arr.max()), 1.0)
                else:
                    arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError(f"cannot read input {path}: {exc}") from exc
    if arr.ndim != rank:
        raise CLIError(f"input {path} has {arr.ndim} dimensions but the model is rank {rank}")
    return np.clip(arr, 0.0, 1.0)


def cmd_predict(args) -> int:
    from PIL import Image

    cfg = _config(args)
    p1, p2 = _load_artifacts(_checkpoints(cfg, args))
    rank = p1.object_net.cfg.rank
    image = _read_input(Path(args.input), rank)
    edges = predict(p2, p1, image)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if rank == 3:
        write_volume(out, edges, "u8")
    else:
        Image.fromarray((edges * 255).astype(np.uint8), mode="L").save(out, format="PNG")
        gray = (image * 255).round().astype(np.uint8)
        overlay = np.stack([gray, gray, gray], axis=-1)
        overlay[edges.astype(bool)] = (255, 0, 0)
        Image.fromarray(overlay, mode="RGB").save(out.with_name(out.stem + "_overlay.png"), format="PNG")
    print(f"prediction written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crispedge", description="Crisp edge detection with logical refinement.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value run configuration file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the configured seed (CEL_SEED takes precedence)")

    p = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    common(p)
    p.add_argument("--out", help="dataset directory (default: data.dataset_dir or <output_dir>/dataset)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train phase 1, phase 2 or both")
    common(p)
    p.add_argument("--phase", choices=["1", "2", "both"], default="both", help="which phase(s) to train")
    p.add_argument("--no-gate", action="store_true", help="replace every logical gate by a plain 3x3 convolution")
    p.add_argument("--checkpoints", help="checkpoint directory (default: <output_dir>/checkpoints)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained checkpoints on the held-out split")
    common(p)
    p.add_argument("--checkpoints", help="checkpoint directory (default: <output_dir>/checkpoints)")
    p.add_argument("--sweep", action="store_true", help="also write the crispness sweep CSV and plot")
    p.add_argument("--out", help="report directory (default: <output_dir>)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="binary edge map for one image or volume")
    common(p)
    p.add_argument("--checkpoints", help="checkpoint directory (default: <output_dir>/checkpoints)")
    p.add_argument("--input", required=True, help="2D image file or .raw volume")
    p.add_argument("--out", required=True, help="output PNG (2D) or .raw volume (3D)")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CLIError, ConfigError, ShapeError, FileNotFoundError, KeyError, ValueError,
            TrainingDivergedError) as exc:
        print(f"crispedge {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
