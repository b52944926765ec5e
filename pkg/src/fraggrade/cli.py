"""Command-line entry point: generate, train, eval, ablate, predict.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from .config import ConfigError, RunConfig
from .data import build_split, grade_counts, load_split, preprocess, preprocess_sample, save_split
from .evaluation import AblationConfig, evaluate, grade_sample, run_ablation
from .model import ModelConfig
from .training import (
    Checkpoint, PhaseConfig, TrainingError, build_model, model_from_checkpoint,
    train_full_mtl, train_phase1, train_phase2,
)

log = logging.getLogger("fraggrade")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> tuple[RunConfig, Path]:
    if args.config is None:
        cfg, base = RunConfig(), Path.cwd()
    else:
        cfg, base = config_mod.load(args.config), Path(args.config).resolve().parent
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "deterministic", False):
        cfg = replace(cfg, deterministic=True)
    if getattr(args, "no_inject", False):
        cfg = replace(cfg, inject=False)
    return cfg, base


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def _out_dir(args, cfg: RunConfig, base: Path) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else _resolve(base, cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _phase_cfg(cfg: RunConfig, phase: str) -> PhaseConfig:
    block = getattr(cfg, phase)
    common = dict(epochs=block.epochs, learning_rate=block.learning_rate, batch_size=block.batch_size,
                  weight_decay=block.weight_decay, max_steps=block.max_steps, seed=cfg.seed,
                  deterministic=cfg.deterministic)
    if phase == "phase1":
        return PhaseConfig.phase1(weights=replace(cfg.loss, beta=0.0), **common)
    if phase == "phase2":
        return PhaseConfig.phase2(weights=replace(cfg.loss, alpha=0.0), **common)
    return PhaseConfig.full_mtl(weights=cfg.loss, **common)


def _data_dir(args, cfg, base) -> Path:
    return Path(args.data) if getattr(args, "data", None) else _resolve(base, cfg.data.dir)


def _write_history(out: Path, ckpt: Checkpoint) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in ckpt.history]
    (out / f"{ckpt.phase}_history.jsonl").write_text("\n".join(lines) + "\n")


# -- commands ------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg, base = _load_config(args)
    out = Path(args.out) if args.out else _resolve(base, cfg.data.dir)
    d = cfg.data
    if d.n_paired == 0:
        print("warning: n_paired is 0; Phase 1 training will be impossible on this dataset",
              file=sys.stderr)
    split = build_split(d.n_paired, d.n_weak, d.n_val, replace(cfg.phantom, seed=cfg.seed),
                        workers=d.workers)
    try:
        manifest = save_split(split, out)
    except OSError as e:
        raise RuntimeError(f"cannot write dataset to {out}: {e}") from e
    print(f"wrote {manifest}")
    for kind in ("paired", "weak", "val"):
        counts = grade_counts(getattr(split, kind))
        print(f"{kind:>6}: n={len(getattr(split, kind))} " + " ".join(f"{g}={n}" for g, n in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, base = _load_config(args)
    if args.mode == "phase2" and not args.from_checkpoint:
        raise UsageError("--mode phase2 requires --from-checkpoint")
    out = _out_dir(args, cfg, base)
    split = load_split(_data_dir(args, cfg, base))
    mc = ModelConfig(profile=cfg.profile, attention=cfg.attention, inject=cfg.inject)
    written = []

    if args.mode in ("phase1", "decoupled"):
        model = build_model(mc, cfg.seed)
        ck1 = train_phase1(split, model, _phase_cfg(cfg, "phase1"))
        written.append(ck1.save(out / "phase1.ckpt"))
        _write_history(out, ck1)
        if args.mode == "decoupled":
            ck2 = train_phase2(split, model, ck1, _phase_cfg(cfg, "phase2"))
            written.append(ck2.save(out / "phase2.ckpt"))
            _write_history(out, ck2)
    elif args.mode == "phase2":
        parent = Checkpoint.load(args.from_checkpoint)
        model = model_from_checkpoint(parent)
        ck2 = train_phase2(split, model, parent, _phase_cfg(cfg, "phase2"))
        written.append(ck2.save(out / "phase2.ckpt"))
        _write_history(out, ck2)
    else:
        model = build_model(mc, cfg.seed)
        ck = train_full_mtl(split, model, _phase_cfg(cfg, "full_mtl"))
        written.append(ck.save(out / "full_mtl.ckpt"))
        _write_history(out, ck)

    for p in written:
        ck = Checkpoint.load(p)
        print(f"{p}: phase={ck.phase} digest={ck.digest[:16]} parent={(ck.parent_digest or '-')[:16]}")
    return EXIT_OK


def _overlay(image, pred=None, gt=None) -> np.ndarray:
    from scipy import ndimage

    g = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([g, g, g], axis=-1)
    for mask, color in ((gt, (0, 0, 255)), (pred, (0, 255, 0))):
        if mask is None:
            continue
        mask = np.asarray(mask, bool)
        edge = mask & ~ndimage.binary_erosion(mask)
        rgb[edge] = color
    return rgb


def _save_predictions(out: Path, name: str, image, res, gt=None) -> None:
    Image.fromarray(_overlay(image, res.get("mask"), gt)).save(out / f"{name}_overlay.png")
    if res.get("mask") is not None:
        Image.fromarray(np.where(res["mask"], 255, 0).astype(np.uint8)).save(out / f"{name}_mask.png")
    if res.get("alpha") is not None:
        a = Image.fromarray(np.round(res["alpha"] * 255).astype(np.uint8))
        a.resize(np.asarray(image).shape[::-1], Image.BILINEAR).save(out / f"{name}_alpha.png")


def cmd_eval(args) -> int:
    cfg, base = _load_config(args)
    ckpt = Checkpoint.load(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    split = load_split(_data_dir(args, cfg, base))
    metrics = evaluate(model, split.val)
    if ckpt.phase == "phase1":
        # the regression head is untrained for regression after phase 1
        metrics.pop("mae_direct", None)
    metrics = {"checkpoint": str(args.checkpoint), "phase": ckpt.phase, **metrics}
    out = _out_dir(args, cfg, base)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    if args.overlays:
        odir = out / "overlays"
        odir.mkdir(exist_ok=True)
        for s in split.val:
            s = preprocess_sample(s)  # overlays are drawn in the network's 299x299 frame
            _save_predictions(odir, s.id, s.image, grade_sample(model, s.image), s.fragment_mask)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, base = _load_config(args)
    out = _out_dir(args, cfg, base)
    d = cfg.data
    acfg = AblationConfig(
        profile=cfg.profile, n_paired=d.n_paired, n_weak=d.n_weak, n_val=d.n_val,
        phantom=cfg.phantom, seed=cfg.seed, weights=cfg.loss,
        epochs_phase1=cfg.phase1.epochs, epochs_phase2=cfg.phase2.epochs,
        epochs_full=cfg.full_mtl.epochs, epochs_regression=cfg.regression.epochs,
        lr_base=cfg.phase1.learning_rate, lr_finetune=cfg.phase2.learning_rate,
        batch_size=cfg.phase1.batch_size, max_steps=cfg.phase1.max_steps,
    )
    data_dir = _data_dir(args, cfg, base)
    split = load_split(data_dir) if (data_dir / "manifest.jsonl").exists() else None
    report = run_ablation(acfg, split)
    (out / "ablation.jsonl").write_text(report.to_jsonl())
    table = report.to_table()
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    path = Path(args.image)
    if not path.exists():
        raise UsageError(f"image not found: {path}")
    image = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    res = grade_sample(model, image)
    fmt = lambda v: "N/A" if v is None else f"{v:.4f}"  # noqa: E731
    gv = lambda g: "N/A" if g is None else g.value  # noqa: E731
    print(f"y_direct={fmt(res['y_direct'])} grade_direct={gv(res['grade_direct'])} "
          f"y_from_mask={fmt(res['y_from_mask'])} grade_from_mask={gv(res['grade_from_mask'])}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        shown = image if image.shape == (299, 299) else preprocess(image)[0]
        _save_predictions(out, path.stem, shown, res)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fraggrade", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")
        if out:
            sp.add_argument("--out", help="output directory")

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--mode", required=True, choices=["phase1", "phase2", "full_mtl", "decoupled"])
    t.add_argument("--from-checkpoint")
    t.add_argument("--no-inject", action="store_true", help="disconnect feature injection")
    t.add_argument("--data", help="dataset directory (overrides config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--overlays", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the seven-row ablation suite")
    common(a)
    a.add_argument("--data")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("predict", help="grade one image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"fraggrade: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FileNotFoundError, RuntimeError, ValueError, OSError, KeyError) as e:
        print(f"fraggrade: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
