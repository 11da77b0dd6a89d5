"""Command-line entry point: ``findnet generate|train|eval|infer|gradcheck``.

Exit codes: 0 success, 1 verification or quality failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint, config, dataset, metrics, verify
from .ctsim import CTSample
from .model import findnet_forward, init_findnet
from .numerics import autodiff, fnt
from .numerics.fft import UnsupportedSizeError, is_pow2
from .training import fit

log = logging.getLogger("findnet")

OK, FAILED, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.paths.out
    if not out:
        raise UsageError("no output directory: pass --out or set paths.out")
    return Path(out)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def pgm16(image: np.ndarray, window: float, level: float) -> bytes:
    """Binary 16-bit PGM of ``image`` under a window/level mapping with clamping."""
    if window <= 0:
        raise UsageError("--window must be positive")
    v = np.clip((np.asarray(image, dtype=np.float64) - (level - window / 2)) / window, 0.0, 1.0)
    pix = np.round(v * 65535).astype(">u2")
    H, W = pix.shape
    return f"P5\n{W} {H}\n65535\n".encode() + pix.tobytes()


def _geometry_of(man: dict) -> dict:
    return man["config"]["geometry"]


# ------------------------------------------------------------------ generate

def cmd_generate(args) -> int:
    cfg = config.load(config.GenerateConfig, args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    out = _out_dir(args, cfg)
    man = dataset.generate(cfg, out)
    for split in dataset.SPLITS:
        cc = man["class_counts"][split]
        print(f"{split}: {man['counts'][split]} samples "
              f"(large {cc['large']}, medium {cc['medium']}, small {cc['small']})")
    for f in man["failures"]:
        print(f"failed: {f['id']} (seed {f['seed']}): {f['error']}", file=sys.stderr)
    short = [s for s in dataset.SPLITS if man["counts"][s] < getattr(cfg.splits, s)]
    if short:
        print(f"splits short of their target: {', '.join(short)}", file=sys.stderr)
        return FAILED
    return OK


# ------------------------------------------------------------------ train

def _history_csv(history) -> str:
    return _csv(["epoch", "step", "train_loss", "val_loss", "lr"],
                [[r.epoch, r.step, repr(r.train_loss), repr(r.val_loss), repr(r.lr)]
                 for r in history])


def _steps_csv(step_log) -> str:
    return _csv(["step", "loss", "lr"], [[s, repr(l), repr(lr)] for s, l, lr in step_log])


def cmd_train(args) -> int:
    cfg = config.load(config.TrainConfig, args.config)
    upd_model = {}
    if args.no_gaussian:
        upd_model["use_gaussian"] = False
    if args.alpha_zero:
        upd_model["alpha_zero"] = True
    if args.stages is not None:
        upd_model["stages"] = int(args.stages)
    upd = {"model": cfg.model.model_copy(update=upd_model)}
    if args.seed is not None:
        upd["seed"] = args.seed
    cfg = config.parse(config.TrainConfig, cfg.model_copy(update=upd).model_dump())
    out = _out_dir(args, cfg)
    data = args.data or cfg.paths.data
    if not data:
        raise UsageError("no dataset: pass --data or set paths.data")
    man = dataset.read_manifest(data)
    geom = _geometry_of(man)
    if cfg.geometry is not None and cfg.geometry.model_dump() != geom:
        raise UsageError(f"config geometry {cfg.geometry.model_dump()} does not match "
                         f"dataset geometry {geom}")
    _, train = dataset.load_split(data, "train", cfg.max_train_samples)
    _, val = dataset.load_split(data, "val")
    if not train or not val:
        raise UsageError("dataset needs nonempty train and val splits")

    fit_cfg = cfg.fit_config(len(train))
    model = init_findnet(cfg.model.build(), cfg.seed)
    resume = None
    if args.resume:
        resume = checkpoint.load_resume(out / "last")
        if resume["model"].config != model.config:
            raise UsageError("resume state was written by a different model config")
        log.info("resuming after epoch %d", resume["history"][-1].epoch)
    fnt.atomic_write(out / "config.json", config.dump(cfg))

    def on_epoch(state):
        checkpoint.save(out / "last", state["model"], geom)
        checkpoint.save_resume(out / "last", state)
        checkpoint.save(out / "best", state["best"], geom)
        fnt.atomic_write(out / "history.csv", _history_csv(state["history"]))
        fnt.atomic_write(out / "steps.csv", _steps_csv(state["step_log"]))

    res = fit(train, val, model, fit_cfg, resume=resume, on_epoch=on_epoch)
    best_val = min(r.val_loss for r in res.history)
    print(f"best val loss {best_val!r} at epoch {res.best_epoch}"
          + (" (early stop)" if res.stopped_early else ""))
    return OK


# ------------------------------------------------------------------ eval

def _predictor(kind: str, ckpt):
    if kind == "oracle":
        return lambda s: s.X_gt
    if kind == "li":
        return lambda s: s.X0
    model = ckpt
    return lambda s: findnet_forward(s, model, "infer").image()


def cmd_eval(args) -> int:
    cfg = config.load(config.EvalConfig, args.config)
    kind = args.model or cfg.model
    if kind not in ("checkpoint", "li", "oracle"):
        raise UsageError(f"unknown model kind {kind!r}")
    split = args.split or cfg.split
    data = args.data or cfg.paths.data
    if not data:
        raise UsageError("no dataset: pass --data or set paths.data")
    out = _out_dir(args, cfg)
    man = dataset.read_manifest(data)
    if split not in man["splits"]:
        raise UsageError(f"dataset has no split {split!r}")
    model = None
    if kind == "checkpoint":
        ck = args.checkpoint or cfg.paths.checkpoint
        if not ck:
            raise UsageError("--model checkpoint needs --checkpoint")
        model, cman = checkpoint.load(ck)
        if cman.get("geometry") not in (None, _geometry_of(man)):
            raise UsageError(f"checkpoint geometry {cman['geometry']} does not match "
                             f"dataset geometry {_geometry_of(man)}")
    ids, samples = dataset.load_split(data, split)
    if not samples:
        raise UsageError(f"split {split!r} is empty")
    baseline = None
    if args.baseline:
        baseline = metrics.read_report(Path(args.baseline).read_text())
    report = metrics.evaluate(_predictor(kind, model), samples, ids, baseline=baseline,
                              name=kind)
    fnt.atomic_write(out / "report.csv", report.per_sample_csv())
    summary = report.summary_csv()
    fnt.atomic_write(out / "summary.csv", summary)
    print(summary, end="")
    return OK


# ------------------------------------------------------------------ infer

def _load_inputs(args) -> CTSample:
    src = Path(args.input) if args.input else None
    paths = {
        "Y": args.y or (src / "Y.fnt" if src else None),
        "I": args.mask or (src / "I.fnt" if src else None),
        "X0": args.x0 or (src / "X0.fnt" if src else None),
    }
    missing = [k for k, v in paths.items() if v is None]
    if missing:
        raise UsageError(f"missing inputs: {', '.join(missing)} (use --input DIR or --y/--mask/--x0)")
    arrs = {}
    for k, p in paths.items():
        try:
            arrs[k] = fnt.load(p)
        except fnt.FNTError as exc:
            raise UsageError(f"{p}: malformed FNT1: {exc}") from None
    shapes = {a.shape for a in arrs.values()}
    if len(shapes) != 1:
        raise UsageError(f"inputs disagree in shape: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 2 or not all(is_pow2(n) for n in shape):
        raise UsageError(f"inputs must be 2-D with power-of-two sides, got {shape}")
    return CTSample(Y=arrs["Y"], X_gt=np.zeros(shape), I=arrs["I"], X0=arrs["X0"],
                    size_class="")


def _parse_stages(text: str | None, S: int) -> list[int]:
    if text is None:
        return list(range(S + 1))
    try:
        st = sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError:
        raise UsageError(f"--stages expects comma-separated integers, got {text!r}") from None
    bad = [s for s in st if not 0 <= s <= S]
    if bad:
        raise UsageError(f"stages {bad} outside 0..{S}")
    return st


def cmd_infer(args) -> int:
    if not args.checkpoint:
        raise UsageError("infer needs --checkpoint")
    if not args.out:
        raise UsageError("infer needs --out")
    model, _ = checkpoint.load(args.checkpoint)
    sample = _load_inputs(args)
    stages = _parse_stages(args.stages, model.config.stages)
    trace = findnet_forward(sample, model, "infer", stages=max(stages))
    out = Path(args.out)
    for s in stages:
        for tag, img in (("X", trace.image(s)), ("A", trace.artifact(s))):
            fnt.save(out / f"{tag}_s{s}.fnt", img)
            fnt.atomic_write(out / f"{tag}_s{s}.pgm", pgm16(img, args.window, args.level))
    print(f"wrote stages {stages} to {out}")
    return OK


# ------------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    cfg = config.load(config.GradcheckConfig, args.config)
    seed = cfg.seed if args.seed is None else args.seed
    broken = args.break_ops or []
    unknown = [b for b in broken if b not in verify.OP_NAMES]
    if unknown:
        raise UsageError(f"--break names unknown operators: {', '.join(unknown)}")
    failed = []
    print(f"{'check':32s} {'max_rel_err':>12s}  status")
    with autodiff.break_adjoint(*broken):
        for name, thunk in verify.suite(seed=seed, size=cfg.size, stages=cfg.stages,
                                        per_tensor=cfg.coords_per_tensor,
                                        full_model=cfg.full_model):
            err = thunk()
            ok = bool(np.isfinite(err) and err < cfg.tolerance)
            print(f"{name:32s} {err:12.3e}  {'pass' if ok else 'FAIL'}", flush=True)
            if not ok:
                failed.append(name)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return FAILED
    return OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="findnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--data")
    t.add_argument("--seed", type=int)
    t.add_argument("--stages", type=int)
    t.add_argument("--no-gaussian", action="store_true")
    t.add_argument("--alpha-zero", action="store_true")
    t.add_argument("--resume", action="store_true",
                   help="continue from OUT/last if it holds a resumable state")

    e = sub.add_parser("eval", help="score a model or baseline on a split")
    e.add_argument("--config")
    e.add_argument("--out")
    e.add_argument("--data")
    e.add_argument("--split")
    e.add_argument("--checkpoint")
    e.add_argument("--model", choices=("checkpoint", "li", "oracle"))
    e.add_argument("--baseline")

    i = sub.add_parser("infer", help="run a checkpoint on one input")
    i.add_argument("--checkpoint")
    i.add_argument("--input", help="directory holding Y.fnt, I.fnt and X0.fnt")
    i.add_argument("--y")
    i.add_argument("--mask")
    i.add_argument("--x0")
    i.add_argument("--out")
    i.add_argument("--stages", help="comma-separated stage indices (default: all)")
    i.add_argument("--window", type=float, default=1.0)
    i.add_argument("--level", type=float, default=0.5)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--break", dest="break_ops", action="append", metavar="OP",
                   help="corrupt the adjoint of OP (debugging the detector)")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(1):
            return COMMANDS[args.command](args)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE
    except (UsageError, dataset.DatasetError, checkpoint.CheckpointError,
            UnsupportedSizeError, fnt.FNTError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
