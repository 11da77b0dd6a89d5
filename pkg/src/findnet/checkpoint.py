"""Model checkpoints and resumable training state.

A checkpoint directory holds ``params.fnt`` (one FNT1 record per tensor, in
manifest order) and ``manifest.json``.  FNT1 stores float32, so a training
run's ``last`` directory additionally keeps an exact float64 copy of the
whole fit state in ``resume.npz`` / ``resume.json``.
"""
from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .model import FindNetConfig, FindNetParams
from .numerics import fnt
from .training import HistoryRow, OptimizerState

FORMAT = "findnet-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def manifest_for(model: FindNetParams, geometry: dict | None = None) -> dict:
    cfg = model.config
    tensors = [{"name": k, "kind": "param", "shape": list(v.shape)}
               for k, v in model.params.items()]
    tensors += [{"name": k, "kind": "buffer", "shape": list(v.shape)}
                for k, v in model.buffers.items()]
    return {
        "format": FORMAT,
        "stages": cfg.stages,
        "n_kernels": cfg.n_kernels,
        "kernel_size": cfg.kernel_size,
        "blocks": cfg.blocks,
        "width": cfg.width,
        "alpha_schedule": cfg.alphas(),
        "use_gaussian": cfg.use_gaussian,
        "lfu_gaussian": cfg.lfu_gaussian,
        "step": model.step,
        "config": cfg.to_dict(),
        "geometry": geometry,
        "tensors": tensors,
    }


def save(directory, model: FindNetParams, geometry: dict | None = None) -> None:
    d = Path(directory)
    arrays = list(model.params.values()) + list(model.buffers.values())
    fnt.save_many(d / "params.fnt", arrays)
    fnt.atomic_write(d / "manifest.json", _json(manifest_for(model, geometry)))


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        man = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    if man.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint manifest")
    return man


def load(directory) -> tuple[FindNetParams, dict]:
    d = Path(directory)
    man = read_manifest(d)
    arrays = fnt.load_many(d / "params.fnt")
    if len(arrays) != len(man["tensors"]):
        raise CheckpointError(f"manifest lists {len(man['tensors'])} tensors, "
                              f"container holds {len(arrays)}")
    params, buffers = {}, {}
    for spec, arr in zip(man["tensors"], arrays):
        if list(arr.shape) != spec["shape"]:
            raise CheckpointError(f"tensor {spec['name']} has shape {arr.shape}, "
                                  f"manifest says {spec['shape']}")
        (params if spec["kind"] == "param" else buffers)[spec["name"]] = arr
    cfg = FindNetConfig(**man["config"])
    return FindNetParams(cfg, params, buffers, man["step"]), man


# ------------------------------------------------------------------ resume state

def _pack(prefix: str, d: dict, out: dict) -> None:
    for k, v in d.items():
        out[f"{prefix}/{k}"] = v


def _unpack(prefix: str, z) -> dict:
    n = len(prefix) + 1
    return {k[n:]: z[k].copy() for k in z.files if k.startswith(prefix + "/")}


def save_resume(directory, state: dict) -> None:
    """Persist a snapshot produced by :func:`findnet.training.fit`'s ``on_epoch`` hook."""
    d = Path(directory)
    model, best, opt = state["model"], state["best"], state["optimizer"]
    arrays: dict = {}
    _pack("params", model.params, arrays)
    _pack("buffers", model.buffers, arrays)
    _pack("best_params", best.params, arrays)
    _pack("best_buffers", best.buffers, arrays)
    _pack("adam_m", opt.m, arrays)
    _pack("adam_v", opt.v, arrays)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    meta = {
        "config": model.config.to_dict(),
        "step": model.step,
        "best_step": best.step,
        "optimizer": {k: getattr(opt, k) for k in
                      ("lr", "weight_decay", "beta1", "beta2", "eps", "step")},
        "history": [vars(r) for r in state["history"]],
        "step_log": [list(x) for x in state["step_log"]],
        "best_val": state["best_val"],
        "best_epoch": state["best_epoch"],
        "bad": state["bad"],
    }
    fnt.atomic_write(d / "resume.npz", buf.getvalue())
    fnt.atomic_write(d / "resume.json", json.dumps(meta, sort_keys=True))


def load_resume(directory) -> dict:
    d = Path(directory)
    try:
        meta = json.loads((d / "resume.json").read_text())
        z = np.load(d / "resume.npz")
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"no resumable state in {d}: {exc}") from exc
    cfg = FindNetConfig(**meta["config"])
    model = FindNetParams(cfg, _unpack("params", z), _unpack("buffers", z), meta["step"])
    best = FindNetParams(cfg, _unpack("best_params", z), _unpack("best_buffers", z),
                         meta["best_step"])
    opt = OptimizerState(**meta["optimizer"], m=_unpack("adam_m", z), v=_unpack("adam_v", z))
    return dict(model=model, optimizer=opt, best=best,
                history=[HistoryRow(**r) for r in meta["history"]],
                step_log=[tuple(x) for x in meta["step_log"]],
                best_val=meta["best_val"], best_epoch=meta["best_epoch"], bad=meta["bad"])
