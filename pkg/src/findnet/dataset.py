"""On-disk dataset layout: ``samples/<id>/{Y,Xgt,X0,I}.fnt`` + ``meta.json`` and a manifest."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict
from pathlib import Path

from . import ctsim
from .config import GenerateConfig, dump
from .numerics import fnt

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
FIELDS = {"Y": "Y", "Xgt": "X_gt", "X0": "X0", "I": "I"}


class DatasetError(RuntimeError):
    pass


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sample_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


def write_sample(root: Path, sid: str, sample: ctsim.CTSample, extra: dict) -> None:
    d = root / "samples" / sid
    for fname, attr in FIELDS.items():
        fnt.save(d / f"{fname}.fnt", getattr(sample, attr))
    fnt.atomic_write(d / "meta.json", _json({**sample.meta, **extra}))


def read_sample(root, sid: str) -> ctsim.CTSample:
    d = Path(root) / "samples" / sid
    try:
        arrays = {attr: fnt.load(d / f"{fname}.fnt") for fname, attr in FIELDS.items()}
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read sample {sid}: {exc}") from exc
    return ctsim.CTSample(size_class=meta["size_class"], meta=meta, **arrays)


def generate(cfg: GenerateConfig, out) -> dict:
    """Write the dataset described by ``cfg`` under ``out``; returns the manifest."""
    root = Path(out)
    scfg = cfg.sample_config()
    extra = {
        "geometry": asdict(scfg.geometry) | {"size": scfg.phantom.H, "fov_cm": scfg.fov_cm},
        "corruption": asdict(scfg.corruption),
    }
    splits: dict[str, list[str]] = {}
    failures = []
    classes: Counter = Counter()
    index = 0
    for split in SPLITS:
        ids = []
        for i in range(getattr(cfg.splits, split)):
            sid = f"{split}_{i:05d}"
            seed = sample_seed(cfg.seed, index)
            index += 1
            try:
                smp = ctsim.make_sample(seed, scfg)
            except ctsim.GenerationError as exc:
                log.warning("sample %s (seed %d) skipped: %s", sid, seed, exc)
                failures.append({"id": sid, "seed": seed, "error": str(exc)})
                continue
            write_sample(root, sid, smp, extra)
            classes[(split, smp.size_class)] += 1
            ids.append(sid)
        splits[split] = ids
    manifest = {
        "format": "findnet-dataset/1",
        "seed": cfg.seed,
        "splits": splits,
        "counts": {s: len(v) for s, v in splits.items()},
        "class_counts": {s: {k: classes[(s, k)] for k in ("large", "medium", "small")}
                         for s in SPLITS},
        "failures": failures,
        "config": json.loads(dump(cfg)),
    }
    fnt.atomic_write(root / "manifest.json", _json(manifest))
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_split(root, split: str, limit: int | None = None):
    """Return (ids, samples) of one split."""
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise DatasetError(f"dataset has no split {split!r}")
    ids = manifest["splits"][split][:limit]
    return ids, [read_sample(root, sid) for sid in ids]
