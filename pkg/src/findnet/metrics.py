"""Masked MAE / PSNR / SSIM and size-class grouped reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
GROUPS = ("large", "medium", "small")


class EvaluationError(ValueError):
    pass


def _mask(x, y, I):
    x, y, I = (np.asarray(a, dtype=np.float64) for a in (x, y, I))
    if not (x.shape == y.shape == I.shape):
        raise EvaluationError(f"shape mismatch {x.shape}, {y.shape}, {I.shape}")
    m = I > 0.5
    if not m.any():
        raise EvaluationError("mask selects no pixels")
    return x, y, m


def mae(x, y, I) -> float:
    x, y, m = _mask(x, y, I)
    return float(np.abs(x - y)[m].sum() / m.sum())


def psnr(x, y, I, peak: float = 1.0) -> float:
    if peak <= 0:
        raise EvaluationError("peak must be positive")
    x, y, m = _mask(x, y, I)
    mse = float(((x - y) ** 2)[m].mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gauss_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r * r / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x, y, peak: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if min(x.shape) < SSIM_WINDOW:
        raise EvaluationError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = _gauss_window()

    def filt(a):
        return ndimage.correlate(a, w, mode="reflect")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x, y, I, peak: float = 1.0) -> float:
    """Gaussian-window SSIM averaged over pixels where the mask is set.

    The local statistics still see metal pixels inside each window; only
    the averaging is masked.
    """
    x, y, m = _mask(x, y, I)
    return float(ssim_map(x, y, peak)[m].mean())


# ------------------------------------------------------------------ reports

@dataclass
class Row:
    id: str
    size_class: str
    mae: float
    ssim: float
    psnr: float

    def __post_init__(self):
        self.mae, self.ssim, self.psnr = float(self.mae), float(self.ssim), float(self.psnr)


@dataclass
class MetricsReport:
    rows: list[Row]
    peak: float = 1.0
    name: str = ""
    baseline: "MetricsReport | None" = None
    groups: dict = field(init=False)

    def __post_init__(self):
        self.groups = group_means(self.rows)

    def improvements(self) -> dict:
        """Percent improvement of each group mean over the baseline's."""
        if self.baseline is None:
            return {}
        out = {}
        for g, vals in self.groups.items():
            base = self.baseline.groups.get(g)
            if base is None:
                continue
            out[g] = percent_improvement(vals, base)
        return out

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "size_class", "mae", "ssim", "psnr"])
        for r in self.rows:
            w.writerow([r.id, r.size_class, repr(r.mae), repr(r.ssim), repr(r.psnr)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "mae", "ssim", "psnr", "mae_impr_pct", "ssim_impr_pct",
                    "psnr_impr_pct"])
        impr = self.improvements()
        for g, (m, s, p) in self.groups.items():
            i = impr.get(g)
            extra = ["", "", ""] if i is None else [repr(v) for v in i]
            w.writerow([g, repr(m), repr(s), repr(p)] + extra)
        return buf.getvalue()


def group_means(rows) -> dict:
    """{group: (mae, ssim, psnr)} for large/medium/small present in rows, then 'average'."""
    out = {}
    for g in GROUPS:
        sel = [r for r in rows if r.size_class == g]
        if sel:
            out[g] = tuple(float(np.mean([getattr(r, k) for r in sel]))
                           for k in ("mae", "ssim", "psnr"))
    if rows:
        out["average"] = tuple(float(np.mean([getattr(r, k) for r in rows]))
                               for k in ("mae", "ssim", "psnr"))
    return out


def percent_improvement(value, baseline) -> tuple[float, float, float]:
    (m, s, p), (bm, bs, bp) = value, baseline
    return (100.0 * (bm - m) / bm if bm else 0.0,
            100.0 * (s - bs) / bs if bs else 0.0,
            100.0 * (p - bp) / bp if bp else 0.0)


def read_report(text: str, name: str = "baseline") -> MetricsReport:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(Row(rec["id"], rec["size_class"], float(rec["mae"]),
                        float(rec["ssim"]), float(rec["psnr"])))
    return MetricsReport(rows, name=name)


def score(pred, sample, peak: float, sid: str = "") -> Row:
    return Row(sid, sample.size_class, mae(pred, sample.X_gt, sample.I),
               ssim(pred, sample.X_gt, sample.I, peak), psnr(pred, sample.X_gt, sample.I, peak))


def evaluate(predict, samples, ids=None, baseline: MetricsReport | None = None,
             peak: float | None = None, name: str = "") -> MetricsReport:
    """Score ``predict(sample) -> image`` on every sample against its ground truth.

    ``peak`` defaults to the maximum ground-truth value over the split.
    """
    samples = list(samples)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(samples))]
    if peak is None:
        peak = max(float(np.max(s.X_gt)) for s in samples)
    rows = [score(predict(s), s, peak, sid) for sid, s in zip(ids, samples)]
    return MetricsReport(rows, peak=peak, name=name, baseline=baseline)
