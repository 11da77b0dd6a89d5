"""Multi-stage loss, AdamW with warmup + cosine schedule, and the fit loop."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import FindNetParams, StageTrace, findnet_forward
from .numerics import ops
from .numerics.autodiff import Node, as_node, backward
from .spectral import Binder

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    omega: list[float]
    gamma1: float = 5e-4
    gamma2: float = 5e-4

    @classmethod
    def default(cls, stages: int, intermediate: float = 0.1, final: float = 1.0,
                gamma1: float = 5e-4, gamma2: float = 5e-4) -> "LossWeights":
        return cls([intermediate] * stages + [final], gamma1, gamma2)

    def __post_init__(self):
        if min(self.omega) < 0 or self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.omega[-1] <= 0:
            raise ValueError("the final-stage weight must be positive")


def _img(a):
    a = as_node(a)
    v = a.value
    if v.ndim == 2:
        return ops.reshape(a, (1, 1) + v.shape)
    return a


def loss_total(trace: StageTrace, sample, w: LossWeights) -> Node:
    """Masked squared-Frobenius + L1 image terms over s = 0..S plus L1 artifact term over s = 1..S.

    Norms are sums over pixels.
    """
    S = len(trace.X) - 1
    if len(w.omega) != S + 1:
        raise ValueError(f"need {S + 1} stage weights, got {len(w.omega)}")
    I = _img(sample.I).value
    X_gt = _img(sample.X_gt).value
    Y = _img(sample.Y).value
    target_A = Y - X_gt
    terms = []
    for s in range(S + 1):
        if w.omega[s] == 0:
            continue
        r = ops.mul(I, ops.sub(X_gt, _img(trace.X[s])))
        term = ops.total(ops.square(r))
        if w.gamma1:
            term = ops.add(term, ops.scale(ops.total(ops.absolute(r)), w.gamma1))
        if s >= 1 and w.gamma2:
            ra = ops.mul(I, ops.sub(target_A, _img(trace.A[s])))
            term = ops.add(term, ops.scale(ops.total(ops.absolute(ra)), w.gamma2))
        terms.append(ops.scale(term, w.omega[s]))
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


# ------------------------------------------------------------------ optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> bool:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Returns False (and leaves everything untouched) when a gradient is not finite.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; step rejected", name)
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        p -= lr * update
    return True


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            g *= f
    return norm


@dataclass
class ScheduleConfig:
    warmup_steps: int = 100
    total_steps: int = 1000
    min_lr_fraction: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(step: int, cfg: ScheduleConfig, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine annealing to ``min_lr_fraction * base_lr``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < cfg.warmup_steps:
        return base_lr * (step + 1) / cfg.warmup_steps
    lo = cfg.min_lr_fraction
    if step >= cfg.total_steps:
        return lo * base_lr
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return base_lr * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * frac)))


def clamp_filter_centers(params: dict) -> None:
    for name, v in params.items():
        if name.endswith(".center"):
            np.clip(v, 0.0, 1.0, out=v)


# ------------------------------------------------------------------ fit

@dataclass
class FitConfig:
    epochs: int = 10
    patience: int = 10
    min_delta: float = 1e-6
    clip_norm: float = 10.0
    seed: int = 0
    schedule: ScheduleConfig | None = None
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    loss: LossWeights | None = None


@dataclass
class HistoryRow:
    epoch: int
    step: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    best: FindNetParams
    last: FindNetParams
    history: list[HistoryRow]
    step_log: list[tuple[int, float, float]]
    optimizer: OptimizerState
    best_epoch: int
    stopped_early: bool = False


def train_step(model: FindNetParams, sample, weights: LossWeights, opt: OptimizerState,
               lr: float, clip_norm: float = 10.0) -> float:
    b = Binder(model.params, model.buffers, train=True, track=True)
    trace = findnet_forward(sample, model, "train", binder=b)
    loss = loss_total(trace, sample, weights)
    backward(loss)
    grads = b.grads()
    clip_by_global_norm(grads, clip_norm)
    if adamw_step(model.params, grads, opt, lr):
        clamp_filter_centers(model.params)
        model.step += 1
    return float(loss.value)


def evaluate_loss(model: FindNetParams, samples, weights: LossWeights) -> float:
    total = 0.0
    for smp in samples:
        trace = findnet_forward(smp, model, "infer")
        total += float(loss_total(trace, smp, weights).value)
    return total / max(1, len(samples))


def fit(train, val, model: FindNetParams, cfg: FitConfig, resume: dict | None = None,
        on_epoch=None) -> FitResult:
    """Per-sample AdamW training with early stopping on validation loss.

    ``train``/``val`` are sequences of samples (or callables loading them).
    ``resume`` is the dict produced by ``on_epoch`` snapshots; ``on_epoch``
    receives one after every epoch.
    """
    if not train or not val:
        raise ValueError("training and validation splits must be nonempty")
    S = model.config.stages
    weights = cfg.loss or LossWeights.default(S)
    sched = cfg.schedule or ScheduleConfig(min(100, max(1, cfg.epochs * len(train) // 20)),
                                           cfg.epochs * len(train))
    base_lr = cfg.optimizer.lr
    opt = copy.deepcopy(cfg.optimizer)
    history: list[HistoryRow] = []
    step_log: list = []
    best, best_val, best_epoch, bad = model.copy(), math.inf, 0, 0
    start = 1
    if resume:
        model = resume["model"]
        opt = resume["optimizer"]
        history = list(resume["history"])
        step_log = list(resume["step_log"])
        best, best_val, best_epoch, bad = (resume["best"], resume["best_val"],
                                           resume["best_epoch"], resume["bad"])
        start = history[-1].epoch + 1 if history else 1

    stopped = False
    for epoch in range(start, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        losses = []
        lr = base_lr
        for i in order:
            smp = train[i]
            smp = smp() if callable(smp) else smp
            lr = lr_at(opt.step, sched, base_lr)
            loss = train_step(model, smp, weights, opt, lr, cfg.clip_norm)
            losses.append(loss)
            step_log.append((opt.step, loss, lr))
        val_samples = [v() if callable(v) else v for v in val]
        val_loss = evaluate_loss(model, val_samples, weights)
        history.append(HistoryRow(epoch, opt.step, float(np.mean(losses)), val_loss, lr))
        log.info("epoch %d step %d train %.6g val %.6g lr %.3g", epoch, opt.step,
                 history[-1].train_loss, val_loss, lr)
        if val_loss < best_val - cfg.min_delta:
            best, best_val, best_epoch, bad = model.copy(), val_loss, epoch, 0
        else:
            bad += 1
        if on_epoch is not None:
            on_epoch(dict(model=model, optimizer=opt, history=history, step_log=step_log,
                          best=best, best_val=best_val, best_epoch=best_epoch, bad=bad))
        if bad >= cfg.patience:
            stopped = True
            break
    return FitResult(best, model, history, step_log, opt, best_epoch, stopped)
