"""Finite-difference gradient checks for every tape op and the composite blocks."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ctsim import CTSample
from .model import FEResNetSpec, FindNetConfig, fe_resnet, findnet_forward, init_fe_resnet, init_findnet
from .numerics import ops
from .numerics.autodiff import backward, grad_check, parameter
from .spectral import (Binder, GFFCSpec, fourier_unit, frequency_grid, gffc,
                       init_fourier_unit, init_gffc, local_fourier_unit)
from .training import LossWeights, loss_total

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _probe(rng, shape):
    """Fixed random weights that turn a tensor output into a scalar loss."""
    w = rng.normal(size=shape)
    return lambda n: ops.total(ops.mul(n, w))


def _away_from_zero(rng, shape, margin=0.1):
    v = rng.uniform(margin, 1.5, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


# ------------------------------------------------------------------ op checks

def _op_cases(rng) -> dict[str, list[tuple[Callable, np.ndarray]]]:
    """name -> list of (f(x) -> scalar node, x0)."""
    sh = (1, 3, 4, 4)
    a, c = rng.normal(size=sh), rng.normal(size=sh)
    col = rng.normal(size=(1, 3, 1, 1))
    L = _probe(rng, sh)
    Lq = _probe(rng, (1, 12, 2, 2))
    Lt = _probe(rng, (1, 3, 8, 8))
    Lc = _probe(rng, (1, 6, 4, 4))
    Lr = _probe(rng, (3, 16))

    def bn_case(train):
        x0 = rng.normal(size=(2, 3, 4, 4)) * 2 + 1
        g0, b0 = rng.normal(size=3), rng.normal(size=3)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        Lb = _probe(rng, x0.shape)

        def run(x, g, bb):
            return Lb(ops.batch_norm(x, g, bb, rm.copy(), rv.copy(), train))
        return [(lambda x: run(x, g0, b0), x0),
                (lambda g: run(x0, g, b0), g0),
                (lambda bb: run(x0, g0, bb), b0)]

    xc = rng.normal(size=(1, 2, 8, 8))
    wc = rng.normal(size=(3, 2, 3, 3))
    w1 = rng.normal(size=(3, 2, 1, 1))
    Ly = _probe(rng, (1, 3, 8, 8))
    yc = rng.normal(size=(1, 3, 8, 8))
    Lx = _probe(rng, (1, 2, 8, 8))
    zf = rng.normal(size=(1, 4, 8, 5))
    D = frequency_grid(8, 8)
    Lg = _probe(rng, D.shape)
    Lf = _probe(rng, (1, 4, 8, 5))
    Li = _probe(rng, (1, 2, 8, 8))
    s0, c0 = np.array(0.8), np.array(0.3)

    return {
        "add": [(lambda x: L(ops.add(x, c)), a), (lambda x: L(ops.add(a, x)), col)],
        "sub": [(lambda x: L(ops.sub(x, c)), a), (lambda x: L(ops.sub(a, x)), col)],
        "mul": [(lambda x: L(ops.mul(x, c)), a), (lambda x: L(ops.mul(a, x)), col)],
        "neg": [(lambda x: L(ops.neg(x)), a)],
        "scale": [(lambda x: L(ops.scale(x, -2.5)), a)],
        "sum": [(lambda x: ops.scale(ops.total(x), 0.7), a)],
        "abs": [(lambda x: L(ops.absolute(x)), _away_from_zero(rng, sh))],
        "square": [(lambda x: L(ops.square(x)), a)],
        "relu": [(lambda x: L(ops.relu(x)), _away_from_zero(rng, sh))],
        "exp": [(lambda x: L(ops.exp(x)), a)],
        "softplus": [(lambda x: L(ops.softplus(x)), 3 * a)],
        "sigmoid": [(lambda x: L(ops.sigmoid(x)), 3 * a)],
        "reshape": [(lambda x: Lr(ops.reshape(x, (3, 16))), a)],
        "concat": [(lambda x: Lc(ops.concat([x, c], axis=1)), a),
                   (lambda x: Lc(ops.concat([a, x], axis=1)), c)],
        "channel_slice": [(lambda x: _probe(np.random.default_rng(1), (1, 2, 4, 4))(
            ops.channel_slice(x, 1, 3)), a)],
        "quadrant_split": [(lambda x: Lq(ops.quadrant_split(x)), a)],
        "tile2x2": [(lambda x: Lt(ops.tile2x2(x)), a)],
        "conv2d": [(lambda x: Ly(ops.conv2d(x, wc, 1)), xc),
                   (lambda w: Ly(ops.conv2d(xc, w, 1)), wc),
                   (lambda w: Ly(ops.conv2d(xc, w, 0)), w1),
                   (lambda x: Ly(ops.conv2d(x, w1, 0)), xc)],
        "conv2d_transpose": [(lambda y: Lx(ops.conv2d_transpose(y, wc, 1)), yc),
                             (lambda w: Lx(ops.conv2d_transpose(yc, w, 1)), wc)],
        "batch_norm": bn_case(True) + bn_case(False),
        "rfft2": [(lambda x: Lf(ops.rfft2(x)), xc)],
        "irfft2": [(lambda z: Li(ops.irfft2(z, 8)), zf)],
        "gaussian_gain": [(lambda s: Lg(ops.gaussian_gain(D, s, c0, 1e-6)), s0),
                          (lambda cc: Lg(ops.gaussian_gain(D, s0, cc, 1e-6)), c0)],
    }


OP_NAMES = ("add", "sub", "mul", "neg", "scale", "sum", "abs", "square", "relu", "exp",
            "softplus", "sigmoid", "reshape", "concat", "channel_slice", "quadrant_split",
            "tile2x2", "conv2d", "conv2d_transpose", "batch_norm", "rfft2", "irfft2",
            "gaussian_gain")


def check_op(name: str, seed: int = 0) -> float:
    cases = _op_cases(np.random.default_rng(seed))[name]
    return max(grad_check(f, x) for f, x in cases)


# ------------------------------------------------------------------ composite checks

def check_named(build: Callable, params: dict, buffers: dict, x0: np.ndarray | None,
                rng, per_tensor: int | None = None, step: float = 1e-5) -> float:
    """Compare tape gradients of ``build(binder, x) -> scalar`` against central differences.

    Every parameter tensor (and the input ``x0`` when given) is probed on
    ``per_tensor`` random coordinates, or on all of them when None.  Buffers
    are copied for each evaluation so batch-norm running statistics do not
    drift between the analytic and numeric passes.
    """
    def run(track, x):
        b = Binder(params, {k: v.copy() for k, v in buffers.items()}, train=True, track=track)
        return b, build(b, x)

    xp = parameter(x0) if x0 is not None else None
    b, loss = run(True, xp)
    backward(loss)
    analytic = b.grads()
    targets = [(k, params[k], analytic.get(k)) for k in params]
    if xp is not None:
        targets.append(("<input>", x0, xp.grad))

    worst = 0.0
    for name, arr, grad in targets:
        grad = np.zeros_like(arr) if grad is None else grad
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        idx = range(flat.size) if per_tensor is None or flat.size <= per_tensor else \
            rng.choice(flat.size, size=per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = float(run(False, x0)[1].value)
            flat[i] = orig - step
            down = float(run(False, x0)[1].value)
            flat[i] = orig
            num = (up - down) / (2 * step)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
            worst = max(worst, err)
    return worst


def _spread_filters(params, rng):
    # move the Gaussian gains off their initial point so sigma and center both matter
    for k in params:
        if k.endswith(".center"):
            params[k] = np.array(rng.uniform(0.2, 0.6))
        elif k.endswith(".sigma_raw"):
            params[k] = np.array(rng.uniform(-0.5, 1.0))


def check_fourier_unit(seed: int = 0, local: bool = False) -> float:
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    c = 2
    init_fourier_unit(params, buffers, "u", 4 * c if local else c, c, rng)
    _spread_filters(params, rng)
    x0 = rng.normal(size=(1, c, 8, 8))
    L = _probe(rng, x0.shape)
    unit = local_fourier_unit if local else fourier_unit
    return check_named(lambda b, x: L(unit(b, x, "u", True)), params, buffers, x0, rng)


def check_gffc(alpha: float, seed: int = 0, channels: int = 8) -> float:
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    spec = GFFCSpec(channels, channels, alpha, alpha)
    init_gffc(params, buffers, "g", spec, rng)
    _spread_filters(params, rng)
    x0 = rng.normal(size=(1, channels, 8, 8))
    L = _probe(rng, x0.shape)
    return check_named(lambda b, x: L(gffc(b, x, "g", spec)), params, buffers, x0, rng,
                       per_tensor=6)


def check_fe_resnet(seed: int = 0, alpha: float = 0.5) -> float:
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    spec = FEResNetSpec(4, 8, 2, alpha)
    init_fe_resnet(params, buffers, "net", spec, rng)
    _spread_filters(params, rng)
    # a zero projection would hide every gradient behind it
    params["net.proj.weight"] = rng.normal(scale=0.2, size=params["net.proj.weight"].shape)
    x0 = rng.normal(size=(1, 4, 8, 8))
    L = _probe(rng, x0.shape)
    return check_named(lambda b, x: L(fe_resnet(b, x, "net", spec)), params, buffers, x0, rng,
                       per_tensor=4)


def toy_sample(size: int, rng) -> CTSample:
    """A random sample with a small masked square, for gradient checks only."""
    X_gt = rng.uniform(0.0, 0.5, size=(size, size))
    I = np.ones((size, size))
    c = size // 2
    I[c - 1:c + 1, c - 2:c + 1] = 0.0
    A = rng.normal(scale=0.1, size=(size, size))
    return CTSample(Y=X_gt + A, X_gt=X_gt, I=I, X0=X_gt + 0.5 * A, size_class="small")


def perturbed_model(cfg: FindNetConfig, seed: int):
    rng = np.random.default_rng(seed + 1)
    model = init_findnet(cfg, seed)
    _spread_filters(model.params, rng)
    for k, v in model.params.items():
        if k.endswith("proj.weight"):
            model.params[k] = rng.normal(scale=0.05, size=v.shape)
    return model


def check_findnet(seed: int = 0, size: int = 16, stages: int = 2, per_tensor: int = 2,
                  step: float = 1e-6) -> float:
    # the unrolled net stacks many ReLUs; a 1e-5 probe can straddle a kink, so the
    # default step here is smaller (round-off stays near 1e-9 relative)
    rng = np.random.default_rng(seed)
    cfg = FindNetConfig(stages=stages)
    model = perturbed_model(cfg, seed)
    sample = toy_sample(size, rng)
    weights = LossWeights.default(stages)

    def build(b, _x):
        return loss_total(findnet_forward(sample, model, "train", binder=b), sample, weights)
    return check_named(build, model.params, model.buffers, None, rng, per_tensor=per_tensor,
                       step=step)


def check_loss(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    sample = toy_sample(8, rng)
    w = LossWeights.default(1, gamma1=0.5, gamma2=0.5)
    from .model import StageTrace
    A = rng.normal(size=(1, 1, 8, 8))

    def f(x):
        tr = StageTrace(X=[sample.X0[None, None], x], A=[A, ops.scale(x, 0.3)], M=[])
        return loss_total(tr, sample, w)
    return grad_check(f, rng.normal(size=(1, 1, 8, 8)))


# ------------------------------------------------------------------ suite

def suite(seed: int = 0, size: int = 16, stages: int = 2, per_tensor: int = 2,
          full_model: bool = True):
    """Yield (name, thunk) for every check in report order."""
    for name in OP_NAMES:
        yield name, (lambda n=name: check_op(n, seed))
    yield "fourier_unit", lambda: check_fourier_unit(seed)
    yield "local_fourier_unit", lambda: check_fourier_unit(seed, local=True)
    for a in (0.0, 0.5, 0.8):
        yield f"gffc[alpha={a}]", (lambda a=a: check_gffc(a, seed))
    yield "fe_resnet", lambda: check_fe_resnet(seed)
    yield "loss_total", lambda: check_loss(seed)
    if full_model:
        yield f"findnet[S={stages},{size}x{size}]", \
            lambda: check_findnet(seed, size, stages, per_tensor)


def run_suite(**kw) -> list[CheckResult]:
    out = []
    for name, thunk in suite(**kw):
        t = time.perf_counter()
        err = thunk()
        out.append(CheckResult(name, err, time.perf_counter() - t))
    return out
