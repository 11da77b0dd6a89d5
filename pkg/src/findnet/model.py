"""Unrolled proximal-gradient network for metal artifact reduction.

Each stage updates the artifact feature maps ``M`` with a gradient step on
the masked data term followed by a learned proximal network, synthesizes
the artifact image ``A = sum_n K_n * M_n`` and then updates the image
estimate ``X`` with a masked relaxation step and a second proximal network.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import ops
from .numerics.autodiff import Node, as_node
from .spectral import (Binder, ConfigurationError, GFFCSpec, gffc, init_conv, init_gffc,
                       inv_softplus)

ALPHA_MAX = 0.8
SIZE_CLASSES = ("large", "medium", "small")


def alpha_schedule(s: int, S: int) -> tuple[float, float]:
    """Global-branch channel ratio for stage index ``s`` in ``[0, S)``.

    Zero in the first stage, rising linearly to 0.8 at 60% of the way to the
    last stage, then held; rounded to one decimal.
    """
    if not 0 <= s < S:
        raise ValueError(f"stage index {s} outside [0, {S})")
    if s == 0:
        return 0.0, 0.0
    a = min(ALPHA_MAX, ALPHA_MAX * s / math.ceil(0.6 * (S - 1)))
    a = math.floor(a * 10 + 0.5) / 10
    return a, a


@dataclass
class FindNetConfig:
    stages: int = 10
    n_kernels: int = 8
    kernel_size: int = 9
    width: int = 16
    blocks: int = 2
    use_gaussian: bool = True
    lfu_gaussian: bool = True
    alpha_zero: bool = False
    m_init: str = "net"
    eta1_init: float = 0.1
    eta2_init: float = 0.5

    def __post_init__(self):
        if self.stages < 1 or self.n_kernels < 1 or self.width < 1 or self.blocks < 0:
            raise ConfigurationError("stages, n_kernels and width must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd")
        if self.m_init not in ("net", "zero"):
            raise ConfigurationError(f"m_init must be 'net' or 'zero', got {self.m_init!r}")
        if not (self.eta1_init > 0 and 0 < self.eta2_init < 1):
            raise ConfigurationError("eta1_init must be > 0 and eta2_init in (0, 1)")

    def alphas(self) -> list[float]:
        """Alpha of stages 1..S."""
        if self.alpha_zero:
            return [0.0] * self.stages
        return [alpha_schedule(s, self.stages)[0] for s in range(self.stages)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FindNetParams:
    config: FindNetConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "FindNetParams":
        return FindNetParams(self.config,
                             {k: v.copy() for k, v in self.params.items()},
                             {k: v.copy() for k, v in self.buffers.items()}, self.step)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class StageTrace:
    """X[s] for s = 0..S, A[s] for s = 1..S (A[0] is the initial synthesis), M[s] for s = 0..S."""
    X: list
    A: list
    M: list
    binder: Binder | None = None

    @property
    def stages(self) -> int:
        return len(self.X) - 1

    def image(self, s: int = -1) -> np.ndarray:
        return self.X[s].value[0, 0]

    def artifact(self, s: int = -1) -> np.ndarray:
        return self.A[s].value[0, 0]


# ------------------------------------------------------------------ FE-ResNet

@dataclass(frozen=True)
class FEResNetSpec:
    in_ch: int
    width: int
    blocks: int
    alpha: float = 0.0
    use_gaussian: bool = True
    lfu_gaussian: bool = True

    @property
    def gffc(self) -> GFFCSpec:
        return GFFCSpec(self.width, self.width, self.alpha, self.alpha,
                        self.use_gaussian, self.lfu_gaussian)


def init_fe_resnet(params, buffers, prefix, spec: FEResNetSpec, rng):
    init_conv(params, f"{prefix}.lift", spec.width, spec.in_ch, 3, rng)
    for t in range(spec.blocks):
        init_gffc(params, buffers, f"{prefix}.block{t}.a", spec.gffc, rng)
        init_gffc(params, buffers, f"{prefix}.block{t}.b", spec.gffc, rng)
    # zero projection makes the whole network start as the identity map
    params[f"{prefix}.proj.weight"] = np.zeros((spec.in_ch, spec.width, 3, 3))


def fe_resnet(b: Binder, x, prefix: str, spec: FEResNetSpec) -> Node:
    x = as_node(x)
    if x.shape[1] != spec.in_ch:
        raise ConfigurationError(f"{prefix}: expected {spec.in_ch} channels, got {x.shape[1]}")
    h = ops.conv2d(x, b(f"{prefix}.lift.weight"), 1)
    for t in range(spec.blocks):
        r = gffc(b, h, f"{prefix}.block{t}.a", spec.gffc)
        r = gffc(b, r, f"{prefix}.block{t}.b", spec.gffc)
        h = ops.add(h, r)
    return ops.add(x, ops.conv2d(h, b(f"{prefix}.proj.weight"), 1))


# ------------------------------------------------------------------ model

def _net_spec(cfg: FindNetConfig, in_ch: int, alpha: float) -> FEResNetSpec:
    return FEResNetSpec(in_ch, cfg.width, cfg.blocks, alpha, cfg.use_gaussian, cfg.lfu_gaussian)


def init_findnet(cfg: FindNetConfig, seed: int = 0) -> FindNetParams:
    rng = np.random.default_rng(seed)
    params: dict = {}
    buffers: dict = {}
    N, k = cfg.n_kernels, cfg.kernel_size
    K = rng.normal(size=(N, 1, k, k))
    K /= np.sqrt((K ** 2).sum(axis=(1, 2, 3), keepdims=True))
    params["kernels"] = K
    if cfg.m_init == "net":
        init_fe_resnet(params, buffers, "m_init", _net_spec(cfg, N, 0.0), rng)
    for s, alpha in enumerate(cfg.alphas(), start=1):
        params[f"stage{s}.eta1_raw"] = np.array(inv_softplus(cfg.eta1_init))
        params[f"stage{s}.eta2_raw"] = np.array(math.log(cfg.eta2_init / (1 - cfg.eta2_init)))
        init_fe_resnet(params, buffers, f"stage{s}.mnet", _net_spec(cfg, N, alpha), rng)
        init_fe_resnet(params, buffers, f"stage{s}.xnet", _net_spec(cfg, 1, alpha), rng)
    return FindNetParams(cfg, params, buffers)


def _bank(b: Binder) -> Node:
    """Dictionary kernels [N,1,k,k] viewed as a single-output conv bank [1,N,k,k]."""
    K = b("kernels")
    N, _, k, _ = K.shape
    return ops.reshape(K, (1, N, k, k))


def artifact_synthesis(kernels, M) -> Node:
    """A = sum_n K_n (*) M_n with same padding; kernels [N,1,k,k], M [B,N,H,W]."""
    kernels = as_node(kernels)
    N, _, k, _ = kernels.shape
    M = as_node(M)
    if M.shape[-3] != N:
        raise ConfigurationError(f"feature maps have {M.shape[-3]} channels, dictionary has {N}")
    return ops.conv2d(M, ops.reshape(kernels, (1, N, k, k)), k // 2)


def stage_etas(b: Binder, s: int) -> tuple[Node, Node]:
    eta1 = b.overrides.get(f"stage{s}.eta1")
    if eta1 is None:
        eta1 = ops.softplus(b(f"stage{s}.eta1_raw"))
    eta2 = b.overrides.get(f"stage{s}.eta2")
    if eta2 is None:
        eta2 = ops.sigmoid(b(f"stage{s}.eta2_raw"))
    return eta1, eta2


def data_gradient(bank: Node, A, X, Y, I) -> Node:
    """K^T (I . (A + X - Y)), the gradient of the masked data term w.r.t. M."""
    k = bank.shape[-1]
    r = ops.mul(I, ops.sub(ops.add(A, X), Y))
    return ops.conv2d_transpose(r, bank, k // 2)


def mnet_update(b: Binder, model: FindNetParams, s: int, M_prev, X_prev, Y, I, alpha: float,
                A_prev=None):
    bank = _bank(b)
    if A_prev is None:
        A_prev = ops.conv2d(M_prev, bank, bank.shape[-1] // 2)
    G = data_gradient(bank, A_prev, X_prev, Y, I)
    eta1, _ = stage_etas(b, s)
    spec = _net_spec(model.config, model.config.n_kernels, alpha)
    return fe_resnet(b, ops.sub(M_prev, ops.mul(eta1, G)), f"stage{s}.mnet", spec)


def xnet_update(b: Binder, model: FindNetParams, s: int, X_prev, Y, A_next, I, alpha: float):
    _, eta2 = stage_etas(b, s)
    keep = ops.sub(1.0, ops.mul(eta2, I))
    Z = ops.add(ops.mul(keep, X_prev), ops.mul(ops.mul(eta2, I), ops.sub(Y, A_next)))
    return fe_resnet(b, Z, f"stage{s}.xnet", _net_spec(model.config, 1, alpha))


def _image4(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None, None]
    if a.ndim == 3:
        return a[None]
    return a


def findnet_forward(sample, model: FindNetParams, mode: str = "infer",
                    binder: Binder | None = None, stages: int | None = None) -> StageTrace:
    """Run the unrolled network on one sample.

    ``mode`` selects batch-norm behaviour; gradients are tracked only in
    train mode unless an explicit binder says otherwise.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = model.config
    b = binder or Binder(model.params, model.buffers, train=(mode == "train"),
                         track=(mode == "train"))
    Y, I, X0 = _image4(sample.Y), _image4(sample.I), _image4(sample.X0)
    if not (Y.shape == I.shape == X0.shape):
        raise ConfigurationError("Y, I and X0 must share one shape")

    bank = _bank(b)
    pad = bank.shape[-1] // 2
    X = as_node(X0)
    if cfg.m_init == "net":
        R = ops.conv2d_transpose(ops.mul(I, ops.sub(Y, X0)), bank, pad)
        M = fe_resnet(b, R, "m_init", _net_spec(cfg, cfg.n_kernels, 0.0))
    else:
        M = as_node(np.zeros((Y.shape[0], cfg.n_kernels) + Y.shape[2:]))
    trace = StageTrace(X=[X], A=[ops.conv2d(M, bank, pad)], M=[M], binder=b)

    alphas = cfg.alphas()
    for s in range(1, (stages or cfg.stages) + 1):
        M = mnet_update(b, model, s, M, X, Y, I, alphas[s - 1], A_prev=trace.A[-1])
        A = ops.conv2d(M, bank, pad)
        X = xnet_update(b, model, s, X, Y, A, I, alphas[s - 1])
        trace.X.append(X)
        trace.A.append(A)
        trace.M.append(M)
    return trace
