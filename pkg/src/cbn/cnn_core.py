"""Cyclic CNNs with a fixed pooling filter: forward pass, Jacobians, training.

A network with parameters ``theta = ((w_1, b_1), ..., (w_L, b_L))`` computes

    alpha_0 = x
    pre_l   = W_l alpha_{l-1} + 1 b_l^T
    alpha_l = ReLU(M pre_l)          for l < L
    alpha_L = pre_L                  (the last layer is linear, no pooling)

where ``W_l`` is the TE matrix of the filter ``w_l`` and ``M`` applies the
pooling filter to every channel.  The squared parameter norm is measured in
matrix form, ``sum_l ||W_l||_F^2 + ||b_l||^2 = sum_l N ||w_l||^2 + ||b_l||^2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .te_linalg import (
    ConvFilter,
    PoolingSpec,
    as_shape,
    frequency_blocks,
    num_pixels,
    pooling_operator,
    signal_axes,
    te_matrix,
)

log = logging.getLogger(__name__)

EPS_KINK = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when the training loss blows up or turns non-finite."""


@dataclass
class NetworkParams:
    layers: list[ConvFilter]
    pooling: PoolingSpec

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("a network needs at least one layer")
        shape = self.layers[0].spatial_shape
        for i, f in enumerate(self.layers):
            if f.spatial_shape != shape:
                raise ValueError(f"layer {i + 1} has spatial shape {f.spatial_shape}, expected {shape}")
            if i > 0 and f.c_in != self.layers[i - 1].c_out:
                raise ValueError(
                    f"layer {i + 1} expects {f.c_in} input channels, previous layer gives "
                    f"{self.layers[i - 1].c_out}"
                )
        if self.pooling.spatial_shape != shape:
            raise ValueError(f"pooling filter shape {self.pooling.spatial_shape} does not match {shape}")

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.layers[0].spatial_shape

    @property
    def dims(self) -> int:
        return len(self.spatial_shape)

    @property
    def num_pixels(self) -> int:
        return num_pixels(self.spatial_shape)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].c_in] + [f.c_out for f in self.layers]

    def layer_norms(self) -> np.ndarray:
        """Per-layer ``||W_l||_F^2 + ||b_l||^2`` (matrix form)."""
        N = self.num_pixels
        return np.array([N * np.sum(f.w ** 2) + np.sum(f.b ** 2) for f in self.layers])

    def weight_norms(self) -> np.ndarray:
        """Per-layer ``||W_l||_F^2`` without biases."""
        N = self.num_pixels
        return np.array([N * np.sum(f.w ** 2) for f in self.layers])

    def bias_norms(self) -> np.ndarray:
        return np.array([np.sum(f.b ** 2) for f in self.layers])

    def norm_sq(self) -> float:
        return float(self.layer_norms().sum())

    def num_params(self) -> int:
        return sum(f.w.size + f.b.size for f in self.layers)

    def copy(self) -> "NetworkParams":
        return NetworkParams([f.copy() for f in self.layers], self.pooling)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([f.w.ravel(), f.b]) for f in self.layers])

    def unflatten(self, vec: np.ndarray) -> "NetworkParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params(),):
            raise ValueError(f"expected {self.num_params()} parameters, got {vec.shape}")
        out, pos = [], 0
        for f in self.layers:
            w = vec[pos:pos + f.w.size].reshape(f.w.shape)
            pos += f.w.size
            b = vec[pos:pos + f.b.size]
            pos += f.b.size
            out.append(ConvFilter(w.copy(), b.copy()))
        return NetworkParams(out, self.pooling)

    def with_pooling(self, pooling: PoolingSpec) -> "NetworkParams":
        return NetworkParams([f.copy() for f in self.layers], pooling)


def init_params(n, widths: Sequence[int], pooling: PoolingSpec | None = None,
                scale: float = 1.0, seed: int = 0) -> NetworkParams:
    """Gaussian filters with std ``scale / sqrt(N c_in)`` and zero biases."""
    shape = as_shape(n)
    if len(widths) < 2:
        raise ValueError("widths must list c_0..c_L with L >= 1")
    if pooling is None:
        pooling = pooling_operator("identity", n=shape)
    rng = np.random.default_rng(seed)
    N = num_pixels(shape)
    layers = []
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        w = rng.standard_normal(shape + (c_out, c_in)) * (scale / np.sqrt(N * c_in))
        layers.append(ConvFilter(w, np.zeros(c_out)))
    return NetworkParams(layers, pooling)


# ---------------------------------------------------------------------------
# Fourier-domain helpers (real FFT over the spatial axes)
# ---------------------------------------------------------------------------


def _rfft(x: np.ndarray, dims: int) -> np.ndarray:
    return np.fft.rfftn(x, axes=signal_axes(dims))


def _irfft(X: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.fft.irfftn(X, s=shape, axes=signal_axes(len(shape)))


def _half_blocks(f: ConvFilter) -> np.ndarray:
    """Frequency blocks on the real-FFT half grid, shape ``(*half, c_out, c_in)``."""
    axes = tuple(range(f.dims))
    return np.conj(np.fft.rfftn(f.w, axes=axes))


def _half_pool(pooling: PoolingSpec) -> np.ndarray:
    return np.conj(np.fft.rfftn(pooling.m))[..., None]


def _apply_pool(pooling: PoolingSpec, x: np.ndarray, adjoint: bool = False) -> np.ndarray:
    if pooling.is_identity:
        return x
    dims = pooling.dims
    mh = _half_pool(pooling)
    if adjoint:
        mh = np.conj(mh)
    return _irfft(mh * _rfft(x, dims), pooling.spatial_shape)


def apply_pooling(pooling: PoolingSpec, x: np.ndarray) -> np.ndarray:
    """Apply ``M`` channel-wise to ``x`` of shape ``(..., *spatial, c)``."""
    return _apply_pool(pooling, np.asarray(x, dtype=np.float64))


def _apply_filter(f: ConvFilter, x: np.ndarray, adjoint: bool = False) -> np.ndarray:
    B = _half_blocks(f)
    if adjoint:
        B = np.conj(np.swapaxes(B, -1, -2))
    X = _rfft(x, f.dims)
    return _irfft((B @ X[..., None])[..., 0], f.spatial_shape)


def _filter_grad(g: np.ndarray, x: np.ndarray, dims: int, shape: tuple[int, ...]) -> np.ndarray:
    """``sum_batch (g_k * x_s)``: the gradient of ``<g, w (*) x>`` in ``w``."""
    G = _rfft(g, dims)
    X = _rfft(x, dims)
    Gf = np.conj(G)[..., :, None] * X[..., None, :]
    if Gf.ndim > dims + 2:
        Gf = Gf.reshape((-1,) + Gf.shape[-dims - 2:]).sum(axis=0)
    return np.fft.irfftn(Gf, s=shape, axes=tuple(range(dims)))


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    activations: list[np.ndarray]  # alpha_0 .. alpha_L
    pre_activations: list[np.ndarray]  # pre_1 .. pre_L (before pooling)
    pooled: list[np.ndarray]  # M pre_l for hidden layers
    masks: list[np.ndarray]  # ReLU derivative (0/1) for hidden layers

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]

    def min_kink_distance(self) -> float:
        if not self.pooled:
            return np.inf
        return float(min(np.min(np.abs(z)) for z in self.pooled))


def _check_input(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = params.spatial_shape + (params.widths[0],)
    if x.shape[-len(want):] != want:
        raise ValueError(f"input shape {x.shape} does not end with {want}")
    return x


def forward(params: NetworkParams, x: np.ndarray) -> ForwardTrace:
    """Evaluate the network on ``x`` of shape ``(..., *spatial, c_0)``."""
    x = _check_input(params, x)
    acts, pres, pooled, masks = [x], [], [], []
    a = x
    L = params.depth
    for ell, f in enumerate(params.layers, start=1):
        pre = _apply_filter(f, a) + f.b
        pres.append(pre)
        if ell < L:
            z = _apply_pool(params.pooling, pre)
            pooled.append(z)
            mask = (z > 0).astype(np.float64)
            masks.append(mask)
            a = z * mask
        else:
            a = pre
        acts.append(a)
    return ForwardTrace(acts, pres, pooled, masks)


def predict(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    return forward(params, x).output


def backprop(params: NetworkParams, trace: ForwardTrace, g_out: np.ndarray,
             need_input: bool = False):
    """Vector-Jacobian product of the output cotangent ``g_out``.

    Returns ``(grads, g_in)`` where ``grads`` is a list of ``(dw, db)`` and
    ``g_in`` the cotangent of the input (or ``None``).
    """
    L = params.depth
    dims = params.dims
    shape = params.spatial_shape
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * L  # type: ignore[list-item]
    g = np.asarray(g_out, dtype=np.float64)
    for ell in range(L, 0, -1):
        f = params.layers[ell - 1]
        if ell < L:
            g = _apply_pool(params.pooling, g * trace.masks[ell - 1], adjoint=True)
        a_prev = trace.activations[ell - 1]
        dw = _filter_grad(g, a_prev, dims, shape)
        db = g.reshape(-1, f.c_out).sum(axis=0)
        grads[ell - 1] = (dw, db)
        if ell > 1 or need_input:
            g = _apply_filter(f, g, adjoint=True)
    return grads, (g if need_input else None)


# ---------------------------------------------------------------------------
# Losses and training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lam: float = 1e-3
    lr: float = 1e-2
    steps: int = 1000
    optimizer: str = "gd"  # "gd" or "momentum"
    momentum: float = 0.9
    seed: int = 0
    init_scale: float = 1.0
    loss: str = "mse"  # "mse" or "softmax_xent"
    log_every: int = 0
    lr_decay: float = 1.0  # multiplicative factor applied at every step
    max_loss: float = 1e12

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("gd", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("mse", "softmax_xent"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")


def global_average(out: np.ndarray, dims: int) -> np.ndarray:
    """Mean over the spatial axes: the constant-frequency readout."""
    return out.mean(axis=signal_axes(dims))


def data_loss(output: np.ndarray, target: np.ndarray, kind: str, dims: int):
    """Return ``(loss, d loss / d output)`` averaged over the batch axis."""
    B = output.shape[0]
    if kind == "mse":
        diff = output - target
        return float(np.sum(diff ** 2) / B), 2.0 * diff / B
    if kind == "softmax_xent":
        logits = global_average(output, dims)
        labels = np.asarray(target, dtype=int).reshape(-1)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -float(np.mean(logp[np.arange(B), labels]))
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        g_logits = p / B
        N = num_pixels(output.shape[1:1 + dims])
        g = np.broadcast_to(g_logits.reshape((B,) + (1,) * dims + (-1,)) / N, output.shape)
        return loss, np.array(g)
    raise ValueError(f"unknown loss {kind!r}")


def loss_and_gradients(params: NetworkParams, inputs: np.ndarray, targets: np.ndarray,
                       lam: float = 0.0, loss: str = "mse"):
    """Objective ``data_loss + lam ||theta||^2`` and its gradient.

    ``inputs`` is batched, shape ``(B, *spatial, c_0)``.  Returns
    ``(total, data, grads)`` with ``grads`` a :class:`NetworkParams`-shaped
    list of ``ConvFilter``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != params.dims + 2 or inputs.shape[0] == 0:
        raise ValueError("inputs must be a nonempty batch of signals")
    trace = forward(params, inputs)
    dl, g_out = data_loss(trace.output, targets, loss, params.dims)
    raw, _ = backprop(params, trace, g_out)
    N = params.num_pixels
    grads = []
    for f, (dw, db) in zip(params.layers, raw):
        grads.append(ConvFilter(dw + 2.0 * lam * N * f.w, db + 2.0 * lam * f.b))
    total = dl + lam * params.norm_sq()
    if not np.isfinite(total):
        raise TrainingDiverged(f"non-finite objective (data loss {dl}, norm {params.norm_sq()})")
    return total, dl, grads


@dataclass
class History:
    step: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    data_loss: list[float] = field(default_factory=list)
    norm_sq: list[float] = field(default_factory=list)
    layer_norms: list[np.ndarray] = field(default_factory=list)

    def record(self, step, total, dl, params: NetworkParams):
        self.step.append(int(step))
        self.loss.append(float(total))
        self.data_loss.append(float(dl))
        self.norm_sq.append(params.norm_sq())
        self.layer_norms.append(params.layer_norms())

    def to_csv(self) -> str:
        L = len(self.layer_norms[0]) if self.layer_norms else 0
        head = ["step", "loss", "data_loss", "norm_sq"] + [f"layer_norm_{i + 1}" for i in range(L)]
        lines = [",".join(head)]
        for i in range(len(self.step)):
            row = [str(self.step[i]), repr(self.loss[i]), repr(self.data_loss[i]), repr(self.norm_sq[i])]
            row += [repr(float(v)) for v in self.layer_norms[i]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def train(params: NetworkParams, inputs: np.ndarray, targets: np.ndarray,
          config: TrainConfig, callback: Callable | None = None):
    """Full-batch (heavy-ball) gradient descent on ``loss + lam ||theta||^2``.

    Returns ``(trained params, History)``.  The input params are not modified.
    """
    params = params.copy()
    hist = History()
    vel = [ConvFilter(np.zeros_like(f.w), np.zeros_like(f.b)) for f in params.layers]
    lr = config.lr
    every = config.log_every or max(1, config.steps // 100)
    mu = config.momentum if config.optimizer == "momentum" else 0.0
    total = dl = np.nan
    for step in range(config.steps + 1):
        total, dl, grads = loss_and_gradients(params, inputs, targets, config.lam, config.loss)
        if total > config.max_loss:
            raise TrainingDiverged(f"objective {total:.3e} exceeded {config.max_loss:.1e} at step {step}")
        if step % every == 0 or step == config.steps:
            hist.record(step, total, dl, params)
            if callback is not None:
                callback(step, params, total, dl)
        if step == config.steps:
            break
        for f, g, v in zip(params.layers, grads, vel):
            v.w = mu * v.w - lr * g.w
            v.b = mu * v.b - lr * g.b
            f.w = f.w + v.w
            f.b = f.b + v.b
        lr *= config.lr_decay
    log.debug("finished %d steps: objective %.6g, data loss %.6g", config.steps, total, dl)
    return params, hist


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------


def _single(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    x = _check_input(params, x)
    if x.ndim != params.dims + 1:
        raise ValueError("expected a single (unbatched) signal")
    return x


def pooling_matrix(pooling: PoolingSpec, c: int) -> np.ndarray:
    """Dense ``M`` acting on vec of a ``c``-channel signal."""
    return te_matrix(pooling.as_filter(c)).dense


def layer_factors(params: NetworkParams, x: np.ndarray, trace: ForwardTrace | None = None):
    """Dense per-layer factors ``(W_l, M, D_l)`` at ``x``.

    ``D_l`` is returned as a 0/1 vector (diagonal); the last layer has no
    ``M`` or ``D``.
    """
    x = _single(params, x)
    trace = forward(params, x) if trace is None else trace
    out = []
    for ell, f in enumerate(params.layers, start=1):
        W = te_matrix(f).dense
        if ell < params.depth:
            out.append((W, pooling_matrix(params.pooling, f.c_out), trace.masks[ell - 1].ravel()))
        else:
            out.append((W, None, None))
    return out


def input_jacobian(params: NetworkParams, x: np.ndarray, check_kink: bool = False,
                   eps_kink: float = EPS_KINK) -> np.ndarray:
    """Dense ``J f(x) = W_L D_{L-1} M W_{L-1} ... D_1 M W_1``."""
    x = _single(params, x)
    trace = forward(params, x)
    if check_kink and trace.min_kink_distance() < eps_kink:
        raise ValueError(f"input lies within {eps_kink} of a ReLU kink")
    J = None
    for W, M, d in layer_factors(params, x, trace):
        J = W if J is None else W @ J
        if M is not None:
            J = d[:, None] * (M @ J)
    return J


def jacobian_from_layer(params: NetworkParams, x: np.ndarray, ell: int,
                        trace: ForwardTrace | None = None) -> np.ndarray:
    """Jacobian of the output with respect to the pre-activation ``pre_ell``."""
    x = _single(params, x)
    trace = forward(params, x) if trace is None else trace
    factors = layer_factors(params, x, trace)
    c = params.layers[ell - 1].c_out
    J = np.eye(params.num_pixels * c)
    if ell < params.depth:
        _, M, d = factors[ell - 1]
        J = d[:, None] * M
    for W, M, d in factors[ell:]:
        J = W @ J
        if M is not None:
            J = d[:, None] * (M @ J)
    return J


def jacobian_to_layer(params: NetworkParams, x: np.ndarray, ell: int,
                      trace: ForwardTrace | None = None) -> np.ndarray:
    """Jacobian of ``alpha_ell`` with respect to the input (``ell = 0`` is the identity)."""
    x = _single(params, x)
    trace = forward(params, x) if trace is None else trace
    J = np.eye(x.size)
    for W, M, d in layer_factors(params, x, trace)[:ell]:
        J = W @ J
        if M is not None:
            J = d[:, None] * (M @ J)
    return J


def input_jacobian_pooled_out(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """``M^{L-1} W_L D_{L-1} W_{L-1} ... D_1 W_1``.

    Equals :func:`input_jacobian` whenever ``x`` is constant along channels,
    because the masks are then constant per channel and commute with ``M``.
    """
    x = _single(params, x)
    trace = forward(params, x)
    J = None
    for W, M, d in layer_factors(params, x, trace):
        J = W if J is None else W @ J
        if d is not None:
            J = d[:, None] * J
    c_L = params.widths[-1]
    Mmat = pooling_matrix(params.pooling, c_L)
    return np.linalg.matrix_power(Mmat, params.depth - 1) @ J


def ntk_trace(params: NetworkParams, x: np.ndarray) -> float:
    """``sum_l (||alpha_{l-1}||^2 + 1) ||J(pre_l -> f)||_F^2``.

    This is the squared Frobenius norm of the Jacobian of the output with
    respect to the dense matrices ``W_l`` and pixel-wise biases.
    """
    x = _single(params, x)
    trace = forward(params, x)
    total = 0.0
    for ell in range(1, params.depth + 1):
        a = trace.activations[ell - 1]
        J = jacobian_from_layer(params, x, ell, trace)
        total += (float(np.sum(a ** 2)) + 1.0) * float(np.sum(J ** 2))
    return total


def ntk_trace_filters(params: NetworkParams, x: np.ndarray) -> float:
    """Squared Frobenius norm of the Jacobian with respect to the filters and biases."""
    x = _single(params, x)
    out_size = int(np.prod(x.shape[:-1])) * params.widths[-1]
    batch = forward(params, np.broadcast_to(x, (out_size,) + x.shape).copy())
    eye = np.eye(out_size).reshape((out_size,) + batch.output.shape[1:])
    total = 0.0
    for r in range(out_size):
        sub = ForwardTrace([a[r] for a in batch.activations], [p[r] for p in batch.pre_activations],
                           [z[r] for z in batch.pooled], [m[r] for m in batch.masks])
        g, _ = backprop(params, sub, eye[r])
        total += sum(float(np.sum(dw ** 2) + np.sum(db ** 2)) for dw, db in g)
    return total


# ---------------------------------------------------------------------------
# Balancedness
# ---------------------------------------------------------------------------


def balancedness_residuals(params: NetworkParams) -> np.ndarray:
    """``||W_l||^2 + ||b_l||^2 - ||W_{l+1}||^2`` for ``l = 1..L-1`` (matrix form)."""
    if params.depth < 2:
        raise ValueError("balancedness needs at least two layers")
    full = params.layer_norms()
    wn = params.weight_norms()
    return full[:-1] - wn[1:]


def rebalance(params: NetworkParams, iters: int = 200, tol: float = 1e-13) -> NetworkParams:
    """Function-preserving positive rescaling towards balanced layers.

    Scaling the incoming filters and bias of hidden channel ``k`` of layer
    ``l`` by ``a > 0`` and its outgoing filters by ``1/a`` leaves the network
    function unchanged (ReLU and pooling are positively homogeneous and act
    channel-wise).  ``a`` is chosen per channel to equalise incoming and
    outgoing norms, which is the stationarity condition of weight decay for
    this symmetry.  Sweeps are repeated until the changes are negligible.
    """
    p = params.copy()
    N = p.num_pixels
    for _ in range(iters):
        delta = 0.0
        for ell in range(p.depth - 1):
            f, g = p.layers[ell], p.layers[ell + 1]
            inc = N * np.sum(f.w ** 2, axis=tuple(range(f.dims)) + (f.dims + 1,)) + f.b ** 2
            out = N * np.sum(g.w ** 2, axis=tuple(range(g.dims)) + (g.dims,))
            ok = (inc > 0) & (out > 0)
            a = np.ones_like(inc)
            a[ok] = (out[ok] / inc[ok]) ** 0.25
            delta = max(delta, float(np.max(np.abs(a - 1.0))))
            f.w = f.w * a[:, None]
            f.b = f.b * a
            g.w = g.w / a[None, :]
        if delta < tol:
            break
    return p


def channel_balance_residuals(params: NetworkParams) -> np.ndarray:
    """Per-channel incoming minus outgoing norm, concatenated over hidden layers."""
    N = params.num_pixels
    res = []
    for ell in range(params.depth - 1):
        f, g = params.layers[ell], params.layers[ell + 1]
        inc = N * np.sum(f.w ** 2, axis=tuple(range(f.dims)) + (f.dims + 1,)) + f.b ** 2
        out = N * np.sum(g.w ** 2, axis=tuple(range(g.dims)) + (g.dims,))
        res.append(inc - out)
    return np.concatenate(res) if res else np.zeros(0)


def replace_layer(params: NetworkParams, ell: int, f: ConvFilter) -> NetworkParams:
    layers = [g.copy() for g in params.layers]
    layers[ell - 1] = f
    return replace(params, layers=layers)


def is_constant_input(x: np.ndarray, atol: float = 0.0) -> bool:
    """Membership in the constant-along-channels set."""
    flat = np.asarray(x).reshape(-1, np.asarray(x).shape[-1])
    return bool(np.all(np.abs(flat - flat[:1]) <= atol))


@dataclass
class ConstantJacobian:
    """Per-frequency blocks of the Jacobians at a channel-constant input.

    ``full[t]`` is the block of ``Jf(x)``; ``to_layer[l][t]`` the block of
    ``J alpha_l(x)`` (``l = 0..L-1``); ``from_layer[l][t]`` the block of
    ``J(pre_l -> f)(x)`` (``l = 1..L``, stored at index ``l - 1``).
    Frequencies are flattened in storage order.
    """

    full: np.ndarray
    to_layer: list[np.ndarray]
    from_layer: list[np.ndarray]
    channel_masks: list[np.ndarray]


def constant_jacobian_blocks(params: NetworkParams, x: np.ndarray) -> ConstantJacobian:
    """Exact per-frequency Jacobian blocks at a channel-constant ``x``.

    At such inputs every mask ``D_l`` is constant along each channel, so the
    Jacobian is translationally equivariant and factorises frequency by
    frequency as ``B_{L,t} d_{L-1} m_t B_{L-1,t} ... d_1 m_t B_{1,t}``.
    """
    x = _single(params, x)
    if not is_constant_input(x):
        raise ValueError("input is not constant along every channel")
    trace = forward(params, x)
    N = params.num_pixels
    mt = params.pooling.m_tilde.reshape(N)[:, None, None]
    blocks = []
    for f in params.layers:
        blocks.append(frequency_blocks(f).reshape((N,) + f.w.shape[-2:]))
    dvec = [m.reshape(-1, m.shape[-1])[0] for m in trace.masks]
    L = params.depth
    to_layer = [np.broadcast_to(np.eye(params.widths[0], dtype=complex), (N,) + (params.widths[0],) * 2)]
    A = to_layer[0]
    for ell in range(1, L + 1):
        A = blocks[ell - 1] @ A
        if ell < L:
            A = dvec[ell - 1][None, :, None] * (mt * A)
            to_layer.append(A)
    full = A
    from_layer: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    C = np.broadcast_to(np.eye(params.widths[-1], dtype=complex), (N,) + (params.widths[-1],) * 2)
    from_layer[L - 1] = C
    for ell in range(L - 1, 0, -1):
        C = C @ blocks[ell]  # W_{ell+1}
        C = mt * (C * dvec[ell - 1][None, None, :])
        from_layer[ell - 1] = C
    return ConstantJacobian(full, to_layer, from_layer, dvec)
