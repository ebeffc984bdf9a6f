"""Explicit networks: identity layers, sums, compositions, FC compilation, embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .bounds import FrequencySupport, cbn_upper_bound
from .cnn_core import NetworkParams, predict
from .te_linalg import (
    ConvFilter,
    PoolingSpec,
    as_shape,
    eigenvalues_to_filter,
    frequency_blocks,
    filter_from_blocks,
    num_pixels,
    pooling_operator,
)


def _delta(shape: tuple[int, ...]) -> np.ndarray:
    d = np.zeros(shape)
    d[(0,) * len(shape)] = 1.0
    return d


def channelwise_filter(kernel: np.ndarray, c: int, b: np.ndarray | None = None) -> ConvFilter:
    """``w_{:,k,s} = kernel * 1[k = s]``."""
    kernel = np.asarray(kernel, dtype=np.float64)
    w = np.zeros(kernel.shape + (c, c))
    for k in range(c):
        w[..., k, k] = kernel
    return ConvFilter(w, b)


# ---------------------------------------------------------------------------
# Identity layers
# ---------------------------------------------------------------------------


@dataclass
class IdentityAccounting:
    """Closed-form norms of :func:`identity_network`."""

    hidden_weight: float  # layers 1..depth-1
    readout_weight: float  # last layer
    bias: float

    @property
    def weight(self) -> float:
        return self.hidden_weight + self.readout_weight

    @property
    def total(self) -> float:
        return self.weight + self.bias


def balanced_split(pooling: PoolingSpec) -> np.ndarray:
    """Positive gains ``a_t`` with ``sum a_t^2 |m_t|^-2 = sum a_t^-2 = Mbar``.

    Used to spread the last inverse pooling factor over two layers so that
    both carry weight norm ``Mbar`` per channel.  The gains have the form
    ``kappa |m_t|^{2s}`` with ``s <= 0``; Cauchy-Schwarz guarantees a root.
    """
    a = pooling.m_tilde_abs
    mbar = pooling.m_bar
    if np.allclose(a, 1.0):
        return np.ones_like(a)
    la = np.log(a)

    def gap(s):
        f1 = np.sum(np.exp((2 * s - 2) * la))
        f2 = np.sum(np.exp(-2 * s * la))
        return math.log(f1) + math.log(f2) - 2 * math.log(mbar)

    lo = -1.0
    while gap(lo) < 0:
        lo *= 2
    s = brentq(gap, lo, 0.0, xtol=1e-15) if gap(0.0) < 0 else 0.0
    kappa = mbar / np.sum(np.exp((2 * s - 2) * la))
    return np.sqrt(kappa * np.exp(2 * s * la))


def _identity_parts(shape, pooling: PoolingSpec, depth: int, K: float, readout: str):
    """Kernels and scalar biases of the identity construction."""
    minv = pooling.inverse_filter()
    m0 = pooling.dc_gain
    if readout == "impulse":
        kernels = [minv] * (depth - 1) + [_delta(shape)]
        biases = [K / m0] + [0.0] * (depth - 2) + [-float(K)]
        return kernels, biases
    a = balanced_split(pooling)
    pen = eigenvalues_to_filter(a / pooling.m_tilde).real  # eigenvalues a_t / m_t
    last = eigenvalues_to_filter(1.0 / a).real
    h = eigenvalues_to_filter(a).real  # M * pen
    a0 = float(a.reshape(-1)[0])
    K2 = K * float(np.sum(np.abs(h)))  # |h * x| <= K2 on the domain
    kernels = [minv] * (depth - 2) + [pen, last]
    if depth == 2:
        biases = [K2 / m0, -K2 / a0]
    else:
        biases = [K / m0] + [0.0] * (depth - 3) + [(K2 - a0 * K) / m0, -K2 / a0]
    return kernels, biases


def identity_network(n, c: int, depth: int, pooling: PoolingSpec | None = None,
                     K: float = 1.0, readout: str = "balanced") -> NetworkParams:
    """Network equal to the identity on signals with entries in ``[-K, K]``.

    Layers use the inverse pooling filter on every channel, each contributing
    ``c * Mbar`` to the weight norm, with the first bias shifting activations
    to be nonnegative.  Since the readout is not followed by pooling, one
    inverse factor must be absorbed elsewhere: ``readout="balanced"`` spreads
    it over the last two layers so that every layer has weight norm exactly
    ``c * Mbar``; ``readout="impulse"`` keeps ``m^{-1}`` up to layer
    ``depth - 1`` and reads out with the impulse filter (weight ``c N``).
    Depth 1 is the impulse filter.
    """
    shape = as_shape(n)
    if pooling is None:
        pooling = pooling_operator("identity", n=shape)
    if pooling.spatial_shape != shape:
        raise ValueError("pooling filter size does not match n")
    if depth < 1 or c < 1:
        raise ValueError("depth and c must be positive")
    if readout not in ("balanced", "impulse"):
        raise ValueError(f"unknown readout {readout!r}")
    if depth == 1:
        return NetworkParams([channelwise_filter(_delta(shape), c)], pooling)
    if not pooling.invertible:
        raise ValueError("identity layers need an invertible pooling filter")
    kernels, biases = _identity_parts(shape, pooling, depth, K, readout)
    layers = [channelwise_filter(k, c, np.full(c, float(b))) for k, b in zip(kernels, biases)]
    return NetworkParams(layers, pooling)


def identity_accounting(n, c: int, depth: int, pooling: PoolingSpec, K: float = 1.0,
                        readout: str = "balanced") -> IdentityAccounting:
    N = num_pixels(as_shape(n))
    if depth == 1:
        return IdentityAccounting(0.0, c * N, 0.0)
    _, biases = _identity_parts(as_shape(n), pooling, depth, K, readout)
    bias = c * float(np.sum(np.square(biases)))
    if readout == "impulse":
        return IdentityAccounting((depth - 1) * c * pooling.m_bar, c * N, bias)
    return IdentityAccounting((depth - 1) * c * pooling.m_bar, c * pooling.m_bar, bias)


# ---------------------------------------------------------------------------
# Parallel sums and compositions
# ---------------------------------------------------------------------------


def _check_compatible(a: NetworkParams, b: NetworkParams):
    if a.spatial_shape != b.spatial_shape:
        raise ValueError(f"spatial shapes differ: {a.spatial_shape} vs {b.spatial_shape}")
    if not np.array_equal(a.pooling.m, b.pooling.m):
        raise ValueError("networks use different pooling filters")


def parallel_sum(a: NetworkParams, b: NetworkParams) -> NetworkParams:
    """Network computing ``f_a + f_b`` with block-disjoint hidden channels.

    Weight norms add exactly; the two readout biases are summed, so the total
    norm changes by ``2 <b_a, b_b>`` for the last layer.
    """
    _check_compatible(a, b)
    if a.depth != b.depth:
        raise ValueError(f"depths differ: {a.depth} vs {b.depth}")
    if a.widths[0] != b.widths[0] or a.widths[-1] != b.widths[-1]:
        raise ValueError("input/output channel counts differ")
    L = a.depth
    if L == 1:
        fa, fb = a.layers[0], b.layers[0]
        return NetworkParams([ConvFilter(fa.w + fb.w, fa.b + fb.b)], a.pooling)
    layers = []
    for ell, (fa, fb) in enumerate(zip(a.layers, b.layers), start=1):
        if ell == 1:
            w = np.concatenate([fa.w, fb.w], axis=-2)
            bias = np.concatenate([fa.b, fb.b])
        elif ell == L:
            w = np.concatenate([fa.w, fb.w], axis=-1)
            bias = fa.b + fb.b
        else:
            shape = fa.spatial_shape
            w = np.zeros(shape + (fa.c_out + fb.c_out, fa.c_in + fb.c_in))
            w[..., :fa.c_out, :fa.c_in] = fa.w
            w[..., fa.c_out:, fa.c_in:] = fb.w
            bias = np.concatenate([fa.b, fb.b])
        layers.append(ConvFilter(w, bias))
    return NetworkParams(layers, a.pooling)


def parallel_sum_norm(a: NetworkParams, b: NetworkParams) -> float:
    """Closed-form ``||theta||^2`` of :func:`parallel_sum` (for depth >= 2)."""
    ba, bb = a.layers[-1].b, b.layers[-1].b
    return a.norm_sq() + b.norm_sq() - ba @ ba - bb @ bb + (ba + bb) @ (ba + bb)


def _dc_block(f: ConvFilter) -> np.ndarray:
    """Block at the constant frequency: ``sum_j w_j``."""
    return f.w.reshape((-1,) + f.w.shape[-2:]).sum(axis=0)


def compose(first: NetworkParams, second: NetworkParams, K: float | None = None) -> NetworkParams:
    """Network computing ``second(first(x))``.

    With ``K=None`` the linear readout of ``first`` is merged with the first
    layer of ``second`` (depth ``L1 + L2 - 1``).  With a bound ``K`` on the
    entries of ``first``'s output, the readout becomes a hidden layer with
    filter ``m^{-1} * w`` and a shift ``K`` that the first layer of
    ``second`` removes again (depth ``L1 + L2``).
    """
    _check_compatible(first, second)
    if first.widths[-1] != second.widths[0]:
        raise ValueError(f"first outputs {first.widths[-1]} channels, second expects {second.widths[0]}")
    pool = first.pooling
    head = [f.copy() for f in first.layers[:-1]]
    tail = [f.copy() for f in second.layers[1:]]
    last, nxt = first.layers[-1], second.layers[0]
    if K is None:
        blocks = frequency_blocks(nxt) @ frequency_blocks(last)
        bias = _dc_block(nxt) @ last.b + nxt.b
        merged = filter_from_blocks(blocks, bias)
        return NetworkParams(head + [merged] + tail, pool)
    if not pool.invertible:
        raise ValueError("shifted composition needs an invertible pooling filter")
    hidden = pooled_inverse(last, pool, (last.b + K) / pool.dc_gain)
    shifted = ConvFilter(nxt.w.copy(), nxt.b - K * _dc_block(nxt) @ np.ones(nxt.c_in))
    return NetworkParams(head + [hidden, shifted] + tail, pool)


def pooled_inverse(f: ConvFilter, pool: PoolingSpec, bias: np.ndarray | None = None) -> ConvFilter:
    """Filter of ``M^{-1} W``."""
    mt = pool.m_tilde[..., None, None]
    return filter_from_blocks(frequency_blocks(f) / mt, bias)


# ---------------------------------------------------------------------------
# Bottleneck witness
# ---------------------------------------------------------------------------


def support_projection_filter(support: FrequencySupport, pool: PoolingSpec) -> ConvFilter:
    """Channel-wise filter with eigenvalues ``m_t^{-1}`` on ``I_c`` and zero elsewhere."""
    shape = support.spatial_shape
    k = support.k
    blocks = np.zeros(shape + (k, k), dtype=complex)
    for c, fs in enumerate(support.channels):
        for t in fs:
            idx = tuple(v - 1 for v in t)
            blocks[idx + (c, c)] = 1.0 / pool.m_tilde[idx]
    return filter_from_blocks(blocks)


@dataclass
class Witness:
    params: NetworkParams
    g_part: NetworkParams  # modified encoder layers (its last layer is hidden)
    h_part: NetworkParams  # modified decoder layers (first bias compensated)
    mid_depth: int
    cbn: float

    @property
    def accounting_gap(self) -> float:
        """``||theta||^2 - ||theta_g||^2 - ||theta_h||^2 - mid * Rank_CBN`` (zero up to rounding)."""
        return self.params.norm_sq() - self.g_part.norm_sq() - self.h_part.norm_sq() - self.mid_depth * self.cbn


def bottleneck_witness(g: NetworkParams, h: NetworkParams, support: FrequencySupport,
                       mid_depth: int, K: float) -> Witness:
    """Network ``h o g`` with ``mid_depth`` support-restricted identity layers in between.

    ``support`` must contain the frequencies of every channel of ``g(x) + K``
    on the domain (the constant frequency included) and be closed under
    conjugation; ``K`` bounds the entries of ``g``.  Each middle layer costs
    exactly ``cbn_upper_bound(support)``.
    """
    _check_compatible(g, h)
    pool = g.pooling
    if g.widths[-1] != support.k or h.widths[0] != support.k:
        raise ValueError("support channel count must match the bottleneck width")
    if not pool.invertible:
        raise ValueError("the witness needs an invertible pooling filter")
    last = g.layers[-1]
    g_layers = [f.copy() for f in g.layers[:-1]] + [pooled_inverse(last, pool, (last.b + K) / pool.dc_gain)]
    nxt = h.layers[0]
    h_layers = [ConvFilter(nxt.w.copy(), nxt.b - K * _dc_block(nxt) @ np.ones(nxt.c_in))]
    h_layers += [f.copy() for f in h.layers[1:]]
    mid = [support_projection_filter(support, pool) for _ in range(mid_depth)]
    params = NetworkParams(g_layers + mid + h_layers, pool)
    return Witness(params, NetworkParams(g_layers, pool), NetworkParams(h_layers, pool),
                   mid_depth, cbn_upper_bound(support, pool))


# ---------------------------------------------------------------------------
# Fully-connected networks compiled into CNNs
# ---------------------------------------------------------------------------


@dataclass
class FCNetwork:
    """ReLU MLP ``A_L(... ReLU(A_1 v + d_1) ...) + d_L`` acting on ``vec(x)``."""

    matrices: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.matrices) != len(self.biases) or not self.matrices:
            raise ValueError("need one bias per matrix and at least one layer")
        self.matrices = [np.asarray(A, dtype=np.float64) for A in self.matrices]
        self.biases = [np.asarray(d, dtype=np.float64).reshape(-1) for d in self.biases]
        for i, (A, d) in enumerate(zip(self.matrices, self.biases)):
            if A.shape[0] != d.shape[0]:
                raise ValueError(f"layer {i + 1}: bias length {d.shape[0]} vs {A.shape[0]} rows")
            if i > 0 and A.shape[1] != self.matrices[i - 1].shape[0]:
                raise ValueError(f"layer {i + 1} expects {A.shape[1]} inputs, got {self.matrices[i - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.matrices[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.matrices[-1].shape[0]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        a = np.asarray(v, dtype=np.float64)
        L = len(self.matrices)
        for i, (A, d) in enumerate(zip(self.matrices, self.biases)):
            a = a @ A.T + d
            if i < L - 1:
                a = np.maximum(a, 0.0)
        return a

    @classmethod
    def random(cls, widths: Sequence[int], seed: int = 0, scale: float = 1.0) -> "FCNetwork":
        rng = np.random.default_rng(seed)
        mats, bs = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            mats.append(rng.standard_normal((b, a)) * scale / math.sqrt(a))
            bs.append(rng.standard_normal(b) * 0.1 * scale)
        return cls(mats, bs)


def shift_stack_filter(shape: tuple[int, ...], c_in: int) -> ConvFilter:
    """Filter whose output at pixel ``p`` is ``vec(T_{-p} x)``.

    Output channel ``q * c_in + s`` (``q`` a flattened pixel index) reads
    ``x_{p+q, s}``.
    """
    N = num_pixels(shape)
    w = np.zeros(shape + (N * c_in, c_in))
    for q, idx in enumerate(np.ndindex(*shape)):
        for s in range(c_in):
            w[idx + (q * c_in + s, s)] = 1.0
    return ConvFilter(w)


def fc_to_cnn(fc: FCNetwork, n, c_in: int) -> NetworkParams:
    """No-pooling CNN with output ``fc(vec(T_{-p} x))`` at pixel ``p`` (positive inputs)."""
    shape = as_shape(n)
    N = num_pixels(shape)
    if fc.in_dim != N * c_in:
        raise ValueError(f"fc expects {fc.in_dim} inputs, signals have {N * c_in}")
    d0 = _delta(shape)
    layers = [shift_stack_filter(shape, c_in)]
    for A, d in zip(fc.matrices, fc.biases):
        layers.append(ConvFilter(d0[..., None, None] * A, d))
    return NetworkParams(layers, pooling_operator("identity", n=shape))


def check_positive(x: np.ndarray) -> None:
    """Reject inputs the shift layer would clip."""
    lo = float(np.min(x))
    if lo <= 0:
        raise ValueError(f"inputs must be positive (min {lo:.3g}); shift the domain by at least {-lo + 1e-6:.3g}")


def fc_reference(fc: FCNetwork, x: np.ndarray) -> np.ndarray:
    """``out[p] = fc(vec(T_{-p} x))`` by brute force over all translations."""
    shape = x.shape[:-1]
    out = np.zeros(shape + (fc.out_dim,))
    for idx in np.ndindex(*shape):
        out[idx] = fc(np.roll(x, shift=tuple(-i for i in idx), axis=tuple(range(len(shape)))).ravel())
    return out


# ---------------------------------------------------------------------------
# Translationally unique embedding
# ---------------------------------------------------------------------------


@dataclass
class Collision:
    first: int
    second: int
    shift: tuple[int, ...]


def check_translational_uniqueness(samples: np.ndarray, atol: float = 1e-12) -> Collision | None:
    """First pair ``(a, b, p)`` with ``T_p x_a = x_b`` (``p != 0`` when ``a == b``)."""
    samples = np.asarray(samples, dtype=np.float64)
    shape = samples.shape[1:-1]
    dims = len(shape)
    for p in np.ndindex(*shape):
        shifted = np.roll(samples, shift=p, axis=tuple(range(1, dims + 1)))
        flat_s = shifted.reshape(len(samples), -1)
        flat = samples.reshape(len(samples), -1)
        d = np.max(np.abs(flat_s[:, None, :] - flat[None, :, :]), axis=-1)
        if not any(p):
            np.fill_diagonal(d, np.inf)
        hits = np.argwhere(d <= atol)
        if hits.size:
            a, b = hits[0]
            return Collision(int(a), int(b), tuple(int(v) for v in p))
    return None


@dataclass
class UniqueEmbedding:
    samples: np.ndarray  # canonical representatives, (B, *spatial, c_in)
    Z: float
    eps: float
    inverse: NetworkParams
    spatial_shape: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        self.spatial_shape = self.samples.shape[1:-1]

    @property
    def c_in(self) -> int:
        return self.samples.shape[-1]

    @property
    def width(self) -> int:
        return num_pixels(self.spatial_shape) * self.c_in + 1

    def phase(self, p) -> np.ndarray:
        """``cos(2 pi (p - i) / n)`` over pixels ``i`` (first axis only in 2D)."""
        p = (p,) if isinstance(p, (int, np.integer)) else tuple(p)
        coords = np.indices(self.spatial_shape)
        ang = sum(2 * np.pi * (p[d] - coords[d]) / self.spatial_shape[d] for d in range(len(p)))
        return np.cos(ang)

    def embed(self, index: int, p) -> np.ndarray:
        """``G(T_p x)`` for sample ``index``."""
        x = self.samples[index]
        out = np.empty(self.spatial_shape + (self.width,))
        out[..., :-1] = x.ravel()
        out[..., -1] = self.phase(p)
        return out

    def locate(self, y: np.ndarray, atol: float = 1e-9) -> tuple[int, tuple[int, ...]]:
        """Find ``(index, p)`` with ``y = T_p x_index``."""
        dims = len(self.spatial_shape)
        for p in np.ndindex(*self.spatial_shape):
            back = np.roll(y, shift=tuple(-v for v in p), axis=tuple(range(dims)))
            d = np.max(np.abs(self.samples - back[None]).reshape(len(self.samples), -1), axis=1)
            hit = np.flatnonzero(d <= atol)
            if hit.size:
                return int(hit[0]), p
        raise ValueError("signal is not a translate of any sample")

    def G(self, y: np.ndarray) -> np.ndarray:
        i, p = self.locate(y)
        return self.embed(i, p)

    def G_inverse(self, z: np.ndarray) -> np.ndarray:
        return predict(self.inverse, z)


def unique_embedding(samples: np.ndarray, Z: float | None = None) -> UniqueEmbedding:
    """Low-frequency embedding of a translationally unique sample set and its 3-layer inverse.

    Only one-dimensional signals are supported.  ``Z`` bounds the (positive)
    sample entries and defaults to ``max(1, max x)``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3:
        raise ValueError("samples must have shape (B, n, c_in)")
    col = check_translational_uniqueness(samples)
    if col is not None:
        raise ValueError(f"samples are not translationally unique: T_{col.shift} x[{col.first}] == x[{col.second}]")
    check_positive(samples)
    B, n, c_in = samples.shape
    Zmax = max(1.0, float(samples.max()))
    Z = Zmax if Z is None else float(Z)
    if Z < Zmax:
        raise ValueError(f"Z={Z} is below the sample bound {Zmax}")
    if n < 2:
        raise ValueError("need n >= 2")
    eps = float(np.max(np.cos(2 * np.pi * np.arange(1, n) / n)))
    D = n * c_in
    shape = (n,)
    d0 = _delta(shape)
    # layer 1: identity, phase channel thresholded at eps
    w1 = d0[:, None, None] * np.eye(D + 1)
    b1 = np.zeros(D + 1)
    b1[D] = -eps
    # layer 2: keep vec(x) only at the pixel where the phase peaks
    A2 = np.zeros((D, D + 1))
    A2[:, :D] = np.eye(D)
    A2[:, D] = Z / (1.0 - eps)
    w2 = d0[:, None, None] * A2
    b2 = np.full(D, -Z)
    # layer 3: move entry (q, s) of the peak pixel back to pixel p + q
    w3 = np.zeros((n, c_in, D))
    for j in range(n):
        q = (-j) % n
        for s in range(c_in):
            w3[j, s, q * c_in + s] = 1.0
    net = NetworkParams([ConvFilter(w1, b1), ConvFilter(w2, b2), ConvFilter(w3)],
                        pooling_operator("identity", n=shape))
    return UniqueEmbedding(samples, Z, eps, net)


def embedding_support(emb: UniqueEmbedding, one_sided: bool = True) -> FrequencySupport:
    """Support of ``G``: ``{1}`` on the ``n c_in`` copies of ``vec(x)`` and the phase frequency.

    The phase channel is a real cosine, so it occupies the conjugate pair
    ``{2, n}``; ``one_sided`` keeps only frequency 2.
    """
    n = emb.spatial_shape[0]
    D = n * emb.c_in
    phase = {2} if one_sided else {2, n}
    return FrequencySupport([{1}] * D + [phase], emb.spatial_shape)

