"""Translationally-equivariant (block-circulant) linear algebra.

Signals are arrays of shape ``(*spatial, c)``: one or two cyclic spatial axes
followed by a channel axis.  Filters are arrays of shape
``(*spatial, c_out, c_in)``.  Vectorisation is pixel-major, i.e.
``vec(x) = x.reshape(-1)`` so that entry ``(i, k)`` sits at ``i * c + k``.

Conventions used throughout the package:

* cyclic convolution is ``(a * b)_i = sum_j a_j b_{i+j}``;
* the circulant eigenvalues of a filter ``v`` are
  ``lambda_t = sum_j v_j exp(+2 pi i t j / n)`` (unnormalised), so that the
  identity filter has all eigenvalues equal to one;
* frequencies are stored 0-based in arrays and reported 1-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

EPS_INV = 1e-9
TAU_RANK = 1e-6


def as_shape(n) -> tuple[int, ...]:
    """Normalise a spatial size (int or tuple) to a tuple."""
    if isinstance(n, (int, np.integer)):
        shape = (int(n),)
    else:
        shape = tuple(int(v) for v in n)
    if not 1 <= len(shape) <= 2 or min(shape) < 1:
        raise ValueError(f"spatial shape must have 1 or 2 positive sizes, got {n!r}")
    return shape


def num_pixels(shape: Sequence[int]) -> int:
    return int(math.prod(shape))


def signal_axes(dims: int) -> tuple[int, ...]:
    """Spatial axes of a (possibly batched) signal ``(..., *spatial, c)``."""
    return tuple(range(-dims - 1, -1))


def translate(x: np.ndarray, p, dims: int = 1) -> np.ndarray:
    """Cyclic translation ``(T_p x)_i = x_{i-p}`` along the spatial axes."""
    if np.isscalar(p):
        p = (int(p),) * dims if dims == 1 else (int(p),) + (0,) * (dims - 1)
    return np.roll(x, shift=tuple(p), axis=signal_axes(dims))


def is_channel_constant(x: np.ndarray, dims: int = 1, atol: float = 0.0) -> bool:
    """Whether ``x`` is constant along every channel (the set Omega_-)."""
    flat = np.asarray(x).reshape(-1, x.shape[-1])
    return bool(np.all(np.abs(flat - flat[:1]) <= atol))


# ---------------------------------------------------------------------------
# Circulant eigenvalues and cyclic convolution
# ---------------------------------------------------------------------------


def circulant_eigenvalues(v: np.ndarray, axes: Sequence[int] | None = None) -> np.ndarray:
    """Eigenvalues of the (nested) circulant matrix generated by ``v``.

    ``lambda_t = sum_j v_j w^{t j}`` with ``w = exp(2 pi i / n)``.  ``axes``
    selects the cyclic axes (default: all of them).
    """
    v = np.asarray(v)
    if axes is None:
        axes = tuple(range(v.ndim))
    size = num_pixels([v.shape[a] for a in axes])
    return np.fft.ifftn(v, axes=axes) * size


def eigenvalues_to_filter(lam: np.ndarray, axes: Sequence[int] | None = None) -> np.ndarray:
    """Inverse of :func:`circulant_eigenvalues` (complex output)."""
    lam = np.asarray(lam)
    if axes is None:
        axes = tuple(range(lam.ndim))
    size = num_pixels([lam.shape[a] for a in axes])
    return np.fft.fftn(lam, axes=axes) / size


def cyclic_conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cyclic convolution ``(a * b)_i = sum_j a_j b_{i+j}`` via the DFT.

    Works for 1D and 2D arrays of equal shape.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    out = np.fft.ifftn(circulant_eigenvalues(a) * np.fft.fftn(b))
    if np.isrealobj(a) and np.isrealobj(b):
        return out.real
    return out


def circulant(a: np.ndarray) -> np.ndarray:
    """Dense circulant matrix with first row ``a`` (so ``circulant(a) @ b == a * b``)."""
    a = np.asarray(a)
    n = a.shape[0]
    idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
    return a[idx]


# ---------------------------------------------------------------------------
# Filters and their matrix / Fourier representations
# ---------------------------------------------------------------------------


@dataclass
class ConvFilter:
    """Weights ``w`` of shape ``(*spatial, c_out, c_in)`` plus bias ``b`` (c_out,)."""

    w: np.ndarray
    b: np.ndarray | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim not in (3, 4):
            raise ValueError(f"filter must have shape (*spatial, c_out, c_in), got {self.w.shape}")
        if self.b is None:
            self.b = np.zeros(self.w.shape[-2])
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.b.shape != (self.w.shape[-2],):
            raise ValueError(f"bias shape {self.b.shape} does not match c_out={self.w.shape[-2]}")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValueError("filter has non-finite entries")

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.w.shape[:-2]

    @property
    def dims(self) -> int:
        return self.w.ndim - 2

    @property
    def c_out(self) -> int:
        return self.w.shape[-2]

    @property
    def c_in(self) -> int:
        return self.w.shape[-1]

    @property
    def num_pixels(self) -> int:
        return num_pixels(self.spatial_shape)

    def copy(self) -> "ConvFilter":
        return ConvFilter(self.w.copy(), self.b.copy())

    @classmethod
    def impulse(cls, n, c_out: int, c_in: int | None = None) -> "ConvFilter":
        """Identity-like filter ``w_{:,k,s} = delta_{k=s} e_1``."""
        shape = as_shape(n)
        c_in = c_out if c_in is None else c_in
        w = np.zeros(shape + (c_out, c_in))
        k = min(c_out, c_in)
        w[(0,) * len(shape) + (np.arange(k), np.arange(k))] = 1.0
        return cls(w)


def cross_channel_conv(f: ConvFilter, x: np.ndarray) -> np.ndarray:
    """``(w (*) x)_{:,k} = sum_s w_{:,k,s} * x_{:,s}`` (no bias).

    ``x`` has shape ``(..., *spatial, c_in)``; leading axes are batch axes.
    """
    x = np.asarray(x, dtype=np.float64)
    dims = f.dims
    if x.shape[-dims - 1:] != f.spatial_shape + (f.c_in,):
        raise ValueError(
            f"signal shape {x.shape[-dims - 1:]} does not match filter "
            f"{f.spatial_shape + (f.c_in,)}"
        )
    axes = signal_axes(dims)
    lam = frequency_blocks(f)
    X = np.fft.fftn(x, axes=axes)
    Y = (lam @ X[..., None])[..., 0]
    return np.fft.ifftn(Y, axes=axes).real


@dataclass
class TEMatrix:
    """Dense matrix form of a filter, shape ``(N c_out, N c_in)``."""

    dense: np.ndarray
    generator: ConvFilter


def _shift_index(shape: tuple[int, ...]) -> tuple[np.ndarray, ...]:
    """Per-axis index arrays ``(j - i) mod n`` over flattened pixel pairs."""
    coords = np.indices(shape).reshape(len(shape), -1)
    return tuple((coords[d][None, :] - coords[d][:, None]) % shape[d] for d in range(len(shape)))


def te_matrix(f: ConvFilter) -> TEMatrix:
    """Matrix ``W`` with ``W vec(x) = vec(w (*) x)``.

    Row block ``i`` and column block ``j`` hold ``w_{j-i,:,:}``.
    """
    shape = f.spatial_shape
    N = f.num_pixels
    blocks = f.w[_shift_index(shape)]  # (N, N, c_out, c_in)
    dense = blocks.transpose(0, 2, 1, 3).reshape(N * f.c_out, N * f.c_in)
    return TEMatrix(dense, f)


def filter_from_te_matrix(dense: np.ndarray, n, c_out: int, c_in: int,
                          check: bool = True, atol: float = 1e-9) -> ConvFilter:
    """Recover the generating filter of a TE matrix from its first row block."""
    shape = as_shape(n)
    N = num_pixels(shape)
    dense = np.asarray(dense)
    if dense.shape != (N * c_out, N * c_in):
        raise ValueError(f"matrix shape {dense.shape} incompatible with n={shape}, c=({c_out},{c_in})")
    w = dense[:c_out, :].reshape(c_out, N, c_in).transpose(1, 0, 2).reshape(shape + (c_out, c_in))
    f = ConvFilter(np.real_if_close(w).real if np.iscomplexobj(w) else w)
    if check and not np.allclose(te_matrix(f).dense, dense, atol=atol, rtol=0):
        raise ValueError("matrix is not translationally equivariant")
    return f


def is_translation_equivariant(dense: np.ndarray, n, c_out: int, c_in: int, atol: float = 1e-9) -> bool:
    try:
        filter_from_te_matrix(dense, n, c_out, c_in, check=True, atol=atol)
    except ValueError:
        return False
    return True


def frequency_blocks(f: ConvFilter) -> np.ndarray:
    """Per-frequency channel-mixing blocks, shape ``(*spatial, c_out, c_in)``.

    ``(B_t)_{k,s}`` is the ``t``-th circulant eigenvalue of ``w_{:,k,s}``.
    """
    return circulant_eigenvalues(f.w, axes=tuple(range(f.dims)))


# ---------------------------------------------------------------------------
# Frequency-indexed SVD
# ---------------------------------------------------------------------------


def fourier_mode(shape: tuple[int, ...], t: tuple[int, ...]) -> np.ndarray:
    """Unit-norm eigenvector ``phi_t`` (0-based ``t``) of every circulant."""
    coords = np.indices(shape).reshape(len(shape), -1)
    phase = sum(coords[d] * t[d] / shape[d] for d in range(len(shape)))
    return np.exp(2j * np.pi * phase) / math.sqrt(num_pixels(shape))


@dataclass(frozen=True)
class FreqEntry:
    freq: tuple[int, ...]  # 1-based
    channel: int  # 1-based rank position within the frequency
    value: float
    left: np.ndarray  # channel-space direction (c_out,)
    right: np.ndarray  # channel-space direction (c_in,)


@dataclass
class FreqSVD:
    """Singular system of a TE matrix, indexed by frequency.

    ``values[t]`` holds the ``min(c_out, c_in)`` singular values of block
    ``B_t`` in descending order; ``left[t] @ diag(values[t]) @ right[t].conj().T``
    reconstructs ``B_t``.  ``t`` runs over the flattened frequency grid.
    """

    spatial_shape: tuple[int, ...]
    values: np.ndarray  # (N, r)
    left: np.ndarray  # (N, c_out, r)
    right: np.ndarray  # (N, c_in, r)

    @property
    def c_out(self) -> int:
        return self.left.shape[1]

    @property
    def c_in(self) -> int:
        return self.right.shape[1]

    @property
    def num_freqs(self) -> int:
        return self.values.shape[0]

    @property
    def s_max(self) -> float:
        return float(self.values.max()) if self.values.size else 0.0

    def freq_labels(self) -> list[tuple[int, ...]]:
        """1-based frequency tuples in storage order."""
        return [tuple(int(v) + 1 for v in idx) for idx in np.ndindex(*self.spatial_shape)]

    def entries(self) -> Iterator[FreqEntry]:
        for t, label in enumerate(self.freq_labels()):
            for c in range(self.values.shape[1]):
                yield FreqEntry(label, c + 1, float(self.values[t, c]),
                                self.left[t, :, c], self.right[t, :, c])

    def nonzero_mask(self, tau: float = TAU_RANK) -> np.ndarray:
        if self.s_max == 0.0:
            return np.zeros_like(self.values, dtype=bool)
        return self.values > tau * self.s_max

    def rank(self, tau: float = TAU_RANK) -> int:
        return int(self.nonzero_mask(tau).sum())

    def blocks(self) -> np.ndarray:
        """Reassemble the blocks ``B_t`` (shape ``(N, c_out, c_in)``)."""
        return (self.left * self.values[:, None, :]) @ np.conj(self.right).transpose(0, 2, 1)

    def directions(self, t: int, c: int) -> tuple[np.ndarray, np.ndarray]:
        """Full-space left/right singular vectors for storage index ``t``, 0-based ``c``."""
        phi = fourier_mode(self.spatial_shape, np.unravel_index(t, self.spatial_shape))
        return np.kron(phi, self.left[t, :, c]), np.kron(phi, self.right[t, :, c])

    def reconstruct(self) -> np.ndarray:
        """Dense TE matrix ``sum s (phi_t (x) u)(phi_t (x) v)^H`` (real part)."""
        N = self.num_freqs
        out = np.zeros((N * self.c_out, N * self.c_in), dtype=complex)
        for t in range(N):
            phi = fourier_mode(self.spatial_shape, np.unravel_index(t, self.spatial_shape))
            P = np.outer(phi, np.conj(phi))
            B = (self.left[t] * self.values[t]) @ np.conj(self.right[t]).T
            out += np.kron(P, B)
        return out.real


def svd_of_blocks(blocks: np.ndarray, spatial_shape=None) -> FreqSVD:
    """Frequency SVD from blocks of shape ``(*spatial, c_out, c_in)``."""
    blocks = np.asarray(blocks)
    if spatial_shape is None:
        spatial_shape = blocks.shape[:-2]
    spatial_shape = tuple(spatial_shape)
    flat = blocks.reshape((-1,) + blocks.shape[-2:])
    U, s, Vh = np.linalg.svd(flat, full_matrices=False)
    return FreqSVD(spatial_shape, s, U, np.conj(Vh).transpose(0, 2, 1))


def frequency_svd(f: ConvFilter) -> FreqSVD:
    return svd_of_blocks(frequency_blocks(f), f.spatial_shape)


def frequency_svd_of_matrix(dense: np.ndarray, n, c_out: int, c_in: int) -> FreqSVD:
    """Frequency SVD of a dense TE matrix (checked for equivariance)."""
    return frequency_svd(filter_from_te_matrix(dense, n, c_out, c_in))


def pseudo_det(svd: FreqSVD, tol: float = TAU_RANK) -> float:
    """Product of singular values above ``tol * s_max``; 1 for the zero spectrum."""
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    vals = svd.values[svd.nonzero_mask(tol)]
    return float(np.prod(vals)) if vals.size else 1.0


def log_pseudo_det(svd: FreqSVD, tol: float = TAU_RANK) -> float:
    vals = svd.values[svd.nonzero_mask(tol)]
    return float(np.sum(np.log(vals)))


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


@dataclass
class PoolingSpec:
    """Pooling filter ``m`` (applied per channel) and its eigenvalues ``m_tilde``."""

    m: np.ndarray
    kind: str = "custom"
    beta: float | None = None
    eps_inv: float = EPS_INV
    m_tilde: np.ndarray = field(init=False)
    invertible: bool = field(init=False)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        if self.m.ndim not in (1, 2):
            raise ValueError("pooling filter must be 1D or 2D")
        self.m_tilde = circulant_eigenvalues(self.m)
        self.invertible = bool(np.min(np.abs(self.m_tilde)) > self.eps_inv)

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.m.shape

    @property
    def dims(self) -> int:
        return self.m.ndim

    @property
    def m_tilde_abs(self) -> np.ndarray:
        return np.abs(self.m_tilde)

    @property
    def m_tilde_max(self) -> float:
        return float(self.m_tilde_abs.max())

    @property
    def dc_gain(self) -> float:
        """``m_tilde`` at the constant frequency (``sum(m)``)."""
        return float(self.m_tilde.flat[0].real)

    @property
    def m_bar(self) -> float:
        """``sum_t |m_tilde_t|^-2`` (infinite for non-invertible pooling)."""
        if not self.invertible:
            return math.inf
        return float(np.sum(self.m_tilde_abs ** -2.0))

    @property
    def is_identity(self) -> bool:
        return bool(np.allclose(self.m_tilde, 1.0, atol=1e-14, rtol=0))

    @property
    def condition_number(self) -> float:
        a = self.m_tilde_abs
        return math.inf if a.min() == 0 else float(a.max() / a.min())

    def inverse_filter(self) -> np.ndarray:
        """Real filter ``m^{-1}`` whose circulant is ``M^{-1}``."""
        if not self.invertible:
            raise ValueError("pooling filter is not invertible")
        return eigenvalues_to_filter(1.0 / self.m_tilde).real

    def as_filter(self, c: int) -> ConvFilter:
        """Channel-wise pooling as a ``c``-channel diagonal ConvFilter."""
        w = np.zeros(self.spatial_shape + (c, c))
        for k in range(c):
            w[..., k, k] = self.m
        return ConvFilter(w)


def _avg3_filter(shape: tuple[int, ...]) -> np.ndarray:
    """Cyclic 3-point (3x3 in 2D) centred average."""
    a = np.zeros(shape)
    taps = [(-1, 0, 1)] * len(shape)
    for offs in np.array(np.meshgrid(*taps, indexing="ij")).reshape(len(shape), -1).T:
        idx = tuple(int(o) % s for o, s in zip(offs, shape))
        a[idx] += 1.0 / 3 ** len(shape)
    return a


def pooling_operator(kind: str = "identity", beta: float = 0.0, n=None, m=None,
                     require_invertible: bool = True, eps_inv: float = EPS_INV) -> PoolingSpec:
    """Build a pooling spec.

    ``identity`` is no pooling; ``blend_avg3`` is ``(1-beta) I + beta A_3``;
    ``custom`` takes an explicit filter ``m``.
    """
    if kind == "custom":
        if m is None:
            raise ValueError("custom pooling requires m")
        spec = PoolingSpec(np.asarray(m, dtype=np.float64), kind="custom", beta=None, eps_inv=eps_inv)
    else:
        shape = as_shape(n)
        delta = np.zeros(shape)
        delta[(0,) * len(shape)] = 1.0
        if kind == "identity":
            spec = PoolingSpec(delta, kind="identity", beta=None, eps_inv=eps_inv)
        elif kind == "blend_avg3":
            if not 0.0 <= beta <= 1.0:
                raise ValueError(f"beta must lie in [0, 1], got {beta}")
            spec = PoolingSpec((1.0 - beta) * delta + beta * _avg3_filter(shape),
                               kind="blend_avg3", beta=float(beta), eps_inv=eps_inv)
        else:
            raise ValueError(f"unknown pooling kind {kind!r}")
    if require_invertible and not spec.invertible:
        bad = np.argwhere(np.abs(spec.m_tilde) <= eps_inv)
        raise ValueError(
            f"pooling filter is not invertible: |m_tilde| <= {eps_inv} at frequencies "
            f"{[tuple(int(v) + 1 for v in b) for b in bad]}"
        )
    return spec


def frequency_degree(t: tuple[int, ...], shape: tuple[int, ...]) -> tuple[int, ...]:
    """Distance of a 0-based frequency from zero on each cyclic axis."""
    return tuple(min(ti % n, (-ti) % n) for ti, n in zip(t, shape))


def conjugate_index(t: tuple[int, ...], shape: tuple[int, ...]) -> tuple[int, ...]:
    return tuple((-ti) % n for ti, n in zip(t, shape))


def filter_from_blocks(blocks: np.ndarray, b: np.ndarray | None = None, atol: float = 1e-9) -> ConvFilter:
    """Real filter whose frequency blocks are ``blocks`` (inverse of :func:`frequency_blocks`)."""
    blocks = np.asarray(blocks)
    dims = blocks.ndim - 2
    w = eigenvalues_to_filter(blocks, axes=tuple(range(dims)))
    scale = max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    if np.max(np.abs(w.imag), initial=0.0) > atol * scale:
        raise ValueError("blocks are not conjugate-symmetric: the filter would be complex")
    return ConvFilter(w.real, b)
