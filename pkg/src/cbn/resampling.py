"""Fourier down/up-sampling and networks with a single strided bottleneck stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cnn_core import NetworkParams, predict
from .te_linalg import PoolingSpec, eigenvalues_to_filter, signal_axes


def downsample(x: np.ndarray, s: int, dims: int = 1, offset: int = 0) -> np.ndarray:
    """Keep every ``s``-th pixel along each spatial axis, starting at ``offset``.

    ``x`` has shape ``(..., *spatial, c)``.  With ``offset=0`` the DFT of the
    result is the aliased sum ``y_i = (1/s) sum_j x_{i + j n/s}`` whenever ``s``
    divides ``n``.
    """
    if s < 1:
        raise ValueError("stride must be at least 1")
    x = np.asarray(x)
    idx = [slice(None)] * x.ndim
    for ax in signal_axes(dims):
        n = x.shape[ax]
        idx[ax] = slice(offset % n if n else 0, None, s)
    out = x[tuple(idx)]
    for ax in signal_axes(dims):
        keep = x.shape[ax] // s
        out = np.take(out, np.arange(keep), axis=ax)
    return out


def _upsample_axis(X: np.ndarray, s: int, axis: int, symmetric: bool) -> np.ndarray:
    """Place the ``n'`` Fourier coefficients of one axis into a spectrum of size ``n' s``."""
    m = X.shape[axis]
    n = m * s
    shape = list(X.shape)
    shape[axis] = n
    Y = np.zeros(shape, dtype=complex)

    def put(dst, src, weight=1.0):
        di = [slice(None)] * X.ndim
        si = [slice(None)] * X.ndim
        di[axis] = dst
        si[axis] = src
        Y[tuple(di)] += weight * X[tuple(si)]

    if not symmetric:
        for k in range(m):
            put(k, k)
        return Y * s
    for k in range(m):
        if 2 * k < m:
            put(k, k)
        elif 2 * k == m:
            put(k, k, 0.5)
            put(n - k, k, 0.5)
        else:
            put(n - (m - k), k)
    return Y * s


def upsample(x: np.ndarray, s: int, dims: int = 1, symmetric: bool = True) -> np.ndarray:
    """Fourier upsampling by ``s`` along each spatial axis.

    The ``n'`` input coefficients (unnormalised DFT) are scaled by ``s`` and
    written into a spectrum of size ``n' s``.  The symmetric placement maps
    frequency ``k`` to ``k`` or ``k - n'`` (whichever is closer to zero) and
    splits the Nyquist bin evenly, so real inputs give real outputs.  The
    literal placement writes the coefficients into slots ``0..n'-1``.
    """
    if s < 1:
        raise ValueError("stride must be at least 1")
    x = np.asarray(x)
    Y = np.fft.fftn(x, axes=signal_axes(dims))
    for ax in signal_axes(dims):
        Y = _upsample_axis(Y, s, ax, symmetric)
    y = np.fft.ifftn(Y, axes=signal_axes(dims))
    if symmetric and np.isrealobj(x):
        return y.real
    return y


def is_band_limited(x: np.ndarray, s: int, dims: int = 1, atol: float = 1e-10,
                    symmetric: bool = True) -> bool:
    """Whether ``x`` survives ``upsample(downsample(x))`` exactly."""
    X = np.fft.fftn(x, axes=signal_axes(dims))
    mask = np.ones(X.shape, dtype=bool)
    for ax in signal_axes(dims):
        n = X.shape[ax]
        m = n // s
        k = np.arange(n)
        if symmetric:
            dist = np.minimum(k, n - k)
            keep = 2 * dist < m
        else:
            keep = k < m
        shp = [1] * X.ndim
        shp[ax] = n
        mask = mask & keep.reshape(shp)
    return bool(np.all(np.abs(X[~mask]) <= atol * max(1.0, float(np.abs(X).max()))))


def band_limit(x: np.ndarray, s: int, dims: int = 1) -> np.ndarray:
    """Drop every frequency not strictly inside the inner Nyquist band."""
    X = np.fft.fftn(x, axes=signal_axes(dims))
    for ax in signal_axes(dims):
        n = X.shape[ax]
        m = n // s
        k = np.arange(n)
        keep = 2 * np.minimum(k, n - k) < m
        shp = [1] * X.ndim
        shp[ax] = n
        X = X * keep.reshape(shp)
    return np.fft.ifftn(X, axes=signal_axes(dims)).real


def truncate_pooling(pool: PoolingSpec, s: int) -> PoolingSpec:
    """Inner pooling filter keeping the ``n/s`` lowest frequencies of ``m``.

    Frequencies are matched symmetrically (``k`` and ``k - n'``); at the inner
    Nyquist bin the two outer eigenvalues are averaged.
    """
    mt = pool.m_tilde
    for ax in range(mt.ndim):
        n = mt.shape[ax]
        m = n // s
        if m < 1:
            raise ValueError("stride larger than the signal")
        rows = []
        for k in range(m):
            if 2 * k < m:
                rows.append(np.take(mt, k, axis=ax))
            elif 2 * k == m:
                rows.append(0.5 * (np.take(mt, k, axis=ax) + np.take(mt, n - k, axis=ax)))
            else:
                rows.append(np.take(mt, n - (m - k), axis=ax))
        mt = np.stack(rows, axis=ax)
    m_inner = eigenvalues_to_filter(mt)
    if np.max(np.abs(m_inner.imag)) > 1e-12:
        raise ValueError("truncated pooling filter is not real")
    kind = pool.kind if pool.kind == "identity" else "custom"
    spec = PoolingSpec(m_inner.real, kind=kind, beta=pool.beta, eps_inv=pool.eps_inv)
    return spec


@dataclass
class StrideSpec:
    s: int
    n: tuple[int, ...]

    def __post_init__(self):
        self.n = tuple(int(v) for v in (self.n if not isinstance(self.n, int) else (self.n,)))
        if self.s < 2:
            raise ValueError("stride must be at least 2")

    @property
    def n_inner(self) -> tuple[int, ...]:
        return tuple(v // self.s for v in self.n)

    @property
    def exact(self) -> bool:
        return all(v % self.s == 0 for v in self.n)


@dataclass
class StrideNetwork:
    """``f2 o Up_s o inner o Down_s o f1``."""

    f1: NetworkParams
    inner: NetworkParams
    f2: NetworkParams
    spec: StrideSpec
    symmetric: bool = True

    def __post_init__(self):
        if self.f1.spatial_shape != self.spec.n or self.f2.spatial_shape != self.spec.n:
            raise ValueError("outer networks must act on the full-size signal")
        if self.inner.spatial_shape != self.spec.n_inner:
            raise ValueError(f"inner network must act on size {self.spec.n_inner}")
        if self.f1.widths[-1] != self.inner.widths[0] or self.inner.widths[-1] != self.f2.widths[0]:
            raise ValueError("channel counts do not chain through the resamplers")

    @property
    def dims(self) -> int:
        return len(self.spec.n)

    @property
    def depth(self) -> int:
        return self.f1.depth + self.inner.depth + self.f2.depth

    def norm_sq(self) -> float:
        return self.f1.norm_sq() + self.inner.norm_sq() + self.f2.norm_sq()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        a = predict(self.f1, x)
        a = downsample(a, self.spec.s, self.dims)
        a = predict(self.inner, a)
        a = upsample(a, self.spec.s, self.dims, symmetric=self.symmetric)
        return predict(self.f2, a)

    def manifest(self, paths: dict[str, str]) -> dict:
        return {"kind": "stride_network", "spec": {"s": self.spec.s, "n": list(self.spec.n)},
                "symmetric": self.symmetric, "checkpoints": dict(paths)}

    def save(self, directory) -> Path:
        from .checkpoint import save_params

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name in ("f1", "inner", "f2"):
            save_params(getattr(self, name), d / f"{name}.cbn")
            paths[name] = f"{name}.cbn"
        out = d / "stride_manifest.json"
        out.write_text(json.dumps(self.manifest(paths), indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, manifest_path) -> "StrideNetwork":
        from .checkpoint import load_params

        p = Path(manifest_path)
        man = json.loads(p.read_text())
        parts = {k: load_params(p.parent / v) for k, v in man["checkpoints"].items()}
        spec = StrideSpec(man["spec"]["s"], tuple(man["spec"]["n"]))
        return cls(parts["f1"], parts["inner"], parts["f2"], spec, man.get("symmetric", True))


def stride_spec_dict(spec: StrideSpec) -> dict:
    return asdict(spec)
