"""Invariant suite run by ``cbn verify``.

Each check returns ``(ok, detail)``; the fast mode shrinks sizes and trial
counts so the whole table prints in a few seconds.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..bounds import layer_spectrum_report
from ..checkpoint import from_bytes, to_bytes
from ..cnn_core import init_params, loss_and_gradients, predict
from ..constructions import (
    FCNetwork,
    fc_reference,
    fc_to_cnn,
    identity_accounting,
    identity_network,
    parallel_sum,
    parallel_sum_norm,
    unique_embedding,
)
from ..resampling import band_limit, downsample, upsample
from ..te_linalg import (
    ConvFilter,
    cyclic_conv,
    frequency_svd,
    is_translation_equivariant,
    pooling_operator,
    te_matrix,
    translate,
)
from .data import gen_translated_bumps


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _random_filter(rng, n, c_out, c_in) -> ConvFilter:
    return ConvFilter(rng.standard_normal((n, c_out, c_in)), rng.standard_normal(c_out))


def check_convolution(fast: bool, rng) -> tuple[bool, str]:
    err = 0.0
    for _ in range(50 if fast else 1000):
        n = int(rng.integers(1, 65))
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        idx = (np.arange(n)[:, None] + np.arange(n)[None, :]) % n
        direct = b[idx] @ a  # (a * b)_i = sum_j a_j b_{i+j}
        err = max(err, float(np.max(np.abs(cyclic_conv(a, b) - direct))))
    return err <= 1e-12, f"max error {err:.2e}"


def check_norm_factor(fast: bool, rng) -> tuple[bool, str]:
    err = 0.0
    for _ in range(20 if fast else 200):
        n = int(rng.integers(1, 17))
        f = _random_filter(rng, n, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        W = te_matrix(f).dense
        err = max(err, abs(np.sum(f.w ** 2) - np.sum(W ** 2) / n) / max(1.0, np.sum(f.w ** 2)))
    return err <= 1e-12, f"max relative error {err:.2e}"


def check_frequency_svd(fast: bool, rng) -> tuple[bool, str]:
    err = 0.0
    for _ in range(30 if fast else 1000):
        n = int(rng.integers(1, 17))
        f = _random_filter(rng, n, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        ref = np.sort(np.linalg.svd(te_matrix(f).dense, compute_uv=False))
        got = np.sort(frequency_svd(f).values.ravel())
        err = max(err, float(np.max(np.abs(ref - got))))
    return err <= 1e-9, f"max multiset error {err:.2e}"


def check_equivariance(fast: bool, rng) -> tuple[bool, str]:
    f = _random_filter(rng, 8, 3, 2)
    ok = is_translation_equivariant(te_matrix(f).dense, 8, 3, 2)
    return ok, "shift-invariant block structure" if ok else "structure violated"


def check_gradients(fast: bool, rng) -> tuple[bool, str]:
    pool = pooling_operator("blend_avg3", 0.5, n=4)
    p = init_params(4, [1, 3, 3, 1], pool, 1.0, int(rng.integers(1 << 30)))
    for f in p.layers:
        f.b[:] = rng.standard_normal(f.b.shape) * 0.1
    x = rng.standard_normal((2, 4, 1))
    y = rng.standard_normal((2, 4, 1))
    lam = 1e-2
    _, _, grads = loss_and_gradients(p, x, y, lam)
    g = np.concatenate([np.concatenate([d.w.ravel(), d.b.ravel()]) for d in grads])
    theta = p.flatten()
    h = 1e-6
    idx = range(theta.size) if not fast else rng.choice(theta.size, 12, replace=False)
    worst = 0.0
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fp = loss_and_gradients(p.unflatten(tp), x, y, lam)[0]
        fm = loss_and_gradients(p.unflatten(tm), x, y, lam)[0]
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-8))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def check_identity(fast: bool, rng) -> tuple[bool, str]:
    pool = pooling_operator("blend_avg3", 0.5, n=8)
    net = identity_network(8, 3, 5, pool)
    acc = identity_accounting(8, 3, 5, pool)
    x = rng.uniform(-1, 1, (4, 8, 3))
    err_f = float(np.max(np.abs(predict(net, x) - x)))
    err_n = abs(net.norm_sq() - acc.total)
    return err_f <= 1e-9 and err_n <= 1e-9, f"function error {err_f:.1e}, norm error {err_n:.1e}"


def check_parallel_sum(fast: bool, rng) -> tuple[bool, str]:
    pool = pooling_operator("blend_avg3", 0.25, n=6)
    a = init_params(6, [2, 3, 3, 1], pool, 1.0, 1)
    b = init_params(6, [2, 4, 2, 1], pool, 1.0, 2)
    s = parallel_sum(a, b)
    x = rng.standard_normal((3, 6, 2))
    err = float(np.max(np.abs(predict(s, x) - predict(a, x) - predict(b, x))))
    err_n = abs(s.norm_sq() - parallel_sum_norm(a, b))
    return err <= 1e-9 and err_n <= 1e-9, f"function error {err:.1e}, norm error {err_n:.1e}"


def check_fc_to_cnn(fast: bool, rng) -> tuple[bool, str]:
    worst = 0.0
    for t in range(3 if fast else 20):
        n, c = 5, 2
        fc = FCNetwork.random([n * c, 6, 4, 3], seed=t)
        cnn = fc_to_cnn(fc, n, c)
        x = rng.uniform(0.1, 1.0, (10 if fast else 100, n, c))
        ref = np.stack([fc_reference(fc, xi) for xi in x])
        worst = max(worst, float(np.max(np.abs(predict(cnn, x) - ref))))
    return worst <= 1e-9, f"max error {worst:.1e}"


def check_resampling(fast: bool, rng) -> tuple[bool, str]:
    n, s = 24, 3
    x = band_limit(rng.standard_normal((4, n, 2)), s)
    rt = float(np.max(np.abs(upsample(downsample(x, s), s) - x)))
    z = rng.standard_normal((4, n, 2))
    Y = np.fft.fft(downsample(z, s), axis=1)
    X = np.fft.fft(z, axis=1)
    m = n // s
    alias = sum(X[:, j * m:(j + 1) * m] for j in range(s)) / s
    al = float(np.max(np.abs(Y - alias)))
    return rt <= 1e-10 and al <= 1e-10, f"round trip {rt:.1e}, aliasing {al:.1e}"


def check_checkpoint(fast: bool, rng) -> tuple[bool, str]:
    pool = pooling_operator("blend_avg3", 0.3, n=(5, 4))
    p = init_params((5, 4), [2, 3, 1], pool, 1.0, 7)
    raw = to_bytes(p, 7)
    q, head = from_bytes(raw)
    ok = to_bytes(q, head["seed"]) == raw
    return ok, f"{len(raw)} bytes, identical after reload" if ok else "bytes differ"


def check_embedding(fast: bool, rng) -> tuple[bool, str]:
    ds = gen_translated_bumps(16 if fast else 64, 8, 1.5, seed=3)
    emb = unique_embedding(ds.inputs)
    worst = 0.0
    for i in range(len(emb.samples)):
        for p in range(8):
            z = emb.embed(i, p)
            worst = max(worst, float(np.max(np.abs(emb.G_inverse(z[None])[0] - translate(emb.samples[i], p)))))
    return worst <= 1e-9, f"max recovery error {worst:.1e}"


def check_spectrum_totals(fast: bool, rng) -> tuple[bool, str]:
    pool = pooling_operator("blend_avg3", 0.4, n=6)
    p = init_params(6, [1, 3, 2], pool, 1.0, 5)
    rows = layer_spectrum_report(p)
    worst = 0.0
    Mm = te_matrix(ConvFilter(pool.m.reshape(6, 1, 1), np.zeros(1))).dense
    for ell, f in enumerate(p.layers, start=1):
        tot = sum(r["singular_value"] ** 2 for r in rows if r["layer"] == ell)
        c = f.c_out
        M = np.kron(Mm, np.eye(c))
        ref = float(np.sum((M @ te_matrix(f).dense) ** 2))
        worst = max(worst, abs(tot - ref))
    return worst <= 1e-9, f"max deviation {worst:.1e}"


CHECKS: list[tuple[str, Callable]] = [
    ("convolution theorem", check_convolution),
    ("norm factor ||W||^2 = n ||w||^2", check_norm_factor),
    ("frequency SVD = dense SVD", check_frequency_svd),
    ("TE matrix shift invariance", check_equivariance),
    ("gradient vs central differences", check_gradients),
    ("identity network function and norm", check_identity),
    ("parallel sum function and norm", check_parallel_sum),
    ("FC to CNN compilation", check_fc_to_cnn),
    ("Fourier resampling", check_resampling),
    ("checkpoint round trip", check_checkpoint),
    ("embedding inverse", check_embedding),
    ("spectrum totals", check_spectrum_totals),
]


def run_checks(fast: bool = False, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in CHECKS:
        t0 = time.time()
        try:
            ok, detail = fn(fast, rng)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail, time.time() - t0))
    return out


def format_table(results: list[CheckResult]) -> str:
    w = max(len(r.name) for r in results)
    buf = io.StringIO()
    buf.write(f"{'check'.ljust(w)}  result  time    detail\n")
    for r in results:
        buf.write(f"{r.name.ljust(w)}  {'PASS' if r.ok else 'FAIL'}    {r.seconds:5.2f}s  {r.detail}\n")
    n_ok = sum(r.ok for r in results)
    buf.write(f"{n_ok}/{len(results)} checks passed\n")
    return buf.getvalue()
