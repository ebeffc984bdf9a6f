"""Rank functionals and representation-cost inequalities for cyclic CNNs.

Every bound here is evaluated on a concrete network or on a concrete
frequency support; nothing attempts the infimum over all parameterisations.
Singular values count as nonzero when they exceed ``tau * s_max``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cnn_core import (
    NetworkParams,
    balancedness_residuals,
    constant_jacobian_blocks,
    forward,
    input_jacobian,
    is_constant_input,
    ntk_trace,
)
from .te_linalg import (
    TAU_RANK,
    FreqSVD,
    PoolingSpec,
    frequency_blocks,
    svd_of_blocks,
)

P_LEVELS = (0.1, 0.25, 0.5)


# ---------------------------------------------------------------------------
# Supports and rank functionals
# ---------------------------------------------------------------------------


def _as_freq(t, dims: int) -> tuple[int, ...]:
    if isinstance(t, (int, np.integer)):
        t = (int(t),)
    t = tuple(int(v) for v in t)
    if len(t) != dims:
        raise ValueError(f"frequency {t} does not have {dims} components")
    return t


@dataclass
class FrequencySupport:
    """Per-channel sets of supported frequencies (1-based)."""

    channels: list[frozenset]
    spatial_shape: tuple[int, ...]

    def __init__(self, channels: Iterable[Iterable], spatial_shape):
        from .te_linalg import as_shape

        self.spatial_shape = as_shape(spatial_shape)
        dims = len(self.spatial_shape)
        out = []
        for c, freqs in enumerate(channels):
            fs = frozenset(_as_freq(t, dims) for t in freqs)
            if not fs:
                raise ValueError(f"channel {c + 1} has an empty support")
            for t in fs:
                if any(not 1 <= v <= n for v, n in zip(t, self.spatial_shape)):
                    raise ValueError(f"frequency {t} outside 1..{self.spatial_shape}")
            out.append(fs)
        if not out:
            raise ValueError("support needs at least one channel")
        self.channels = out

    @property
    def k(self) -> int:
        return len(self.channels)

    @classmethod
    def from_signals(cls, signals: np.ndarray, spatial_shape, atol: float = 1e-10) -> "FrequencySupport":
        """Union over samples of the DFT support of each channel.

        ``signals`` has shape ``(B, *spatial, c)``.
        """
        from .te_linalg import as_shape

        shape = as_shape(spatial_shape)
        axes = tuple(range(1, len(shape) + 1))
        spec = np.abs(np.fft.fftn(signals, axes=axes))
        active = np.any(spec > atol, axis=0)  # (*spatial, c)
        chans = []
        for c in range(active.shape[-1]):
            idx = np.argwhere(active[..., c])
            chans.append([tuple(int(v) + 1 for v in row) for row in idx])
        return cls(chans, shape)


def inverse_weights(pooling: PoolingSpec) -> np.ndarray:
    """``|m_tilde_t|^{-2}`` with ``inf`` at non-invertible frequencies."""
    a = pooling.m_tilde_abs
    with np.errstate(divide="ignore"):
        out = np.where(a > pooling.eps_inv, 1.0 / np.maximum(a, 1e-300) ** 2, np.inf)
    return out


def rank_m(svd: FreqSVD, pooling: PoolingSpec, tau: float = TAU_RANK) -> float:
    """``sum_{t,c} |m_t|^{-2} 1[s_{t,c} > tau s_max]``."""
    if svd.spatial_shape != pooling.spatial_shape:
        raise ValueError("spectrum and pooling filter have different sizes")
    mask = svd.nonzero_mask(tau)
    if not mask.any():
        return 0.0
    w = inverse_weights(pooling).reshape(-1)
    counts = mask.sum(axis=1)
    if np.any(np.isinf(w[counts > 0])):
        return math.inf
    used = counts > 0
    return float(np.sum(counts[used] * w[used]))


def cbn_upper_bound(support: FrequencySupport, pooling: PoolingSpec) -> float:
    """``sum_c sum_{i in I_c} |m_i|^{-2}`` for the given decomposition."""
    if support.spatial_shape != pooling.spatial_shape:
        raise ValueError("support and pooling filter have different sizes")
    w = inverse_weights(pooling)
    total = 0.0
    for fs in support.channels:
        for t in fs:
            total += float(w[tuple(v - 1 for v in t)])
    return total


def matrix_rank(A: np.ndarray, tau: float = TAU_RANK) -> int:
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tau * s[0]))


def r1_lower_bound(jac_svd: FreqSVD, pooling: PoolingSpec, tau: float = TAU_RANK) -> float:
    """``2 sum_{s_{t,c} != 0} |m_t|^{-2} log(s_{t,c} |m_t|)``."""
    mask = jac_svd.nonzero_mask(tau)
    if not mask.any():
        return 0.0
    a = np.broadcast_to(pooling.m_tilde_abs.reshape(-1, 1), mask.shape)
    s = jac_svd.values
    return float(2.0 * np.sum(np.log(s[mask] * a[mask]) / a[mask] ** 2))


def constant_jacobian_svd(params: NetworkParams, x: np.ndarray) -> FreqSVD:
    cj = constant_jacobian_blocks(params, x)
    return svd_of_blocks(cj.full.reshape(params.spatial_shape + cj.full.shape[-2:]))


# ---------------------------------------------------------------------------
# Jacobian lower bounds
# ---------------------------------------------------------------------------


@dataclass
class JacobianBounds:
    bound_general: float
    bound_constant: float | None
    best_general_probe: int
    best_constant_probe: int | None
    rank_general: int
    certified_general: float  # finite-depth form, <= ||theta||^2 / L
    certified_constant: float | None  # finite-depth form, <= ||theta||^2 / L
    num_constant_probes: int
    tau: float
    guard: float  # max(m_max^2, 1)


def jacobian_lower_bounds(params: NetworkParams, probes: Sequence[np.ndarray],
                          tau: float = TAU_RANK) -> JacobianBounds:
    """Lower bounds on ``||theta||^2 / L`` from input Jacobians.

    ``bound_general`` is ``max_x Rank Jf(x) / max(m_max^2, 1)`` and
    ``bound_constant`` is ``max_x Rank_m Jf(x)`` over channel-constant probes;
    both are depth-asymptotic.  The ``certified_*`` fields replace every
    nonzero singular value count by ``s^{2/L}`` (pooling-weighted in the
    constant case), which bounds ``||theta||^2 / L`` at the actual depth.
    """
    if len(probes) == 0:
        raise ValueError("at least one probe is required")
    L = params.depth
    pool = params.pooling
    guard = max(pool.m_tilde_max ** 2, 1.0)
    best_g, best_gi, rank_g, cert_g = -1.0, 0, 0, 0.0
    best_c, best_ci, cert_c, n_const = None, None, None, 0
    for i, x in enumerate(probes):
        J = input_jacobian(params, x)
        s = np.linalg.svd(J, compute_uv=False)
        nz = s > tau * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
        r = int(nz.sum())
        if r / guard > best_g:
            best_g, best_gi, rank_g = r / guard, i, r
        cert_g = max(cert_g, float(np.sum(s[nz] ** (2.0 / L))) / guard)
        if is_constant_input(x):
            n_const += 1
            svd = constant_jacobian_svd(params, x)
            rm = rank_m(svd, pool, tau)
            if best_c is None or rm > best_c:
                best_c, best_ci = rm, i
            mask = svd.nonzero_mask(tau)
            a = np.broadcast_to(pool.m_tilde_abs.reshape(-1, 1), mask.shape)
            val = float(np.sum(a[mask] ** (2.0 * (1 - L) / L) * svd.values[mask] ** (2.0 / L)))
            cert_c = val if cert_c is None else max(cert_c, val)
    return JacobianBounds(best_g, best_c, best_gi, best_ci, rank_g, cert_g, cert_c, n_const, tau, guard)


def default_probes(inputs: np.ndarray, grid: Sequence[float] = (0.25, 0.5, 1.0)) -> list[np.ndarray]:
    """Channel means of the inputs plus a few constant signals."""
    inputs = np.asarray(inputs, dtype=np.float64)
    sig = inputs.shape[1:]
    probes = []
    axes = tuple(range(1, inputs.ndim - 1))
    means = inputs.mean(axis=axes)  # (B, c)
    for mu in (means.mean(axis=0),) + tuple(means[: min(4, len(means))]):
        probes.append(np.broadcast_to(mu, sig).copy())
    for v in grid:
        probes.append(np.full(sig, float(v)))
    return probes


# ---------------------------------------------------------------------------
# Weight bottleneck
# ---------------------------------------------------------------------------


def _range_projector(A: np.ndarray, tau: float, ref: float) -> tuple[np.ndarray, int]:
    """Orthogonal projector onto the column space of ``A`` (absolute cut ``tau * ref``)."""
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    r = int(np.sum(s > tau * ref)) if ref > 0 else 0
    Ur = U[:, :r]
    return Ur @ np.conj(Ur).T, r


@dataclass
class BottleneckRecord:
    kappa: int
    rank_m: float
    c1: float
    log_term: float  # 2 sum |m|^-2 log(s |m|)
    rhs: float  # c1 - log_term
    residuals: list[float]  # per layer, includes ||b||^2
    total_residual: float
    slack: float
    holds: bool
    per_freq_rank: list[int]
    projected_rank_mismatch: list[int]  # layers whose projected rank differs from n_t somewhere
    corollary: dict  # p -> {"threshold", "count", "required", "holds"}
    degenerate: bool
    tau: float
    # best admissible factors: per frequency, top n_t singular directions of W_t itself
    best_residuals: list[float]
    best_total: float
    holds_best: bool
    corollary_best: dict


def weight_bottleneck_residual(params: NetworkParams, x0: np.ndarray, tau: float = TAU_RANK,
                               slack_rel: float = 1e-6) -> BottleneckRecord:
    """Residuals ``||W_l - U_l S_l V_l^T||^2 + ||b_l||^2`` at a constant probe.

    For each layer and frequency the filter block is projected onto the row
    space of the downstream Jacobian block and the column space of the
    upstream one; the top ``n_t`` singular directions of that projection are
    kept and their singular values replaced by ``|m_t|^{-1}``.

    The projection factors need not be the closest ones: when the forward
    image and the backward row space of a layer differ, the projection loses
    norm. ``best_residuals`` uses the minimiser over all per-frequency rank
    ``n_t`` factors with singular values ``|m_t|^{-1}``, which is
    ``||W_t||^2 - 2|m_t|^{-1} sum_{i<=n_t} s_i(W_t) + n_t |m_t|^{-2}``.
    """
    L = params.depth
    N = params.num_pixels
    pool = params.pooling
    cj = constant_jacobian_blocks(params, x0)
    svd = svd_of_blocks(cj.full.reshape(params.spatial_shape + cj.full.shape[-2:]))
    mask = svd.nonzero_mask(tau)
    n_t = mask.sum(axis=1)
    kappa = int(n_t.sum())
    theta = params.norm_sq()
    rm = rank_m(svd, pool, tau)
    c1 = theta - L * rm
    log_term = r1_lower_bound(svd, pool, tau)
    rhs = c1 - log_term
    slack = slack_rel * theta
    minv = 1.0 / pool.m_tilde_abs.reshape(-1)
    residuals, mismatch, best = [], [], []
    if kappa == 0:
        residuals = list(params.layer_norms())
        best = list(residuals)
    else:
        for ell in range(1, L + 1):
            f = params.layers[ell - 1]
            B = frequency_blocks(f).reshape((N,) + f.w.shape[-2:])
            A_in = cj.to_layer[ell - 1]
            C_out = cj.from_layer[ell - 1]
            ref_in = max(float(np.linalg.norm(A_in, ord=2, axis=(1, 2)).max()), 0.0)
            ref_out = max(float(np.linalg.norm(C_out, ord=2, axis=(1, 2)).max()), 0.0)
            res = 0.0
            bad = False
            sv = np.linalg.svd(B, compute_uv=False)
            keep = np.arange(sv.shape[1])[None, :] < n_t[:, None]
            opt = np.sum(np.abs(B) ** 2) - 2 * np.sum(minv[:, None] * sv * keep) + np.sum(n_t * minv ** 2)
            best.append(max(float(opt), 0.0) + float(np.sum(f.b ** 2)))
            for t in range(N):
                k = int(n_t[t])
                if k == 0:
                    res += float(np.sum(np.abs(B[t]) ** 2))
                    continue
                P_in, _ = _range_projector(A_in[t], tau, ref_in)
                P_out, _ = _range_projector(np.conj(C_out[t]).T, tau, ref_out)
                Wbar = P_out @ B[t] @ P_in
                U, s, Vh = np.linalg.svd(Wbar)
                r_bar = int(np.sum(s > tau * max(s[0], 1e-300))) if s.size else 0
                if r_bar != k:
                    bad = True
                approx = (U[:, :k] * minv[t]) @ Vh[:k, :]
                res += float(np.sum(np.abs(B[t] - approx) ** 2))
            residuals.append(res + float(np.sum(f.b ** 2)))
            if bad:
                mismatch.append(ell)
    total = float(np.sum(residuals))
    best_total = float(np.sum(best))

    def corollary_of(values):
        out = {}
        for p in P_LEVELS:
            thr = rhs / (p * L)
            count = int(np.sum(np.array(values) <= thr + slack))
            required = (1.0 - p) * L
            out[p] = {"threshold": thr, "count": count, "required": required,
                      "holds": bool(count >= required - 1e-12)}
        return out

    return BottleneckRecord(kappa, rm, c1, log_term, rhs, [float(r) for r in residuals], total, slack,
                            bool(total <= rhs + slack), [int(v) for v in n_t], mismatch, corollary_of(residuals),
                            kappa == 0, tau, [float(r) for r in best], best_total,
                            bool(best_total <= rhs + slack), corollary_of(best))


# ---------------------------------------------------------------------------
# Bounded activations
# ---------------------------------------------------------------------------


@dataclass
class ActivationRecord:
    activation_norms: list[float]  # ||alpha_{l-1}(x0)||^2, l = 1..L
    total: float
    c: float
    k: int
    c1: float
    log_pdet: float
    rhs_main: float  # c e^{c1/k} / (k |Jf|_+^{2/k}) * L
    rhs_clamped: float  # with e^{max(c1, 0)/k}
    rhs_full: float  # with e^{c1/R} e^{L(m_max R / k - 1)}
    holds_main: bool
    holds_clamped: bool
    holds_full: bool
    fractions: dict  # p -> fraction of layers with ||alpha||^2 <= rhs_main / (p L)
    balancedness: list[float]
    balanced: bool


def activation_profile(params: NetworkParams, x0: np.ndarray, tau: float = TAU_RANK,
                       c_ntk: float | None = None, balance_tol: float = 1e-3,
                       allow_pooling: bool = False) -> ActivationRecord:
    """Activation norms along the network against the bounded-activation bound."""
    pool = params.pooling
    if not pool.is_identity and not allow_pooling:
        raise ValueError("the bounded-activation bound assumes a network without pooling; "
                         "pass a no-pooling network (or allow_pooling=True for diagnostics)")
    L = params.depth
    trace = forward(params, x0)
    acts = [float(np.sum(trace.activations[ell] ** 2)) for ell in range(L)]
    if c_ntk is None:
        c_ntk = ntk_trace(params, x0) / L
    J = input_jacobian(params, x0)
    s = np.linalg.svd(J, compute_uv=False)
    nz = s > tau * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    k = int(nz.sum())
    log_pdet = float(np.sum(np.log(s[nz])))
    theta = params.norm_sq()
    if is_constant_input(x0):
        R = rank_m(constant_jacobian_svd(params, x0), pool, tau)
    else:
        R = float(k)
    c1 = theta - L * R
    if k == 0:
        rhs_s = rhs_c = rhs_a = math.inf
    else:
        base = c_ntk / k * math.exp(-2.0 * log_pdet / k) * L
        rhs_s = base * math.exp(c1 / k)
        rhs_c = base * math.exp(max(c1, 0.0) / k)
        rhs_a = base * math.exp(c1 / R + L * (pool.m_tilde_max * R / k - 1.0))
    total = float(np.sum(acts))
    fr = {}
    for p in (0.1, 0.5):
        thr = rhs_s / (p * L)
        fr[p] = float(np.mean(np.array(acts) <= thr))
    if L >= 2:
        bal = balancedness_residuals(params)
        scale = float(np.mean(params.layer_norms()))
        balanced = bool(np.max(np.abs(bal)) <= balance_tol * scale)
        bal_list = [float(v) for v in bal]
    else:
        bal_list, balanced = [], True
    return ActivationRecord(acts, total, float(c_ntk), k, c1, log_pdet, rhs_s, rhs_c, rhs_a,
                          bool(total <= rhs_s), bool(total <= rhs_c), bool(total <= rhs_a),
                          fr, bal_list, balanced)


# ---------------------------------------------------------------------------
# Layer spectra
# ---------------------------------------------------------------------------


SPECTRUM_COLUMNS = ("layer", "freq_index_1", "freq_index_2", "channel", "singular_value", "m_tilde_abs")


def pooled_layer_svd(params: NetworkParams, ell: int) -> FreqSVD:
    """Frequency SVD of ``M W_ell`` (blocks ``m_t B_t``)."""
    f = params.layers[ell - 1]
    mt = params.pooling.m_tilde[..., None, None]
    return svd_of_blocks(mt * frequency_blocks(f), f.spatial_shape)


def layer_spectrum_report(params: NetworkParams) -> list[dict]:
    """Rows ``{layer, freq_index_1, freq_index_2, channel, singular_value, m_tilde_abs}``."""
    rows = []
    mabs = params.pooling.m_tilde_abs.reshape(-1)
    for ell in range(1, params.depth + 1):
        svd = pooled_layer_svd(params, ell)
        for t, label in enumerate(svd.freq_labels()):
            for c in range(svd.values.shape[1]):
                rows.append({
                    "layer": ell,
                    "freq_index_1": label[0],
                    "freq_index_2": label[1] if len(label) > 1 else None,
                    "channel": c + 1,
                    "singular_value": float(svd.values[t, c]),
                    "m_tilde_abs": float(mabs[t]),
                })
    return rows


def spectrum_csv(rows: list[dict]) -> str:
    lines = [",".join(SPECTRUM_COLUMNS)]
    for r in rows:
        vals = []
        for col in SPECTRUM_COLUMNS:
            v = r[col]
            vals.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


@dataclass
class Concentration:
    layer: int
    count: int  # entries needed to reach the mass fraction
    frequencies: frozenset  # 1-based frequencies of those entries
    mass_fraction: float
    total_mass: float


def spectral_concentration(params: NetworkParams, ell: int, mass: float = 0.95) -> Concentration:
    """Smallest set of pooled singular values carrying ``mass`` of ``sum s^2``."""
    svd = pooled_layer_svd(params, ell)
    vals = svd.values.reshape(-1)
    labels = svd.freq_labels()
    r = svd.values.shape[1]
    order = np.argsort(-vals, kind="stable")
    sq = vals[order] ** 2
    tot = float(sq.sum())
    if tot == 0:
        return Concentration(ell, 0, frozenset(), 1.0, 0.0)
    cum = np.cumsum(sq) / tot
    count = int(np.searchsorted(cum, mass - 1e-12) + 1)
    freqs = frozenset(labels[i // r] for i in order[:count])
    return Concentration(ell, count, freqs, float(cum[count - 1]), tot)


def nonconstant_mass_fraction(params: NetworkParams, ell: int) -> float:
    """Share of ``sum s^2(M W_ell)`` outside the constant frequency."""
    svd = pooled_layer_svd(params, ell)
    sq = svd.values ** 2
    tot = float(sq.sum())
    return 0.0 if tot == 0 else float(sq[1:].sum() / tot)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class BoundsReport:
    norm_sq: float
    depth: int
    norm_per_layer: float
    rank_m: float | None
    cbn_upper: float | None
    lower_bound_1: float
    lower_bound_2: float | None
    certified_1: float
    certified_2: float | None
    r1_lower: float | None
    bottleneck: dict | None
    activations: dict | None
    thresholds: dict
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, frozenset, set)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    return obj


def bounds_report(params: NetworkParams, probes: Sequence[np.ndarray], tau: float = TAU_RANK,
                  support: FrequencySupport | None = None) -> BoundsReport:
    """Evaluate every available bound on ``params`` for the given probes."""
    jb = jacobian_lower_bounds(params, probes, tau)
    notes = ["general lower bound divides by max(m_max^2, 1)",
             "bounded-activation bound reported in main, clamped and full forms",
             "R0 = Rank_CBN is not asserted; both sides are reported separately"]
    rm = r1 = None
    wb = ap = None
    if jb.best_constant_probe is not None:
        x0 = probes[jb.best_constant_probe]
        svd = constant_jacobian_svd(params, x0)
        rm = rank_m(svd, params.pooling, tau)
        r1 = r1_lower_bound(svd, params.pooling, tau)
        if math.isfinite(rm):
            wb = asdict(weight_bottleneck_residual(params, x0, tau))
        if params.pooling.is_identity:
            ap = asdict(activation_profile(params, x0, tau))
    else:
        notes.append("no channel-constant probe: constant-input bounds absent")
    cbn = cbn_upper_bound(support, params.pooling) if support is not None else None
    theta = params.norm_sq()
    return BoundsReport(theta, params.depth, theta / params.depth, rm, cbn,
                        jb.bound_general, jb.bound_constant, jb.certified_general,
                        jb.certified_constant, r1, wb, ap,
                        {"tau_rank": tau, "eps_inv": params.pooling.eps_inv}, notes)
