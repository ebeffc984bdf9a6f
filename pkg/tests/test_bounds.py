import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbn.bounds import (
    SPECTRUM_COLUMNS,
    FrequencySupport,
    bounds_report,
    cbn_upper_bound,
    constant_jacobian_svd,
    default_probes,
    inverse_weights,
    jacobian_lower_bounds,
    layer_spectrum_report,
    matrix_rank,
    nonconstant_mass_fraction,
    pooled_layer_svd,
    r1_lower_bound,
    rank_m,
    spectral_concentration,
    spectrum_csv,
    activation_profile,
    weight_bottleneck_residual,
)
from cbn.cnn_core import (
    NetworkParams,
    TrainConfig,
    frequency_blocks,
    init_params,
    input_jacobian,
    pooling_matrix,
    rebalance,
    train,
)
from cbn.constructions import bottleneck_witness, identity_network
from cbn.harness.data import gen_translated_bumps
from cbn.te_linalg import (
    ConvFilter,
    FreqSVD,
    eigenvalues_to_filter,
    frequency_svd,
    log_pseudo_det,
    pooling_operator,
    te_matrix,
)


def low_rank_filter(rng, n, c, rank_per_freq):
    """Filter whose frequency blocks have prescribed ranks (conjugate-consistent)."""
    B = np.zeros((n, c, c), dtype=complex)
    for t in range(n // 2 + 1):
        r = rank_per_freq[t]
        if r == 0:
            continue
        U = rng.standard_normal((c, r))
        V = rng.standard_normal((c, r))
        if 0 < t < n - t:
            U = U + 1j * rng.standard_normal((c, r))
        B[t] = U @ V.T
        B[(-t) % n] = np.conj(B[t])
    w = eigenvalues_to_filter(B, axes=(0,)).real
    return ConvFilter(w)


def two_point_pooling():
    # eigenvalues (1, 1/2) on n = 2
    return pooling_operator("custom", m=np.array([0.75, 0.25]))


class TestRankM:
    def test_identity_pooling_is_matrix_rank(self):
        rng = np.random.default_rng(0)
        f = low_rank_filter(rng, 5, 3, [1, 1, 0])
        svd = frequency_svd(f)
        pool = pooling_operator("identity", n=5)
        assert rank_m(svd, pool) == 3 == matrix_rank(te_matrix(f).dense)

    def test_two_frequencies(self):
        pool = two_point_pooling()
        np.testing.assert_allclose(pool.m_tilde, [1.0, 0.5])
        f = ConvFilter(np.array([1.0, 0.3]).reshape(2, 1, 1))
        assert rank_m(frequency_svd(f), pool) == pytest.approx(5.0)

    def test_zero(self):
        assert rank_m(frequency_svd(ConvFilter(np.zeros((4, 2, 2)))), pooling_operator("identity", n=4)) == 0

    def test_non_invertible_is_inf(self):
        pool = pooling_operator("blend_avg3", 1.0, n=3, require_invertible=False)
        assert rank_m(frequency_svd(ConvFilter.impulse(3, 1)), pool) == math.inf

    def test_non_invertible_frequency_unused(self):
        pool = pooling_operator("blend_avg3", 1.0, n=3, require_invertible=False)
        f = ConvFilter(np.full((3, 1, 1), 1 / 3))  # only the constant frequency survives
        assert rank_m(frequency_svd(f), pool) == pytest.approx(1.0)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            rank_m(frequency_svd(ConvFilter.impulse(3, 1)), pooling_operator("identity", n=4))

    def test_random_matrices_identity_pooling(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 7))
            c = int(rng.integers(1, 4))
            ranks = rng.integers(0, c + 1, n // 2 + 1)
            f = low_rank_filter(rng, n, c, ranks)
            assert rank_m(frequency_svd(f), pooling_operator("identity", n=n)) == matrix_rank(te_matrix(f).dense)

    @settings(max_examples=40)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0, 0.6))
    def test_monotone_in_support(self, seed, beta):
        rng = np.random.default_rng(seed)
        n, c = 6, 2
        pool = pooling_operator("blend_avg3", beta, n=n)
        small = rng.integers(0, c + 1, n // 2 + 1)
        big = np.minimum(small + rng.integers(0, 2, n // 2 + 1), c)
        a = rank_m(frequency_svd(low_rank_filter(rng, n, c, small)), pool)
        b = rank_m(frequency_svd(low_rank_filter(rng, n, c, big)), pool)
        assert b >= a - 1e-12

    def test_inverse_weights(self):
        w = inverse_weights(two_point_pooling())
        np.testing.assert_allclose(w, [1.0, 4.0])


class TestCBNUpperBound:
    def test_identity_full_support(self):
        n, c = 6, 3
        sup = FrequencySupport([range(1, n + 1)] * c, n)
        pool = pooling_operator("identity", n=n)
        assert cbn_upper_bound(sup, pool) == pytest.approx(c * n) == pytest.approx(c * pool.m_bar)

    def test_constant_frequency(self):
        assert cbn_upper_bound(FrequencySupport([[1]], 5), pooling_operator("blend_avg3", 0.3, n=5)) == pytest.approx(1.0)

    def test_embedding_support(self):
        n, c_in = 8, 2
        pool = pooling_operator("blend_avg3", 0.5, n=n)
        sup = FrequencySupport([[1]] * (n * c_in) + [[2]], n)
        mt = pool.m_tilde_abs
        assert cbn_upper_bound(sup, pool) == pytest.approx(mt[1] ** -2 + n * c_in * mt[0] ** -2)

    def test_2d(self):
        pool = pooling_operator("blend_avg3", 0.5, n=(4, 4))
        sup = FrequencySupport([[(1, 1), (2, 1)]], (4, 4))
        mt = pool.m_tilde_abs
        assert cbn_upper_bound(sup, pool) == pytest.approx(mt[0, 0] ** -2 + mt[1, 0] ** -2)

    def test_validation(self):
        with pytest.raises(ValueError):
            FrequencySupport([[]], 4)
        with pytest.raises(ValueError):
            FrequencySupport([[5]], 4)
        with pytest.raises(ValueError):
            FrequencySupport([[(1, 1)]], 4)

    def test_from_signals(self):
        x = np.zeros((1, 8, 2))
        x[0, :, 0] = 1.0
        x[0, :, 1] = np.cos(2 * np.pi * np.arange(8) / 8)
        sup = FrequencySupport.from_signals(x, 8)
        assert sup.channels == [frozenset({(1,)}), frozenset({(2,), (8,)})]

    @given(st.lists(st.sets(st.integers(1, 6), min_size=1), min_size=1, max_size=3), st.integers(1, 6))
    def test_monotone(self, sets, extra):
        pool = pooling_operator("blend_avg3", 0.4, n=6)
        a = cbn_upper_bound(FrequencySupport(sets, 6), pool)
        grown = [s | {extra} for s in sets]
        assert cbn_upper_bound(FrequencySupport(grown, 6), pool) >= a


class TestJacobianBounds:
    def test_zero_network(self):
        p = NetworkParams([ConvFilter(np.zeros((4, 2, 1))), ConvFilter(np.zeros((4, 1, 2)))],
                          pooling_operator("blend_avg3", 0.5, n=4))
        jb = jacobian_lower_bounds(p, [np.ones((4, 1))])
        assert jb.bound_general == 0 and jb.bound_constant == 0

    def test_identity_network_squeeze(self):
        pool = pooling_operator("blend_avg3", 0.25, n=8)
        c = 2
        gaps = []
        for depth in (4, 8, 16):
            net = identity_network(8, c, depth, pool)
            jb = jacobian_lower_bounds(net, [np.full((8, c), 0.3)])
            assert jb.bound_constant == pytest.approx(c * pool.m_bar, rel=1e-9)
            gaps.append(net.norm_sq() / depth - jb.bound_constant)
        assert all(g >= 0 for g in gaps)
        assert gaps[0] > gaps[1] > gaps[2]

    def test_no_constant_probe(self):
        net = identity_network(5, 1, 3, pooling_operator("identity", n=5))
        x = np.linspace(0, 0.5, 5).reshape(5, 1)
        jb = jacobian_lower_bounds(net, [x])
        assert jb.bound_constant is None and jb.num_constant_probes == 0
        assert jb.bound_general == 5

    def test_general_bound_uses_guard(self):
        pool = pooling_operator("custom", m=np.array([1.5, 0.0, 0.0, 0.0]))  # m_max = 1.5
        net = NetworkParams([ConvFilter.impulse(4, 1, 1), ConvFilter.impulse(4, 1, 1)], pool)
        jb = jacobian_lower_bounds(net, [np.linspace(1, 2, 4).reshape(4, 1)])
        assert jb.guard == pytest.approx(2.25)
        assert jb.bound_general == pytest.approx(4 / 2.25)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 0.6), st.integers(1, 4))
    def test_certified_forms_bound_norm(self, seed, beta, depth):
        rng = np.random.default_rng(seed)
        pool = pooling_operator("blend_avg3", beta, n=5)
        p = init_params(5, [2] + [3] * (depth - 1) + [2], pool, float(rng.uniform(0.2, 3)), seed % 1000)
        for f in p.layers:
            f.b[:] = rng.standard_normal(f.b.shape)
        probes = [rng.standard_normal((5, 2)), np.broadcast_to(rng.standard_normal(2), (5, 2)).copy()]
        jb = jacobian_lower_bounds(p, probes)
        bound = p.norm_sq() / p.depth
        assert jb.certified_general <= bound * (1 + 1e-9)
        assert jb.certified_constant <= bound * (1 + 1e-9)

    def test_empty_probes(self):
        with pytest.raises(ValueError):
            jacobian_lower_bounds(identity_network(4, 1, 2), [])

    def test_default_probes_are_constant(self):
        x = np.random.default_rng(2).uniform(size=(6, 5, 2))
        probes = default_probes(x)
        assert all(np.all(p == p[:1]) for p in probes)
        np.testing.assert_allclose(probes[0][0], x.mean(axis=(0, 1)))


class TestR1:
    def test_unit_products(self):
        pool = two_point_pooling()
        svd = FreqSVD((2,), np.array([[1.0], [2.0]]), np.ones((2, 1, 1)), np.ones((2, 1, 1)))
        assert r1_lower_bound(svd, pool) == pytest.approx(0.0)

    def test_single_value(self):
        pool = pooling_operator("identity", n=3)
        svd = FreqSVD((3,), np.array([[math.e], [0.0], [0.0]]), np.ones((3, 1, 1)), np.ones((3, 1, 1)))
        assert r1_lower_bound(svd, pool) == pytest.approx(2.0)

    def test_identity_pooling_is_log_pdet(self):
        rng = np.random.default_rng(3)
        pool = pooling_operator("identity", n=6)
        p = init_params(6, [2, 3, 2], pool, 1.0, 1)
        for f in p.layers:
            f.b[:] = 1.0
        x = np.full((6, 2), 0.4)
        svd = constant_jacobian_svd(p, x)
        s = np.linalg.svd(input_jacobian(p, x), compute_uv=False)
        s = s[s > 1e-6 * s[0]]
        assert r1_lower_bound(svd, pool) == pytest.approx(2 * np.sum(np.log(s)))
        assert r1_lower_bound(svd, pool) == pytest.approx(2 * log_pseudo_det(svd))
        del rng


class TestWeightBottleneck:
    @pytest.mark.parametrize("beta", [0.0, 0.25, 0.5])
    def test_identity_network(self, beta):
        pool = pooling_operator("blend_avg3", beta, n=6)
        depth = 12
        net = identity_network(6, 2, depth, pool, readout="impulse")
        rec = weight_bottleneck_residual(net, np.full((6, 2), 0.2))
        assert rec.holds and not rec.degenerate
        assert rec.kappa == 12
        np.testing.assert_allclose(rec.residuals[1:depth - 1], 0.0, atol=1e-18)
        assert rec.corollary[0.25]["holds"]

    def test_identity_singular_values_are_inverse_pooling(self):
        pool = pooling_operator("blend_avg3", 0.5, n=6)
        net = identity_network(6, 1, 5, pool, readout="impulse")
        for ell in range(2, 5):
            s = frequency_svd(net.layers[ell - 1]).values[:, 0]
            np.testing.assert_allclose(s, 1 / pool.m_tilde_abs, rtol=1e-12)

    def test_balanced_identity(self):
        pool = pooling_operator("blend_avg3", 0.4, n=8)
        rec = weight_bottleneck_residual(identity_network(8, 2, 10, pool), np.full((8, 2), 0.5))
        assert rec.holds

    def test_zero_network_degenerate(self):
        p = NetworkParams([ConvFilter(np.zeros((4, 2, 1))), ConvFilter(np.zeros((4, 1, 2)))],
                          pooling_operator("identity", n=4))
        rec = weight_bottleneck_residual(p, np.ones((4, 1)))
        assert rec.degenerate and rec.kappa == 0
        assert rec.residuals == list(p.layer_norms())

    def test_trained_autoencoder(self):
        ds = gen_translated_bumps(12, 8, 2.0, seed=0)
        pool = pooling_operator("blend_avg3", 0.25, n=8)
        p0 = init_params(8, [1, 6, 6, 6, 6, 1], pool, 1.0, 0)
        p, _ = train(p0, ds.inputs, ds.targets, TrainConfig(lam=1e-3, lr=0.01, steps=600, optimizer="momentum"))
        x0 = default_probes(ds.inputs)[0]
        rec = weight_bottleneck_residual(p, x0)
        assert rec.total_residual <= rec.rhs + rec.slack
        assert rec.corollary[0.25]["holds"]
        assert rec.holds_best and rec.corollary_best[0.25]["holds"]

    def test_best_factors_oracle(self):
        # brute force: rank n_t factors from the SVD of each block, singular values |m_t|^-1
        pool = pooling_operator("blend_avg3", 0.3, n=6)
        p = init_params(6, [2, 3, 3, 2], pool, 1.0, 3)
        rec = weight_bottleneck_residual(p, np.full((6, 2), 0.4))
        minv = 1 / pool.m_tilde_abs.reshape(-1)
        for ell, f in enumerate(p.layers):
            B = frequency_blocks(f).reshape((6,) + f.w.shape[-2:])
            want = float(np.sum(f.b ** 2))
            for t in range(6):
                U, _, Vh = np.linalg.svd(B[t])
                k = rec.per_freq_rank[t]
                want += np.sum(np.abs(B[t] - (U[:, :k] * minv[t]) @ Vh[:k]) ** 2)
            assert rec.best_residuals[ell] == pytest.approx(want, rel=1e-10, abs=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_best_never_exceeds_projection(self, seed):
        pool = pooling_operator("blend_avg3", 0.25, n=5)
        p = init_params(5, [1, 3, 2, 1], pool, 1.0, seed)
        rec = weight_bottleneck_residual(p, np.full((5, 1), 0.5))
        assert np.all(np.array(rec.best_residuals) <= np.array(rec.residuals) + 1e-9)

    def test_misaligned_witness(self):
        # width-2 identity layers carry a rank-1 Jacobian: the forward image and
        # backward row space differ, so the projection factors overshoot the bound
        pool = pooling_operator("blend_avg3", 0.25, n=16)
        g = init_params(16, [1, 4, 2], pool, 1.0, 4)
        h = init_params(16, [2, 3, 1], pool, 1.0, 5)
        net = bottleneck_witness(g, h, FrequencySupport([range(1, 17)] * 2, 16), 6, 3.0).params
        rec = weight_bottleneck_residual(net, np.full((16, 1), 0.5))
        assert not rec.holds and rec.holds_best
        assert rec.best_total < rec.total_residual


class TestActivationProfile:
    def test_identity_network_profile(self):
        net = identity_network(5, 2, 6, pooling_operator("identity", n=5), K=1.0)
        x0 = np.full((5, 2), 0.3)
        rec = activation_profile(net, x0)
        # hidden activations are x0 + K in every layer
        np.testing.assert_allclose(rec.activation_norms[1:], 10 * 1.3 ** 2)
        assert rec.activation_norms[0] == pytest.approx(10 * 0.09)
        assert rec.k == 10

    def test_single_layer(self):
        net = NetworkParams([ConvFilter.impulse(4, 1)], pooling_operator("identity", n=4))
        rec = activation_profile(net, np.ones((4, 1)))
        assert len(rec.activation_norms) == 1 and rec.balanced

    def test_refuses_pooling(self):
        net = identity_network(5, 1, 3, pooling_operator("blend_avg3", 0.3, n=5))
        with pytest.raises(ValueError, match="without pooling"):
            activation_profile(net, np.ones((5, 1)))
        activation_profile(net, np.ones((5, 1)), allow_pooling=True)

    def test_forms_coincide_without_pooling(self):
        net = identity_network(4, 1, 4, pooling_operator("identity", n=4))
        rec = activation_profile(net, np.full((4, 1), 0.5))
        assert rec.rhs_main == pytest.approx(rec.rhs_full)

    def test_trained_balanced(self):
        ds = gen_translated_bumps(16, 8, 2.0, seed=1)
        p0 = init_params(8, [1, 6, 6, 6, 1], pooling_operator("identity", n=8), 1.0, 0)
        p, _ = train(p0, ds.inputs, ds.targets, TrainConfig(lam=1e-3, lr=0.01, steps=600, optimizer="momentum"))
        q = rebalance(p)
        rec = activation_profile(q, default_probes(ds.inputs)[0])
        assert rec.balanced
        assert rec.total <= rec.rhs_main


class TestSpectrum:
    def test_impulse_layers(self):
        p = NetworkParams([ConvFilter.impulse(4, 2), ConvFilter.impulse(4, 2)], pooling_operator("identity", n=4))
        rows = layer_spectrum_report(p)
        assert len(rows) == 16
        assert all(r["singular_value"] == pytest.approx(1.0) for r in rows)

    def test_identity_network_layers(self):
        pool = pooling_operator("blend_avg3", 0.5, n=6)
        net = identity_network(6, 2, 4, pool, readout="impulse")
        for ell in range(1, 4):
            np.testing.assert_allclose(pooled_layer_svd(net, ell).values, 1.0, atol=1e-12)

    def test_totals(self):
        pool = pooling_operator("blend_avg3", 0.3, n=(3, 4))
        p = init_params((3, 4), [2, 3, 1], pool, 1.0, 4)
        rows = layer_spectrum_report(p)
        for ell, f in enumerate(p.layers, start=1):
            tot = sum(r["singular_value"] ** 2 for r in rows if r["layer"] == ell)
            dense = pooling_matrix(pool, f.c_out) @ te_matrix(f).dense
            assert tot == pytest.approx(np.sum(dense ** 2), abs=1e-9)

    def test_csv(self):
        p = init_params(4, [1, 2, 1], pooling_operator("blend_avg3", 0.5, n=4), 1.0, 0)
        text = spectrum_csv(layer_spectrum_report(p))
        lines = text.split("\n")
        assert lines[0] == ",".join(SPECTRUM_COLUMNS)
        assert text.endswith("\n") and "\r" not in text
        assert len(lines) == 1 + 4 * 1 + 4 * 1 + 1
        assert text == spectrum_csv(layer_spectrum_report(p))
        assert lines[1].startswith("1,1,,1,")

    def test_concentration(self):
        w = np.zeros((8, 1, 1))
        w[:, 0, 0] = np.cos(2 * np.pi * np.arange(8) / 8)
        p = NetworkParams([ConvFilter(w)], pooling_operator("identity", n=8))
        c = spectral_concentration(p, 1)
        assert c.count == 2 and c.frequencies == frozenset({(2,), (8,)})
        assert nonconstant_mass_fraction(p, 1) == pytest.approx(1.0)
        q = NetworkParams([ConvFilter(np.ones((8, 1, 1)))], pooling_operator("identity", n=8))
        assert nonconstant_mass_fraction(q, 1) == pytest.approx(0.0)


class TestReport:
    def test_json(self):
        pool = pooling_operator("blend_avg3", 0.5, n=6)
        net = identity_network(6, 1, 4, pool)
        sup = FrequencySupport([range(1, 7)], 6)
        rep = bounds_report(net, [np.full((6, 1), 0.5)], support=sup)
        d = json.loads(rep.to_json())
        assert d["rank_m"] == pytest.approx(pool.m_bar)
        assert d["cbn_upper"] == pytest.approx(pool.m_bar)
        assert d["bottleneck"]["holds"] is True
        assert d["activations"] is None
        assert d["thresholds"]["tau_rank"] == 1e-6

    def test_identity_pooling_has_activation_record(self):
        net = identity_network(4, 1, 3)
        d = bounds_report(net, [np.full((4, 1), 0.5)]).to_dict()
        assert d["activations"]["holds_main"] is True

    def test_without_constant_probe(self):
        net = identity_network(4, 1, 3)
        rep = bounds_report(net, [np.linspace(0, 1, 4).reshape(4, 1)])
        assert rep.rank_m is None and rep.bottleneck is None
        assert any("no channel-constant probe" in n for n in rep.notes)
