import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbn.bounds import FrequencySupport, cbn_upper_bound, jacobian_lower_bounds, nonconstant_mass_fraction
from cbn.cnn_core import NetworkParams, init_params, predict
from cbn.constructions import (
    FCNetwork,
    balanced_split,
    bottleneck_witness,
    channelwise_filter,
    check_positive,
    check_translational_uniqueness,
    compose,
    embedding_support,
    fc_reference,
    fc_to_cnn,
    identity_accounting,
    identity_network,
    parallel_sum,
    parallel_sum_norm,
    pooled_inverse,
    support_projection_filter,
    unique_embedding,
)
from cbn.harness.data import gen_translated_bumps
from cbn.te_linalg import (
    ConvFilter,
    circulant_eigenvalues,
    frequency_blocks,
    num_pixels,
    pooling_operator,
    translate,
)


def randomize_biases(p, rng, scale=0.3):
    for f in p.layers:
        f.b[:] = rng.standard_normal(f.b.shape) * scale
    return p


class TestIdentityNetwork:
    @pytest.mark.parametrize("n", [8, (5, 6), 2])
    @pytest.mark.parametrize("beta", [0.0, 0.25, 0.5, 0.9])
    @pytest.mark.parametrize("depth", [1, 2, 3, 7])
    def test_function_and_accounting(self, n, beta, depth):
        pool = pooling_operator("blend_avg3", beta, n=n)
        c = 2
        net = identity_network(n, c, depth, pool)
        shape = pool.spatial_shape
        x = np.random.default_rng(0).uniform(-1, 1, (3,) + shape + (c,))
        np.testing.assert_allclose(predict(net, x), x, atol=1e-9)
        acc = identity_accounting(n, c, depth, pool)
        assert net.norm_sq() == pytest.approx(acc.total, abs=1e-9)
        # a single layer has no pooling to undo and is the plain impulse
        expected = c * num_pixels(pool.spatial_shape) if depth == 1 else depth * c * pool.m_bar
        assert net.weight_norms().sum() == pytest.approx(expected, rel=1e-12)
        assert acc.weight == pytest.approx(expected, rel=1e-12)

    def test_balanced_layers_have_equal_norms(self):
        pool = pooling_operator("blend_avg3", 0.5, n=8)
        net = identity_network(8, 3, 6, pool)
        wn = net.weight_norms()
        np.testing.assert_allclose(wn, 3 * pool.m_bar, rtol=1e-12)

    def test_impulse_readout(self):
        pool = pooling_operator("blend_avg3", 0.5, n=6)
        net = identity_network(6, 2, 4, pool, readout="impulse")
        acc = identity_accounting(6, 2, 4, pool, readout="impulse")
        assert acc.readout_weight == pytest.approx(2 * 6)
        assert acc.hidden_weight == pytest.approx(3 * 2 * pool.m_bar)
        assert net.norm_sq() == pytest.approx(acc.total)
        x = np.random.default_rng(1).uniform(-1, 1, (2, 6, 2))
        np.testing.assert_allclose(predict(net, x), x, atol=1e-10)

    def test_no_pooling_is_impulses(self):
        net = identity_network(5, 2, 3)
        for f in net.layers:
            np.testing.assert_allclose(f.w, ConvFilter.impulse(5, 2).w, atol=1e-14)

    def test_balanced_split(self):
        pool = pooling_operator("blend_avg3", 0.7, n=9)
        a = balanced_split(pool)
        mt = pool.m_tilde_abs
        assert np.sum(a ** 2 / mt ** 2) == pytest.approx(pool.m_bar)
        assert np.sum(a ** -2.0) == pytest.approx(pool.m_bar)
        np.testing.assert_allclose(balanced_split(pooling_operator("identity", n=4)), 1.0)

    def test_rejects(self):
        with pytest.raises(ValueError):
            identity_network(4, 1, 0)
        with pytest.raises(ValueError):
            identity_network(3, 1, 2, pooling_operator("blend_avg3", 1.0, n=3, require_invertible=False))
        with pytest.raises(ValueError):
            identity_network(4, 1, 2, readout="other")

    def test_squeeze_to_cbn(self):
        pool = pooling_operator("blend_avg3", 0.25, n=16)
        net = identity_network(16, 1, 32, pool)
        jb = jacobian_lower_bounds(net, [np.full((16, 1), 0.5)])
        assert jb.bound_constant == pytest.approx(pool.m_bar, rel=1e-9)
        assert net.norm_sq() / 32 - pool.m_bar <= 0.05 * pool.m_bar


class TestParallelSum:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.floats(0, 0.6))
    def test_function_and_norm(self, seed, depth, beta):
        rng = np.random.default_rng(seed)
        pool = pooling_operator("blend_avg3", beta, n=5)
        wa = [2] + list(rng.integers(1, 4, depth - 1)) + [2]
        wb = [2] + list(rng.integers(1, 4, depth - 1)) + [2]
        a = randomize_biases(init_params(5, wa, pool, 1.0, seed % 97), rng)
        b = randomize_biases(init_params(5, wb, pool, 1.0, seed % 89 + 1), rng)
        s = parallel_sum(a, b)
        x = rng.standard_normal((4, 5, 2))
        np.testing.assert_allclose(predict(s, x), predict(a, x) + predict(b, x), atol=1e-9)
        if depth > 1:
            assert s.weight_norms().sum() == pytest.approx(a.weight_norms().sum() + b.weight_norms().sum(), abs=1e-9)
            assert s.norm_sq() == pytest.approx(parallel_sum_norm(a, b), abs=1e-9)

    def test_incompatible(self):
        pool = pooling_operator("identity", n=4)
        a = init_params(4, [1, 2, 1], pool, 1.0, 0)
        with pytest.raises(ValueError):
            parallel_sum(a, init_params(4, [1, 2, 2, 1], pool, 1.0, 0))
        with pytest.raises(ValueError):
            parallel_sum(a, init_params(5, [1, 2, 1], pooling_operator("identity", n=5), 1.0, 0))
        with pytest.raises(ValueError):
            parallel_sum(a, init_params(4, [1, 2, 1], pooling_operator("blend_avg3", 0.5, n=4), 1.0, 0))


class TestCompose:
    def test_merged(self):
        rng = np.random.default_rng(0)
        pool = pooling_operator("blend_avg3", 0.3, n=6)
        f = randomize_biases(init_params(6, [2, 3, 2], pool, 1.0, 1), rng)
        g = randomize_biases(init_params(6, [2, 4, 1], pool, 1.0, 2), rng)
        h = compose(f, g)
        assert h.depth == 3
        x = rng.standard_normal((5, 6, 2))
        np.testing.assert_allclose(predict(h, x), predict(g, predict(f, x)), atol=1e-10)

    def test_shifted(self):
        rng = np.random.default_rng(1)
        pool = pooling_operator("blend_avg3", 0.3, n=6)
        f = randomize_biases(init_params(6, [2, 3, 2], pool, 1.0, 1), rng)
        g = randomize_biases(init_params(6, [2, 4, 1], pool, 1.0, 2), rng)
        x = rng.uniform(-1, 1, (5, 6, 2))
        K = float(np.max(np.abs(predict(f, x)))) + 0.1
        h = compose(f, g, K=K)
        assert h.depth == 4
        np.testing.assert_allclose(predict(h, x), predict(g, predict(f, x)), atol=1e-10)

    def test_channel_mismatch(self):
        pool = pooling_operator("identity", n=4)
        with pytest.raises(ValueError):
            compose(init_params(4, [1, 2, 3], pool, 1.0, 0), init_params(4, [2, 2, 1], pool, 1.0, 0))

    def test_pooled_inverse(self):
        pool = pooling_operator("blend_avg3", 0.5, n=5)
        f = ConvFilter(np.random.default_rng(2).standard_normal((5, 2, 3)))
        g = pooled_inverse(f, pool)
        np.testing.assert_allclose(frequency_blocks(g) * pool.m_tilde[:, None, None], frequency_blocks(f), atol=1e-12)


class TestBottleneckWitness:
    def _parts(self, beta=0.4, n=8):
        rng = np.random.default_rng(3)
        pool = pooling_operator("blend_avg3", beta, n=n)
        g = randomize_biases(init_params(n, [1, 4, 2], pool, 1.0, 4), rng)
        h = randomize_biases(init_params(n, [2, 3, 1], pool, 1.0, 5), rng)
        return pool, g, h, rng

    @pytest.mark.parametrize("mid", [0, 1, 5])
    def test_full_support(self, mid):
        pool, g, h, rng = self._parts()
        x = rng.uniform(-1, 1, (6, 8, 1))
        K = float(np.max(np.abs(predict(g, x)))) + 0.5
        sup = FrequencySupport([range(1, 9)] * 2, 8)
        wit = bottleneck_witness(g, h, sup, mid, K)
        np.testing.assert_allclose(predict(wit.params, x), predict(h, predict(g, x)), atol=1e-9)
        assert wit.params.depth == g.depth + h.depth + mid
        assert abs(wit.accounting_gap) <= 1e-9
        assert wit.cbn == pytest.approx(2 * pool.m_bar)

    def test_constant_channel_support(self):
        pool, _, h, rng = self._parts()
        # encoder whose outputs are constant along space: one-frequency support
        g = init_params(8, [1, 3, 2], pool, 1.0, 6)
        g.layers[-1].w[:] = g.layers[-1].w.mean(axis=0, keepdims=True)
        x = rng.uniform(-1, 1, (6, 8, 1))
        gx = predict(g, x)
        assert np.allclose(gx, gx[:, :1])
        K = float(np.max(np.abs(gx))) + 0.5
        sup = FrequencySupport([[1], [1]], 8)
        wit = bottleneck_witness(g, h, sup, 4, K)
        np.testing.assert_allclose(predict(wit.params, x), predict(h, gx), atol=1e-9)
        assert wit.cbn == pytest.approx(2 / pool.dc_gain ** 2)
        assert abs(wit.accounting_gap) <= 1e-9

    def test_projection_filter(self):
        pool = pooling_operator("blend_avg3", 0.5, n=6)
        sup = FrequencySupport([[1, 2, 6], [1]], 6)
        f = support_projection_filter(sup, pool)
        B = frequency_blocks(f)
        assert B[0, 0, 0] == pytest.approx(1 / pool.m_tilde[0])
        assert abs(B[3, 0, 0]) < 1e-14 and abs(B[1, 1, 1]) < 1e-14
        assert np.sum(f.w ** 2) == pytest.approx(cbn_upper_bound(sup, pool) / 6)

    def test_rejects_width_mismatch(self):
        pool, g, h, _ = self._parts()
        with pytest.raises(ValueError):
            bottleneck_witness(g, h, FrequencySupport([[1]], 8), 1, 1.0)


class TestFCToCNN:
    @pytest.mark.parametrize("n,c", [(5, 2), ((3, 2), 1), (1, 3)])
    def test_matches_reference(self, n, c):
        rng = np.random.default_rng(7)
        shape = (n,) if isinstance(n, int) else n
        N = int(np.prod(shape))
        for t in range(5):
            fc = FCNetwork.random([N * c, 5, 3], seed=t)
            cnn = fc_to_cnn(fc, n, c)
            x = rng.uniform(0.1, 1.0, (4,) + shape + (c,))
            ref = np.stack([fc_reference(fc, xi) for xi in x])
            np.testing.assert_allclose(predict(cnn, x), ref, atol=1e-9)

    def test_equivariant(self):
        fc = FCNetwork.random([8, 6, 2], seed=1)
        cnn = fc_to_cnn(fc, 4, 2)
        x = np.random.default_rng(0).uniform(0.1, 1, (4, 2))
        np.testing.assert_allclose(predict(cnn, translate(x, 1)), translate(predict(cnn, x), 1), atol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            fc_to_cnn(FCNetwork.random([7, 2], seed=0), 4, 2)
        with pytest.raises(ValueError):
            check_positive(np.array([0.5, 0.0]))
        with pytest.raises(ValueError):
            FCNetwork([np.ones((2, 3))], [np.ones(3)])


class TestUniqueEmbedding:
    def test_recovery_and_support(self):
        ds = gen_translated_bumps(64, 8, 1.5, seed=3)
        emb = unique_embedding(ds.inputs)
        for i in range(0, 64, 7):
            for p in range(8):
                z = emb.embed(i, p)
                np.testing.assert_allclose(emb.G_inverse(z[None])[0], translate(emb.samples[i], p), atol=1e-9)
                spec = np.abs(circulant_eigenvalues(z, axes=(0,)))
                active = spec > 1e-9 * spec.max()
                assert np.all(active[1:, :-1] == 0)
                assert set(np.flatnonzero(active[:, -1])) == {1, 7}

    def test_embedding_equivariance(self):
        ds = gen_translated_bumps(8, 6, 1.5, seed=0)
        emb = unique_embedding(ds.inputs)
        y = translate(emb.samples[2], 4)
        assert emb.locate(y) == (2, (4,))
        np.testing.assert_allclose(emb.G(y), emb.embed(2, 4))
        np.testing.assert_allclose(emb.G(translate(y, 1)), translate(emb.G(y), 1), atol=1e-12)

    def test_support(self):
        emb = unique_embedding(gen_translated_bumps(4, 6, 1.5, seed=0).inputs)
        sup = embedding_support(emb)
        assert sup.k == 6 + 1
        assert sup.channels[-1] == frozenset({(2,)})
        assert embedding_support(emb, one_sided=False).channels[-1] == frozenset({(2,), (6,)})

    def test_rejects_collisions(self):
        x = np.random.default_rng(0).uniform(0.1, 1, (2, 5, 1))
        x[1] = translate(x[0], 2)
        col = check_translational_uniqueness(x)
        assert (col.first, col.second, col.shift) in {(0, 1, (2,)), (1, 0, (3,))}
        with pytest.raises(ValueError, match="translationally unique"):
            unique_embedding(x)
        sym = np.ones((1, 4, 1))
        assert check_translational_uniqueness(sym) is not None

    def test_rejects_small_Z_and_nonpositive(self):
        x = np.random.default_rng(1).uniform(0.1, 2, (2, 5, 1))
        with pytest.raises(ValueError):
            unique_embedding(x, Z=1.0)
        with pytest.raises(ValueError):
            unique_embedding(x - 1.0)


class TestChannelwise:
    def test_channelwise_filter(self):
        k = np.array([1.0, 2.0, 0.0])
        f = channelwise_filter(k, 2)
        assert f.w.shape == (3, 2, 2)
        np.testing.assert_allclose(f.w[:, 0, 0], k)
        assert f.w[1, 0, 1] == 0


def test_classifier_witness_is_constant():
    # a constant-input network has no non-constant mass in any layer
    pool = pooling_operator("blend_avg3", 0.5, n=6)
    w = np.ones((6, 2, 1))
    p = NetworkParams([ConvFilter(w), ConvFilter(np.ones((6, 1, 2)))], pool)
    assert nonconstant_mass_fraction(p, 1) == pytest.approx(0.0, abs=1e-12)
