"""Tests for the capsule network, routing and losses."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capslid import autodiff as ad
from capslid import model as M
from capslid.errors import LabelOutOfRange, ShapeMismatch
from oracles import routing_oracle

SMALL = M.ModelConfig(conv1_channels=8, primary_banks=4, mid_caps=8, lang_dim=8, decoder_hidden=(16, 32))
NO_RECON = M.MarginLossConfig(recon_weight=0.0)


def image(seed=0):
    return np.random.default_rng(seed).random((32, 25))


def numpy_decoder(v, p):
    h = np.maximum(v @ p["dec1.w"] + p["dec1.b"], 0)
    h = np.maximum(h @ p["dec2.w"] + p["dec2.b"], 0)
    return 1 / (1 + np.exp(-(h @ p["dec3.w"] + p["dec3.b"])))


class TestSquash:
    def test_zero(self):
        np.testing.assert_array_equal(M.squash(np.zeros(4)), np.zeros(4))

    def test_unit_norm_halves(self):
        s = np.array([0.6, 0.8])
        np.testing.assert_allclose(M.squash(s), 0.5 * s, atol=1e-15)

    def test_norm_three(self):
        s = np.array([3.0, 0.0, 0.0])
        assert np.linalg.norm(M.squash(s)) == pytest.approx(0.9, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=16))
    def test_bound_and_direction(self, values):
        s = np.array(values)
        v = M.squash(s)
        n = np.linalg.norm(s)
        assert np.linalg.norm(v) < 1.0
        if n > 1e-6:
            cos = v @ s / (np.linalg.norm(v) * n)
            assert cos == pytest.approx(1.0, abs=1e-12)


class TestRouting:
    def test_single_output(self):
        u = np.random.default_rng(0).normal(size=(6, 1, 4))
        v, c = M.dynamic_routing(u, 3)
        np.testing.assert_array_equal(c, np.ones((6, 1)))
        np.testing.assert_allclose(v[0], M.squash(u[:, 0].sum(axis=0)), atol=1e-15)

    def test_identical_predictions_stay_uniform(self):
        row = np.random.default_rng(1).normal(size=(5, 1, 3))
        u = np.repeat(row, 4, axis=1)
        g = ad.Graph()
        res = M.route(g.constant(u[None]), 3)
        for c in res.couplings:
            np.testing.assert_allclose(c, np.full((1, 5, 4), 0.25), atol=1e-15)

    def test_hand_stepped_oracle(self):
        u = np.random.default_rng(42).normal(size=(2, 2, 2))
        v_ref, c_ref = routing_oracle(u, 3)
        g = ad.Graph()
        res = M.route(g.constant(u[None]), 3)
        np.testing.assert_allclose(res.outputs.value[0], v_ref, atol=1e-12, rtol=0)
        for got, want in zip(res.couplings, c_ref):
            np.testing.assert_allclose(got[0], want, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("iterations", [1, 2, 5])
    def test_oracle_other_iterations(self, iterations):
        u = np.random.default_rng(iterations).normal(size=(7, 3, 4))
        v, _ = M.dynamic_routing(u, iterations)
        np.testing.assert_allclose(v, routing_oracle(u, iterations)[0], atol=1e-12)

    def test_coupling_simplex(self):
        rng = np.random.default_rng(3)
        g = ad.Graph()
        res = M.route(g.constant(rng.normal(size=(3, 10, 6, 5)) * 3), 4)
        for c in res.couplings:
            assert np.all(c >= 0)
            np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-9)

    def test_zero_iterations_rejected(self):
        g = ad.Graph()
        with pytest.raises(ValueError):
            M.route(g.constant(np.zeros((1, 2, 2, 2))), 0)


class TestConfig:
    def test_default_geometry(self):
        cfg = M.ModelConfig()
        assert cfg.conv1_shape == (24, 17)
        assert cfg.primary_grid == (8, 5)
        assert cfg.n_primary == 8 * 5 * 32

    def test_dict_round_trip(self):
        assert M.ModelConfig.from_dict(SMALL.to_dict()) == SMALL

    def test_margin_config_validation(self):
        with pytest.raises(ValueError):
            M.MarginLossConfig(m_plus=0.1, m_minus=0.9)

    def test_param_shapes(self):
        shapes = M.param_shapes(M.ModelConfig())
        assert shapes["conv1.w"] == (9, 9, 1, 128)
        assert shapes["primary.w"] == (9, 9, 128, 256)
        assert shapes["lang.w"] == (32, 5, 16, 8)
        assert shapes["dec3.w"] == (1024, 800)


class TestForward:
    def test_default_model(self):
        cfg = M.ModelConfig()
        out = M.forward(M.init_params(cfg, 0), image(), cfg)
        assert out.norms.shape == (1, 5)
        assert out.lang_vectors.shape == (1, 5, 16)
        assert np.all((out.norms >= 0) & (out.norms < 1))

    def test_primary_grid(self):
        g = ad.Graph()
        enc = M.encode(g, g.parameters_from(M.init_params(SMALL, 0)), image()[None], SMALL)
        conv = [n for n in g.nodes if n.kind == "conv2d_valid"]
        assert conv[0].shape == (1, 24, 17, 8)
        assert conv[1].shape == (1, 8, 5, 4 * 8)
        assert enc.primary.shape == (1, 160, 8)

    def test_zero_params(self):
        out = M.forward(M.zero_params(SMALL), image(), SMALL)
        np.testing.assert_array_equal(out.norms, np.zeros((1, 5)))

    def test_batch_matches_single(self):
        p = M.init_params(SMALL, 1)
        x = np.stack([image(1), image(2)])
        both = M.forward(p, x, SMALL).norms
        np.testing.assert_allclose(both[1], M.forward(p, x[1], SMALL).norms[0], atol=1e-13)

    def test_bad_shape(self):
        with pytest.raises(ShapeMismatch):
            M.forward(M.init_params(SMALL, 0), np.zeros((25, 32)), SMALL)

    def test_check_params(self):
        p = M.init_params(SMALL, 0)
        p["lang.w"] = p["lang.w"][:, :4]
        with pytest.raises(ShapeMismatch):
            M.check_params(p, SMALL)

    def test_init_keeps_norms_alive(self):
        out = M.forward(M.init_params(SMALL, 0), image(), SMALL)
        assert out.norms.min() > 0.05

    def test_monotone_transform_keeps_argmax(self):
        norms = M.forward(M.init_params(SMALL, 2), np.stack([image(k) for k in range(4)]), SMALL).norms
        for f in (np.sqrt, np.exp, lambda x: 3 * x - 1):
            np.testing.assert_array_equal(np.argmax(f(norms), axis=1), np.argmax(norms, axis=1))


class TestReconstruct:
    def test_zero_weights_give_half(self):
        out = M.reconstruct(np.ones(8), M.zero_params(SMALL), SMALL)
        assert out.shape == (32, 25)
        assert np.all(out == 0.5)

    def test_matches_numpy_decoder(self):
        p = M.init_params(SMALL, 3)
        v = np.random.default_rng(0).normal(size=8)
        np.testing.assert_allclose(M.reconstruct(v, p, SMALL).ravel(), numpy_decoder(v, p), atol=1e-13)

    def test_perfect_reconstruction_error(self):
        x = image()
        assert M.reconstruction_error(x, x) == 0.0


class TestMarginLoss:
    def test_ideal(self):
        assert M.margin_loss([0.95, 0.05, 0.05, 0.05, 0.05], 0) == 0.0

    def test_all_zero(self):
        assert M.margin_loss([0.0] * 5, 2) == pytest.approx(0.81, abs=1e-15)

    def test_one_wrong_capsule(self):
        assert M.margin_loss([0.95, 0.6, 0.05, 0.05, 0.05], 0) == pytest.approx(0.125, abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            M.margin_loss([0.1] * 5, 5)
        with pytest.raises(LabelOutOfRange):
            M.one_hot([-1], 5)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1, exclude_max=True), min_size=5, max_size=5), st.integers(0, 4))
    def test_zero_iff_hinges_inactive(self, norms, label):
        loss = M.margin_loss(norms, label)
        assert loss >= 0
        others = [n for c, n in enumerate(norms) if c != label]
        inactive = norms[label] >= 0.9 and all(n <= 0.1 for n in others)
        assert (loss == 0) == inactive

    def test_node_matches_numpy(self):
        norms = np.random.default_rng(0).random((4, 5))
        labels = [0, 3, 1, 4]
        g = ad.Graph()
        node = M.margin_loss_node(g.constant(norms), M.one_hot(labels, 5), M.MarginLossConfig())
        expected = sum(M.margin_loss(n, y) for n, y in zip(norms, labels))
        assert float(node.value) == pytest.approx(expected, abs=1e-14)


class TestTotalLoss:
    def test_independent_terms(self):
        p = M.init_params(SMALL, 4)
        x = image(4)
        cfg = M.MarginLossConfig()
        out = M.forward(p, x, SMALL)
        norms, vec = out.norms[0], out.lang_vectors[0]
        label = 2
        t = np.eye(5)[label]
        margin = np.sum(t * np.maximum(0, 0.9 - norms) ** 2 + 0.5 * (1 - t) * np.maximum(0, norms - 0.1) ** 2)
        recon = np.sum((numpy_decoder(vec[label], p) - x.ravel()) ** 2)
        oracle = margin + 0.0005 * recon
        assert M.total_loss(x, out, label, p, cfg, SMALL) == pytest.approx(oracle, rel=1e-12)
        lg = M.build_loss(p, x, [label], SMALL, cfg)
        assert float(lg.loss.value) == pytest.approx(oracle, rel=1e-12)

    def test_no_recon_equals_margin(self):
        p = M.init_params(SMALL, 5)
        out = M.forward(p, image(5), SMALL)
        assert M.total_loss(image(5), out, 1, p, NO_RECON, SMALL) == M.margin_loss(out.norms[0], 1, NO_RECON)

    def test_perfect_is_zero(self):
        p = M.zero_params(SMALL)
        x = np.full((32, 25), 0.5)
        out = M.CapsuleOutputs(np.zeros((1, 5, 8)), np.array([[0.95, 0.0, 0.0, 0.05, 0.1]]))
        assert M.total_loss(x, out, 0, p, M.MarginLossConfig(), SMALL) == 0.0

    def test_batch_sums(self):
        p = M.init_params(SMALL, 6)
        x = np.stack([image(6), image(7)])
        both = float(M.build_loss(p, x, [0, 4], SMALL).loss.value)
        single = sum(float(M.build_loss(p, x[k], [y], SMALL).loss.value) for k, y in enumerate([0, 4]))
        assert both == pytest.approx(single, rel=1e-12)

    def test_label_count_mismatch(self):
        with pytest.raises(ShapeMismatch):
            M.build_loss(M.init_params(SMALL, 0), image(), [0, 1], SMALL)

    def test_permutation_equivariance(self):
        p = M.init_params(SMALL, 8)
        x = image(8)
        perm = np.array([3, 0, 4, 1, 2])
        q = dict(p)
        q["lang.w"] = p["lang.w"][:, perm]
        base = M.forward(p, x, SMALL)
        moved = M.forward(q, x, SMALL)
        np.testing.assert_allclose(moved.norms[0], base.norms[0][perm], atol=1e-13)
        label = 1
        new_label = int(np.nonzero(perm == label)[0][0])
        a = float(M.build_loss(p, x, [label], SMALL).loss.value)
        b = float(M.build_loss(q, x, [new_label], SMALL).loss.value)
        assert b == pytest.approx(a, rel=1e-12)


class TestGradient:
    def test_reduced_model_single_seed(self):
        cfg = M.ModelConfig(conv1_channels=8, primary_banks=4, mid_caps=8, lang_dim=8)
        rng = np.random.default_rng(11)
        p = M.init_params(cfg, 11)
        x = rng.random((1, 32, 25))

        def loss_fn(params):
            lg = M.build_loss(params, x, [3], cfg)
            return lg.graph, lg.loss

        rep = ad.finite_diff_check(loss_fn, p, ad.sample_entries(p, 8, rng))
        assert rep.passed, rep.rel_error
