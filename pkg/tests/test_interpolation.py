"""Interpolation engine: lambda draws, pairing, mixing rules, cutmix."""

import numpy as np
import pytest

from mlti import interpolation as ip
from mlti import learners as ln
from mlti import tasks as tk


@pytest.fixture(scope="module")
def bank():
    return tk.build_bank("gaussian-classes",
                         {"n_classes": 16, "dim": 12, "radius": 3.0, "sigma": 1.0,
                          "train_count": 8, "test_count": 8}, seed=5)


@pytest.fixture(scope="module")
def model(bank):
    return ln.LayeredModel([12, 10, 5], seed=3)


def episode(bank, rng, n_way=5, k=2, q=4):
    return tk.sample_episode(bank, "train", n_way, k, q, rng)


class TestLambda:
    def test_mean_of_symmetric_beta(self):
        rng = np.random.default_rng(0)
        draws = np.array([ip.sample_lambda(2.0, 2.0, rng) for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) < 0.01

    def test_variance_of_beta22(self):
        rng = np.random.default_rng(1)
        draws = np.array([ip.sample_lambda(2.0, 2.0, rng) for _ in range(100_000)])
        assert abs(draws.var() - 0.05) < 0.005

    def test_support(self):
        rng = np.random.default_rng(2)
        draws = np.array([ip.sample_lambda(0.3, 0.7, rng) for _ in range(100_000)])
        assert ((draws >= 0.0) & (draws <= 1.0)).all()

    def test_positive_params_required(self):
        with pytest.raises(ip.InterpolationError):
            ip.sample_lambda(0.0, 1.0, np.random.default_rng(0))


class TestSelection:
    def test_intra_always_self(self):
        cfg = ip.MixConfig(mode="intra", layer_max=1)
        rng = np.random.default_rng(0)
        assert all(ip.select_partner_and_layer(2, 4, cfg, rng).j == 2
                   for _ in range(100))

    def test_both_uniform_over_batch(self):
        cfg = ip.MixConfig(mode="both", layer_max=0)
        rng = np.random.default_rng(1)
        counts = np.zeros(4)
        for _ in range(100_000):
            counts[ip.select_partner_and_layer(1, 4, cfg, rng).j] += 1
        assert np.abs(counts / counts.sum() - 0.25).max() < 0.01

    def test_cross_excludes_self_uniformly(self):
        cfg = ip.MixConfig(mode="cross", layer_max=0)
        rng = np.random.default_rng(2)
        counts = np.zeros(4)
        for _ in range(60_000):
            counts[ip.select_partner_and_layer(1, 4, cfg, rng).j] += 1
        assert counts[1] == 0
        assert np.abs(counts[[0, 2, 3]] / counts.sum() - 1 / 3).max() < 0.01

    def test_layer_uniform(self):
        cfg = ip.MixConfig(mode="both", layer_max=2)
        rng = np.random.default_rng(3)
        counts = np.zeros(3)
        for _ in range(100_000):
            counts[ip.select_partner_and_layer(0, 4, cfg, rng).layer] += 1
        assert np.abs(counts / counts.sum() - 1 / 3).max() < 0.01

    def test_vanilla_consumes_no_randomness(self):
        cfg = ip.MixConfig(mode="vanilla")
        r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
        draw = ip.select_partner_and_layer(2, 4, cfg, r1)
        assert draw.vanilla and draw.j == 2 and draw.layer == 0
        assert r1.integers(0, 1 << 30) == r2.integers(0, 1 << 30)

    def test_cross_batch_of_one_rejected(self):
        cfg = ip.MixConfig(mode="cross", layer_max=0)
        with pytest.raises(ip.InterpolationError, match="batch"):
            ip.select_partner_and_layer(0, 1, cfg, np.random.default_rng(0))


class TestMixLS:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.h_i = rng.standard_normal((6, 3))
        self.h_j = rng.standard_normal((6, 3))
        self.y_i = np.eye(3)[rng.integers(0, 3, 6)]
        self.y_j = np.eye(3)[rng.integers(0, 3, 6)]

    def test_lambda_one_identity_bitwise(self):
        h, y = ip.mix_ls(self.h_i, self.y_i, self.h_j, self.y_j, 1.0, np.arange(6))
        assert np.array_equal(h, self.h_i) and np.array_equal(y, self.y_i)

    def test_lambda_zero_gives_partner_bitwise(self):
        perm = np.array([3, 1, 0, 5, 4, 2])
        h, y = ip.mix_ls(self.h_i, self.y_i, self.h_j, self.y_j, 0.0, perm)
        assert np.array_equal(h, self.h_j[perm]) and np.array_equal(y, self.y_j[perm])

    def test_regression_convex_combination(self):
        h, y = ip.mix_ls(np.zeros((1, 2)), np.array([[0.2]]),
                         np.ones((1, 2)), np.array([[0.8]]), 0.25)
        assert y[0, 0] == pytest.approx(0.65)

    def test_mixed_label_rows_on_simplex(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            lam = float(rng.beta(2, 2))
            _, y = ip.mix_ls(self.h_i, self.y_i, self.h_j, self.y_j, lam,
                             rng.permutation(6))
            assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-9

    def test_incompatible_conventions_rejected(self):
        with pytest.raises(ip.InterpolationError, match="label conventions"):
            ip.mix_ls(self.h_i, self.y_i, self.h_j, np.zeros((6, 1)), 0.5)


class TestMixNLS:
    def test_pairing_must_be_bijection(self):
        feats = [np.zeros((2, 3))] * 3
        with pytest.raises(ip.InterpolationError, match="bijection"):
            ip.mix_nls(feats, feats, np.array([0, 0, 2]), 0.5,
                       np.random.default_rng(0))

    def test_cyclic_pairing_pattern(self):
        rng = np.random.default_rng(6)
        f_i = [np.full((2, 2), r, dtype=float) for r in range(3)]
        f_j = [np.full((2, 2), 10.0 * r) for r in range(3)]
        pi = np.array([1, 2, 0])  # class r of i pairs with class r+1 of j
        mixed, onehot = ip.mix_nls(f_i, f_j, pi, 0.5, rng)
        blocks = mixed.reshape(3, 2, 2)
        for r in range(3):
            expected = 0.5 * r + 0.5 * 10.0 * ((r + 1) % 3)
            assert np.allclose(blocks[r], expected)
        assert np.array_equal(onehot.argmax(axis=1), [0, 0, 1, 1, 2, 2])

    def test_self_mix_identity(self):
        rng = np.random.default_rng(7)
        feats = [rng.standard_normal((3, 4)) for _ in range(2)]
        mixed, onehot = ip.mix_nls(feats, feats, np.arange(2), 0.37, rng,
                                   identity_pairing=True)
        assert np.allclose(mixed, np.concatenate(feats), atol=0)
        assert np.array_equal(onehot.sum(axis=0), [3, 3])

    def test_lambda_one_relabels_source(self):
        rng = np.random.default_rng(8)
        f_i = [rng.standard_normal((2, 3)) for _ in range(3)]
        f_j = [rng.standard_normal((5, 3)) for _ in range(3)]
        mixed, onehot = ip.mix_nls(f_i, f_j, np.array([2, 0, 1]), 1.0, rng)
        assert np.array_equal(mixed, np.concatenate(f_i))
        assert onehot.shape == (6, 3)

    def test_unequal_counts_resampled(self):
        rng = np.random.default_rng(9)
        f_i = [np.zeros((4, 2))]
        f_j = [np.ones((2, 2))]
        mixed, _ = ip.mix_nls(f_i, f_j, np.array([0]), 0.5, rng)
        assert mixed.shape == (4, 2)
        assert np.allclose(mixed, 0.5)


class TestCutmix:
    def test_lambda_one_no_patch(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((2, 8, 8))
        res = ip.cutmix(a, b, 1.0, rng)
        assert np.array_equal(res.mixed, a) and res.lam_adj == 1.0

    def test_lambda_zero_centered_full_patch(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, 8, 8))
        res = ip.cutmix(a, b, 0.0, rng, center=(4, 4))
        assert np.array_equal(res.mixed, b) and res.lam_adj == 0.0

    def test_area_bookkeeping_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            lam = float(rng.random())
            a = np.zeros((9, 11))
            b = np.ones((9, 11))
            res = ip.cutmix(a, b, lam, rng)
            r0, r1, c0, c1 = res.box
            area = (r1 - r0) * (c1 - c0)
            assert res.lam_adj == 1.0 - area / 99.0
            assert int(res.mixed.sum()) == area  # provenance recount

    def test_area_identity_exact_on_pow2_grid(self):
        # 8x16 cells: area/128 is exact in binary floating point
        rng = np.random.default_rng(3)
        for _ in range(300):
            lam = float(rng.random())
            res = ip.cutmix(np.zeros((8, 16)), np.ones((8, 16)), lam, rng)
            r0, r1, c0, c1 = res.box
            area = (r1 - r0) * (c1 - c0)
            assert res.lam_adj * 128 + area == 128

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ip.InterpolationError, match="shape"):
            ip.cutmix(np.zeros((4, 4)), np.zeros((5, 5)), 0.5,
                      np.random.default_rng(0))


class TestBuildInterpolatedTask:
    def test_vanilla_bypass_untouched_and_no_rng(self, bank, model):
        params = model.init_params()
        rng = np.random.default_rng(11)
        ep = episode(bank, rng)
        r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
        task = ip.build_interpolated_task(model, params, ep, ep,
                                          ip.MixConfig(mode="vanilla"), r1)
        assert task.vanilla and task.lam == 1.0 and task.layer == 0
        assert task.support_h is ep.support_x and task.query_y is ep.query_y
        assert r1.integers(0, 1 << 30) == r2.integers(0, 1 << 30)

    def test_forced_identity_composition_bitwise(self, bank, model):
        params = model.init_params()
        rng = np.random.default_rng(12)
        ep = episode(bank, rng)
        cfg = ip.MixConfig(mode="both", layer_max=1, force_lambda=1.0,
                           force_layer=0, force_partner="self",
                           identity_pairing=True)
        task = ip.build_interpolated_task(model, params, ep, ep, cfg,
                                          np.random.default_rng(0),
                                          label_mode="relabel")
        assert np.array_equal(task.support_h, ep.support_x)
        assert np.array_equal(task.query_h, ep.query_x)
        assert np.array_equal(task.support_y, ep.support_y)

    def test_hidden_layer_mixing_matches_independent_recomputation(self, bank, model):
        params = model.init_params()
        rng = np.random.default_rng(13)
        ep_i, ep_j = episode(bank, rng), episode(bank, rng)
        cfg = ip.MixConfig(mode="cross", layer_max=1, identity_pairing=True,
                           force_lambda=0.3)
        task = ip.build_interpolated_task(model, params, ep_i, ep_j, cfg,
                                          np.random.default_rng(1), layer=1,
                                          label_mode="relabel")
        # recompute layer-1 activations outside the engine
        W = params["layer1.W"].data
        b = params["layer1.b"].data

        def h1(x):
            return np.maximum(x.reshape(x.shape[0], -1) @ W + b, 0.0)

        labels_i = ep_i.support_y.argmax(axis=1)
        labels_j = ep_j.support_y.argmax(axis=1)
        blocks = [0.3 * h1(ep_i.support_x)[labels_i == r]
                  + 0.7 * h1(ep_j.support_x)[labels_j == r]
                  for r in range(5)]
        assert np.abs(task.support_h.data - np.concatenate(blocks)).max() < 1e-12

    def test_one_lambda_shared_by_support_and_query(self, bank, model):
        # recover lambda from the mixed arrays; support and query must agree
        params = model.init_params()
        rng = np.random.default_rng(14)
        for _ in range(40):
            ep_i, ep_j = episode(bank, rng), episode(bank, rng)
            cfg = ip.MixConfig(mode="cross", layer_max=0, identity_pairing=True)
            task = ip.build_interpolated_task(model, params, ep_i, ep_j, cfg, rng,
                                              layer=0, label_mode="relabel")
            assert 0.0 <= task.lam <= 1.0 and task.query_lam is None

            def recover(mixed, x_i, x_j, y_i, y_j):
                # identity pairing: class blocks align row-for-row
                li, lj = y_i.argmax(axis=1), y_j.argmax(axis=1)
                a = np.concatenate([x_i[li == r] for r in range(5)])
                b = np.concatenate([x_j[lj == r] for r in range(5)])
                num = (np.asarray(mixed) - b).ravel()
                den = (a - b).ravel()
                ok = np.abs(den) > 1e-9
                return num[ok] / den[ok]

            lam_s = recover(task.support_h, ep_i.support_x, ep_j.support_x,
                            ep_i.support_y, ep_j.support_y)
            lam_q = recover(task.query_h, ep_i.query_x, ep_j.query_x,
                            ep_i.query_y, ep_j.query_y)
            assert np.abs(lam_s - task.lam).max() < 1e-9
            assert np.abs(lam_q - task.lam).max() < 1e-9

    def test_scenario_mismatch_rejected(self, bank, model):
        params = model.init_params()
        rng = np.random.default_rng(15)
        ep = episode(bank, rng)
        glyphs = tk.build_bank("glyph-grid", {"grid": 12, "train_count": 10,
                                              "test_count": 10}, seed=1)
        ep_ls = tk.sample_episode(glyphs, "train", 10, 1, 2, rng)
        with pytest.raises(ip.InterpolationError, match="scenario"):
            ip.build_interpolated_task(model, params, ep, ep_ls,
                                       ip.MixConfig(mode="cross", layer_max=0), rng)

    def test_derangement_only_excludes_fixed_points(self, bank, model):
        params = model.init_params()
        cfg = ip.MixConfig(mode="cross", layer_max=0, derangement_only=True)
        rng = np.random.default_rng(16)
        for _ in range(30):
            pi = ip._draw_class_pairing(5, cfg, rng)
            assert not (pi == np.arange(5)).any()


class TestPropertySuite:
    """Bulk invariants over generated interpolated tasks."""

    N_TASKS = 400

    def test_bulk_invariants(self, bank, model):
        params = model.init_params()
        rng = np.random.default_rng(99)
        cfg = ip.MixConfig(mode="both", layer_max=1)
        for _ in range(self.N_TASKS):
            ep_i, ep_j = episode(bank, rng), episode(bank, rng)
            task = ip.build_interpolated_task(model, params, ep_i, ep_j, cfg, rng,
                                              label_mode="relabel")
            # fresh one-hot labels, bijective class usage
            y = task.support_y
            assert set(np.unique(y)) <= {0.0, 1.0}
            assert np.array_equal(y.sum(axis=1), np.ones(len(y)))
            assert 0.0 <= task.lam <= 1.0
            # convexity per coordinate at layer 0 (bounds of the two sources)
            if task.layer == 0:
                h = np.asarray(task.support_h).reshape(len(y), -1)
                lo = min(ep_i.support_x.min(), ep_j.support_x.min())
                hi = max(ep_i.support_x.max(), ep_j.support_x.max())
                assert h.min() >= lo - 1e-12 and h.max() <= hi + 1e-12

    def test_metamix_query_only(self, bank):
        rng = np.random.default_rng(7)
        ep = episode(bank, rng)
        out = ip.metamix_query_only(ep, 1.0, np.random.default_rng(3))
        assert np.array_equal(out.query_x, ep.query_x)
        assert out.support_x is ep.support_x and out.support_y is ep.support_y
        mixed = ip.metamix_query_only(ep, 0.6, np.random.default_rng(4))
        assert mixed.support_x is ep.support_x
        assert np.abs(mixed.query_y.sum(axis=1) - 1.0).max() < 1e-9
