"""Learners: model plumbing, MAML family, prototype learner, checkpoints."""

import numpy as np
import pytest

from mlti import autodiff as ad
from mlti import interpolation as ip
from mlti import learners as ln
from mlti import tasks as tk


@pytest.fixture(scope="module")
def bank():
    return tk.build_bank("gaussian-classes",
                         {"n_classes": 16, "dim": 12, "radius": 4.0, "sigma": 1.0,
                          "train_count": 8, "test_count": 8}, seed=11)


def vanilla_cfg(**kw):
    base = dict(mix=ip.MixConfig(mode="vanilla"))
    base.update(kw)
    return ln.TrainConfig(**base)


def batch(bank, rng, n=4, n_way=5, k=1, q=10):
    return [tk.sample_episode(bank, "train", n_way, k, q, rng) for _ in range(n)]


class TestLayeredModel:
    def test_forward_shapes_and_flatten(self):
        model = ln.LayeredModel([9, 6, 4], seed=0)
        params = model.init_params()
        grids = np.random.default_rng(0).standard_normal((5, 3, 3))
        out = model.forward(grids, params)
        assert out.shape == (5, 4)

    def test_hidden_layer_zero_is_raw_input(self):
        model = ln.LayeredModel([4, 3, 2], seed=0)
        x = np.ones((2, 4))
        assert model.hidden(x, 0, model.init_params()) is x

    def test_hidden_then_forward_from_equals_forward(self):
        model = ln.LayeredModel([4, 6, 5, 2], seed=1)
        params = model.init_params()
        x = np.random.default_rng(1).standard_normal((7, 4))
        full = model.forward(x, params)
        for layer in (1, 2):
            h = model.hidden(x, layer, params)
            again = model.forward_from(h, layer, params)
            assert np.array_equal(full.data, again.data)

    def test_init_deterministic_per_seed(self):
        a = ln.LayeredModel([4, 3], seed=5).init_params()
        b = ln.LayeredModel([4, 3], seed=5).init_params()
        c = ln.LayeredModel([4, 3], seed=6).init_params()
        assert np.array_equal(a["layer1.W"].data, b["layer1.W"].data)
        assert not np.array_equal(a["layer1.W"].data, c["layer1.W"].data)


class TestMetrics:
    def test_accuracy_all_correct(self):
        y = np.eye(3)[[0, 1, 2]]
        assert ln.episode_metric(y, y, "accuracy") == 1.0

    def test_accuracy_counts(self):
        preds = np.eye(2)[[0] * 10]
        targets = np.eye(2)[[0] * 3 + [1] * 7]
        assert ln.episode_metric(preds, targets, "accuracy") == pytest.approx(0.3)

    def test_mse_zero_on_equal(self):
        y = np.random.default_rng(0).standard_normal((6, 1))
        assert ln.episode_metric(y, y, "mse") == 0.0

    def test_empty_query_rejected(self):
        with pytest.raises(ln.LearnerError, match="empty"):
            ln.episode_metric(np.zeros((0, 2)), np.zeros((0, 2)), "accuracy")


class TestMAML:
    def test_vanilla_zero_inner_lr_is_plain_descent(self, bank):
        rng = np.random.default_rng(0)
        eps = batch(bank, rng)
        model = ln.LayeredModel([12, 8, 5], seed=2)
        cfg = vanilla_cfg(inner_lr=0.0, outer_lr=0.1, inner_updates=1,
                          grad_order="second")
        learner = ln.MAML(model, cfg)
        p0 = {n: t.data.copy() for n, t in learner.params.items()}
        learner.train_step(eps, np.random.default_rng(1))

        # plain descent on the mean query loss
        params = {n: ad.Tensor(v, tracked=True) for n, v in p0.items()}
        grand = {n: np.zeros_like(v) for n, v in p0.items()}
        for ep in eps:
            loss = ad.softmax_cross_entropy(model.forward(ep.query_x, params),
                                            ep.query_y)
            g = ad.backward(loss, params)
            for n in grand:
                grand[n] += g[n].data / len(eps)
        for n in p0:
            expected = p0[n] - 0.1 * grand[n]
            assert np.abs(learner.params[n].data - expected).max() < 1e-9

    def test_overfit_single_episode(self, bank):
        rng = np.random.default_rng(3)
        ep = batch(bank, rng, n=1)[0]
        model = ln.LayeredModel([12, 16, 5], seed=5)
        cfg = vanilla_cfg(outer_lr=0.01, outer_optimizer="adam",
                          grad_order="first", inner_updates=3, inner_lr=0.05)
        learner = ln.MAML(model, cfg)
        first = last = None
        for _ in range(200):
            last = learner.train_step([ep], rng)
            if first is None:
                first = last
        assert last <= 0.5 * first

    def test_bilevel_gradient_matches_finite_differences(self, bank):
        # one maml step's outer gradient against the composed meta-loss
        rng = np.random.default_rng(4)
        ep = batch(bank, rng, n=1, k=2, q=4)[0]
        model = ln.LayeredModel([12, 6, 5], seed=7)
        cfg = vanilla_cfg(inner_lr=0.1, inner_updates=1, grad_order="second")
        learner = ln.MAML(model, cfg)
        params = learner.params

        def sup(p):
            return ad.softmax_cross_entropy(model.forward(ep.support_x, p),
                                            ep.support_y)

        def qry(p):
            return ad.softmax_cross_entropy(model.forward(ep.query_x, p),
                                            ep.query_y)

        mg = ad.meta_gradient(sup, qry, params, 0.1, 1, "second")

        def meta_loss(raw):
            cur = {k: ad.Tensor(v, tracked=True) for k, v in raw.items()}
            gs = ad.backward(sup(cur), cur)
            cur = {k: ad.Tensor(cur[k].data - 0.1 * gs[k].data, tracked=True)
                   for k in cur}
            return float(qry(cur).data)

        fd = ad.finite_diff(meta_loss, {k: v.data for k, v in params.items()})
        assert ad.grad_relative_error(mg, fd) < 1e-4

    def test_meta_test_zero_lr_is_unadapted(self, bank):
        rng = np.random.default_rng(5)
        ep = tk.sample_episode(bank, "test", 5, 1, 10, rng)
        model = ln.LayeredModel([12, 8, 5], seed=9)
        learner = ln.MAML(model, vanilla_cfg())
        _, adapted = learner.meta_test(ep, inner_lr=0.0)
        logits = model.forward(ep.query_x, learner.params).data
        assert adapted == ln.episode_metric(logits, ep.query_y, "accuracy")

    def test_untrained_chance_level(self, bank):
        model = ln.LayeredModel([12, 8, 5], seed=31)
        learner = ln.MAML(model, vanilla_cfg())
        rng = np.random.default_rng(6)
        accs = [learner.meta_test(tk.sample_episode(bank, "test", 5, 1, 15, rng),
                                  inner_lr=0.0)[1] for _ in range(400)]
        assert abs(np.mean(accs) - 0.2) < 0.05

    def test_support_equals_query_overfit_to_perfect(self):
        # separable 2-way toy, adapt hard on support == query
        sep = tk.build_bank("gaussian-classes",
                            {"n_classes": 4, "dim": 8, "radius": 8.0, "sigma": 0.5,
                             "train_count": 2, "test_count": 2}, seed=13)
        ep = tk.sample_episode(sep, "train", 2, 5, 5, np.random.default_rng(0))
        ep.query_x = ep.support_x.copy()
        ep.query_y = ep.support_y.copy()
        model = ln.LayeredModel([8, 8, 2], seed=3)
        learner = ln.MAML(model, vanilla_cfg(inner_lr=0.5))
        _, acc = learner.meta_test(ep, updates=60)
        assert acc == 1.0

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nan_abort_carries_context(self):
        # the regression loss has no logit clamp, so runaway rates overflow
        rb = tk.build_bank("rotation-regression",
                           {"grid": 8, "n_glyphs": 8, "train_count": 4,
                            "test_count": 4}, seed=1)
        rng = np.random.default_rng(8)
        model = ln.LayeredModel([64, 8, 1], seed=2)
        learner = ln.MAML(model, vanilla_cfg(inner_lr=1e8, outer_lr=1e8))
        eps = [tk.sample_episode(rb, "train", 0, 3, 3, rng) for _ in range(2)]
        with pytest.raises(ln.TrainingDiverged, match="lambda"):
            for _ in range(20):
                learner.train_step(eps, rng)

    def test_interp_layer_beyond_prefix_rejected(self, bank):
        model = ln.LayeredModel([12, 8, 5], seed=2)  # shared prefix 1
        cfg = ln.TrainConfig(mix=ip.MixConfig(mode="both", layer_max=2))
        with pytest.raises(ln.LearnerError, match="shared prefix"):
            ln.MAML(model, cfg)


class TestAdaptScoping:
    def test_prefix_layers_untouched_by_inner_loop(self, bank):
        """With interpolation forced to layer 1, layer-1 parameters may only
        move through the outer update, never the inner loop."""
        rng = np.random.default_rng(9)
        model = ln.LayeredModel([12, 8, 5], seed=4)
        mix = ip.MixConfig(mode="both", layer_max=1, force_layer=1)
        cfg = ln.TrainConfig(mix=mix, inner_lr=0.05, outer_lr=0.0001,
                             inner_updates=3, grad_order="first")
        learner = ln.MAML(model, cfg)
        assert learner._adapt_names(1) == ["layer2.W", "layer2.b"]
        assert learner._adapt_names(0) == ["layer1.W", "layer1.b",
                                           "layer2.W", "layer2.b"]

    def test_inner_loop_touches_only_suffix_parameters(self, bank):
        """Instrumented train step: with the interpolation layer forced to 1,
        the inner loop must update layer-2 names only."""
        rng = np.random.default_rng(19)
        model = ln.LayeredModel([12, 8, 5], seed=4)
        mix = ip.MixConfig(mode="both", layer_max=1, force_layer=1)
        cfg = ln.TrainConfig(mix=mix, inner_lr=0.05, inner_updates=2,
                             grad_order="first")
        learner = ln.MAML(model, cfg)
        touched = set()
        orig = learner._inner_sgd

        def spy(cur, grads, adapt):
            touched.update(adapt)
            return orig(cur, grads, adapt)

        learner._inner_sgd = spy
        # first-order path updates leaves directly; instrument _adapt instead
        orig_adapt = learner._adapt

        def spy_adapt(sup, adapt, order):
            touched.update(adapt)
            return orig_adapt(sup, adapt, order)

        learner._adapt = spy_adapt
        learner.train_step(batch(bank, rng), rng)
        assert touched == {"layer2.W", "layer2.b"}

    def test_anil_adapts_head_only(self, bank):
        model = ln.LayeredModel([12, 8, 5], seed=4)
        learner = ln.make_learner("anil", model, vanilla_cfg())
        assert learner._adapt_names(0) == ["layer2.W", "layer2.b"]
        # a meta-test must leave hidden weights identical inside adaptation
        ep = tk.sample_episode(bank, "test", 5, 1, 10, np.random.default_rng(1))
        before = learner.params["layer1.W"].data.copy()
        learner.meta_test(ep)
        assert np.array_equal(before, learner.params["layer1.W"].data)


class TestMetaSGD:
    def test_reduces_to_maml_at_initialization(self, bank):
        rng = np.random.default_rng(10)
        eps = batch(bank, rng)
        cfg = vanilla_cfg(inner_lr=0.02, inner_updates=2, grad_order="first",
                          outer_lr=0.005)
        plain = ln.MAML(ln.LayeredModel([12, 8, 5], seed=6), cfg)
        rates = ln.MAML(ln.LayeredModel([12, 8, 5], seed=6), cfg,
                        learn_inner_rates=True)
        l1 = plain.train_step(eps, np.random.default_rng(2))
        l2 = rates.train_step(eps, np.random.default_rng(2))
        assert l1 == l2  # identical inner updates on the first step

    def test_rates_receive_outer_updates(self, bank):
        rng = np.random.default_rng(11)
        cfg = vanilla_cfg(inner_lr=0.02, inner_updates=2, grad_order="second")
        learner = ln.make_learner("metasgd", ln.LayeredModel([12, 8, 5], seed=6), cfg)
        before = {n: t.data.copy() for n, t in learner.params.items()
                  if n.startswith("rate.")}
        learner.train_step(batch(bank, rng), rng)
        assert any(not np.array_equal(before[n], learner.params[n].data)
                   for n in before)

    def test_first_order_rate_gradients_nonzero(self, bank):
        rng = np.random.default_rng(12)
        cfg = vanilla_cfg(inner_lr=0.02, inner_updates=2, grad_order="first")
        learner = ln.make_learner("metasgd", ln.LayeredModel([12, 8, 5], seed=6), cfg)
        before = {n: t.data.copy() for n, t in learner.params.items()
                  if n.startswith("rate.")}
        learner.train_step(batch(bank, rng), rng)
        assert any(not np.array_equal(before[n], learner.params[n].data)
                   for n in before)


class TestProtoNet:
    def make(self, seed=0, mode="vanilla", embed=8):
        model = ln.LayeredModel([12, 10, embed], seed=seed,
                                shared_prefix=2)
        cfg = ln.TrainConfig(mix=ip.MixConfig(mode=mode, layer_max=1),
                             outer_lr=0.01, outer_optimizer="adam")
        return ln.ProtoNet(model, cfg)

    def test_one_shot_prototypes_are_support_embeddings(self, bank):
        learner = self.make()
        ep = tk.sample_episode(bank, "test", 5, 1, 5, np.random.default_rng(0))
        emb = learner.model.forward(ep.support_x, learner.params)
        protos = ad.matmul(learner._prototype_matrix(ep.support_y), emb)
        assert np.array_equal(protos.data, emb.data)

    def test_duplicated_support_leaves_prototypes_unchanged(self, bank):
        learner = self.make()
        ep = tk.sample_episode(bank, "test", 5, 2, 5, np.random.default_rng(1))
        emb = learner.model.forward(ep.support_x, learner.params)
        p1 = ad.matmul(learner._prototype_matrix(ep.support_y), emb).data
        dup_x = np.concatenate([ep.support_x, ep.support_x])
        dup_y = np.concatenate([ep.support_y, ep.support_y])
        emb2 = learner.model.forward(dup_x, learner.params)
        p2 = ad.matmul(learner._prototype_matrix(dup_y), emb2).data
        assert np.abs(p1 - p2).max() < 1e-12

    def test_probability_at_distance_gap(self):
        # embedding at distance 0 from one prototype and 2 from the other
        logits = ad.scale(ad.Tensor([[0.0, 2.0]]), -1.0)
        p = ad.softmax(logits).data
        assert p[0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-2.0)), abs=1e-4)

    def test_probability_rows_sum_to_one(self, bank):
        learner = self.make()
        rng = np.random.default_rng(2)
        for _ in range(10):
            ep = tk.sample_episode(bank, "test", 5, 2, 7, rng)
            probs, _ = learner.meta_test(ep)
            assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9

    def test_prediction_invariant_to_distance_rescaling(self, bank):
        learner = self.make()
        ep = tk.sample_episode(bank, "test", 5, 2, 7, np.random.default_rng(3))
        with ad.no_grad():
            emb_s = learner.model.forward(ep.support_x, learner.params)
            emb_q = learner.model.forward(ep.query_x, learner.params)
            protos = ad.matmul(learner._prototype_matrix(ep.support_y), emb_s)
            d = ad.sqdist(emb_q, protos).data
        base = np.argmax(-d, axis=1)
        scaled = np.argmax(-3.7 * d, axis=1)
        assert np.array_equal(base, scaled)

    def test_untrained_chance_level_on_zero_signal_bank(self):
        # an untrained metric learner still reads class geometry through a
        # random embedding, so the chance anchor uses a bank with no signal
        flat = tk.build_bank("gaussian-classes",
                             {"n_classes": 16, "dim": 12, "radius": 0.0,
                              "sigma": 1.0, "train_count": 8, "test_count": 8},
                             seed=21)
        learner = self.make(seed=44)
        rng = np.random.default_rng(4)
        accs = [learner.meta_test(tk.sample_episode(flat, "test", 5, 1, 15, rng))[1]
                for _ in range(400)]
        assert abs(np.mean(accs) - 0.2) < 0.05

    def test_zero_support_class_rejected(self, bank):
        learner = self.make()
        ep = tk.sample_episode(bank, "test", 5, 1, 5, np.random.default_rng(5))
        y = ep.support_y.copy()
        y[:, 0] = 0.0
        with pytest.raises(ln.LearnerError, match="zero support"):
            learner._prototype_matrix(y)

    def test_regression_episode_rejected(self):
        rb = tk.build_bank("rotation-regression",
                           {"grid": 12, "n_glyphs": 10, "train_count": 5,
                            "test_count": 5}, seed=0)
        learner = ln.ProtoNet(ln.LayeredModel([144, 8, 4], seed=0, shared_prefix=2),
                              ln.TrainConfig(mix=ip.MixConfig(mode="vanilla")))
        ep = tk.sample_episode(rb, "train", 0, 3, 3, np.random.default_rng(0))
        with pytest.raises(ln.LearnerError, match="classification"):
            learner.train_step([ep], np.random.default_rng(1))


class TestVanillaEquivalence:
    def test_forced_identity_matches_vanilla_bit_for_bit(self, bank):
        def run(mix, steps=25):
            model = ln.LayeredModel([12, 8, 5], seed=3)
            cfg = ln.TrainConfig(mix=mix, grad_order="first", inner_updates=2)
            learner = ln.MAML(model, cfg)
            rng = np.random.default_rng(42)
            losses = [learner.train_step(batch(bank, rng), rng)
                      for _ in range(steps)]
            return learner.params, losses

        forced = ip.MixConfig(mode="both", layer_max=1, force_lambda=1.0,
                              force_layer=0, force_partner="self",
                              identity_pairing=True)
        p_v, l_v = run(ip.MixConfig(mode="vanilla"))
        p_f, l_f = run(forced)
        assert l_v == l_f
        assert all(np.array_equal(p_v[n].data, p_f[n].data) for n in p_v)


class TestCheckpoint:
    def test_round_trip_lossless(self, tmp_path, bank):
        learner = ln.make_learner("metasgd", ln.LayeredModel([12, 8, 5], seed=6),
                                  vanilla_cfg(inner_lr=0.02))
        learner.train_step(batch(bank, np.random.default_rng(0)),
                           np.random.default_rng(1))
        path = tmp_path / "ck.txt"
        ln.save_checkpoint(path, learner.params)
        assert open(path).readline() == "mlti-ckpt v1\n"
        loaded = ln.load_checkpoint(path)
        assert set(loaded) == set(learner.params)
        for n in loaded:
            assert np.array_equal(loaded[n].data, learner.params[n].data)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("nope v9\n")
        with pytest.raises(ln.LearnerError, match="header"):
            ln.load_checkpoint(path)
