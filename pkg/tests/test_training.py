"""Loss values against hand evaluations, sampler laws, Adam traces, and
epoch-loop determinism."""

import math

import numpy as np
import pytest

from feedrank import tensor as T
from feedrank.data import InteractionStore, ingest, leave_one_out_split
from feedrank.models import ITEModel, ModelConfig
from feedrank.tensor import ConfigError, ParameterRegistry, Tensor
from feedrank.training import (Adam, TrainingConfig,bce_sum, build_epoch_examples, fit,
                               joint_loss, pad_sequence, sample_negatives, train_epoch)

from conftest import planted_dataset


def cfg(**kw):
    base = dict(learning_rate=0.001, batch_size=64, implicit_weight=0.5, l2_weight=0.0,
                negatives_per_positive=2, epochs=1, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


class TestJointLoss:
    def test_perfect_predictions_near_zero(self):
        n = 8
        preds = Tensor(np.where(np.arange(n) % 2, 1.0 - 1e-7, 1e-7))
        labels = (np.arange(n) % 2).astype(np.float64)
        loss = joint_loss(preds, labels, None, None, [], cfg(implicit_weight=1.0))
        assert 0.0 <= loss.item() <= n * 1.7e-6

    def test_uniform_guess_is_ln2_per_example(self):
        n = 5
        preds = Tensor(np.full(n, 0.5))
        labels = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
        loss = joint_loss(preds, labels, None, None, [], cfg(implicit_weight=1.0))
        assert abs(loss.item() - n * math.log(2.0)) < 1e-9

    def test_hand_value_mixed_batch(self):
        # 0.5 * (-ln 0.8) + (-ln 0.7)
        loss = joint_loss(Tensor(np.array([0.8])), np.array([1.0]),
                          Tensor(np.array([0.3])), np.array([0.0]),
                          [], cfg(implicit_weight=0.5))
        expected = 0.5 * -math.log(0.8) - math.log(0.7)
        assert abs(expected - 0.46824) < 1e-5  # 0.4682467...
        assert abs(loss.item() - expected) < 1e-12

    def test_regularizer_counts_touched_rows(self):
        rows = Tensor(np.array([[3.0, 4.0]]))
        loss = joint_loss(None, None, None, None, [rows], cfg(l2_weight=0.1))
        assert abs(loss.item() - 0.1 * 25.0) < 1e-12

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(0)
        preds = Tensor(rng.uniform(0.01, 0.99, size=32))
        labels = rng.integers(0, 2, size=32).astype(np.float64)
        rows = Tensor(rng.standard_normal((4, 3)))
        loss = joint_loss(preds, labels, preds, labels, [rows], cfg(l2_weight=1e-4))
        assert loss.item() >= 0.0

    def test_float32_saturated_predictions_stay_finite(self):
        preds = Tensor(np.array([1.0, 0.0], dtype=np.float32))  # saturated sigmoids
        labels = np.array([0.0, 1.0])
        loss = bce_sum(preds, labels)
        assert np.isfinite(loss.item())

    def test_eta_zero_kills_implicit_head_gradient(self):
        model = ITEModel(4, 6, ModelConfig(embedding_dim=4, attention_heads=2,
                                           implicit_mlp_layers=2, explicit_mlp_layers=2),
                         seed=1, dtype=np.float64)
        users, items = np.array([0, 1, 2]), np.array([1, 5, 3])
        impl = model.forward(users, items)
        expl = model.forward(np.array([3, 0]), np.array([0, 2]))
        loss = joint_loss(impl.x_hat, np.array([1.0, 0.0, 1.0]),
                          expl.y_hat, np.array([1.0, 0.0]),
                          impl.embedding_rows + expl.embedding_rows,
                          cfg(implicit_weight=0.0, l2_weight=0.0))
        loss.backward()
        np.testing.assert_array_equal(model.implicit_head.grad, np.zeros(8))
        # the shared front end still learns through the explicit path
        assert np.any(model.gmf_user.rows.grad != 0.0)
        assert np.any(model.explicit_head.grad != 0.0)


def store_from_sets(num_users, num_items, implicit_sets, explicit_sets):
    impl, expl = [], []
    t = 0
    for u in range(num_users):
        events = []
        for i in sorted(implicit_sets[u]):
            events.append((t, t, i))
            t += 1
        impl.append(tuple(np.array([e[j] for e in events], dtype=np.int64) for j in range(3)))
        events = []
        for i in sorted(explicit_sets[u]):
            events.append((t, t, i))
            t += 1
        expl.append(tuple(np.array([e[j] for e in events], dtype=np.int64) for j in range(3)))
    return InteractionStore([f"u{j}" for j in range(num_users)],
                            [f"i{j}" for j in range(num_items)], impl, expl)


class TestSampleNegatives:
    def test_count_zero(self):
        store = store_from_sets(1, 4, [{0}], [set()])
        assert sample_negatives(store, 0, "implicit", 0, np.random.default_rng(0)).size == 0

    def test_forced_choice(self):
        store = store_from_sets(1, 5, [{0, 1, 2, 3}], [set()])
        out = sample_negatives(store, 0, "implicit", 1, np.random.default_rng(1))
        assert out.tolist() == [4]

    def test_never_collides_with_observed(self):
        rng = np.random.default_rng(2)
        store = store_from_sets(3, 30,
                                [set(rng.choice(30, 10, replace=False).tolist()) for _ in range(3)],
                                [set(), {1, 2}, {5}])
        for u in range(3):
            for matrix, observed in (("implicit", store.implicit_items[u]),
                                     ("explicit", store.explicit_items[u])):
                for _ in range(20):
                    out = sample_negatives(store, u, matrix, 5, rng)
                    assert not set(out.tolist()) & observed
                    assert len(set(out.tolist())) == 5  # without replacement

    def test_excluded_items_never_sampled(self):
        store = store_from_sets(1, 10, [{0, 1}], [set()])
        store.excluded_items[0] = {9}
        rng = np.random.default_rng(3)
        for _ in range(50):
            assert 9 not in sample_negatives(store, 0, "implicit", 3, rng).tolist()

    def test_uniformity_chi_square(self):
        # 1e5 draws over 8 eligible items: each frequency within 3 sigma
        store = store_from_sets(1, 10, [{0, 1}], [set()])
        rng = np.random.default_rng(4)
        draws = 100_000
        counts = np.zeros(10)
        for _ in range(draws):
            counts[sample_negatives(store, 0, "implicit", 1, rng)[0]] += 1
        eligible = 8
        p = 1.0 / eligible
        sigma = math.sqrt(draws * p * (1 - p))
        assert counts[0] == counts[1] == 0
        np.testing.assert_array_less(np.abs(counts[2:] - draws * p), 3 * sigma)

    def test_insufficient_candidates_resamples_with_replacement(self, caplog):
        store = store_from_sets(1, 4, [{0, 1}], [set()])
        with caplog.at_level("WARNING"):
            out = sample_negatives(store, 0, "implicit", 5, np.random.default_rng(5))
        assert out.size == 5
        assert set(out.tolist()) <= {2, 3}
        assert any("replacement" in r.message for r in caplog.records)


class TestPadSequence:
    def test_full_history_unchanged(self):
        hist = [3, 1, 4, 1, 5]
        out = pad_sequence(hist, 5, 10, {3, 1, 4, 5}, np.random.default_rng(0))
        assert out.tolist() == hist

    def test_longer_history_keeps_most_recent(self):
        out = pad_sequence([1, 2, 3, 4, 5], 3, 10, set(), np.random.default_rng(0))
        assert out.tolist() == [3, 4, 5]

    def test_empty_history_all_random_unobserved(self):
        observed = {0, 1, 2}
        out = pad_sequence([], 4, 10, observed, np.random.default_rng(1))
        assert out.size == 4
        assert not set(out.tolist()) & observed

    def test_two_missing_pads_two(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            observed = set(np.random.default_rng(3).choice(20, 6, replace=False).tolist())
            hist = list(observed)[:4]
            out = pad_sequence(hist, 6, 20, observed, rng)
            assert out.size == 6
            assert out[2:].tolist() == hist          # history preserved, pads prepended
            assert not set(out[:2].tolist()) & observed

    def test_deterministic_given_seed(self):
        a = pad_sequence([7], 5, 50, {7}, np.random.default_rng(42))
        b = pad_sequence([7], 5, 50, {7}, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)


class TestAdam:
    def make_param(self, value):
        reg = ParameterRegistry()
        reg.add("w", np.asarray(value, dtype=np.float64))
        return reg

    def test_zero_gradient_keeps_parameter(self):
        reg = self.make_param([1.0, -2.0])
        opt = Adam(reg, learning_rate=0.1)
        reg["w"].value.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(reg["w"].data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        reg = self.make_param([0.5])
        opt = Adam(reg, learning_rate=0.001)
        reg["w"].value.grad = np.array([1.0])
        opt.step()
        delta = reg["w"].data[0] - 0.5
        g = 1.0
        assert abs(delta + 0.001 * g / (math.sqrt(g * g) + 1e-8)) < 1e-9

    def test_two_steps_match_hand_unrolled_trace(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        g = np.array([0.3, -1.2])
        theta = np.array([1.0, 2.0])
        m = np.zeros(2)
        v = np.zeros(2)
        expected = theta.copy()
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            expected -= lr * m_hat / (np.sqrt(v_hat) + eps)

        reg = self.make_param(theta)
        opt = Adam(reg, learning_rate=lr, beta1=b1, beta2=b2, eps=eps)
        for _ in range(2):
            reg["w"].value.grad = g.copy()
            opt.step()
        np.testing.assert_allclose(reg["w"].data, expected, atol=1e-9)

    def test_gradients_cleared_after_step(self):
        reg = self.make_param([1.0])
        opt = Adam(reg)
        reg["w"].value.grad = np.array([1.0])
        opt.step()
        assert reg["w"].grad is None


class TestEpochLoop:
    @pytest.fixture
    def small_prepared(self, tmp_path):
        # 20 users x 30 items
        events, _ = planted_dataset(tmp_path, num_groups=5, users_per_group=4,
                                    items_per_group=6, explicit_per_user=2)
        store = ingest(str(events))
        return leave_one_out_split(store, num_negatives=20, seed=0)

    def test_examples_respect_positive_negative_structure(self, small_prepared):
        store, _ = small_prepared
        rows = build_epoch_examples(store, 3, np.random.default_rng(0))
        n_pos = store.num_implicit_pairs() + store.num_explicit_pairs()
        assert rows.shape == (n_pos * 4, 5)
        for kind, u, anchor, cand, label in rows:
            observed = store.implicit_items[u] if kind == 0 else store.explicit_items[u]
            if label == 1:
                assert cand in observed and cand == anchor
            else:
                assert cand not in observed
                assert cand not in store.excluded_items[u]

    def test_empty_training_set_rejected(self):
        store = store_from_sets(2, 4, [set(), set()], [set(), set()])
        with pytest.raises(ConfigError, match="empty training set"):
            build_epoch_examples(store, 1, np.random.default_rng(0))

    def test_loss_decreases_over_first_epochs(self, small_prepared):
        store, _ = small_prepared
        model = ITEModel(store.num_users, store.num_items,
                         ModelConfig(embedding_dim=8, attention_heads=2), seed=3)
        config = cfg(learning_rate=0.01, batch_size=256, negatives_per_positive=4,
                     l2_weight=1e-6)
        opt = Adam.from_config(model.params, config)
        losses = []
        for epoch in range(5):
            rng = np.random.default_rng([7, epoch])
            losses.append(train_epoch(model, store, config, rng, optimizer=opt).mean_loss)
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_epoch_is_deterministic_bit_identical(self, small_prepared):
        store, _ = small_prepared
        results = []
        for _ in range(2):
            model = ITEModel(store.num_users, store.num_items,
                             ModelConfig(embedding_dim=4, attention_heads=2), seed=5)
            report = train_epoch(model, store, cfg(batch_size=128),
                                 np.random.default_rng([11, 0]))
            results.append((report, model.params.state_arrays()))
        assert results[0][0] == results[1][0]
        for name, arr in results[0][1].items():
            np.testing.assert_array_equal(arr, results[1][1][name])

    def test_fit_zero_epochs_keeps_initialization(self, small_prepared):
        store, cases = small_prepared
        model = ITEModel(store.num_users, store.num_items,
                         ModelConfig(embedding_dim=4, attention_heads=2), seed=6)
        init = {k: v.copy() for k, v in model.params.state_arrays().items()}
        result = fit(model, store, cfg(epochs=0), cases=cases)
        assert result.history == []
        for name, arr in model.params.state_arrays().items():
            np.testing.assert_array_equal(arr, init[name])
            np.testing.assert_array_equal(result.best_params[name], init[name])

    def test_fit_tracks_best_epoch(self, small_prepared):
        store, cases = small_prepared
        model = ITEModel(store.num_users, store.num_items,
                         ModelConfig(embedding_dim=8, attention_heads=2), seed=7)
        result = fit(model, store, cfg(epochs=3, learning_rate=0.01, batch_size=256),
                     cases=cases, eval_topk=10)
        assert len(result.history) == 3
        best = max(result.history, key=lambda r: (r["hr"], r["ndcg"]))
        assert result.best_epoch == best["epoch"]
        assert result.best_hr == best["hr"]
