import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_interactions
from sheafrec.data import InteractionSet, SplitSet, adapt_bipartite, build_bipartite, split_interactions
from sheafrec.model import ModelConfig, forward, init_model, score_all
from sheafrec.training import (
    AdamW,
    SamplingError,
    TrainConfig,
    TrainIndex,
    TrainingDivergedError,
    bce_loss,
    bpr_loss,
    bpr_loss_pairwise,
    rmse_loss,
    sample_batch,
    train,
)

LN2 = math.log(2.0)


class TestBprLoss:
    def test_equal_scores_give_ln_two(self):
        assert float(bpr_loss(np.array([1.5]), np.array([1.5]))) == pytest.approx(LN2, abs=1e-12)

    def test_large_positive_margin(self):
        value = float(bpr_loss(np.array([20.0]), np.array([0.0])))
        assert value == pytest.approx(2.061153622438558e-09, rel=1e-6)

    def test_large_negative_margin(self):
        value = float(bpr_loss(np.array([0.0]), np.array([20.0])))
        assert value == pytest.approx(20.0, abs=1e-6)

    def test_sums_inside_the_sigmoid(self):
        pos = np.array([1.0, 2.0])
        neg = np.array([0.5, 0.5])
        expected = math.log1p(math.exp(-(pos.sum() - neg.sum())))
        assert float(bpr_loss(pos, neg)) == pytest.approx(expected, abs=1e-12)

    def test_pairwise_variant_averages_triplets(self):
        pos = np.array([1.0, 0.0])
        neg = np.array([0.0, 1.0])
        expected = 0.5 * (math.log1p(math.exp(-1.0)) + math.log1p(math.exp(1.0)))
        assert float(bpr_loss_pairwise(pos, neg)) == pytest.approx(expected, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            bpr_loss(np.array([]), np.array([]))

    def test_unequal_lengths_rejected(self):
        with pytest.raises(ValueError, match="equal lengths"):
            bpr_loss(np.array([1.0]), np.array([1.0, 2.0]))


class TestBceLoss:
    def test_zero_scores(self):
        assert float(bce_loss(np.zeros(3), np.zeros(2))) == pytest.approx(2 * LN2, abs=1e-12)

    def test_confident_and_correct(self):
        value = float(bce_loss(np.array([20.0]), np.array([-20.0])))
        assert value == pytest.approx(4.122307244877116e-09, rel=1e-6)

    def test_confident_and_wrong(self):
        value = float(bce_loss(np.array([-20.0]), np.array([20.0])))
        assert value == pytest.approx(40.0, abs=1e-6)


class TestRmseLoss:
    def test_perfect_predictions(self):
        assert float(rmse_loss(np.array([3.0, 4.0]), np.array([3.0, 4.0]))) == 0.0

    def test_hand_computed_value(self):
        value = float(rmse_loss(np.zeros(2), np.array([3.0, 4.0])))
        assert value == pytest.approx(5.0 / math.sqrt(2.0), abs=1e-12)

    def test_single_pair(self):
        assert float(rmse_loss(np.array([2.0]), np.array([5.0]))) == pytest.approx(3.0)


@settings(max_examples=50, deadline=None)
@given(
    pos=st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8),
    neg=st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8),
)
def test_losses_are_nonnegative(pos, neg):
    p, n = np.asarray(pos), np.asarray(neg)
    if len(p) == len(n):
        assert float(bpr_loss(p, n)) >= 0.0
        assert float(bpr_loss_pairwise(p, n)) >= 0.0
        assert float(rmse_loss(p, n)) >= 0.0
    assert float(bce_loss(p, n)) >= 0.0


class TestSampling:
    def test_forced_negative(self):
        train_set = InteractionSet.from_records(1, 2, [(0, 0, 1.0)])
        rng = np.random.default_rng(0)
        batch = sample_batch(train_set, 32, rng)
        assert (batch.negatives == 1).all()
        assert (batch.positives == 0).all()

    def test_membership_invariants(self, rng):
        train_set = toy_interactions(n_users=20, n_items=30, density=0.3, seed=1)
        index = TrainIndex(train_set)
        batch = sample_batch(train_set, 500, rng, index=index)
        for u, p, n in zip(batch.users, batch.positives, batch.negatives):
            assert int(p) in index.sets[int(u)]
            assert int(n) not in index.sets[int(u)]

    def test_seeded_stream_replays_identically(self):
        train_set = toy_interactions(n_users=10, n_items=10, density=0.4, seed=2)
        a = sample_batch(train_set, 64, np.random.default_rng(5))
        b = sample_batch(train_set, 64, np.random.default_rng(5))
        assert np.array_equal(a.users, b.users)
        assert np.array_equal(a.positives, b.positives)
        assert np.array_equal(a.negatives, b.negatives)

    def test_saturated_user_raises(self):
        train_set = InteractionSet.from_records(1, 1, [(0, 0, 1.0)])
        with pytest.raises(SamplingError, match="user 0"):
            sample_batch(train_set, 4, np.random.default_rng(0))

    def test_batch_legality_at_scale(self):
        train_set = toy_interactions(n_users=50, n_items=60, density=0.2, seed=3)
        index = TrainIndex(train_set)
        rng = np.random.default_rng(9)
        checked = 0
        for _ in range(100):
            batch = sample_batch(train_set, 1000, rng, index=index)
            for u, p, n in zip(batch.users, batch.positives, batch.negatives):
                assert int(p) in index.sets[int(u)]
                assert int(n) not in index.sets[int(u)]
            checked += len(batch.users)
        assert checked == 100_000


def tiny_split(seed=0, n_users=6, n_items=8, density=0.7):
    inter = toy_interactions(n_users, n_items, density, seed)
    return split_interactions(inter, seed=seed)


class TestTrain:
    def test_zero_learning_rate_keeps_parameters_bitwise(self):
        data = tiny_split()
        graph = adapt_bipartite(build_bipartite(data.train))
        state = init_model(ModelConfig(latent_dim=4, layers=1, seed=0), graph)
        before = {k: v.copy() for k, v in state.params.items()}
        cfg = TrainConfig(lr=0.0, weight_decay=0.0, epochs=3, batch_size=16, seed=0)
        train(state, data, cfg, graph=graph)
        for k in before:
            assert np.array_equal(before[k], state.params[k])

    def test_zero_epochs_returns_initial_state(self):
        data = tiny_split()
        graph = adapt_bipartite(build_bipartite(data.train))
        state = init_model(ModelConfig(latent_dim=4, layers=1, seed=0), graph)
        result = train(state, data, TrainConfig(epochs=0, seed=0), graph=graph)
        assert result.history == []
        assert result.state is state

    def test_empty_training_set_rejected(self):
        empty = InteractionSet.from_records(1, 1, [])
        some = InteractionSet.from_records(1, 1, [(0, 0, 1.0)])
        data = SplitSet(train=empty, validation=some, test=some, seed=0)
        with pytest.raises(ValueError, match="empty"):
            train(init_model(ModelConfig(latent_dim=2, layers=1, seed=0),
                             build_bipartite(some)), data, TrainConfig(epochs=1))

    def test_non_finite_loss_aborts_with_location(self):
        inter = toy_interactions(n_users=4, n_items=4, density=0.9, seed=1)
        bad = InteractionSet(
            n_users=4, n_items=4, users=inter.users.copy(), items=inter.items.copy(),
            ratings=np.full(inter.n_records, np.inf),
        )
        data = SplitSet(train=bad, validation=bad, test=bad, seed=0)
        graph = adapt_bipartite(build_bipartite(bad))
        state = init_model(ModelConfig(latent_dim=2, layers=1, seed=0), graph)
        with pytest.raises(TrainingDivergedError, match="epoch 1, batch 0"):
            train(state, data, TrainConfig(epochs=1, loss="rmse", batch_size=8, seed=0), graph=graph)

    def test_unknown_loss_rejected(self):
        data = tiny_split()
        state = init_model(ModelConfig(latent_dim=2, layers=1, seed=0),
                           build_bipartite(data.train))
        with pytest.raises(ValueError, match="loss"):
            train(state, data, TrainConfig(loss="hinge"))

    def test_history_schema(self):
        data = tiny_split(n_users=8, n_items=10)
        graph = adapt_bipartite(build_bipartite(data.train))
        state = init_model(ModelConfig(latent_dim=4, layers=1, seed=0), graph)
        result = train(state, data, TrainConfig(epochs=2, batch_size=8, seed=0), graph=graph)
        assert len(result.history) == 2
        for i, record in enumerate(result.history, start=1):
            assert record["epoch"] == i
            assert set(record) >= {"epoch", "loss", "val_ndcg@10", "wall_ms", "loss_name"}
            assert record["loss_name"] == "bpr"

    def test_two_cluster_loss_decreases(self, small_split):
        _, split, graph = small_split
        state = init_model(ModelConfig(latent_dim=8, layers=2, seed=11), graph)
        cfg = TrainConfig(epochs=30, batch_size=256, seed=11)
        result = train(state, data=split, cfg=cfg, graph=graph)
        losses = [h["loss"] for h in result.history]
        assert losses[-1] < losses[0]

    def test_bpr_step_increases_triplet_margin(self):
        improved = 0
        for trial in range(20):
            r = np.random.default_rng(trial)
            inter = toy_interactions(n_users=5, n_items=6, density=0.5, seed=trial)
            graph = adapt_bipartite(build_bipartite(inter))
            state = init_model(ModelConfig(latent_dim=3, layers=1, seed=trial), graph)
            index = TrainIndex(inter)
            batch = sample_batch(inter, 1, np.random.default_rng(trial + 100), index=index)
            u, p, n = int(batch.users[0]), int(batch.positives[0]), int(batch.negatives[0])

            def margin():
                scores = score_all(forward(state, graph))
                return scores[u, p] - scores[u, n]

            before = margin()
            from sheafrec.autodiff import Tape
            from sheafrec.model import forward_on
            from sheafrec.training import _gathered_scores

            tape = Tape()
            wrapped = {k: tape.tensor(v, requires_grad=True) for k, v in state.params.items()}
            ur, ir = forward_on(tape, wrapped, state.config, graph)
            pos = _gathered_scores(tape, ur, ir, batch.users, batch.positives)
            neg = _gathered_scores(tape, ur, ir, batch.users, batch.negatives)
            loss = bpr_loss_pairwise(pos, neg, ops=tape)
            grads = tape.backward(loss)
            AdamW(lr=1e-3, weight_decay=0.0).step(state.params, {k: grads[wrapped[k]] for k in state.params})
            if margin() > before:
                improved += 1
        assert improved == 20


class TestAdamW:
    def test_weight_decay_is_decoupled(self):
        params = {"w": np.array([10.0])}
        opt = AdamW(lr=0.1, weight_decay=0.5)
        opt.step(params, {"w": np.array([0.0])})
        # zero gradient: only the decay term moves the weight
        assert params["w"][0] == pytest.approx(10.0 - 0.1 * 0.5 * 10.0)

    def test_step_counter_advances(self):
        params = {"w": np.zeros(2)}
        opt = AdamW()
        opt.step(params, {"w": np.ones(2)})
        opt.step(params, {"w": np.ones(2)})
        assert opt.step_count == 2
