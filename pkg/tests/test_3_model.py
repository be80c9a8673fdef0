"""
Tests scoring, the likelihood, penalties, analytic gradients, Adam and the local trainer of flestlib.model.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flestlib import errors
from flestlib.data import Batch, partition
from flestlib.gradcheck import check_instance, random_instance, stationary_instance
from flestlib.evaluation import evaluate_client
from flestlib.enums import Split
from flestlib.federation import ClientState
from flestlib.model import (
    AdamState,
    GradSet,
    Hyper,
    adam_step,
    apply_dropout,
    composite_entity,
    composite_relation,
    dictionary_penalty,
    grad_all,
    init_params,
    loading_penalty,
    loss_and_grad,
    nll_loss,
    prob_from_score,
    reconstruct_dense,
    score_all_heads,
    score_all_tails,
    score_triple,
    total_loss,
    train_epoch,
)
from flestlib.synthetic import synthetic_kg
from flestlib.utils import make_rng

from . import utils


seed_strategy = st.integers(0, 2**16)


class TestScoring:
    def test_composite_identity(self):
        params = utils.identity_params([[1.0, 0.0], [0.0, 1.0]], [[1.0], [1.0]])
        np.testing.assert_array_equal(composite_entity(params, 0), [1.0, 0.0])

    def test_composite_zero_column(self):
        params = utils.random_params(0, rank=3)
        params.e_loading[:, 2] = 0.0
        np.testing.assert_array_equal(composite_entity(params, 2), np.zeros(3))

    def test_composite_matches_matmuls(self):
        params = utils.random_params(1, rank=3)
        expected = params.w1 @ (params.e_dic @ params.e_loading[:, 4])
        np.testing.assert_allclose(composite_entity(params, 4), expected, rtol=0, atol=1e-12)
        expected = params.w3 @ (params.e_dic @ params.e_loading[:, 4])
        np.testing.assert_allclose(composite_entity(params, 4, as_tail=True), expected, rtol=0, atol=1e-12)
        expected = params.w2 @ (params.r_dic @ params.r_loading[:, 1])
        np.testing.assert_allclose(composite_relation(params, 1), expected, rtol=0, atol=1e-12)

    def test_score_identity(self):
        params = utils.identity_params([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]], [[1.0], [1.0]])
        assert score_triple(params, 0, 0, 0) == 1.0
        assert score_all_tails(params, 0, 0).tolist() == [score_triple(params, 0, 0, t) for t in range(3)]

    def test_zero_relation_column(self):
        params = utils.random_params(2)
        params.r_loading[:, 1] = 0.0
        assert score_triple(params, 0, 1, 3) == 0.0
        assert not np.any(score_all_tails(params, 5, 1))

    def test_out_of_range(self):
        params = utils.random_params(3)
        with pytest.raises(errors.IndexOutOfRange):
            score_triple(params, 8, 0, 0)
        with pytest.raises(errors.IndexOutOfRange):
            score_all_tails(params, 0, 3)
        with pytest.raises(errors.IndexOutOfRange):
            composite_entity(params, -1)

    @settings(max_examples=30, deadline=None)
    @given(seed=seed_strategy)
    def test_all_tails_and_heads_match_single(self, seed):
        params = utils.random_params(seed)
        rng = np.random.default_rng(seed)
        head, rel, tail = int(rng.integers(8)), int(rng.integers(3)), int(rng.integers(8))

        tails = score_all_tails(params, head, rel)
        assert [tails[t] for t in range(8)] == [score_triple(params, head, rel, t) for t in range(8)]
        heads = score_all_heads(params, rel, tail)
        np.testing.assert_allclose(
            heads, [score_triple(params, h, rel, tail) for h in range(8)], rtol=0, atol=1e-12
        )

    def test_dense_reconstruction(self):
        params = utils.random_params(4, rank=4, num_entities=6, num_relations=2)
        dense = reconstruct_dense(params)
        assert dense.dims == (6, 2, 6)
        for h in range(6):
            for r in range(2):
                for t in range(6):
                    assert abs(dense.get(h, r, t) - score_triple(params, h, r, t)) < 1e-10


class TestLikelihood:
    def test_prob_examples(self):
        assert prob_from_score(0.0, 0.5) == 0.25
        assert abs(prob_from_score(50.0, 0.5) - 0.5) < 1e-9
        assert abs(prob_from_score(math.log(3), 0.5) - 0.375) < 1e-15

    @settings(max_examples=50, deadline=None)
    @given(
        low=st.floats(-1000, 1000),
        gap=st.floats(1e-3, 10),
        sparsity=st.floats(0.01, 1.0),
    )
    def test_prob_increasing_and_bounded(self, low, gap, sparsity):
        # Bounds are checked away from the saturated tails, where float64 rounds to 0 or s.
        assert prob_from_score(low, sparsity) <= prob_from_score(low + gap, sparsity)
        mid = np.clip(low, -30, 30)
        assert 0.0 < prob_from_score(mid, sparsity) < sparsity

    def test_invalid_sparsity(self):
        with pytest.raises(ValueError):
            prob_from_score(0.0, 0.0)
        with pytest.raises(ValueError):
            nll_loss(np.zeros(2), np.zeros(2), 1.5)

    def test_nll_examples(self):
        assert abs(nll_loss(np.array([0.0]), np.array([1.0]), 0.5) - (-math.log(0.25))) < 1e-12
        assert nll_loss(np.array([-50.0]), np.array([0.0]), 0.5) < 1e-9

    def test_nll_extreme_scores_finite(self):
        scores = np.array([-1000.0, 1000.0, -1000.0, 1000.0])
        labels = np.array([1.0, 0.0, 0.0, 1.0])
        assert math.isfinite(nll_loss(scores, labels, 1.0))
        assert math.isfinite(nll_loss(scores, labels, 0.5))

    def test_nll_matches_scalar_sum(self):
        rng = np.random.default_rng(5)
        scores = rng.standard_normal(8) * 3
        labels = (rng.random(8) < 0.5).astype(float)
        s = 0.7
        expected = 0.0
        for theta, a in zip(scores, labels):
            p = s / (1 + math.exp(-theta))
            expected -= a * math.log(p) + (1 - a) * math.log(1 - p)
        assert abs(nll_loss(scores, labels, s) - expected) < 1e-12

    def test_nll_batch_is_mean_of_pairs(self):
        rng = np.random.default_rng(6)
        scores = rng.standard_normal((3, 5))
        labels = (rng.random((3, 5)) < 0.5).astype(float)
        expected = np.mean([nll_loss(scores[i], labels[i], 0.5) for i in range(3)])
        assert abs(nll_loss(scores, labels, 0.5) - expected) < 1e-12

    def test_nll_length_mismatch(self):
        with pytest.raises(errors.ShapeMismatch):
            nll_loss(np.zeros(3), np.zeros(4), 0.5)


class TestPenalties:
    def test_dictionary_examples(self):
        assert dictionary_penalty(np.eye(3), np.eye(3)) == 0.0
        assert dictionary_penalty(2 * np.eye(2), np.eye(2)) == 18.0

    def test_dictionary_random(self):
        rng = np.random.default_rng(7)
        e, r = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        expected = np.sum((e.T @ e - np.eye(3)) ** 2) + np.sum((r.T @ r - np.eye(3)) ** 2)
        assert abs(dictionary_penalty(e, r) - expected) < 1e-12

    def test_dictionary_not_square(self):
        with pytest.raises(errors.ShapeMismatch):
            dictionary_penalty(np.zeros((2, 3)), np.eye(2))

    def test_loading_examples(self):
        assert loading_penalty(np.zeros((2, 2)), np.zeros((2, 1))) == 0.0
        assert loading_penalty(np.array([[1.0, -2.0], [0.0, 3.0]]), np.zeros((2, 1))) == 6.0

    def test_loading_random(self):
        rng = np.random.default_rng(8)
        e, r = rng.standard_normal((3, 5)), rng.standard_normal((3, 2))
        expected = sum(abs(x) for x in e.ravel()) + sum(abs(x) for x in r.ravel())
        assert abs(loading_penalty(e, r) - expected) < 1e-12

    def test_penalty_descent(self):
        e_dic = np.random.default_rng(9).standard_normal((3, 3)) * 0.5 + np.eye(3)
        hyper = Hyper(alpha=1.0, beta=0.0)
        params = utils.identity_params(np.zeros((3, 2)), np.zeros((3, 1))).replace(e_dic=e_dic)

        previous = dictionary_penalty(params.e_dic, params.r_dic)
        for _ in range(5000):
            grads = grad_all(params, Batch.empty(2), hyper)
            params = params.replace(e_dic=params.e_dic - 0.01 * grads.e_dic)
            current = dictionary_penalty(params.e_dic, params.r_dic)
            assert current < previous or current < 1e-10
            previous = current
            if current < 1e-10:
                break
        assert previous < 1e-10


class TestLoss:
    def test_components(self):
        instance = random_instance(0, 0.1, 0.1)
        params, batch = instance.params, instance.batch
        scores = np.stack([score_all_tails(params, int(h), int(r)) for h, r in batch.pairs])
        expected = (
            nll_loss(scores, batch.targets, params.sparsity)
            + 0.1 * dictionary_penalty(params.e_dic, params.r_dic)
            + 0.1 * loading_penalty(params.e_loading, params.r_loading)
        )
        assert abs(total_loss(params, batch, instance.hyper) - expected) < 1e-12

    def test_no_penalties(self):
        instance = random_instance(1, 0.0, 0.0)
        params, batch = instance.params, instance.batch
        scores = np.stack([score_all_tails(params, int(h), int(r)) for h, r in batch.pairs])
        expected = nll_loss(scores, batch.targets, params.sparsity)
        assert abs(total_loss(params, batch, instance.hyper) - expected) < 1e-12

    def test_empty_batch(self):
        params = utils.identity_params(np.zeros((3, 4)), np.zeros((3, 2)))
        assert total_loss(params, Batch.empty(4), Hyper(alpha=1.0, beta=1.0)) == 0.0

    def test_batch_shape_checked(self):
        params = utils.random_params(0)
        with pytest.raises(errors.ShapeMismatch):
            total_loss(params, Batch(np.zeros((1, 2), dtype=np.int64), np.zeros((1, 7))), Hyper())
        with pytest.raises(errors.IndexOutOfRange):
            total_loss(params, Batch(np.array([[0, 3]]), np.zeros((1, 8))), Hyper())


class TestGradients:
    @pytest.mark.parametrize("alpha", [0.0, 0.1])
    @pytest.mark.parametrize("beta", [0.0, 0.1])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed, alpha, beta):
        result = check_instance(random_instance(seed, alpha, beta, dropout=0.3 if seed == 1 else 0.0))
        for name, error in result.max_rel_error.items():
            assert error < 1e-4, name

    def test_stationary(self):
        instance = stationary_instance(3)
        grads = grad_all(instance.params, instance.batch, instance.hyper)
        assert grads.max_abs() < 1e-8

    def test_orthogonal_dictionary_has_no_penalty_gradient(self):
        params = utils.identity_params(np.ones((3, 4)), np.ones((3, 2)))
        grads = grad_all(params, Batch.empty(4), Hyper(alpha=1.0, beta=0.0))
        assert not np.any(grads.e_dic)
        assert not np.any(grads.r_dic)

    def test_sign_of_zero(self):
        params = utils.identity_params(np.array([[0.0, 2.0], [-1.0, 0.0]]), np.zeros((2, 1)))
        grads = grad_all(params, Batch.empty(2), Hyper(alpha=0.0, beta=0.5))
        assert grads.e_loading.tolist() == [[0.0, 0.5], [-0.5, 0.0]]
        assert grads.r_loading.tolist() == [[0.0], [0.0]]

    def test_loss_and_grad_agree(self):
        instance = random_instance(4, 0.1, 0.1)
        loss, grads = loss_and_grad(instance.params, instance.batch, instance.hyper)
        assert loss == total_loss(instance.params, instance.batch, instance.hyper)
        assert isinstance(grads, GradSet)


class TestAdam:
    def test_zero_gradient(self):
        params = utils.random_params(0)
        state = AdamState.zeros_like(params)
        zero = GradSet(**{name: np.zeros_like(array) for name, array in params.as_dict().items()})
        new_params, new_state = adam_step(state, params, zero, lr=0.1)
        assert new_state.step == 1
        for name, array in params.as_dict().items():
            np.testing.assert_array_equal(getattr(new_params, name), array)

    def test_first_step_by_hand(self):
        params = utils.identity_params([[0.5]], [[0.0]])
        state = AdamState.zeros_like(params)
        grads = GradSet(**{name: np.zeros_like(array) for name, array in params.as_dict().items()})
        grads.e_loading = np.array([[0.2]])

        new_params, new_state = adam_step(state, params, grads, lr=0.01)
        # m = 0.1 * 0.2, v = 0.001 * 0.04, bias corrected back to 0.2 and 0.04.
        expected = 0.5 - 0.01 * 0.2 / (math.sqrt(0.04) + 1e-8)
        assert abs(new_params.e_loading[0, 0] - expected) < 1e-15
        assert abs(new_state.first["e_loading"][0, 0] - 0.02) < 1e-15
        assert abs(new_state.second["e_loading"][0, 0] - 4e-5) < 1e-18

    def test_deterministic_and_pure(self):
        instance = random_instance(5, 0.1, 0.1)
        state = AdamState.zeros_like(instance.params)
        grads = grad_all(instance.params, instance.batch, instance.hyper)
        before = instance.params.copy()

        a_params, a_state = adam_step(state, instance.params, grads, lr=0.01)
        b_params, b_state = adam_step(state, instance.params, grads, lr=0.01)
        for name in a_params.as_dict():
            np.testing.assert_array_equal(getattr(a_params, name), getattr(b_params, name))
            np.testing.assert_array_equal(a_state.second[name], b_state.second[name])
            np.testing.assert_array_equal(getattr(instance.params, name), getattr(before, name))
        assert state.step == 0


class TestInit:
    def test_orthogonal_dictionaries(self):
        params = init_params(0, 6, 10, 4, 0.5)
        assert dictionary_penalty(params.e_dic, params.r_dic) < 1e-18
        assert params.e_loading.shape == (6, 10)
        assert params.r_loading.shape == (6, 4)

    def test_same_seed(self):
        a = init_params((3, 1), 4, 5, 2, 0.5)
        b = init_params((3, 1), 4, 5, 2, 0.5)
        for name, array in a.as_dict().items():
            np.testing.assert_array_equal(array, getattr(b, name))

    def test_shared_part_ignores_vocab_size(self):
        a = init_params(3, 4, 5, 2, 0.5)
        b = init_params(3, 4, 50, 7, 0.5)
        for name, array in a.shared_dict().items():
            np.testing.assert_array_equal(array, getattr(b, name))

    def test_loading_variance(self):
        params = init_params(0, 16, 1000, 1, 0.5)
        assert abs(np.var(params.e_loading) * 16 - 1.0) < 0.2

    def test_invalid_rank(self):
        with pytest.raises(ValueError):
            init_params(0, 0, 3, 1, 0.5)


class TestDropout:
    def test_rate_zero(self):
        vector = np.arange(5.0)
        assert apply_dropout(vector, 0.0, make_rng(0)) is vector

    def test_evaluation_mode(self):
        vector = np.arange(5.0)
        assert apply_dropout(vector, 0.9, make_rng(0), training=False) is vector

    def test_mean_preserved(self):
        dropped = apply_dropout(np.ones(10000), 0.5, make_rng(1))
        assert abs(dropped.mean() - 1.0) < 0.05
        assert set(np.unique(dropped).tolist()) <= {0.0, 2.0}

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            apply_dropout(np.ones(3), 1.0, make_rng(0))


class TestTrainer:
    def test_memorizes_synthetic_kg(self):
        # With s < 1 a confidently misranked negative has a vanishing gradient, so memorising needs s = 1.
        (shard,) = partition(synthetic_kg(20, 3, 120, 8, seed=0), 1, seed=0, split_ratios=(1.0, 0.0, 0.0))
        hyper = Hyper(alpha=0.0, beta=0.0, lr=0.005, dropout_rate=0.0, batch_size=16)
        params = init_params(0, 16, shard.vocab.num_entities, shard.vocab.num_relations, 1.0)
        opt = AdamState.zeros_like(params)
        rng = make_rng(0)

        losses = []
        for epoch in range(200):
            params, opt, loss = train_epoch(params, opt, shard, hyper, rng, 0, epoch)
            losses.append(loss)
        assert losses[-1] < losses[0]

        client = ClientState(shard=shard, params=params, opt=opt, seed=0, rng=rng)
        assert evaluate_client(client, Split.train).hits[1] >= 0.95
