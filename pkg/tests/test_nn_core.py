"""Unit tests for the differentiable core: layers, losses, optimizer."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabvfl.autodiff import Tensor, check_matrix, sparsemax, tsum
from tabvfl.nn_core import (
    Adam,
    BatchNorm,
    FeatureTransformer,
    GLUBlock,
    Linear,
    attentive_mask_step,
    cross_entropy,
    fc_forward,
    grad_check,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    sparsity_loss,
)
from tabvfl.autodiff import Parameter
from tabvfl.errors import CheckpointFormatError


def sparsemax_oracle_row(z):
    """Plain per-row sort-and-threshold projection, written independently."""
    z = np.asarray(z, dtype=np.float64)
    zs = np.sort(z)[::-1]
    tau = 0.0
    for j in range(1, z.size + 1):
        cs = zs[:j].sum()
        if 1.0 + j * zs[j - 1] > cs:
            tau = (cs - 1.0) / j
    return np.maximum(z - tau, 0.0)


class TestMatrixContract:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            check_matrix(np.array([[1.0, np.nan]]))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError, match="2-D"):
            check_matrix(np.zeros(3))


class TestFullyConnected:
    def test_identity_weights(self):
        w = Parameter(np.eye(2), "w")
        b = Parameter(np.zeros((1, 2)), "b")
        out = fc_forward(np.array([[1.0, 2.0]]), w, b)
        assert np.allclose(out.data, [[1.0, 2.0]])

    def test_hand_product(self):
        w = Parameter(np.array([[2.0], [3.0]]), "w")
        b = Parameter(np.array([[1.0]]), "b")
        out = fc_forward(np.array([[1.0, 2.0]]), w, b)
        assert np.allclose(out.data, [[9.0]])

    def test_zero_weights_return_bias(self):
        w = Parameter(np.zeros((3, 2)), "w")
        b = Parameter(np.array([[5.0, 5.0]]), "b")
        out = fc_forward(np.random.default_rng(0).normal(size=(4, 3)), w, b)
        assert np.allclose(out.data, 5.0)

    def test_shape_mismatch(self):
        w = Parameter(np.zeros((3, 2)), "w")
        with pytest.raises(ValueError, match="mismatch"):
            fc_forward(np.zeros((4, 2)), w, None)

    def test_backward_grads(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(3, 4)))
        w = Parameter(rng.normal(size=(4, 2)), "w")
        b = Parameter(rng.normal(size=(1, 2)), "b")
        out = fc_forward(x, w, b)
        tsum(out).backward()
        assert np.allclose(w.grad, x.data.T @ np.ones((3, 2)))
        assert np.allclose(b.grad, 3.0)
        assert np.allclose(x.grad, np.ones((3, 2)) @ w.data.T)


class TestBatchNorm:
    def test_constant_column_zeroed(self):
        bn = BatchNorm(1, "bn")
        out = bn(np.full((4, 1), 7.0))
        assert np.all(np.abs(out.data) < 1e-2)

    def test_hand_normalization(self):
        bn = BatchNorm(1, "bn")
        out = bn(np.array([[0.0], [2.0]]))
        assert np.allclose(out.data, [[-1.0], [1.0]], atol=1e-4)

    def test_zero_gamma_gives_beta(self):
        bn = BatchNorm(2, "bn")
        bn.gamma.data = np.zeros((1, 2))
        bn.beta.data = np.array([[3.0, -1.0]])
        out = bn(np.random.default_rng(0).normal(size=(5, 2)))
        assert np.allclose(out.data, [[3.0, -1.0]] * 5)

    def test_training_normalizes_population_stats(self):
        # the contract holds down to input variance 1e-4
        rng = np.random.default_rng(2)
        bn = BatchNorm(3, "bn")
        x = rng.normal(loc=5.0, scale=1.0, size=(64, 3))
        x[:, 0] *= 1e-2   # variance ~1e-4
        x[:, 2] *= 50.0
        out = bn(x).data
        assert np.all(np.abs(out.mean(axis=0)) < 1e-8)
        assert np.all(np.abs(out.var(axis=0) - 1.0) < 1e-6)

    def test_running_stats_updated(self):
        bn = BatchNorm(1, "bn", momentum=0.5)
        bn(np.array([[0.0], [2.0]]))
        assert np.allclose(bn.running_mean, 0.5)  # 0.5*0 + 0.5*1
        assert np.allclose(bn.running_var, 1.0)  # 0.5*1 + 0.5*1

    def test_inference_deterministic(self):
        bn = BatchNorm(2, "bn")
        bn(np.random.default_rng(0).normal(size=(8, 2)))
        bn.set_training(False)
        x = np.random.default_rng(1).normal(size=(4, 2))
        a = bn(x).data
        b = bn(x).data
        assert np.array_equal(a, b)

    def test_empty_batch_rejected(self):
        bn = BatchNorm(2, "bn")
        with pytest.raises(ValueError, match="empty"):
            bn(np.zeros((0, 2)))

    def test_training_needs_two_rows(self):
        bn = BatchNorm(2, "bn")
        with pytest.raises(ValueError, match=">= 2"):
            bn(np.zeros((1, 2)))


class TestGLUTransformer:
    def test_zero_weights_input_independent(self):
        rng = np.random.default_rng(3)
        block = GLUBlock(3, 2, rng, "g")
        block.fc.weight.data[:] = 0.0
        block.set_training(False)
        bias = block.fc.bias.data[0]
        scale = 1.0 / np.sqrt(1.0 + block.bn.eps)
        pre = bias * scale
        expected = pre[:2] * (1.0 / (1.0 + np.exp(-pre[2:])))
        out = block(rng.normal(size=(5, 3))).data
        assert np.allclose(out, expected[None, :].repeat(5, axis=0))

    def test_scalar_glu_by_hand(self):
        rng = np.random.default_rng(4)
        block = GLUBlock(1, 1, rng, "g")
        block.fc.weight.data = np.array([[2.0, -1.0]])
        block.fc.bias.data = np.array([[0.5, 0.25]])
        block.set_training(False)
        x = 0.7
        scale = 1.0 / np.sqrt(1.0 + block.bn.eps)
        a = (2.0 * x + 0.5) * scale
        c = (-1.0 * x + 0.25) * scale
        expected = a * (1.0 / (1.0 + np.exp(-c)))
        out = block(np.array([[x]])).data
        assert np.allclose(out, [[expected]])

    def test_residual_arithmetic(self):
        rng = np.random.default_rng(5)
        ft = FeatureTransformer(3, 2, [], 2, rng, "ft")
        ft.blocks[1].fc.weight.data[:] = 0.0
        ft.set_training(False)
        x = rng.normal(size=(4, 3))
        first = ft.blocks[0](x).data
        second = ft.blocks[1](Tensor(first)).data  # input-independent rows
        expected = np.sqrt(0.5) * (first + second)
        assert np.allclose(ft(x).data, expected)

    def test_requires_a_block(self):
        with pytest.raises(ValueError, match="at least one block"):
            FeatureTransformer(3, 2, [], 0, np.random.default_rng(0), "ft")

    def test_output_width(self):
        rng = np.random.default_rng(6)
        shared = [Linear(5, 8, rng, "s0"), Linear(4, 8, rng, "s1")]
        ft = FeatureTransformer(5, 4, shared, 2, rng, "ft")
        assert ft(rng.normal(size=(3, 5))).data.shape == (3, 4)


class TestSparsemax:
    def test_symmetry(self):
        out = sparsemax(np.array([[0.0, 0.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_vertex(self):
        out = sparsemax(np.array([[3.0, 0.0]]))
        assert np.allclose(out.data, [[1.0, 0.0]])

    def test_sort_threshold_hand_case(self):
        out = sparsemax(np.array([[1.0, 0.5, -1.0]]))
        assert np.allclose(out.data, [[0.75, 0.25, 0.0]], atol=1e-12)

    def test_matches_oracle_on_random_rows(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            d = rng.integers(1, 17)
            z = rng.normal(scale=rng.uniform(0.1, 5.0), size=(1, d))
            got = sparsemax(z).data[0]
            want = sparsemax_oracle_row(z[0])
            assert np.max(np.abs(got - want)) <= 1e-10

    @settings(max_examples=200)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12))
    def test_simplex_property(self, row):
        out = sparsemax(np.array([row])).data[0]
        assert np.all(out >= 0.0)
        assert abs(out.sum() - 1.0) <= 1e-12

    def test_backward_matches_fd_away_from_kinks(self):
        rng = np.random.default_rng(8)
        r = rng.normal(size=(1, 4))

        def f(t):
            return tsum(sparsemax(t) * Tensor(r))

        checked = 0
        while checked < 5:
            z = rng.normal(size=(1, 4))
            out = sparsemax_oracle_row(z[0])
            support = out > 0
            tau = (z[0][support] - out[support]).max()
            on_gap = out[support].min()
            off_gap = (tau - z[0][~support]).min() if np.any(~support) else np.inf
            if min(on_gap, off_gap) < 1e-3:  # too close to a support change
                continue
            err = grad_check(f, z, eps=1e-7)
            assert err <= 1e-5
            checked += 1


class TestAttentiveStep:
    def _parts(self, d_in, d_att, seed):
        rng = np.random.default_rng(seed)
        fc = Linear(d_att, d_in, rng, "att.fc")
        bn = BatchNorm(d_in, "att.bn")
        return fc, bn

    def test_prior_update_identity(self):
        fc, bn = self._parts(3, 2, 0)
        a = np.random.default_rng(1).normal(size=(4, 2))
        mask, prior_next = attentive_mask_step(a, np.ones((4, 3)), fc, bn, 1.0)
        assert np.allclose(prior_next.data, 1.0 - mask.data)
        assert np.allclose(mask.data.sum(axis=1), 1.0)

    def test_zero_prior_column_excluded(self):
        fc, bn = self._parts(3, 2, 2)
        prior = np.ones((4, 3))
        prior[:, 1] = 0.0
        a = np.random.default_rng(3).normal(size=(4, 2))
        mask, _ = attentive_mask_step(a, prior, fc, bn, 1.3)
        assert np.allclose(mask.data[:, 1], 0.0)

    def test_relaxation_arithmetic(self):
        fc, bn = self._parts(2, 2, 4)
        fc.weight.data[:] = 0.0
        fc.bias.data[:] = 0.0
        bn.set_training(False)
        a = np.random.default_rng(5).normal(size=(3, 2))
        mask, prior_next = attentive_mask_step(a, np.ones((3, 2)), fc, bn, 1.3)
        assert np.allclose(mask.data, 0.5)
        assert np.allclose(prior_next.data, 0.8)

    def test_negative_prior_rejected(self):
        fc, bn = self._parts(2, 2, 6)
        with pytest.raises(ValueError, match=">= 0"):
            attentive_mask_step(np.zeros((2, 2)), -np.ones((2, 2)), fc, bn, 1.3)


class TestSparsityLoss:
    def test_one_hot_is_zero(self):
        masks = [np.eye(3)]
        assert abs(float(sparsity_loss(masks, 1e-15).data)) < 1e-12

    def test_uniform_mask_closed_form(self):
        d = 5
        masks = [np.full((4, d), 1.0 / d)]
        val = float(sparsity_loss(masks, 1e-15).data)
        assert np.isclose(val, -np.log(d), atol=1e-9)

    def test_hand_entropy(self):
        masks = [np.array([[0.75, 0.25, 0.0]])]
        val = float(sparsity_loss(masks, 1e-15).data)
        expected = 0.75 * np.log(0.75) + 0.25 * np.log(0.25)
        assert np.isclose(val, expected, atol=1e-9)
        assert np.isclose(val, -0.5623, atol=1e-4)

    def test_never_positive(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            m = sparsemax(rng.normal(size=(6, 5))).data
            assert float(sparsity_loss([m], 1e-15).data) <= 1e-12

    def test_needs_masks(self):
        with pytest.raises(ValueError):
            sparsity_loss([], 1e-15)


class TestReconstructionLoss:
    def test_perfect_reconstruction(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        s = np.ones_like(x)
        assert float(reconstruction_loss(x, Tensor(x.copy()), s).data) == 0.0

    def test_nothing_masked(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 3))
        xh = rng.normal(size=(4, 3))
        assert float(reconstruction_loss(x, Tensor(xh), np.zeros_like(x)).data) == 0.0

    def test_hand_value(self):
        x = np.array([[0.0], [2.0]])
        xh = np.array([[1.0], [1.0]])
        s = np.ones((2, 1))
        assert np.isclose(float(reconstruction_loss(x, Tensor(xh), s).data), 1.0)

    def test_zero_iff_masked_residual_zero(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 4))
        s = (rng.random((5, 4)) < 0.5).astype(float)
        xh = x + (1.0 - s) * rng.normal(size=(5, 4))  # only unmasked entries differ
        assert float(reconstruction_loss(x, Tensor(xh), s).data) == 0.0
        xh2 = xh.copy()
        idx = np.argwhere(s == 1.0)
        if len(idx):
            i, j = idx[0]
            xh2[i, j] += 0.5
            assert float(reconstruction_loss(x, Tensor(xh2), s).data) > 0.0

    def test_constant_column_guard(self):
        x = np.full((3, 1), 2.0)  # zero std -> divisor 1
        xh = x + 1.0
        val = float(reconstruction_loss(x, Tensor(xh), np.ones_like(x)).data)
        assert np.isclose(val, 1.0)

    def test_non_binary_mask_rejected(self):
        x = np.zeros((2, 2))
        with pytest.raises(ValueError, match="binary"):
            reconstruction_loss(x, Tensor(x), np.full((2, 2), 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            reconstruction_loss(np.zeros((2, 2)), Tensor(np.zeros((2, 3))),
                                np.zeros((2, 2)))


class TestCrossEntropy:
    def test_uniform_prediction(self):
        logits = np.zeros((4, 2))
        y = np.array([0, 1, 0, 1])
        assert np.isclose(float(cross_entropy(Tensor(logits), y).data), np.log(2))

    def test_saturation_limit(self):
        logits = np.array([[50.0, 0.0]])
        val = float(cross_entropy(Tensor(logits), np.array([0])).data)
        assert val < 1e-8

    def test_hand_softmax(self):
        logits = np.array([[1.0, 0.0]])
        val = float(cross_entropy(Tensor(logits), np.array([0])).data)
        assert np.isclose(val, 0.31326168751822286)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = Parameter(np.ones((2, 2)), "p")
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros((2, 2))
        opt.step()
        assert np.array_equal(p.data, np.ones((2, 2)))

    def test_first_step_closed_form(self):
        p = Parameter(np.zeros((1, 1)), "p")
        opt = Adam([p], lr=0.1)
        p.grad = np.ones((1, 1))
        opt.step()
        assert np.isclose(p.data[0, 0], -0.1, atol=1e-6)
        assert opt.t == 1

    def test_disjoint_parameters_independent(self):
        p1 = Parameter(np.zeros((1, 1)), "p1")
        p2 = Parameter(np.full((1, 1), 5.0), "p2")
        opt = Adam([p1, p2], lr=0.1)
        p1.grad = np.ones((1, 1))
        p2.grad = np.zeros((1, 1))
        opt.step()
        assert p1.data[0, 0] != 0.0
        assert p2.data[0, 0] == 5.0


class TestGradCheck:
    def test_quadratic(self):
        def f(t):
            return tsum(t * t)

        err = grad_check(f, np.array([[1.0]]), eps=1e-6)
        assert err <= 1e-6

    def test_glu_block_composition(self):
        rng = np.random.default_rng(11)
        block = GLUBlock(3, 2, rng, "g")
        r = rng.normal(size=(4, 2))

        def f(t):
            return tsum(block(t) * Tensor(r))

        err = grad_check(f, rng.normal(size=(4, 3)), eps=1e-6)
        assert err <= 1e-4


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(12)
        entries = [("a.weight", rng.normal(size=(3, 4))),
                   ("b.bias", rng.normal(size=(1, 4)))]
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, entries)
        loaded = load_checkpoint(path)
        assert set(loaded) == {"a.weight", "b.bias"}
        for name, mat in entries:
            assert np.array_equal(loaded[name], mat)

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, [("w", np.ones((2, 2)))])
        blob = bytearray(path.read_bytes())
        blob[0] = 0xFF  # id length now overruns the file
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, [("w", np.ones((2, 2)))])
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)
