"""Tape autodiff: every primitive's gradient against central differences.

The tape stores live references to parameter arrays, so the finite-difference
probes perturb a coordinate in place, replay the tape, and read the loss node.
"""

import math

import numpy as np
import pytest

from tokenrec.autodiff import Tape, grad
from tokenrec.blocks import RopeConfig, rope_angles
from tokenrec.numeric import NEG_INF, NumericsError, make_rng

FD_STEP = 1e-6
RTOL = 1e-5
ATOL = 1e-7


def scalarize(tape: Tape, node, weights: np.ndarray):
    """Contract an array node with constant weights into a 0-d loss node."""
    n = int(np.prod(node.value.shape)) if node.value.ndim else 1
    flat = tape.reshape(node, (1, n))
    w = tape.constant(weights.reshape(n, 1))
    return tape.reshape(tape.matmul(flat, w), ())


def fd_gradients(tape: Tape, loss, nodes, h: float = FD_STEP):
    """Central-difference gradient of the loss for each listed leaf node."""
    results = []
    for node in nodes:
        flat = node.value.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            tape.replay()
            f_plus = float(loss.value)
            flat[i] = orig - h
            tape.replay()
            f_minus = float(loss.value)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * h)
        results.append(g.reshape(node.value.shape))
    tape.replay()
    return results


def check_op(build, shapes, seed=0):
    """Compare tape gradients of build(tape, *nodes) against central differences."""
    rng = make_rng(seed, 55)
    tape = Tape()
    nodes = [tape.param(f"p{i}", rng.normal(size=s)) for i, s in enumerate(shapes)]
    out = build(tape, *nodes)
    weights = make_rng(seed, 56).normal(size=out.value.shape)
    loss = scalarize(tape, out, weights)
    tape.backward(loss)
    analytic = [tape.grad(n).copy() for n in nodes]
    numeric = fd_gradients(tape, loss, nodes)
    for got, want in zip(analytic, numeric):
        np.testing.assert_allclose(got, want, rtol=RTOL, atol=ATOL)


class TestElementwiseGradients:
    def test_add_same_shape(self):
        check_op(lambda t, a, b: t.add(a, b), [(3, 4), (3, 4)])

    def test_add_broadcast_row(self):
        """Gradient of a broadcast addend sums over the broadcast axis."""
        check_op(lambda t, a, b: t.add(a, b), [(3, 4), (4,)], seed=1)

    def test_add_broadcast_keepdim(self):
        check_op(lambda t, a, b: t.add(a, b), [(2, 3, 4), (2, 1, 4)], seed=2)

    def test_mul_same_shape(self):
        check_op(lambda t, a, b: t.mul(a, b), [(4, 5), (4, 5)], seed=3)

    def test_mul_broadcast_column(self):
        check_op(lambda t, a, b: t.mul(a, b), [(4, 5), (4, 1)], seed=4)

    def test_scale(self):
        check_op(lambda t, a: t.scale(a, -2.5), [(3, 6)], seed=5)

    def test_sigmoid(self):
        check_op(lambda t, a: t.sigmoid(a), [(5, 7)], seed=6)

    def test_sigmoid_value_matches_closed_form(self):
        x = make_rng(7).normal(size=(4, 4)) * 3.0
        tape = Tape()
        out = tape.sigmoid(tape.param("x", x))
        np.testing.assert_allclose(out.value, 1.0 / (1.0 + np.exp(-x)), atol=1e-15)

    def test_sigmoid_saturates_without_overflow(self):
        x = np.array([[-800.0, 800.0]])
        tape = Tape()
        out = tape.sigmoid(tape.param("x", x))
        assert out.value[0, 0] == 0.0 and out.value[0, 1] == 1.0

    def test_swish(self):
        check_op(lambda t, a: t.swish(a), [(5, 7)], seed=8)

    def test_swish_value(self):
        x = make_rng(9).normal(size=(3, 3))
        tape = Tape()
        out = tape.swish(tape.param("x", x))
        np.testing.assert_allclose(out.value, x / (1.0 + np.exp(-x)), atol=1e-15)

    def test_rsqrt_mean_square(self):
        check_op(lambda t, a: t.rsqrt_mean_square(a, 1e-6), [(4, 8)], seed=10)

    def test_rsqrt_mean_square_batched(self):
        check_op(lambda t, a: t.rsqrt_mean_square(a, 1e-6), [(2, 3, 8)], seed=11)

    def test_rsqrt_mean_square_value(self):
        x = make_rng(12).normal(size=(5, 6))
        tape = Tape()
        out = tape.rsqrt_mean_square(tape.param("x", x), 1e-6)
        want = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)
        assert out.value.shape == (5, 1)
        np.testing.assert_allclose(out.value, want, atol=1e-15)


class TestMatmulGradients:
    def test_plain_2d(self):
        check_op(lambda t, a, b: t.matmul(a, b), [(4, 5), (5, 3)], seed=20)

    def test_batched_lhs_flat_rhs(self):
        """The one-big-gemm fast path for stacked inputs times a weight."""
        check_op(lambda t, a, b: t.matmul(a, b), [(2, 3, 5), (5, 4)], seed=21)

    def test_four_dim_lhs_flat_rhs(self):
        check_op(lambda t, a, b: t.matmul(a, b), [(2, 2, 3, 5), (5, 4)], seed=22)

    def test_batched_both(self):
        check_op(lambda t, a, b: t.matmul(a, b), [(3, 4, 5), (3, 5, 2)], seed=23)

    def test_broadcast_batch_dims(self):
        check_op(lambda t, a, b: t.matmul(a, b), [(2, 1, 3, 4), (5, 4, 2)], seed=24)

    def test_shape_mismatch_raises(self):
        tape = Tape()
        a = tape.param("a", np.zeros((2, 3)))
        b = tape.param("b", np.zeros((2, 3)))
        with pytest.raises(NumericsError, match="matmul shape mismatch"):
            tape.matmul(a, b)


class TestSoftmaxGradients:
    def test_unmasked(self):
        check_op(lambda t, a: t.softmax_masked(a), [(4, 6)], seed=30)

    def test_with_causal_mask(self):
        seq = 5
        mask = np.where(np.tril(np.ones((seq, seq))) > 0, 0.0, NEG_INF)
        check_op(lambda t, a: t.softmax_masked(a, mask), [(2, seq, seq)], seed=31)

    def test_masked_entries_get_zero_probability_and_zero_gradient(self):
        seq = 4
        mask = np.where(np.tril(np.ones((seq, seq))) > 0, 0.0, NEG_INF)
        tape = Tape()
        scores = tape.param("s", make_rng(32).normal(size=(seq, seq)))
        probs = tape.softmax_masked(scores, mask)
        loss = scalarize(tape, probs, make_rng(33).normal(size=(seq, seq)))
        tape.backward(loss)
        hidden = ~(np.tril(np.ones((seq, seq))) > 0)
        assert np.all(probs.value[hidden] == 0.0)
        assert np.all(tape.grad(scores)[hidden] == 0.0)

    def test_rows_sum_to_one_under_mask(self):
        seq = 6
        mask = np.where(np.tril(np.ones((seq, seq))) > 0, 0.0, NEG_INF)
        tape = Tape()
        probs = tape.softmax_masked(tape.param("s", make_rng(34).normal(size=(seq, seq))), mask)
        np.testing.assert_allclose(probs.value.sum(axis=-1), 1.0, atol=1e-12)

    def test_fully_masked_row_raises(self):
        tape = Tape()
        scores = tape.param("s", np.zeros((2, 3)))
        with pytest.raises(NumericsError, match="empty visibility row"):
            tape.softmax_masked(scores, np.full((2, 3), NEG_INF))


class TestRotationGradients:
    def test_gradient(self):
        cfg = RopeConfig(head_dim=8)
        cos, sin = rope_angles(np.arange(5), cfg)
        check_op(lambda t, x: t.rope(x, cos, sin), [(2, 5, 8)], seed=40)

    def test_rotation_preserves_pair_norms(self):
        cfg = RopeConfig(head_dim=6)
        cos, sin = rope_angles(np.arange(7), cfg)
        x = make_rng(41).normal(size=(3, 7, 6))
        tape = Tape()
        out = tape.rope(tape.param("x", x), cos, sin)
        np.testing.assert_allclose(
            np.linalg.norm(out.value, axis=-1),
            np.linalg.norm(x, axis=-1),
            atol=1e-12,
        )

    def test_zero_position_is_identity(self):
        cfg = RopeConfig(head_dim=4)
        cos, sin = rope_angles(np.zeros(3, dtype=np.int64), cfg)
        x = make_rng(42).normal(size=(3, 4))
        tape = Tape()
        out = tape.rope(tape.param("x", x), cos, sin)
        np.testing.assert_allclose(out.value, x, atol=1e-15)


class TestGatherGradients:
    def test_gradient_scatter_adds_duplicates(self):
        """Rows gathered twice receive the sum of both output gradients."""
        idx = np.array([0, 2, 2, 1, 0, 0])
        check_op(lambda t, table: t.gather(table, idx), [(3, 4)], seed=50)

    def test_untouched_rows_get_zero_gradient(self):
        tape = Tape()
        table = tape.param("tbl", make_rng(51).normal(size=(5, 3)))
        out = tape.gather(table, np.array([1, 3]))
        loss = scalarize(tape, out, np.ones((2, 3)))
        tape.backward(loss)
        g = tape.grad(table)
        assert np.all(g[[0, 2, 4]] == 0.0)
        assert np.all(g[[1, 3]] == 1.0)

    def test_batched_index_array(self):
        idx = np.array([[0, 1], [2, 0]])
        check_op(lambda t, table: t.gather(table, idx), [(3, 4)], seed=52)

    def test_out_of_range_raises(self):
        tape = Tape()
        table = tape.param("tbl", np.zeros((3, 2)))
        with pytest.raises(NumericsError, match="gather index out of range"):
            tape.gather(table, np.array([0, 3]))
        with pytest.raises(NumericsError, match="gather index out of range"):
            tape.gather(table, np.array([-1]))


class TestShapeOps:
    def test_concat_axis0(self):
        check_op(lambda t, a, b, c: t.concat([a, b, c]), [(2, 4), (3, 4), (1, 4)], seed=60)

    def test_concat_axis1(self):
        check_op(lambda t, a, b: t.concat([a, b], axis=1), [(3, 2), (3, 5)], seed=61)

    def test_reshape(self):
        check_op(lambda t, a: t.reshape(a, (2, 6)), [(3, 4)], seed=62)

    def test_transpose(self):
        check_op(lambda t, a: t.transpose(a, (2, 0, 1)), [(2, 3, 4)], seed=63)

    def test_transpose_value_round_trip(self):
        x = make_rng(64).normal(size=(2, 3, 4, 5))
        tape = Tape()
        node = tape.param("x", x)
        out = tape.transpose(tape.transpose(node, (0, 1, 3, 2)), (0, 1, 3, 2))
        assert np.array_equal(out.value, x)


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        """Equal logits over A classes cost exactly ln A."""
        for a in (2, 4, 7):
            tape = Tape()
            logits = tape.param("lg", np.zeros((5, a)))
            loss = tape.cross_entropy(logits, np.arange(5) % a)
            assert abs(float(loss.value) - math.log(a)) <= 1e-12

    def test_value_matches_hand_softmax(self):
        rng = make_rng(70)
        lv = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        tape = Tape()
        loss = tape.cross_entropy(tape.param("lg", lv), labels)
        p = np.exp(lv) / np.sum(np.exp(lv), axis=1, keepdims=True)
        want = -np.mean(np.log(p[np.arange(6), labels]))
        np.testing.assert_allclose(float(loss.value), want, rtol=1e-12)

    def test_gradient(self):
        labels = np.array([0, 2, 1, 3, 3])
        rng = make_rng(71, 55)
        tape = Tape()
        logits = tape.param("lg", rng.normal(size=(5, 4)))
        loss = tape.cross_entropy(logits, labels)
        tape.backward(loss)
        analytic = tape.grad(logits).copy()
        numeric = fd_gradients(tape, loss, [logits])[0]
        np.testing.assert_allclose(analytic, numeric, rtol=RTOL, atol=ATOL)

    def test_gradient_rows_sum_to_zero(self):
        """Each row's gradient is (softmax - onehot)/n, so it sums to zero."""
        tape = Tape()
        logits = tape.param("lg", make_rng(72).normal(size=(4, 3)))
        tape.backward(tape.cross_entropy(logits, np.array([0, 1, 2, 0])))
        np.testing.assert_allclose(tape.grad(logits).sum(axis=1), 0.0, atol=1e-15)

    def test_empty_labels_raise(self):
        tape = Tape()
        logits = tape.param("lg", np.zeros((0, 4)))
        with pytest.raises(NumericsError, match="empty supervision set"):
            tape.cross_entropy(logits, np.array([], dtype=np.int64))

    def test_label_out_of_vocabulary_raises(self):
        tape = Tape()
        logits = tape.param("lg", np.zeros((2, 3)))
        with pytest.raises(NumericsError, match="label outside action vocabulary"):
            tape.cross_entropy(logits, np.array([0, 3]))

    def test_two_dim_labels_raise(self):
        tape = Tape()
        logits = tape.param("lg", np.zeros((2, 3)))
        with pytest.raises(NumericsError, match="labels must be 1-D"):
            tape.cross_entropy(logits, np.zeros((2, 1), dtype=np.int64))


class TestTapeMechanics:
    def _toy(self, seed=80):
        rng = make_rng(seed)
        tape = Tape()
        a = tape.param("a", rng.normal(size=(3, 4)))
        b = tape.param("b", rng.normal(size=(4, 2)))
        h = tape.swish(tape.matmul(a, b))
        loss = tape.cross_entropy(tape.reshape(h, (3, 2)), np.array([0, 1, 0]))
        return tape, a, b, h, loss

    def test_backward_twice_raises(self):
        tape, _, _, _, loss = self._toy()
        tape.backward(loss)
        with pytest.raises(NumericsError, match="backward requested twice"):
            tape.backward(loss)

    def test_backward_allowed_again_after_replay(self):
        tape, a, _, _, loss = self._toy()
        tape.backward(loss)
        g1 = tape.grad(a).copy()
        tape.replay()
        tape.backward(loss)
        assert np.array_equal(g1, tape.grad(a))

    def test_backward_rejects_non_scalar(self):
        tape = Tape()
        a = tape.param("a", np.zeros((2, 2)))
        out = tape.sigmoid(a)
        with pytest.raises(NumericsError, match="must be a scalar node"):
            tape.backward(out)

    def test_duplicate_parameter_name_raises(self):
        tape = Tape()
        tape.param("w", np.zeros(2))
        with pytest.raises(NumericsError, match="registered twice"):
            tape.param("w", np.ones(2))

    def test_param_node_lookup(self):
        tape, a, _, _, _ = self._toy()
        assert tape.param_node("a") is a
        with pytest.raises(NumericsError, match="no parameter named"):
            tape.param_node("missing")

    def test_gradients_zero_for_off_path_parameter(self):
        tape, a, b, _, loss = self._toy()
        unused = tape.param("unused", np.ones((2, 2)))
        tape.backward(loss)
        grads = tape.gradients()
        assert set(grads) == {"a", "b", "unused"}
        assert np.all(grads["unused"] == 0.0)
        assert np.any(grads["a"] != 0.0)
        assert unused.value.shape == grads["unused"].shape

    def test_grad_convenience_wrapper(self):
        tape, a, _, _, loss = self._toy()
        grads = grad(tape, loss)
        assert set(grads) == {"a", "b"}

    def test_constants_do_not_grow_gradient_paths(self):
        tape = Tape()
        a = tape.param("a", make_rng(81).normal(size=(2, 3)))
        c = tape.constant(np.ones((2, 3)))
        out = tape.mul(a, c)
        assert out.needs_grad
        out2 = tape.mul(c, tape.constant(np.zeros((2, 3))))
        assert not out2.needs_grad


class TestReplay:
    def test_full_replay_is_bit_identical(self):
        rng = make_rng(90)
        tape = Tape()
        a = tape.param("a", rng.normal(size=(4, 4)))
        b = tape.param("b", rng.normal(size=(4, 4)))
        out = tape.softmax_masked(tape.matmul(tape.swish(a), b))
        loss = tape.cross_entropy(tape.reshape(out, (4, 4)), np.array([0, 1, 2, 3]))
        before = [n.value.copy() for n in tape._nodes]
        tape.replay()
        for want, node in zip(before, tape._nodes):
            assert np.array_equal(want, node.value)
        assert float(loss.value) == float(before[loss.index])

    def test_replay_tracks_in_place_parameter_edits(self):
        """The tape holds live references: edit the leaf array, replay, done."""
        tape = Tape()
        a = tape.param("a", np.ones((2, 2)))
        out = tape.scale(a, 3.0)
        a_buf = tape.param_node("a").value
        a_buf[0, 0] = 5.0
        tape.replay()
        assert out.value[0, 0] == 15.0

    def test_selective_replay_matches_full_replay(self):
        rng = make_rng(91)
        tape = Tape()
        a = tape.param("a", rng.normal(size=(3, 5)))
        b = tape.param("b", rng.normal(size=(5, 4)))
        c = tape.param("c", rng.normal(size=(3, 4)))
        loss = tape.cross_entropy(
            tape.add(tape.matmul(tape.sigmoid(a), b), c), np.array([0, 1, 2])
        )
        base = float(loss.value)

        b.value[2, 1] += 0.25
        tape.replay(changed=(b,))
        selective = float(loss.value)
        tape.replay()
        assert selective == float(loss.value)
        assert selective != base

    def test_selective_replay_leaves_upstream_nodes_untouched(self):
        rng = make_rng(92)
        tape = Tape()
        a = tape.param("a", rng.normal(size=(3, 5)))
        b = tape.param("b", rng.normal(size=(5, 4)))
        sig = tape.sigmoid(a)
        out = tape.matmul(sig, b)
        sig_before = sig.value
        b.value[0, 0] += 1.0
        tape.replay(changed=(b,))
        assert sig.value is sig_before  # not recomputed, not even reallocated
        assert out.value[0, 0] != 0.0

    def test_replay_resets_backward_latch(self):
        tape, _, _, _, loss = TestTapeMechanics()._toy(seed=93)
        tape.backward(loss)
        tape.replay(changed=())
        tape.backward(loss)  # must not raise
