import math

import numpy as np
import pytest

from spacap.autodiff import (Adam, AdamState, BatchNormState, CheckpointError, Tensor, adam_step,
                             batch_norm_1d, concat, cross_entropy_logits, exp, getitem, grad_check,
                             layer_norm, linear, load_checkpoint, log, log_softmax, make_op, matmul,
                             no_grad, relu, save_checkpoint, smooth_l1, softmax_masked, swapaxes,
                             tanh)


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_hand_product(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_grad_of_sum_is_b_transpose(self, rng):
        a, b = rand(rng, 3, 4), rand(rng, 4, 2)
        matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            matmul(rand(rng, 2, 3), rand(rng, 2, 3))

    def test_batched_grad_check(self, rng):
        a, b = rand(rng, 2, 3, 4), rand(rng, 2, 4, 5)
        assert grad_check(lambda: (matmul(a, b) * matmul(a, b)).sum(), [a, b]) < 1e-6


class TestPrimitiveGradients:
    """Each primitive against central differences at a random point."""

    @pytest.mark.parametrize("name,fn", [
        ("add", lambda a, b: (a + b) * a),
        ("sub", lambda a, b: (a - b) * b),
        ("mul", lambda a, b: a * b * a),
        ("div_const", lambda a, b: a / 3.0 * b),
        ("exp", lambda a, b: exp(a * 0.5) * b),
        ("log", lambda a, b: log(a * a + 1.0) * b),
        ("tanh", lambda a, b: tanh(a) * b),
        ("relu", lambda a, b: relu(a) * b),
        ("swapaxes", lambda a, b: swapaxes(a, 0, 1) * swapaxes(b, 0, 1)),
        ("reshape", lambda a, b: a.reshape(12) * b.reshape(12)),
        ("getitem", lambda a, b: getitem(a, (slice(None), [0, 2, 2])) * b[:, :3]),
        ("concat", lambda a, b: concat([a, b], axis=1) * concat([b, a], axis=1)),
        ("mean", lambda a, b: a.mean(axis=0, keepdims=True) * b),
        ("broadcast_row", lambda a, b: a * b[0:1, :]),
    ])
    def test_elementwise(self, rng, name, fn):
        a, b = rand(rng, 3, 4), rand(rng, 3, 4)
        if name == "relu":
            # keep coordinates away from the kink
            a.data += np.sign(a.data) * 0.1
        w = Tensor(rng.normal(size=fn(a, b).shape))
        assert grad_check(lambda: (fn(a, b) * w).sum(), [a, b]) < 1e-4

    def test_softmax_masked(self, rng):
        x = rand(rng, 2, 3, 5)
        mask = rng.random((2, 3, 5)) < 0.7
        mask[..., 0] = True
        w = Tensor(rng.normal(size=(2, 3, 5)))
        assert grad_check(lambda: (softmax_masked(x, mask) * w).sum(), [x]) < 1e-4

    def test_log_softmax(self, rng):
        x = rand(rng, 4, 6)
        w = Tensor(rng.normal(size=(4, 6)))
        assert grad_check(lambda: (log_softmax(x) * w).sum(), [x]) < 1e-4

    def test_layer_norm(self, rng):
        x, g, b = rand(rng, 3, 2, 6), rand(rng, 6), rand(rng, 6)
        w = Tensor(rng.normal(size=(3, 2, 6)))
        assert grad_check(lambda: (layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-4

    def test_batch_norm(self, rng):
        x, g, b = rand(rng, 5, 4), rand(rng, 4), rand(rng, 4)
        w = Tensor(rng.normal(size=(5, 4)))
        st = BatchNormState.create(4)
        assert grad_check(lambda: (batch_norm_1d(x, g, b, st, True) * w).sum(), [x, g, b]) < 1e-4

    def test_cross_entropy(self, rng):
        x = rand(rng, 6, 3)
        t = rng.integers(0, 3, 6)
        ign = np.array([False, True, False, False, True, False])
        assert grad_check(lambda: cross_entropy_logits(x, t, ign), [x]) < 1e-4

    def test_smooth_l1(self, rng):
        x = rand(rng, 5, 6, scale=2.0)
        t = np.zeros((5, 6))
        # avoid |r| == beta where the second derivative jumps
        x.data[np.abs(np.abs(x.data) - 1.0) < 0.05] += 0.2
        assert grad_check(lambda: smooth_l1(x, t).sum(), [x]) < 1e-4

    def test_linear(self, rng):
        x, w, b = rand(rng, 2, 3, 4), rand(rng, 4, 5), rand(rng, 5)
        assert grad_check(lambda: (linear(x, w, b) * linear(x, w, b)).sum(), [x, w, b]) < 1e-4


class TestGraph:
    def test_fan_out_accumulates(self):
        x1 = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        (x1 + x1).sum().backward()
        x2 = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        (x2 * 2.0).sum().backward()
        np.testing.assert_array_equal(x1.grad, x2.grad)
        np.testing.assert_array_equal(x1.grad, [2.0, 2.0])

    def test_diamond_visits_once(self, rng):
        x = rand(rng, 3)
        h = x * 3.0
        y = (h * h + h).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, 3.0 * (2 * 3.0 * x.data + 1.0))

    def test_no_grad_builds_no_graph(self, rng):
        x = rand(rng, 3)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_quadratic_exact(self, rng):
        x = rand(rng, 4)
        assert grad_check(lambda: (x * x).sum(), [x], step=1e-5) < 1e-8

    def test_corrupted_backward_detected(self, rng):
        x = rand(rng, 4)

        def bad_square(t):
            return make_op(t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

        assert grad_check(lambda: bad_square(x).sum(), [x]) > 1e-2


class TestSoftmax:
    def test_single_unmasked(self):
        p = softmax_masked(Tensor([[3.0, -1.0, 2.0]]), np.array([[False, True, False]]))
        assert p.data.tolist() == [[0.0, 1.0, 0.0]]

    def test_uniform(self):
        np.testing.assert_allclose(softmax_masked(Tensor(np.zeros(4))).data, 0.25)

    def test_ln2(self):
        np.testing.assert_allclose(softmax_masked(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3],
                                   atol=1e-15)

    def test_rows_and_zeros(self, rng):
        x = Tensor(rng.normal(0, 10, (50, 7)))
        mask = rng.random((50, 7)) < 0.5
        mask[:, 3] = True
        p = softmax_masked(x, mask).data
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
        assert (p[~mask] == 0.0).all()

    def test_fully_masked_row(self):
        with pytest.raises(ValueError):
            softmax_masked(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False] * 3]))


class TestNorms:
    def test_layer_norm_constant_row(self):
        out = layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert (out.data == 0.0).all()

    def test_layer_norm_pm_one(self):
        out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)

    def test_batch_norm_column(self):
        st = BatchNormState.create(1)
        out = batch_norm_1d(Tensor([[-1.0], [1.0]]), Tensor([1.0]), Tensor([0.0]), st, True)
        np.testing.assert_allclose(out.data, [[-1.0], [1.0]], atol=1e-5)
        np.testing.assert_allclose(st.running_mean, [0.0])
        np.testing.assert_allclose(st.running_var, [0.9 + 0.1 * 2.0])

    def test_batch_norm_constant_column(self):
        st = BatchNormState.create(2)
        out = batch_norm_1d(Tensor(np.full((3, 2), 5.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, True)
        assert (out.data == 0.0).all()

    def test_batch_norm_eval_uses_running_stats(self, rng):
        st = BatchNormState(np.array([1.0, -1.0]), np.array([4.0, 1.0]))
        x = Tensor(rng.normal(size=(1, 2)))
        a = batch_norm_1d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), st, False).data
        b = batch_norm_1d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), st, False).data
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, (x.data - [1.0, -1.0]) / np.sqrt([4.0, 1.0] + np.array(1e-5)))

    def test_batch_norm_needs_two_rows(self):
        with pytest.raises(ValueError):
            batch_norm_1d(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                          BatchNormState.create(2), True)


class TestCrossEntropy:
    def test_uniform_three_classes(self):
        assert cross_entropy_logits(Tensor(np.zeros((4, 3))), [0, 1, 2, 0]).item() == pytest.approx(math.log(3))

    def test_confident(self):
        logits = Tensor(np.array([[50.0, 0.0, 0.0]]))
        assert cross_entropy_logits(logits, [0]).item() < 1e-20

    def test_ignored_rows_inert(self, rng):
        base = rng.normal(size=(4, 3))
        t = [0, 2, 1, 1]
        ign = [False, True, False, False]
        a = Tensor(base.copy(), requires_grad=True)
        la = cross_entropy_logits(a, t, ign)
        la.backward()
        other = base.copy()
        other[1] = [100.0, -3.0, 7.0]
        b = Tensor(other, requires_grad=True)
        lb = cross_entropy_logits(b, t, ign)
        lb.backward()
        assert la.item() == lb.item()
        np.testing.assert_array_equal(a.grad, b.grad)
        assert (a.grad[1] == 0).all()

    def test_all_ignored(self):
        with pytest.raises(ValueError):
            cross_entropy_logits(Tensor(np.zeros((2, 3))), [0, 1], [True, True])


class TestAdam:
    def test_zero_grad_no_decay_unchanged(self, rng):
        p = rand(rng, 3)
        before = p.data.copy()
        adam_step([p], [np.zeros(3)], AdamState(weight_decay=0.0))
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_is_lr_sign(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        g = np.array([0.5, -2.0, 1e-3])
        adam_step([p], [g], AdamState(lr=1e-3, weight_decay=0.0))
        np.testing.assert_allclose(p.data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(p.data, -1e-3 * np.sign(g), rtol=1e-4)

    def test_decoupled_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        adam_step([p], [np.zeros(1)], AdamState(lr=0.1, weight_decay=0.5))
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_runs_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(5)
            w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
            x = Tensor(rng.normal(size=(8, 4)))
            opt = Adam([w])
            for _ in range(20):
                opt.zero_grad()
                y = matmul(x, w)
                (y * y).sum().backward()
                opt.step()
            return w.data

        np.testing.assert_array_equal(run(), run())


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2,)), requires_grad=True)
        opt = Adam([w, b])
        (matmul(Tensor(np.ones((1, 3))), w) * b).sum().backward()
        opt.step()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"w": w.data, "b": b.data}, {"note": "x"}, opt.state, ["w", "b"])
        tensors, meta, adam = load_checkpoint(path)
        np.testing.assert_array_equal(tensors["w"], w.data)
        np.testing.assert_array_equal(tensors["b"], b.data)
        assert meta == {"note": "x"}
        assert adam.step == 1
        np.testing.assert_array_equal(adam.m[0], opt.state.m[0])
        np.testing.assert_array_equal(adam.v[1], opt.state.v[1])

    def test_bytes_deterministic(self, tmp_path):
        t = {"a": np.arange(4.0), "b": np.eye(2)}
        save_checkpoint(tmp_path / "1.ckpt", t, {"k": 1})
        save_checkpoint(tmp_path / "2.ckpt", dict(reversed(list(t.items()))), {"k": 1})
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")
