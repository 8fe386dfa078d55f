"""Tensor core: op values on small known cases, gradient flow through shared
nodes, serialization round-trips, and finite-value enforcement."""

import io

import numpy as np
import pytest

from sacnet import tensor as T
from sacnet.tensor import (BatchNormState, NonFiniteError, Parameter, Tensor,
                           TensorError)


def numeric_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


class TestOpValues:
    def test_add_scale(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0, -1.0]])
        assert np.array_equal(T.add(a, b).data, [[4.0, 1.0]])
        assert np.array_equal(T.scale(a, 2.0).data, [[2.0, 4.0]])

    def test_relu(self):
        x = Tensor([[-1.0, 0.0, 2.0]])
        assert np.array_equal(T.relu(x).data, [[0.0, 0.0, 2.0]])

    def test_sigmoid_midpoint_and_saturation(self):
        x = Tensor([0.0, 30.0, -30.0, 1000.0, -1000.0])
        out = T.sigmoid(x).data
        assert out[0] == 0.5
        assert 0.0 < out[2] < out[1] < 1.0
        # extreme logits saturate without overflowing
        assert np.isfinite(out).all()
        assert np.isclose(out[3], 1.0) and np.isclose(out[4], 0.0)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(0, 10, (5, 7)))
        out = T.softmax(x, axis=1).data
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out > 0)

    def test_softmax_shift_invariance(self):
        x = np.array([[1.0, 2.0, 3.0]])
        a = T.softmax(Tensor(x), axis=1).data
        b = T.softmax(Tensor(x + 100.0), axis=1).data
        assert np.allclose(a, b, atol=1e-12)

    def test_matmul_matches_numpy(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 6))
        assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_matmul_batched(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 5, 2))
        assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_conv2d_matches_naive_loops(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(6):
                    for j in range(6):
                        expected[n, o, i, j] = (
                            xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
        assert np.allclose(out, expected, atol=1e-12)

    def test_conv2d_stride_shape(self):
        x = Tensor(np.zeros((1, 3, 8, 8)))
        w = Tensor(np.zeros((5, 3, 3, 3)))
        b = Tensor(np.zeros(5))
        assert T.conv2d(x, w, b, stride=2, padding=1).shape == (1, 5, 4, 4)

    def test_avgpool2d(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        out = T.avgpool2d(x, 2, 2).data
        assert np.array_equal(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_global_avgpool(self):
        x = Tensor(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2))
        out = T.global_avgpool(x).data
        assert np.array_equal(out.reshape(2), [1.5, 5.5])

    def test_upsample_nearest(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = T.upsample_nearest(x, 2).data
        assert np.array_equal(out[0, 0, :2, :2], [[1.0, 1.0], [1.0, 1.0]])
        assert out[0, 0, 3, 3] == 4.0

    def test_concat_channels(self):
        a = Tensor(np.ones((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 1, 3, 3)))
        out = T.concat_channels([a, b])
        assert out.shape == (1, 3, 3, 3)
        assert out.data[0, 2].sum() == 0

    def test_batchnorm_train_statistics(self):
        rng = np.random.default_rng(4)
        x = rng.normal(3.0, 2.0, size=(8, 3, 5, 5))
        state = BatchNormState(3)
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                            state, train=True).data
        assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_batchnorm_eval_uses_running_stats(self):
        state = BatchNormState(1)
        state.running_mean = np.array([2.0])
        state.running_var = np.array([4.0])
        x = Tensor(np.full((1, 1, 2, 2), 4.0))
        out = T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                            state, train=False).data
        assert np.allclose(out, (4.0 - 2.0) / np.sqrt(4.0 + 1e-5))


class TestAutodiff:
    def test_shared_node_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.add(x, x)
        y.backward()
        assert np.array_equal(x.grad, [2.0])

    def test_backward_through_composite_graph(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def scalar():
            return T.mean_all(T.sigmoid(T.matmul(T.relu(a), w)))

        out = scalar()
        out.backward()
        num_a = numeric_grad(lambda: scalar().item(), a.data)
        num_w = numeric_grad(lambda: scalar().item(), w.data)
        assert np.allclose(a.grad, num_a, atol=1e-7)
        assert np.allclose(w.grad, num_w, atol=1e-7)

    def test_reshape_transpose_grads(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3),
                   requires_grad=True)
        out = T.mean_all(T.transpose(T.reshape(x, (3, 2)), (1, 0)))
        out.backward()
        assert np.allclose(x.grad, np.full((2, 3), 1.0 / 6.0))

    def test_zero_grad(self):
        x = Tensor([1.0], requires_grad=True)
        T.scale(x, 3.0).backward()
        assert x.grad is not None
        x.zero_grad()
        assert x.grad is None

    def test_backward_requires_scalar_seed_ok(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        T.mean_all(x).backward()
        assert np.allclose(x.grad, 0.25)


class TestValidation:
    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])

    def test_shape_mismatch_add(self):
        with pytest.raises(TensorError):
            T.add(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))

    def test_matmul_dim_mismatch(self):
        with pytest.raises(TensorError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_data_is_float64(self):
        assert Tensor([1]).data.dtype == np.float64


class TestSerialization:
    def test_round_trip_bitwise(self):
        rng = np.random.default_rng(6)
        for shape in [(3,), (2, 4), (2, 3, 4, 5), ()]:
            arr = rng.normal(size=shape)
            buf = io.BytesIO()
            T.write_tensor(buf, arr)
            buf.seek(0)
            back = T.read_tensor(buf)
            assert back.shape == arr.shape
            assert np.array_equal(back, arr)
            assert back.tobytes() == arr.tobytes()

    def test_header_layout(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.zeros((2, 3)))
        raw = buf.getvalue()
        assert raw[:4] == T.MAGIC
        assert int.from_bytes(raw[4:8], "little") == T.FORMAT_VERSION
        assert int.from_bytes(raw[8:12], "little") == 2  # rank

    def test_bad_magic_rejected(self):
        buf = io.BytesIO(b"NOPE" + b"\x00" * 32)
        with pytest.raises(TensorError):
            T.read_tensor(buf)

    def test_parameter_has_name(self):
        p = Parameter(np.zeros(3), "block1/conv/weight")
        assert p.name == "block1/conv/weight"
        assert p.requires_grad
