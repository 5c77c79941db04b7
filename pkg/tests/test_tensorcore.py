import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepair import tensorcore as tc
from deepair.errors import CheckpointError, NonFiniteError, ShapeError, TapeError
from deepair.tensorcore import Tape, Tensor, backward

F64 = np.float64


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, dtype=F64)


def conv_reference(x, w, b=None):
    """Six nested loops; zero padding (k-1)/2."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = (k - 1) // 2
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                s = 0.0
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            r, q = i + di - p, j + dj - p
                            if 0 <= r < h and 0 <= q < wd:
                                s += x[c, r, q] * w[o, c, di, dj]
                out[o, i, j] = s + (0.0 if b is None else b[o])
    return out


class TestConv:
    def test_identity_1x1(self):
        x = np.random.default_rng(0).normal(size=(4, 6, 5)).astype(np.float32)
        w = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
        assert np.array_equal(tc.conv2d(x, w).data, x)

    def test_counting_taps(self):
        out = tc.conv2d(np.full((1, 5, 5), 2.0, np.float32), np.ones((1, 1, 3, 3), np.float32)).data
        assert out[0, 2, 2] == 18.0 and out[0, 0, 0] == 8.0 and out[0, 0, 2] == 12.0

    def test_loop_reference(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 5)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        ref = conv_reference(x.astype(F64), w.astype(F64), b.astype(F64))
        assert np.allclose(tc.conv2d(x, w, b).data, ref, atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            tc.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)))
        with pytest.raises(ShapeError):
            tc.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 2, 5, 5)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([1, 3]))
    def test_linearity(self, seed, a, b, k):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 2, 6, 7))
        w = rng.normal(size=(3, 2, k, k))
        lhs = tc.conv2d(Tensor(a * x + b * y, dtype=F64), Tensor(w, dtype=F64)).data
        rhs = a * tc.conv2d(Tensor(x, dtype=F64), Tensor(w, dtype=F64)).data \
            + b * tc.conv2d(Tensor(y, dtype=F64), Tensor(w, dtype=F64)).data
        assert np.allclose(lhs, rhs, atol=1e-5)


class TestBatchNorm:
    def test_standard_input_passthrough(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(64, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = tc.batchnorm(Tensor(x, dtype=F64), np.ones(3), np.zeros(3), tc.BatchNormState(3, F64)).data
        assert np.allclose(out, x, atol=1e-4)

    def test_zero_scale(self):
        x = np.random.default_rng(3).normal(size=(4, 2, 3, 3))
        out = tc.batchnorm(Tensor(x), np.zeros(2), np.array([1.5, -2.0]), tc.BatchNormState(2)).data
        assert np.allclose(out[:, 0], 1.5) and np.allclose(out[:, 1], -2.0)

    def test_moments(self):
        x = np.random.default_rng(4).normal(3.0, 5.0, size=(16, 4, 5, 5))
        out = tc.batchnorm(Tensor(x, dtype=F64), np.ones(4), np.zeros(4), tc.BatchNormState(4, F64)).data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4

    def test_running_stats_and_eval(self):
        x = np.random.default_rng(5).normal(2.0, 3.0, size=(8, 1, 4, 4))
        st_ = tc.BatchNormState(1, F64)
        tc.batchnorm(Tensor(x, dtype=F64), np.ones(1), np.zeros(1), st_)
        n = x.size
        assert st_.mean[0] == pytest.approx(0.1 * x.mean())
        assert st_.var[0] == pytest.approx(0.9 + 0.1 * x.var() * n / (n - 1))
        out = tc.batchnorm(Tensor(x, dtype=F64), np.ones(1), np.zeros(1), st_, mode="eval").data
        assert np.allclose(out, (x - st_.mean[0]) / np.sqrt(st_.var[0] + 1e-5))


def _sig(z):
    return 1 / (1 + np.exp(-z))


class TestLstm:
    def test_zero_weights(self):
        h, c = tc.lstm_cell(np.ones((1, 3)), np.zeros((1, 4)), np.zeros((1, 4)),
                            np.zeros((3, 16)), np.zeros((4, 16)), np.zeros(16))
        assert not h.data.any() and not c.data.any()

    def test_memory_carry(self):
        b = np.zeros(16)
        b[:4] = -50
        b[4:8] = 50
        c0 = np.array([[0.3, -1.2, 2.0, 0.5]])
        _, c = tc.lstm_cell(np.ones((1, 3)), np.zeros((1, 4)), c0, np.zeros((3, 16)),
                            np.zeros((4, 16)), b)
        assert np.allclose(c.data, c0, atol=1e-6)

    def test_formula(self):
        rng = np.random.default_rng(6)
        x, h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        wx, wh, b = rng.normal(size=(3, 16)), rng.normal(size=(4, 16)), rng.normal(size=16)
        h, c = tc.lstm_cell(Tensor(x, dtype=F64), h0, c0, Tensor(wx, dtype=F64), wh, b)
        z = x @ wx + h0 @ wh + b
        i, f, g, o = _sig(z[:, :4]), _sig(z[:, 4:8]), np.tanh(z[:, 8:12]), _sig(z[:, 12:])
        cref = f * c0 + i * g
        assert np.allclose(c.data, cref) and np.allclose(h.data, o * np.tanh(cref))

    def test_gradients(self):
        rng = np.random.default_rng(7)
        ts = [leaf(rng, 2, 3), leaf(rng, 2, 4), leaf(rng, 2, 4),
              leaf(rng, 3, 16, scale=0.5), leaf(rng, 4, 16, scale=0.5), leaf(rng, 16, scale=0.5)]
        proj = rng.normal(size=(2, 4))

        def loss():
            h, c = tc.lstm_cell(*ts)
            return tc.reduce_sum(tc.mul(h, proj) + tc.mul(c, c))

        assert tc.check_gradients(loss, ts) < 1e-4


class TestEmbedding:
    def test_lookup(self):
        out = tc.embedding(2, np.eye(5)).data
        assert out.tolist() == [0, 0, 1, 0, 0]
        table = np.random.default_rng(8).normal(size=(7, 3))
        assert np.array_equal(tc.embedding(4, table).data, tc.embedding(4, table).data)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            tc.embedding(7, np.zeros((7, 1)))
        with pytest.raises(IndexError):
            tc.embedding(-1, np.zeros((7, 1)))

    def test_row_gradient(self):
        table = Tensor(np.random.default_rng(9).normal(size=(7, 3)), requires_grad=True, dtype=F64)
        with Tape() as tape:
            loss = tc.reduce_sum(tc.embedding(3, table))
        backward(loss, tape)
        expected = np.zeros((7, 3))
        expected[3] = 1
        assert np.array_equal(table.grad, expected)
        assert tc.check_gradients(lambda: tc.reduce_sum(tc.embedding([3, 3, 5], table)), [table]) < 1e-4


class TestBackward:
    def test_identity(self):
        p = Tensor(np.array(2.5), requires_grad=True)
        backward(p, Tape())
        assert p.grad == 1

    def test_no_path(self):
        p = Tensor(np.ones(3), requires_grad=True)
        q = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = tc.reduce_sum(q)
        backward(loss, tape)
        assert not p.grad.any()

    def test_non_scalar(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = tc.scale(p, 2.0)
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_single_use(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = tc.reduce_sum(p)
        backward(loss, tape)
        with pytest.raises(TapeError):
            backward(loss, tape)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_forward_names_op(self):
        with pytest.raises(NonFiniteError, match="mul"):
            tc.mul(np.array([1e30], np.float32), np.array([1e30], np.float32))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_gradient(self):
        # forward stays finite (1e200) but d/db = c * a = 1e400 overflows
        a = np.array([1e200])
        b = Tensor(np.array([1e-200]), requires_grad=True, dtype=F64)
        with Tape() as tape:
            loss = tc.reduce_sum(tc.mul(tc.mul(a, b), np.array([1e200])))
        with pytest.raises(NonFiniteError, match="mul"):
            backward(loss, tape)


def _op_cases(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    v = leaf(rng, 4)
    w, bias = leaf(rng, 4, 5), leaf(rng, 5)
    x = leaf(rng, 2, 3, 5, 5)
    k3, k1, cb = leaf(rng, 4, 3, 3, 3), leaf(rng, 4, 3, 1, 1), leaf(rng, 4)
    sc, sh = leaf(rng, 3), leaf(rng, 3)
    proj4 = rng.normal(size=(2, 4, 5, 5))
    proj3 = rng.normal(size=(2, 3, 5, 5))
    s = tc.reduce_sum
    return {
        "add": (lambda: s(tc.mul(tc.add(a, v), b)), [a, b, v]),
        "sub": (lambda: s(tc.mul(tc.sub(a, v), b)), [a, b, v]),
        "mul": (lambda: s(tc.mul(a, b)), [a, b]),
        "relu": (lambda: s(tc.mul(tc.relu(a), b)), [a, b]),
        "sigmoid": (lambda: s(tc.mul(tc.sigmoid(a), b)), [a, b]),
        "tanh": (lambda: s(tc.mul(tc.tanh(a), b)), [a, b]),
        "reshape": (lambda: s(tc.mul(tc.reshape(a, (4, 3)), tc.reshape(b, (4, 3)))), [a, b]),
        "index": (lambda: s(tc.mul(a[1:, ::2], b[1:, ::2])), [a, b]),
        "concat": (lambda: s(tc.mul(tc.concat([a, b], axis=1), tc.concat([b, a], axis=1))), [a, b]),
        "stack": (lambda: s(tc.mul(tc.stack([a, b]), tc.stack([b, b]))), [a, b]),
        "mean": (lambda: s(tc.mul(tc.mean(x, axis=(2, 3)), tc.mean(x, axis=(2, 3)))), [x]),
        "linear": (lambda: s(tc.mul(tc.linear(a, w, bias), tc.linear(b, w))), [a, b, w, bias]),
        "conv3x3": (lambda: s(tc.mul(tc.conv2d(x, k3, cb), proj4)), [x, k3, cb]),
        "conv1x1": (lambda: s(tc.mul(tc.conv2d(x, k1, cb), proj4)), [x, k1, cb]),
        "batchnorm": (lambda: s(tc.mul(tc.batchnorm(x, sc, sh, tc.BatchNormState(3, F64)), proj3)),
                      [x, sc, sh]),
        "broadcast_to": (lambda: s(tc.mul(tc.broadcast_to(v, (3, 4)), a)), [v, a]),
        "mse_loss": (lambda: tc.mse_loss(a, b.data * 0.3), [a]),
        "scale": (lambda: s(tc.mul(tc.scale(a, -1.7), b)), [a, b]),
    }


@pytest.mark.parametrize("name", sorted(_op_cases(np.random.default_rng(0))))
def test_op_gradients(name):
    fn, tensors = _op_cases(np.random.default_rng(10))[name]
    assert tc.check_gradients(fn, tensors) < 1e-4


class TestSgd:
    def test_zero_lr(self):
        ps = tc.ParameterSet()
        p = ps.add("p", np.array([1.0, 2.0], np.float32))
        p.grad[...] = 5
        tc.sgd_step(ps, 0.0)
        assert p.data.tolist() == [1.0, 2.0] and not p.grad.any()

    def test_arithmetic(self):
        ps = tc.ParameterSet()
        p = ps.add("p", np.array([1.0]))
        p.grad[...] = 2
        tc.sgd_step(ps, 0.1)
        assert p.data[0] == pytest.approx(0.8)

    def test_geometric_convergence(self):
        ps = tc.ParameterSet()
        p = ps.add("p", np.array([0.0]))
        for _ in range(100):
            with Tape() as tape:
                loss = tc.mse_loss(p, np.array([3.0]))
            backward(loss, tape)
            tc.sgd_step(ps, 0.1)
        # error shrinks by (1 - 2*0.1) per step: 3 * 0.8**100
        assert abs(p.data[0] - 3) < 1e-6


class TestMse:
    @pytest.mark.parametrize("diff,expected", [([0] * 5, 0), ([1, 0, 0, 0, 0], 1), ([1, 2, 3, 0, 0], 14)])
    def test_values(self, diff, expected):
        assert float(tc.mse_loss(np.array(diff, np.float32), np.zeros(5)).data) == expected


def test_relu_properties():
    x = np.random.default_rng(11).normal(size=100)
    y = tc.relu(x).data
    assert (y >= 0).all() and np.array_equal(y[x >= 0], x[x >= 0].astype(y.dtype))


def test_forward_bit_identical():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 4, 9, 9)).astype(np.float32)
    w = rng.normal(size=(5, 4, 3, 3)).astype(np.float32)
    assert tc.conv2d(x, w).data.tobytes() == tc.conv2d(x.copy(), w.copy()).data.tobytes()


class TestCheckpoint:
    def _params(self):
        ps = tc.ParameterSet()
        ps.add("a.w", np.arange(6, dtype=np.float32).reshape(2, 3))
        ps.add("a.b", np.array([0.5], np.float32))
        st_ = ps.add_bn("bn", 2)
        st_.mean[...] = [1, 2]
        return ps

    def test_round_trip(self, tmp_path):
        ps = self._params()
        tc.save_checkpoint(tmp_path / "c.bin", ps, {"seed": 3})
        state, meta = tc.read_checkpoint(tmp_path / "c.bin")
        assert meta == {"seed": 3}
        assert list(state) == ["a.w", "a.b", "bn.running_mean", "bn.running_var"]
        other = self._params()
        other["a.w"].data[...] = 0
        other.load_state(state)
        assert np.array_equal(other["a.w"].data, ps["a.w"].data)

    def test_truncated(self, tmp_path):
        tc.save_checkpoint(tmp_path / "c.bin", self._params())
        blob = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(blob[:-3])
        with pytest.raises(CheckpointError):
            tc.read_checkpoint(tmp_path / "c.bin")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"hello world, not a checkpoint")
        with pytest.raises(CheckpointError):
            tc.read_checkpoint(tmp_path / "x.bin")
