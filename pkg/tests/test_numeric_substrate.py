import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarfuse import functional as F
from lidarfuse.autograd import CheckError, Tensor, concat, exp, log, upsample_nearest
from lidarfuse.gradcheck import check_gradients
from lidarfuse.nn import Adam
from lidarfuse.snapshot import load_checkpoint, read_snapshot, save_checkpoint, write_snapshot


def naive_conv2d(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_sum_kernel(self):
        out = F.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))))
        assert out.data.tolist() == [[[4.0]]]

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (1, 2)])
    def test_matches_naive_loops(self, rng, stride, pad):
        x = rng.standard_normal((2, 8, 8)) if stride == 1 else rng.standard_normal((2, 9, 9))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, pad), atol=1e-12)

    def test_inexact_extent_fails_in_checked_mode(self, rng):
        with pytest.raises(CheckError):
            F.conv2d(Tensor(rng.standard_normal((1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)

    def test_channel_mismatch(self, rng):
        with pytest.raises(CheckError):
            F.conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((1, 2, 3, 3))))

    def test_gradients(self, rng):
        for _ in range(5):
            x = Tensor(rng.standard_normal((2, 5, 5)))
            w = Tensor(rng.standard_normal((3, 2, 3, 3)))
            b = Tensor(rng.standard_normal(3))
            errs = check_gradients(lambda a, k, c: F.conv2d(a, k, c, stride=2, padding=1), [x, w, b])
            assert max(errs) < 1e-4


class TestActivations:
    def test_fixed_points(self):
        assert F.activation(Tensor(0.0), "sigmoid").item() == 0.5
        assert F.activation(Tensor(-3.2), "relu").item() == 0.0

    def test_sigmoid_symmetry(self, rng):
        x = rng.standard_normal(50) * 10
        s = F.sigmoid(Tensor(x)).data + F.sigmoid(Tensor(-x)).data
        np.testing.assert_allclose(s, 1.0, atol=1e-15)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            F.activation(Tensor(1.0), "gelu")

    @pytest.mark.parametrize("kind", ["sigmoid", "relu", "silu", "softplus", "tanh"])
    def test_gradients(self, rng, kind):
        for _ in range(5):
            x = rng.standard_normal(5)
            x[np.abs(x) < 1e-3] = 0.5  # keep away from the relu kink
            errs = check_gradients(lambda a: F.activation(a, kind), [Tensor(x)])
            assert errs[0] < 1e-4


class TestLayerNorm:
    def test_constant_input_gives_zero(self):
        out = F.layer_norm(Tensor(np.full((3, 4), 2.5)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_gamma_gives_beta(self, rng):
        b = rng.standard_normal(4)
        out = F.layer_norm(Tensor(rng.standard_normal((5, 4))), Tensor(np.zeros(4)), Tensor(b), 1e-5)
        np.testing.assert_array_equal(out.data, np.broadcast_to(b, (5, 4)))

    def test_direct_formula(self, rng):
        x = rng.standard_normal((6, 5)) * 3 + 1
        g, b = rng.standard_normal(5), rng.standard_normal(5)
        out = F.layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-5).data
        for r in range(6):
            m = sum(x[r]) / 5
            v = sum((xi - m) ** 2 for xi in x[r]) / 5
            ref = [(x[r, c] - m) / math.sqrt(v + 1e-5) * g[c] + b[c] for c in range(5)]
            np.testing.assert_allclose(out[r], ref, atol=1e-10)

    def test_channel_axis_zero(self, rng):
        x = rng.standard_normal((3, 4, 4))
        g, b = rng.standard_normal(3), rng.standard_normal(3)
        a = F.layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-5, axis=0).data
        ref = F.layer_norm(Tensor(x.transpose(1, 2, 0)), Tensor(g), Tensor(b), 1e-5).data.transpose(2, 0, 1)
        np.testing.assert_allclose(a, ref, atol=1e-14)

    def test_gradients(self, rng):
        for _ in range(5):
            ins = [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))]
            assert max(check_gradients(lambda x, g, b: F.layer_norm(x, g, b, 1e-5), ins)) < 1e-4


class TestFocalLoss:
    def test_near_perfect(self):
        t = np.array([0.0, 1.0, 1.0, 0.0])
        assert F.focal_loss(Tensor(t), t, 0.25, 2.0).item() < 1e-4

    def test_reduces_to_bce(self, rng):
        p = rng.uniform(0.01, 0.99, 20)
        t = (rng.uniform(size=20) > 0.5).astype(float)
        bce = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
        assert abs(F.focal_loss(Tensor(p), t, alpha=1.0, gamma=0.0).item() - bce) < 1e-10

    def test_scalar_oracle(self, rng):
        p = rng.uniform(0.001, 0.999, (4, 5))
        t = (rng.uniform(size=(4, 5)) > 0.5).astype(float)
        acc = 0.0
        for pi, ti in zip(p.ravel(), t.ravel()):
            pt = pi if ti == 1 else 1 - pi
            acc += -0.25 * (1 - pt) ** 2 * math.log(pt)
        assert abs(F.focal_loss(Tensor(p), t, 0.25, 2.0).item() - acc / 20) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(CheckError):
            F.focal_loss(Tensor(np.full(3, 0.5)), np.zeros(4))

    def test_gradients(self, rng):
        for gamma in (0.0, 2.0):
            for _ in range(5):
                p = Tensor(rng.uniform(0.05, 0.95, 5))
                t = (rng.uniform(size=5) > 0.5).astype(float)
                assert check_gradients(lambda a: F.focal_loss(a, t, 0.25, gamma), [p])[0] < 1e-4


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_quadratic(self, rng):
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        ((x * x).sum() / 2).backward()
        np.testing.assert_allclose(x.grad, x.data, atol=1e-15)

    def test_detached_fails(self):
        with pytest.raises(RuntimeError):
            Tensor(np.ones(3)).sum().backward()

    def test_intermediates_freed(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        y = x * 2.0
        loss = y.sum()
        loss.backward()
        assert y.node is None and loss.node is None and y.grad is None

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        assert x.grad.tolist() == [8.0]

    @pytest.mark.parametrize(
        "fn,shapes",
        [
            (lambda a, b: a + b, [(3, 4), (4,)]),
            (lambda a, b: a - b, [(3, 1), (3, 4)]),
            (lambda a, b: a * b, [(3, 4), (1, 4)]),
            (lambda a, b: a / (b * b + 1.0), [(5,), (5,)]),
            (lambda a, b: a @ b, [(3, 4), (4, 2)]),
            (lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 2)]),
            (lambda a: exp(a), [(5,)]),
            (lambda a: log(a * a + 1.0), [(5,)]),
            (lambda a: a.transpose(1, 0).reshape(-1), [(3, 4)]),
            (lambda a: a[np.array([0, 2, 2])], [(4, 3)]),
            (lambda a: a.mean(axis=1), [(3, 5)]),
            (lambda a: F.softmax(a, axis=0), [(4, 3)]),
            (lambda a: upsample_nearest(a, 2), [(2, 2, 3)]),
        ],
    )
    def test_primitive_gradients(self, rng, fn, shapes):
        for _ in range(5):
            ins = [Tensor(rng.standard_normal(s)) for s in shapes]
            assert max(check_gradients(fn, ins)) < 1e-4

    def test_segment_max_gradient(self, rng):
        ids = np.array([0, 0, 1, 2, 2, 2])
        for _ in range(5):
            v = Tensor(rng.standard_normal((6, 3)))
            assert check_gradients(lambda a: F.segment_max(a, ids, 4), [v])[0] < 1e-4

    def test_segment_max_values(self):
        v = np.array([[1.0, -2.0], [3.0, -5.0], [0.5, 0.5]])
        out = F.segment_max(Tensor(v), np.array([1, 1, 0]), 3).data
        np.testing.assert_array_equal(out, [[0.5, 0.5], [3.0, -2.0], [0.0, 0.0]])


def test_determinism(rng):
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))

    def run():
        a, k = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        out = F.sigmoid(F.conv2d(a, k, padding=1)).sum()
        out.backward()
        return out.data.tobytes(), a.grad.tobytes(), k.grad.tobytes()

    assert run() == run()


def test_checked_mode_rejects_nan():
    with pytest.raises(CheckError), np.errstate(invalid="ignore"):
        log(Tensor(np.array([-1.0])))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.integers(0, 2**31 - 1))
def test_snapshot_round_trip(shape, seed):
    arr = np.asarray(np.random.default_rng(seed).standard_normal(tuple(shape) or None))
    buf = io.BytesIO()
    write_snapshot(buf, arr)
    raw = buf.getvalue()
    assert int.from_bytes(raw[:4], "little") == len(shape)
    buf.seek(0)
    back = read_snapshot(buf)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.w": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)}
    save_checkpoint(tmp_path / "ck.bin", params)
    back = load_checkpoint(tmp_path / "ck.bin")
    assert set(back) == set(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    assert (tmp_path / "ck.bin.json").exists()


def test_adam_decreases_quadratic(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    opt = Adam([x], lr=0.1)
    first = None
    for _ in range(50):
        opt.zero_grad()
        loss = (x * x).sum()
        first = first if first is not None else loss.item()
        loss.backward()
        opt.step()
    assert (x * x).sum().item() < 0.1 * first
