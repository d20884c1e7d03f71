import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lunar_restore.errors import ValidationError
from lunar_restore.unet import (
    UNetConfig,
    check_params,
    count_params,
    forward,
    forward_trace,
    init_params,
    loss_and_grads,
    param_shapes,
)
from lunar_restore.unet import ops


# naive loop references, deliberately written without any vectorisation

def naive_conv(x, w, b):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    y = np.zeros((n, cout, h, wd))
    for a in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    y[a, o, i, j] = np.sum(xp[a, :, i : i + k, j : j + k] * w[o]) + b[o]
    return y


def naive_pool(x):
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    y[a, ch, i, j] = x[a, ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    return y


def naive_upconv(x, w, b):
    n, cin, h, wd = x.shape
    cout = w.shape[1]
    y = np.zeros((n, cout, 2 * h, 2 * wd))
    for a in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    y[a, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2] += x[a, ci, i, j] * w[ci]
    return y + b[None, :, None, None]


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


class TestOps:
    @pytest.mark.parametrize("k", [1, 3])
    def test_conv_matches_loops(self, rng, k):
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        y, _ = ops.conv2d_forward(x, w, b)
        np.testing.assert_allclose(y, naive_conv(x, w, b), atol=1e-6)

    def test_conv_backward(self, rng):
        x = rng.normal(size=(2, 2, 4, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        r = rng.normal(size=(2, 3, 4, 5))
        y, cache = ops.conv2d_forward(x, w, b)
        dx, dw, db = ops.conv2d_backward(r, cache, w)

        def f():
            return float(np.sum(naive_conv(x, w, b) * r))

        np.testing.assert_allclose(dx, numeric_grad(f, x), atol=1e-6)
        np.testing.assert_allclose(dw, numeric_grad(f, w), atol=1e-6)
        np.testing.assert_allclose(db, numeric_grad(f, b), atol=1e-6)

    def test_pool_matches_loops(self, rng):
        x = rng.normal(size=(2, 3, 6, 4))
        y, _ = ops.maxpool2_forward(x)
        np.testing.assert_array_equal(y, naive_pool(x))

    def test_pool_routes_to_first_max(self):
        x = np.array([[[[1.0, 1.0], [1.0, 0.0]]]])
        y, cache = ops.maxpool2_forward(x)
        dx = ops.maxpool2_backward(np.ones_like(y), cache)
        np.testing.assert_array_equal(dx, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_pool_backward(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        r = rng.normal(size=(1, 2, 2, 2))
        y, cache = ops.maxpool2_forward(x)
        dx = ops.maxpool2_backward(r, cache)
        np.testing.assert_allclose(dx, numeric_grad(lambda: float(np.sum(naive_pool(x) * r)), x), atol=1e-6)

    def test_upconv_matches_loops(self, rng):
        x = rng.normal(size=(2, 3, 3, 4))
        w = rng.normal(size=(3, 2, 2, 2))
        b = rng.normal(size=2)
        y, _ = ops.upconv2_forward(x, w, b)
        np.testing.assert_allclose(y, naive_upconv(x, w, b), atol=1e-6)

    def test_upconv_backward(self, rng):
        x = rng.normal(size=(1, 2, 2, 3))
        w = rng.normal(size=(2, 3, 2, 2))
        b = rng.normal(size=3)
        r = rng.normal(size=(1, 3, 4, 6))
        _, cache = ops.upconv2_forward(x, w, b)
        dx, dw, db = ops.upconv2_backward(r, cache, w)

        def f():
            return float(np.sum(naive_upconv(x, w, b) * r))

        np.testing.assert_allclose(dx, numeric_grad(f, x), atol=1e-6)
        np.testing.assert_allclose(dw, numeric_grad(f, w), atol=1e-6)
        np.testing.assert_allclose(db, numeric_grad(f, b), atol=1e-6)

    def test_sigmoid_stable(self):
        z = np.array([-1000.0, -1.0, 0.0, 1.0, 1000.0])
        with np.errstate(over="raise"):
            s = ops.sigmoid(z)
        np.testing.assert_allclose(s, [0.0, 1 / (1 + np.e), 0.5, 1 / (1 + np.exp(-1)), 1.0])

    def test_relu(self):
        y = ops.relu_forward(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y, [0, 0, 2])
        np.testing.assert_array_equal(ops.relu_backward(np.ones(3), y), [0, 0, 1])


def enumerate_params(depth, base):
    # independent tally: walk the architecture level by level
    total, cin = 0, 1
    for i in range(depth):
        c = base * 2**i
        total += (cin * 9 + 1) * c + (c * 9 + 1) * c
        cin = c
    c = base * 2**depth
    total += (cin * 9 + 1) * c + (c * 9 + 1) * c
    for i in reversed(range(depth)):
        cu, c = base * 2 ** (i + 1), base * 2**i
        total += (cu * 4 + 1) * c + (2 * c * 9 + 1) * c + (c * 9 + 1) * c
    return total + base + 1


class TestArchitecture:
    def test_depth1_base2_count(self):
        cfg = UNetConfig(depth=1, base_channels=2)
        assert count_params(cfg) == 431
        assert len(param_shapes(cfg)) == 16
        assert sum(int(np.prod(a.shape)) for a in init_params(cfg).values()) == 431

    @pytest.mark.parametrize("depth,base", [(1, 2), (2, 8), (3, 4), (4, 16)])
    def test_count_matches_enumeration(self, depth, base):
        assert count_params(UNetConfig(depth=depth, base_channels=base)) == enumerate_params(depth, base)

    def test_names(self):
        names = list(param_shapes(UNetConfig(depth=1, base_channels=2)))
        assert names[:4] == ["enc0.conv1.w", "enc0.conv1.b", "enc0.conv2.w", "enc0.conv2.b"]
        assert "dec0.up.w" in names and names[-2:] == ["head.w", "head.b"]

    def test_trace_depth2(self):
        cfg = UNetConfig(depth=2, base_channels=8)
        tr = forward_trace(init_params(cfg), cfg, np.zeros((3, 1, 64, 64)))
        assert tr["skips"] == [(3, 8, 64, 64), (3, 16, 32, 32)]
        assert tr["bottleneck"] == (3, 32, 16, 16)
        assert tr["concat"] == {1: (3, 32, 32, 32), 0: (3, 16, 64, 64)}
        assert tr["output"] == (3, 1, 64, 64)

    def test_init_bounds(self):
        cfg = UNetConfig(depth=2, base_channels=4)
        p = init_params(cfg, seed=3)
        assert np.abs(p["enc0.conv1.w"]).max() <= np.sqrt(6 / 9)
        assert np.abs(p["dec1.up.w"]).max() <= np.sqrt(6 / 16)
        assert not p["head.b"].any()

    def test_init_deterministic(self):
        cfg = UNetConfig()
        a, b = init_params(cfg, 5), init_params(cfg, 5)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_check_params(self):
        cfg = UNetConfig(depth=1, base_channels=2)
        p = init_params(cfg)
        p["head.w"] = np.zeros((1, 3, 1, 1))
        with pytest.raises(ValidationError):
            check_params(p, cfg)

    def test_indivisible_input(self):
        cfg = UNetConfig(depth=2)
        with pytest.raises(ValidationError, match="divisible"):
            forward(init_params(cfg), cfg, np.zeros((1, 1, 30, 32)))

    def test_bad_config(self):
        with pytest.raises(ValidationError):
            UNetConfig(depth=0)


class TestForwardLoss:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000), st.floats(-50, 50))
    def test_output_in_unit_interval(self, seed, scale):
        cfg = UNetConfig(depth=1, base_channels=2)
        x = np.random.default_rng(seed).normal(size=(2, 1, 8, 8)) * scale
        y = forward(init_params(cfg, seed), cfg, x)
        assert y.shape == x.shape and np.all((y >= 0) & (y <= 1))

    def test_loss_zero_on_own_output(self, rng):
        cfg = UNetConfig(depth=2, base_channels=4)
        p = init_params(cfg, 1)
        x = rng.random((2, 1, 16, 16))
        loss, grads = loss_and_grads(p, cfg, x, forward(p, cfg, x))
        assert loss == 0.0
        assert all(not g.any() for g in grads.values())

    def test_loss_permutation_invariant(self, rng):
        cfg = UNetConfig(depth=1, base_channels=4)
        p = init_params(cfg, 2)
        x, t = rng.random((4, 1, 8, 8)), rng.random((4, 1, 8, 8))
        perm = [2, 0, 3, 1]
        l1, g1 = loss_and_grads(p, cfg, x, t)
        l2, g2 = loss_and_grads(p, cfg, x[perm], t[perm])
        assert l1 == pytest.approx(l2, rel=1e-12)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-14)

    def test_masked_loss(self, rng):
        cfg = UNetConfig(depth=1, base_channels=2)
        p = init_params(cfg, 0)
        x, t = rng.random((1, 1, 8, 8)), rng.random((1, 1, 8, 8))
        m = np.zeros_like(x, dtype=bool)
        m[..., 3] = True
        loss, _ = loss_and_grads(p, cfg, x, t, m)
        out = forward(p, cfg, x)
        assert loss == pytest.approx(np.mean((out[m] - t[m]) ** 2), rel=1e-12)

    def test_float32(self, rng):
        cfg = UNetConfig(depth=1, base_channels=2)
        p = init_params(cfg, 0, dtype=np.float32)
        assert forward(p, cfg, rng.random((1, 1, 8, 8))).dtype == np.float32

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_fine_step(self, seed):
        # h=1e-6 keeps perturbations well clear of ReLU/pool kinks for these draws
        cfg = UNetConfig(depth=1, base_channels=2)
        rng = np.random.default_rng(100 + seed)
        p = init_params(cfg, seed)
        for k in p:
            if k.endswith(".b"):
                p[k] = rng.normal(0, 0.1, p[k].shape)
        x, t = rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8))
        _, grads = loss_and_grads(p, cfg, x, t)
        for name in ("enc0.conv1.w", "bottleneck.conv2.b", "dec0.up.w", "head.w"):
            num = numeric_grad(lambda: loss_and_grads(p, cfg, x, t)[0], p[name])
            np.testing.assert_allclose(grads[name], num, rtol=1e-5, atol=1e-9)
