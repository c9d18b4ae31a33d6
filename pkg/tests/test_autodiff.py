"""Finite-difference checks for every differentiable op in the engine."""

import numpy as np
import pytest

from carpet_studio import autodiff as ad


def central_diff(f, x0, idx, h=1e-6):
    xp = x0.copy()
    xp[idx] += h
    xm = x0.copy()
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def check_grad(build, x0, n_coords=8, rtol=1e-5, seed=0):
    """Compare analytic gradients against central differences at random coords."""
    x = ad.Tensor(x0.copy(), requires_grad=True)
    build(x).backward()
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(x0.size, size=min(n_coords, x0.size), replace=False)
    for fi in flat_idx:
        idx = np.unravel_index(fi, x0.shape)
        num = central_diff(lambda arr: float(build(ad.Tensor(arr)).data), x0, idx)
        ana = x.grad[idx]
        assert num == pytest.approx(ana, rel=rtol, abs=1e-6), f"coord {idx}"


@pytest.fixture()
def x3d(rng):
    return rng.standard_normal((6, 7, 4))


class TestElementwise:
    def test_add_mul_pow(self, x3d):
        check_grad(lambda x: ((x * 2.0 + 1.5) ** 3.0).sum(), x3d)

    def test_broadcast_add(self, rng, x3d):
        bias = rng.standard_normal((1, 1, 4))
        check_grad(lambda x: ((x + ad.Tensor(bias)) ** 2.0).sum(), x3d)

    def test_relu(self, x3d):
        check_grad(lambda x: (ad.relu(x) * 3.0).sum(), x3d)

    def test_sigmoid(self, x3d):
        check_grad(lambda x: (ad.sigmoid(x) ** 2.0).sum(), x3d)

    def test_clip01_inside_range(self, rng):
        x0 = rng.uniform(0.05, 0.95, (5, 5, 3))
        check_grad(lambda x: (ad.clip01(x) ** 2.0).sum(), x0)

    def test_division(self, rng):
        x0 = rng.uniform(0.5, 2.0, (4, 4))
        check_grad(lambda x: (x / (x + 1.0)).sum(), x0)

    def test_sqrt_chain(self, rng):
        x0 = rng.uniform(0.2, 2.0, (10,))
        check_grad(lambda x: ad.sqrt((x * x).sum() + 1.0) * 2.0, x0)


class TestShapes:
    def test_reshape_transpose(self, x3d):
        check_grad(lambda x: ((x.reshape(42, 4).T @ ad.Tensor(np.ones((42, 2)))) ** 2.0).sum(), x3d)

    def test_getitem(self, x3d):
        check_grad(lambda x: (x[1:4, 2] ** 2.0).sum(), x3d)

    def test_stack(self, x3d):
        check_grad(lambda x: (ad.stack([x[0], x[2] * 2.0]) ** 2.0).sum(), x3d)

    def test_matmul_both_sides(self, rng):
        a0 = rng.standard_normal((5, 6))
        b = ad.Tensor(rng.standard_normal((6, 3)))
        check_grad(lambda x: ((x @ b) ** 2.0).sum(), a0)

    def test_mean_axis(self, x3d):
        check_grad(lambda x: (x.mean(axis=(0, 1)) ** 2.0).sum(), x3d)


class TestSpatial:
    @pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
    def test_conv2d_input_grad(self, rng, stride, pad):
        x0 = rng.standard_normal((8, 9, 3))
        w = ad.Tensor(rng.standard_normal((3, 3, 3, 5)) * 0.4)
        b = ad.Tensor(rng.standard_normal(5) * 0.1)
        check_grad(lambda x: (ad.conv2d(x, w, b, stride=stride, pad=pad) ** 2.0).sum(), x0)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d_weight_grad(self, rng, stride):
        x = ad.Tensor(rng.standard_normal((8, 8, 3)))
        w0 = rng.standard_normal((3, 3, 3, 4)) * 0.4

        def build(w):
            return (ad.conv2d(x, w, None, stride=stride, pad=1) ** 2.0).sum()

        check_grad(build, w0)

    def test_conv2d_bias_grad(self, rng):
        x = ad.Tensor(rng.standard_normal((6, 6, 2)))
        w = ad.Tensor(rng.standard_normal((3, 3, 2, 3)) * 0.3)
        check_grad(lambda b: (ad.conv2d(x, w, b) ** 2.0).sum(), rng.standard_normal(3))

    def test_avg_pool(self, rng):
        check_grad(lambda x: (ad.avg_pool2d(x, 2) ** 2.0).sum(), rng.standard_normal((7, 9, 3)))

    def test_upsample_nearest(self, rng):
        check_grad(lambda x: (ad.upsample_nearest(x, 2) ** 2.0).sum(),
                   rng.standard_normal((4, 5, 3)))

    def test_resize_bilinear(self, rng):
        check_grad(lambda x: (ad.resize_bilinear(x, 5, 9) ** 2.0).sum(),
                   rng.standard_normal((7, 6, 3)))

    def test_grid_sample(self, rng):
        ys = rng.uniform(0, 6, (4, 4))
        xs = rng.uniform(0, 5, (4, 4))
        check_grad(lambda x: (ad.grid_sample_bilinear(x, ys, xs) ** 2.0).sum(),
                   rng.standard_normal((7, 6, 3)))


class TestGraphMechanics:
    def test_reused_node_accumulates(self, rng):
        x0 = rng.standard_normal((5,))
        check_grad(lambda x: (x * x).sum() + (x * 3.0).sum(), x0)

    def test_backward_is_idempotent_per_graph(self, rng):
        x = ad.Tensor(rng.standard_normal((4,)), requires_grad=True)
        y = (x ** 2.0).sum()
        y.backward()
        g1 = x.grad.copy()
        x.zero_grad()
        y2 = (x ** 2.0).sum()
        y2.backward()
        assert np.allclose(g1, x.grad)

    def test_conv_forward_matches_im2col(self, rng):
        # the shift-and-gemm path must agree with the definitional im2col path
        x = rng.standard_normal((9, 8, 4))
        w = rng.standard_normal((3, 3, 4, 6))
        b = rng.standard_normal(6)
        fast = ad.conv_forward(x, w, b, stride=2, pad=1)
        col, ho, wo = ad._im2col(x, 3, 2, 1)
        ref = (col @ w.reshape(-1, 6) + b).reshape(ho, wo, 6)
        assert np.allclose(fast, ref, atol=1e-12)

    def test_dtype_followed(self):
        x = ad.Tensor(np.ones((4, 4, 3), dtype=np.float32), requires_grad=True)
        w = ad.Tensor(np.ones((3, 3, 3, 2), dtype=np.float32))
        y = ad.conv2d(x, w)
        assert y.dtype == np.float32
        y.sum().backward()
        assert x.grad.dtype == np.float32
