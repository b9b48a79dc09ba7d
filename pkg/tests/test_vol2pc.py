import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atmrn import _kernels
from atmrn.tensor import Tensor, precision
from atmrn.vol2pc import map_pyramid, trilinear_sample

from conftest import gradcheck


def index_coords(points, dims):
    """Normalised [-1, 1] points -> continuous voxel-index coordinates."""
    return (np.asarray(points) + 1.0) * (np.asarray(dims) - 1) / 2.0


def test_constant_map(rng):
    f = np.full((3, 5, 6, 7), 2.5)
    out = trilinear_sample(Tensor(f), Tensor(rng.uniform(-1.5, 1.5, (50, 3))))
    assert out.shape == (50, 3) and np.allclose(out.data, 2.5)


def test_voxel_centre_returns_voxel_value(rng):
    dims = (4, 5, 6)
    f = rng.standard_normal((2,) + dims)
    ijk = np.array([[0, 0, 0], [3, 4, 5], [1, 2, 3], [2, 0, 5]])
    pts = 2.0 * ijk / (np.array(dims) - 1) - 1.0
    with precision(np.float64):
        out = trilinear_sample(Tensor(f), Tensor(pts)).data
    assert np.allclose(out, f[:, ijk[:, 0], ijk[:, 1], ijk[:, 2]].T, atol=1e-12)


def test_linear_ramp_centre_is_mid_value():
    ramp = np.broadcast_to(np.linspace(3.0, 11.0, 8), (8, 8, 8))[None]
    with precision(np.float64):
        out = trilinear_sample(Tensor(ramp), Tensor(np.zeros((1, 3)))).data
    assert out[0, 0] == pytest.approx(7.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(2, 2, 2), (3, 4, 5), (6, 3, 2)]))
def test_exact_for_trilinear_polynomials(seed, dims):
    r = np.random.default_rng(seed)
    coef = r.standard_normal(8)
    z, y, x = np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij")

    def poly(z, y, x):
        terms = [np.ones_like(z), z, y, x, z * y, z * x, y * x, z * y * x]
        return sum(c * t for c, t in zip(coef, terms))

    pts = r.uniform(-1, 1, (40, 3))
    u = index_coords(pts, dims)
    with precision(np.float64):
        out = trilinear_sample(Tensor(poly(z, y, x)[None]), Tensor(pts)).data[:, 0]
    assert np.allclose(out, poly(u[:, 0], u[:, 1], u[:, 2]), atol=1e-10)


def test_clamping_equals_nearest_border_value(rng):
    f = rng.standard_normal((3, 4, 5, 6))
    pts = rng.uniform(-3, 3, (60, 3))
    with precision(np.float64):
        outside = trilinear_sample(Tensor(f), Tensor(pts)).data
        border = trilinear_sample(Tensor(f), Tensor(np.clip(pts, -1, 1))).data
    assert np.array_equal(outside, border)


def test_clamped_points_get_zero_gradient(rng):
    f = rng.standard_normal((2, 4, 4, 4))
    with precision(np.float64):
        p = Tensor(np.array([[1.5, 0.1, 0.2], [0.1, -2.0, 0.3]]), requires_grad=True)
        trilinear_sample(Tensor(f), p).sum().backward()
    assert p.grad[0, 0] == 0.0 and p.grad[1, 1] == 0.0
    assert np.all(p.grad[0, 1:] != 0.0)


def test_gradients_match_finite_differences(rng):
    # smooth feature so the finite-difference oracle is well conditioned
    z, y, x = np.meshgrid(*[np.linspace(-1, 1, n) for n in (5, 6, 7)], indexing="ij")
    f = np.stack([np.sin(2 * x + y) * np.cos(z), x * y + z ** 2])
    pts = rng.uniform(-0.9, 0.9, (12, 3))
    gradcheck(lambda f, p: trilinear_sample(f, p), [f, pts], rtol=1e-3)


def test_size_one_axis_is_constant():
    f = np.arange(6.0).reshape(1, 1, 2, 3)
    with precision(np.float64):
        a = trilinear_sample(Tensor(f), Tensor(np.array([[-1.0, 1.0, 1.0], [0.7, 1.0, 1.0]]))).data
    assert np.array_equal(a[:, 0], [5.0, 5.0])


def test_backends_agree(rng):
    fm = rng.standard_normal((64, 5))
    lin = rng.integers(0, 64, (30, 8))
    w = rng.random((30, 8))
    dw = rng.standard_normal((30, 8, 3))
    g = rng.standard_normal((30, 5))
    assert np.allclose(_kernels.trilinear_gather_numpy(fm, lin, w), _kernels.trilinear_gather_numba(fm, lin, w))
    for a, b in zip(_kernels.trilinear_grads_numpy(fm, lin, w, dw, g),
                    _kernels.trilinear_grads_numba(fm, lin, w, dw, g)):
        assert np.allclose(a, b)


def _constant_pyramid(widths, consts):
    sizes = [16, 8, 4, 2, 1][:len(widths)]
    return [Tensor(np.full((1, c, s, s, s), k)) for c, s, k in zip(widths, sizes, consts)]


def test_pyramid_of_constants():
    widths, consts = [2, 3, 1, 4], [1.0, 2.0, 3.0, 4.0]
    pts = np.random.default_rng(0).uniform(-1, 1, (7, 3))
    out = map_pyramid(_constant_pyramid(widths, consts), Tensor(pts)).data
    row = np.repeat(consts, widths)
    assert out.shape == (7, sum(widths)) and np.allclose(out, row)


def test_pyramid_permutation_equivariant(rng):
    maps = [Tensor(rng.standard_normal((1, c, s, s, s))) for c, s in ((2, 8), (3, 4), (2, 2))]
    pts = rng.uniform(-1.2, 1.2, (20, 3))
    perm = rng.permutation(20)
    a = map_pyramid(maps, Tensor(pts)).data
    b = map_pyramid(maps, Tensor(pts[perm])).data
    assert np.array_equal(a[perm], b)
