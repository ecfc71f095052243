import itertools

import numpy as np
import pytest

from sovnet.gconv import (GroupFilter, GroupKindMismatch, LiftingFilter, block_parameter_count,
                          check_symmetric, downsample, group_correlate, init_residual, lift_correlate,
                          residual_block, same, subgroup_pool)
from sovnet.groups import GroupElement, GroupGrid, compose, left_translate, stabilizer
from sovnet.tensor import ShapeMismatch, Tensor

KINDS = ["p4", "p4m"]


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def act(arr, g, planar=False):
    n = arr.shape[-1]
    return left_translate(arr, g, GroupGrid(g.kind, n, n), planar=planar)


def interior(n, radius):
    m = np.zeros((n, n), dtype=bool)
    m[radius:n - radius, radius:n - radius] = True
    return m


# -- lifting ----------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_lift_identity_filter(kind):
    img = rnd(1, 6, 6)
    out = lift_correlate(Tensor(img), LiftingFilter(Tensor(np.ones((1, 1, 1, 1)))), GroupGrid(kind, 6, 6)).data
    for s in range(out.shape[1]):
        assert np.array_equal(out[0, s], img[0])


@pytest.mark.parametrize("kind", KINDS)
def test_lift_delta_image_gives_transformed_flipped_filter(kind):
    n, k = 7, 3
    img = np.zeros((1, n, n))
    img[0, 3, 3] = 1.0
    w = rnd(1, 1, k, k, seed=1)
    out = lift_correlate(Tensor(img), LiftingFilter(Tensor(w)), GroupGrid(kind, n, n)).data
    for g in stabilizer(kind):
        # direct summation: out(p) = sum_q img(q) psi(g^-1 (q - p)), only q = centre contributes
        want = np.zeros((n, n))
        for py, px in itertools.product(range(n), range(n)):
            d = np.array([3 - py, 3 - px]) * 2
            src = g.linear.T @ d
            a, b = (src[0] + k - 1) // 2, (src[1] + k - 1) // 2
            if 0 <= a < k and 0 <= b < k:
                want[py, px] = w[0, 0, a, b]
        assert np.allclose(out[0, g.slot], want, atol=1e-15)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_lift_equivariance(kind, dtype, tol):
    n = 9
    img = rnd(2, n, n).astype(dtype)
    filt = LiftingFilter(Tensor(rnd(3, 2, 3, 3, seed=2).astype(dtype)))
    grid = GroupGrid(kind, n, n)
    base = lift_correlate(Tensor(img), filt, grid).data
    for g in stabilizer(kind):
        got = lift_correlate(Tensor(act(img, g, planar=True)), filt, grid).data
        assert np.abs(got - act(base, g)).max() <= tol
    mask = interior(n, 2)
    for t in [(1, 0), (0, -1), (1, 1)]:
        g = GroupElement(kind, 0, 0, t)
        got = lift_correlate(Tensor(act(img, g, planar=True)), filt, grid).data
        assert (np.abs(got - act(base, g)) * mask).max() <= tol


def test_lift_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        lift_correlate(Tensor(rnd(3, 5, 5)), LiftingFilter(Tensor(rnd(1, 2, 3, 3))), GroupGrid("p4", 5, 5))


# -- group correlation ------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_group_correlate_all_ones(kind):
    S = 4 if kind == "p4" else 8
    c, n = 3, 6
    field = np.ones((c, S, n, n))
    w = np.zeros((1, c, S, 3, 3))
    w[:, :, :, 1, 1] = 1.0  # centre tap on every group plane
    out = group_correlate(Tensor(field), GroupFilter(Tensor(w)), GroupGrid(kind, n, n)).data
    assert np.allclose(out, c * S)


def test_group_correlate_zero_field():
    out = group_correlate(Tensor(np.zeros((2, 4, 5, 5))), GroupFilter(Tensor(rnd(3, 2, 4, 3, 3))),
                          GroupGrid("p4", 5, 5)).data
    assert not out.any()


@pytest.mark.parametrize("kind", KINDS)
def test_one_hot_plane_permutes_slots(kind):
    S = 4 if kind == "p4" else 8
    els = stabilizer(kind)
    field = rnd(1, S, 5, 5)
    for r in range(S):
        w = np.zeros((1, 1, S, 1, 1))
        w[0, 0, r] = 1.0
        out = group_correlate(Tensor(field), GroupFilter(Tensor(w)), GroupGrid(kind, 5, 5)).data
        # out(s) = f(s ∘ r)
        for s in range(S):
            assert np.array_equal(out[0, s], field[0, compose(els[s], els[r]).slot])


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_group_correlate_equivariance(kind, dtype, tol):
    S = 4 if kind == "p4" else 8
    n = 8
    field = rnd(2, 3, S, n, n).astype(dtype)
    filt = GroupFilter(Tensor(rnd(2, 3, S, 3, 3, seed=3).astype(dtype)))
    grid = GroupGrid(kind, n, n)
    base = group_correlate(Tensor(field), filt, grid).data
    scale = np.abs(base).max()  # float32 rounding grows with the number of summed taps
    for g in stabilizer(kind):
        got = group_correlate(Tensor(act(field, g)), filt, grid).data
        assert np.abs(got - act(base, g)).max() <= tol * scale
    mask = interior(n, 2)
    for t in [(2, 0), (-1, 1)]:
        g = GroupElement(kind, 0, 0, t)
        got = group_correlate(Tensor(act(field, g)), filt, grid).data
        assert (np.abs(got - act(base, g)) * mask).max() <= tol * scale


@pytest.mark.parametrize("n", [7, 8])
def test_strided_group_correlation_is_equivariant(n):
    geom = downsample(n)
    assert check_symmetric(geom, n)
    field = rnd(1, 2, 4, n, n)
    filt = GroupFilter(Tensor(rnd(2, 2, 4, geom.k, geom.k, seed=5)))
    grid = GroupGrid("p4", n, n)
    base = group_correlate(Tensor(field), filt, grid, stride=2, padding=geom.padding).data
    for g in stabilizer("p4"):
        got = group_correlate(Tensor(act(field, g)), filt, grid, stride=2, padding=geom.padding).data
        assert np.abs(got - act(base, g)).max() <= 1e-12


def test_asymmetric_downsampling_is_detected():
    from sovnet.gconv import Geometry

    assert not check_symmetric(Geometry(3, 2, 1), 8)
    assert check_symmetric(Geometry(2, 2, 0), 8)
    assert check_symmetric(Geometry(3, 2, 1), 15)


def test_linearity():
    grid = GroupGrid("p4m", 6, 6)
    f, h = rnd(2, 8, 6, 6, seed=1), rnd(2, 8, 6, 6, seed=2)
    filt = GroupFilter(Tensor(rnd(3, 2, 8, 3, 3, seed=3)))
    lhs = group_correlate(Tensor(1.5 * f - 0.25 * h), filt, grid).data
    rhs = 1.5 * group_correlate(Tensor(f), filt, grid).data - 0.25 * group_correlate(Tensor(h), filt, grid).data
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_group_kind_mismatch():
    with pytest.raises(GroupKindMismatch):
        group_correlate(Tensor(rnd(1, 4, 5, 5)), GroupFilter(Tensor(rnd(1, 1, 4, 3, 3))), GroupGrid("p4m", 5, 5))


# -- pooling -------------------------------------------------------------------------

def test_subgroup_pool_examples():
    plane = rnd(1, 5, 5)
    assert np.array_equal(subgroup_pool(Tensor(np.repeat(plane[:, None], 4, axis=1))).data, plane)
    f = np.zeros((1, 4, 1, 1))
    f[0, :, 0, 0] = [1, 2, 3, 4]
    assert subgroup_pool(Tensor(f)).data[0, 0, 0] == 4


@pytest.mark.parametrize("kind", KINDS)
def test_subgroup_pool_rotates_spatially(kind):
    S = 4 if kind == "p4" else 8
    f = rnd(2, S, 6, 6)
    pooled = subgroup_pool(Tensor(f)).data
    for g in stabilizer(kind):
        assert np.array_equal(subgroup_pool(Tensor(act(f, g))).data, act(pooled, g, planar=True))


# -- residual block -------------------------------------------------------------------

def test_residual_zero_weights_is_identity():
    rng = np.random.default_rng(0)
    p = init_residual(rng, 1, 3, 3, 4)
    p.gc1.data[:] = 0
    p.gc2.data[:] = 0
    f = rnd(3, 4, 5, 5)
    assert p.proj is None
    assert np.array_equal(residual_block(Tensor(f), p, GroupGrid("p4", 5, 5)).data, f)


@pytest.mark.parametrize("kind", KINDS)
def test_residual_equivariance_and_shape(kind):
    S = 4 if kind == "p4" else 8
    rng = np.random.default_rng(1)
    p = init_residual(rng, 1, 2, 3, S)
    assert p.proj is not None and p.proj.shape[-1] == 1
    f = rnd(2, 2, S, 7, 7)
    grid = GroupGrid(kind, 7, 7)
    base = residual_block(Tensor(f), p, grid).data
    assert base.shape == (2, 3, S, 7, 7)
    for g in stabilizer(kind):
        assert np.abs(residual_block(Tensor(act(f, g)), p, grid).data - act(base, g)).max() <= 1e-12


def test_block_parameter_count_matches_tensors():
    rng = np.random.default_rng(0)
    for c_in, c_out, stride, n in [(4, 4, 1, 9), (2, 4, 1, 9), (4, 4, 2, 9), (4, 4, 2, 8)]:
        p = init_residual(rng, 1, c_in, c_out, 4, stride, n)
        k1 = p.gc1.shape[-1]
        assert p.parameter_count() == block_parameter_count(c_in, c_out, 4, k1, 3, stride)


def test_same_requires_odd_kernel():
    with pytest.raises(ValueError):
        same(2)
