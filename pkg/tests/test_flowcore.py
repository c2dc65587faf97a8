import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from warpc import flowcore as fc
from warpc import warpgen
from conftest import hflow, random_homography

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def flows(max_side=8):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda hw: arrays(np.float64, (hw[0], hw[1], 2), elements=finite))


# -- flow <-> mapping ---------------------------------------------------------

def test_zero_flow_maps_to_identity():
    M = np.asarray(fc.flow_to_mapping(np.zeros((4, 4, 2))))
    X, Y = fc.pixel_grid(4, 4)
    assert np.array_equal(M[..., 0], X) and np.array_equal(M[..., 1], Y)


def test_constant_flow_mapping_values():
    F = np.broadcast_to([2.0, -1.0], (3, 3, 2))
    M = np.asarray(fc.flow_to_mapping(F))
    assert tuple(M[0, 0]) == (2.0, -1.0)
    assert tuple(M[2, 2]) == (4.0, 1.0)


def test_homography_mapping_matches_projective_evaluation(rng):
    H = random_homography(rng, 0.2)
    M = np.asarray(fc.flow_to_mapping(hflow(H, 8, 8)))
    for y in range(8):
        for x in range(8):
            nx, ny = (2 * x + 1) / 8 - 1, (2 * y + 1) / 8 - 1
            q = H @ [nx, ny, 1.0]
            px = ((q[0] / q[2]) + 1) * 8 / 2 - 0.5
            py = ((q[1] / q[2]) + 1) * 8 / 2 - 0.5
            assert M[y, x, 0] == pytest.approx(px, abs=1e-9)
            assert M[y, x, 1] == pytest.approx(py, abs=1e-9)


def test_identity_mapping_gives_zero_flow():
    X, Y = fc.pixel_grid(5, 6)
    F = np.asarray(fc.mapping_to_flow(np.stack([X, Y], -1)))
    assert not F.any()


def test_constant_mapping_flow():
    F = np.asarray(fc.mapping_to_flow(np.full((3, 3, 2), 5.0)))
    X, Y = fc.pixel_grid(3, 3)
    assert np.array_equal(F[..., 0], 5.0 - X)
    assert np.array_equal(F[..., 1], 5.0 - Y)


@given(flows())
def test_flow_mapping_round_trip_is_exact(F):
    back = fc.mapping_to_flow(fc.flow_to_mapping(F))
    assert np.array_equal(np.asarray(back), F)


@given(flows())
def test_mapping_flow_round_trip_is_exact(M):
    back = fc.flow_to_mapping(fc.mapping_to_flow(M))
    assert np.array_equal(np.asarray(back), M)


def test_non_finite_flow_rejected():
    F = np.zeros((2, 2, 2))
    F[0, 0, 0] = np.nan
    with pytest.raises(fc.FieldError):
        fc.flow_to_mapping(F)


def test_flow_field_is_immutable():
    f = fc.FlowField(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        f.data[0, 0, 0] = 1.0


# -- warp ---------------------------------------------------------------------

def test_warp_zero_flow_is_identity(rng):
    T = rng.normal(size=(7, 5, 3))
    out, valid = fc.warp(T, np.zeros((7, 5, 2)))
    assert np.array_equal(out, T) and valid.all()


def test_warp_integer_shift_row():
    F = np.zeros((1, 4, 2))
    F[..., 0] = 1
    out, valid = fc.warp(np.array([[1.0, 2.0, 3.0, 4.0]]), F)
    assert out.tolist() == [[2.0, 3.0, 4.0, 0.0]]
    assert valid.tolist() == [[True, True, True, False]]


def test_warp_half_pixel_shift():
    F = np.zeros((1, 4, 2))
    F[..., 0] = 0.5
    out, _ = fc.warp(np.array([[0.0, 2.0, 4.0, 6.0]]), F)
    assert out.tolist() == [[1.0, 3.0, 5.0, 0.0]]


def test_warp_dimension_mismatch():
    with pytest.raises(fc.FieldError):
        fc.warp(np.zeros((3, 3)), np.zeros((3, 4, 2)))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_integer_flow_is_exact_gather(seed):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(6, 7, 2))
    F = rng.integers(-3, 4, size=(6, 7, 2)).astype(float)
    out, valid = fc.warp(T, F)
    X, Y = fc.pixel_grid(6, 7)
    for y in range(6):
        for x in range(7):
            sx, sy = int(x + F[y, x, 0]), int(y + F[y, x, 1])
            inside = 0 <= sx < 7 and 0 <= sy < 6
            assert valid[y, x] == inside
            if inside:
                assert np.array_equal(out[y, x], T[sy, sx])
            else:
                assert not out[y, x].any()


def _brute_bilinear(T, x, y):
    h, w = T.shape[:2]
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        return np.zeros(T.shape[2:]), False
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    v = ((1 - fx) * (1 - fy) * T[y0, x0] + fx * (1 - fy) * T[y0, x1]
         + (1 - fx) * fy * T[y1, x0] + fx * fy * T[y1, x1])
    return v, True


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_warp_matches_brute_force_bilinear(seed):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(5, 6, 2))
    F = rng.uniform(-2, 2, size=(5, 6, 2))
    out, valid = fc.warp(T, F)
    for y in range(5):
        for x in range(6):
            v, ok = _brute_bilinear(T, x + F[y, x, 0], y + F[y, x, 1])
            assert valid[y, x] == ok
            assert np.allclose(out[y, x], v, atol=1e-12)


def test_warp_accepts_single_channel(rng):
    T = rng.normal(size=(4, 4))
    out, _ = fc.warp(T, np.zeros((4, 4, 2)))
    assert out.shape == (4, 4)


# -- compose ------------------------------------------------------------------

def test_compose_right_identity(rng):
    F = rng.normal(size=(6, 6, 2))
    out, valid = fc.compose_flows(F, np.zeros((6, 6, 2)))
    assert np.array_equal(out[valid], F[valid])


def test_compose_left_identity(rng):
    F = rng.normal(size=(6, 6, 2))
    out, valid = fc.compose_flows(np.zeros((6, 6, 2)), F)
    assert np.array_equal(out, F) and valid.all()


def test_compose_homographies_matches_matrix_product(rng):
    for _ in range(5):
        H1, H2 = random_homography(rng), random_homography(rng)
        F13, valid = fc.compose_flows(hflow(H1), hflow(H2))
        oracle = hflow(H2 @ H1)
        interior = valid.copy()
        interior[:2] = interior[-2:] = False
        interior[:, :2] = interior[:, -2:] = False
        err = np.linalg.norm(F13 - oracle, axis=-1)[interior]
        assert err.mean() < 0.1


def test_composition_is_associative_within_tolerance(rng):
    Fa, Fb, Fc = (hflow(random_homography(rng, 0.06)) for _ in range(3))
    left, v1 = fc.compose_flows(fc.compose_flows(Fa, Fb)[0], Fc)
    bc, vbc = fc.compose_flows(Fb, Fc)
    right, v2 = fc.compose_flows(Fa, bc)
    m = v1 & v2
    assert np.linalg.norm(left - right, axis=-1)[m].mean() < 0.15


def test_validity_only_shrinks_along_a_chain(rng):
    F = hflow(random_homography(rng, 0.2))
    _, v1 = fc.compose_flows(F, F)
    G, _ = fc.compose_flows(F, F)
    _, v2 = fc.compose_flows(G, F)
    chain = v1 & v2
    assert chain.sum() <= v1.sum()


# -- crop / resize --------------------------------------------------------------

def test_central_crop_symmetric_margin():
    T = np.arange(36.0).reshape(6, 6)
    assert np.array_equal(fc.central_crop(T, 4), T[1:5, 1:5])


def test_central_crop_odd_margin_drops_bottom_right():
    T = np.arange(25.0).reshape(5, 5)
    assert np.array_equal(fc.central_crop(T, 4), T[0:4, 0:4])


def test_central_crop_too_large():
    with pytest.raises(fc.FieldError):
        fc.central_crop(np.zeros((4, 4)), 5)


def test_crop_of_raster_equals_window_evaluation(rng):
    H = random_homography(rng, 0.3)
    params = warpgen.HomographyParams(H)
    full = warpgen.rasterize(params, 75, 75)
    crop = fc.central_crop(full, 52)
    top, left = fc.crop_offset(75, 75, 52)
    direct = warpgen.rasterize(params, 52, 52, offset=(top, left), frame=(75, 75))
    assert np.allclose(crop, direct, atol=1e-12)


def test_resize_constant_flow_scales_components():
    F = np.broadcast_to([10.0, 20.0], (100, 100, 2))
    out = fc.resize_flow(F, 50, 50)
    assert np.allclose(out[..., 0], 5.0) and np.allclose(out[..., 1], 10.0)


def test_resize_identity_size_is_exact(rng):
    F = rng.normal(size=(9, 7, 2))
    assert np.array_equal(fc.resize_flow(F, 9, 7), F)


def test_resize_homography_matches_direct_raster(rng):
    H = random_homography(rng, 0.1)
    half = fc.resize_flow(hflow(H, 128, 128), 64, 64)
    assert np.linalg.norm(half - hflow(H, 64, 64), axis=-1).mean() < 0.2


def test_resize_rejects_non_positive():
    with pytest.raises(fc.FieldError):
        fc.resize_flow(np.zeros((4, 4, 2)), 0, 4)
