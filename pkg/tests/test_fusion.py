import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boxseg.attention import gaussian_attention
from boxseg.core import ActivationMap, ActivationStack, BBox, ClassId, ImageDims, ShapeError
from boxseg.fusion import (
    FusedBoxActivation,
    assemble_stack,
    box_has_activation,
    fuse_box,
    generate_pseudo_label,
)

from oracles import pseudo_label_bruteforce

E, S = ClassId.ECHINUS, ClassId.SCALLOP
DIMS = ImageDims(12, 12)
BOX = BBox(2, 3, 5, 4, E)


def cam(values, cls=E):
    return ActivationMap(DIMS, cls, np.asarray(values, dtype=float))


def test_box_has_activation():
    assert not box_has_activation(cam(np.zeros(DIMS.shape)), BOX, 0.3)
    v = np.zeros(DIMS.shape)
    v[4, 3] = 0.3
    assert box_has_activation(cam(v), BOX, 0.3)
    assert not box_has_activation(cam(np.full(DIMS.shape, 0.29)), BOX, 0.3)
    outside = np.zeros(DIMS.shape)
    outside[0, 0] = 1.0
    assert not box_has_activation(cam(outside), BOX, 0.3)


def _gauss_in_box():
    g = gaussian_attention(BOX, DIMS)
    return g, np.where(BOX.region_mask(DIMS), g.values, 0.0)


def test_fuse_branch_not_predicted():
    g, expected = _gauss_in_box()
    f = fuse_box(BOX, E, {S}, cam(np.ones(DIMS.shape)), g, 0.3)
    assert f.branch == 1
    np.testing.assert_array_equal(f.values.values, expected)


def test_fuse_branch_no_cam():
    g, expected = _gauss_in_box()
    f = fuse_box(BOX, E, {E}, None, g, 0.3)
    assert f.branch == 1
    np.testing.assert_array_equal(f.values.values, expected)


def test_fuse_branch_no_activation():
    g, expected = _gauss_in_box()
    v = np.full(DIMS.shape, 0.29)
    v[0, 0] = 1.0  # strong response outside the box does not count
    f = fuse_box(BOX, E, {E}, cam(v), g, 0.3)
    assert f.branch == 2
    np.testing.assert_array_equal(f.values.values, expected)


def test_fuse_branch_product():
    g, expected = _gauss_in_box()
    f = fuse_box(BOX, E, {E}, cam(np.ones(DIMS.shape)), g, 0.3)
    assert f.branch == 3
    np.testing.assert_array_equal(f.values.values, expected)

    v = np.zeros(DIMS.shape)
    v[4, 3] = 0.3  # exactly epsilon triggers the product branch
    v[5, 5] = 0.5
    f = fuse_box(BOX, E, {E}, cam(v), g, 0.3)
    assert f.branch == 3
    np.testing.assert_array_equal(f.values.values, np.where(BOX.region_mask(DIMS), g.values * v, 0.0))


def test_fuse_class_mismatch():
    g = gaussian_attention(BOX, DIMS)
    with pytest.raises(ValueError):
        fuse_box(BOX, E, {E}, cam(np.ones(DIMS.shape), S), g, 0.3)


@given(st.integers(0, 10_000), st.sampled_from([None, "pred", "notpred"]))
@settings(max_examples=50, deadline=None)
def test_fused_never_exceeds_gaussian(seed, mode):
    rng = np.random.default_rng(seed)
    x, y = rng.integers(0, 10, size=2)
    box = BBox(int(x), int(y), int(rng.integers(1, 8)), int(rng.integers(1, 8)), E)
    g = gaussian_attention(box, DIMS)
    c = None if mode is None else cam(rng.uniform(size=DIMS.shape))
    predicted = {E} if mode == "pred" else set()
    f = fuse_box(box, E, predicted, c, g, 0.3).values.values
    assert np.all(f <= g.values)
    assert np.all(f[~box.region_mask(DIMS)] == 0)
    assert f.min() >= 0 and f.max() <= 1


def _fused(box, values):
    return FusedBoxActivation(box, box.class_id, ActivationMap(DIMS, box.class_id, values))


def test_assemble_one_box():
    v = np.zeros(DIMS.shape)
    v[3:7, 2:7] = 0.8
    s = assemble_stack([_fused(BOX, v)], DIMS)
    assert s.classes == (E,)
    np.testing.assert_array_equal(s.maps[E].values, v)


def test_assemble_disjoint_and_overlap():
    a, b = np.zeros(DIMS.shape), np.zeros(DIMS.shape)
    a[0:2, 0:2] = 0.4
    b[5:7, 5:7] = 0.9
    s = assemble_stack([_fused(BOX, a), _fused(BOX, b)], DIMS)
    np.testing.assert_array_equal(s.maps[E].values, a + b)

    a[6, 6] = 0.4
    b[6, 6] = 0.7
    s = assemble_stack([_fused(BOX, a), _fused(BOX, b)], DIMS)
    assert s.maps[E].values[6, 6] == 0.7
    s2 = assemble_stack([_fused(BOX, b), _fused(BOX, a)], DIMS)
    np.testing.assert_array_equal(s.maps[E].values, s2.maps[E].values)


def test_assemble_dims_mismatch():
    other = FusedBoxActivation(BOX, E, ActivationMap(ImageDims(3, 3), E, np.zeros((3, 3))))
    with pytest.raises(ShapeError):
        assemble_stack([other], DIMS)


def _stack(classes, arr):
    return ActivationStack.from_array(classes, np.asarray(arr, dtype=float))


def test_pseudo_label_rules():
    classes = (ClassId.HOLOTHURIAN, ClassId.ECHINUS, ClassId.SCALLOP)
    arr = np.zeros((3, 1, 5))
    arr[1, 0, 0] = 0.5  # foreground class 2
    arr[:, 0, 1] = 0.01  # background
    arr[0, 0, 2] = 0.1  # between thresholds -> ignore
    arr[:, 0, 3] = [0.4, 0.6, 0.35]  # argmax of classes above 0.3
    arr[:, 0, 4] = [0.05, 0.0, 0.0]  # exactly theta_bg -> ignore
    m = generate_pseudo_label(_stack(classes, arr), 0.3, 0.05).values
    assert m.tolist() == [[2, 0, 255, 2, 255]]


def test_pseudo_label_strict_fg_and_ties():
    classes = (ClassId.HOLOTHURIAN, ClassId.STARFISH)
    arr = np.array([[[0.3, 0.7]], [[0.3, 0.7]]])
    m = generate_pseudo_label(_stack(classes, arr), 0.3, 0.05).values
    # 0.3 is not > 0.3; tie at 0.7 goes to the lower class id
    assert m.tolist() == [[255, 1]]


def test_pseudo_label_empty_stack_is_background():
    m = generate_pseudo_label(ActivationStack(DIMS, {}), 0.3, 0.05)
    assert (m.values == 0).all()


@given(st.integers(0, 100_000))
@settings(max_examples=40, deadline=None)
def test_pseudo_label_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    classes = tuple(sorted(rng.choice([1, 2, 3, 4], size=rng.integers(1, 5), replace=False)))
    arr = rng.choice([0.0, 0.02, 0.05, 0.1, 0.3, 0.31, 0.5, 0.9], size=(len(classes), 6, 7))
    got = generate_pseudo_label(_stack(classes, arr), 0.3, 0.05).values
    np.testing.assert_array_equal(got, pseudo_label_bruteforce(classes, arr, 0.3, 0.05))


@given(st.integers(0, 100_000), st.floats(0.1, 0.5), st.floats(0.0, 0.4))
@settings(max_examples=40, deadline=None)
def test_pseudo_label_monotone_in_fg_threshold(seed, theta_fg, bump):
    rng = np.random.default_rng(seed)
    arr = rng.uniform(size=(2, 8, 8)) * rng.uniform()
    s = _stack((1, 3), arr)
    lo = generate_pseudo_label(s, theta_fg, 0.05).values
    hi = generate_pseudo_label(s, min(theta_fg + bump, 1.0), 0.05).values
    became_fg = (hi != 0) & (hi != 255) & ((lo == 0) | (lo == 255))
    assert not became_fg.any()


@given(st.integers(0, 100_000))
@settings(max_examples=30, deadline=None)
def test_foreground_pixels_hold_largest_value(seed):
    rng = np.random.default_rng(seed)
    classes = (1, 2, 4)
    arr = rng.uniform(size=(3, 8, 8))
    m = generate_pseudo_label(_stack(classes, arr), 0.3, 0.05).values
    for k, c in enumerate(classes):
        sel = m == c
        assert np.all(arr[k][sel] > 0.3)
        assert np.all(arr[k][sel] >= np.where(arr > 0.3, arr, 0).max(axis=0)[sel])
