import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

import oracles
from unires.geometry import (BoundingBox, CoordSpace, CorruptMaskError, FeatureMap, InvalidInputError, Level,
                             RleMask, mask_iou, normalize_box, roi_align, roi_align_boxes, rle_decode, rle_encode)


def test_normalize_full_image():
    for w, h in [(64, 64), (640, 480), (1, 1), (333, 17)]:
        assert normalize_box(BoundingBox(0, 0, w, h), w, h).as_tuple() == (0, 0, 999, 999)


def test_normalize_examples():
    b = normalize_box(BoundingBox(0, 0, 250, 10), 500, 100)
    assert b.x0 == 0
    assert b.x1 == 500  # 250/500*999 = 499.5 rounds half up
    assert b.space is CoordSpace.NORM999


def test_normalize_degenerate_image():
    with pytest.raises(InvalidInputError):
        normalize_box(BoundingBox(0, 0, 0, 0), 0, 10)


@given(st.integers(1, 2000), st.integers(1, 2000), st.data())
@settings(max_examples=100, deadline=None)
def test_normalize_monotone_and_idempotent(w, h, data):
    xa = data.draw(st.floats(0, w))
    xb = data.draw(st.floats(xa, w))
    ya = data.draw(st.floats(0, h))
    yb = data.draw(st.floats(ya, h))
    n1 = normalize_box(BoundingBox(xa, ya, xa, ya), w, h)
    n2 = normalize_box(BoundingBox(xa, ya, xb, yb), w, h)
    assert n1.x0 <= n2.x1 and n1.y0 <= n2.y1
    assert n2.x0 <= n2.x1 and n2.y0 <= n2.y1
    assert normalize_box(n2, w, h) == n2


def test_norm999_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        BoundingBox(0, 0, 1000, 5, CoordSpace.NORM999)
    with pytest.raises(InvalidInputError):
        BoundingBox(5, 0, 1, 5)


def test_rle_examples():
    assert rle_encode(np.zeros((2, 2), bool)).counts == [4]
    assert rle_encode(np.ones((2, 2), bool)).counts == [0, 4]
    m = np.zeros((2, 2), bool)
    m[0, 0] = True
    assert rle_encode(m).counts == [0, 1, 3]
    m = np.zeros((2, 3), bool)
    m[1, 0] = True  # column-major: (0,0) bg, (1,0) fg
    assert rle_encode(m).counts == [1, 1, 4]


def test_rle_corrupt():
    with pytest.raises(CorruptMaskError):
        rle_decode(RleMask(2, 2, [1, 2]))


@given(st.integers(1, 12), st.integers(1, 12), st.randoms(use_true_random=False))
@settings(max_examples=80, deadline=None)
def test_rle_matches_oracle(h, w, rnd):
    m = np.array([[rnd.random() < 0.4 for _ in range(w)] for _ in range(h)])
    rle = rle_encode(m)
    assert rle.counts == oracles.rle_encode(m.tolist())
    assert sum(rle.counts) == h * w
    assert all(c > 0 for c in rle.counts[1:])
    assert np.array_equal(rle_decode(rle), m)
    assert RleMask.from_json(rle.to_json()) == rle


def test_mask_iou_examples():
    a = np.array([[1, 1], [0, 0]], bool)
    b = np.array([[0, 1], [0, 1]], bool)
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    assert mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(InvalidInputError):
        mask_iou(np.zeros((2, 2)), np.zeros((2, 3)))


@given(st.integers(1, 8), st.integers(1, 8), st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_mask_iou_properties(h, w, rnd):
    a = np.array([[rnd.random() < 0.5 for _ in range(w)] for _ in range(h)])
    b = np.array([[rnd.random() < 0.5 for _ in range(w)] for _ in range(h)])
    assert mask_iou(a, b) == mask_iou(b, a)
    assert mask_iou(a, b) == pytest.approx(oracles.iou(a.tolist(), b.tolist()), abs=1e-12)
    if a.any():
        assert mask_iou(a, np.zeros_like(a)) == 0.0


def _fm(values, gh, gw, img):
    return FeatureMap(gh, gw, torch.as_tensor(values, dtype=torch.float64), Level.HIGHRES, img, img)


def test_roi_constant_map():
    fm = _fm(np.full((16, 3), 3.5), 4, 4, 32)
    for box in [BoundingBox(0, 0, 32, 32), BoundingBox(3.3, 7.1, 9.8, 30.0), BoundingBox(31, 31, 32, 32)]:
        out = roi_align(fm, box, 7, 7, 2).values
        assert torch.allclose(out, torch.full_like(out, 3.5), atol=1e-12, rtol=0)


def test_roi_full_extent_center():
    grid = [[1.0, 2.0], [3.0, 4.0]]
    fm = _fm(np.array(grid).reshape(4, 1), 2, 2, 8)
    out = roi_align(fm, BoundingBox(0, 0, 8, 8), 1, 1, 1).values
    # box centre sits at cell-centre coordinate (0.5, 0.5)
    assert float(out[0, 0]) == pytest.approx(oracles.bilinear(grid, 0.5, 0.5))
    assert float(out[0, 0]) == pytest.approx(2.5)


@given(st.randoms(use_true_random=False), st.integers(1, 3), st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_roi_matches_loop_oracle(rnd, out_h, s):
    gh, gw, img = 3, 4, 24
    grid = [[rnd.uniform(-2, 2) for _ in range(gw)] for _ in range(gh)]
    fm = FeatureMap(gh, gw, torch.tensor(grid, dtype=torch.float64).reshape(-1, 1), Level.HIGHRES, img, img)
    x0, y0 = rnd.uniform(0, 20), rnd.uniform(0, 20)
    box = (x0, y0, rnd.uniform(x0 + 0.5, 24), rnd.uniform(y0 + 0.5, 24))
    got = roi_align(fm, BoundingBox(*box), out_h, 2, s).values[:, 0].reshape(out_h, 2)
    want = oracles.roi_align(grid, img, img, box, out_h, 2, s)
    assert_allclose(got.numpy(), np.array(want), atol=1e-12)


def test_roi_linear():
    gen = torch.Generator().manual_seed(0)
    a = torch.randn(16, 5, generator=gen, dtype=torch.float64)
    b = torch.randn(16, 5, generator=gen, dtype=torch.float64)
    boxes = [BoundingBox(1, 2, 20, 30), BoundingBox(10, 0, 32, 12)]
    al, be = 0.7, -1.9
    f = lambda v: roi_align_boxes(_fm(v, 4, 4, 32), boxes, 3, 3, 2)
    assert torch.allclose(f(al * a + be * b), al * f(a) + be * f(b), atol=1e-9, rtol=0)


def test_roi_errors():
    fm = _fm(np.zeros((16, 2)), 4, 4, 32)
    with pytest.raises(InvalidInputError):
        roi_align(fm, BoundingBox(5, 5, 5, 10))
    with pytest.raises(InvalidInputError):
        roi_align(fm, BoundingBox(40, 40, 50, 50))
