from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lobavqa.geometry import (
    BoundingBox, GeometryError, PixelMask, iou_over_disease, iou_over_disease_exact, map_relations,
    mask_area, rle_decode, rle_encode,
)

from conftest import blank_scene, rect


def brute_iou(box, bits):
    inside = sum(bool(bits[y, x]) for y in range(box.y0, box.y1) for x in range(box.x0, box.x1))
    return Fraction(inside, box.area)


def test_mask_area_examples():
    assert mask_area(PixelMask(4, 4, ())) == 0
    assert mask_area(PixelMask(4, 4, ((0, 16),))) == 16
    m = PixelMask(4, 4, ((0, 3), (8, 2)))
    assert mask_area(m) == 5 == rle_decode(m).sum()


def test_rle_edge_cases():
    assert rle_encode(np.zeros((5, 3), bool)).runs == ()
    assert not rle_decode(rle_encode(np.zeros((5, 3), bool))).any()
    g = np.zeros((4, 4), bool)
    g[0, 0] = True
    assert rle_encode(g).runs == ((0, 1),)


@pytest.mark.parametrize("runs", [((0, 17),), ((4, 2), (3, 1)), ((0, 0),), ((2, 3), (4, 1))])
def test_invalid_runs_rejected(runs):
    with pytest.raises(GeometryError):
        PixelMask(4, 4, runs)


@given(arrays(np.bool_, (16, 16)))
def test_rle_round_trip(bits):
    assert np.array_equal(rle_decode(rle_encode(bits)), bits)


@given(arrays(np.bool_, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_rle_round_trip_any_shape(bits):
    mask = rle_encode(bits)
    assert np.array_equal(rle_decode(mask), bits)
    assert mask_area(mask) == bits.sum()


def test_iou_containment_and_disjoint():
    mask = rle_encode(rect(16, 2, 2, 10, 10))
    assert iou_over_disease(BoundingBox(3, 3, 6, 6), mask) == 1.0
    assert iou_over_disease(BoundingBox(11, 11, 14, 14), mask) == 0.0


def test_iou_half_overlap():
    # 4x4 box, mask covers its left two columns -> 8 of 16 pixels
    bits = rect(16, 0, 0, 6, 16)
    box = BoundingBox(4, 4, 8, 8)
    assert brute_iou(box, bits) == Fraction(1, 2)
    assert iou_over_disease(box, rle_encode(bits)) == 0.5


def test_iou_dimension_mismatch():
    with pytest.raises(GeometryError):
        iou_over_disease(BoundingBox(0, 0, 20, 20), rle_encode(np.ones((16, 16), bool)))


@settings(max_examples=200)
@given(arrays(np.bool_, (32, 32)), st.integers(0, 31), st.integers(0, 31), st.integers(1, 32), st.integers(1, 32))
def test_iou_matches_brute_force(bits, x0, y0, w, h):
    box = BoundingBox(x0, y0, min(32, x0 + w), min(32, y0 + h))
    exact = iou_over_disease_exact(box, rle_encode(bits))
    assert exact == brute_iou(box, bits)
    assert 0 <= exact <= 1


def test_map_relations_single_containment():
    scene = blank_scene(regions={"heart": rect(16, 4, 4, 12, 12)},
                        diseases=[("cardiomegaly", BoundingBox(5, 5, 8, 8))])
    assert map_relations(scene).pairs == {("heart", "cardiomegaly")}


def test_map_relations_strict_threshold():
    # box half inside the heart: score exactly 0.5 is not "over" 0.5
    scene = blank_scene(regions={"heart": rect(16, 0, 0, 6, 16)},
                        diseases=[("cardiomegaly", BoundingBox(4, 4, 8, 8))])
    assert iou_over_disease(scene.diseases[0][1], scene.anatomies["heart"]) == 0.5
    assert map_relations(scene, 0.5).pairs == frozenset()
    assert map_relations(scene, 0.49).pairs == {("heart", "cardiomegaly")}


def test_map_relations_two_boxes_same_disease():
    scene = blank_scene(
        regions={"heart": rect(16, 0, 0, 8, 8), "mediastinum": rect(16, 8, 8, 16, 16)},
        diseases=[("nodule/mass", BoundingBox(1, 1, 4, 4)), ("nodule/mass", BoundingBox(9, 9, 12, 12))],
    )
    expected = set()
    for label, box in scene.diseases:
        for anatomy, mask in scene.anatomies.items():
            if brute_iou(box, rle_decode(mask)) > Fraction(1, 2):
                expected.add((anatomy, label))
    assert map_relations(scene).pairs == expected == {("heart", "nodule/mass"), ("mediastinum", "nodule/mass")}


def test_map_relations_monotone_in_delta(small_shard):
    deltas = [0.1, 0.3, 0.5, 0.7, 0.9]
    for scene in small_shard.scenes:
        sets = [map_relations(scene, d).pairs for d in deltas]
        for lo, hi in zip(sets, sets[1:]):
            assert hi <= lo
