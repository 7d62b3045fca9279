import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from weakrel.graph import (
    BBox,
    DetectedObject,
    GraphBatch,
    InvalidBoxError,
    build_graph,
    edge_features,
    filter_detections,
    iou,
    spatial_features,
)
from helpers import random_objects

coord = st.floats(0, 400, allow_nan=False)
size = st.floats(1, 200, allow_nan=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(size), draw(size)
    return BBox(x, y, x + w, y + h)


def test_spatial_features_examples():
    np.testing.assert_allclose(spatial_features(BBox(10, 10, 60, 110), 200, 200), [0.5, 2.0, 0.125])
    np.testing.assert_allclose(spatial_features(BBox(0, 0, 80, 80), 80, 80), [1, 1, 1])


@given(boxes())
def test_spatial_aspect_ratios_multiply_to_one(b):
    s = spatial_features(b, 1000, 1000)
    assert s[0] * s[1] == pytest.approx(1.0, rel=1e-12)


def test_iou_examples():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 6, 6)) == 0.0
    assert iou(a, BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


def test_edge_features_example():
    f = edge_features(BBox(0, 0, 2, 2), BBox(4, 0, 6, 2), 100, 100)
    np.testing.assert_allclose(f, [0.04, 0, 1, 0, 1], atol=1e-15)


def test_edge_features_coincident_centers():
    f = edge_features(BBox(0, 0, 4, 4), BBox(1, 1, 3, 3), 100, 100)
    assert f[0] == 0 and f[1] == 0 and f[2] == 0
    assert f[3] == pytest.approx(0.25) and f[4] == pytest.approx(0.25)


def test_edge_angle_uses_image_frame():
    # object below the subject on screen has positive sine
    f = edge_features(BBox(0, 0, 2, 2), BBox(0, 10, 2, 12), 100, 100)
    assert f[1] == pytest.approx(1.0) and f[2] == pytest.approx(0.0, abs=1e-15)


@given(boxes(), boxes())
def test_edge_features_antisymmetry(a, b):
    assume(a.center != b.center)
    f, g = edge_features(a, b, 640, 480), edge_features(b, a, 640, 480)
    assert f[0] == pytest.approx(g[0], rel=1e-12)
    assert f[1] == pytest.approx(-g[1], abs=1e-12)
    assert f[2] == pytest.approx(-g[2], abs=1e-12)
    assert f[3] == pytest.approx(g[3], rel=1e-12)
    assert f[4] == pytest.approx(1.0 / g[4], rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 200), st.floats(0, 200))
def test_translation_invariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    objs = random_objects(rng, 4, W=300, H=300)
    moved = [
        DetectedObject(BBox(o.bbox.x1 + dx, o.bbox.y1 + dy, o.bbox.x2 + dx, o.bbox.y2 + dy), o.class_id, o.score, o.visual)
        for o in objs
    ]
    g1 = build_graph(objs, 600, 600)
    g2 = build_graph(moved, 600, 600)
    np.testing.assert_allclose(g1.spatial, g2.spatial, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(g1.edge_attr, g2.edge_attr, rtol=1e-9, atol=1e-9)


def test_invalid_boxes_rejected():
    for bad in [(2, 0, 2, 1), (0, 3, 1, 1), (-1, 0, 1, 1), (0, 0, float("nan"), 1)]:
        with pytest.raises(InvalidBoxError):
            BBox(*bad)


def test_filter_detections():
    objs = [DetectedObject(BBox(0, 0, 1, 1), 0, s) for s in (0.9, 0.2)]
    assert filter_detections(objs, 0.3) == objs[:1]
    assert filter_detections(objs, 0.0) == objs
    assert filter_detections(objs, 0.95) == []
    assert filter_detections([DetectedObject(BBox(0, 0, 1, 1), 0, 0.3)], 0.3)  # inclusive
    with pytest.raises(ValueError):
        filter_detections(objs, 1.5)


def test_edge_counts_fully_connected():
    rng = np.random.default_rng(0)
    assert build_graph(random_objects(rng, 4), 100, 80).num_edges == 12
    assert build_graph(random_objects(rng, 1), 100, 80).num_edges == 0
    assert build_graph([], 100, 80, visual_shape=(4,)).num_edges == 0


def test_subject_restricted_structure():
    person, cup = 0, 1
    objs = [DetectedObject(BBox(i, i, i + 5, i + 5), c) for i, c in enumerate([person, person, cup])]
    g = build_graph(objs, 100, 100, subject_classes={person})
    assert [tuple(e) for e in g.edges] == [(0, 1), (0, 2), (1, 0), (1, 2)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 8), st.integers(0, 10_000), st.sets(st.integers(0, 3)))
def test_structure_invariants(n, seed, S):
    objs = random_objects(np.random.default_rng(seed), n)
    full = build_graph(objs, 100, 80)
    assert full.num_edges == n * n - n
    assert all(i != j for i, j in full.edges)
    assert [tuple(e) for e in full.edges] == sorted(tuple(e) for e in full.edges)
    restricted = build_graph(objs, 100, 80, subject_classes=S)
    expected = {(i, j) for i in range(n) for j in range(n) if i != j and objs[i].class_id in S}
    assert {tuple(e) for e in restricted.edges} == expected


def test_permuted_graph_reorders_nodes():
    rng = np.random.default_rng(1)
    g = build_graph(random_objects(rng, 3), 100, 80, visual_shape=(4,))
    p = g.permuted([2, 0, 1])
    np.testing.assert_array_equal(p.spatial, g.spatial[[2, 0, 1]])
    np.testing.assert_array_equal(p.visual, g.visual[[2, 0, 1]])


def test_graph_batch_offsets():
    rng = np.random.default_rng(2)
    graphs = [build_graph(random_objects(rng, n), 100, 80) for n in (3, 0, 2)]
    b = GraphBatch.from_graphs(graphs, (4,))
    assert b.node_counts.tolist() == [3, 0, 2]
    assert b.edge_counts.tolist() == [6, 0, 2]
    assert b.src[6:].tolist() == [3, 4] and b.dst[6:].tolist() == [4, 3]
    with pytest.raises(ValueError):
        GraphBatch.from_graphs([])


def test_mixed_visual_presence_rejected():
    objs = [DetectedObject(BBox(0, 0, 1, 1), 0, 1.0, np.zeros(2)), DetectedObject(BBox(0, 0, 1, 1), 0)]
    with pytest.raises(ValueError):
        build_graph(objs, 10, 10)


def test_edge_distance_normalized_by_image_diagonal_scale():
    f = edge_features(BBox(0, 0, 2, 2), BBox(0, 30, 2, 32), 100, 400)
    assert f[0] == pytest.approx(30 / math.sqrt(100 * 400))
