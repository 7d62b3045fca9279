"""Image graphs built from detected (or ground-truth) objects.

Boxes are ``(x1, y1, x2, y2)`` in pixels, image frame with y growing
downward. Node features are the 3-vector box shape descriptor plus an
ingested visual feature; edge features describe the relative placement of
an ordered pair of boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box {vals}")
        if min(vals) < 0:
            raise InvalidBoxError(f"negative coordinate in box {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def of(cls, box) -> "BBox":
        if isinstance(box, BBox):
            return box
        return cls(*(float(v) for v in box))


@dataclass
class DetectedObject:
    bbox: BBox
    class_id: int
    score: float = 1.0
    visual: np.ndarray | None = None


@dataclass
class ImageRecord:
    """One image: objects, image-level predicate labels and (optionally) triplets.

    ``triplets`` index into ``objects`` as ``(subject, predicate, object)``.
    ``detections`` holds detector output when it differs from the annotated
    objects.
    """

    image_id: str
    width: float
    height: float
    objects: list[DetectedObject]
    predicate_labels: np.ndarray | None = None
    triplets: list[tuple[int, int, int]] = field(default_factory=list)
    detections: list[DetectedObject] | None = None
    split: str | None = None

    @property
    def gt_triplets(self) -> list[tuple[BBox, int, int, BBox, int]]:
        out = []
        for s, k, o in self.triplets:
            so, oo = self.objects[s], self.objects[o]
            out.append((so.bbox, so.class_id, k, oo.bbox, oo.class_id))
        return out


def spatial_features(b: BBox, W: float, H: float) -> np.ndarray:
    w, h = b.width, b.height
    return np.array([w / h, h / w, (w * h) / (W * H)])


def iou(b1: BBox, b2: BBox) -> float:
    iw = min(b1.x2, b2.x2) - max(b1.x1, b2.x1)
    ih = min(b1.y2, b2.y2) - max(b1.y1, b2.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (b1.area + b2.area - inter)


def edge_features(bi: BBox, bj: BBox, W: float, H: float) -> np.ndarray:
    """``[dist / sqrt(WH), sin, cos, IoU, area_j / area_i]`` for the edge i -> j.

    The angle is that of ``x_j - x_i`` against the positive horizontal axis
    in image coordinates. Coincident centers give ``sin = cos = 0``.
    """
    (xi, yi), (xj, yj) = bi.center, bj.center
    dx, dy = xj - xi, yj - yi
    dist = math.hypot(dx, dy)
    if dist > 0:
        sin, cos = dy / dist, dx / dist
    else:
        sin = cos = 0.0
    return np.array([dist / math.sqrt(W * H), sin, cos, iou(bj, bi), bj.area / bi.area])


def filter_detections(objects: Sequence[DetectedObject], threshold: float) -> list[DetectedObject]:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return [o for o in objects if o.score >= threshold]


@dataclass
class ImageGraph:
    """Directed graph over the objects of one image.

    ``subject_classes`` is ``None`` for the fully-connected structure;
    otherwise only edges whose source node has one of these classes exist.
    """

    boxes: list[BBox]
    class_ids: np.ndarray
    scores: np.ndarray
    spatial: np.ndarray  # (O, 3)
    visual: np.ndarray  # (O, d_v) or (O, c, h, w)
    edges: np.ndarray  # (E, 2) int, lexicographic
    edge_attr: np.ndarray  # (E, 5)
    width: float = 1.0
    height: float = 1.0
    subject_classes: frozenset[int] | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.boxes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def objects(self) -> list[DetectedObject]:
        return [
            DetectedObject(b, int(c), float(sc), v)
            for b, c, sc, v in zip(self.boxes, self.class_ids, self.scores, self.visual)
        ]

    def permuted(self, perm: Sequence[int]) -> "ImageGraph":
        """The same image with object ``perm[i]`` moved to position ``i``."""
        objs = self.objects()
        return build_graph(
            [objs[p] for p in perm], self.width, self.height, self.subject_classes, self.visual.shape[1:]
        )


def _enumerate_edges(class_ids: np.ndarray, subject_classes) -> np.ndarray:
    n = len(class_ids)
    pairs = [
        (i, j)
        for i in range(n)
        if subject_classes is None or int(class_ids[i]) in subject_classes
        for j in range(n)
        if i != j
    ]
    return np.array(pairs, dtype=np.intp).reshape(-1, 2)


def build_graph(
    objects: Sequence[DetectedObject],
    W: float,
    H: float,
    subject_classes: Iterable[int] | None = None,
    visual_shape: tuple[int, ...] | None = None,
) -> ImageGraph:
    """Build the image graph; ``subject_classes`` restricts edge sources.

    ``visual_shape`` gives the per-object visual shape used when ``objects``
    is empty or objects carry no visual features (then zeros are used).
    """
    S = None if subject_classes is None else frozenset(int(c) for c in subject_classes)
    boxes = [o.bbox for o in objects]
    class_ids = np.array([o.class_id for o in objects], dtype=np.intp)
    scores = np.array([o.score for o in objects], dtype=np.float64)
    spatial = np.array([spatial_features(b, W, H) for b in boxes]).reshape(-1, 3)
    visual = _stack_visual(objects, visual_shape)
    edges = _enumerate_edges(class_ids, S)
    attr = np.array([edge_features(boxes[i], boxes[j], W, H) for i, j in edges]).reshape(-1, 5)
    return ImageGraph(boxes, class_ids, scores, spatial, visual, edges, attr, W, H, S)


def _stack_visual(objects, visual_shape) -> np.ndarray:
    if objects and all(o.visual is not None for o in objects):
        return np.stack([np.asarray(o.visual, dtype=np.float64) for o in objects])
    shape = tuple(visual_shape) if visual_shape is not None else (0,)
    if any(o.visual is not None for o in objects):
        raise ValueError("either all objects carry visual features or none do")
    return np.zeros((len(objects),) + shape)


@dataclass
class GraphBatch:
    """Several graphs concatenated for one forward pass.

    Edges of graph ``g`` occupy a contiguous block of rows; ``src``/``dst``
    index the concatenated node arrays.
    """

    spatial: np.ndarray
    visual: np.ndarray
    edge_attr: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_counts: np.ndarray
    edge_counts: np.ndarray

    @property
    def num_graphs(self) -> int:
        return len(self.node_counts)

    @property
    def node_offsets(self) -> np.ndarray:
        return np.cumsum(self.node_counts) - self.node_counts

    @property
    def edge_offsets(self) -> np.ndarray:
        return np.cumsum(self.edge_counts) - self.edge_counts

    @classmethod
    def from_graphs(cls, graphs: Sequence[ImageGraph], visual_shape=None) -> "GraphBatch":
        if not graphs:
            raise ValueError("cannot batch zero graphs")
        if visual_shape is None:
            visual_shape = next((g.visual.shape[1:] for g in graphs if g.num_nodes), graphs[0].visual.shape[1:])
        visual_shape = tuple(visual_shape)
        node_counts = np.array([g.num_nodes for g in graphs], dtype=np.intp)
        edge_counts = np.array([g.num_edges for g in graphs], dtype=np.intp)
        offsets = np.cumsum(node_counts) - node_counts
        src = np.concatenate([g.edges[:, 0] + o for g, o in zip(graphs, offsets)]).astype(np.intp)
        dst = np.concatenate([g.edges[:, 1] + o for g, o in zip(graphs, offsets)]).astype(np.intp)
        for g in graphs:
            if g.num_nodes and g.visual.shape[1:] != visual_shape:
                raise ValueError(f"visual feature shape {g.visual.shape[1:]} != expected {visual_shape}")
        visual = np.concatenate([g.visual.reshape((g.num_nodes,) + visual_shape) for g in graphs])
        return cls(
            spatial=np.concatenate([g.spatial for g in graphs]),
            visual=visual,
            edge_attr=np.concatenate([g.edge_attr for g in graphs]),
            src=src,
            dst=dst,
            node_counts=node_counts,
            edge_counts=edge_counts,
        )
