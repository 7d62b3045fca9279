"""Synthetic planted-relation datasets.

Objects carry a class-conditioned visual vector (a fixed unit-norm class
embedding plus Gaussian noise). Relations follow rules
``(subject class, object class, spatial template, predicate)`` where the
template is a condition on the edge features of the ordered pair, so the
signal is visible to the classifier. Every ordered pair satisfying a rule,
planted or accidental, becomes a ground-truth triplet; the image-level
labels are the union of their predicates.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, DatasetHeader
from .graph import BBox, DetectedObject, ImageRecord, edge_features

TEMPLATES = ("left-of", "above", "containing", "near")

# thresholds in edge-feature units (distance normalized by sqrt(W*H))
DIRECTIONAL_COS = 0.9
DIRECTIONAL_MAX_DIST = 0.35
NEAR_MAX_DIST = 0.12
CONTAINING_MAX_RATIO = 0.5


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Rule:
    subject: int
    object: int
    template: str
    predicate: int


def default_rules() -> list[Rule]:
    return [
        Rule(0, 1, "left-of", 0),
        Rule(2, 3, "above", 1),
        Rule(4, 5, "containing", 2),
        Rule(6, 7, "near", 3),
        Rule(0, 8, "above", 4),
        Rule(9, 2, "near", 5),
    ]


@dataclass
class SynthConfig:
    seed: int = 0
    num_classes: int = 10
    num_predicates: int = 6
    train_images: int = 2000
    test_images: int = 400
    objects_min: int = 3
    objects_max: int = 7
    plants_max: int = 2
    rules: list[Rule] = field(default_factory=default_rules)
    visual_noise: float = 0.1
    visual_dim: int = 16
    image_size: tuple[float, float] = (512.0, 512.0)
    detect_prob: float = 0.9
    detect_class_accuracy: float = 0.9
    box_jitter: float = 0.05
    false_positives: float = 0.3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "rules" in d:
            d["rules"] = [r if isinstance(r, Rule) else Rule(**r) for r in d["rules"]]
        if "image_size" in d:
            d["image_size"] = tuple(float(v) for v in d["image_size"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        C, K = self.num_classes, self.num_predicates
        if C < 1 or K < 1:
            raise SynthConfigError("num_classes and num_predicates must be >= 1")
        if self.objects_min < 2 or self.objects_max < self.objects_min:
            raise SynthConfigError("need 2 <= objects_min <= objects_max to plant a relation")
        if self.plants_max < 1:
            raise SynthConfigError("plants_max must be >= 1")
        for r in self.rules:
            if not (0 <= r.subject < C and 0 <= r.object < C):
                raise SynthConfigError(f"rule {r}: class id out of range [0, {C})")
            if not 0 <= r.predicate < K:
                raise SynthConfigError(f"rule {r}: predicate out of range [0, {K})")
            if r.template not in TEMPLATES:
                raise SynthConfigError(f"rule {r}: unknown template {r.template!r}")
        missing = sorted(set(range(K)) - {r.predicate for r in self.rules})
        if missing:
            raise SynthConfigError(f"predicates without any rule: {missing}")
        W, H = self.image_size
        if min(W, H) < 256:
            raise SynthConfigError("image_size must be at least 256x256 for the spatial templates")
        if self.visual_noise < 0:
            raise SynthConfigError("visual_noise must be >= 0")


def template_holds(template: str, bi: BBox, bj: BBox, W: float, H: float) -> bool:
    """Whether subject box ``bi`` and object box ``bj`` satisfy ``template``."""
    dist, sin, cos, iou_ij, ratio = edge_features(bi, bj, W, H)
    if template == "left-of":
        return cos > DIRECTIONAL_COS and dist < DIRECTIONAL_MAX_DIST
    if template == "above":
        # image frame: the object lies below the subject when sin > 0
        return sin > DIRECTIONAL_COS and dist < DIRECTIONAL_MAX_DIST
    if template == "near":
        return dist < NEAR_MAX_DIST
    if template == "containing":
        # object inside subject  <=>  IoU equals the area ratio
        inside = bj.x1 >= bi.x1 and bj.y1 >= bi.y1 and bj.x2 <= bi.x2 and bj.y2 <= bi.y2
        return inside and ratio <= CONTAINING_MAX_RATIO
    raise ValueError(f"unknown template {template!r}")


def _box_at(cx, cy, w, h) -> tuple[float, float, float, float]:
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _fits(b, W, H) -> bool:
    return b[0] >= 0 and b[1] >= 0 and b[2] <= W and b[3] <= H


def _random_box(rng, W, H, lo=32.0, hi=112.0) -> BBox:
    w, h = rng.uniform(lo, hi, size=2)
    cx = rng.uniform(w / 2, W - w / 2)
    cy = rng.uniform(h / 2, H - h / 2)
    return BBox(*_box_at(cx, cy, w, h))


def _place_pair(rng, template: str, W: float, H: float, tries: int = 200) -> tuple[BBox, BBox]:
    side = math.sqrt(W * H)
    for _ in range(tries):
        if template == "containing":
            w, h = rng.uniform(160, 280, size=2)
            sub = _box_at(rng.uniform(w / 2, W - w / 2), rng.uniform(h / 2, H - h / 2), w, h)
            ow, oh = w * rng.uniform(0.25, 0.6), h * rng.uniform(0.25, 0.6)
            ox = rng.uniform(sub[0] + ow / 2, sub[2] - ow / 2)
            oy = rng.uniform(sub[1] + oh / 2, sub[3] - oh / 2)
            obj = _box_at(ox, oy, ow, oh)
        else:
            if template == "near":
                d = rng.uniform(0.0, 0.9 * NEAR_MAX_DIST) * side
                theta = rng.uniform(0, 2 * math.pi)
            else:
                d = rng.uniform(0.12, 0.9 * DIRECTIONAL_MAX_DIST) * side
                theta = rng.uniform(-0.35, 0.35) + (math.pi / 2 if template == "above" else 0.0)
            sw, sh, ow, oh = rng.uniform(32, 112, size=4)
            cx, cy = rng.uniform(0, W), rng.uniform(0, H)
            sub = _box_at(cx, cy, sw, sh)
            obj = _box_at(cx + d * math.cos(theta), cy + d * math.sin(theta), ow, oh)
        if _fits(sub, W, H) and _fits(obj, W, H):
            bs, bo = BBox(*sub), BBox(*obj)
            if template_holds(template, bs, bo, W, H):
                return bs, bo
    raise SynthConfigError(f"could not place template {template!r} in a {W}x{H} image")


def class_embeddings(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 7919])
    e = rng.normal(size=(cfg.num_classes, cfg.visual_dim))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def annotate(objects: list[DetectedObject], rules, W: float, H: float) -> list[tuple[int, int, int]]:
    """All ``(subject, predicate, object)`` index triplets implied by the rules."""
    out = []
    for i, oi in enumerate(objects):
        for j, oj in enumerate(objects):
            if i == j:
                continue
            for r in rules:
                if r.subject == oi.class_id and r.object == oj.class_id and template_holds(r.template, oi.bbox, oj.bbox, W, H):
                    out.append((i, r.predicate, j))
    return sorted(set(out))


def _simulate_detector(rng, cfg: SynthConfig, objects, embed, W, H) -> list[DetectedObject]:
    dets = []
    for o in objects:
        if rng.random() >= cfg.detect_prob:
            continue
        b = o.bbox
        jitter = rng.normal(0, cfg.box_jitter, size=4) * np.array([b.width, b.height, b.width, b.height])
        x1, y1, x2, y2 = np.array(b.as_list()) + jitter
        x1, y1 = max(0.0, x1), max(0.0, y1)
        x2, y2 = min(W, max(x2, x1 + 2.0)), min(H, max(y2, y1 + 2.0))
        if x2 <= x1 or y2 <= y1:
            continue
        if rng.random() < cfg.detect_class_accuracy:
            cls, score = o.class_id, rng.uniform(0.5, 1.0)
        else:
            cls, score = int(rng.integers(cfg.num_classes)), rng.uniform(0.3, 0.7)
        visual = o.visual + cfg.visual_noise * rng.normal(size=o.visual.shape)
        dets.append(DetectedObject(BBox(x1, y1, x2, y2), int(cls), float(score), visual))
    for _ in range(rng.poisson(cfg.false_positives)):
        cls = int(rng.integers(cfg.num_classes))
        visual = embed[cls] + cfg.visual_noise * rng.normal(size=cfg.visual_dim)
        dets.append(DetectedObject(_random_box(rng, W, H), cls, float(rng.uniform(0.05, 0.5)), visual))
    return dets


def _make_image(rng, cfg: SynthConfig, embed, image_id: str, split: str) -> ImageRecord:
    W, H = cfg.image_size
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    n_plants = int(rng.integers(1, min(cfg.plants_max, n // 2) + 1))
    placed: list[tuple[BBox, int]] = []
    for _ in range(n_plants):
        rule = cfg.rules[int(rng.integers(len(cfg.rules)))]
        bs, bo = _place_pair(rng, rule.template, W, H)
        placed += [(bs, rule.subject), (bo, rule.object)]
    while len(placed) < n:
        placed.append((_random_box(rng, W, H), int(rng.integers(cfg.num_classes))))
    order = rng.permutation(len(placed))
    objects = []
    for idx in order:
        box, cls = placed[idx]
        visual = embed[cls] + cfg.visual_noise * rng.normal(size=cfg.visual_dim)
        objects.append(DetectedObject(box, cls, 1.0, visual))
    triplets = annotate(objects, cfg.rules, W, H)
    labels = np.zeros(cfg.num_predicates)
    for _, k, _ in triplets:
        labels[k] = 1.0
    detections = _simulate_detector(rng, cfg, objects, embed, W, H)
    return ImageRecord(image_id, W, H, objects, labels, triplets, detections, split)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic train/test dataset for ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    embed = class_embeddings(cfg)
    records = []
    for split, count in (("train", cfg.train_images), ("test", cfg.test_images)):
        for i in range(count):
            records.append(_make_image(rng, cfg, embed, f"{split}-{i:05d}", split))
    header = DatasetHeader(
        num_classes=cfg.num_classes,
        num_predicates=cfg.num_predicates,
        class_names=[f"class{c}" for c in range(cfg.num_classes)],
        predicate_names=[_predicate_name(cfg, k) for k in range(cfg.num_predicates)],
        visual_mode="flat",
        visual_shape=(cfg.visual_dim,),
    )
    return Dataset(header, records)


def _predicate_name(cfg: SynthConfig, k: int) -> str:
    templates = sorted({r.template for r in cfg.rules if r.predicate == k})
    return f"p{k}-" + "+".join(templates)
