"""Dataset files, detection files and their validation.

A dataset is one JSON document::

    {"schema_version": 1,
     "header": {"num_classes": C, "num_predicates": K,
                "class_names": [...], "predicate_names": [...],
                "visual": {"mode": "flat", "dim": d} | {"mode": "map", "shape": [c, 7, 7]}
                          | {"mode": "none"},
                "feature_file": "features.bin"},          # optional sidecar
     "images": [{"image_id": "...", "split": "train", "width": W, "height": H,
                 "objects": [{"bbox": [x1, y1, x2, y2], "class_id": c, "score": 1.0,
                              "visual": [...] | "feature_offset": byte_offset}],
                 "detections": [...],                      # optional detector output
                 "predicate_labels": [0, 1, ...] | "predicates": [k, ...],
                 "triplets": [[subject_index, k, object_index], ...]}]}

The sidecar holds, per object, a little-endian uint32 count followed by that
many little-endian float32 values.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import BBox, DetectedObject, ImageRecord, InvalidBoxError
from .metrics import Triplet

SCHEMA_VERSION = 1
DETECTIONS_FORMAT = "weakrel-detections"


class DatasetError(ValueError):
    pass


class SchemaVersionError(DatasetError):
    pass


class BoundsError(DatasetError):
    pass


class MissingFeatureError(DatasetError):
    pass


@dataclass
class DatasetHeader:
    num_classes: int
    num_predicates: int
    class_names: list[str] = field(default_factory=list)
    predicate_names: list[str] = field(default_factory=list)
    visual_mode: str = "flat"
    visual_shape: tuple[int, ...] = (0,)
    feature_file: str | None = None

    def to_dict(self) -> dict:
        if self.visual_mode == "flat":
            visual = {"mode": "flat", "dim": self.visual_shape[0]}
        elif self.visual_mode == "map":
            visual = {"mode": "map", "shape": list(self.visual_shape)}
        else:
            visual = {"mode": "none"}
        d = {
            "num_classes": self.num_classes,
            "num_predicates": self.num_predicates,
            "class_names": list(self.class_names),
            "predicate_names": list(self.predicate_names),
            "visual": visual,
        }
        if self.feature_file:
            d["feature_file"] = self.feature_file
        return d


@dataclass
class Dataset:
    header: DatasetHeader
    records: list[ImageRecord]

    def split(self, name: str | None) -> list[ImageRecord]:
        if name is None:
            return list(self.records)
        return [r for r in self.records if r.split == name]


def _parse_header(h: dict) -> DatasetHeader:
    try:
        C, K = int(h["num_classes"]), int(h["num_predicates"])
        visual = h.get("visual", {"mode": "none"})
        mode = visual["mode"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"header: missing or invalid field ({exc})") from None
    if C < 1 or K < 1:
        raise BoundsError("header: num_classes and num_predicates must be >= 1")
    if mode == "flat":
        shape = (int(visual["dim"]),)
    elif mode == "map":
        shape = tuple(int(s) for s in visual["shape"])
        if len(shape) != 3:
            raise DatasetError("header.visual.shape: expected [channels, height, width]")
    elif mode == "none":
        shape = (0,)
    else:
        raise DatasetError(f"header.visual.mode: unknown mode {mode!r}")
    class_names = list(h.get("class_names") or [str(c) for c in range(C)])
    predicate_names = list(h.get("predicate_names") or [str(k) for k in range(K)])
    if len(class_names) != C or len(predicate_names) != K:
        raise BoundsError("header: name lists must have num_classes / num_predicates entries")
    return DatasetHeader(C, K, class_names, predicate_names, mode, shape, h.get("feature_file"))


class _Sidecar:
    def __init__(self, path: Path | None):
        self.blob = path.read_bytes() if path is not None else None

    def read(self, offset: int) -> np.ndarray:
        if self.blob is None:
            raise KeyError("no feature file")
        if offset < 0 or offset + 4 > len(self.blob):
            raise KeyError(f"offset {offset} outside feature file")
        (n,) = struct.unpack_from("<I", self.blob, offset)
        end = offset + 4 + 4 * n
        if end > len(self.blob):
            raise KeyError(f"feature at offset {offset} truncated")
        return np.frombuffer(self.blob, dtype="<f4", count=n, offset=offset + 4).astype(np.float64)


def _parse_object(o: dict, where: str, W: float, H: float, header: DatasetHeader, sidecar: _Sidecar) -> DetectedObject:
    try:
        box = [float(v) for v in o["bbox"]]
        cls = int(o["class_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: missing or invalid field ({exc})") from None
    if len(box) != 4:
        raise DatasetError(f"{where}.bbox: expected 4 coordinates")
    try:
        bbox = BBox(*box)
    except InvalidBoxError as exc:
        raise BoundsError(f"{where}.bbox: {exc}") from None
    if bbox.x2 > W or bbox.y2 > H:
        raise BoundsError(f"{where}.bbox: {box} exceeds image size {W}x{H}")
    if not 0 <= cls < header.num_classes:
        raise BoundsError(f"{where}.class_id: {cls} outside [0, {header.num_classes})")
    score = float(o.get("score", 1.0))
    if not 0.0 < score <= 1.0:
        raise BoundsError(f"{where}.score: {score} outside (0, 1]")
    visual = None
    if header.visual_mode != "none":
        if "visual" in o:
            visual = np.asarray(o["visual"], dtype=np.float64)
        elif "feature_offset" in o:
            try:
                visual = sidecar.read(int(o["feature_offset"]))
            except KeyError as exc:
                raise MissingFeatureError(f"{where}.feature_offset: {exc.args[0]}") from None
        else:
            raise MissingFeatureError(f"{where}: no visual feature")
        n = int(np.prod(header.visual_shape))
        if visual.size != n:
            raise MissingFeatureError(f"{where}: visual feature has {visual.size} values, header declares {header.visual_shape}")
        visual = visual.reshape(header.visual_shape)
        if not np.all(np.isfinite(visual)):
            raise DatasetError(f"{where}: non-finite visual feature")
    return DetectedObject(bbox, cls, score, visual)


def _parse_image(d: dict, idx: int, header: DatasetHeader, sidecar: _Sidecar) -> ImageRecord:
    image_id = str(d.get("image_id", f"#{idx}"))
    where = f"image {image_id!r}"
    try:
        W, H = float(d["width"]), float(d["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: missing or invalid size ({exc})") from None
    if not (W > 0 and H > 0 and math.isfinite(W) and math.isfinite(H)):
        raise BoundsError(f"{where}: image size must be positive")
    objects = [_parse_object(o, f"{where}: objects[{i}]", W, H, header, sidecar) for i, o in enumerate(d.get("objects", []))]
    detections = None
    if "detections" in d:
        detections = [
            _parse_object(o, f"{where}: detections[{i}]", W, H, header, sidecar) for i, o in enumerate(d["detections"])
        ]
    K = header.num_predicates
    triplets = []
    for t, trip in enumerate(d.get("triplets", [])):
        try:
            s, k, o = (int(v) for v in trip)
        except (TypeError, ValueError):
            raise DatasetError(f"{where}: triplets[{t}] must be [subject, predicate, object]") from None
        if not (0 <= s < len(objects) and 0 <= o < len(objects)) or s == o:
            raise BoundsError(f"{where}: triplets[{t}] object indices ({s}, {o}) invalid for {len(objects)} objects")
        if not 0 <= k < K:
            raise BoundsError(f"{where}: triplets[{t}] predicate {k} outside [0, {K})")
        triplets.append((s, k, o))
    labels = None
    if "predicate_labels" in d:
        labels = np.asarray(d["predicate_labels"], dtype=np.float64)
        if labels.shape != (K,):
            raise BoundsError(f"{where}: predicate_labels has {labels.size} entries, header declares K={K}")
        if not np.all((labels == 0) | (labels == 1)):
            raise DatasetError(f"{where}: predicate_labels must be binary")
    elif "predicates" in d:
        labels = np.zeros(K)
        for k in d["predicates"]:
            if not 0 <= int(k) < K:
                raise BoundsError(f"{where}: predicate label {k} outside [0, {K})")
            labels[int(k)] = 1.0
    return ImageRecord(image_id, W, H, objects, labels, triplets, detections, d.get("split"))


def parse_dataset(doc: dict, base_dir: Path | None = None) -> Dataset:
    if not isinstance(doc, dict):
        raise DatasetError("dataset must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"schema version {version!r} not supported (expected {SCHEMA_VERSION})")
    header = _parse_header(doc.get("header") or {})
    sidecar_path = None
    if header.feature_file:
        sidecar_path = Path(header.feature_file)
        if base_dir is not None and not sidecar_path.is_absolute():
            sidecar_path = base_dir / sidecar_path
        if not sidecar_path.exists():
            raise MissingFeatureError(f"feature file {sidecar_path} not found")
    sidecar = _Sidecar(sidecar_path)
    records = [_parse_image(d, i, header, sidecar) for i, d in enumerate(doc.get("images", []))]
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate image_id values")
    return Dataset(header, records)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None
    return parse_dataset(doc, path.parent)


def _object_dict(o: DetectedObject, feature_offsets: dict | None = None) -> dict:
    d = {"bbox": o.bbox.as_list(), "class_id": int(o.class_id), "score": float(o.score)}
    if o.visual is not None:
        if feature_offsets is not None:
            d["feature_offset"] = feature_offsets[id(o)]
        else:
            d["visual"] = np.asarray(o.visual, dtype=np.float64).ravel().tolist()
    return d


def dataset_to_dict(header: DatasetHeader, records: Sequence[ImageRecord], feature_offsets: dict | None = None) -> dict:
    images = []
    for r in records:
        d = {"image_id": r.image_id, "width": r.width, "height": r.height}
        if r.split is not None:
            d["split"] = r.split
        d["objects"] = [_object_dict(o, feature_offsets) for o in r.objects]
        if r.detections is not None:
            d["detections"] = [_object_dict(o, feature_offsets) for o in r.detections]
        if r.predicate_labels is not None:
            d["predicate_labels"] = [int(v) for v in r.predicate_labels]
        d["triplets"] = [list(t) for t in r.triplets]
        images.append(d)
    return {"schema_version": SCHEMA_VERSION, "header": header.to_dict(), "images": images}


def save_dataset(path, header: DatasetHeader, records: Sequence[ImageRecord], sidecar: bool = False) -> None:
    """Write a dataset; with ``sidecar`` visual features go to ``<path>.features.bin``."""
    path = Path(path)
    offsets = None
    if sidecar:
        blob = bytearray()
        offsets = {}
        for r in records:
            for o in list(r.objects) + list(r.detections or []):
                if o.visual is not None:
                    v = np.asarray(o.visual, dtype="<f4").ravel()
                    offsets[id(o)] = len(blob)
                    blob += struct.pack("<I", v.size) + v.tobytes()
        feat = path.with_name(path.name + ".features.bin")
        feat.write_bytes(bytes(blob))
        header = DatasetHeader(**{**header.__dict__, "feature_file": feat.name})
    path.write_text(json.dumps(dataset_to_dict(header, records, offsets), separators=(",", ":")))


def record_triplets(record: ImageRecord) -> list[Triplet]:
    return [Triplet(sb, sc, k, ob, oc) for sb, sc, k, ob, oc in record.gt_triplets]


# ---------------------------------------------------------------------------
# detection files
# ---------------------------------------------------------------------------


def detections_to_dict(per_image: dict[str, list], objects: str, extra: dict | None = None) -> dict:
    images = []
    for image_id, dets in per_image.items():
        rows = []
        for d in dets:
            rows.append(
                {
                    "subject": d.subject,
                    "predicate": d.predicate,
                    "object": d.object,
                    "subject_box": d.subject_box.as_list(),
                    "subject_class": d.subject_class,
                    "object_box": d.object_box.as_list(),
                    "object_class": d.object_class,
                    "score": d.score,
                    "factors": {
                        "pair_likelihood": d.pair_likelihood,
                        "subject_score": d.subject_score,
                        "object_score": d.object_score,
                        "predicate_score": d.predicate_score,
                        "prior": d.prior,
                    },
                }
            )
        images.append({"image_id": image_id, "detections": rows})
    doc = {"format": DETECTIONS_FORMAT, "version": 1, "objects": objects, "images": images}
    if extra:
        doc.update(extra)
    return doc


def load_detections(path) -> dict[str, list[Triplet]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != DETECTIONS_FORMAT:
        raise DatasetError(f"{path}: not a detections file")
    out = {}
    for img in doc["images"]:
        out[img["image_id"]] = [
            Triplet(
                BBox.of(d["subject_box"]),
                int(d["subject_class"]),
                int(d["predicate"]),
                BBox.of(d["object_box"]),
                int(d["object_class"]),
                float(d["score"]),
            )
            for d in img["detections"]
        ]
    return out
