"""Command line interface: synth, train, prior-build, detect, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import (
    Dataset,
    DatasetError,
    detections_to_dict,
    load_dataset,
    load_detections,
    record_triplets,
    save_dataset,
)
from .explain import NORMS, ExplainConfig, detect_batch
from .graph import build_graph, filter_detections
from .metrics import (
    CLASS_KEYS,
    MATCH_VARIANTS,
    MatchMode,
    cap_per_image,
    interpolated_map,
    recall_at_x,
    zero_shot_filter,
)
from .model import (
    ModelConfig,
    TrainConfig,
    check_compatible,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .prior import PriorTable, build_frequency_prior, sample_class_triplets
from .synth import SynthConfig, generate_synthetic

logger = logging.getLogger("weakrel")


def _records(ds: Dataset, split: str | None, fallback_all: bool = True):
    if split is None:
        return ds.records
    recs = ds.split(split)
    if not recs and fallback_all and all(r.split is None for r in ds.records):
        return ds.records
    return recs


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    ds = generate_synthetic(cfg)
    save_dataset(args.out, ds.header, ds.records, sidecar=args.sidecar)
    print(f"wrote {len(ds.records)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    records = _records(ds, args.split)
    options = _read_json(args.config)
    if args.seed is not None:
        options["seed"] = args.seed
    cfg = TrainConfig.from_dict(options)
    h = ds.header
    model_cfg = ModelConfig(
        num_predicates=h.num_predicates,
        visual_mode=h.visual_mode,
        visual_dim=h.visual_shape[0] if h.visual_mode == "flat" else 0,
        visual_map=tuple(h.visual_shape) if h.visual_mode == "map" else (256, 7, 7),
        num_classes=h.num_classes,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    with log_path.open("w") as log_file:

        def on_epoch(entry):
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            log_file.flush()
            print(f"epoch {entry['epoch']:3d}  loss {entry['loss']:.4f}  val recall@5 {entry['val_recall_at_5']}")

        params, _ = train(records, cfg, model_cfg, on_epoch)
    save_checkpoint(params, out / "checkpoint.json")
    print(f"wrote {out / 'checkpoint.json'}")
    return 0


def cmd_prior_build(args) -> int:
    ds = load_dataset(args.data)
    records = _records(ds, args.split)
    if args.prior_from_file:
        # diagnostic upper bound only: counts every triplet of another file, e.g. test annotations
        source = load_dataset(args.prior_from_file)
        if (source.header.num_classes, source.header.num_predicates) != (ds.header.num_classes, ds.header.num_predicates):
            raise ValueError("--prior-from-file vocabulary differs from --data")
        records = source.records
        print("warning: prior built from --prior-from-file; do not report results computed with it as held-out", file=sys.stderr)
    n, triplets = sample_class_triplets(records, args.fraction, args.seed)
    prior = build_frequency_prior(triplets, ds.header.num_predicates, ds.header.num_classes)
    prior.save(args.out)
    print(f"wrote prior from {n} images ({len(triplets)} triplets) to {args.out}")
    return 0


def _overlay(record, objects, dets, class_names, predicate_names, top: int = 10) -> dict:
    return {
        "image_id": record.image_id,
        "width": record.width,
        "height": record.height,
        "boxes": [
            {"id": i, "bbox": o.bbox.as_list(), "class": class_names[o.class_id], "score": o.score}
            for i, o in enumerate(objects)
        ],
        "triplets": [
            {
                "rank": r,
                "label": f"{class_names[d.subject_class]} {predicate_names[d.predicate]} {class_names[d.object_class]}",
                "subject": {"index": d.subject, "bbox": d.subject_box.as_list(), "color": "red"},
                "object": {"index": d.object, "bbox": d.object_box.as_list(), "color": "blue"},
                "score": d.score,
            }
            for r, d in enumerate(dets[:top])
        ],
    }


def cmd_detect(args) -> int:
    ds = load_dataset(args.data)
    params = load_checkpoint(args.checkpoint)
    h = ds.header
    check_compatible(params, h.num_predicates, h.visual_mode, h.visual_shape, h.num_classes)
    prior = PriorTable.load(args.prior) if args.prior else PriorTable.uniform(h.num_predicates, h.num_classes)
    if (prior.num_predicates, prior.num_classes) != (h.num_predicates, h.num_classes):
        raise ValueError(
            f"prior covers K={prior.num_predicates}, C={prior.num_classes}; dataset declares K={h.num_predicates}, C={h.num_classes}"
        )
    config = ExplainConfig(top_n=args.top_n, norm=args.norm, cap=args.cap, explain_logit=args.logit)
    records = _records(ds, args.split)
    cfg = params.config

    object_lists = []
    for r in records:
        if args.objects == "ground-truth":
            objs = [type(o)(o.bbox, o.class_id, 1.0, o.visual) for o in r.objects]
        else:
            objs = filter_detections(r.detections or [], args.score_threshold)
        object_lists.append(objs)

    per_image = {}
    overlays = []
    for start in range(0, len(records), args.batch_size):
        chunk = range(start, min(start + args.batch_size, len(records)))
        graphs = [
            build_graph(object_lists[i], records[i].width, records[i].height, cfg.subject_classes, cfg.visual_shape)
            for i in chunk
        ]
        for i, dets in zip(chunk, detect_batch(params, graphs, prior, config)):
            per_image[records[i].image_id] = dets
            if args.report:
                overlays.append(_overlay(records[i], object_lists[i], dets, h.class_names, h.predicate_names))

    doc = detections_to_dict(
        per_image,
        args.objects,
        {"explain": {"top_n": args.top_n, "norm": args.norm, "cap": args.cap, "logit": args.logit}},
    )
    Path(args.out).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    if args.report:
        Path(args.report).write_text(json.dumps({"images": overlays}, sort_keys=True, indent=1))
    n = sum(len(v) for v in per_image.values())
    print(f"wrote {n} detections for {len(per_image)} images to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.data)
    dets = load_detections(args.detections)
    records = _records(ds, args.split)
    gts = {r.image_id: record_triplets(r) for r in records}
    if args.zero_shot_against:
        train_ds = load_dataset(args.zero_shot_against)
        seen = {t.category for r in _records(train_ds, "train") for t in record_triplets(r)}
        gts = {k: zero_shot_filter(v, seen) for k, v in gts.items()}
    dets = {k: v for k, v in dets.items() if k in gts}
    if args.distractors:
        for image_id, extra in load_detections(args.distractors).items():
            if image_id in gts:
                raise DatasetError(f"distractor image {image_id!r} is also an evaluation image")
            dets[image_id] = extra
    dets = cap_per_image(dets, args.cap)

    mode = MatchMode(args.mode, args.iou)
    report = interpolated_map(dets, gts, mode, args.map_class_key)
    for x in args.recall_at:
        report.recall[str(x)] = recall_at_x(dets, gts, x, mode)
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(report.table())
    return 0


# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("recall cut-offs must be positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakrel", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-relation dataset")
    p.add_argument("--config", help="JSON file with SynthConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sidecar", action="store_true", help="store visual features in a binary sidecar file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the predicate classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prior-build", help="frequency prior from a fraction of the annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--prior-from-file", help="count triplets of this dataset file instead (peeks at its annotations)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prior_build)

    p = sub.add_parser("detect", help="explanation-based relationship detection")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prior", help="prior JSON; uniform when omitted")
    p.add_argument("--objects", choices=("detected", "ground-truth"), default="detected")
    p.add_argument("--score-threshold", type=float, default=0.3)
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--norm", choices=NORMS, default="l1")
    p.add_argument("--cap", type=int, default=100)
    p.add_argument("--logit", action="store_true", help="explain pre-sigmoid scores")
    p.add_argument("--split", default="test")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--report", help="write a per-image overlay JSON (boxes and top triplets)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="recall@x and 11-point mAP")
    p.add_argument("--detections", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MATCH_VARIANTS, default="relationship")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--recall-at", type=_int_list, default=[50, 100])
    p.add_argument("--map-class-key", choices=CLASS_KEYS, default="triplet")
    p.add_argument("--zero-shot-against", help="training dataset; keep only unseen ground-truth triplets")
    p.add_argument("--distractors", help="detections on extra images without ground truth")
    p.add_argument("--cap", type=int, help="keep at most this many detections per image")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, IndexError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"weakrel: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
