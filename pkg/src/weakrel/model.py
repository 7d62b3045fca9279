"""Single-layer relational graph network used as an image-level predicate classifier.

Every node is encoded from its visual and spatial features, every directed
edge from its pairwise attributes; a relational layer combines
``[node_i ; edge_ij ; node_j]`` for every edge, the edge vectors are pooled
over the graph and a linear + sigmoid readout yields one probability per
predicate.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .graph import GraphBatch, ImageGraph, ImageRecord, build_graph

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "weakrel-checkpoint"
CHECKPOINT_VERSION = 1

INPUT_SPATIAL = "input.node_spatial"
INPUT_VISUAL = "input.node_visual"
INPUT_EDGE = "input.edge_attr"


class CheckpointError(ValueError):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_predicates: int
    hidden: int = 1024
    visual_mode: str = "flat"  # none | flat | map
    visual_dim: int = 0
    visual_map: tuple[int, int, int] = (256, 7, 7)
    conv_layers: int = 2
    conv_channels: int = 256
    pooling: str = "max"
    readout_bias: bool = True
    subject_classes: tuple[int, ...] | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if self.num_predicates < 1:
            raise ValueError("num_predicates must be >= 1")
        if self.visual_mode not in ("none", "flat", "map"):
            raise ValueError(f"unknown visual mode {self.visual_mode!r}")
        if self.pooling not in ad.POOL_MODES:
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def node_dim(self) -> int:
        return self.hidden if self.visual_mode == "none" else 2 * self.hidden

    @property
    def visual_shape(self) -> tuple[int, ...]:
        if self.visual_mode == "flat":
            return (self.visual_dim,)
        if self.visual_mode == "map":
            return tuple(self.visual_map)
        return (0,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["visual_map"] = list(self.visual_map)
        d["subject_classes"] = None if self.subject_classes is None else list(self.subject_classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["visual_map"] = tuple(d.get("visual_map", (256, 7, 7)))
        if d.get("subject_classes") is not None:
            d["subject_classes"] = tuple(int(c) for c in d["subject_classes"])
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.visual_mode == "map":
        c_in, mh, mw = cfg.visual_map
        for layer in range(cfg.conv_layers):
            shapes[f"node.visual.conv{layer}.kernels"] = (cfg.conv_channels, c_in, 3, 3)
            shapes[f"node.visual.conv{layer}.bias"] = (cfg.conv_channels,)
            c_in = cfg.conv_channels
        shapes["node.visual.W"] = (h, c_in * mh * mw)
        shapes["node.visual.b"] = (h,)
    elif cfg.visual_mode == "flat":
        shapes["node.visual.W"] = (h, cfg.visual_dim)
        shapes["node.visual.b"] = (h,)
    shapes["node.spatial.W"] = (h, 3)
    shapes["node.spatial.b"] = (h,)
    shapes["edge.W"] = (h, 5)
    shapes["edge.b"] = (h,)
    shapes["relation.W"] = (h, 2 * cfg.node_dim + h)
    shapes["relation.b"] = (h,)
    shapes["readout.W"] = (cfg.num_predicates, h)
    if cfg.readout_bias:
        shapes["readout.b"] = (cfg.num_predicates,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    optimizer: ad.AdamState | None = None

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int | np.random.Generator = 0) -> "ModelParams":
        """Glorot-uniform weights, zero biases."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        weights = {}
        for name, shape in parameter_shapes(cfg).items():
            if name.endswith(".b") or name.endswith(".bias"):
                weights[name] = np.zeros(shape)
            else:
                weights[name] = ad.glorot_uniform(rng, shape)
        return cls(cfg, weights)

    def check(self) -> None:
        expected = parameter_shapes(self.config)
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise CheckpointShapeError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.weights[name].shape != shape:
                raise CheckpointShapeError(
                    f"parameter {name!r} has shape {self.weights[name].shape}, expected {shape}"
                )
            if not np.all(np.isfinite(self.weights[name])):
                raise CheckpointShapeError(f"parameter {name!r} has non-finite entries")


@dataclass
class Forward:
    tape: ad.Tape
    logits: ad.Var  # (G, K)
    y: ad.Var  # (G, K)
    batch: GraphBatch


def _as_batch(graphs, cfg: ModelConfig) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, ImageGraph):
        graphs = [graphs]
    return GraphBatch.from_graphs(list(graphs), visual_shape=cfg.visual_shape)


def forward(params: ModelParams, graphs, tape: ad.Tape | None = None) -> Forward:
    """Run the classifier on one graph, a list of graphs or a prepared batch.

    Raw node and edge inputs are registered as differentiable leaves next to
    the parameters, so gradients with respect to them are available after
    :func:`autodiff.backward`.
    """
    cfg = params.config
    batch = _as_batch(graphs, cfg)
    tape = ad.Tape() if tape is None else tape
    if batch.visual.shape[1:] != cfg.visual_shape and batch.spatial.shape[0]:
        raise ad.ShapeError(f"visual features have shape {batch.visual.shape[1:]}, model expects {cfg.visual_shape}")
    w = {name: tape.leaf(name, value) for name, value in params.weights.items()}
    ns = tape.leaf(INPUT_SPATIAL, batch.spatial)
    nv = tape.leaf(INPUT_VISUAL, batch.visual)
    ea = tape.leaf(INPUT_EDGE, batch.edge_attr)

    parts = []
    if cfg.visual_mode == "map":
        h = nv
        for layer in range(cfg.conv_layers):
            h = ad.relu(ad.conv3x3(h, w[f"node.visual.conv{layer}.kernels"], w[f"node.visual.conv{layer}.bias"]))
        h = ad.reshape(h, (h.shape[0], -1))
        parts.append(ad.relu(ad.linear(h, w["node.visual.W"], w["node.visual.b"])))
    elif cfg.visual_mode == "flat":
        parts.append(ad.relu(ad.linear(nv, w["node.visual.W"], w["node.visual.b"])))
    parts.append(ad.relu(ad.linear(ns, w["node.spatial.W"], w["node.spatial.b"])))
    nodes = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    edges = ad.relu(ad.linear(ea, w["edge.W"], w["edge.b"]))
    pair = ad.concat([ad.gather_rows(nodes, batch.src), edges, ad.gather_rows(nodes, batch.dst)], axis=1)
    rel = ad.relu(ad.linear(pair, w["relation.W"], w["relation.b"]))
    pooled = ad.segment_pool(rel, batch.edge_counts, cfg.pooling)
    logits = ad.linear(pooled, w["readout.W"], w.get("readout.b"))
    return Forward(tape, logits, ad.sigmoid(logits), batch)


def predict(params: ModelParams, graphs) -> np.ndarray:
    """Predicate probabilities, shape (G, K)."""
    return forward(params, graphs).y.data


def loss(y: ad.Var, labels) -> ad.Var:
    """Mean over graphs of the summed per-predicate binary cross-entropy."""
    labels = np.asarray(labels, dtype=np.float64)
    if y.data.ndim == 1:
        return ad.bce_loss(y, labels)
    return ad.scale(ad.bce_loss(y, labels), 1.0 / y.shape[0])


def recall_at_k(y, p, k: int = 5) -> float:
    """Fraction of positive labels found among the ``k`` highest predictions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p)
    positives = np.flatnonzero(p)
    if positives.size == 0:
        return 1.0
    top = np.argsort(-y, kind="stable")[:k]
    return float(np.isin(positives, top).sum() / positives.size)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 18
    batch_size: int = 128
    seed: int = 0
    val_fraction: float = 0.15
    pooling: str = "max"
    hidden: int = 1024
    conv_layers: int = 2
    conv_channels: int = 256
    readout_bias: bool = True
    subject_classes: list[int] | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in [0, 0.5]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def split_train_val(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def records_to_graphs(records: Sequence[ImageRecord], cfg: ModelConfig) -> list[ImageGraph]:
    return [
        build_graph(r.objects, r.width, r.height, cfg.subject_classes, cfg.visual_shape) for r in records
    ]


def train(
    records: Sequence[ImageRecord],
    config: TrainConfig,
    model_config: ModelConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Fit the classifier on image-level predicate labels of ground-truth object graphs.

    ``model_config`` supplies the dataset-dependent dimensions; the
    architectural options of ``config`` override it. Returns the final
    parameters and one log entry per epoch.
    """
    if not records:
        raise ValueError("cannot train on an empty dataset")
    for r in records:
        if r.predicate_labels is None:
            raise ValueError(f"image {r.image_id!r} has no predicate labels")
        if len(r.predicate_labels) != model_config.num_predicates:
            raise ValueError(
                f"image {r.image_id!r} has {len(r.predicate_labels)} predicate labels, model predicts {model_config.num_predicates}"
            )
    cfg = ModelConfig(
        **{
            **model_config.to_dict(),
            "hidden": config.hidden,
            "pooling": config.pooling,
            "conv_layers": config.conv_layers,
            "conv_channels": config.conv_channels,
            "readout_bias": config.readout_bias,
            "visual_map": tuple(model_config.visual_map),
            "subject_classes": None if config.subject_classes is None else tuple(config.subject_classes),
        }
    )
    rng = np.random.default_rng(config.seed)
    params = ModelParams.initialize(cfg, rng)
    state = ad.AdamState.zeros_like(params.weights)
    train_idx, val_idx = split_train_val(len(records), config.val_fraction, rng)
    graphs = records_to_graphs(records, cfg)
    labels = np.stack([np.asarray(r.predicate_labels, dtype=np.float64) for r in records])
    val_batch = GraphBatch.from_graphs([graphs[i] for i in val_idx], cfg.visual_shape) if len(val_idx) else None

    log = []
    weights = params.weights
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            fwd = forward(ModelParams(cfg, weights), [graphs[i] for i in idx])
            L = loss(fwd.y, labels[idx])
            grads = ad.backward(fwd.tape, L)
            weights, state = ad.adam_step(
                weights, {n: grads[n] for n in weights}, state, config.lr, config.weight_decay
            )
            losses.append(float(L.data))
        entry = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else math.nan}
        if val_batch is not None:
            y = forward(ModelParams(cfg, weights), val_batch).y.data
            entry["val_recall_at_5"] = float(np.mean([recall_at_k(y[g], labels[i], 5) for g, i in enumerate(val_idx)]))
        else:
            entry["val_recall_at_5"] = None
        logger.info("epoch %d loss %.5f val recall@5 %s", epoch, entry["loss"], entry["val_recall_at_5"])
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return ModelParams(cfg, weights, state), log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _decode_array(d: dict) -> np.ndarray:
    shape = tuple(int(s) for s in d["shape"])
    data = np.array(d["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise CheckpointShapeError(f"array of shape {shape} holds {data.size} values")
    return data.reshape(shape)


def checkpoint_json(params: ModelParams) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": params.config.to_dict(),
        "weights": {k: _encode_array(v) for k, v in sorted(params.weights.items())},
    }
    if params.optimizer is not None:
        opt = params.optimizer
        doc["optimizer"] = {
            "t": opt.t,
            "m": {k: _encode_array(v) for k, v in sorted(opt.m.items())},
            "v": {k: _encode_array(v) for k, v in sorted(opt.v.items())},
        }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_text(checkpoint_json(params))


def load_checkpoint(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedCheckpointError(f"{path}: not a valid checkpoint file ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise MalformedCheckpointError(f"{path}: missing checkpoint format marker")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {doc.get('version')!r}, this build reads version {CHECKPOINT_VERSION}"
        )
    try:
        cfg = ModelConfig.from_dict(doc["model"])
        weights = {k: _decode_array(v) for k, v in doc["weights"].items()}
        optimizer = None
        if "optimizer" in doc:
            o = doc["optimizer"]
            optimizer = ad.AdamState(
                {k: _decode_array(v) for k, v in o["m"].items()},
                {k: _decode_array(v) for k, v in o["v"].items()},
                int(o["t"]),
            )
    except (KeyError, TypeError) as exc:
        raise MalformedCheckpointError(f"{path}: incomplete checkpoint ({exc})") from None
    params = ModelParams(cfg, weights, optimizer)
    params.check()
    return params


def check_compatible(params: ModelParams, num_predicates: int, visual_mode: str, visual_shape, num_classes=None):
    """Raise :class:`CheckpointShapeError` if a checkpoint cannot run on a dataset."""
    cfg = params.config
    if cfg.num_predicates != num_predicates:
        raise CheckpointShapeError(f"checkpoint predicts {cfg.num_predicates} predicates, dataset declares {num_predicates}")
    if cfg.visual_mode != visual_mode or tuple(cfg.visual_shape) != tuple(visual_shape):
        raise CheckpointShapeError(
            f"checkpoint expects {cfg.visual_mode} visual features {cfg.visual_shape}, "
            f"dataset provides {visual_mode} {tuple(visual_shape)}"
        )
    if num_classes is not None and cfg.num_classes is not None and cfg.num_classes != num_classes:
        raise CheckpointShapeError(f"checkpoint trained with {cfg.num_classes} classes, dataset declares {num_classes}")
