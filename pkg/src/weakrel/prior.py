"""Relationship prior P(subject class, object class | predicate).

Two modes: ``uniform`` (a constant ``1/C^2``) and ``frequency``, estimated by
counting annotated triplets. Predicates never observed while counting fall
back to a uniform row instead of a zero row.

The human-to-object structural prior is not represented here; it is a
restriction on graph edges (see ``graph.build_graph``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PRIOR_FORMAT = "weakrel-prior"


@dataclass(frozen=True)
class PriorTable:
    mode: str
    num_predicates: int
    num_classes: int
    table: np.ndarray | None = None  # (K, C, C), frequency mode only
    observed: np.ndarray | None = None  # (K,) bool

    def __post_init__(self):
        if self.mode not in ("uniform", "frequency"):
            raise ValueError(f"unknown prior mode {self.mode!r}")
        if self.mode == "frequency":
            K, C = self.num_predicates, self.num_classes
            if self.table is None or self.table.shape != (K, C, C):
                raise ValueError(f"frequency prior needs a ({K}, {C}, {C}) table")

    @classmethod
    def uniform(cls, num_predicates: int, num_classes: int) -> "PriorTable":
        return cls("uniform", num_predicates, num_classes)

    def lookup(self, c_i: int, c_j: int, k: int) -> float:
        """Prior weight of subject class ``c_i`` and object class ``c_j`` for predicate ``k``."""
        C, K = self.num_classes, self.num_predicates
        if not (0 <= c_i < C and 0 <= c_j < C):
            raise IndexError(f"class ids ({c_i}, {c_j}) out of range [0, {C})")
        if not 0 <= k < K:
            raise IndexError(f"predicate id {k} out of range [0, {K})")
        if self.mode == "uniform" or not self.observed[k]:
            return 1.0 / (C * C)
        return float(self.table[k, c_i, c_j])

    def to_json(self) -> str:
        doc = {"format": PRIOR_FORMAT, "mode": self.mode, "K": self.num_predicates, "C": self.num_classes}
        if self.mode == "frequency":
            k, i, j = np.nonzero(self.table)
            doc["entries"] = [[int(a), int(b), int(c), float(self.table[a, b, c])] for a, b, c in zip(k, i, j)]
            doc["observed"] = [int(x) for x in np.flatnonzero(self.observed)]
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PriorTable":
        doc = json.loads(text)
        if doc.get("format") != PRIOR_FORMAT:
            raise ValueError("not a prior file")
        K, C = int(doc["K"]), int(doc["C"])
        if doc["mode"] == "uniform":
            return cls.uniform(K, C)
        table = np.zeros((K, C, C))
        for k, i, j, v in doc["entries"]:
            table[int(k), int(i), int(j)] = float(v)
        observed = np.zeros(K, dtype=bool)
        observed[[int(k) for k in doc.get("observed", [])]] = True
        return cls("frequency", K, C, table, observed)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "PriorTable":
        return cls.from_json(Path(path).read_text())


def build_frequency_prior(
    triplets: Iterable[tuple[int, int, int]], num_predicates: int, num_classes: int
) -> PriorTable:
    """Normalized counts ``count(c_subj, k, c_obj) / count(k)`` from class-level triplets."""
    K, C = num_predicates, num_classes
    counts = np.zeros((K, C, C))
    for c_s, k, c_o in triplets:
        if not (0 <= k < K and 0 <= c_s < C and 0 <= c_o < C):
            raise IndexError(f"triplet ({c_s}, {k}, {c_o}) out of vocabulary range")
        counts[k, c_s, c_o] += 1
    totals = counts.sum(axis=(1, 2))
    observed = totals > 0
    table = np.zeros_like(counts)
    table[observed] = counts[observed] / totals[observed, None, None]
    return PriorTable("frequency", K, C, table, observed)


def sample_class_triplets(records, fraction: float = 1.0, seed: int = 0) -> tuple[int, list[tuple[int, int, int]]]:
    """Class-level triplets of a seeded random ``fraction`` of ``records``.

    Returns the number of images used and their ``(c_subj, k, c_obj)`` triplets.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = int(round(fraction * len(records)))
    chosen = np.sort(np.random.default_rng(seed).permutation(len(records))[:n])
    triplets = [
        (r.objects[s].class_id, k, r.objects[o].class_id) for i in chosen for r in [records[i]] for s, k, o in r.triplets
    ]
    return n, triplets
