"""Image-branch retrieval: ranking by Euclidean distance and top-k metrics.

Average precision at k normalizes by ``min(R, k)`` where R is the number of
relevant gallery items for the query; queries with R = 0 are excluded from
the mean and counted. Metric arithmetic is exact (``fractions.Fraction``) and
only converted to float for reporting.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import jsonschema
import numpy as np

from .data import Dataset, SplitAssignment
from .model import AdapterModel
from .numerics import ShapeError
from .prompts import ConfigError


class ProtocolEvalError(ValueError):
    """Query or gallery set is empty."""


def embed_set(model: AdapterModel, dataset: Dataset, indices, mode: str, workers: int = 1) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    return model.embed(dataset.tokens[idx], mode, dataset.class_ids[idx], dataset.domain_ids[idx],
                       workers=workers)


def distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = gallery.astype(np.float64) - query.astype(np.float64)
    return np.sqrt((diff * diff).sum(axis=1))


def rank(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance; ties keep lower index first."""
    if len(gallery) == 0:
        raise ShapeError("rank: empty gallery")
    return np.argsort(distances(query, gallery), kind="stable")


def average_precision(relevance, k: int | None = None) -> Fraction | None:
    """AP@k for one ranked 0/1 relevance list (full list gives R); None when R = 0."""
    rel = [bool(r) for r in relevance]
    R = sum(rel)
    if R == 0:
        return None
    k = len(rel) if k is None else k
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    hits, total = 0, Fraction(0)
    for i, r in enumerate(rel[:k], start=1):
        if r:
            hits += 1
            total += Fraction(hits, i)
    return total / min(R, k)


def precision_at(relevance, k: int) -> Fraction:
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    return Fraction(sum(bool(r) for r in list(relevance)[:k]), k)


def mean_average_precision(rankings, relevance, k: int | None = None) -> dict:
    """mAP@k and Prec@k over queries.

    ``rankings[q]`` orders gallery indices; ``relevance[q][j]`` marks gallery
    item j relevant to query q. ``k=None`` means the full gallery.
    """
    if k is not None and k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    aps, precs, excluded = [], [], 0
    for order, rel in zip(rankings, relevance):
        ranked = np.asarray(rel, dtype=bool)[np.asarray(order)]
        kk = len(ranked) if k is None else k
        ap = average_precision(ranked, kk)
        if ap is None:
            excluded += 1
            continue
        aps.append(ap)
        precs.append(precision_at(ranked, kk))
    if not aps:
        return {"map": 0.0, "prec": 0.0, "excluded": excluded, "map_exact": Fraction(0),
                "prec_exact": Fraction(0)}
    m, p = sum(aps) / len(aps), sum(precs) / len(precs)
    return {"map": float(m), "prec": float(p), "excluded": excluded, "map_exact": m, "prec_exact": p}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["protocol", "gallery_mode", "mode", "metrics", "n_queries", "n_gallery",
                 "excluded_queries", "rankings", "config", "checkpoint_sha256"],
    "additionalProperties": False,
    "properties": {
        "protocol": {"enum": ["UCDR", "UcCDR", "UdCDR"]},
        "gallery_mode": {"enum": ["unseen_only", "seen_plus_unseen"]},
        "mode": {"enum": ["none", "phase1", "tpg"]},
        "metrics": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "n_queries": {"type": "integer", "minimum": 1},
        "n_gallery": {"type": "integer", "minimum": 1},
        "excluded_queries": {"type": "integer", "minimum": 0},
        "rankings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["query_id", "gallery_ids", "distances"],
                "additionalProperties": False,
                "properties": {
                    "query_id": {"type": "integer"},
                    "gallery_ids": {"type": "array", "items": {"type": "integer"}},
                    "distances": {"type": "array", "items": {"type": "number", "minimum": 0}},
                },
            },
        },
        "config": {"type": "object"},
        "checkpoint_sha256": {"type": ["string", "null"]},
    },
}


@dataclass
class RetrievalReport:
    protocol: str
    gallery_mode: str
    mode: str
    metrics: dict[str, float]
    n_queries: int
    n_gallery: int
    excluded_queries: int
    rankings: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint_sha256: str | None = None

    def to_json(self) -> dict:
        obj = {
            "protocol": self.protocol, "gallery_mode": self.gallery_mode, "mode": self.mode,
            "metrics": dict(sorted(self.metrics.items())), "n_queries": self.n_queries,
            "n_gallery": self.n_gallery, "excluded_queries": self.excluded_queries,
            "rankings": self.rankings, "config": self.config,
            "checkpoint_sha256": self.checkpoint_sha256,
        }
        jsonschema.validate(obj, REPORT_SCHEMA)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "RetrievalReport":
        jsonschema.validate(obj, REPORT_SCHEMA)
        return cls(**obj)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def write_rankings_csv(self, path) -> None:
        lines = ["query_id,rank,gallery_id,distance"]
        for r in self.rankings:
            for i, (g, d) in enumerate(zip(r["gallery_ids"], r["distances"]), start=1):
                lines.append(f"{r['query_id']},{i},{g},{d!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sha256_bytes(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def retrieve(query_emb: np.ndarray, gallery_emb: np.ndarray):
    """Full rankings and the matching sorted distances for every query."""
    rankings, dists = [], []
    for q in query_emb:
        d = distances(q, gallery_emb)
        order = np.argsort(d, kind="stable")
        rankings.append(order)
        dists.append(d[order])
    return rankings, dists


def evaluate(dataset: Dataset, split: SplitAssignment, model: AdapterModel, mode: str = "tpg",
             metric_ks=(10, 50), query_tag: str = "test-query", gallery_tag: str = "test-gallery",
             keep_top: int | None = None, config: dict | None = None,
             checkpoint_sha256: str | None = None, workers: int = 1) -> RetrievalReport:
    q_idx, g_idx = split.indices(query_tag), split.indices(gallery_tag)
    if len(q_idx) == 0 or len(g_idx) == 0:
        raise ProtocolEvalError(f"empty {'query' if len(q_idx) == 0 else 'gallery'} set "
                                f"for tags {query_tag}/{gallery_tag}")
    q_emb = embed_set(model, dataset, q_idx, mode, workers)
    g_emb = embed_set(model, dataset, g_idx, mode, workers)
    rankings, dists = retrieve(q_emb, g_emb)
    relevance = dataset.class_ids[q_idx][:, None] == dataset.class_ids[g_idx][None, :]
    metrics, excluded = {}, 0
    for k in metric_ks:
        res = mean_average_precision(rankings, relevance, k)
        metrics[f"mAP@{k}"] = res["map"]
        metrics[f"Prec@{k}"] = res["prec"]
        excluded = res["excluded"]
    res = mean_average_precision(rankings, relevance, None)
    metrics["mAP@all"] = res["map"]
    top = keep_top if keep_top is not None else max(metric_ks)
    ranked = [{"query_id": int(q_idx[i]), "gallery_ids": [int(g_idx[j]) for j in order[:top]],
               "distances": [float(x) for x in d[:top]]}
              for i, (order, d) in enumerate(zip(rankings, dists))]
    return RetrievalReport(split.protocol, split.gallery_mode, mode, metrics, len(q_idx), len(g_idx),
                           excluded, ranked, config or {}, checkpoint_sha256)


def validation_map(dataset: Dataset, split: SplitAssignment, model: AdapterModel, mode: str, k: int) -> float:
    q_idx, g_idx = split.indices("validation-query"), split.indices("validation-gallery")
    rankings, _ = retrieve(embed_set(model, dataset, q_idx, mode), embed_set(model, dataset, g_idx, mode))
    relevance = dataset.class_ids[q_idx][:, None] == dataset.class_ids[g_idx][None, :]
    return mean_average_precision(rankings, relevance, k)["map"]
