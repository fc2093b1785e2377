"""Ranking, mAP (full or truncated) and top-k pair accuracy.

Galleries are ranked by ascending distance in the common space; exact ties go
to the lower gallery index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ShapeError


def pairwise_distances(queries, gallery, metric: str = "sqeuclidean") -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    # explicit differences (not the |a|^2+|b|^2-2ab expansion) keep isometries exact-ish
    d = ((q[:, None, :] - g[None, :, :]) ** 2).sum(axis=-1)
    if metric == "euclidean":
        return np.sqrt(d)
    if metric != "sqeuclidean":
        raise ValueError(f"unknown metric {metric!r}")
    return d


@dataclass
class RankedList:
    query: int
    order: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return self.order.size


def rank_gallery(query_emb, gallery_embs, query_index: int = 0, metric="sqeuclidean") -> RankedList:
    gallery_embs = np.atleast_2d(np.asarray(gallery_embs, dtype=np.float64))
    if gallery_embs.shape[0] == 0:
        raise InputError("cannot rank an empty gallery")
    d = pairwise_distances(np.reshape(query_emb, (1, -1)), gallery_embs, metric)[0]
    order = np.argsort(d, kind="stable")
    return RankedList(query_index, order, d[order])


def average_precision(ranked, relevant, truncation=None):
    """AP over the first ``truncation`` ranks, normalised by min(|relevant|, truncation).

    ``ranked`` is a :class:`RankedList` or a sequence of gallery indices.
    Returns None when nothing is relevant (the query is skipped, not scored 0).
    """
    order = ranked.order if isinstance(ranked, RankedList) else np.asarray(ranked)
    relevant = set(int(i) for i in relevant)
    if not relevant:
        return None
    depth = len(order) if truncation is None else min(int(truncation), len(order))
    hits = 0
    total = 0.0
    for r, idx in enumerate(order[:depth], start=1):
        if int(idx) in relevant:
            hits += 1
            total += hits / r
    denom = len(relevant) if truncation is None else min(len(relevant), int(truncation))
    return total / denom


def _as_labels(labels):
    labels = np.asarray(labels)
    return labels.argmax(axis=1) if labels.ndim == 2 else labels


def average_precisions(query_embs, gallery_embs, query_labels, gallery_labels,
                       truncation=None, metric="sqeuclidean"):
    """Per-query AP as an array, NaN for queries with no relevant gallery item."""
    ql, gl = _as_labels(query_labels), _as_labels(gallery_labels)
    q = np.atleast_2d(query_embs)
    g = np.atleast_2d(gallery_embs)
    if ql.shape[0] != q.shape[0] or gl.shape[0] != g.shape[0]:
        raise ShapeError("label count does not match embedding count")
    if g.shape[0] == 0:
        raise InputError("cannot rank an empty gallery")
    d = pairwise_distances(q, g, metric)
    order = np.argsort(d, axis=1, kind="stable")
    rel = (gl[order] == ql[:, None]).astype(np.float64)
    n_rel = rel.sum(axis=1)
    depth = g.shape[0] if truncation is None else min(int(truncation), g.shape[0])
    rel = rel[:, :depth]
    ranks = np.arange(1, depth + 1, dtype=np.float64)
    precision_at_hits = np.cumsum(rel, axis=1) / ranks * rel
    denom = n_rel if truncation is None else np.minimum(n_rel, int(truncation))
    with np.errstate(invalid="ignore", divide="ignore"):
        ap = precision_at_hits.sum(axis=1) / denom
    ap[n_rel == 0] = np.nan
    return ap


def map_score(query_embs, gallery_embs, query_labels, gallery_labels,
              truncation=None, metric="sqeuclidean") -> float:
    ap = average_precisions(query_embs, gallery_embs, query_labels, gallery_labels,
                            truncation, metric)
    scored = ap[~np.isnan(ap)]
    if scored.size == 0:
        raise InputError("no query has a relevant gallery item; mAP undefined")
    return float(scored.mean())


def partner_ranks(query_embs, gallery_embs, pair_ids, metric="sqeuclidean") -> np.ndarray:
    """Zero-based rank of each query's ground-truth partner under the tie-break rule."""
    d = pairwise_distances(query_embs, gallery_embs, metric)
    pair_ids = np.asarray(pair_ids, dtype=np.int64)
    if pair_ids.shape[0] != d.shape[0]:
        raise ShapeError("pair_ids must have one entry per query")
    if np.unique(pair_ids).size != pair_ids.size:
        raise InputError("pair_ids must be a bijection onto gallery items")
    rows = np.arange(d.shape[0])
    dp = d[rows, pair_ids][:, None]
    before = (d < dp) | ((d == dp) & (np.arange(d.shape[1])[None, :] < pair_ids[:, None]))
    return before.sum(axis=1)


def topk_pair_accuracy(query_embs, gallery_embs, pair_ids, k, metric="sqeuclidean") -> float:
    n_gallery = np.atleast_2d(gallery_embs).shape[0]
    if not 1 <= int(k) <= n_gallery:
        raise InputError(f"k must lie in [1, {n_gallery}], got {k}")
    return float((partner_ranks(query_embs, gallery_embs, pair_ids, metric) < k).mean())


@dataclass
class RetrievalReport:
    map_img2txt: float
    map_txt2img: float
    map_avg: float
    truncation: int | None
    topk: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "truncation": self.truncation,
            "map": {
                "img2txt": self.map_img2txt,
                "txt2img": self.map_txt2img,
                "avg": self.map_avg,
            },
            "topk": {
                str(k): {"img2txt": a, "txt2img": b, "avg": c}
                for k, (a, b, c) in sorted(self.topk.items())
            },
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return dumps_fixed(self.to_dict())

    def table(self) -> str:
        mode = "full" if self.truncation is None else f"top-{self.truncation}"
        lines = [
            f"mAP ({mode})   Img2txt  Txt2Img  Avg.",
            f"               {self.map_img2txt:.3f}    {self.map_txt2img:.3f}    {self.map_avg:.3f}",
            "top-k acc      Img2txt  Txt2Img  Avg.",
        ]
        for k, (a, b, c) in sorted(self.topk.items()):
            lines.append(f"  k={k:<10d} {a:.3f}    {b:.3f}    {c:.3f}")
        return "\n".join(lines)


def dumps_fixed(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with insertion-ordered keys and every float written as 6-decimal fixed point."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f"{pad}{json.dumps(str(k))}: {dumps_fixed(v, indent, _level + 1)}"
            for k, v in obj.items()
        ]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(dumps_fixed(v, indent, _level + 1) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError("refusing to serialise a non-finite metric")
        return f"{float(obj):.6f}"
    return json.dumps(obj)


def retrieval_report(s_v, s_t, labels, ks=(1, 5, 10, 50), truncation=50,
                     metric="sqeuclidean", metadata=None) -> RetrievalReport:
    """Both directions over paired test embeddings (row i of s_v pairs with row i of s_t)."""
    n = s_v.shape[0]
    i2t = map_score(s_v, s_t, labels, labels, truncation, metric)
    t2i = map_score(s_t, s_v, labels, labels, truncation, metric)
    pairs = np.arange(n)
    r_i2t = partner_ranks(s_v, s_t, pairs, metric)
    r_t2i = partner_ranks(s_t, s_v, pairs, metric)
    topk = {}
    for k in ks:
        k = int(k)
        if not 1 <= k <= n:
            raise InputError(f"k must lie in [1, {n}], got {k}")
        a = float((r_i2t < k).mean())
        b = float((r_t2i < k).mean())
        topk[k] = (a, b, (a + b) / 2.0)
    meta = {
        "n_test": n,
        "metric": metric,
        "ap_denominator": "min(|relevant|, truncation)" if truncation else "|relevant|",
    }
    meta.update(metadata or {})
    return RetrievalReport(i2t, t2i, (i2t + t2i) / 2.0, truncation, topk, meta)


def evaluate(gen, dataset, ks=(1, 5, 10, 50), truncation=50, metric="sqeuclidean",
             metadata=None) -> RetrievalReport:
    """Project the test split through ``gen`` and score both retrieval directions."""
    idx = dataset.test_idx
    s_v = gen.g_v.forward(dataset.V[idx])
    s_t = gen.g_t.forward(dataset.T[idx])
    return retrieval_report(s_v, s_t, dataset.labels[idx], ks, truncation, metric, metadata)
