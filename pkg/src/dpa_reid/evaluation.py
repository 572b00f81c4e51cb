"""Retrieval evaluation: distance matrices, CMC / mAP / mINP and ranked lists."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatch, NoValidMatch

METRIC_COLUMNS = ("mAP", "rank1", "rank5", "rank10", "rank20", "mINP")


@dataclass
class DistanceMatrix:
    values: np.ndarray
    metric: str = "euclidean"

    @property
    def shape(self):
        return self.values.shape


@dataclass
class QueryResult:
    ap: float
    inp: float
    first_match_rank: int


@dataclass
class EvalReport:
    mAP: float
    rank1: float
    rank5: float
    rank10: float
    rank20: float
    mINP: float
    cmc_curve: np.ndarray
    per_query: list = field(default_factory=list)

    def metrics(self) -> dict:
        return {k: float(getattr(self, k)) for k in METRIC_COLUMNS}


def distance_matrix(query_emb, gallery_emb, metric: str = "euclidean") -> DistanceMatrix:
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionMismatch(f"embedding shapes {q.shape} and {g.shape} are incompatible")
    if metric == "euclidean":
        diff = q[:, None, :] - g[None, :, :]
        values = np.sqrt((diff * diff).sum(axis=2))
    elif metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        values = np.clip(1.0 - qn @ gn.T, 0.0, 2.0)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return DistanceMatrix(values, metric)


def _order(row: np.ndarray) -> np.ndarray:
    # ascending distance, ties broken by gallery index
    return np.argsort(row, kind="stable")


def evaluate(dist, q_ids, q_cams, g_ids, g_cams, cross_camera_filter: bool = True) -> EvalReport:
    """Score a query×gallery distance matrix.

    With ``cross_camera_filter`` the gallery items sharing both identity and
    camera with the query are dropped before ranking. AP is the mean of
    ``i / r_i`` over match ranks ``r_1 < r_2 < ...``; INP is the number of
    matches divided by the rank of the last one.
    """
    values = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    nq, ng = values.shape
    if len(q_ids) != nq or len(q_cams) != nq or len(g_ids) != ng or len(g_cams) != ng:
        raise DimensionMismatch("label arrays disagree with the distance matrix")
    cmc = np.zeros(ng)
    per_query, bad = [], []
    for qi in range(nq):
        order = _order(values[qi])
        if cross_camera_filter:
            junk = (g_ids[order] == q_ids[qi]) & (g_cams[order] == q_cams[qi])
            order = order[~junk]
        hits = np.flatnonzero(g_ids[order] == q_ids[qi]) + 1
        if hits.size == 0:
            bad.append(qi)
            continue
        # exact summation keeps the metrics independent of summation order
        ap = math.fsum(np.arange(1, hits.size + 1) / hits) / hits.size
        inp = hits.size / float(hits[-1])
        cmc[hits[0] - 1:] += 1.0
        per_query.append(QueryResult(ap, inp, int(hits[0])))
    if bad:
        raise NoValidMatch(bad)
    cmc /= nq

    def rank(k):
        return float(cmc[min(k, ng) - 1])

    return EvalReport(
        mAP=math.fsum(r.ap for r in per_query) / nq,
        rank1=rank(1), rank5=rank(5), rank10=rank(10), rank20=rank(20),
        mINP=math.fsum(r.inp for r in per_query) / nq,
        cmc_curve=cmc, per_query=per_query,
    )


def ranked_list(dist, k: int, q_ids=None, g_ids=None) -> list:
    """Top-``k`` gallery items per query as CSV-ready dict rows."""
    values = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=np.float64)
    nq, ng = values.shape
    if not 1 <= k <= ng:
        raise ValueError(f"k must be in [1, {ng}]")
    rows = []
    for qi in range(nq):
        for r, gi in enumerate(_order(values[qi])[:k], start=1):
            row = {"query": qi, "rank": r, "gallery": int(gi), "distance": float(values[qi, gi])}
            if q_ids is not None and g_ids is not None:
                row["query_id"] = int(q_ids[qi])
                row["gallery_id"] = int(g_ids[gi])
                row["correct"] = int(q_ids[qi] == g_ids[gi])
            rows.append(row)
    return rows


def write_metrics_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerow([f"{getattr(report, k):.6f}" for k in METRIC_COLUMNS])


def write_ranks_csv(rows: list, path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
