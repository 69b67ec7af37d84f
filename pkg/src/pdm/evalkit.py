"""Cross-modality retrieval metrics (CMC, mAP) and intra/inter distance-gap statistics."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from pdm.errors import ContractViolation

VIS, IR = 0, 1
DIRECTIONS = {"ir2vis": (IR, VIS), "vis2ir": (VIS, IR)}


def worker_count() -> int:
    """Parallel workers, capped by ``PDM_THREADS`` (default 1)."""
    raw = os.environ.get("PDM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ContractViolation(f"PDM_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass
class RetrievalProtocol:
    query: np.ndarray
    query_labels: np.ndarray
    gallery: np.ndarray
    gallery_labels: np.ndarray
    direction: str = "ir2vis"

    def __post_init__(self):
        self.query = np.atleast_2d(np.asarray(self.query, dtype=np.float64))
        self.gallery = np.atleast_2d(np.asarray(self.gallery, dtype=np.float64))
        self.query_labels = np.asarray(self.query_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        if self.direction not in DIRECTIONS:
            raise ContractViolation(f"direction must be one of {sorted(DIRECTIONS)}")
        if self.query.shape[1] != self.gallery.shape[1]:
            raise ContractViolation("query and gallery descriptors differ in length")
        if len(self.query_labels) != len(self.query) or len(self.gallery_labels) != len(self.gallery):
            raise ContractViolation("need one label per descriptor")

    @classmethod
    def from_split(cls, features, labels, modalities, direction: str = "ir2vis") -> "RetrievalProtocol":
        if direction not in DIRECTIONS:
            raise ContractViolation(f"direction must be one of {sorted(DIRECTIONS)}")
        features, labels, modalities = np.asarray(features), np.asarray(labels), np.asarray(modalities)
        q_mod, g_mod = DIRECTIONS[direction]
        q, g = modalities == q_mod, modalities == g_mod
        if not q.any() or not g.any():
            raise ContractViolation("both modalities must be present")
        return cls(features[q], labels[q], features[g], labels[g], direction)


@dataclass
class RetrievalReport:
    direction: str
    cmc: list[float]
    map: float
    ap: list[float]

    @property
    def rank1(self) -> float:
        return self.cmc[0]


def _distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = query[:, None, :] - gallery[None, :, :]
    return np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))


def _rank_query(dist_row: np.ndarray, relevant: np.ndarray) -> tuple[int, Fraction]:
    # stable sort: equal distances keep ascending gallery order
    order = np.argsort(dist_row, kind="stable")
    hits = np.flatnonzero(relevant[order])
    # exact rational AP, rounded once, so results do not depend on summation order
    ap = sum(Fraction(i + 1, int(pos) + 1) for i, pos in enumerate(hits)) / len(hits)
    return int(hits[0]), ap


def cmc_map(protocol: RetrievalProtocol, max_rank: int | None = None) -> RetrievalReport:
    p = protocol
    relevant = p.query_labels[:, None] == p.gallery_labels[None, :]
    missing = np.flatnonzero(~relevant.any(axis=1))
    if missing.size:
        raise ContractViolation(f"queries {missing.tolist()} have no relevant gallery item")
    dist = _distances(p.query, p.gallery)
    rows = range(len(p.query))
    workers = min(worker_count(), len(p.query)) or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            ranked = list(pool.map(lambda i: _rank_query(dist[i], relevant[i]), rows))
    else:
        ranked = [_rank_query(dist[i], relevant[i]) for i in rows]
    first_hit = np.array([r[0] for r in ranked])
    aps = [r[1] for r in ranked]
    R = len(p.gallery) if max_rank is None else min(max_rank, len(p.gallery))
    nq = len(p.query)
    cmc = [np.count_nonzero(first_hit < k) / nq for k in range(1, R + 1)]
    return RetrievalReport(
        direction=p.direction, cmc=cmc, map=float(sum(aps) / nq), ap=[float(a) for a in aps]
    )


@dataclass
class DistanceStats:
    intra_mean: float
    inter_mean: float
    delta: float
    bin_edges: list[float]
    intra_hist: list[int]
    inter_hist: list[int]


def distance_gap(features, labels, modalities, bins: int = 20) -> DistanceStats:
    """Mean cross-modality distance between different vs. same identities.

    Only VIS-IR pairs are counted. Both histograms share bin edges spanning
    all pair distances, so each partitions its pairs.
    """
    features = np.asarray(features, dtype=np.float64)
    labels, modalities = np.asarray(labels), np.asarray(modalities)
    vis, ir = modalities == VIS, modalities == IR
    if not vis.any() or not ir.any():
        raise ContractViolation("distance gap needs both modalities")
    if len(np.unique(labels)) < 2:
        raise ContractViolation("distance gap needs at least two identities")
    dist = _distances(features[vis], features[ir])
    same = labels[vis][:, None] == labels[ir][None, :]
    intra, inter = dist[same], dist[~same]
    if not intra.size:
        raise ContractViolation("no identity appears in both modalities")
    lo, hi = float(dist.min()), float(dist.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    intra_mean = math.fsum(intra.tolist()) / intra.size
    inter_mean = math.fsum(inter.tolist()) / inter.size
    return DistanceStats(
        intra_mean=intra_mean,
        inter_mean=inter_mean,
        delta=inter_mean - intra_mean,
        bin_edges=edges.tolist(),
        intra_hist=np.histogram(intra, edges)[0].tolist(),
        inter_hist=np.histogram(inter, edges)[0].tolist(),
    )


# ---------------------------------------------------------------------------
# serialization


REPORT_FIELDS = ("direction", "cmc", "map", "delta", "intra_mean", "inter_mean", "histograms", "ap")


def report_dict(report: RetrievalReport, stats: DistanceStats) -> dict:
    return {
        "direction": report.direction,
        "cmc": report.cmc,
        "map": report.map,
        "delta": stats.delta,
        "intra_mean": stats.intra_mean,
        "inter_mean": stats.inter_mean,
        "histograms": {"bin_edges": stats.bin_edges, "intra": stats.intra_hist, "inter": stats.inter_hist},
        "ap": report.ap,
    }


def parse_report(doc: dict) -> tuple[RetrievalReport, DistanceStats]:
    if set(doc) != set(REPORT_FIELDS):
        raise ContractViolation(f"report fields {sorted(doc)} != {sorted(REPORT_FIELDS)}")
    h = doc["histograms"]
    return (
        RetrievalReport(direction=doc["direction"], cmc=list(doc["cmc"]), map=doc["map"], ap=list(doc["ap"])),
        DistanceStats(
            intra_mean=doc["intra_mean"], inter_mean=doc["inter_mean"], delta=doc["delta"],
            bin_edges=list(h["bin_edges"]), intra_hist=list(h["intra"]), inter_hist=list(h["inter"]),
        ),
    )


def write_report(path: str | Path, report: RetrievalReport, stats: DistanceStats) -> None:
    Path(path).write_text(json.dumps(report_dict(report, stats), indent=2, sort_keys=True) + "\n")


def write_cmc_csv(path: str | Path, report: RetrievalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "cmc"])
        for k, v in enumerate(report.cmc, start=1):
            writer.writerow([k, repr(v)])


__all__ = [
    "DIRECTIONS", "DistanceStats", "RetrievalProtocol", "RetrievalReport", "cmc_map", "distance_gap",
    "parse_report", "report_dict", "write_cmc_csv", "write_report",
]
