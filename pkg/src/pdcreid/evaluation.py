"""Single-query retrieval evaluation: distance matrix, CMC and mAP.

Gallery entries are ranked by ascending distance with ties broken by gallery
index, so every metric is a deterministic function of the distance ranks.
"""
import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, ShapeError

REPORT_RANKS = (1, 5, 10, 20)


@dataclass
class DistanceMatrix:
    dist: np.ndarray
    probe_labels: np.ndarray
    gallery_labels: np.ndarray
    probe_cams: np.ndarray = None
    gallery_cams: np.ndarray = None

    def __post_init__(self):
        self.dist = np.asarray(self.dist, dtype=np.float64)
        self.probe_labels = np.asarray(self.probe_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        p, g = self.dist.shape
        if self.probe_labels.shape != (p,) or self.gallery_labels.shape != (g,):
            raise ShapeError(
                f"distance matrix {self.dist.shape} vs labels {self.probe_labels.shape}/{self.gallery_labels.shape}"
            )
        if self.probe_cams is not None:
            self.probe_cams = np.asarray(self.probe_cams)
            self.gallery_cams = np.asarray(self.gallery_cams)


def pairwise_distances(probe, gallery):
    probe = np.asarray(probe, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if probe.ndim != 2 or gallery.ndim != 2 or probe.shape[1] != gallery.shape[1]:
        raise ShapeError(f"feature dims differ: probe {probe.shape}, gallery {gallery.shape}")
    out = np.empty((probe.shape[0], gallery.shape[0]))
    for i, row in enumerate(probe):
        out[i] = np.sqrt(((gallery - row) ** 2).sum(axis=1))
    return out


def distance_matrix(probe, gallery, probe_labels, gallery_labels, probe_cams=None, gallery_cams=None):
    return DistanceMatrix(pairwise_distances(probe, gallery), probe_labels, gallery_labels,
                          probe_cams, gallery_cams)


def _ranked_matches(dm, exclude_same_camera):
    """Yield the boolean match vector of each probe in ranked gallery order."""
    if exclude_same_camera and dm.probe_cams is None:
        raise ProtocolError("camera exclusion requested but no camera ids given")
    for i in range(dm.dist.shape[0]):
        order = np.argsort(dm.dist[i], kind="stable")
        keep = np.ones(len(order), dtype=bool)
        if exclude_same_camera:
            junk = (dm.gallery_labels == dm.probe_labels[i]) & (dm.gallery_cams == dm.probe_cams[i])
            keep = ~junk[order]
        matches = (dm.gallery_labels[order] == dm.probe_labels[i])[keep]
        if not matches.any():
            raise ProtocolError(f"probe {i} (label {dm.probe_labels[i]}) has no gallery match")
        yield matches


def cmc(dm, exclude_same_camera=False):
    """``out[k-1]`` is the fraction of probes whose first true match ranks within ``k``."""
    g = dm.dist.shape[1]
    if dm.dist.shape[0] == 0:
        raise ProtocolError("no probes")
    hits = np.zeros(g)
    for matches in _ranked_matches(dm, exclude_same_camera):
        hits[int(np.argmax(matches)):] += 1
    return hits / dm.dist.shape[0]


def average_precisions(dm, exclude_same_camera=False):
    aps = []
    for matches in _ranked_matches(dm, exclude_same_camera):
        ranks = np.flatnonzero(matches) + 1
        aps.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
    return np.array(aps)


def mean_ap(dm, exclude_same_camera=False):
    return float(average_precisions(dm, exclude_same_camera).mean())


@dataclass
class EvalReport:
    cmc: np.ndarray
    mAP: float
    ap: np.ndarray

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def metrics(self):
        out = {f"rank{k}": self.rank(k) for k in REPORT_RANKS}
        out["mAP"] = self.mAP
        return out


def evaluate(dm, exclude_same_camera=False):
    aps = average_precisions(dm, exclude_same_camera)
    return EvalReport(cmc=cmc(dm, exclude_same_camera), mAP=float(aps.mean()), ap=aps)


def write_report(directory, report):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, value in report.metrics().items():
            w.writerow([name, repr(value)])
    with open(os.path.join(directory, "cmc.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "accuracy"])
        for k, v in enumerate(report.cmc, start=1):
            w.writerow([k, repr(float(v))])


def read_report(directory):
    with open(os.path.join(directory, "report.csv"), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return {name: float(value) for name, value in rows}
