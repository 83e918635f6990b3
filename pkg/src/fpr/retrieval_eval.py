"""Probe-vs-gallery ranking with FPR distances, CMC and mAP.

Gallery entries sharing both identity and camera with the probe are junk and are
dropped before ranking, as in the usual re-identification protocol.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .features import DEFAULT_PYRAMID, PyramidSpec, extract
from .foreground import foreground_probs
from .reconstruction import GalleryFactor, RidgeParams, distance_matrix
from .tensor_io import DatasetManifest, IdentityPattern, occlude, read_tensor

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class RankedList:
    probe_id: int
    probe_camera: int
    order: np.ndarray  # gallery indices, best first
    distances: np.ndarray  # sorted ascending
    matches: np.ndarray  # bool, aligned with order

    @property
    def first_match(self) -> Optional[int]:
        """1-based rank of the first correct match, or None."""
        hits = np.flatnonzero(self.matches)
        return int(hits[0]) + 1 if hits.size else None


def rank_distances(
    distances: Sequence[float],
    probe_id: int,
    probe_camera: int,
    gallery_ids: Sequence[int],
    gallery_cameras: Sequence[int],
    drop_junk: bool = True,
) -> RankedList:
    """Sort one probe's gallery distances (stable: ties keep gallery order)."""
    dist = np.asarray(distances, dtype=np.float64)
    gids = np.asarray(gallery_ids)
    gcams = np.asarray(gallery_cameras)
    keep = np.ones(dist.size, dtype=bool)
    if drop_junk:
        keep = ~((gids == probe_id) & (gcams == probe_camera))
    idx = np.flatnonzero(keep)
    order = idx[np.argsort(dist[idx], kind="stable")]
    return RankedList(probe_id, probe_camera, order, dist[order], gids[order] == probe_id)


def cmc_curve(ranked: Sequence[RankedList], max_rank: int = 20) -> tuple[np.ndarray, int]:
    """Rank-k accuracies for k = 1..max_rank and the number of probes without any valid match."""
    hits = np.zeros(max_rank)
    valid = 0
    excluded = 0
    for rl in ranked:
        r = rl.first_match
        if r is None:
            excluded += 1
            continue
        valid += 1
        if r <= max_rank:
            hits[r - 1:] += 1
    if excluded:
        log.warning("%d probe(s) have no valid gallery match and were excluded", excluded)
    if valid == 0:
        raise ValueError("no probe has a valid gallery match")
    return hits / valid, excluded


def average_precision(matches: Sequence[bool]) -> float:
    """Mean over correct matches at rank r of (correct matches in the top r) / r."""
    m = np.asarray(matches, dtype=bool)
    ranks = np.flatnonzero(m) + 1
    if ranks.size == 0:
        raise ValueError("no relevant item")
    # exact rational mean of precision-at-hit, rounded once
    total = sum(Fraction(k, int(r)) for k, r in enumerate(ranks, start=1))
    return float(total / ranks.size)


def mean_ap(ranked: Sequence[RankedList]) -> tuple[float, list[Optional[float]]]:
    """mAP over probes with a valid match; per-probe APs are None for excluded probes."""
    aps = [average_precision(rl.matches) if rl.matches.any() else None for rl in ranked]
    valid = [a for a in aps if a is not None]
    if not valid:
        raise ValueError("no probe has a valid gallery match")
    return float(np.mean(valid)), aps


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    aps: list[Optional[float]]
    n_excluded: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "cmc": [float(v) for v in self.cmc],
            "map": float(self.map),
            "per_probe_ap": self.aps,
            "n_excluded": self.n_excluded,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "accuracy"])
        for k, v in enumerate(self.cmc, start=1):
            w.writerow([k, repr(float(v))])
        return buf.getvalue()


def evaluate_ranked(ranked: Sequence[RankedList], max_rank: int = 20) -> EvalReport:
    cmc, excluded = cmc_curve(ranked, max_rank)
    m, aps = mean_ap(ranked)
    return EvalReport(cmc, m, aps, excluded)


# -- distance computation over manifests ------------------------------------------

def worker_count(requested: Optional[int] = None) -> int:
    cap = os.environ.get("FPR_THREADS")
    n = requested if requested is not None else (int(cap) if cap else 1)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


def manifest_features(manifest: DatasetManifest, extractor, spec: PyramidSpec = DEFAULT_PYRAMID):
    return [extract(read_tensor(e.tensor_path), extractor, spec) for e in manifest.entries]


def compute_distances(
    probe_sets,
    gallery_sets,
    classifier=None,
    ridge: RidgeParams = RidgeParams(),
    normalize: bool = False,
    squared: bool = False,
    workers: int = 1,
) -> np.ndarray:
    """(n_probe, n_gallery) FPR distances; the classifier, if given, weights probe columns.

    Work is sharded by gallery; every gallery column is computed the same way
    regardless of the shard layout, so results do not depend on ``workers``.
    """
    Xs = [s.columns for s in probe_sets]
    hs = [foreground_probs(X, classifier) for X in Xs] if classifier is not None else None
    factors = [GalleryFactor(s.columns, ridge) for s in gallery_sets]

    def column(j):
        return distance_matrix(Xs, [factors[j]], hs, normalize, squared)[:, 0]

    if workers <= 1 or len(factors) <= 1:
        cols = [column(j) for j in range(len(factors))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(column, range(len(factors))))
    return np.stack(cols, axis=1)


def rank_all(
    dist: np.ndarray, probe: DatasetManifest, gallery: DatasetManifest, drop_junk: bool = True
) -> list[RankedList]:
    gids = [e.identity for e in gallery.entries]
    gcams = [e.camera for e in gallery.entries]
    return [
        rank_distances(dist[i], e.identity, e.camera, gids, gcams, drop_junk)
        for i, e in enumerate(probe.entries)
    ]


def rank_gallery(
    probe_index: int,
    probe: DatasetManifest,
    gallery: DatasetManifest,
    state,
    spec: PyramidSpec = DEFAULT_PYRAMID,
    ridge: RidgeParams = RidgeParams(),
    weighted: bool = True,
) -> RankedList:
    """Rank the whole gallery for one probe entry."""
    if not gallery.entries:
        raise ValueError("gallery is empty")
    entry = probe.entries[probe_index]
    pset = extract(read_tensor(entry.tensor_path), state.extractor, spec)
    gsets = manifest_features(gallery, state.extractor, spec)
    dist = compute_distances([pset], gsets, state.classifier if weighted else None, ridge)
    return rank_distances(
        dist[0], entry.identity, entry.camera,
        [e.identity for e in gallery.entries], [e.camera for e in gallery.entries],
    )


def evaluate(
    probe: DatasetManifest,
    gallery: DatasetManifest,
    state,
    spec: PyramidSpec = DEFAULT_PYRAMID,
    ridge: RidgeParams = RidgeParams(),
    weighted: bool = True,
    normalize: bool = False,
    squared: bool = False,
    max_rank: int = 20,
    workers: int = 1,
) -> EvalReport:
    if not probe.entries:
        raise ValueError("probe manifest is empty")
    if not gallery.entries:
        raise ValueError("gallery manifest is empty")
    psets = manifest_features(probe, state.extractor, spec)
    gsets = manifest_features(gallery, state.extractor, spec)
    clf = state.classifier if weighted else None
    dist = compute_distances(psets, gsets, clf, ridge, normalize, squared, workers)
    return evaluate_ranked(rank_all(dist, probe, gallery), max_rank)


# -- occlusion robustness probe ---------------------------------------------------

@dataclass
class InflationTrials:
    weighted: np.ndarray
    unweighted: np.ndarray

    @property
    def weighted_better(self) -> float:
        """Fraction of trials where occlusion inflates the weighted distance less."""
        return float(np.mean(self.weighted < self.unweighted))


def occlusion_inflation(
    state,
    patterns: Sequence[IdentityPattern],
    n_trials: int,
    fraction: float,
    seed: int,
    image_shape: tuple[int, int] = (48, 16),
    spec: PyramidSpec = DEFAULT_PYRAMID,
    ridge: RidgeParams = RidgeParams(),
) -> InflationTrials:
    """Distance inflation ``D(occluded probe, g) / D(clean probe, g)`` per trial.

    Each trial renders a gallery image and a probe image of one random identity,
    then occludes a copy of the probe; both weighted and unweighted distances to
    the same gallery image are measured.
    """
    rng = np.random.default_rng(seed)
    H, W = image_shape
    ratios_w, ratios_u = [], []
    for _ in range(n_trials):
        pat = patterns[int(rng.integers(len(patterns)))]
        gal = pat.render(rng, H, W)
        clean = pat.render(rng, H, W)
        occluded, _ = occlude(clean, fraction, rng)
        gset = extract(gal, state.extractor, spec)
        factor = GalleryFactor(gset.columns, ridge)
        X = [extract(img, state.extractor, spec).columns for img in (clean, occluded)]
        hs = [foreground_probs(x, state.classifier) for x in X]
        dw = distance_matrix(X, [factor], hs)[:, 0]
        du = distance_matrix(X, [factor], None)[:, 0]
        ratios_w.append(dw[1] / dw[0])
        ratios_u.append(du[1] / du[0])
    return InflationTrials(np.array(ratios_w), np.array(ratios_u))
