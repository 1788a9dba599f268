"""Confusion ratio (CR), its average (ACR) and the ARC score.

Neighbors are exact: brute-force squared Euclidean distances accumulated
coordinate by coordinate, the query row excluded, ties broken by smaller row
index.  Same-source views stay in the candidate pool.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from augoverlap._io import write_csv, write_json
from augoverlap.encoder import EncoderParams, forward
from augoverlap.sphere import LabeledSphereDataset, augment_batch

log = logging.getLogger(__name__)

QUERY_BLOCK = 256


@dataclass
class AugmentedFeatureSet:
    source_id: np.ndarray
    view_index: np.ndarray
    features: np.ndarray
    C: int
    k: int = 1

    def __post_init__(self):
        self.source_id = np.asarray(self.source_id, dtype=int)
        self.view_index = np.asarray(self.view_index, dtype=int)
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        n = len(self.features)
        if not len(self.source_id) == len(self.view_index) == n:
            raise ValueError("source_id, view_index and features must have equal length")
        _, counts = np.unique(self.source_id, return_counts=True)
        if np.any(counts != self.C):
            raise ValueError(f"every source needs exactly C={self.C} views")
        if not 1 <= self.k <= n - 1:
            raise ValueError(f"k must lie in [1, n-1] = [1, {n - 1}], got {self.k}")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def n_sources(self) -> int:
        return self.n // self.C

    @classmethod
    def from_csv(cls, path, k: int = 1) -> "AugmentedFeatureSet":
        """Read ``source_id,view_index,z0,...`` (features from any outside model)."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        if header[:2] != ["source_id", "view_index"]:
            raise ValueError(f"{path}: expected header source_id,view_index,z0,...")
        arr = np.array(rows[1:], dtype=float)
        src = arr[:, 0].astype(int)
        feats = arr[:, 2:]
        norms = np.linalg.norm(feats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            log.info("imported feature rows re-normalized to unit norm")
            feats = feats / np.where(norms > 0, norms, 1.0)[:, None]
        C = int(np.bincount(np.unique(src, return_inverse=True)[1]).max())
        return cls(src, arr[:, 1].astype(int), feats, C, k)

    def to_csv(self, path) -> None:
        header = ["source_id", "view_index"] + [f"z{j}" for j in range(self.features.shape[1])]
        rows = ([int(s), int(v)] + [float(x) for x in z] for s, v, z in zip(self.source_id, self.view_index, self.features))
        write_csv(path, header, rows)


@dataclass
class ConfusionReport:
    cr_values: np.ndarray
    acr: float
    k: int
    C: int
    distance: str = "euclidean"

    def to_dict(self) -> dict:
        return {"acr": self.acr, "k": self.k, "C": self.C, "distance": self.distance, "cr_values": self.cr_values}

    def to_json(self, path) -> None:
        write_json(path, self.to_dict())


def build_augmented_features(encoder, dataset: LabeledSphereDataset, C: int, r: float, seed, k: int = 1) -> AugmentedFeatureSet:
    """C random views of every sample, encoded; rows are source-major.

    ``encoder=None`` measures overlap in the raw input space.  ``seed`` may be
    an int or a ``numpy.random.Generator``.
    """
    if C < 2:
        raise ValueError("C must be at least 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    views = augment_batch(np.repeat(dataset.points, C, axis=0), r, rng)
    if encoder is None:
        feats = views
    elif isinstance(encoder, EncoderParams):
        feats = forward(encoder, views)
    else:
        feats = np.asarray(encoder(views))
    src = np.repeat(np.arange(dataset.n), C)
    return AugmentedFeatureSet(src, np.tile(np.arange(C), dataset.n), feats, C, k)


def squared_distances(Q: np.ndarray, Z: np.ndarray) -> np.ndarray:
    # coordinate-wise accumulation: every entry is computed the same way
    # whatever the block shape, so ties are decided reproducibly
    d = (Q[:, None, 0] - Z[None, :, 0]) ** 2
    for j in range(1, Z.shape[1]):
        d += (Q[:, None, j] - Z[None, :, j]) ** 2
    return d


def knn_indices(Z: np.ndarray, k: int) -> np.ndarray:
    """(n, k) indices of the k nearest other rows, ties to the smaller index."""
    n = len(Z)
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, QUERY_BLOCK):
        stop = min(start + QUERY_BLOCK, n)
        d = squared_distances(Z[start:stop], Z)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        if k == 1:
            out[start:stop, 0] = np.argmin(d, axis=1)
        else:
            out[start:stop] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def confusion_ratio_all(s: AugmentedFeatureSet) -> ConfusionReport:
    nbrs = knn_indices(s.features, s.k)
    cr = np.mean(s.source_id[nbrs] != s.source_id[:, None], axis=1)
    return ConfusionReport(cr, float(cr.mean()), s.k, s.C)


def arc(acr_init: float, acr_final: float) -> float:
    """(1 - ACR_final) / (1 - ACR_init); +inf when ACR_init = 1."""
    for v in (acr_init, acr_final):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"ACR values must lie in [0, 1], got {v}")
    if acr_init == 1.0:
        log.warning("ACR_init = 1: ARC is undefined, returning inf")
        return math.inf
    return (1.0 - acr_final) / (1.0 - acr_init)


@dataclass
class SweepRow:
    r: float
    acr_init: float
    acr_final: float
    arc: float
    probe_acc: float | None

    @staticmethod
    def header() -> list[str]:
        return ["r", "acr_init", "acr_final", "arc", "probe_acc"]

    def row(self) -> list:
        return [self.r, self.acr_init, self.acr_final, self.arc, "" if self.probe_acc is None else self.probe_acc]


def acr_sweep(
    dataset: LabeledSphereDataset,
    encoder_init,
    encoder_final_per_r: dict,
    r_list,
    C: int = 10,
    k: int = 1,
    seed: int = 0,
    test_dataset: LabeledSphereDataset | None = None,
    n_sources: int | None = 500,
) -> list[SweepRow]:
    """One row per r, sorted by r.

    ACR is measured on the first ``n_sources`` samples of ``dataset`` (a
    fixed subset keeps the brute-force k-NN tractable).  ``encoder_init``
    may be a single encoder or a dict keyed by r.  Probe accuracy is
    computed when ``test_dataset`` is given.
    """
    from augoverlap.evaluation import FeatureTable, linear_probe

    sub = dataset
    if n_sources is not None and n_sources < dataset.n:
        rng = np.random.default_rng([seed, 99])
        idx = np.sort(rng.choice(dataset.n, n_sources, replace=False))
        sub = LabeledSphereDataset(dataset.points[idx], dataset.labels[idx], dataset.caps)
    rows = []
    for r in sorted(r_list):
        f0 = encoder_init[r] if isinstance(encoder_init, dict) else encoder_init
        f1 = encoder_final_per_r[r]
        # same seed for init and final: both see the same augmented views
        a0 = confusion_ratio_all(build_augmented_features(f0, sub, C, r, [seed, 1], k)).acr
        a1 = confusion_ratio_all(build_augmented_features(f1, sub, C, r, [seed, 1], k)).acr
        acc = None
        if test_dataset is not None:
            acc = linear_probe(FeatureTable.from_encoder(f1, dataset), FeatureTable.from_encoder(f1, test_dataset)).test_acc
        rows.append(SweepRow(float(r), a0, a1, arc(a0, a1), acc))
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    write_csv(path, SweepRow.header(), [r.row() for r in rows])
