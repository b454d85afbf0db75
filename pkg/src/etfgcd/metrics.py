"""Clustering accuracy, forgetting / discovery rates and neural-collapse diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .etf import AllocationLedger, EtfFrame, ideal_gram


class MissingStageError(ValueError):
    pass


@dataclass(frozen=True)
class AccuracyTriple:
    """Percentages; a subset with no samples reports NaN."""

    all: float
    old: float
    new: float
    n_all: int
    n_old: int
    n_new: int


@dataclass(frozen=True)
class NcDiagnostics:
    nc1: float
    nc2: float
    nc3: float
    nc4: float

    def as_dict(self) -> dict:
        return {"nc1": self.nc1, "nc2": self.nc2, "nc3": self.nc3, "nc4": self.nc4}


def hungarian_match(pred, truth, old_set=()) -> dict:
    """Predicted id -> true id mapping maximizing the number of agreements.

    Among maximal mappings the one with the most agreements on ``old_set``
    classes wins, so the Old/New split does not depend on how the
    predicted ids happen to be numbered.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {truth.shape} labels")
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    t_ids, t_inv = np.unique(truth, return_inverse=True)
    n = max(len(p_ids), len(t_ids))
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (p_inv, t_inv), 1)
    is_old = np.zeros(n, dtype=np.int64)
    is_old[:len(t_ids)] = np.isin(t_ids, np.asarray(sorted(old_set)))
    # integer weights: one extra agreement outweighs any number of old ones
    rows, cols = linear_sum_assignment(-(counts * (len(pred) + 1) + counts * is_old[None, :]))
    return {p_ids[r].item(): t_ids[c].item() for r, c in zip(rows, cols) if r < len(p_ids) and c < len(t_ids)}


def hungarian_accuracy(pred, truth, old_set) -> AccuracyTriple:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    mapping = hungarian_match(pred, truth, old_set)
    mapped = np.array([mapping.get(p.item(), None) for p in pred], dtype=object)
    hit = np.array([m is not None and m == t.item() for m, t in zip(mapped, truth)], dtype=bool)
    old_mask = np.isin(truth, np.asarray(sorted(old_set)))

    def pct(mask):
        n = int(mask.sum())
        return (100.0 * hit[mask].sum() / n if n else math.nan), n

    a, na = pct(np.ones(len(truth), dtype=bool))
    o, no = pct(old_mask)
    w, nw = pct(~old_mask)
    return AccuracyTriple(a, o, w, na, no, nw)


def forgetting_rate(reports, stage0_all: float) -> float:
    """Stage-0 overall accuracy minus old-class accuracy after the last session."""
    reports = list(reports)
    if not reports:
        raise MissingStageError("forgetting rate needs at least one incremental stage")
    return float(stage0_all - reports[-1].old)


def discovery_rate(reports) -> float:
    """Mean new-class accuracy over the incremental stages."""
    reports = list(reports)
    if not reports:
        raise MissingStageError("discovery rate needs at least one incremental stage")
    return float(np.mean([r.new for r in reports]))


def class_means(E, labels):
    E = np.asarray(E, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    means = np.stack([E[y == c].mean(axis=0) for c in classes])
    return classes, means


def within_class_scatter(E, labels) -> np.ndarray:
    """Average outer product of deviations from the class mean, over all samples."""
    E = np.asarray(E, dtype=np.float64)
    y = np.asarray(labels)
    classes, means = class_means(E, y)
    idx = np.searchsorted(classes, y)
    D = E - means[idx]
    return D.T @ D / len(E)


def between_class_scatter(E, labels) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    _, means = class_means(E, labels)
    M = means - E.mean(axis=0)
    return M.T @ M / len(means)


def nc_diagnostics(embeddings, labels, frame: EtfFrame, ledger: AllocationLedger, W) -> NcDiagnostics:
    """NC1-NC4 on a labelled set of embeddings.

    ``labels`` are class ids that index both the ledger and the columns of ``W``.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or np.any(counts < 2):
        raise ValueError("need at least 2 classes with at least 2 samples each")
    _, means = class_means(E, y)
    mu_g = E.mean(axis=0)

    nc1 = float(np.trace(within_class_scatter(E, y)) / np.trace(between_class_scatter(E, y)))

    centered = means - mu_g
    cn = np.linalg.norm(centered, axis=1, keepdims=True)
    unit = centered / np.where(cn > 0, cn, 1.0)
    nc2 = float(np.max(np.abs(unit @ unit.T - ideal_gram(len(classes)))))

    protos = frame.P[:, ledger.columns(classes.tolist())].T
    nc3 = float(np.mean(np.sum(unit * protos, axis=1)))

    dist = np.sum(E * E, axis=1)[:, None] - 2 * E @ means.T + np.sum(means * means, axis=1)[None, :]
    ncm = classes[np.argmin(dist, axis=1)]
    head = np.argmax(E @ np.asarray(W, dtype=np.float64), axis=1)
    nc4 = float(np.mean(ncm == head))
    return NcDiagnostics(nc1, nc2, nc3, nc4)
