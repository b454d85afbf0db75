"""Machinery for unlabeled sessions: confident-sample selection, clustering,
classifier expansion and matching of clusters to free frame columns."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .etf import AllocationLedger, CapacityError, EtfFrame
from .numkit import entropy, make_rng


class DegenerateClusteringError(ValueError):
    pass


@dataclass
class ConfidentSubset:
    indices: np.ndarray
    entropies: np.ndarray
    alpha: float


@dataclass
class ClusterResult:
    centers: np.ndarray
    assignment: np.ndarray
    inertia: float
    inertia_trace: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centers.shape[0]


@dataclass
class PrototypeMatch:
    phi: dict
    objective: float


def select_confident(probabilities, alpha: float) -> ConfidentSubset:
    """Keep the floor(alpha * N) rows with the lowest prediction entropy.

    Ties go to the smaller row index. Returned indices are sorted ascending.
    """
    P = np.asarray(probabilities, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("need a non-empty (N, K) matrix of probabilities")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    H = entropy(P, axis=1)
    n_keep = max(1, int(np.floor(alpha * len(H) + 1e-9)))
    order = np.argsort(H, kind="stable")
    return ConfidentSubset(np.sort(order[:n_keep]), H, alpha)


def _sq_dists(X, C):
    d = np.sum(X * X, axis=1)[:, None] - 2.0 * X @ C.T + np.sum(C * C, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X, k, rng):
    """Greedy k-means++: each step draws 2 + log(k) D^2-weighted candidates
    and keeps the one that lowers the potential most."""
    n = X.shape[0]
    trials = 2 + int(np.log(k))
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            cand = rng.integers(n, size=trials)
        else:
            cand = np.searchsorted(np.cumsum(closest), rng.random(trials) * total, side="right")
            cand = np.minimum(cand, n - 1)
        pots = np.minimum(closest[None, :], _sq_dists(X[cand], X))
        best = int(np.argmin(pots.sum(axis=1)))
        centers.append(X[cand[best]])
        closest = pots[best]
    return np.array(centers)


def inertia(points, centers, assignment) -> float:
    diff = points - centers[assignment]
    return float(np.sum(diff * diff))


def _lloyd(X, k, rng, max_iters, tol):
    C = _kmeanspp(X, k, rng)
    assign = np.argmin(_sq_dists(X, C), axis=1)
    trace = [inertia(X, C, assign)]
    for _ in range(max_iters):
        newC = C.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                newC[j] = X[members].mean(axis=0)
        new_assign = np.argmin(_sq_dists(X, newC), axis=1)
        val = inertia(X, newC, new_assign)
        assert val <= trace[-1] + 1e-9 * max(1.0, trace[-1]), "Lloyd step increased inertia"
        shift = float(np.max(np.abs(newC - C)))
        C, assign = newC, new_assign
        trace.append(val)
        if shift <= tol:
            break
    return C, assign, trace


def kmeans(points, k: int, seed=0, max_iters: int = 100, tol: float = 1e-10, n_init: int = 1) -> ClusterResult:
    """Lloyd's algorithm over row-normalized points from a k-means++ start.

    With ``n_init > 1`` the run is repeated from fresh seeds drawn from the
    same generator and the lowest-inertia run is kept (earliest on ties).
    Centers are rescaled to unit length once the iteration stops; the
    assignment and inertia are those of the last Lloyd step.
    """
    X = np.asarray(points, dtype=np.float64)
    if k < 1 or X.shape[0] < k:
        raise DegenerateClusteringError(f"cannot form {k} clusters from {X.shape[0]} points")
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = X / np.where(norms > 0, norms, 1.0)
    rng = make_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        C, assign, trace = _lloyd(X, k, rng, max_iters, tol)
        if best is None or trace[-1] < best[2][-1]:
            best = (C, assign, trace)
    C, assign, trace = best
    cn = np.linalg.norm(C, axis=1, keepdims=True)
    centers = C / np.where(cn > 0, cn, 1.0)
    return ClusterResult(centers, assign, trace[-1], trace)


def _unit_cols(M):
    n = np.linalg.norm(M, axis=0, keepdims=True)
    return M / np.where(n > 0, n, 1.0)


def novelty_scores(W_old, centers) -> np.ndarray:
    """Max cosine similarity of each center to any existing classifier column."""
    C = np.asarray(centers, dtype=np.float64)
    W_old = np.asarray(W_old, dtype=np.float64)
    if W_old.shape[1] == 0:
        return np.full(C.shape[0], -np.inf)
    Cn = C / np.linalg.norm(C, axis=1, keepdims=True)
    return np.max(Cn @ _unit_cols(W_old), axis=1)


def select_novel_centers(W_old, centers, n_new: int) -> np.ndarray:
    if isinstance(centers, ClusterResult):
        centers = centers.centers
    if n_new > len(centers):
        raise DegenerateClusteringError(f"asked for {n_new} new classes but only {len(centers)} centers exist")
    return np.argsort(novelty_scores(W_old, centers), kind="stable")[:n_new]


def expand_classifier(W_old, centers, n_new: int, match_norm: bool = False) -> np.ndarray:
    """Append the ``n_new`` centers least similar to the old columns.

    With ``match_norm`` the appended unit centers are scaled to the mean norm
    of the old columns, so an unnormalized head does not start out biased
    towards old classes.
    """
    if isinstance(centers, ClusterResult):
        centers = centers.centers
    W_old = np.asarray(W_old, dtype=np.float64)
    if n_new == 0:
        return W_old.copy()
    picked = select_novel_centers(W_old, centers, n_new)
    new = np.asarray(centers, dtype=np.float64)[picked].T
    if match_norm and W_old.shape[1]:
        new = new * np.mean(np.linalg.norm(W_old, axis=0))
    return np.concatenate([W_old, new], axis=1)


def _solve_lex(cost: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Min-cost injective assignment of rows to columns; among optima the
    lexicographically smallest column vector is returned."""
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    k, n = cost.shape
    chosen = []
    fixed = 0.0
    for i in range(k):
        for c in range(n):
            if c in chosen:
                continue
            rest_cols = [j for j in range(n) if j not in chosen and j != c]
            rest = 0.0
            if i + 1 < k:
                sub = cost[i + 1:][:, rest_cols]
                r, cc = linear_sum_assignment(sub)
                rest = float(sub[r, cc].sum())
            if fixed + cost[i, c] + rest <= best + tol:
                chosen.append(c)
                fixed += cost[i, c]
                break
    return np.array(chosen, dtype=np.int64), best


def match_prototypes(centroids, frame: EtfFrame, ledger: AllocationLedger) -> PrototypeMatch:
    """Match each centroid to a distinct free prototype, maximizing total cosine similarity."""
    C = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    free = ledger.free
    if C.shape[0] > len(free):
        raise CapacityError(f"{C.shape[0]} centroids but only {len(free)} free prototypes")
    if C.shape[0] == 0:
        return PrototypeMatch({}, 0.0)
    Cn = C / np.linalg.norm(C, axis=1, keepdims=True)
    cos = Cn @ frame.P[:, free]
    cols, _ = _solve_lex(1.0 - cos)
    phi = {i: free[c] for i, c in enumerate(cols)}
    objective = float(sum(cos[i, c] for i, c in enumerate(cols)))
    return PrototypeMatch(phi, objective)


def route_alignment_targets(subset: ConfidentSubset, pseudo_labels, ledger: AllocationLedger, match: PrototypeMatch, cluster_assignment) -> np.ndarray:
    """Frame column per confident sample.

    Samples whose pseudo-label already owns a column keep it; the rest follow
    the column matched to their cluster. Both arrays run parallel to
    ``subset.indices``.
    """
    pl = np.asarray(pseudo_labels)
    ca = np.asarray(cluster_assignment)
    n = len(subset.indices)
    if len(pl) != n or len(ca) != n:
        raise ValueError(f"inconsistent inputs: {n} confident samples, {len(pl)} pseudo-labels, {len(ca)} cluster ids")
    out = np.empty(n, dtype=np.int64)
    for j in range(n):
        label = pl[j].item()
        if label in ledger.assignments:
            out[j] = ledger.assignments[label]
        else:
            cluster = int(ca[j])
            if cluster not in match.phi:
                raise ValueError(f"sample {j} is pseudo-labeled new but cluster {cluster} has no matched prototype")
            out[j] = match.phi[cluster]
    return out
