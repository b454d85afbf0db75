"""Fixed simplex equiangular tight frame and the class -> column ledger."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import DimensionError, orthonormal_basis


class CapacityError(RuntimeError):
    pass


class DuplicateClassError(KeyError):
    pass


class UnassignedClassError(KeyError):
    pass


@dataclass(frozen=True)
class EtfFrame:
    d: int
    K: int
    P: np.ndarray
    seed: int

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64)
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    def prototype(self, k: int) -> np.ndarray:
        return self.P[:, k]

    def gram_deviation(self) -> float:
        return float(np.max(np.abs(self.P.T @ self.P - ideal_gram(self.K))))


def ideal_gram(K: int) -> np.ndarray:
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    G = np.full((K, K), -1.0 / (K - 1))
    np.fill_diagonal(G, 1.0)
    return G


def build_etf(d: int, K: int, seed: int = 0) -> EtfFrame:
    """Simplex ETF: sqrt(K/(K-1)) * U (I - 11^T/K), U a random orthonormal d x K basis."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if d < K:
        raise DimensionError(f"simplex ETF with K={K} needs d >= K, got d={d}")
    U = orthonormal_basis(d, K, seed)
    # U (I - 11^T/K) is U minus its row means; its columns have norm sqrt((K-1)/K)
    P = U - np.add.reduce(U, axis=1)[:, None] * (1.0 / K)
    P *= np.sqrt(K / (K - 1.0))
    return EtfFrame(d=d, K=K, P=P, seed=int(seed))


@dataclass
class AllocationLedger:
    K: int
    assignments: dict = field(default_factory=dict)

    @property
    def free(self) -> list[int]:
        taken = set(self.assignments.values())
        return [k for k in range(self.K) if k not in taken]

    def assign(self, class_id, column: int | None = None) -> int:
        """Bind ``class_id`` to ``column`` (default: smallest free column)."""
        if class_id in self.assignments:
            raise DuplicateClassError(f"class {class_id!r} already bound to column {self.assignments[class_id]}")
        free = self.free
        if not free:
            raise CapacityError(f"all {self.K} prototype columns are taken")
        if column is None:
            column = free[0]
        elif column not in free:
            raise CapacityError(f"column {column} is not free")
        self.assignments[class_id] = int(column)
        return int(column)

    def column(self, class_id) -> int:
        try:
            return self.assignments[class_id]
        except KeyError:
            raise UnassignedClassError(f"class {class_id!r} has no prototype") from None

    def columns(self, class_ids) -> np.ndarray:
        return np.array([self.column(c) for c in class_ids], dtype=np.int64)

    def copy(self) -> "AllocationLedger":
        return AllocationLedger(self.K, dict(self.assignments))


def save_frame(frame: EtfFrame, path) -> None:
    """CSV: header ``d,K,seed``, one value row, then d rows of P (row-major)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "K", "seed"])
        w.writerow([frame.d, frame.K, frame.seed])
        for row in frame.P:
            w.writerow([repr(float(v)) for v in row])


def load_frame(path) -> EtfFrame:
    """Read a frame written by :func:`save_frame` without touching its values."""
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    if len(rows) < 2 or [c.strip() for c in rows[0]] != ["d", "K", "seed"]:
        raise ValueError(f"{path}: expected header 'd,K,seed'")
    d, K, seed = (int(v) for v in rows[1])
    body = rows[2:]
    if len(body) != d or any(len(r) != K for r in body):
        raise ValueError(f"{path}: expected {d} rows of {K} values")
    P = np.array([[float(v) for v in r] for r in body])
    return EtfFrame(d=d, K=K, P=P, seed=seed)
