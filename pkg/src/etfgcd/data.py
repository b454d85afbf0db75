"""Session streams: synthetic hypersphere mixtures and CSV embedding tables."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import make_rng


class InfeasibleSpecError(ValueError):
    pass


class TableParseError(ValueError):
    pass


class DimensionMismatchError(TableParseError):
    pass


class UnknownStageError(TableParseError):
    pass


@dataclass
class StreamSpec:
    total_classes: int = 20
    base_classes: int | None = None
    stages: int = 2
    new_per_stage: list | None = None
    samples_per_class_train: int = 40
    samples_per_class_test: int = 20
    old_class_mix_fraction: float = 0.5
    input_dim: int = 32
    class_separation: float = 60.0
    noise_sigma: float = 0.05
    seed: int = 0
    max_attempts: int = 100_000

    def __post_init__(self):
        if self.base_classes is None:
            self.base_classes = self.total_classes // 2
        if self.new_per_stage is None:
            if self.stages:
                per, extra = divmod(self.total_classes - self.base_classes, self.stages)
                self.new_per_stage = [per + (1 if t < extra else 0) for t in range(self.stages)]
            else:
                self.new_per_stage = []
        self.new_per_stage = [int(n) for n in self.new_per_stage]
        if len(self.new_per_stage) != self.stages:
            raise ValueError(f"new_per_stage has {len(self.new_per_stage)} entries for {self.stages} stages")
        if self.base_classes < 1 or any(n < 0 for n in self.new_per_stage):
            raise ValueError("class counts must be positive")
        if self.base_classes + sum(self.new_per_stage) > self.total_classes:
            raise ValueError("base_classes + sum(new_per_stage) exceeds total_classes")
        if not 0 <= self.old_class_mix_fraction < 1:
            raise ValueError("old_class_mix_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def class_schedule(self) -> list[list[int]]:
        """Classes introduced at each stage (stage 0 first)."""
        out = [list(range(self.base_classes))]
        start = self.base_classes
        for n in self.new_per_stage:
            out.append(list(range(start, start + n)))
            start += n
        return out


@dataclass
class Split:
    ids: list
    X: np.ndarray
    y: np.ndarray
    labeled: np.ndarray


@dataclass
class StageData:
    stage: int
    train: Split
    test: Split
    new_classes: list = field(default_factory=list)
    old_classes: list = field(default_factory=list)


def sample_class_means(n: int, dim: int, separation_deg: float, rng, max_attempts: int = 100_000) -> np.ndarray:
    """Unit vectors with pairwise angle >= ``separation_deg``, by rejection."""
    max_cos = math.cos(math.radians(separation_deg))
    means = []
    attempts = 0
    while len(means) < n:
        if attempts >= max_attempts:
            raise InfeasibleSpecError(
                f"placed {len(means)} of {n} class means at >= {separation_deg} degrees in {dim} dims within {max_attempts} attempts"
            )
        attempts += 1
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ m) <= max_cos for m in means):
            means.append(v)
    return np.array(means)


def generate_stream(spec: StreamSpec) -> list[StageData]:
    rng = make_rng(spec.seed)
    schedule = spec.class_schedule()
    n_classes = sum(len(s) for s in schedule)
    means = sample_class_means(n_classes, spec.input_dim, spec.class_separation, rng, spec.max_attempts)

    def draw(classes):
        y = np.asarray(classes, dtype=np.int64)
        X = means[y] + spec.noise_sigma * rng.standard_normal((len(y), spec.input_dim))
        return X, y

    test_y = np.repeat(np.arange(n_classes), spec.samples_per_class_test)
    test_X, _ = draw(test_y)
    test_ids = [f"test-c{c}-{i % spec.samples_per_class_test}" for i, c in enumerate(test_y)]

    stages = []
    seen: list[int] = []
    for t, new in enumerate(schedule):
        old = list(seen)
        labels = list(np.repeat(new, spec.samples_per_class_train))
        if t > 0 and old:
            f = spec.old_class_mix_fraction
            n_old = int(round(len(labels) * f / (1 - f)))
            labels += [old[i % len(old)] for i in range(n_old)]
        X, y = draw(labels)
        train = Split([f"train-s{t}-{i}" for i in range(len(y))], X, y, np.full(len(y), t == 0))
        seen = seen + list(new)
        mask = np.isin(test_y, seen)
        test = Split([i for i, m in zip(test_ids, mask) if m], test_X[mask], test_y[mask], np.ones(int(mask.sum()), dtype=bool))
        stages.append(StageData(t, train, test, list(new), old))
    return stages


def export_embeddings(stream: list[StageData], path) -> None:
    dim = stream[0].train.X.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "stage", "split", "label"] + [f"f{i}" for i in range(dim)])
        for sd in stream:
            for name, split in (("train", sd.train), ("test", sd.test)):
                for sid, x, y in zip(split.ids, split.X, split.y):
                    w.writerow([sid, sd.stage, name, int(y)] + [format(float(v), ".17g") for v in x])


def load_embeddings(path, format: str = "csv") -> list[StageData]:
    """Read an ``id,stage,split,label,f0..`` table into per-stage splits.

    Labels of train rows beyond stage 0 are kept as hidden truth; the
    ``labeled`` flag is False for them.
    """
    if format != "csv":
        raise ValueError(f"unsupported table format {format!r}")
    rows: dict = {}
    dim = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["id", "stage", "split", "label"] or len(header) < 5:
            raise TableParseError(f"{path}:1: header must start with id,stage,split,label followed by f0..")
        hdim = len(header) - 4
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) - 4 != hdim:
                raise DimensionMismatchError(f"{path}:{lineno}: row has {len(rec) - 4} features but the header declares {hdim}")
            try:
                stage = int(rec[1])
                label = int(rec[3])
                feats = [float(v) for v in rec[4:]]
            except ValueError as exc:
                raise TableParseError(f"{path}:{lineno}: {exc}") from None
            split = rec[2]
            if split not in ("train", "test"):
                raise TableParseError(f"{path}:{lineno}: split must be 'train' or 'test', got {split!r}")
            if stage < 0 or label < 0:
                raise TableParseError(f"{path}:{lineno}: stage and label must be non-negative")
            dim = hdim
            rows.setdefault(stage, {"train": [], "test": []})[split].append((rec[0], label, feats))
    if not rows:
        raise TableParseError(f"{path}: no data rows")
    stages = sorted(rows)
    if stages != list(range(len(stages))):
        missing = sorted(set(range(max(stages) + 1)) - set(stages))
        raise UnknownStageError(f"{path}: stages must run 0..{max(stages)} without gaps; missing {missing}")

    def to_split(recs, labeled):
        ids = [r[0] for r in recs]
        y = np.array([r[1] for r in recs], dtype=np.int64)
        X = np.array([r[2] for r in recs], dtype=np.float64).reshape(len(recs), dim)
        return Split(ids, X, y, np.full(len(recs), labeled))

    out = []
    seen: list[int] = []
    for t in stages:
        train = to_split(rows[t]["train"], t == 0)
        test = to_split(rows[t]["test"], True)
        present = sorted(set(train.y.tolist()))
        new = [c for c in present if c not in seen]
        out.append(StageData(t, train, test, new, list(seen)))
        seen += new
    return out
