"""Base and discovery sessions over a frozen prototype frame."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import discovery as disc
from .encoder import Encoder, SgdConfig, sgd_step
from .etf import AllocationLedger, CapacityError, EtfFrame, build_etf
from .losses import (
    DegenerateBatchError,
    LossConfig,
    LossResult,
    base_rep,
    base_total,
    cls_cross_entropy,
    incremental_total,
    supervised_alignment,
    unsup_alignment,
    unsup_cls,
    unsup_contrastive,
)
from .metrics import discovery_rate, forgetting_rate, hungarian_accuracy, hungarian_match, nc_diagnostics
from .numkit import l2_normalize_backward, l2_normalize_rows, make_rng, softmax


class EmptySessionError(ValueError):
    pass


# desk: short schedules with a larger step and smaller batches so a 20-class
# stream trains in seconds; paper: long schedules, small step, large batches.
PRESETS = {
    "desk": {"base_epochs": 30, "inc_epochs": 20, "learning_rate": 0.1, "batch_size": 32},
    "paper": {"base_epochs": 100, "inc_epochs": 30, "learning_rate": 0.01, "batch_size": 128},
}


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    base_epochs: int = 30
    inc_epochs: int = 20
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    alpha: float = 0.7
    # view noise: strong in the labelled session, where labels anchor the
    # classes; at the data noise scale in unlabelled sessions, where the two
    # views must keep their identity
    aug_sigma: float = 0.15
    inc_aug_sigma: float = 0.05
    hidden_dims: tuple = (128,)
    embed_dim: int = 32
    n_prototypes: int = 20
    frame_seed: int = 0
    sup_etf_align: bool = True
    unsup_etf_align: bool = True
    literal_unassigned_only: bool = False
    recompute_phi_each_epoch: bool = False
    freeze_old_weights: bool = False
    weight_init_scale: float = 0.01
    match_new_weight_norm: bool = True
    kmeans_restarts: int = 10

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.aug_sigma < 0 or self.inc_aug_sigma < 0:
            raise ValueError("aug_sigma and inc_aug_sigma must be non-negative")
        self.sgd(self.base_epochs)
        self.sgd(self.inc_epochs)

    def sgd(self, epochs: int) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.momentum, self.batch_size, epochs)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


@dataclass
class SessionState:
    t: int
    classes_old: list
    classes_new: list
    W: np.ndarray
    ledger: AllocationLedger
    encoder: Encoder
    frame: EtfFrame
    cfg: TrainConfig
    rng: np.random.Generator
    velocity: list | None = None

    @property
    def classes(self) -> list:
        return self.classes_old + self.classes_new


@dataclass
class StageReport:
    t: int
    acc_all: float = math.nan
    acc_old: float = math.nan
    acc_new: float = math.nan
    n_all: int = 0
    n_old: int = 0
    n_new: int = 0
    loss_trace: list = field(default_factory=list)
    nc_diag: dict | None = None
    nc_trace: list = field(default_factory=list)
    selection_stats: dict = field(default_factory=dict)
    class_map: dict = field(default_factory=dict)

    @property
    def all(self) -> float:
        return self.acc_all

    @property
    def old(self) -> float:
        return self.acc_old

    @property
    def new(self) -> float:
        return self.acc_new


@dataclass
class ProtocolResult:
    reports: list
    m_f: float | None
    m_d: float | None
    state: SessionState | None = None


def init_state(cfg: TrainConfig, input_dim: int, seed: int = 0) -> SessionState:
    rng = make_rng(seed)
    frame = build_etf(cfg.embed_dim, cfg.n_prototypes, cfg.frame_seed)
    enc = Encoder([input_dim, *cfg.hidden_dims, cfg.embed_dim], seed=int(rng.integers(2**63)))
    W = np.zeros((cfg.embed_dim, 0))
    return SessionState(0, [], [], W, AllocationLedger(cfg.n_prototypes), enc, frame, cfg, rng)


def embed(state: SessionState, X) -> np.ndarray:
    """Unit-length embeddings of raw inputs."""
    return l2_normalize_rows(state.encoder(X))[0]


def predict(state: SessionState, X) -> np.ndarray:
    return np.argmax(embed(state, X) @ state.W, axis=1)


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _views(state, X, s):
    xa = X + s * state.rng.standard_normal(X.shape)
    xb = X + s * state.rng.standard_normal(X.shape)
    return xa, xb


def _raw(hat, norms, res: LossResult) -> LossResult:
    """Re-express gradients taken w.r.t. unit embeddings in raw-embedding space."""
    ha, hb = hat
    na, nb = norms
    ge = l2_normalize_backward(ha, na, res.grad_embeddings)
    gb = None if res.grad_view_b is None else l2_normalize_backward(hb, nb, res.grad_view_b)
    return LossResult(res.value, ge, gb, res.grad_weights)


def _step(state: SessionState, caches, total: LossResult, freeze_cols: int = 0):
    enc = state.encoder
    ga, _ = enc.backward(caches[0], total.grad_embeddings)
    grads = ga
    if total.grad_view_b is not None:
        gb, _ = enc.backward(caches[1], total.grad_view_b)
        grads = [x + y for x, y in zip(ga, gb)]
    gW = np.zeros_like(state.W) if total.grad_weights is None else total.grad_weights.copy()
    if freeze_cols:
        gW[:, :freeze_cols] = 0.0
    params = enc.params + [state.W]
    sgd = state.cfg.sgd(1)
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    state.velocity = sgd_step(params, grads + [gW], sgd, state.velocity)
    enc.touch()


def _safe_nc(E, labels, state):
    try:
        return nc_diagnostics(E, labels, state.frame, state.ledger, state.W).as_dict()
    except (ValueError, KeyError):
        return None


def evaluate(state: SessionState, X_test, y_test, old_truth) -> tuple[StageReport, dict]:
    pred = predict(state, X_test)
    acc = hungarian_accuracy(pred, y_test, old_truth)
    rep = StageReport(state.t, acc.all, acc.old, acc.new, acc.n_all, acc.n_old, acc.n_new)
    mapping = hungarian_match(pred, y_test, old_truth)
    inverse = {v: k for k, v in mapping.items()}
    keep = np.array([int(y) in inverse for y in y_test], dtype=bool)
    if keep.any():
        model_ids = np.array([inverse[int(y)] for y in np.asarray(y_test)[keep]])
        rep.nc_diag = _safe_nc(embed(state, np.asarray(X_test)[keep]), model_ids, state)
    rep.class_map = {int(k): int(v) for k, v in mapping.items()}
    return rep, mapping


def run_base(state: SessionState, X, y, test=None, label_order=None) -> tuple[SessionState, StageReport]:
    """Supervised base session.

    ``y`` holds true labels; each distinct label becomes a model class id
    (its rank in ``label_order`` or in sorted order). ``test`` is an optional
    ``(X_test, y_test)`` pair.
    """
    if state.t != 0 or state.W.shape[1]:
        raise RuntimeError("base session must run first on a fresh state")
    cfg = state.cfg
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    labels = sorted(set(y.tolist())) if label_order is None else list(label_order)
    index = {c: i for i, c in enumerate(labels)}
    try:
        ids = np.array([index[v] for v in y.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} is not among the base classes") from None
    if len(labels) > state.ledger.K:
        raise CapacityError(f"{len(labels)} base classes exceed {state.ledger.K} prototypes")

    for i in range(len(labels)):
        state.ledger.assign(i)
    state.classes_old, state.classes_new = [], list(range(len(labels)))
    state.W = cfg.weight_init_scale * state.rng.standard_normal((cfg.embed_dim, len(labels)))
    state.velocity = None

    report = StageReport(0)
    report.nc_trace.append({"epoch": 0, **(_safe_nc(embed(state, X), ids, state) or {})})
    for epoch in range(cfg.base_epochs):
        sums = {"align": 0.0, "rep": 0.0, "cls": 0.0, "total": 0.0}
        batches = _batches(len(X), cfg.batch_size, state.rng)
        for b in batches:
            xa, xb = _views(state, X[b], cfg.aug_sigma)
            fa, ca = state.encoder.forward(xa)
            fb, cb = state.encoder.forward(xb)
            ha, na = l2_normalize_rows(fa)
            hb, nb = l2_normalize_rows(fb)
            align = supervised_alignment(fa, ids[b], state.frame, state.ledger) if cfg.sup_etf_align else None
            try:
                rep = base_rep(ha, hb, ids[b], cfg.loss)
            except DegenerateBatchError:
                rep = unsup_contrastive(ha, hb, replace(cfg.loss, lambda_rep=0.0))
            rep = _raw((ha, hb), (na, nb), rep)
            cls = _raw((ha, hb), (na, nb), cls_cross_entropy(ha, ids[b], state.W))
            total = base_total(align, rep, cls)
            _step(state, (ca, cb), total)
            sums["align"] += 0.0 if align is None else align.value
            sums["rep"] += rep.value
            sums["cls"] += cls.value
            sums["total"] += total.value
        report.loss_trace.append({"epoch": epoch + 1, **{k: v / len(batches) for k, v in sums.items()}})
        report.nc_trace.append({"epoch": epoch + 1, **(_safe_nc(embed(state, X), ids, state) or {})})

    if test is not None:
        X_test, y_test = test
        ev, _ = evaluate(state, X_test, y_test, set(labels))
        ev.loss_trace, ev.nc_trace = report.loss_trace, report.nc_trace
        report = ev
    return state, report


def _match_vectors(vectors, frame: EtfFrame, columns) -> dict:
    """Injective max-cosine map from rows of ``vectors`` to the given frame columns."""
    V = np.asarray(vectors, dtype=np.float64)
    V = V / np.linalg.norm(V, axis=1, keepdims=True)
    cos = V @ frame.P[:, columns]
    picked, _ = disc._solve_lex(1.0 - cos)
    return {i: int(columns[c]) for i, c in enumerate(picked)}


def _confident_targets(state, E_hat, probs, k_new, frozen):
    """Select confident samples and route each to a frame column.

    ``frozen`` carries centroids and their matched columns between epochs.
    Returns a target column per sample (-1 if not selected) and stats.
    """
    cfg = state.cfg
    subset = disc.select_confident(probs, cfg.alpha)
    sel = subset.indices
    pseudo = np.argmax(probs[sel], axis=1)
    stats = {"n_confident": int(len(sel)), "mean_entropy": float(np.mean(subset.entropies[sel]))}
    targets = np.full(len(E_hat), -1, dtype=np.int64)
    if not cfg.unsup_etf_align:
        return targets, stats

    if cfg.literal_unassigned_only:
        to_cluster = np.ones(len(sel), dtype=bool)
        ledger_for_routing = AllocationLedger(state.ledger.K)
    else:
        to_cluster = np.array([p.item() not in state.ledger.assignments for p in pseudo], dtype=bool)
        ledger_for_routing = state.ledger
    pts = E_hat[sel][to_cluster]
    clusters = np.full(len(sel), -1, dtype=np.int64)
    match = disc.PrototypeMatch({}, 0.0)
    if len(pts) and k_new:
        if frozen.get("centroids") is None or cfg.recompute_phi_each_epoch:
            k = min(k_new, len(pts))
            km = disc.kmeans(pts, k, seed=int(state.rng.integers(2**63)), n_init=cfg.kmeans_restarts)
            frozen["centroids"] = km.centers
            frozen["match"] = disc.match_prototypes(km.centers, state.frame, state.ledger)
            stats["inertia"] = km.inertia
        clusters[to_cluster] = np.argmax(pts @ frozen["centroids"].T, axis=1)
        match = frozen["match"]
        stats["match_objective"] = match.objective
    elif len(pts) and not k_new and cfg.literal_unassigned_only:
        return targets, stats

    keep = to_cluster & (clusters >= 0) | ~to_cluster
    sub = disc.ConfidentSubset(sel[keep], subset.entropies, cfg.alpha)
    routed = disc.route_alignment_targets(sub, pseudo[keep], ledger_for_routing, match, clusters[keep])
    targets[sub.indices] = routed
    return targets, stats


def run_incremental(state: SessionState, X, k_new: int, test=None) -> tuple[SessionState, StageReport]:
    """Unlabeled discovery session adding ``k_new`` classes.

    ``test`` is an optional ``(X_test, y_test, old_truth_labels)`` triple.
    """
    cfg = state.cfg
    X = np.asarray(X, dtype=np.float64)
    if state.W.shape[1] == 0:
        raise RuntimeError("run the base session first")
    if len(X) == 0:
        raise EmptySessionError("incremental session received no samples")
    if k_new > len(state.ledger.free):
        raise CapacityError(f"{k_new} new classes but only {len(state.ledger.free)} free prototypes")
    state.t += 1
    c_old = state.W.shape[1]
    state.classes_old = state.classes
    state.classes_new = list(range(c_old, c_old + k_new))

    if k_new:
        n_clusters = min(c_old + k_new, len(X))
        km = disc.kmeans(embed(state, X), n_clusters, seed=int(state.rng.integers(2**63)), n_init=cfg.kmeans_restarts)
        state.W = disc.expand_classifier(state.W, km, k_new, cfg.match_new_weight_norm)
        if state.velocity is not None:
            state.velocity[-1] = np.concatenate([state.velocity[-1], np.zeros((cfg.embed_dim, k_new))], axis=1)

    report = StageReport(state.t)
    frozen: dict = {}
    freeze = c_old if cfg.freeze_old_weights else 0
    for epoch in range(cfg.inc_epochs):
        E_hat = embed(state, X)
        probs = softmax(E_hat @ state.W)
        targets, stats = _confident_targets(state, E_hat, probs, k_new, frozen)
        report.selection_stats = stats
        sums = {"align": 0.0, "rep": 0.0, "cls": 0.0, "total": 0.0}
        batches = _batches(len(X), cfg.batch_size, state.rng)
        for b in batches:
            xa, xb = _views(state, X[b], cfg.inc_aug_sigma)
            fa, ca = state.encoder.forward(xa)
            fb, cb = state.encoder.forward(xb)
            ha, na = l2_normalize_rows(fa)
            hb, nb = l2_normalize_rows(fb)

            cls_l = unsup_cls(ha @ state.W, hb @ state.W, cfg.loss)
            cls_h = LossResult(cls_l.value, cls_l.grad_embeddings @ state.W.T, grad_weights=ha.T @ cls_l.grad_embeddings)
            cls = _raw((ha, hb), (na, nb), cls_h)
            if len(b) >= 2:
                rep = _raw((ha, hb), (na, nb), unsup_contrastive(ha, hb, cfg.loss))
            else:
                rep = LossResult(0.0, np.zeros_like(fa), np.zeros_like(fb))
            align = None
            rows = np.flatnonzero(targets[b] >= 0)
            if len(rows):
                part = unsup_alignment(fa[rows], targets[b][rows], state.frame)
                g = np.zeros_like(fa)
                g[rows] = part.grad_embeddings
                align = LossResult(part.value, g)
            total = incremental_total(align, rep, cls, cfg.loss)
            _step(state, (ca, cb), total, freeze)
            sums["align"] += 0.0 if align is None else align.value
            sums["rep"] += rep.value
            sums["cls"] += cls.value
            sums["total"] += total.value
        report.loss_trace.append({"epoch": epoch + 1, **{k: v / len(batches) for k, v in sums.items()}})

    _commit(state, X, k_new, frozen)

    if test is not None:
        X_test, y_test, old_truth = test
        ev, _ = evaluate(state, X_test, y_test, old_truth)
        ev.loss_trace, ev.selection_stats = report.loss_trace, report.selection_stats
        report = ev
    return state, report


def _commit(state: SessionState, X, k_new: int, frozen: dict):
    """Bind each new class to a free frame column."""
    if not k_new:
        return
    E_hat = embed(state, X)
    pred = np.argmax(E_hat @ state.W, axis=1)
    vecs = []
    for c in state.classes_new:
        members = E_hat[pred == c]
        vecs.append(members.mean(axis=0) if len(members) and np.linalg.norm(members.mean(axis=0)) > 0 else state.W[:, c])
    match = frozen.get("match")
    if match is not None and len(match.phi) == k_new:
        columns = sorted(match.phi.values())
    else:
        columns = state.ledger.free
    for i, col in _match_vectors(np.array(vecs), state.frame, columns).items():
        state.ledger.assign(state.classes_new[i], col)


def run_protocol(cfg: TrainConfig, stream, seed: int = 0) -> ProtocolResult:
    """Base session followed by one discovery session per remaining stage."""
    base = stream[0]
    state = init_state(cfg, base.train.X.shape[1], seed)
    state, rep0 = run_base(state, base.train.X, base.train.y, (base.test.X, base.test.y))
    reports = [rep0]
    seen = set(base.new_classes) | set(base.old_classes) | set(np.unique(base.train.y).tolist())
    for sd in stream[1:]:
        state, rep = run_incremental(state, sd.train.X, len(sd.new_classes), (sd.test.X, sd.test.y, set(seen)))
        reports.append(rep)
        seen |= set(sd.new_classes)
    if len(reports) > 1:
        m_f = forgetting_rate(reports[1:], rep0.acc_all)
        m_d = discovery_rate(reports[1:])
    else:
        m_f = m_d = None
    return ProtocolResult(reports, m_f, m_d, state)
