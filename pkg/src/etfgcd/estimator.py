"""Scikit-learn style wrapper around the session pipeline, plus checkpoints."""
from __future__ import annotations

import dataclasses
import json

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .encoder import Encoder
from .etf import AllocationLedger, EtfFrame
from .losses import LossConfig
from .numkit import softmax
from .session import PRESETS, SessionState, TrainConfig, embed, init_state, run_base, run_incremental

CHECKPOINT_FORMAT = "etfgcd-checkpoint"
CHECKPOINT_VERSION = 1


def config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["hidden_dims"] = list(cfg.hidden_dims)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    loss = LossConfig(**d.pop("loss", {}))
    if "hidden_dims" in d:
        d["hidden_dims"] = tuple(int(h) for h in d["hidden_dims"])
    return TrainConfig(loss=loss, **d)


def save_checkpoint(state: SessionState, path, labels=None) -> None:
    """Write encoder, head, frame and ledger to one ``.npz`` archive."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "t": state.t,
        "classes_old": [int(c) for c in state.classes_old],
        "classes_new": [int(c) for c in state.classes_new],
        "ledger": [[int(c), int(col)] for c, col in sorted(state.ledger.assignments.items())],
        "frame_seed": state.frame.seed,
        "config": config_to_dict(state.cfg),
        "rng": state.rng.bit_generator.state,
        "labels": None if labels is None else [x.item() if hasattr(x, "item") else x for x in labels],
        "n_velocity": 0 if state.velocity is None else len(state.velocity),
    }
    arrays = state.encoder.to_arrays("enc_")
    arrays["W"] = state.W
    arrays["P"] = state.frame.P
    # momentum buffers, so a resumed session continues exactly
    for i, v in enumerate(state.velocity or []):
        arrays[f"vel{i}"] = v
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[SessionState, list | None]:
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z:
            raise ValueError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint {meta.get('format')!r} v{meta.get('version')}")
        encoder = Encoder.from_arrays(z, "enc_")
        W = np.array(z["W"])
        P = np.array(z["P"])
        n_vel = meta.get("n_velocity", 0)
        velocity = [np.array(z[f"vel{i}"]) for i in range(n_vel)] if n_vel else None
    cfg = config_from_dict(meta["config"])
    frame = EtfFrame(P.shape[0], P.shape[1], P, meta["frame_seed"])
    ledger = AllocationLedger(P.shape[1], {c: col for c, col in meta["ledger"]})
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng"]
    state = SessionState(meta["t"], meta["classes_old"], meta["classes_new"], W, ledger, encoder, frame, cfg, rng, velocity)
    return state, meta["labels"]


class GoalDiscoverer(BaseEstimator):
    """Continual category discovery over a frozen simplex frame.

    ``fit`` runs the labelled base session; each ``partial_fit`` call runs one
    unlabelled session that discovers ``n_new_classes`` categories. Discovered
    classes get fresh integer labels after the largest base label (or
    ``"novel_<j>"`` when base labels are not integers).

    ``None`` for a training knob means "take it from ``preset``".
    """

    def __init__(
        self,
        preset="desk",
        alpha=0.7,
        tau=0.07,
        lambda_rep=0.35,
        lambda_A=0.7,
        epsilon=2.0,
        teacher_temp=0.05,
        base_epochs=None,
        inc_epochs=None,
        learning_rate=None,
        batch_size=None,
        hidden_dims=(128,),
        embed_dim=32,
        n_prototypes=20,
        aug_sigma=0.15,
        inc_aug_sigma=0.05,
        sup_etf_align=True,
        unsup_etf_align=True,
        random_state=0,
    ):
        self.preset = preset
        self.alpha = alpha
        self.tau = tau
        self.lambda_rep = lambda_rep
        self.lambda_A = lambda_A
        self.epsilon = epsilon
        self.teacher_temp = teacher_temp
        self.base_epochs = base_epochs
        self.inc_epochs = inc_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.n_prototypes = n_prototypes
        self.aug_sigma = aug_sigma
        self.inc_aug_sigma = inc_aug_sigma
        self.sup_etf_align = sup_etf_align
        self.unsup_etf_align = unsup_etf_align
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        knobs = {k: getattr(self, k) for k in ("base_epochs", "inc_epochs", "learning_rate", "batch_size")}
        knobs = {k: v for k, v in knobs.items() if v is not None}
        loss = LossConfig(tau=self.tau, lambda_rep=self.lambda_rep, lambda_A=self.lambda_A, epsilon=self.epsilon, teacher_temp=self.teacher_temp)
        return TrainConfig.preset(
            self.preset,
            loss=loss,
            alpha=self.alpha,
            hidden_dims=tuple(self.hidden_dims),
            embed_dim=self.embed_dim,
            n_prototypes=self.n_prototypes,
            aug_sigma=self.aug_sigma,
            inc_aug_sigma=self.inc_aug_sigma,
            sup_etf_align=self.sup_etf_align,
            unsup_etf_align=self.unsup_etf_align,
            **knobs,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        labels = np.unique(y)
        if len(labels) < 2:
            raise ValueError("the base session needs at least 2 classes")
        state = init_state(self._config(), X.shape[1], self.random_state)
        state, report = run_base(state, X, y, label_order=labels.tolist())
        self.state_ = state
        self.classes_ = labels
        self.n_features_in_ = X.shape[1]
        self.reports_ = [report]
        return self

    def partial_fit(self, X, n_new_classes: int):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        if n_new_classes < 0:
            raise ValueError("n_new_classes must be non-negative")
        self.state_, report = run_incremental(self.state_, X, int(n_new_classes))
        self.classes_ = np.concatenate([self.classes_, self._fresh_labels(int(n_new_classes))])
        self.reports_.append(report)
        return self

    def _fresh_labels(self, n):
        base = self.classes_
        if np.issubdtype(base.dtype, np.integer):
            start = int(base.max()) + 1
            return np.arange(start, start + n, dtype=base.dtype)
        taken = sum(str(c).startswith("novel_") for c in base)
        return np.array([f"novel_{taken + j}" for j in range(n)], dtype=object)

    def _check(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        return X

    def transform(self, X):
        """Unit-length embeddings."""
        X = self._check(X)
        return embed(self.state_, X)

    def decision_function(self, X):
        return self.transform(X) @ self.state_.W

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)

    def save(self, path) -> None:
        check_is_fitted(self, "state_")
        save_checkpoint(self.state_, path, list(self.classes_))

    @classmethod
    def load(cls, path) -> "GoalDiscoverer":
        state, labels = load_checkpoint(path)
        cfg = state.cfg
        est = cls(
            alpha=cfg.alpha,
            tau=cfg.loss.tau,
            lambda_rep=cfg.loss.lambda_rep,
            lambda_A=cfg.loss.lambda_A,
            epsilon=cfg.loss.epsilon,
            teacher_temp=cfg.loss.teacher_temp,
            base_epochs=cfg.base_epochs,
            inc_epochs=cfg.inc_epochs,
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            hidden_dims=cfg.hidden_dims,
            embed_dim=cfg.embed_dim,
            n_prototypes=cfg.n_prototypes,
            aug_sigma=cfg.aug_sigma,
            inc_aug_sigma=cfg.inc_aug_sigma,
            sup_etf_align=cfg.sup_etf_align,
            unsup_etf_align=cfg.unsup_etf_align,
        )
        est.state_ = state
        est.n_features_in_ = state.encoder.layer_dims[0]
        est.classes_ = np.array(labels if labels is not None else list(range(state.W.shape[1])))
        est.reports_ = []
        return est
