"""Flat TOML run configuration with key- and line-level diagnostics."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .data import StreamSpec
from .losses import LossConfig
from .session import PRESETS, TrainConfig


class ConfigError(ValueError):
    pass


# key -> (kind, default). A default of None means "inherit from the preset"
# for training knobs, or "absent" for optional inputs.
KEYS = {
    # run
    "seed": ("int", None),
    "output_dir": ("str", None),
    "preset": ("str", "desk"),
    # objective
    "alpha": ("float", 0.7),
    "lambda_A": ("float", 0.7),
    "lambda_rep": ("float", 0.35),
    "tau": ("float", 0.07),
    "epsilon": ("float", 2.0),
    "teacher_temp": ("float", 0.05),
    # optimizer / encoder
    "base_epochs": ("int", None),
    "inc_epochs": ("int", None),
    "learning_rate": ("float", None),
    "momentum": ("float", 0.9),
    "batch_size": ("int", None),
    "aug_sigma": ("float", 0.15),
    "inc_aug_sigma": ("float", 0.05),
    "hidden_dims": ("int_list", [128]),
    # frame
    "embed_dim": ("int", 32),
    "n_prototypes": ("int", 20),
    "frame_seed": ("int", 0),
    # ablation flags
    "sup_etf_align": ("bool", True),
    "unsup_etf_align": ("bool", True),
    "literal_eq5_denominator": ("bool", False),
    "literal_unassigned_only": ("bool", False),
    "recompute_phi_each_epoch": ("bool", False),
    "freeze_old_weights": ("bool", False),
    "kmeans_restarts": ("int", 10),
    # stream: synthetic unless embeddings_path is given
    "embeddings_path": ("str", None),
    "total_classes": ("int", 20),
    "base_classes": ("int", None),
    "stages": ("int", 2),
    "new_per_stage": ("int_list", None),
    "samples_per_class_train": ("int", 40),
    "samples_per_class_test": ("int", 20),
    "old_class_mix_fraction": ("float", 0.5),
    "input_dim": ("int", 32),
    "class_separation": ("float", 60.0),
    "noise_sigma": ("float", 0.05),
    "stream_seed": ("int", None),
    # sweeps
    "n_seeds": ("int", 5),
    "alphas": ("float_list", [0.1, 0.3, 0.5, 0.7, 0.9, 1.0]),
}

REQUIRED = ("seed", "output_dir")

_STREAM_KEYS = (
    "total_classes", "base_classes", "stages", "new_per_stage", "samples_per_class_train",
    "samples_per_class_test", "old_class_mix_fraction", "input_dim", "class_separation", "noise_sigma",
)


@dataclass
class RunConfig:
    values: dict
    source: str | None = None
    lines: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self, **overrides) -> TrainConfig:
        v = {**self.values, **overrides}
        try:
            loss = LossConfig(
                tau=v["tau"], lambda_rep=v["lambda_rep"], lambda_A=v["lambda_A"], epsilon=v["epsilon"],
                teacher_temp=v["teacher_temp"], literal_eq5_denominator=v["literal_eq5_denominator"],
            )
            knobs = {k: v[k] for k in ("base_epochs", "inc_epochs", "learning_rate", "batch_size") if v[k] is not None}
            return TrainConfig.preset(
                v["preset"], loss=loss, alpha=v["alpha"], momentum=v["momentum"], aug_sigma=v["aug_sigma"], inc_aug_sigma=v["inc_aug_sigma"],
                hidden_dims=tuple(v["hidden_dims"]), embed_dim=v["embed_dim"], n_prototypes=v["n_prototypes"],
                frame_seed=v["frame_seed"], sup_etf_align=v["sup_etf_align"], unsup_etf_align=v["unsup_etf_align"],
                literal_unassigned_only=v["literal_unassigned_only"], recompute_phi_each_epoch=v["recompute_phi_each_epoch"],
                freeze_old_weights=v["freeze_old_weights"], kmeans_restarts=v["kmeans_restarts"], **knobs,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(self._where(exc)) from None

    def stream_spec(self, seed: int) -> StreamSpec:
        v = self.values
        try:
            return StreamSpec(seed=seed if v["stream_seed"] is None else v["stream_seed"], **{k: v[k] for k in _STREAM_KEYS})
        except (TypeError, ValueError) as exc:
            raise ConfigError(self._where(exc)) from None

    def _where(self, exc) -> str:
        msg = str(exc)
        for key, line in self.lines.items():
            if re.search(rf"\b{re.escape(key)}\b", msg):
                return f"{self.source or '<config>'}:{line}: {key}: {msg}"
        return f"{self.source or '<config>'}: {msg}"

    def echo(self) -> dict:
        """Resolved experiment parameters, without the output location."""
        out = dict(self.values)
        tc = self.train_config()
        for k in ("base_epochs", "inc_epochs", "learning_rate", "batch_size"):
            out[k] = getattr(tc, k)
        if not out["embeddings_path"]:
            spec = self.stream_spec(self.values["seed"])
            out["base_classes"], out["new_per_stage"], out["stream_seed"] = spec.base_classes, spec.new_per_stage, spec.seed
        out.pop("output_dir", None)
        return dict(sorted(out.items()))


def _key_lines(text: str) -> dict:
    out = {}
    for i, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*([A-Za-z0-9_\-]+)\s*=", line)
        if m and m.group(1) not in out:
            out[m.group(1)] = i
    return out


def _coerce(key, kind, value, where):
    def bad(expected):
        return ConfigError(f"{where}: {key}: expected {expected}, got {value!r}")

    if kind == "bool":
        if not isinstance(value, bool):
            raise bad("true or false")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if kind in ("int_list", "float_list"):
        if not isinstance(value, list):
            raise bad("a list")
        inner = "int" if kind == "int_list" else "float"
        return [_coerce(key, inner, x, where) for x in value]
    raise AssertionError(kind)


def parse_config(text: str = "", source: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Parse flat TOML text; ``overrides`` (e.g. from flags) win over file values."""
    name = source or "<config>"
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    lines = _key_lines(text)
    values = {}
    for key, value in raw.items():
        where = f"{name}:{lines.get(key, '?')}"
        if isinstance(value, dict):
            raise ConfigError(f"{where}: {key}: tables are not supported, keep all keys at top level")
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _coerce(key, KEYS[key][0], value, where)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _coerce(key, KEYS[key][0], value, f"{name}:<flag>")
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"{name}: missing required key {key!r}")
    if values.get("preset", "desk") not in PRESETS:
        raise ConfigError(f"{name}:{lines.get('preset', '?')}: preset: must be one of {sorted(PRESETS)}")
    for key, (_, default) in KEYS.items():
        values.setdefault(key, default)
    if values["n_seeds"] < 1:
        raise ConfigError(f"{name}:{lines.get('n_seeds', '?')}: n_seeds: must be >= 1")
    for a in values["alphas"]:
        if not 0 < a <= 1:
            raise ConfigError(f"{name}:{lines.get('alphas', '?')}: alphas: each value must lie in (0, 1], got {a}")
    cfg = RunConfig(values, source, lines)
    cfg.train_config()
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config("", None, overrides)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)
