"""Multi-layer perceptron feature map with hand-written reverse mode."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import make_rng

CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 30

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class ForwardCache:
    inputs: list
    pre_activations: list
    version: int


class Encoder:
    """Affine layers with a leaky rectifier between them; the last layer is linear."""

    def __init__(self, layer_dims, weights=None, biases=None, slope: float = 0.01, seed=0):
        self.layer_dims = [int(d) for d in layer_dims]
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dimensions")
        self.slope = slope
        if weights is None:
            rng = make_rng(seed)
            weights = [rng.standard_normal((i, o)) * np.sqrt(2.0 / i) for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:])]
        if biases is None:
            biases = [np.zeros(o) for o in self.layer_dims[1:]]
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for (i, o), w, b in zip(zip(self.layer_dims[:-1], self.layer_dims[1:]), self.weights, self.biases):
            if w.shape != (i, o) or b.shape != (o,):
                raise ValueError(f"layer shape mismatch: expected {(i, o)}, got W{w.shape} b{b.shape}")
        self.version = 0

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def touch(self):
        """Mark parameters as changed; caches from earlier forwards become stale."""
        self.version += 1

    def _act(self, z):
        return np.where(z > 0, z, self.slope * z)

    def forward(self, X) -> tuple[np.ndarray, ForwardCache]:
        h = np.asarray(X, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.layer_dims[0]:
            raise ValueError(f"expected inputs of width {self.layer_dims[0]}, got shape {h.shape}")
        inputs, pres = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pres.append(z)
            h = z if i == last else self._act(z)
        return h, ForwardCache(inputs, pres, self.version)

    def __call__(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, cache: ForwardCache, grad_output) -> tuple[list[np.ndarray], np.ndarray]:
        """Return (gradients aligned with ``params``, gradient w.r.t. inputs)."""
        if cache.version != self.version:
            raise StaleCacheError("parameters changed since this forward pass")
        g = np.asarray(grad_output, dtype=np.float64)
        grads = [None] * (2 * len(self.weights))
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i != last:
                g = g * np.where(cache.pre_activations[i] > 0, 1.0, self.slope)
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def copy(self) -> "Encoder":
        enc = Encoder(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.slope)
        enc.version = self.version
        return enc

    def save(self, path) -> None:
        np.savez(path, **self.to_arrays())

    @classmethod
    def load(cls, path) -> "Encoder":
        with np.load(path) as z:
            return cls.from_arrays(z)

    @classmethod
    def from_arrays(cls, z, prefix: str = "") -> "Encoder":
        if int(z[prefix + "version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z[prefix + 'version'])}")
        dims = [int(d) for d in z[prefix + "layer_dims"]]
        n = len(dims) - 1
        return cls(dims, [z[f"{prefix}W{i}"] for i in range(n)], [z[f"{prefix}b{i}"] for i in range(n)], float(z[prefix + "slope"]))

    def to_arrays(self, prefix: str = "") -> dict:
        out = {prefix + "version": np.array(CHECKPOINT_VERSION), prefix + "layer_dims": np.array(self.layer_dims), prefix + "slope": np.array(self.slope)}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], cfg: SgdConfig, velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """In-place momentum update: v <- momentum * v - lr * g; theta <- theta + v. Returns the new velocity."""
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_v = []
    for p, g, v in zip(params, grads, velocity, strict=True):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v = cfg.momentum * v - cfg.learning_rate * g
        p += v
        new_v.append(v)
    return new_v
