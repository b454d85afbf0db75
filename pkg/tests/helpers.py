"""Shared fixtures-as-functions for the test suite."""
import numpy as np

from etfgcd.encoder import Encoder


def pack(enc: Encoder) -> np.ndarray:
    return np.concatenate([p.ravel() for p in enc.params])


def unpack(enc: Encoder, theta: np.ndarray) -> None:
    i = 0
    for p in enc.params:
        p[...] = theta[i:i + p.size].reshape(p.shape)
        i += p.size


def encoder_objective(enc: Encoder, loss_of_outputs):
    """Wrap ``loss_of_outputs(outputs) -> float`` as a function of flat parameters."""
    base = pack(enc)

    def f(theta):
        unpack(enc, theta)
        try:
            return loss_of_outputs()
        finally:
            unpack(enc, base)

    return f


def flat_grads(enc, cache, grad_out):
    grads, _ = enc.backward(cache, grad_out)
    return np.concatenate([g.ravel() for g in grads])


def brute_lex_assignment(cost):
    """Exhaustive min-cost injective row->column map; lexicographically smallest among optima."""
    from itertools import permutations

    k, n = cost.shape
    best, best_cols = None, None
    for cols in permutations(range(n), k):  # lexicographic order
        v = sum(cost[i, c] for i, c in enumerate(cols))
        if best is None or v < best:
            best, best_cols = v, cols
    return np.array(best_cols), best
