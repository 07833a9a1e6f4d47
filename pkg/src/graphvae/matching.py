"""Second-order graph matching between an input graph and a predicted graph.

Affinities are stored as a dense ``(k*k, k*k)`` matrix in column-replica
layout: candidate ``(input node i, predicted node a)`` lives at row
``i * k + a``, which is the column-wise flattening of a k x k assignment
matrix indexed ``[a, i]``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.optimize import linear_sum_assignment

from .graph import DiscreteGraph, ProbabilisticGraph

log = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 75
UNDERFLOW = 1e-30


def _padded(g: DiscreteGraph, k: int):
    n = g.n
    if n > k:
        raise ValueError(f"input graph has {n} nodes but k={k}")
    A = np.zeros((k, k))
    A[:n, :n] = g.A
    E = np.zeros((k, k, g.d_e))
    E[:n, :n] = g.E
    F = np.zeros((k, g.d_n))
    F[:n] = g.F
    return A, E, F


def affinity_tensor(g: DiscreteGraph, pg: ProbabilisticGraph) -> np.ndarray:
    """Pairwise similarities as a 4-d array ``S[i, a, j, b]``.

    Edge pairs score attribute agreement times the existence of the input
    edge, the predicted edge and both predicted endpoints; node pairs score
    attribute agreement times the predicted node probability.
    """
    if g.d_e != pg.d_e or g.d_n != pg.d_n:
        raise ValueError(f"attribute dims differ: input ({g.d_e}, {g.d_n}) vs predicted ({pg.d_e}, {pg.d_n})")
    k = pg.k
    A, E, F = _padded(g, k)
    At, Et, Ft = pg.A, pg.E, pg.F
    node_p = np.diag(At)
    off_in = A * (1 - np.eye(k))
    off_pred = At * np.outer(node_p, node_p) * (1 - np.eye(k))
    edge = np.einsum("ijt,abt->iajb", E, Et)
    edge *= off_in[:, None, :, None]
    edge *= off_pred[None, :, None, :]
    node = (F @ Ft.T) * node_p[None, :]
    S = edge
    ii, aa = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    S[ii, aa, ii, aa] = node
    return S


def build_affinity(g: DiscreteGraph, pg: ProbabilisticGraph) -> np.ndarray:
    """Affinity as a ``(k*k, k*k)`` matrix in column-replica layout."""
    k = pg.k
    return affinity_tensor(g, pg).reshape(k * k, k * k)


def _mpm(S4: np.ndarray, iterations: int) -> np.ndarray:
    """Max-pooling matching on a stack of affinity tensors ``(B, k, k, k, k)``.

    Returns iterates shaped ``(B, k, k)`` indexed ``[i, a]``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    B, k = S4.shape[0], S4.shape[1]
    uniform = np.full((B, k, k), 1.0 / k)
    x = uniform.copy()
    for _ in range(iterations):
        # new[i, a] = sum_j max_b S[i, a, j, b] x[j, b]; the j == i term is the unary one
        x = (S4 * x[:, None, None, :, :]).max(axis=4).sum(axis=3)
        norm = np.sqrt((x.reshape(B, -1) ** 2).sum(axis=1))
        dead = norm < UNDERFLOW
        if np.any(dead):
            log.warning("matching iterate vanished for %d pair(s); reset to uniform", int(dead.sum()))
            x[dead] = uniform[dead]
            norm[dead] = 1.0
        x = x / norm[:, None, None]
    return x


def max_pool_match(S: np.ndarray, iterations: int = DEFAULT_ITERATIONS, n: int | None = None) -> np.ndarray:
    """Continuous assignment ``Xstar`` (k x n) from an affinity matrix.

    ``S`` may be the ``(k*k, k*k)`` matrix or the 4-d tensor.  An all-zero
    affinity yields the uniform assignment.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim == 2:
        k = int(round(np.sqrt(S.shape[0])))
        S = S.reshape(k, k, k, k)
    k = S.shape[0]
    n = k if n is None else n
    x = _mpm(S[None], iterations)[0]
    return x[:n].T.copy()


def discretize(Xstar: np.ndarray) -> np.ndarray:
    """Binary one-to-one assignment (k x n) maximizing total ``Xstar`` score.

    Every column is matched; surplus rows stay unassigned.
    """
    Xstar = np.asarray(Xstar, dtype=np.float64)
    k, n = Xstar.shape
    if n > k:
        raise ValueError("Xstar must have at least as many rows as columns")
    rows, cols = linear_sum_assignment(Xstar, maximize=True)
    X = np.zeros((k, n))
    X[rows, cols] = 1.0
    return X


def match(g: DiscreteGraph, pg: ProbabilisticGraph, iterations: int = DEFAULT_ITERATIONS) -> np.ndarray:
    return match_batch([(g, pg)], iterations)[0]


def match_batch(pairs, iterations: int = DEFAULT_ITERATIONS, threads: int = 1,
                return_continuous: bool = False):
    """Match every ``(g, pg)`` pair using zero-padded, stacked affinities.

    All pairs must share ``k``, ``d_e`` and ``d_n``.  Results are identical to
    matching each pair on its own.
    """
    pairs = list(pairs)
    if not pairs:
        return []
    k, d_e, d_n = pairs[0][1].k, pairs[0][1].d_e, pairs[0][1].d_n
    for g, pg in pairs:
        if (pg.k, pg.d_e, pg.d_n) != (k, d_e, d_n) or (g.d_e, g.d_n) != (d_e, d_n):
            raise ValueError("all pairs in a batch must share k, d_e and d_n")
    S4 = np.stack([affinity_tensor(g, pg) for g, pg in pairs])
    x = _mpm(S4, iterations)
    stars = [x[b, :g.n].T.copy() for b, (g, _) in enumerate(pairs)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            Xs = list(pool.map(discretize, stars))
    else:
        Xs = [discretize(s) for s in stars]
    if return_continuous:
        return Xs, stars
    return Xs


def assignment_to_perm(X: np.ndarray) -> np.ndarray:
    """For each input node ``i`` the predicted node ``a`` with ``X[a, i] = 1``."""
    X = np.asarray(X)
    if not (np.all(X.sum(axis=0) == 1) and np.all(X.sum(axis=1) <= 1)):
        raise ValueError("X is not a one-to-one assignment covering every input node")
    return X.argmax(axis=0)


def quadratic_score(S: np.ndarray, X: np.ndarray) -> float:
    """``x^T S x`` for a k x n assignment padded to k x k, column-replica order."""
    k, n = X.shape
    full = np.zeros((k, k))
    full[:, :n] = X
    x = full.T.reshape(-1)
    return float(x @ S.reshape(k * k, k * k) @ x)
