"""Discrete and probabilistic attributed graphs."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


def _onehot(indices, depth: int) -> np.ndarray:
    out = np.zeros((len(indices), depth))
    out[np.arange(len(indices)), indices] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class DiscreteGraph:
    """One-hot attributed graph on ``n`` nodes.

    ``A`` is n x n with a unit diagonal (node existence), ``E`` is
    n x n x d_e one-hot on edges and zero elsewhere, ``F`` is n x d_n one-hot.
    """

    A: np.ndarray
    E: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        E = np.asarray(self.E, dtype=np.float64)
        F = np.asarray(self.F, dtype=np.float64)
        n = A.shape[0]
        if A.shape != (n, n) or E.shape[:2] != (n, n) or E.ndim != 3 or F.ndim != 2 or F.shape[0] != n:
            raise ValueError(f"inconsistent shapes A{A.shape} E{E.shape} F{F.shape}")
        if not np.array_equal(A, A.T) or not np.array_equal(E, E.transpose(1, 0, 2)):
            raise ValueError("A and E must be symmetric")
        if n and not np.all(np.diag(A) == 1):
            raise ValueError("diagonal of A must be 1")
        off = A - np.eye(n)
        if not np.all((off == 0) | (off == 1)):
            raise ValueError("A must be binary")
        esum = E.sum(axis=2)
        if not (np.array_equal(esum, off) and np.all((E == 0) | (E == 1))):
            raise ValueError("E must be one-hot exactly on edges")
        if n and not (np.all(F.sum(axis=1) == 1) and np.all((F == 0) | (F == 1))):
            raise ValueError("rows of F must be one-hot")
        for name, arr in (("A", A), ("E", E), ("F", F)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_edges(cls, node_classes, edges, d_n: int, d_e: int) -> "DiscreteGraph":
        """Build from node class indices and ``(i, j, edge_class)`` triples."""
        n = len(node_classes)
        A = np.eye(n)
        E = np.zeros((n, n, d_e))
        for i, j, t in edges:
            if i == j:
                raise ValueError("self loops are not allowed")
            A[i, j] = A[j, i] = 1
            E[i, j, t] = E[j, i, t] = 1
        return cls(A, E, _onehot(list(node_classes), d_n))

    @classmethod
    def empty(cls, d_n: int, d_e: int) -> "DiscreteGraph":
        return cls(np.zeros((0, 0)), np.zeros((0, 0, d_e)), np.zeros((0, d_n)))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d_n(self) -> int:
        return self.F.shape[1]

    @property
    def d_e(self) -> int:
        return self.E.shape[2]

    @property
    def node_classes(self) -> np.ndarray:
        return self.F.argmax(axis=1) if self.n else np.zeros(0, dtype=int)

    def edges(self) -> list[tuple[int, int, int]]:
        """Undirected edges as ``(i, j, class)`` with ``i < j``."""
        ii, jj = np.nonzero(np.triu(self.A, 1))
        return [(int(i), int(j), int(self.E[i, j].argmax())) for i, j in zip(ii, jj)]

    def permute(self, perm) -> "DiscreteGraph":
        """Relabel so that new node ``p`` is old node ``perm[p]``."""
        perm = np.asarray(perm)
        return DiscreteGraph(self.A[np.ix_(perm, perm)], self.E[np.ix_(perm, perm)], self.F[perm])

    def __eq__(self, other):
        if not isinstance(other, DiscreteGraph):
            return NotImplemented
        return (np.array_equal(self.A, other.A) and np.array_equal(self.E, other.E)
                and np.array_equal(self.F, other.F))

    __hash__ = None

    def to_json(self) -> dict:
        return {"n": self.n, "A": self.A.astype(int).tolist(), "E": self.E.astype(int).tolist(),
                "F": self.F.astype(int).tolist(), "d_e": self.d_e, "d_n": self.d_n}

    @classmethod
    def from_json(cls, obj: dict) -> "DiscreteGraph":
        n, d_e, d_n = obj["n"], obj["d_e"], obj["d_n"]
        A = np.asarray(obj["A"], dtype=np.float64).reshape(n, n)
        E = np.asarray(obj["E"], dtype=np.float64).reshape(n, n, d_e)
        F = np.asarray(obj["F"], dtype=np.float64).reshape(n, d_n)
        return cls(A, E, F)


def dumps_graphs(graphs) -> str:
    return json.dumps([g.to_json() for g in graphs], separators=(",", ":"))


def loads_graphs(text: str) -> list[DiscreteGraph]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [DiscreteGraph.from_json(d) for d in data]


@dataclass(frozen=True, eq=False)
class ProbabilisticGraph:
    """Fully connected graph on ``k`` nodes with Bernoulli/multinomial entries.

    The diagonal of ``A`` holds node probabilities, off-diagonal entries edge
    probabilities.  The diagonal of ``E`` carries no meaning.
    """

    A: np.ndarray
    E: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        E = np.asarray(self.E, dtype=np.float64)
        F = np.asarray(self.F, dtype=np.float64)
        k = A.shape[0]
        if A.shape != (k, k) or E.shape[:2] != (k, k) or E.ndim != 3 or F.shape[0] != k:
            raise ValueError(f"inconsistent shapes A{A.shape} E{E.shape} F{F.shape}")
        for name, arr in (("A", A), ("E", E), ("F", F)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @property
    def d_n(self) -> int:
        return self.F.shape[1]

    @property
    def d_e(self) -> int:
        return self.E.shape[2]

    def check(self, atol: float = 1e-9):
        """Raise ``ValueError`` unless every probabilistic invariant holds."""
        A, E, F = self.A, self.E, self.F
        if np.any(A < 0) or np.any(A > 1):
            raise ValueError("A outside [0, 1]")
        if not np.allclose(A, A.T, atol=atol) or not np.allclose(E, E.transpose(1, 0, 2), atol=atol):
            raise ValueError("A/E not symmetric")
        if np.any(E < 0) or not np.allclose(E.sum(axis=2), 1, atol=atol):
            raise ValueError("edge attribute rows must be distributions")
        if np.any(F < 0) or not np.allclose(F.sum(axis=1), 1, atol=atol):
            raise ValueError("node attribute rows must be distributions")

    @classmethod
    def from_discrete(cls, g: DiscreteGraph, k: int | None = None) -> "ProbabilisticGraph":
        """Degenerate 0/1 version of ``g`` padded with absent nodes up to ``k``.

        Attribute rows where ``g`` has no node or edge are set to class 0 so
        that every row is still a distribution.
        """
        n = g.n
        k = n if k is None else k
        if k < n:
            raise ValueError(f"graph has {n} nodes, more than k={k}")
        A = np.zeros((k, k))
        A[:n, :n] = g.A
        E = np.zeros((k, k, g.d_e))
        E[:n, :n] = g.E
        empty = E.sum(axis=2) == 0
        E[empty, 0] = 1.0
        F = np.zeros((k, g.d_n))
        F[:n] = g.F
        F[n:, 0] = 1.0
        return cls(A, E, F)


@dataclass(frozen=True)
class GraphLabel:
    """Histogram of node classes."""

    y: tuple

    def __post_init__(self):
        if any(int(v) != v or v < 0 for v in self.y):
            raise ValueError("label entries must be non-negative integers")
        object.__setattr__(self, "y", tuple(int(v) for v in self.y))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.y, dtype=np.float64)

    def __len__(self):
        return len(self.y)


def label_of(g: DiscreteGraph) -> GraphLabel:
    return GraphLabel(tuple(int(v) for v in g.F.sum(axis=0)))


def maximum_spanning_forest(weights: np.ndarray, nodes) -> list[tuple[int, int]]:
    """Kruskal over the complete graph on ``nodes`` with ``weights[a, b]``.

    Edges are visited by decreasing weight, ties by lexicographic (a, b).
    """
    nodes = list(nodes)
    parent = {v: v for v in nodes}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    cand = [(-weights[a, b], a, b) for i, a in enumerate(nodes) for b in nodes[i + 1:]]
    cand.sort()
    tree = []
    for _, a, b in cand:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra
            tree.append((a, b))
            if len(tree) == len(nodes) - 1:
                break
    return tree


def point_estimate(pg: ProbabilisticGraph, connect: bool = False, threshold: float = 0.5) -> DiscreteGraph:
    """Discretize ``pg`` by thresholding existence and taking attribute argmax.

    With ``connect`` the maximum spanning tree over kept nodes is added so
    the result is connected.  Nodes are renumbered in increasing order.
    """
    A = pg.A
    keep = [a for a in range(pg.k) if A[a, a] >= threshold]
    if not keep:
        return DiscreteGraph.empty(pg.d_n, pg.d_e)
    pairs = {(a, b) for i, a in enumerate(keep) for b in keep[i + 1:] if A[a, b] >= threshold}
    if connect:
        pairs.update(maximum_spanning_forest(A, keep))
    pos = {a: i for i, a in enumerate(keep)}
    classes = [int(np.argmax(pg.F[a])) for a in keep]
    edges = [(pos[a], pos[b], int(np.argmax(pg.E[a, b]))) for a, b in sorted(pairs)]
    return DiscreteGraph.from_edges(classes, edges, pg.d_n, pg.d_e)
