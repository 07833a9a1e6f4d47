"""Molecule semantics on top of :class:`DiscreteGraph`.

Validity here is a plain valence check, not a full sanitizer: a molecule is
valid when it is non-empty and connected, no atom exceeds its maximum
valence (implicit hydrogens fill any deficit), and aromatic bonds only occur
in rings of atoms with at least two aromatic bonds each.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import DiscreteGraph, GraphLabel, label_of


@dataclass(frozen=True)
class AtomVocabulary:
    symbols: tuple
    valences: tuple

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate element symbol")
        if len(self.symbols) != len(self.valences) or any(v < 1 for v in self.valences):
            raise ValueError("one valence >= 1 per element")

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self.symbols.index(symbol)


@dataclass(frozen=True)
class BondVocabulary:
    names: tuple
    orders: tuple
    aromatic: int | None = None  # index of the aromatic class, if any

    def __post_init__(self):
        if len(self.names) != len(self.orders) or any(o <= 0 for o in self.orders):
            raise ValueError("one positive order per bond class")

    def __len__(self):
        return len(self.names)


QM9_ATOMS = AtomVocabulary(("C", "N", "O", "F"), (4, 3, 2, 1))
ZINC_ATOMS = AtomVocabulary(("C", "N", "O", "F", "P", "S", "Cl", "Br", "I"), (4, 3, 2, 1, 5, 6, 1, 1, 1))
BONDS = BondVocabulary(("single", "double", "triple", "aromatic"), (1.0, 2.0, 3.0, 1.5), aromatic=3)


@dataclass(frozen=True)
class Validity:
    ok: bool
    reason: str = ""

    def __bool__(self):
        return self.ok


VALID = Validity(True)


def _components(n: int, adj: list[list[int]]) -> int:
    seen = [False] * n
    count = 0
    for s in range(n):
        if seen[s]:
            continue
        count += 1
        stack = [s]
        seen[s] = True
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
    return count


def check_valid(g: DiscreteGraph, atoms: AtomVocabulary = QM9_ATOMS, bonds: BondVocabulary = BONDS) -> Validity:
    if g.d_n != len(atoms) or g.d_e != len(bonds):
        raise ValueError(f"graph attribute dims ({g.d_n}, {g.d_e}) do not fit the vocabularies")
    n = g.n
    if n == 0:
        return Validity(False, "empty")
    edges = g.edges()
    adj = [[] for _ in range(n)]
    for i, j, _ in edges:
        adj[i].append(j)
        adj[j].append(i)
    if _components(n, adj) > 1:
        return Validity(False, "disconnected")

    total = [0.0] * n
    for i, j, t in edges:
        total[i] += bonds.orders[t]
        total[j] += bonds.orders[t]
    classes = g.node_classes
    for v in range(n):
        cap = atoms.valences[classes[v]]
        if math.ceil(total[v] - 1e-9) > cap:
            return Validity(False, f"valence exceeded on atom {v} ({atoms.symbols[classes[v]]})")

    if bonds.aromatic is not None:
        arom = [(i, j) for i, j, t in edges if t == bonds.aromatic]
        if arom:
            deg = [0] * n
            for i, j in arom:
                deg[i] += 1
                deg[j] += 1
            for i, j in arom:
                if deg[i] < 2 or deg[j] < 2:
                    return Validity(False, "aromatic bond on atom with fewer than two aromatic bonds")
                if not _on_cycle(n, arom, (i, j)):
                    return Validity(False, "aromatic bond outside a ring")
    return VALID


def _on_cycle(n: int, edges, e) -> bool:
    # an edge lies on a cycle iff its endpoints stay connected without it
    adj = [[] for _ in range(n)]
    for a, b in edges:
        if (a, b) == e:
            continue
        adj[a].append(b)
        adj[b].append(a)
    target, stack, seen = e[1], [e[0]], {e[0]}
    while stack:
        v = stack.pop()
        if v == target:
            return True
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return False


def implicit_hydrogens(g: DiscreteGraph, atoms: AtomVocabulary = QM9_ATOMS, bonds: BondVocabulary = BONDS) -> list[int]:
    total = np.zeros(g.n)
    for i, j, t in g.edges():
        total[i] += bonds.orders[t]
        total[j] += bonds.orders[t]
    return [max(0, atoms.valences[c] - math.ceil(total[v] - 1e-9)) for v, c in enumerate(g.node_classes)]


# -- canonical form -------------------------------------------------------------

def _refine(colors: list[int], nbrs: list[list[tuple[int, int]]]) -> list[int]:
    """Colour refinement until stable; colours are canonical ranks."""
    while True:
        sigs = [(colors[v], tuple(sorted((t, colors[w]) for w, t in nbrs[v]))) for v in range(len(colors))]
        ranks = {s: r for r, s in enumerate(sorted(set(sigs)))}
        new = [ranks[s] for s in sigs]
        if len(set(new)) == len(set(colors)):
            return new
        colors = new


def _encode(order: list[int], classes, edge_map) -> tuple:
    pos = {v: i for i, v in enumerate(order)}
    nodes = tuple(int(classes[v]) for v in order)
    es = sorted((min(pos[a], pos[b]), max(pos[a], pos[b]), t) for (a, b), t in edge_map.items())
    return nodes, tuple(es)


def canonical_key(g: DiscreteGraph) -> str:
    """String equal for two graphs exactly when they are isomorphic.

    Colour refinement seeded by (node class, degree), then individualization
    of the first non-singleton colour cell, keeping the smallest encoding
    over all branches.  Branches on structurally interchangeable nodes
    (same class, same neighbours) are explored once.
    """
    n = g.n
    classes = g.node_classes
    edges = g.edges()
    nbrs = [[] for _ in range(n)]
    edge_map = {}
    for i, j, t in edges:
        nbrs[i].append((j, t))
        nbrs[j].append((i, t))
        edge_map[(i, j)] = t
    seed = [(int(classes[v]), len(nbrs[v])) for v in range(n)]
    ranks = {s: r for r, s in enumerate(sorted(set(seed)))}
    colors = _refine([ranks[s] for s in seed], nbrs)

    nbr_sets = [frozenset(x) for x in nbrs]

    def twins(u, v):
        return ({x for x in nbr_sets[u] if x[0] != v} == {x for x in nbr_sets[v] if x[0] != u}
                and classes[u] == classes[v])

    best = None

    def search(colors):
        nonlocal best
        cells = {}
        for v, c in enumerate(colors):
            cells.setdefault(c, []).append(v)
        target = next((c for c in sorted(cells) if len(cells[c]) > 1), None)
        if target is None:
            order = sorted(range(n), key=lambda v: colors[v])
            code = _encode(order, classes, edge_map)
            if best is None or code < best:
                best = code
            return
        tried = []
        for v in cells[target]:
            # swapping twins is an automorphism, so their branches give the same codes
            if any(twins(u, v) for u in tried):
                continue
            tried.append(v)
            trial = [2 * c for c in colors]
            trial[v] -= 1
            search(_refine(trial, nbrs))

    search(colors)
    nodes, es = best if best is not None else ((), ())
    return "{}|{}|{}".format(n, ".".join(map(str, nodes)), ",".join(f"{a}-{b}:{t}" for a, b, t in es))


@dataclass
class MoleculeRecord:
    graph: DiscreteGraph
    label: GraphLabel = None
    key: str = ""
    title: str = field(default="", compare=False)

    def __post_init__(self):
        if self.label is None:
            self.label = label_of(self.graph)
        if not self.key:
            self.key = canonical_key(self.graph)


def formula(g: DiscreteGraph, atoms: AtomVocabulary = QM9_ATOMS) -> str:
    counts = label_of(g).y
    return "".join(f"{s}{c if c > 1 else ''}" for s, c in zip(atoms.symbols, counts) if c)
