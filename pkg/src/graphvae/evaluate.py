"""Decoder quality metrics, latent traversals and the matching robustness benchmark."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .chem import BONDS, QM9_ATOMS, AtomVocabulary, BondVocabulary, canonical_key, check_valid
from .graph import DiscreteGraph, GraphLabel, ProbabilisticGraph, label_of, point_estimate
from .matching import DEFAULT_ITERATIONS, assignment_to_perm, match_batch

log = logging.getLogger(__name__)

INVALID, WRONG_LABEL, CORRECT = "invalid", "valid-wrong-label", "valid-correct"


# -- decoder quality ---------------------------------------------------------------

@dataclass
class LabelQuality:
    label: GraphLabel | None
    freq: float
    n_s: int
    valid: float
    accurate: float
    unique: float
    novel: float


@dataclass
class QualityReport:
    per_label: list
    valid: float
    accurate: float
    unique: float
    novel: float
    n_s: int
    index_size: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "freq", "valid", "accurate", "unique", "novel"])
        for q in self.per_label:
            name = "-" if q.label is None else " ".join(map(str, q.label.y))
            w.writerow([name, repr(q.freq), repr(q.valid), repr(q.accurate), repr(q.unique), repr(q.novel)])
        w.writerow(["all", "1.0", repr(self.valid), repr(self.accurate), repr(self.unique), repr(self.novel)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"valid": self.valid, "accurate": self.accurate, "unique": self.unique, "novel": self.novel,
                "n_s": self.n_s, "index_size": self.index_size, "labels": len(self.per_label)}


def classify(g: DiscreteGraph, label: GraphLabel | None, atoms: AtomVocabulary = QM9_ATOMS,
             bonds: BondVocabulary = BONDS) -> str:
    """Invalid, valid with the wrong atom histogram, or valid and correct.

    Without a label every valid graph counts as correct.
    """
    if not check_valid(g, atoms, bonds):
        return INVALID
    if label is not None and label_of(g) != label:
        return WRONG_LABEL
    return CORRECT


def sample_quality(graphs, label: GraphLabel | None, index, freq: float = 1.0,
                   atoms: AtomVocabulary = QM9_ATOMS, bonds: BondVocabulary = BONDS) -> LabelQuality:
    """Valid/Accurate/Unique/Novel of decoded samples for one label.

    ``index`` is the set of canonical keys of the reference dataset.
    """
    n_s = len(graphs)
    classes = [classify(g, label, atoms, bonds) for g in graphs]
    n_valid = sum(c != INVALID for c in classes)
    correct = [canonical_key(g) for g, c in zip(graphs, classes) if c == CORRECT]
    distinct = set(correct)
    if correct:
        unique = len(distinct) / len(correct)
        novel = 1.0 - len(distinct & set(index)) / len(distinct)
    else:
        unique = novel = 0.0
    valid = n_valid / n_s if n_s else 0.0
    accurate = len(correct) / n_s if n_s else 0.0
    return LabelQuality(label, freq, n_s, valid, accurate, unique, novel)


def aggregate(per_label, index_size: int = 0) -> QualityReport:
    """Frequency-weighted sums of the per-label metrics."""
    tot = {m: sum(getattr(q, m) * q.freq for q in per_label) for m in ("valid", "accurate", "unique", "novel")}
    n_s = per_label[0].n_s if per_label else 0
    return QualityReport(list(per_label), n_s=n_s, index_size=index_size, **tot)


def label_frequencies(records) -> list[tuple[GraphLabel, float]]:
    """Labels of a dataset with their relative frequencies, most frequent first."""
    counts = {}
    for r in records:
        counts[r.label] = counts.get(r.label, 0) + 1
    total = sum(counts.values())
    return sorted(((y, c / total) for y, c in counts.items()), key=lambda t: (-t[1], t[0].y))


def decode_samples(model, n_s: int, label: GraphLabel | None, rng: np.random.Generator,
                   batch: int = 256, connect: bool = True) -> list[DiscreteGraph]:
    """Point estimates of decodings of ``z ~ N(0, I)``."""
    c = model.encoder_cfg.latent_dim
    out = []
    while len(out) < n_s:
        m = min(batch, n_s - len(out))
        z = rng.standard_normal((m, c))
        labels = None if label is None else [label] * m
        out.extend(point_estimate(pg, connect=connect) for pg in model.decode(z, labels))
    return out


def quality_metrics(model, labels, n_s: int, rng: np.random.Generator, index,
                    atoms: AtomVocabulary = QM9_ATOMS, bonds: BondVocabulary = BONDS) -> QualityReport:
    """Sample ``n_s`` graphs per label and score them.

    ``labels`` is a list of ``(label, frequency)``; an unconditional model is
    evaluated with ``[(None, 1.0)]``.
    """
    per_label = []
    for label, freq in labels:
        graphs = decode_samples(model, n_s, label, rng) if n_s else []
        per_label.append(sample_quality(graphs, label, index, freq, atoms, bonds))
    return aggregate(per_label, len(set(index)))


# -- latent traversals -------------------------------------------------------------

@dataclass
class TraversalCell:
    coords: tuple
    z: np.ndarray
    graph: DiscreteGraph
    kind: str


def _cells(model, Z, coords, label, atoms, bonds):
    labels = None if label is None else [label] * len(Z)
    pgs = model.decode(np.asarray(Z), labels)
    out = []
    for c, z, pg in zip(coords, Z, pgs):
        g = point_estimate(pg, connect=True)
        out.append(TraversalCell(tuple(float(v) for v in c), np.asarray(z), g, classify(g, label, atoms, bonds)))
    return out


def random_plane(c: int, rng: np.random.Generator) -> np.ndarray:
    """Two orthonormal directions in R^c, as a (2, c) array."""
    q, _ = np.linalg.qr(rng.standard_normal((c, 2)))
    return q.T


def traverse_plane(model, rng: np.random.Generator, grid_size: int = 11, extent: float = 5.0,
                   center=None, label: GraphLabel | None = None, atoms=QM9_ATOMS, bonds=BONDS):
    """Decode a regular grid over a random 2-d plane through ``center``.

    Returns ``(directions, cells)``; cells are row-major over the grid.
    """
    if grid_size < 1:
        raise ValueError("grid_size must be positive")
    c = model.encoder_cfg.latent_dim
    center = np.zeros(c) if center is None else np.asarray(center, float)
    dirs = random_plane(c, rng)
    ticks = np.zeros(1) if grid_size == 1 else np.linspace(-extent, extent, grid_size)
    coords = [(u, v) for u in ticks for v in ticks]
    Z = np.array([center + u * dirs[0] + v * dirs[1] for u, v in coords])
    return dirs, _cells(model, Z, coords, label, atoms, bonds)


def interpolate_line(model, g1: DiscreteGraph, g2: DiscreteGraph, steps: int = 8,
                     label: GraphLabel | None = None, atoms=QM9_ATOMS, bonds=BONDS):
    """Decode evenly spaced points between the posterior means of two graphs."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    labels = None
    if model.decoder_cfg.conditional:
        y1, y2 = label_of(g1), label_of(g2)
        if y1 != y2:
            raise ValueError(f"interpolation endpoints have different labels {y1.y} and {y2.y}")
        label = y1 if label is None else label
        labels = [label, label]
    post = model.encode([g1, g2], labels)
    mu1, mu2 = post.mu
    ts = np.linspace(0.0, 1.0, steps)
    Z = np.array([(1 - t) * mu1 + t * mu2 for t in ts])
    Z[0], Z[-1] = mu1, mu2
    return _cells(model, Z, [(t,) for t in ts], label, atoms, bonds)


def traversal_csv(cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dims = len(cells[0].coords) if cells else 2
    w.writerow((["u", "v"] if dims == 2 else ["t"]) + ["key", "class"])
    for cell in cells:
        w.writerow([repr(x) for x in cell.coords] + [canonical_key(cell.graph), cell.kind])
    return buf.getvalue()


# -- matching robustness -------------------------------------------------------------

def _symmetric_noise(rng, shape, eps):
    """Gaussian noise symmetric in the first two axes."""
    noise = rng.normal(0.0, eps, shape) if eps > 0 else np.zeros(shape)
    k = shape[0]
    iu = np.triu_indices(k, 1)
    noise[iu[1], iu[0]] = noise[iu]
    return noise


def _renormalize(P: np.ndarray) -> np.ndarray:
    P = np.clip(P, 0.0, None)
    s = P.sum(axis=-1, keepdims=True)
    dead = s[..., 0] <= 0
    out = np.where(s > 0, P / np.where(s > 0, s, 1.0), 0.0)
    out[dead] = 1.0 / P.shape[-1]
    return out


def perturb(g: DiscreteGraph, k: int, kind: str, eps: float, rng: np.random.Generator) -> ProbabilisticGraph:
    """Noisy probabilistic copy of ``g`` padded to ``k`` nodes.

    Gaussian noise of standard deviation ``eps`` goes on one tensor
    (``"A"``, ``"E"`` or ``"F"``); adjacency is clamped to [0, 1], attribute
    rows are clamped at zero and renormalized (uniform if nothing is left).
    """
    base = ProbabilisticGraph.from_discrete(g, k)
    A, E, F = base.A.copy(), base.E.copy(), base.F.copy()
    if kind == "A":
        A = np.clip(A + _symmetric_noise(rng, (k, k), eps), 0.0, 1.0)
    elif kind == "E":
        E[:g.n, :g.n] = g.E
        E[g.n:, :] = 0
        E[:, g.n:] = 0
        E = _renormalize(E + _symmetric_noise(rng, E.shape, eps))
    elif kind == "F":
        F[g.n:] = 0
        F = _renormalize(F + (rng.normal(0.0, eps, F.shape) if eps > 0 else 0.0))
    else:
        raise ValueError(f"noise kind must be A, E or F, got {kind!r}")
    return ProbabilisticGraph(A, E, F)


def matching_accuracy(g: DiscreteGraph, X: np.ndarray) -> float:
    """Agreement of ``g`` with its own padded copy under assignment ``X`` (k x n).

    Mean of four fractions: node existence on the diagonal, edge existence
    off the diagonal, node classes of matched nodes, and edge classes over
    the input's directed edge slots (dropped when the graph has no edges).
    """
    k, n = X.shape
    perm = assignment_to_perm(X)
    ref = np.zeros((k, k))
    ref[:n, :n] = g.A
    moved = X @ g.A @ X.T
    eye = np.eye(k)
    agree = moved == ref
    parts = [np.sum(agree * eye) / k]
    if k > 1:
        parts.append(np.sum(agree * (1 - eye)) / (k * (k - 1)))
    cls = g.node_classes
    parts.append(np.mean([perm[i] < n and cls[perm[i]] == cls[i] for i in range(n)]))
    slots = list(zip(*np.nonzero(g.A - np.eye(n))))
    if slots:
        hits = 0
        for i, j in slots:
            a, b = perm[i], perm[j]
            if a < n and b < n and g.A[a, b] == 1 and g.E[a, b].argmax() == g.E[i, j].argmax():
                hits += 1
        parts.append(hits / len(slots))
    return float(np.mean(parts))


@dataclass
class RobustnessReport:
    rows: list = field(default_factory=list)  # (kind, eps, k, accuracy or None, trials)

    def cell(self, kind: str, eps: float, k: int):
        for r in self.rows:
            if r[0] == kind and r[1] == eps and r[2] == k:
                return r[3]
        raise KeyError((kind, eps, k))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "eps", "k", "accuracy", "trials"])
        for kind, eps, k, acc, trials in self.rows:
            w.writerow([kind, repr(eps), k, "" if acc is None else repr(acc), trials])
        return buf.getvalue()


def matching_robustness(graphs, k_grid, noise_grid, trials: int, rng: np.random.Generator,
                        iterations: int = DEFAULT_ITERATIONS, threads: int = 1) -> RobustnessReport:
    """Mean self-matching accuracy under noise, one cell per (kind, eps, k).

    ``noise_grid`` lists ``(kind, eps)`` pairs; kind ``"-"`` means no noise.
    Each trial draws a graph with at most ``k`` nodes, perturbs one tensor,
    matches the clean graph against the noisy one and scores the assignment.
    """
    report = RobustnessReport()
    for kind, eps in noise_grid:
        for k in k_grid:
            bucket = [g for g in graphs if 0 < g.n <= k]
            if not bucket:
                log.warning("no graphs with at most %d nodes; cell (%s, %s, %d) absent", k, kind, eps, k)
                report.rows.append((kind, eps, k, None, 0))
                continue
            picks = rng.choice(len(bucket), size=trials, replace=len(bucket) < trials)
            pairs = []
            for p in picks:
                g = bucket[int(p)]
                noisy = perturb(g, k, "A" if kind == "-" else kind, 0.0 if kind == "-" else eps, rng)
                pairs.append((g, noisy))
            Xs = []
            for s in range(0, len(pairs), 32):
                Xs.extend(match_batch(pairs[s:s + 32], iterations, threads))
            acc = float(np.mean([matching_accuracy(g, X) for (g, _), X in zip(pairs, Xs)]))
            report.rows.append((kind, eps, k, acc, trials))
    return report
