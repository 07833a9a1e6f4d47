"""Dataset ingestion, splits, experiment configuration and a molecule generator."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chem import BONDS, QM9_ATOMS, ZINC_ATOMS, AtomVocabulary, BondVocabulary, MoleculeRecord, check_valid
from .graph import DiscreteGraph, loads_graphs

log = logging.getLogger(__name__)

# MDL bond type -> bond class index in BONDS
_MDL_BOND = {1: 0, 2: 1, 3: 2, 4: 3}
_BOND_MDL = {v: k for k, v in _MDL_BOND.items()}


class MolfileVersionError(ValueError):
    """Raised for V3000 molfiles, which are not supported."""


@dataclass
class SkipReport:
    malformed: int = 0
    out_of_vocabulary: int = 0
    too_large: int = 0
    invalid: int = 0
    reasons: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.malformed + self.out_of_vocabulary + self.too_large + self.invalid

    def as_dict(self) -> dict:
        return {"malformed": self.malformed, "out_of_vocabulary": self.out_of_vocabulary,
                "too_large": self.too_large, "invalid": self.invalid}


class _OutOfVocabulary(Exception):
    pass


def parse_molfile(block: str, atoms: AtomVocabulary = QM9_ATOMS, bonds: BondVocabulary = BONDS) -> MoleculeRecord:
    """Parse one V2000 molfile block into a heavy-atom graph.

    Hydrogens and their bonds are dropped.  Raises ``ValueError`` on
    malformed input, ``MolfileVersionError`` on V3000.
    """
    lines = block.splitlines()
    if len(lines) < 4:
        raise ValueError("molfile shorter than its header")
    counts = lines[3]
    if "V3000" in counts:
        raise MolfileVersionError("V3000 molfiles are not supported")
    try:
        n_atoms, n_bonds = int(counts[0:3]), int(counts[3:6])
    except ValueError:
        parts = counts.split()
        n_atoms, n_bonds = int(parts[0]), int(parts[1])
    if len(lines) < 4 + n_atoms + n_bonds:
        raise ValueError("molfile truncated")

    symbols = []
    for line in lines[4:4 + n_atoms]:
        sym = line[31:34].strip() if len(line) >= 34 else ""
        if not sym:
            parts = line.split()
            if len(parts) < 4:
                raise ValueError(f"bad atom line {line!r}")
            sym = parts[3]
        symbols.append(sym)

    heavy = [i for i, s in enumerate(symbols) if s not in ("H", "D")]
    index = {old: new for new, old in enumerate(heavy)}
    classes = []
    for i in heavy:
        if symbols[i] not in atoms.symbols:
            raise _OutOfVocabulary(symbols[i])
        classes.append(atoms.index(symbols[i]))

    edges = []
    for line in lines[4 + n_atoms:4 + n_atoms + n_bonds]:
        try:
            a, b, t = int(line[0:3]), int(line[3:6]), int(line[6:9])
        except ValueError:
            parts = line.split()
            a, b, t = int(parts[0]), int(parts[1]), int(parts[2])
        a, b = a - 1, b - 1
        if not (0 <= a < n_atoms and 0 <= b < n_atoms) or a == b:
            raise ValueError(f"bad bond line {line!r}")
        if a not in index or b not in index:
            continue
        if t not in _MDL_BOND or _MDL_BOND[t] >= len(bonds):
            raise _OutOfVocabulary(f"bond type {t}")
        edges.append((index[a], index[b], _MDL_BOND[t]))
    title = lines[0].strip()
    seen = set()
    for i, j, _ in edges:
        if (min(i, j), max(i, j)) in seen:
            raise ValueError("duplicate bond")
        seen.add((min(i, j), max(i, j)))
    g = DiscreteGraph.from_edges(classes, edges, len(atoms), len(bonds))
    return MoleculeRecord(g, title=title)


def parse_sdf(stream, atoms: AtomVocabulary = QM9_ATOMS, bonds: BondVocabulary = BONDS):
    """Read every record of an SDF stream.

    Returns ``(records, report)``; bad records are counted, never fatal.
    """
    text = stream.read() if hasattr(stream, "read") else str(stream)
    records, report = [], SkipReport()
    for block in text.split("$$$$"):
        if not block.strip():
            continue
        block = block.lstrip("\r\n")
        try:
            records.append(parse_molfile(block, atoms, bonds))
        except _OutOfVocabulary as exc:
            report.out_of_vocabulary += 1
            report.reasons.append(f"out of vocabulary: {exc}")
        except (ValueError, IndexError) as exc:
            report.malformed += 1
            report.reasons.append(str(exc))
    return records, report


def write_molfile(g: DiscreteGraph, atoms: AtomVocabulary = QM9_ATOMS, title: str = "",
                  hydrogens: bool = False) -> str:
    """V2000 molfile for ``g``; optionally with explicit hydrogens."""
    from .chem import implicit_hydrogens

    symbols = [atoms.symbols[c] for c in g.node_classes]
    bond_lines = [(i + 1, j + 1, _BOND_MDL[t]) for i, j, t in g.edges()]
    if hydrogens:
        for v, h in enumerate(implicit_hydrogens(g, atoms)):
            for _ in range(h):
                symbols.append("H")
                bond_lines.append((v + 1, len(symbols), 1))
    out = [title, "  graphvae", "", f"{len(symbols):3d}{len(bond_lines):3d}  0  0  0  0  0  0  0  0999 V2000"]
    for s in symbols:
        out.append(f"{0.0:10.4f}{0.0:10.4f}{0.0:10.4f} {s:<3} 0  0  0  0  0  0  0  0  0  0  0  0")
    for a, b, t in bond_lines:
        out.append(f"{a:3d}{b:3d}{t:3d}  0")
    out.append("M  END")
    return "\n".join(out) + "\n"


def write_sdf(graphs, atoms: AtomVocabulary = QM9_ATOMS, hydrogens: bool = False) -> str:
    return "".join(write_molfile(g, atoms, f"mol{i}", hydrogens) + "$$$$\n" for i, g in enumerate(graphs))


def load_records(path, atoms: AtomVocabulary = QM9_ATOMS, bonds: BondVocabulary = BONDS,
                 k: int | None = None, require_valid: bool = True):
    """Load ``.sdf`` or ``.json`` graphs, dropping graphs larger than ``k``
    and (optionally) graphs failing the valence check."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        report = SkipReport()
        records = [MoleculeRecord(g) for g in loads_graphs(path.read_text())]
    else:
        with open(path) as fh:
            records, report = parse_sdf(fh, atoms, bonds)
    return filter_records(records, report, atoms, bonds, k, require_valid)


def filter_records(records, report: SkipReport, atoms=QM9_ATOMS, bonds=BONDS, k=None, require_valid=True):
    kept = []
    for r in records:
        if k is not None and r.graph.n > k:
            report.too_large += 1
            continue
        if require_valid and not check_valid(r.graph, atoms, bonds):
            report.invalid += 1
            continue
        kept.append(r)
    if report.total:
        log.warning("skipped %d record(s): %s", report.total, report.as_dict())
    return kept, report


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- splits ---------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    validation: tuple
    test: tuple
    seed: int


def split(n_records: int, seed: int, sizes=(10_000, 10_000)) -> DatasetSplit:
    """Shuffle indices with ``seed``; the first two chunks are test and validation."""
    n_test, n_val = sizes
    if n_test + n_val > n_records:
        raise ValueError(f"cannot carve {n_test}+{n_val} held-out records from {n_records}")
    perm = np.random.default_rng(seed).permutation(n_records)
    test = tuple(int(i) for i in perm[:n_test])
    val = tuple(int(i) for i in perm[n_test:n_test + n_val])
    train = tuple(int(i) for i in perm[n_test + n_val:])
    return DatasetSplit(train, val, test, seed)


# -- configuration --------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Flat experiment settings; the defaults describe the QM9 run."""

    dataset: str = ""
    vocabulary: str = "qm9"
    k: int = 9
    d_e: int = 4
    d_n: int = 4
    latent_dim: int = 40
    conv_channels: tuple = (32, 64)
    pooling_hidden: int = 128
    decoder_channels: tuple = (128, 256, 512)
    lambda_a: float = 1.0
    lambda_e: float = 1.0
    lambda_f: float = 1.0
    kl_weight: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 25
    batch_size: int = 32
    mpm_iterations: int = 75
    test_size: int = 10_000
    val_size: int = 10_000
    seed: int = 0
    conditional: bool = False
    implicit_node_prob: bool = False
    unregularized: bool = False

    @property
    def atoms(self) -> AtomVocabulary:
        return {"qm9": QM9_ATOMS, "zinc": ZINC_ATOMS}[self.vocabulary]

    def validate(self):
        if self.vocabulary not in ("qm9", "zinc"):
            raise ValueError(f"unknown vocabulary {self.vocabulary!r}")
        if len(self.atoms) != self.d_n or len(BONDS) != self.d_e:
            raise ValueError("d_n/d_e do not match the vocabulary")
        if min(self.conv_channels + self.decoder_channels) < 1 or self.k < 1 or self.latent_dim < 1:
            raise ValueError("sizes must be positive")
        if min(self.lambda_a, self.lambda_e, self.lambda_f, self.kl_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        return self

    def to_text(self) -> str:
        lines = ["[graphvae]"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(map(str, v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        if not text.lstrip().startswith("["):
            text = "[graphvae]\n" + text
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ValueError(f"malformed config: {exc}") from exc
        if "graphvae" not in parser:
            raise ValueError("config has no [graphvae] section")
        section = parser["graphvae"]
        kwargs = {}
        known = {f.name: f for f in dataclasses.fields(cls)}
        defaults = cls()
        for key, raw in section.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kind = type(getattr(defaults, key))
            if kind is bool:
                kwargs[key] = section.getboolean(key)
            elif kind is tuple:
                kwargs[key] = tuple(int(x) for x in raw.replace(",", " ").split())
            else:
                kwargs[key] = kind(raw)
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())


# -- synthetic molecules ----------------------------------------------------------

def random_molecule(rng: np.random.Generator, max_atoms: int = 9, atoms: AtomVocabulary = QM9_ATOMS,
                    atom_weights=(0.72, 0.11, 0.15, 0.02), ring_prob: float = 0.35,
                    multiple_prob: float = 0.2) -> DiscreteGraph:
    """Random connected molecule that passes :func:`check_valid`.

    Heavy atoms are attached one at a time to an atom with free valence, then
    a few ring closures and bond upgrades are added while valences allow.
    Only single, double and triple bonds are produced.
    """
    weights = np.asarray(atom_weights, float)[: len(atoms)]
    weights = weights / weights.sum()
    target = int(rng.integers(1, max_atoms + 1))
    cls = [int(rng.choice(len(atoms), p=weights))]
    while atoms.valences[cls[0]] < 2 and target > 2:
        cls[0] = int(rng.choice(len(atoms), p=weights))
    order = {}
    used = [0]

    def free(v):
        return atoms.valences[cls[v]] - used[v]

    while len(cls) < target:
        hosts = [v for v in range(len(cls)) if free(v) > 0]
        if not hosts:
            break
        host = int(rng.choice(hosts))
        c = int(rng.choice(len(atoms), p=weights))
        cls.append(c)
        used.append(1)
        used[host] += 1
        order[(host, len(cls) - 1)] = 1
    n = len(cls)
    if n > 2 and rng.random() < ring_prob:
        for _ in range(2):
            cand = [(i, j) for i in range(n) for j in range(i + 2, n)
                    if (i, j) not in order and free(i) > 0 and free(j) > 0]
            if not cand:
                break
            i, j = cand[int(rng.integers(len(cand)))]
            order[(i, j)] = 1
            used[i] += 1
            used[j] += 1
            if rng.random() < 0.5:
                break
    for (i, j) in sorted(order):
        if rng.random() < multiple_prob and free(i) > 0 and free(j) > 0:
            bump = 2 if (free(i) > 1 and free(j) > 1 and rng.random() < 0.2) else 1
            order[(i, j)] += bump
            used[i] += bump
            used[j] += bump
    edges = [(i, j, o - 1) for (i, j), o in sorted(order.items())]
    return DiscreteGraph.from_edges(cls, edges, len(atoms), len(BONDS))


def synthetic_dataset(count: int, seed: int = 0, max_atoms: int = 9, unique: bool = True) -> list[MoleculeRecord]:
    """``count`` random valid molecules (distinct up to isomorphism when ``unique``)."""
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 50 * count + 1000:
            raise RuntimeError("could not generate enough distinct molecules")
        rec = MoleculeRecord(random_molecule(rng, max_atoms))
        if unique and rec.key in seen:
            continue
        seen.add(rec.key)
        out.append(rec)
    return out


def sdf_text(records, atoms=QM9_ATOMS, hydrogens=True) -> str:
    """SDF text of records, hydrogens written out explicitly by default."""
    return write_sdf([r.graph for r in records], atoms, hydrogens)

