"""Command line entry point: ``graphvae <command> [options]``.

Progress goes to stderr; results are written as files under ``--out-dir``
and a short JSON summary is printed on stdout.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .chem import BONDS, QM9_ATOMS, ZINC_ATOMS, canonical_key
from .data import ExperimentConfig, MolfileVersionError, file_checksum, load_records, split, synthetic_dataset
from .evaluate import (aggregate, decode_samples, interpolate_line, matching_robustness, sample_quality,
                       traversal_csv, traverse_plane)
from .graph import GraphLabel, dumps_graphs
from .model import (DecoderConfig, EncoderConfig, GraphVAE, LossWeights, elbo, load_checkpoint, make_trainer,
                    reconstruction_nll, train_step)

log = logging.getLogger("graphvae")

VOCABULARIES = {"qm9": QM9_ATOMS, "zinc": ZINC_ATOMS}
DEFAULT_NOISE = ["none", "A:0.4", "A:0.8", "E:0.4", "E:0.8", "F:0.4", "F:0.8"]


class CommandError(Exception):
    """A user-facing failure; ``kind`` names the diagnostic."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    except OSError as exc:
        raise CommandError("ConfigUnreadable", str(exc)) from exc
    except ValueError as exc:
        raise CommandError("ConfigInvalid", str(exc)) from exc
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.conditional = cfg.conditional or args.conditional
    cfg.implicit_node_prob = cfg.implicit_node_prob or args.implicit_node_prob
    cfg.unregularized = cfg.unregularized or args.unregularized
    if cfg.unregularized:
        cfg.kl_weight = 0.0
    return cfg


def _records(path, atoms, k=None):
    try:
        records, report = load_records(path, atoms, BONDS, k)
    except (OSError, MolfileVersionError, ValueError) as exc:
        raise CommandError("DataUnreadable", f"{path}: {exc}") from exc
    if not records:
        raise CommandError("EmptyDataset", f"{path}: no usable graphs ({report.as_dict()})")
    return records, report


def _load_model(path):
    try:
        model = GraphVAE.load(path)
        header, _ = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError("CheckpointUnreadable", f"{path}: {exc}") from exc
    vocab = header.get("extra", {}).get("vocabulary", "qm9")
    return model, VOCABULARIES[vocab]


def _label(text, model):
    if text is None:
        if model.decoder_cfg.conditional:
            raise CommandError("LabelRequired", "conditional model needs --label")
        return None
    if not model.decoder_cfg.conditional:
        raise CommandError("LabelOnUnconditionalModel", "--label given but the model is unconditional")
    try:
        y = tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise CommandError("LabelInvalid", f"cannot parse label {text!r}") from exc
    if len(y) != model.decoder_cfg.d_n:
        raise CommandError("LabelInvalid", f"label needs {model.decoder_cfg.d_n} counts, got {len(y)}")
    return GraphLabel(y)


def _batches(items, size):
    for s in range(0, len(items), size):
        yield items[s:s + size]


def _mean_over(fn, graphs, labels, size=256):
    vals = []
    for s in range(0, len(graphs), size):
        vals.append(fn(graphs[s:s + size], None if labels is None else labels[s:s + size]))
    return np.concatenate(vals) if vals else np.zeros(0)


# -- commands -------------------------------------------------------------------

def cmd_train(args, out: Path) -> dict:
    cfg = _config(args)
    if args.data:
        cfg.dataset = args.data
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if not cfg.dataset:
        raise CommandError("DatasetMissing", "no dataset in config and no --data given")
    started = time.time()
    records, report = _records(cfg.dataset, cfg.atoms, cfg.k)
    try:
        parts = split(len(records), cfg.seed, (cfg.test_size, cfg.val_size))
    except ValueError as exc:
        raise CommandError("SplitTooLarge", str(exc)) from exc
    train = [records[i] for i in parts.train]
    val = [records[i] for i in parts.validation]
    if not train:
        raise CommandError("EmptyDataset", "training split is empty")
    log.info("loaded %d graphs: train=%d validation=%d test=%d", len(records), len(train), len(val),
             len(parts.test))

    model = GraphVAE(EncoderConfig(cfg.conv_channels, cfg.pooling_hidden, cfg.latent_dim),
                     DecoderConfig(cfg.k, cfg.d_e, cfg.d_n, cfg.decoder_channels, cfg.implicit_node_prob,
                                   cfg.conditional),
                     deterministic=cfg.unregularized, seed=cfg.seed)
    weights = LossWeights(cfg.lambda_a, cfg.lambda_e, cfg.lambda_f, cfg.kl_weight)
    state = make_trainer(model, weights, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.mpm_iterations,
                         args.threads)
    rng = np.random.default_rng(cfg.seed)
    lab = (lambda recs: [r.label for r in recs]) if cfg.conditional else (lambda recs: None)

    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses = [train_step(state, [r.graph for r in batch], lab(batch), rng)
                  for batch in _batches([train[i] for i in order], cfg.batch_size)]
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if val:
            vrng = np.random.default_rng([cfg.seed, 1, epoch])
            row["validation_elbo"] = float(np.mean(_mean_over(
                lambda g, y: elbo(model, g, y, vrng, weights, cfg.mpm_iterations, args.threads),
                [r.graph for r in val], lab(val))))
        curve.append(row)
        log.info("epoch=%d train_loss=%.5f validation_elbo=%s", row["epoch"], row["train_loss"],
                 "%.5f" % row["validation_elbo"] if val else "-")

    # reconstruction -log p(G|z) of the training graphs in inference mode
    probe = train if cfg.unregularized else train[:1000]
    nll = _mean_over(lambda g, y: reconstruction_nll(model, g, y, np.random.default_rng([cfg.seed, 2]), weights,
                                                     cfg.mpm_iterations, threads=args.threads),
                     [r.graph for r in probe], lab(probe))
    ckpt = out / "model.ckpt"
    model.save(ckpt, extra={"vocabulary": cfg.vocabulary, "epochs": cfg.epochs})
    summary = {"train_nll": float(nll.mean()), "train_nll_graphs": len(probe), "epochs": cfg.epochs}
    manifest = {
        "version": __version__,
        "command": "train",
        "config": cfg.to_text(),
        "seeds": {"model": cfg.seed, "shuffle": cfg.seed, "split": cfg.seed},
        "datasets": {str(cfg.dataset): file_checksum(cfg.dataset)},
        "skipped": report.as_dict(),
        "split": {"train": len(train), "validation": len(val), "test": len(parts.test)},
        "curve": curve,
        "final": summary,
        "wall_clock_seconds": round(time.time() - started, 3),
        "artifacts": {"checkpoint": str(ckpt)},
    }
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("final train -log p(G|z) = %.5f over %d graphs", summary["train_nll"], len(probe))
    return {"checkpoint": str(ckpt), "manifest": str(out / "manifest.json"), **summary}


def cmd_sample(args, out: Path) -> dict:
    model, atoms = _load_model(args.checkpoint)
    label = _label(args.label, model)
    if args.num_samples < 0:
        raise CommandError("BadArgument", "--num-samples must be non-negative")
    index = set()
    if args.index:
        records, _ = _records(args.index, atoms)
        index = {r.key for r in records}
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    graphs = decode_samples(model, args.num_samples, label, rng) if args.num_samples else []
    report = aggregate([sample_quality(graphs, label, index, 1.0, atoms, BONDS)], len(index))
    write_atomic(out / "samples.json", dumps_graphs(graphs))
    write_atomic(out / "quality.csv", report.to_csv())
    log.info("sampled %d graphs: valid=%.4f unique=%.4f novel=%.4f", len(graphs), report.valid, report.unique,
             report.novel)
    return {"samples": str(out / "samples.json"), "report": str(out / "quality.csv"), **report.summary()}


def cmd_interpolate(args, out: Path) -> dict:
    model, atoms = _load_model(args.checkpoint)
    records, _ = _records(args.graphs, atoms, model.decoder_cfg.k)
    try:
        g1, g2 = records[args.first].graph, records[args.second].graph
    except IndexError as exc:
        raise CommandError("BadArgument", f"graph index out of range (file has {len(records)})") from exc
    try:
        cells = interpolate_line(model, g1, g2, args.steps, None, atoms, BONDS)
    except ValueError as exc:
        kind = "LabelMismatch" if "label" in str(exc) else "BadArgument"
        raise CommandError(kind, str(exc)) from exc
    write_atomic(out / "interpolation.csv", traversal_csv(cells))
    return {"csv": str(out / "interpolation.csv"), "rows": len(cells)}


def cmd_plane(args, out: Path) -> dict:
    model, atoms = _load_model(args.checkpoint)
    label = _label(args.label, model)
    center = None
    if args.center is not None:
        records, _ = _records(args.graphs, atoms, model.decoder_cfg.k) if args.graphs else (None, None)
        if records is None:
            raise CommandError("BadArgument", "--center needs --graphs")
        g = records[args.center].graph
        center = model.encode([g], None if label is None else [label]).mu[0]
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    try:
        _, cells = traverse_plane(model, rng, args.grid, args.extent, center, label, atoms, BONDS)
    except ValueError as exc:
        raise CommandError("BadArgument", str(exc)) from exc
    write_atomic(out / "plane.csv", traversal_csv(cells))
    return {"csv": str(out / "plane.csv"), "rows": len(cells),
            "distinct_keys": len({canonical_key(c.graph) for c in cells})}


def _noise_grid(items):
    grid = []
    for item in items:
        kind, _, eps = item.partition(":")
        kind = "-" if kind == "none" else kind
        if kind not in ("-", "A", "E", "F"):
            raise CommandError("BadArgument", f"noise kind must be none, A, E or F, got {item!r}")
        try:
            grid.append((kind, float(eps or 0)))
        except ValueError as exc:
            raise CommandError("BadArgument", f"bad noise level in {item!r}") from exc
    return grid


def cmd_bench_matching(args, out: Path) -> dict:
    seed = args.seed if args.seed is not None else 0
    if args.dataset:
        records, _ = _records(args.dataset, VOCABULARIES[args.vocabulary])
        graphs = [r.graph for r in records]
    else:
        graphs = [r.graph for r in synthetic_dataset(args.synthetic, seed, max(args.k))]
    if args.trials < 1:
        raise CommandError("BadArgument", "--trials must be positive")
    report = matching_robustness(graphs, args.k, _noise_grid(args.noise), args.trials,
                                 np.random.default_rng(seed), threads=args.threads)
    write_atomic(out / "robustness.csv", report.to_csv())
    return {"csv": str(out / "robustness.csv"), "cells": len(report.rows)}


def cmd_eval_elbo(args, out: Path) -> dict:
    model, atoms = _load_model(args.checkpoint)
    records, _ = _records(args.dataset, atoms, model.decoder_cfg.k)
    labels = [r.label for r in records] if model.decoder_cfg.conditional else None
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    values = _mean_over(lambda g, y: elbo(model, g, y, rng, threads=args.threads), [r.graph for r in records],
                        labels)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "key", "elbo"])
    for i, (r, v) in enumerate(zip(records, values)):
        w.writerow([i, r.key, repr(float(v))])
    write_atomic(out / "elbo.csv", buf.getvalue())
    return {"csv": str(out / "elbo.csv"), "graphs": len(records), "mean_elbo": float(values.mean())}


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file ([graphvae] key = value)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap for matching")
    common.add_argument("--out-dir", default=".", help="directory for output files")
    common.add_argument("--conditional", action="store_true", help="condition on atom histograms")
    common.add_argument("--implicit-node-prob", action="store_true", help="node probability from edges")
    common.add_argument("--unregularized", action="store_true", help="deterministic encoder, no KL term")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="graphvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a config")
    p.add_argument("--data", help="dataset file (.sdf or .json), overrides the config")
    p.add_argument("--epochs", type=int, help="overrides the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="decode prior samples and score them")
    p.add_argument("checkpoint")
    p.add_argument("-n", "--num-samples", type=int, default=1000)
    p.add_argument("--label", help="atom histogram, e.g. '6,1,1,0' (conditional models only)")
    p.add_argument("--index", help="reference dataset for novelty")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("interpolate", parents=[common], help="decode a line between two embeddings")
    p.add_argument("checkpoint")
    p.add_argument("graphs", help="file holding the endpoint graphs")
    p.add_argument("--first", type=int, default=0)
    p.add_argument("--second", type=int, default=1)
    p.add_argument("--steps", type=int, default=8)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("plane", parents=[common], help="decode a grid over a random latent plane")
    p.add_argument("checkpoint")
    p.add_argument("--grid", type=int, default=11)
    p.add_argument("--extent", type=float, default=5.0)
    p.add_argument("--label")
    p.add_argument("--graphs", help="file holding a graph to center the plane on")
    p.add_argument("--center", type=int, help="index of the centering graph")
    p.set_defaults(func=cmd_plane)

    p = sub.add_parser("bench-matching", parents=[common], help="matching robustness under noise")
    p.add_argument("dataset", nargs="?", help="graphs to draw from; synthetic molecules when omitted")
    p.add_argument("--vocabulary", choices=sorted(VOCABULARIES), default="qm9")
    p.add_argument("--synthetic", type=int, default=2000, help="synthetic pool size")
    p.add_argument("--k", type=int, nargs="+", default=[9, 15, 20])
    p.add_argument("--noise", nargs="+", default=DEFAULT_NOISE, help="KIND:EPS items with KIND in A, E, F, or none for the clean cell")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_bench_matching)

    p = sub.add_parser("eval-elbo", parents=[common], help="per-graph ELBO of a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_eval_elbo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    out = Path(args.out_dir)
    try:
        if args.threads < 1:
            raise CommandError("BadArgument", "--threads must be positive")
        out.mkdir(parents=True, exist_ok=True)
        result = args.func(args, out)
    except CommandError as exc:
        print(f"graphvae: error: {exc.kind}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
