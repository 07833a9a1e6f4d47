"""
Training a small model and sampling from it
===========================================

A few epochs on random QM9-like molecules, followed by decoding samples
from the prior and scoring them for validity, uniqueness and novelty.
Takes about a minute.
"""

import numpy as np

from graphvae.chem import formula
from graphvae.data import synthetic_dataset
from graphvae.evaluate import decode_samples, quality_metrics
from graphvae.model import EncoderConfig, GraphVAE, LossWeights, make_trainer, train_step

############################################################
# Data: 500 random valid molecules with at most 9 heavy atoms

records = synthetic_dataset(500, seed=0)
graphs = [r.graph for r in records]
index = {r.key for r in records}
print(len(graphs), "molecules, e.g.", ", ".join(formula(g) for g in graphs[:5]))

############################################################
# A model with a smaller latent space than the default 40

model = GraphVAE(EncoderConfig(latent_dim=16), seed=0)
state = make_trainer(model, LossWeights())
rng = np.random.default_rng(0)

for epoch in range(5):
    order = rng.permutation(len(graphs))
    losses = [train_step(state, [graphs[i] for i in order[s:s + 32]], None, rng)
              for s in range(0, len(graphs), 32)]
    print(f"epoch {epoch}  mean loss {np.mean(losses):.3f}")

############################################################
# Decode point estimates of z ~ N(0, I)

report = quality_metrics(model, [(None, 1.0)], 200, np.random.default_rng(1), index)
print(report.to_csv())

samples = decode_samples(model, 8, None, np.random.default_rng(2))
print("some samples:", ", ".join(formula(g) or "(empty)" for g in samples))
