"""
How much noise can matching take?
=================================

Self-matching accuracy of small molecules padded to ``k`` slots, with
Gaussian noise on one of the three tensors. Accuracy should fall as the
noise grows.
"""

import numpy as np

from graphvae.data import synthetic_dataset
from graphvae.evaluate import matching_robustness

############################################################
# A pool of molecules with up to 15 heavy atoms

graphs = [r.graph for r in synthetic_dataset(300, seed=4, max_atoms=15)]

############################################################
# Twenty trials per cell keeps this quick; use 100 or more for real numbers

grid = [("-", 0.0), ("A", 0.4), ("A", 0.8), ("E", 0.4), ("E", 0.8), ("F", 0.4), ("F", 0.8)]
report = matching_robustness(graphs, [9, 15], grid, 20, np.random.default_rng(0))
print(report.to_csv())
