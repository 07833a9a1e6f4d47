"""
Matching a molecule to a noisy copy of itself
=============================================

The decoder predicts graphs with a fixed number of slots ``k``; before a
loss can be computed each input atom has to be paired with a slot. Here we
shuffle a small molecule, blur its adjacency a little and recover the
pairing with max-pooling matching followed by the Hungarian method.
"""

import numpy as np

from graphvae.chem import formula
from graphvae.evaluate import matching_accuracy, perturb
from graphvae.graph import DiscreteGraph, ProbabilisticGraph
from graphvae.matching import build_affinity, match, max_pool_match

############################################################
# Acetic acid without hydrogens: C-C(=O)-O

g = DiscreteGraph.from_edges([0, 0, 2, 2], [(0, 1, 0), (1, 2, 1), (1, 3, 0)], 4, 4)
print(formula(g), "with", g.n, "heavy atoms")

############################################################
# Exact copy padded to k = 6 slots: the assignment is the identity on the
# first four slots

pg = ProbabilisticGraph.from_discrete(g, 6)
X = match(g, pg)
print("assignment (slots x atoms)\n", X.astype(int))

############################################################
# The continuous relaxation before discretisation

S = build_affinity(g, pg)
print("relaxed scores\n", np.round(max_pool_match(S, n=g.n), 3))

############################################################
# Add Gaussian noise to the adjacency and score the recovered pairing

rng = np.random.default_rng(1)
for eps in (0.0, 0.4, 0.8):
    accs = [matching_accuracy(g, match(g, perturb(g, 6, "A", eps, rng))) for _ in range(50)]
    print(f"eps_A={eps}: mean accuracy {np.mean(accs):.3f}")
