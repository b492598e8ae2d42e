"""Small fixtures shared across test modules."""
import numpy as np
import torch

from mfm.datagen import Population, PopulationPair


def toy_pairs(n_pops=3, n=20, d=2, seed=0, shift=1.0, split="train", start_id=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pops):
        pid = start_id + i
        x0 = torch.from_numpy(rng.normal(size=(n, d)) + rng.normal(size=d))
        x1 = x0 + shift * (i + 1)
        pairs.append(PopulationPair(
            Population(x0, pid, None, split, f"p{pid}"),
            Population(x1, pid, None, split, f"p{pid}"),
        ))
    return pairs
