"""Minibatch pairings of source and target rows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from mfm.errors import ContractError, InputError


@dataclass
class Coupling:
    source_idx: np.ndarray
    target_idx: np.ndarray
    mode: str

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.source_idx.tolist(), self.target_idx.tolist()))


def independent_coupling(n0: int, n1: int, b: int, rng: np.random.Generator) -> Coupling:
    """b index pairs drawn uniformly, with replacement, from [0, n0) x [0, n1)."""
    if b < 1:
        raise ContractError("batch size must be at least 1")
    src = rng.integers(0, n0, size=b)
    tgt = rng.integers(0, n1, size=b)
    return Coupling(src, tgt, "independent")


def assignment_solve(cost) -> tuple[np.ndarray, float]:
    """Exact min-cost perfect matching on a square matrix.

    Returns ``perm`` with row j matched to column ``perm[j]`` and the optimal
    total cost ``sum_j cost[j, perm[j]]``. Backed by scipy's shortest
    augmenting path (Jonker-Volgenant family) solver, which scans rows in
    index order so ties resolve the same way on every run.
    """
    c = np.asarray(cost.detach().numpy() if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InputError(f"cost must be square, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise InputError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(c)
    perm = np.empty(c.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, float(c[np.arange(c.shape[0]), perm].sum())


def squared_distances(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def ot_coupling(source: Tensor, target: Tensor) -> Coupling:
    """Permutation minimising the summed squared Euclidean distance."""
    if source.shape != target.shape:
        raise ContractError(f"OT coupling needs equal batches, got {tuple(source.shape)} and {tuple(target.shape)}")
    perm, _ = assignment_solve(squared_distances(source.detach(), target.detach()))
    return Coupling(np.arange(source.shape[0]), perm, "ot")


def apply_coupling(coupling: Coupling, source: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
    return (
        source[torch.from_numpy(coupling.source_idx)],
        target[torch.from_numpy(coupling.target_idx)],
    )
