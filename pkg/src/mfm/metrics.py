"""Distribution distances between predicted and observed populations."""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from mfm.coupling import assignment_solve, squared_distances
from mfm.datagen import Population, PopulationPair, derived_rng
from mfm.errors import ContractError, InputError

MMD_GAMMAS = (2.0, 1.0, 0.5, 0.1, 0.01, 0.005)
METRICS = ("W1", "W2", "MMD", "r2")
R2_DEFINITION = (
    "Pearson correlation between the upper-triangular entries of the d x d "
    "feature correlation matrices of prediction and target"
)


class MetricWarning(UserWarning):
    pass


def _np(x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.detach().numpy()
    return np.asarray(x, dtype=np.float64)


def wasserstein(p, q, alpha: int = 2) -> float:
    """Exact alpha-Wasserstein distance between two equal-size point clouds."""
    p, q = _np(p), _np(q)
    if len(p) == 0 or len(q) == 0:
        raise ContractError("Wasserstein distance of an empty sample")
    if p.shape != q.shape:
        raise ContractError(f"equal-size samples required, got {p.shape} and {q.shape}")
    if alpha not in (1, 2):
        raise ContractError("alpha must be 1 or 2")
    d2 = squared_distances(p, q)
    cost = np.sqrt(d2) if alpha == 1 else d2
    _, total = assignment_solve(cost)
    return (total / len(p)) ** (1.0 / alpha)


def mmd_rbf(p, q, gammas: Sequence[float] = MMD_GAMMAS) -> float:
    """Biased (V-statistic) MMD with k = exp(-gamma |x - y|^2), averaged over gammas."""
    p, q = _np(p), _np(q)
    dpp, dqq, dpq = squared_distances(p, p), squared_distances(q, q), squared_distances(p, q)
    vals = [
        np.exp(-g * dpp).mean() + np.exp(-g * dqq).mean() - 2.0 * np.exp(-g * dpq).mean()
        for g in gammas
    ]
    return float(np.mean(vals))


def _feature_corr(x: np.ndarray, notes: list[str] | None, name: str) -> np.ndarray:
    xc = x - x.mean(axis=0)
    norms = np.sqrt((xc * xc).sum(axis=0))
    dead = norms == 0
    if dead.any():
        _note(notes, f"{name}: zero-variance feature(s) {np.flatnonzero(dead).tolist()}; correlations set to 0")
    safe = np.where(dead, 1.0, norms)
    corr = (xc.T @ xc) / np.outer(safe, safe)
    corr[dead, :] = 0.0
    corr[:, dead] = 0.0
    return corr


def _note(notes: list[str] | None, msg: str) -> None:
    if notes is None:
        warnings.warn(msg, MetricWarning, stacklevel=3)
    else:
        notes.append(msg)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac, bc = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(ac @ ac)) * math.sqrt(float(bc @ bc))
    return float(ac @ bc) / denom if denom > 0 else math.nan


def r_squared(pred, target, notes: list[str] | None = None) -> float:
    """Correlation between the pairwise feature correlations of pred and target.

    Undefined (NaN, with a note) when d < 3, since there is a single feature
    pair, or when either correlation vector is constant.
    """
    pred, target = _np(pred), _np(target)
    if pred.shape[1] != target.shape[1]:
        raise ContractError("pred and target feature counts differ")
    if pred.shape[1] < 2 or len(pred) < 2 or len(target) < 2:
        raise ContractError("r_squared needs d >= 2 and at least two samples per set")
    iu = np.triu_indices(pred.shape[1], k=1)
    sx = _feature_corr(pred, notes, "prediction")[iu]
    sy = _feature_corr(target, notes, "target")[iu]
    r = pearson(sx, sy) if len(sx) >= 2 else math.nan
    if math.isnan(r):
        _note(notes, "r2 undefined: fewer than two feature pairs or constant correlation vector")
    return r


def distance_metrics(pred, target, which: Sequence[str] = METRICS, notes: list[str] | None = None) -> dict[str, float]:
    pred, target = _np(pred), _np(target)
    out = {}
    if "W1" in which:
        out["W1"] = wasserstein(pred, target, 1)
    if "W2" in which:
        out["W2"] = wasserstein(pred, target, 2)
    if "MMD" in which:
        out["MMD"] = mmd_rbf(pred, target)
    if "r2" in which:
        out["r2"] = r_squared(pred, target, notes)
    return out


def shift_to_mean(points, mean) -> np.ndarray:
    points = _np(points)
    return points - points.mean(axis=0) + _np(mean)


def baselines(
    source: Population, target: Population, train_target_mean, which: Sequence[str] = METRICS,
    notes: list[str] | None = None,
) -> tuple[dict[str, float], dict[str, float]]:
    """Model-free reference rows: d(p0, p1) and d(p0 - mean(p0) + mean_train(p1), p1).

    Inputs must already be equal-size; see :func:`evaluate` for subsampling.
    """
    mu = _np(train_target_mean)
    if mu.shape != (source.dim,):
        raise ContractError("train target mean has the wrong dimension")
    raw = distance_metrics(source.points, target.points, which, notes)
    shifted = distance_metrics(shift_to_mean(source.points, mu), target.points, which, notes)
    return raw, shifted


def train_target_mean(pairs: Sequence[PopulationPair]) -> np.ndarray:
    """Average of the per-population target means."""
    return np.mean([_np(p.target.points).mean(axis=0) for p in pairs], axis=0)


@dataclass
class MetricsRow:
    population_id: int
    label: str
    split: str
    n: int
    model: dict[str, float]
    baseline_source: dict[str, float]
    baseline_shifted: dict[str, float]


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    eval_size: int
    metrics: tuple[str, ...] = METRICS
    notes: list[str] = field(default_factory=list)

    def aggregate(self, section: str = "model") -> dict[str, dict[str, float | None]]:
        out = {}
        for m in self.metrics:
            vals = np.array([getattr(r, section)[m] for r in self.rows], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            out[m] = (
                {"mean": float(vals.mean()), "std": float(vals.std())}
                if vals.size
                else {"mean": None, "std": None}
            )
        return out

    def table_block(self, split: str | None = None) -> dict:
        """Aggregate layout of the results tables (MMD scaled by 1e3)."""

        def scaled(agg):
            agg = {k: dict(v) for k, v in agg.items()}
            if "MMD" in agg and agg["MMD"]["mean"] is not None:
                agg["MMD"] = {k: v * 1e3 for k, v in agg["MMD"].items()}
            return agg

        return {
            "split": split,
            "n_populations": len(self.rows),
            "eval_size": self.eval_size,
            "units": {"MMD": "x1e-3"},
            "model": scaled(self.aggregate("model")),
            "baseline_source": scaled(self.aggregate("baseline_source")),
            "baseline_shifted": scaled(self.aggregate("baseline_shifted")),
            "r2_definition": R2_DEFINITION,
            "notes": self.notes,
        }

    def write_csv(self, path: str | Path) -> None:
        cols = ["population_id", "label", "split", "n"]
        cols += list(self.metrics)
        cols += [f"source_{m}" for m in self.metrics] + [f"shifted_{m}" for m in self.metrics]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow(
                    [r.population_id, r.label, r.split, r.n]
                    + [repr(r.model[m]) for m in self.metrics]
                    + [repr(r.baseline_source[m]) for m in self.metrics]
                    + [repr(r.baseline_shifted[m]) for m in self.metrics]
                )

    def write_json(self, path: str | Path, split: str | None = None) -> None:
        Path(path).write_text(json.dumps(_nan_to_none(self.table_block(split)), indent=2) + "\n")


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


Predictor = Callable[[Population, Tensor], Population]


def _evaluate_pair(pair: PopulationPair, predictor: Predictor, eval_size: int, seed: int, mu, which):
    notes: list[str] = []
    src, tgt = pair.source, pair.target
    rng = derived_rng(seed, pair.population_id)
    src_rows = torch.from_numpy(np.sort(rng.choice(src.n, size=min(eval_size, src.n), replace=False)))
    if tgt.n == src.n:
        tgt_rows = src_rows
    else:
        tgt_rows = torch.from_numpy(np.sort(rng.choice(tgt.n, size=min(eval_size, tgt.n), replace=False)))
    pred = _np(predictor(src, src_rows).points)
    target = _np(tgt.points[tgt_rows])
    base = _np(src.points[src_rows])
    m = min(len(pred), len(target), len(base))
    pred, target = pred[:m], target[:m]
    model = distance_metrics(pred, target, which, notes)
    raw = distance_metrics(base[:m], target, which, notes)
    shifted = distance_metrics(base[:m] - _np(src.points).mean(axis=0) + mu, target, which, notes)
    row = MetricsRow(pair.population_id, src.label, src.split, m, model, raw, shifted)
    return row, [f"population {pair.population_id}: {n}" for n in dict.fromkeys(notes)]


def evaluate(
    predictor: Predictor,
    pairs: Sequence[PopulationPair],
    eval_size: int,
    seed: int,
    target_mean,
    metrics: Sequence[str] = METRICS,
    threads: int = 1,
) -> MetricsReport:
    """Score ``predictor`` on every pair.

    ``predictor(source, rows)`` returns the predicted population for the
    selected source rows; the embedding it uses may depend on the whole
    source. Each pair uses at most ``eval_size`` points drawn without
    replacement from a stream derived from ``(seed, population_id)``; rows are
    reported in input order whatever the thread count.
    """
    if not pairs:
        raise InputError("nothing to evaluate: no population pairs")
    mu = _np(target_mean)
    which = tuple(m for m in METRICS if m in metrics)

    def work(pair):
        return _evaluate_pair(pair, predictor, eval_size, seed, mu, which)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]
    notes = [n for _, ns in results for n in ns]
    return MetricsReport([r for r, _ in results], eval_size, which, notes)
