"""Coupled-population datasets: noisy letters, mean-field rollouts, file I/O."""
from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
from torch import Tensor

from mfm import glyphs
from mfm.errors import ContractError, InputError, ParseError, SimulationError
from mfm.tensor import DTYPE

Split = Literal["train", "val", "test"]
CouplingMode = Literal["independent", "paired", "ot"]
SPLITS = ("train", "val", "test")
COUPLINGS = ("independent", "paired", "ot")

FILE_FORMAT = "mfm-populations"
FILE_VERSION = 1


@dataclass
class Population:
    points: Tensor
    population_id: int
    condition: Tensor | None = None
    split: Split = "train"
    label: str = ""

    def __post_init__(self):
        self.points = torch.as_tensor(self.points, dtype=DTYPE)
        if self.points.dim() != 2 or self.points.shape[0] < 1:
            raise ContractError(f"population {self.population_id} must be a non-empty [n, d] array")
        if not bool(torch.isfinite(self.points).all()):
            raise ContractError(f"population {self.population_id} has non-finite points")
        if self.condition is not None:
            self.condition = torch.as_tensor(self.condition, dtype=DTYPE)
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass
class PopulationPair:
    source: Population
    target: Population
    coupling: CouplingMode = "paired"

    def __post_init__(self):
        if self.coupling not in COUPLINGS:
            raise ContractError(f"unknown coupling {self.coupling!r}")
        if self.source.dim != self.target.dim:
            raise ContractError("source and target dimensions differ")
        if self.coupling == "paired" and self.source.n != self.target.n:
            raise ContractError("paired coupling needs equal population sizes")

    @property
    def population_id(self) -> int:
        return self.source.population_id

    @property
    def split(self) -> str:
        return self.source.split


def derived_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# -- letters -----------------------------------------------------------------


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def sample_silhouette(glyph: str, n: int, rotation: float, rng: np.random.Generator) -> Tensor:
    """Uniform samples over a glyph silhouette, fitted to [-1, 1]^2 then rotated."""
    if not isinstance(glyph, str) or glyph not in glyphs.STROKES:
        raise InputError(f"unsupported glyph {glyph!r}; expected one of A-Z")
    if n < 1:
        raise ContractError("n must be at least 1")
    mask = glyphs.bitmap(glyph)
    rows, cols = np.nonzero(mask)
    cell = glyphs.cell_size()
    pick = rng.integers(0, rows.size, size=n)
    jitter = rng.uniform(0.0, 1.0, size=(n, 2))
    x = (cols[pick] + jitter[:, 0]) * cell
    y = (rows[pick] + jitter[:, 1]) * cell
    # bounding box of the "on" cells, fixed per glyph
    x_lo, x_hi = cols.min() * cell, (cols.max() + 1) * cell
    y_lo, y_hi = rows.min() * cell, (rows.max() + 1) * cell
    half = max(x_hi - x_lo, y_hi - y_lo) / 2.0
    pts = np.stack([(x - (x_lo + x_hi) / 2) / half, (y - (y_lo + y_hi) / 2) / half], axis=1)
    return torch.from_numpy(pts @ rotation_matrix(rotation).T)


def diffuse(target: Tensor, sigma: float, rng: np.random.Generator) -> Tensor:
    """Driftless forward diffusion: ``x0 = x1 + sigma * z`` row by row."""
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    z = rng.standard_normal(tuple(target.shape))
    return target + sigma * torch.from_numpy(z)


@dataclass
class LettersConfig:
    train_letters: str = "".join(c for c in string.ascii_uppercase if c not in "XY")
    test_letters: str = "XY"
    train_rotations: int = 10
    test_rotations: int = 10
    size_range: tuple[int, int] = (750, 2700)
    sigma: float = 0.15
    seed: int = 0


def build_letters_dataset(cfg: LettersConfig) -> list[PopulationPair]:
    """Train pairs (letter-major, rotation-minor) followed by test pairs.

    Each population draws its rotation, size, silhouette samples and noise
    from its own stream derived from ``(seed, population_id)``.
    """
    lo, hi = cfg.size_range
    if lo < 1 or hi < lo:
        raise ContractError(f"bad size range {cfg.size_range}")
    overlap = set(cfg.train_letters) & set(cfg.test_letters)
    if overlap:
        raise ContractError(f"letters in both splits: {sorted(overlap)}")
    plan = [(c, "train") for c in cfg.train_letters for _ in range(cfg.train_rotations)]
    plan += [(c, "test") for c in cfg.test_letters for _ in range(cfg.test_rotations)]
    pairs = []
    for pid, (letter, split) in enumerate(plan):
        rng = derived_rng(cfg.seed, pid)
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        n = int(rng.integers(lo, hi + 1))
        x1 = sample_silhouette(letter, n, theta, rng)
        x0 = diffuse(x1, cfg.sigma, rng)
        label = f"{letter}@{theta:.4f}"
        pairs.append(
            PopulationPair(
                Population(x0, pid, split=split, label=label),
                Population(x1, pid, split=split, label=label),
                coupling="paired",
            )
        )
    return pairs


# -- mean-field --------------------------------------------------------------


@dataclass
class MeanFieldKernel:
    """Pairwise interaction velocity k(x, y).

    ``attract``: ``strength * (y - x) * exp(-|y - x|^2 / range^2)``;
    ``repel`` is its negative; ``custom-linear`` is ``strength * (y - x)``.
    """

    kind: Literal["attract", "repel", "custom-linear"] = "attract"
    strength: float = 1.0
    range: float = 1.0

    def __post_init__(self):
        if self.kind not in ("attract", "repel", "custom-linear"):
            raise ContractError(f"unknown kernel kind {self.kind!r}")
        if self.kind != "custom-linear" and self.range <= 0:
            raise ContractError("kernel range must be positive")

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.pairwise_mean(np.asarray(x, float)[None], np.asarray(y, float)[None])[0]

    def pairwise_mean(self, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        """``(1/m) sum_j k(x_i, y_j)`` for every row of x; y defaults to x."""
        y = x if y is None else y
        diff = y[None, :, :] - x[:, None, :]
        if self.kind == "custom-linear":
            return self.strength * diff.mean(axis=1)
        w = np.exp(-np.einsum("ijk,ijk->ij", diff, diff) / self.range**2)
        sign = 1.0 if self.kind == "attract" else -1.0
        return sign * self.strength * (diff * w[:, :, None]).mean(axis=1)


def simulate_meanfield(initial: Tensor, kernel: MeanFieldKernel, T: float, steps: int) -> Tensor:
    """Explicit Euler on ``dx_i/dt = (1/n) sum_j k(x_i, x_j)``; j = i included."""
    if steps < 1:
        raise ContractError("steps must be at least 1")
    x = np.array(torch.as_tensor(initial, dtype=DTYPE).detach().numpy(), dtype=np.float64)
    dt = T / steps
    for step in range(1, steps + 1):
        x = x + dt * kernel.pairwise_mean(x)
        if not np.isfinite(x).all():
            raise SimulationError("non-finite particle state", step)
    return torch.from_numpy(x)


@dataclass
class MeanFieldConfig:
    n_train: int = 20
    n_test: int = 5
    dim: int = 2
    components: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (200, 400)
    center_box: float = 2.0
    std_range: tuple[float, float] = (0.2, 0.6)
    kernel: MeanFieldKernel = field(default_factory=lambda: MeanFieldKernel("attract", 2.0, 1.0))
    T: float = 1.0
    steps: int = 50
    seed: int = 0


def sample_gaussian_mixture(cfg: MeanFieldConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    k = int(rng.integers(cfg.components[0], cfg.components[1] + 1))
    centers = rng.uniform(-cfg.center_box, cfg.center_box, size=(k, cfg.dim))
    stds = rng.uniform(*cfg.std_range, size=k)
    comp = rng.integers(0, k, size=n)
    return centers[comp] + stds[comp, None] * rng.standard_normal((n, cfg.dim))


def build_meanfield_dataset(cfg: MeanFieldConfig) -> list[PopulationPair]:
    """Gaussian-mixture initial populations paired row-wise with their rollouts."""
    pairs = []
    splits = ["train"] * cfg.n_train + ["test"] * cfg.n_test
    for pid, split in enumerate(splits):
        rng = derived_rng(cfg.seed, pid)
        n = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        x0 = torch.from_numpy(sample_gaussian_mixture(cfg, n, rng))
        x1 = simulate_meanfield(x0, cfg.kernel, cfg.T, cfg.steps)
        label = f"meanfield-{pid}"
        pairs.append(
            PopulationPair(
                Population(x0, pid, split=split, label=label),
                Population(x1, pid, split=split, label=label),
                coupling="paired",
            )
        )
    return pairs


# -- file format -------------------------------------------------------------
#
# Newline-delimited JSON. Line 1 is a header {"format", "version", "dim"};
# every further line is one population:
#   {"pair": int, "role": "source"|"target", "coupling": str,
#    "population_id": int, "split": str, "label": str,
#    "condition": [float] | null, "points": [[float, ...], ...]}
# An empty file is an empty dataset.


def _population_record(pop: Population, pair: int, role: str, coupling: str) -> dict:
    return {
        "pair": pair,
        "role": role,
        "coupling": coupling,
        "population_id": pop.population_id,
        "split": pop.split,
        "label": pop.label,
        "condition": None if pop.condition is None else pop.condition.tolist(),
        "points": pop.points.tolist(),
    }


def save_populations(pairs: Sequence[PopulationPair], path: str | Path) -> None:
    path = Path(path)
    if not pairs:
        path.write_text("")
        return
    dim = pairs[0].source.dim
    lines = [json.dumps({"format": FILE_FORMAT, "version": FILE_VERSION, "dim": dim})]
    for i, pair in enumerate(pairs):
        if pair.source.dim != dim:
            raise ContractError("all populations in a file must share the dimension")
        lines.append(json.dumps(_population_record(pair.source, i, "source", pair.coupling)))
        lines.append(json.dumps(_population_record(pair.target, i, "target", pair.coupling)))
    path.write_text("\n".join(lines) + "\n")


def _parse_population(rec: dict, dim: int, lineno: int) -> Population:
    try:
        points = np.asarray(rec["points"], dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != dim:
            raise ParseError(f"points have shape {points.shape}, expected [n, {dim}]", lineno)
        cond = rec.get("condition")
        return Population(
            torch.from_numpy(points),
            int(rec["population_id"]),
            condition=None if cond is None else torch.tensor(cond, dtype=DTYPE),
            split=rec["split"],
            label=str(rec.get("label", "")),
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad population record: {exc}", lineno) from exc


def load_populations(path: str | Path) -> list[PopulationPair]:
    text = Path(path).read_text()
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        return []
    records = []
    for lineno, ln in lines:
        try:
            records.append((lineno, json.loads(ln)))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
    (hline, header), body = records[0], records[1:]
    if not isinstance(header, dict) or header.get("format") != FILE_FORMAT:
        raise ParseError("missing population file header", hline)
    if header.get("version") != FILE_VERSION:
        raise ParseError(f"unsupported version {header.get('version')}", hline)
    dim = header.get("dim")
    if not isinstance(dim, int) or dim < 1:
        raise ParseError("header dim must be a positive integer", hline)

    grouped: dict[int, dict] = {}
    for lineno, rec in body:
        if not isinstance(rec, dict):
            raise ParseError("record is not an object", lineno)
        try:
            pair, role = int(rec["pair"]), rec["role"]
            coupling = rec["coupling"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad population record: {exc}", lineno) from exc
        if role not in ("source", "target"):
            raise ParseError(f"role must be source or target, got {role!r}", lineno)
        slot = grouped.setdefault(pair, {"coupling": coupling, "line": lineno})
        if slot["coupling"] != coupling:
            raise ParseError(f"pair {pair} has inconsistent coupling", lineno)
        if role in slot:
            raise ParseError(f"pair {pair} has two {role} records", lineno)
        slot[role] = _parse_population(rec, dim, lineno)

    pairs = []
    for idx in sorted(grouped):
        slot = grouped[idx]
        if "source" not in slot or "target" not in slot:
            raise ParseError(f"pair {idx} is missing its source or target", slot["line"])
        try:
            pairs.append(PopulationPair(slot["source"], slot["target"], slot["coupling"]))
        except ContractError as exc:
            raise ParseError(f"pair {idx}: {exc}", slot["line"]) from exc
    return pairs


def split_pairs(pairs: Sequence[PopulationPair], split: str) -> list[PopulationPair]:
    return [p for p in pairs if p.split == split]
