"""Flow-matching losses and the alternating FM / CGFM / MFM training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from mfm.config import TrainConfig
from mfm.coupling import independent_coupling, ot_coupling
from mfm.datagen import Population, PopulationPair, derived_rng
from mfm.errors import ConfigurationError, ContractError, NumericalError, TrainingError
from mfm.model import FlowModel
from mfm.nn import Adam, VectorField
from mfm.tensor import DTYPE, backward

log = logging.getLogger(__name__)

EmbedFn = Callable[[Population, Tensor], Tensor]


def interpolate(x0: Tensor, x1: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
    """Linear interpolant ``(1 - t) x0 + t x1`` and its time derivative."""
    if x0.shape != x1.shape:
        raise ContractError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ")
    t = torch.as_tensor(t, dtype=DTYPE)
    tt = t.reshape(-1, 1) if t.dim() else t
    return (1.0 - tt) * x0 + tt * x1, x1 - x0


@dataclass
class PopulationDraw:
    """Particles drawn from one population for one step."""

    population: Population  # the source population (id, treatment)
    x0: Tensor  # flow-path source rows
    x1: Tensor
    t: Tensor
    embed_points: Tensor  # what the embedder sees


@dataclass
class Batch:
    draws: list[PopulationDraw]

    @property
    def population_ids(self) -> list[int]:
        return [d.population.population_id for d in self.draws]

    @property
    def x0(self) -> Tensor:
        return torch.cat([d.x0 for d in self.draws])

    @property
    def x1(self) -> Tensor:
        return torch.cat([d.x1 for d in self.draws])

    @property
    def t(self) -> Tensor:
        return torch.cat([d.t for d in self.draws])


def flow_matching_loss(vf: VectorField, batch: Batch, conds: Sequence[Tensor]) -> Tensor:
    """Mean over populations of the mean squared velocity error per particle.

    ``conds[i]`` is the condition vector of ``batch.draws[i]``; it is
    repeated over that population's particles.
    """
    if len(conds) != len(batch.draws):
        raise ContractError("one condition vector per population is required")
    sizes = [d.x0.shape[0] for d in batch.draws]
    xt, target = interpolate(batch.x0, batch.x1, batch.t)
    cond = torch.cat([c.reshape(1, -1).expand(n, -1) for c, n in zip(conds, sizes)])
    sq = ((vf(xt, batch.t, cond) - target) ** 2).sum(dim=1)
    per_pop = torch.stack([chunk.mean() for chunk in torch.split(sq, sizes)])
    return per_pop.mean()


def model_conditions(model: FlowModel, batch: Batch, embed: EmbedFn | None = None) -> list[Tensor]:
    if embed is None:
        return [model.condition(d.population, d.embed_points) for d in batch.draws]
    return [torch.cat([embed(d.population, d.embed_points), model.treatment(d.population)]) for d in batch.draws]


def mfm_loss(model: FlowModel, batch: Batch, embed: EmbedFn | None = None) -> Tensor:
    """Flow-matching loss with cond = [embedding(p0) || treatment].

    ``embed`` replaces the model's embedder, e.g. with a fixed lookup; it is
    called as ``embed(population, embed_points)``.
    """
    for d in batch.draws:
        if d.embed_points.shape[0] < 1:
            raise ContractError(f"population {d.population.population_id} is empty")
    return flow_matching_loss(model.vf, batch, model_conditions(model, batch, embed))


def make_source(x0: Tensor, source_mode: str, rng: np.random.Generator) -> Tensor:
    """Flow-path source rows: the data itself or i.i.d. standard normal draws."""
    if source_mode == "data":
        return x0
    if source_mode == "standard_normal":
        return torch.from_numpy(rng.standard_normal(tuple(x0.shape)))
    raise ConfigurationError(f"unknown source mode {source_mode!r}")


def _rows(rng: np.random.Generator, n: int, b: int) -> np.ndarray:
    return rng.choice(n, size=b, replace=b > n)


def draw_population(pair: PopulationPair, cfg: TrainConfig, rng: np.random.Generator) -> PopulationDraw:
    src, tgt = pair.source.points, pair.target.points
    b = cfg.sample_batch
    if cfg.coupling_mode == "paired":
        if pair.source.n != pair.target.n:
            raise ConfigurationError(f"population {pair.population_id}: paired coupling needs equal sizes")
        idx = torch.from_numpy(_rows(rng, pair.source.n, b))
        x0_data, x1 = src[idx], tgt[idx]
    elif cfg.coupling_mode == "independent":
        c = independent_coupling(pair.source.n, pair.target.n, b, rng)
        x0_data, x1 = src[torch.from_numpy(c.source_idx)], tgt[torch.from_numpy(c.target_idx)]
    elif cfg.coupling_mode == "ot":
        x0_data = src[torch.from_numpy(_rows(rng, pair.source.n, b))]
        x1 = tgt[torch.from_numpy(_rows(rng, pair.target.n, b))]
    else:
        raise ConfigurationError(f"unknown coupling mode {cfg.coupling_mode!r}")
    x0 = make_source(x0_data, cfg.source_mode, rng)
    if cfg.coupling_mode == "ot":
        x1 = x1[torch.from_numpy(ot_coupling(x0, x1).target_idx)]
    t = torch.from_numpy(rng.uniform(0.0, 1.0, size=b))
    embed_points = pair.source.points if cfg.embed_points == "population" else x0_data
    return PopulationDraw(pair.source, x0, x1, t, embed_points)


def sample_batch(pairs: Sequence[PopulationPair], cfg: TrainConfig, step: int) -> Batch:
    """The batch for ``step``; a pure function of (seed, step, population id)."""
    rng = derived_rng(cfg.seed, step)
    m = min(cfg.population_batch, len(pairs))
    chosen = rng.choice(len(pairs), size=m, replace=False)
    draws = [
        draw_population(pairs[i], cfg, derived_rng(cfg.seed, step, pairs[i].population_id))
        for i in chosen
    ]
    return Batch(draws)


@dataclass
class TrainState:
    step: int = 0
    history: list[tuple[int, float]] = field(default_factory=list)
    opt_omega: Adam | None = None
    opt_theta: Adam | None = None

    def tensors(self) -> dict[str, Tensor]:
        out = {"train.step": torch.tensor([float(self.step)], dtype=DTYPE)}
        if self.opt_omega is not None:
            out.update(self.opt_omega.state_tensors("opt.omega"))
        if self.opt_theta is not None:
            out.update(self.opt_theta.state_tensors("opt.theta"))
        return out


def init_state(model: FlowModel, cfg: TrainConfig) -> TrainState:
    opt_omega = Adam(model.omega(), cfg.lr, cfg.betas, cfg.adam_eps)
    opt_theta = Adam(model.theta(), cfg.lr, cfg.betas, cfg.adam_eps) if model.mode == "MFM" else None
    return TrainState(0, [], opt_omega, opt_theta)


def restore_state(model: FlowModel, cfg: TrainConfig, tensors: dict[str, Tensor]) -> TrainState:
    state = init_state(model, cfg)
    state.step = int(tensors["train.step"].item())
    state.opt_omega.load_state_tensors("opt.omega", tensors)
    if state.opt_theta is not None:
        state.opt_theta.load_state_tensors("opt.theta", tensors)
    return state


def updates_omega(mode: str, step: int) -> bool:
    """MFM alternates: odd steps update the vector field, even steps the embedder."""
    return mode != "MFM" or step % 2 == 1


def train(
    cfg: TrainConfig,
    pairs: Sequence[PopulationPair],
    model: FlowModel,
    state: TrainState | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run steps ``state.step + 1 .. cfg.epochs`` and return the updated state.

    The recorded loss for a step is the value computed before that step's
    update. Raises :class:`TrainingError` on a non-finite loss or gradient.
    """
    if cfg.mode != model.mode:
        raise ConfigurationError(f"config mode {cfg.mode} but model mode {model.mode}")
    if cfg.epochs > 0 and not pairs:
        raise ContractError("training needs at least one population pair")
    state = state or init_state(model, cfg)
    while state.step < cfg.epochs:
        step = state.step + 1
        batch = sample_batch(pairs, cfg, step)
        omega_step = updates_omega(model.mode, step)
        if model.mode == "MFM" and omega_step:
            # embedder gradients are not needed on vector-field steps
            with torch.no_grad():
                conds = model_conditions(model, batch)
            loss = flow_matching_loss(model.vf, batch, conds)
        else:
            loss = mfm_loss(model, batch)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingError("non-finite loss", step, batch.population_ids)
        params = model.omega() if omega_step else model.theta()
        opt = state.opt_omega if omega_step else state.opt_theta
        try:
            opt.step(backward(loss, params))
        except NumericalError as exc:
            raise TrainingError(str(exc), step, batch.population_ids) from exc
        state.step = step
        state.history.append((step, value))
        if step % 500 == 0:
            log.info("step %d  %s loss %.6f", step, model.mode, value)
        if on_checkpoint is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state
