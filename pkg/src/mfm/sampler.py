"""Push a source population through the learned ODE from t=0 to t=1."""
from __future__ import annotations

from typing import Callable

import torch
from torch import Tensor

from mfm.config import IntegratorConfig
from mfm.datagen import Population
from mfm.errors import IntegrationError
from mfm.model import FlowModel
from mfm.tensor import DTYPE

Field = Callable[[Tensor, Tensor], Tensor]


def as_field(vf, cond: Tensor | None) -> Field:
    """Close a vector-field module over a fixed condition vector."""

    def field(x: Tensor, t: Tensor) -> Tensor:
        c = None if cond is None else cond.reshape(1, -1).expand(x.shape[0], -1)
        return vf(x, t.expand(x.shape[0]), c)

    return field


@torch.no_grad()
def integrate(
    field: Field, x0: Tensor, cfg: IntegratorConfig | None = None
) -> Tensor | tuple[Tensor, Tensor]:
    """Fixed-step Euler or RK4 on dx/dt = field(x, t) over [0, 1].

    Returns the final state, or ``(final, trajectory)`` with trajectory shape
    ``[steps + 1, n, d]`` when ``cfg.record_trajectory`` is set.
    """
    cfg = cfg or IntegratorConfig()
    x = torch.as_tensor(x0, dtype=DTYPE).clone()
    h = 1.0 / cfg.steps
    traj = [x.clone()] if cfg.record_trajectory else None
    for i in range(cfg.steps):
        t = torch.tensor(i * h, dtype=DTYPE)
        if cfg.scheme == "euler":
            x = x + h * field(x, t)
        else:
            k1 = field(x, t)
            k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = field(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = field(x + h * k3, t + h)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not bool(torch.isfinite(x).all()):
            raise IntegrationError("non-finite state during integration", i + 1)
        if traj is not None:
            traj.append(x.clone())
    if traj is not None:
        return x, torch.stack(traj)
    return x


@torch.no_grad()
def push_forward(
    model: FlowModel,
    source: Population,
    cfg: IntegratorConfig | None = None,
    rows: Tensor | None = None,
) -> Population:
    """Embed the whole source once, then integrate every point under that condition.

    ``rows`` optionally restricts which source points are transported; the
    condition is still computed from the full population.
    """
    cfg = cfg or IntegratorConfig(record_trajectory=False)
    cond = model.condition(source)
    x0 = source.points if rows is None else source.points[rows]
    out = integrate(as_field(model.vf, cond), x0, cfg.model_copy(update={"record_trajectory": False}))
    return Population(out, source.population_id, source.condition, source.split, source.label)
