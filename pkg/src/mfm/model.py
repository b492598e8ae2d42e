"""A trained flow model: vector field plus whatever builds its condition."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import torch
from torch import Tensor

from mfm.datagen import Population, PopulationPair
from mfm.errors import ConfigurationError, ContractError
from mfm.nn import (
    CondLayout,
    EmbedderConfig,
    PopulationEmbedder,
    VectorField,
    VectorFieldConfig,
    named_params,
)
from mfm.tensor import DTYPE, load_checkpoint, save_checkpoint

Mode = Literal["FM", "CGFM", "MFM"]


@dataclass
class FlowModel:
    """Vector field v_t(x | cond) and the rule producing ``cond`` for a population.

    FM conditions on the treatment one-hot only, CGFM prepends a one-hot over
    the training populations (uniform ``1/N`` for any population it has not
    seen), MFM prepends the learned population embedding.
    """

    mode: Mode
    vf: VectorField
    embedder: PopulationEmbedder | None = None
    population_slots: list[int] = field(default_factory=list)
    treatment_width: int = 0

    def __post_init__(self):
        if self.mode not in ("FM", "CGFM", "MFM"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "MFM" and self.embedder is None:
            raise ConfigurationError("MFM requires a population embedder")
        if self.mode == "CGFM" and not self.population_slots:
            raise ConfigurationError("CGFM requires the training population ids")
        self._slot = {pid: i for i, pid in enumerate(self.population_slots)}

    def treatment(self, pop: Population) -> Tensor:
        if self.treatment_width == 0:
            return torch.zeros(0, dtype=DTYPE)
        if pop.condition is None or pop.condition.shape != (self.treatment_width,):
            raise ConfigurationError(
                f"population {pop.population_id} needs a treatment one-hot of width {self.treatment_width}"
            )
        return pop.condition

    def population_onehot(self, population_id: int) -> Tensor:
        n = len(self.population_slots)
        if population_id in self._slot:
            v = torch.zeros(n, dtype=DTYPE)
            v[self._slot[population_id]] = 1.0
            return v
        return torch.full((n,), 1.0 / n, dtype=DTYPE)

    def condition(self, pop: Population, embed_points: Tensor | None = None) -> Tensor:
        """Condition vector for one source population.

        ``embed_points`` overrides the points handed to the embedder (MFM
        only); by default the whole source population is embedded.
        """
        parts = []
        if self.mode == "CGFM":
            parts.append(self.population_onehot(pop.population_id))
        elif self.mode == "MFM":
            pts = pop.points if embed_points is None else embed_points
            parts.append(self.embedder(pts))
        parts.append(self.treatment(pop))
        return torch.cat(parts)

    def omega(self) -> dict[str, Tensor]:
        return named_params(self.vf, "vf.")

    def theta(self) -> dict[str, Tensor]:
        return named_params(self.embedder, "emb.") if self.embedder is not None else {}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.omega(), **self.theta()}

    def meta(self) -> dict:
        return {
            "mode": self.mode,
            "vf": {**asdict(self.vf.cfg), "cond": asdict(self.vf.cfg.cond)},
            "embedder": asdict(self.embedder.cfg) if self.embedder is not None else None,
            "population_slots": list(self.population_slots),
            "treatment_width": self.treatment_width,
        }

    def save(self, path: str | Path, extra: dict[str, Tensor] | None = None, meta: dict | None = None) -> None:
        tensors = {k: v.detach() for k, v in self.parameters().items()}
        tensors.update(extra or {})
        save_checkpoint(path, tensors, {"model": self.meta(), **(meta or {})})

    @classmethod
    def from_meta(cls, meta: dict) -> "FlowModel":
        vf_cfg = dict(meta["vf"])
        vf_cfg["cond"] = CondLayout(**vf_cfg["cond"])
        emb = meta.get("embedder")
        return cls(
            mode=meta["mode"],
            vf=VectorField(VectorFieldConfig(**vf_cfg)),
            embedder=PopulationEmbedder(EmbedderConfig(**emb)) if emb else None,
            population_slots=list(meta["population_slots"]),
            treatment_width=int(meta["treatment_width"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["FlowModel", dict[str, Tensor], dict]:
        """Returns the model, the leftover (non-parameter) tensors and the meta block."""
        tensors, meta = load_checkpoint(path)
        model = cls.from_meta(meta["model"])
        with torch.no_grad():
            for name, p in model.parameters().items():
                if name not in tensors:
                    raise ContractError(f"checkpoint lacks parameter {name!r}")
                if tuple(tensors[name].shape) != tuple(p.shape):
                    raise ContractError(f"checkpoint shape mismatch for {name!r}")
                p.copy_(tensors.pop(name))
        return model, tensors, meta


def treatment_width_of(pairs: Sequence[PopulationPair]) -> int:
    widths = {0 if p.source.condition is None else int(p.source.condition.numel()) for p in pairs}
    if len(widths) > 1:
        raise ConfigurationError(f"populations disagree on treatment one-hot width: {sorted(widths)}")
    return widths.pop() if widths else 0


def build_flow_model(
    mode: Mode,
    dim: int,
    train_pairs: Sequence[PopulationPair],
    *,
    hidden_width: int = 512,
    n_hidden: int = 4,
    embed_dim: int = 128,
    skip: bool = False,
    k: int = 0,
    n_gcn_layers: int = 3,
    gcn_width: int = 512,
    embedding_dim: int = 64,
    seed: int = 0,
) -> FlowModel:
    tw = treatment_width_of(train_pairs)
    slots: list[int] = []
    embedder = None
    if mode == "FM":
        layout = CondLayout("none", 0, tw)
    elif mode == "CGFM":
        slots = sorted({p.population_id for p in train_pairs})
        layout = CondLayout("population", len(slots), tw)
    elif mode == "MFM":
        layout = CondLayout("embedding", embedding_dim, tw)
        embedder = PopulationEmbedder(
            EmbedderConfig(dim, k, n_gcn_layers, gcn_width, embedding_dim), seed=seed + 1
        )
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")
    vf = VectorField(VectorFieldConfig(dim, hidden_width, n_hidden, embed_dim, skip, layout), seed=seed)
    return FlowModel(mode, vf, embedder, slots, tw)
