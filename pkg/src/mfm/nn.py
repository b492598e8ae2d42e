"""Vector-field MLP, kNN-GCN population embedder, and Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping

import numpy as np
import torch
from torch import Tensor, nn

from mfm.errors import ConfigurationError, ContractError, NumericalError
from mfm.tensor import DTYPE, add_bias, matmul, selu

MAX_PERIOD = 1e4


def sinusoidal_embed(t: Tensor | float, dim: int) -> Tensor:
    """Interleaved ``[sin(t f_1), cos(t f_1), ...]`` with f_j geometric in [1, 1e4].

    ``t`` may be a scalar or a 1-D tensor of length b; the result is
    ``[dim]`` or ``[b, dim]`` accordingly.
    """
    if dim <= 0 or dim % 2:
        raise ContractError(f"embedding dim must be a positive even number, got {dim}")
    t = torch.as_tensor(t, dtype=DTYPE)
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=DTYPE)
    else:
        freqs = torch.exp(torch.arange(half, dtype=DTYPE) * (math.log(MAX_PERIOD) / (half - 1)))
    angles = t.unsqueeze(-1) * freqs
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)


def positional_embed(x: Tensor, dim: int) -> Tensor:
    """Apply :func:`sinusoidal_embed` per coordinate and concatenate: [b, d*dim]."""
    return sinusoidal_embed(x, dim).flatten(-2)


class Dense(nn.Module):
    """Affine layer ``x @ W + b`` with LeCun-normal init drawn from ``gen``."""

    def __init__(self, n_in: int, n_out: int, gen: torch.Generator):
        super().__init__()
        w = torch.randn(n_in, n_out, generator=gen, dtype=DTYPE) / math.sqrt(max(n_in, 1))
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(n_out, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.weight), self.bias)

    def zero_(self) -> "Dense":
        with torch.no_grad():
            self.weight.zero_()
            self.bias.zero_()
        return self


@dataclass(frozen=True)
class CondLayout:
    """What the vector field's condition columns hold.

    kind: ``none`` (FM), ``population`` (CGFM one-hot over training
    populations), or ``embedding`` (MFM population embedding). Treatment
    one-hot columns, when present, follow.
    """

    kind: Literal["none", "population", "embedding"] = "none"
    width: int = 0
    treatment_width: int = 0

    def __post_init__(self):
        if self.kind == "none" and self.width:
            raise ConfigurationError("cond kind 'none' cannot have a width")
        if self.kind != "none" and self.width <= 0:
            raise ConfigurationError(f"cond kind {self.kind!r} needs a positive width")

    @property
    def total(self) -> int:
        return self.width + self.treatment_width


@dataclass(frozen=True)
class VectorFieldConfig:
    dim: int
    hidden_width: int = 512
    n_hidden: int = 4
    embed_dim: int = 128
    skip: bool = False
    cond: CondLayout = field(default_factory=CondLayout)

    @property
    def input_width(self) -> int:
        return self.dim * (1 + self.embed_dim) + 1 + self.embed_dim + self.cond.total


class VectorField(nn.Module):
    """MLP velocity model v_t(x | cond).

    Input features are ``[x, pos(x), t, time(t), cond]``; hidden layers use
    SELU and, with ``skip``, an additive residual around every hidden-to-hidden
    layer.
    """

    def __init__(self, cfg: VectorFieldConfig, seed: int = 0):
        super().__init__()
        if cfg.n_hidden < 1:
            raise ConfigurationError("vector field needs at least one hidden layer")
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        widths = [cfg.input_width] + [cfg.hidden_width] * cfg.n_hidden
        self.hidden = nn.ModuleList(Dense(a, b, gen) for a, b in zip(widths[:-1], widths[1:]))
        self.out = Dense(cfg.hidden_width, cfg.dim, gen)

    def forward(self, x: Tensor, t: Tensor, cond: Tensor | None = None) -> Tensor:
        b, d = x.shape
        if d != self.cfg.dim:
            raise ConfigurationError(f"model dim {self.cfg.dim} but x has {d} columns")
        if cond is None:
            cond = x.new_zeros(b, 0)
        if cond.dim() != 2 or cond.shape[0] != b or cond.shape[1] != self.cfg.cond.total:
            raise ConfigurationError(
                f"cond shape {tuple(cond.shape)} does not match layout "
                f"{self.cfg.cond} for batch {b}"
            )
        t = torch.as_tensor(t, dtype=DTYPE)
        if t.dim() == 0:
            t = t.expand(b)
        h = torch.cat(
            [
                x,
                positional_embed(x, self.cfg.embed_dim),
                t.unsqueeze(1),
                sinusoidal_embed(t, self.cfg.embed_dim),
                cond,
            ],
            dim=1,
        )
        for i, layer in enumerate(self.hidden):
            z = selu(layer(h))
            h = h + z if (self.cfg.skip and i > 0) else z
        return self.out(h)


@dataclass
class KnnGraph:
    n: int
    neighbors: np.ndarray  # [n, min(k, n-1)] int indices

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i in range(self.n) for j in self.neighbors[i]]


def build_knn_graph(points: Tensor | np.ndarray, k: int) -> KnnGraph:
    """Each node's k nearest other nodes; ties go to the lower index."""
    pts = np.asarray(points.detach() if isinstance(points, Tensor) else points, dtype=np.float64)
    n = pts.shape[0]
    if n < 1:
        raise ContractError("kNN graph needs at least one point")
    m = max(0, min(k, n - 1))
    if m == 0:
        return KnnGraph(n, np.zeros((n, 0), dtype=np.int64))
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :m]
    return KnnGraph(n, order.astype(np.int64))


def canonical_order(points: Tensor) -> np.ndarray:
    """Lexicographic row order (first column most significant)."""
    arr = points.detach().numpy()
    return np.lexsort(arr.T[::-1])


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int
    k: int = 0
    n_gcn_layers: int = 3
    hidden_width: int = 512
    out_dim: int = 64
    cell_type_width: int = 0


class PopulationEmbedder(nn.Module):
    """kNN-graph GCN with mean pooling and unit-norm output.

    Node update: ``h_i <- SELU(W [h_i || mean_{j in N(i)} h_j] + b)``. With
    ``k == 0`` the neighbour half is dropped and the network is a DeepSets
    encoder (per-point MLP, mean, linear readout).
    """

    def __init__(self, cfg: EmbedderConfig, seed: int = 0):
        super().__init__()
        if cfg.k < 0:
            raise ConfigurationError("k must be non-negative")
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        fan = 2 if cfg.k > 0 else 1
        widths = [cfg.dim + cfg.cell_type_width] + [cfg.hidden_width] * cfg.n_gcn_layers
        self.convs = nn.ModuleList(Dense(a * fan, b, gen) for a, b in zip(widths[:-1], widths[1:]))
        self.readout = Dense(widths[-1], cfg.out_dim, gen)

    def node_features(self, points: Tensor, cell_type: Tensor | None = None) -> Tensor:
        n = points.shape[0]
        if cell_type is None:
            if self.cfg.cell_type_width:
                raise ConfigurationError("embedder expects a cell-type one-hot")
            return points
        cell_type = torch.as_tensor(cell_type, dtype=DTYPE)
        if cell_type.shape[-1] != self.cfg.cell_type_width:
            raise ConfigurationError("cell-type one-hot has the wrong width")
        if cell_type.dim() == 1:
            cell_type = cell_type.expand(n, -1)
        return torch.cat([points, cell_type], dim=1)

    def forward(self, points: Tensor, cell_type: Tensor | None = None) -> Tensor:
        if points.dim() != 2 or points.shape[0] < 1:
            raise ContractError("cannot embed an empty population")
        if points.shape[1] != self.cfg.dim:
            raise ConfigurationError(f"embedder dim {self.cfg.dim} but points have {points.shape[1]}")
        order = torch.from_numpy(canonical_order(points))
        points = points[order]
        if cell_type is not None and torch.as_tensor(cell_type).dim() == 2:
            cell_type = torch.as_tensor(cell_type, dtype=DTYPE)[order]
        h = self.node_features(points, cell_type)
        nbrs = None
        if self.cfg.k > 0:
            graph = build_knn_graph(points, self.cfg.k)
            nbrs = torch.from_numpy(graph.neighbors)
        for conv in self.convs:
            if nbrs is not None:
                agg = h[nbrs].mean(dim=1) if nbrs.shape[1] else torch.zeros_like(h)
                h = torch.cat([h, agg], dim=1)
            h = selu(conv(h))
        e = self.readout(h.mean(dim=0, keepdim=True))[0]
        return e / torch.linalg.norm(e)


class Adam:
    """Adam with bias correction over a named parameter set."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: torch.zeros_like(p, requires_grad=False) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p, requires_grad=False) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, Tensor]) -> None:
        if set(grads) != set(self.params):
            raise ContractError("gradient names do not match parameter names")
        for name, g in grads.items():
            if not bool(torch.isfinite(g).all()):
                raise NumericalError(f"non-finite gradient for {name!r}")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        with torch.no_grad():
            for name, p in self.params.items():
                g = grads[name]
                m, v = self.m[name], self.v[name]
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))

    def state_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.step": torch.tensor([float(self.step_count)], dtype=DTYPE)}
        out.update({f"{prefix}.m.{k}": t for k, t in self.m.items()})
        out.update({f"{prefix}.v.{k}": t for k, t in self.v.items()})
        return out

    def load_state_tensors(self, prefix: str, tensors: Mapping[str, Tensor]) -> None:
        self.step_count = int(tensors[f"{prefix}.step"].item())
        with torch.no_grad():
            for k in self.params:
                self.m[k].copy_(tensors[f"{prefix}.m.{k}"])
                self.v[k].copy_(tensors[f"{prefix}.v.{k}"])


def named_params(module: nn.Module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + name: p for name, p in module.named_parameters()}


def count_params(params: Iterable[Tensor]) -> int:
    return sum(p.numel() for p in params)


def vf_forward(model: VectorField, x: Tensor, t: Tensor, cond: Tensor | None = None) -> Tensor:
    return model(x, t, cond)


def embed_population(model: PopulationEmbedder, points: Tensor, cell_type_onehot: Tensor | None = None) -> Tensor:
    return model(points, cell_type_onehot)


def adam_step(state: Adam, grads: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Apply one Adam update in place and return the updated parameters."""
    state.step(grads)
    return state.params
