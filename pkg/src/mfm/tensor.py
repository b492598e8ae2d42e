"""Dense float64 tensors with reverse-mode autodiff.

The engine is torch's dynamic tape restricted to float64 on CPU. This module
adds the pieces the rest of the package relies on: strict shape checks,
SELU with fixed constants, gradient extraction for a named parameter set, an
independent central-difference gradient checker, and a bit-exact JSON
checkpoint format.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import Tensor

from mfm.errors import ContractError, DimensionError, NumericalError, ParseError

DTYPE = torch.float64
SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

CHECKPOINT_FORMAT = "mfm-checkpoint"
CHECKPOINT_VERSION = 1


def as_tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-wise bias add; the only broadcast the package uses."""
    if x.dim() != 2 or bias.dim() != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"bias {tuple(bias.shape)} does not match rows of {tuple(x.shape)}")
    return x + bias


def selu(x: Tensor) -> Tensor:
    return SELU_SCALE * torch.where(x > 0, x, SELU_ALPHA * torch.expm1(torch.clamp(x, max=0.0)))


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericalError(f"non-finite values in {what}")
    return t


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradient of a scalar loss with respect to each named parameter.

    Parameters the loss does not depend on receive a zero gradient. Nothing is
    accumulated into ``.grad``; the tape is consumed.
    """
    if loss.numel() != 1:
        raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    if not names:
        return {}
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(params[n])).detach()
        for n, g in zip(names, grads)
    }


def finite_diff_check(
    loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-6
) -> float:
    """Compare autodiff gradients with central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values on each
    call. Returns the max over parameters of
    ``|autodiff - fd| / (|autodiff| + 1e-8)`` with norms taken over each
    parameter tensor.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if not params:
        return 0.0
    auto = backward(loss_fn(), params)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd[i] = (up - down) / (2.0 * eps)
            a = auto[name].reshape(-1)
            err = float(torch.linalg.norm(a - fd) / (torch.linalg.norm(a) + 1e-8))
            worst = max(worst, err)
    return worst


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor], meta: dict | None = None) -> None:
    """Write named tensors as JSON; float repr makes the round trip bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            name: {
                "shape": list(t.shape),
                "values": [float(v) for v in t.detach().reshape(-1).tolist()],
            }
            for name, t in tensors.items()
        },
    }
    for name, entry in doc["tensors"].items():
        if not all(math.isfinite(v) for v in entry["values"]):
            raise NumericalError(f"refusing to checkpoint non-finite tensor {name!r}")
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid checkpoint JSON: {exc.msg}", exc.lineno) from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"not a checkpoint file: {path}")
    out = {}
    for name, entry in doc["tensors"].items():
        shape = entry["shape"]
        values = entry["values"]
        if math.prod(shape) != len(values):
            raise ParseError(f"tensor {name!r}: shape {shape} does not match {len(values)} values")
        out[name] = torch.tensor(values, dtype=DTYPE).reshape(shape)
    return out, doc.get("meta", {})
