"""Experiment configuration schema.

One JSON document covers dataset generation, the model, training, sampling
and evaluation. Unknown keys are rejected. All randomness derives from the
top-level ``seed``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from mfm.errors import ConfigurationError


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class LettersSection(Strict):
    train_letters: str = "ABCDEFGHIJKLMNOPQRSTUVWZ"
    test_letters: str = "XY"
    train_rotations: int = Field(10, ge=1)
    test_rotations: int = Field(10, ge=1)
    size_range: tuple[int, int] = (750, 2700)
    sigma: float = Field(0.15, ge=0)

    @model_validator(mode="after")
    def _check(self):
        letters = set(self.train_letters) | set(self.test_letters)
        if not letters <= set("ABCDEFGHIJKLMNOPQRSTUVWXYZ"):
            raise ValueError("letters must be upper-case A-Z")
        if set(self.train_letters) & set(self.test_letters):
            raise ValueError("train and test letters overlap")
        if not 1 <= self.size_range[0] <= self.size_range[1]:
            raise ValueError("size_range must satisfy 1 <= lo <= hi")
        return self


class KernelSection(Strict):
    kind: Literal["attract", "repel", "custom-linear"] = "attract"
    strength: float = 2.0
    range: float = Field(1.0, gt=0)


class MeanFieldSection(Strict):
    n_train: int = Field(20, ge=1)
    n_test: int = Field(5, ge=0)
    dim: int = Field(2, ge=1)
    components: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (200, 400)
    center_box: float = 2.0
    std_range: tuple[float, float] = (0.2, 0.6)
    kernel: KernelSection = KernelSection()
    T: float = Field(1.0, gt=0)
    steps: int = Field(50, ge=1)


class DatasetConfig(Strict):
    generator: Literal["letters", "meanfield", "file"] = "letters"
    letters: LettersSection = LettersSection()
    meanfield: MeanFieldSection = MeanFieldSection()
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.generator == "file":
            if not self.path:
                raise ValueError("dataset.path is required for the file generator")
            if not Path(self.path).is_file():
                raise ValueError(f"dataset.path does not exist: {self.path}")
        return self


class ModelConfig(Strict):
    mode: Literal["FM", "CGFM", "MFM"] = "MFM"
    hidden_width: int = Field(512, ge=1)
    n_hidden: int = Field(4, ge=1)
    embed_dim: int = Field(128, ge=2, multiple_of=2)
    skip: bool = False
    k: int = Field(0, ge=0)
    n_gcn_layers: int = Field(3, ge=1)
    gcn_width: int = Field(512, ge=1)
    embedding_dim: int = Field(64, ge=1)


class TrainConfig(Strict):
    """Training hyperparameters.

    One "epoch" is one optimisation step over a sampled batch of
    populations. ``embed_points`` picks what the embedder sees during
    training: the whole source population or only the particles drawn for
    the step.
    """

    mode: Literal["FM", "CGFM", "MFM"] = "MFM"
    population_batch: int = Field(10, ge=1)
    sample_batch: int = Field(700, ge=1)
    epochs: int = Field(24000, ge=0)
    lr: float = Field(1e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    source_mode: Literal["data", "standard_normal"] = "data"
    coupling_mode: Literal["independent", "paired", "ot"] = "paired"
    embed_points: Literal["population", "batch"] = "population"
    checkpoint_every: int = Field(0, ge=0)
    seed: int = 0


class IntegratorConfig(Strict):
    scheme: Literal["euler", "rk4"] = "euler"
    steps: int = Field(100, ge=1)
    record_trajectory: bool = False


class EvalConfig(Strict):
    eval_size: int = Field(512, ge=1)
    w1: bool = True
    w2: bool = True
    mmd: bool = True
    r2: bool = True
    threads: int = Field(1, ge=1)


class ExperimentConfig(Strict):
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    integrator: IntegratorConfig = IntegratorConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _sync(self):
        if self.train.mode != self.model.mode:
            raise ValueError(f"train.mode {self.train.mode} differs from model.mode {self.model.mode}")
        if self.train.seed != self.seed:
            self.train.seed = self.seed
        return self


def set_dotted(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot override inside non-object key {k!r}")
    node[keys[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigurationError(f"override must look like key.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None, overrides: list[str] = (), **top: Any) -> ExperimentConfig:
    """Read a config file (or defaults), apply dotted overrides, validate."""
    doc: dict = json.loads(Path(path).read_text()) if path else {}
    for item in overrides:
        set_dotted(doc, *parse_override(item))
    for key, value in top.items():
        if value is not None:
            set_dotted(doc, key, value)
    model_mode = doc.get("model", {}).get("mode")
    train_mode = doc.get("train", {}).get("mode")
    if model_mode and not train_mode:
        doc.setdefault("train", {})["mode"] = model_mode
    elif train_mode and not model_mode:
        doc.setdefault("model", {})["mode"] = train_mode
    return ExperimentConfig.model_validate(doc)
