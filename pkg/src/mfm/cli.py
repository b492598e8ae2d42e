"""Command line entry point: generate, train, sample, eval.

Every command reads one JSON experiment config (``--config``), applies
``--set key.path=value`` overrides, and writes a resolved snapshot
``<out>/<command>.config.json`` next to its outputs.

Exit codes: 0 success, 2 validation error, 3 runtime or numerical error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import pydantic
import torch

from mfm import __version__
from mfm.config import ExperimentConfig, load_config
from mfm.datagen import (
    LettersConfig,
    MeanFieldConfig,
    MeanFieldKernel,
    Population,
    PopulationPair,
    build_letters_dataset,
    build_meanfield_dataset,
    load_populations,
    save_populations,
    split_pairs,
)
from mfm.errors import InputError, MFMError, NumericalError, ValidationError
from mfm.metrics import MetricsReport, evaluate, train_target_mean
from mfm.model import FlowModel, build_flow_model
from mfm.sampler import as_field, integrate, push_forward
from mfm.training import TrainState, init_state, restore_state, train

log = logging.getLogger("mfm")

SPLITS = ("train", "val", "test")


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "data"


def write_snapshot(cfg: ExperimentConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}.config.json"
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_pairs(cfg: ExperimentConfig) -> list[PopulationPair]:
    ds = cfg.dataset
    if ds.generator == "letters":
        lt = ds.letters
        return build_letters_dataset(
            LettersConfig(
                lt.train_letters, lt.test_letters, lt.train_rotations, lt.test_rotations,
                tuple(lt.size_range), lt.sigma, cfg.seed,
            )
        )
    if ds.generator == "meanfield":
        mf = ds.meanfield
        return build_meanfield_dataset(
            MeanFieldConfig(
                mf.n_train, mf.n_test, mf.dim, tuple(mf.components), tuple(mf.size_range),
                mf.center_box, tuple(mf.std_range),
                MeanFieldKernel(mf.kernel.kind, mf.kernel.strength, mf.kernel.range),
                mf.T, mf.steps, cfg.seed,
            )
        )
    return load_populations(ds.path)


def cmd_generate(cfg: ExperimentConfig) -> dict:
    """Write ``data/{train,val,test}.jsonl`` and ``data/manifest.json``."""
    pairs = generate_pairs(cfg)
    ddir = data_dir(cfg)
    ddir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, "generate")
    files = {}
    for split in SPLITS:
        path = ddir / f"{split}.jsonl"
        save_populations(split_pairs(pairs, split), path)
        files[split] = {"path": path.name, "sha256": sha256(path)}
    manifest = {
        "generator": cfg.dataset.generator,
        "seed": cfg.seed,
        "params": cfg.dataset.model_dump(mode="json"),
        "counts": {s: len(split_pairs(pairs, s)) for s in SPLITS},
        "files": files,
    }
    (ddir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("generated %s", manifest["counts"])
    return manifest


def load_split(cfg: ExperimentConfig, split: str) -> list[PopulationPair]:
    path = data_dir(cfg) / f"{split}.jsonl"
    if not path.is_file():
        raise InputError(f"dataset file {path} not found; run `mfm generate` first")
    return load_populations(path)


def new_model(cfg: ExperimentConfig, train_pairs: Sequence[PopulationPair]) -> FlowModel:
    m = cfg.model
    return build_flow_model(
        m.mode, train_pairs[0].source.dim, train_pairs,
        hidden_width=m.hidden_width, n_hidden=m.n_hidden, embed_dim=m.embed_dim, skip=m.skip,
        k=m.k, n_gcn_layers=m.n_gcn_layers, gcn_width=m.gcn_width, embedding_dim=m.embedding_dim,
        seed=cfg.seed,
    )


def _save_training(model: FlowModel, state: TrainState, path: Path) -> None:
    model.save(path, extra=state.tensors(), meta={"history": state.history})


def write_loss_csv(path: Path, mode: str, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mode", "loss"])
        for step, loss in history:
            w.writerow([step, mode, repr(loss)])


def cmd_train(cfg: ExperimentConfig, checkpoint: str | None = None) -> TrainState:
    """Train (or resume) and write checkpoints plus ``loss.csv``."""
    pairs = load_split(cfg, "train")
    if not pairs:
        raise InputError("training split is empty")
    if checkpoint:
        model, tensors, meta = FlowModel.load(checkpoint)
        if "train.step" not in tensors:
            raise InputError(f"{checkpoint} holds no optimizer state; cannot resume")
        state = restore_state(model, cfg.train, tensors)
        state.history = [(int(s), float(v)) for s, v in meta.get("history", [])]
    else:
        model = new_model(cfg, pairs)
        state = init_state(model, cfg.train)
    out = Path(cfg.out)
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, "train")

    def periodic(st: TrainState) -> None:
        _save_training(model, st, ckdir / f"step_{st.step:07d}.json")

    state = train(cfg.train, pairs, model, state, on_checkpoint=periodic)
    _save_training(model, state, ckdir / "final.json")
    write_loss_csv(out / "loss.csv", model.mode, state.history)
    return state


class _Stub:
    """Stand-ins for a trained model used to check the plumbing."""

    @staticmethod
    def perfect(pairs: Sequence[PopulationPair]):
        by_id = {p.population_id: p for p in pairs}

        def predict(source: Population, rows):
            tgt = by_id[source.population_id].target
            pts = tgt.points[rows] if tgt.n == source.n else tgt.points
            return Population(pts, source.population_id, source.condition, source.split, source.label)

        return predict


def make_predictor(model: FlowModel, cfg: ExperimentConfig):
    def predict(source: Population, rows):
        return push_forward(model, source, cfg.integrator, rows)

    return predict


def cmd_eval(
    cfg: ExperimentConfig, checkpoint: str | None, split: str = "test", stub: str | None = None
) -> MetricsReport:
    """Write ``eval/<split>_metrics.csv`` and ``eval/<split>_aggregate.json``."""
    pairs = load_split(cfg, split)
    if not pairs:
        raise InputError(f"split {split!r} has no populations")
    train_pairs = load_split(cfg, "train")
    mu = train_target_mean(train_pairs if train_pairs else pairs)
    if stub == "perfect":
        predictor = _Stub.perfect(pairs)
    else:
        if not checkpoint:
            raise InputError("eval needs --checkpoint (or --stub perfect)")
        model, _, _ = FlowModel.load(checkpoint)
        predictor = make_predictor(model, cfg)
    which = [m for m in ("W1", "W2", "MMD", "r2") if getattr(cfg.eval, m.lower())]
    report = evaluate(predictor, pairs, cfg.eval.eval_size, cfg.seed, mu, which, cfg.eval.threads)
    edir = Path(cfg.out) / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, "eval")
    report.write_csv(edir / f"{split}_metrics.csv")
    report.write_json(edir / f"{split}_aggregate.json", split)
    return report


def cmd_sample(
    cfg: ExperimentConfig, checkpoint: str | None, input_path: str, stub: str | None = None
) -> list[PopulationPair]:
    """Push every source population in ``input_path`` through the model.

    Writes ``sample/predicted.jsonl`` (pairs: input source -> prediction),
    ``sample/embeddings.json`` (MFM population embeddings) and, with
    ``integrator.record_trajectory``, ``sample/trajectory.csv``.
    """
    pairs = load_populations(input_path)
    if not pairs:
        raise InputError(f"{input_path} holds no populations")
    if stub == "zero":
        model = build_flow_model("FM", pairs[0].source.dim, pairs, hidden_width=8, n_hidden=1, embed_dim=2)
        model.vf.out.zero_()
    else:
        if not checkpoint:
            raise InputError("sample needs --checkpoint (or --stub zero)")
        model, _, _ = FlowModel.load(checkpoint)
    sdir = Path(cfg.out) / "sample"
    sdir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, "sample")
    predicted, embeddings, traj_rows = [], {}, []
    for pair in pairs:
        src = pair.source
        with torch.no_grad():
            cond = model.condition(src)
            if model.mode == "MFM":
                embeddings[str(src.population_id)] = cond[: model.embedder.cfg.out_dim].tolist()
            result = integrate(as_field(model.vf, cond), src.points, cfg.integrator)
        if cfg.integrator.record_trajectory:
            x1, traj = result
            for step in range(traj.shape[0]):
                for row in range(traj.shape[1]):
                    traj_rows.append([src.population_id, step, row] + [repr(v) for v in traj[step, row].tolist()])
        else:
            x1 = result
        pred = Population(x1, src.population_id, src.condition, src.split, src.label)
        predicted.append(PopulationPair(src, pred, "paired"))
    save_populations(predicted, sdir / "predicted.jsonl")
    (sdir / "embeddings.json").write_text(json.dumps(embeddings, indent=2) + "\n")
    if cfg.integrator.record_trajectory:
        d = pairs[0].source.dim
        with open(sdir / "trajectory.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["population_id", "step", "row"] + [f"x{i}" for i in range(d)])
            w.writerows(traj_rows)
    return predicted


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mfm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key (value parsed as JSON when possible)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--threads", type=int)
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("generate", help="build train/val/test population files"))
    p = sub.add_parser("train", help="train the configured model")
    common(p)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p = sub.add_parser("sample", help="push populations through a trained model")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input", required=True, help="population file whose sources are transported")
    p.add_argument("--stub", choices=["zero"], help=argparse.SUPPRESS)
    p = sub.add_parser("eval", help="score a trained model on one split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--eval-size", type=int)
    p.add_argument("--stub", choices=["perfect"], help=argparse.SUPPRESS)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(
            args.config,
            args.overrides,
            seed=args.seed,
            out=args.out,
            **{"eval.threads": args.threads, "eval.eval_size": getattr(args, "eval_size", None)},
        )
        if args.command == "generate":
            manifest = cmd_generate(cfg)
            print(json.dumps(manifest["counts"]))
        elif args.command == "train":
            state = cmd_train(cfg, args.checkpoint)
            if state.history:
                print(f"trained {state.step} steps; final loss {state.history[-1][1]:.6g}")
        elif args.command == "sample":
            cmd_sample(cfg, args.checkpoint, args.input, args.stub)
        elif args.command == "eval":
            report = cmd_eval(cfg, args.checkpoint, args.split, args.stub)
            print(json.dumps(report.table_block(args.split)["model"]))
    except (pydantic.ValidationError, ValidationError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, MFMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
