"""Command-line entry point: prepare, train, evaluate, failures.

Every run is driven by a JSON config file validated up front (unknown
keys are rejected).  Exit codes: 0 success, 1 config error, 2 data
error, 3 protocol or training error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    DatasetSchema,
    load_csv,
    load_prepared,
    preprocess,
    save_prepared,
    split_indices,
    stratified_sample_indices,
)
from .errors import ConfigError, DataError, ProtocolError, TabVFLError
from .evaluation import (
    DESIGNS,
    ExperimentSpec,
    build_design_runtime,
    child_seed,
    emit_report,
    evaluate_latents,
    run_failure_experiment,
)
from .nn_core import load_checkpoint, save_checkpoint
from .tabnet import TabNetConfig

_TABNET_KEYS = {"latent_dim", "n_steps", "gamma_relax", "eps_mask",
                "lambda_sparse", "n_shared", "n_independent", "p_mask",
                "learning_rate"}
_TRAINING_KEYS = {"pretrain_epochs", "finetune_epochs", "batch_size",
                  "patience", "ratios"}
_DATASET_KEYS = {"csv", "schema", "name", "target_rows"}
_FAILURE_KEYS = {"grid", "runs"}
_TOP_KEYS = {"dataset", "design", "guests", "tabnet", "training", "failures",
             "transport", "seed", "output_dir"}


def _reject_unknown(obj: dict, allowed: set[str], where: str):
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {unknown}")


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"missing required config key {where}.{key}")
    return obj[key]


@dataclass
class RunConfig:
    """Fully validated, file-backed experiment description."""

    csv_path: Path
    schema_path: Path
    dataset_name: str
    target_rows: int | None
    design: str
    guests: int
    tabnet: TabNetConfig
    pretrain_epochs: int
    finetune_epochs: int
    batch_size: int
    patience: int | None
    ratios: tuple[float, float, float]
    failure_grid: tuple[float, ...]
    failure_runs: int
    transport: str
    seed: int
    output_dir: Path
    resolved: dict = field(repr=False, default_factory=dict)

    @property
    def prepared_data_path(self) -> Path:
        return self.output_dir / "prepared" / f"{self.dataset_name}.bin"

    @property
    def prepared_manifest_path(self) -> Path:
        return self.output_dir / "prepared" / f"{self.dataset_name}.json"

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_dir / "checkpoints"

    @property
    def report_dir(self) -> Path:
        return self.output_dir / "reports"


def load_config(path, seed_override: int | None = None,
                out_override: str | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "top level")

    dataset = _require(raw, "dataset", "config")
    _reject_unknown(dataset, _DATASET_KEYS, "dataset")
    tabnet_raw = dict(_require(raw, "tabnet", "config"))
    _reject_unknown(tabnet_raw, _TABNET_KEYS, "tabnet")
    if "latent_dim" not in tabnet_raw:
        raise ConfigError("missing required config key tabnet.latent_dim")
    training = dict(_require(raw, "training", "config"))
    _reject_unknown(training, _TRAINING_KEYS, "training")
    failures = dict(raw.get("failures", {}))
    _reject_unknown(failures, _FAILURE_KEYS, "failures")

    design = raw.get("design", "TabVFL")
    if design not in DESIGNS:
        raise ConfigError(f"unknown design {design!r}; expected one of {DESIGNS}")
    transport = raw.get("transport", "in_process")
    if transport not in ("in_process", "socket"):
        raise ConfigError(f"unknown transport {transport!r}")
    grid = tuple(float(p) for p in failures.get("grid", (0.2, 0.35, 0.5)))
    if any(not 0.0 <= p <= 1.0 for p in grid):
        raise ConfigError("failure grid probabilities must lie in [0, 1]")
    runs = int(failures.get("runs", 8))
    if runs < 1:
        raise ConfigError("failures.runs must be >= 1")
    ratios = tuple(float(r) for r in training.get("ratios", (0.7, 0.15, 0.15)))
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("training.ratios must be three values summing to 1")
    patience = training.get("patience")
    if patience is not None:
        patience = int(patience)
        if patience < 1:
            raise ConfigError("training.patience must be >= 1 when set")
    guests = int(raw.get("guests", 2))
    if guests < 1:
        raise ConfigError("guests must be >= 1")
    batch_size = int(training.get("batch_size", 64))
    if batch_size < 2:
        raise ConfigError("training.batch_size must be >= 2")
    target_rows = dataset.get("target_rows")
    if target_rows is not None:
        target_rows = int(target_rows)
        if target_rows < 10:
            raise ConfigError("dataset.target_rows must be >= 10")

    tabnet = TabNetConfig(**tabnet_raw)
    tabnet.validate(n_guests=guests)
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    output_dir = Path(out_override if out_override is not None
                      else raw.get("output_dir", "out"))

    config = RunConfig(
        csv_path=Path(_require(dataset, "csv", "dataset")),
        schema_path=Path(_require(dataset, "schema", "dataset")),
        dataset_name=str(dataset.get("name", Path(dataset["csv"]).stem)),
        target_rows=target_rows,
        design=design,
        guests=guests,
        tabnet=tabnet,
        pretrain_epochs=int(_require(training, "pretrain_epochs", "training")),
        finetune_epochs=int(_require(training, "finetune_epochs", "training")),
        batch_size=batch_size,
        patience=patience,
        ratios=ratios,
        failure_grid=grid,
        failure_runs=runs,
        transport=transport,
        seed=seed,
        output_dir=output_dir,
    )
    config.resolved = {
        "dataset": {"csv": str(config.csv_path), "schema": str(config.schema_path),
                    "name": config.dataset_name, "target_rows": config.target_rows},
        "design": config.design,
        "guests": config.guests,
        "tabnet": {k: getattr(tabnet, k) for k in sorted(_TABNET_KEYS)},
        "training": {"pretrain_epochs": config.pretrain_epochs,
                     "finetune_epochs": config.finetune_epochs,
                     "batch_size": config.batch_size,
                     "patience": config.patience,
                     "ratios": list(config.ratios)},
        "failures": {"grid": list(config.failure_grid),
                     "runs": config.failure_runs},
        "transport": config.transport,
        "seed": config.seed,
        "output_dir": str(config.output_dir),
    }
    return config


def _experiment_spec(config: RunConfig) -> ExperimentSpec:
    prepared = load_prepared(config.prepared_data_path,
                             config.prepared_manifest_path)
    return ExperimentSpec(
        dataset=prepared,
        dataset_name=config.dataset_name,
        tabnet=config.tabnet,
        n_guests=config.guests,
        pretrain_epochs=config.pretrain_epochs,
        finetune_epochs=config.finetune_epochs,
        batch_size=config.batch_size,
        seeds=[config.seed],
        patience=config.patience,
        ratios=config.ratios,
        failure_runs=config.failure_runs,
        p_fail_grid=config.failure_grid,
        transport=config.transport,
    )


def _write_resolved(config: RunConfig):
    config.output_dir.mkdir(parents=True, exist_ok=True)
    with open(config.output_dir / "resolved_config.json", "w",
              encoding="utf-8") as fh:
        json.dump(config.resolved, fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_prepare(config: RunConfig) -> int:
    """CSV + schema -> prepared cache fitted on the training portion."""
    schema = DatasetSchema.load_json(config.schema_path)
    raw = load_csv(config.csv_path, schema)
    if config.target_rows is not None and config.target_rows < raw.n_rows:
        labels = raw.text[schema.label_column]
        keep = stratified_sample_indices(
            np.array(labels), config.target_rows,
            np.random.default_rng(child_seed(config.seed, "downsample")))
        raw = raw.select(keep)
    # fit transforms on the rows that training will treat as the train split
    train_rows = split_indices(
        raw.n_rows, config.ratios,
        np.random.default_rng(child_seed(config.seed, "split")))[0]
    prepared = preprocess(raw, schema, fit_indices=train_rows)
    config.prepared_data_path.parent.mkdir(parents=True, exist_ok=True)
    save_prepared(prepared, config.prepared_data_path,
                  config.prepared_manifest_path)
    _write_resolved(config)
    print(f"prepared {prepared.n_rows} rows x {prepared.width} encoded columns "
          f"({prepared.n_classes} classes) -> {config.prepared_data_path}")
    return 0


def _train_runtime(config: RunConfig):
    spec = _experiment_spec(config)
    runtime = build_design_runtime(spec, config.design, config.seed)
    runtime.fit()
    return spec, runtime


def cmd_train(config: RunConfig) -> int:
    """Pretraining then finetuning; checkpoints and a JSONL training log."""
    spec, runtime = _train_runtime(config)
    config.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    for pid, entries in runtime.party_states().items():
        save_checkpoint(config.checkpoint_dir / f"{config.design}_{pid}.ckpt",
                        entries)
    log_path = config.output_dir / f"{config.design}_train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"event": "config", **config.resolved},
                            sort_keys=True) + "\n")
        for entry in runtime.log:
            fh.write(json.dumps({
                "event": "epoch", "phase": entry.phase, "epoch": entry.epoch,
                "train_loss": entry.train_loss, "val_loss": entry.val_loss,
                "offline": list(entry.offline),
                "accuracy": entry.accuracy}, sort_keys=True) + "\n")
    _write_resolved(config)
    runtime.shutdown()
    last = runtime.log[-1]
    print(f"trained {config.design} ({len(runtime.log)} epochs logged); "
          f"final {last.phase} loss {last.train_loss:.6f}; checkpoints in "
          f"{config.checkpoint_dir}")
    return 0


def cmd_evaluate(config: RunConfig) -> int:
    """Rebuild the design, load checkpoints, evaluate latent quality."""
    spec = _experiment_spec(config)
    runtime = build_design_runtime(spec, config.design, config.seed)
    states = {}
    for pid in runtime.party_modules():
        path = config.checkpoint_dir / f"{config.design}_{pid}.ckpt"
        if not path.exists():
            raise DataError(f"missing checkpoint {path}")
        states[pid] = load_checkpoint(path)
    runtime.restore(states)
    rows = evaluate_latents(runtime, spec, config.design, config.seed,
                            runtime_s=0.0)
    config.report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = config.report_dir / f"{config.design}_metrics.csv"
    json_path = config.report_dir / f"{config.design}_metrics.json"
    emit_report(rows, csv_path=csv_path, json_path=json_path)
    runtime.shutdown()
    print(f"evaluated {config.design}: wrote {csv_path} and {json_path}")
    return 0


def cmd_failures(config: RunConfig) -> int:
    """Failure grid: baseline plus (strategy, p) cells, separate reports."""
    spec = _experiment_spec(config)
    cells, summary = run_failure_experiment(spec)
    config.report_dir.mkdir(parents=True, exist_ok=True)
    for cell in cells:
        tag = ("baseline" if cell.strategy == "baseline"
               else f"{cell.strategy}_p{cell.p_fail:g}")
        emit_report(cell.rows,
                    csv_path=config.report_dir / f"failures_{tag}.csv",
                    json_path=config.report_dir / f"failures_{tag}.json")
    with open(config.report_dir / "failures_summary.json", "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"failure grid complete: {len(cells)} cells -> {config.report_dir}")
    for key in sorted(summary):
        print(f"  {key}: mean f1 {summary[key]['mean_f1']:.4f} "
              f"(std {summary[key]['std_f1']:.4f})")
    return 0


_COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "failures": cmd_failures,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabvfl",
        description="Split-TabNet vertical federated learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="override the config output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed_override=args.seed,
                             out_override=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ProtocolError, TabVFLError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # anything raised mid-training maps to 3
        print(f"training error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
