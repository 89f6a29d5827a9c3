import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import dotenv_values
from pydantic import ValidationError as PydanticValidationError

import harness
from data import Dataset, load_features, load_seed_mat, split_sessions, by_experiment, synth_generate, write_features
from errors import ConfigError, DataError
from schema import ExperimentConfig, SynthSpec
from settings import get_settings
from sigproc import extract_features, preprocess, read_raw_csv, segment, write_raw_csv

logger = logging.getLogger(__name__)

LIST_FIELDS = {"seeds", "experiments"}


# ------- configuration -------
def load_experiment_config(path: Optional[str], overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    """Flat KEY=value file (keys case-insensitive, lists comma-separated) plus CLI overrides."""
    values: Dict[str, object] = {}
    if path:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        for key, raw in dotenv_values(path).items():
            key = key.lower()
            if key not in ExperimentConfig.model_fields:
                raise ConfigError(f"{path}: unknown config key {key!r}")
            if raw is None or raw == "":
                continue
            values[key] = [item.strip() for item in raw.split(",") if item.strip()] if key in LIST_FIELDS else raw
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = ExperimentConfig.model_validate(values)
    except PydanticValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from None
    return cfg.normalized()


def load_synth_spec(path: str) -> SynthSpec:
    if not Path(path).exists():
        raise ConfigError(f"synthetic spec file {path} not found")
    try:
        return SynthSpec.model_validate_json(Path(path).read_text())
    except PydanticValidationError as exc:
        raise ConfigError(f"invalid synthetic spec {path}: {exc}") from None


def _config_from_args(args: argparse.Namespace, **extra) -> ExperimentConfig:
    overrides: Dict[str, object] = dict(extra)
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    return load_experiment_config(args.config, overrides)


def _features(cfg: ExperimentConfig, path: Optional[str]) -> Dataset:
    source = path or cfg.features_path
    if not source:
        raise ConfigError("no feature file given (use --features or FEATURES_PATH in the config)")
    return load_features(source)


def _out(args: argparse.Namespace) -> Path:
    return Path(args.out or get_settings().out_dir)


def _csv_inputs(paths: List[str]) -> List[Path]:
    files: List[Path] = []
    for item in paths:
        p = Path(item)
        if not p.exists():
            raise DataError(f"input {p} not found")
        files.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    if not files:
        raise DataError(f"no CSV recordings found in {paths}")
    return files


# ------- data -------
def synth(args: argparse.Namespace) -> int:
    if args.spec:
        spec = load_synth_spec(args.spec)
    else:
        spec = SynthSpec(
            mode=args.mode,
            snr=args.snr,
            segments_per_class=args.segments_per_class,
            sessions=args.sessions,
            experiments=args.experiments,
        )
    seed = args.seed if args.seed is not None else 0
    out = _out(args)
    result = synth_generate(spec, seed)
    if isinstance(result, Dataset):
        path = Path(args.output or out / "features.csv")
        write_features(result, path)
        logger.info("wrote %d synthetic segments to %s", len(result), path)
    else:
        target = Path(args.output or out / "raw")
        for rec in result:
            write_raw_csv(rec, target / f"{rec.name}.csv")
        logger.info("wrote %d synthetic recordings to %s", len(result), target)
    return 0


def preprocess_cmd(args: argparse.Namespace) -> int:
    settings = get_settings()
    target = Path(args.output or _out(args) / "preprocessed")
    files = _csv_inputs(args.inputs)
    for path in files:
        rec = preprocess(read_raw_csv(path), settings)
        write_raw_csv(rec, target / path.name)
    logger.info("preprocessed %d recordings into %s", len(files), target)
    return 0


def features_cmd(args: argparse.Namespace) -> int:
    settings = get_settings()
    sequences = []
    if args.mat:
        for experiment, path in enumerate(args.mat):
            sequences.extend(load_seed_mat(path, experiment_id=experiment).samples)
    for path in _csv_inputs(args.inputs) if args.inputs else []:
        rec = read_raw_csv(path)
        for seg in segment(rec, settings.segment_seconds):
            sequences.append(extract_features(seg, settings.band_edges, settings.window_seconds, settings.filter_order))
    ds = Dataset(tuple(sequences))
    path = Path(args.output or _out(args) / "features.csv")
    write_features(ds, path)
    logger.info("wrote %d segments to %s", len(ds), path)
    return 0


# ------- experiments -------
def train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(
        args, method=args.method, backbone=args.backbone, label_fraction=args.fraction, epochs=args.epochs
    )
    row = harness.run_experiment(cfg, _features(cfg, args.features), _out(args), force=args.force)
    print(row.model_dump_json())
    return 0


def sweep(args: argparse.Namespace) -> int:
    base = _config_from_args(args, epochs=args.epochs)
    out = _out(args)
    rows = harness.sweep(
        base,
        _features(base, args.features),
        out,
        methods=args.methods,
        fractions=args.fractions,
        backbones=args.backbones,
        force=args.force,
    )
    path = Path(args.output or out / "results.csv")
    harness.write_result_table(rows, path)
    logger.info("wrote %d result rows to %s", len(rows), path)
    return 0


def _run_dir(args: argparse.Namespace) -> Path:
    run_dir = _out(args) / "runs" / args.run
    if not run_dir.exists():
        raise DataError(f"run {args.run} not found under {_out(args) / 'runs'}")
    return run_dir


def _job_data(args: argparse.Namespace, run_dir: Path):
    cfg = harness.load_run_config(run_dir)
    groups = by_experiment(_features(cfg, args.features))
    if args.experiment not in groups:
        raise DataError(f"experiment {args.experiment} not present in the feature file")
    return cfg, split_sessions(groups[args.experiment], cfg.train_sessions)


def confusion(args: argparse.Namespace) -> int:
    run_dir = _run_dir(args)
    _, (_, test) = _job_data(args, run_dir)
    model = harness.load_run_model(run_dir, args.experiment, args.seed_id)
    path = Path(args.output or run_dir / f"confusion-exp{args.experiment:02d}-seed{args.seed_id}.csv")
    harness.write_confusion(harness.model_confusion(model, test), path)
    logger.info("wrote confusion matrix to %s", path)
    return 0


def boundary(args: argparse.Namespace) -> int:
    run_dir = _run_dir(args)
    _, (train_ds, _) = _job_data(args, run_dir)
    plan = harness.load_run_split(run_dir, args.experiment, args.seed_id)
    model = harness.load_run_model(run_dir, args.experiment, args.seed_id)
    grid_res = args.grid_res or get_settings().grid_res
    projection = harness.fit_projection(train_ds)
    stem = f"exp{args.experiment:02d}-seed{args.seed_id}"
    path = run_dir / f"boundary-{stem}.csv"
    harness.decision_boundary_export(model, train_ds, plan, grid_res, path, projection)
    if args.reference:
        reference = harness.fit_reference(train_ds, plan)
        harness.decision_boundary_export(reference, train_ds, plan, grid_res, run_dir / f"boundary-reference-{stem}.csv", projection)
    logger.info("wrote decision boundary grid to %s", path)
    return 0


def report(args: argparse.Namespace) -> int:
    out = _out(args)
    frame = harness.report(out)
    paths = harness.write_report(frame, out)
    logger.info("wrote %s", ", ".join(str(p) for p in paths))
    return 0
