"""Experiment orchestration: content-addressed runs, sweeps, figure-data exports, reports.

Layout of an output directory::

    <out>/registry.db                      run registry (one row per experiment x seed)
    <out>/runs/<config hash>/config.json
    <out>/runs/<config hash>/result.json   present only for completed runs
    <out>/runs/<config hash>/exp<E>-seed<S>/{split.json, model.npz, train_report.csv}
"""

import logging
import shutil
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC
from sqlalchemy.engine import Engine

from crud import crud_run_records
from data import Dataset, SplitPlan, by_experiment, load_split_manifest, make_split, save_split_manifest, split_sessions
from database import init_db, make_engine, session_scope
from errors import ConfigError, DataError, ParameterError, SplitError
from layers import Module
from metrics import confusion_matrix
from models import build_model, load_checkpoint, save_checkpoint
from schema import AUTOENCODER_METHODS, REFERENCE_ACCURACY, ExperimentConfig, ResultRow, RunRecordCreate, RunRecordRead
from settings import get_settings
from sigproc import CLASS_NAMES
from ssltrain import evaluate, predict, train_method

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["method", "backbone", "label_fraction", "mean_accuracy", "std_accuracy", "n_runs", "reference_accuracy"]
BOUNDARY_COLUMNS = ["px", "py", "predicted_class", "role", "label"]

Predictor = Callable[[np.ndarray], np.ndarray]


# ------- registry -------
def registry_engine(out_dir: Union[str, Path]) -> Engine:
    engine = make_engine(get_settings().resolved_registry_url(str(out_dir)))
    init_db(engine)
    return engine


def run_dir_for(cfg: ExperimentConfig, out_dir: Union[str, Path]) -> Path:
    return Path(out_dir) / "runs" / cfg.normalized().config_hash()


def job_dir_for(run_dir: Path, experiment: int, seed: int) -> Path:
    return run_dir / f"exp{experiment:02d}-seed{seed}"


def reference_accuracy(method: str, backbone: str, label_fraction: float) -> Optional[float]:
    if label_fraction != 1.0:
        return None
    return REFERENCE_ACCURACY.get((method, backbone))


# ------- experiments -------
def _experiment_splits(cfg: ExperimentConfig, ds: Dataset) -> Dict[int, Dataset]:
    groups = by_experiment(ds)
    if cfg.experiments is not None:
        unknown = sorted(set(cfg.experiments) - set(groups))
        if unknown:
            raise ConfigError(f"experiments {unknown} not present in the data (have {sorted(groups)})")
        groups = {exp: groups[exp] for exp in cfg.experiments}
    if not groups:
        raise DataError("no samples to train on")
    return groups


def run_experiment(
    cfg: ExperimentConfig,
    ds: Dataset,
    out_dir: Union[str, Path],
    force: bool = False,
    engine: Optional[Engine] = None,
) -> ResultRow:
    """Train every (experiment, seed) of ``cfg`` and aggregate held-out accuracy.

    A run directory that already holds ``result.json`` is reused unless ``force``.
    """
    cfg = cfg.normalized()
    digest = cfg.config_hash()
    run_dir = Path(out_dir) / "runs" / digest
    result_path = run_dir / "result.json"
    engine = engine or registry_engine(out_dir)

    if result_path.exists() and not force:
        with session_scope(engine) as db:
            recorded = crud_run_records.get_by_config(db, digest)
        if recorded:
            logger.info("run %s (%s/%s @ %g) already complete, skipping", digest, cfg.method, cfg.backbone, cfg.label_fraction)
            return ResultRow.model_validate_json(result_path.read_text())
        logger.warning("run %s has a result but no registry rows, re-running", digest)
    if run_dir.exists():
        shutil.rmtree(run_dir)
    with session_scope(engine) as db:
        crud_run_records.delete_by_config(db, digest)

    groups = _experiment_splits(cfg, ds)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.model_dump_json(indent=2))

    accuracies: List[float] = []
    for experiment, exp_ds in groups.items():
        train, test = split_sessions(exp_ds, cfg.train_sessions)
        if not len(train) or not len(test):
            raise SplitError(
                f"experiment {experiment}: session split gives {len(train)} train / {len(test)} test segments"
            )
        for seed in cfg.seeds:
            job_dir = job_dir_for(run_dir, experiment, seed)
            plan = make_split(train, cfg.label_fraction, seed, cfg.unlabeled_batch_size)
            save_split_manifest(plan, job_dir / "split.json")
            model, report = train_method(cfg, train, plan, seed, test)
            acc = evaluate(model, test)
            save_checkpoint(model, job_dir / "model.npz")
            report.write_csv(job_dir / "train_report.csv")
            accuracies.append(acc)
            logger.info("%s/%s experiment %d seed %d: accuracy %.4f", cfg.method, cfg.backbone, experiment, seed, acc)
            with session_scope(engine) as db:
                crud_run_records.create(
                    db,
                    RunRecordCreate(
                        config_hash=digest,
                        method=cfg.method,
                        backbone=cfg.backbone,
                        label_fraction=cfg.label_fraction,
                        experiment=experiment,
                        seed=seed,
                        accuracy=acc,
                        run_dir=str(job_dir),
                    ),
                )

    row = ResultRow(
        method=cfg.method,
        backbone=cfg.backbone,
        label_fraction=cfg.label_fraction,
        mean_accuracy=float(np.mean(accuracies)),
        std_accuracy=float(np.std(accuracies)),
        n_runs=len(accuracies),
        reference_accuracy=reference_accuracy(cfg.method, cfg.backbone, cfg.label_fraction),
    )
    result_path.write_text(row.model_dump_json(indent=2))
    return row


def sweep_configs(
    base: ExperimentConfig,
    methods: Sequence[str],
    fractions: Sequence[float],
    backbones: Sequence[str] = ("dnn",),
) -> List[ExperimentConfig]:
    """One config per (method, backbone, fraction); autoencoder methods take no backbone."""
    configs = []
    for method in methods:
        method_backbones = ["n/a"] if method in AUTOENCODER_METHODS else list(backbones)
        for backbone in method_backbones:
            for fraction in fractions:
                cfg = base.model_copy(update={"method": method, "backbone": backbone, "label_fraction": fraction})
                configs.append(cfg.normalized())
    return configs


def sweep(
    base: ExperimentConfig,
    ds: Dataset,
    out_dir: Union[str, Path],
    methods: Sequence[str],
    fractions: Sequence[float],
    backbones: Sequence[str] = ("dnn",),
    force: bool = False,
) -> List[ResultRow]:
    # every config is checked before any training starts
    configs = sweep_configs(base, methods, fractions, backbones)
    engine = registry_engine(out_dir)
    return [run_experiment(cfg, ds, out_dir, force=force, engine=engine) for cfg in configs]


def result_frame(rows: Iterable[ResultRow]) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in rows], columns=RESULT_COLUMNS)


def write_result_table(rows: Iterable[ResultRow], path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = result_frame(rows)
    frame.to_csv(path, index=False, float_format="%.10f")
    return frame


# ------- stored runs -------
def load_run_config(run_dir: Union[str, Path]) -> ExperimentConfig:
    path = Path(run_dir) / "config.json"
    if not path.exists():
        raise DataError(f"{run_dir} is not a run directory (no config.json)")
    return ExperimentConfig.model_validate_json(path.read_text())


def load_run_model(run_dir: Union[str, Path], experiment: int, seed: int) -> Module:
    """Rebuild the trained model of one job from its checkpoint."""
    cfg = load_run_config(run_dir)
    model = build_model(cfg.method, cfg.backbone, np.random.default_rng(seed), hidden_size=cfg.hidden_size)
    load_checkpoint(model, job_dir_for(Path(run_dir), experiment, seed) / "model.npz")
    return model.eval()


def load_run_split(run_dir: Union[str, Path], experiment: int, seed: int) -> SplitPlan:
    return load_split_manifest(job_dir_for(Path(run_dir), experiment, seed) / "split.json")


# ------- confusion matrices -------
def model_confusion(model: Module, test: Dataset) -> np.ndarray:
    """Row-normalized 3x3 matrix of an eval-mode model on the labeled part of ``test``."""
    labeled = test.where(lambda seq: seq.label is not None)
    return confusion_matrix(predict(model, labeled.x), labeled.labels)


def write_confusion(matrix: np.ndarray, path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(matrix, columns=list(CLASS_NAMES))
    frame.insert(0, "true_label", list(CLASS_NAMES))
    frame.to_csv(path, index=False, float_format="%.10f")
    return frame


# ------- decision boundaries -------
class LinearReference:
    """One-vs-rest linear max-margin classifier on flattened feature sequences."""

    def __init__(self, C: float = 1.0, max_iter: int = 10000):
        self.pipeline = make_pipeline(StandardScaler(), LinearSVC(C=C, max_iter=max_iter, random_state=0))

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LinearReference":
        self.pipeline.fit(x.reshape(x.shape[0], -1), y)
        return self

    @property
    def classes_(self) -> np.ndarray:
        return self.pipeline.classes_

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.pipeline.predict(x.reshape(x.shape[0], -1)).astype(np.int64)


def fit_reference(train: Dataset, plan: SplitPlan) -> LinearReference:
    """Reference fitted on the labeled share of the split only."""
    labeled = train.subset(plan.labeled_ids)
    return LinearReference().fit(labeled.x, labeled.labels)


def as_predictor(classifier: Union[Module, LinearReference]) -> Predictor:
    if isinstance(classifier, LinearReference):
        return classifier.predict
    return lambda x: predict(classifier, x)


def fit_projection(train: Dataset) -> PCA:
    flat = train.x.reshape(len(train), -1)
    return PCA(n_components=2, svd_solver="full").fit(flat)


def decision_boundary_export(
    classifier: Union[Module, LinearReference],
    train: Dataset,
    plan: SplitPlan,
    grid_res: int = 200,
    path: Optional[Union[str, Path]] = None,
    projection: Optional[PCA] = None,
) -> pd.DataFrame:
    """Classify a lattice over the 2-D PCA plane of the training features.

    Lattice points are inverse-projected to full feature width before
    classification. Rows: ``grid_res**2`` lattice points (role ``grid``)
    followed by every training sample (role ``labeled``/``unlabeled``).
    """
    if grid_res < 2:
        raise ParameterError(f"grid_res must be at least 2, got {grid_res}")
    if len(train) < 2:
        raise DataError("decision boundary export needs at least 2 training samples")
    predictor = as_predictor(classifier)
    pca = projection or fit_projection(train)
    n = len(train)
    flat = train.x.reshape(n, -1)
    points = pca.transform(flat)

    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    axes = [np.linspace(lo[d] - 0.1 * span[d], hi[d] + 0.1 * span[d], grid_res) for d in range(2)]
    gx, gy = np.meshgrid(axes[0], axes[1])
    lattice = np.column_stack([gx.ravel(), gy.ravel()])
    grid_x = pca.inverse_transform(lattice).reshape(-1, *train.x.shape[1:])

    labeled = set(plan.labeled_ids)
    roles = ["labeled" if sid in labeled else "unlabeled" for sid in train.ids]
    point_labels = [int(lbl) if role == "labeled" and lbl >= 0 else None for role, lbl in zip(roles, train.labels)]

    grid = pd.DataFrame(
        {"px": lattice[:, 0], "py": lattice[:, 1], "predicted_class": predictor(grid_x), "role": "grid", "label": None}
    )
    samples = pd.DataFrame(
        {"px": points[:, 0], "py": points[:, 1], "predicted_class": predictor(train.x), "role": roles, "label": point_labels}
    )
    frame = pd.concat([grid, samples], ignore_index=True)[BOUNDARY_COLUMNS]
    frame["label"] = frame["label"].astype("Int64")
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.10f")
    return frame


# ------- reports -------
def report(out_dir: Union[str, Path], engine: Optional[Engine] = None) -> pd.DataFrame:
    """Aggregate every completed registry run into one ResultTable."""
    engine = engine or registry_engine(out_dir)
    with session_scope(engine) as db:
        records = crud_run_records.get_multi(db)
    runs = [RunRecordRead.model_validate(r) for r in records]
    rows = [r.model_dump() for r in runs if r.status == "complete" and r.accuracy is not None]
    if not rows:
        return result_frame([])
    grouped = pd.DataFrame(rows).groupby(["method", "backbone", "label_fraction"], sort=True)["accuracy"]
    results = [
        ResultRow(
            method=method,
            backbone=backbone,
            label_fraction=float(fraction),
            mean_accuracy=float(np.mean(values)),
            std_accuracy=float(np.std(values)),
            n_runs=int(values.size),
            reference_accuracy=reference_accuracy(method, backbone, float(fraction)),
        )
        for (method, backbone, fraction), values in grouped
    ]
    return result_frame(results)


def write_report(frame: pd.DataFrame, out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "report.csv", out_dir / "report.json"
    frame.to_csv(csv_path, index=False, float_format="%.10f")
    frame.to_json(json_path, orient="records", indent=2)
    return [csv_path, json_path]
