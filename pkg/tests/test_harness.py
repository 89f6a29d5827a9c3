import json
import logging

import numpy as np
import pandas as pd
import pytest

import harness
from crud import crud_run_records
from data import Dataset, make_split, split_sessions
from database import session_scope
from errors import ConfigError, ParameterError
from layers import Module
from autodiff import Tensor
from models import DnnBackbone
from schema import ExperimentConfig
from sigproc import FeatureSequence
from ssltrain import evaluate
from tests.conftest import make_sequences


@pytest.fixture
def cfg():
    return ExperimentConfig(method="supervised", backbone="dnn", label_fraction=0.5, seeds=[0, 1], epochs=2)


def registry_rows(out_dir):
    with session_scope(harness.registry_engine(out_dir)) as db:
        return crud_run_records.get_multi(db)


# ------- experiments -------
def test_run_experiment_writes_run_directory(tmp_path, cfg, session_dataset):
    row = harness.run_experiment(cfg, session_dataset, tmp_path)
    run_dir = harness.run_dir_for(cfg, tmp_path)
    assert row.n_runs == 4
    assert 0.0 <= row.mean_accuracy <= 1.0 and row.std_accuracy >= 0.0
    assert json.loads((run_dir / "config.json").read_text())["method"] == "supervised"
    job = harness.job_dir_for(run_dir, 1, 0)
    assert {p.name for p in job.iterdir()} == {"split.json", "model.npz", "train_report.csv"}
    assert len(pd.read_csv(job / "train_report.csv")) == 2
    assert len(registry_rows(tmp_path)) == 4


def test_completed_run_is_skipped(tmp_path, cfg, session_dataset, caplog):
    first = harness.run_experiment(cfg, session_dataset, tmp_path)
    with caplog.at_level(logging.INFO, logger="harness"):
        again = harness.run_experiment(cfg, session_dataset, tmp_path)
    assert "already complete" in caplog.text
    assert again == first


def test_run_without_registry_rows_is_repeated(tmp_path, cfg, session_dataset, caplog):
    first = harness.run_experiment(cfg, session_dataset, tmp_path)
    with session_scope(harness.registry_engine(tmp_path)) as db:
        crud_run_records.delete_by_config(db, cfg.config_hash())
    with caplog.at_level(logging.WARNING, logger="harness"):
        again = harness.run_experiment(cfg, session_dataset, tmp_path)
    assert "no registry rows" in caplog.text
    assert again == first
    assert len(registry_rows(tmp_path)) == 4


def test_forced_rerun_is_deterministic(tmp_path, cfg, session_dataset):
    first = harness.run_experiment(cfg, session_dataset, tmp_path)
    forced = harness.run_experiment(cfg, session_dataset, tmp_path, force=True)
    assert forced == first
    assert len(registry_rows(tmp_path)) == 4


def test_stored_checkpoint_reproduces_accuracy(tmp_path, cfg, session_dataset):
    harness.run_experiment(cfg, session_dataset, tmp_path)
    run_dir = harness.run_dir_for(cfg, tmp_path)
    model = harness.load_run_model(run_dir, 0, 1)
    _, test = split_sessions(harness.by_experiment(session_dataset)[0])
    stored = [r for r in registry_rows(tmp_path) if r.experiment == 0 and r.seed == 1][0]
    assert evaluate(model, test) == stored.accuracy
    plan = harness.load_run_split(run_dir, 0, 1)
    assert len(plan.labeled_ids) == 27


def test_unknown_experiment_is_a_config_error(tmp_path, cfg, session_dataset):
    with pytest.raises(ConfigError):
        harness.run_experiment(cfg.model_copy(update={"experiments": [7]}), session_dataset, tmp_path)


def test_reference_accuracy_only_at_full_labels():
    assert harness.reference_accuracy("att_rae", "n/a", 1.0) == 0.9117
    assert harness.reference_accuracy("att_rae", "n/a", 0.1) is None
    assert harness.reference_accuracy("supervised", "dnn", 1.0) is None


# ------- sweeps -------
def test_sweep_configs_expand_methods(cfg):
    configs = harness.sweep_configs(cfg, ["att_rae", "pi_model"], [0.03, 0.1], backbones=["dnn", "cnn"])
    assert [(c.method, c.backbone, c.label_fraction) for c in configs] == [
        ("att_rae", "n/a", 0.03),
        ("att_rae", "n/a", 0.1),
        ("pi_model", "dnn", 0.03),
        ("pi_model", "dnn", 0.1),
        ("pi_model", "cnn", 0.03),
        ("pi_model", "cnn", 0.1),
    ]


def test_sweep_rejects_bad_combination_before_training(tmp_path, cfg, session_dataset):
    with pytest.raises(ConfigError):
        harness.sweep(cfg, session_dataset, tmp_path, ["supervised", "pi_model"], [0.5], backbones=["n/a"])
    assert not (tmp_path / "runs").exists()


def test_sweep_table_is_reproducible(tmp_path, session_dataset):
    base = ExperimentConfig(seeds=[0], epochs=1, experiments=[0])
    tables = []
    for name in ("a", "b"):
        rows = harness.sweep(base, session_dataset, tmp_path / name, ["sae", "supervised"], [0.5, 1.0])
        assert len(rows) == 4
        harness.write_result_table(rows, tmp_path / name / "results.csv")
        tables.append((tmp_path / name / "results.csv").read_bytes())
    assert tables[0] == tables[1]
    frame = pd.read_csv(tmp_path / "a" / "results.csv")
    assert list(frame.columns) == harness.RESULT_COLUMNS


def test_report_aggregates_registry(tmp_path, cfg, session_dataset):
    row = harness.run_experiment(cfg, session_dataset, tmp_path)
    frame = harness.report(tmp_path)
    assert len(frame) == 1
    assert frame.loc[0, "n_runs"] == 4
    assert frame.loc[0, "mean_accuracy"] == pytest.approx(row.mean_accuracy)
    paths = harness.write_report(frame, tmp_path)
    assert all(p.exists() for p in paths)


def test_empty_report(tmp_path):
    assert harness.report(tmp_path).empty


# ------- confusion -------
class ConstantModel(Module):
    def __init__(self, label=2):
        self.label = label

    def forward(self, x):
        logits = np.zeros((x.shape[0], 3))
        logits[:, self.label] = 1.0
        return Tensor(logits)


def test_confusion_export(tmp_path, small_dataset):
    matrix = harness.model_confusion(ConstantModel(), small_dataset)
    np.testing.assert_array_equal(matrix[:, 2], 1.0)
    frame = harness.write_confusion(matrix, tmp_path / "confusion.csv")
    assert list(frame.columns) == ["true_label", "negative", "neutral", "positive"]
    assert (tmp_path / "confusion.csv").exists()


def test_confusion_ignores_unlabeled_test_samples(caplog):
    negatives = make_sequences(4)[:4]
    unlabeled = [FeatureSequence(s.steps, None, f"u-{i}", 10, 0) for i, s in enumerate(make_sequences(2, prefix="u"))]
    with caplog.at_level(logging.WARNING, logger="metrics"):
        matrix = harness.model_confusion(ConstantModel(label=0), Dataset(tuple(negatives + unlabeled)))
    np.testing.assert_array_equal(matrix[0], [1.0, 0.0, 0.0])
    assert np.all(np.isnan(matrix[1:]))
    assert "[1, 2]" in caplog.text


# ------- decision boundaries -------
def test_linear_reference_separates_noise_free_data(separable_synth):
    train, test = split_sessions(separable_synth)
    reference = harness.LinearReference().fit(train.x, train.labels)
    assert np.array_equal(reference.predict(test.x), test.labels)


def test_reference_fits_labeled_share_only(small_dataset):
    plan = make_split(small_dataset, 0.1, seed=0)
    reference = harness.fit_reference(small_dataset, plan)
    assert reference.pipeline[0].n_samples_seen_ == len(plan.labeled_ids) == 3
    assert list(reference.classes_) == [0, 1, 2]


def test_reference_ignores_unlabeled_samples():
    labeled = make_sequences(5)
    unlabeled = [FeatureSequence(s.steps, None, f"u-{i}", 1, 0) for i, s in enumerate(make_sequences(5, prefix="u"))]
    train = Dataset(tuple(labeled + unlabeled))
    reference = harness.fit_reference(train, make_split(train, 1.0, seed=0))
    assert list(reference.classes_) == [0, 1, 2]


def test_boundary_grid(tmp_path, separable_synth):
    train, _ = split_sessions(separable_synth)
    plan = make_split(train, 0.5, seed=0)
    reference = harness.LinearReference().fit(train.x, train.labels)
    frame = harness.decision_boundary_export(reference, train, plan, grid_res=20, path=tmp_path / "b.csv")
    assert len(frame) == 20 * 20 + len(train)
    grid = frame[frame["role"] == "grid"]
    assert set(grid["predicted_class"]) == {0, 1, 2}
    labeled = frame[frame["role"] == "labeled"]
    assert len(labeled) == len(plan.labeled_ids) and labeled["label"].notna().all()
    assert frame[frame["role"] == "unlabeled"]["label"].isna().all()
    assert len(pd.read_csv(tmp_path / "b.csv")) == len(frame)


def test_boundary_accepts_trained_models(rng, small_dataset):
    plan = make_split(small_dataset, 1.0, seed=0)
    frame = harness.decision_boundary_export(DnnBackbone(rng), small_dataset, plan, grid_res=3)
    assert len(frame) == 9 + len(small_dataset)
    assert set(frame["predicted_class"]) <= {0, 1, 2}


def test_boundary_needs_a_grid(small_dataset, rng):
    with pytest.raises(ParameterError):
        harness.decision_boundary_export(DnnBackbone(rng), small_dataset, make_split(small_dataset, 1.0, 0), grid_res=1)


def test_projection_round_trip(small_dataset, separable_synth):
    pca = harness.fit_projection(small_dataset)
    flat = small_dataset.x.reshape(len(small_dataset), -1)
    projected = pca.transform(flat)
    residual = np.sum((flat - pca.inverse_transform(projected)) ** 2)
    total = np.sum((flat - pca.mean_) ** 2)
    assert residual == pytest.approx(total - np.sum(projected**2), rel=1e-8)

    exact = harness.fit_projection(separable_synth)
    flat = separable_synth.x.reshape(len(separable_synth), -1)
    np.testing.assert_allclose(exact.inverse_transform(exact.transform(flat)), flat, atol=1e-8)
