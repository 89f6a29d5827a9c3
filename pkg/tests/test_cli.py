import json

import pandas as pd
import pytest

import main
from commands import load_experiment_config
from errors import ConfigError
from schema import SynthSpec
from settings import get_settings


@pytest.fixture
def workspace(tmp_path):
    assert main.main(["--out", str(tmp_path), "synth", "--segments-per-class", "1"]) == 0
    return tmp_path


def write_config(path, **values):
    path.write_text("".join(f"{key.upper()}={value}\n" for key, value in values.items()))
    return str(path)


def test_synth_writes_features(workspace):
    frame = pd.read_csv(workspace / "features.csv")
    assert frame["segment_id"].nunique() == 45
    assert len(frame) == 45 * 8


def test_train_report_and_exports(workspace, capsys):
    config = write_config(workspace / "exp.env", method="supervised", backbone="dnn", label_fraction=0.5, seeds=0, epochs=1)
    features = str(workspace / "features.csv")
    assert main.main(["--out", str(workspace), "--config", config, "train", "--features", features]) == 0
    row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert row["n_runs"] == 1

    run = next((workspace / "runs").iterdir()).name
    common = ["--run", run, "--features", features]
    assert main.main(["--out", str(workspace), "confusion", *common]) == 0
    assert main.main(["--out", str(workspace), "boundary", *common, "--grid-res", "4", "--reference"]) == 0
    run_dir = workspace / "runs" / run
    assert (run_dir / "confusion-exp00-seed0.csv").exists()
    assert len(pd.read_csv(run_dir / "boundary-exp00-seed0.csv")) == 16 + 27
    assert (run_dir / "boundary-reference-exp00-seed0.csv").exists()

    assert main.main(["--out", str(workspace), "report"]) == 0
    assert len(pd.read_csv(workspace / "report.csv")) == 1


def test_raw_pipeline(tmp_path):
    out = str(tmp_path)
    assert main.main(["--out", out, "synth", "--mode", "raw", "--segments-per-class", "1", "--sessions", "1"]) == 0
    assert main.main(["--out", out, "preprocess", str(tmp_path / "raw")]) == 0
    assert len(list((tmp_path / "preprocessed").glob("*.csv"))) == 3
    assert main.main(["--out", out, "features", str(tmp_path / "preprocessed")]) == 0
    frame = pd.read_csv(tmp_path / "features.csv")
    assert frame["segment_id"].nunique() == 3
    assert sorted(frame["label"].unique()) == [0, 1, 2]


@pytest.mark.parametrize(
    "values",
    [
        {"method": "supervised", "backbone": "dnn", "foo": 1},
        {"method": "supervised", "backbone": "dnn", "label_fraction": 2},
        {"method": "pi_model", "backbone": "n/a"},
        {"method": "ladder", "backbone": "dnn"},
    ],
)
def test_invalid_config_exits_with_config_code(workspace, values):
    config = write_config(workspace / "bad.env", **values)
    argv = ["--out", str(workspace), "--config", config, "train", "--features", str(workspace / "features.csv")]
    assert main.main(argv) == 2
    assert not (workspace / "runs").exists()


def test_bad_input_data_exits_with_data_code(tmp_path):
    (tmp_path / "broken.csv").write_text("a,b\n1,2\n")
    for features in (tmp_path / "broken.csv", tmp_path / "missing.csv"):
        argv = ["--out", str(tmp_path), "train", "--method", "supervised", "--backbone", "dnn", "--features", str(features)]
        assert main.main(argv) == 3


@pytest.mark.parametrize("content", ['{"snr": -1}', "{not json", None])
def test_bad_synth_spec_exits_with_config_code(tmp_path, content):
    spec = tmp_path / "synth.json"
    if content is not None:
        spec.write_text(content)
    assert main.main(["--out", str(tmp_path), "synth", "--spec", str(spec)]) == 2
    assert not (tmp_path / "features.csv").exists()


@pytest.mark.parametrize("command", ["preprocess", "features"])
def test_missing_raw_input_exits_with_data_code(tmp_path, command):
    assert main.main(["--out", str(tmp_path), command, str(tmp_path / "absent.csv")]) == 3


def test_diverging_loss_exits_with_numeric_code(workspace):
    path = workspace / "features.csv"
    frame = pd.read_csv(path)
    columns = [c for c in frame.columns if c.startswith("f")]
    frame[columns] = frame[columns] * 1e200
    frame.to_csv(path, index=False, float_format="%.17g")
    config = write_config(workspace / "exp.env", method="att_rae", label_fraction=0.5, seeds=0, epochs=1, hidden_size=8)
    assert main.main(["--out", str(workspace), "--config", config, "train", "--features", str(path)]) == 4


def test_unknown_run_exits_with_data_code(workspace):
    assert main.main(["--out", str(workspace), "confusion", "--run", "deadbeef"]) == 3


def test_config_file_parsing(tmp_path):
    path = write_config(tmp_path / "exp.env", method="pi_model", backbone="cnn", seeds="3, 4,5", experiments="0,2")
    cfg = load_experiment_config(path, {"epochs": 7, "label_fraction": None})
    assert cfg.seeds == [3, 4, 5]
    assert cfg.experiments == [0, 2]
    assert cfg.epochs == 7 and cfg.label_fraction == 0.1


def test_autoencoder_config_drops_backbone(tmp_path):
    cfg = load_experiment_config(write_config(tmp_path / "exp.env", method="att_rae", backbone="cnn"))
    assert cfg.backbone == "n/a"


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment_config(str(tmp_path / "none.env"))


@pytest.fixture
def fresh_settings():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


def test_environment_sets_experiment_defaults(tmp_path, monkeypatch, fresh_settings):
    monkeypatch.setenv("EEGSSL_UNLABELED_BATCH_SIZE", "32")
    monkeypatch.setenv("EEGSSL_DEFAULT_SEEDS", "[7, 8]")
    monkeypatch.setenv("EEGSSL_HIDDEN_SIZE", "16")
    monkeypatch.setenv("EEGSSL_SOURCE_RATE_HZ", "500")
    cfg = load_experiment_config(write_config(tmp_path / "exp.env", method="att_rae"))
    assert cfg.unlabeled_batch_size == 32
    assert cfg.seeds == [7, 8]
    assert cfg.hidden_size == 16
    assert SynthSpec().sample_rate_hz == 500.0
    assert load_experiment_config(None, {"seeds": [1]}).seeds == [1]
