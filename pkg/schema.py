import hashlib
import json
from datetime import datetime, timezone
from typing import Dict, List, Optional

from sqlmodel import Field, SQLModel

from errors import ConfigError
from settings import get_settings

AUTOENCODER_METHODS = ("att_rae", "rae", "sae", "pretrain_sae")
BENCHMARK_METHODS = ("pseudo_label", "pi_model", "temporal_ensembling", "mean_teacher", "supervised")
METHODS = AUTOENCODER_METHODS + BENCHMARK_METHODS
BACKBONES = ("dnn", "cnn", "n/a")

# published mean accuracies with 100% labels, for orientation in reports
REFERENCE_ACCURACY: Dict[tuple, float] = {
    ("att_rae", "n/a"): 0.9117,
    ("rae", "n/a"): 0.8947,
    ("sae", "n/a"): 0.9037,
    ("pretrain_sae", "n/a"): 0.7283,
    ("pi_model", "dnn"): 0.8962,
    ("pi_model", "cnn"): 0.8907,
    ("temporal_ensembling", "dnn"): 0.9029,
    ("temporal_ensembling", "cnn"): 0.8855,
    ("mean_teacher", "dnn"): 0.9076,
    ("mean_teacher", "cnn"): 0.8756,
}


# ------- experiment -------
class ExperimentConfig(SQLModel):
    method: str = "att_rae"
    backbone: str = "n/a"
    label_fraction: float = Field(default=0.10, gt=0.0, le=1.0)
    seeds: List[int] = Field(default_factory=lambda: list(get_settings().default_seeds))
    epochs: int = Field(default=30, ge=1)
    lr: float = Field(default=0.001, gt=0.0)
    hidden_size: int = Field(default_factory=lambda: get_settings().hidden_size, ge=1)
    unlabeled_batch_size: int = Field(default_factory=lambda: get_settings().unlabeled_batch_size, ge=1)
    features_path: Optional[str] = None
    train_sessions: int = Field(default=9, ge=1)
    experiments: Optional[List[int]] = None
    noise_std: float = Field(default=0.15, ge=0.0)
    ensemble_momentum: float = Field(default=0.6, ge=0.0, lt=1.0)
    ema_decay: float = Field(default=0.95, ge=0.0, le=1.0)
    ramp_scale: float = 20.0
    ramp_sharpness: float = 5.0

    def normalized(self) -> "ExperimentConfig":
        """Checked copy; autoencoder methods carry backbone ``n/a``."""
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {', '.join(BACKBONES)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.method in AUTOENCODER_METHODS:
            return self.model_copy(update={"backbone": "n/a"})
        if self.backbone == "n/a":
            raise ConfigError(f"method {self.method!r} needs a dnn or cnn backbone")
        return self.model_copy()

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# ------- training log -------
class TrainReportRow(SQLModel):
    epoch: int
    phase: str = "train"
    eta: float = 0.0
    loss_u: float = 0.0
    loss_s: float = 0.0
    loss_total: float = 0.0
    train_acc: Optional[float] = None
    test_acc: Optional[float] = None
    wall_ms: float = 0.0


# ------- results -------
class ResultRow(SQLModel):
    method: str
    backbone: str
    label_fraction: float
    mean_accuracy: float
    std_accuracy: float
    n_runs: int
    reference_accuracy: Optional[float] = None


# ------- data -------
class SplitManifest(SQLModel):
    seed: int
    label_fraction: float
    labeled_ids: List[str]
    unlabeled_ids: List[str]
    batch_count: int
    labeled_reused: bool = False
    unlabeled_batch_size: int = 64


class SynthSpec(SQLModel):
    n_channels: int = Field(default=62, ge=1)
    segments_per_class: int = Field(default=20, ge=1)
    sessions: int = Field(default=15, ge=1)
    experiments: int = Field(default=1, ge=1)
    snr: float = Field(default=1.0, gt=0.0)
    signatures: Dict[int, Dict[str, float]] = Field(
        default_factory=lambda: {0: {"beta": 2.0}, 1: {"alpha": 2.0}, 2: {"theta": 2.0}}
    )
    sample_rate_hz: float = Field(default_factory=lambda: get_settings().source_rate_hz, gt=0.0)
    segment_seconds: float = Field(default=8.0, gt=0.0)
    mode: str = "features"


# ------- run registry -------
class RunRecordCreate(SQLModel):
    config_hash: str
    method: str
    backbone: str
    label_fraction: float
    experiment: int
    seed: int
    accuracy: Optional[float] = None
    status: str = "complete"
    run_dir: str


class RunRecord(RunRecordCreate, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    config_hash: str = Field(index=True)
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class RunRecordRead(SQLModel):
    id: int
    config_hash: str
    method: str
    backbone: str
    label_fraction: float
    experiment: int
    seed: int
    accuracy: Optional[float]
    status: str
    run_dir: str
    created_at: datetime
