"""Training strategies: joint autoencoder SSL, pretrain + finetune, pseudo-labeling,
Pi model, temporal ensembling and mean teacher, plus a supervised-only baseline.

Every trainer consumes a ``SplitPlan`` through ``make_batches`` so all methods
see identical labeled/unlabeled partitions and batch compositions for a seed.
"""

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import autodiff as ad
from autodiff import Tensor
from data import BatchIds, Dataset, SplitPlan, make_batches
from errors import ContractError, IndexingError, NumericError, ScheduleError, TrainingError
from layers import Module, Parameter
from metrics import accuracy
from models import JointModel, build_model
from optim import Adam, clip_gradients
from schema import ExperimentConfig, TrainReportRow

logger = logging.getLogger(__name__)

N_CLASSES = 3


# ------- ramp-up -------
def ramp(t: float, total: int, scale: float = 20.0, sharpness: float = 5.0) -> float:
    """eta(t) = scale * exp(-sharpness * (1 - t/T)^2) for 0 <= t <= T."""
    if total < 1:
        raise ScheduleError(f"total epochs must be >= 1, got {total}")
    if t < 0 or t > total:
        raise ScheduleError(f"epoch {t} outside [0, {total}]")
    return scale * math.exp(-sharpness * (1.0 - t / total) ** 2)


@dataclass(frozen=True)
class RampSchedule:
    total_epochs: int = 30
    scale: float = 20.0
    sharpness: float = 5.0

    def __call__(self, t: float) -> float:
        return ramp(t, self.total_epochs, self.scale, self.sharpness)


# ------- batches -------
@dataclass(frozen=True)
class SslBatch:
    x: np.ndarray
    y: np.ndarray
    x_ul: np.ndarray
    labeled_ids: Tuple[str, ...] = ()
    unlabeled_ids: Tuple[str, ...] = ()

    @property
    def n_labeled(self) -> int:
        return self.x.shape[0]

    @property
    def ids(self) -> Tuple[str, ...]:
        return self.labeled_ids + self.unlabeled_ids

    def all_x(self) -> np.ndarray:
        return np.concatenate([self.x, self.x_ul], axis=0)

    @classmethod
    def from_ids(cls, ds: Dataset, batch: BatchIds, labels: Optional[Mapping[str, int]] = None) -> "SslBatch":
        if labels is None:
            y = ds.labels_for(batch.labeled)
        else:
            y = np.array([labels[sid] for sid in batch.labeled], dtype=np.int64)
        if np.any(y < 0):
            raise TrainingError("a labeled batch entry has no label")
        return cls(
            x=ds.features_for(batch.labeled),
            y=ad.one_hot(y, N_CLASSES),
            x_ul=ds.features_for(batch.unlabeled),
            labeled_ids=batch.labeled,
            unlabeled_ids=batch.unlabeled,
        )


def epoch_batches(ds: Dataset, plan: SplitPlan, epoch: int, labels: Optional[Mapping[str, int]] = None) -> List[SslBatch]:
    return [SslBatch.from_ids(ds, b, labels) for b in make_batches(plan, epoch)]


# ------- reporting -------
REPORT_COLUMNS = ["epoch", "eta", "loss_u", "loss_s", "loss_total", "train_acc", "test_acc", "wall_ms", "phase"]


@dataclass
class TrainReport:
    rows: List[TrainReportRow] = field(default_factory=list)

    def append(self, row: TrainReportRow) -> None:
        self.rows.append(row)

    def extend(self, other: "TrainReport") -> None:
        self.rows.extend(other.rows)

    def phases(self) -> List[str]:
        return list(dict.fromkeys(row.phase for row in self.rows))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=REPORT_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path, index=False)


@dataclass
class _EpochStats:
    loss_u: float = 0.0
    loss_s: float = 0.0
    loss_total: float = 0.0
    correct: int = 0
    seen: int = 0
    batches: int = 0
    started: float = field(default_factory=time.perf_counter)

    def add(self, loss_u: float, loss_s: float, loss_total: float, logits: Optional[Tensor] = None, y: Optional[np.ndarray] = None) -> None:
        self.loss_u += loss_u
        self.loss_s += loss_s
        self.loss_total += loss_total
        self.batches += 1
        if logits is not None and y is not None and y.shape[0]:
            self.correct += int(np.sum(np.argmax(logits.data, axis=1) == np.argmax(y, axis=1)))
            self.seen += y.shape[0]

    def row(self, epoch: int, phase: str, eta: float, test_acc: Optional[float]) -> TrainReportRow:
        n = max(self.batches, 1)
        return TrainReportRow(
            epoch=epoch,
            phase=phase,
            eta=eta,
            loss_u=self.loss_u / n,
            loss_s=self.loss_s / n,
            loss_total=self.loss_total / n,
            train_acc=self.correct / self.seen if self.seen else None,
            test_acc=test_acc,
            wall_ms=(time.perf_counter() - self.started) * 1000.0,
        )


def _log_row(row: TrainReportRow, total: int) -> None:
    logger.info(
        "%s epoch %d/%d eta=%.4f loss_u=%.5f loss_s=%.5f loss=%.5f train_acc=%s test_acc=%s",
        row.phase, row.epoch, total, row.eta, row.loss_u, row.loss_s, row.loss_total,
        "-" if row.train_acc is None else f"{row.train_acc:.4f}",
        "-" if row.test_acc is None else f"{row.test_acc:.4f}",
    )


def _finish_epoch(report: TrainReport, stats: _EpochStats, epoch: int, total: int, phase: str, eta: float, model: Module, test: Optional[Dataset]) -> TrainReportRow:
    row = stats.row(epoch, phase, eta, evaluate(model, test) if test is not None and len(test) else None)
    report.append(row)
    _log_row(row, total)
    return row


# ------- shared helpers -------
def _apply(loss: Tensor, optimizer: Adam) -> None:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"training loss became {value}")
    optimizer.zero_grad()
    loss.backward()
    clip_gradients(optimizer.params)
    optimizer.step()


def _zero_loss() -> Tensor:
    return Tensor(0.0)


def supervised_parameters(model: Module) -> List[Parameter]:
    """Parameters on the input -> logits path."""
    if isinstance(model, JointModel):
        return model.encoder_parameters()
    return model.parameters()


def gaussian_noise(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def predict_proba(model: Module, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Softmax outputs in eval mode; the model's mode is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            parts = [ad.softmax(model(Tensor(x[i : i + chunk])), axis=1).data for i in range(0, x.shape[0], chunk)]
    finally:
        model.train(was_training)
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, N_CLASSES))


def predict(model: Module, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.argmax(predict_proba(model, x, chunk), axis=1)


def evaluate(model: Module, ds: Dataset) -> float:
    labeled = ds if np.all(ds.labels >= 0) else ds.where(lambda seq: seq.label is not None)
    return accuracy(predict(model, labeled.x), labeled.labels)


# ------- joint autoencoder SSL -------
def joint_loss(model: JointModel, batch: SslBatch, eta: float) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """(total, L_u, L_s, labeled logits) with total = eta * L_u + L_s.

    L_u sums the per-sample reconstruction error averaged over the unlabeled
    batch and over the labeled batch; the unlabeled term is absent when the
    batch has no unlabeled samples.
    """
    if batch.n_labeled == 0:
        raise TrainingError("joint SSL batch has no labeled samples")
    x = Tensor(batch.x)
    z = model.encode(x)
    logits = model.classify(z)
    loss_s = ad.cross_entropy(logits, batch.y)
    loss_u = ad.mse(model.decode(z), x)
    if batch.x_ul.shape[0]:
        x_ul = Tensor(batch.x_ul)
        loss_u = loss_u + ad.mse(model.decode(model.encode(x_ul)), x_ul)
    return eta * loss_u + loss_s, loss_u, loss_s, logits


def joint_ssl_epoch(
    model: JointModel,
    batches: Sequence[SslBatch],
    t: int,
    schedule: RampSchedule,
    optimizer: Adam,
) -> _EpochStats:
    eta = schedule(t)
    model.train()
    stats = _EpochStats()
    for batch in batches:
        total, loss_u, loss_s, logits = joint_loss(model, batch, eta)
        _apply(total, optimizer)
        stats.add(loss_u.item(), loss_s.item(), total.item(), logits, batch.y)
    return stats


def train_joint(
    model: JointModel,
    ds: Dataset,
    plan: SplitPlan,
    schedule: RampSchedule,
    lr: float = 0.001,
    test: Optional[Dataset] = None,
) -> TrainReport:
    optimizer = Adam(model.parameters(), lr=lr)
    report = TrainReport()
    for epoch in range(1, schedule.total_epochs + 1):
        stats = joint_ssl_epoch(model, epoch_batches(ds, plan, epoch), epoch, schedule, optimizer)
        _finish_epoch(report, stats, epoch, schedule.total_epochs, "joint", schedule(epoch), model, test)
    return report


# ------- supervised baseline -------
def supervised_epoch(model: Module, batches: Sequence[SslBatch], optimizer: Adam) -> _EpochStats:
    """Cross-entropy on the labeled part of each batch only."""
    model.train()
    stats = _EpochStats()
    for batch in batches:
        if batch.n_labeled == 0:
            raise TrainingError("supervised batch has no labeled samples")
        logits = model(Tensor(batch.x))
        loss = ad.cross_entropy(logits, batch.y)
        _apply(loss, optimizer)
        stats.add(0.0, loss.item(), loss.item(), logits, batch.y)
    return stats


def train_supervised(
    model: Module,
    ds: Dataset,
    plan: SplitPlan,
    epochs: int = 30,
    lr: float = 0.001,
    test: Optional[Dataset] = None,
    labels: Optional[Mapping[str, int]] = None,
    phase: str = "supervised",
) -> TrainReport:
    optimizer = Adam(supervised_parameters(model), lr=lr)
    report = TrainReport()
    for epoch in range(1, epochs + 1):
        stats = supervised_epoch(model, epoch_batches(ds, plan, epoch, labels), optimizer)
        _finish_epoch(report, stats, epoch, epochs, phase, 0.0, model, test)
    return report


# ------- pretraining + finetuning -------
def pretrain_finetune(
    model: JointModel,
    ds: Dataset,
    plan: SplitPlan,
    epochs: int = 30,
    lr: float = 0.001,
    test: Optional[Dataset] = None,
) -> TrainReport:
    """Reconstruction on all of D, then cross-entropy on D_l with the encoder unfrozen."""
    report = TrainReport()
    optimizer = Adam(model.autoencoder.parameters(), lr=lr)
    model.train()
    for epoch in range(1, epochs + 1):
        stats = _EpochStats()
        for batch in epoch_batches(ds, plan, epoch):
            x = Tensor(batch.all_x())
            loss = ad.mse(model.decode(model.encode(x)), x)
            _apply(loss, optimizer)
            stats.add(loss.item(), 0.0, loss.item())
        _finish_epoch(report, stats, epoch, epochs, "pretrain", 0.0, model, None)
    report.extend(train_supervised(model, ds, plan, epochs, lr, test, phase="finetune"))
    return report


# ------- pseudo-labeling -------
def assign_pseudo_labels(model: Module, ds: Dataset, ids: Sequence[str]) -> Dict[str, int]:
    """Argmax predictions of the eval-mode model for ``ids``."""
    if not ids:
        return {}
    predictions = predict(model, ds.features_for(ids))
    return {sid: int(label) for sid, label in zip(ids, predictions)}


def pseudo_label_train(
    model: Module,
    ds: Dataset,
    plan: SplitPlan,
    epochs: int = 30,
    lr: float = 0.001,
    test: Optional[Dataset] = None,
) -> TrainReport:
    report = train_supervised(model, ds, plan, epochs, lr, test, phase="stage1")
    before = evaluate(model, test) if test is not None and len(test) else None

    labels = {sid: int(label) for sid, label in zip(plan.labeled_ids, ds.labels_for(plan.labeled_ids))}
    labels.update(assign_pseudo_labels(model, ds, plan.unlabeled_ids))
    # dataset order, so that correct pseudo-labels reproduce the fully labeled split
    relabeled = SplitPlan(
        seed=plan.seed,
        label_fraction=1.0,
        labeled_ids=tuple(sid for sid in ds.ids if sid in labels),
        unlabeled_ids=(),
        unlabeled_batch_size=plan.unlabeled_batch_size,
    )
    report.extend(train_supervised(model, ds, relabeled, epochs, lr, test, labels=labels, phase="stage3"))

    if before is not None:
        after = report.rows[-1].test_acc
        logger.info("pseudo-labeling changed test accuracy by %+.4f (%.4f -> %.4f)", after - before, before, after)
    return report


# ------- Pi model -------
def _consistency_inputs(batch: SslBatch, rng: np.random.Generator, noise_std: float) -> np.ndarray:
    x = batch.all_x()
    return x + gaussian_noise(rng, x.shape, noise_std)


def _supervised_term(logits: Tensor, batch: SslBatch) -> Tensor:
    if batch.n_labeled == 0:
        return _zero_loss()
    return ad.cross_entropy(logits[: batch.n_labeled], batch.y)


def pi_model_step(
    model: Module,
    batch: SslBatch,
    optimizer: Adam,
    eta: float,
    rng: np.random.Generator,
    noise_std: float = 0.15,
) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Two noisy passes; consistency = MSE of their softmax outputs over all samples."""
    logits = model(Tensor(_consistency_inputs(batch, rng, noise_std)))
    second = model(Tensor(_consistency_inputs(batch, rng, noise_std)))
    consistency = ad.mse(ad.softmax(logits, axis=1), ad.softmax(second, axis=1))
    loss_s = _supervised_term(logits, batch)
    loss = loss_s + eta * consistency
    _apply(loss, optimizer)
    return loss, consistency, loss_s, logits


def train_pi_model(
    model: Module,
    ds: Dataset,
    plan: SplitPlan,
    schedule: RampSchedule,
    rng: np.random.Generator,
    lr: float = 0.001,
    noise_std: float = 0.15,
    test: Optional[Dataset] = None,
) -> TrainReport:
    optimizer = Adam(model.parameters(), lr=lr)
    report = TrainReport()
    for epoch in range(1, schedule.total_epochs + 1):
        eta = schedule(epoch)
        model.train()
        stats = _EpochStats()
        for batch in epoch_batches(ds, plan, epoch):
            loss, consistency, loss_s, logits = pi_model_step(model, batch, optimizer, eta, rng, noise_std)
            stats.add(consistency.item(), loss_s.item(), loss.item(), logits[: batch.n_labeled], batch.y)
        _finish_epoch(report, stats, epoch, schedule.total_epochs, "pi_model", eta, model, test)
    return report


# ------- temporal ensembling -------
class EnsembleState:
    """Per-sample moving average S of past-epoch softmax outputs, keyed by sample id."""

    def __init__(self, ids: Sequence[str], momentum: float = 0.6, n_classes: int = N_CLASSES):
        self.ids = tuple(ids)
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise IndexingError("ensemble sample ids are not unique")
        self.momentum = momentum
        self.aggregate = np.zeros((len(self.ids), n_classes))
        self.epoch = 0

    def _rows(self, ids: Sequence[str]) -> List[int]:
        try:
            return [self.index[sid] for sid in ids]
        except KeyError as exc:
            raise IndexingError(f"sample {exc.args[0]!r} is not tracked by the ensemble") from None

    def targets(self, ids: Sequence[str]) -> np.ndarray:
        """Bias-corrected S / (1 - momentum^t); zero before the first update."""
        rows = self._rows(ids)
        if self.epoch == 0:
            return np.zeros((len(rows), self.aggregate.shape[1]))
        return self.aggregate[rows] / (1.0 - self.momentum**self.epoch)

    def update(self, outputs: Mapping[str, np.ndarray]) -> None:
        missing = set(self.ids) - set(outputs)
        unknown = set(outputs) - set(self.ids)
        if missing or unknown:
            raise IndexingError(
                f"epoch outputs do not match the tracked samples: {len(missing)} missing, {len(unknown)} unknown"
            )
        current = np.stack([outputs[sid] for sid in self.ids])
        self.aggregate = self.momentum * self.aggregate + (1.0 - self.momentum) * current
        self.epoch += 1


def temporal_ensembling_epoch(
    model: Module,
    state: EnsembleState,
    batches: Sequence[SslBatch],
    optimizer: Adam,
    eta: float,
    rng: np.random.Generator,
    noise_std: float = 0.15,
) -> _EpochStats:
    """One noisy pass per sample against the ensemble target; S updated once at the end."""
    model.train()
    stats = _EpochStats()
    outputs: Dict[str, np.ndarray] = {}
    for batch in batches:
        logits = model(Tensor(_consistency_inputs(batch, rng, noise_std)))
        probs = ad.softmax(logits, axis=1)
        consistency = ad.mse(probs, state.targets(batch.ids))
        loss_s = _supervised_term(logits, batch)
        loss = loss_s + eta * consistency
        _apply(loss, optimizer)
        for sid, p in zip(batch.ids, probs.data):
            outputs[sid] = p.copy()
        stats.add(consistency.item(), loss_s.item(), loss.item(), logits[: batch.n_labeled], batch.y)
    state.update(outputs)
    return stats


def train_temporal_ensembling(
    model: Module,
    ds: Dataset,
    plan: SplitPlan,
    schedule: RampSchedule,
    rng: np.random.Generator,
    lr: float = 0.001,
    noise_std: float = 0.15,
    momentum: float = 0.6,
    test: Optional[Dataset] = None,
) -> Tuple[TrainReport, EnsembleState]:
    optimizer = Adam(model.parameters(), lr=lr)
    state = EnsembleState(plan.labeled_ids + plan.unlabeled_ids, momentum)
    report = TrainReport()
    for epoch in range(1, schedule.total_epochs + 1):
        eta = schedule(epoch)
        stats = temporal_ensembling_epoch(model, state, epoch_batches(ds, plan, epoch), optimizer, eta, rng, noise_std)
        _finish_epoch(report, stats, epoch, schedule.total_epochs, "temporal_ensembling", eta, model, test)
    return report, state


# ------- mean teacher -------
class TeacherState:
    """EMA copy of the student; never optimized, updated after every student step."""

    def __init__(self, model: Module, decay: float = 0.95):
        self.model = model
        self.decay = decay
        self.step = 0

    @classmethod
    def from_student(cls, student: Module, decay: float = 0.95, rng: Optional[np.random.Generator] = None) -> "TeacherState":
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad = False
            p.grad = None
        if rng is not None:
            teacher.set_rng(rng)
        return cls(teacher, decay)

    def update(self, student: Module) -> None:
        for name, p in self.model.named_parameters():
            if p.grad is not None or p.requires_grad:
                raise ContractError(f"teacher parameter {name} received a gradient")
        for target, source in zip(self.model.parameters(), student.parameters()):
            target.data *= self.decay
            target.data += (1.0 - self.decay) * source.data
        self.step += 1


def mean_teacher_step(
    student: Module,
    teacher: TeacherState,
    batch: SslBatch,
    optimizer: Adam,
    eta: float,
    rng: np.random.Generator,
    noise_std: float = 0.15,
) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    if any(id(p) in {id(q) for q in teacher.model.parameters()} for p in optimizer.params):
        raise ContractError("teacher parameters are registered with the optimizer")
    logits = student(Tensor(_consistency_inputs(batch, rng, noise_std)))
    teacher.model.train(student.training)
    with ad.no_grad():
        target = ad.softmax(teacher.model(Tensor(_consistency_inputs(batch, rng, noise_std))), axis=1)
    consistency = ad.mse(ad.softmax(logits, axis=1), target)
    loss_s = _supervised_term(logits, batch)
    loss = loss_s + eta * consistency
    _apply(loss, optimizer)
    teacher.update(student)
    return loss, consistency, loss_s, logits


def train_mean_teacher(
    student: Module,
    ds: Dataset,
    plan: SplitPlan,
    schedule: RampSchedule,
    rng: np.random.Generator,
    lr: float = 0.001,
    noise_std: float = 0.15,
    decay: float = 0.95,
    test: Optional[Dataset] = None,
) -> Tuple[TrainReport, TeacherState]:
    optimizer = Adam(student.parameters(), lr=lr)
    teacher = TeacherState.from_student(student, decay, np.random.default_rng(rng.integers(2**32)))
    report = TrainReport()
    for epoch in range(1, schedule.total_epochs + 1):
        eta = schedule(epoch)
        student.train()
        stats = _EpochStats()
        for batch in epoch_batches(ds, plan, epoch):
            loss, consistency, loss_s, logits = mean_teacher_step(student, teacher, batch, optimizer, eta, rng, noise_std)
            stats.add(consistency.item(), loss_s.item(), loss.item(), logits[: batch.n_labeled], batch.y)
        _finish_epoch(report, stats, epoch, schedule.total_epochs, "mean_teacher", eta, teacher.model, test)
    return report, teacher


# ------- dispatch -------
def train_method(
    cfg: ExperimentConfig,
    train: Dataset,
    plan: SplitPlan,
    seed: int,
    test: Optional[Dataset] = None,
) -> Tuple[Module, TrainReport]:
    """Build the model for ``cfg`` from ``seed`` and train it; returns the model used for prediction."""
    cfg = cfg.normalized()
    model = build_model(cfg.method, cfg.backbone, np.random.default_rng(seed), hidden_size=cfg.hidden_size)
    noise_rng = np.random.default_rng([seed, 1])
    schedule = RampSchedule(cfg.epochs, cfg.ramp_scale, cfg.ramp_sharpness)
    logger.info("training %s/%s with %d labeled and %d unlabeled samples", cfg.method, cfg.backbone, len(plan.labeled_ids), len(plan.unlabeled_ids))

    if cfg.method in ("att_rae", "rae", "sae"):
        report = train_joint(model, train, plan, schedule, cfg.lr, test)
    elif cfg.method == "pretrain_sae":
        report = pretrain_finetune(model, train, plan, cfg.epochs, cfg.lr, test)
    elif cfg.method == "supervised":
        report = train_supervised(model, train, plan, cfg.epochs, cfg.lr, test)
    elif cfg.method == "pseudo_label":
        report = pseudo_label_train(model, train, plan, cfg.epochs, cfg.lr, test)
    elif cfg.method == "pi_model":
        report = train_pi_model(model, train, plan, schedule, noise_rng, cfg.lr, cfg.noise_std, test)
    elif cfg.method == "temporal_ensembling":
        report, _ = train_temporal_ensembling(
            model, train, plan, schedule, noise_rng, cfg.lr, cfg.noise_std, cfg.ensemble_momentum, test
        )
    else:
        # predictions come from the EMA teacher
        report, teacher = train_mean_teacher(model, train, plan, schedule, noise_rng, cfg.lr, cfg.noise_std, cfg.ema_decay, test)
        model = teacher.model
    return model, report
