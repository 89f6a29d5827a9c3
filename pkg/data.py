"""Datasets, labeled/unlabeled splits, ratio-preserving batches and data sources."""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.io import loadmat

from errors import ParameterError, SchemaError, SplitError
from schema import SplitManifest, SynthSpec
from settings import DEFAULT_BANDS
from sigproc import (
    CHANNEL_NAMES,
    FEATURE_COLUMNS,
    N_FEATURES,
    N_STEPS,
    FeatureSequence,
    RawRecording,
    write_feature_csv,
)

logger = logging.getLogger(__name__)

N_CLASSES = 3
# SEED session order: 1 positive, 0 neutral, -1 negative
SEED_SESSION_LABELS = (1, 0, -1, -1, 0, 1, -1, 0, 1, 1, 0, -1, 0, 1, -1)


# ------- dataset -------
@dataclass(frozen=True)
class Dataset:
    samples: Tuple[FeatureSequence, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for seq in self.samples:
            if seq.segment_id in seen:
                raise SchemaError(f"duplicate segment id {seq.segment_id!r}")
            seen.add(seq.segment_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[FeatureSequence]:
        return iter(self.samples)

    @cached_property
    def ids(self) -> Tuple[str, ...]:
        return tuple(seq.segment_id for seq in self.samples)

    @cached_property
    def index(self) -> Dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}

    @cached_property
    def x(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, N_STEPS, N_FEATURES))
        return np.stack([seq.steps for seq in self.samples])

    @cached_property
    def labels(self) -> np.ndarray:
        """Integer labels; -1 marks samples without one."""
        return np.array([-1 if seq.label is None else seq.label for seq in self.samples], dtype=np.int64)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        return Dataset(tuple(self.samples[self.index[sid]] for sid in ids))

    def where(self, keep) -> "Dataset":
        return Dataset(tuple(seq for seq in self.samples if keep(seq)))

    def features_for(self, ids: Sequence[str]) -> np.ndarray:
        rows = [self.index[sid] for sid in ids]
        return self.x[rows] if rows else np.zeros((0, N_STEPS, N_FEATURES))

    def labels_for(self, ids: Sequence[str]) -> np.ndarray:
        return self.labels[[self.index[sid] for sid in ids]] if ids else np.zeros(0, dtype=np.int64)

    def experiments(self) -> List[int]:
        return sorted({seq.experiment_id for seq in self.samples})


def load_features(path: Union[str, Path]) -> Dataset:
    """Group the per-window rows of a feature CSV back into 8-step sequences."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: feature file not found")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    required = ["segment_id", "step", *FEATURE_COLUMNS, "label"]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for column in ("session", "experiment"):
        if column not in frame.columns:
            logger.debug("%s: no %s column, defaulting to 0", path, column)
            frame[column] = "0"
    # header is line 1
    lines = np.arange(len(frame)) + 2

    values = frame[FEATURE_COLUMNS].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values).all(axis=1)
    if bad.any():
        raise SchemaError(f"{path}: line {lines[bad][0]}: non-numeric or non-finite feature value")
    bad = ~frame["label"].isin(["0", "1", "2", ""]).to_numpy()
    if bad.any():
        first = int(np.argmax(bad))
        raise SchemaError(f"{path}: line {lines[first]}: label {frame['label'].iloc[first]!r} outside {{0, 1, 2, blank}}")
    ints = frame[["step", "session", "experiment"]].apply(pd.to_numeric, errors="coerce")
    bad = ints.isna().any(axis=1).to_numpy()
    if bad.any():
        raise SchemaError(f"{path}: line {lines[bad][0]}: step/session/experiment must be integers")
    ints = ints.astype(np.int64)

    samples = []
    groups = frame.groupby("segment_id", sort=False).indices
    for segment_id, rows in sorted(groups.items(), key=lambda item: item[1][0]):
        steps = ints["step"].to_numpy()[rows]
        span = f"lines {lines[rows].min()}-{lines[rows].max()}"
        if sorted(steps.tolist()) != list(range(N_STEPS)):
            raise SchemaError(f"{path}: segment {segment_id!r} ({span}) has steps {sorted(steps.tolist())}, expected 0-{N_STEPS - 1}")
        order = rows[np.argsort(steps)]
        labels = set(frame["label"].to_numpy()[rows])
        if len(labels) != 1:
            raise SchemaError(f"{path}: segment {segment_id!r} ({span}) has conflicting labels {sorted(labels)}")
        label = labels.pop()
        samples.append(
            FeatureSequence(
                steps=values[order],
                label=int(label) if label else None,
                segment_id=segment_id,
                session_id=int(ints["session"].to_numpy()[rows[0]]),
                experiment_id=int(ints["experiment"].to_numpy()[rows[0]]),
            )
        )
    logger.info("loaded %d segments from %s", len(samples), path)
    return Dataset(tuple(samples))


def write_features(ds: Dataset, path: Union[str, Path]) -> None:
    write_feature_csv(ds.samples, path)


def split_sessions(ds: Dataset, train_sessions: int = 9) -> Tuple[Dataset, Dataset]:
    """Sessions 1..train_sessions train, the rest test, within every experiment."""
    train = ds.where(lambda seq: seq.session_id <= train_sessions)
    test = ds.where(lambda seq: seq.session_id > train_sessions)
    return train, test


def by_experiment(ds: Dataset) -> Dict[int, Dataset]:
    return {exp: ds.where(lambda seq, exp=exp: seq.experiment_id == exp) for exp in ds.experiments()}


def load_seed_mat(
    path: Union[str, Path],
    session_labels: Sequence[int] = SEED_SESSION_LABELS,
    experiment_id: int = 0,
    key_prefix: str = "de_LDS",
) -> Dataset:
    """Read a SEED ExtractedFeatures file (``de_LDS1..15``, each 62 x windows x 5)."""
    path = Path(path)
    mat = loadmat(path)
    samples = []
    for session, raw_label in enumerate(session_labels, start=1):
        key = f"{key_prefix}{session}"
        if key not in mat:
            raise SchemaError(f"{path}: variable {key!r} not found")
        de = np.asarray(mat[key], dtype=np.float64)
        if de.ndim != 3 or de.shape[0] * de.shape[2] != N_FEATURES:
            raise SchemaError(f"{path}: {key} has shape {de.shape}, expected 62 x windows x 5")
        # channels x windows x bands -> windows x (channel-major, band-minor)
        windows = de.transpose(1, 0, 2).reshape(de.shape[1], N_FEATURES)
        for k in range(windows.shape[0] // N_STEPS):
            samples.append(
                FeatureSequence(
                    steps=windows[k * N_STEPS : (k + 1) * N_STEPS].copy(),
                    label=int(raw_label) + 1,
                    segment_id=f"{path.stem}-s{session:02d}-{k:04d}",
                    session_id=session,
                    experiment_id=experiment_id,
                )
            )
    return Dataset(tuple(samples))


# ------- splitting -------
@dataclass(frozen=True)
class SplitPlan:
    seed: int
    label_fraction: float
    labeled_ids: Tuple[str, ...]
    unlabeled_ids: Tuple[str, ...]
    unlabeled_batch_size: int = 64

    def __post_init__(self):
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise SplitError(f"ids both labeled and unlabeled: {sorted(overlap)[:3]}")
        if not self.labeled_ids:
            raise SplitError("split has no labeled samples")

    @property
    def batch_count(self) -> int:
        pool = self.unlabeled_ids or self.labeled_ids
        return math.ceil(len(pool) / self.unlabeled_batch_size)

    @property
    def labeled_reused(self) -> bool:
        return len(self.labeled_ids) < self.batch_count

    def to_manifest(self) -> SplitManifest:
        return SplitManifest(
            seed=self.seed,
            label_fraction=self.label_fraction,
            labeled_ids=list(self.labeled_ids),
            unlabeled_ids=list(self.unlabeled_ids),
            batch_count=self.batch_count,
            labeled_reused=self.labeled_reused,
            unlabeled_batch_size=self.unlabeled_batch_size,
        )

    @classmethod
    def from_manifest(cls, manifest: SplitManifest) -> "SplitPlan":
        return cls(
            seed=manifest.seed,
            label_fraction=manifest.label_fraction,
            labeled_ids=tuple(manifest.labeled_ids),
            unlabeled_ids=tuple(manifest.unlabeled_ids),
            unlabeled_batch_size=manifest.unlabeled_batch_size,
        )


def _per_class_quota(total: int, sizes: Sequence[int]) -> List[int]:
    base, extra = divmod(total, len(sizes))
    return [min(base + (1 if c < extra else 0), size) for c, size in enumerate(sizes)]


def make_split(ds: Dataset, fraction: float, seed: int, unlabeled_batch_size: int = 64) -> SplitPlan:
    """Stratified labeled subset: equal counts per class, the rest unlabeled.

    Samples without a label always land in the unlabeled pool.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"label fraction must be in (0, 1], got {fraction}")
    labels = ds.labels
    candidates = np.flatnonzero(labels >= 0)
    if fraction == 1.0:
        chosen = candidates
    else:
        rng = np.random.default_rng(seed)
        per_class = [np.flatnonzero(labels == c) for c in range(N_CLASSES)]
        total = int(round(fraction * candidates.size))
        quota = _per_class_quota(total, [idx.size for idx in per_class])
        for c, k in enumerate(quota):
            if k == 0:
                minimum = N_CLASSES / max(candidates.size, 1)
                raise SplitError(
                    f"fraction {fraction} leaves class {c} without labeled samples "
                    f"({per_class[c].size} available); use a fraction of at least {minimum:.4f}"
                )
        chosen = np.concatenate([rng.permutation(idx)[:k] for idx, k in zip(per_class, quota)])
    mask = np.zeros(len(ds), dtype=bool)
    mask[chosen] = True
    ids = np.array(ds.ids, dtype=object)
    return SplitPlan(
        seed=seed,
        label_fraction=fraction,
        labeled_ids=tuple(ids[mask]),
        unlabeled_ids=tuple(ids[~mask]),
        unlabeled_batch_size=unlabeled_batch_size,
    )


@dataclass(frozen=True)
class BatchIds:
    labeled: Tuple[str, ...]
    unlabeled: Tuple[str, ...]


def make_batches(plan: SplitPlan, epoch: int, target_unlabeled_batch: Optional[int] = None) -> List[BatchIds]:
    """R batches for one epoch; labeled ids dealt round-robin after a seeded shuffle.

    The shuffle depends only on (seed, epoch). When there are fewer labeled
    samples than batches, labeled samples are reused cyclically.
    """
    if target_unlabeled_batch is not None and target_unlabeled_batch != plan.unlabeled_batch_size:
        plan = SplitPlan(plan.seed, plan.label_fraction, plan.labeled_ids, plan.unlabeled_ids, target_unlabeled_batch)
    rng = np.random.default_rng([plan.seed, epoch])
    count = plan.batch_count
    labeled = [plan.labeled_ids[i] for i in rng.permutation(len(plan.labeled_ids))]
    unlabeled = [plan.unlabeled_ids[i] for i in rng.permutation(len(plan.unlabeled_ids))]

    unlabeled_parts = [tuple(unlabeled[i] for i in part) for part in np.array_split(np.arange(len(unlabeled)), count)]
    labeled_parts: List[List[str]] = [[] for _ in range(count)]
    for i, sid in enumerate(labeled):
        labeled_parts[i % count].append(sid)
    if len(labeled) < count:
        logger.warning(
            "only %d labeled samples for %d batches; reusing labeled samples cyclically", len(labeled), count
        )
        for j in range(len(labeled), count):
            labeled_parts[j].append(labeled[j % len(labeled)])
    return [BatchIds(tuple(l), u) for l, u in zip(labeled_parts, unlabeled_parts)]


def save_split_manifest(plan: SplitPlan, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(plan.to_manifest().model_dump_json(indent=2))


def load_split_manifest(path: Union[str, Path]) -> SplitPlan:
    return SplitPlan.from_manifest(SplitManifest.model_validate_json(Path(path).read_text()))


# ------- synthetic data -------
@dataclass
class _SynthLayout:
    band_names: Tuple[str, ...]
    base: np.ndarray
    channel_weight: np.ndarray
    mixing: np.ndarray
    session_offset: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _signature_shift(spec: SynthSpec, label: int, layout: _SynthLayout) -> np.ndarray:
    """Per (channel, band) DE offset produced by the class band-power gains."""
    shift = np.zeros((spec.n_channels, len(layout.band_names)))
    for band, gain in spec.signatures.get(label, {}).items():
        if band not in layout.band_names:
            raise ParameterError(f"signature band {band!r} is not one of {layout.band_names}")
        if gain <= 0:
            raise ParameterError(f"signature gain for {band!r} must be positive, got {gain}")
        shift[:, layout.band_names.index(band)] = 0.5 * np.log(gain) * layout.channel_weight
    return shift


def _layout(spec: SynthSpec, rng: np.random.Generator) -> _SynthLayout:
    band_names = tuple(DEFAULT_BANDS)
    n = spec.n_channels * len(band_names)
    return _SynthLayout(
        band_names=band_names,
        base=rng.normal(0.5, 0.5, size=(spec.n_channels, len(band_names))),
        channel_weight=rng.uniform(0.5, 1.5, size=spec.n_channels),
        mixing=rng.normal(0.0, 1.0, size=(4, n)) / np.sqrt(4),
        session_offset=rng.normal(0.0, 0.1, size=(spec.experiments, spec.sessions, n)),
    )


def _synth_features(spec: SynthSpec, rng: np.random.Generator) -> Dataset:
    if spec.n_channels * len(DEFAULT_BANDS) != N_FEATURES:
        raise ParameterError(f"feature mode needs {N_FEATURES // len(DEFAULT_BANDS)} channels, got {spec.n_channels}")
    layout = _layout(spec, rng)
    noise = 0.0 if math.isinf(spec.snr) else 1.0 / spec.snr
    templates = {c: (layout.base + _signature_shift(spec, c, layout)).reshape(-1) for c in range(N_CLASSES)}
    samples = []
    for exp in range(spec.experiments):
        for session in range(1, spec.sessions + 1):
            for label in range(N_CLASSES):
                for k in range(spec.segments_per_class):
                    # low-rank nuisance shared by the 8 windows of a segment
                    state = rng.normal(size=4) + 0.2 * rng.normal(size=(N_STEPS, 4))
                    steps = (
                        templates[label]
                        + noise * (0.5 * state @ layout.mixing + layout.session_offset[exp, session - 1])
                        + noise * rng.normal(size=(N_STEPS, N_FEATURES))
                    )
                    samples.append(
                        FeatureSequence(
                            steps=steps,
                            label=label,
                            segment_id=f"synth-e{exp:02d}-s{session:02d}-c{label}-{k:04d}",
                            session_id=session,
                            experiment_id=exp,
                        )
                    )
    return Dataset(tuple(samples))


def _synth_raw(spec: SynthSpec, rng: np.random.Generator) -> List[RawRecording]:
    layout = _layout(spec, rng)
    fs = spec.sample_rate_hz
    width = int(round(spec.segment_seconds * fs))
    t = np.arange(width * spec.segments_per_class) / fs
    noise = 0.0 if math.isinf(spec.snr) else 1.0 / spec.snr
    channels = CHANNEL_NAMES[: spec.n_channels] if spec.n_channels <= len(CHANNEL_NAMES) else tuple(f"CH{i}" for i in range(spec.n_channels))
    recordings = []
    for exp in range(spec.experiments):
        for session in range(1, spec.sessions + 1):
            for label in range(N_CLASSES):
                gains = {band: 1.0 for band in layout.band_names}
                gains.update(spec.signatures.get(label, {}))
                signal = np.zeros((spec.n_channels, t.size))
                for band, (lo, hi) in DEFAULT_BANDS.items():
                    if hi >= fs / 2.0:
                        continue
                    amplitude = np.sqrt(gains[band]) * layout.channel_weight[:, None]
                    for _ in range(3):
                        freq = rng.uniform(lo, hi)
                        phase = rng.uniform(0.0, 2.0 * np.pi, size=(spec.n_channels, 1))
                        signal += amplitude * np.sin(2.0 * np.pi * freq * t[None, :] + phase)
                signal += noise * rng.normal(size=signal.shape)
                recordings.append(
                    RawRecording(
                        channels=channels,
                        samples=signal,
                        sample_rate_hz=fs,
                        label=label,
                        session_id=session,
                        experiment_id=exp,
                        name=f"synth-e{exp:02d}-s{session:02d}-c{label}",
                    )
                )
    return recordings


def synth_generate(spec: SynthSpec, seed: int) -> Union[List[RawRecording], Dataset]:
    """Labeled synthetic EEG: band-power signatures per class, separability set by ``snr``.

    ``mode="features"`` returns a Dataset of DE sequences; ``mode="raw"`` returns
    one recording per (experiment, session, class) of ``segments_per_class``
    consecutive segments.
    """
    if spec.mode not in ("features", "raw"):
        raise ParameterError(f"synth mode must be 'features' or 'raw', got {spec.mode!r}")
    missing = [c for c in range(N_CLASSES) if c not in spec.signatures]
    if missing:
        raise ParameterError(f"synth signatures missing classes {missing}")
    rng = np.random.default_rng(seed)
    if spec.mode == "raw":
        return _synth_raw(spec, rng)
    return _synth_features(spec, rng)
