"""EEG preprocessing and differential-entropy features.

Chain: resample -> bandpass -> notch -> normalize -> segment -> extract_features.
Feature layout: index = channel * n_bands + band, bands in ``band_edges`` order.
"""

import dataclasses
import logging
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import butter, filtfilt, iirnotch, resample_poly, sosfiltfilt

from errors import (
    DegenerateVarianceError,
    FeatureError,
    ParameterError,
    SchemaError,
    UnsupportedError,
)
from settings import DEFAULT_BANDS, Settings, get_settings

logger = logging.getLogger(__name__)

CHANNEL_NAMES: Tuple[str, ...] = (
    "FP1", "FPZ", "FP2", "AF3", "AF4",
    "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8",
    "FT7", "FC5", "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8",
    "T7", "C5", "C3", "C1", "CZ", "C2", "C4", "C6", "T8",
    "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8",
    "P7", "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8",
    "PO7", "PO5", "PO3", "POZ", "PO4", "PO6", "PO8",
    "CB1", "O1", "OZ", "O2", "CB2",
)
CLASS_NAMES: Tuple[str, ...] = ("negative", "neutral", "positive")
N_CHANNELS = len(CHANNEL_NAMES)
N_BANDS = len(DEFAULT_BANDS)
N_STEPS = 8
N_FEATURES = N_CHANNELS * N_BANDS

_META_LINE = re.compile(r"^#\s*(.*)$")


@dataclass(frozen=True)
class RawRecording:
    channels: Tuple[str, ...]
    samples: np.ndarray
    sample_rate_hz: float
    normalized: bool = False
    label: Optional[int] = None
    session_id: int = 0
    experiment_id: int = 0
    name: str = ""

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.channels):
            raise SchemaError(
                f"recording {self.name!r}: samples {self.samples.shape} do not match {len(self.channels)} channels"
            )
        if self.sample_rate_hz <= 0:
            raise ParameterError(f"sample rate must be positive, got {self.sample_rate_hz}")

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.sample_rate_hz

    def replace(self, **changes) -> "RawRecording":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class EegSegment:
    data: np.ndarray
    sample_rate_hz: float
    normalized: bool
    channels: Tuple[str, ...] = CHANNEL_NAMES
    label: Optional[int] = None
    session_id: int = 0
    experiment_id: int = 0
    segment_id: str = ""

    @property
    def duration_s(self) -> float:
        return self.data.shape[1] / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureSequence:
    steps: np.ndarray
    label: Optional[int] = None
    segment_id: str = ""
    session_id: int = 0
    experiment_id: int = 0

    def __post_init__(self):
        if self.steps.shape != (N_STEPS, N_FEATURES):
            raise SchemaError(f"segment {self.segment_id!r}: expected {(N_STEPS, N_FEATURES)} features, got {self.steps.shape}")
        if not np.all(np.isfinite(self.steps)):
            raise FeatureError(f"segment {self.segment_id!r} has non-finite features")
        if self.label is not None and self.label not in (0, 1, 2):
            raise SchemaError(f"segment {self.segment_id!r}: label {self.label} outside {{0, 1, 2}}")


# ------- filtering -------
def resample(rec: RawRecording, target_hz: float = 200.0) -> RawRecording:
    """Polyphase resampling with the built-in Kaiser anti-alias lowpass."""
    if target_hz >= rec.sample_rate_hz:
        raise UnsupportedError(f"cannot resample {rec.sample_rate_hz} Hz up to {target_hz} Hz")
    ratio = Fraction(target_hz / rec.sample_rate_hz).limit_denominator(10_000)
    samples = resample_poly(rec.samples, ratio.numerator, ratio.denominator, axis=1, window=("kaiser", 5.0))
    return rec.replace(samples=samples, sample_rate_hz=float(target_hz))


def bandpass(rec: RawRecording, lo: float = 0.5, hi: float = 70.0, order: int = 4) -> RawRecording:
    """Zero-phase Butterworth bandpass (forward-backward)."""
    nyquist = rec.sample_rate_hz / 2.0
    if not 0.0 < lo < hi < nyquist:
        raise ParameterError(f"bandpass needs 0 < lo < hi < Nyquist ({nyquist} Hz), got [{lo}, {hi}]")
    sos = butter(order, [lo, hi], btype="bandpass", fs=rec.sample_rate_hz, output="sos")
    return rec.replace(samples=sosfiltfilt(sos, rec.samples, axis=1))


def notch(rec: RawRecording, freq: float = 50.0, q: float = 30.0) -> RawRecording:
    nyquist = rec.sample_rate_hz / 2.0
    if not 0.0 < freq < nyquist:
        raise ParameterError(f"notch frequency {freq} Hz must lie below Nyquist ({nyquist} Hz)")
    if q <= 0:
        raise ParameterError(f"notch quality factor must be positive, got {q}")
    b, a = iirnotch(freq, q, fs=rec.sample_rate_hz)
    return rec.replace(samples=filtfilt(b, a, rec.samples, axis=1))


def normalize(rec: RawRecording) -> RawRecording:
    """Min-max scale the whole recording (all channels jointly) to [-1, 1]."""
    lo, hi = float(rec.samples.min()), float(rec.samples.max())
    if hi == lo:
        raise DegenerateVarianceError(f"recording {rec.name!r} is constant, cannot normalize")
    scaled = np.clip(2.0 * (rec.samples - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    return rec.replace(samples=scaled, normalized=True)


def preprocess(rec: RawRecording, settings: Optional[Settings] = None) -> RawRecording:
    settings = settings or get_settings()
    if rec.sample_rate_hz > settings.target_rate_hz:
        rec = resample(rec, settings.target_rate_hz)
    rec = bandpass(rec, settings.bandpass_low_hz, settings.bandpass_high_hz, settings.filter_order)
    rec = notch(rec, settings.notch_hz, settings.notch_q)
    logger.debug("preprocessed %s: %d channels, %.1f s", rec.name, len(rec.channels), rec.duration_s)
    return normalize(rec)


# ------- segmentation and features -------
def segment(rec: RawRecording, seconds: float = 8.0) -> List[EegSegment]:
    """Consecutive non-overlapping windows; the trailing remainder is dropped."""
    width = int(round(seconds * rec.sample_rate_hz))
    count = rec.samples.shape[1] // width
    return [
        EegSegment(
            data=rec.samples[:, i * width : (i + 1) * width].copy(),
            sample_rate_hz=rec.sample_rate_hz,
            normalized=rec.normalized,
            channels=rec.channels,
            label=rec.label,
            session_id=rec.session_id,
            experiment_id=rec.experiment_id,
            segment_id=f"{rec.name or 'rec'}-{i:04d}",
        )
        for i in range(count)
    ]


def _entropy(variance: np.ndarray) -> np.ndarray:
    return 0.5 * np.log(2.0 * math.pi * math.e * variance)


def differential_entropy(window: Sequence[float]) -> float:
    """1/2 ln(2 pi e sigma^2) with the unbiased sample variance."""
    values = np.asarray(window, dtype=np.float64)
    if values.size < 2:
        raise ParameterError(f"differential entropy needs at least 2 samples, got {values.size}")
    variance = values.var(ddof=1)
    if variance <= 0.0:
        raise DegenerateVarianceError("constant window has zero variance")
    return float(_entropy(variance))


def extract_features(
    seg: EegSegment,
    bands: Optional[Dict[str, Tuple[float, float]]] = None,
    window_seconds: float = 1.0,
    order: int = 4,
) -> FeatureSequence:
    bands = bands or DEFAULT_BANDS
    if not seg.normalized:
        logger.warning("segment %s is not normalized", seg.segment_id)
    fs = seg.sample_rate_hz
    width = int(round(window_seconds * fs))
    n_windows = seg.data.shape[1] // width
    n_channels = seg.data.shape[0]
    per_band = []
    for name, (lo, hi) in bands.items():
        if hi >= fs / 2.0:
            raise ParameterError(f"band {name} upper edge {hi} Hz reaches Nyquist at {fs} Hz")
        sos = butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
        filtered = sosfiltfilt(sos, seg.data, axis=1)[:, : n_windows * width]
        variance = filtered.reshape(n_channels, n_windows, width).var(axis=2, ddof=1)
        if np.any(variance <= 0.0):
            raise FeatureError(f"segment {seg.segment_id}: zero variance in band {name}")
        per_band.append(_entropy(variance))
    # [bands, channels, windows] -> [windows, channels * bands]
    steps = np.stack(per_band).transpose(2, 1, 0).reshape(n_windows, n_channels * len(per_band))
    return FeatureSequence(
        steps=steps,
        label=seg.label,
        segment_id=seg.segment_id,
        session_id=seg.session_id,
        experiment_id=seg.experiment_id,
    )


# ------- CSV contracts -------
def _parse_meta(line: str) -> Dict[str, str]:
    match = _META_LINE.match(line.strip())
    if not match:
        return {}
    return dict(token.split("=", 1) for token in match.group(1).split() if "=" in token)


def read_raw_csv(path: Union[str, Path]) -> RawRecording:
    path = Path(path)
    with path.open() as handle:
        meta = _parse_meta(handle.readline())
        if "sample_rate_hz" not in meta:
            raise SchemaError(f"{path}: first line must be '# sample_rate_hz=<rate>'")
        frame = pd.read_csv(handle)
    label = meta.get("label")
    return RawRecording(
        channels=tuple(frame.columns),
        samples=frame.to_numpy(dtype=np.float64).T.copy(),
        sample_rate_hz=float(meta["sample_rate_hz"]),
        normalized=meta.get("normalized") == "1",
        label=int(label) if label not in (None, "") else None,
        session_id=int(meta.get("session", 0)),
        experiment_id=int(meta.get("experiment", 0)),
        name=meta.get("name", path.stem),
    )


def write_raw_csv(rec: RawRecording, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = [f"sample_rate_hz={rec.sample_rate_hz:g}", f"session={rec.session_id}", f"experiment={rec.experiment_id}", f"name={rec.name}"]
    if rec.label is not None:
        meta.append(f"label={rec.label}")
    if rec.normalized:
        meta.append("normalized=1")
    with path.open("w", newline="") as handle:
        handle.write("# " + " ".join(meta) + "\n")
        pd.DataFrame(rec.samples.T, columns=list(rec.channels)).to_csv(handle, index=False, float_format="%.17g")


FEATURE_COLUMNS = [f"f{i}" for i in range(N_FEATURES)]


def feature_frame(sequences: Iterable[FeatureSequence]) -> pd.DataFrame:
    rows = []
    for seq in sequences:
        for step, values in enumerate(seq.steps):
            rows.append([seq.segment_id, step, *values, seq.label, seq.session_id, seq.experiment_id])
    frame = pd.DataFrame(rows, columns=["segment_id", "step", *FEATURE_COLUMNS, "label", "session", "experiment"])
    frame["label"] = frame["label"].astype("Int64")
    return frame


def write_feature_csv(sequences: Iterable[FeatureSequence], path: Union[str, Path]) -> None:
    """One row per window: segment_id, step, f0..f309, label, session, experiment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feature_frame(sequences).to_csv(path, index=False, float_format="%.17g")
