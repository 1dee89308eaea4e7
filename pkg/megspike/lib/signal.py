"""
MEG recording preprocessing: bandpass filtering, resampling, framing and
border-aware spike labeling.
"""

import math
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

from .common import InvalidArgumentError

TARGET_RATE_HZ = 150.0
BANDPASS_LOW_HZ = 0.5
BANDPASS_HIGH_HZ = 50.0
FILTER_ORDER = 4
FRAME_DURATION_S = 0.200
FRAME_OVERLAP_S = 0.060
BORDER_S = 0.030
FRAME_SAMPLES = 30
HOP_SAMPLES = 21
MAX_RATIO_DENOMINATOR = 1000
# Absorbs float error when a spike sits exactly on the 30 ms border.
_TIME_TOL = 1e-9


@dataclass
class Recording:
    """One patient's multichannel signal with sensor geometry and spike annotations"""
    patient_id: str
    sample_rate: float
    data: np.ndarray
    sensor_positions: np.ndarray
    spike_times: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.sensor_positions = np.asarray(self.sensor_positions, dtype=np.float64)
        self.spike_times = np.asarray(self.spike_times, dtype=np.float64).reshape(-1)
        self.sample_rate = float(self.sample_rate)

        if self.sample_rate <= 0:
            raise InvalidArgumentError(f"{self.patient_id}: sample rate must be positive")
        if self.data.ndim != 2:
            raise InvalidArgumentError(f"{self.patient_id}: data must be ns x T, got {self.data.shape}")
        if self.n_sensors < 2:
            raise InvalidArgumentError(f"{self.patient_id}: at least 2 sensors required")
        if self.sensor_positions.shape != (self.n_sensors, 3):
            raise InvalidArgumentError(
                f"{self.patient_id}: sensor positions {self.sensor_positions.shape} do not match {self.n_sensors} sensors")
        if self.spike_times.size:
            if np.any(np.diff(self.spike_times) < 0):
                raise InvalidArgumentError(f"{self.patient_id}: spike times must be sorted")
            if self.spike_times[0] < 0 or self.spike_times[-1] >= self.duration:
                raise InvalidArgumentError(f"{self.patient_id}: spike times must lie within [0, {self.duration})")

    @property
    def n_sensors(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[1])

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def replace_data(self, data: np.ndarray, sample_rate: Optional[float] = None,
                     spike_times: Optional[np.ndarray] = None) -> "Recording":
        return Recording(
            patient_id=self.patient_id,
            sample_rate=self.sample_rate if sample_rate is None else sample_rate,
            data=data,
            sensor_positions=self.sensor_positions,
            spike_times=self.spike_times if spike_times is None else spike_times,
        )


@dataclass
class Frame:
    """A labeled ns x nt window of a recording"""
    data: np.ndarray
    label: int
    patient_id: str
    start_time: float


class FrameSet(SequenceABC):
    """
    Columnar collection of frames that behaves as a sequence of ``Frame``.

    ``data`` is (n_frames, ns, nt) float32. Frames produced by
    ``extract_frames`` are a strided view over the recording, so nothing is
    copied until a subset is taken.
    """

    def __init__(self, data: np.ndarray, labels: np.ndarray,
                 patient_ids: Union[np.ndarray, Sequence[str]], start_times: np.ndarray):
        self.data = np.asarray(data, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
        self.patient_ids = np.asarray(list(patient_ids) if not isinstance(patient_ids, np.ndarray) else patient_ids,
                                      dtype=str).reshape(-1)
        self.start_times = np.asarray(start_times, dtype=np.float64).reshape(-1)
        n = self.data.shape[0] if self.data.ndim == 3 else -1
        if self.data.ndim != 3 or not (n == self.labels.size == self.patient_ids.size == self.start_times.size):
            raise InvalidArgumentError(
                f"frame set columns disagree: data {self.data.shape}, labels {self.labels.size}, "
                f"ids {self.patient_ids.size}, starts {self.start_times.size}")

    @classmethod
    def empty(cls, ns: int, nt: int = FRAME_SAMPLES) -> "FrameSet":
        return cls(np.zeros((0, ns, nt), dtype=np.float32), np.zeros(0, dtype=np.uint8),
                   np.zeros(0, dtype=str), np.zeros(0))

    @classmethod
    def from_frames(cls, frames: Iterable[Frame], ns: Optional[int] = None,
                    nt: int = FRAME_SAMPLES) -> "FrameSet":
        frames = list(frames)
        if not frames:
            if ns is None:
                raise InvalidArgumentError("from_frames: ns is required for an empty frame list")
            return cls.empty(ns, nt)
        return cls(np.stack([np.asarray(f.data, dtype=np.float32) for f in frames]),
                   np.array([f.label for f in frames]),
                   [f.patient_id for f in frames],
                   np.array([f.start_time for f in frames]))

    @classmethod
    def concat(cls, sets: Sequence["FrameSet"]) -> "FrameSet":
        sets = list(sets)
        if not sets:
            raise InvalidArgumentError("concat: nothing to concatenate")
        if len({s.shape_per_frame for s in sets}) != 1:
            raise InvalidArgumentError("concat: frame shapes differ")
        return cls(np.concatenate([s.data for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   np.concatenate([s.patient_ids for s in sets]),
                   np.concatenate([s.start_times for s in sets]))

    @property
    def shape_per_frame(self):
        return tuple(self.data.shape[1:])

    @property
    def n_sensors(self) -> int:
        return int(self.data.shape[1])

    @property
    def n_times(self) -> int:
        return int(self.data.shape[2])

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive

    def __len__(self) -> int:
        return int(self.labels.size)

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            i = int(index)
            return Frame(self.data[i], int(self.labels[i]), str(self.patient_ids[i]), float(self.start_times[i]))
        return self.subset(np.arange(len(self))[index])

    def subset(self, indices) -> "FrameSet":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return FrameSet(self.data[idx], self.labels[idx], self.patient_ids[idx], self.start_times[idx])

    def for_patients(self, patient_ids: Iterable[str]) -> "FrameSet":
        mask = np.isin(self.patient_ids, list(patient_ids))
        return self.subset(np.flatnonzero(mask))

    def patients(self) -> List[str]:
        return sorted(set(self.patient_ids.tolist()))


class FramePool:
    """Several frame sets addressed through one global index without concatenating their data"""

    def __init__(self, parts: Sequence[FrameSet]):
        self.parts = list(parts)
        if not self.parts:
            raise InvalidArgumentError("frame pool: at least one frame set is required")
        if len({p.shape_per_frame for p in self.parts}) != 1:
            raise InvalidArgumentError("frame pool: frame shapes differ")
        self.offsets = np.concatenate([[0], np.cumsum([len(p) for p in self.parts])]).astype(np.int64)
        self.labels = np.concatenate([p.labels for p in self.parts])

    def __len__(self) -> int:
        return int(self.offsets[-1])

    @property
    def shape_per_frame(self):
        return self.parts[0].shape_per_frame

    @property
    def n_sensors(self) -> int:
        return self.parts[0].n_sensors

    def take(self, indices) -> FrameSet:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise InvalidArgumentError(f"frame pool: index out of range for {len(self)} frames")
        owner = np.searchsorted(self.offsets, idx, side="right") - 1
        data = np.empty((idx.size,) + self.shape_per_frame, dtype=np.float32)
        ids = np.empty(idx.size, dtype=object)
        starts = np.empty(idx.size, dtype=np.float64)
        for k in np.unique(owner):
            sel = np.flatnonzero(owner == k)
            local = idx[sel] - self.offsets[k]
            part = self.parts[k]
            data[sel] = part.data[local]
            ids[sel] = part.patient_ids[local]
            starts[sel] = part.start_times[local]
        return FrameSet(data, self.labels[idx], ids, starts)


def bandpass(rec: Recording, low: float = BANDPASS_LOW_HZ, high: float = BANDPASS_HIGH_HZ,
             order: int = FILTER_ORDER) -> Recording:
    """Zero-phase (forward-backward) Butterworth bandpass applied to every sensor"""
    nyquist = rec.sample_rate / 2.0
    if not 0 < low < high:
        raise InvalidArgumentError(f"bandpass: need 0 < low < high, got {low}, {high}")
    if high >= nyquist:
        raise InvalidArgumentError(f"bandpass: high cutoff {high} Hz must be below Nyquist {nyquist} Hz")
    sos = sps.butter(order, [low, high], btype="bandpass", fs=rec.sample_rate, output="sos")
    filtered = sps.sosfiltfilt(sos, np.asarray(rec.data, dtype=np.float64), axis=1)
    return rec.replace_data(filtered)


def resampling_ratio(source: float, target: float) -> Fraction:
    ratio = Fraction(target).limit_denominator(10 ** 6) / Fraction(source).limit_denominator(10 ** 6)
    if abs(float(ratio) - target / source) > 1e-12 or ratio.denominator > MAX_RATIO_DENOMINATOR \
            or ratio.numerator > MAX_RATIO_DENOMINATOR:
        raise InvalidArgumentError(f"resample: unsupported ratio {target}/{source}")
    return ratio


def resample(rec: Recording, target: float = TARGET_RATE_HZ) -> Recording:
    """Polyphase windowed-sinc resampling to `target` Hz; spike times (seconds) are kept"""
    if target <= 0 or target > rec.sample_rate:
        raise InvalidArgumentError(f"resample: target {target} Hz must be in (0, {rec.sample_rate}]")
    if target == rec.sample_rate:
        return rec
    ratio = resampling_ratio(rec.sample_rate, target)
    n_out = int(math.floor(rec.n_samples * target / rec.sample_rate + 0.5))
    data = sps.resample_poly(np.asarray(rec.data, dtype=np.float64), ratio.numerator, ratio.denominator,
                             axis=1, window=("kaiser", 5.0))[:, :n_out]
    spikes = rec.spike_times[rec.spike_times < n_out / target]
    return rec.replace_data(data, sample_rate=target, spike_times=spikes)


def preprocess_recording(rec: Recording, low: float = BANDPASS_LOW_HZ, high: float = BANDPASS_HIGH_HZ,
                         target: float = TARGET_RATE_HZ) -> Recording:
    """Filter at the native rate, then resample, then store as float32"""
    out = resample(bandpass(rec, low, high), target)
    return out.replace_data(np.asarray(out.data, dtype=np.float32))


def label_frame(start: float, end: float, spike_times: Sequence[float], border: float = BORDER_S) -> int:
    """1 iff some spike lies at least `border` seconds from both frame borders (inclusive)"""
    lo = start + border - _TIME_TOL
    hi = end - border + _TIME_TOL
    return int(any(lo <= t <= hi for t in spike_times))


def frame_geometry(sample_rate: float, frame_duration: float = FRAME_DURATION_S,
                   overlap: float = FRAME_OVERLAP_S):
    """(frame length, hop) in samples; (30, 21) at 150 Hz"""
    length = int(round(frame_duration * sample_rate))
    hop = length - int(round(overlap * sample_rate))
    if length < 1 or hop < 1:
        raise InvalidArgumentError(f"frame geometry degenerate at {sample_rate} Hz")
    return length, hop


def frame_starts(n_samples: int, length: int, hop: int) -> np.ndarray:
    if n_samples < length:
        return np.zeros(0, dtype=np.int64)
    return np.arange((n_samples - length) // hop + 1, dtype=np.int64) * hop


def extract_frames(rec: Recording, frame_duration: float = FRAME_DURATION_S,
                   overlap: float = FRAME_OVERLAP_S, border: float = BORDER_S) -> FrameSet:
    """
    Cut a recording into overlapping frames and label each one.

    At 150 Hz frames are 30 samples long and start every 21 samples; an
    incomplete trailing window is discarded.
    """
    length, hop = frame_geometry(rec.sample_rate, frame_duration, overlap)
    starts = frame_starts(rec.n_samples, length, hop)
    if starts.size == 0:
        return FrameSet.empty(rec.n_sensors, length)

    data = np.asarray(rec.data, dtype=np.float32)
    windows = sliding_window_view(data, length, axis=1)[:, ::hop, :][:, :starts.size, :]
    frames = windows.transpose(1, 0, 2)

    start_times = starts / rec.sample_rate
    end_times = start_times + length / rec.sample_rate
    lo = start_times + border - _TIME_TOL
    hi = end_times - border + _TIME_TOL
    spikes = rec.spike_times
    first = np.searchsorted(spikes, lo, side="left")
    last = np.searchsorted(spikes, hi, side="right")
    labels = (last > first).astype(np.uint8)

    return FrameSet(frames, labels, np.full(starts.size, rec.patient_id), start_times)
