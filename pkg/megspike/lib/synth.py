"""
Synthetic MEG cohorts with known spike timings.

Each patient gets pink (1/f) background noise on every sensor, a shared 10 Hz
rhythm, and ~80 ms biphasic spikes injected at Poisson times. Every spike is
centered on one of the patient's focus sensors and falls off exponentially
with geodesic distance over the helmet.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
from scipy.spatial.distance import pdist

from .common import InvalidArgumentError
from .rng import derive_rng
from .signal import Recording

RICKER_EDGE = 4.0


@dataclass
class SynthConfig:
    """Synthetic cohort parameters; defaults mirror a 95-patient, 9-minute, 274-sensor cohort"""
    n_patients: int = 95
    duration: float = 540.0
    n_sensors: int = 274
    sample_rate: float = 150.0
    # 5.4 spikes/min puts one positive frame in ~80 after framing.
    spike_rate: float = 5.4
    spike_amplitude_snr: float = 4.0
    focal_sigma: float = 0.03
    seed: int = 0
    helmet_radius: float = 0.12
    amplitude_jitter: float = 0.1
    width_jitter: float = 0.1
    max_foci: int = 3
    spike_duration: float = 0.080
    alpha_hz: float = 10.0
    alpha_amplitude: float = 0.5
    min_separation: float = 0.4

    def __post_init__(self):
        positive = ["n_patients", "duration", "n_sensors", "sample_rate", "spike_amplitude_snr",
                    "focal_sigma", "helmet_radius", "max_foci", "spike_duration", "alpha_hz",
                    "min_separation"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"synth config: {name} must be positive, got {getattr(self, name)}")
        if self.n_sensors < 2:
            raise InvalidArgumentError("synth config: n_sensors must be at least 2")
        if self.spike_rate < 0 or self.alpha_amplitude < 0:
            raise InvalidArgumentError("synth config: spike_rate and alpha_amplitude must be non-negative")
        for name in ("amplitude_jitter", "width_jitter"):
            if not 0 <= getattr(self, name) < 1:
                raise InvalidArgumentError(f"synth config: {name} must lie in [0, 1)")
        if self.alpha_hz >= self.sample_rate / 2:
            raise InvalidArgumentError("synth config: background rhythm must be below Nyquist")

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        return asdict(self)


def sensor_layout(n: int, radius: float, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Fibonacci lattice on the upper hemisphere; `rng` only sets the azimuthal offset"""
    if n < 2:
        raise InvalidArgumentError(f"sensor_layout: need at least 2 sensors, got {n}")
    if radius <= 0:
        raise InvalidArgumentError("sensor_layout: radius must be positive")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (i + 0.5) / n
    rho = np.sqrt(1.0 - z * z)
    offset = 0.0 if rng is None else rng.uniform(0.0, 2.0 * math.pi)
    phi = i * math.pi * (3.0 - math.sqrt(5.0)) + offset
    return radius * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def fit_sphere(positions: np.ndarray):
    """Least-squares sphere (center, radius); origin-centered fallback below 4 independent points"""
    p = np.asarray(positions, dtype=np.float64)
    if p.shape[0] >= 4:
        design = np.hstack([2.0 * p, np.ones((p.shape[0], 1))])
        target = (p * p).sum(axis=1)
        solution, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
        if rank == 4:
            center = solution[:3]
            r2 = solution[3] + center @ center
            if r2 > 0:
                return center, math.sqrt(r2)
    center = np.zeros(3)
    return center, float(np.linalg.norm(p, axis=1).mean())


def geodesic_distances(positions: np.ndarray) -> np.ndarray:
    """Great-circle distances (meters) between sensors on their fitted sphere"""
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise InvalidArgumentError(f"geodesic_distances: positions must be n x 3, got {p.shape}")
    n = p.shape[0]
    if n >= 2 and pdist(p).min() <= 1e-12:
        raise InvalidArgumentError("geodesic_distances: coincident sensors")

    center, radius = fit_sphere(p)
    if not radius > 0:
        raise InvalidArgumentError("geodesic_distances: sensors do not define a sphere")
    u = p - center
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    d = radius * np.arccos(np.clip(u @ u.T, -1.0, 1.0))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def spike_waveform(fs: float, duration: float = 0.080) -> np.ndarray:
    """Peak-normalized second derivative of a Gaussian sampled over round(fs*duration) points"""
    if fs * duration < 4:
        raise InvalidArgumentError(f"spike_waveform: fs*duration must be at least 4, got {fs * duration}")
    n = int(round(fs * duration))
    half = (n - 1) / 2.0
    x = (np.arange(n) - half) / (half / RICKER_EDGE)
    w = (1.0 - x * x) * np.exp(-0.5 * x * x)
    return w / w.max()


def pink_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """1/f noise along the last axis, zero mean and unit std per row"""
    n = shape[-1]
    spectrum = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    freqs = np.arange(spectrum.shape[-1], dtype=np.float64)
    freqs[0] = 1.0
    spectrum /= np.sqrt(freqs)
    spectrum[..., 0] = 0.0
    x = np.fft.irfft(spectrum, n=n, axis=-1)
    x -= x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return x / np.where(std > 0, std, 1.0)


def cohort_layout(cfg: SynthConfig) -> np.ndarray:
    """Helmet shared by every patient of a cohort"""
    return sensor_layout(cfg.n_sensors, cfg.helmet_radius, derive_rng(cfg.seed, "layout"))


def _spike_peaks(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Poisson spike times with a dead time of `min_separation` seconds"""
    if cfg.spike_rate == 0:
        return np.zeros(0)
    mean_gap = 60.0 / cfg.spike_rate
    free_gap = max(mean_gap - cfg.min_separation, 1e-3)
    peaks = []
    t = rng.exponential(mean_gap)
    while t < cfg.duration:
        peaks.append(t)
        t += cfg.min_separation + rng.exponential(free_gap)
    return np.asarray(peaks)


def generate_recording(cfg: SynthConfig, patient_index: int,
                       positions: Optional[np.ndarray] = None) -> Recording:
    """One synthetic patient; the random stream is derived from (seed, patient_index)"""
    rng = derive_rng(cfg.seed, "synth", patient_index)
    positions = cohort_layout(cfg) if positions is None else np.asarray(positions, dtype=np.float64)
    distances = geodesic_distances(positions)
    fs = cfg.sample_rate
    ns = cfg.n_sensors
    n_samples = int(round(cfg.duration * fs))

    data = pink_noise((ns, n_samples), rng)
    t = np.arange(n_samples) / fs
    alpha_gain = cfg.alpha_amplitude * rng.uniform(0.5, 1.0, size=ns)
    data += alpha_gain[:, None] * np.sin(2.0 * math.pi * cfg.alpha_hz * t + rng.uniform(0, 2 * math.pi))[None, :]
    background_std = data.std(axis=1)

    n_foci = int(rng.integers(1, cfg.max_foci + 1))
    foci = rng.choice(ns, size=min(n_foci, ns), replace=False)

    spike_times: List[float] = []
    for peak in _spike_peaks(cfg, rng):
        focus = int(foci[rng.integers(foci.size)])
        width = cfg.spike_duration * (1.0 + rng.uniform(-cfg.width_jitter, cfg.width_jitter))
        amplitude = cfg.spike_amplitude_snr * background_std[focus] * \
            (1.0 + rng.uniform(-cfg.amplitude_jitter, cfg.amplitude_jitter))
        waveform = spike_waveform(fs, max(width, 4.0 / fs))
        half = (waveform.size - 1) / 2.0
        onset = int(math.floor(peak * fs - half + 0.5))
        if onset < 0 or onset + waveform.size > n_samples:
            continue
        centre = (onset + half) / fs
        if spike_times and centre - spike_times[-1] < cfg.min_separation:
            continue
        gain = np.exp(-distances[focus] / cfg.focal_sigma)
        data[:, onset:onset + waveform.size] += amplitude * gain[:, None] * waveform[None, :]
        spike_times.append(centre)

    return Recording(
        patient_id=f"synth-{patient_index:03d}",
        sample_rate=fs,
        data=data.astype(np.float32),
        sensor_positions=positions,
        spike_times=np.asarray(spike_times),
    )


def iter_cohort(cfg: SynthConfig) -> Iterator[Recording]:
    """Recordings synth-000, synth-001, ... generated one at a time on a shared layout"""
    positions = cohort_layout(cfg)
    for i in range(cfg.n_patients):
        yield generate_recording(cfg, i, positions)


def generate_cohort(cfg: SynthConfig) -> List[Recording]:
    """`n_patients` independent recordings named synth-000, synth-001, ..."""
    return list(iter_cohort(cfg))
