#!/usr/bin/env python3
"""
Unit tests for the synthetic cohort generator
"""

import dataclasses
import math
import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from megspike.lib.common import InvalidArgumentError
from megspike.lib.rng import derive_rng, derive_seed
from megspike.lib.signal import extract_frames, preprocess_recording
from megspike.lib.synth import (
    SynthConfig,
    generate_cohort,
    generate_recording,
    geodesic_distances,
    pink_noise,
    sensor_layout,
    spike_waveform,
)


def _small(**overrides):
    base = dict(n_patients=3, duration=20.0, n_sensors=8, seed=5)
    base.update(overrides)
    return SynthConfig(**base)


class TestRandomStreams(unittest.TestCase):
    """Test seeded stream derivation"""

    def test_same_keys_same_stream(self):
        """Test equal seeds and keys reproduce the draws"""
        a = derive_rng(3, "synth", 7).standard_normal(5)
        b = derive_rng(3, "synth", 7).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_keys_separate_streams(self):
        """Test different purposes or coordinates give different draws"""
        a = derive_rng(3, "synth", 7).standard_normal(5)
        self.assertFalse(np.array_equal(a, derive_rng(3, "synth", 8).standard_normal(5)))
        self.assertFalse(np.array_equal(a, derive_rng(3, "plan", 7).standard_normal(5)))
        self.assertFalse(np.array_equal(a, derive_rng(4, "synth", 7).standard_normal(5)))

    def test_derived_seed_range(self):
        """Test derived seeds are stable non-negative 63-bit integers"""
        s = derive_seed(0, "train", 1, 2)
        self.assertEqual(s, derive_seed(0, "train", 1, 2))
        self.assertGreaterEqual(s, 0)
        self.assertLess(s, 1 << 63)

    def test_negative_key_rejected(self):
        """Test negative integer keys are rejected"""
        with self.assertRaises(ValueError):
            derive_rng(0, -1)


class TestGeometry(unittest.TestCase):
    """Test helmet layout and geodesic distances"""

    def test_layout_on_upper_hemisphere(self):
        """Test 274 sensors sit at radius 0.1 with z >= 0"""
        p = sensor_layout(274, 0.1)
        self.assertEqual(p.shape, (274, 3))
        np.testing.assert_allclose(np.linalg.norm(p, axis=1), 0.1, rtol=1e-12)
        self.assertTrue(np.all(p[:, 2] >= 0))

    def test_two_point_layout(self):
        """Test a two-sensor layout keeps the radius"""
        np.testing.assert_allclose(np.linalg.norm(sensor_layout(2, 0.12), axis=1), 0.12)

    def test_quarter_circle(self):
        """Test sensors 90 degrees apart are pi r / 2 apart"""
        d = geodesic_distances(np.array([[0.1, 0.0, 0.0], [0.0, 0.1, 0.0]]))
        self.assertAlmostEqual(d[0, 1], math.pi * 0.1 / 2, places=12)
        self.assertEqual(d[0, 0], 0.0)

    def test_distance_matrix_properties(self):
        """Test symmetric, zero diagonal, positive off-diagonal"""
        d = geodesic_distances(sensor_layout(30, 0.12, np.random.default_rng(0)))
        np.testing.assert_array_equal(d, d.T)
        self.assertFalse(np.diag(d).any())
        self.assertTrue(np.all(d[~np.eye(30, dtype=bool)] > 0))

    def test_triangle_inequality(self):
        """Test d(i, k) <= d(i, j) + d(j, k) for every triple of sensors"""
        d = geodesic_distances(sensor_layout(30, 0.12, np.random.default_rng(1)))
        through = d[:, :, None] + d[None, :, :]
        self.assertTrue(np.all(d[:, None, :] <= through + 1e-9))

    def test_coincident_sensors(self):
        """Test duplicate positions are rejected"""
        with self.assertRaises(InvalidArgumentError):
            geodesic_distances(np.array([[0.1, 0, 0], [0.1, 0, 0], [0, 0.1, 0]]))


class TestWaveforms(unittest.TestCase):
    """Test spike waveform and background noise"""

    def test_spike_waveform(self):
        """Test 80 ms at 150 Hz gives 12 symmetric, peak-normalized, near zero-sum samples"""
        w = spike_waveform(150.0, 0.080)
        self.assertEqual(w.size, 12)
        np.testing.assert_allclose(w, w[::-1])
        self.assertAlmostEqual(float(w.max()), 1.0)
        self.assertLess(abs(float(w.sum())), 0.05 * float(np.abs(w).sum()))

    def test_waveform_too_short(self):
        """Test fewer than 4 samples are rejected"""
        with self.assertRaises(InvalidArgumentError):
            spike_waveform(30.0, 0.08)

    def test_pink_noise_normalized(self):
        """Test rows have zero mean and unit std"""
        x = pink_noise((3, 4096), np.random.default_rng(1))
        np.testing.assert_allclose(x.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(x.std(axis=1), 1.0, rtol=1e-12)

    def test_pink_noise_spectrum_falls(self):
        """Test low frequencies carry more power than high ones"""
        x = pink_noise((16, 4096), np.random.default_rng(2))
        power = (np.abs(np.fft.rfft(x, axis=1)) ** 2).mean(axis=0)
        self.assertGreater(power[5:20].mean(), 10 * power[1000:1500].mean())


class TestCohort(unittest.TestCase):
    """Test synthetic recordings"""

    def test_ids_and_shapes(self):
        """Test patient ids, sample counts and dtype"""
        cohort = generate_cohort(_small())
        self.assertEqual([r.patient_id for r in cohort], ["synth-000", "synth-001", "synth-002"])
        for rec in cohort:
            self.assertEqual(rec.data.shape, (8, 3000))
            self.assertEqual(rec.data.dtype, np.float32)
            self.assertEqual(rec.sample_rate, 150.0)

    def test_shared_helmet(self):
        """Test every patient uses the same sensor positions"""
        cohort = generate_cohort(_small())
        for rec in cohort[1:]:
            np.testing.assert_array_equal(rec.sensor_positions, cohort[0].sensor_positions)

    def test_deterministic(self):
        """Test identical configs give bit-identical recordings"""
        a = generate_recording(_small(), 1)
        b = generate_recording(_small(), 1)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.spike_times, b.spike_times)

    def test_patients_differ(self):
        """Test each patient draws its own stream"""
        cohort = generate_cohort(_small())
        self.assertFalse(np.array_equal(cohort[0].data, cohort[1].data))

    def test_zero_rate_has_no_spikes(self):
        """Test spike_rate = 0 yields an unannotated recording"""
        self.assertEqual(generate_recording(_small(spike_rate=0.0), 0).spike_times.size, 0)

    def test_spike_spacing(self):
        """Test spikes are sorted, inside the recording and at least min_separation apart"""
        rec = generate_recording(_small(duration=120.0, spike_rate=20.0), 0)
        self.assertGreater(rec.spike_times.size, 10)
        self.assertTrue(np.all(np.diff(rec.spike_times) >= 0.4 - 1e-9))
        self.assertLess(rec.spike_times[-1], rec.duration)

    def test_spike_amplitude_matches_snr(self):
        """Test the injected peak at the focus is snr x background std within 20%"""
        cfg = _small(duration=60.0, spike_rate=10.0, spike_amplitude_snr=6.0)
        rec = generate_recording(cfg, 0)
        background = generate_recording(dataclasses.replace(cfg, spike_rate=0.0), 0)
        injected = rec.data.astype(np.float64) - background.data
        std = background.data.astype(np.float64).std(axis=1)
        self.assertGreater(rec.spike_times.size, 3)
        for t in rec.spike_times:
            centre = int(round(t * 150))
            window = np.abs(injected[:, max(centre - 8, 0):centre + 8])
            sensor = int(window.max(axis=1).argmax())
            ratio = window[sensor].max() / std[sensor]
            self.assertAlmostEqual(ratio / 6.0, 1.0, delta=0.2)

    def test_spikes_are_focal(self):
        """Test the injected field decays away from the focus"""
        cfg = _small(n_sensors=40, duration=30.0, spike_rate=10.0, focal_sigma=0.02)
        rec = generate_recording(cfg, 0)
        injected = rec.data.astype(np.float64) - generate_recording(dataclasses.replace(cfg, spike_rate=0.0), 0).data
        centre = int(round(rec.spike_times[0] * 150))
        peak = np.abs(injected[:, max(centre - 8, 0):centre + 8]).max(axis=1)
        d = geodesic_distances(rec.sensor_positions)[int(peak.argmax())]
        self.assertLess(peak[d > 0.1].max(), 0.05 * peak.max())

    def test_positive_frame_fraction(self):
        """Test default spike rate gives between 1/160 and 1/40 positive frames"""
        cfg = SynthConfig(n_patients=2, n_sensors=4, seed=0)
        frames = [extract_frames(generate_recording(cfg, i)) for i in range(2)]
        positives = sum(f.n_positive for f in frames)
        total = sum(len(f) for f in frames)
        self.assertEqual(total, 2 * 3856)
        self.assertGreaterEqual(positives / total, 1 / 160)
        self.assertLessEqual(positives / total, 1 / 40)

    def test_spikes_label_frames_after_preprocessing(self):
        """Test a 600 Hz recording framed at 150 Hz labels every frame holding a spike in its interior"""
        cfg = _small(n_patients=1, duration=30.0, n_sensors=4, sample_rate=600.0, spike_rate=20.0, seed=9)
        rec = generate_recording(cfg, 0)
        frames = extract_frames(preprocess_recording(rec))
        self.assertGreater(rec.spike_times.size, 0)
        starts = frames.start_times
        ends = starts + 0.2
        for t in rec.spike_times:
            inside = (starts + 0.03 <= t + 1e-9) & (t <= ends - 0.03 + 1e-9)
            self.assertTrue(np.all(frames.labels[inside] == 1))
            if t <= starts[-1] + 0.17:
                self.assertTrue(inside.any())
        holds_spike = [np.any((s + 0.03 - 1e-9 <= rec.spike_times) & (rec.spike_times <= e - 0.03 + 1e-9))
                       for s, e in zip(starts, ends)]
        np.testing.assert_array_equal(frames.labels.astype(bool), holds_spike)

    def test_invalid_config(self):
        """Test out-of-range parameters are rejected"""
        with self.assertRaises(InvalidArgumentError):
            SynthConfig(n_sensors=1)
        with self.assertRaises(InvalidArgumentError):
            SynthConfig(spike_rate=-1)
        with self.assertRaises(InvalidArgumentError):
            SynthConfig(amplitude_jitter=1.0)


if __name__ == '__main__':
    unittest.main()
