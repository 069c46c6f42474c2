"""Synthetic multichannel EEG with class signatures of controllable intensity.

Every channel carries white Gaussian noise plus a shared-frequency alpha
rhythm (10 Hz, random phase per channel). Class ``c`` adds a sinusoid at a
class-specific frequency on a contiguous block of channels, scaled by the
trial's intensity, so low-intensity trials are harder to tell apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .signal import DEFAULT_BANDS, RawRecording

# (frequency Hz, band index into DEFAULT_BANDS) per class, cycled when K > 5
CLASS_RHYTHMS = ((6.0, 1), (20.0, 3), (40.0, 4), (2.0, 0), (24.0, 3))
BASELINE_HZ = 10.0
BASELINE_BAND = 2


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 3
    channels: int = 8
    sample_rate: float = 200.0
    trials_per_class: int = 10
    trial_seconds: float = 12.0
    intensities: tuple = (0.9,)
    noise_std: float = 1.0
    signature_amplitude: float = 0.8
    baseline_amplitude: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("synthetic data needs at least 2 classes")
        if self.channels < self.classes:
            raise ConfigError("need at least one channel per class")
        if not self.intensities or any(not 0 < i <= 1 for i in self.intensities):
            raise ConfigError("intensities must lie in (0, 1]")
        if self.noise_std < 0 or self.sample_rate <= 0 or self.trial_seconds <= 0:
            raise ConfigError("noise_std, sample_rate and trial_seconds must be positive")
        if self.trials_per_class < 1:
            raise ConfigError("trials_per_class must be >= 1")
        if max(f for f, _ in CLASS_RHYTHMS[:self.classes]) >= self.sample_rate / 2:
            raise ConfigError("sample rate too low for the class rhythms")


def class_channels(spec: SyntheticSpec, label: int):
    return np.array_split(np.arange(spec.channels), spec.classes)[label]


def class_rhythm(label: int):
    return CLASS_RHYTHMS[label % len(CLASS_RHYTHMS)]


def trial_intensities(spec: SyntheticSpec):
    """Intensity of each trial per class, cycling through ``spec.intensities``."""
    levels = spec.intensities
    return [levels[i % len(levels)] for i in range(spec.trials_per_class)]


def band_power_targets(spec: SyntheticSpec, label: int, intensity: float):
    """Noise-free power per (channel, band) for one trial, ``(C, B)``."""
    out = np.zeros((spec.channels, len(DEFAULT_BANDS)))
    out[:, BASELINE_BAND] += spec.baseline_amplitude ** 2 / 2
    freq, band = class_rhythm(label)
    amp = intensity * spec.signature_amplitude
    out[class_channels(spec, label), band] += amp ** 2 / 2
    return out


def generate_synthetic(spec: SyntheticSpec):
    """Recordings ordered by trial id; labels cycle so classes interleave."""
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.trial_seconds * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    levels = trial_intensities(spec)
    recordings = []
    trial_id = 0
    for rep in range(spec.trials_per_class):
        for label in range(spec.classes):
            intensity = float(levels[rep])
            x = spec.noise_std * rng.standard_normal((spec.channels, n))
            phases = rng.uniform(0, 2 * np.pi, size=spec.channels)
            x += spec.baseline_amplitude * np.sin(2 * np.pi * BASELINE_HZ * t[None, :] + phases[:, None])
            freq, _ = class_rhythm(label)
            chans = class_channels(spec, label)
            sig_phases = rng.uniform(0, 2 * np.pi, size=len(chans))
            amp = intensity * spec.signature_amplitude
            x[chans] += amp * np.sin(2 * np.pi * freq * t[None, :] + sig_phases[:, None])
            recordings.append(RawRecording(x.astype(np.float32), spec.sample_rate, trial_id, label, intensity))
            trial_id += 1
    return recordings
