"""Raw multichannel EEG to differential-entropy feature segments.

Stages: common average reference, zero-phase Butterworth bandpass,
segmentation into fixed-length segments of contiguous windows, Welch PSD per
window, and per-band differential entropy ``0.5 * ln(2*pi*e*var)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-10


@dataclass(frozen=True)
class BandSpec:
    name: str
    low: float
    high: float

    def validate(self, nyquist):
        if not 0 <= self.low < self.high <= nyquist:
            raise ConfigError(f"band {self.name}: need 0 <= low < high <= {nyquist}, got {self.low}-{self.high}")


DEFAULT_BANDS = (
    BandSpec("delta", 0.5, 4.0),
    BandSpec("theta", 4.0, 8.0),
    BandSpec("alpha", 8.0, 13.0),
    BandSpec("beta", 13.0, 30.0),
    BandSpec("gamma", 30.0, 48.0),
)


@dataclass
class RawRecording:
    data: np.ndarray  # (C, T_raw) float32
    sample_rate: float
    trial_id: int = 0
    label: int = 0
    intensity: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ConfigError(f"recording data must be (channels, samples), got {self.data.shape}")
        if not self.sample_rate > 0:
            raise ConfigError("sample_rate must be positive")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def samples(self):
        return self.data.shape[1]

    def with_data(self, data):
        return replace(self, data=data)


@dataclass
class FeatureSegment:
    features: np.ndarray  # (T, C, B) DE values in nats
    label: int
    trial_id: int
    intensity: float = 1.0
    floored: bool = False

    @property
    def shape(self):
        return self.features.shape


@dataclass(frozen=True)
class PreprocessConfig:
    bandpass_low: float = 0.5
    bandpass_high: float = 48.0
    filter_order: int = 4
    window_seconds: float = 0.5
    segment_seconds: float = 3.0
    welch_subwindow: int | None = None  # samples; default half a window
    welch_overlap: float = 0.5
    welch_nfft: int | None = None  # default: max(subwindow, sample_rate), i.e. <= 1 Hz bins
    bands: tuple = field(default=DEFAULT_BANDS)

    def __post_init__(self):
        if not 0 <= self.welch_overlap < 1:
            raise ConfigError("welch_overlap must lie in [0, 1)")
        if self.window_seconds <= 0 or self.segment_seconds <= 0:
            raise ConfigError("window and segment lengths must be positive")
        ratio = self.segment_seconds / self.window_seconds
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("segment_seconds must be an integer multiple of window_seconds")
        if self.filter_order < 1:
            raise ConfigError("filter_order must be >= 1")
        if not 0 < self.bandpass_low < self.bandpass_high:
            raise ConfigError("need 0 < bandpass_low < bandpass_high")

    @property
    def windows_per_segment(self):
        return int(round(self.segment_seconds / self.window_seconds))

    def window_samples(self, rate):
        return int(round(self.window_seconds * rate))

    def segment_samples(self, rate):
        return self.window_samples(rate) * self.windows_per_segment

    def subwindow(self, rate):
        return self.welch_subwindow or max(self.window_samples(rate) // 2, 1)

    def nfft(self, rate):
        if self.welch_nfft:
            return self.welch_nfft
        return max(self.subwindow(rate), int(math.ceil(rate)))


def common_average_reference(rec: RawRecording) -> RawRecording:
    """Subtract the across-channel mean at every sample."""
    if rec.channels < 2:
        raise ConfigError("common average reference needs at least 2 channels")
    x = rec.data.astype(np.float64)
    out = x - x.mean(axis=0, keepdims=True)
    return rec.with_data(out.astype(np.float32))


def design_bandpass(low, high, rate, order=4):
    """Butterworth bandpass as second-order sections (bilinear transform)."""
    nyq = rate / 2.0
    if high >= nyq:
        raise ConfigError(f"bandpass upper edge {high} Hz is not below Nyquist {nyq} Hz")
    if not 0 < low < high:
        raise ConfigError("bandpass edges must satisfy 0 < low < high")
    sos = sps.butter(order, [low, high], btype="bandpass", fs=rate, output="sos")
    poles = np.concatenate([np.roots(s[3:]) for s in sos])
    if np.any(np.abs(poles) >= 1.0):
        raise NumericError("bandpass design produced an unstable section")
    return sos


def butterworth_bandpass(rec: RawRecording, cfg: PreprocessConfig) -> RawRecording:
    """Zero-phase (forward-backward) bandpass of every channel."""
    sos = design_bandpass(cfg.bandpass_low, cfg.bandpass_high, rec.sample_rate, cfg.filter_order)
    y = sps.sosfiltfilt(sos, rec.data.astype(np.float64), axis=-1)
    if not np.all(np.isfinite(y)):
        raise NumericError("bandpass output is not finite")
    return rec.with_data(y.astype(np.float32))


def segment_windows(rec: RawRecording, cfg: PreprocessConfig):
    """Split into non-overlapping segments of contiguous windows.

    Returns a list of arrays shaped ``(T, C, window_samples)``; the trailing
    partial segment is dropped.
    """
    win = cfg.window_samples(rec.sample_rate)
    seg_len = cfg.segment_samples(rec.sample_rate)
    count = rec.samples // seg_len
    out = []
    for i in range(count):
        block = rec.data[:, i * seg_len:(i + 1) * seg_len]
        out.append(block.reshape(rec.channels, cfg.windows_per_segment, win).transpose(1, 0, 2))
    return out


def welch_psd(window_data, sample_rate, cfg: PreprocessConfig):
    """One-sided Welch PSD with a Hann taper; returns ``(freqs, psd)``.

    Scaled as a density so that ``psd.sum() * df`` approximates the variance.
    Subwindows are not detrended: input is expected to be bandpassed already,
    and removing each short subwindow's mean would bias the power low.
    """
    x = np.asarray(window_data, dtype=np.float64)
    n = x.shape[-1]
    sub = cfg.subwindow(sample_rate)
    if sub > n:
        raise ConfigError(f"Welch subwindow {sub} is longer than the data ({n} samples)")
    nfft = max(cfg.nfft(sample_rate), sub)
    overlap = int(round(sub * cfg.welch_overlap))
    return sps.welch(x, fs=sample_rate, window="hann", nperseg=sub, noverlap=overlap,
                     nfft=nfft, detrend=False, scaling="density", axis=-1)


def band_variances(freqs, psd, bands, sample_rate):
    """Integrate the PSD over ``[low, high)`` per band; ``(.., B)``."""
    df = freqs[1] - freqs[0]
    nyq = sample_rate / 2.0
    out = []
    for band in bands:
        band.validate(nyq)
        sel = (freqs >= band.low) & (freqs < band.high)
        if band.high >= nyq:
            sel |= np.isclose(freqs, nyq)
        if not sel.any():
            raise ConfigError(f"band {band.name} contains no PSD bin (df = {df:.3f} Hz)")
        out.append(psd[..., sel].sum(axis=-1) * df)
    return np.stack(out, axis=-1)


def differential_entropy(freqs, psd, bands, sample_rate):
    """Per-band DE in nats; returns ``(de, floored)``.

    Band variances at or below 1e-10 are raised to that floor before the log
    and reported through the boolean ``floored`` flag.
    """
    var = band_variances(freqs, psd, bands, sample_rate)
    floored = bool(np.any(var <= VARIANCE_FLOOR))
    if floored:
        log.warning("band variance below %g clamped before log", VARIANCE_FLOOR)
    var = np.maximum(var, VARIANCE_FLOOR)
    return 0.5 * np.log(2 * np.pi * np.e * var), floored


def de_closed_form(variance):
    return 0.5 * np.log(2 * np.pi * np.e * np.asarray(variance, dtype=np.float64))


def preprocess(rec: RawRecording, cfg: PreprocessConfig) -> RawRecording:
    return butterworth_bandpass(common_average_reference(rec), cfg)


def extract_features(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()):
    """Full pipeline: returns one :class:`FeatureSegment` per complete segment."""
    clean = preprocess(rec, cfg)
    segments = []
    for block in segment_windows(clean, cfg):
        freqs, psd = welch_psd(block, clean.sample_rate, cfg)
        de, floored = differential_entropy(freqs, psd, cfg.bands, clean.sample_rate)
        segments.append(FeatureSegment(
            features=de.astype(np.float32), label=rec.label, trial_id=rec.trial_id,
            intensity=rec.intensity, floored=floored))
    return segments
