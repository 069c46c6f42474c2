"""Flat ``key=value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are errors.
Command-line flags override file values. Recognized keys and types:

=================== ======== ==================================================
key                 type     meaning
=================== ======== ==================================================
classes             int      synthetic classes K
channels            int      synthetic channel count C
sample_rate         float    synthetic sample rate (Hz)
trials_per_class    int      synthetic trials per class
trial_seconds       float    synthetic trial length (s)
intensities         floats   comma-separated intensity levels in (0, 1]
noise_std           float    synthetic noise standard deviation
signature_amplitude float    synthetic class-rhythm amplitude at intensity 1
bandpass_low        float    bandpass lower edge (Hz)
bandpass_high       float    bandpass upper edge (Hz)
filter_order        int      Butterworth order
window_seconds      float    feature window length (s)
segment_seconds     float    segment length (s)
welch_subwindow     int      Welch subwindow (samples)
welch_overlap       float    Welch overlap fraction
spatial_dim         int      d_c
temporal_dim        int      d_t
hidden_dim          int      d_h
spatial_heads       int      spatial attention heads
temporal_heads      int      temporal attention heads
layers              int      encoder layers per encoder
attention_window    int      temporal attention window (odd, in windows)
learning_rate       float    optimizer step size
epochs              int      training epochs
batch_size          int      minibatch size
optimizer           str      sgd or adam
folds               int      cross-trial folds
curriculum          bool     on/off
beta                float    history weight in the difficulty score
alpha0              float    initial subset fraction
mu_q0, mu_q1        float    difficulty quantiles for the kernel centre
sigma_frac0/1       float    kernel width as a fraction of difficulty spread
seed                int      master seed
=================== ======== ==================================================
"""

from __future__ import annotations

from .errors import ConfigError


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "on", "yes"):
        return True
    if s in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    if isinstance(v, (tuple, list)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).split(",") if x.strip())


SCHEMA = {
    "classes": int, "channels": int, "sample_rate": float, "trials_per_class": int,
    "trial_seconds": float, "intensities": _floats, "noise_std": float, "signature_amplitude": float,
    "bandpass_low": float, "bandpass_high": float, "filter_order": int, "window_seconds": float,
    "segment_seconds": float, "welch_subwindow": int, "welch_overlap": float,
    "spatial_dim": int, "temporal_dim": int, "hidden_dim": int, "spatial_heads": int,
    "temporal_heads": int, "layers": int, "attention_window": int,
    "learning_rate": float, "epochs": int, "batch_size": int, "optimizer": str, "folds": int,
    "curriculum": _bool, "beta": float, "alpha0": float, "mu_q0": float, "mu_q1": float,
    "sigma_frac0": float, "sigma_frac1": float, "seed": int,
}


def coerce(key, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def parse_config(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def dump_config(values):
    lines = []
    for k, v in values.items():
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "on" if v else "off"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def merge(file_values, overrides):
    """File values updated by non-``None`` overrides."""
    merged = dict(file_values)
    merged.update({k: coerce(k, v) for k, v in overrides.items() if v is not None})
    return merged
