"""Spatial-temporal transformer over differential-entropy feature segments.

Data flow for a batch of N segments shaped ``(N, T, C, B)``::

    reorganize_spatial        -> (N, C, T*B)
    input projection          -> (N, C, T*d_c)
    spatial encoder layers    -> (N, C, T*d_c)      full attention over channels
    reorganize_temporal       -> (N, T, C*d_c)
    + sinusoidal positions, temporal encoder layers (banded attention)
    output projection         -> (N, T, d_t)
    classify                  -> (N, K) probabilities

Every encoder layer computes ``LayerNorm(x + FFN(MultiHeadAttention(x)))``.
Parameters live in an ordered ``dict`` of float32 arrays; the dict order is
the checkpoint serialization order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError
from .tensor import Tensor

FFN_MULT = 4
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    windows: int
    bands: int = 5
    spatial_dim: int = 8
    temporal_dim: int = 16
    hidden_dim: int = 32
    classes: int = 3
    spatial_heads: int = 4
    temporal_heads: int = 4
    encoder_layers: int = 5
    attention_window: int = 3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"model config: {f.name} must be a positive integer, got {v!r}")
        if self.classes < 2:
            raise ConfigError("model config: classes must be >= 2")
        if self.spatial_dim % self.spatial_heads:
            raise ConfigError("model config: spatial_dim must be divisible by spatial_heads")
        if self.temporal_dim % self.temporal_heads:
            raise ConfigError("model config: temporal_dim must be divisible by temporal_heads")
        if self.temporal_width % self.temporal_heads:
            raise ConfigError("model config: channels*spatial_dim must be divisible by temporal_heads")
        if self.attention_window % 2 == 0:
            raise ConfigError("model config: attention_window must be odd")
        if self.attention_window > 2 * self.windows - 1:
            raise ConfigError("model config: attention_window exceeds 2*windows-1")

    @property
    def spatial_width(self):
        return self.windows * self.spatial_dim

    @property
    def temporal_width(self):
        return self.channels * self.spatial_dim

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- parameters

def param_shapes(cfg: ModelConfig):
    """Ordered (name, shape) pairs; this order is the checkpoint layout."""
    ws, wt = cfg.spatial_width, cfg.temporal_width
    shapes = [
        ("spatial.in_proj.weight", (cfg.windows * cfg.bands, ws)),
        ("spatial.in_proj.bias", (ws,)),
    ]
    for prefix, width, count in (("spatial", ws, cfg.encoder_layers), ("temporal", wt, cfg.encoder_layers)):
        for layer in range(count):
            p = f"{prefix}.{layer}."
            shapes += [
                (p + "wq", (width, width)),
                (p + "wk", (width, width)),
                (p + "wv", (width, width)),
                (p + "ffn1.weight", (width, FFN_MULT * width)),
                (p + "ffn1.bias", (FFN_MULT * width,)),
                (p + "ffn2.weight", (FFN_MULT * width, width)),
                (p + "ffn2.bias", (width,)),
                (p + "ln.gain", (width,)),
                (p + "ln.bias", (width,)),
            ]
    shapes += [
        ("temporal.out_proj.weight", (wt, cfg.temporal_dim)),
        ("temporal.out_proj.bias", (cfg.temporal_dim,)),
        ("classifier.w1", (cfg.windows * cfg.temporal_dim, cfg.hidden_dim)),
        ("classifier.b1", (cfg.hidden_dim,)),
        ("classifier.w2", (cfg.hidden_dim, cfg.classes)),
        ("classifier.b2", (cfg.classes,)),
    ]
    return shapes


def init_params(cfg: ModelConfig, seed=0):
    """Weights uniform in +-1/sqrt(fan_in); biases 0; layer-norm gains 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith("ln.gain"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(np.float32)
    return params


def check_params(params, cfg: ModelConfig):
    expected = param_shapes(cfg)
    if list(params) != [n for n, _ in expected]:
        raise ShapeError("parameter names do not match model config")
    for name, shape in expected:
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        if not np.all(np.isfinite(params[name])):
            raise ShapeError(f"{name}: non-finite values")


def as_tensors(params, requires_grad=False, dtype=None):
    return {k: Tensor(v, requires_grad=requires_grad, dtype=dtype) for k, v in params.items()}


# ---------------------------------------------------------------- layout

def reorganize_spatial(features):
    """``(.., T, C, B)`` -> ``(.., C, T*B)`` with element ``(c, t*B + b) = seg[t, c, b]``."""
    f = np.asarray(features)
    if f.ndim < 3:
        raise ShapeError(f"expected (..., T, C, B) features, got {f.shape}")
    t, c, b = f.shape[-3:]
    lead = f.shape[:-3]
    moved = np.swapaxes(f, -3, -2)
    return moved.reshape(*lead, c, t * b)


def unreorganize_spatial(x, windows, bands):
    x = np.asarray(x)
    c = x.shape[-2]
    lead = x.shape[:-2]
    return np.swapaxes(x.reshape(*lead, c, windows, bands), -3, -2)


def reorganize_temporal(h_s: Tensor, windows: int):
    """``(.., C, T*d)`` -> ``(.., T, C*d)``; pure index permutation."""
    *lead, c, width = h_s.shape
    if width % windows:
        raise ShapeError(f"width {width} is not a multiple of {windows} windows")
    d = width // windows
    x = tn.reshape(h_s, (*lead, c, windows, d))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    x = tn.transpose(x, axes)
    return tn.reshape(x, (*lead, windows, c * d))


def unreorganize_temporal(x_t: Tensor, channels: int):
    *lead, windows, width = x_t.shape
    d = width // channels
    x = tn.reshape(x_t, (*lead, windows, channels, d))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    x = tn.transpose(x, axes)
    return tn.reshape(x, (*lead, channels, windows * d))


def build_window_mask(windows: int, width: int):
    """Band matrix with ones where ``|i - j| <= (width - 1) / 2``."""
    if width % 2 == 0:
        raise ConfigError(f"attention window must be odd, got {width}")
    if not 1 <= width <= 2 * windows - 1:
        raise ConfigError(f"attention window must lie in [1, {2 * windows - 1}], got {width}")
    half = (width - 1) // 2
    idx = np.arange(windows)
    return (np.abs(idx[:, None] - idx[None, :]) <= half).astype(np.uint8)


def sinusoidal_positions(length: int, width: int, dtype=np.float32):
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


# ---------------------------------------------------------------- layers

def linear(x, weight, bias=None):
    y = tn.matmul(x, weight)
    return tn.add(y, bias) if bias is not None else y


def attention(x, wq, wk, wv, heads, scale_dim, mask=None, return_weights=False):
    """Multi-head self-attention over the second-to-last axis of ``x``.

    Scores are divided by ``sqrt(scale_dim)``; ``mask`` (tokens x tokens,
    0/1) excludes positions before the softmax.
    """
    *lead, n, width = x.shape
    dh = width // heads
    nl = len(lead)

    def split(t):
        t = tn.reshape(t, (*lead, n, heads, dh))
        return tn.transpose(t, list(range(nl)) + [nl + 1, nl, nl + 2])

    q = split(tn.matmul(x, wq))
    k = split(tn.matmul(x, wk))
    v = split(tn.matmul(x, wv))
    scores = tn.scale(tn.matmul(q, tn.swap_last(k)), 1.0 / math.sqrt(scale_dim))
    if mask is not None:
        scores = tn.masked_scale_scores(scores, mask)
    weights = tn.softmax_rows(scores)
    out = tn.matmul(weights, v)
    out = tn.transpose(out, list(range(nl)) + [nl + 1, nl, nl + 2])
    out = tn.reshape(out, (*lead, n, width))
    return (out, weights) if return_weights else out


def encoder_layer(x, p, prefix, heads, scale_dim, mask=None, return_weights=False):
    att = attention(x, p[prefix + "wq"], p[prefix + "wk"], p[prefix + "wv"], heads, scale_dim,
                    mask=mask, return_weights=return_weights)
    if return_weights:
        att, weights = att
    ff = linear(tn.gelu(linear(att, p[prefix + "ffn1.weight"], p[prefix + "ffn1.bias"])),
                p[prefix + "ffn2.weight"], p[prefix + "ffn2.bias"])
    out = tn.layer_norm(tn.add(x, ff), p[prefix + "ln.gain"], p[prefix + "ln.bias"], LN_EPS)
    return (out, weights) if return_weights else out


def spatial_encoder_forward(x_spatial, params, cfg: ModelConfig, collect=None):
    """Project ``(.., C, T*B)`` to model width and run the spatial layers."""
    x = _as_input(x_spatial, params)
    if x.shape[-2:] != (cfg.channels, cfg.windows * cfg.bands):
        raise ShapeError(f"spatial input shape {x.shape} does not match config")
    h = linear(x, params["spatial.in_proj.weight"], params["spatial.in_proj.bias"])
    for layer in range(cfg.encoder_layers):
        h = encoder_layer(h, params, f"spatial.{layer}.", cfg.spatial_heads, cfg.spatial_dim,
                          return_weights=collect is not None)
        if collect is not None:
            h, w = h
            collect.append(w)
    return h


def temporal_encoder_forward(x_t, mask, params, cfg: ModelConfig, collect=None):
    """Banded multi-head attention over windows; returns ``(.., T, d_t)``."""
    if x_t.shape[-2:] != (cfg.windows, cfg.temporal_width):
        raise ShapeError(f"temporal input shape {x_t.shape} does not match config")
    mask = np.asarray(mask)
    if mask.shape != (cfg.windows, cfg.windows):
        raise ShapeError(f"mask shape {mask.shape} does not match {cfg.windows} windows")
    pe = Tensor(sinusoidal_positions(cfg.windows, cfg.temporal_width, x_t.dtype), dtype=x_t.dtype)
    h = tn.add(x_t, pe)
    for layer in range(cfg.encoder_layers):
        h = encoder_layer(h, params, f"temporal.{layer}.", cfg.temporal_heads, cfg.temporal_dim,
                          mask=mask, return_weights=collect is not None)
        if collect is not None:
            h, w = h
            collect.append(w)
    return linear(h, params["temporal.out_proj.weight"], params["temporal.out_proj.bias"])


def classifier_logits(h_t, params):
    *lead, t, d = h_t.shape
    flat = tn.reshape(h_t, (*lead, t * d))
    if not lead:
        flat = tn.reshape(flat, (1, t * d))
    if flat.shape[-1] != params["classifier.w1"].shape[0]:
        raise ShapeError(f"flattened width {flat.shape[-1]} does not match classifier input")
    hidden = tn.gelu(linear(flat, params["classifier.w1"], params["classifier.b1"]))
    logits = linear(hidden, params["classifier.w2"], params["classifier.b2"])
    return logits if lead else tn.reshape(logits, (logits.shape[-1],))


def classify(h_t, params):
    """Flatten, hidden GELU layer, then softmax over classes."""
    return tn.softmax_rows(classifier_logits(h_t, params))


def forward_batch(features, params, cfg: ModelConfig, mask=None):
    """Class probabilities ``(N, K)`` for features ``(N, T, C, B)``."""
    features = np.asarray(features)
    if features.ndim != 4 or features.shape[1:] != (cfg.windows, cfg.channels, cfg.bands):
        raise ShapeError(
            f"features shape {features.shape} does not match (N, {cfg.windows}, {cfg.channels}, {cfg.bands})")
    if mask is None:
        mask = build_window_mask(cfg.windows, cfg.attention_window)
    dtype = params["classifier.w2"].dtype
    x = Tensor(reorganize_spatial(features), dtype=dtype)
    h_s = spatial_encoder_forward(x, params, cfg)
    h_t = temporal_encoder_forward(reorganize_temporal(h_s, cfg.windows), mask, params, cfg)
    return classify(h_t, params)


def model_forward(segment, params, cfg: ModelConfig):
    """Class probabilities ``(K,)`` for a single ``(T, C, B)`` segment."""
    features = np.asarray(getattr(segment, "features", segment))
    probs = forward_batch(features[None], params, cfg)
    return tn.reshape(probs, (cfg.classes,))


def predict_proba(features, params, cfg: ModelConfig, batch_size=256):
    """Tape-free batched inference on raw parameter arrays."""
    tensors = as_tensors(params)
    features = np.asarray(features, dtype=np.float32)
    out = [forward_batch(features[i:i + batch_size], tensors, cfg).data
           for i in range(0, len(features), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, cfg.classes), dtype=np.float32)


def _as_input(x, params):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=params["classifier.w2"].dtype)
