"""Visual encoder that predicts per-image pigment parameters.

A stack of stride-2 3x3 convolutions with leaky rectifiers is globally
average-pooled into a feature vector; three independent two-layer heads map
that vector to raw expansion weights, reprojection offsets and reconstruction
weights.  Activations are kept in NHWC layout so a convolution is one
im2col matmul.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InvalidInputError
from .pipeline import (
    BlendParams,
    PigmentModelParams,
    apply_pipeline_image,
    normalize_expansion_weights,
)

HEADS = ("expansion", "offsets", "reconstruction")


@dataclass
class EncoderConfig:
    input_side: int = 256
    channels: tuple = (16, 32, 64, 128, 512)
    bottleneck: int = 128
    num_pigments: int = 64
    num_points: int = 32
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    @classmethod
    def tiny(cls, **overrides) -> "EncoderConfig":
        """Desk-scale configuration exercising every code path in seconds."""
        base = dict(input_side=64, channels=(8, 16, 32, 64, 128), num_pigments=16, num_points=8)
        base.update(overrides)
        return cls(**base)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def head_sizes(self) -> dict:
        n, l = self.num_pigments, self.num_points
        return {"expansion": 3 * n, "offsets": n * l, "reconstruction": 3 * n}

    def head_shapes(self) -> dict:
        n, l = self.num_pigments, self.num_points
        return {"expansion": (3, n), "offsets": (n, l), "reconstruction": (3, n)}

    def validate(self):
        if not self.channels:
            raise ConfigurationError("channel plan must not be empty")
        if self.input_side < 1 or self.input_side % (2 ** len(self.channels)):
            raise ConfigurationError(
                f"input_side {self.input_side} is not divisible by 2^{len(self.channels)}")
        if self.num_pigments < 3:
            raise ConfigurationError("need at least 3 pigments")
        if self.num_points < 2:
            raise ConfigurationError("need at least 2 reprojection points")
        if self.bottleneck < 1 or min(self.channels) < 1:
            raise ConfigurationError("layer widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


class EncoderWeights:
    """Named trainable tensors of the backbone, heads and blending stage.

    ``tensors`` maps names to arrays; blending buffers (running statistics)
    live in the same mapping but are not trainable.  The :attr:`blend`
    property returns views, so in-place updates flow both ways.
    """

    def __init__(self, config: EncoderConfig, tensors: dict, blend_bypass: bool = False):
        self.config = config
        self.tensors = dict(tensors)
        self.blend_bypass = bool(blend_bypass)

    @property
    def blend(self) -> BlendParams:
        kw = {name: self.tensors["blend." + name]
              for name in BlendParams.TRAINABLE + BlendParams.BUFFERS}
        return BlendParams(bypass=self.blend_bypass, **kw)

    def trainable_names(self) -> list:
        buffers = {"blend." + b for b in BlendParams.BUFFERS}
        return [k for k in self.tensors if k not in buffers]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()},
                              self.blend_bypass)

    def copy(self) -> "EncoderWeights":
        return self.astype(self.dtype)

    def num_parameters(self) -> int:
        return sum(self.tensors[k].size for k in self.trainable_names())


def _uniform(rng, shape, bound, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> EncoderWeights:
    """Seeded fan-in-scaled uniform initialization.

    Biases start at zero except the expansion head's output bias, which is
    drawn from a unit normal so the initial pigments differ from each other.
    The offsets head output layer starts at zero, giving an identity
    reprojection table for any image.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    t = {}
    c_in = 3
    gain = np.sqrt(6.0 / (1.0 + config.leaky_slope ** 2))
    for i, c_out in enumerate(config.channels):
        fan_in = c_in * 9
        t[f"backbone.{i}.weight"] = _uniform(rng, (c_out, c_in, 3, 3), gain / np.sqrt(fan_in), dtype)
        t[f"backbone.{i}.bias"] = np.zeros(c_out, dtype)
        c_in = c_out
    f, c = config.feature_dim, config.bottleneck
    for head, out in config.head_sizes().items():
        t[f"head.{head}.fc1.weight"] = _uniform(rng, (c, f), np.sqrt(6.0 / f), dtype)
        t[f"head.{head}.fc1.bias"] = np.zeros(c, dtype)
        if head == "offsets":
            t[f"head.{head}.fc2.weight"] = np.zeros((out, c), dtype)
        else:
            t[f"head.{head}.fc2.weight"] = _uniform(rng, (out, c), 1.0 / np.sqrt(c), dtype)
        t[f"head.{head}.fc2.bias"] = np.zeros(out, dtype)
    t["head.expansion.fc2.bias"] = rng.standard_normal(3 * config.num_pigments).astype(dtype)

    n = config.num_pigments
    t["blend.conv1_weight"] = _uniform(rng, (n, n), np.sqrt(3.0 / n), dtype)
    t["blend.conv1_bias"] = np.zeros(n, dtype)
    t["blend.bn_gamma"] = np.ones(n, dtype)
    t["blend.bn_beta"] = np.zeros(n, dtype)
    t["blend.conv2_weight"] = _uniform(rng, (n, n), np.sqrt(3.0 / n), dtype)
    t["blend.conv2_bias"] = np.zeros(n, dtype)
    t["blend.bn_running_mean"] = np.zeros(n, dtype)
    t["blend.bn_running_var"] = np.ones(n, dtype)
    return EncoderWeights(config, t)


def identity_encoder(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> EncoderWeights:
    """Encoder whose pipeline reproduces its input.

    Expansion weights are fixed (seeded, full rank), offsets are zero,
    blending is bypassed and the reconstruction weights are the
    pseudo-inverse of the expansion map.
    """
    w = init_encoder(config, seed, np.float64)
    for head in HEADS:
        w.tensors[f"head.{head}.fc2.weight"][...] = 0.0
    raw = w.tensors["head.expansion.fc2.bias"].reshape(3, config.num_pigments)
    what = normalize_expansion_weights(raw)
    w.tensors["head.reconstruction.fc2.bias"][...] = np.linalg.pinv(what.T).ravel()
    w.tensors["head.offsets.fc2.bias"][...] = 0.0
    out = w.astype(dtype)
    out.blend_bypass = True
    return out


# ---------------------------------------------------------------------------
# resizing


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Bilinear resampling matrix with half-pixel centers and clamped edges."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(images, side: int) -> np.ndarray:
    """Resize ``(B, H, W, 3)`` (or a single ``(H, W, 3)``) to ``side x side``."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3 or images.shape[1] < 1 or images.shape[2] < 1:
        raise InvalidInputError(f"cannot resize array of shape {images.shape}")
    dtype = images.dtype if np.issubdtype(images.dtype, np.floating) else np.float64
    rh = resize_matrix(images.shape[1], side, dtype)
    rw = resize_matrix(images.shape[2], side, dtype)
    out = np.einsum("ih,bhwc,jw->bijc", rh, images.astype(dtype), rw, optimize=True)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# forward


def im2col(x):
    """Patches of a stride-2, pad-1, 3x3 convolution; ``x`` is NHWC."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
    b, ho, wo, c = win.shape[:4]
    return win.reshape(b * ho * wo, c * 9), (b, ho, wo)


def col2im(dcols, in_shape):
    """Adjoint of :func:`im2col`."""
    b, h, w, c = in_shape
    ho, wo = h // 2, w // 2
    d = dcols.reshape(b, ho, wo, c, 3, 3)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2, :] += d[..., ki, kj]
    return dxp[:, 1:-1, 1:-1, :]


@dataclass
class EncoderCache:
    cols: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    in_shapes: list = field(default_factory=list)
    last_shape: tuple = ()
    features: np.ndarray = None
    head_hidden: dict = field(default_factory=dict)
    head_pre: dict = field(default_factory=dict)


def _check_batch(images, config):
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise InvalidInputError(f"expected (B, H, W, 3) images, got shape {images.shape}")
    if images.shape[1] == 0 or images.shape[2] == 0:
        raise InvalidInputError("image has no pixels")
    return images


def backbone_forward(images, weights: EncoderWeights, cache: EncoderCache | None = None):
    """Features ``(B, F)`` for a batch of ``(B, H, W, 3)`` images."""
    cfg = weights.config
    images = _check_batch(images, cfg)
    dtype = weights.dtype
    x = resize_bilinear(images.astype(dtype, copy=False), cfg.input_side).astype(dtype, copy=False)
    slope = dtype.type(cfg.leaky_slope)
    for i in range(len(cfg.channels)):
        wgt = weights.tensors[f"backbone.{i}.weight"]
        in_shape = x.shape
        cols, (b, ho, wo) = im2col(x)
        z = cols @ wgt.reshape(wgt.shape[0], -1).T + weights.tensors[f"backbone.{i}.bias"]
        x = np.where(z > 0, z, z * slope).reshape(b, ho, wo, -1)
        if cache is not None:
            cache.cols.append(cols)
            cache.pre.append(z)
            cache.in_shapes.append(in_shape)
    if cache is not None:
        cache.last_shape = x.shape
    feats = x.mean(axis=(1, 2))
    if cache is not None:
        cache.features = feats
    return feats


def encode_features(img, weights: EncoderWeights, config: EncoderConfig | None = None) -> np.ndarray:
    """Feature vector (length ``feature_dim``) of a single ``(H, W, 3)`` image."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidInputError("image has no pixels")
    if config is not None and config != weights.config:
        raise ConfigurationError("config does not match the weights")
    return backbone_forward(img[None], weights)[0]


def heads_forward(features, weights: EncoderWeights, cache: EncoderCache | None = None) -> dict:
    """Raw head outputs reshaped to (B, 3, N), (B, N, L), (B, 3, N)."""
    cfg = weights.config
    features = np.asarray(features)
    if features.shape[-1] != cfg.feature_dim:
        raise ConfigurationError(
            f"features have length {features.shape[-1]}, expected {cfg.feature_dim}")
    t = weights.tensors
    out = {}
    shapes = cfg.head_shapes()
    for head in HEADS:
        pre = features @ t[f"head.{head}.fc1.weight"].T + t[f"head.{head}.fc1.bias"]
        hid = np.maximum(pre, 0)
        y = hid @ t[f"head.{head}.fc2.weight"].T + t[f"head.{head}.fc2.bias"]
        out[head] = y.reshape(features.shape[:-1] + shapes[head])
        if cache is not None:
            cache.head_pre[head] = pre
            cache.head_hidden[head] = hid
    return out


def predict_parameters(features, weights: EncoderWeights,
                       config: EncoderConfig | None = None) -> PigmentModelParams:
    """Per-image pipeline parameters from one feature vector."""
    if config is not None and config != weights.config:
        raise ConfigurationError("config does not match the weights")
    features = np.asarray(features)
    if features.ndim != 1:
        raise ConfigurationError("predict_parameters takes a single feature vector")
    out = heads_forward(features, weights)
    return PigmentModelParams(out["expansion"], out["offsets"], out["reconstruction"],
                              weights.blend)


def enhance_image(img, weights: EncoderWeights, threads: int | None = None) -> np.ndarray:
    """Predict parameters from ``img`` and apply the pipeline to it (eval mode)."""
    img = np.asarray(img)
    feats = encode_features(img, weights)
    params = predict_parameters(feats, weights)
    return apply_pipeline_image(img, params, "eval", threads=threads, dtype=weights.dtype)
