"""Forward evaluation of the pigment enhancement pipeline.

Colors are expanded into N pigments by a convex linear map, every pigment
is pushed through its own piecewise-linear reprojection curve, the
reprojected pigments are mixed by a small per-pixel network (blending), and
a final linear map turns pigments back into RGB.

Images are plain ``(H, W, 3)`` float arrays with values in ``[0, 1]``.  The
batched functions in this module accept arbitrary leading dimensions so the
same code serves a single pixel, a single image and a training batch.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateBatchError,
    DomainError,
    InvalidInputError,
    InvalidParameterError,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def domain_tolerance(dtype) -> float:
    """Slack allowed on pigment values before they count as out of [0, 1]."""
    return max(1e-9, 8.0 * float(np.finfo(dtype).eps))


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class BlendParams:
    """Two 1x1 convolutions around a batch-norm + ReLU, shared by all images."""

    conv1_weight: np.ndarray
    conv1_bias: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    conv2_weight: np.ndarray
    conv2_bias: np.ndarray
    bypass: bool = False

    TRAINABLE = ("conv1_weight", "conv1_bias", "bn_gamma", "bn_beta",
                 "conv2_weight", "conv2_bias")
    BUFFERS = ("bn_running_mean", "bn_running_var")

    @property
    def num_pigments(self) -> int:
        return self.conv1_weight.shape[0]

    @classmethod
    def identity(cls, num_pigments: int, dtype=np.float64, bypass=False) -> "BlendParams":
        eye = np.eye(num_pigments, dtype=dtype)
        zeros = np.zeros(num_pigments, dtype=dtype)
        ones = np.ones(num_pigments, dtype=dtype)
        return cls(eye.copy(), zeros.copy(), ones.copy(), zeros.copy(),
                   zeros.copy(), ones.copy(), eye.copy(), zeros.copy(), bypass)

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in self.TRAINABLE + self.BUFFERS}

    def astype(self, dtype) -> "BlendParams":
        return replace(self, **{k: v.astype(dtype) for k, v in self.tensors().items()})

    def copy(self) -> "BlendParams":
        return replace(self, **{k: v.copy() for k, v in self.tensors().items()})

    def permuted(self, perm) -> "BlendParams":
        perm = np.asarray(perm)
        vecs = {k: getattr(self, k)[perm] for k in
                ("conv1_bias", "bn_gamma", "bn_beta", "bn_running_mean",
                 "bn_running_var", "conv2_bias")}
        return replace(self,
                       conv1_weight=self.conv1_weight[np.ix_(perm, perm)],
                       conv2_weight=self.conv2_weight[np.ix_(perm, perm)],
                       **vecs)

    def validate(self):
        n = self.num_pigments
        for name, arr in self.tensors().items():
            want = (n, n) if name.endswith("weight") else (n,)
            if arr.shape != want:
                raise InvalidParameterError(f"blend {name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"blend {name} is not finite")
        if np.any(self.bn_running_var <= 0):
            raise InvalidParameterError("blend running variance must be positive")


@dataclass
class ReprojectionTable:
    """N piecewise-linear curves over uniform knots on [0, 1]."""

    offsets: np.ndarray

    @property
    def num_pigments(self) -> int:
        return self.offsets.shape[-2]

    @property
    def num_points(self) -> int:
        return self.offsets.shape[-1]

    @property
    def knots(self) -> np.ndarray:
        return knot_positions(self.num_points, self.offsets.dtype)

    @property
    def ordinates(self) -> np.ndarray:
        return self.knots + self.offsets


@dataclass
class PigmentModelParams:
    """Per-image parameters (raw expansion weights, offsets, reconstruction) plus blending."""

    expansion_raw: np.ndarray
    offsets: np.ndarray
    reconstruction: np.ndarray
    blend: BlendParams = field(default=None)

    def __post_init__(self):
        if self.blend is None:
            self.blend = BlendParams.identity(self.num_pigments, self.expansion_raw.dtype,
                                              bypass=True)

    @property
    def num_pigments(self) -> int:
        return self.expansion_raw.shape[-1]

    @property
    def num_points(self) -> int:
        return self.offsets.shape[-1]

    @property
    def table(self) -> ReprojectionTable:
        return build_reprojection_table(self.offsets)

    @property
    def expansion(self) -> np.ndarray:
        return normalize_expansion_weights(self.expansion_raw)

    def validate(self):
        n = self.num_pigments
        if self.expansion_raw.shape[-2:] != (3, n):
            raise InvalidParameterError(f"expansion weights shape {self.expansion_raw.shape}")
        if self.offsets.shape[-2] != n:
            raise InvalidParameterError(
                f"offsets have {self.offsets.shape[-2]} rows for {n} pigments")
        if self.offsets.shape[-1] < 2:
            raise ConfigurationError("reprojection needs at least 2 points per pigment")
        if self.reconstruction.shape[-2:] != (3, n):
            raise InvalidParameterError(f"reconstruction weights shape {self.reconstruction.shape}")
        for name in ("expansion_raw", "offsets", "reconstruction"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"{name} is not finite")
        if self.blend.num_pigments != n:
            raise InvalidParameterError("blend parameters disagree on the pigment count")
        self.blend.validate()

    def astype(self, dtype) -> "PigmentModelParams":
        return PigmentModelParams(self.expansion_raw.astype(dtype), self.offsets.astype(dtype),
                                  self.reconstruction.astype(dtype), self.blend.astype(dtype))

    def permuted(self, perm) -> "PigmentModelParams":
        perm = np.asarray(perm)
        return PigmentModelParams(self.expansion_raw[..., perm], self.offsets[..., perm, :],
                                  self.reconstruction[..., perm], self.blend.permuted(perm))


# ---------------------------------------------------------------------------
# stages


def normalize_expansion_weights(raw):
    """Sigmoid each entry, then rescale every column to sum to one.

    Parameters
    ----------
    raw : array_like, shape (..., 3, N)
        Unbounded expansion weights.

    Returns
    -------
    ndarray, shape (..., 3, N)
        Columns with entries in (0, 1) summing to 1.
    """
    raw = np.asarray(raw)
    if not np.all(np.isfinite(raw)):
        raise InvalidParameterError("expansion weights must be finite")
    if raw.ndim < 2 or raw.shape[-2] != 3:
        raise InvalidParameterError(f"expansion weights must be 3 x N, got {raw.shape}")
    if not np.issubdtype(raw.dtype, np.floating):
        raw = raw.astype(np.float64)
    sig = sigmoid(raw)
    return sig / sig.sum(axis=-2, keepdims=True)


def expand_pigments(normalized, colors):
    """Map colors ``(..., 3)`` to pigments ``(..., N)`` with ``p = W^T c``."""
    normalized = np.asarray(normalized)
    colors = np.asarray(colors)
    if normalized.shape[-2] != 3 or colors.shape[-1] != 3:
        raise InvalidParameterError(
            f"cannot expand colors {colors.shape} with weights {normalized.shape}")
    return colors @ normalized


def knot_positions(num_points: int, dtype=np.float64) -> np.ndarray:
    if num_points < 2:
        raise ConfigurationError(f"need at least 2 reprojection points, got {num_points}")
    return (np.arange(num_points, dtype=np.float64) / (num_points - 1)).astype(dtype)


def build_reprojection_table(offsets) -> ReprojectionTable:
    offsets = np.asarray(offsets)
    if offsets.ndim < 2:
        raise ConfigurationError(f"offsets must be N x L, got shape {offsets.shape}")
    if offsets.shape[-1] < 2:
        raise ConfigurationError(f"need at least 2 reprojection points, got {offsets.shape[-1]}")
    if not np.issubdtype(offsets.dtype, np.floating):
        offsets = offsets.astype(np.float64)
    return ReprojectionTable(offsets)


def locate_segments(p, knots):
    """Segment index and left weight for every pigment value.

    The segment satisfies ``knots[l] <= p < knots[l + 1]``, except that
    ``p == 1`` falls into the last segment with weight 0.
    """
    knots = np.asarray(knots)
    last = knots.shape[0] - 2
    idx = np.floor(p * (knots.shape[0] - 1)).astype(np.intp)
    np.clip(idx, 0, last, out=idx)
    idx -= (idx > 0) & (p < knots[idx])
    idx += (idx < last) & (p >= knots[np.minimum(idx + 1, last + 1)])
    left = knots[idx]
    right = knots[idx + 1]
    alpha = (right - p) / (right - left)
    return idx, alpha


def check_pigment_domain(p):
    tol = domain_tolerance(p.dtype)
    lo, hi = p.min(initial=0.0), p.max(initial=1.0)
    if lo < -tol or hi > 1.0 + tol:
        raise DomainError(f"pigment values span [{lo}, {hi}], outside [0, 1]")
    return np.clip(p, 0.0, 1.0)


def reproject(p, ordinates):
    """Vectorized reprojection.

    Parameters
    ----------
    p : ndarray, shape (..., P, N)
        Pigments in [0, 1].
    ordinates : ndarray, shape (..., N, L)
        Tweaked control-point heights, one row per pigment.

    Returns
    -------
    pbar, idx, alpha : ndarrays of shape (..., P, N)
    """
    p = check_pigment_domain(np.asarray(p))
    ordinates = np.asarray(ordinates)
    knots = knot_positions(ordinates.shape[-1], p.dtype)
    idx, alpha = locate_segments(p, knots)
    idx_t = np.swapaxes(idx, -1, -2)
    y_left = np.swapaxes(np.take_along_axis(ordinates, idx_t, axis=-1), -1, -2)
    y_right = np.swapaxes(np.take_along_axis(ordinates, idx_t + 1, axis=-1), -1, -2)
    pbar = alpha * y_left + (1 - alpha) * y_right
    return pbar, idx, alpha


def reproject_pigment(value: float, table: ReprojectionTable, n: int) -> float:
    """Push one pigment value through curve ``n`` of ``table``."""
    p = np.asarray([[value]], dtype=table.offsets.dtype)
    pbar, _, _ = reproject(p, table.ordinates[n:n + 1])
    return float(pbar[0, 0])


def blend_pigments(pbar, blend: BlendParams, mode: str = "eval", cache: dict | None = None):
    """Per-pixel ``conv2(relu(bn(conv1(pbar))))`` over a batch of pigment vectors.

    ``pbar`` may have any leading shape; batch statistics in train mode are
    taken over every pixel in it and the running statistics are updated in
    place.
    """
    pbar = np.asarray(pbar)
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown blend mode {mode!r}")
    if pbar.shape[-1] != blend.num_pigments:
        raise InvalidParameterError(
            f"blend expects {blend.num_pigments} pigments, got {pbar.shape[-1]}")
    if blend.bypass:
        return pbar
    flat = pbar.reshape(-1, pbar.shape[-1])
    z = flat @ blend.conv1_weight.T + blend.conv1_bias
    if mode == "train":
        m = z.shape[0]
        if m < 2:
            raise DegenerateBatchError("batch statistics need at least 2 pixels")
        mean = z.mean(axis=0)
        var = z.var(axis=0)
        mom = BN_MOMENTUM
        blend.bn_running_mean[...] = (1 - mom) * blend.bn_running_mean + mom * mean
        blend.bn_running_var[...] = (1 - mom) * blend.bn_running_var + mom * var * (m / (m - 1))
    else:
        mean = blend.bn_running_mean
        var = blend.bn_running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean) * inv_std
    a = xhat * blend.bn_gamma + blend.bn_beta
    h = np.maximum(a, 0)
    out = h @ blend.conv2_weight.T + blend.conv2_bias
    if cache is not None:
        cache.update(xhat=xhat, inv_std=inv_std, pre_relu=a, hidden=h)
    return out.reshape(pbar.shape)


def reconstruct_color(U, phat):
    """``c = U p`` for pigments ``(..., N)`` and weights ``(..., 3, N)``."""
    U = np.asarray(U)
    phat = np.asarray(phat)
    if U.shape[-2] != 3 or U.shape[-1] != phat.shape[-1]:
        raise InvalidParameterError(f"cannot reconstruct {phat.shape} pigments with U {U.shape}")
    return phat @ np.swapaxes(U, -1, -2)


# ---------------------------------------------------------------------------
# composed forward


@dataclass
class StageCache:
    """Forward intermediates kept for the backward pass."""

    colors: np.ndarray          # (B, P, 3)
    expansion_raw: np.ndarray   # (B, 3, N)
    normalized: np.ndarray      # (B, 3, N)
    pigments: np.ndarray        # (B, P, N), clamped to [0, 1]
    segment: np.ndarray         # (B, P, N) zero-based left knot index
    alpha: np.ndarray           # (B, P, N)
    ordinates: np.ndarray       # (B, N, L)
    reprojected: np.ndarray     # (B, P, N)
    blended: np.ndarray         # (B, P, N)
    mode: str
    blend: dict


def forward_batch(colors, expansion_raw, offsets, reconstruction, blend: BlendParams,
                  mode: str = "train"):
    """Run the whole pipeline on a batch, keeping what backward needs.

    Parameters
    ----------
    colors : ndarray, shape (B, P, 3)
    expansion_raw : ndarray, shape (B, 3, N)
    offsets : ndarray, shape (B, N, L)
    reconstruction : ndarray, shape (B, 3, N)
    blend : BlendParams
        Shared across the batch.  Train mode uses batch statistics over all
        ``B * P`` pixels.

    Returns
    -------
    out : ndarray, shape (B, P, 3)
        Unclamped reconstructed colors.
    cache : StageCache
    """
    normalized = normalize_expansion_weights(expansion_raw)
    table = build_reprojection_table(offsets)
    p = check_pigment_domain(expand_pigments(normalized, colors))
    ordinates = table.ordinates
    pbar, idx, alpha = reproject(p, ordinates)
    bcache: dict = {}
    phat = blend_pigments(pbar, blend, mode, cache=bcache)
    out = reconstruct_color(reconstruction, phat)
    cache = StageCache(np.asarray(colors), np.asarray(expansion_raw), normalized, p, idx, alpha,
                       ordinates, pbar, phat, mode, bcache)
    return out, cache


def _validate_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInputError("image has no pixels")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite values")
    tol = domain_tolerance(img.dtype) if np.issubdtype(img.dtype, np.floating) else 0
    if img.min() < -tol or img.max() > 1 + tol:
        raise InvalidInputError("image values must lie in [0, 1]")
    return img


def default_threads() -> int:
    env = os.environ.get("PGMT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"PGMT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def canonical_order(params: PigmentModelParams) -> np.ndarray:
    """Pigment order that depends only on the pigments' own parameters.

    Sums over pigments are evaluated in this order, so relabeling the
    pigments cannot change the floating-point result.
    """
    b = params.blend
    keys = np.vstack([
        np.sort(b.conv2_weight, axis=0), np.sort(b.conv1_weight, axis=0),
        b.conv2_bias, b.conv1_bias, b.bn_beta, b.bn_gamma,
        b.bn_running_var, b.bn_running_mean,
        params.reconstruction, params.offsets.T, params.expansion_raw,
    ])
    return np.lexsort(keys)


def apply_pipeline_image(img, params: PigmentModelParams, mode: str = "eval",
                         threads: int | None = None, dtype=np.float32) -> np.ndarray:
    """Enhance one image with fixed per-image parameters.

    Eval mode runs the fused kernel over disjoint pixel ranges on
    ``threads`` workers; the result does not depend on the thread count.
    Output is clamped to [0, 1].
    """
    img = _validate_image(img)
    params.validate()
    h, w, _ = img.shape
    dtype = np.dtype(dtype)
    colors = np.ascontiguousarray(img.reshape(-1, 3), dtype=dtype)

    if mode == "train":
        p = params.astype(dtype)
        out, _ = forward_batch(colors[None], p.expansion_raw[None], p.offsets[None],
                               p.reconstruction[None], params.blend, mode="train")
        return np.clip(out[0], 0, 1).reshape(h, w, 3)
    if mode != "eval":
        raise ConfigurationError(f"unknown mode {mode!r}")

    from ._kernels import apply_range

    p = params.permuted(canonical_order(params)).astype(dtype)
    b = p.blend
    what = np.ascontiguousarray(p.expansion)
    knots = knot_positions(p.num_points, dtype)
    ybar = np.ascontiguousarray(p.table.ordinates)
    bn_scale = (b.bn_gamma / np.sqrt(b.bn_running_var + dtype.type(BN_EPS))).astype(dtype)
    bn_shift = (b.bn_beta - b.bn_running_mean * bn_scale).astype(dtype)
    out = np.empty_like(colors)
    args = (colors, what, knots, ybar, np.ascontiguousarray(b.conv1_weight), b.conv1_bias,
            bn_scale, bn_shift, np.ascontiguousarray(b.conv2_weight), b.conv2_bias,
            np.ascontiguousarray(p.reconstruction), bool(b.bypass), out)

    n_pix = colors.shape[0]
    threads = default_threads() if threads is None else max(1, int(threads))
    threads = min(threads, n_pix)
    if threads == 1:
        apply_range(*args, 0, n_pix)
    else:
        bounds = np.linspace(0, n_pix, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(apply_range, *args, int(lo), int(hi))
                       for lo, hi in zip(bounds[:-1], bounds[1:])]
            for f in futures:
                f.result()
    np.clip(out, 0, 1, out=out)
    return out.reshape(h, w, 3)
