"""Analytic reverse-mode gradients and a finite-difference checker.

Every backward function mirrors one forward function and consumes the cache
that forward produced.  Batch reductions are plain numpy sums in a fixed
order, so repeated runs give identical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import HEADS, EncoderCache, EncoderWeights, col2im
from .errors import EvaluationError, InternalConsistencyError, InvalidParameterError
from .pipeline import BlendParams, PigmentModelParams, StageCache, sigmoid


class GradientBundle(dict):
    """Gradient arrays keyed like :attr:`EncoderWeights.tensors`."""

    def max_abs(self) -> float:
        return max((float(np.abs(g).max(initial=0.0)) for g in self.values()), default=0.0)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.values())


def expansion_norm_backward(raw, normalized, d_normalized):
    """Push gradients through the column-wise sigmoid normalization."""
    sig = sigmoid(raw)
    dsig = sig * (1 - sig)
    total = sig.sum(axis=-2, keepdims=True)
    inner = (normalized * d_normalized).sum(axis=-2, keepdims=True)
    return dsig * (d_normalized - inner) / total


def blend_backward(d_out, pbar, blend: BlendParams, cache: dict, mode: str):
    """Gradients of the blending stage.

    Returns ``(d_pbar, grads)`` where ``grads`` is keyed by blend tensor name.
    Train mode differentiates through the batch statistics.
    """
    shape = pbar.shape
    n = shape[-1]
    dy = d_out.reshape(-1, n)
    x = pbar.reshape(-1, n)
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    pre, hid = cache["pre_relu"], cache["hidden"]
    if xhat.shape != dy.shape:
        raise InternalConsistencyError("blend cache does not match upstream gradient")

    g = {"conv2_weight": dy.T @ hid, "conv2_bias": dy.sum(axis=0)}
    dh = dy @ blend.conv2_weight
    da = dh * (pre > 0)
    g["bn_gamma"] = (da * xhat).sum(axis=0)
    g["bn_beta"] = da.sum(axis=0)
    dxhat = da * blend.bn_gamma
    if mode == "train":
        m = dy.shape[0]
        dz = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0)
                              - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dz = dxhat * inv_std
    g["conv1_weight"] = dz.T @ x
    g["conv1_bias"] = dz.sum(axis=0)
    dx = dz @ blend.conv1_weight
    return dx.reshape(shape), g


def backward_pipeline(upstream, cache: StageCache, params: PigmentModelParams):
    """Reverse pass through reconstruction, blending, reprojection and expansion.

    Parameters
    ----------
    upstream : ndarray, shape (B, P, 3)
        dLoss/d(reconstructed color) per pixel.
    cache : StageCache
        From :func:`pigment.pipeline.forward_batch`.
    params : PigmentModelParams
        Batched parameters used in that forward call.

    Returns
    -------
    d_raw, d_offsets, d_reconstruction, d_blend, d_colors
        ``d_blend`` is a dict keyed by blend tensor name (empty when bypassed).
    """
    upstream = np.asarray(upstream)
    U = np.asarray(params.reconstruction)
    if U.ndim == 2:
        U = U[None]
    phat = cache.blended
    if upstream.shape != phat.shape[:-1] + (3,) or U.shape[-1] != phat.shape[-1]:
        raise InternalConsistencyError(
            f"upstream {upstream.shape} / params do not match cached pigments {phat.shape}")
    b, p, n = phat.shape
    l = cache.ordinates.shape[-1]

    d_U = np.swapaxes(upstream, -1, -2) @ phat
    d_phat = upstream @ U

    blend = params.blend
    if blend.bypass:
        d_pbar, d_blend = d_phat, {}
    else:
        d_pbar, d_blend = blend_backward(d_phat, cache.reprojected, blend, cache.blend, cache.mode)

    # reprojection: linear in the two neighboring ordinates, slope in p
    idx, alpha = cache.segment, cache.alpha
    idx_t = np.swapaxes(idx, -1, -2)
    y_l = np.swapaxes(np.take_along_axis(cache.ordinates, idx_t, axis=-1), -1, -2)
    y_r = np.swapaxes(np.take_along_axis(cache.ordinates, idx_t + 1, axis=-1), -1, -2)
    slope = (y_r - y_l) * (l - 1)
    d_p = d_pbar * slope
    flat = ((np.arange(b)[:, None, None] * n + np.arange(n)[None, None, :]) * l + idx).ravel()
    size = b * n * l
    d_off = (np.bincount(flat, weights=(alpha * d_pbar).ravel(), minlength=size)
             + np.bincount(flat + 1, weights=((1 - alpha) * d_pbar).ravel(), minlength=size))
    d_off = d_off.reshape(b, n, l).astype(d_pbar.dtype, copy=False)

    d_what = np.swapaxes(cache.colors, -1, -2) @ d_p
    d_colors = d_p @ np.swapaxes(cache.normalized, -1, -2)
    d_raw = expansion_norm_backward(cache.expansion_raw, cache.normalized, d_what)
    return d_raw, d_off, d_U, d_blend, d_colors


def linear_backward(d_out, inputs, weight):
    """Gradients of ``y = x W^T + b``: returns (d_weight, d_bias, d_inputs)."""
    return d_out.T @ inputs, d_out.sum(axis=0), d_out @ weight


def backward_encoder(upstream: dict, cache: EncoderCache, weights: EncoderWeights) -> GradientBundle:
    """Gradients of every backbone and head tensor from head-output gradients.

    ``upstream`` maps head name to an array shaped like that head's reshaped
    output, (B, ...).
    """
    cfg = weights.config
    t = weights.tensors
    feats = cache.features
    if feats is None or set(upstream) != set(HEADS):
        raise InternalConsistencyError("encoder cache or upstream gradients incomplete")
    bsz = feats.shape[0]
    grads = GradientBundle()
    d_feats = np.zeros_like(feats)
    for head in HEADS:
        dy = np.asarray(upstream[head]).reshape(bsz, -1)
        if dy.shape[1] != t[f"head.{head}.fc2.bias"].shape[0]:
            raise InternalConsistencyError(f"upstream for head {head} has wrong size")
        dw2, db2, dh = linear_backward(dy, cache.head_hidden[head], t[f"head.{head}.fc2.weight"])
        dpre = dh * (cache.head_pre[head] > 0)
        dw1, db1, df = linear_backward(dpre, feats, t[f"head.{head}.fc1.weight"])
        grads[f"head.{head}.fc1.weight"] = dw1
        grads[f"head.{head}.fc1.bias"] = db1
        grads[f"head.{head}.fc2.weight"] = dw2
        grads[f"head.{head}.fc2.bias"] = db2
        d_feats += df

    _, ho, wo, c = cache.last_shape
    dx = np.broadcast_to(d_feats[:, None, None, :] / (ho * wo), cache.last_shape)
    slope = cfg.leaky_slope
    for i in reversed(range(len(cfg.channels))):
        z = cache.pre[i]
        dz = dx.reshape(z.shape) * np.where(z > 0, 1.0, slope).astype(z.dtype)
        wgt = t[f"backbone.{i}.weight"]
        grads[f"backbone.{i}.weight"] = (dz.T @ cache.cols[i]).reshape(wgt.shape)
        grads[f"backbone.{i}.bias"] = dz.sum(axis=0)
        if i > 0:
            dcols = dz @ wgt.reshape(wgt.shape[0], -1)
            dx = col2im(dcols, cache.in_shapes[i])
    return GradientBundle({k: grads[k] for k in t if k in grads})


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class Probe:
    """Value of a checked function plus what it knows about its own kinks.

    ``pigments`` are the pigment values fed to reprojection and ``knots``
    the interior knot abscissae; ``pattern`` is any comparable signature of
    the remaining piecewise choices (activation masks, residual signs).
    """

    value: float
    pigments: np.ndarray | None = None
    knots: np.ndarray | None = None
    pattern: bytes | None = None


@dataclass
class FDReport:
    max_rel_err: float
    argmax: int
    checked: int
    skipped: int
    indices: np.ndarray
    rel_errors: np.ndarray


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries meaningful."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _as_probe(res) -> Probe:
    return res if isinstance(res, Probe) else Probe(float(res))


def _crosses_knot(plus: Probe, minus: Probe, knot_guard: float) -> bool:
    if plus.pigments is None or minus.pigments is None or plus.knots is None:
        return False
    knots = np.asarray(plus.knots)
    if knots.size == 0:
        return False
    a, b = np.ravel(plus.pigments), np.ravel(minus.pigments)
    dist = np.min(np.abs(np.minimum(a, b)[:, None] - knots[None, :]), axis=1)
    near = dist < knot_guard
    if not near.any():
        return False
    seg_a = np.searchsorted(knots, a[near], side="right")
    seg_b = np.searchsorted(knots, b[near], side="right")
    return bool(np.any(seg_a != seg_b))


def finite_difference_check(f, params, analytic, step=1e-5, knot_guard=1e-3,
                            indices=None, floor=1e-6) -> FDReport:
    """Compare ``analytic`` against central differences of ``f``.

    ``f`` takes a flat parameter vector and returns a float or a
    :class:`Probe`.  Coordinates whose perturbation moves a pigment lying
    within ``knot_guard`` of a knot into another segment, or flips any other
    piecewise choice reported in ``Probe.pattern``, are skipped and counted.
    """
    if step <= 0:
        raise InvalidParameterError("step must be positive")
    theta = np.array(params, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != theta.shape:
        raise InternalConsistencyError("analytic gradient and parameters differ in size")
    indices = np.arange(theta.size) if indices is None else np.asarray(indices, dtype=int)

    checked, errs, skipped = [], [], 0
    for i in indices:
        orig = theta[i]
        theta[i] = orig + step
        plus = _as_probe(f(theta))
        theta[i] = orig - step
        minus = _as_probe(f(theta))
        theta[i] = orig
        if not (np.isfinite(plus.value) and np.isfinite(minus.value)):
            raise EvaluationError(f"function is not finite around coordinate {i}")
        if plus.pattern != minus.pattern or _crosses_knot(plus, minus, knot_guard):
            skipped += 1
            continue
        numeric = (plus.value - minus.value) / (2 * step)
        checked.append(i)
        errs.append(float(relative_error(analytic[i], numeric, floor)))

    errs = np.asarray(errs)
    checked = np.asarray(checked, dtype=int)
    if errs.size:
        k = int(np.argmax(errs))
        return FDReport(float(errs[k]), int(checked[k]), int(checked.size), skipped, checked, errs)
    return FDReport(0.0, -1, 0, skipped, checked, errs)


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    checked: int
    skipped: int
    size: int


def gradcheck_model(config=None, seed: int = 0, step: float = 1e-5, knot_guard: float = 1e-3,
                    samples_per_tensor: int = 32, batch: int = 2, crop: int = 4,
                    floor: float = 1e-6) -> list:
    """Check every trainable tensor of the full L1 training loss in float64.

    Small tensors are checked exhaustively; larger ones at
    ``samples_per_tensor`` seeded coordinates.
    """
    from .encoder import EncoderConfig, init_encoder
    from .trainer import loss_and_gradients

    config = config or EncoderConfig.tiny()
    rng = np.random.default_rng(seed)
    weights = init_encoder(config, seed, np.float64)
    # nonzero offsets so reprojection slopes differ from 1
    rng_off = np.random.default_rng(seed + 1)
    weights.tensors["head.offsets.fc2.weight"][...] = rng_off.uniform(
        -0.05, 0.05, weights.tensors["head.offsets.fc2.weight"].shape)
    weights.tensors["head.offsets.fc2.bias"][...] = rng_off.uniform(
        -0.05, 0.05, weights.tensors["head.offsets.fc2.bias"].shape)
    inputs = rng.uniform(0.05, 0.95, (batch, crop, crop, 3))
    targets = np.clip(inputs ** 0.7 + rng.normal(0, 0.02, inputs.shape), 0, 1)

    _, grads, _ = loss_and_gradients(weights, inputs, targets, update_stats=False)
    rows = []
    for name in weights.trainable_names():
        arr = weights.tensors[name]
        base = arr.copy()

        def f(vec, arr=arr):
            arr[...] = vec.reshape(arr.shape)
            loss, _, aux = loss_and_gradients(weights, inputs, targets, update_stats=False,
                                              compute_grad=False)
            return Probe(loss, aux["pigments"], aux["interior_knots"], aux["pattern"])

        if arr.size <= samples_per_tensor:
            idx = None
        else:
            idx = np.sort(rng.choice(arr.size, samples_per_tensor, replace=False))
        try:
            rep = finite_difference_check(f, base.ravel(), grads[name].ravel(), step,
                                          knot_guard, idx, floor)
        finally:
            arr[...] = base
        rows.append(TensorCheck(name, rep.max_rel_err, rep.checked, rep.skipped, arr.size))
    return rows


def format_gradcheck(rows) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'parameter':<{width}}  {'max_rel_err':>12}  {'checked':>7}  {'skipped':>7}"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.checked:7d}  {r.skipped:7d}")
    worst = max(r.max_rel_err for r in rows)
    lines.append(f"{'overall':<{width}}  {worst:12.3e}  {sum(r.checked for r in rows):7d}  "
                 f"{sum(r.skipped for r in rows):7d}")
    return "\n".join(lines)
