"""End-to-end training: L1 loss, Adam with L2 weight decay, cosine schedule.

One step runs the encoder on a batch of crops, pushes every crop through
the pipeline with its own predicted parameters (blending statistics are
shared across the whole batch), and backpropagates analytically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import EncoderCache, EncoderWeights, backbone_forward, heads_forward
from .errors import ConfigurationError, InvalidInputError, TrainingDivergenceError
from .gradients import GradientBundle, backward_encoder, backward_pipeline
from .pipeline import PigmentModelParams, forward_batch, knot_positions

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 16
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    crop_size: int = 256
    seed: int = 0
    eval_every: int = 0
    max_steps: int = 0
    # weight of the perceptual term; that term is not implemented (L1 only)
    lambda_perceptual: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 for batch statistics")
        if self.crop_size < 1:
            raise ConfigurationError("crop_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# ---------------------------------------------------------------------------
# loss and schedule


def _check_pair(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def l1_loss(pred, target) -> float:
    """Mean absolute difference over all pixels and channels."""
    pred, target = _check_pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def l1_loss_grad(pred, target):
    """Subgradient of :func:`l1_loss` with ``sign(0) = 0``."""
    pred, target = _check_pair(pred, target)
    return np.sign(pred - target) / pred.size


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ConfigurationError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One in-place bias-corrected Adam update; weight decay is added to the gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name}", tensor=name)
        if params[name].shape != np.shape(g):
            raise ConfigurationError(f"gradient for {name} has shape {np.shape(g)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# augmentation


def augment_pair(inp, target, crop: int, rng: np.random.Generator, flips: bool = True):
    """Same random crop window and flips applied to an input/target pair."""
    inp, target = np.asarray(inp), np.asarray(target)
    if inp.shape != target.shape:
        raise InvalidInputError(f"pair shapes differ: {inp.shape} vs {target.shape}")
    h, w = inp.shape[:2]
    if h < crop or w < crop:
        raise InvalidInputError(f"image {h}x{w} is smaller than crop {crop}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    a = inp[top:top + crop, left:left + crop]
    b = target[top:top + crop, left:left + crop]
    if flips:
        if rng.random() < 0.5:
            a, b = a[:, ::-1], b[:, ::-1]
        if rng.random() < 0.5:
            a, b = a[::-1], b[::-1]
    return np.ascontiguousarray(a), np.ascontiguousarray(b)


# ---------------------------------------------------------------------------
# full model loss


def forward_model(weights: EncoderWeights, inputs, mode: str = "train", update_stats: bool = True):
    """Encoder then pipeline on a batch of same-sized images ``(B, H, W, 3)``."""
    inputs = np.asarray(inputs, dtype=weights.dtype)
    if inputs.ndim != 4 or inputs.shape[-1] != 3:
        raise InvalidInputError(f"expected (B, H, W, 3) inputs, got {inputs.shape}")
    enc = EncoderCache()
    feats = backbone_forward(inputs, weights, enc)
    heads = heads_forward(feats, weights, enc)
    blend = weights.blend if update_stats else weights.blend.copy()
    b = inputs.shape[0]
    out, pcache = forward_batch(inputs.reshape(b, -1, 3), heads["expansion"], heads["offsets"],
                                heads["reconstruction"], blend, mode)
    return out.reshape(inputs.shape), heads, enc, pcache, blend


def _pattern(enc: EncoderCache, pcache, residual) -> bytes:
    parts = [pcache.segment.astype(np.int16).tobytes(), np.packbits(residual > 0).tobytes(),
             np.packbits(residual < 0).tobytes()]
    if "pre_relu" in pcache.blend:
        parts.append(np.packbits(pcache.blend["pre_relu"] > 0).tobytes())
    parts += [np.packbits(z > 0).tobytes() for z in enc.pre]
    parts += [np.packbits(enc.head_pre[h] > 0).tobytes() for h in sorted(enc.head_pre)]
    return b"".join(parts)


def loss_and_gradients(weights: EncoderWeights, inputs, targets, mode: str = "train",
                       update_stats: bool = True, compute_grad: bool = True):
    """L1 training loss of the full model and its gradient bundle.

    Returns ``(loss, grads, aux)``; ``grads`` is None when ``compute_grad``
    is false.  ``aux`` carries the prediction and kink bookkeeping used by
    finite-difference checks.
    """
    targets = np.asarray(targets)
    pred, heads, enc, pcache, blend = forward_model(weights, inputs, mode, update_stats)
    loss = l1_loss(pred, targets)
    aux = {
        "pred": pred,
        "pigments": pcache.pigments,
        "interior_knots": knot_positions(weights.config.num_points, pred.dtype)[1:-1],
        "pattern": _pattern(enc, pcache, pred - targets),
    }
    if not compute_grad:
        return loss, None, aux

    b = pred.shape[0]
    d_pred = l1_loss_grad(pred, targets).astype(pred.dtype).reshape(b, -1, 3)
    params = PigmentModelParams(heads["expansion"], heads["offsets"], heads["reconstruction"], blend)
    d_raw, d_off, d_U, d_blend, _ = backward_pipeline(d_pred, pcache, params)
    grads = backward_encoder({"expansion": d_raw, "offsets": d_off, "reconstruction": d_U},
                             enc, weights)
    for name in weights.trainable_names():
        if name.startswith("blend."):
            g = d_blend.get(name[len("blend."):])
            grads[name] = np.zeros_like(weights.tensors[name]) if g is None else g
    return loss, GradientBundle(grads), aux


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    weights: EncoderWeights
    losses: list
    log_lines: list


LOG_HEADER = "epoch,step,lr,loss,psnr,ssim,delta_e"


def evaluate(weights: EncoderWeights, pairs, threads: int | None = 1) -> dict:
    """Mean PSNR / SSIM / Delta E over ``(input, target)`` pairs in eval mode."""
    from .encoder import enhance_image
    from .metrics import delta_e_ab, psnr, ssim

    vals = {"psnr": [], "ssim": [], "delta_e": []}
    for inp, tgt in pairs:
        out = enhance_image(inp, weights, threads=threads)
        vals["psnr"].append(psnr(out, tgt))
        vals["ssim"].append(ssim(out, tgt) if min(out.shape[:2]) >= 11 else float("nan"))
        vals["delta_e"].append(delta_e_ab(out, tgt))
    return {k: float(np.mean(v)) for k, v in vals.items()}


def train_loop(train_pairs, weights: EncoderWeights, config: TrainConfig, eval_pairs=None,
               log_file=None, threads: int | None = 1, dump_path=None) -> TrainResult:
    """Train ``weights`` in place on ``(input, target)`` image pairs.

    Every step draws a batch from a per-epoch shuffle, crops and flips each
    pair, takes an Adam step at the cosine learning rate for that step and
    appends one comma-separated log line.  Eval metrics are filled in every
    ``eval_every`` steps (and at the last step) when ``eval_pairs`` is given.
    If the loss or a gradient stops being finite, the weights as they were
    before that step are written to ``dump_path`` (when given) and
    :class:`TrainingDivergenceError` is raised.
    """
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise InvalidInputError("training split is empty")
    rng = np.random.default_rng(config.seed)
    n = len(train_pairs)
    per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * per_epoch
    if config.max_steps:
        total = min(total, config.max_steps)
    crop = min([config.crop_size] + [min(p[0].shape[:2]) for p in train_pairs])

    state = AdamState()
    params = {k: weights.tensors[k] for k in weights.trainable_names()}
    losses, lines = [], []
    if log_file is not None:
        log_file.write(LOG_HEADER + "\n")
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if step >= total:
                break
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                idx = np.concatenate([idx, order[:2 - len(idx)]])
            crops = [augment_pair(*train_pairs[i], crop, rng) for i in idx]
            inputs = np.stack([c[0] for c in crops])
            targets = np.stack([c[1] for c in crops])
            lr = cosine_lr(step, total, config.lr0)
            snapshot = weights.copy() if dump_path is not None else None
            try:
                loss, grads, _ = loss_and_gradients(weights, inputs, targets)
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(f"loss became {loss} at step {step}")
                adam_step(params, grads, state, lr, config.weight_decay)
            except TrainingDivergenceError:
                if snapshot is not None:
                    from .dataio import save_model
                    save_model(snapshot, dump_path)
                    log.error("training diverged at step %d; weights dumped to %s", step, dump_path)
                raise
            step += 1
            losses.append(loss)

            metrics = {}
            if eval_pairs and ((config.eval_every and step % config.eval_every == 0)
                               or step == total):
                metrics = evaluate(weights, eval_pairs, threads)
                log.info("step %d loss %.5f psnr %.2f", step, loss, metrics["psnr"])
            line = ",".join([str(epoch), str(step), repr(lr), repr(loss)]
                            + [repr(metrics[k]) if k in metrics else ""
                               for k in ("psnr", "ssim", "delta_e")])
            lines.append(line)
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
        if step >= total:
            break
    return TrainResult(weights, losses, lines)
