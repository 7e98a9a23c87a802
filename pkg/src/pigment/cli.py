"""Command-line interface: ``pigment <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, PigmentError

GRADCHECK_TOLERANCE = 1e-4

_ALIASES = {"N": "num_pigments", "L": "num_points", "C": "bottleneck"}


@dataclass
class RunConfig:
    """Encoder + training settings and paths, merged from a JSON file and overrides."""

    encoder: object
    train: object
    data: Path | None = None
    out: Path | None = None

    @classmethod
    def from_mapping(cls, values: dict, data=None, out=None) -> "RunConfig":
        from .encoder import EncoderConfig
        from .trainer import TrainConfig

        enc_keys = set(EncoderConfig.__dataclass_fields__)
        train_keys = set(TrainConfig.__dataclass_fields__)
        enc, tr = {}, {}
        for key, val in values.items():
            name = _ALIASES.get(key, key)
            if name in enc_keys:
                enc[name] = val
            elif name in train_keys:
                tr[name] = val
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
        cfg = cls(EncoderConfig(**enc), TrainConfig(**tr),
                  Path(data) if data else None, Path(out) if out else None)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None, data=None, out=None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(values, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
        values.update(overrides or {})
        return cls.from_mapping(values, data, out)

    def validate(self):
        if self.data is not None and not self.data.exists():
            raise ConfigurationError(f"data directory {self.data} does not exist")
        if self.out is not None and not self.out.parent.exists():
            raise ConfigurationError(f"output directory {self.out.parent} does not exist")


def _parse_override(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pigment", description="Pigment-based image enhancement")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def threads(p):
        p.add_argument("--threads", type=_positive_int, default=None,
                       help="worker threads for pixel-parallel stages (default: $PGMT_THREADS or all CPUs)")

    p = sub.add_parser("train", help="train an encoder on a paired dataset")
    p.add_argument("--config", required=True, help="JSON config with flat keys (N, L, lr0, ...)")
    p.add_argument("--data", required=True, help="dataset root (input/, target/, train.txt)")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], type=_parse_override,
                   metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--log", default=None, help="metrics log path (default: <out>.log.csv)")
    threads(p)

    p = sub.add_parser("enhance", help="enhance one image with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, choices=(8, 16), default=8)
    threads(p)

    p = sub.add_parser("eval", help="PSNR / SSIM / Delta E of a model on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    threads(p)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--spec", required=True, help="JSON transform spec file")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--size", type=_positive_int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = sub.add_parser("analyze", help="1D vs 3D LUT cell utilization per image")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True, nargs="+")
    p.add_argument("--lut-size", type=int, default=33)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--tiny", action="store_true", help="use the desk-scale encoder config")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--knot-guard", type=float, default=1e-3)
    p.add_argument("--samples", type=_positive_int, default=32,
                   help="coordinates checked per tensor (small tensors are checked fully)")
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_train(args) -> int:
    from .dataio import load_dataset, save_model
    from .encoder import init_encoder
    from .trainer import train_loop

    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = RunConfig.load(args.config, overrides, args.data, args.out)
    train_pairs = load_dataset(cfg.data, "train").load_pairs()
    eval_pairs = None
    if (cfg.data / "test.txt").exists():
        eval_pairs = load_dataset(cfg.data, "test").load_pairs()
    weights = init_encoder(cfg.encoder, cfg.train.seed)
    log_path = Path(args.log) if args.log else Path(str(cfg.out) + ".log.csv")
    with open(log_path, "w") as fh:
        result = train_loop(train_pairs, weights, cfg.train, eval_pairs, fh, threads=args.threads,
                            dump_path=str(cfg.out) + ".diverged.pgmt")
    save_model(result.weights, cfg.out)
    print(f"trained {len(result.losses)} steps, final loss {result.losses[-1]:.6f}; "
          f"model written to {cfg.out}")
    return 0


def cmd_enhance(args) -> int:
    from .dataio import load_image, load_model, save_image
    from .encoder import encode_features, predict_parameters
    from .pipeline import apply_pipeline_image

    weights, _ = load_model(args.model)
    img = load_image(args.inp)
    params = predict_parameters(encode_features(img, weights), weights)
    start = time.perf_counter()
    out = apply_pipeline_image(img, params, "eval", threads=args.threads)
    elapsed = time.perf_counter() - start
    save_image(out, args.out, args.depth)
    mpix = img.shape[0] * img.shape[1] / 1e6
    print(f"apply: {mpix / max(elapsed, 1e-9):.2f} MP/s ({elapsed * 1e3:.1f} ms)", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from .dataio import load_dataset, load_model
    from .encoder import enhance_image
    from .metrics import delta_e_ab, psnr, ssim

    weights, _ = load_model(args.model)
    ds = load_dataset(args.data, args.split)
    rows = []
    for (inp_path, _), (inp, tgt) in zip(ds.pairs, ds.load_pairs()):
        out = enhance_image(inp, weights, threads=args.threads)
        s = ssim(out, tgt) if min(out.shape[:2]) >= 11 else float("nan")
        rows.append((inp_path.name, psnr(out, tgt), s, delta_e_ab(out, tgt)))
    width = max(len("mean"), max(len(r[0]) for r in rows))
    print(f"{'image':<{width}}  {'PSNR':>8}  {'SSIM':>7}  {'dE_ab':>7}")
    for name, p, s, d in rows:
        print(f"{name:<{width}}  {p:8.3f}  {s:7.4f}  {d:7.3f}")
    means = np.mean([r[1:] for r in rows], axis=0)
    print(f"{'mean':<{width}}  {means[0]:8.3f}  {means[1]:7.4f}  {means[2]:7.3f}")
    return 0


def cmd_synth(args) -> int:
    from .dataio import generate_synthetic_pairs

    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigurationError(f"spec file {spec_path} does not exist")
    try:
        spec = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{spec_path}: invalid JSON ({exc})") from None
    ds = generate_synthetic_pairs(spec, args.count, args.size, args.seed, args.out,
                                  args.test_fraction)
    print(f"wrote {args.count} pairs to {args.out} ({len(ds)} train)")
    return 0


def cmd_analyze(args) -> int:
    from .analysis import UtilizationRow, format_utilization, utilization_1d, utilization_3d
    from .dataio import load_image, load_model
    from .encoder import encode_features, predict_parameters

    weights, _ = load_model(args.model)
    rows = []
    for path in args.inp:
        img = load_image(path)
        params = predict_parameters(encode_features(img, weights), weights)
        rows.append(UtilizationRow(Path(path).name, utilization_1d(img, params),
                                   utilization_3d(img, args.lut_size)))
    print(format_utilization(rows))
    return 0


def cmd_gradcheck(args) -> int:
    from .encoder import EncoderConfig
    from .gradients import format_gradcheck, gradcheck_model

    config = EncoderConfig.tiny() if args.tiny else EncoderConfig()
    rows = gradcheck_model(config, seed=args.seed, step=args.step, knot_guard=args.knot_guard,
                           samples_per_tensor=args.samples)
    print(format_gradcheck(rows))
    worst = max(r.max_rel_err for r in rows)
    ok = worst < GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PigmentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
