"""Image files, paired datasets, synthetic data and the model file format.

Dataset layout::

    root/input/NNNN.ppm
    root/target/NNNN.ppm
    root/train.txt        one basename per line
    root/test.txt

Model file layout (all integers little-endian)::

    b"PGMT" | u32 version | u32 header length | JSON header | float32 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._png import SIGNATURE as PNG_SIGNATURE
from ._png import read_png, write_png
from .encoder import EncoderConfig, EncoderWeights
from .errors import (
    BadMagicError,
    ImageFormatError,
    InvalidInputError,
    LengthMismatchError,
    ModelFormatError,
    VersionMismatchError,
)

MAGIC = b"PGMT"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# images


def _read_token(data: bytes, pos: int):
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PPM header")
    return data[start:pos], pos


def read_ppm(data: bytes):
    """Decode binary PPM/PGM bytes into ``(integer array (H, W, C), maxval)``."""
    magic, pos = _read_token(data, 0)
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"unsupported PNM type {magic!r}")
    vals = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            vals.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"bad PPM header field {tok!r}") from None
    width, height, maxval = vals
    if width <= 0 or height <= 0:
        raise ImageFormatError("PPM has zero dimensions")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"bad PPM maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    chans = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height * chans
    raster = data[pos:pos + count * dtype.itemsize]
    if len(raster) < count * dtype.itemsize:
        raise ImageFormatError("truncated PPM raster")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    return arr.reshape(height, width, chans), maxval


def write_ppm(arr, maxval: int) -> bytes:
    h, w, _ = arr.shape
    body = arr.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    return f"P6\n{w} {h}\n{maxval}\n".encode() + body


def _to_rgb(arr):
    if arr.shape[2] in (1, 2):
        return np.repeat(arr[..., :1], 3, axis=2)
    return arr[..., :3]


def read_image_file(path):
    """Raw integer pixels and the full-scale value of an image file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from None
    if data.startswith(PNG_SIGNATURE):
        arr, depth = read_png(data)
        maxval = 65535 if depth == 16 else 255
    elif data[:2] in (b"P6", b"P5"):
        arr, maxval = read_ppm(data)
    else:
        raise ImageFormatError(f"{path}: unsupported image format")
    return _to_rgb(arr), maxval


def load_image(path, dtype=np.float32) -> np.ndarray:
    """Load a PNG or binary PPM as an ``(H, W, 3)`` float array in [0, 1]."""
    arr, maxval = read_image_file(path)
    return (arr.astype(np.float64) / maxval).astype(dtype)


def image_depth(path) -> int:
    return 16 if read_image_file(path)[1] > 255 else 8


def quantize(img, depth: int = 8) -> np.ndarray:
    """Clamp to [0, 1] and round half up to integer levels."""
    if depth not in (8, 16):
        raise InvalidInputError(f"depth must be 8 or 16, got {depth}")
    maxval = 255 if depth == 8 else 65535
    q = np.floor(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * maxval + 0.5)
    return q.astype(np.uint8 if depth == 8 else np.uint16)


def save_image(img, path, depth: int = 8):
    """Write ``img`` as PNG (``.png``) or binary PPM (anything else)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInputError(f"expected an H x W x 3 image, got shape {img.shape}")
    q = quantize(img, depth)
    path = Path(path)
    if path.suffix.lower() == ".png":
        data = write_png(q, depth)
    else:
        data = write_ppm(q, 255 if depth == 8 else 65535)
    path.write_bytes(data)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class PairedDataset:
    root: Path
    pairs: list = field(default_factory=list)
    split: str = "train"

    def __len__(self):
        return len(self.pairs)

    def load_pairs(self, dtype=np.float32) -> list:
        out = []
        for inp, tgt in self.pairs:
            a, b = load_image(inp, dtype), load_image(tgt, dtype)
            if a.shape != b.shape:
                raise InvalidInputError(f"pair {inp.name} has mismatched sizes")
            out.append((a, b))
        return out


def load_dataset(root, split: str = "train") -> PairedDataset:
    """Pairs listed in ``root/<split>.txt`` (every input file if the list is missing)."""
    root = Path(root)
    listing = root / f"{split}.txt"
    if listing.exists():
        names = [ln.strip() for ln in listing.read_text().splitlines() if ln.strip()]
    else:
        names = sorted(p.name for p in (root / "input").glob("*") if p.is_file())
    pairs = []
    for name in names:
        inp = _find(root / "input", name)
        tgt = _find(root / "target", name)
        pairs.append((inp, tgt))
    if not pairs:
        raise InvalidInputError(f"dataset split {split!r} under {root} is empty")
    return PairedDataset(root, pairs, split)


def _find(folder: Path, name: str) -> Path:
    direct = folder / name
    if direct.exists():
        return direct
    for ext in (".ppm", ".png", ".pnm"):
        cand = folder / (name + ext)
        if cand.exists():
            return cand
    raise InvalidInputError(f"missing dataset file {folder / name}")


# ---------------------------------------------------------------------------
# synthetic pairs


def _curve(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise InvalidInputError("curve needs a list of at least two [x, y] points")
    if np.any(np.diff(pts[:, 0]) <= 0):
        raise InvalidInputError("curve x coordinates must increase")
    return pts


def make_transform(spec: dict):
    """Build a color transform ``f(img) -> img`` from a JSON-style spec.

    Supported types: ``gamma`` (``"gamma": g``), ``channel_mix``
    (``"matrix"``: 3x3, ``out = M @ c``), ``curve`` (``"points"`` shared by
    all channels or ``"channels"``: three point lists) and ``compose``
    (``"steps"`` applied first to last).  Results are clamped to [0, 1]
    after every step.
    """
    if not isinstance(spec, dict) or "type" not in spec:
        raise InvalidInputError(f"transform spec must be an object with a type: {spec!r}")
    kind = spec["type"]
    if kind == "gamma":
        g = float(spec.get("gamma", 1.0))
        if not g > 0:
            raise InvalidInputError("gamma must be positive")
        return lambda x: np.clip(x, 0, 1) ** g
    if kind == "channel_mix":
        m = np.asarray(spec.get("matrix"), dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise InvalidInputError("channel_mix needs a finite 3x3 matrix")
        return lambda x: np.clip(x @ m.T, 0, 1)
    if kind == "curve":
        if "channels" in spec:
            curves = [_curve(c) for c in spec["channels"]]
            if len(curves) != 3:
                raise InvalidInputError("curve needs exactly three channel curves")
        else:
            curves = [_curve(spec.get("points"))] * 3
        return lambda x: np.clip(np.stack(
            [np.interp(x[..., k], c[:, 0], c[:, 1]) for k, c in enumerate(curves)], axis=-1), 0, 1)
    if kind == "compose":
        steps = [make_transform(s) for s in spec.get("steps", [])]
        if not steps:
            raise InvalidInputError("compose needs at least one step")

        def run(x):
            for f in steps:
                x = f(x)
            return x
        return run
    raise InvalidInputError(f"unknown transform type {kind!r}")


def smooth_color_field(size: int, rng: np.random.Generator) -> np.ndarray:
    """A random low-frequency color image in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    for c in range(3):
        acc = np.zeros((size, size))
        for _ in range(4):
            fx, fy = rng.uniform(0.3, 2.5, 2) * rng.choice([-1, 1], 2)
            acc += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        acc = (acc - acc.min()) / max(acc.max() - acc.min(), 1e-12)
        lo, hi = rng.uniform(0.0, 0.3), rng.uniform(0.7, 1.0)
        img[..., c] = lo + (hi - lo) * acc
    # mild cross-channel correlation, as in real photographs
    mix = np.eye(3) * 0.6 + 0.4 / 3
    return np.clip(img @ mix.T, 0, 1)


def synthesize_pairs(spec: dict, count: int, size: int, seed: int):
    """In-memory ``(inputs, targets)`` lists; a pure function of its arguments."""
    if count < 1 or size < 1:
        raise InvalidInputError("count and size must be positive")
    f = make_transform(spec)
    rng = np.random.default_rng(seed)
    inputs = [smooth_color_field(size, rng) for _ in range(count)]
    return inputs, [f(x) for x in inputs]


def generate_synthetic_pairs(spec: dict, count: int, size: int, seed: int, root,
                             test_fraction: float = 0.2) -> PairedDataset:
    """Write ``count`` synthetic pairs under ``root`` and return the train split.

    The last ``round(count * test_fraction)`` pairs form the test split.
    Images are stored as 16-bit PPM so targets keep their precision.
    """
    inputs, targets = synthesize_pairs(spec, count, size, seed)
    root = Path(root)
    (root / "input").mkdir(parents=True, exist_ok=True)
    (root / "target").mkdir(parents=True, exist_ok=True)
    names = [f"{i:04d}.ppm" for i in range(count)]
    for name, a, b in zip(names, inputs, targets):
        save_image(a, root / "input" / name, depth=16)
        save_image(b, root / "target" / name, depth=16)
    n_test = int(round(count * test_fraction))
    n_test = min(n_test, count - 1)
    train, test = names[:count - n_test], names[count - n_test:]
    (root / "train.txt").write_text("".join(n + "\n" for n in train))
    (root / "test.txt").write_text("".join(n + "\n" for n in test))
    (root / "spec.json").write_text(json.dumps(spec))
    return load_dataset(root, "train")


# ---------------------------------------------------------------------------
# model files


def save_model(weights: EncoderWeights, path, config: EncoderConfig | None = None):
    config = config or weights.config
    manifest, blobs, offset = [], [], 0
    for name, arr in weights.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "config": config.to_dict(),
        "N": config.num_pigments,
        "L": config.num_points,
        "blend_bypass": weights.blend_bypass,
        "tensors": manifest,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes)
        for blob in blobs:
            fh.write(blob)


def load_model(path):
    """Read a model file; returns ``(EncoderWeights, EncoderConfig)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise LengthMismatchError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 12 + hlen:
        raise LengthMismatchError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header ({exc})") from None
    payload = data[12 + hlen:]
    expected = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"])
    if len(payload) != expected or header.get("payload_bytes", expected) != expected:
        raise LengthMismatchError(
            f"{path}: payload is {len(payload)} bytes, manifest describes {expected}")
    config = EncoderConfig.from_dict(header["config"])
    tensors = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        if not 0 <= t["offset"] <= len(payload) - 4 * count:
            raise LengthMismatchError(f"{path}: tensor {t['name']} lies outside the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=t["offset"])
        tensors[t["name"]] = arr.astype(np.float32).reshape(t["shape"])
    return EncoderWeights(config, tensors, header.get("blend_bypass", False)), config
