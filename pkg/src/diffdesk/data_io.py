"""Synthetic dataset generation, PPM image files, checkpoints, and reports."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadChecksumError,
    BadMagicError,
    BadVersionError,
    ConfigError,
    MalformedHeaderError,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
)
from .rng import Rng

# ---------------------------------------------------------------------------
# synthetic shapes dataset

CLASS_NAMES = ("circle", "square", "triangle", "stripes")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic dataset of flat-colored geometric shapes."""

    size: int = 32
    count: int = 2000
    classes: tuple[str, ...] = CLASS_NAMES
    noise_amplitude: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.size < 8:
            raise ConfigError("synthetic images must be at least 8x8")
        if self.count < 0:
            raise ConfigError("count must be nonnegative")
        unknown = set(self.classes) - set(CLASS_NAMES)
        if unknown:
            raise ConfigError(f"unknown shape classes: {sorted(unknown)}")
        if not (0.0 <= self.noise_amplitude < 0.2):
            raise ConfigError("noise amplitude must lie in [0, 0.2)")


# Saturated palette; shapes pick a color distinct from their background.
PALETTE = np.array(
    [
        [0.92, 0.18, 0.16],
        [0.16, 0.60, 0.94],
        [0.98, 0.80, 0.12],
        [0.20, 0.78, 0.35],
        [0.88, 0.32, 0.80],
        [0.95, 0.55, 0.10],
        [0.12, 0.85, 0.82],
        [0.90, 0.90, 0.88],
    ]
)


def _render_shape(cls: str, size: int, rng: Rng) -> np.ndarray:
    """One (size, size, 3) image in [0, 1]; all randomness from `rng`."""
    draw = rng.derive("params")
    bg_idx = int(draw.integers(0, len(PALETTE) - 1))
    fg_idx = int(draw.integers(0, len(PALETTE) - 2))
    if fg_idx >= bg_idx:
        fg_idx += 1
    bg = PALETTE[bg_idx] * float(draw.uniform(0.25, 0.55))
    fg = PALETTE[fg_idx]
    img = np.empty((size, size, 3))
    img[:] = bg
    yy, xx = np.mgrid[0:size, 0:size]
    cy = float(draw.uniform(0.3, 0.7)) * size
    cx = float(draw.uniform(0.3, 0.7)) * size
    r = float(draw.uniform(0.18, 0.32)) * size
    if cls == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif cls == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif cls == "triangle":
        # downward-growing isoceles triangle, apex at (cy - r, cx)
        mask = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) / 2.0)
    elif cls == "stripes":
        # half-period stays at or above size/8 so a 4x-downsampled latent
        # grid can still represent the pattern
        period = 2 * int(draw.integers(4, max(4, size // 4)))
        phase = int(draw.integers(0, period - 1))
        horizontal = int(draw.integers(0, 1)) == 1
        coord = yy if horizontal else xx
        mask = ((coord + phase) // (period // 2)) % 2 == 0
    else:  # pragma: no cover - guarded by SyntheticSpec.validate
        raise ConfigError(f"unknown class {cls!r}")
    img[mask] = fg
    return img


def generate_synthetic_dataset(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render `spec.count` images; classes cycle so counts split evenly.

    Returns (images (count, size, size, 3) in [0, 1], labels (count,) int).
    Deterministic: image i depends only on (seed, i).
    """
    spec.validate()
    base = Rng(spec.seed).derive("synthetic")
    images = np.empty((spec.count, spec.size, spec.size, 3))
    labels = np.empty(spec.count, dtype=np.int64)
    for i in range(spec.count):
        cls_idx = i % len(spec.classes)
        rng_i = base.derive("img", i)
        img = _render_shape(spec.classes[cls_idx], spec.size, rng_i)
        if spec.noise_amplitude > 0.0:
            img = img + rng_i.derive("bgnoise").uniform(
                -spec.noise_amplitude, spec.noise_amplitude, img.shape
            )
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = cls_idx
    return images, labels


# ---------------------------------------------------------------------------
# PPM (P6) image files


def save_image(x: np.ndarray, path) -> None:
    """Write an (H, W, 3) image in [0, 1] as binary 8-bit P6."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ConfigError(f"save_image expects (H, W, 3), got {x.shape}")
    q = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P6\n{x.shape[1]} {x.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + q.tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited token, skipping '#' comment lines."""
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise MalformedHeaderError("unexpected end of PPM header")
    return buf[start:pos], pos


def load_image(path) -> np.ndarray:
    """Read a binary 8-bit P6 file into an (H, W, 3) float image in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise MalformedHeaderError(f"not a P6 file (magic {buf[:2]!r})")
    pos = 2
    try:
        wtok, pos = _read_token(buf, pos)
        htok, pos = _read_token(buf, pos)
        mtok, pos = _read_token(buf, pos)
        width, height, maxval = int(wtok), int(htok), int(mtok)
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric PPM header field: {exc}") from exc
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"bad extents {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # exactly one whitespace byte separates header and payload
    payload = buf[pos : pos + 3 * width * height]
    if len(payload) < 3 * width * height:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header promises {3 * width * height}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"DADT"
CHECKPOINT_VERSION = 1

_CRC64_POLY = 0x42F0E1EBA9EA3693  # ECMA-182
_CRC64_TABLE = []
for _byte in range(256):
    _crc = _byte << 56
    for _ in range(8):
        _crc = ((_crc << 1) ^ _CRC64_POLY if _crc & (1 << 63) else _crc << 1) & 0xFFFFFFFFFFFFFFFF
    _CRC64_TABLE.append(_crc)


def crc64(data: bytes) -> int:
    crc = 0
    for b in data:
        crc = (_CRC64_TABLE[((crc >> 56) ^ b) & 0xFF] ^ (crc << 8)) & 0xFFFFFFFFFFFFFFFF
    return crc


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    return buf[pos : pos + n].decode("utf-8"), pos + n


def save_checkpoint(model, path, schedule_betas: np.ndarray | None = None, extra: dict | None = None) -> None:
    """Serialize a model: magic, version, kind, descriptor, schedule, params.

    Parameters are stored as little-endian float32; a trailing CRC-64 of all
    preceding bytes detects corruption.  `extra` entries are merged into the
    architecture descriptor (e.g. the composed latent scale).
    """
    descriptor = dict(model.arch.to_dict())
    if getattr(model, "holdout_mae", None) is not None:
        descriptor["holdout_mae"] = model.holdout_mae
    if extra:
        descriptor.update(extra)
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    parts.append(_pack_str(model.kind))
    parts.append(_pack_str(json.dumps(descriptor, sort_keys=True, separators=(",", ":"))))
    betas = np.asarray(schedule_betas, dtype=np.float64) if schedule_betas is not None else np.empty(0)
    parts.append(struct.pack("<I", betas.size))
    parts.append(betas.astype("<f8").tobytes())
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        data = params[name].data
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.astype("<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<Q", crc64(body)))


def load_checkpoint(path) -> dict:
    """Parse and verify a checkpoint; returns kind, descriptor, betas, params.

    Rebuilding the concrete model from the descriptor is the caller's job
    (see `models_from_checkpoint` in the cli module), which keeps this layer
    free of model-class knowledge.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 14 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {blob[:4]!r})")
    body, (stored_crc,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if crc64(body) != stored_crc:
        raise BadChecksumError("checkpoint checksum mismatch; file is corrupt")
    pos = 4
    (version,) = struct.unpack_from("<H", body, pos)
    pos += 2
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"checkpoint version {version}; supported versions: {CHECKPOINT_VERSION}")
    kind, pos = _unpack_str(body, pos)
    desc_json, pos = _unpack_str(body, pos)
    descriptor = json.loads(desc_json)
    (n_betas,) = struct.unpack_from("<I", body, pos)
    pos += 4
    betas = np.frombuffer(body[pos : pos + 8 * n_betas], dtype="<f8").copy()
    pos += 8 * n_betas
    (n_params,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        name, pos = _unpack_str(body, pos)
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = (
            np.frombuffer(body[pos : pos + 4 * count], dtype="<f4").astype(np.float64).reshape(shape)
        )
        pos += 4 * count
    return {"kind": kind, "descriptor": descriptor, "betas": betas, "params": params}


def parameter_hash(model) -> str:
    """SHA-256 over the canonical float32 serialization of all parameters."""
    h = hashlib.sha256()
    params = model.parameters()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(params[name].data.astype("<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    """Tabular experiment results serialized to both CSV and JSON."""

    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ConfigError(f"report row has {len(values)} cells, expected {len(self.columns)}")
        self.rows.append(tuple(values))


def _format_cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def write_report(report: Report, path_base) -> None:
    """Emit `<base>.csv` and `<base>.json` with identical cell values."""
    path_base = str(path_base)
    lines = [",".join(report.columns)]
    for row in report.rows:
        lines.append(",".join(_format_cell(v) for v in row))
    with open(path_base + ".csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    payload = {
        "columns": list(report.columns),
        "rows": [[_format_cell(v) for v in row] for row in report.rows],
    }
    with open(path_base + ".json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
