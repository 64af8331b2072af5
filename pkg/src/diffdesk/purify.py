"""Purification pipelines: diffusion-based purifiers and simple baselines.

Every purifier maps a (possibly protected) image in [0, 1] to a purified
image of the same shape, clamped back to [0, 1].  Diffusion purifiers are
deterministic under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .diffusion import sdedit_batch
from .errors import ConfigError, ShapeError
from .models import LatentDiffusionModel, UNetDenoiser, ldm_edit_batch
from .rng import Rng

PURIFY_METHODS = ("pdm_pure", "grid_pure", "ldm_pure", "jpeg_dct", "crop_resize", "highfreq_filter")


@dataclass(frozen=True)
class PurifyConfig:
    """Declarative description of one purification run."""

    method: str
    t_star: int = 10  # diffusion methods
    grid_cell: int = 8  # grid_pure: cell g; windows are 2g x 2g at stride g
    quality: int = 65  # jpeg_dct
    crop_fraction: float = 0.2  # crop_resize
    resample_factor: int = 1  # pdm_pure: optional down/up factor
    filter_radius: int = 2  # highfreq_filter
    filter_eps: float = 0.02  # highfreq_filter
    seed: int = 0

    def validate(self) -> None:
        if self.method not in PURIFY_METHODS:
            raise ConfigError(f"unknown purify method {self.method!r}; expected one of {PURIFY_METHODS}")
        if self.t_star < 0:
            raise ConfigError("t_star must be nonnegative")
        if not (1 <= self.quality <= 100):
            raise ConfigError(f"jpeg quality must lie in [1, 100], got {self.quality}")
        if not (0.0 <= self.crop_fraction < 0.5):
            raise ConfigError(f"crop fraction must lie in [0, 0.5), got {self.crop_fraction}")
        if self.grid_cell < 2:
            raise ConfigError("grid cell must be at least 2")
        if self.resample_factor not in (1, 2):
            raise ConfigError("resample factor must be 1 or 2")
        if self.filter_radius < 1:
            raise ConfigError("filter radius must be >= 1")
        if self.filter_eps <= 0.0:
            raise ConfigError("filter eps must be positive")


def clamp01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# resampling helpers


def area_downsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks; (H, W, C) input."""
    h, w, c = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"extents {h}x{w} not divisible by factor {factor}")
    return x.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and clamped edges."""
    h, w = x.shape[:2]
    if (h, w) == (out_h, out_w):
        return x.copy()
    sy = h / out_h
    sx = w / out_w
    ys = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = x[y0][:, x0] * (1 - fx) + x[y0][:, x1] * fx
    bot = x[y1][:, x0] * (1 - fx) + x[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def box_mean(x: np.ndarray, radius: int) -> np.ndarray:
    """Mean over (2r+1)^2 windows, normalized by the in-bounds window size."""
    h, w = x.shape[:2]
    integral = np.zeros((h + 1, w + 1) + x.shape[2:])
    integral[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    # window [y-r, y+r] x [x-r, x+r] clipped to the image
    lo_y = np.clip(np.arange(h) - radius, 0, h - 1)
    hi_y = np.clip(np.arange(h) + radius, 0, h - 1)
    lo_x = np.clip(np.arange(w) - radius, 0, w - 1)
    hi_x = np.clip(np.arange(w) + radius, 0, w - 1)
    s = (
        integral[np.ix_(hi_y + 1, hi_x + 1)]
        - integral[np.ix_(lo_y, hi_x + 1)]
        - integral[np.ix_(hi_y + 1, lo_x)]
        + integral[np.ix_(lo_y, lo_x)]
    )
    counts = ((hi_y - lo_y + 1)[:, None] * (hi_x - lo_x + 1)[None, :]).astype(np.float64)
    return s / counts.reshape(counts.shape + (1,) * (x.ndim - 2))


# ---------------------------------------------------------------------------
# diffusion purifiers


def pdm_pure(pdm: UNetDenoiser, x: np.ndarray, cfg: PurifyConfig) -> np.ndarray:
    """Pixel-space SDEdit, optionally sandwiched between down/up resampling.

    The multi-resolution production pipeline collapses at toy scale to one
    native resolution: area-average down by `resample_factor`, edit at
    t_star, bilinear back up.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    sched = pdm.schedule
    if cfg.t_star > sched.T:
        raise ConfigError(f"t_star={cfg.t_star} exceeds schedule length {sched.T}")
    if cfg.t_star == 0 and cfg.resample_factor == 1:
        return x.copy()
    work = x if cfg.resample_factor == 1 else area_downsample(x, cfg.resample_factor)
    edited = sdedit_batch(pdm, work[None], cfg.t_star, sched, [Rng(cfg.seed)])[0]
    if cfg.resample_factor != 1:
        edited = resize_bilinear(edited, x.shape[0], x.shape[1])
    return clamp01(edited)


def _grid_windows(h: int, w: int, cell: int) -> list[tuple[int, int]]:
    win = 2 * cell
    ys = list(range(0, h - win + 1, cell))
    xs = list(range(0, w - win + 1, cell))
    return [(y, x) for y in ys for x in xs]


def grid_pure(
    pdm: UNetDenoiser,
    x: np.ndarray,
    cfg: PurifyConfig,
    return_info: bool = False,
):
    """Patchified purification: overlapping 2g-windows edited independently.

    Windows tile the image at stride g; one extra window assembles the four
    g x g corners (only when the tiling is non-degenerate).  Each output
    pixel is the unweighted mean of every purified window covering it.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    g = cfg.grid_cell
    if h % g or w % g:
        raise ConfigError(f"image extents {h}x{w} are not divisible by the grid cell {g}")
    if h < 2 * g or w < 2 * g:
        raise ConfigError(f"image must cover at least one 2g window with g={g}")
    origins = _grid_windows(h, w, g)
    sched = pdm.schedule
    win = 2 * g
    degenerate = len(origins) == 1 and win == h and win == w
    if degenerate:
        # single window covering everything: identical to plain sdedit
        edited = sdedit_batch(pdm, x[None], cfg.t_star, sched, [Rng(cfg.seed)])[0]
        if return_info:
            return clamp01(edited), {"windows": 1, "coverage": np.ones((h, w), dtype=np.int64)}
        return clamp01(edited)
    crops = [x[y : y + win, xx : xx + win] for y, xx in origins]
    corner = np.empty((win, win, x.shape[2]))
    corner[:g, :g] = x[:g, :g]
    corner[:g, g:] = x[:g, w - g :]
    corner[g:, :g] = x[h - g :, :g]
    corner[g:, g:] = x[h - g :, w - g :]
    crops.append(corner)
    rngs = [Rng(cfg.seed).derive("window", i) for i in range(len(crops))]
    edited = sdedit_batch(pdm, np.stack(crops), cfg.t_star, sched, rngs)
    acc = np.zeros_like(x)
    cover = np.zeros((h, w), dtype=np.int64)
    for (y, xx), patch in zip(origins, edited[:-1]):
        acc[y : y + win, xx : xx + win] += patch
        cover[y : y + win, xx : xx + win] += 1
    cpatch = edited[-1]
    acc[:g, :g] += cpatch[:g, :g]
    acc[:g, w - g :] += cpatch[:g, g:]
    acc[h - g :, :g] += cpatch[g:, :g]
    acc[h - g :, w - g :] += cpatch[g:, g:]
    cover[:g, :g] += 1
    cover[:g, w - g :] += 1
    cover[h - g :, :g] += 1
    cover[h - g :, w - g :] += 1
    if np.any(cover == 0):
        raise ShapeError("grid tiling left uncovered pixels")
    out = clamp01(acc / cover[:, :, None])
    if return_info:
        return out, {"windows": len(crops), "coverage": cover}
    return out


def ldm_pure(ldm: LatentDiffusionModel, x: np.ndarray, cfg: PurifyConfig) -> np.ndarray:
    """SDEdit through the latent model as a (weak) purifier baseline."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    out = ldm_edit_batch(ldm, x[None], cfg.t_star, ldm.schedule, [Rng(cfg.seed)])[0]
    return clamp01(out)


# ---------------------------------------------------------------------------
# classical baselines

# Standard JPEG luminance quantization table, applied to every channel.
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def jpeg_quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the libjpeg quality formula, floored at 1."""
    if not (1 <= quality <= 100):
        raise ConfigError(f"jpeg quality must lie in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0)
    return np.maximum(table, 1.0)


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)[:, None]
    n = np.arange(8)[None, :]
    mat = np.cos((2 * n + 1) * k * np.pi / 16.0) * np.sqrt(2.0 / 8.0)
    mat[0] /= np.sqrt(2.0)
    return mat


_DCT = _dct_matrix()


def jpeg_dct_purify(x: np.ndarray, quality: int = 65) -> np.ndarray:
    """8x8 block DCT quantization round trip (JPEG without entropy coding).

    Entropy coding is lossless, so the purification effect lives entirely in
    the quantization; extents are padded to multiples of 8 by edge
    replication and cropped back.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"jpeg_dct_purify expects (H, W, C), got {x.shape}")
    table = jpeg_quant_table(quality)
    h, w, c = x.shape
    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    xp = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="edge")
    levels = xp * 255.0 - 128.0
    hh, ww = levels.shape[:2]
    blocks = levels.reshape(hh // 8, 8, ww // 8, 8, c).transpose(0, 2, 4, 1, 3)
    coef = np.einsum("ij,bqcjk,lk->bqcil", _DCT, blocks, _DCT)
    quantized = np.floor(coef / table + 0.5) * table
    restored = np.einsum("ji,bqcjk,kl->bqcil", _DCT, quantized, _DCT)
    out = restored.transpose(0, 3, 1, 4, 2).reshape(hh, ww, c)
    return clamp01((out + 128.0) / 255.0)[:h, :w]


def crop_resize(x: np.ndarray, fraction: float = 0.2) -> np.ndarray:
    """Central crop retaining (1 - fraction) of each extent, resized back.

    Crop extents round to the nearest integer (ties to even); fraction 0 is
    the bit-exact identity.
    """
    if not (0.0 <= fraction < 0.5):
        raise ConfigError(f"crop fraction must lie in [0, 0.5), got {fraction}")
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    if fraction == 0.0:
        return x.copy()
    ch = int(np.rint(h * (1.0 - fraction)))
    cw = int(np.rint(w * (1.0 - fraction)))
    y0 = (h - ch) // 2
    x0 = (w - cw) // 2
    return clamp01(resize_bilinear(x[y0 : y0 + ch, x0 : x0 + cw], h, w))


def highfreq_filter_purify(x: np.ndarray, radius: int = 2, eps: float = 0.02) -> np.ndarray:
    """Edge-preserving smoother: per-pixel linear fit against the image
    itself (self-guided), the classic removal for high-frequency noise.

    out = a * x + b with a = var / (var + eps), b = (1 - a) * mean, both
    over (2r+1)^2 windows.  As eps grows, a -> 0 and the filter tends to a
    plain box blur of the same radius.
    """
    if radius < 1:
        raise ConfigError("filter radius must be >= 1")
    if eps <= 0.0:
        raise ConfigError("filter eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    mean = box_mean(x, radius)
    var = box_mean(x * x, radius) - mean * mean
    var = np.maximum(var, 0.0)
    a = var / (var + eps)
    b = (1.0 - a) * mean
    return clamp01(a * x + b)


# ---------------------------------------------------------------------------
# dispatch


def run_purifier(
    cfg: PurifyConfig,
    x: np.ndarray,
    pdm: UNetDenoiser | None = None,
    ldm: LatentDiffusionModel | None = None,
) -> np.ndarray:
    """Apply the configured purifier to one image."""
    cfg.validate()
    if cfg.method == "pdm_pure":
        if pdm is None:
            raise ConfigError("pdm_pure needs the pixel model")
        return pdm_pure(pdm, x, cfg)
    if cfg.method == "grid_pure":
        if pdm is None:
            raise ConfigError("grid_pure needs the pixel model")
        return grid_pure(pdm, x, cfg)
    if cfg.method == "ldm_pure":
        if ldm is None:
            raise ConfigError("ldm_pure needs the latent model")
        return ldm_pure(ldm, x, cfg)
    if cfg.method == "jpeg_dct":
        return jpeg_dct_purify(x, cfg.quality)
    if cfg.method == "crop_resize":
        return crop_resize(x, cfg.crop_fraction)
    return highfreq_filter_purify(x, cfg.filter_radius, cfg.filter_eps)
