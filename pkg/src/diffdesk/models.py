"""The toy model zoo: U-Net denoisers, a convolutional autoencoder, and the
latent diffusion model composed from them.

One U-Net implementation serves both spaces; only the input-space descriptor
differs between the pixel denoiser (32x32x3) and the latent denoiser
(8x8x4).  All tensors are channels-last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, sdedit_batch
from .errors import ConfigError, ShapeError
from .numerics import (
    Tensor,
    add_channel,
    affine,
    concat_channels,
    conv2d,
    instance_norm,
    silu,
    time_embedding,
    upsample_nearest2x,
)
from .rng import Rng

MAX_DENOISER_PARAMS = 500_000


def _he_conv(rng: Rng, kh, kw, cin, cout) -> np.ndarray:
    std = math.sqrt(2.0 / (kh * kw * cin))
    return rng.normal((kh, kw, cin, cout)) * std


class _ParamMixin:
    """Shared bookkeeping for models holding a named parameter dict."""

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, op=f"param:{name}")
        self._params[name] = t
        return t


# ---------------------------------------------------------------------------
# U-Net denoiser


@dataclass(frozen=True)
class DenoiserArch:
    """Input-space descriptor plus network capacity knobs."""

    height: int
    width: int
    channels: int
    widths: tuple[int, int] = (16, 32)
    blocks_per_level: int = 2
    time_dim: int = 32

    def validate(self) -> None:
        if self.height % 2 or self.width % 2:
            raise ConfigError("denoiser input extents must be even (one 2x downsample)")
        if self.time_dim % 2:
            raise ConfigError("time embedding width must be even")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "widths": list(self.widths),
            "blocks_per_level": self.blocks_per_level,
            "time_dim": self.time_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserArch":
        return cls(
            height=d["height"],
            width=d["width"],
            channels=d["channels"],
            widths=tuple(d["widths"]),
            blocks_per_level=d["blocks_per_level"],
            time_dim=d["time_dim"],
        )


class UNetDenoiser(_ParamMixin):
    """Two-resolution U-Net noise estimator with per-block time injection.

    Down path: stem conv, residual blocks at full resolution, strided conv
    to half resolution, residual blocks.  Up path: nearest 2x upsample,
    skip concatenation, a fusing block, and a zero-initialized output conv
    so the untrained model predicts zero noise.
    """

    kind = "denoiser"

    def __init__(self, arch: DenoiserArch, rng: Rng | None = None, schedule: NoiseSchedule | None = None):
        arch.validate()
        self.arch = arch
        self.schedule = schedule  # set at train/load time; needed for sampling
        self._params: dict[str, Tensor] = {}
        rng = rng if rng is not None else Rng(0)
        w0, w1 = arch.widths
        c = arch.channels
        self._add("stem.w", _he_conv(rng.derive("stem"), 3, 3, c, w0))
        self._add("stem.b", np.zeros(w0))
        for i in range(arch.blocks_per_level):
            self._init_block(rng, f"down0.{i}", w0)
        self._add("down.w", _he_conv(rng.derive("down"), 3, 3, w0, w1))
        self._add("down.b", np.zeros(w1))
        for i in range(arch.blocks_per_level):
            self._init_block(rng, f"down1.{i}", w1)
        self._add("up.w", _he_conv(rng.derive("up"), 3, 3, w1, w0))
        self._add("up.b", np.zeros(w0))
        self._add("fuse.w", _he_conv(rng.derive("fuse"), 3, 3, 2 * w0, w0))
        self._add("fuse.b", np.zeros(w0))
        self._init_block(rng, "out_block", w0)
        self._add("head.gamma", np.ones(w0))
        self._add("head.beta", np.zeros(w0))
        self._add("head.w", np.zeros((3, 3, w0, c)))
        self._add("head.b", np.zeros(c))
        if self.param_count() > MAX_DENOISER_PARAMS:
            raise ConfigError(f"denoiser has {self.param_count()} parameters, above {MAX_DENOISER_PARAMS}")

    def _init_block(self, rng: Rng, name: str, width: int) -> None:
        self._add(f"{name}.norm1.gamma", np.ones(width))
        self._add(f"{name}.norm1.beta", np.zeros(width))
        self._add(f"{name}.conv1.w", _he_conv(rng.derive(name, 1), 3, 3, width, width))
        self._add(f"{name}.conv1.b", np.zeros(width))
        self._add(f"{name}.time.w", rng.derive(name, "t").normal((self.arch.time_dim, width)) * 0.1)
        self._add(f"{name}.time.b", np.zeros(width))
        self._add(f"{name}.norm2.gamma", np.ones(width))
        self._add(f"{name}.norm2.beta", np.zeros(width))
        self._add(f"{name}.conv2.w", _he_conv(rng.derive(name, 2), 3, 3, width, width))
        self._add(f"{name}.conv2.b", np.zeros(width))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.arch.height, self.arch.width, self.arch.channels)

    def _block(self, name: str, h: Tensor, temb: Tensor) -> Tensor:
        p = self._params
        y = instance_norm(h, p[f"{name}.norm1.gamma"], p[f"{name}.norm1.beta"])
        y = conv2d(silu(y), p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], stride=1, pad=1)
        y = add_channel(y, affine(temb, p[f"{name}.time.w"], p[f"{name}.time.b"]))
        y = instance_norm(y, p[f"{name}.norm2.gamma"], p[f"{name}.norm2.beta"])
        y = conv2d(silu(y), p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], stride=1, pad=1)
        return h + y

    def forward(self, x_t: Tensor, t: np.ndarray) -> Tensor:
        if not isinstance(x_t, Tensor):
            x_t = Tensor(x_t)
        if x_t.data.ndim != 4 or x_t.data.shape[3] != self.arch.channels:
            raise ShapeError(f"denoiser expected (N, H, W, {self.arch.channels}), got {x_t.data.shape}")
        p = self._params
        temb = time_embedding(Tensor(np.asarray(t, dtype=np.float64)), self.arch.time_dim)
        h = conv2d(x_t, p["stem.w"], p["stem.b"], stride=1, pad=1)
        for i in range(self.arch.blocks_per_level):
            h = self._block(f"down0.{i}", h, temb)
        skip = h
        h = conv2d(h, p["down.w"], p["down.b"], stride=2, pad=1)
        for i in range(self.arch.blocks_per_level):
            h = self._block(f"down1.{i}", h, temb)
        h = conv2d(upsample_nearest2x(h), p["up.w"], p["up.b"], stride=1, pad=1)
        h = conv2d(concat_channels(h, skip), p["fuse.w"], p["fuse.b"], stride=1, pad=1)
        h = self._block("out_block", h, temb)
        h = instance_norm(h, p["head.gamma"], p["head.beta"])
        return conv2d(silu(h), p["head.w"], p["head.b"], stride=1, pad=1)


# ---------------------------------------------------------------------------
# Autoencoder


@dataclass(frozen=True)
class AutoencoderArch:
    """Shape contract: (H, W, 3) <-> (H/f, W/f, latent_channels)."""

    height: int = 32
    width: int = 32
    image_channels: int = 3
    factor: int = 4
    latent_channels: int = 4
    hidden: tuple[int, int] = (16, 32)

    stem_channels: int = 0  # >0 adds a full-resolution conv before/after the stages
    blocks_per_stage: int = 0  # residual conv blocks per resolution (no normalization)

    def validate(self) -> None:
        if self.factor not in (1, 2, 4):
            raise ConfigError(f"autoencoder downsampling factor must be 1, 2, or 4, got {self.factor}")
        if self.height % self.factor or self.width % self.factor:
            raise ConfigError("image extents must be divisible by the downsampling factor")
        if self.stem_channels < 0:
            raise ConfigError("stem_channels must be nonnegative")
        if self.blocks_per_stage < 0:
            raise ConfigError("blocks_per_stage must be nonnegative")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.height // self.factor, self.width // self.factor, self.latent_channels)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "image_channels": self.image_channels,
            "factor": self.factor,
            "latent_channels": self.latent_channels,
            "hidden": list(self.hidden),
            "stem_channels": self.stem_channels,
            "blocks_per_stage": self.blocks_per_stage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderArch":
        return cls(
            height=d["height"],
            width=d["width"],
            image_channels=d["image_channels"],
            factor=d["factor"],
            latent_channels=d["latent_channels"],
            hidden=tuple(d["hidden"]),
            stem_channels=d.get("stem_channels", 0),
            blocks_per_stage=d.get("blocks_per_stage", 0),
        )


class Autoencoder(_ParamMixin):
    """Plain reconstruction autoencoder defining the toy latent space.

    Both maps are deterministic and fully differentiable, so attack
    gradients flow from pixel space through the encoder.
    """

    kind = "autoencoder"

    def __init__(self, arch: AutoencoderArch, rng: Rng | None = None):
        arch.validate()
        self.arch = arch
        self.holdout_mae: float | None = None
        self._params: dict[str, Tensor] = {}
        rng = rng if rng is not None else Rng(0)
        h0, h1 = arch.hidden
        c, lc = arch.image_channels, arch.latent_channels
        if arch.factor == 1:
            self._add("enc0.w", _he_conv(rng.derive("enc0"), 1, 1, c, lc))
            self._add("enc0.b", np.zeros(lc))
            self._add("dec0.w", _he_conv(rng.derive("dec0"), 1, 1, lc, c))
            self._add("dec0.b", np.zeros(c))
            return
        stages = 1 if arch.factor == 2 else 2
        first_in = c
        if arch.stem_channels:
            self._add("stem.w", _he_conv(rng.derive("stem"), 3, 3, c, arch.stem_channels))
            self._add("stem.b", np.zeros(arch.stem_channels))
            self._add("head.w", _he_conv(rng.derive("head"), 3, 3, arch.stem_channels, c))
            self._add("head.b", np.zeros(c))
            first_in = arch.stem_channels
        self._add("enc0.w", _he_conv(rng.derive("enc0"), 3, 3, first_in, h0))
        self._add("enc0.b", np.zeros(h0))
        self._init_blocks(rng, "encblk0", h0)
        if stages == 2:
            self._add("enc1.w", _he_conv(rng.derive("enc1"), 3, 3, h0, h1))
            self._add("enc1.b", np.zeros(h1))
            self._init_blocks(rng, "encblk1", h1)
        wide = h1 if stages == 2 else h0
        self._add("enc2.w", _he_conv(rng.derive("enc2"), 3, 3, wide, wide))
        self._add("enc2.b", np.zeros(wide))
        self._add("enc3.w", _he_conv(rng.derive("enc3"), 1, 1, wide, lc))
        self._add("enc3.b", np.zeros(lc))
        self._add("dec0.w", _he_conv(rng.derive("dec0"), 1, 1, lc, wide))
        self._add("dec0.b", np.zeros(wide))
        self._add("dec1.w", _he_conv(rng.derive("dec1"), 3, 3, wide, wide))
        self._add("dec1.b", np.zeros(wide))
        self._init_blocks(rng, "decblk1", wide)
        if stages == 2:
            self._add("dec2.w", _he_conv(rng.derive("dec2"), 3, 3, h1, h0))
            self._add("dec2.b", np.zeros(h0))
        self._add("dec3.w", _he_conv(rng.derive("dec3"), 3, 3, h0, h0))
        self._add("dec3.b", np.zeros(h0))
        self._init_blocks(rng, "decblk0", h0)
        last_out = arch.stem_channels if arch.stem_channels else c
        self._add("dec4.w", _he_conv(rng.derive("dec4"), 1, 1, h0, last_out))
        self._add("dec4.b", np.zeros(last_out))

    def _init_blocks(self, rng: Rng, name: str, width: int) -> None:
        for i in range(self.arch.blocks_per_stage):
            self._add(f"{name}.{i}.c1.w", _he_conv(rng.derive(name, i, 1), 3, 3, width, width))
            self._add(f"{name}.{i}.c1.b", np.zeros(width))
            # zero-init the closing conv so each block starts as the identity
            self._add(f"{name}.{i}.c2.w", np.zeros((3, 3, width, width)))
            self._add(f"{name}.{i}.c2.b", np.zeros(width))

    def _blocks(self, name: str, h: Tensor) -> Tensor:
        p = self._params
        for i in range(self.arch.blocks_per_stage):
            y = conv2d(silu(h), p[f"{name}.{i}.c1.w"], p[f"{name}.{i}.c1.b"], stride=1, pad=1)
            y = conv2d(silu(y), p[f"{name}.{i}.c2.w"], p[f"{name}.{i}.c2.b"], stride=1, pad=1)
            h = h + y
        return h

    @classmethod
    def identity(cls, channels: int = 3, height: int = 32, width: int = 32) -> "Autoencoder":
        """f=1 autoencoder whose 1x1 convs are the identity map."""
        arch = AutoencoderArch(
            height=height, width=width, image_channels=channels, factor=1, latent_channels=channels
        )
        ae = cls(arch)
        eye = np.eye(channels).reshape(1, 1, channels, channels)
        ae._params["enc0.w"].data = eye.copy()
        ae._params["dec0.w"].data = eye.copy()
        ae._params["enc0.b"].data = np.zeros(channels)
        ae._params["dec0.b"].data = np.zeros(channels)
        return ae

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.arch.height, self.arch.width, self.arch.image_channels)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.arch.latent_shape

    def encode_stages(self, x: Tensor) -> list[Tensor]:
        """Per-stage encoder activations; the last entry is the latent."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.shape[1:] != self.input_shape:
            raise ShapeError(f"encode expected (N,) + {self.input_shape}, got {x.data.shape}")
        p = self._params
        if self.arch.factor == 1:
            return [conv2d(x, p["enc0.w"], p["enc0.b"], stride=1, pad=0)]
        h = x
        if self.arch.stem_channels:
            h = silu(conv2d(h, p["stem.w"], p["stem.b"], stride=1, pad=1))
        h = conv2d(h, p["enc0.w"], p["enc0.b"], stride=2, pad=1)
        h = self._blocks("encblk0", h)
        stages = [h]
        if self.arch.factor == 4:
            h = conv2d(silu(h), p["enc1.w"], p["enc1.b"], stride=2, pad=1)
            h = self._blocks("encblk1", h)
            stages.append(h)
        h = silu(conv2d(silu(h), p["enc2.w"], p["enc2.b"], stride=1, pad=1))
        stages.append(h)
        stages.append(conv2d(h, p["enc3.w"], p["enc3.b"], stride=1, pad=0))
        return stages

    def encode(self, x: Tensor) -> Tensor:
        return self.encode_stages(x)[-1]

    def decode(self, z: Tensor) -> Tensor:
        if not isinstance(z, Tensor):
            z = Tensor(z)
        if z.data.shape[1:] != self.latent_shape:
            raise ShapeError(f"decode expected (N,) + {self.latent_shape}, got {z.data.shape}")
        p = self._params
        if self.arch.factor == 1:
            return conv2d(z, p["dec0.w"], p["dec0.b"], stride=1, pad=0)
        h = silu(conv2d(z, p["dec0.w"], p["dec0.b"], stride=1, pad=0))
        h = conv2d(h, p["dec1.w"], p["dec1.b"], stride=1, pad=1)
        h = self._blocks("decblk1", h)
        h = upsample_nearest2x(silu(h))
        if self.arch.factor == 4:
            h = conv2d(h, p["dec2.w"], p["dec2.b"], stride=1, pad=1)
            h = upsample_nearest2x(silu(h))
        h = conv2d(h, p["dec3.w"], p["dec3.b"], stride=1, pad=1)
        h = self._blocks("decblk0", h)
        h = conv2d(silu(h), p["dec4.w"], p["dec4.b"], stride=1, pad=0)
        if self.arch.stem_channels:
            h = conv2d(silu(h), p["head.w"], p["head.b"], stride=1, pad=1)
        return h


def encode(ae: Autoencoder, x) -> Tensor:
    return ae.encode(x)


def decode(ae: Autoencoder, z) -> Tensor:
    return ae.decode(z)


# ---------------------------------------------------------------------------
# composition


@dataclass
class LatentDiffusionModel:
    """Autoencoder plus a denoiser over (scaled) latents.

    latent_scale normalizes encoder outputs to roughly unit variance before
    diffusion, mirroring the fixed scaling factor of production latent
    models; it is measured on the training set after autoencoder training.
    """

    autoencoder: Autoencoder
    latent_denoiser: UNetDenoiser
    latent_scale: float = 1.0

    def __post_init__(self):
        if tuple(self.latent_denoiser.input_shape) != tuple(self.autoencoder.latent_shape):
            raise ConfigError(
                f"latent denoiser input {self.latent_denoiser.input_shape} does not match "
                f"autoencoder latent space {self.autoencoder.latent_shape}"
            )

    @property
    def schedule(self) -> NoiseSchedule | None:
        return self.latent_denoiser.schedule

    def encode_scaled(self, x) -> Tensor:
        return self.autoencoder.encode(x) * self.latent_scale

    def decode_scaled(self, z) -> Tensor:
        if not isinstance(z, Tensor):
            z = Tensor(z)
        return self.autoencoder.decode(z * (1.0 / self.latent_scale))


def ldm_edit(
    ldm: LatentDiffusionModel,
    x: np.ndarray,
    cfg,
    sched: NoiseSchedule,
    rng: Rng | None = None,
) -> np.ndarray:
    """SDEdit in latent space: encode, edit the latent, decode."""
    x = np.asarray(x, dtype=np.float64)
    rngs = [rng if rng is not None else Rng(cfg.seed)]
    return ldm_edit_batch(ldm, x[None], cfg.t_star, sched, rngs)[0]


def ldm_edit_batch(
    ldm: LatentDiffusionModel,
    xs: np.ndarray,
    t_star: int,
    sched: NoiseSchedule,
    rngs,
) -> np.ndarray:
    z = ldm.encode_scaled(np.asarray(xs, dtype=np.float64)).data
    z_edit = sdedit_batch(ldm.latent_denoiser, z, t_star, sched, rngs)
    return ldm.decode_scaled(z_edit).data


def latent_amplification(ae: Autoencoder, x: np.ndarray, x_adv: np.ndarray, norm: str = "rms") -> float:
    """Perturbation gain through the encoder: |dz| / |dx|.

    Norms are RMS per element by default so pixel and latent spaces of
    different sizes compare fairly; norm="l2" gives the plain Euclidean
    ratio for sensitivity analysis.  Returns math.inf when the pixel
    perturbation is exactly zero but the latent one is not.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ShapeError(f"latent_amplification: shapes differ, {x.shape} vs {x_adv.shape}")
    if norm not in ("rms", "l2"):
        raise ConfigError(f"unknown norm {norm!r}; expected 'rms' or 'l2'")
    batch = x[None] if x.ndim == 3 else x
    batch_adv = x_adv[None] if x_adv.ndim == 3 else x_adv
    dz = ae.encode(batch_adv).data - ae.encode(batch).data
    dx = batch_adv - batch

    def mag(v):
        sq = float(np.sum(v * v))
        return math.sqrt(sq / v.size) if norm == "rms" else math.sqrt(sq)

    nx, nz = mag(dx), mag(dz)
    if nx == 0.0:
        return 0.0 if nz == 0.0 else math.inf
    return nz / nx


def train_autoencoder(
    ae: Autoencoder,
    dataset: np.ndarray,
    epochs: int,
    lr: float,
    rng: Rng,
    batch_size: int = 32,
    holdout_fraction: float = 0.1,
):
    """Minimize per-pixel reconstruction MSE; returns the training report.

    The trailing `holdout_fraction` of the dataset is excluded from the
    optimizer and used to measure the reconstruction MAE recorded on the
    model (the checkpoint quality figure).
    """
    from .diffusion import Adam, TrainReport  # local import to avoid cycle noise
    from .errors import TrainingDivergedError
    from .numerics import mse

    if len(dataset) == 0:
        raise ConfigError("autoencoder dataset is empty")
    n_hold = max(1, int(len(dataset) * holdout_fraction)) if len(dataset) > 1 else 0
    train_set = dataset[: len(dataset) - n_hold] if n_hold else dataset
    holdout = dataset[len(dataset) - n_hold :] if n_hold else dataset
    opt = Adam(ae.parameters(), lr=lr)
    curve: list[float] = []
    step = 0
    for epoch in range(epochs):
        order = rng.derive("shuffle", epoch).permutation(len(train_set))
        for start in range(0, len(train_set), batch_size):
            xb = Tensor(train_set[order[start : start + batch_size]])
            loss = mse(ae.decode(ae.encode(xb)), xb)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"autoencoder loss became {value} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(value)
            step += 1
    rec = ae.decode(ae.encode(Tensor(holdout))).data
    ae.holdout_mae = float(np.mean(np.abs(rec - holdout)))
    k = min(10, len(curve)) or 1
    report = TrainReport(
        curve,
        float(np.mean(curve[:k])) if curve else 0.0,
        float(np.mean(curve[-k:])) if curve else 0.0,
    )
    return report


def measure_latent_scale(ae: Autoencoder, dataset: np.ndarray, sample_cap: int = 256) -> float:
    """1 / std of encoder outputs over (a slice of) the dataset."""
    zs = ae.encode(Tensor(dataset[:sample_cap])).data
    std = float(zs.std())
    if std < 1e-6:
        raise ConfigError("encoder outputs are degenerate; cannot normalize latents")
    return 1.0 / std
