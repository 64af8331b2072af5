"""Noise schedules, forward diffusion, DDPM sampling, training, and SDEdit.

Shared by the pixel-space and latent-space models: a denoiser model here is
anything with `.forward(x_t, t) -> Tensor` predicting the injected noise,
an `.input_shape` property, and a `.parameters()` dict of trainable tensors.

Step indices are 1-based: t runs over {1, .., T}, and alpha_bar(t) indexes
the cumulative product up to step t.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, TrainingDivergedError
from .numerics import Tensor, mse, mul, mean_all, scale_per_sample, sum_per_sample
from .rng import Rng

log = logging.getLogger(__name__)

# Defaults for every toy model.  The standard DDPM endpoint beta=0.02 leaves
# alpha_bar_T near 0.36 at T=100, nowhere near an isotropic Gaussian, so the
# endpoint is raised until alpha_bar_T < 0.01 holds with margin.
DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.095

# Terminal mass required of a schedule that backs actual sampling pipelines.
TERMINAL_ALPHA_BAR = 0.01


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha/alpha-bar tables for a T-step diffusion process."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("noise schedule needs a 1-D array of at least one beta")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(betas) < 0.0):
            raise ConfigError("betas must be non-decreasing")
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def beta(self, t) -> np.ndarray:
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t) -> np.ndarray:
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative alpha product at step t, with alpha_bar(0) = 1."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bars[np.maximum(t, 1) - 1], 1.0)

    @property
    def has_terminal_noise(self) -> bool:
        """Whether x_T is approximately pure noise (alpha_bar_T < 0.01)."""
        return bool(self.alpha_bars[-1] < TERMINAL_ALPHA_BAR)

    def posterior_sigma(self, t: int) -> float:
        """Ancestral sampler noise scale sqrt(beta_tilde_t); zero at t=1."""
        ab_t = float(self.alpha_bar(t))
        ab_prev = float(self.alpha_bar(t - 1))
        var = (1.0 - ab_prev) / (1.0 - ab_t) * float(self.beta(t))
        return math.sqrt(max(var, 0.0))


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Betas linearly interpolated over [beta_start, beta_end], inclusive."""
    if T < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


@dataclass(frozen=True)
class EditConfig:
    """SDEdit parameters: forward-diffuse to t_star, then denoise to zero."""

    t_star: int
    seed: int = 0

    def validate(self, T: int) -> None:
        if not (0 <= self.t_star <= T):
            raise ConfigError(f"edit depth t_star={self.t_star} outside [0, {T}]")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def q_sample(x0, t, eps, sched: NoiseSchedule) -> Tensor:
    """Diffuse x0 to step t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    t may be a single step or one step per sample; gradients flow through
    both x0 and eps.
    """
    x0 = _as_tensor(x0)
    eps = _as_tensor(eps)
    if x0.data.shape != eps.data.shape:
        raise ShapeError(f"q_sample: noise shape {eps.data.shape} does not match {x0.data.shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ConfigError(f"q_sample: steps must lie in [1, {sched.T}]")
    ab = sched.alpha_bar(t_arr)
    if t_arr.size == 1:
        a = float(np.sqrt(ab[0]))
        b = float(np.sqrt(1.0 - ab[0]))
        return x0 * a + eps * b
    if t_arr.size != x0.data.shape[0]:
        raise ShapeError(f"q_sample: got {t_arr.size} steps for batch of {x0.data.shape[0]}")
    return scale_per_sample(x0, np.sqrt(ab)) + scale_per_sample(eps, np.sqrt(1.0 - ab))


def training_loss(
    model,
    x0: Tensor,
    rng: Rng,
    sched: NoiseSchedule,
    lambda_schedule: Callable[[np.ndarray], np.ndarray] | None = None,
) -> Tensor:
    """Denoising objective: lambda(t) * MSE(eps_hat(x_t, t), eps).

    Draws one (t, eps) pair per sample in the batch.  The returned scalar
    carries the full computation graph, so gradients are available w.r.t.
    the model parameters and w.r.t. x0 itself.
    """
    x0 = _as_tensor(x0)
    batch = x0.data.shape[0]
    t = rng.derive("t").integers(1, sched.T, (batch,))
    eps = Tensor(rng.derive("eps").normal(x0.data.shape))
    x_t = q_sample(x0, t, eps, sched)
    pred = model.forward(x_t, t)
    if pred.data.shape != eps.data.shape:
        raise ShapeError(f"denoiser returned {pred.data.shape}, expected {eps.data.shape}")
    if lambda_schedule is None:
        return mse(pred, eps)
    weights = np.asarray(lambda_schedule(t), dtype=np.float64)
    per_elem = 1.0 / (x0.data.size / batch)
    diff = pred - eps
    per_sample = sum_per_sample(mul(diff, diff)) * per_elem
    return mean_all(scale_per_sample(per_sample, weights))


class Adam:
    """Adaptive-moment optimizer; constants follow the common defaults."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            p.data -= self.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
            p._grad_owned = False


@dataclass
class TrainReport:
    loss_curve: list[float]
    initial_mean: float
    final_mean: float

    @property
    def improved(self) -> bool:
        return self.final_mean < self.initial_mean


def train(
    model,
    dataset: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: Rng,
    sched: NoiseSchedule,
    lambda_schedule=None,
) -> TrainReport:
    """Train a denoiser in place; returns the per-step loss curve.

    Deterministic for a fixed rng: shuffling and every (t, eps) draw come
    from derived streams keyed by epoch and step index.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if dataset.shape[1:] != tuple(model.input_shape):
        raise ShapeError(f"dataset items {dataset.shape[1:]} do not match model input {model.input_shape}")
    opt = Adam(model.parameters(), lr=lr)
    curve: list[float] = []
    step = 0
    for epoch in range(epochs):
        order = rng.derive("shuffle", epoch).permutation(len(dataset))
        for start in range(0, len(dataset), batch_size):
            xb = Tensor(dataset[order[start : start + batch_size]])
            try:
                loss = training_loss(model, xb, rng.derive("step", step), sched, lambda_schedule)
            except ShapeError as exc:
                if "non-finite" in str(exc):
                    raise TrainingDivergedError(f"non-finite values at step {step}: {exc}") from exc
                raise
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(value)
            step += 1
    k = min(10, len(curve)) or 1
    initial = float(np.mean(curve[:k])) if curve else 0.0
    final = float(np.mean(curve[-k:])) if curve else 0.0
    if curve and final >= initial:
        log.warning("training did not improve: first-%d mean %.4g, last-%d mean %.4g", k, initial, k, final)
    return TrainReport(curve, initial, final)


def denoise_step(
    model,
    x_t: Tensor,
    t: int,
    sched: NoiseSchedule,
    rng: Rng | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """One ancestral DDPM step from x_t to x_(t-1).

    x_(t-1) = (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t)
              + sigma_t * z,  with z = 0 at t = 1.
    """
    if not (1 <= t <= sched.T):
        raise ConfigError(f"denoise_step: t={t} outside [1, {sched.T}]")
    x_t = _as_tensor(x_t)
    t_vec = np.full(x_t.data.shape[0], t, dtype=np.int64)
    eps_hat = model.forward(x_t, t_vec)
    beta_t = float(sched.beta(t))
    ab_t = float(sched.alpha_bar(t))
    coef = beta_t / math.sqrt(1.0 - ab_t)
    mean = (x_t - eps_hat * coef) * (1.0 / math.sqrt(float(sched.alpha(t))))
    if t == 1:
        return mean
    sigma = sched.posterior_sigma(t)
    if noise is None:
        if rng is None:
            raise ConfigError("denoise_step needs an rng or explicit noise for t > 1")
        noise = rng.derive("z", t).normal(x_t.data.shape)
    return mean + Tensor(noise) * sigma


def sample(model, shape: Sequence[int], sched: NoiseSchedule, rng: Rng) -> np.ndarray:
    """Draw from the model: start at pure noise, denoise T times.

    Output is not clamped; clamping belongs to the final image decode stage.
    """
    x = Tensor(rng.derive("init").normal((1,) + tuple(shape)))
    for t in range(sched.T, 0, -1):
        x = denoise_step(model, x, t, sched, rng=rng)
    return x.data[0]


def sdedit(model, x, cfg: EditConfig, sched: NoiseSchedule, rng: Rng | None = None) -> np.ndarray:
    """Edit x by diffusing to t_star and denoising back to step zero."""
    cfg.validate(sched.T)
    x = np.asarray(x, dtype=np.float64)
    if rng is None:
        rng = Rng(cfg.seed)
    return sdedit_batch(model, x[None], cfg.t_star, sched, [rng])[0]


def sdedit_batch(
    model,
    xs: np.ndarray,
    t_star: int,
    sched: NoiseSchedule,
    rngs: Sequence[Rng],
    unroll_in_graph: bool = False,
) -> np.ndarray | Tensor:
    """SDEdit over a batch, one independent noise stream per image.

    Per-image streams make the result invariant to how a set of images is
    split into batches.  With `unroll_in_graph` the chain is built on the
    computation graph (used by the end-to-end attack); xs may then be a
    Tensor and the result is one.
    """
    n = xs.data.shape[0] if isinstance(xs, Tensor) else xs.shape[0]
    if len(rngs) != n:
        raise ConfigError(f"sdedit_batch: got {len(rngs)} rng streams for {n} images")
    if t_star == 0:
        return xs if isinstance(xs, Tensor) else xs.copy()
    shape = (xs.data.shape if isinstance(xs, Tensor) else xs.shape)[1:]
    eps = np.stack([r.derive("init").normal(shape) for r in rngs])
    x = q_sample(xs if unroll_in_graph else Tensor(np.asarray(xs, dtype=np.float64)), t_star, Tensor(eps), sched)
    for t in range(t_star, 0, -1):
        if t > 1:
            noise = np.stack([r.derive("z", t).normal(shape) for r in rngs])
        else:
            noise = None
        x = denoise_step(model, x, t, sched, noise=noise)
    return x if unroll_in_graph else x.data
