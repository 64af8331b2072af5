"""PGD protection attacks: every loss family from the literature survey.

All losses share one calling convention: batched images (N, H, W, C) in
[0, 1], one independent random stream per image, and they return per-image
loss values plus the gradient of their sum with respect to the images.
Per-image streams make results invariant to how a set is batched.

Model parameters are frozen while attack graphs are built, so backward
passes skip every weight-gradient GEMM.
"""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion import NoiseSchedule, q_sample, sdedit_batch
from .errors import ConfigError, DiffdeskError, ShapeError
from .models import Autoencoder, LatentDiffusionModel, UNetDenoiser
from .numerics import Tensor, mul, sum_all
from .rng import Rng

log = logging.getLogger(__name__)

LOSS_KINDS = (
    "semantic_latent",
    "semantic_pixel",
    "textural",
    "mist",
    "sds_plus",
    "sds_minus",
    "ita",
    "end_to_end",
)
TARGETED_KINDS = ("textural", "mist", "ita", "end_to_end")

MAX_UNROLLED_STEPS = 10


@contextlib.contextmanager
def frozen(*models):
    """Temporarily drop requires_grad on all parameters of the models."""
    tensors = [p for m in models for p in m.parameters().values()]
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, s in zip(tensors, saved):
            t.requires_grad = s


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    return x, False


def _as_rngs(rng, n: int) -> list[Rng]:
    if isinstance(rng, Rng):
        return [rng.derive("img", i) for i in range(n)] if n > 1 else [rng]
    rngs = list(rng)
    if len(rngs) != n:
        raise ConfigError(f"got {len(rngs)} rng streams for {n} images")
    return rngs


def _per_image(diff_data: np.ndarray) -> np.ndarray:
    n = diff_data.shape[0]
    return (diff_data.reshape(n, -1) ** 2).sum(axis=1)


def _mc_draws(rngs: Sequence[Rng], s: int, T: int, shape) -> tuple[np.ndarray, np.ndarray]:
    t = np.array([int(r.derive("mc", s, "t").integers(1, T)) for r in rngs])
    eps = np.stack([r.derive("mc", s, "eps").normal(shape) for r in rngs])
    return t, eps


def _grad_of(xt: Tensor) -> np.ndarray:
    # stub models may leave no path from the loss back to the input
    if xt.grad is None:
        return np.zeros_like(xt.data)
    return np.array(xt.grad)


def _sched_of(model) -> NoiseSchedule:
    sched = model.schedule
    if sched is None:
        raise ConfigError("model has no noise schedule attached; train or load it first")
    return sched


# ---------------------------------------------------------------------------
# loss families


def semantic_loss_latent(ldm: LatentDiffusionModel, x, rng, mc_samples: int = 1):
    """Monte-Carlo denoising error of the latent model, pulled back to pixels.

    Average over mc_samples of ||eps_hat(z_t, t) - eps||^2 with
    z_t ~ q_t(E(x)); the gradient flows through encoder and denoiser.
    Returns (per-image losses, gradient w.r.t. x).
    """
    batch, single = _as_batch(x)
    rngs = _as_rngs(rng, batch.shape[0])
    sched = _sched_of(ldm)
    with frozen(ldm.autoencoder, ldm.latent_denoiser):
        xt = Tensor(batch, requires_grad=True)
        z = ldm.encode_scaled(xt)
        losses = np.zeros(batch.shape[0])
        total = None
        for s in range(mc_samples):
            t, eps = _mc_draws(rngs, s, sched.T, z.data.shape[1:])
            z_t = q_sample(z, t, Tensor(eps), sched)
            diff = ldm.latent_denoiser.forward(z_t, t) - Tensor(eps)
            losses += _per_image(diff.data) / mc_samples
            term = sum_all(mul(diff, diff))
            total = term if total is None else total + term
        (total * (1.0 / mc_samples)).backward()
        grad = _grad_of(xt)
    return (losses[0], grad[0]) if single else (losses, grad)


def semantic_loss_pixel(pdm: UNetDenoiser, x, rng, mc_samples: int = 1, sched: NoiseSchedule | None = None):
    """Pixel-space form of the semantic loss: identity in place of the encoder."""
    batch, single = _as_batch(x)
    rngs = _as_rngs(rng, batch.shape[0])
    sched = sched if sched is not None else _sched_of(pdm)
    with frozen(pdm):
        xt = Tensor(batch, requires_grad=True)
        losses = np.zeros(batch.shape[0])
        total = None
        for s in range(mc_samples):
            t, eps = _mc_draws(rngs, s, sched.T, batch.shape[1:])
            x_t = q_sample(xt, t, Tensor(eps), sched)
            diff = pdm.forward(x_t, t) - Tensor(eps)
            losses += _per_image(diff.data) / mc_samples
            term = sum_all(mul(diff, diff))
            total = term if total is None else total + term
        (total * (1.0 / mc_samples)).backward()
        grad = _grad_of(xt)
    return (losses[0], grad[0]) if single else (losses, grad)


def textural_loss(ae: Autoencoder, x, y: np.ndarray):
    """Encoder-targeting loss: -||E(x) - E(y)||^2, <= 0, zero at equality.

    Ascending it drives the encoding of x toward the target's encoding.
    """
    if y is None:
        raise ConfigError("textural loss needs a target image")
    batch, single = _as_batch(x)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != batch.shape[1:]:
        raise ShapeError(f"target shape {y.shape} does not match image {batch.shape[1:]}")
    with frozen(ae):
        xt = Tensor(batch, requires_grad=True)
        zy = ae.encode(Tensor(np.repeat(y[None], batch.shape[0], axis=0))).detach()
        diff = ae.encode(xt) - zy
        losses = -_per_image(diff.data)
        (sum_all(mul(diff, diff)) * -1.0).backward()
        grad = _grad_of(xt)
    return (losses[0], grad[0]) if single else (losses, grad)


def mist_loss(ldm: LatentDiffusionModel, x, y: np.ndarray, weight: float, rng, mc_samples: int = 1):
    """Combined protection: weight * textural + semantic, on shared draws."""
    if weight < 0:
        raise ConfigError(f"mist weight must be nonnegative, got {weight}")
    sem_losses, sem_grad = semantic_loss_latent(ldm, x, rng, mc_samples)
    if weight == 0.0:
        return sem_losses, sem_grad
    tex_losses, tex_grad = textural_loss(ldm.autoencoder, x, y)
    return sem_losses + weight * tex_losses, sem_grad + weight * tex_grad


def sds_gradient(model, x, sign: int, rng, mc_samples: int = 1, lambda_schedule=None):
    """Score-distillation gradient: skips differentiating through the denoiser.

    MC average of sign * lambda(t) * (eps_hat(z_t, t) - eps) pulled back
    through dz_t/dx only.  For a pixel model that pullback is the closed
    form sqrt(alpha_bar_t) * (eps_hat - eps).  sign=+1 ascends (SDS+),
    sign=-1 descends (SDS-).  Returns (per-image surrogate losses, grad).
    """
    if sign not in (+1, -1):
        raise ConfigError(f"sds sign must be +1 or -1, got {sign}")
    batch, single = _as_batch(x)
    rngs = _as_rngs(rng, batch.shape[0])
    is_latent = isinstance(model, LatentDiffusionModel)
    denoiser = model.latent_denoiser if is_latent else model
    sched = _sched_of(model)
    losses = np.zeros(batch.shape[0])
    with frozen(*( (model.autoencoder, model.latent_denoiser) if is_latent else (model,) )):
        xt = Tensor(batch, requires_grad=True)
        base = model.encode_scaled(xt) if is_latent else xt
        total = None
        for s in range(mc_samples):
            t, eps = _mc_draws(rngs, s, sched.T, base.data.shape[1:])
            z_t = q_sample(base, t, Tensor(eps), sched)
            eps_hat = denoiser.forward(Tensor(z_t.data), t)  # graph-detached
            v = eps_hat.data - eps
            losses += _per_image(v) / mc_samples
            lam = np.ones(len(t)) if lambda_schedule is None else np.asarray(lambda_schedule(t))
            weight = (sign / mc_samples) * lam
            vw = v * weight.reshape((-1,) + (1,) * (v.ndim - 1))
            term = sum_all(mul(z_t, Tensor(vw)))
            total = term if total is None else total + term
        total.backward()
        grad = _grad_of(xt)
    return (losses[0], grad[0]) if single else (losses, grad)


def ita_loss(ldm: LatentDiffusionModel, x, y: np.ndarray, rng, mc_samples: int = 1):
    """Targeted denoiser attack: ||eps_hat(z_t, t) - E(y)||^2.

    The target latent uses the same scaling as the denoiser's training
    latents; gradient flows through encoder and denoiser.
    """
    if y is None:
        raise ConfigError("ita loss needs a target image")
    batch, single = _as_batch(x)
    rngs = _as_rngs(rng, batch.shape[0])
    sched = _sched_of(ldm)
    with frozen(ldm.autoencoder, ldm.latent_denoiser):
        xt = Tensor(batch, requires_grad=True)
        z = ldm.encode_scaled(xt)
        zy = ldm.encode_scaled(Tensor(np.repeat(np.asarray(y, dtype=np.float64)[None], batch.shape[0], axis=0))).detach()
        losses = np.zeros(batch.shape[0])
        total = None
        for s in range(mc_samples):
            t, eps = _mc_draws(rngs, s, sched.T, z.data.shape[1:])
            z_t = q_sample(z, t, Tensor(eps), sched)
            diff = ldm.latent_denoiser.forward(z_t, t) - zy
            losses += _per_image(diff.data) / mc_samples
            term = sum_all(mul(diff, diff))
            total = term if total is None else total + term
        (total * (1.0 / mc_samples)).backward()
        grad = _grad_of(xt)
    return (losses[0], grad[0]) if single else (losses, grad)


def end_to_end_loss(model, x, y_target: np.ndarray, t_star: int, rng):
    """Distance between the unrolled SDEdit output and a target image.

    The edit chain (t_star denoising steps) is differentiated end to end,
    so t_star is capped to keep the unrolled graph small.  Works on either
    the latent pipeline (encode, edit, decode) or a pixel model.
    """
    if y_target is None:
        raise ConfigError("end-to-end loss needs a target image")
    if t_star > MAX_UNROLLED_STEPS:
        raise ConfigError(f"end-to-end attack unrolls at most {MAX_UNROLLED_STEPS} steps, got {t_star}")
    batch, single = _as_batch(x)
    rngs = _as_rngs(rng, batch.shape[0])
    is_latent = isinstance(model, LatentDiffusionModel)
    sched = _sched_of(model)
    models = (model.autoencoder, model.latent_denoiser) if is_latent else (model,)
    y = np.asarray(y_target, dtype=np.float64)
    with frozen(*models):
        xt = Tensor(batch, requires_grad=True)
        if is_latent:
            z = model.encode_scaled(xt)
            z_edit = sdedit_batch(model.latent_denoiser, z, t_star, sched, rngs, unroll_in_graph=True)
            out = model.decode_scaled(z_edit)
        else:
            out = sdedit_batch(model, xt, t_star, sched, rngs, unroll_in_graph=True)
        diff = out - Tensor(np.repeat(y[None], batch.shape[0], axis=0))
        losses = _per_image(diff.data)
        sum_all(mul(diff, diff)).backward()
        grad = _grad_of(xt)
    return (losses[0], grad[0]) if single else (losses, grad)


# ---------------------------------------------------------------------------
# attack target


def checkerboard_target(height: int, width: int, channels: int = 3, period: int = 8, seed: int = 0) -> np.ndarray:
    """High-contrast periodic checkerboard, regenerated from its seed.

    The classic Mist-style target: alternating cells of two saturated
    values; the seed perturbs the two levels slightly so distinct targets
    can be generated when needed.
    """
    if period < 2 or period % 2:
        raise ConfigError(f"checkerboard period must be even and >= 2, got {period}")
    draw = Rng(seed).derive("checker")
    lo = 0.05 + 0.05 * float(draw.uniform())
    hi = 0.95 - 0.05 * float(draw.uniform())
    yy, xx = np.mgrid[0:height, 0:width]
    cells = ((yy // (period // 2)) + (xx // (period // 2))) % 2
    img = np.where(cells[..., None] == 0, lo, hi)
    return np.repeat(img, channels, axis=2)


# ---------------------------------------------------------------------------
# PGD engine


@dataclass(frozen=True)
class AttackConfig:
    """Declarative description of one PGD protection run."""

    budget: float  # l-inf radius delta, pixel units
    step: float = 1.0 / 255.0  # eta
    iterations: int = 100  # K
    loss_kind: str = "semantic_latent"
    mc_samples: int = 1
    mist_weight: float = 1.0
    target_seed: int = 0
    edit_t_star: int = 10  # end_to_end only
    seed: int = 0

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}; expected one of {LOSS_KINDS}")
        if not (0.0 <= self.budget <= 1.0):
            raise ConfigError(f"budget must lie in [0, 1], got {self.budget}")
        if self.budget > 0.0 and not (0.0 < self.step <= self.budget):
            raise ConfigError(f"need 0 < step <= budget, got step={self.step}, budget={self.budget}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.mist_weight < 0:
            raise ConfigError("mist weight must be nonnegative")
        if not (0 <= self.edit_t_star <= MAX_UNROLLED_STEPS):
            raise ConfigError(f"edit_t_star must lie in [0, {MAX_UNROLLED_STEPS}]")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss_trajectory: np.ndarray  # (K,)
    linf: float
    wall_time: float
    stalled: bool = False  # >= 3 consecutive zero-gradient steps seen

    def validate_against(self, x0: np.ndarray, budget: float) -> None:
        linf = float(np.max(np.abs(self.x_adv - x0))) if x0.size else 0.0
        if linf > budget + 1e-12:
            raise DiffdeskError(f"ball invariant violated: ||x_adv - x0||_inf = {linf} > {budget}")
        if self.x_adv.min() < 0.0 or self.x_adv.max() > 1.0:
            raise DiffdeskError("range invariant violated: x_adv outside [0, 1]")


LossProvider = Callable[[np.ndarray, Sequence[Rng]], tuple[np.ndarray, np.ndarray]]


def make_loss_provider(
    kind: str,
    *,
    ldm: LatentDiffusionModel | None = None,
    pdm: UNetDenoiser | None = None,
    target: np.ndarray | None = None,
    mist_weight: float = 1.0,
    mc_samples: int = 1,
    edit_t_star: int = 10,
) -> LossProvider:
    """Bind a loss family to its models; the result feeds `pgd_attack`."""
    if kind in TARGETED_KINDS and target is None:
        raise ConfigError(f"loss kind {kind!r} requires a target image")

    def need(model, name):
        if model is None:
            raise ConfigError(f"loss kind {kind!r} requires the {name} model")
        return model

    if kind == "semantic_latent":
        return lambda x, rngs: semantic_loss_latent(need(ldm, "latent"), x, rngs, mc_samples)
    if kind == "semantic_pixel":
        return lambda x, rngs: semantic_loss_pixel(need(pdm, "pixel"), x, rngs, mc_samples)
    if kind == "textural":
        return lambda x, rngs: textural_loss(need(ldm, "latent").autoencoder, x, target)
    if kind == "mist":
        return lambda x, rngs: mist_loss(need(ldm, "latent"), x, target, mist_weight, rngs, mc_samples)
    if kind == "sds_plus":
        return lambda x, rngs: sds_gradient(need(ldm, "latent"), x, +1, rngs, mc_samples)
    if kind == "sds_minus":
        return lambda x, rngs: sds_gradient(need(ldm, "latent"), x, -1, rngs, mc_samples)
    if kind == "ita":
        return lambda x, rngs: ita_loss(need(ldm, "latent"), x, target, rngs, mc_samples)
    if kind == "end_to_end":
        # targeted: drive the edit toward the target, i.e. descend the
        # distance. The trajectory records the true distance; the gradient
        # is negated so the ascent engine minimizes it.
        def e2e(x, rngs):
            losses, grad = end_to_end_loss(need(ldm, "latent"), x, target, edit_t_star, rngs)
            return losses, -grad

        return e2e
    raise ConfigError(f"unknown loss kind {kind!r}")


def pgd_attack(
    x0: np.ndarray,
    loss_provider: LossProvider,
    cfg: AttackConfig,
    rngs: Sequence[Rng] | None = None,
) -> AttackResult | list[AttackResult]:
    """Iterated signed-gradient ascent inside the l-inf ball around x0.

    Accepts one image (H, W, C) or a batch; a batch returns one result per
    image, identical to attacking the images one at a time with the same
    per-image streams (losses are sums of independent per-image terms).
    """
    cfg.validate()
    batch, single = _as_batch(x0)
    if batch.min() < 0.0 or batch.max() > 1.0:
        raise ConfigError("pgd_attack inputs must lie in [0, 1]")
    n = batch.shape[0]
    if rngs is None:
        rngs = [Rng(cfg.seed).derive("attack", i) for i in range(n)]
    start = time.perf_counter()
    x_adv = batch.copy()
    lo = np.clip(batch - cfg.budget, 0.0, 1.0)
    hi = np.clip(batch + cfg.budget, 0.0, 1.0)
    trajectory = np.zeros((cfg.iterations, n))
    zero_run = np.zeros(n, dtype=np.int64)
    stalled = np.zeros(n, dtype=bool)
    for k in range(cfg.iterations):
        step_rngs = [r.derive("step", k) for r in rngs]
        losses, grad = loss_provider(x_adv, step_rngs)
        trajectory[k] = losses
        gflat = grad.reshape(n, -1)
        zero = ~np.any(gflat != 0.0, axis=1)
        zero_run = np.where(zero, zero_run + 1, 0)
        newly = (zero_run >= 3) & ~stalled
        if np.any(newly):
            log.warning("zero gradient for >= 3 consecutive steps on %d image(s)", int(newly.sum()))
            stalled |= newly
        if cfg.budget > 0.0:
            x_adv = np.clip(x_adv + cfg.step * np.sign(grad), lo, hi)
    elapsed = (time.perf_counter() - start) / n
    results = []
    for i in range(n):
        res = AttackResult(
            x_adv=x_adv[i],
            loss_trajectory=trajectory[:, i].copy(),
            linf=float(np.max(np.abs(x_adv[i] - batch[i]))),
            wall_time=elapsed,
            stalled=bool(stalled[i]),
        )
        res.validate_against(batch[i], cfg.budget)
        results.append(res)
    return results[0] if single else results
