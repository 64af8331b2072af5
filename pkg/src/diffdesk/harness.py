"""Experiment orchestration shared by the CLI and the acceptance suite.

Every set-level operation assigns each image an independent stream derived
from (seed, purpose, global index), so results are invariant to batch size
and to how batches are distributed over workers.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, AttackResult, checkerboard_target, make_loss_provider, pgd_attack
from .diffusion import sdedit_batch
from .errors import ConfigError
from .metrics import (
    Featurizer,
    embedding_cosine,
    frechet_feature_distance,
    paired_delta_significant,
    perceptual_distance,
    ssim,
)
from .models import LatentDiffusionModel, UNetDenoiser, latent_amplification, ldm_edit_batch
from .purify import PurifyConfig, run_purifier
from .rng import Rng

log = logging.getLogger(__name__)

# SDEdit depth used for every evaluation edit (the "does the protection
# disturb editing" probe), as a fraction of the chain length.
EVAL_EDIT_FRACTION = 0.3


def eval_edit_depth(T: int) -> int:
    return round(EVAL_EDIT_FRACTION * T)


# ---------------------------------------------------------------------------
# batched, worker-aware set operations


def _chunks(n: int, size: int) -> list[range]:
    return [range(s, min(s + size, n)) for s in range(0, n, size)]


def _call(task):
    return task()


def _run_tasks(tasks, workers: int):
    """Run callable tasks, preserving order; fan out to processes if asked.

    Batch composition is fixed before distribution, so worker count changes
    scheduling only, never numerics.
    """
    if workers <= 1 or len(tasks) <= 1:
        return [t() for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, tasks))


@dataclass
class _EditTask:
    model: object
    images: np.ndarray
    indices: list[int]
    t_star: int
    seed: int
    latent: bool

    def __call__(self):
        rngs = [Rng(self.seed).derive("edit", i) for i in self.indices]
        if self.latent:
            out = ldm_edit_batch(self.model, self.images, self.t_star, self.model.schedule, rngs)
        else:
            out = sdedit_batch(self.model, self.images, self.t_star, self.model.schedule, rngs)
        return np.clip(out, 0.0, 1.0)


def edit_set(
    model,
    images: np.ndarray,
    t_star: int,
    seed: int,
    batch_size: int = 16,
    workers: int = 1,
) -> np.ndarray:
    """SDEdit every image (pixel model or latent pipeline), clamped output."""
    latent = isinstance(model, LatentDiffusionModel)
    tasks = [
        _EditTask(model, images[list(chunk)], list(chunk), t_star, seed, latent)
        for chunk in _chunks(len(images), batch_size)
    ]
    outs = _run_tasks(tasks, workers)
    return np.concatenate(outs, axis=0) if outs else images.copy()


@dataclass
class _AttackTask:
    images: np.ndarray
    indices: list[int]
    cfg: AttackConfig
    provider_spec: dict

    def __call__(self):
        provider = make_loss_provider(**self.provider_spec)
        rngs = [Rng(self.cfg.seed).derive("attack", i) for i in self.indices]
        return pgd_attack(self.images, provider, self.cfg, rngs=rngs)


def attack_set(
    images: np.ndarray,
    cfg: AttackConfig,
    *,
    ldm: LatentDiffusionModel | None = None,
    pdm: UNetDenoiser | None = None,
    target: np.ndarray | None = None,
    batch_size: int = 16,
    workers: int = 1,
) -> tuple[np.ndarray, list[AttackResult]]:
    """PGD over an image set; returns (stacked x_adv, per-image results)."""
    cfg.validate()
    if target is None and cfg.loss_kind in ("textural", "mist", "ita", "end_to_end"):
        h, w, c = images.shape[1:]
        target = checkerboard_target(h, w, c, seed=cfg.target_seed)
    spec = dict(
        kind=cfg.loss_kind,
        ldm=ldm,
        pdm=pdm,
        target=target,
        mist_weight=cfg.mist_weight,
        mc_samples=cfg.mc_samples,
        edit_t_star=cfg.edit_t_star,
    )
    tasks = [
        _AttackTask(images[list(chunk)], list(chunk), cfg, spec)
        for chunk in _chunks(len(images), batch_size)
    ]
    outs = _run_tasks(tasks, workers)
    results: list[AttackResult] = [r for batch in outs for r in (batch if isinstance(batch, list) else [batch])]
    x_adv = np.stack([r.x_adv for r in results]) if results else images.copy()
    return x_adv, results


# ---------------------------------------------------------------------------
# metric bundles


@dataclass
class EditQuality:
    """Set-level quality of edited images against the clean originals."""

    fid: float
    ssim_mean: float
    perceptual_mean: float
    cosine_mean: float
    ssim_series: np.ndarray = field(repr=False, default=None)

    @classmethod
    def measure(cls, edited: np.ndarray, originals: np.ndarray, reference: np.ndarray, feat: Featurizer):
        fid = frechet_feature_distance(edited, reference, feat)
        ssims = np.array([ssim(e, o) for e, o in zip(edited, originals)])
        percs = np.array([perceptual_distance(e, o, feat) for e, o in zip(edited, originals)])
        coss = np.array([embedding_cosine(e, o, feat) for e, o in zip(edited, originals)])
        return cls(fid, float(ssims.mean()), float(percs.mean()), float(coss.mean()), ssims)


METRIC_COLUMNS = ("fid", "ssim", "perceptual", "cosine")


def quality_delta(clean: EditQuality, adv: EditQuality) -> dict[str, float]:
    return {
        "fid": adv.fid - clean.fid,
        "ssim": adv.ssim_mean - clean.ssim_mean,
        "perceptual": adv.perceptual_mean - clean.perceptual_mean,
        "cosine": adv.cosine_mean - clean.cosine_mean,
    }


# ---------------------------------------------------------------------------
# experiments


@dataclass
class AsymmetryOutcome:
    """One model's clean-vs-protected edit quality at one budget."""

    model_kind: str
    attack: str
    budget_255: int
    clean: EditQuality
    adv: EditQuality
    ssim_deltas: np.ndarray  # per image, clean-edit minus adv-edit
    ssim_significant: bool
    ssim_p: float
    amplification: np.ndarray | None  # per image, latent models only


def attack_asymmetry(
    pdm: UNetDenoiser,
    ldm: LatentDiffusionModel,
    feat: Featurizer,
    eval_images: np.ndarray,
    budgets_255: tuple[int, ...] = (4, 8, 16),
    iterations: int = 100,
    seed: int = 0,
    batch_size: int = 16,
    workers: int = 1,
) -> list[AsymmetryOutcome]:
    """Protect the eval set against each model and measure the edit damage.

    Latent model: semantic latent loss; pixel model: semantic pixel loss.
    Edits use matched per-image seeds for the clean and protected variants,
    so per-image deltas isolate the perturbation's effect.
    """
    outcomes = []
    T = pdm.schedule.T
    depth = eval_edit_depth(T)
    reference = eval_images
    edited_clean = {
        "ldm": edit_set(ldm, eval_images, depth, seed, batch_size, workers),
        "pdm": edit_set(pdm, eval_images, depth, seed, batch_size, workers),
    }
    for budget in budgets_255:
        for model_kind, attack_kind in (("ldm", "semantic_latent"), ("pdm", "semantic_pixel")):
            cfg = AttackConfig(
                budget=budget / 255.0,
                step=1 / 255.0,
                iterations=iterations,
                loss_kind=attack_kind,
                seed=Rng(seed).derive("attack-seed", attack_kind, budget).stream_key,
            )
            x_adv, _ = attack_set(
                eval_images, cfg, ldm=ldm, pdm=pdm, batch_size=batch_size, workers=workers
            )
            editor = ldm if model_kind == "ldm" else pdm
            edited_adv = edit_set(editor, x_adv, depth, seed, batch_size, workers)
            clean_q = EditQuality.measure(edited_clean[model_kind], eval_images, reference, feat)
            adv_q = EditQuality.measure(edited_adv, eval_images, reference, feat)
            deltas = clean_q.ssim_series - adv_q.ssim_series
            significant, p = paired_delta_significant(deltas)
            amp = None
            if model_kind == "ldm":
                amp = np.array(
                    [latent_amplification(ldm.autoencoder, x, xa) for x, xa in zip(eval_images, x_adv)]
                )
            outcomes.append(
                AsymmetryOutcome(
                    model_kind, attack_kind, budget, clean_q, adv_q, deltas, significant, p, amp
                )
            )
            log.info(
                "asymmetry %s delta=%d/255: fid %.3f -> %.3f, ssim %.3f -> %.3f (p=%.3g)",
                model_kind, budget, clean_q.fid, adv_q.fid, clean_q.ssim_mean, adv_q.ssim_mean, p,
            )
    return outcomes


@dataclass
class _PurifyTask:
    images: np.ndarray
    cfgs: list[PurifyConfig]
    pdm: UNetDenoiser | None
    ldm: LatentDiffusionModel | None

    def __call__(self):
        return np.stack(
            [run_purifier(cfg, img, pdm=self.pdm, ldm=self.ldm) for img, cfg in zip(self.images, self.cfgs)]
        )


@dataclass
class PurifyOutcome:
    attack: str
    purifier: str
    fid: float
    ssim_mean: float


def purification_grid(
    pdm: UNetDenoiser,
    ldm: LatentDiffusionModel,
    feat: Featurizer,
    eval_images: np.ndarray,
    protected: dict[str, np.ndarray],
    purify_cfgs: dict[str, PurifyConfig],
    seed: int = 0,
    batch_size: int = 16,
    workers: int = 1,
) -> tuple[float, list[PurifyOutcome]]:
    """Table of post-purification edit quality for every (attack, purifier).

    Evaluation edits always run through the latent pipeline (the protected
    editor).  Returns (clean-edit FID baseline, rows); each attack also gets
    a purifier="none" row for the unpurified protected set.
    """
    depth = eval_edit_depth(ldm.schedule.T)
    edited_clean = edit_set(ldm, eval_images, depth, seed, batch_size, workers)
    clean_q = EditQuality.measure(edited_clean, eval_images, eval_images, feat)
    rows: list[PurifyOutcome] = []
    for attack_name, x_adv in protected.items():
        variants: dict[str, np.ndarray] = {"none": x_adv}
        for purifier_name, pcfg in purify_cfgs.items():
            tasks = [
                _PurifyTask(
                    x_adv[list(chunk)],
                    [_reseeded(pcfg, Rng(pcfg.seed).derive("purify", attack_name, i).stream_key) for i in chunk],
                    pdm,
                    ldm,
                )
                for chunk in _chunks(len(x_adv), batch_size)
            ]
            variants[purifier_name] = np.concatenate(_run_tasks(tasks, workers), axis=0)
        for purifier_name, images in variants.items():
            edited = edit_set(ldm, images, depth, seed, batch_size, workers)
            q = EditQuality.measure(edited, eval_images, eval_images, feat)
            rows.append(PurifyOutcome(attack_name, purifier_name, q.fid, q.ssim_mean))
            log.info("purify %s/%s: fid %.3f (clean %.3f)", attack_name, purifier_name, q.fid, clean_q.fid)
    return clean_q.fid, rows


def _reseeded(cfg: PurifyConfig, seed: int) -> PurifyConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def recovery_fraction(clean_fid: float, adv_fid: float, purified_fid: float) -> float:
    """Share of the adversarial FID increase removed by purification."""
    damage = adv_fid - clean_fid
    if damage <= 0:
        return 1.0
    return (adv_fid - purified_fid) / damage
