"""Trained-model contracts: quality gates and optimization smoke tests.

These use the session-scoped acceptance bundle (see conftest), so they run
against the same trained models as the acceptance criteria.
"""

import numpy as np

from diffdesk.attacks import AttackConfig, checkerboard_target, make_loss_provider, pgd_attack, textural_loss
from diffdesk.diffusion import EditConfig, sample, sdedit
from diffdesk.harness import edit_set
from diffdesk.metrics import ssim
from diffdesk.models import latent_amplification
from diffdesk.numerics import Tensor
from diffdesk.rng import Rng


def test_autoencoder_holdout_reconstruction(bundle):
    eval_images = bundle.eval_images(64)
    rec = bundle.ae.decode(bundle.ae.encode(Tensor(eval_images))).data
    mae = float(np.mean(np.abs(rec - eval_images)))
    assert mae <= 0.05
    assert bundle.ae.holdout_mae is not None and bundle.ae.holdout_mae <= 0.05


def test_latent_shape_contract(bundle):
    x = bundle.eval_images(2)
    z = bundle.ae.encode(Tensor(x)).data
    assert z.shape == (2, 8, 8, 4)  # 3x32x32 -> 4x(32/4)x(32/4)


def test_pdm_sample_channel_means(bundle):
    rng = Rng(0).derive("sample-test")
    samples = np.clip(
        np.stack([sample(bundle.pdm, (32, 32, 3), bundle.sched, rng.derive(i)) for i in range(256)]),
        0.0,
        1.0,
    )
    sample_means = samples.mean(axis=(0, 1, 2))
    data_means = bundle.train_images.mean(axis=(0, 1, 2))
    assert np.all(np.abs(sample_means - data_means) <= 0.15)


def test_clean_edit_baseline(bundle):
    # the recorded clean-edit quality floor for t* = 0.1T latent edits
    eval_images = bundle.eval_images(32)
    edited = edit_set(bundle.ldm, eval_images, 10, seed=5, batch_size=16)
    values = np.array([ssim(e, x) for e, x in zip(edited, eval_images)])
    baseline = float(values.mean())
    assert baseline >= CLEAN_EDIT_SSIM_FLOOR
    assert values.min() > 0.0


# Frozen from the recorded clean-baseline measurement of the acceptance
# bundle (mean SSIM of t*=0.1T latent edits), with safety margin.
CLEAN_EDIT_SSIM_FLOOR = 0.45


def test_sdedit_full_depth_approaches_unconditional_sampling(bundle):
    x = bundle.eval_images(1)[0]
    rng_seed = 77
    edited = sdedit(bundle.pdm, x, EditConfig(t_star=bundle.sched.T, seed=rng_seed), bundle.sched)
    drawn = sample(bundle.pdm, x.shape, bundle.sched, Rng(rng_seed))
    # the initial states differ only by sqrt(alpha_bar_T) * x <= 0.1 * |x|
    mae = float(np.mean(np.abs(edited - drawn)))
    assert mae <= 0.15


def test_end_to_end_loss_decreases_under_pgd(bundle):
    x = bundle.eval_images(4)
    target = np.full_like(x[0], 0.5)
    provider = make_loss_provider("end_to_end", ldm=bundle.ldm, target=target, edit_t_star=2)
    cfg = AttackConfig(budget=16 / 255, step=1 / 255, iterations=20, loss_kind="end_to_end", seed=3)
    results = pgd_attack(x, provider, cfg)
    for res in results:
        # the trajectory records the true distance-to-target, which the
        # targeted attack drives down
        assert res.loss_trajectory[-3:].mean() < res.loss_trajectory[:3].mean()


def test_textural_attack_contracts_encoder_distance(bundle):
    x = bundle.eval_images(4)
    y = checkerboard_target(32, 32)
    before = np.array([-textural_loss(bundle.ae, xi, y)[0] for xi in x])
    provider = make_loss_provider("textural", ldm=bundle.ldm, target=y)
    cfg = AttackConfig(budget=16 / 255, step=1 / 255, iterations=50, loss_kind="textural", seed=4)
    results = pgd_attack(x, provider, cfg)
    after = np.array([-textural_loss(bundle.ae, r.x_adv, y)[0] for r in results])
    assert np.all(after < before)


def test_amplification_median_above_one_on_attacked_subset(bundle):
    x = bundle.eval_images(16)
    provider = make_loss_provider("semantic_latent", ldm=bundle.ldm)
    cfg = AttackConfig(budget=16 / 255, step=1 / 255, iterations=50, loss_kind="semantic_latent", seed=6)
    results = pgd_attack(x, provider, cfg)
    ratios = [latent_amplification(bundle.ae, xi, r.x_adv) for xi, r in zip(x, results)]
    assert np.median(ratios) > 1.0


def test_semantic_budget_monotonicity(bundle):
    x = bundle.eval_images(8)
    provider = make_loss_provider("semantic_latent", ldm=bundle.ldm)
    finals = []
    for budget in (4, 8, 16):
        cfg = AttackConfig(budget=budget / 255, step=1 / 255, iterations=40,
                           loss_kind="semantic_latent", seed=9)
        results = pgd_attack(x, provider, cfg)
        finals.append(np.mean([r.loss_trajectory[-5:].mean() for r in results]))
    assert finals[0] <= finals[1] <= finals[2]
