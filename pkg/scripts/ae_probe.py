"""Autoencoder capacity probe: reconstruction quality vs encoder fragility.

Trains AE variants and measures held-out MAE, PGD latent amplification, and
the damage a semantic attack does to latent edits.  Guides the acceptance
bundle settings; not part of the test suite.
"""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from diffdesk.attacks import AttackConfig, make_loss_provider, pgd_attack
from diffdesk.data_io import SyntheticSpec, generate_synthetic_dataset
from diffdesk.diffusion import make_linear_schedule, train
from diffdesk.harness import edit_set
from diffdesk.metrics import ssim
from diffdesk.models import (
    Autoencoder,
    AutoencoderArch,
    DenoiserArch,
    LatentDiffusionModel,
    UNetDenoiser,
    latent_amplification,
    measure_latent_scale,
    train_autoencoder,
)
from diffdesk.numerics import Tensor
from diffdesk.rng import Rng

t0 = time.time()


def stamp(msg):
    print(f"[{time.time() - t0:7.1f}s] {msg}", flush=True)


root = Rng(0)
sched = make_linear_schedule()
images = generate_synthetic_dataset(SyntheticSpec(size=32, count=1200, seed=root.derive("dataset").stream_key))[0]
eval_images = generate_synthetic_dataset(SyntheticSpec(size=32, count=32, seed=root.derive("eval-set").stream_key))[0]

variants = [
    ("C deep-res (24,48) stem16 blk2 ep40", dict(hidden=(24, 48), stem_channels=16, blocks_per_stage=2), 40),
]

for label, akw, epochs in variants:
    ae = Autoencoder(AutoencoderArch(**akw), root.derive("init", label))
    rep = train_autoencoder(ae, images, epochs=epochs, lr=2e-3,
                            rng=root.derive("train", label), batch_size=32)
    scale = measure_latent_scale(ae, images)
    stamp(f"{label}: params {ae.param_count()} holdout MAE {ae.holdout_mae:.4f} scale {scale:.2f}")

    # quick latent denoiser so semantic attacks are meaningful
    latents = np.concatenate([ae.encode(Tensor(images[i:i+64])).data for i in range(0, len(images), 64)]) * scale
    lat = UNetDenoiser(DenoiserArch(8, 8, 4, widths=(16, 32), blocks_per_level=2, time_dim=32),
                       root.derive("lat-init", label))
    lat.schedule = sched
    train(lat, latents, epochs=10, batch_size=32, lr=2e-3, rng=root.derive("lat-train", label), sched=sched)
    ldm = LatentDiffusionModel(ae, lat, scale)

    for kind in ("semantic_latent", "textural"):
        provider = make_loss_provider(kind, ldm=ldm, target=np.full((32, 32, 3), 0.95) * ((np.indices((32, 32)).sum(0) // 4 % 2))[:, :, None])
        cfg = AttackConfig(budget=16 / 255, step=1 / 255, iterations=100, loss_kind=kind, seed=5)
        results = pgd_attack(eval_images, provider, cfg)
        x_adv = np.stack([r.x_adv for r in results])
        amps = [latent_amplification(ae, x, xa) for x, xa in zip(eval_images, x_adv)]
        # scaled latent perturbation magnitude vs the edit noise at t*=30
        dz = (ldm.encode_scaled(x_adv).data - ldm.encode_scaled(eval_images).data)
        dz_rms = float(np.sqrt(np.mean(dz ** 2)))
        edited_clean = edit_set(ldm, eval_images, 30, seed=9, batch_size=16)
        edited_adv = edit_set(ldm, x_adv, 30, seed=9, batch_size=16)
        s_clean = np.mean([ssim(e, x) for e, x in zip(edited_clean, eval_images)])
        s_adv = np.mean([ssim(e, x) for e, x in zip(edited_adv, eval_images)])
        stamp(f"  {kind}: amp median {np.median(amps):.2f} scaled|dz| {dz_rms:.3f} "
              f"edit ssim {s_clean:.3f} -> {s_adv:.3f} (drop {s_clean - s_adv:+.3f})")
stamp("probe done")
