"""Session fixtures: acceptance-scale trained models.

Training the toy zoo takes minutes, so it happens once per session.  Set
DIFFDESK_TEST_CACHE=<dir> to persist checkpoints across runs while
iterating locally; the cache key covers every setting that affects the
result, so stale checkpoints are never reused.
"""

import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from diffdesk.data_io import SyntheticSpec, generate_synthetic_dataset, load_checkpoint, save_checkpoint
from diffdesk.diffusion import NoiseSchedule, make_linear_schedule, train
from diffdesk.metrics import Featurizer
from diffdesk.models import (
    Autoencoder,
    AutoencoderArch,
    DenoiserArch,
    LatentDiffusionModel,
    UNetDenoiser,
    measure_latent_scale,
    train_autoencoder,
)
from diffdesk.numerics import Tensor
from diffdesk.rng import Rng

# Acceptance-scale training settings (desk scale, single core friendly).
BUNDLE_SETTINGS = {
    "seed": 0,
    "dataset_count": 1200,
    "image_size": 32,
    "schedule": (100, 1e-4, 0.095),
    "ae": {"hidden": (16, 32), "factor": 4, "latent_channels": 4, "epochs": 40, "lr": 2e-3, "batch": 32},
    "latent": {"widths": (16, 32), "blocks": 2, "time_dim": 32, "epochs": 12, "lr": 2e-3, "batch": 32},
    "pdm": {"widths": (12, 24), "blocks": 2, "time_dim": 32, "epochs": 6, "lr": 2e-3, "batch": 16},
    "format": 3,
}


@dataclass
class TrainedBundle:
    pdm: UNetDenoiser
    ae: Autoencoder
    ldm: LatentDiffusionModel
    feat: Featurizer
    sched: NoiseSchedule
    train_images: np.ndarray

    def eval_images(self, count: int) -> np.ndarray:
        spec = SyntheticSpec(size=self.train_images.shape[1], count=count,
                             seed=Rng(BUNDLE_SETTINGS["seed"]).derive("eval-set").stream_key)
        return generate_synthetic_dataset(spec)[0]


def _settings_key() -> str:
    return hashlib.sha256(json.dumps(BUNDLE_SETTINGS, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _train_bundle() -> TrainedBundle:
    s = BUNDLE_SETTINGS
    root = Rng(s["seed"])
    sched = make_linear_schedule(*s["schedule"])
    images = generate_synthetic_dataset(
        SyntheticSpec(size=s["image_size"], count=s["dataset_count"], seed=root.derive("dataset").stream_key)
    )[0]

    ae = Autoencoder(
        AutoencoderArch(height=s["image_size"], width=s["image_size"], factor=s["ae"]["factor"],
                        latent_channels=s["ae"]["latent_channels"], hidden=s["ae"]["hidden"]),
        root.derive("init", "autoencoder"),
    )
    train_autoencoder(ae, images, epochs=s["ae"]["epochs"], lr=s["ae"]["lr"],
                      rng=root.derive("train", "autoencoder"), batch_size=s["ae"]["batch"])

    scale = measure_latent_scale(ae, images)
    latents = np.concatenate(
        [ae.encode(Tensor(images[i : i + 64])).data for i in range(0, len(images), 64)]
    ) * scale
    latent = UNetDenoiser(
        DenoiserArch(height=ae.latent_shape[0], width=ae.latent_shape[1], channels=ae.latent_shape[2],
                     widths=s["latent"]["widths"], blocks_per_level=s["latent"]["blocks"],
                     time_dim=s["latent"]["time_dim"]),
        root.derive("init", "latent"),
    )
    latent.schedule = sched
    train(latent, latents, epochs=s["latent"]["epochs"], batch_size=s["latent"]["batch"],
          lr=s["latent"]["lr"], rng=root.derive("train", "latent"), sched=sched)

    pdm = UNetDenoiser(
        DenoiserArch(height=s["image_size"], width=s["image_size"], channels=3,
                     widths=s["pdm"]["widths"], blocks_per_level=s["pdm"]["blocks"],
                     time_dim=s["pdm"]["time_dim"]),
        root.derive("init", "pdm"),
    )
    pdm.schedule = sched
    train(pdm, images, epochs=s["pdm"]["epochs"], batch_size=s["pdm"]["batch"],
          lr=s["pdm"]["lr"], rng=root.derive("train", "pdm"), sched=sched)

    ldm = LatentDiffusionModel(ae, latent, scale)
    return TrainedBundle(pdm, ae, ldm, Featurizer(ae), sched, images)


def _load_cached(cache: Path) -> TrainedBundle | None:
    try:
        ae_blob = load_checkpoint(cache / "autoencoder.ckpt")
        lat_blob = load_checkpoint(cache / "latent.ckpt")
        pdm_blob = load_checkpoint(cache / "pdm.ckpt")
    except Exception:
        return None
    ae = Autoencoder(AutoencoderArch.from_dict(ae_blob["descriptor"]))
    for name, arr in ae_blob["params"].items():
        ae.parameters()[name].data = arr
    ae.holdout_mae = ae_blob["descriptor"].get("holdout_mae")
    latent = UNetDenoiser(DenoiserArch.from_dict(lat_blob["descriptor"]))
    for name, arr in lat_blob["params"].items():
        latent.parameters()[name].data = arr
    latent.schedule = NoiseSchedule(lat_blob["betas"])
    pdm = UNetDenoiser(DenoiserArch.from_dict(pdm_blob["descriptor"]))
    for name, arr in pdm_blob["params"].items():
        pdm.parameters()[name].data = arr
    pdm.schedule = NoiseSchedule(pdm_blob["betas"])
    ldm = LatentDiffusionModel(ae, latent, lat_blob["descriptor"]["latent_scale"])
    s = BUNDLE_SETTINGS
    images = generate_synthetic_dataset(
        SyntheticSpec(size=s["image_size"], count=s["dataset_count"],
                      seed=Rng(s["seed"]).derive("dataset").stream_key)
    )[0]
    return TrainedBundle(pdm, ae, ldm, Featurizer(ae), pdm.schedule, images)


@pytest.fixture(scope="session")
def bundle() -> TrainedBundle:
    cache_root = os.environ.get("DIFFDESK_TEST_CACHE")
    cache = Path(cache_root) / _settings_key() if cache_root else None
    if cache is not None and cache.exists():
        loaded = _load_cached(cache)
        if loaded is not None:
            return loaded
    trained = _train_bundle()
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        save_checkpoint(trained.ae, cache / "autoencoder.ckpt")
        save_checkpoint(
            trained.ldm.latent_denoiser, cache / "latent.ckpt",
            schedule_betas=trained.sched.betas, extra={"latent_scale": trained.ldm.latent_scale},
        )
        save_checkpoint(trained.pdm, cache / "pdm.ckpt", schedule_betas=trained.sched.betas)
    return trained
