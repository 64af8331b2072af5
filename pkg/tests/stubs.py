"""Shared test doubles: oracle denoisers and tiny model factories."""

import numpy as np

from diffdesk.diffusion import NoiseSchedule, make_linear_schedule
from diffdesk.models import Autoencoder, DenoiserArch, LatentDiffusionModel, UNetDenoiser
from diffdesk.numerics import Tensor, scale_per_sample
from diffdesk.rng import Rng


class GraphOracleDenoiser:
    """Perfect noise estimator for a known clean input, built on the graph.

    forward(x_t, t) = (x_t - sqrt(ab_t) * x0) / sqrt(1 - ab_t), which equals
    the injected noise whenever x_t = q_sample(x0, t, eps).  Gradients flow
    through x_t.
    """

    def __init__(self, x0: np.ndarray, sched: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = sched

    @property
    def input_shape(self):
        return self.x0.shape

    def parameters(self):
        return {}

    def forward(self, x_t, t):
        if not isinstance(x_t, Tensor):
            x_t = Tensor(x_t)
        t = np.atleast_1d(np.asarray(t))
        ab = self.schedule.alpha_bar(t)
        shift = np.sqrt(ab).reshape((-1,) + (1,) * self.x0.ndim) * self.x0[None]
        centered = x_t + Tensor(-np.broadcast_to(shift, x_t.data.shape).copy())
        return scale_per_sample(centered, 1.0 / np.sqrt(1.0 - ab))


class ConstantDenoiser:
    """Always predicts a fixed array (broadcast over the batch)."""

    def __init__(self, value: np.ndarray, sched: NoiseSchedule):
        self.value = np.asarray(value, dtype=np.float64)
        self.schedule = sched

    @property
    def input_shape(self):
        return self.value.shape

    def parameters(self):
        return {}

    def forward(self, x_t, t):
        n = (x_t.data if isinstance(x_t, Tensor) else x_t).shape[0]
        return Tensor(np.repeat(self.value[None], n, axis=0))


def tiny_unet(seed=0, shape=(8, 8, 3), widths=(8, 16), sched=None):
    model = UNetDenoiser(
        DenoiserArch(
            height=shape[0], width=shape[1], channels=shape[2], widths=widths,
            blocks_per_level=1, time_dim=8,
        ),
        Rng(seed),
    )
    model.schedule = sched if sched is not None else make_linear_schedule()
    return model


def identity_ldm(shape=(8, 8, 3), denoiser_seed=0, sched=None):
    """LDM whose encoder/decoder are the exact identity (f=1, eye weights)."""
    sched = sched if sched is not None else make_linear_schedule()
    ae = Autoencoder.identity(channels=shape[2], height=shape[0], width=shape[1])
    den = tiny_unet(denoiser_seed, shape, sched=sched)
    return LatentDiffusionModel(autoencoder=ae, latent_denoiser=den, latent_scale=1.0)
