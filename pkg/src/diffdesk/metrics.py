"""Image-quality and distribution-distance metrics.

Desk-scale substitutes for the usual pretrained-network metrics: the frozen
encoder of the trained toy autoencoder acts as the feature network for the
Frechet distance ("FID-lite"), the multi-layer perceptual distance, and the
embedding cosine ("IA-lite").  Absolute values are not comparable to
Inception/CLIP-based numbers; only deltas and orderings are used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MetricError, ShapeError
from .models import Autoencoder
from .numerics import Tensor


# ---------------------------------------------------------------------------
# windowed structural similarity

SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _window_means(x: np.ndarray) -> np.ndarray:
    """Means of 8x8 windows at stride 4; x is (H, W, C)."""
    h, w = x.shape[:2]
    ny = max((h - SSIM_WINDOW) // SSIM_STRIDE + 1, 1)
    nx = max((w - SSIM_WINDOW) // SSIM_STRIDE + 1, 1)
    out = np.empty((ny, nx, x.shape[2]))
    for iy in range(ny):
        for ix in range(nx):
            patch = x[iy * SSIM_STRIDE : iy * SSIM_STRIDE + SSIM_WINDOW, ix * SSIM_STRIDE : ix * SSIM_STRIDE + SSIM_WINDOW]
            out[iy, ix] = patch.mean(axis=(0, 1))
    return out


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity on unit dynamic range, channel-averaged.

    8x8 windows, stride 4, C1 = 0.01^2, C2 = 0.03^2 (the original
    publication's constants).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (H, W, C), got {a.shape}")
    h, w = a.shape[:2]
    ny = max((h - SSIM_WINDOW) // SSIM_STRIDE + 1, 1)
    nx = max((w - SSIM_WINDOW) // SSIM_STRIDE + 1, 1)
    total = 0.0
    count = 0
    for iy in range(ny):
        for ix in range(nx):
            ys, xs = iy * SSIM_STRIDE, ix * SSIM_STRIDE
            pa = a[ys : ys + SSIM_WINDOW, xs : xs + SSIM_WINDOW]
            pb = b[ys : ys + SSIM_WINDOW, xs : xs + SSIM_WINDOW]
            mu_a = pa.mean(axis=(0, 1))
            mu_b = pb.mean(axis=(0, 1))
            var_a = ((pa - mu_a) ** 2).mean(axis=(0, 1))
            var_b = ((pb - mu_b) ** 2).mean(axis=(0, 1))
            cov = ((pa - mu_a) * (pb - mu_b)).mean(axis=(0, 1))
            num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
            den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
            total += float(np.mean(num / den))
            count += 1
    return total / count


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) on unit range; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


# ---------------------------------------------------------------------------
# featurizer-backed metrics


@dataclass
class Featurizer:
    """Frozen encoder stages of a trained autoencoder plus average pooling.

    `feature_maps` returns the per-stage activations; `embed` concatenates
    their spatial means into one vector per image.
    """

    autoencoder: Autoencoder

    def feature_maps(self, xs: np.ndarray) -> list[np.ndarray]:
        """Per-stage encoder activations (downsampled stages plus latent)."""
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim == 3:
            xs = xs[None]
        return [stage.data for stage in self.autoencoder.encode_stages(Tensor(xs))]

    def embed(self, xs: np.ndarray) -> np.ndarray:
        maps = self.feature_maps(xs)
        return np.concatenate([m.mean(axis=(1, 2)) for m in maps], axis=1)

    @property
    def dim(self) -> int:
        probe = np.zeros((1,) + tuple(self.autoencoder.input_shape))
        return self.embed(probe).shape[1]


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians from their moments.

    ||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)), with the
    matrix square root taken by eigendecomposition of the symmetrized
    product and negative eigenvalues clipped at zero.
    """
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    diff = mu_a - mu_b
    # sqrtm(cov_a) via eigendecomposition, eigenvalues clipped at 0
    vals_a, vecs_a = np.linalg.eigh((cov_a + cov_a.T) / 2.0)
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = root_a @ cov_b @ root_a
    vals, _ = np.linalg.eigh((inner + inner.T) / 2.0)
    trace_sqrt = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)


def frechet_feature_distance(set_a: np.ndarray, set_b: np.ndarray, featurizer: Featurizer) -> float:
    """FID-lite: Frechet distance between featurizer embeddings of two sets."""
    emb_a = featurizer.embed(set_a)
    emb_b = featurizer.embed(set_b)
    dim = emb_a.shape[1]
    minimum = dim + 1
    if emb_a.shape[0] < minimum or emb_b.shape[0] < minimum:
        raise MetricError(
            f"need at least {minimum} images per set for a rank-{dim} covariance, "
            f"got {emb_a.shape[0]} and {emb_b.shape[0]}"
        )
    mu_a, mu_b = emb_a.mean(axis=0), emb_b.mean(axis=0)
    cov_a = np.cov(emb_a, rowvar=False)
    cov_b = np.cov(emb_b, rowvar=False)
    return frechet_from_stats(mu_a, cov_a, mu_b, cov_b)


def perceptual_distance(a: np.ndarray, b: np.ndarray, featurizer: Featurizer) -> float:
    """LPIPS-lite: mean over encoder stages of normalized feature-map MSE.

    Feature vectors are unit-normalized along the channel axis per spatial
    location before differencing, so stages with different scales weigh in
    comparably.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"perceptual_distance: shapes differ, {a.shape} vs {b.shape}")
    maps_a = featurizer.feature_maps(a)
    maps_b = featurizer.feature_maps(b)
    total = 0.0
    for ma, mb in zip(maps_a, maps_b):
        na = ma / (np.linalg.norm(ma, axis=3, keepdims=True) + 1e-10)
        nb = mb / (np.linalg.norm(mb, axis=3, keepdims=True) + 1e-10)
        total += float(np.mean((na - nb) ** 2))
    return total / len(maps_a)


def embedding_cosine(a: np.ndarray, b: np.ndarray, featurizer: Featurizer) -> float:
    """IA-lite: cosine similarity between pooled feature embeddings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"embedding_cosine: shapes differ, {a.shape} vs {b.shape}")
    va = featurizer.embed(a)[0]
    vb = featurizer.embed(b)[0]
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise MetricError("zero feature vector; cosine similarity undefined")
    return float(np.dot(va, vb) / (na * nb))


@dataclass
class MetricReport:
    """Set-level quality summary: per-metric mean, stderr, and count.

    The Frechet distance is a set statistic (no per-image series), so its
    stderr is None.
    """

    count: int
    ssim: float
    ssim_stderr: float
    psnr: float
    psnr_stderr: float
    frechet: float
    perceptual: float
    perceptual_stderr: float
    cosine: float
    cosine_stderr: float

    @classmethod
    def measure(
        cls,
        edited: np.ndarray,
        originals: np.ndarray,
        reference: np.ndarray,
        featurizer: Featurizer,
    ) -> "MetricReport":
        n = len(edited)
        if n == 0 or n != len(originals):
            raise MetricError("metric report needs equally sized, nonempty sets")
        ssims = np.array([ssim(e, o) for e, o in zip(edited, originals)])
        psnrs = np.array([psnr(e, o) for e, o in zip(edited, originals)])
        percs = np.array([perceptual_distance(e, o, featurizer) for e, o in zip(edited, originals)])
        coss = np.array([embedding_cosine(e, o, featurizer) for e, o in zip(edited, originals)])

        def err(v):
            finite = v[np.isfinite(v)]
            if finite.size < 2:
                return 0.0
            return float(finite.std(ddof=1) / math.sqrt(finite.size))

        def mean(v):
            finite = v[np.isfinite(v)]
            return float(finite.mean()) if finite.size else math.inf

        return cls(
            count=n,
            ssim=float(ssims.mean()),
            ssim_stderr=err(ssims),
            psnr=mean(psnrs),
            psnr_stderr=err(psnrs),
            frechet=frechet_feature_distance(edited, reference, featurizer),
            perceptual=float(percs.mean()),
            perceptual_stderr=err(percs),
            cosine=float(coss.mean()),
            cosine_stderr=err(coss),
        )

    def validate(self) -> None:
        if not (-1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9):
            raise MetricError(f"ssim {self.ssim} outside [-1, 1]")
        if self.frechet < -1e-6:
            raise MetricError(f"frechet distance {self.frechet} below the numerical floor")
        if not (-1.0 - 1e-9 <= self.cosine <= 1.0 + 1e-9):
            raise MetricError(f"cosine {self.cosine} outside [-1, 1]")


# ---------------------------------------------------------------------------
# significance helper for paired deltas


def paired_delta_significant(deltas: np.ndarray, alpha: float = 0.05) -> tuple[bool, float]:
    """Two-sided paired test of mean(delta) = 0 via the normal approximation.

    Valid for the sample sizes used here (n >= 30); returns (significant,
    p_value).
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    n = deltas.size
    if n < 30:
        raise MetricError(f"paired test needs at least 30 samples, got {n}")
    sd = float(deltas.std(ddof=1))
    if sd == 0.0:
        return (False, 1.0) if float(np.mean(deltas)) == 0.0 else (True, 0.0)
    z = float(np.mean(deltas)) / (sd / math.sqrt(n))
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return p < alpha, p
