"""diffdesk: a desk-scale diffusion testbed.

Trains toy pixel-space and latent diffusion models on synthetic images,
generates protective adversarial perturbations with the full PGD loss
family, purifies them, and scores everything with self-contained
image-quality metrics.
"""

__version__ = "0.1.0"
