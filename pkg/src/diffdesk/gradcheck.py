"""Randomized gradient verification: reverse mode vs central differences.

Builds small random networks over the full operator set and compares every
parameter and input gradient against the finite-difference oracle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffusion import make_linear_schedule, training_loss
from .models import DenoiserArch, UNetDenoiser
from .numerics import Tensor, finite_difference_gradient
from .rng import Rng


@dataclass
class GradCheckResult:
    seed: int
    params: int
    max_rel_err: float
    elapsed: float


def _network_loss(model, x0: np.ndarray, sched, rng: Rng):
    """Scalar probe exercising conv, norm, silu, upsample, concat, affine,
    time embedding, and the reductions in one graph."""
    return training_loss(model, Tensor(x0, requires_grad=True), rng, sched)


def check_network(seed: int, h: float = 1e-4) -> GradCheckResult:
    """One random small network; returns the worst relative gradient error."""
    start = time.perf_counter()
    r = Rng(seed).derive("gradcheck")
    size = 4 if int(r.derive("size").integers(0, 2)) else 6  # mostly 4x4
    channels = int(r.derive("ch").integers(1, 3))
    w0 = 2 if int(r.derive("w0").integers(0, 2)) else 3  # mostly the small width
    arch = DenoiserArch(
        height=size, width=size, channels=channels,
        widths=(w0, 2 * w0), blocks_per_level=1,
        time_dim=2 * int(r.derive("td").integers(2, 3)),
    )
    model = UNetDenoiser(arch, r.derive("init"))
    sched = make_linear_schedule(T=10, beta_start=0.02, beta_end=0.4)
    x0 = r.derive("x0").uniform(0.1, 0.9, (1, size, size, channels))
    loss_rng = r.derive("loss")

    params = model.parameters()
    x_leaf = Tensor(x0, requires_grad=True)
    loss = training_loss(model, x_leaf, loss_rng, sched)
    for p in params.values():
        p.grad = None
        p._grad_owned = False
    loss.backward()

    worst = 0.0

    def compare(reverse_grad, leaf_tensor, as_input=False):
        nonlocal worst
        saved = leaf_tensor.data.copy()

        def f(v):
            leaf_tensor.data = v
            try:
                return training_loss(model, Tensor(x0) if not as_input else Tensor(v), loss_rng, sched).item()
            finally:
                leaf_tensor.data = saved

        if as_input:
            fd = finite_difference_gradient(lambda v: training_loss(model, Tensor(v), loss_rng, sched).item(), saved.copy(), h)
        else:
            fd = finite_difference_gradient(f, saved.copy(), h)
        scale = max(np.max(np.abs(fd)), 1e-8)
        rg = reverse_grad if reverse_grad is not None else np.zeros_like(saved)
        worst = max(worst, float(np.max(np.abs(rg - fd)) / scale))

    for name, p in params.items():
        compare(p.grad, p)
    compare(x_leaf.grad, x_leaf, as_input=True)
    return GradCheckResult(seed, model.param_count(), worst, time.perf_counter() - start)


def run_suite(n_networks: int = 20, tol: float = 1e-4, verbose: bool = False) -> list[GradCheckResult]:
    results = []
    for seed in range(n_networks):
        res = check_network(seed)
        results.append(res)
        if verbose:
            status = "ok" if res.max_rel_err <= tol else "FAIL"
            print(
                f"network seed={res.seed:<3d} params={res.params:<6d} "
                f"max rel err={res.max_rel_err:.3e}  [{status}]  ({res.elapsed:.2f}s)"
            )
    return results
