"""Base-model training on the synthetic target distribution.

Flow-ot fits the straight-path velocity (noise minus data); ddpm fits
the standard noise-prediction regression. Conditions are dropped to the
null embedding at the configured rate so scaled guidance has an
unconditional branch to extrapolate from.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import value_and_grad
from .data import GaussianMixture
from .nets import PolicyNet
from .optim import AdamW
from .sampler import DivergenceError
from .schedule import NoiseSchedule

__all__ = ["pretrain_base"]


def pretrain_base(policy: PolicyNet, mixture: GaussianMixture, sched: NoiseSchedule,
                  steps: int, batch: int, lr: float, seed: int,
                  betas=(0.9, 0.999), weight_decay: float = 0.0) -> list[float]:
    """Train the denoiser in place; returns the per-step loss history.

    Zero steps is a no-op. Aborts with DivergenceError (carrying the step
    index and loss) if the regression loss goes non-finite.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))
    opt = AdamW(policy.params, lr, betas=betas, weight_decay=weight_decay)
    T = sched.steps
    losses: list[float] = []

    for step in range(steps):
        x0, ys = mixture.sample(batch, rng)
        drop = rng.random(batch) < policy.cond_dropout
        ys = np.where(drop, policy.null_class, ys)
        ks = rng.integers(1, T + 1, size=batch)  # diffusion indices, clean end excluded
        eps = rng.standard_normal((batch, policy.dim))

        if sched.kind == "ddpm":
            ab = sched.alpha_bars[ks][:, None]
            z = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
            target = eps
            tvals = ks / T
        else:
            t = (ks / T)[:, None]
            z = (1.0 - t) * x0 + t * eps
            target = eps - x0
            tvals = ks / T

        def loss_fn(p):
            pred = policy.forward(z, tvals, ys, params=p)
            diff = ad.sub(pred, target)
            return ad.tmean(ad.mul(diff, diff))

        loss, grads = value_and_grad(loss_fn, policy.params)
        if not np.isfinite(loss):
            raise DivergenceError(f"pretraining loss non-finite at step {step}: {loss}")
        opt.step(policy.params, grads)
        losses.append(loss)
    return losses
