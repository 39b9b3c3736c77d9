"""Reverse samplers over a noise schedule and the Gaussian step policy.

Rollout step k moves the latent from timesteps[k] to timesteps[k+1]
(descending 1 -> 0). A stochastic step realizes z' ~ N(mu, sigma^2 I)
around the deterministic update mu and records the exact Gaussian
log-density. The last transition is always deterministic so the final
sample is the predicted mean; by convention its log-prob is stored as 0
and it is excluded from likelihood ratios downstream.

RNG contract: one trajectory consumes, in order, d values for the initial
latent and then d values per stochastic step. Deterministic steps consume
nothing. SMC particle propagation follows the same pattern so a single
particle reproduces a plain rollout bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import PolicyNet
from .schedule import NoiseSchedule

__all__ = [
    "LatentState",
    "Trajectory",
    "DivergenceError",
    "cfg_combine",
    "deterministic_step",
    "stochastic_step",
    "step_sigma",
    "gaussian_logpdf",
    "sample_trajectory",
    "sample_trajectories",
    "trajectory_streams",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class DivergenceError(RuntimeError):
    """Raised when a rollout or update produces non-finite numbers."""


@dataclass(frozen=True)
class LatentState:
    """MDP state: latent vector, rollout step index, timestep value, condition."""

    z: np.ndarray
    k: int
    t: float
    y: int


@dataclass
class Trajectory:
    """One finite-horizon rollout; arrays are indexed by rollout step."""

    zs: np.ndarray            # (T+1, d) latents, zs[0] is the initial noise
    actions: np.ndarray       # (T, d) realized next latents
    logprobs: np.ndarray      # (T,)   log pi(a_k | s_k); 0 on deterministic steps
    pred_means: np.ndarray    # (T, d) deterministic-step outputs
    sigmas: np.ndarray        # (T,)   per-step policy std
    y: int
    timesteps: np.ndarray     # (T+1,) schedule grid
    rewards: dict = field(default_factory=dict)
    reward_channel: str | None = None

    @property
    def x0(self) -> np.ndarray:
        return self.zs[-1]

    @property
    def steps(self) -> int:
        return self.actions.shape[0]

    def state(self, k: int) -> LatentState:
        return LatentState(self.zs[k], k, float(self.timesteps[k]), self.y)


def cfg_combine(pred_cond, pred_uncond, scale: float):
    """Classifier-free combination: uncond + scale * (cond - uncond)."""
    if scale < 0:
        raise ValueError("cfg scale must be nonnegative")
    pred_cond = np.asarray(pred_cond, dtype=np.float64)
    pred_uncond = np.asarray(pred_uncond, dtype=np.float64)
    if pred_cond.shape != pred_uncond.shape:
        raise ValueError("cfg prediction shapes differ")
    if scale == 1.0:
        return pred_cond.copy()
    if scale == 0.0:
        return pred_uncond.copy()
    return pred_uncond + scale * (pred_cond - pred_uncond)


def deterministic_step(z, pred, sched: NoiseSchedule, k: int):
    """One noise-free sampler update from rollout step k.

    ddpm uses the eta=0 implicit update through the clean-point estimate;
    flow-ot takes an Euler step against the predicted velocity.
    Works on a single latent (d,) or a batch (N, d).
    """
    z = np.asarray(z, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if z.shape != pred.shape:
        raise ValueError(f"latent/prediction shape mismatch: {z.shape} vs {pred.shape}")
    if not 0 <= k < sched.steps:
        raise ValueError(f"rollout step {k} outside [0, {sched.steps})")
    if sched.kind == "flow-ot":
        return z - sched.delta_t * pred
    i = sched.steps - k
    ab_t = sched.alpha_bars[i]
    ab_next = sched.alpha_bars[i - 1]
    if ab_t <= 0.0:
        raise ZeroDivisionError("alpha_bar vanished; cannot invert the noising map")
    x0_hat = (z - np.sqrt(1.0 - ab_t) * pred) / np.sqrt(ab_t)
    return np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * pred


def step_sigma(sched: NoiseSchedule, k: int, noise_level: float) -> float:
    """Policy std at rollout step k; the final transition is always 0.

    flow-ot scales like Euler-Maruyama (noise_level * sqrt(dt)); ddpm
    scales the reverse-posterior std by noise_level.
    """
    if noise_level < 0:
        raise ValueError("noise level must be nonnegative")
    if k == sched.steps - 1 or noise_level == 0.0:
        return 0.0
    if sched.kind == "flow-ot":
        return noise_level * float(np.sqrt(sched.delta_t))
    return noise_level * sched.posterior_std(k)


def gaussian_logpdf(x, mean, sigma):
    """Log-density of N(mean, sigma^2 I), summed over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    d = x.shape[-1]
    sq = np.sum((x - mean) ** 2, axis=-1)
    return -0.5 * sq / sigma**2 - 0.5 * d * (LOG_2PI + 2.0 * np.log(sigma))


def stochastic_step(z, pred, sched: NoiseSchedule, k: int, sigma_t: float,
                    rng: np.random.Generator):
    """Sample the next latent around the deterministic update.

    Returns (next_z, logprob). sigma_t == 0 degenerates to the
    deterministic update with logprob reported as 0.
    """
    if sigma_t < 0:
        raise ValueError("sigma must be nonnegative")
    mu = deterministic_step(z, pred, sched, k)
    if sigma_t == 0.0:
        return mu, np.zeros(mu.shape[:-1])
    eps = rng.standard_normal(mu.shape)
    nxt = mu + sigma_t * eps
    return nxt, gaussian_logpdf(nxt, mu, sigma_t)


def trajectory_streams(seed: int, iteration: int, count: int, *, kind: int = 1):
    """Private per-trajectory generators derived from (seed, phase, index).

    Results are therefore independent of how rollouts are batched.
    """
    return [
        np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(seed, spawn_key=(kind, iteration, i))))
        for i in range(count)
    ]


def _policy_pred(policy: PolicyNet, z, tvec, y_idx, cfg_scale: float):
    pred = policy.forward(z, tvec, y_idx)
    if cfg_scale != 1.0:
        null = np.full_like(np.asarray(y_idx), policy.null_class)
        pred_u = policy.forward(z, tvec, null)
        pred = cfg_combine(pred, pred_u, cfg_scale)
    return pred


def sample_trajectories(policy: PolicyNet, ys, sched: NoiseSchedule,
                        noise_level: float, rngs, cfg_scale: float = 1.0):
    """Roll out one trajectory per condition in ``ys`` (vectorized).

    ``rngs`` supplies one private generator per trajectory; each one is
    consumed following the module-level RNG contract.
    """
    ys = np.asarray(ys, dtype=np.intp)
    n = ys.shape[0]
    if len(rngs) != n:
        raise ValueError("need one rng stream per trajectory")
    T, d = sched.steps, policy.dim
    # row 0 seeds the initial latent, row k+1 the noise of stochastic step k
    noise = np.stack([g.standard_normal((T, d)) for g in rngs])
    zs = np.empty((n, T + 1, d))
    actions = np.empty((n, T, d))
    logps = np.zeros((n, T))
    means = np.empty((n, T, d))
    sigmas = np.empty(T)

    z = noise[:, 0, :].copy()
    zs[:, 0] = z
    for k in range(T):
        tvec = np.full(n, sched.timesteps[k])
        pred = _policy_pred(policy, z, tvec, ys, cfg_scale)
        mu = deterministic_step(z, pred, sched, k)
        sig = step_sigma(sched, k, noise_level)
        sigmas[k] = sig
        if sig > 0.0:
            z = mu + sig * noise[:, k + 1, :]
            logps[:, k] = gaussian_logpdf(z, mu, sig)
        else:
            z = mu
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite latent at rollout step {k}")
        means[:, k] = mu
        actions[:, k] = z
        zs[:, k + 1] = z

    return [
        Trajectory(zs[i], actions[i], logps[i], means[i], sigmas.copy(),
                   int(ys[i]), sched.timesteps.copy())
        for i in range(n)
    ]


def sample_trajectory(policy: PolicyNet, y: int, sched: NoiseSchedule,
                      noise_level: float, rng: np.random.Generator,
                      cfg_scale: float = 1.0) -> Trajectory:
    """Single-trajectory rollout driven by one generator."""
    return sample_trajectories(policy, [y], sched, noise_level, [rng], cfg_scale)[0]
