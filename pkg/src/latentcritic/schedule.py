"""Forward-process discretizations for the ddpm and flow-ot sampler families."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "make_schedule", "forward_noise", "ScheduleError"]

REFERENCE_STEPS = 1000  # dense grid the coarse ddpm schedule subsamples


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step discretization of the forward noising process.

    ``alphas``/``alpha_bars`` are indexed by diffusion time 0..T with
    index 0 the clean end (alpha_bars[0] == 1). ``timesteps`` is the
    rollout grid in [0, 1], descending from 1 (pure noise) to 0 (data);
    rollout step k sits at diffusion index T - k.
    """

    kind: str
    steps: int
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    timesteps: np.ndarray = field(repr=False)
    delta_t: float

    @property
    def T(self) -> int:
        return self.steps

    def alpha_bar_at_step(self, k: int) -> float:
        """alpha_bar at rollout step k (diffusion index T - k)."""
        return float(self.alpha_bars[self.steps - k])

    def posterior_std(self, k: int) -> float:
        """Std of the ddpm reverse posterior crossed at rollout step k."""
        i = self.steps - k
        ab_t, ab_prev = self.alpha_bars[i], self.alpha_bars[i - 1]
        beta = 1.0 - ab_t / ab_prev
        var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
        return float(np.sqrt(max(var, 0.0)))


def make_schedule(kind: str, steps: int, params: dict | None = None) -> NoiseSchedule:
    """Build a schedule. ``params`` may pin explicit per-step ``alphas``
    (length ``steps``) or the linear-beta endpoints ``beta_min``/``beta_max``
    of the dense reference grid that the coarse schedule subsamples.
    """
    params = dict(params or {})
    if steps < 2:
        raise ScheduleError(f"need at least 2 steps, got {steps}")
    timesteps = np.linspace(1.0, 0.0, steps + 1)
    delta_t = 1.0 / steps

    if kind == "flow-ot":
        if np.any(np.diff(timesteps) >= 0):
            raise ScheduleError("flow timesteps must be strictly decreasing")
        ones = np.ones(steps + 1)
        return NoiseSchedule(kind, steps, ones, ones, timesteps, delta_t)

    if kind == "ddpm":
        if "alphas" in params:
            alphas_in = np.asarray(params["alphas"], dtype=np.float64)
            if alphas_in.shape != (steps,):
                raise ScheduleError(f"explicit alphas must have length {steps}")
            if np.any(alphas_in <= 0.0) or np.any(alphas_in > 1.0):
                raise ScheduleError("alphas must lie in (0, 1]")
            alpha_bars = np.concatenate([[1.0], np.cumprod(alphas_in)])
        else:
            beta_min = float(params.get("beta_min", 1e-4))
            beta_max = float(params.get("beta_max", 0.02))
            ref = int(params.get("ref_steps", REFERENCE_STEPS))
            if not (0.0 < beta_min <= beta_max < 1.0):
                raise ScheduleError("need 0 < beta_min <= beta_max < 1")
            betas = np.linspace(beta_min, beta_max, ref)
            ab_ref = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
            idx = np.round(np.linspace(0, ref, steps + 1)).astype(int)
            alpha_bars = ab_ref[idx]
        if np.any(np.diff(alpha_bars) > 0.0):
            raise ScheduleError("alpha_bar must be non-increasing")
        alphas = np.concatenate([[1.0], alpha_bars[1:] / alpha_bars[:-1]])
        return NoiseSchedule(kind, steps, alphas, alpha_bars, timesteps, delta_t)

    raise ScheduleError(f"unknown schedule kind {kind!r}")


def forward_noise(x0, k: int, eps, sched: NoiseSchedule):
    """Noise clean data to diffusion index k (k=0 returns x0 exactly).

    ddpm:    z = sqrt(ab_k) x0 + sqrt(1 - ab_k) eps
    flow-ot: z = (1 - t) x0 + t eps, with t = k / T
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    if not 0 <= k <= sched.steps:
        raise ValueError(f"diffusion index {k} outside [0, {sched.steps}]")
    if sched.kind == "ddpm":
        ab = sched.alpha_bars[k]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    t = k / sched.steps
    return (1.0 - t) * x0 + t * eps
