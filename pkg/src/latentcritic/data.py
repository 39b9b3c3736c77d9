"""Synthetic target distributions for pretraining and reward definitions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["GaussianMixture", "make_ring_mixture"]


@dataclass(frozen=True)
class GaussianMixture:
    """Equal-weight isotropic Gaussian mixture; one component per class."""

    centers: np.ndarray   # (C, d)
    std: float

    @property
    def n_modes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def sample(self, n: int, rng: np.random.Generator):
        """Draw (x0, y) pairs; y is the component index."""
        ys = rng.integers(0, self.n_modes, size=n)
        x = self.centers[ys] + self.std * rng.standard_normal((n, self.dim))
        return x, ys

    def sample_class(self, y: int, n: int, rng: np.random.Generator):
        return self.centers[y] + self.std * rng.standard_normal((n, self.dim))

    def nearest_mode(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d2 = np.sum((x[:, None, :] - self.centers[None, :, :]) ** 2, axis=2)
        return d2.argmin(axis=1)

    def mode_distance(self, x) -> np.ndarray:
        """Distance from each sample to its nearest component center."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d2 = np.sum((x[:, None, :] - self.centers[None, :, :]) ** 2, axis=2)
        return np.sqrt(d2.min(axis=1))


def make_ring_mixture(modes: int = 8, dim: int = 2, radius: float = 2.0,
                      std: float = 0.25) -> GaussianMixture:
    """Modes evenly spaced on a circle in the first two coordinates."""
    if dim < 2:
        raise ValueError("ring mixture needs dim >= 2")
    ang = 2.0 * np.pi * np.arange(modes) / modes
    centers = np.zeros((modes, dim))
    centers[:, 0] = radius * np.cos(ang)
    centers[:, 1] = radius * np.sin(ang)
    return GaussianMixture(centers, float(std))
