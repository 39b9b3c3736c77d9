"""Dense policy network and shared embedding helpers.

The policy maps (latent, sinusoidal time embedding, learned condition
embedding) to a prediction vector: noise for the ddpm family, velocity
for flow-ot. The two hidden trunk layers are the prefix the critic
copies at initialization, so their parameter names are shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet

__all__ = ["PolicyNet", "sinusoidal_embedding", "linear_params", "TRUNK_PARAM_NAMES"]

TRUNK_PARAM_NAMES = ("y_embed", "trunk_w0", "trunk_b0", "trunk_w1", "trunk_b1")


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Fixed sin/cos features of timestep values in [0, 1], shape (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(200.0), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def linear_params(rng: np.random.Generator, fan_in: int, fan_out: int, scale=None):
    """Gaussian weight matrix and zero bias; default scale 1/sqrt(fan_in)."""
    if scale is None:
        scale = 1.0 / np.sqrt(fan_in)
    w = rng.standard_normal((fan_in, fan_out)) * scale
    return w, np.zeros(fan_out)


@dataclass
class PolicyNet:
    """MLP denoiser with Gaussian-policy semantics over sampler steps."""

    dim: int
    hidden: int
    t_dim: int
    y_dim: int
    n_classes: int
    cond_dropout: float = 0.1
    params: ParamSet = field(default=None, repr=False)

    @classmethod
    def create(cls, rng: np.random.Generator, dim=2, hidden=64, t_dim=16, y_dim=8,
               n_classes=8, cond_dropout=0.1) -> "PolicyNet":
        in_dim = dim + t_dim + y_dim
        w0, b0 = linear_params(rng, in_dim, hidden)
        w1, b1 = linear_params(rng, hidden, hidden)
        w_out, b_out = linear_params(rng, hidden, dim, scale=1e-2 / np.sqrt(hidden))
        params = ParamSet({
            # extra row holds the null (unconditional) embedding
            "y_embed": rng.standard_normal((n_classes + 1, y_dim)) * 0.1,
            "trunk_w0": w0, "trunk_b0": b0,
            "trunk_w1": w1, "trunk_b1": b1,
            "out_w": w_out, "out_b": b_out,
        })
        return cls(dim, hidden, t_dim, y_dim, n_classes, cond_dropout, params)

    @property
    def null_class(self) -> int:
        return self.n_classes

    def trunk(self, z, t, y_idx, params=None):
        """Hidden features for a batch of states; z (N, d), t (N,), y_idx (N,)."""
        p = self.params if params is None else params
        t_emb = sinusoidal_embedding(t, self.t_dim)
        y_emb = ad.take_rows(p["y_embed"], np.asarray(y_idx, dtype=np.intp))
        x = ad.concat([z, t_emb, y_emb], axis=1)
        h = ad.silu(ad.add(ad.matmul(x, p["trunk_w0"]), p["trunk_b0"]))
        h = ad.silu(ad.add(ad.matmul(h, p["trunk_w1"]), p["trunk_b1"]))
        return h

    def forward(self, z, t, y_idx, params=None):
        """Prediction vector (N, d): noise (ddpm) or velocity (flow-ot)."""
        p = self.params if params is None else params
        h = self.trunk(z, t, y_idx, params=p)
        return ad.add(ad.matmul(h, p["out_w"]), p["out_b"])

    def arch_meta(self) -> dict:
        return {
            "dim": self.dim, "hidden": self.hidden, "t_dim": self.t_dim,
            "y_dim": self.y_dim, "n_classes": self.n_classes,
            "cond_dropout": self.cond_dropout,
        }

    @classmethod
    def from_arch_meta(cls, meta: dict, params: ParamSet) -> "PolicyNet":
        return cls(int(meta["dim"]), int(meta["hidden"]), int(meta["t_dim"]),
                   int(meta["y_dim"]), int(meta["n_classes"]),
                   float(meta["cond_dropout"]), params)
