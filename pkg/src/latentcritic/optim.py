"""Adam with decoupled weight decay over ParamSets."""

from __future__ import annotations

import numpy as np

from .autodiff import ParamSet

__all__ = ["AdamW"]


class AdamW:
    """Standard bias-corrected Adam step plus decoupled decay.

    update: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """

    def __init__(self, params: ParamSet, lr: float, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params: ParamSet, grads: ParamSet) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in params.keys():
            g = grads[k]
            m = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.m[k] = m
            self.v[k] = v
            upd = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[k] = params[k] - self.lr * (upd + self.weight_decay * params[k])

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/m/{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}/v/{k}": v for k, v in self.v.items()})
        out[f"{prefix}/t"] = np.asarray(float(self.t))
        return out

    def load_state_tensors(self, prefix: str, tensors: dict[str, np.ndarray]) -> None:
        for k in self.m.keys():
            self.m[k] = tensors[f"{prefix}/m/{k}"]
            self.v[k] = tensors[f"{prefix}/v/{k}"]
        self.t = int(float(tensors[f"{prefix}/t"]))
