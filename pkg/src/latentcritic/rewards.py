"""Analytic terminal rewards over the synthetic target distribution.

Three built-in families cover the qualitative spectrum the trainer needs:

* ``mode-affinity``   smooth preference proxy in (0, 1]: exp(-||x - mu_y||^2 / 2 s^2)
* ``region-indicator`` sparse verifiable proxy in {0, 1}: axis-aligned box test
* ``alignment``       tanh-squashed log-density of the y-conditioned component,
                      bounded in [-1, 1]

The default region box deliberately sits on a thin low-density shoulder of
one mode, so optimizing it alone collapses sample diversity; the
``hacking_probe`` measures that collapse as mean pairwise distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

__all__ = [
    "RewardSpec",
    "PromptItem",
    "RewardError",
    "evaluate",
    "evaluate_batch",
    "mixed_batch",
    "hacking_probe",
    "build_registry",
]

FAMILIES = ("mode-affinity", "region-indicator", "alignment")


class RewardError(KeyError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    """One registered terminal reward.

    ``metadata`` carries everything evaluation needs (mode centers,
    scale, box bounds), baked in at registration so evaluation is pure.
    """

    id: str
    kind: str                 # "continuous" | "binary"
    weight: float
    family: str
    ratio: float = 1.0        # share of the mixed prompt batch
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("continuous", "binary"):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown reward family {self.family!r}")
        if self.weight <= 0:
            raise ValueError("reward weight must be positive")
        if self.ratio <= 0:
            raise ValueError("reward ratio must be positive")


@dataclass(frozen=True)
class PromptItem:
    """One training prompt: which reward it feeds and its condition."""

    reward_id: str
    y: int
    weight: float
    metadata: dict = field(default_factory=dict)


def _centers(spec: RewardSpec) -> np.ndarray:
    return np.asarray(spec.metadata["centers"], dtype=np.float64)


def evaluate_batch(x0, ys, spec: RewardSpec) -> np.ndarray:
    """Vectorized reward for samples x0 (N, d) under conditions ys (N,)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.intp))
    if spec.family == "mode-affinity":
        mu = _centers(spec)[ys]
        s = float(spec.metadata["scale"])
        d2 = np.sum((x0 - mu) ** 2, axis=1)
        return np.exp(-d2 / (2.0 * s * s))
    if spec.family == "region-indicator":
        lo = np.asarray(spec.metadata["box_lo"], dtype=np.float64)
        hi = np.asarray(spec.metadata["box_hi"], dtype=np.float64)
        inside = np.all((x0 >= lo) & (x0 <= hi), axis=1)
        return inside.astype(np.float64)
    if spec.family == "alignment":
        s = float(spec.metadata["scale"])
        centers = _centers(spec)
        d = x0.shape[1]
        norm = -0.5 * d * np.log(2.0 * np.pi * s * s)
        n_modes = centers.shape[0]
        logp = np.empty(len(x0))
        cond = ys < n_modes
        if np.any(cond):
            mu = centers[np.clip(ys, 0, n_modes - 1)]
            d2 = np.sum((x0 - mu) ** 2, axis=1)
            logp_cond = norm - d2 / (2.0 * s * s)
            logp[cond] = logp_cond[cond]
        if np.any(~cond):
            # null condition falls back to the full mixture density
            d2_all = np.sum((x0[~cond, None, :] - centers[None, :, :]) ** 2, axis=2)
            comp = norm - d2_all / (2.0 * s * s)
            m = comp.max(axis=1, keepdims=True)
            logp[~cond] = (m[:, 0] + np.log(np.mean(np.exp(comp - m), axis=1)))
        return np.tanh(logp)
    raise RewardError(f"unknown reward family {spec.family!r}")


def evaluate(x0, y: int, spec: RewardSpec) -> float:
    """Scalar reward for one terminal sample."""
    return float(evaluate_batch(np.asarray(x0)[None, :], [y], spec)[0])


def mixed_batch(specs, ratios, n: int, rng: np.random.Generator,
                n_classes: int | None = None) -> list[PromptItem]:
    """Draw n prompts apportioned to specs by largest-remainder allocation.

    Counts deviate from exact proportionality by at most one per spec;
    only the interleaving order and per-item conditions consume rng.
    """
    specs = list(specs)
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != len(specs):
        raise ValueError("need one ratio per spec")
    if np.any(ratios <= 0):
        raise ValueError("ratios must be positive")
    quota = ratios / ratios.sum() * n
    counts = np.floor(quota).astype(int)
    rem = quota - counts
    short = n - counts.sum()
    for idx in np.argsort(-rem, kind="stable")[:short]:
        counts[idx] += 1

    items: list[PromptItem] = []
    for spec, c in zip(specs, counts):
        pinned = spec.metadata.get("y")
        for _ in range(int(c)):
            if pinned is not None:
                y = int(pinned)
            else:
                y = int(rng.integers(0, n_classes if n_classes else 1))
            items.append(PromptItem(spec.id, y, spec.weight, spec.metadata))
    perm = rng.permutation(len(items))
    return [items[i] for i in perm]


def hacking_probe(samples, y=None) -> float:
    """Diversity of terminal samples sharing one condition: mean pairwise
    distance. Zero iff all samples coincide."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < 2:
        raise ValueError("diversity probe needs at least 2 samples")
    return float(pdist(samples).mean())


def build_registry(reward_cfgs, centers: np.ndarray, std: float) -> dict[str, RewardSpec]:
    """Materialize RewardSpecs from config entries, baking in the target
    mixture geometry so that evaluation is self-contained."""
    registry: dict[str, RewardSpec] = {}
    for rc in reward_cfgs:
        meta = dict(rc.params)
        meta["centers"] = np.asarray(centers, dtype=np.float64)
        meta.setdefault("scale", float(std))
        if rc.family == "region-indicator":
            if "box_lo" not in meta or "box_hi" not in meta:
                raise ValueError(f"reward {rc.id!r} needs box_lo/box_hi bounds")
            meta["box_lo"] = np.asarray(meta["box_lo"], dtype=np.float64)
            meta["box_hi"] = np.asarray(meta["box_hi"], dtype=np.float64)
        spec = RewardSpec(rc.id, rc.kind, rc.weight, rc.family, rc.ratio, meta)
        if spec.id in registry:
            raise ValueError(f"duplicate reward id {spec.id!r}")
        registry[spec.id] = spec
    return registry


def lookup(registry: dict[str, RewardSpec], reward_id: str) -> RewardSpec:
    try:
        return registry[reward_id]
    except KeyError:
        raise RewardError(f"unknown reward id {reward_id!r}") from None
