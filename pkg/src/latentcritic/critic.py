"""Timestep-conditioned value network over noisy latent states.

The critic reuses the policy's trunk (copied at initialization) and adds
one lightweight head per reward. Each head is a gated residual MLP whose
per-channel scale/shift/gate coefficients come from the timestep
embedding (and optionally the condition embedding); the final projection
and the gates start at zero, so a fresh critic outputs exactly zero for
every state and every head.

Pooling variants between trunk and heads:

* ``mlp``             heads read the trunk features directly;
* ``query-attention`` the trunk features are split into tokens and a
  single learned query token aggregates them through one RMS-normalized
  attention block with normalized Q/K, followed by a gated feed-forward,
  both modulated the same way as the heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, grad_wrt_input, value_and_grad
from .nets import PolicyNet, TRUNK_PARAM_NAMES, linear_params, sinusoidal_embedding
from .optim import AdamW
from .sampler import DivergenceError, LatentState, Trajectory

__all__ = [
    "CriticNet",
    "critic_init_from_policy",
    "modulate",
    "adaln_modulate",
    "value_pretrain",
    "critic_grad_state",
]


def modulate(h, scale, shift, gate, block, norm=ad.rmsnorm):
    """Gated residual update: h + gate * block(scale * norm(h) + shift)."""
    return ad.add(h, ad.mul(gate, block(ad.add(ad.mul(scale, norm(h)), shift))))


def _mod_coeffs(cond, p, prefix: str, parts: int, width: int):
    """Run a modulation MLP and split its output into ``parts`` vectors."""
    hidden = ad.silu(ad.add(ad.matmul(cond, p[f"{prefix}_w0"]), p[f"{prefix}_b0"]))
    coeffs = ad.add(ad.matmul(hidden, p[f"{prefix}_w1"]), p[f"{prefix}_b1"])
    return [ad.narrow(coeffs, -1, i * width, width) for i in range(parts)]


def adaln_modulate(h, cond, params, prefix: str, block, norm=ad.rmsnorm):
    """Spec'd head update: coefficients computed from ``cond`` by the
    modulation MLP stored under ``prefix``, then the gated residual."""
    width = h.shape[-1]
    scale, shift, gate = _mod_coeffs(cond, params, prefix, 3, width)
    return modulate(h, scale, shift, gate, block, norm=norm)


@dataclass
class CriticNet:
    """Shared trunk plus per-reward value heads V^(m)(z, t, y)."""

    dim: int
    hidden: int
    t_dim: int
    y_dim: int
    n_classes: int
    reward_ids: tuple
    pooling: str = "mlp"                 # "mlp" | "query-attention"
    tokens: int = 8
    head_hidden: int = 64
    mod_hidden: int = 32
    time_cond_head: bool = True
    text_cond_head: bool = False
    time_cond_trunk: bool = True
    params: ParamSet = field(default=None, repr=False)

    @property
    def n_heads(self) -> int:
        return len(self.reward_ids)

    @property
    def tok_dim(self) -> int:
        return self.hidden // self.tokens

    @property
    def pooled_dim(self) -> int:
        return self.tok_dim if self.pooling == "query-attention" else self.hidden

    @property
    def null_class(self) -> int:
        return self.n_classes

    def head_index(self, reward_id) -> int:
        if isinstance(reward_id, (int, np.integer)):
            if not 0 <= int(reward_id) < self.n_heads:
                raise IndexError(f"head index {reward_id} out of range")
            return int(reward_id)
        try:
            return self.reward_ids.index(reward_id)
        except ValueError:
            raise KeyError(f"no value head for reward {reward_id!r}") from None

    def head_cond_dim(self) -> int:
        dim = 0
        if self.time_cond_head:
            dim += self.t_dim
        if self.text_cond_head:
            dim += self.y_dim
        return dim

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def create(cls, rng: np.random.Generator, *, dim, hidden, t_dim, y_dim, n_classes,
               reward_ids, pooling="mlp", tokens=8, head_hidden=64, mod_hidden=32,
               time_cond_head=True, text_cond_head=False, time_cond_trunk=True):
        if pooling not in ("mlp", "query-attention"):
            raise ValueError(f"unknown pooling {pooling!r}")
        if pooling == "query-attention" and hidden % tokens:
            raise ValueError("hidden width must divide evenly into tokens")
        net = cls(dim, hidden, t_dim, y_dim, n_classes, tuple(reward_ids), pooling,
                  tokens, head_hidden, mod_hidden, time_cond_head, text_cond_head,
                  time_cond_trunk)
        arrays: dict[str, np.ndarray] = {}
        in_dim = dim + t_dim + y_dim
        w0, b0 = linear_params(rng, in_dim, hidden)
        w1, b1 = linear_params(rng, hidden, hidden)
        arrays.update({
            "y_embed": rng.standard_normal((n_classes + 1, y_dim)) * 0.1,
            "trunk_w0": w0, "trunk_b0": b0, "trunk_w1": w1, "trunk_b1": b1,
        })
        if pooling == "query-attention":
            td = net.tok_dim
            arrays["attn_query"] = rng.standard_normal(td) * 0.1
            for nm in ("attn_wq", "attn_wk", "attn_wv", "attn_wo"):
                arrays[nm], _ = linear_params(rng, td, td)
            fw1, fb1 = linear_params(rng, td, 2 * td)
            fw2, fb2 = linear_params(rng, 2 * td, td)
            arrays.update({"attn_ffn_w1": fw1, "attn_ffn_b1": fb1,
                           "attn_ffn_w2": fw2, "attn_ffn_b2": fb2})
            net._init_mod(arrays, rng, "attn_mod", parts=6, width=td)
        P = net.pooled_dim
        for i in range(net.n_heads):
            hw1, hb1 = linear_params(rng, P, head_hidden)
            hw2, hb2 = linear_params(rng, head_hidden, P)
            arrays.update({
                f"head{i}_f_w1": hw1, f"head{i}_f_b1": hb1,
                f"head{i}_f_w2": hw2, f"head{i}_f_b2": hb2,
                f"head{i}_out_w": np.zeros(P),
                f"head{i}_out_b": np.zeros(()),
                f"head{i}_out_scale": np.ones(()),
                f"head{i}_out_bias": np.zeros(()),
            })
            net._init_mod(arrays, rng, f"head{i}_mod", parts=3, width=P)
        net.params = ParamSet(arrays)
        return net

    def _init_mod(self, arrays: dict, rng, prefix: str, parts: int, width: int):
        cond = self.head_cond_dim() if prefix.startswith("head") else (
            self.t_dim if self.time_cond_head else 0)
        if cond > 0:
            mw0, mb0 = linear_params(rng, cond, self.mod_hidden)
            arrays[f"{prefix}_w0"] = mw0
            arrays[f"{prefix}_b0"] = mb0
            # zero-init output layer: gate (and scale/shift) start at zero
            arrays[f"{prefix}_w1"] = np.zeros((self.mod_hidden, parts * width))
            arrays[f"{prefix}_b1"] = np.zeros(parts * width)
        else:
            arrays[f"{prefix}_const"] = np.zeros(parts * width)

    def trunk_param_names(self) -> tuple:
        return TRUNK_PARAM_NAMES

    # ------------------------------------------------------------------
    # forward

    def _trunk(self, z, t, y_idx, p):
        t_emb = sinusoidal_embedding(t, self.t_dim)
        if not self.time_cond_trunk:
            t_emb = np.zeros_like(t_emb)
        y_emb = ad.take_rows(p["y_embed"], np.asarray(y_idx, dtype=np.intp))
        x = ad.concat([z, t_emb, y_emb], axis=1)
        h = ad.silu(ad.add(ad.matmul(x, p["trunk_w0"]), p["trunk_b0"]))
        h = ad.silu(ad.add(ad.matmul(h, p["trunk_w1"]), p["trunk_b1"]))
        return h

    def _coeffs(self, prefix: str, cond, p, parts: int, width: int, n: int):
        if f"{prefix}_const" in p:
            flat = p[f"{prefix}_const"]
            return [ad.narrow(flat, -1, i * width, width) for i in range(parts)]
        return _mod_coeffs(cond, p, prefix, parts, width)

    def _attention_pool(self, h, t_emb, p, n: int):
        td, nt = self.tok_dim, self.tokens
        sq, bq, ga, sf, bf, gf = self._coeffs("attn_mod", t_emb, p, 6, td, n)
        toks = ad.reshape(h, (n, nt, td))
        tok_n = ad.rmsnorm(toks, axis=-1)
        q_in = ad.add(ad.mul(sq, ad.rmsnorm(p["attn_query"], axis=-1)), bq)
        Q = ad.matmul(q_in, p["attn_wq"])
        flat = ad.reshape(tok_n, (n * nt, td))
        K = ad.reshape(ad.matmul(flat, p["attn_wk"]), (n, nt, td))
        V = ad.reshape(ad.matmul(flat, p["attn_wv"]), (n, nt, td))
        qn = ad.rmsnorm(Q, axis=-1)
        # constant coefficients leave the query path batch-free: broadcast it
        Qn = ad.reshape(qn, (1, 1, td) if qn.ndim == 1 else (n, 1, td))
        Kn = ad.rmsnorm(K, axis=-1)
        scores = ad.mul(ad.tsum(ad.mul(Kn, Qn), axis=2), 1.0 / np.sqrt(td))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.tsum(ad.mul(ad.reshape(attn, (n, nt, 1)), V), axis=1)
        ctx = ad.matmul(ctx, p["attn_wo"])
        tok1 = ad.add(p["attn_query"], ad.mul(ga, ctx))

        def ffn(x):
            hh = ad.silu(ad.add(ad.matmul(x, p["attn_ffn_w1"]), p["attn_ffn_b1"]))
            return ad.add(ad.matmul(hh, p["attn_ffn_w2"]), p["attn_ffn_b2"])

        return modulate(tok1, sf, bf, gf, ffn)

    def _head(self, pooled, i: int, cond, p, n: int):
        P = self.pooled_dim
        scale, shift, gate = self._coeffs(f"head{i}_mod", cond, p, 3, P, n)

        def block(x):
            hh = ad.silu(ad.add(ad.matmul(x, p[f"head{i}_f_w1"]), p[f"head{i}_f_b1"]))
            return ad.add(ad.matmul(hh, p[f"head{i}_f_w2"]), p[f"head{i}_f_b2"])

        feat = modulate(pooled, scale, shift, gate, block)
        raw = ad.add(ad.matmul(feat, p[f"head{i}_out_w"]), p[f"head{i}_out_b"])
        return ad.add(ad.mul(raw, p[f"head{i}_out_scale"]), p[f"head{i}_out_bias"])

    def values(self, z, t, y_idx, params=None):
        """Per-head values for a batch of states: (N, n_heads)."""
        p = self.params if params is None else params
        z2 = z if getattr(z, "ndim", 0) == 2 else np.atleast_2d(np.asarray(z, float))
        n = z2.shape[0]
        h = self._trunk(z2, t, y_idx, p)
        t_emb = sinusoidal_embedding(t, self.t_dim)
        pooled = (self._attention_pool(h, t_emb, p, n)
                  if self.pooling == "query-attention" else h)
        cond_parts = []
        if self.time_cond_head:
            cond_parts.append(t_emb)
        if self.text_cond_head:
            cond_parts.append(ad.take_rows(p["y_embed"], np.asarray(y_idx, dtype=np.intp)))
        cond = None
        if cond_parts:
            cond = cond_parts[0] if len(cond_parts) == 1 else ad.concat(cond_parts, axis=1)
        cols = [ad.reshape(self._head(pooled, i, cond, p, n), (n, 1))
                for i in range(self.n_heads)]
        out = cols[0] if len(cols) == 1 else ad.concat(cols, axis=1)
        vals = out.value if isinstance(out, ad.Tensor) else out
        if not np.all(np.isfinite(vals)):
            raise DivergenceError("critic produced non-finite values at the head output")
        return out

    def value(self, state: LatentState):
        """Vector of per-head values for one state."""
        out = self.values(state.z[None, :], [state.t], [state.y])
        return np.asarray(out)[0]

    def arch_meta(self) -> dict:
        return {
            "dim": self.dim, "hidden": self.hidden, "t_dim": self.t_dim,
            "y_dim": self.y_dim, "n_classes": self.n_classes,
            "reward_ids": list(self.reward_ids), "pooling": self.pooling,
            "tokens": self.tokens, "head_hidden": self.head_hidden,
            "mod_hidden": self.mod_hidden, "time_cond_head": self.time_cond_head,
            "text_cond_head": self.text_cond_head, "time_cond_trunk": self.time_cond_trunk,
        }

    @classmethod
    def from_arch_meta(cls, meta: dict, params: ParamSet) -> "CriticNet":
        return cls(int(meta["dim"]), int(meta["hidden"]), int(meta["t_dim"]),
                   int(meta["y_dim"]), int(meta["n_classes"]),
                   tuple(meta["reward_ids"]), str(meta["pooling"]), int(meta["tokens"]),
                   int(meta["head_hidden"]), int(meta["mod_hidden"]),
                   bool(meta["time_cond_head"]), bool(meta["text_cond_head"]),
                   bool(meta["time_cond_trunk"]), params)


def critic_init_from_policy(policy: PolicyNet, reward_ids, seed: int = 0,
                            **flags) -> CriticNet:
    """Build a critic whose trunk starts as an exact copy of the policy trunk.

    Heads and pooling start at the zero-gate/zero-projection state, so the
    initial value surface is identically zero.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(7,))))
    critic = CriticNet.create(
        rng, dim=policy.dim, hidden=policy.hidden, t_dim=policy.t_dim,
        y_dim=policy.y_dim, n_classes=policy.n_classes, reward_ids=reward_ids, **flags)
    for name in critic.trunk_param_names():
        critic.params[name] = policy.params[name].copy()
    return critic


def _state_table(trajectories: list[Trajectory], critic: CriticNet, value_clip: float):
    """Flatten all trajectory states with their terminal-return targets."""
    zs, ts, ys, targets, heads = [], [], [], [], []
    for traj in trajectories:
        if traj.reward_channel is None:
            raise ValueError("trajectory has no active reward channel")
        r = float(traj.rewards[traj.reward_channel])
        head = critic.head_index(traj.reward_channel)
        n = traj.zs.shape[0]
        zs.append(traj.zs)
        ts.append(traj.timesteps)
        ys.append(np.full(n, traj.y, dtype=np.intp))
        targets.append(np.full(n, np.clip(r, -value_clip, value_clip)))
        heads.append(np.full(n, head, dtype=np.intp))
    return (np.concatenate(zs), np.concatenate(ts), np.concatenate(ys),
            np.concatenate(targets), np.concatenate(heads))


def value_regression_loss(critic: CriticNet, params_like, zs, ts, ys, targets, heads):
    """Mean squared error of the per-state active-head value."""
    V = critic.values(zs, ts, ys, params=params_like)
    onehot = np.zeros((len(targets), critic.n_heads))
    onehot[np.arange(len(targets)), heads] = 1.0
    picked = ad.tsum(ad.mul(V, onehot), axis=1)
    diff = ad.sub(picked, targets)
    return ad.tmean(ad.mul(diff, diff))


def value_pretrain(critic: CriticNet, trajectories: list[Trajectory], iters: int,
                   lr: float, optimizer: AdamW | None = None,
                   value_clip: float = 5.0) -> list[float]:
    """Regress every visited state toward its Monte Carlo return.

    With undiscounted terminal-only rewards the target of every state in
    a trajectory is that trajectory's terminal reward. Runs ``iters``
    full-batch steps on the given set; returns the loss history.
    """
    if not trajectories:
        raise ValueError("value pretraining needs at least one trajectory")
    if iters == 0:
        return []
    zs, ts, ys, targets, heads = _state_table(trajectories, critic, value_clip)
    opt = optimizer or AdamW(critic.params, lr)
    losses = []
    for _ in range(iters):
        loss, grads = value_and_grad(
            lambda p: value_regression_loss(critic, p, zs, ts, ys, targets, heads),
            critic.params)
        opt.step(critic.params, grads)
        losses.append(loss)
    return losses


def critic_grad_state(critic: CriticNet, state: LatentState, head) -> np.ndarray:
    """Gradient of one head's value with respect to the latent z only."""
    idx = critic.head_index(head)

    def f(zt):
        V = critic.values(ad.reshape(zt, (1, critic.dim)), [state.t], [state.y])
        return ad.tsum(ad.narrow(V, 1, idx, 1))

    return grad_wrt_input(f, state.z)


def critic_grad_batch(critic: CriticNet, zs, ts, ys, head) -> np.ndarray:
    """Batched latent gradient of one head: (N, d)."""
    idx = critic.head_index(head)
    zs = np.asarray(zs, dtype=np.float64)

    def f(zt):
        V = critic.values(zt, ts, ys)
        return ad.tsum(ad.narrow(V, 1, idx, 1))

    return grad_wrt_input(f, zs)
