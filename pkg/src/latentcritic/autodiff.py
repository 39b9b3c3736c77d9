"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

Everything the package differentiates through is built from the fixed
primitive registry in this module. Each primitive has a single numpy
forward function shared by two call modes:

* taped mode: inputs are ``Tensor`` objects, the op is recorded on the
  active ``Tape`` and can be backpropagated;
* plain mode: inputs are ndarrays/floats and the op just computes.

Because both modes run the identical numpy calls in the identical order,
forward values agree bit-exactly between them, which the sampler relies
on when it replays rollout log-probabilities inside a loss graph.

No graph optimization, no operator fusion, no higher-order derivatives.
"""

from __future__ import annotations

from typing import Callable, Iterator, Mapping

import numpy as np
from scipy.special import expit

__all__ = [
    "AutodiffError",
    "UnsupportedPrimitiveError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "ParamSet",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "silu",
    "exp",
    "log",
    "tsum",
    "tmean",
    "softmax",
    "rmsnorm",
    "concat",
    "reshape",
    "narrow",
    "take_rows",
    "minimum",
    "clip_values",
    "value_and_grad",
    "grad_wrt_input",
    "finite_diff_check",
    "finite_diff_check_params",
]


class AutodiffError(Exception):
    """Base error for tape construction and backward passes."""


class UnsupportedPrimitiveError(AutodiffError):
    def __init__(self, name: str):
        super().__init__(f"unsupported primitive: {name!r}")
        self.primitive = name


class NonFiniteError(AutodiffError):
    """Raised when an evaluation produces non-finite values."""


_ACTIVE: "Tape | None" = None


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array tracked on a tape.

    ``op`` names the primitive that produced the value ("leaf" and
    "const" mark graph inputs). ``grad`` is populated by ``Tape.backward``.
    """

    __slots__ = ("value", "op", "parents", "grad", "_forward", "_vjp")

    def __init__(self, value, op="const", parents=(), forward=None, vjp=None):
        self.value = _f64(value)
        self.op = op
        self.parents = parents
        self.grad = None
        self._forward = forward
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # arithmetic sugar; everything funnels into the registry below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    # explicitly fenced off: the primitive set is fixed
    def __pow__(self, other):
        raise UnsupportedPrimitiveError("pow")

    def __mod__(self, other):
        raise UnsupportedPrimitiveError("mod")

    def __floordiv__(self, other):
        raise UnsupportedPrimitiveError("floordiv")

    def __abs__(self):
        raise UnsupportedPrimitiveError("abs")


class Tape:
    """Recorder for one forward pass. Single-use and single-threaded.

    Entering the context makes every primitive op append its output node.
    ``backward`` may be called once; afterwards every recorded node holds
    its adjoint in ``.grad`` (zeros where no gradient flows).
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._entered = False
        self._done = False

    def __enter__(self):
        global _ACTIVE
        if self._entered:
            raise AutodiffError("tape is single-use")
        if _ACTIVE is not None:
            raise AutodiffError("another tape is already active")
        self._entered = True
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def leaf(self, value) -> Tensor:
        t = Tensor(value, op="leaf")
        self._nodes.append(t)
        return t

    @property
    def nodes(self):
        return tuple(self._nodes)

    def backward(self, out: Tensor) -> None:
        if self._done:
            raise AutodiffError("backward already ran on this tape")
        self._done = True
        if out.value.size != 1:
            raise AutodiffError("backward requires a scalar output")
        for n in self._nodes:
            n.grad = np.zeros_like(n.value)
        out.grad = np.ones_like(out.value)
        for n in reversed(self._nodes):
            if n._vjp is None:
                continue
            g = n.grad
            if not np.any(g):
                continue
            parts = n._vjp(g, n.value, *[p.value for p in n.parents])
            for p, pg in zip(n.parents, parts):
                if pg is None:
                    continue
                if p.grad is None:
                    p.grad = np.zeros_like(p.value)
                p.grad = p.grad + pg

    def replay(self) -> None:
        """Re-run every recorded forward in order, refreshing node values."""
        for n in self._nodes:
            if n._forward is not None:
                n.value = n._forward(*[p.value for p in n.parents])


def _is_t(x) -> bool:
    return isinstance(x, Tensor)


def _wrap(x) -> Tensor:
    if _is_t(x):
        return x
    t = Tensor(_f64(x), op="const")
    if _ACTIVE is not None:
        _ACTIVE._nodes.append(t)
    return t


def _record(op: str, parents: tuple, forward: Callable, vjp: Callable) -> Tensor:
    value = forward(*[p.value for p in parents])
    t = Tensor(value, op=op, parents=parents, forward=forward, vjp=vjp)
    if _ACTIVE is not None:
        _ACTIVE._nodes.append(t)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an adjoint back to the shape of a broadcast input."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive registry


def add(a, b):
    if not (_is_t(a) or _is_t(b)):
        return np.add(_f64(a), _f64(b))
    a, b = _wrap(a), _wrap(b)
    return _record(
        "add",
        (a, b),
        np.add,
        lambda g, out, av, bv: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    if not (_is_t(a) or _is_t(b)):
        return np.subtract(_f64(a), _f64(b))
    a, b = _wrap(a), _wrap(b)
    return _record(
        "sub",
        (a, b),
        np.subtract,
        lambda g, out, av, bv: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b):
    if not (_is_t(a) or _is_t(b)):
        return np.multiply(_f64(a), _f64(b))
    a, b = _wrap(a), _wrap(b)
    return _record(
        "mul",
        (a, b),
        np.multiply,
        lambda g, out, av, bv: (
            _unbroadcast(g * bv, av.shape),
            _unbroadcast(g * av, bv.shape),
        ),
    )


def div(a, b):
    if not (_is_t(a) or _is_t(b)):
        return np.divide(_f64(a), _f64(b))
    a, b = _wrap(a), _wrap(b)
    return _record(
        "div",
        (a, b),
        np.divide,
        lambda g, out, av, bv: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def neg(a):
    if not _is_t(a):
        return np.negative(_f64(a))
    return _record("neg", (a,), np.negative, lambda g, out, av: (-g,))


def _matmul_vjp(g, out, av, bv):
    if av.ndim == 2 and bv.ndim == 2:
        return g @ bv.T, av.T @ g
    if av.ndim == 2 and bv.ndim == 1:
        return np.outer(g, bv), av.T @ g
    if av.ndim == 1 and bv.ndim == 2:
        return bv @ g, np.outer(av, g)
    if av.ndim == 1 and bv.ndim == 1:
        return g * bv, g * av
    raise AutodiffError(f"matmul supports 1-D/2-D operands, got {av.ndim}-D @ {bv.ndim}-D")


def matmul(a, b):
    if not (_is_t(a) or _is_t(b)):
        return np.matmul(_f64(a), _f64(b))
    a, b = _wrap(a), _wrap(b)
    if a.ndim > 2 or b.ndim > 2:
        raise AutodiffError("matmul supports 1-D/2-D operands")
    return _record("matmul", (a, b), np.matmul, _matmul_vjp)


def tanh(a):
    if not _is_t(a):
        return np.tanh(_f64(a))
    return _record("tanh", (a,), np.tanh, lambda g, out, av: (g * (1.0 - out * out),))


def _silu_f(x):
    return x * expit(x)


def _silu_vjp(g, out, av):
    s = expit(av)
    return (g * (s * (1.0 + av * (1.0 - s))),)


def silu(a):
    if not _is_t(a):
        return _silu_f(_f64(a))
    return _record("silu", (a,), _silu_f, _silu_vjp)


def exp(a):
    if not _is_t(a):
        return np.exp(_f64(a))
    return _record("exp", (a,), np.exp, lambda g, out, av: (g * out,))


def log(a):
    if not _is_t(a):
        return np.log(_f64(a))
    return _record("log", (a,), np.log, lambda g, out, av: (g / av,))


def _sum_vjp_factory(axis, keepdims):
    def vjp(g, out, av):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return vjp


def tsum(a, axis=None, keepdims=False):
    if not _is_t(a):
        return np.sum(_f64(a), axis=axis, keepdims=keepdims)
    return _record(
        "sum",
        (a,),
        lambda av: np.sum(av, axis=axis, keepdims=keepdims),
        _sum_vjp_factory(axis, keepdims),
    )


def tmean(a, axis=None, keepdims=False):
    if not _is_t(a):
        return np.mean(_f64(a), axis=axis, keepdims=keepdims)

    def vjp(g, out, av):
        n = av.size if axis is None else av.shape[axis]
        if axis is None:
            return (np.broadcast_to(g / n, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, av.shape).copy(),)

    return _record(
        "mean", (a,), lambda av: np.mean(av, axis=axis, keepdims=keepdims), vjp
    )


def _softmax_f_factory(axis):
    def f(x):
        m = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - m)
        return e / np.sum(e, axis=axis, keepdims=True)

    return f


def softmax(a, axis=-1):
    if not _is_t(a):
        return _softmax_f_factory(axis)(_f64(a))

    def vjp(g, out, av):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", (a,), _softmax_f_factory(axis), vjp)


def _rmsnorm_f_factory(axis, eps):
    def f(x):
        m = np.mean(x * x, axis=axis, keepdims=True)
        return x / np.sqrt(m + eps)

    return f


def rmsnorm(a, axis=-1, eps=1e-8):
    """Root-mean-square normalization along ``axis`` (no learned gain)."""
    if not _is_t(a):
        return _rmsnorm_f_factory(axis, eps)(_f64(a))

    def vjp(g, out, av):
        n = av.shape[axis]
        m = np.mean(av * av, axis=axis, keepdims=True)
        r = 1.0 / np.sqrt(m + eps)
        inner = np.sum(g * av, axis=axis, keepdims=True)
        return (g * r - av * (inner * r**3 / n),)

    return _record("rmsnorm", (a,), _rmsnorm_f_factory(axis, eps), vjp)


def concat(parts, axis=0):
    parts = list(parts)
    if not any(_is_t(p) for p in parts):
        return np.concatenate([_f64(p) for p in parts], axis=axis)
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]

    def vjp(g, out, *vals):
        offs = np.cumsum([0] + sizes)
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(vals)):
            sl[axis] = slice(offs[i], offs[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _record(
        "concat",
        tuple(parts),
        lambda *vals: np.concatenate(vals, axis=axis),
        vjp,
    )


def reshape(a, shape):
    if not _is_t(a):
        return _f64(a).reshape(shape)

    def vjp(g, out, av):
        return (g.reshape(av.shape),)

    return _record("reshape", (a,), lambda av: av.reshape(shape), vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    sl_template = (axis, start, length)
    if not _is_t(a):
        av = _f64(a)
        sl = [slice(None)] * av.ndim
        sl[axis] = slice(start, start + length)
        return av[tuple(sl)]

    def fwd(av):
        sl = [slice(None)] * av.ndim
        sl[axis] = slice(start, start + length)
        return av[tuple(sl)]

    def vjp(g, out, av):
        buf = np.zeros_like(av)
        sl = [slice(None)] * av.ndim
        sl[axis] = slice(start, start + length)
        buf[tuple(sl)] = g
        return (buf,)

    return _record(f"narrow{sl_template}", (a,), fwd, vjp)


def take_rows(a, idx):
    """Row gather ``a[idx]`` with scatter-add adjoint (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.intp)
    if not _is_t(a):
        return _f64(a)[idx]

    def vjp(g, out, av):
        buf = np.zeros_like(av)
        np.add.at(buf, idx, g)
        return (buf,)

    return _record("take_rows", (a,), lambda av: av[idx], vjp)


def minimum(a, b):
    """Elementwise min; the adjoint follows the selected branch (ties pick ``a``)."""
    if not (_is_t(a) or _is_t(b)):
        return np.minimum(_f64(a), _f64(b))
    a, b = _wrap(a), _wrap(b)

    def vjp(g, out, av, bv):
        take_a = av <= bv
        return (
            _unbroadcast(g * take_a, av.shape),
            _unbroadcast(g * ~take_a, bv.shape),
        )

    return _record("minimum", (a, b), np.minimum, vjp)


def clip_values(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only strictly inside the range."""
    if not _is_t(a):
        return np.clip(_f64(a), lo, hi)

    def vjp(g, out, av):
        return (g * ((av > lo) & (av < hi)),)

    return _record("clip", (a,), lambda av: np.clip(av, lo, hi), vjp)


# ---------------------------------------------------------------------------
# parameter containers and gradient drivers


class ParamSet:
    """Ordered named float64 arrays with shapes frozen at construction."""

    def __init__(self, arrays: Mapping[str, np.ndarray], copy: bool = True):
        self._data: dict[str, np.ndarray] = {}
        for k, v in arrays.items():
            a = _f64(v)
            self._data[k] = a.copy() if copy else a

    def __getitem__(self, key: str) -> np.ndarray:
        return self._data[key]

    def __setitem__(self, key: str, value) -> None:
        v = _f64(value)
        if key in self._data and v.shape != self._data[key].shape:
            raise ValueError(
                f"shape of {key!r} is frozen at {self._data[key].shape}, got {v.shape}"
            )
        if key not in self._data:
            raise KeyError(f"unknown parameter {key!r}; shapes are fixed at construction")
        self._data[key] = v

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def keys(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def copy(self) -> "ParamSet":
        return ParamSet(self._data, copy=True)

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._data.items()}, copy=False)

    def n_params(self) -> int:
        return sum(v.size for v in self._data.values())

    def allclose(self, other: "ParamSet", atol=0.0, rtol=0.0) -> bool:
        return set(self.keys()) == set(other.keys()) and all(
            np.allclose(self[k], other[k], atol=atol, rtol=rtol) for k in self
        )


def value_and_grad(f, params: ParamSet):
    """Evaluate a scalar function of a ParamSet and its gradient.

    ``f`` receives a mapping from parameter name to leaf Tensor and must
    return a scalar built from the primitives in this module.
    """
    with Tape() as tape:
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        out = f(leaves)
        if not _is_t(out):
            raise AutodiffError("function did not return a tracked tensor")
        value = float(out.value)
        tape.backward(out)
    grads = ParamSet({k: leaves[k].grad for k in params.keys()}, copy=False)
    return value, grads


def grad_wrt_input(f, z):
    """Gradient of a scalar function with respect to its vector input."""
    z = _f64(z)
    with Tape() as tape:
        zt = tape.leaf(z)
        out = f(zt)
        if not _is_t(out):
            raise AutodiffError("function did not return a tracked tensor")
        tape.backward(out)
    return zt.grad


def _scalar(x) -> float:
    v = x.value if _is_t(x) else x
    v = np.asarray(v, dtype=np.float64)
    if v.size != 1:
        raise AutodiffError("expected a scalar function value")
    return float(v)


def finite_diff_check(f, x, h=1e-4):
    """Max relative error between central differences and the tape gradient.

    Per coordinate: |fd_i - grad_i| / (|grad_i| + 1e-8). Raises
    NonFiniteError if any function evaluation is non-finite; a large
    returned value signals disagreement, never a crash.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = _f64(x)
    grad = grad_wrt_input(f, x)
    fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = _scalar(f(xp.reshape(x.shape)))
        fm = _scalar(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value near coordinate {i}")
        fd_flat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(fd - grad) / (np.abs(grad) + 1e-8)
    return float(np.max(err))


def finite_diff_check_params(f, params: ParamSet, h=1e-4):
    """finite_diff_check generalized to every coordinate of a ParamSet."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    _, grads = value_and_grad(f, params)
    worst = 0.0
    for name in params.keys():
        base = params[name]
        g = grads[name]
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_plain(f, params)
            flat[i] = orig - h
            fm = _eval_plain(f, params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value perturbing {name}[{i}]")
            fd = (fp - fm) / (2.0 * h)
            err = abs(fd - gflat[i]) / (abs(gflat[i]) + 1e-8)
            if err > worst:
                worst = err
    return worst


def _eval_plain(f, params: ParamSet) -> float:
    return _scalar(f({k: v for k, v in params.items()}))
