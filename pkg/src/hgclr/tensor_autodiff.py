"""Dense tensors with tape-ordered reverse-mode differentiation.

Every primitive records its parents and a backward closure on the output
tensor. ``Tensor.backward`` replays the recorded nodes in reverse creation
order, which is a valid reverse topological order because a node can only be
created after all of its inputs exist. Gradient accumulation therefore happens
in a fixed order, and identical programs yield bit-identical gradients.
"""

from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]

GUMBEL_EPS = 1e-10

_seq = itertools.count()

# Raise on NaN/Inf after each primitive. Costs one reduction per op.
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq)
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph -------------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        nodes = _collect(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def _collect(root: Tensor) -> list:
    seen = set()
    out = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    out.sort(key=lambda n: n._seq, reverse=True)
    return out


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a: ArrayLike, b: ArrayLike) -> tuple:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise arithmetic -------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


class _DetachTape:
    """Records detached values on one evaluation and replays them on later
    ones, so finite differences treat them as the constants they are."""

    def __init__(self):
        self.values = []
        self.mode = None
        self.pos = 0

    def take(self, data: np.ndarray) -> np.ndarray:
        if self.mode == "record":
            self.values.append(data.copy())
            return data
        if self.pos >= len(self.values) or self.values[self.pos].shape != data.shape:
            raise RuntimeError("detach replay diverged from the recorded evaluation")
        out = self.values[self.pos]
        self.pos += 1
        return out


_detach_tape: Optional[_DetachTape] = None


def detach(a: Tensor) -> Tensor:
    """Same values, no gradient path back to ``a``."""
    data = a.data if _detach_tape is None else _detach_tape.take(a.data)
    out = Tensor(data)
    out.op = "detach"
    return out


# -- shape ops --------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- normalizations and reductions -----------------------------------------

def softmax_lastdim(t: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable, True = keep) gives excluded entries probability
    exactly zero without materializing infinities.
    """
    x = t.data
    if np.isnan(x).any():
        raise NonFiniteError("softmax input contains NaN")
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with every entry masked")
        shifted = np.where(mask, x, -np.inf)
        m = shifted.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x, 0) - m), 0).astype(x.dtype)
    else:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (t,), backward, "softmax")


def logsumexp_lastdim(t: Tensor) -> Tensor:
    x = t.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]

    def backward(g):
        return (g[..., None] * (e / s),)

    return _result(out, (t,), backward, "logsumexp")


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = t.data
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"gain/bias must have shape ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = gb = gx = None
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        if t.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (t, gain, bias), backward, "layer_norm")


def l2_normalize(t: Tensor) -> Tensor:
    """Scale each last-axis slice to unit Euclidean norm."""
    x = t.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        raise ValueError("cannot normalize a zero-norm vector")
    out = x / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _result(out, (t,), backward, "l2_normalize")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    u, v = _pair(u, v)
    if u.shape != v.shape:
        raise ValueError("cosine_similarity needs equal shapes")
    return tsum(l2_normalize(u) * l2_normalize(v), axis=-1)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward, "embedding")


def bce_with_logits(logits: Tensor, targets: np.ndarray, reduction: str = "sum") -> Tensor:
    """Binary cross-entropy in the overflow-free logit form."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    cells = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    scale = 1.0 if reduction == "sum" else 1.0 / z.shape[0]
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def backward(g):
        return (g * scale * (p - y),)

    return _result(np.asarray(cells.sum() * scale, dtype=z.dtype), (logits,), backward, "bce_with_logits")


def dropout(t: Tensor, rate: float, rng: Optional["RngStream"]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return t
    keep = rng.uniform(t.shape) >= rate
    return t * (keep.astype(t.dtype) / (1.0 - rate))


# -- stochastic ------------------------------------------------------------

@dataclass
class RngStream:
    """Counter-based random stream: each draw is a pure function of
    ``(seed, name, counter)``, so streams with different names never share
    noise and a saved counter resumes the exact sequence."""

    seed: int
    name: str = "default"
    counter: int = 0

    def _next(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(self.name.encode()), self.counter])
        self.counter += 1
        return gen

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next().uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._next().normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def gumbel(self, shape) -> np.ndarray:
        u = self.uniform(shape, GUMBEL_EPS, 1.0 - GUMBEL_EPS)
        return -np.log(-np.log(u))

    def state(self) -> dict:
        return {"seed": self.seed, "name": self.name, "counter": self.counter}


def gumbel_softmax(logits: Tensor, temperature: float,
                   noise: Union[RngStream, np.ndarray, None]) -> Tensor:
    """softmax((logits + g) / temperature) along the last axis.

    ``noise`` is either a stream (fresh Gumbel draws), a precomputed Gumbel
    array (for replay and gradient checks), or None for zero noise.
    """
    if temperature <= 0:
        raise ValueError("gumbel_softmax temperature must be positive")
    if isinstance(noise, RngStream):
        g = noise.gumbel(logits.shape)
    elif noise is None:
        g = np.zeros(logits.shape)
    else:
        g = np.asarray(noise)
    return softmax_lastdim((logits + g.astype(logits.dtype)) * (1.0 / temperature))


# -- verification ----------------------------------------------------------

def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def _evaluate(loss_fn: Callable[[], Tensor], tape: _DetachTape, mode: str) -> Tensor:
    global _detach_tape
    tape.mode, tape.pos = mode, 0
    _detach_tape = tape
    try:
        return loss_fn()
    finally:
        _detach_tape = None


def gradcheck_parameters(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                         step: float = 1e-5, max_coords: Optional[int] = None,
                         seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` is re-evaluated for every perturbation, so it must be a
    deterministic function of the parameter values. Values passed through
    ``detach`` are frozen at the unperturbed point, which is what the
    gradient of a detached quantity means. With ``max_coords`` only a seeded
    random subset of each parameter's coordinates is probed.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient checks require float64 parameters")
        p.grad = None
    tape = _DetachTape()
    _evaluate(loss_fn, tape, "record").backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            fp = _evaluate(loss_fn, tape, "replay").item()
            flat[i] = orig - step
            fm = _evaluate(loss_fn, tape, "replay").item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("loss is not finite at a perturbed point")
            numeric[n] = (fp - fm) / (2 * step)
        worst = max(worst, _rel_err(analytic.reshape(-1)[coords], numeric))
        p.grad = None
    return worst


def finite_diff_gradcheck(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Check d f / d point for a scalar function of one tensor."""
    point = point if isinstance(point, Tensor) else Tensor(np.asarray(point, dtype=np.float64))
    point.requires_grad = True
    return gradcheck_parameters(lambda: f(point), [point], step=step)
