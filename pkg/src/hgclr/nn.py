"""Parameter containers and the Adam optimizer."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor_autodiff import RngStream, Tensor


class Module:
    """Attribute-based parameter registry.

    Parameters are the ``Tensor`` attributes with ``requires_grad``; child
    modules are walked recursively. Names are dotted attribute paths, in
    attribute definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def glorot(rng: RngStream, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform((fan_in, fan_out), -limit, limit), dtype)


def normal(rng: RngStream, shape, std: float, dtype) -> Tensor:
    return param(rng.normal(shape, std), dtype)


def zeros(shape, dtype) -> Tensor:
    return param(np.zeros(shape), dtype)


def ones(shape, dtype) -> Tensor:
    return param(np.ones(shape), dtype)


class Adam:
    def __init__(self, params: list, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
