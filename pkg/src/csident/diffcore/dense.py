from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from ..supportlab import DimensionError

DTYPE = torch.float64

_ACTS = {
    "tanh": (torch.tanh, lambda pre, out: 1.0 - out**2),
    "identity": (lambda t: t, lambda pre, out: torch.ones_like(pre)),
}


def _init_linear(n_out, n_in, generator, scale=1.0):
    bound = scale / n_in**0.5
    w = (torch.rand(n_out, n_in, generator=generator, dtype=DTYPE) * 2 - 1) * bound
    b = (torch.rand(n_out, generator=generator, dtype=DTYPE) * 2 - 1) * bound
    return w, b


class DenseMap(nn.Module):
    """Feed-forward map with per-layer activation tags and an exact input Jacobian.

    ``activations`` has one tag per layer; by default hidden layers use ``tanh``
    and the output layer is ``identity``.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activations: Sequence[str] | None = None,
        generator: torch.Generator | None = None,
        init_scale: float = 1.0,
    ):
        super().__init__()
        if len(sizes) < 2:
            raise DimensionError("DenseMap needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        n_layers = len(self.sizes) - 1
        if activations is None:
            activations = ["tanh"] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise DimensionError(f"{n_layers} layers but {len(activations)} activation tags")
        for a in activations:
            if a not in _ACTS:
                raise ValueError(f"unknown activation {a!r}")
        self.activations = tuple(activations)
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            w, b = _init_linear(n_out, n_in, generator, init_scale)
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(b))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def _check(self, v):
        if v.shape[-1] != self.in_dim:
            raise DimensionError(f"expected trailing dimension {self.in_dim}, got {tuple(v.shape)}")

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        self._check(v)
        h = v
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _ACTS[act][0](h @ w.T + b)
        return h

    def jacobian(self, v: torch.Tensor) -> torch.Tensor:
        """d forward / d v with shape (..., out_dim, in_dim); differentiable in params and v."""
        self._check(v)
        h = v
        jac = None
        for w, b, act in zip(self.weights, self.biases, self.activations):
            fn, dfn = _ACTS[act]
            pre = h @ w.T + b
            h = fn(pre)
            jac = w.expand(*pre.shape[:-1], *w.shape) if jac is None else w @ jac
            if act != "identity":
                jac = dfn(pre, h).unsqueeze(-1) * jac
        return jac

    def forward_and_jacobian(self, v: torch.Tensor):
        return self.forward(v), self.jacobian(v)

    def zero_output_layer_(self):
        with torch.no_grad():
            self.weights[-1].zero_()
            self.biases[-1].zero_()
        return self

    @classmethod
    def identity(cls, n: int) -> "DenseMap":
        m = cls([n, n], ["identity"])
        with torch.no_grad():
            m.weights[0].copy_(torch.eye(n, dtype=DTYPE))
            m.biases[0].zero_()
        return m


def dense_forward(m: DenseMap, v: torch.Tensor) -> torch.Tensor:
    return m(v)


def dense_jacobian(m: DenseMap, v: torch.Tensor) -> torch.Tensor:
    return m.jacobian(v)
