from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass
class GradCheckReport:
    max_rel_err: float
    failing: tuple[int, int] | None  # (tensor index, flat coordinate) of the worst entry above tol
    worst: tuple[int, int] | None
    n_checked: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.failing is None


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def grad_check(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    step: float = 1e-6,
    tol: float = 1e-4,
    analytic: Sequence[torch.Tensor] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    abs_floor: float = 0.0,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``tensors`` are leaf tensors (parameters or inputs) that ``fn`` reads; they are
    perturbed in place and restored. ``analytic`` overrides the autograd gradients,
    which is how a corrupted gradient can be fed in. ``max_coords`` subsamples
    coordinates per tensor with a seeded RNG. Entries where both gradients are below
    ``abs_floor`` are skipped since their relative error is pure rounding noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tensors = list(tensors)
    if analytic is None:
        for t in tensors:
            t.grad = None
        with torch.enable_grad():
            out = fn()
        grads = torch.autograd.grad(out, tensors, allow_unused=True)
        analytic = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, None
    n = 0
    with torch.no_grad():
        for ti, t in enumerate(tensors):
            flat = t.view(-1)
            g_flat = analytic[ti].reshape(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and coords.size > max_coords:
                coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
            for k in coords:
                orig = flat[k].item()
                flat[k] = orig + step
                f_plus = float(fn())
                flat[k] = orig - step
                f_minus = float(fn())
                flat[k] = orig
                num = (f_plus - f_minus) / (2 * step)
                ana = float(g_flat[k])
                n += 1
                if max(abs(num), abs(ana)) < abs_floor:
                    continue
                e = float(rel_err(ana, num))
                if e > worst_err or worst is None:
                    worst_err, worst = e, (ti, int(k))
    failing = worst if worst_err > tol else None
    return GradCheckReport(worst_err, failing, worst, n, tol)
