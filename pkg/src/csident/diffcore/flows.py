"""Conditional monotone flows: a log-space dense sigmoid flow and a rational-quadratic spline."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..supportlab import DimensionError
from .dense import DTYPE, DenseMap, _init_linear


class SplineParameterError(ValueError):
    pass


class FlowNumericError(FloatingPointError):
    pass


_SOFTPLUS_ONE = math.log(math.e - 1.0)  # softplus(_SOFTPLUS_ONE) == 1


def _log_matmul(log_a: torch.Tensor, log_b: torch.Tensor) -> torch.Tensor:
    # log(exp(A) @ exp(B)) for positive matrices stored as logs
    return torch.logsumexp(log_a.unsqueeze(-1) + log_b.unsqueeze(-3), dim=-2)


class ContentFlow(nn.Module):
    """Per-coordinate dense sigmoid flow whose weights come from a hyper-map of the context.

    Each coordinate runs through ``n_layers`` sigmoid layers of width ``hidden``
    (1 -> hidden -> ... -> 1). Every layer computes ``logit(w @ sigmoid(a * (u @ h) + b))``
    with positive ``a`` and simplex rows ``u``, ``w``, so the map is strictly increasing.
    Everything is evaluated in log space; the per-coordinate derivative is carried as
    a log-Jacobian product.

    The conditioning vector is first passed through a small tanh MLP (``ctx_width``
    wide) and a linear hyper-map produces all flow parameters. The hyper-map starts at
    zero, which gives a = 1, b = 0 and uniform simplex weights: the identity map.
    """

    def __init__(
        self,
        dim: int,
        cond_dim: int,
        n_layers: int = 2,
        hidden: int = 8,
        ctx_width: int = 8,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if n_layers < 1:
            raise ValueError("ContentFlow needs at least one layer")
        self.dim, self.cond_dim = int(dim), int(cond_dim)
        self.n_layers, self.hidden, self.ctx_width = int(n_layers), int(hidden), int(ctx_width)
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        self.context = DenseMap([cond_dim, ctx_width], ["tanh"], generator=generator)
        widths = [1] + [self.hidden] * (self.n_layers - 1) + [1]
        self._layer_dims = list(zip(widths[:-1], widths[1:]))
        self._n_per_coord = sum(self._layer_param_count(i, o) for i, o in self._layer_dims)
        n_out = self.dim * self._n_per_coord
        self.hyper_w = nn.Parameter(torch.zeros(n_out, ctx_width, dtype=DTYPE))
        self.hyper_b = nn.Parameter(torch.zeros(n_out, dtype=DTYPE))

    def _layer_param_count(self, d_in, d_out):
        h = self.hidden
        return h * d_in + h + h + d_out * h

    def randomize_(self, scale: float = 0.5, generator: torch.Generator | None = None):
        """Replace the identity start with random hyper-map weights (for tests and oracles)."""
        g = generator if generator is not None else torch.Generator().manual_seed(1)
        w, b = _init_linear(*self.hyper_w.shape, g, scale * self.ctx_width**0.5)
        with torch.no_grad():
            self.hyper_w.copy_(w)
            self.hyper_b.copy_(b)
        return self

    def _params(self, cond):
        ctx = self.context(cond)
        flat = ctx @ self.hyper_w.T + self.hyper_b
        flat = flat.reshape(*cond.shape[:-1], self.dim, self._n_per_coord)
        out, k, h = [], 0, self.hidden
        for d_in, d_out in self._layer_dims:
            u = flat[..., k : k + h * d_in].reshape(*flat.shape[:-1], h, d_in)
            k += h * d_in
            a = F.softplus(flat[..., k : k + h] + _SOFTPLUS_ONE)
            k += h
            b = flat[..., k : k + h]
            k += h
            w = flat[..., k : k + d_out * h].reshape(*flat.shape[:-1], d_out, h)
            k += d_out * h
            out.append((F.log_softmax(u, -1), a, b, F.log_softmax(w, -1)))
        return out

    def forward(self, c: torch.Tensor, cond: torch.Tensor):
        """Map ``c`` (batch, dim) to ``(c_tilde, logdet)``; logdet has shape (batch,)."""
        if c.shape[-1] != self.dim or cond.shape[-1] != self.cond_dim:
            raise DimensionError(
                f"ContentFlow expects ({self.dim}, {self.cond_dim}) got {tuple(c.shape)}, {tuple(cond.shape)}"
            )
        h = c.unsqueeze(-1)  # (..., dim, 1)
        log_j = torch.zeros(*c.shape, 1, 1, dtype=c.dtype)
        for log_u, a, b, log_w in self._params(cond):
            mixed = (log_u.exp() @ h.unsqueeze(-1)).squeeze(-1)
            pre = a * mixed + b
            lsp, lsn = F.logsigmoid(pre), F.logsigmoid(-pre)
            log_p = torch.logsumexp(log_w + lsp.unsqueeze(-2), -1)
            log_q = torch.logsumexp(log_w + lsn.unsqueeze(-2), -1)
            h = log_p - log_q
            # d h_o / d in_j = sum_k w_ok s_k (1 - s_k) a_k u_kj / (p_o q_o)
            inner = (lsp + lsn + a.log()).unsqueeze(-1) + log_u
            layer_j = _log_matmul(log_w, inner) - (log_p + log_q).unsqueeze(-1)
            log_j = _log_matmul(layer_j, log_j)
        c_tilde = h.squeeze(-1)
        logdet = log_j.squeeze(-1).squeeze(-1).sum(-1)
        if not (torch.isfinite(c_tilde).all() and torch.isfinite(logdet).all()):
            raise FlowNumericError("content flow produced non-finite output")
        return c_tilde, logdet


def rq_spline_knots(
    x: torch.Tensor,
    knot_x: torch.Tensor,
    knot_y: torch.Tensor,
    knot_d: torch.Tensor,
    inverse: bool = False,
    check: bool = True,
):
    """Monotone rational-quadratic spline through explicit knots.

    ``knot_x`` / ``knot_y`` have shape (..., K+1) and must be strictly increasing;
    ``knot_d`` holds the positive knot derivatives. ``x`` must lie inside the knot
    range (the caller handles tails). Returns ``(y, log_derivative)`` where the
    log-derivative is that of the forward map evaluated at the forward input.
    """
    if check:
        if (knot_x.diff(dim=-1) <= 0).any() or (knot_y.diff(dim=-1) <= 0).any():
            raise SplineParameterError("spline knots must be strictly increasing")
        if (knot_d <= 0).any():
            raise SplineParameterError("spline knot derivatives must be positive")
    lead = torch.broadcast_shapes(x.shape, knot_x.shape[:-1])
    x = x.expand(lead)
    knot_x, knot_y, knot_d = (k.expand(*lead, k.shape[-1]) for k in (knot_x, knot_y, knot_d))
    search = knot_y if inverse else knot_x
    idx = (x.unsqueeze(-1) >= search[..., 1:-1]).sum(-1, keepdim=True)

    def pick(t):
        return t.gather(-1, idx).squeeze(-1)

    x0, x1 = pick(knot_x), pick(knot_x[..., 1:])
    y0, y1 = pick(knot_y), pick(knot_y[..., 1:])
    d0, d1 = pick(knot_d), pick(knot_d[..., 1:])
    w, hgt = x1 - x0, y1 - y0
    slope = hgt / w
    if inverse:
        dy = x - y0
        k = d1 + d0 - 2 * slope
        qa = hgt * (slope - d0) + dy * k
        qb = hgt * d0 - dy * k
        qc = -slope * dy
        disc = (qb.pow(2) - 4 * qa * qc).clamp_min(0.0)
        xi = (2 * qc) / (-qb - disc.sqrt())
        out = xi * w + x0
    else:
        xi = (x - x0) / w
        t = xi * (1 - xi)
        num = hgt * (slope * xi.pow(2) + d0 * t)
        den = slope + (d1 + d0 - 2 * slope) * t
        out = y0 + num / den
    t = xi * (1 - xi)
    den = slope + (d1 + d0 - 2 * slope) * t
    deriv_num = slope.pow(2) * (d1 * xi.pow(2) + 2 * slope * t + d0 * (1 - xi).pow(2))
    logd = deriv_num.log() - 2 * den.log()
    return out, logd


def _knots_from_raw(raw_w, raw_h, raw_d, bound, min_w=1e-3, min_h=1e-3, min_d=1e-3):
    k = raw_w.shape[-1]
    widths = min_w + (1 - min_w * k) * torch.softmax(raw_w, -1)
    heights = min_h + (1 - min_h * k) * torch.softmax(raw_h, -1)

    def cum(t):
        c = F.pad(torch.cumsum(t, -1), (1, 0))
        c = 2 * bound * c - bound
        # pin the ends exactly so tails join continuously
        return torch.cat([torch.full_like(c[..., :1], -bound), c[..., 1:-1], torch.full_like(c[..., :1], bound)], -1)

    # interior derivatives: softplus shifted so raw 0 -> derivative 1; boundary derivatives are 1
    inner = min_d + F.softplus(raw_d + math.log(math.expm1(1.0 - min_d)))
    ones = torch.ones_like(inner[..., :1])
    return cum(widths), cum(heights), torch.cat([ones, inner, ones], -1)


def rq_spline(x, raw_w, raw_h, raw_d, bound: float = 5.0, inverse: bool = False):
    """Elementwise spline on [-bound, bound] with identity tails; returns ``(y, logdet)``.

    ``raw_*`` are unnormalized bin widths, heights (..., K) and interior derivatives
    (..., K-1). The log-derivative returned is that of the forward map, so for
    ``inverse=True`` callers negate it to get the inverse's logdet.
    """
    kx, ky, kd = _knots_from_raw(raw_w, raw_h, raw_d, bound)
    inside = (x >= -bound) & (x <= bound)
    xc = x.clamp(-bound, bound)
    y, logd = rq_spline_knots(xc, kx, ky, kd, inverse=inverse, check=False)
    y = torch.where(inside, y, x)
    logd = torch.where(inside, logd, torch.zeros_like(logd))
    return y, logd


class StyleFlow(nn.Module):
    """Coordinate-wise conditional rational-quadratic spline flow.

    A tanh conditioner maps the context to ``dim * (3K - 1)`` knot parameters. The
    conditioner's output layer starts at zero, which makes every spline the identity.
    """

    def __init__(
        self,
        dim: int,
        cond_dim: int,
        n_bins: int = 8,
        bound: float = 5.0,
        hidden: int = 8,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.dim, self.cond_dim = int(dim), int(cond_dim)
        self.n_bins, self.bound = int(n_bins), float(bound)
        self.conditioner = DenseMap(
            [cond_dim, hidden, dim * (3 * n_bins - 1)], generator=generator
        ).zero_output_layer_()

    def randomize_(self, scale: float = 1.0, generator: torch.Generator | None = None):
        g = generator if generator is not None else torch.Generator().manual_seed(2)
        w, b = _init_linear(*self.conditioner.weights[-1].shape, g, scale * 3.0)
        with torch.no_grad():
            self.conditioner.weights[-1].copy_(w)
            self.conditioner.biases[-1].copy_(b)
        return self

    def _raw(self, cond):
        if cond.shape[-1] != self.cond_dim:
            raise DimensionError(f"StyleFlow expects context dim {self.cond_dim}, got {tuple(cond.shape)}")
        k = self.n_bins
        p = self.conditioner(cond).reshape(*cond.shape[:-1], self.dim, 3 * k - 1)
        return p[..., :k], p[..., k : 2 * k], p[..., 2 * k :]

    def _check(self, v):
        if v.shape[-1] != self.dim:
            raise DimensionError(f"StyleFlow expects dim {self.dim}, got {tuple(v.shape)}")

    def forward(self, s: torch.Tensor, cond: torch.Tensor):
        self._check(s)
        y, logd = rq_spline(s, *self._raw(cond), bound=self.bound)
        logdet = logd.sum(-1)
        if not (torch.isfinite(y).all() and torch.isfinite(logdet).all()):
            raise FlowNumericError("style flow produced non-finite output")
        return y, logdet

    def inverse(self, s_tilde: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        self._check(s_tilde)
        s, _ = rq_spline(s_tilde, *self._raw(cond), bound=self.bound, inverse=True)
        return s


def content_flow_forward(f: ContentFlow, c, ctx):
    return f(c, ctx)


def style_flow_forward(f: StyleFlow, s, ctx):
    return f(s, ctx)


def style_flow_inverse(f: StyleFlow, s_tilde, ctx):
    return f.inverse(s_tilde, ctx)
