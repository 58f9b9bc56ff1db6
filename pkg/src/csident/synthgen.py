"""Ground-truth content/style worlds with controlled Jacobian supports.

Latents follow c ~ p(c|u), s = g_s(s_tilde; c, u), x = g(c, s). All maps are
numpy closed forms so batches can be regenerated bit-for-bit from a seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .supportlab import (
    PartitionSpec,
    SupportMatrix,
    check_assumption_partial,
    check_assumption_sparsity,
    estimate_support,
)

# shape of the elementwise monotone maps t -> t + k * tanh(t)
CONTENT_WARP = 0.5
STYLE_WARP = 0.5
MIX_HIDDEN = 4
INJECTIVITY_FLOOR = 1e-4
SUPPORT_TOL = 1e-6


class ConfigError(ValueError):
    pass


class ConstructionError(RuntimeError):
    pass


class ChecksumError(IOError):
    pass


def _warp(t, k):
    return t + k * np.tanh(t)


def _warp_deriv(t, k):
    return 1.0 + k * (1.0 - np.tanh(t) ** 2)


def _unwarp(y, k, iters=60):
    # derivative lies in [1, 1 + k], Newton from t = y / (1 + k/2) converges fast
    t = y / (1.0 + 0.5 * k)
    for _ in range(iters):
        step = (_warp(t, k) - y) / _warp_deriv(t, k)
        t = t - step
        if np.all(np.abs(step) < 1e-15 * (1.0 + np.abs(t))):
            break
    return t


def random_valid_mask(
    partition: PartitionSpec,
    rng: np.random.Generator,
    require_partial: bool = False,
    max_tries: int = 10_000,
    style_range: tuple[int, int] | None = None,
    content_max: int | None = None,
) -> SupportMatrix:
    """Sample a support mask satisfying relative sparsity (and optionally partial overlap).

    ``style_range`` bounds the largest style column norm (inclusive); content
    column norms are drawn above it, up to ``content_max``. Every row and column
    ends up with at least one nonzero.
    """
    d_x, d_c, d_s = partition.d_x, partition.d_c, partition.d_s
    if d_x < 2:
        raise ConfigError("need d_x >= 2 to separate content and style densities")
    lo, hi = style_range or (1, d_x - 1)
    top = content_max or d_x
    for _ in range(max_tries):
        max_style = int(rng.integers(lo, hi + 1))
        style_norms = rng.integers(1, max_style + 1, size=d_s)
        style_norms[rng.integers(d_s)] = max_style
        content_norms = rng.integers(max_style + 1, top + 1, size=d_c)
        m = np.zeros((d_x, d_c + d_s), dtype=bool)
        for j, k in enumerate(np.concatenate([content_norms, style_norms])):
            m[rng.choice(d_x, size=int(k), replace=False), j] = True
        if not m.any(axis=1).all():
            continue
        g = SupportMatrix(m)
        if not check_assumption_sparsity(g, partition):
            continue
        if require_partial and not check_assumption_partial(g, partition):
            continue
        return g
    raise ConstructionError(f"no valid mask found in {max_tries} draws for {partition}")


def default_mask(partition: PartitionSpec, seed: int) -> SupportMatrix:
    """Deterministic mask satisfying both sparsity assumptions for a given seed."""
    d_x = partition.d_x
    return random_valid_mask(
        partition,
        np.random.default_rng([seed, 7919]),
        require_partial=True,
        style_range=(max(1, d_x // 5), max(1, d_x // 4)),
        content_max=max(d_x // 4 + 1, (3 * d_x) // 5),
    )


@dataclass
class ProcessConfig:
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec(d_c=4, d_s=2, d_x=20))
    n_domains: int = 4
    u_dim: int = 8
    support_mask: SupportMatrix | None = None
    dependence_strength: float = 0.8
    domain_shift_strength: float = 1.0
    seed: int = 0
    require_partial: bool = True

    def __post_init__(self):
        if self.support_mask is None:
            self.support_mask = default_mask(self.partition, self.seed)

    def validate(self):
        p, m = self.partition, self.support_mask
        if m.shape != (p.d_x, p.d_z):
            raise ConfigError(f"support_mask shape {m.shape} != (d_x, d_z) = {(p.d_x, p.d_z)}")
        if self.n_domains < 1 or self.u_dim < 1:
            raise ConfigError("n_domains and u_dim must be positive")
        if not 0.0 <= self.dependence_strength <= 1.0:
            raise ConfigError(f"dependence_strength must lie in [0, 1], got {self.dependence_strength}")
        if self.domain_shift_strength < 0:
            raise ConfigError("domain_shift_strength must be non-negative")
        empty_rows = np.flatnonzero(~m.entries.any(axis=1))
        if len(empty_rows):
            raise ConfigError(f"observation rows {empty_rows.tolist()} receive no latent influence (invertibility)")
        empty_cols = np.flatnonzero(~m.entries.any(axis=0))
        if len(empty_cols):
            raise ConfigError(f"latent columns {empty_cols.tolist()} influence no observation (invertibility)")
        if not check_assumption_sparsity(m, p):
            norms = m.col_norms()
            raise ConfigError(
                "relative sparsity violated: style column norms "
                f"{norms[p.d_c:].tolist()} must all be below content column norms {norms[:p.d_c].tolist()}"
            )
        if self.require_partial and not check_assumption_partial(m, p):
            raise ConfigError("partially intersecting supports violated: a content/style column pair is nested")

    def to_json_dict(self) -> dict:
        return {
            "d_c": self.partition.d_c,
            "d_s": self.partition.d_s,
            "d_x": self.partition.d_x,
            "n_domains": self.n_domains,
            "u_dim": self.u_dim,
            "support_mask": self.support_mask.to_json_dict(d_c=self.partition.d_c),
            "dependence_strength": self.dependence_strength,
            "domain_shift_strength": self.domain_shift_strength,
            "seed": self.seed,
            "require_partial": self.require_partial,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ProcessConfig":
        p = PartitionSpec(d_c=int(d["d_c"]), d_s=int(d["d_s"]), d_x=int(d["d_x"]))
        mask = d.get("support_mask")
        return cls(
            partition=p,
            n_domains=int(d.get("n_domains", 4)),
            u_dim=int(d.get("u_dim", 8)),
            support_mask=SupportMatrix.from_json_dict(mask) if mask is not None else None,
            dependence_strength=float(d.get("dependence_strength", 0.8)),
            domain_shift_strength=float(d.get("domain_shift_strength", 1.0)),
            seed=int(d.get("seed", 0)),
            require_partial=bool(d.get("require_partial", True)),
        )


@dataclass
class LatentBatch:
    x: np.ndarray
    c: np.ndarray
    s: np.ndarray
    s_tilde: np.ndarray
    domain: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.c, self.s], axis=1)

    def subset(self, idx) -> "LatentBatch":
        return LatentBatch(self.x[idx], self.c[idx], self.s[idx], self.s_tilde[idx], self.domain[idx])

    @staticmethod
    def concat(batches) -> "LatentBatch":
        return LatentBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in
                             ("x", "c", "s", "s_tilde", "domain")))


class GroundTruthProcess:
    """Sampled parameters of p(c|u), g_s and g.

    Content: c = loc_u + scale_u * warp(eps), eps ~ N(0, I).
    Style:   s = dep * a * tanh(W c + V u + b) + exp(dep * 0.5 * tanh(P c + Q u + e)) * warp(s_tilde) + D u.
    Mixing:  x_i = sum_k v_ik tanh(sum_j W_ikj M_ij z_j + b_ik) + sum_j L_ij M_ij z_j,
             with sign(W_ikj) = sign(L_ij) and v_ik > 0, so J_g[i, j] never vanishes on the mask.
    Here u is the domain embedding scaled by domain_shift_strength.
    """

    def __init__(self, cfg: ProcessConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = cfg.partition
        d_c, d_s, d_x, d_z, du = p.d_c, p.d_s, p.d_x, p.d_z, cfg.u_dim
        self.u = rng.normal(size=(cfg.n_domains, du)) / np.sqrt(du)

        self.c_loc_w = rng.normal(size=(d_c, du)) * 1.0
        self.c_scale_w = rng.normal(size=(d_c, du)) * 0.5

        self.s_shift_amp = rng.uniform(1.0, 2.0, size=d_s) * rng.choice([-1.0, 1.0], size=d_s)
        self.s_shift_w = rng.normal(size=(d_s, d_c)) / np.sqrt(d_c) * 1.5
        self.s_shift_v = rng.normal(size=(d_s, du)) * 1.5
        self.s_shift_b = rng.normal(size=d_s) * 0.3
        self.s_scale_w = rng.normal(size=(d_s, d_c)) / np.sqrt(d_c)
        self.s_scale_v = rng.normal(size=(d_s, du))
        self.s_scale_b = rng.normal(size=d_s) * 0.3
        self.s_loc_w = rng.normal(size=(d_s, du)) * 0.5

        mask = cfg.support_mask.entries.astype(float)
        self.mask = mask
        sign = rng.choice([-1.0, 1.0], size=(d_x, d_z))
        self.mix_skip = sign * rng.uniform(0.5, 1.5, size=(d_x, d_z)) * mask
        self.mix_w = sign[:, None, :] * rng.uniform(0.3, 1.5, size=(d_x, MIX_HIDDEN, d_z)) * mask[:, None, :]
        self.mix_b = rng.normal(size=(d_x, MIX_HIDDEN)) * 0.5
        self.mix_v = rng.uniform(0.2, 1.0, size=(d_x, MIX_HIDDEN))

    @property
    def partition(self) -> PartitionSpec:
        return self.cfg.partition

    def domain_code(self, domain) -> np.ndarray:
        return self.cfg.domain_shift_strength * self.u[np.asarray(domain)]

    # content prior
    def content_loc_scale(self, domain):
        uc = self.domain_code(domain)
        loc = uc @ self.c_loc_w.T
        scale = np.exp(0.3 * np.tanh(uc @ self.c_scale_w.T))
        return loc, scale

    def content_from_noise(self, eps, domain):
        loc, scale = self.content_loc_scale(domain)
        return loc + scale * _warp(eps, CONTENT_WARP)

    def content_log_prob(self, c, domain):
        loc, scale = self.content_loc_scale(domain)
        eps = _unwarp((c - loc) / scale, CONTENT_WARP)
        logn = -0.5 * eps**2 - 0.5 * np.log(2 * np.pi)
        return (logn - np.log(_warp_deriv(eps, CONTENT_WARP)) - np.log(scale)).sum(axis=1)

    # style mechanism
    def _style_affine(self, c, domain):
        dep = self.cfg.dependence_strength
        uc = self.domain_code(domain)
        shift = dep * self.s_shift_amp * np.tanh(c @ self.s_shift_w.T + uc @ self.s_shift_v.T + self.s_shift_b)
        shift = shift + uc @ self.s_loc_w.T
        scale = np.exp(dep * 0.5 * np.tanh(c @ self.s_scale_w.T + uc @ self.s_scale_v.T + self.s_scale_b))
        return shift, scale

    def style(self, s_tilde, c, domain):
        shift, scale = self._style_affine(c, domain)
        return shift + scale * _warp(s_tilde, STYLE_WARP)

    def style_inverse(self, s, c, domain):
        shift, scale = self._style_affine(c, domain)
        return _unwarp((s - shift) / scale, STYLE_WARP)

    def style_log_prob(self, s, c, domain):
        shift, scale = self._style_affine(c, domain)
        st = _unwarp((s - shift) / scale, STYLE_WARP)
        logn = -0.5 * st**2 - 0.5 * np.log(2 * np.pi)
        return (logn - np.log(_warp_deriv(st, STYLE_WARP)) - np.log(scale)).sum(axis=1)

    # mixing
    def mix(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        pre = np.einsum("ikj,nj->nik", self.mix_w, z) + self.mix_b
        return (np.tanh(pre) * self.mix_v).sum(axis=2) + z @ self.mix_skip.T

    def mix_jacobian(self, z: np.ndarray) -> np.ndarray:
        """J_g at a single point z, shape (d_x, d_z)."""
        pre = np.einsum("ikj,j->ik", self.mix_w, z) + self.mix_b
        d = (1.0 - np.tanh(pre) ** 2) * self.mix_v
        return np.einsum("ik,ikj->ij", d, self.mix_w) + self.mix_skip

    def log_prob_latents(self, c, s, domain):
        return self.content_log_prob(c, domain) + self.style_log_prob(s, c, domain)


def _check_process(proc: GroundTruthProcess, rng: np.random.Generator, n_check: int = 500):
    p = proc.partition
    zs = []
    for d in range(proc.cfg.n_domains):
        b = sample_batch(proc, max(1, n_check // proc.cfg.n_domains), d, int(rng.integers(2**31)))
        zs.append(b.z)
    z = np.concatenate(zs)
    est = estimate_support(proc.mix_jacobian, z, SUPPORT_TOL)
    mask = proc.cfg.support_mask
    bad_rows = np.flatnonzero((est.entries != mask.entries).any(axis=1))
    if len(bad_rows):
        return f"support mismatch in row {int(bad_rows[0])}"
    for zi in z:
        sv = np.linalg.svd(proc.mix_jacobian(zi), compute_uv=False)
        if sv[-1] <= INJECTIVITY_FLOOR:
            return f"Jacobian nearly singular (min singular value {sv[-1]:.2e})"
    del p
    return None


def build_process(cfg: ProcessConfig, max_redraws: int = 20) -> GroundTruthProcess:
    """Draw process parameters from cfg.seed, verifying support and injectivity numerically."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 1])
    problem = None
    for _ in range(max_redraws):
        proc = GroundTruthProcess(cfg, rng)
        problem = _check_process(proc, np.random.default_rng([cfg.seed, 2]))
        if problem is None:
            return proc
    raise ConstructionError(f"process construction failed after {max_redraws} draws: {problem}")


def sample_batch(proc: GroundTruthProcess, n: int, domain: int, seed: int) -> LatentBatch:
    cfg = proc.cfg
    if not 0 <= domain < cfg.n_domains:
        raise ValueError(f"domain {domain} out of range [0, {cfg.n_domains})")
    p = proc.partition
    rng = np.random.default_rng([seed, domain, 3])
    eps = rng.normal(size=(n, p.d_c))
    s_tilde = rng.normal(size=(n, p.d_s))
    dom = np.full(n, domain, dtype=np.int64)
    c = proc.content_from_noise(eps, dom)
    s = proc.style(s_tilde, c, dom)
    x = proc.mix(np.concatenate([c, s], axis=1)) if n else np.zeros((0, p.d_x))
    return LatentBatch(x=x, c=c, s=s, s_tilde=s_tilde, domain=dom)


def sample_all_domains(proc: GroundTruthProcess, n_per_domain: int, seed: int) -> LatentBatch:
    return LatentBatch.concat(
        [sample_batch(proc, n_per_domain, d, seed) for d in range(proc.cfg.n_domains)]
    )


def domain_kl_diagnostic(proc: GroundTruthProcess, d1: int, d2: int, n: int, seed: int = 0) -> float:
    """Monte-Carlo symmetric KL between p(c, s | u=d1) and p(c, s | u=d2).

    Uses the exact latent log-densities, so identical domains give exactly zero.
    """
    if d1 == d2:
        return 0.0
    total = 0.0
    for a, b in ((d1, d2), (d2, d1)):
        batch = sample_batch(proc, n, a, seed)
        da = np.full(n, a)
        db = np.full(n, b)
        total += float(np.mean(proc.log_prob_latents(batch.c, batch.s, da) -
                               proc.log_prob_latents(batch.c, batch.s, db)))
    return max(total, 0.0)


# persistence

_ARRAYS = (("x", "x.bin", "<f8"), ("c", "c.bin", "<f8"), ("s", "s.bin", "<f8"),
           ("s_tilde", "stilde.bin", "<f8"), ("domain", "domain.u32.bin", "<u4"))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def save_batch(directory, batch: LatentBatch, cfg: ProcessConfig, extra: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"process": cfg.to_json_dict(), "n": len(batch), "arrays": {}}
    for attr, fname, dtype in _ARRAYS:
        arr = np.ascontiguousarray(getattr(batch, attr), dtype=dtype)
        with open(d / fname, "wb") as fh:
            fh.write(arr.tobytes())
        meta["arrays"][fname] = {"shape": list(arr.shape), "dtype": dtype, "sha256": _sha256(d / fname)}
    if extra:
        meta.update(extra)
    with open(d / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_batch(directory) -> tuple[LatentBatch, dict]:
    d = Path(directory)
    with open(d / "meta.json") as fh:
        meta = json.load(fh)
    arrays = {}
    for attr, fname, dtype in _ARRAYS:
        info = meta["arrays"][fname]
        path = d / fname
        if not os.path.exists(path):
            raise ChecksumError(f"missing array file {path}")
        if _sha256(path) != info["sha256"]:
            raise ChecksumError(f"checksum mismatch for {path}")
        arr = np.fromfile(path, dtype=dtype).reshape(info["shape"])
        arrays[attr] = arr.astype(np.int64) if attr == "domain" else arr.astype(np.float64)
    return LatentBatch(**arrays), meta
