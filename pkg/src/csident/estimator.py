"""Content/style VAE with conditional exogenizing flows and decoder-Jacobian regularizers."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import DTYPE, ContentFlow, DenseMap, StyleFlow, load_named_tensors, save_named_tensors
from .supportlab import DimensionError

LOG_2PI = math.log(2 * math.pi)
STYLE_CONTEXTS = ("content", "domain")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class ModelConfig:
    d_c: int = 4
    d_s: int = 2
    d_x: int = 20
    n_domains: int = 4
    u_dim: int = 8
    hidden: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    flow_layers: int = 2
    flow_hidden: int = 8
    ctx_width: int = 8
    spline_bins: int = 8
    spline_bound: float = 5.0
    style_context: str = "content"  # "domain" drops c from the style flow's conditioning
    mask_init: float = 2.0

    def validate(self):
        if min(self.d_c, self.d_s) < 1 or self.d_x < self.d_c + self.d_s:
            raise DimensionError(f"inconsistent dims d_c={self.d_c} d_s={self.d_s} d_x={self.d_x}")
        if self.style_context not in STYLE_CONTEXTS:
            raise ValueError(f"style_context must be one of {STYLE_CONTEXTS}")
        return self

    @property
    def d_z(self) -> int:
        return self.d_c + self.d_s

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ContentStyleVAE(nn.Module):
    """Encoder, decoder, the two exogenizing flows, domain embeddings and the content mask."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg.validate()
        g = torch.Generator().manual_seed(int(seed))
        h = cfg.hidden
        self.encoder = DenseMap([cfg.d_x] + [h] * cfg.enc_layers + [2 * cfg.d_z], generator=g)
        self.decoder = DenseMap([cfg.d_z] + [h] * cfg.dec_layers + [cfg.d_x], generator=g)
        self.r_c = ContentFlow(
            cfg.d_c, cfg.u_dim, cfg.flow_layers, cfg.flow_hidden, cfg.ctx_width, generator=g
        )
        style_cond = cfg.d_c if cfg.style_context == "content" else cfg.u_dim
        self.r_s = StyleFlow(
            cfg.d_s, style_cond, cfg.spline_bins, cfg.spline_bound, cfg.flow_hidden, generator=g
        )
        self.attention = DenseMap([cfg.d_c + cfg.u_dim, cfg.d_c], ["tanh"], generator=g)
        self.U = nn.Parameter(torch.randn(cfg.n_domains, cfg.u_dim, generator=g, dtype=DTYPE))
        self.mask_logits = nn.Parameter(torch.full((cfg.d_c,), float(cfg.mask_init), dtype=DTYPE))

    # parameter groups for the two optimizers
    def decoder_parameters(self):
        return list(self.decoder.parameters())

    def other_parameters(self):
        dec = {id(p) for p in self.decoder.parameters()}
        return [p for p in self.parameters() if id(p) not in dec]

    def encode(self, x: torch.Tensor, noise: torch.Tensor | None = None):
        """Return ``(mu, sigma, z)`` with ``z = mu + sigma * noise`` (``noise=None`` means zero)."""
        if x.shape[-1] != self.cfg.d_x:
            raise DimensionError(f"expected observations of width {self.cfg.d_x}, got {tuple(x.shape)}")
        out = self.encoder(x)
        mu, log_sigma = out[..., : self.cfg.d_z], out[..., self.cfg.d_z :]
        sigma = log_sigma.exp()
        if noise is None:
            return mu, sigma, mu
        if noise.shape != mu.shape:
            raise DimensionError(f"noise shape {tuple(noise.shape)} != {tuple(mu.shape)}")
        return mu, sigma, mu + sigma * noise

    def split_and_mask(self, z: torch.Tensor):
        d_c = self.cfg.d_c
        return torch.sigmoid(self.mask_logits) * z[..., :d_c], z[..., d_c:]

    def style_condition(self, c: torch.Tensor, domain: torch.Tensor) -> torch.Tensor:
        u = self.U[domain]
        if self.cfg.style_context == "domain":
            return u
        alpha = self.attention(torch.cat([c, u], -1))
        return alpha * c

    def exogenize(self, c, s, domain):
        domain = torch.as_tensor(domain, dtype=torch.long)
        if domain.numel() and (domain.min() < 0 or domain.max() >= self.cfg.n_domains):
            raise IndexError(f"domain id out of range [0, {self.cfg.n_domains})")
        c_t, ld_c = self.r_c(c, self.U[domain])
        s_t, ld_s = self.r_s(s, self.style_condition(c, domain))
        return c_t, s_t, ld_c, ld_s

    def style_inverse(self, s_tilde, c, domain):
        domain = torch.as_tensor(domain, dtype=torch.long)
        return self.r_s.inverse(s_tilde, self.style_condition(c, domain))

    def decode(self, c, s):
        return self.decoder(torch.cat([c, s], -1))

    def decoder_jacobian(self, h: torch.Tensor) -> torch.Tensor:
        return self.decoder.jacobian(h)


def gaussian_nll(x, mean):
    return 0.5 * ((x - mean) ** 2).sum(-1) + 0.5 * x.shape[-1] * LOG_2PI


def std_normal_nll(v):
    return 0.5 * (v**2).sum(-1) + 0.5 * v.shape[-1] * LOG_2PI


def _forward_parts(model: ContentStyleVAE, x, domain, noise):
    mu, sigma, z = model.encode(x, noise)
    c, s = model.split_and_mask(z)
    c_t, s_t, ld_c, ld_s = model.exogenize(c, s, domain)
    x_hat = model.decode(c, s)
    recon = gaussian_nll(x, x_hat)
    # log q(z|x) at the sample, pushed through the mask and both flows
    log_q = -0.5 * (noise**2).sum(-1) - sigma.log().sum(-1) - 0.5 * noise.shape[-1] * LOG_2PI
    log_q_exo = log_q - F.logsigmoid(model.mask_logits).sum() - ld_c - ld_s
    kl = log_q_exo + std_normal_nll(torch.cat([c_t, s_t], -1))
    return recon, kl, torch.cat([c, s], -1)


def loss_vae(model: ContentStyleVAE, x, domain, noise):
    """Batch-mean ``(recon, kl)``; kl is a single-sample estimate in exogenous space."""
    recon, kl, _ = _forward_parts(model, x, domain, noise)
    return recon.mean(), kl.mean()


def sparsity_from_jacobian(jac: torch.Tensor, d_c: int) -> torch.Tensor:
    return jac[..., :, d_c:].abs().sum((-1, -2)).mean()


def select_partial_rows(mean_abs_jac: np.ndarray | torch.Tensor, d_c: int, k: int) -> list[int]:
    """Rows in both the top-k by style mass and the bottom-k by content mass; ties go to lower rows."""
    m = torch.as_tensor(mean_abs_jac).detach().cpu().numpy()
    if k > m.shape[0]:
        raise ValueError(f"K={k} exceeds the number of output rows {m.shape[0]}")
    style_mass = m[:, d_c:].sum(1)
    content_mass = m[:, :d_c].sum(1)
    top_style = np.argsort(-style_mass, kind="stable")[:k]
    low_content = np.argsort(content_mass, kind="stable")[:k]
    return sorted(set(top_style.tolist()) & set(low_content.tolist()))


def partial_from_jacobian(jac: torch.Tensor, d_c: int, k: int) -> torch.Tensor:
    abs_j = jac.abs()
    rows = select_partial_rows(abs_j.reshape(-1, *abs_j.shape[-2:]).mean(0), d_c, k)
    if not rows:
        return jac.new_zeros(())
    return abs_j[..., rows, :d_c].sum((-1, -2)).mean()


def loss_sparsity(model: ContentStyleVAE, h_batch: torch.Tensor) -> torch.Tensor:
    if h_batch.shape[0] == 0:
        raise ValueError("loss_sparsity needs a nonempty batch")
    return sparsity_from_jacobian(model.decoder_jacobian(h_batch), model.cfg.d_c)


def loss_partial(model: ContentStyleVAE, h_batch: torch.Tensor, k: int = 5) -> torch.Tensor:
    return partial_from_jacobian(model.decoder_jacobian(h_batch), model.cfg.d_c, k)


def loss_cmask(model: ContentStyleVAE) -> torch.Tensor:
    return torch.sigmoid(model.mask_logits).sum()


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    sparsity: float
    partial: float
    cmask: float
    total: float
    lam_sparsity: float
    lam_partial: float
    lam_cmask: float

    def recompute_total(self) -> float:
        return (
            self.recon
            + self.kl
            + self.lam_sparsity * self.sparsity
            + self.lam_partial * self.partial
            + self.lam_cmask * self.cmask
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    lam_sparsity: float = 1e-4
    lam_partial: float = 3e-3
    lam_cmask: float = 1e-4
    k_partial: int = 5
    epochs: int = 25
    batch_size: int = 64
    lr_adam: float = 1e-3
    lr_decoder: float = 0.1
    partial_start_epoch: int = 3
    sparsity_start_epoch: int = 0
    patience: int | None = 3
    seed: int = 0

    def validate(self, d_x: int | None = None):
        if min(self.lam_sparsity, self.lam_partial, self.lam_cmask) < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.partial_start_epoch > self.epochs or self.sparsity_start_epoch > self.epochs:
            raise ValueError("regularizer start epoch exceeds epochs")
        if d_x is not None and self.k_partial > d_x:
            raise ValueError(f"k_partial={self.k_partial} exceeds d_x={d_x}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def objective(
    model: ContentStyleVAE,
    x: torch.Tensor,
    domain: torch.Tensor,
    noise: torch.Tensor,
    cfg: TrainConfig,
    partial_active: bool = True,
    sparsity_active: bool = True,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Total training loss and its breakdown for one batch."""
    recon, kl, h = _forward_parts(model, x, domain, noise)
    recon, kl = recon.mean(), kl.mean()
    jac = model.decoder_jacobian(h)
    sparsity = sparsity_from_jacobian(jac, model.cfg.d_c)
    if partial_active:
        partial = partial_from_jacobian(jac, model.cfg.d_c, cfg.k_partial)
    else:
        with torch.no_grad():
            partial = partial_from_jacobian(jac.detach(), model.cfg.d_c, cfg.k_partial)
    cmask = loss_cmask(model)
    lam_p = cfg.lam_partial if partial_active else 0.0
    lam_s = cfg.lam_sparsity if sparsity_active else 0.0
    total = recon + kl + cmask * cfg.lam_cmask
    if lam_s:
        total = total + lam_s * sparsity
    if lam_p:
        total = total + lam_p * partial
    bd = LossBreakdown(
        *(float(v.detach()) for v in (recon, kl, sparsity, partial, cmask, total)),
        lam_s, lam_p, cfg.lam_cmask,
    )
    return total, bd


def _as_tensors(data):
    x = torch.as_tensor(np.asarray(data.x), dtype=DTYPE)
    d = torch.as_tensor(np.asarray(data.domain), dtype=torch.long)
    return x, d


@torch.no_grad()
def evaluate_elbo(model: ContentStyleVAE, data, seed: int = 12345, batch_size: int = 1024) -> dict:
    """Mean recon and kl on ``data`` with noise drawn from a fixed seed (comparable across epochs)."""
    x, d = _as_tensors(data)
    g = torch.Generator().manual_seed(seed)
    noise = torch.randn(x.shape[0], model.cfg.d_z, generator=g, dtype=DTYPE)
    rec, kl = [], []
    for i in range(0, x.shape[0], batch_size):
        r, k, _ = _forward_parts(model, x[i : i + batch_size], d[i : i + batch_size], noise[i : i + batch_size])
        rec.append(r)
        kl.append(k)
    return {"recon": float(torch.cat(rec).mean()), "kl": float(torch.cat(kl).mean())}


def train(
    model: ContentStyleVAE,
    data,
    cfg: TrainConfig,
    val=None,
    log_path: str | Path | None = None,
    timing_path: str | Path | None = None,
    quiet: bool = True,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ContentStyleVAE, list[dict]]:
    """Minimize the regularized ELBO; returns the (in-place updated) model and per-epoch log.

    Each log row holds the epoch-mean LossBreakdown plus validation recon/kl when ``val``
    is given. The partial-overlap term only enters the gradient from
    ``cfg.partial_start_epoch`` on, the sparsity term from ``cfg.sparsity_start_epoch``. Early stopping watches validation recon.
    With ``checkpoint_dir`` the final parameters, optimizer moments and noise RNG
    state are written there.
    """
    cfg.validate(model.cfg.d_x)
    x, d = _as_tensors(data)
    if d.numel() and d.max() >= model.cfg.n_domains:
        raise ValueError("dataset contains domains unknown to the model")
    log: list[dict] = []
    if cfg.epochs == 0:
        return model, log
    adam = torch.optim.Adam(model.other_parameters(), lr=cfg.lr_adam)
    sgd = torch.optim.SGD(model.decoder_parameters(), lr=cfg.lr_decoder)
    noise_gen = torch.Generator().manual_seed(int(cfg.seed))
    n = x.shape[0]
    best, stale = math.inf, 0
    log_fh = open(log_path, "w") if log_path else None
    time_fh = open(timing_path, "w") if timing_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            perm = torch.from_numpy(np.random.default_rng([cfg.seed, epoch]).permutation(n))
            active = epoch >= cfg.partial_start_epoch
            sums: dict[str, float] = {}
            n_batches = 0
            model.train()
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = perm[start : start + cfg.batch_size]
                noise = torch.randn(idx.numel(), model.cfg.d_z, generator=noise_gen, dtype=DTYPE)
                total, bd = objective(
                    model, x[idx], d[idx], noise, cfg, partial_active=active,
                    sparsity_active=epoch >= cfg.sparsity_start_epoch,
                )
                if not torch.isfinite(total):
                    raise TrainingDivergedError(epoch, b)
                adam.zero_grad(set_to_none=True)
                sgd.zero_grad(set_to_none=True)
                total.backward()
                for p in model.parameters():
                    if p.grad is not None and not torch.isfinite(p.grad).all():
                        raise TrainingDivergedError(epoch, b, "gradient")
                adam.step()
                sgd.step()
                for k, v in bd.to_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            row = {"epoch": epoch}
            row.update({k: v / n_batches for k, v in sums.items()})
            if val is not None:
                ev = evaluate_elbo(model, val)
                row["val_recon"], row["val_kl"] = ev["recon"], ev["kl"]
            log.append(row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                log_fh.flush()
            if time_fh:
                time_fh.write(json.dumps({"epoch": epoch, "seconds": time.perf_counter() - t0}) + "\n")
            if not quiet:
                print(f"epoch {epoch:3d} total {row['total']:.4f} recon {row['recon']:.4f} kl {row['kl']:.4f}")
            if val is not None and cfg.patience is not None:
                if row["val_recon"] < best - 1e-12:
                    best, stale = row["val_recon"], 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
    finally:
        if log_fh:
            log_fh.close()
        if time_fh:
            time_fh.close()
    if checkpoint_dir is not None:
        state = {
            "epochs_run": len(log),
            "train_config": asdict(cfg),
            "noise_rng_state": noise_gen.get_state().tolist(),
        }
        save_checkpoint(checkpoint_dir, model, state, optimizer_tensors(adam))
    return model, log


def optimizer_tensors(opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for i, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{i}.{key}"] = torch.as_tensor(val, dtype=DTYPE)
    return out


@torch.no_grad()
def encode_latents(model: ContentStyleVAE, x, domain=None, batch_size: int = 4096) -> dict[str, np.ndarray]:
    """Deterministic (posterior-mean) latents; exogenous ones too when ``domain`` is given."""
    x = torch.as_tensor(np.asarray(x), dtype=DTYPE)
    out = {"c": [], "s": []}
    if domain is not None:
        domain = torch.as_tensor(np.asarray(domain), dtype=torch.long)
        out.update(c_tilde=[], s_tilde=[])
    for i in range(0, x.shape[0], batch_size):
        _, _, z = model.encode(x[i : i + batch_size])
        c, s = model.split_and_mask(z)
        out["c"].append(c)
        out["s"].append(s)
        if domain is not None:
            c_t, s_t, _, _ = model.exogenize(c, s, domain[i : i + batch_size])
            out["c_tilde"].append(c_t)
            out["s_tilde"].append(s_t)
    return {k: torch.cat(v).numpy() if v else np.zeros((0,)) for k, v in out.items()}


def save_checkpoint(directory, model: ContentStyleVAE, train_state: dict | None = None, optim: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_named_tensors(directory / "params", {k: v for k, v in model.state_dict().items()})
    if optim:
        save_named_tensors(directory / "optim", optim)
    (directory / "model.json").write_text(json.dumps(asdict(model.cfg), indent=1, sort_keys=True))
    (directory / "train_state.json").write_text(json.dumps(train_state or {}, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[ContentStyleVAE, dict]:
    directory = Path(directory)
    cfg = ModelConfig.from_dict(json.loads((directory / "model.json").read_text()))
    model = ContentStyleVAE(cfg)
    model.load_state_dict(load_named_tensors(directory / "params"))
    state = json.loads((directory / "train_state.json").read_text())
    return model, state
