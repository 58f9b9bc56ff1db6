"""Block-wise recovery scores: kernel-ridge R², leakage against the true-latent baseline, support F1."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist
from sklearn.kernel_ridge import KernelRidge
from sklearn.model_selection import KFold

RIDGE = 1e-3
SUPPORT_REL_THRESHOLD = 0.1
MEDIAN_SUBSAMPLE = 1000


class DegenerateTargetError(ValueError):
    """Raised instead of returning a score when some target coordinate has zero variance."""


def _whitener(a: np.ndarray):
    mean = a.mean(0)
    cov = np.atleast_2d(np.cov(a, rowvar=False))
    vals, vecs = np.linalg.eigh(cov)
    keep = vals > 1e-12 * max(vals.max(), 1e-300)
    w = vecs[:, keep] / np.sqrt(vals[keep])
    return lambda v: (v - mean) @ w


def _median_gamma(a: np.ndarray, rng: np.random.Generator) -> float:
    if a.shape[0] > MEDIAN_SUBSAMPLE:
        a = a[rng.choice(a.shape[0], MEDIAN_SUBSAMPLE, replace=False)]
    d = pdist(a)
    med = np.median(d[d > 0]) if np.any(d > 0) else 1.0
    return 1.0 / (2.0 * med**2)


def nonlinear_r2(inputs, targets, folds: int = 5, seed: int = 0, ridge: float = RIDGE) -> float:
    """Cross-validated R² of an RBF kernel ridge regressor, averaged over target coordinates and folds.

    Inputs are whitened with the training fold's mean and covariance, so the score
    does not change under invertible affine re-coding of the inputs. The bandwidth
    follows the median heuristic on the whitened training inputs.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError("inputs and targets must have the same number of rows")
    if n < 10 * folds:
        raise ValueError(f"need at least {10 * folds} samples for {folds} folds, got {n}")
    if np.any(y.std(0) < 1e-12 * (1 + np.abs(y).max(0))):
        raise DegenerateTargetError("target coordinate with zero variance")
    rng = np.random.default_rng(seed)
    scores = []
    for tr, te in KFold(folds, shuffle=True, random_state=seed).split(x):
        white = _whitener(x[tr])
        xtr, xte = white(x[tr]), white(x[te])
        mu, sd = y[tr].mean(0), y[tr].std(0)
        sd = np.where(sd > 0, sd, 1.0)
        ytr = (y[tr] - mu) / sd
        yte = (y[te] - mu) / sd
        model = KernelRidge(alpha=ridge, kernel="rbf", gamma=_median_gamma(xtr, rng))
        pred = model.fit(xtr, ytr).predict(xte).reshape(yte.shape)
        sse = ((yte - pred) ** 2).sum(0)
        sst = ((yte - yte.mean(0)) ** 2).sum(0)
        scores.append(np.mean(1.0 - sse / np.maximum(sst, 1e-300)))
    return float(np.mean(scores))


def mcc_linear(est: np.ndarray, true: np.ndarray) -> float:
    """Mean absolute Pearson correlation after the best one-to-one matching of coordinates."""
    k = true.shape[1]
    corr = np.corrcoef(est.T, true.T)[: est.shape[1], est.shape[1] :]
    corr = np.nan_to_num(np.abs(corr))
    r, c = linear_sum_assignment(-corr)
    return float(corr[r, c].sum() / k)


def binarize_support(mean_abs_jac: np.ndarray, rel: float = SUPPORT_REL_THRESHOLD) -> np.ndarray:
    """Entry is on when it exceeds ``rel`` times the largest entry of its column."""
    m = np.asarray(mean_abs_jac, dtype=float)
    col_max = m.max(0, keepdims=True)
    return (m > rel * col_max) & (col_max > 0)


def _f1(est: np.ndarray, true: np.ndarray) -> float:
    tp = np.sum(est & true)
    if tp == 0:
        return 0.0
    prec, rec = tp / est.sum(), tp / true.sum()
    return float(2 * prec * rec / (prec + rec))


def support_f1(est: np.ndarray, true: np.ndarray, d_c: int) -> float:
    """F1 between boolean supports, maximized over column permutations inside each block."""
    est, true = np.asarray(est, bool), np.asarray(true, bool)
    if est.shape != true.shape:
        raise ValueError(f"support shapes differ: {est.shape} vs {true.shape}")
    if not true.any():
        raise ValueError("support F1 needs a nonempty true support")
    d_z = true.shape[1]
    best = 0.0
    for pc in itertools.permutations(range(d_c)):
        for ps in itertools.permutations(range(d_c, d_z)):
            best = max(best, _f1(est[:, list(pc) + list(ps)], true))
    return best


@dataclass
class IdentReport:
    r2_c_from_chat: float
    r2_s_from_shat: float
    leak_c_from_shat: float
    leak_s_from_chat: float
    baseline_leak_c_from_s: float
    baseline_leak_s_from_c: float
    support_f1: float | None = None
    mcc_linear: float | None = None

    @property
    def excess_leak_s_from_chat(self) -> float:
        return self.leak_s_from_chat - self.baseline_leak_s_from_c

    @property
    def excess_leak_c_from_shat(self) -> float:
        return self.leak_c_from_shat - self.baseline_leak_c_from_s

    def to_json_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1, sort_keys=True))

    def csv_row(self, **extra) -> dict:
        row = dict(extra)
        row.update(self.to_json_dict())
        return row


def write_report_csv(path, rows: list[dict]):
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})


def report_from_latents(
    c_hat: np.ndarray,
    s_hat: np.ndarray,
    c: np.ndarray,
    s: np.ndarray,
    d_c: int,
    est_support: np.ndarray | None = None,
    true_support: np.ndarray | None = None,
    folds: int = 5,
    seed: int = 0,
    with_mcc: bool = True,
) -> IdentReport:
    def r2(a, b):
        return nonlinear_r2(a, b, folds=folds, seed=seed)

    f1 = None
    if est_support is not None and true_support is not None:
        f1 = support_f1(est_support, true_support, d_c)
    mcc = None
    if with_mcc:
        mcc = mcc_linear(np.hstack([c_hat, s_hat]), np.hstack([c, s]))
    return IdentReport(
        r2_c_from_chat=r2(c_hat, c),
        r2_s_from_shat=r2(s_hat, s),
        leak_c_from_shat=r2(s_hat, c),
        leak_s_from_chat=r2(c_hat, s),
        baseline_leak_c_from_s=r2(s, c),
        baseline_leak_s_from_c=r2(c, s),
        support_f1=f1,
        mcc_linear=mcc,
    )


def identifiability_report(model, proc, n_eval: int = 2000, seed: int = 0, folds: int = 5) -> IdentReport:
    """Score a trained model against the ground-truth process on a fresh evaluation batch."""
    import torch

    from .estimator import encode_latents
    from .synthgen import sample_all_domains

    n_per = max(1, n_eval // proc.cfg.n_domains)
    batch = sample_all_domains(proc, n_per, seed=seed)
    lat = encode_latents(model, batch.x)
    h = torch.as_tensor(np.hstack([lat["c"], lat["s"]]))
    with torch.no_grad():
        mean_abs = model.decoder_jacobian(h).abs().mean(0).numpy()
    return report_from_latents(
        lat["c"], lat["s"], batch.c, batch.s, proc.cfg.partition.d_c,
        est_support=binarize_support(mean_abs),
        true_support=proc.cfg.support_mask.entries,
        folds=folds, seed=seed,
    )
