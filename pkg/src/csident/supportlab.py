"""Support-matrix algebra and an exhaustive oracle for the block identifiability results.

A support matrix records which latent coordinates influence which observed
coordinates. Everything here is discrete: Jacobians are reduced to boolean
patterns, and the "generic position" behaviour of the true and estimated
mixing functions is modelled by the boolean matrix product (no accidental
cancellation).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_ENUM_DZ = 5
MAX_ENUM_DX = 8


class DimensionError(ValueError):
    pass


class AssumptionError(ValueError):
    """Input support violates an assumption the requested check depends on."""


class BudgetExceededError(RuntimeError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    d_c: int
    d_s: int
    d_x: int

    def __post_init__(self):
        if self.d_c < 1 or self.d_s < 1:
            raise DimensionError(f"need d_c >= 1 and d_s >= 1, got d_c={self.d_c}, d_s={self.d_s}")
        if self.d_x < self.d_z:
            raise DimensionError(f"need d_x >= d_z, got d_x={self.d_x} < d_z={self.d_z}")

    @property
    def d_z(self) -> int:
        return self.d_c + self.d_s

    @property
    def content(self) -> range:
        return range(self.d_c)

    @property
    def style(self) -> range:
        return range(self.d_c, self.d_z)


@dataclass(frozen=True, eq=False)
class SupportMatrix:
    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries)
        if arr.ndim != 2:
            raise DimensionError(f"support matrix must be 2-D, got shape {arr.shape}")
        arr = arr.astype(bool, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def row_set(self, i: int) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.entries[i]).tolist())

    def col_set(self, j: int) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.entries[:, j]).tolist())

    def col_norm(self, j: int) -> int:
        return int(self.entries[:, j].sum())

    def col_norms(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    def __eq__(self, other):
        if not isinstance(other, SupportMatrix):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.entries, other.entries))

    def __hash__(self):
        return hash((self.shape, self.entries.tobytes()))

    def __repr__(self):
        body = "\n".join("".join("1" if b else "." for b in row) for row in self.entries)
        return f"SupportMatrix({self.rows}x{self.cols})\n{body}"

    @classmethod
    def identity(cls, n: int) -> "SupportMatrix":
        return cls(np.eye(n, dtype=bool))

    @classmethod
    def from_permutation(cls, perm: Sequence[int]) -> "SupportMatrix":
        """Support with (perm[j], j) set for every column j."""
        n = len(perm)
        a = np.zeros((n, n), dtype=bool)
        a[list(perm), np.arange(n)] = True
        return cls(a)

    def to_json_dict(self, d_c: int | None = None) -> dict:
        d = {"rows": self.rows, "cols": self.cols}
        if d_c is not None:
            d["d_c"] = int(d_c)
        d["bits"] = self.entries.astype(int).tolist()
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "SupportMatrix":
        bits = np.asarray(d["bits"], dtype=int)
        if bits.ndim != 2 or bits.shape != (d["rows"], d["cols"]):
            raise DimensionError(
                f"bits shape {bits.shape} does not match rows={d['rows']}, cols={d['cols']}"
            )
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("bits must be 0 or 1")
        return cls(bits.astype(bool))


def load_support_json(path) -> tuple[SupportMatrix, PartitionSpec]:
    with open(path) as fh:
        d = json.load(fh)
    g = SupportMatrix.from_json_dict(d)
    if "d_c" not in d:
        raise ValueError("support JSON needs a 'd_c' field to define the content/style split")
    p = PartitionSpec(d_c=int(d["d_c"]), d_s=g.cols - int(d["d_c"]), d_x=g.rows)
    return g, p


def estimate_support(
    jacobian_sampler: Callable[[np.ndarray], np.ndarray],
    sample_points: Iterable[np.ndarray],
    tol: float,
) -> SupportMatrix:
    """Entry (i, j) is set iff |J(z)[i, j]| > tol at some sample point."""
    if tol < 0:
        raise ValueError(f"tol must be non-negative, got {tol}")
    acc = None
    for z in sample_points:
        jac = np.asarray(jacobian_sampler(z))
        if jac.ndim != 2:
            raise DimensionError(f"Jacobian sample must be 2-D, got shape {jac.shape}")
        if acc is None:
            acc = np.zeros(jac.shape, dtype=bool)
        elif jac.shape != acc.shape:
            raise DimensionError(f"Jacobian shape changed across samples: {acc.shape} vs {jac.shape}")
        acc |= np.abs(jac) > tol
    if acc is None:
        raise ValueError("no sample points given")
    return SupportMatrix(acc)


def _check_cols(g: SupportMatrix, p: PartitionSpec):
    if g.cols != p.d_z:
        raise DimensionError(f"support has {g.cols} columns, partition expects d_z={p.d_z}")


def check_assumption_sparsity(g: SupportMatrix, p: PartitionSpec) -> bool:
    """Every content column strictly denser than every style column."""
    _check_cols(g, p)
    norms = g.col_norms()
    return bool(norms[: p.d_c].min() > norms[p.d_c :].max())


def check_assumption_partial(g: SupportMatrix, p: PartitionSpec) -> bool:
    """No (content, style) column pair has one support nested in the other."""
    _check_cols(g, p)
    e = g.entries
    norms = g.col_norms()
    for jc in p.content:
        for js in p.style:
            inter = int((e[:, jc] & e[:, js]).sum())
            if not inter < min(norms[jc], norms[js]):
                return False
    return True


def objective_style_sparsity(ghat: SupportMatrix, p: PartitionSpec) -> int:
    _check_cols(ghat, p)
    return int(ghat.entries[:, p.d_c :].sum())


def objective_partial_overlap(ghat: SupportMatrix, p: PartitionSpec) -> int:
    _check_cols(ghat, p)
    e = ghat.entries.astype(np.int64)
    # (d_x, d_c)^T @ (d_x, d_s) counts shared rows per pair
    return int((e[:, : p.d_c].T @ e[:, p.d_c :]).sum())


def propagate_support(g: SupportMatrix, t: SupportMatrix) -> SupportMatrix:
    """Boolean product: Ghat[i, j] iff some k has G[i, k] and T[k, j]."""
    if g.cols != t.rows:
        raise DimensionError(f"cannot compose {g.shape} with {t.shape}")
    prod = g.entries.astype(np.int64) @ t.entries.astype(np.int64)
    return SupportMatrix(prod > 0)


def permutation_witness(t: SupportMatrix) -> tuple[int, ...] | None:
    """Return sigma with T[sigma[j], j] for all j, or None if no perfect matching exists.

    Augmenting-path (Kuhn) matching of columns to rows.
    """
    if t.rows != t.cols:
        raise DimensionError(f"permutation witness needs a square support, got {t.shape}")
    n = t.rows
    adj = [np.flatnonzero(t.entries[:, j]).tolist() for j in range(n)]
    row_owner = [-1] * n

    def augment(j, seen):
        for i in adj[j]:
            if seen[i]:
                continue
            seen[i] = True
            if row_owner[i] == -1 or augment(row_owner[i], seen):
                row_owner[i] = j
                return True
        return False

    for j in range(n):
        if not augment(j, [False] * n):
            return None
    sigma = [0] * n
    for i, j in enumerate(row_owner):
        sigma[j] = i
    return tuple(sigma)


@dataclass
class TheoremReport:
    assumption_iii_holds: bool
    assumption2_holds: bool
    objective3_min: int
    objective4_min: int
    all_minimizers_block_zero_upper_right: bool
    all_minimizers_block_zero_lower_left: bool
    witness_minimizers: list[SupportMatrix] = field(default_factory=list)
    n_minimizers: int = 0
    n_candidates: int = 0
    enforce_eq4: bool = False

    def to_json_dict(self) -> dict:
        return {
            "assumption_iii_holds": self.assumption_iii_holds,
            "assumption2_holds": self.assumption2_holds,
            "objective3_min": self.objective3_min,
            "objective4_min": self.objective4_min,
            "all_minimizers_block_zero_upper_right": self.all_minimizers_block_zero_upper_right,
            "all_minimizers_block_zero_lower_left": self.all_minimizers_block_zero_lower_left,
            "witness_minimizers": [t.to_json_dict() for t in self.witness_minimizers],
            "n_minimizers": self.n_minimizers,
            "n_candidates": self.n_candidates,
            "enforce_eq4": self.enforce_eq4,
        }


def _popcount(a: np.ndarray) -> np.ndarray:
    a = a.astype(np.uint64)
    out = np.zeros(a.shape, dtype=np.int64)
    while np.any(a):
        out += (a & np.uint64(1)).astype(np.int64)
        a = a >> np.uint64(1)
    return out


def _matchable(masks: np.ndarray, dz: int) -> np.ndarray:
    """Vectorised perfect-matching test over rows of column masks (N, dz).

    reach[S] is true when columns 0..|S|-1 can be matched injectively onto row set S.
    """
    n_sub = 1 << dz
    sizes = _popcount(np.arange(n_sub))
    reach = np.zeros((n_sub, masks.shape[0]), dtype=bool)
    reach[0] = True
    for j in range(dz):
        col = masks[:, j]
        for s in np.flatnonzero(sizes == j + 1):
            acc = np.zeros(masks.shape[0], dtype=bool)
            for k in range(dz):
                if s >> k & 1:
                    acc |= reach[s ^ (1 << k)] & ((col >> k) & 1).astype(bool)
            reach[s] = acc
    return reach[n_sub - 1]


def _masks_to_support(masks: Sequence[int], dz: int) -> SupportMatrix:
    t = np.zeros((dz, dz), dtype=bool)
    for j, m in enumerate(masks):
        for k in range(dz):
            t[k, j] = bool(m >> k & 1)
    return SupportMatrix(t)


def brute_force_theorem_check(
    g: SupportMatrix,
    p: PartitionSpec,
    enforce_eq4: bool,
    *,
    permutations_only: bool = False,
    require_assumptions: bool = True,
    max_witnesses: int = 64,
    chunk_size: int = 1 << 18,
) -> TheoremReport:
    """Enumerate every candidate transform support T and inspect the minimisers.

    T ranges over all d_z x d_z boolean matrices admitting a permutation witness
    (or only over permutation supports when ``permutations_only``). Each T maps the
    true support G to Ghat = G . T; the style-sparsity objective is minimised, and
    with ``enforce_eq4`` the partial-overlap objective is minimised lexicographically
    among those minimisers. Column j of T is encoded as a d_z-bit mask over rows.

    ``require_assumptions=False`` skips the precondition guards so that
    counterexamples violating an assumption can be inspected.
    """
    if g.rows != p.d_x:
        raise DimensionError(f"support has {g.rows} rows, partition expects d_x={p.d_x}")
    _check_cols(g, p)
    dz, dc = p.d_z, p.d_c
    if dz > MAX_ENUM_DZ or p.d_x > MAX_ENUM_DX:
        raise BudgetExceededError(
            f"enumeration budget is d_z <= {MAX_ENUM_DZ}, d_x <= {MAX_ENUM_DX}; "
            f"got d_z={dz}, d_x={p.d_x}"
        )
    sparsity_ok = check_assumption_sparsity(g, p)
    partial_ok = check_assumption_partial(g, p)
    if require_assumptions:
        if not sparsity_ok:
            raise AssumptionError("relative sparsity violated: some style column is not strictly sparser than every content column")
        if enforce_eq4 and not partial_ok:
            raise AssumptionError("partially intersecting supports violated: a content/style column pair is nested")

    gcol = np.array([sum(1 << i for i in range(g.rows) if g.entries[i, j]) for j in range(dz)], dtype=np.int64)
    n_masks = 1 << dz
    or_table = np.zeros(n_masks, dtype=np.int64)
    for m in range(n_masks):
        acc = 0
        for k in range(dz):
            if m >> k & 1:
                acc |= int(gcol[k])
        or_table[m] = acc
    pc_table = _popcount(or_table)
    content_bits = (1 << dc) - 1
    style_bits = ((1 << dz) - 1) ^ content_bits

    def style_objective(masks):
        return pc_table[masks[:, dc:]].sum(axis=1)

    def overlap_objective(masks):
        cols = or_table[masks]
        out = np.zeros(masks.shape[0], dtype=np.int64)
        for jc in range(dc):
            for js in range(dc, dz):
                out += _popcount(cols[:, jc] & cols[:, js])
        return out

    if permutations_only:
        perms = np.array(list(itertools.permutations(range(dz))), dtype=np.int64)
        chunks = [(1 << perms).astype(np.int64)]
        n_candidates = len(perms)
    else:
        n_candidates = n_masks**dz
        radix = n_masks ** np.arange(dz, dtype=np.int64)

        def gen():
            for start in range(0, n_candidates, chunk_size):
                idx = np.arange(start, min(start + chunk_size, n_candidates), dtype=np.int64)
                yield (idx[:, None] // radix[None, :]) % n_masks

        chunks = gen()

    best = None
    minimisers: list[np.ndarray] = []
    for masks in chunks:
        ok = _matchable(masks, dz) if not permutations_only else np.ones(len(masks), dtype=bool)
        masks = masks[ok]
        if len(masks) == 0:
            continue
        key = style_objective(masks)
        if enforce_eq4:
            key = key * (dz * dz * p.d_x + 1) + overlap_objective(masks)
        kmin = int(key.min())
        if best is None or kmin < best:
            best = kmin
            minimisers = [masks[key == kmin]]
        elif kmin == best:
            minimisers.append(masks[key == kmin])

    if best is None:
        raise RuntimeError("no candidate transform admits a permutation witness")
    mins = np.concatenate(minimisers, axis=0)
    obj3 = int(style_objective(mins[:1])[0])
    # without enforce_eq4 these describe the style-sparsity minimisers only
    obj4 = int(overlap_objective(mins).min())
    upper_right_zero = bool(np.all((mins[:, dc:] & content_bits) == 0))
    lower_left_zero = bool(np.all((mins[:, :dc] & style_bits) == 0))
    witnesses = [_masks_to_support(row.tolist(), dz) for row in mins[:max_witnesses]]
    return TheoremReport(
        assumption_iii_holds=sparsity_ok,
        assumption2_holds=partial_ok,
        objective3_min=obj3,
        objective4_min=obj4,
        all_minimizers_block_zero_upper_right=upper_right_zero,
        all_minimizers_block_zero_lower_left=lower_left_zero,
        witness_minimizers=witnesses,
        n_minimizers=int(len(mins)),
        n_candidates=int(n_candidates),
        enforce_eq4=enforce_eq4,
    )
