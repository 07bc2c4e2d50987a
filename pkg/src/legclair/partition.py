"""Velocity-Hessian rank analysis and the regular/nonregular index split.

For a Lagrangian L(q, v) the velocity Hessian W = d2L/dv dv decides which
velocities the Legendre map can invert.  This module samples W over the
declared domain box, insists its rank (and inertia) is constant, and picks a
maximal nonsingular principal block W11.  Indices in that block are the
*regular* velocities; the rest stay unresolved downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import Expression, eval_dual2, parse

__all__ = [
    "LagrangianSystem",
    "HessianPartition",
    "RankNotConstantError",
    "NoValidMinorError",
    "qv_names",
    "hessian",
    "numerical_rank",
    "partition_indices",
]

DEFAULT_RANK_TOL = 1e-9
DEFAULT_SAMPLES = 64


class RankNotConstantError(Exception):
    """W's rank or inertia differs between two sampled domain points."""

    def __init__(self, message, point_a, point_b):
        super().__init__(message)
        self.point_a = np.asarray(point_a, dtype=float)
        self.point_b = np.asarray(point_b, dtype=float)


class NoValidMinorError(Exception):
    """No index choice keeps W11 nonsingular at every sampled point."""


def qv_names(n: int) -> tuple[str, ...]:
    """Canonical variable table for an n-dof Lagrangian: q1..qn, v1..vn."""
    return tuple(f"q{i + 1}" for i in range(n)) + tuple(
        f"v{i + 1}" for i in range(n)
    )


@dataclass
class LagrangianSystem:
    """A Lagrangian, its sampling box, and (optionally) a gauge.

    ``domain_lo``/``domain_hi`` are aligned with the variable table
    (q1..qn, v1..vn); every interval must have positive width.  ``gauge``
    holds the unresolved-velocity expressions C2 over q once a partition is
    known; it is not needed for the transform itself.
    """

    n: int
    lagrangian: Expression
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    gauge: tuple[Expression, ...] | None = None

    def __post_init__(self):
        names = qv_names(self.n)
        if self.lagrangian.variables != names:
            raise ValueError(
                f"lagrangian must use the variable table {names}, "
                f"got {self.lagrangian.variables}"
            )
        self.domain_lo = np.asarray(self.domain_lo, dtype=float)
        self.domain_hi = np.asarray(self.domain_hi, dtype=float)
        if self.domain_lo.shape != (2 * self.n,) or self.domain_hi.shape != (
            2 * self.n,
        ):
            raise ValueError("domain bounds must each have one entry per variable")
        if not np.all(self.domain_lo < self.domain_hi):
            raise ValueError("every domain interval needs lo < hi")

    @classmethod
    def from_source(cls, n: int, source: str, domain: dict | None = None,
                    default_bounds=(-2.0, 2.0)) -> "LagrangianSystem":
        """Build from Lagrangian source text and a {name: (lo, hi)} box."""
        names = qv_names(n)
        lag = parse(source, names)
        domain = dict(domain or {})
        lo = np.empty(2 * n)
        hi = np.empty(2 * n)
        for i, name in enumerate(names):
            lo[i], hi[i] = domain.pop(name, default_bounds)
        if domain:
            raise ValueError(f"domain mentions unknown variables {sorted(domain)}")
        return cls(n, lag, lo, hi)

    def center(self) -> np.ndarray:
        return 0.5 * (self.domain_lo + self.domain_hi)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Uniform (count, 2n) samples of (q, v) in the box."""
        return rng.uniform(self.domain_lo, self.domain_hi, size=(count, 2 * self.n))

    def point(self, q, v) -> np.ndarray:
        return np.concatenate([np.asarray(q, float), np.asarray(v, float)])


@dataclass(frozen=True)
class HessianPartition:
    """Index bookkeeping for the split of velocities into v1 (regular) / v2.

    ``sigma`` is the permutation (regular indices ascending, then nonregular
    ascending): applying it to W's rows and columns puts the certified
    nonsingular k x k block in the top-left corner.
    """

    k: int
    sigma: tuple[int, ...]
    regular: tuple[int, ...]
    nonregular: tuple[int, ...]
    rank_tolerance: float
    samples_checked: int


def hessian(system: LagrangianSystem, q, v) -> np.ndarray:
    """Velocity Hessian W(q, v) = d2L/dv dv, exact and symmetric."""
    x = system.point(q, v)
    active = range(system.n, 2 * system.n)
    return eval_dual2(system.lagrangian, x, active).hess


def numerical_rank(matrix, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above rel_tol times the largest.

    Total on every square matrix; an all-zero matrix has rank 0.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    if matrix.shape[0] == 0:
        return 0
    sv = np.linalg.svd(matrix, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > rel_tol * sv[0]))


def _inertia(w: np.ndarray, rel_tol: float) -> tuple[int, int]:
    """(positive, negative) eigenvalue counts above the relative cutoff."""
    eig = np.linalg.eigvalsh(w)
    scale = float(np.max(np.abs(eig))) if eig.size else 0.0
    if scale == 0.0:
        return (0, 0)
    cut = rel_tol * scale
    return (int(np.count_nonzero(eig > cut)), int(np.count_nonzero(eig < -cut)))


def _smallest_singular_value(matrix: np.ndarray) -> float:
    sv = np.linalg.svd(matrix, compute_uv=False)
    return float(sv[-1])


def partition_indices(
    system: LagrangianSystem,
    num_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    rel_tol: float = DEFAULT_RANK_TOL,
) -> HessianPartition:
    """Sample W over the box and choose the regular index set.

    The rank must be identical at every sample, and so must the inertia
    signature: a sign flip of some eigenvalue between two samples proves (by
    continuity) that it crosses zero inside the box even when no sample lands
    exactly on the crossing, so borderline systems are rejected rather than
    silently partitioned.  Regular indices are grown greedily on the
    sample-averaged Hessian, each step taking the candidate that maximizes
    the smallest singular value of the block (ties to the lowest index), and
    the final block is re-checked for nonsingularity at every sample.
    """
    if num_samples < 2:
        raise ValueError("need at least two samples to certify constancy")
    rng = np.random.default_rng(seed)
    points = system.sample(rng, num_samples)
    n = system.n

    hessians = np.empty((num_samples, n, n))
    ranks = np.empty(num_samples, dtype=int)
    signatures = []
    for s, x in enumerate(points):
        w = eval_dual2(system.lagrangian, x, range(n, 2 * n)).hess
        hessians[s] = w
        ranks[s] = numerical_rank(w, rel_tol)
        signatures.append(_inertia(w, rel_tol))

    for s in range(1, num_samples):
        if ranks[s] != ranks[0]:
            raise RankNotConstantError(
                f"Hessian rank is not constant over the domain: rank {ranks[0]} "
                f"at (q, v) = {points[0].tolist()} but rank {ranks[s]} at "
                f"(q, v) = {points[s].tolist()}",
                points[0],
                points[s],
            )
        if signatures[s] != signatures[0]:
            raise RankNotConstantError(
                "Hessian inertia is not constant over the domain (an eigenvalue "
                f"crosses zero inside the box): signature {signatures[0]} at "
                f"(q, v) = {points[0].tolist()} but {signatures[s]} at "
                f"(q, v) = {points[s].tolist()}",
                points[0],
                points[s],
            )

    k = int(ranks[0])
    mean_w = hessians.mean(axis=0)

    chosen: list[int] = []
    for _ in range(k):
        best_j = -1
        best_s = -np.inf
        for j in range(n):
            if j in chosen:
                continue
            idx = chosen + [j]
            s_min = _smallest_singular_value(mean_w[np.ix_(idx, idx)])
            if s_min > best_s:
                best_j, best_s = j, s_min
        chosen.append(best_j)

    regular = tuple(sorted(chosen))
    nonregular = tuple(i for i in range(n) if i not in regular)

    if k > 0:
        reg = np.array(regular)
        for s in range(num_samples):
            w = hessians[s]
            block = w[np.ix_(reg, reg)]
            scale = float(np.linalg.svd(w, compute_uv=False)[0])
            if _smallest_singular_value(block) <= rel_tol * scale:
                raise NoValidMinorError(
                    f"the k x k block on indices {regular} is singular at "
                    f"(q, v) = {points[s].tolist()} although the sampled rank "
                    f"is {k}; no valid minor found"
                )

    return HessianPartition(
        k=k,
        sigma=regular + nonregular,
        regular=regular,
        nonregular=nonregular,
        rank_tolerance=rel_tol,
        samples_checked=num_samples,
    )
