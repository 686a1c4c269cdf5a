"""Generation quality metrics for sets of point clouds.

Per-pair distances
    * Chamfer: two-sided sum of squared nearest-neighbour distances.
    * EMD: minimum over bijections of the summed (unsquared) Euclidean
      distances. No division by the number of points.

Set-level scores compare a generated set ``S_g`` with a reference set ``S_r``:
JSD between voxelised point marginals, coverage (COV) and minimum matching
distance (MMD) under either per-pair distance.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .netcore import ContractViolation

__all__ = [
    "EXACT_EMD_LIMIT",
    "REPORT_SCHEMA",
    "CostGuardError",
    "EmdResult",
    "MetricsReport",
    "chamfer",
    "coverage",
    "emd",
    "emd_approx",
    "full_report",
    "jsd",
    "mmd",
    "pairwise_set_distances",
    "voxel_distribution",
]

EXACT_EMD_LIMIT = 512
BRUTE_FORCE_LIMIT = 512
LN2 = math.log(2.0)


class CostGuardError(ContractViolation):
    pass


def _as_cloud(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 or len(X) == 0:
        raise ContractViolation(f"expected a non-empty (n, 3) cloud, got shape {X.shape}")
    return X


def _sq_dist_matrix(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d0 = X[:, None, 0] - Y[None, :, 0]
    d1 = X[:, None, 1] - Y[None, :, 1]
    d2 = X[:, None, 2] - Y[None, :, 2]
    return d0 * d0 + d1 * d1 + d2 * d2


def _sq_rowwise(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = X - Y
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def _nn_sq(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Squared distance from each point of X to its nearest point of Y, via a k-d tree."""
    _, idx = cKDTree(Y).query(X)
    return _sq_rowwise(X, Y[idx])


def chamfer(X, Y, method: str = "auto") -> float:
    """``sum_x min_y |x-y|^2 + sum_y min_x |x-y|^2``.

    ``method`` is ``"brute"``, ``"kdtree"`` or ``"auto"`` (k-d tree once either
    cloud has more than 512 points).
    """
    X, Y = _as_cloud(X), _as_cloud(Y)
    if method == "auto":
        method = "kdtree" if max(len(X), len(Y)) > BRUTE_FORCE_LIMIT else "brute"
    if method == "brute":
        D = _sq_dist_matrix(X, Y)
        a, b = D.min(axis=1), D.min(axis=0)
    elif method == "kdtree":
        a, b = _nn_sq(X, Y), _nn_sq(Y, X)
    else:
        raise ContractViolation(f"unknown chamfer method {method!r}")
    return float(a.sum()) + float(b.sum())


def _emd_exact_cost(C: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].sum())


@dataclass(frozen=True)
class EmdResult:
    value: float
    lower_bound: float
    certified: bool
    rounds: int


def _auction(C: np.ndarray, rel_tol: float, max_rounds: int) -> EmdResult:
    """Epsilon-scaling Jacobi auction for the min-cost assignment ``C``.

    Each phase ends with a complete assignment; the prices give the dual
    bound ``sum_i min_j (C_ij + p_j) - sum_j p_j`` on the optimum, so the
    returned cost is certified once ``cost <= (1 + rel_tol) * bound``.
    """
    n = len(C)
    if n == 1:
        v = float(C[0, 0])
        return EmdResult(v, v, True, 0)
    scale = float(C.max())
    if scale <= 0:
        return EmdResult(0.0, 0.0, True, 0)
    benefit = -C
    prices = np.zeros(n)
    eps = scale / 4.0
    floor = scale * 1e-13
    rounds = 0
    best_cost, best_lb = math.inf, -math.inf
    arange = np.arange(n)
    while True:
        owner = np.full(n, -1)
        assigned = np.full(n, -1)
        while rounds < max_rounds:
            free = np.flatnonzero(assigned < 0)
            if free.size == 0:
                break
            rounds += 1
            vals = benefit[free] - prices
            r = np.arange(free.size)
            j1 = np.argmax(vals, axis=1)
            w1 = vals[r, j1]
            vals[r, j1] = -np.inf
            w2 = vals.max(axis=1)
            bids = prices[j1] + (w1 - w2) + eps
            order = np.lexsort((-bids, j1))
            objs_sorted = j1[order]
            first = np.ones(order.size, dtype=bool)
            first[1:] = objs_sorted[1:] != objs_sorted[:-1]
            win = order[first]
            objs = j1[win]
            prev = owner[objs]
            assigned[prev[prev >= 0]] = -1
            owner[objs] = free[win]
            assigned[free[win]] = objs
            prices[objs] = bids[win]
        if np.any(assigned < 0):
            break
        cost = float(C[arange, assigned].sum())
        lb = float(np.min(C + prices[None, :], axis=1).sum() - prices.sum())
        if cost < best_cost:
            best_cost = cost
        best_lb = max(best_lb, lb)
        gap = best_cost - best_lb
        if gap <= rel_tol * max(best_lb, 0.0) or gap <= floor * n:
            return EmdResult(best_cost, best_lb, True, rounds)
        if eps <= floor or rounds >= max_rounds:
            break
        eps = max(eps / 5.0, floor)
    if not math.isfinite(best_cost):
        # budget ran out before any complete assignment; fall back to a greedy one
        best_cost = _emd_exact_cost(C) if n <= EXACT_EMD_LIMIT else float(np.trace(C))
    return EmdResult(best_cost, best_lb, False, rounds)


def emd_approx(X, Y, rel_tol: float = 0.01, max_rounds: int = 200_000) -> EmdResult:
    """Approximate EMD with an optimality certificate (see :class:`EmdResult`)."""
    X, Y = _as_cloud(X), _as_cloud(Y)
    if len(X) != len(Y):
        raise ContractViolation(f"EMD needs equal sizes, got {len(X)} and {len(Y)}")
    return _auction(np.sqrt(_sq_dist_matrix(X, Y)), rel_tol, max_rounds)


def emd(X, Y, mode: str = "exact", force: bool = False, rel_tol: float = 0.01) -> float:
    """Earth mover's distance between equal-size clouds.

    ``mode="exact"`` solves the assignment problem and refuses clouds larger
    than 512 points unless ``force``; ``mode="approx"`` uses the certified
    auction solver with relative tolerance ``rel_tol``.
    """
    X, Y = _as_cloud(X), _as_cloud(Y)
    if len(X) != len(Y):
        raise ContractViolation(f"EMD needs equal sizes, got {len(X)} and {len(Y)}")
    if mode == "exact":
        if len(X) > EXACT_EMD_LIMIT and not force:
            raise CostGuardError(
                f"exact EMD on {len(X)} points exceeds the {EXACT_EMD_LIMIT}-point guard; "
                "use approximate mode or force"
            )
        return _emd_exact_cost(np.sqrt(_sq_dist_matrix(X, Y)))
    if mode == "approx":
        return emd_approx(X, Y, rel_tol).value
    raise ContractViolation(f"unknown EMD mode {mode!r}")


def _as_set(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 3 or S.shape[2] != 3 or S.shape[0] == 0 or S.shape[1] == 0:
        raise ContractViolation(f"expected a non-empty cloud set (m, n, 3), got {S.shape}")
    return S


def voxel_distribution(clouds, resolution: int = 28) -> tuple[np.ndarray, int]:
    """Occupancy masses over ``resolution**3`` cells spanning [-1, 1]^3.

    Returns ``(masses, n_clamped)``; points outside the cube are clamped onto
    it first. Cells are half-open except the last on each axis, which is
    closed at +1.
    """
    pts = np.asarray(clouds, dtype=np.float64).reshape(-1, 3)
    outside = np.any(np.abs(pts) > 1.0, axis=1)
    pts = np.clip(pts, -1.0, 1.0)
    idx = np.floor((pts + 1.0) * (resolution / 2.0)).astype(np.int64)
    np.minimum(idx, resolution - 1, out=idx)
    flat = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    counts = np.bincount(flat, minlength=resolution ** 3).astype(np.float64)
    return counts / counts.sum(), int(outside.sum())


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / m[nz])))


def jsd_from_masses(p_g: np.ndarray, p_r: np.ndarray) -> float:
    m = 0.5 * (p_r + p_g)
    value = 0.5 * _kl(p_r, m) + 0.5 * _kl(p_g, m)
    return min(max(value, 0.0), LN2)


def jsd(S_g, S_r, resolution: int = 28) -> float:
    """Jensen-Shannon divergence (natural log) of the pooled voxel occupancies."""
    p_g, _ = voxel_distribution(_as_set(S_g), resolution)
    p_r, _ = voxel_distribution(_as_set(S_r), resolution)
    return jsd_from_masses(p_g, p_r)


def pairwise_set_distances(S_g, S_r, dist: str = "cd", emd_mode: str = "exact",
                           force: bool = False, rel_tol: float = 0.01) -> np.ndarray:
    """Matrix ``D[i, j] = dist(S_g[i], S_r[j])``."""
    S_g, S_r = _as_set(S_g), _as_set(S_r)
    dist = dist.lower()
    D = np.empty((len(S_g), len(S_r)))
    if dist == "cd":
        for i, X in enumerate(S_g):
            for j, Y in enumerate(S_r):
                D[i, j] = chamfer(X, Y)
    elif dist == "emd":
        if S_g.shape[1] != S_r.shape[1]:
            raise ContractViolation("EMD needs generated and reference clouds of equal size")
        for i, X in enumerate(S_g):
            for j, Y in enumerate(S_r):
                D[i, j] = emd(X, Y, emd_mode, force=force, rel_tol=rel_tol)
    else:
        raise ContractViolation(f"unknown distance {dist!r}; expected 'cd' or 'emd'")
    return D


def _coverage_from(D: np.ndarray) -> float:
    # np.argmin returns the first (lowest) reference index on ties
    return len(np.unique(np.argmin(D, axis=1))) / D.shape[1]


def _mmd_from(D: np.ndarray) -> float:
    return float(np.mean(np.min(D, axis=0)))


def coverage(S_g, S_r, dist: str = "cd", **kw) -> float:
    """Fraction of reference clouds that are the nearest neighbour of some generated cloud."""
    return _coverage_from(pairwise_set_distances(S_g, S_r, dist, **kw))


def mmd(S_g, S_r, dist: str = "cd", **kw) -> float:
    """Mean over reference clouds of the distance to the closest generated cloud."""
    return _mmd_from(pairwise_set_distances(S_g, S_r, dist, **kw))


DISPLAY_SCALE = {"jsd": 10.0, "mmd_cd": 100.0, "mmd_emd": 10.0, "cov_cd": 100.0, "cov_emd": 100.0}


@dataclass
class MetricsReport:
    jsd: float
    mmd_cd: float
    mmd_emd: float
    cov_cd: float
    cov_emd: float
    provenance: dict = field(default_factory=dict)

    def raw(self) -> dict:
        return {k: getattr(self, k) for k in DISPLAY_SCALE}

    def display(self) -> dict:
        """Table-style values: JSD and MMD-EMD x10, MMD-CD x100, coverage in percent."""
        return {k: getattr(self, k) * s for k, s in DISPLAY_SCALE.items()}

    def to_dict(self) -> dict:
        return {"raw": self.raw(), "display": self.display(), "provenance": dict(self.provenance)}


_METRIC_KEYS = sorted(DISPLAY_SCALE)
REPORT_SCHEMA = {
    "type": "object",
    "required": ["raw", "display", "provenance"],
    "additionalProperties": False,
    "properties": {
        "raw": {
            "type": "object",
            "required": _METRIC_KEYS,
            "additionalProperties": False,
            "properties": {
                "jsd": {"type": "number", "minimum": 0, "maximum": LN2},
                "mmd_cd": {"type": "number", "minimum": 0},
                "mmd_emd": {"type": "number", "minimum": 0},
                "cov_cd": {"type": "number", "minimum": 0, "maximum": 1},
                "cov_emd": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "display": {
            "type": "object",
            "required": _METRIC_KEYS,
            "properties": {k: {"type": "number"} for k in _METRIC_KEYS},
        },
        "provenance": {
            "type": "object",
            "required": ["emd_mode", "resolution", "clamped_generated", "clamped_reference",
                         "n_generated", "n_reference", "n_points", "wall_time"],
        },
    },
}


def full_report(S_g, S_r, emd_mode: str = "auto", resolution: int = 28, force: bool = False,
                rel_tol: float = 0.01) -> MetricsReport:
    """All five scores for ``S_g`` against ``S_r``.

    ``emd_mode="auto"`` picks exact EMD up to 512 points and the approximate
    solver above that.
    """
    t0 = time.perf_counter()
    S_g, S_r = _as_set(S_g), _as_set(S_r)
    if S_g.shape[1] != S_r.shape[1]:
        raise ContractViolation(
            f"generated clouds have {S_g.shape[1]} points, reference clouds {S_r.shape[1]}"
        )
    n = S_g.shape[1]
    mode = ("exact" if n <= EXACT_EMD_LIMIT else "approx") if emd_mode == "auto" else emd_mode
    p_g, clamped_g = voxel_distribution(S_g, resolution)
    p_r, clamped_r = voxel_distribution(S_r, resolution)
    D_cd = pairwise_set_distances(S_g, S_r, "cd")
    D_emd = pairwise_set_distances(S_g, S_r, "emd", emd_mode=mode, force=force, rel_tol=rel_tol)
    provenance = {
        "emd_mode": mode,
        "emd_rel_tol": rel_tol if mode == "approx" else None,
        "resolution": resolution,
        "clamped_generated": clamped_g,
        "clamped_reference": clamped_r,
        "n_generated": len(S_g),
        "n_reference": len(S_r),
        "n_points": n,
        "cd": "two-sided sum of squared nearest-neighbour distances",
        "emd_normalization": "none (raw sum over points)",
        "coverage_ties": "lowest reference index",
        "log_base": "e",
    }
    report = MetricsReport(
        jsd=jsd_from_masses(p_g, p_r),
        mmd_cd=_mmd_from(D_cd),
        mmd_emd=_mmd_from(D_emd),
        cov_cd=_coverage_from(D_cd),
        cov_emd=_coverage_from(D_emd),
        provenance=provenance,
    )
    report.provenance["wall_time"] = time.perf_counter() - t0
    return report
