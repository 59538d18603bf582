"""Robust Levenberg-Marquardt over batched residual blocks, plus a generic RANSAC.

A problem is a dict of named :class:`ParameterGroup` objects (an ``(n, k)``
array each, with ``euclidean`` or ``pose`` update rule) and a list of
:class:`ResidualBlock` objects. A block holds ``N`` residuals of the same
type; residual ``i`` reads row ``indices[s][i]`` of group ``groups[s]`` for
every slot ``s``. Evaluation is vectorized over ``N``.

Pose rows are ``(axis-angle, translation)`` of a world->frame transform and
are updated as ``R <- exp(d_rot) R``, ``t <- t + d_t``; Jacobians of pose
slots are taken with respect to that perturbation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from .errors import BadInitialization, NoModelFound, Unsolvable
from .geometry import rodrigues_exp

log = logging.getLogger(__name__)

__all__ = [
    "ParameterGroup",
    "ResidualBlock",
    "SolveReport",
    "huber",
    "lm_solve",
    "total_cost",
    "jacobian_check",
    "ransac",
    "pose_plus",
]


def huber(e, delta: float):
    """``e**2`` inside ``|e| <= delta``, ``2*delta*|e| - delta**2`` outside."""
    a = np.abs(e)
    return np.where(a <= delta, a * a, 2.0 * delta * a - delta * delta)


def pose_plus(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Apply local pose increments ``d`` (n, 6) to pose rows ``x`` (n, 6)."""
    x = np.atleast_2d(x)
    d = np.atleast_2d(d)
    R = rodrigues_exp(d[:, :3]) @ rodrigues_exp(x[:, :3])
    out = np.empty_like(x)
    out[:, :3] = Rotation.from_matrix(R).as_rotvec()
    out[:, 3:] = x[:, 3:] + d[:, 3:]
    return out


@dataclass
class ParameterGroup:
    values: np.ndarray
    manifold: str = "euclidean"
    constant: Optional[np.ndarray] = None  # (n,) bool, whole row held fixed
    frozen: Optional[np.ndarray] = None  # (n, k) bool, single local coordinates held fixed

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float, ndmin=2)
        n, k = self.values.shape
        if self.manifold not in ("euclidean", "pose"):
            raise ValueError(f"unknown manifold {self.manifold!r}")
        if self.manifold == "pose" and k != 6:
            raise ValueError("pose groups need 6 columns")
        self.constant = np.zeros(n, bool) if self.constant is None else np.asarray(self.constant, bool).copy()
        self.frozen = np.zeros((n, k), bool) if self.frozen is None else np.asarray(self.frozen, bool).copy()

    @property
    def active(self) -> np.ndarray:
        return ~(self.frozen | self.constant[:, None])

    def plus(self, rows: np.ndarray, d: np.ndarray) -> np.ndarray:
        if self.manifold == "pose":
            return pose_plus(self.values[rows], d)
        return self.values[rows] + d

    def copy(self) -> "ParameterGroup":
        return ParameterGroup(self.values.copy(), self.manifold, self.constant, self.frozen)


Evaluator = Callable[[list, bool], tuple]


@dataclass
class ResidualBlock:
    """Batch of same-type residuals.

    ``evaluate(values, want_jacobians)`` receives one ``(N, k_s)`` array per
    slot and returns ``(r, jacs)`` with ``r`` of shape ``(N, dim)`` and
    ``jacs`` a list of ``(N, dim, k_s)`` arrays (or ``None``).
    """

    groups: tuple
    indices: tuple
    dim: int
    evaluate: Evaluator
    loss: Optional[float] = None  # Huber delta, None = plain squares
    weight: float = 1.0
    name: str = "block"

    def __post_init__(self):
        self.groups = tuple(self.groups)
        self.indices = tuple(np.asarray(i, dtype=np.int64).reshape(-1) for i in self.indices)
        if len(self.groups) != len(self.indices):
            raise ValueError("one index array per slot is required")
        if self.weight < 0:
            raise ValueError("weight must be non-negative")

    def __len__(self) -> int:
        return len(self.indices[0]) if self.indices else 0

    def gather(self, params: dict) -> list:
        return [params[g].values[idx] for g, idx in zip(self.groups, self.indices)]


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str  # converged | max-iter | stalled
    cost_history: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.termination in ("converged", "max-iter")


def _block_cost(block: ResidualBlock, r: np.ndarray) -> np.ndarray:
    s2 = block.weight * np.einsum("ij,ij->i", r, r)
    if block.loss is None:
        return s2
    return huber(np.sqrt(s2), block.loss)


def total_cost(blocks: Sequence[ResidualBlock], params: dict) -> float:
    """Sum of (robustified, weighted) squared residual norms."""
    c = 0.0
    for b in blocks:
        if len(b) == 0 or b.weight == 0:
            continue
        r, _ = b.evaluate(b.gather(params), False)
        c += float(_block_cost(b, r).sum())
    return c


def _column_map(params: dict):
    cols = {}
    n = 0
    for name, g in params.items():
        m = np.full(g.values.shape, -1, dtype=np.int64)
        act = g.active
        cnt = int(act.sum())
        m[act] = np.arange(n, n + cnt)
        cols[name] = m
        n += cnt
    return cols, n


def _linearize(blocks, params, cols, ncols):
    rows_all, cols_all, vals_all, res_all = [], [], [], []
    row0 = 0
    cost = 0.0
    for b in blocks:
        N = len(b)
        if N == 0 or b.weight == 0:
            continue
        r, jacs = b.evaluate(b.gather(params), True)
        s2 = b.weight * np.einsum("ij,ij->i", r, r)
        if b.loss is None:
            w = np.full(N, b.weight)
            cost += float(s2.sum())
        else:
            s = np.sqrt(s2)
            cost += float(huber(s, b.loss).sum())
            w = b.weight * np.where(s <= b.loss, 1.0, b.loss / np.maximum(s, 1e-300))
        sw = np.sqrt(w)
        res_all.append((r * sw[:, None]).ravel())
        ridx = row0 + np.arange(N * b.dim).reshape(N, b.dim)
        for g, idx, J in zip(b.groups, b.indices, jacs):
            k = J.shape[2]
            c = cols[g][idx]  # (N, k)
            Jw = J * sw[:, None, None]
            R = np.broadcast_to(ridx[:, :, None], (N, b.dim, k))
            C = np.broadcast_to(c[:, None, :], (N, b.dim, k))
            keep = C >= 0
            rows_all.append(R[keep])
            cols_all.append(C[keep])
            vals_all.append(Jw[keep])
        row0 += N * b.dim
    if row0 == 0:
        return sp.csr_matrix((0, ncols)), np.zeros(0), cost
    J = sp.csr_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))), shape=(row0, ncols)
    )
    return J, np.concatenate(res_all), cost


def _apply_step(params: dict, cols: dict, delta: np.ndarray) -> dict:
    out = {}
    for name, g in params.items():
        m = cols[name]
        rows = np.nonzero((m >= 0).any(axis=1))[0]
        if len(rows) == 0:
            out[name] = g
            continue
        d = np.zeros((len(rows), g.values.shape[1]))
        mm = m[rows]
        d[mm >= 0] = delta[mm[mm >= 0]]
        new = g.copy()
        new.values[rows] = g.plus(rows, d)
        out[name] = new
    return out


def _param_norm(params: dict) -> float:
    return float(np.sqrt(sum(float((g.values[g.active] ** 2).sum()) for g in params.values())))


class _SchurSystem:
    """Damped normal equations with the trailing block-diagonal part eliminated."""

    def __init__(self, A, g, nc: int, k: int):
        A = A.tocsr()
        self.nc, self.k = nc, k
        self.Acc = A[:nc, :nc].toarray()
        self.B = A[:nc, nc:].tocsr()
        C = A[nc:, nc:].tocoo()
        m = C.shape[0] // k
        blocks = np.zeros((m, k, k))
        same = C.row // k == C.col // k
        blocks[C.row[same] // k, C.row[same] % k, C.col[same] % k] = C.data[same]
        self.C = blocks
        self.gc, self.gp = g[:nc], g[nc:].reshape(m, k)

    def solve(self, damping: np.ndarray) -> np.ndarray:
        nc, k = self.nc, self.k
        Cd = self.C.copy()
        idx = np.arange(k)
        Cd[:, idx, idx] += damping[nc:].reshape(-1, k)
        Cinv = np.linalg.inv(Cd)
        m = len(Cinv)
        Ci = sp.bsr_matrix((Cinv, np.arange(m), np.arange(m + 1)), shape=(m * k, m * k)).tocsr()
        BCi = self.B @ Ci
        S = self.Acc + np.diag(damping[:nc]) - (BCi @ self.B.T).toarray()
        rhs = -self.gc + BCi @ self.gp.ravel()
        dc = np.linalg.solve(S, rhs) if nc else np.zeros(0)
        dp = np.einsum("nij,nj->ni", Cinv, -self.gp - (self.B.T @ dc).reshape(m, k))
        return np.r_[dc, dp.ravel()]


def lm_solve(
    blocks: Sequence[ResidualBlock],
    params: dict,
    *,
    max_iterations: int = 200,
    function_tolerance: float = 1e-10,
    gradient_tolerance: float = 1e-10,
    parameter_tolerance: float = 1e-12,
    initial_damping: float = 1e-4,
    max_damping: float = 1e16,
    dense_limit: int = 400,
    eliminate: Optional[str] = None,
) -> tuple[dict, SolveReport]:
    """Minimize the total block cost with damped Gauss-Newton steps.

    Returns new parameter groups (inputs are left untouched) and a report.
    Huber losses enter through iteratively reweighted normal equations.
    ``eliminate`` names a fully active Euclidean group whose rows never share
    a residual (e.g. BA landmarks); it is removed by a Schur complement.
    """
    blocks = [b for b in blocks if len(b) > 0]
    if eliminate is not None:
        g = params[eliminate]
        if g.manifold != "euclidean" or not g.active.all() or any(
            sum(grp == eliminate for grp in b.groups) > 1 for b in blocks
        ):
            raise ValueError(f"group {eliminate!r} cannot be eliminated")
        params = {k: v for k, v in params.items() if k != eliminate} | {eliminate: g}
    cols, ncols = _column_map(params)
    n_elim = params[eliminate].values.size if eliminate is not None else 0
    J, r, cost = _linearize(blocks, params, cols, ncols)
    if not np.isfinite(cost) or not np.all(np.isfinite(r)):
        raise BadInitialization("non-finite residual at the initial point")
    report = SolveReport(cost, cost, 0, "converged", [cost])
    if ncols == 0:
        return params, report
    mu = initial_damping
    ever_solved = False
    it = 0
    while True:
        g = J.T @ r
        if cost == 0.0 or np.abs(g).max(initial=0.0) < gradient_tolerance:
            report.termination = "converged"
            break
        if it >= max_iterations:
            report.termination = "max-iter"
            break
        A = (J.T @ J).tocsc()
        diag = A.diagonal()
        D = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
        x_norm = _param_norm(params)
        schur = _SchurSystem(A, g, ncols - n_elim, params[eliminate].values.shape[1]) if n_elim else None
        accepted = False
        while mu <= max_damping:
            try:
                if schur is not None:
                    delta = schur.solve(mu * D)
                elif ncols <= dense_limit:
                    M = A + sp.diags(mu * D, format="csc")
                    delta = np.linalg.solve(M.toarray(), -g)
                else:
                    M = A + sp.diags(mu * D, format="csc")
                    delta = spla.spsolve(M, -g)
            except (np.linalg.LinAlgError, RuntimeError):
                delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                mu *= 10.0
                continue
            ever_solved = True
            if np.linalg.norm(delta) <= parameter_tolerance * (x_norm + parameter_tolerance):
                break
            trial = _apply_step(params, cols, delta)
            new_cost = total_cost(blocks, trial)
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            if not ever_solved:
                raise Unsolvable("normal equations singular at maximum damping")
            report.termination = "stalled" if mu > max_damping else "converged"
            break
        it += 1
        rel = (cost - new_cost) / cost
        params = trial
        cost = new_cost
        report.cost_history.append(cost)
        mu = max(mu * 0.5, 1e-15)
        if rel < function_tolerance:
            report.termination = "converged"
            break
        J, r, cost_lin = _linearize(blocks, params, cols, ncols)
    report.final_cost = cost
    report.iterations = it
    log.debug("lm: %.6g -> %.6g in %d its (%s)", report.initial_cost, cost, it, report.termination)
    return params, report


def _perturb(values: np.ndarray, manifold: str, j: int, h: float) -> np.ndarray:
    d = np.zeros_like(values)
    d[:, j] = h
    if manifold == "pose":
        return pose_plus(values, d)
    return values + d


def jacobian_check(block: ResidualBlock, params: dict, rel_step: float = 1e-6) -> float:
    """Max relative deviation between analytic and central-difference Jacobians."""
    vals = block.gather(params)
    _, jacs = block.evaluate(vals, True)
    worst = 0.0
    for s, (g, J) in enumerate(zip(block.groups, jacs)):
        manifold = params[g].manifold
        for j in range(J.shape[2]):
            scale = 1.0 if manifold == "pose" else max(1.0, float(np.abs(vals[s][:, j]).max()))
            h = rel_step * scale
            vp = list(vals)
            vm = list(vals)
            vp[s] = _perturb(vals[s], manifold, j, h)
            vm[s] = _perturb(vals[s], manifold, j, -h)
            rp, _ = block.evaluate(vp, False)
            rm, _ = block.evaluate(vm, False)
            fd = (rp - rm) / (2 * h)
            dev = np.abs(J[:, :, j] - fd) / np.maximum(1.0, np.abs(fd))
            worst = max(worst, float(dev.max(initial=0.0)))
    return worst


def ransac(
    data,
    minimal_fit: Callable,
    score: Callable,
    *,
    sample_size: int,
    seed: int = 0,
    max_iters: int = 1000,
    inlier_threshold: float = 0.01,
    degeneracy_check: Optional[Callable] = None,
    confidence: Optional[float] = None,
):
    """Hypothesize-and-verify robust estimation.

    ``minimal_fit(sample)`` returns a model or ``None`` for a degenerate
    sample. ``score(model, data)`` returns per-item non-negative residuals.
    ``degeneracy_check(model, data, residuals)`` returns False to discard a
    hypothesis before scoring. With ``confidence`` set, iterations stop early
    using the usual inlier-ratio bound; the stopping point still depends only
    on the seed.

    Returns ``(model, inlier_mask)``.
    """
    n = len(data)
    if n < sample_size:
        raise NoModelFound(f"need at least {sample_size} items, got {n}")
    rng = np.random.default_rng(seed)
    best = None
    best_key = None
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        it += 1
        idx = rng.choice(n, size=sample_size, replace=False)
        model = minimal_fit(data[idx])
        if model is None:
            continue
        res = np.asarray(score(model, data), dtype=float)
        if degeneracy_check is not None and not degeneracy_check(model, data, res):
            continue
        mask = res <= inlier_threshold
        cnt = int(mask.sum())
        mean_res = float(res[mask].mean()) if cnt else np.inf
        key = (cnt, -mean_res)
        if best_key is None or key > best_key:
            best_key = key
            best = (model, mask)
            if confidence is not None and cnt > 0:
                w = cnt / n
                p_good = w**sample_size
                if p_good >= 1.0:
                    needed = it
                elif p_good > 0:
                    needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - p_good)))
    if best is None:
        raise NoModelFound("no admissible hypothesis")
    return best
