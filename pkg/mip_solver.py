"""
L0 selection program over slab constraints:

    minimize sum(z)  s.t.  |xi_i - gamma_i delta| <= M z_i + t,  z in {0,1}^p

solved by best-first branch-and-bound on the LP relaxation (HiGHS via
scipy.optimize.linprog), plus an exact enumeration oracle for q <= 2.
"""

import heapq
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel
from scipy.optimize import linprog

from errors import ConvergenceFailure, Infeasible, IoError, UnsupportedDimension, require
from settings import get_settings

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9
INTEGRALITY_TOL = 1e-9
LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}

FREE = -1


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    FEASIBLE_TIME_LIMIT = "FeasibleTimeLimit"


@dataclass(frozen=True)
class MipProblem:
    xi: np.ndarray
    gamma: np.ndarray
    t: float
    M: float

    @property
    def p(self) -> int:
        return self.xi.shape[0]

    @property
    def q(self) -> int:
        return self.gamma.shape[1]


@dataclass
class MipSolution:
    z: np.ndarray
    delta: np.ndarray
    objective: int
    status: SolveStatus
    nodes_explored: int = 0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "z": self.z.astype(int).tolist(),
            "delta": self.delta.tolist(),
            "objective": int(self.objective),
            "status": self.status.value,
            "nodes_explored": self.nodes_explored,
            "diagnostics": self.diagnostics,
        }


@dataclass
class LpRelaxation:
    bound: float
    z_frac: np.ndarray
    delta: np.ndarray


class SolverLimits(BaseModel):
    max_nodes: int = 1_000_000
    time_budget: float = 60.0

    @classmethod
    def from_settings(cls) -> "SolverLimits":
        settings = get_settings()
        return cls(max_nodes=settings.mip_max_nodes, time_budget=settings.mip_time_budget)


class MipProblemFile(BaseModel):
    """JSON form of a problem: {"xi": [...], "gamma": [[...]], "t": ..., "M": ...}."""

    xi: List[float]
    gamma: List[List[float]]
    t: float
    M: float


def build_mip(xi, gamma, t: float, M: float) -> MipProblem:
    xi = np.asarray(xi, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 1:
        gamma = gamma.reshape(-1, 1)
    require(xi.ndim == 1 and xi.size >= 1, f"xi must be a non-empty vector, got shape {xi.shape}")
    require(gamma.ndim == 2 and gamma.shape[0] == xi.size, f"gamma must have {xi.size} rows, got shape {gamma.shape}")
    require(np.all(np.isfinite(xi)) and np.all(np.isfinite(gamma)), "xi and gamma must be finite")
    require(t >= 0, f"threshold t must be non-negative, got {t}")
    require(M > 0, f"box bound M must be positive, got {M}")
    return MipProblem(xi=xi, gamma=gamma, t=float(t), M=float(M))


def load_problem(path) -> MipProblem:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"failed to read problem file {path}: {e}") from e
    data = MipProblemFile.model_validate_json(text)
    gamma = np.asarray(data.gamma, dtype=float)
    if gamma.size == 0:
        gamma = np.zeros((len(data.xi), 0))
    return build_mip(data.xi, gamma, data.t, data.M)


def dump_problem(prob: MipProblem) -> str:
    return json.dumps({"xi": prob.xi.tolist(), "gamma": prob.gamma.tolist(), "t": prob.t, "M": prob.M})


def _residuals(prob: MipProblem, delta: np.ndarray) -> np.ndarray:
    return prob.xi - prob.gamma @ delta


def is_feasible(prob: MipProblem, z: np.ndarray, delta: np.ndarray, tol: float = FEAS_TOL) -> bool:
    """True when every slab constraint |xi_i - gamma_i delta| <= M z_i + t holds."""
    r = np.abs(_residuals(prob, delta))
    return bool(np.all(r <= prob.M * z + prob.t + tol))


def _round(prob: MipProblem, delta: np.ndarray) -> Optional[np.ndarray]:
    # Cheapest z for a fixed delta, or None when some row is out of reach even with z_i = 1.
    r = np.abs(_residuals(prob, delta))
    if np.any(r > prob.M + prob.t + FEAS_TOL):
        return None
    return (r > prob.t + FEAS_TOL).astype(int)


def lp_relax(prob: MipProblem, fixed: Optional[np.ndarray] = None) -> LpRelaxation:
    """
    LP relaxation with z_j in [0, 1] for free coordinates and z_j pinned where
    fixed[j] is 0 or 1 (FREE = -1 leaves it free). Raises Infeasible when the
    pinned zeros cannot be satisfied together.
    """
    p, q = prob.p, prob.q
    if fixed is None:
        fixed = np.full(p, FREE)

    eye_m = prob.M * np.eye(p)
    A_ub = np.block([[-prob.gamma, -eye_m], [prob.gamma, -eye_m]])
    b_ub = np.concatenate([prob.t - prob.xi, prob.t + prob.xi])
    c = np.concatenate([np.zeros(q), np.ones(p)])
    bounds = [(None, None)] * q + [(0.0, 1.0) if v == FREE else (float(v), float(v)) for v in fixed]

    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs", options=LP_OPTIONS)
    if res.status == 2:
        raise Infeasible("LP relaxation is infeasible for the fixed assignment")
    if res.status != 0:
        raise ConvergenceFailure(f"LP relaxation failed: {res.message}")
    return LpRelaxation(bound=float(res.fun), z_frac=res.x[q:], delta=res.x[:q])


def _chebyshev_delta(prob: MipProblem, z: np.ndarray) -> Optional[np.ndarray]:
    """Minimax delta over the rows with z_i = 0, keeping the other rows within M + t."""
    q = prob.q
    zero = z == 0
    if np.count_nonzero(zero) <= q:
        return None
    g0, x0 = prob.gamma[zero], prob.xi[zero]
    g1, x1 = prob.gamma[~zero], prob.xi[~zero]
    ones0 = np.ones((g0.shape[0], 1))
    reach = prob.M + prob.t
    A_ub = np.vstack([
        np.hstack([-g0, -ones0]),
        np.hstack([g0, -ones0]),
        np.hstack([-g1, np.zeros((g1.shape[0], 1))]),
        np.hstack([g1, np.zeros((g1.shape[0], 1))]),
    ])
    b_ub = np.concatenate([-x0, x0, reach - x1, reach + x1])
    c = np.zeros(q + 1)
    c[-1] = 1.0
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * q + [(0.0, None)],
                  method="highs", options=LP_OPTIONS)
    if res.status != 0:
        return None
    return res.x[:q]


def _heuristic_delta(prob: MipProblem) -> List[np.ndarray]:
    # Least squares on all rows, then again on the ceil((p+q)/2) best-fitting rows.
    delta_ls, *_ = np.linalg.lstsq(prob.gamma, prob.xi, rcond=None)
    h = min(prob.p, math.ceil((prob.p + prob.q) / 2))
    rows = np.argsort(np.abs(_residuals(prob, delta_ls)), kind="stable")[:h]
    delta_h, *_ = np.linalg.lstsq(prob.gamma[rows], prob.xi[rows], rcond=None)
    return [delta_h, delta_ls]


def _most_fractional(z_frac: np.ndarray, fixed: np.ndarray) -> Optional[int]:
    frac = np.minimum(z_frac, 1.0 - z_frac)
    frac[fixed != FREE] = -1.0
    j = int(np.argmax(frac))
    return j if frac[j] > INTEGRALITY_TOL else None


def _solve_without_factors(prob: MipProblem) -> MipSolution:
    z = _round(prob, np.zeros(0))
    if z is None:
        raise Infeasible("some |xi_i| exceeds M + t with no confounding directions")
    return MipSolution(z=z, delta=np.zeros(0), objective=int(z.sum()), status=SolveStatus.OPTIMAL)


def solve_bnb(prob: MipProblem, limits: Optional[SolverLimits] = None) -> MipSolution:
    """
    Best-first branch-and-bound over z. Branches on the most fractional free
    z_j (ties to the lowest index), exploring z_j = 1 before z_j = 0. Every LP
    delta is rounded into a feasible incumbent. Returns the proven optimum, or
    the incumbent with FeasibleTimeLimit when a node or time limit is hit.
    The returned delta is the minimax fit over the rows kept at z = 0.
    """
    limits = limits or SolverLimits()
    if prob.q == 0:
        return _solve_without_factors(prob)

    start = time.perf_counter()
    best_z: Optional[np.ndarray] = None
    best_delta: Optional[np.ndarray] = None

    def offer(delta: np.ndarray) -> None:
        nonlocal best_z, best_delta
        z = _round(prob, delta)
        if z is not None and (best_z is None or z.sum() < best_z.sum()):
            best_z, best_delta = z, np.array(delta, dtype=float)

    def prunable(bound: float) -> bool:
        return best_z is not None and math.ceil(bound - 1e-9) >= best_z.sum()

    for delta in _heuristic_delta(prob):
        offer(delta)
    heuristic_objective = None if best_z is None else int(best_z.sum())

    root_fixed = np.full(prob.p, FREE)
    root = lp_relax(prob, root_fixed)
    offer(root.delta)

    counter = itertools.count()
    heap = [(root.bound, next(counter), root_fixed, root)]
    nodes = 0
    status = SolveStatus.OPTIMAL
    while heap:
        if nodes >= limits.max_nodes or time.perf_counter() - start > limits.time_budget:
            status = SolveStatus.FEASIBLE_TIME_LIMIT
            break
        bound, _, fixed, lp = heapq.heappop(heap)
        if prunable(bound):
            continue
        nodes += 1

        j = _most_fractional(lp.z_frac, fixed)
        if j is None:
            # z is integral at the LP optimum; its delta rounds to an objective <= bound
            offer(lp.delta)
            if prunable(bound):
                continue
            slack = np.abs(_residuals(prob, lp.delta)) - prob.t
            slack[fixed != FREE] = -np.inf
            j = int(np.argmax(slack))
            if not np.isfinite(slack[j]) or slack[j] <= 0:
                continue

        for value in (1, 0):
            child_fixed = fixed.copy()
            child_fixed[j] = value
            try:
                child = lp_relax(prob, child_fixed)
            except Infeasible:
                continue
            offer(child.delta)
            if not prunable(child.bound):
                heapq.heappush(heap, (child.bound, next(counter), child_fixed, child))

    if best_z is None:
        raise Infeasible("no feasible selection found")

    delta = best_delta
    canonical = _chebyshev_delta(prob, best_z)
    if canonical is not None:
        z = _round(prob, canonical)
        if z is not None and z.sum() <= best_z.sum():
            best_z, delta = z, canonical

    elapsed = time.perf_counter() - start
    logger.debug(f"B&B finished: status={status.value}, objective={int(best_z.sum())}, nodes={nodes}, {elapsed:.3f}s")
    if status is SolveStatus.FEASIBLE_TIME_LIMIT:
        logger.warning(f"B&B stopped at a limit after {nodes} nodes; returning incumbent with objective {int(best_z.sum())}")
    return MipSolution(
        z=best_z,
        delta=delta,
        objective=int(best_z.sum()),
        status=status,
        nodes_explored=nodes,
        diagnostics={
            "root_bound": root.bound,
            "heuristic_objective": heuristic_objective,
            "open_nodes": len(heap),
            "elapsed_s": elapsed,
        },
    )


def _candidates_1d(prob: MipProblem) -> np.ndarray:
    g = prob.gamma[:, 0]
    nz = g != 0
    ends = []
    for width in (prob.t, prob.M + prob.t):
        ends.append((prob.xi[nz] - width) / g[nz])
        ends.append((prob.xi[nz] + width) / g[nz])
    ends = np.unique(np.concatenate(ends)) if nz.any() else np.zeros(0)
    if ends.size == 0:
        return np.zeros((1, 1))
    mids = (ends[:-1] + ends[1:]) / 2
    outside = np.array([ends[0] - 1.0, ends[-1] + 1.0])
    return np.concatenate([ends, mids, outside]).reshape(-1, 1)


def _candidates_2d(prob: MipProblem) -> np.ndarray:
    # Boundary lines a . delta = b for every slab edge
    lines = []
    for i in range(prob.p):
        a = prob.gamma[i]
        if not np.any(a):
            continue
        for offset in (-prob.t, prob.t, -(prob.M + prob.t), prob.M + prob.t):
            lines.append((a, prob.xi[i] + offset))

    points = [np.zeros(2)]
    for a, b in lines:
        points.append(a * b / (a @ a))
    for (a1, b1), (a2, b2) in itertools.combinations(lines, 2):
        A = np.vstack([a1, a2])
        det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
        if abs(det) > 1e-12 * (np.linalg.norm(a1) * np.linalg.norm(a2)):
            points.append(np.linalg.solve(A, np.array([b1, b2])))
    return np.array(points)


def exact_small_oracle(prob: MipProblem) -> MipSolution:
    """
    Exact solution for q <= 2 by evaluating every vertex of the slab
    arrangement. Ties go to the smallest delta, then the lexicographically
    smallest z.
    """
    if prob.q > 2:
        raise UnsupportedDimension(f"exact oracle supports q <= 2, got q={prob.q}")
    if prob.q == 0:
        return _solve_without_factors(prob)

    candidates = _candidates_1d(prob) if prob.q == 1 else _candidates_2d(prob)
    best = None
    for delta in candidates:
        z = _round(prob, delta)
        if z is None:
            continue
        key = (int(z.sum()), tuple(delta), tuple(z))
        if best is None or key < best[0]:
            best = (key, delta, z)
    if best is None:
        raise Infeasible("no candidate delta keeps every row within M + t")

    _, delta, z = best
    return MipSolution(
        z=z, delta=np.array(delta, dtype=float), objective=int(z.sum()), status=SolveStatus.OPTIMAL,
        diagnostics={"candidates": int(len(candidates))},
    )
