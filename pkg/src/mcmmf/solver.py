"""Non-negative least-absolute-residual solver.

Each core's spectrum is the minimiser of ``||A x - y||_1`` subject to
``x >= 0``.  The problem is posed as the linear program

    minimise  sum(u) + sum(v)
    subject   A x + u - v = y,   x, u, v >= 0

and handed to HiGHS.  :func:`lp_oracle` solves the same program with a
plain tableau simplex and is meant for cross-checking only.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .frames import SpeckleFrame
from .optics import WavelengthGrid
from .stm import CoreMatrix, Stm, extract_pixel_vector

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-8
SUPPORT_THRESHOLD = 1e-3  # relative to max(x)
ORACLE_SIZE_LIMIT = 5000


@dataclass(frozen=True, eq=False)
class L1Problem:
    matrix: np.ndarray
    observation: np.ndarray
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: int | None = None

    def __post_init__(self) -> None:
        a = np.asarray(self.matrix, dtype=float)
        y = np.asarray(self.observation, dtype=float).ravel()
        if a.ndim != 2 or a.shape[0] != y.size:
            raise ValueError(f"matrix {a.shape} does not match observation of length {y.size}")
        if a.shape[1] < 1:
            raise ValueError("matrix needs at least one column")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(y))):
            raise ValueError("matrix and observation must be finite")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "observation", y)
        if self.max_iterations is None:
            object.__setattr__(self, "max_iterations", 10 * (a.shape[0] + a.shape[1]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass(frozen=True, eq=False)
class L1Solution:
    x: np.ndarray
    objective: float
    iterations: int
    converged: bool


def residual_l1(a: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.abs(a @ x - y).sum())


def support_size(x: np.ndarray, rel: float = SUPPORT_THRESHOLD) -> int:
    """Number of entries above ``rel * max(x)``."""
    x = np.asarray(x, dtype=float)
    top = x.max(initial=0.0)
    return int(np.sum(x > rel * top)) if top > 0 else 0


def solve_l1_nonneg(problem: L1Problem) -> L1Solution:
    a, y = problem.matrix, problem.observation
    n_rows, n_cols = a.shape
    if not np.any(y):
        return L1Solution(np.zeros(n_cols), 0.0, 0, True)
    if np.any(~a.any(axis=0)):
        raise ValueError("matrix has all-zero columns; drop them before solving")
    scale = float(np.abs(y).max())
    eye = sp.identity(n_rows, format="csr")
    a_eq = sp.hstack([sp.csr_matrix(a / scale), eye, -eye], format="csr")
    cost = np.concatenate([np.zeros(n_cols), np.ones(2 * n_rows)])
    tol = min(max(problem.tolerance, 1e-10), 1e-3)
    res = linprog(
        cost,
        A_eq=a_eq,
        b_eq=y / scale,
        bounds=(0, None),
        method="highs",
        options={
            "maxiter": int(problem.max_iterations),
            "primal_feasibility_tolerance": tol,
            "dual_feasibility_tolerance": tol,
        },
    )
    iterations = int(getattr(res, "nit", 0) or 0)
    if res.x is None:
        log.debug("HiGHS returned no iterate (%s); falling back to x = 0", res.message)
        x = np.zeros(n_cols)
    else:
        x = np.clip(res.x[:n_cols], 0.0, None)
    return L1Solution(x, residual_l1(a, x, y), iterations, res.status == 0)


def lp_oracle(problem: L1Problem) -> L1Solution:
    """Reference solution by dense tableau simplex with Bland's rule.

    Works on the equality form with variables ``[x, u, v]``.  Rows with
    negative ``y`` are negated so that the residual slacks give an initial
    feasible basis.
    """
    a, y = problem.matrix, problem.observation
    m, n = a.shape
    if m * n > ORACLE_SIZE_LIMIT:
        raise ValueError(f"oracle refuses problems with Y*X > {ORACLE_SIZE_LIMIT} (got {m * n})")
    sign = np.where(y < 0, -1.0, 1.0)
    eye = np.eye(m)
    tab = np.hstack([a * sign[:, None], eye * sign[:, None], -eye * sign[:, None]])
    rhs = y * sign
    cost = np.concatenate([np.zeros(n), np.ones(2 * m)])
    basis = np.where(sign > 0, n + np.arange(m), n + m + np.arange(m))
    # basis columns are unit vectors already; tableau is B^-1 [M | b]
    eps = 1e-11
    iterations = 0
    while True:
        reduced = cost - cost[basis] @ tab
        entering = np.flatnonzero(reduced < -eps)
        if entering.size == 0:
            break
        j = int(entering[0])
        col = tab[:, j]
        rows = np.flatnonzero(col > eps)
        if rows.size == 0:
            raise RuntimeError("l1 program reported unbounded; objective is bounded below by 0")
        ratios = rhs[rows] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + eps * max(1.0, abs(best))]
        i = int(ties[np.argmin(basis[ties])])
        piv = tab[i, j]
        tab[i] /= piv
        rhs[i] /= piv
        for r in range(m):
            if r != i and tab[r, j] != 0.0:
                f = tab[r, j]
                tab[r] -= f * tab[i]
                rhs[r] -= f * rhs[i]
        basis[i] = j
        iterations += 1
    z = np.zeros(n + 2 * m)
    z[basis] = rhs
    x = np.clip(z[:n], 0.0, None)
    return L1Solution(x, residual_l1(a, x, y), iterations, True)


@dataclass(frozen=True, eq=False)
class CoreSolution:
    core_id: int
    x: np.ndarray
    objective: float
    converged: bool
    iterations: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.converged and self.error is None


def solve_core(
    core: CoreMatrix,
    y: np.ndarray,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int | None = None,
) -> CoreSolution:
    """Solve one core, dropping all-zero STM columns and re-inserting zeros."""
    a = core.matrix.astype(float)
    y = np.asarray(y, dtype=float)
    x = np.zeros(a.shape[1])
    try:
        live = a.any(axis=0)
        if not live.any():
            return CoreSolution(core.id, x, float(np.abs(y).sum()), True)
        sol = solve_l1_nonneg(L1Problem(a[:, live], y, tolerance, max_iterations))
    except (ValueError, RuntimeError) as exc:
        return CoreSolution(core.id, x, float("nan"), False, error=str(exc))
    x[live] = sol.x
    return CoreSolution(core.id, x, sol.objective, sol.converged, sol.iterations)


def solve_batch(
    stm: Stm,
    frame: SpeckleFrame,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int | None = None,
    *,
    workers: int = 1,
) -> list[CoreSolution]:
    """Reconstruct every calibrated core of ``frame``; results follow STM order."""
    if not stm.cores:
        raise ValueError("STM has no cores")

    def job(core: CoreMatrix) -> CoreSolution:
        return solve_core(core, extract_pixel_vector(frame, stm, core.id), tolerance, max_iterations)

    if workers == 1:
        results = [job(c) for c in stm.cores]
    else:
        with ThreadPoolExecutor(max_workers=workers or None) as pool:
            results = list(pool.map(job, stm.cores))
    failed = [r.core_id for r in results if not r.ok]
    if failed:
        log.warning("%d cores did not converge: %s", len(failed), failed)
    return results


def write_spectra_csv(path: str | Path, results: Iterable[CoreSolution], grid: WavelengthGrid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["core_id", "wavelength_nm", "intensity"])
        for r in results:
            for lam, v in zip(grid.values_nm, r.x):
                w.writerow([r.core_id, f"{lam:.4f}", f"{v:.9g}"])


def spectra_matrix(results: Sequence[CoreSolution]) -> np.ndarray:
    return np.stack([r.x for r in results]) if results else np.empty((0, 0))
