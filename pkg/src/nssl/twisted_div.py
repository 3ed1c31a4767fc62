"""Fixed-point solver for the twisted divergence equation div(A z) = g.

With g = div R and det A = 1, z is the fixed point of

    Psi(z) = grad Lap^{-1} div((I - A) z + R),

which contracts in L2 with factor at most ||I - A||_inf.  Each time slice is
solved independently; the time derivative z_t is assembled by differencing
and split as z_t = a + b with a = P((I - A) z_t + R_t), b = P(-A_t z), where
P = grad Lap^{-1} div.

Arrays are physical: A has shape (nt, n, n, *dims) with A[k, i, j] the
(i, j) entry at time k, z and R have shape (nt, n, *dims), g (nt, *dims).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import estimates as est
from .errors import ConfigurationError, InconsistentDataError, NonContractionError
from .lagrangian import determinant, identity_field, matvec, pointwise_norm
from .spectral import Grid, SpectralField, div_coeffs, grad_coeffs, grad_part_coeffs

DEFAULT_GATE = 0.3
DET_TOL = 1e-6
DIV_R_TOL = 1e-10
CONTRACTION_MARGIN = 0.05


def _check_shapes(grid: Grid, A: np.ndarray, z: np.ndarray) -> None:
    n = grid.ndim
    if A.shape != (n, n) + grid.dims or z.shape != (n,) + grid.dims:
        raise ConfigurationError(f"expected A {(n, n) + grid.dims} and vector {(n,) + grid.dims}, "
                                 f"got {A.shape} and {z.shape}")


def gradient_part(grid: Grid, f: np.ndarray) -> np.ndarray:
    """grad Lap^{-1} div f for a physical vector field (mean-free)."""
    return grid.inv(grad_part_coeffs(grid, grid.fwd(f)))


def divergence(grid: Grid, f: np.ndarray) -> np.ndarray:
    return grid.inv(div_coeffs(grid, grid.fwd(f)))


def psi_apply(z: np.ndarray, A: np.ndarray, R: np.ndarray, grid: Grid) -> np.ndarray:
    """Psi(z) = grad Lap^{-1} div((I - A) z + R) on one time slice."""
    _check_shapes(grid, A, z)
    return gradient_part(grid, z - matvec(A, z) + R)


def residual(z: np.ndarray, A: np.ndarray, g: np.ndarray, grid: Grid) -> float:
    """||div(A z) - g||_{L2}."""
    return est.lp_of_array(divergence(grid, matvec(A, z)) - g, grid, 2)


def rotation_field(grid: Grid, times: Sequence[float], deviation: float = 0.2, decay: float = 0.2) -> np.ndarray:
    """A(t, y) = rotation about the last axis by theta(t, y), with max ||I - A|| = deviation.

    theta = theta_max (1 - decay t / T) sin(k x1) cos(k x2); det A = 1 exactly.
    """
    if grid.ndim < 2:
        raise ConfigurationError("rotation field needs at least two dimensions")
    if not 0 <= deviation < 2:
        raise ConfigurationError("deviation must lie in [0, 2)")
    times = np.asarray(times, dtype=float)
    T = times[-1] - times[0] if times.size > 1 else 1.0
    th_max = 2 * math.asin(deviation / 2)
    k = [2 * np.pi / L for L in grid.box_lengths]
    x = grid.coords()
    phi = np.sin(k[0] * x[0]) * np.cos(k[1] * x[1])
    out = np.empty((times.size, grid.ndim, grid.ndim) + grid.dims)
    for m, t in enumerate(times):
        th = th_max * (1 - decay * (t - times[0]) / T) * phi
        A = identity_field(grid.ndim, grid.dims)
        A[0, 0], A[0, 1] = np.cos(th), -np.sin(th)
        A[1, 0], A[1, 1] = np.sin(th), np.cos(th)
        out[m] = A
    return out


@dataclass
class TwistedDivProblem:
    """Slice data for div(A z) = g with g = div R.

    ``R_t`` and ``A_t`` default to second-order time differences.
    """

    grid: Grid
    times: np.ndarray
    A: np.ndarray
    R: np.ndarray
    g: np.ndarray | None = None
    R_t: np.ndarray | None = None
    A_t: np.ndarray | None = None
    gate: float = DEFAULT_GATE

    def __post_init__(self) -> None:
        g = self.grid
        self.times = np.asarray(self.times, dtype=float)
        nt = self.times.size
        n = g.ndim
        self.A = np.asarray(self.A, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.A.shape != (nt, n, n) + g.dims or self.R.shape != (nt, n) + g.dims:
            raise ConfigurationError(f"A must be {(nt, n, n) + g.dims} and R {(nt, n) + g.dims}")
        if nt > 1 and np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("times must be strictly increasing")
        if self.g is None:
            self.g = np.stack([divergence(g, r) for r in self.R])
        self.g = np.asarray(self.g, dtype=float)
        if self.R_t is None:
            self.R_t = _time_derivative(self.R, self.times)
        if self.A_t is None:
            self.A_t = _time_derivative(self.A, self.times)
        det_gap = max(float(np.max(np.abs(determinant(a) - 1.0))) for a in self.A)
        if det_gap > DET_TOL:
            raise InconsistentDataError(f"|det A - 1| = {det_gap:.3g} exceeds {DET_TOL}")
        div_gap = max(est.lp_of_array(divergence(g, r) - gg, g, 2) for r, gg in zip(self.R, self.g))
        if div_gap > DIV_R_TOL:
            raise InconsistentDataError(f"||div R - g||_L2 = {div_gap:.3g} exceeds {DIV_R_TOL}")

    @property
    def deviation(self) -> float:
        """||I - A||_{L_inf} over space and time."""
        n = self.grid.ndim
        eye = identity_field(n, self.grid.dims)
        return max(float(np.max(pointwise_norm(eye - a))) for a in self.A)

    @property
    def at_norm(self) -> float:
        """||A_t||_{L_2(0,T; L_inf)}."""
        sup = [float(np.max(pointwise_norm(a))) for a in self.A_t]
        return est.time_norm(sup, self.times, 2)

    @property
    def gate_value(self) -> float:
        return self.deviation + self.at_norm


def _time_derivative(f: np.ndarray, times: np.ndarray) -> np.ndarray:
    if times.size < 2:
        return np.zeros_like(f)
    return np.gradient(f, times, axis=0, edge_order=2 if times.size > 2 else 1)


def manufactured_problem(grid: Grid, times: Sequence[float], A: np.ndarray, z_star: np.ndarray,
                         gate: float = DEFAULT_GATE) -> TwistedDivProblem:
    """Problem with g = div(A z*), R = A z*."""
    R = np.stack([matvec(a, z) for a, z in zip(A, z_star)])
    return TwistedDivProblem(grid, np.asarray(times, dtype=float), A, R, gate=gate)


def z1_problem(grid: Grid, times: Sequence[float], A1: np.ndarray, A2: np.ndarray, w2: np.ndarray,
               gate: float = DEFAULT_GATE) -> TwistedDivProblem:
    """Splitting field of the uniqueness argument: div(A1 z) = div((A1 - A2) w2)."""
    R = np.stack([matvec(a1 - a2, w) for a1, a2, w in zip(A1, A2, w2)])
    return TwistedDivProblem(grid, np.asarray(times, dtype=float), A1, R, gate=gate)


@dataclass
class TwistedDivSolution:
    z: np.ndarray
    times: np.ndarray
    sweeps: list[int]
    history: list[list[float]]
    ratios: list[list[float]]
    residuals: list[float]
    deviation: float
    gate_value: float
    ledger: dict[str, float] = field(default_factory=dict)
    reports: list[est.MonitorReport] = field(default_factory=list)

    @property
    def max_contraction(self) -> float:
        vals = [r for rs in self.ratios for r in rs]
        return max(vals) if vals else 0.0


def _solve_slice(grid: Grid, A: np.ndarray, R: np.ndarray, bound: float, tol: float,
                 max_sweeps: int) -> tuple[np.ndarray, list[float], list[float], int]:
    z = np.zeros_like(R)
    diffs: list[float] = []
    ratios: list[float] = []
    floor = 1e3 * np.finfo(float).eps
    bad = 0
    for sweep in range(1, max_sweeps + 1):
        new = psi_apply(z, A, R, grid)
        d = est.lp_of_array(new - z, grid, 2)
        size = est.lp_of_array(new, grid, 2)
        if diffs and diffs[-1] > floor * max(size, 1e-300):
            r = d / diffs[-1]
            ratios.append(r)
            bad = bad + 1 if r > bound else 0
            if bad >= 3:
                raise NonContractionError(
                    f"sweep ratio {r:.3g} exceeds ||I - A|| + margin = {bound:.3g} for three sweeps")
        diffs.append(d)
        z = new
        if d <= tol:
            return z, diffs, ratios, sweep
    raise NonContractionError(f"no convergence in {max_sweeps} sweeps; last difference {diffs[-1]:.3g}")


def solve_fixed_point(problem: TwistedDivProblem, tol: float = 1e-12, max_sweeps: int = 200,
                      p: float = 4.0) -> TwistedDivSolution:
    """Iterate z <- Psi(z) from z = 0 on each slice until the L2 update is <= tol.

    Refuses problems above the smallness gate.  Fills the estimate ledger with
    the measured constants C_R = ||z||_{LinfL2}/||R||_{LinfL2},
    C_g = ||grad z||_{L2L2}/||g||_{L2L2} and the z_t sum-space ratio.
    """
    grid = problem.grid
    gv = problem.gate_value
    if gv > problem.gate:
        raise ConfigurationError(
            f"smallness gate violated: ||I-A||_inf + ||A_t||_L2Linf = {gv:.4g} > {problem.gate}")
    dev = problem.deviation
    bound = dev + CONTRACTION_MARGIN
    zs, sweeps, hist, rats, res = [], [], [], [], []
    for A, R, g in zip(problem.A, problem.R, problem.g):
        z, diffs, ratios, n = _solve_slice(grid, A, R, bound, tol, max_sweeps)
        zs.append(z)
        sweeps.append(n)
        hist.append(diffs)
        rats.append(ratios)
        res.append(residual(z, A, g, grid))
    sol = TwistedDivSolution(np.stack(zs), problem.times, sweeps, hist, rats, res, dev, gv)
    sol.ledger = divest_ledger(problem, sol.z, p)
    sol.reports = ledger_reports(problem, sol, tol)
    return sol


def divest_ledger(problem: TwistedDivProblem, z: np.ndarray, p: float = 4.0) -> dict[str, float]:
    """Measured constants of the three a-priori bounds for the solution z."""
    grid, times = problem.grid, problem.times
    T = float(times[-1] - times[0]) if times.size > 1 else 0.0
    l2 = lambda f: est.lp_of_array(f, grid, 2)  # noqa: E731
    z_sup = max(l2(x) for x in z)
    R_sup = max(l2(x) for x in problem.R)
    gz = [l2(grid.inv(grad_coeffs(grid, grid.fwd(x)))) for x in z]
    gg = [l2(x) for x in problem.g]
    gz_L2 = est.time_norm(gz, times, 2) if times.size > 1 else gz[0]
    g_L2 = est.time_norm(gg, times, 2) if times.size > 1 else gg[0]
    out = {
        "z_LinfL2": z_sup,
        "R_LinfL2": R_sup,
        "C_R": z_sup / R_sup if R_sup > 0 else 0.0,
        "gradz_L2L2": gz_L2,
        "g_L2L2": g_L2,
        "C_g": gz_L2 / g_L2 if g_L2 > 0 else 0.0,
    }
    if times.size > 2:
        z_t = _time_derivative(z, times)
        eye = identity_field(grid.ndim, grid.dims)
        a = [gradient_part(grid, matvec(eye - A, zt) + Rt) for A, zt, Rt in zip(problem.A, z_t, problem.R_t)]
        b = [gradient_part(grid, -matvec(At, zz)) for At, zz in zip(problem.A_t, z)]
        as_fields = lambda xs: [SpectralField.from_physical(grid, x) for x in xs]  # noqa: E731
        zt_N = est.sumspace_norm(as_fields(a), as_fields(b), p, T, times)
        Rt_mixed = est.sumspace_norm(as_fields(problem.R_t), None, p, T, times)
        zt_scale = max(l2(x) for x in z_t)
        gap = max(l2(x - y - w) for x, y, w in zip(z_t, a, b))
        rhs = R_sup + Rt_mixed
        out.update({
            "zt_sumspace": zt_N,
            "Rt_mixed": Rt_mixed,
            "C_t": zt_N / rhs if rhs > 0 else 0.0,
            "zt_split_gap": gap / zt_scale if zt_scale > 0 else gap,
        })
    return out


def ledger_reports(problem: TwistedDivProblem, sol: TwistedDivSolution, tol: float) -> list[est.MonitorReport]:
    L = sol.ledger
    worst_res = max(sol.residuals)
    reports = [
        est.check("twisted.gate", "smallness of I - A and A_t", sol.gate_value, problem.gate,
                  sol.gate_value <= problem.gate, note=f"||I-A||_inf={sol.deviation:.6g}"),
        est.check("twisted.contraction", "fixed-point contraction factor", sol.max_contraction,
                  sol.deviation + CONTRACTION_MARGIN, sol.max_contraction <= sol.deviation + CONTRACTION_MARGIN),
        est.check("twisted.residual", "div(A z) = g", worst_res, max(100 * tol, 1e-8),
                  worst_res <= max(100 * tol, 1e-8)),
        est.check("twisted.z_LinfL2", "z bounded by R", L["z_LinfL2"], L["R_LinfL2"], None,
                  note=f"C_R={L['C_R']:.6g}"),
        est.check("twisted.gradz_L2L2", "grad z bounded by g", L["gradz_L2L2"], L["g_L2L2"], None,
                  note=f"C_g={L['C_g']:.6g}"),
    ]
    if "C_t" in L:
        reports.append(est.check("twisted.zt_sumspace", "z_t bounded by R and R_t", L["zt_sumspace"],
                                 L["R_LinfL2"] + L["Rt_mixed"], None,
                                 note=f"C_t={L['C_t']:.6g} split_gap={L['zt_split_gap']:.3g}"))
    return reports
