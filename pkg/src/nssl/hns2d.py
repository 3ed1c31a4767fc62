"""Three-component 2D homogeneous Navier-Stokes solver and its diagnostics.

The horizontal pair (v1, v2) is incompressible; v3 is carried along by the
horizontal flow and diffuses.  Time stepping is an integrating-factor
Adams-Bashforth-2 scheme: diffusion is exact per mode, advection is explicit
and dealiased.  The first step from a fresh state uses integrating-factor
Euler.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import estimates as est
from .errors import ConfigurationError, DivergenceError, StabilityError
from .spectral import (
    Grid,
    SpectralField,
    exp_decay_integral,
    grad_coeffs,
    project_coeffs,
)


@dataclass(frozen=True, eq=False)
class Hns2dState:
    """Velocity (3 components on a 2D grid), pressure and time.

    ``nl_prev`` holds the advection tendency of the previous step so that a
    step is a pure function of the state.
    """

    v: SpectralField
    p: SpectralField
    t: float = 0.0
    nl_prev: np.ndarray | None = None
    dt_prev: float | None = None

    @property
    def grid(self) -> Grid:
        return self.v.grid


# ------------------------------------------------------------------ kernels


def advection_coeffs(v: np.ndarray, grid: Grid, dealias: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients of v_h . grad_h v_i for all three components.

    ``v`` is the coefficient array (3, *spec).  Returns (adv, physical v).
    """
    vp = grid.inv(v)
    gp = grid.inv(grad_coeffs(grid, v))  # (3, 2, *dims)
    prod = vp[0] * gp[:, 0] + vp[1] * gp[:, 1]
    return grid.fwd(prod) * (grid.dealias_mask if dealias else 1.0), vp


def tendency(v: np.ndarray, grid: Grid, dealias: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projected advection tendency N(v) = -P_h(v_h . grad_h v), pressure, physical v."""
    adv, vp = advection_coeffs(v, grid, dealias)
    rhs = -adv
    nl = project_coeffs(grid, rhs)
    return nl, pressure_from_rhs(grid, rhs), vp


def pressure_from_rhs(grid: Grid, rhs: np.ndarray) -> np.ndarray:
    """p with grad p equal to the gradient part of the horizontal right side."""
    kd2 = grid.kd2
    safe = np.where(kd2 > 0, kd2, 1.0)
    kdotc = grid.kd[0] * rhs[0] + grid.kd[1] * rhs[1]
    return np.where(kd2 > 0, -1j * kdotc / safe, 0.0)[None]


def time_derivative(v: SpectralField, dealias: bool = True) -> SpectralField:
    """d/dt v from the right side of the equations (exact in space)."""
    g = v.grid
    nl, _, _ = tendency(v.coeffs, g, dealias)
    return SpectralField(g, nl - g.k2 * v.coeffs)


def cfl_number(vp: np.ndarray, grid: Grid, dt: float) -> float:
    return float(max(np.max(np.abs(vp[j])) * dt / grid.dx[j] for j in range(2)))


def make_state(v0: SpectralField, t: float = 0.0, dealias: bool = True) -> Hns2dState:
    """Project the horizontal pair and attach the consistent pressure."""
    g = v0.grid
    if g.ndim != 2:
        raise ConfigurationError("hns2d runs on a 2D grid")
    c = v0.coeffs
    if c.shape[0] == 2:
        c = np.concatenate([c, np.zeros_like(c[:1])])
    if c.shape[0] != 3:
        raise ConfigurationError("hns2d velocity needs 2 or 3 components")
    c = project_coeffs(g, c)
    _, p, _ = tendency(c, g, dealias)
    return Hns2dState(SpectralField(g, c), SpectralField(g, p), float(t))


def hns2d_step(state: Hns2dState, dt: float, cfl_limit: float = 1.0, dealias: bool = True) -> Hns2dState:
    """Advance one step of length ``dt``.

    Raises StabilityError when max|v_h| dt / dx exceeds ``cfl_limit``.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    g = state.grid
    v = state.v.coeffs
    nl, p, vp = tendency(v, g, dealias)
    cfl = cfl_number(vp, g, dt)
    if cfl > cfl_limit:
        raise StabilityError(f"CFL {cfl:.3f} exceeds limit {cfl_limit}", cfl=cfl)
    E = np.exp(-g.k2 * dt)
    if state.nl_prev is not None and state.dt_prev is not None and math.isclose(state.dt_prev, dt, rel_tol=1e-12):
        vn = E * (v + dt * (1.5 * nl - 0.5 * E * state.nl_prev))
    else:
        # integrating-factor Heun keeps the start second order
        nl_star = tendency(E * (v + dt * nl), g, dealias)[0]
        vn = E * v + 0.5 * dt * (E * nl + nl_star)
    if not np.all(np.isfinite(vn)):
        raise DivergenceError(f"non-finite velocity at t={state.t + dt:.6g}")
    # pressure is diagnostic; recompute at the new level
    _, pn, _ = tendency(vn, g, dealias)
    return Hns2dState(SpectralField(g, vn), SpectralField(g, pn), state.t + dt, nl, dt)


# -------------------------------------------------------------- diagnostics


@dataclass
class Hns2dDiagnostics:
    t: float
    energy: float
    dissipation: float
    vorticity_lp: dict[float, float]
    v3_linf: float
    weighted: dict[str, float]
    extra: dict[str, float] = field(default_factory=dict)


@dataclass
class MonitorConfig:
    record_every: int = 1
    vorticity_p: tuple[float, ...] = (2.0, 4.0, 6.0)
    energy_rtol: float = 1e-6
    mono_rtol: float = 1e-3
    cfl_limit: float = 1.0
    dealias: bool = True
    keep_states: bool = True


@dataclass
class TrajectoryPoint:
    """Item consumed by the weighted monitors."""

    t: float
    v: SpectralField
    v_t: SpectralField


@dataclass
class Hns2dRun:
    states: list[Hns2dState]
    diagnostics: list[Hns2dDiagnostics]
    series: est.NormSeries
    reports: list[est.MonitorReport]

    def points(self) -> list[TrajectoryPoint]:
        return [TrajectoryPoint(s.t, s.v, time_derivative(s.v)) for s in self.states]


def _diagnose(state: Hns2dState, dissipation: float, linf_int: float, cfg: MonitorConfig) -> Hns2dDiagnostics:
    g = state.grid
    v = state.v
    c = v.coeffs
    vt = time_derivative(v, cfg.dealias)
    grad = grad_coeffs(g, c)
    omega = (1j * g.kd[0] * c[1] - 1j * g.kd[1] * c[0])[None]
    omega_p = g.inv(omega)
    vp = g.inv(c)
    t = state.t
    gsq = g.l2_sq(grad)
    dtv_sq = g.l2_sq(vt.coeffs)
    gdtv = grad_coeffs(g, vt.coeffs)
    weighted = {
        "t_grad_v_sq": t * gsq,
        "t2_dtv_sq": t**2 * dtv_sq,
        "t3_grad_dtv_sq": t**3 * g.l2_sq(gdtv),
        "t4_hess_dtv_sq": t**4 * g.l2_sq(grad_coeffs(g, gdtv)),
    }
    vort = {p: est.lp_of_array(omega_p, g, p) for p in cfg.vorticity_p}
    gradh_vh = g.inv(grad[:2])
    extra = {
        "v_linf": est.lp_of_array(vp, g, math.inf),
        "grad_v_linf": est.lp_of_array(g.inv(grad), g, math.inf),
        "dtv_linf": est.lp_of_array(vt.physical(), g, math.inf),
        "vh_mean_1": float(v.mean()[0]),
        "vh_mean_2": float(v.mean()[1]),
        "linf_sq_integral": linf_int,
        "div_h": float(np.sqrt(g.l2_sq((1j * g.kd[0] * c[0] + 1j * g.kd[1] * c[1])[None]))),
        "dtv_l2_sq": dtv_sq,
    }
    for p in cfg.vorticity_p:
        if vort[p] > 0:
            extra[f"cz_{int(p)}"] = est.lp_of_array(gradh_vh, g, p) / vort[p]
    return Hns2dDiagnostics(t, g.l2_sq(c), dissipation, vort, float(np.max(np.abs(vp[2]))), weighted, extra)


def _record(series: est.NormSeries, d: Hns2dDiagnostics, int_t_dtv: float) -> None:
    t = d.t
    series.add(t, "v.energy", d.energy)
    series.add(t, "grad_v.dissipation", d.dissipation)
    for p, val in d.vorticity_lp.items():
        series.add(t, f"omega.Lp:{p:g}", val)
    series.add(t, "v3.Linf", d.v3_linf)
    series.add(t, "v.Linf", d.extra["v_linf"])
    series.add(t, "grad_v.Linf", d.extra["grad_v_linf"])
    series.add(t, "dtv.Linf", d.extra["dtv_linf"])
    series.add(t, "v.integral:Linf_sq", d.extra["linf_sq_integral"])
    series.add(t, "v.weighted:t^1:grad_sq", d.weighted["t_grad_v_sq"])
    series.add(t, "v.weighted:t^2:dt_sq", d.weighted["t2_dtv_sq"])
    series.add(t, "v.weighted:t^3:grad_dt_sq", d.weighted["t3_grad_dtv_sq"])
    series.add(t, "v.weighted:t^4:hess_dt_sq", d.weighted["t4_hess_dtv_sq"])
    series.add(t, "v.integral:t_dt_sq", int_t_dtv)
    for key, val in d.extra.items():
        if key.startswith("cz_"):
            series.add(t, f"{key}.ratio", val)


def hns2d_solve(v0: SpectralField | Hns2dState, dt: float, T: float, monitor_config: MonitorConfig | None = None) -> Hns2dRun:
    """Integrate to time T, recording diagnostics every ``record_every`` steps."""
    cfg = monitor_config or MonitorConfig()
    state = v0 if isinstance(v0, Hns2dState) else make_state(v0, dealias=cfg.dealias)
    g = state.grid
    nsteps = int(round((T - state.t) / dt))
    if nsteps < 0 or not math.isclose(state.t + nsteps * dt, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ConfigurationError(f"T - t0 = {T - state.t} is not a multiple of dt = {dt}")
    series = est.NormSeries()
    states, diags = [], []
    dissipation = 0.0
    linf_int = 0.0
    int_t_dtv = 0.0
    d = _diagnose(state, 0.0, 0.0, cfg)
    prev_linf_sq = d.extra["v_linf"] ** 2
    prev_tdtv = state.t * d.extra["dtv_l2_sq"]
    _record(series, d, 0.0)
    diags.append(d)
    states.append(state)
    for n in range(nsteps):
        new = hns2d_step(state, dt, cfg.cfl_limit, cfg.dealias)
        dissipation += exp_decay_integral(g, state.v.coeffs, new.v.coeffs, dt)
        state = new
        if (n + 1) % cfg.record_every == 0 or n + 1 == nsteps:
            d = _diagnose(state, dissipation, linf_int, cfg)
            # trapezoid accumulators between recorded samples
            h = state.t - diags[-1].t
            linf_sq = d.extra["v_linf"] ** 2
            linf_int += 0.5 * h * (linf_sq + prev_linf_sq)
            tdtv = state.t * d.extra["dtv_l2_sq"]
            int_t_dtv += 0.5 * h * (tdtv + prev_tdtv)
            prev_linf_sq, prev_tdtv = linf_sq, tdtv
            d.extra["linf_sq_integral"] = linf_int
            _record(series, d, int_t_dtv)
            diags.append(d)
            if cfg.keep_states:
                states.append(state)
    if not cfg.keep_states:
        states.append(state)
    return Hns2dRun(states, diags, series, torus_monitors(diags, cfg))


def torus_monitors(diags: Sequence[Hns2dDiagnostics], cfg: MonitorConfig | None = None) -> list[est.MonitorReport]:
    """Energy inequality, vorticity Lp monotonicity, v3 maximum principle, mean conservation."""
    cfg = cfg or MonitorConfig()
    e0 = diags[0].energy
    worst = max((d.energy + 2 * d.dissipation) for d in diags)
    drift = max(abs(d.energy + 2 * d.dissipation - e0) for d in diags)
    reports = [
        est.check("hns2d.energy", "2d energy inequality", worst, e0 * (1 + cfg.energy_rtol),
                  worst <= e0 * (1 + cfg.energy_rtol) or e0 == 0,
                  note=f"max |E+2D-E0| = {drift!r}"),
    ]
    for p in cfg.vorticity_p:
        vals = np.array([d.vorticity_lp[p] for d in diags])
        growth = float(np.max(vals[1:] / np.maximum(vals[:-1], 1e-300))) if len(vals) > 1 else 1.0
        if np.all(vals == 0):
            growth = 1.0
        reports.append(est.check(f"hns2d.vorticity_Lp{int(p)}", "vorticity Lp monotonicity",
                                 growth, 1 + cfg.mono_rtol, growth <= 1 + cfg.mono_rtol))
    v3 = np.array([d.v3_linf for d in diags])
    g3 = float(np.max(v3[1:] / np.maximum(v3[:-1], 1e-300))) if len(v3) > 1 and v3.max() > 0 else 1.0
    reports.append(est.check("hns2d.v3_max", "maximum principle for v3", g3, 1 + cfg.mono_rtol, g3 <= 1 + cfg.mono_rtol))
    m = np.array([[d.extra["vh_mean_1"], d.extra["vh_mean_2"]] for d in diags])
    mdrift = float(np.max(np.abs(m - m[0])))
    reports.append(est.check("hns2d.mean", "conservation of the horizontal mean", mdrift, 1e-13, mdrift <= 1e-13))
    cz = [d.extra[k] for d in diags for k in d.extra if k.startswith("cz_")]
    if cz:
        reports.append(est.check("hns2d.calderon_zygmund", "gradient bounded by vorticity in Lp",
                                 max(cz), 1.0, None))
    return reports


# -------------------------------------------------------------- decay probe


def heat_flow(v0: SpectralField, t: float) -> SpectralField:
    return SpectralField(v0.grid, np.exp(-v0.grid.k2 * t) * v0.coeffs)


def vorticity_outside_fraction(v: SpectralField, center: Sequence[float], radius: float) -> float:
    """Share of vorticity mass lying farther than ``radius`` from ``center``.

    Vorticity is measured relative to its far-field level (the average over
    points beyond 0.45 box lengths), which removes the uniform background
    that periodicity forces on a field with net circulation.
    """
    g = v.grid
    w = g.inv((1j * g.kd[0] * v.coeffs[1] - 1j * g.kd[1] * v.coeffs[0])[None])[0]
    r2 = 0.0
    for j, (c, L) in enumerate(zip(center, g.box_lengths)):
        x = g.axis_coords(j) - c
        x = (x + L / 2) % L - L / 2
        shape = [1, 1]
        shape[j] = x.size
        r2 = r2 + (x**2).reshape(shape)
    far = r2 >= (0.45 * min(g.box_lengths)) ** 2
    w = np.abs(w - (w[far].mean() if far.any() else 0.0))
    total = float(w.sum())
    return float(w[r2 > radius**2].sum() / total) if total > 0 else 0.0


@dataclass
class DecayProbeResult:
    fits: dict[str, est.DecayFit]
    oracle_fits: dict[str, est.DecayFit]
    series: est.NormSeries
    oracle_gap: float
    contaminated: bool
    window: tuple[float, float]


def hns2d_decay_probe(
    v0: SpectralField,
    window: tuple[float, float],
    dt: float,
    center: Sequence[float] | None = None,
    p_list: Sequence[float] = (math.inf,),
    contamination_tol: float = 1e-6,
) -> DecayProbeResult:
    """Fit decay exponents of ||v||, ||grad v|| and ||d_t v|| in L^p over ``window``.

    The nonlinear solver is compared with the linear heat flow of the same
    data at every sample.  Samples after the first time the vorticity share
    outside radius box/4 exceeds ``contamination_tol`` are dropped and the
    result is flagged.
    """
    g = v0.grid
    if center is None:
        center = tuple(L / 2 for L in g.box_lengths)
    t0, t1 = window
    radius = min(g.box_lengths) / 4
    state = make_state(v0)
    v0_proj = state.v
    series = est.NormSeries()
    oracle = est.NormSeries()
    nsteps = int(round(t1 / dt))
    cutoff = t1
    contaminated = False
    gap = 0.0

    def norms(v: SpectralField, vt: SpectralField) -> dict[str, float]:
        out = {}
        vp = v.physical()
        gp = g.inv(grad_coeffs(g, v.coeffs))
        tp = vt.physical()
        for p in p_list:
            tag = "Linf" if math.isinf(p) else f"Lp:{p:g}"
            out[f"v.{tag}"] = est.lp_of_array(vp, g, p)
            out[f"grad_v.{tag}"] = est.lp_of_array(gp, g, p)
            out[f"dtv.{tag}"] = est.lp_of_array(tp, g, p)
        return out

    for n in range(nsteps + 1):
        if n > 0:
            state = hns2d_step(state, dt)
        t = state.t
        if t < t0 - 1e-12:
            continue
        if not contaminated and vorticity_outside_fraction(state.v, center, radius) > contamination_tol:
            contaminated = True
            cutoff = t - dt
            warnings.warn(f"decay probe: boundary contamination at t={t:.4g}; window truncated", RuntimeWarning)
        if contaminated:
            break
        num = norms(state.v, time_derivative(state.v))
        hv = heat_flow(v0_proj, t)
        ref = norms(hv, SpectralField(g, -g.k2 * hv.coeffs))
        for k in num:
            series.add(t, k, num[k])
            oracle.add(t, k, ref[k])
            gap = max(gap, abs(num[k] - ref[k]) / max(ref[k], 1e-300))
    win = (t0, min(t1, cutoff))
    fits = {k: est.decay_fit_series(series, k, win, contaminated) for k in series.names()}
    ofits = {k: est.decay_fit_series(oracle, k, win, contaminated) for k in oracle.names()}
    return DecayProbeResult(fits, ofits, series, gap, contaminated, win)
