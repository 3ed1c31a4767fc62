"""Experiment drivers shared by the command line and the acceptance suite.

Each driver returns an ExperimentOutput: named NormSeries, monitor reports,
fields worth snapshotting and a flat summary of scalar results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from . import estimates as est
from . import hns2d, ins3d, initial
from . import lagrangian as lg
from . import twisted_div as td
from .errors import ConfigurationError
from .spectral import Grid, SpectralField, stokes_step


@dataclass
class ExperimentOutput:
    series: dict[str, est.NormSeries] = field(default_factory=dict)
    reports: list[est.MonitorReport] = field(default_factory=list)
    snapshots: dict[str, SpectralField] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    tables: dict[str, list[list[Any]]] = field(default_factory=dict)

    def merge(self, other: "ExperimentOutput", prefix: str = "") -> None:
        self.series.update({prefix + k: v for k, v in other.series.items()})
        self.reports.extend(other.reports)
        self.snapshots.update({prefix + k: v for k, v in other.snapshots.items()})
        self.summary.update({prefix + k: v for k, v in other.summary.items()})
        self.tables.update({prefix + k: v for k, v in other.tables.items()})

    @property
    def failed(self) -> bool:
        return any(r.failed for r in self.reports)


# ---------------------------------------------------------------- field specs


def velocity_field(grid: Grid, spec: Mapping[str, Any] | None, default: str = "zero") -> SpectralField:
    spec = dict(spec or {})
    name = spec.pop("generator", default)
    seed = int(spec.pop("seed", 0))
    f = initial.initial_data(name, grid, seed, **spec)
    if f.ncomp != 3:
        raise ConfigurationError(f"generator {name!r} does not produce a velocity field")
    return f


def density_field(grid: Grid, spec: Mapping[str, Any] | None, gate: float = initial.H_LINF_GATE) -> SpectralField:
    spec = dict(spec or {})
    name = spec.pop("generator", "zero")
    seed = int(spec.pop("seed", 0))
    if name in ("random-band", "zero", "gaussian-bump"):
        spec["ncomp"] = 1
    if name == "random-band":
        spec["solenoidal"] = False
    h = initial.initial_data(name, grid, seed, **spec)
    if h.ncomp != 1:
        raise ConfigurationError(f"generator {name!r} does not produce a scalar density")
    return initial.density(h, gate)


# ------------------------------------------------------------------- hns2d


def taylor_green_convergence(n: int = 64, dts: Sequence[float] = (4e-3, 2e-3, 1e-3), T: float = 1.0,
                             boost: Sequence[float] = (0.7, 0.4), min_order: float = 1.9,
                             spatial_tol: float = 1e-10) -> ExperimentOutput:
    """Temporal order on the boosted cells and spatial error on the plain cells.

    Plain Taylor-Green cells have a pure-gradient nonlinearity, so the scheme
    reproduces them up to the spatial representation; the boosted cells
    carry a genuine advective term and expose the time discretization.
    """
    g = Grid((n, n))
    out = ExperimentOutput()
    errs = []
    for dt in dts:
        s = hns2d.make_state(initial.taylor_green(g, boost=boost))
        for _ in range(int(round(T / dt))):
            s = hns2d.hns2d_step(s, dt)
        exact = initial.taylor_green(g, t=s.t, boost=boost)
        errs.append(float(np.max(np.abs(s.v.physical() - exact.physical()))))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    s = hns2d.make_state(initial.taylor_green(g))
    for _ in range(int(round(T / dts[0]))):
        s = hns2d.hns2d_step(s, dts[0])
    spatial = float(np.max(np.abs(s.v.coeffs - initial.taylor_green(g, t=s.t).coeffs)))
    worst = min(orders)
    out.reports += [
        est.check("hns2d.tg_order", "Taylor-Green temporal order", worst, min_order, worst >= min_order,
                  note="errors " + ", ".join(f"dt={dt:g}:{e!r}" for dt, e in zip(dts, errs))),
        est.check("hns2d.tg_spatial", "Taylor-Green error at resolved modes", spatial, spatial_tol,
                  spatial <= spatial_tol),
    ]
    out.summary.update({"tg_errors": errs, "tg_orders": orders, "tg_spatial_error": spatial})
    out.tables["tg_convergence"] = [["dt", "max_error"]] + [[dt, e] for dt, e in zip(dts, errs)]
    return out


def run_hns2d(v0: SpectralField, dt: float, T: float, mcfg: hns2d.MonitorConfig | None = None,
              weighted: bool = True, snapshot_every: int = 0) -> ExperimentOutput:
    mcfg = mcfg or hns2d.MonitorConfig()
    run = hns2d.hns2d_solve(v0, dt, T, mcfg)
    out = ExperimentOutput(series={"hns2d": run.series}, reports=list(run.reports))
    if weighted:
        out.reports += est.weighted_monitors(run.points())
    states = run.states
    out.snapshots["v_initial"] = states[0].v
    out.snapshots["v_final"] = states[-1].v
    if snapshot_every > 0:
        for i, s in enumerate(states):
            if i % snapshot_every == 0:
                out.snapshots[f"v_{i:05d}"] = s.v
    d = run.diagnostics[-1]
    out.summary.update({"t_final": d.t, "energy_final": d.energy, "energy_initial": run.diagnostics[0].energy})
    return out


def decay_probe(v0: SpectralField | None = None, dt: float = 0.5, window: tuple[float, float] = (12.0, 72.0),
                tolerances: Mapping[str, float] | None = None, oracle_tol: float = 0.05, n: int = 512,
                box: float = 256.0, sigma: float = 1.5, amplitude: float = 1e-3) -> ExperimentOutput:
    """Decay slopes of ||v||, ||grad v||, ||d_t v|| in L_inf.

    The default data is a Gaussian-vorticity blob of width ``sigma`` on an
    n^2 grid of side ``box``.
    """
    tol = {"v": 0.1, "grad_v": 0.1, "dtv": 0.15, **(tolerances or {})}
    target = {"v": -0.5, "grad_v": -1.0, "dtv": -1.5}
    if v0 is None:
        v0 = initial.gaussian_vortex(Grid((n, n), (box, box)), amplitude, sigma)
    res = hns2d.hns2d_decay_probe(v0, window, dt)
    out = ExperimentOutput(series={"decay": res.series})
    for key in ("v", "grad_v", "dtv"):
        f = res.fits[f"{key}.Linf"]
        of = res.oracle_fits[f"{key}.Linf"]
        dev = abs(f.slope - target[key])
        out.reports.append(est.check(f"decay.{key}_Linf", f"decay exponent of {key} in L_inf", dev, tol[key],
                                     dev <= tol[key] and not f.contaminated,
                                     note=f"slope={f.slope!r} target={target[key]} r2={f.r2!r} window={f.window}"))
        odev = abs(f.slope - of.slope)
        out.reports.append(est.check(f"decay.{key}_oracle", "agreement with the heat-kernel oracle", odev, oracle_tol,
                                     odev <= oracle_tol, note=f"oracle slope={of.slope!r}"))
        out.summary[f"slope_{key}"] = f.slope
        out.summary[f"oracle_slope_{key}"] = of.slope
    out.reports.append(est.check("decay.contamination", "periodic-image contamination of the window",
                                 float(res.contaminated), 0.0, None, note=f"window used {res.window}"))
    out.summary.update({"oracle_gap": res.oracle_gap, "contaminated": res.contaminated, "window": list(res.window)})
    return out


# ------------------------------------------------------------------- ins3d


def stability(cfg: ins3d.StabilityConfig, background: ins3d.Background | None = None,
              perturbation: tuple[SpectralField, SpectralField] | None = None, linear_response: bool = True,
              response_tol: float = 0.1) -> ExperimentOutput:
    """Stability monitors at the configured amplitude, optionally with the half-amplitude rerun."""
    bg = background or ins3d.make_background(cfg)
    if linear_response:
        r1, r2, ratio = ins3d.linear_response(cfg, bg, perturbation)
    else:
        r1, r2, ratio = ins3d.stability_experiment(cfg, bg, perturbation=perturbation), None, None
    out = ExperimentOutput(series={"ins3d": r1.series}, reports=list(r1.reports))
    finite = math.isfinite(r1.w_ratio) and r1.failure_time is None
    out.reports.append(est.check("ins3d.w_ratio", "sup ||w|| over initial perturbation size", r1.w_ratio,
                                 math.inf, finite))
    if ratio is not None:
        dev = abs(ratio - 1.0)
        out.reports.append(est.check("ins3d.linear_response", "amplitude-halving response", dev, response_tol,
                                     dev <= response_tol, note=f"w-ratios {r1.w_ratio!r} and {r2.w_ratio!r}"))
        # sup ||w|| can sit at t = 0; the amplification ratio follows the whole trajectory
        amp_dev = abs(r2.amplification / r1.amplification - 1.0) if r1.amplification > 0 else 0.0
        out.reports.append(est.check("ins3d.linear_response_amplification", "amplitude-halving response of "
                                     "sup||w|| + (int ||grad w||^2)^1/2", amp_dev, response_tol, None,
                                     note=f"amplifications {r1.amplification!r} and {r2.amplification!r}"))
        out.series["ins3d_half"] = r2.series
        out.summary["response_ratio"] = ratio
        out.summary["amplification_response"] = amp_dev
    out.summary.update({"w_ratio": r1.w_ratio, "amplification": r1.amplification})
    if r1.final is not None:
        out.snapshots.update({"h_final": r1.final.h, "w_final": r1.final.w})
    return out


def picard_vs_direct(background: ins3d.Background, h0: SpectralField, w0: SpectralField, T: float,
                     n_max: int = 12, tol: float = 1e-24, ratio_max: float = 0.75, gap_tol: float = 1e-10,
                     floor: float = 1e-26) -> ExperimentOutput:
    """Picard contraction I_{n+1}/I_n and agreement of its limit with the direct solver.

    The truncation scale is the sup-in-time gap between direct runs at dt and dt/2.
    """
    g = background.grid3
    res = ins3d.picard_solve(h0, w0, background, T, n_max=n_max, tol=tol)
    I = res.I
    ratios = [I[i + 1] / I[i] for i in range(1, len(I) - 1) if I[i] > floor and I[i + 1] > floor]
    worst = max(ratios) if ratios else 0.0
    direct = ins3d.direct_trajectory(h0, w0, background, T)
    fin = res.final
    gap_w = ins3d.sup_l2_gap([s.w.coeffs for s in direct], fin.w, g)
    gap_h = ins3d.sup_l2_gap([s.h.coeffs for s in direct], fin.h, g)
    gap = max(gap_w, gap_h)
    fine_bg = ins3d.Background(g, background.state(0), background.dt / 2)
    fine = ins3d.direct_trajectory(h0, w0, fine_bg, T)
    trunc = max(ins3d.sup_l2_gap([s.w.coeffs for s in direct], [s.w.coeffs for s in fine[::2]], g),
                ins3d.sup_l2_gap([s.h.coeffs for s in direct], [s.h.coeffs for s in fine[::2]], g))
    allowed = max(gap_tol, 10 * trunc)
    series = est.NormSeries()
    for n, v in enumerate(I, start=1):
        series.add(float(n), "I.value", v)
    out = ExperimentOutput(series={"picard": series})
    out.reports += [
        est.check("picard.contraction", "Picard contraction of I_n", worst, ratio_max, worst <= ratio_max,
                  note="I_n: " + ", ".join(f"{v:.3e}" for v in I)),
        est.check("picard.direct_gap", "Picard limit equals the direct solution", gap, allowed, gap <= allowed,
                  note=f"truncation {trunc!r}; w gap {gap_w!r}; h gap {gap_h!r}"),
    ]
    out.summary.update({"I": I, "ratios": ratios, "gap": gap, "truncation": trunc, "converged": res.converged})
    out.snapshots.update({"h_final": SpectralField(g, fin.h[-1]), "w_final": SpectralField(g, fin.w[-1])})
    return out


# -------------------------------------------------------------- lagrangian


def euler_lagrange_study(levels: Sequence[tuple[int, float]], T: float, background: Mapping[str, Any],
                         velocity: Mapping[str, Any], density: Mapping[str, Any], box: float = 2 * math.pi,
                         density_tol: float = 1e-4, min_order: float = 1.7, div_tol: float = 1e-4,
                         min_div_order: float = 2.0) -> ExperimentOutput:
    """Euler-Lagrange consistency on a refinement sequence of (grid size, dt) levels."""
    out = ExperimentOutput()
    residuals, divs, last = [], [], None
    for N, dt in levels:
        g3 = Grid((N, N, N), (box,) * 3)
        bg = ins3d.Background(g3, velocity_field(g3.horizontal(), background), dt)
        h0 = density_field(g3, density)
        w0 = velocity_field(g3, velocity)
        traj = ins3d.direct_trajectory(h0, w0, bg, T)
        last = lg.euler_lagrange_consistency(traj, density_tol=density_tol, div_rtol=div_tol)
        residuals.append(last.momentum_residual)
        divs.append(last.divergence_residual)
        out.tables[f"residual_{N}"] = [["t", "residual"]] + [[t, r] for t, r in zip(last.times, last.residuals)]
    orders = [math.log(residuals[i] / residuals[i + 1]) / math.log(levels[i][1] / levels[i + 1][1])
              for i in range(len(levels) - 1)]
    out.reports += list(last.reports)
    worst = min(orders) if orders else math.inf
    out.reports.append(est.check("lagrangian.momentum_order", "Lagrangian momentum residual order", worst, min_order,
                                 worst >= min_order, note="residuals " + ", ".join(f"{r!r}" for r in residuals)))
    # the divergence residual is limited by the spatial pullback interpolation
    div_orders = [math.log(divs[i] / divs[i + 1]) / math.log(levels[i + 1][0] / levels[i][0])
                  for i in range(len(levels) - 1) if levels[i + 1][0] != levels[i][0] and divs[i + 1] > 0]
    if div_orders:
        dw = min(div_orders)
        out.reports.append(est.check("lagrangian.divergence_order", "divergence constraint order in the grid size",
                                     dw, min_div_order, dw >= min_div_order,
                                     note="residuals " + ", ".join(f"{r!r}" for r in divs)))
    out.summary.update({"residuals": residuals, "orders": orders, "divergence_residuals": divs,
                        "divergence_orders": div_orders, "density_gap": last.density_gap,
                        "divergence_residual": last.divergence_residual})
    return out


def rigid_rotation_suite(n: int = 16, omega: float = 1.0, dt: float = 1e-3, T: float = 1.0,
                         map_tol: float = 1e-8, det_tol: float = 1e-6, inverse_tol: float = 1e-8,
                         series_terms: int = 40) -> ExperimentOutput:
    """Flow map of a rigid rotation against the closed-form rotation of the labels."""
    g = Grid((n, n, n))
    vel = lg.rigid_rotation(omega)
    states = lg.integrate_flow(vel, g, dt, T, record_every=max(1, int(round(0.1 / dt))), warn=False,
                               series_terms=series_terms)
    y = np.stack(np.broadcast_arrays(*g.coords()))
    out = ExperimentOutput()
    err_map = det_gap = inv_gap = 0.0
    avbd = -math.inf
    for s in states:
        Rm = lg.rotation_matrix(omega * s.t)
        X = np.einsum("ij,j...->i...", Rm, y)
        err_map = max(err_map, float(np.max(np.abs(y + s.displacement - X))))
        det_gap = max(det_gap, s.det_gap())
        if s.certified:
            inv_gap = max(inv_gap, s.identity_gap())
            avbd = max(avbd, s.avbd_margin())
    fin = states[-1]
    out.reports += [
        est.check("lagrangian.rotation_map", "flow map of a rigid rotation", err_map, map_tol, err_map <= map_tol),
        est.check("lagrangian.det", "volume preservation", det_gap, det_tol, det_gap <= det_tol),
        est.check("lagrangian.inverse", "Neumann inverse of the Jacobian", inv_gap, inverse_tol,
                  inv_gap <= inverse_tol),
        est.check("lagrangian.avbd", "||A - I|| <= 2 lip_budget", avbd, 0.0, math.isfinite(avbd) and avbd <= 0.0,
                  note="max of ||A - I|| - 2 lip_budget over certified states (-inf: none certified)"),
    ]
    out.summary.update({"map_error": err_map, "det_gap": det_gap, "inverse_gap": inv_gap, "avbd_margin": avbd,
                        "lip_budget_final": fin.lip_budget})
    return out


def patch_experiment(background: ins3d.Background, eta: float, cfg: lg.PatchConfig,
                     w0: SpectralField | None = None) -> ExperimentOutput:
    res = lg.patch_track(None, eta, background, cfg, w0)
    out = ExperimentOutput(reports=list(res.reports))
    out.tables["patch_curves"] = [["t", "marker_index", "x1", "x2", "x3"]] + [
        row for c in res.curves for row in c.to_rows()]
    out.summary.update({"curvature_max": float(np.max(res.curvature)), "turning_max": float(np.max(res.turning)),
                        "min_spacing": float(np.min(res.min_spacing))})
    return out


# ------------------------------------------------------------ twisted div


def twisted_problem(grid: Grid, T: float, nt: int, deviation: float, R_spec: Mapping[str, Any],
                    growth: float = 0.5, gate: float = td.DEFAULT_GATE) -> td.TwistedDivProblem:
    """Rotation-field twist with R(t) = (1 + growth t) R0."""
    times = np.linspace(0.0, T, nt)
    spec = {"generator": "random-band", "solenoidal": False, **dict(R_spec)}
    R0 = velocity_field(grid, spec).physical()
    R = np.stack([(1 + growth * t) * R0 for t in times])
    return td.TwistedDivProblem(grid, times, td.rotation_field(grid, times, deviation), R, gate=gate)


def twisted_suite(dims_list: Sequence[int], T: float = 1.0, nt: int = 11, deviation: float = 0.2,
                  R_spec: Mapping[str, Any] | None = None, tol: float = 1e-12, contraction_max: float = 0.25,
                  residual_max: float = 1e-8, stability_rtol: float = 0.2,
                  gate: float = td.DEFAULT_GATE) -> ExperimentOutput:
    R_spec = R_spec or {"amplitude": 1.0, "seed": 3, "kmax": 3}
    out = ExperimentOutput()
    ledgers = []
    for i, n in enumerate(dims_list):
        g = Grid((n, n, n))
        sol = td.solve_fixed_point(twisted_problem(g, T, nt, deviation, R_spec, gate=gate), tol=tol)
        ledgers.append(sol.ledger)
        if i == 0:
            out.reports += sol.reports
            out.reports += [
                est.check("twisted.contraction_limit", "measured contraction factor", sol.max_contraction,
                          contraction_max, sol.max_contraction <= contraction_max),
                est.check("twisted.residual_limit", "div(A z) = g residual", max(sol.residuals), residual_max,
                          max(sol.residuals) <= residual_max),
            ]
            out.snapshots["z_final"] = SpectralField.from_physical(g, sol.z[-1])
            out.summary.update({"contraction": sol.max_contraction, "residual": max(sol.residuals),
                                "sweeps": sol.sweeps, "deviation": sol.deviation, "gate_value": sol.gate_value})
        out.summary[f"ledger_{n}"] = dict(sol.ledger)
    if len(ledgers) > 1:
        keys = [k for k in ("C_R", "C_g", "C_t") if k in ledgers[0]]
        dev = max(abs(L[k] / ledgers[0][k] - 1) for L in ledgers[1:] for k in keys if ledgers[0][k] > 0)
        out.reports.append(est.check("twisted.ledger_stability", "estimate constants under grid refinement", dev,
                                     stability_rtol, dev <= stability_rtol,
                                     note="; ".join(f"{n}: " + ", ".join(f"{k}={L[k]:.6g}" for k in keys)
                                                    for n, L in zip(dims_list, ledgers))))
        out.summary["ledger_deviation"] = dev
    return out


# ---------------------------------------------------------- maximal regularity


def maxreg_single_mode(n: int = 16, mode: Sequence[int] = (2, 0, 0), p: float = 4.0, T: float = 1.0,
                       dt: float = 1e-3) -> tuple[float, float]:
    """Measured and closed-form ratio for u0 = e2 sin(m.x), f = 0 on [0, 2pi)^3.

    With |k| = |m| in shell j, u = u0 e^{-|k|^2 t}, Q = 0 and
    ||u_t||_p = ||grad^2 u||_p = |k|^2 ||u||_p, so the ratio is
    1 + (2 |k|^{2p} (1 - e^{-p |k|^2 T}) / (p |k|^2))^{1/p} / 2^{js}.
    """
    g = Grid((n, n, n))
    x = g.coords()
    m = np.asarray(mode, dtype=float)
    if np.all(m == 0) or m[1] != 0:
        raise ConfigurationError("mode must be nonzero and orthogonal to e2")
    u = np.zeros((3,) + g.dims)
    u[1] = np.sin(sum(m[j] * x[j] for j in range(3)))
    u0 = SpectralField.from_physical(g, u)
    traj = stokes_step(u0, None, dt, int(round(T / dt)))
    measured = est.maxreg_ratio(traj, None, u0, p).ratio
    k = float(np.linalg.norm(m))
    j = math.floor(math.log2(k))
    s = 2 - 2 / p
    integral = 2 * k ** (2 * p) * (1 - math.exp(-p * k * k * T)) / (p * k * k)
    closed = 1 + integral ** (1 / p) / 2 ** (j * s)
    return measured, closed


def maxreg_ensemble(n: int = 32, draws: int = 10, Ts: Sequence[float] = (1.0, 2.0, 4.0), p: float = 4.0,
                    dt: float = 0.05, seed: int = 100, kmax: float = 3.0) -> np.ndarray:
    """Ratios for steady random forcing with u0 = 0; array of shape (draws, len(Ts))."""
    g = Grid((n, n, n))
    Tmax = max(Ts)
    out = np.zeros((draws, len(Ts)))
    u0 = SpectralField.zeros(g, 3)
    for d in range(draws):
        f = initial.random_band(g, 1.0, seed + d, 1.0, kmax, solenoidal=False)
        traj = stokes_step(u0, f, dt, int(round(Tmax / dt)))
        for i, T in enumerate(Ts):
            k = int(round(T / dt))
            out[d, i] = est.maxreg_ratio(traj[: k + 1], f, u0, p).ratio
    return out


def maxreg_suite(single_n: int = 16, mode: Sequence[int] = (2, 0, 0), single_dt: float = 1e-3,
                 n: int = 32, refine_n: int | None = None, draws: int = 10, Ts: Sequence[float] = (1.0, 2.0, 4.0),
                 p: float = 4.0, dt: float = 0.05, seed: int = 100, closed_rtol: float = 0.02,
                 spread_max: float = 2.0) -> ExperimentOutput:
    out = ExperimentOutput()
    measured, closed = maxreg_single_mode(single_n, mode, p, 1.0, single_dt)
    rel = abs(measured / closed - 1)
    out.reports.append(est.check("stokes.single_mode", "closed-form single-mode ratio", rel, closed_rtol,
                                 rel <= closed_rtol, note=f"measured {measured!r}; closed form {closed!r}"))
    ratios = maxreg_ensemble(n, draws, Ts, p, dt, seed)
    spread = float(np.max(ratios.max(axis=1) / ratios.min(axis=1)))
    out.reports.append(est.check("stokes.T_spread", "ratio stability across horizons", spread, spread_max,
                                 spread <= spread_max, note=f"ratio range [{ratios.min():.4g}, {ratios.max():.4g}]"))
    out.tables["maxreg_ensemble"] = [["draw"] + [f"T={T:g}" for T in Ts]] + [
        [d] + list(map(float, r)) for d, r in enumerate(ratios)]
    out.summary.update({"single_measured": measured, "single_closed": closed, "T_spread": spread})
    if refine_n:
        fine = maxreg_ensemble(refine_n, draws, Ts, p, dt, seed)
        gspread = float(np.max(np.maximum(fine / ratios, ratios / fine)))
        out.reports.append(est.check("stokes.grid_spread", "ratio stability under grid refinement", gspread,
                                     spread_max, gspread <= spread_max))
        out.summary["grid_spread"] = gspread
    return out
