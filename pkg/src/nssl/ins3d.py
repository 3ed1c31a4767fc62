"""3D density/velocity perturbation of a 2D three-component background flow.

Unknowns are h = rho - 1, w = v - v2d and q = p - p2d on a 3D periodic grid;
the background v2d(t, x_h) comes from the hns2d solver and is constant in x3.
The momentum equation

    w_t + v.grad w - Lap w + grad q = F,
    F = -h v2d_t - h w_t - h v.grad w - rho w_h.grad_h v2d - h v2d_h.grad_h v2d,

is stepped with an exact diffusion factor and Adams-Bashforth-2 on the rest.
F contains h w_t, so at every time level w_t is found by a fixed-point
iteration that contracts with rate ||h||_inf.  Density is transported
semi-Lagrangian (cubic B-splines) or spectrally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import estimates as est
from . import hns2d
from .errors import ConfigurationError, DivergenceError, NonContractionError, StabilityError
from .initial import H_LINF_GATE
from .spectral import Grid, SpectralField, grad_coeffs, project_coeffs

# ---------------------------------------------------------------- background


@dataclass(frozen=True, eq=False)
class BackgroundSlice:
    """Background fields at one time level, as physical arrays broadcastable to 3D.

    ``v`` has shape (3, n1, n2, 1); ``grad`` (3, 2, n1, n2, 1) holds d_j v_i for
    the horizontal directions; ``vt`` is the time derivative and ``adv`` the
    dealiased v_h.grad_h v.
    """

    k: int
    t: float
    state: hns2d.Hns2dState
    v: np.ndarray
    grad: np.ndarray
    vt: np.ndarray
    adv: np.ndarray


class Background:
    """Lazily stepped hns2d trajectory on the lattice t_k = k dt, extended in x3."""

    def __init__(self, grid3: Grid, v0: SpectralField | hns2d.Hns2dState | None, dt: float,
                 cfl_limit: float = 1.0, dealias: bool = True):
        if grid3.ndim != 3:
            raise ConfigurationError("the perturbation grid must be 3D")
        if dt <= 0:
            raise ConfigurationError("dt must be positive")
        self.grid3 = grid3
        self.grid2 = grid3.horizontal()
        if v0 is None:
            v0 = SpectralField.zeros(self.grid2, 3)
        state = v0 if isinstance(v0, hns2d.Hns2dState) else hns2d.make_state(v0, dealias=dealias)
        if state.grid != self.grid2:
            raise ConfigurationError("background grid must match the horizontal part of the 3D grid")
        self.dt = float(dt)
        self.cfl_limit = cfl_limit
        self.dealias = dealias
        self._states = [state]
        self._slices: dict[int, BackgroundSlice] = {}

    @classmethod
    def zero(cls, grid3: Grid, dt: float) -> "Background":
        return cls(grid3, None, dt)

    def index(self, t: float) -> int:
        k = int(round(t / self.dt))
        if not math.isclose(k * self.dt, t, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigurationError(f"t = {t} is not on the background lattice dt = {self.dt}")
        return k

    def state(self, k: int) -> hns2d.Hns2dState:
        if k < 0:
            raise ConfigurationError("negative background index")
        while len(self._states) <= k:
            self._states.append(hns2d.hns2d_step(self._states[-1], self.dt, self.cfl_limit, self.dealias))
        return self._states[k]

    def _build_slice(self, k: int, st: hns2d.Hns2dState, c: np.ndarray) -> BackgroundSlice:
        g = self.grid2
        nl, _, _ = hns2d.tendency(c, g, self.dealias)
        adv, _ = hns2d.advection_coeffs(c, g, self.dealias)
        ext = (slice(None),) * 3 + (None,)
        v = g.inv(c)[ext]
        grad = g.inv(grad_coeffs(g, c))[(slice(None),) * 4 + (None,)]
        vt = g.inv(nl - g.k2 * c)[ext]
        return BackgroundSlice(k, k * self.dt, st, v, grad, vt, g.inv(adv)[ext])

    def slice(self, k: int) -> BackgroundSlice:
        s = self._slices.get(k)
        if s is None:
            st = self.state(k)
            s = self._build_slice(k, st, st.v.coeffs)
            self._slices[k] = s
        return s

    def predictor_slice(self) -> BackgroundSlice:
        """Background at the Heun predictor stage of the first step (time dt)."""
        s = self._slices.get(-1)
        if s is None:
            st = self._states[0]
            c = st.v.coeffs
            nl, _, _ = hns2d.tendency(c, self.grid2, self.dealias)
            s = self._build_slice(1, st, np.exp(-self.grid2.k2 * self.dt) * (c + self.dt * nl))
            self._slices[-1] = s
        return s

    def at(self, t: float) -> BackgroundSlice:
        return self.slice(self.index(t))

    def velocity3d(self, k: int) -> SpectralField:
        """Background velocity as a 3D SpectralField (only x3-wavenumber-zero modes populated)."""
        v = np.broadcast_to(self.slice(k).v, (3,) + self.grid3.dims)
        return SpectralField.from_physical(self.grid3, v)

    def norms(self, p: float = 4.0) -> dict[str, float]:
        v0 = self._states[0].v
        return {"L2": v0.l2(), "besov": est.besov_norm(v0, 2 - 2 / p, p)}


# ------------------------------------------------------------ density advect


def _index_grid(grid: Grid) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in grid.dims], indexing="ij"))


def advective_derivative(vel: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """sum_j vel_j grad[:, j] for physical arrays (grad[i, j] = d_j f_i)."""
    return sum(vel[j] * grad[:, j] for j in range(grad.shape[1]))


def departure_displacement(v_mid: np.ndarray, grad_mid: np.ndarray, dt: float) -> np.ndarray:
    """Second-order backward characteristic displacement x - x_d.

    ``v_mid`` is the velocity at the half step and ``grad_mid`` its gradient
    (grad_mid[i, j] = d_j v_i); x_d = x - dt v + dt^2/2 (v.grad v) + O(dt^3).
    """
    return dt * v_mid - 0.5 * dt**2 * advective_derivative(v_mid, grad_mid)


def sl_interpolate(grid: Grid, f: np.ndarray, disp: np.ndarray, order: int = 3) -> np.ndarray:
    """Sample periodic ``f`` at x - disp with a B-spline of the given order."""
    coords = _index_grid(grid) - np.stack([disp[j] / grid.dx[j] for j in range(grid.ndim)])
    coef = ndimage.spline_filter(f, order=order, mode="grid-wrap") if order > 1 else f
    return ndimage.map_coordinates(coef, coords, order=order, mode="grid-wrap", prefilter=False)


def _spectral_advect(grid: Grid, hc: np.ndarray, vel: np.ndarray, dt: float) -> np.ndarray:
    def rate(c):
        g = grid.inv(grad_coeffs(grid, c))
        return -grid.fwd(sum(vel[j] * g[j] for j in range(grid.ndim))) * grid.dealias_mask

    k1 = rate(hc)
    k2 = rate(hc + 0.5 * dt * k1)
    k3 = rate(hc + 0.5 * dt * k2)
    k4 = rate(hc + dt * k3)
    return hc + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def density_advect(h: SpectralField, v: SpectralField | np.ndarray, dt: float, *,
                   v_prev: SpectralField | np.ndarray | None = None, method: str = "semi-lagrangian",
                   cfl_limit: float = 2.0, clip: bool = False, grad_v: np.ndarray | None = None) -> SpectralField:
    """One transport step h_t + v.grad h = 0.

    The half-step velocity is 1.5 v - 0.5 v_prev (or v when no previous
    velocity is given).  Semi-Lagrangian: back-trace to second order and
    interpolate with cubic B-splines; ``clip`` limits the result to the
    range of the old values.  Spectral: RK4 with the frozen half-step
    velocity.  A back-trace longer than ``cfl_limit`` cells raises
    StabilityError.
    """
    g = h.grid

    def as_arrays(u):
        if isinstance(u, SpectralField):
            return u.physical(), g.inv(grad_coeffs(g, u.coeffs))
        arr = np.asarray(u, dtype=float)
        return arr, None

    vp, gp = as_arrays(v)
    if v_prev is not None:
        vq, gq = as_arrays(v_prev)
        vp = 1.5 * vp - 0.5 * vq
        gp = None if gp is None or gq is None else 1.5 * gp - 0.5 * gq
    if grad_v is not None:
        gp = grad_v
    if gp is None:
        gp = g.inv(grad_coeffs(g, g.fwd(np.broadcast_to(vp, (g.ndim,) + g.dims))))
    vp = np.broadcast_to(vp, (g.ndim,) + g.dims)
    if method == "spectral":
        return SpectralField(g, _spectral_advect(g, h.coeffs[0], vp, dt)[None])
    if method != "semi-lagrangian":
        raise ConfigurationError(f"unknown density method {method!r}")
    disp = departure_displacement(vp, gp, dt)
    cells = max(float(np.max(np.abs(disp[j]))) / g.dx[j] for j in range(g.ndim))
    if cells > cfl_limit:
        raise StabilityError(f"back-trace spans {cells:.3f} cells (limit {cfl_limit})", cfl=cells)
    hp = h.physical()[0]
    out = sl_interpolate(g, hp, disp)
    if clip:
        out = np.clip(out, hp.min(), hp.max())
    return SpectralField.from_physical(g, out)


# -------------------------------------------------------------- right side


@dataclass
class LevelEval:
    """Momentum right side at one time level."""

    wt: np.ndarray  # coefficients of w_t
    nl: np.ndarray  # projected non-diffusive tendency: w_t + k^2 w
    q: np.ndarray  # pressure coefficients (1, *spec)
    ratios: list[float]
    iters: int
    w_phys: np.ndarray
    grad_w: np.ndarray


def explicit_rhs(grid: Grid, w_c: np.ndarray, h_phys: np.ndarray, a: np.ndarray, b: np.ndarray | None,
                 bg: BackgroundSlice) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coefficients of every right-side term except -h w_t.

    R = -a.grad w - h (b.grad w) - (1+h) w_h.grad_h v2d - h v2d_t - h v2d_h.grad_h v2d,
    with ``a`` the transporting velocity and ``b`` the one multiplying h
    (the direct system has a = b = v2d + w; b = None means b = a).
    """
    w_p = grid.inv(w_c)
    gw = grid.inv(grad_coeffs(grid, w_c))
    a_gw = advective_derivative(a, gw)
    b_gw = a_gw if b is None else advective_derivative(b, gw)
    wh_gv = w_p[0] * bg.grad[:, 0] + w_p[1] * bg.grad[:, 1]
    R = -a_gw - h_phys * b_gw - (1.0 + h_phys) * wh_gv - h_phys * (bg.vt + bg.adv)
    return grid.fwd(R) * grid.dealias_mask, w_p, gw


def pressure_coeffs(grid: Grid, X: np.ndarray) -> np.ndarray:
    """q with grad q = (I - P) X."""
    kd2 = grid.kd2
    safe = np.where(kd2 > 0, kd2, 1.0)
    kdotx = sum(grid.kd[j] * X[j] for j in range(3))
    return np.where(kd2 > 0, -1j * kdotx / safe, 0.0)[None]


def solve_wt(grid: Grid, Rc: np.ndarray, w_c: np.ndarray, h_phys: np.ndarray, wt0: np.ndarray | None,
             inner_tol: float = 1e-12, inner_rtol: float = 1e-11, max_iters: int = 200) -> tuple[np.ndarray, np.ndarray, list[float], int]:
    """Fixed point wt = P(R - h wt) - k^2 w; returns (wt, X = R - h wt, ratios, sweeps)."""
    base = -grid.k2 * w_c
    hmax = float(np.max(np.abs(h_phys))) if np.ndim(h_phys) else abs(float(h_phys))
    if hmax == 0.0:
        return project_coeffs(grid, Rc) + base, Rc, [], 1
    wt = project_coeffs(grid, Rc) + base if wt0 is None else wt0
    ratios: list[float] = []
    prev_diff = None
    for it in range(1, max_iters + 1):
        X = Rc - grid.fwd(h_phys * grid.inv(wt)) * grid.dealias_mask
        new = project_coeffs(grid, X) + base
        diff = math.sqrt(grid.l2_sq(new - wt))
        size = math.sqrt(grid.l2_sq(new))
        if prev_diff is not None and prev_diff > 1e3 * np.finfo(float).eps * max(size, 1e-300):
            ratios.append(diff / prev_diff)
        wt = new
        if diff <= inner_tol + inner_rtol * size:
            X = Rc - grid.fwd(h_phys * grid.inv(wt)) * grid.dealias_mask
            return wt, X, ratios, it
        prev_diff = diff
    raise NonContractionError(
        f"w_t iteration did not converge in {max_iters} sweeps (||h||_inf = {hmax:.4g}, last ratio "
        f"{ratios[-1] if ratios else float('nan'):.3g})"
    )


def evaluate_level(grid: Grid, w_c: np.ndarray, h_phys: np.ndarray, a: np.ndarray, b: np.ndarray | None,
                   bg: BackgroundSlice, wt0: np.ndarray | None, inner_tol: float, inner_rtol: float,
                   max_iters: int) -> LevelEval:
    Rc, w_p, gw = explicit_rhs(grid, w_c, h_phys, a, b, bg)
    wt, X, ratios, iters = solve_wt(grid, Rc, w_c, h_phys, wt0, inner_tol, inner_rtol, max_iters)
    return LevelEval(wt, wt + grid.k2 * w_c, pressure_coeffs(grid, X), ratios, iters, w_p, gw)


# ------------------------------------------------------------ forcing parts


@dataclass
class ForcingBreakdown:
    """Forcing in both groupings (physical arrays, shape (3, *dims), dealiased).

    ``total`` is the grouping with v.grad w kept on the left; ``parts`` are
    F1..F6 with F1 + ... + F6 = adv - total, adv = v.grad w.
    """

    total: np.ndarray
    adv: np.ndarray
    parts: dict[str, np.ndarray]

    def grouping_gap(self) -> float:
        """max |(total - adv) + sum F_i|, relative to the largest term."""
        s = sum(self.parts.values())
        scale = max(float(np.max(np.abs(x))) for x in [self.total, self.adv, *self.parts.values()])
        gap = float(np.max(np.abs(self.total - self.adv + s)))
        return gap / scale if scale > 0 else gap


def assemble_forcing(state: "PerturbationState", w_t_guess: SpectralField | np.ndarray | None = None,
                     dealias: bool = True) -> ForcingBreakdown:
    """Evaluate the forcing of the perturbation system at the state's time level.

    ``w_t_guess`` enters the h w_t term; the state's own w_t is used when omitted.
    """
    g = state.w.grid
    bg = state.background.slice(state.k)
    wc = state.w.coeffs
    hp = state.h.physical()[0]
    wp = g.inv(wc)
    gw = g.inv(grad_coeffs(g, wc))
    if w_t_guess is None:
        wt = g.inv(state.wt.coeffs)
    elif isinstance(w_t_guess, SpectralField):
        wt = w_t_guess.physical()
    else:
        wt = np.asarray(w_t_guess)
    rho = 1.0 + hp
    v2d = bg.v
    v = v2d + wp
    adv = advective_derivative(v, gw)
    v2d_gw = advective_derivative(np.broadcast_to(v2d, wp.shape), gw)
    w_gw = advective_derivative(wp, gw)
    wh_gv = wp[0] * bg.grad[:, 0] + wp[1] * bg.grad[:, 1]
    parts = {
        "F1": rho * v2d_gw,
        "F2": rho * w_gw,
        "F3": hp * bg.vt,
        "F4": hp * wt,
        "F5": rho * wh_gv,
        "F6": hp * bg.adv,
    }
    total = -hp * bg.vt - hp * wt - hp * adv - rho * wh_gv - hp * bg.adv
    parts = {k: np.broadcast_to(v_, wp.shape) for k, v_ in parts.items()}
    total = np.broadcast_to(total, wp.shape)
    if dealias:
        filt = lambda x: g.inv(g.fwd(x) * g.dealias_mask)  # noqa: E731
        parts = {k: filt(v_) for k, v_ in parts.items()}
        total, adv = filt(total), filt(adv)
    return ForcingBreakdown(np.asarray(total), np.asarray(adv), parts)


# ------------------------------------------------------------ direct solver


@dataclass(frozen=True, eq=False)
class PerturbationState:
    h: SpectralField
    w: SpectralField
    q: SpectralField
    t: float
    background: Background
    k: int = 0
    wt: SpectralField | None = None
    nl: np.ndarray | None = None
    nl_prev: np.ndarray | None = None
    w_prev: np.ndarray | None = None
    inner_ratios: tuple[float, ...] = ()
    inner_iters: int = 0
    options: dict = field(default_factory=dict)


DEFAULT_OPTIONS = {
    "inner_tol": 1e-12,
    "inner_rtol": 1e-11,
    "max_iters": 200,
    "density_method": "semi-lagrangian",
    "sl_cfl_limit": 2.0,
    "clip": False,
}


def make_perturbation_state(h0: SpectralField, w0: SpectralField, background: Background,
                            gate: float = H_LINF_GATE, **options) -> PerturbationState:
    """Project w0, check ||h0||_inf <= gate and evaluate w_t, q at t = 0."""
    g = background.grid3
    if h0.grid != g or w0.grid != g:
        raise ConfigurationError("h0 and w0 must live on the background's 3D grid")
    if w0.ncomp != 3 or h0.ncomp != 1:
        raise ConfigurationError("expected scalar h0 and 3-component w0")
    hp = h0.physical()[0]
    hinf = float(np.max(np.abs(hp)))
    if hinf > gate + 1e-12:
        raise ConfigurationError(f"||h0||_inf = {hinf:.4g} exceeds the gate {gate}")
    opts = {**DEFAULT_OPTIONS, **options}
    wc = project_coeffs(g, w0.coeffs)
    bg = background.slice(0)
    a = bg.v + g.inv(wc)
    ev = evaluate_level(g, wc, hp, a, None, bg, None, opts["inner_tol"], opts["inner_rtol"], opts["max_iters"])
    return PerturbationState(h0, SpectralField(g, wc), SpectralField(g, ev.q), 0.0, background, 0,
                             SpectralField(g, ev.wt), ev.nl, None, None, tuple(ev.ratios), ev.iters, opts)


def _ab2(grid: Grid, w: np.ndarray, nl: np.ndarray, nl_prev: np.ndarray | None, dt: float) -> np.ndarray:
    E = np.exp(-grid.k2 * dt)
    if nl_prev is None:
        return E * (w + dt * nl)
    return E * (w + dt * (1.5 * nl - 0.5 * E * nl_prev))


def _combo_velocity(grid: Grid, slices: Sequence[BackgroundSlice], wcs: Sequence[np.ndarray],
                    weights: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """sum_i c_i (v2d_i + w_i) and its gradient."""
    v2 = sum(c * s.v for c, s in zip(weights, slices))
    g2 = sum(c * s.grad for c, s in zip(weights, slices))
    wc = sum(c * w for c, w in zip(weights, wcs))
    v = v2 + grid.inv(wc)
    gv = grid.inv(grad_coeffs(grid, wc))
    gv[:, :2] += g2
    return v, gv


def _mid_velocity(grid: Grid, bg: Background, k: int, w_k: np.ndarray, w_km1: np.ndarray | None,
                  frozen: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Half-step velocity 1.5 v_k - 0.5 v_{k-1} (v = v2d + w) and its gradient."""
    s_k = bg.slice(0 if frozen else k)
    if w_km1 is None or k == 0:
        return _combo_velocity(grid, [s_k], [w_k], [1.0])
    s_m = bg.slice(0 if frozen else k - 1)
    return _combo_velocity(grid, [s_k, s_m], [w_k, w_km1], [1.5, -0.5])


def _heun_corrector(grid: Grid, w: np.ndarray, nl: np.ndarray, nl_star: np.ndarray, dt: float) -> np.ndarray:
    E = np.exp(-grid.k2 * dt)
    return project_coeffs(grid, E * w + 0.5 * dt * (E * nl + nl_star))


def perturbation_step(state: PerturbationState, dt: float | None = None, inner_tol: float | None = None) -> PerturbationState:
    """Advance (h, w) by one background step and evaluate w_t, q at the new level."""
    bg = state.background
    if dt is not None and not math.isclose(dt, bg.dt, rel_tol=1e-12):
        raise ConfigurationError(f"dt {dt} differs from the background step {bg.dt}")
    dt = bg.dt
    opts = dict(state.options)
    if inner_tol is not None:
        opts["inner_tol"] = inner_tol
    g = state.w.grid
    k = state.k
    wc = state.w.coeffs
    w_new = project_coeffs(g, _ab2(g, wc, state.nl, state.nl_prev, dt))
    bgs = bg.slice(k + 1)
    if state.nl_prev is None:
        # second-order start: integrating-factor Heun, density by the predicted mid velocity
        v_mid, g_mid = _combo_velocity(g, [bg.slice(k), bg.predictor_slice()], [wc, w_new], [0.5, 0.5])
    else:
        v_mid, g_mid = _mid_velocity(g, bg, k, wc, state.w_prev)
    h_new = density_advect(state.h, v_mid, dt, method=opts["density_method"], cfl_limit=opts["sl_cfl_limit"],
                           clip=opts["clip"], grad_v=g_mid)
    if state.nl_prev is None:
        hp = h_new.physical()[0]
        pre = bg.predictor_slice()
        ev = evaluate_level(g, w_new, hp, pre.v + g.inv(w_new), None, pre, state.wt.coeffs, opts["inner_tol"],
                            opts["inner_rtol"], opts["max_iters"])
        w_new = _heun_corrector(g, wc, state.nl, ev.nl, dt)
    if not (np.all(np.isfinite(w_new)) and h_new.is_finite()):
        raise DivergenceError(f"non-finite perturbation at t={state.t + dt:.6g}", step=k + 1)
    hp = h_new.physical()[0]
    a = bgs.v + g.inv(w_new)
    ev = evaluate_level(g, w_new, hp, a, None, bgs, state.wt.coeffs, opts["inner_tol"], opts["inner_rtol"],
                        opts["max_iters"])
    return PerturbationState(h_new, SpectralField(g, w_new), SpectralField(g, ev.q), (k + 1) * dt, bg, k + 1,
                             SpectralField(g, ev.wt), ev.nl, state.nl, wc, tuple(ev.ratios), ev.iters, opts)


def run_direct(state: PerturbationState, nsteps: int, record_every: int = 1,
               callback: Callable[[PerturbationState], None] | None = None, keep: bool = True) -> list[PerturbationState]:
    """Step ``nsteps`` times; returns recorded states (always including first and last)."""
    out = [state]
    if callback:
        callback(state)
    for n in range(nsteps):
        state = perturbation_step(state)
        if (n + 1) % record_every == 0 or n + 1 == nsteps:
            if callback:
                callback(state)
            if keep:
                out.append(state)
    if not keep:
        out.append(state)
    return out


# ------------------------------------------------------ monolithic h=0 oracle


def ns3d_solve(V0: SpectralField, dt: float, nsteps: int, dealias: bool = True) -> list[np.ndarray]:
    """Constant-density 3D Navier-Stokes by the same IF-AB2 scheme; returns coefficients per step."""
    g = V0.grid
    V = project_coeffs(g, V0.coeffs)
    out = [V]
    nl_prev = None
    mask = g.dealias_mask if dealias else 1.0

    def tendency(c: np.ndarray) -> np.ndarray:
        return -project_coeffs(g, g.fwd(advective_derivative(g.inv(c), g.inv(grad_coeffs(g, c)))) * mask)

    for _ in range(nsteps):
        nl = tendency(V)
        V_new = project_coeffs(g, _ab2(g, V, nl, nl_prev, dt))
        V = _heun_corrector(g, V, nl, tendency(V_new), dt) if nl_prev is None else V_new
        if not np.all(np.isfinite(V)):
            raise DivergenceError("non-finite monolithic solution")
        nl_prev = nl
        out.append(V)
    return out


def extend_background(bg: Background, k: int) -> np.ndarray:
    """3D coefficients of the background at level k."""
    return bg.velocity3d(k).coeffs


# ------------------------------------------------------------------- Picard


@dataclass
class PicardIterate:
    level: int
    times: np.ndarray
    h: list[np.ndarray] | None
    w: list[np.ndarray] | None
    q: list[np.ndarray] | None
    I: float | None = None
    max_inner_ratio_excess: float = 0.0
    w_star: np.ndarray | None = None

    def drop_fields(self) -> None:
        self.h = self.w = self.q = self.w_star = None


def _velocity_of(level: PicardIterate | None, bg: Background, grid: Grid, k: int, kind: str,
                 cache: dict) -> np.ndarray:
    key = (id(level), kind, k)
    if key in cache:
        return cache[key]
    if kind == "zero":
        v = np.zeros((3,) + grid.dims)
    elif kind == "frozen":
        v = bg.slice(0).v + grid.inv(level.w[0])
    else:
        v = bg.slice(k).v + grid.inv(level.w[k])
    cache[key] = v
    return v


def _stage_velocity(level: PicardIterate | None, bg: Background, grid: Grid, kind: str) -> np.ndarray:
    """Velocity of a level at the predictor stage of the first step."""
    if kind == "zero":
        return np.zeros((3,) + grid.dims)
    if kind == "frozen":
        return bg.slice(0).v + grid.inv(level.w[0])
    return bg.predictor_slice().v + grid.inv(level.w_star)


def _mid_from_level(level: PicardIterate, bg: Background, grid: Grid, k: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
    if kind == "frozen":
        return _mid_velocity(grid, bg, 0, level.w[0], None)
    if k == 0:
        return _combo_velocity(grid, [bg.slice(0), bg.predictor_slice()], [level.w[0], level.w_star], [0.5, 0.5])
    return _mid_velocity(grid, bg, k, level.w[k], level.w[k - 1])


def picard_level(h0: SpectralField, w0: SpectralField, bg: Background, nsteps: int,
                 cur: PicardIterate, cur_kind: str, prev: PicardIterate | None, prev_kind: str,
                 opts: dict) -> PicardIterate:
    """Solve for level n+1 with coefficients frozen at levels n (``cur``) and n-1 (``prev``)."""
    g = bg.grid3
    dt = bg.dt
    wc = project_coeffs(g, w0.coeffs)
    hc = h0.coeffs
    hs, ws, qs = [hc], [wc], []
    nl_prev = None
    wt_prev = None
    excess = 0.0
    cache: dict = {}
    w_star = None
    for k in range(nsteps + 1):
        bgs = bg.slice(k)
        a = _velocity_of(cur, bg, g, k, cur_kind, cache)
        b = _velocity_of(prev, bg, g, k, prev_kind, cache)
        h_n = g.inv(cur.h[0 if cur_kind == "frozen" else k])[0]
        ev = evaluate_level(g, wc, h_n, a, b, bgs, wt_prev, opts["inner_tol"], opts["inner_rtol"], opts["max_iters"])
        if ev.ratios:
            excess = max(excess, max(ev.ratios) - float(np.max(np.abs(h_n))))
        qs.append(ev.q)
        if k == nsteps:
            break
        w_new = project_coeffs(g, _ab2(g, wc, ev.nl, nl_prev, dt))
        if k == 0:
            h_1 = g.inv(cur.h[0 if cur_kind == "frozen" else 1])[0]
            a_1 = _stage_velocity(cur, bg, g, cur_kind)
            b_1 = _stage_velocity(prev, bg, g, prev_kind)
            ev_star = evaluate_level(g, w_new, h_1, a_1, b_1, bg.predictor_slice(), ev.wt, opts["inner_tol"],
                                     opts["inner_rtol"], opts["max_iters"])
            w_star = w_new
            w_new = _heun_corrector(g, wc, ev.nl, ev_star.nl, dt)
        v_mid, g_mid = _mid_from_level(cur, bg, g, k, cur_kind)
        h_new = density_advect(SpectralField(g, hc), v_mid, dt, method=opts["density_method"],
                               cfl_limit=opts["sl_cfl_limit"], clip=opts["clip"], grad_v=g_mid).coeffs
        if not (np.all(np.isfinite(w_new)) and np.all(np.isfinite(h_new))):
            raise DivergenceError(f"non-finite Picard iterate at step {k + 1}", step=k + 1)
        nl_prev, wt_prev = ev.nl, ev.wt
        wc, hc = w_new, h_new
        hs.append(hc)
        ws.append(wc)
    return PicardIterate(cur.level + 1, np.arange(nsteps + 1) * dt, hs, ws, qs, None, excess, w_star)


def contraction_quantity(a: PicardIterate, b: PicardIterate, grid: Grid) -> float:
    """I = sup ||dh||^2 + sup ||dw||^2 + int ||grad dw||^2 (trapezoid) between two levels."""
    dh = [grid.l2_sq(x - y) for x, y in zip(a.h, b.h)]
    dw = [grid.l2_sq(x - y) for x, y in zip(a.w, b.w)]
    gw = [grid.l2_sq(grad_coeffs(grid, x - y)) for x, y in zip(a.w, b.w)]
    return float(max(dh) + max(dw) + np.trapezoid(gw, a.times))


@dataclass
class PicardResult:
    iterates: list[PicardIterate]
    I: list[float]
    converged: bool

    @property
    def final(self) -> PicardIterate:
        return self.iterates[-1]

    def ratios(self) -> list[float]:
        return [self.I[i + 1] / self.I[i] for i in range(len(self.I) - 1) if self.I[i] > 0]


def picard_solve(h0: SpectralField, w0: SpectralField, background: Background, T: float, n_max: int = 20,
                 tol: float = 1e-20, keep_all: bool = False, **options) -> PicardResult:
    """Iterate the frozen-coefficient approximate system.

    Level 0 is the seed h^0 = h0, w^0 = w0 with v^0 = v2d(0) + w0 held fixed in
    time and v^{-1} = 0.  I[n-1] holds I_n, the distance between levels n and
    n-1.  Stops when I_n <= tol or after ``n_max`` levels; three consecutive
    non-decreasing I_n raise NonContractionError.
    """
    g = background.grid3
    gate = options.pop("gate", H_LINF_GATE)
    hinf = float(np.max(np.abs(h0.physical())))
    if hinf > gate + 1e-12:
        raise ConfigurationError(f"||h0||_inf = {hinf:.4g} exceeds the gate {gate}")
    opts = {**DEFAULT_OPTIONS, **options}
    nsteps = background.index(T)
    wc0 = project_coeffs(g, w0.coeffs)
    seed = PicardIterate(0, np.arange(nsteps + 1) * background.dt, [h0.coeffs], [wc0], None)
    iterates = [seed]
    prev, prev_kind = None, "zero"
    cur, cur_kind = seed, "frozen"
    Ivals: list[float] = []
    converged = False
    for n in range(n_max):
        new = picard_level(h0, w0, background, nsteps, cur, cur_kind, prev, prev_kind, opts)
        if cur_kind == "frozen":
            ref = PicardIterate(0, new.times, [h0.coeffs] * (nsteps + 1), [wc0] * (nsteps + 1), None)
        else:
            ref = cur
        new.I = contraction_quantity(new, ref, g)
        Ivals.append(new.I)
        iterates.append(new)
        if prev is not None and not keep_all and prev.level > 0:
            prev.drop_fields()
        prev, prev_kind = cur, cur_kind
        cur, cur_kind = new, "level"
        if new.I <= tol:
            converged = True
            break
        if len(Ivals) >= 4 and Ivals[-1] >= Ivals[-2] >= Ivals[-3] >= Ivals[-4]:
            raise NonContractionError(
                f"I_n non-decreasing over three levels: {Ivals[-4:]}; reduce the horizon T"
            )
    return PicardResult(iterates, Ivals, converged)


# --------------------------------------------------------- stability study


@dataclass
class StabilityConfig:
    dims: tuple[int, int, int] = (48, 48, 48)
    box: float = 2 * math.pi
    dt: float = 0.05
    T: float = 10.0
    amplitude: float = 1e-3
    background_amplitude: float = 0.4
    background_kmax: float = 2.0
    background_seed: int = 1
    w_seed: int = 2
    h_seed: int = 3
    w_kmax: float = 3.0
    h_kmax: float = 3.0
    h_amplitude: float | None = None
    p: float = 4.0
    c0: float | None = None
    C_prime: float | None = None
    record_every: int = 1
    density_method: str = "semi-lagrangian"
    density_rtol: float = 1e-2
    linf_rtol: float = 1e-2
    div_tol: float = 1e-11
    inner_margin: float = 0.05


@dataclass
class StabilityResult:
    reports: list[est.MonitorReport]
    series: est.NormSeries
    amplification: float
    w_ratio: float
    failure_time: float | None = None
    final: "PerturbationState | None" = None


def make_background(cfg: StabilityConfig) -> Background:
    from .initial import random_band

    g3 = Grid(cfg.dims, (cfg.box,) * 3)
    g2 = g3.horizontal()
    v2 = random_band(g2, cfg.background_amplitude, cfg.background_seed, 1.0, cfg.background_kmax)
    return Background(g3, v2, cfg.dt)


def make_perturbation(cfg: StabilityConfig, grid: Grid, amplitude: float | None = None) -> tuple[SpectralField, SpectralField]:
    from .initial import random_band

    amp = cfg.amplitude if amplitude is None else amplitude
    hamp = amp if cfg.h_amplitude is None else cfg.h_amplitude * amp / cfg.amplitude
    w0 = random_band(grid, 1.0, cfg.w_seed, 1.0, cfg.w_kmax) * amp
    h0 = random_band(grid, 1.0, cfg.h_seed, 1.0, cfg.h_kmax, ncomp=1, solenoidal=False) * hamp
    return h0, w0


def _l2_linf(grid: Grid, f: SpectralField) -> tuple[float, float]:
    return f.l2(), float(np.max(np.abs(f.physical())))


def stability_experiment(cfg: StabilityConfig, background: Background | None = None,
                         amplitude: float | None = None,
                         perturbation: tuple[SpectralField, SpectralField] | None = None) -> StabilityResult:
    """Run the perturbation to the horizon and evaluate the stability monitors.

    ``perturbation`` = (h0, w0) replaces the seeded data of ``cfg``.
    """
    bg = background or make_background(cfg)
    g = bg.grid3
    h0, w0 = make_perturbation(cfg, g, amplitude) if perturbation is None else perturbation
    state = make_perturbation_state(h0, w0, bg, density_method=cfg.density_method)
    nsteps = bg.index(cfg.T)
    series = est.NormSeries()
    h2_0, hinf_0 = _l2_linf(g, h0)
    gh0 = est.lp_of_array(g.inv(grad_coeffs(g, h0.coeffs)), g, 3.0)
    w0n = state.w.l2()
    init_size = math.sqrt(w0n**2 + h2_0**2)
    acc = {"sup_h": 0.0, "sup_h2dev": 0.0, "sup_hinf": 0.0, "sup_w": 0.0, "diss": 0.0, "div": 0.0,
           "lip": 0.0, "gh_ratio": 0.0, "inner_excess": -1.0, "last_t": 0.0, "last_lip": None, "last_gw": None}

    def observe(s: PerturbationState):
        h2, hinf = _l2_linf(g, s.h)
        wl2 = s.w.l2()
        gw = g.l2_sq(grad_coeffs(g, s.w.coeffs))
        bgs = bg.slice(s.k)
        gv = g.inv(grad_coeffs(g, s.w.coeffs))
        gv[:, :2] += bgs.grad
        lipv = float(np.max(np.sqrt(np.sum(gv**2, axis=(0, 1)))))
        if acc["last_lip"] is not None:
            dtr = s.t - acc["last_t"]
            acc["lip"] += 0.5 * dtr * (lipv + acc["last_lip"])
            acc["diss"] += 0.5 * dtr * (gw + acc["last_gw"])
        acc["last_t"], acc["last_lip"], acc["last_gw"] = s.t, lipv, gw
        gh = est.lp_of_array(g.inv(grad_coeffs(g, s.h.coeffs)), g, 3.0)
        if gh0 > 0:
            acc["gh_ratio"] = max(acc["gh_ratio"], gh / (gh0 * math.exp(acc["lip"])))
        if h2_0 + hinf_0 > 0:
            acc["sup_h"] = max(acc["sup_h"], (h2 + hinf) / (h2_0 + hinf_0))
            acc["sup_h2dev"] = max(acc["sup_h2dev"], abs(h2 / h2_0 - 1))
            acc["sup_hinf"] = max(acc["sup_hinf"], hinf / hinf_0)
        acc["sup_w"] = max(acc["sup_w"], wl2)
        div = math.sqrt(g.l2_sq((1j * sum(g.kd[j] * s.w.coeffs[j] for j in range(3)))[None]))
        acc["div"] = max(acc["div"], div)
        if s.inner_ratios:
            acc["inner_excess"] = max(acc["inner_excess"], max(s.inner_ratios) - hinf)
        t = s.t
        series.add(t, "h.L2", h2)
        series.add(t, "h.Linf", hinf)
        series.add(t, "grad_h.Lp:3", gh)
        series.add(t, "w.L2", wl2)
        series.add(t, "grad_w.dissipation", acc["diss"])
        series.add(t, "grad_v.integral:Linf", acc["lip"])

    failure = None
    final = None
    try:
        final = run_direct(state, nsteps, cfg.record_every, observe, keep=False)[-1]
    except (DivergenceError, StabilityError, NonContractionError) as exc:
        failure = acc["last_t"]
        note = f"solver failure after t={failure}: {exc}"
    else:
        note = ""
    if h2_0 + hinf_0 == 0:
        acc["sup_h"], acc["sup_hinf"] = 1.0, 1.0
    amp_K = (acc["sup_w"] + math.sqrt(acc["diss"])) / init_size if init_size > 0 else 0.0
    w_ratio = acc["sup_w"] / init_size if init_size > 0 else 0.0
    reports = [
        est.check("ins3d.density_bound", "density deviation bounded by its initial size",
                  acc["sup_h"], 1 + cfg.density_rtol, acc["sup_h"] <= 1 + cfg.density_rtol and failure is None, note),
        est.check("ins3d.density_L2", "density L2 conservation", acc["sup_h2dev"], cfg.density_rtol,
                  acc["sup_h2dev"] <= cfg.density_rtol),
        est.check("ins3d.density_Linf", "density maximum principle", acc["sup_hinf"], 1 + cfg.linf_rtol,
                  acc["sup_hinf"] <= 1 + cfg.linf_rtol),
        est.check("ins3d.energy_amplification", "perturbation energy estimate", amp_K, 1.0, None,
                  note=f"sup||w||+(int||grad w||^2)^1/2 over ||(w0,h0)||; w-only ratio {w_ratio!r}"),
        est.check("ins3d.div_w", "incompressibility of the perturbation", acc["div"], cfg.div_tol,
                  acc["div"] <= cfg.div_tol),
        est.check("ins3d.inner_contraction", "w_t fixed-point contraction", max(acc["inner_excess"], 0.0),
                  cfg.inner_margin, acc["inner_excess"] <= cfg.inner_margin,
                  note="max over steps of (sweep ratio - ||h||_inf)"),
    ]
    if gh0 > 0:
        reports.append(est.check("ins3d.grad_density_L3", "density gradient growth envelope", acc["gh_ratio"], 1.0,
                                 acc["gh_ratio"] <= 1.0 + cfg.density_rtol,
                                 note=f"envelope exp(int ||grad v||_inf) with integral {acc['lip']!r}"))
    reports.append(smallness_report(h0, state.w, bg, cfg.p, cfg.c0, cfg.C_prime))
    return StabilityResult(reports, series, amp_K, w_ratio, failure, final)


def smallness_report(h0: SpectralField, w0: SpectralField, bg: Background, p: float = 4.0,
                     c0: float | None = None, C_prime: float | None = None) -> est.MonitorReport:
    """Size of the initial perturbation against the user-supplied smallness threshold (report-only)."""
    g = h0.grid
    hp = h0.physical()
    lhs = h0.l2() + float(np.max(np.abs(hp))) + w0.l2() + est.besov_norm(w0, 2 - 2 / p, p)
    v0 = bg.state(0).v
    b_l2 = v0.l2()
    b_besov = est.besov_norm(v0, 2 - 2 / p, p) if v0.l2() > 0 else 0.0
    note = f"background ||v2d_0||_L2={b_l2!r}, besov={b_besov!r}"
    if c0 is None or C_prime is None:
        return est.check("ins3d.smallness", "initial smallness condition", lhs, 1.0, None,
                         note=note + "; constants not supplied, rhs = 1")
    size = b_l2 + b_besov
    rhs = c0 * math.exp(-C_prime * (size ** (4 * p) + 1) * math.exp(C_prime * (1 + b_l2**4)))
    return est.check("ins3d.smallness", "initial smallness condition", lhs, rhs, None, note=note)


def linear_response(cfg: StabilityConfig, background: Background | None = None,
                    perturbation: tuple[SpectralField, SpectralField] | None = None
                    ) -> tuple[StabilityResult, StabilityResult, float]:
    """Run at the configured amplitude and at half of it; returns both results and the ratio of w-ratios."""
    bg = background or make_background(cfg)
    r1 = stability_experiment(cfg, bg, perturbation=perturbation)
    half = None if perturbation is None else (perturbation[0] * 0.5, perturbation[1] * 0.5)
    r2 = stability_experiment(cfg, bg, cfg.amplitude / 2, perturbation=half)
    ratio = r2.w_ratio / r1.w_ratio if r1.w_ratio > 0 else 1.0
    return r1, r2, ratio


# ------------------------------------------------------------ truncation


def direct_trajectory(h0: SpectralField, w0: SpectralField, background: Background, T: float, **options) -> list[PerturbationState]:
    state = make_perturbation_state(h0, w0, background, **options)
    return run_direct(state, background.index(T))


def sup_l2_gap(a: Sequence[np.ndarray], b: Sequence[np.ndarray], grid: Grid) -> float:
    return float(max(math.sqrt(grid.l2_sq(x - y)) for x, y in zip(a, b)))
