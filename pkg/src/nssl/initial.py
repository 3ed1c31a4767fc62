"""Named initial-data generators.

Velocity generators return divergence-free fields (three components; on a
2D grid the third component is the passive v3).  Density generators return
the deviation h0 = rho0 - 1 and refuse data with ||h0||_inf > 1/2.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError
from .spectral import Grid, SpectralField, project_coeffs

H_LINF_GATE = 0.5


def _periodic_offsets(grid: Grid, center: Sequence[float] | None) -> list[np.ndarray]:
    center = [L / 2 for L in grid.box_lengths] if center is None else list(center)
    out = []
    for j, (c, L) in enumerate(zip(center, grid.box_lengths)):
        x = grid.axis_coords(j) - c
        x = (x + L / 2) % L - L / 2
        shape = [1] * grid.ndim
        shape[j] = x.size
        out.append(x.reshape(shape))
    return out


def _scale_to_max(c: np.ndarray, grid: Grid, amplitude: float, ncomp_norm: int | None = None) -> np.ndarray:
    phys = grid.inv(c if ncomp_norm is None else c[:ncomp_norm])
    peak = float(np.max(np.sqrt(np.sum(phys**2, axis=0))))
    return c * (amplitude / peak) if peak > 0 else c


def zero(grid: Grid, ncomp: int = 3, **_) -> SpectralField:
    return SpectralField.zeros(grid, ncomp)


def taylor_green(grid: Grid, amplitude: float = 1.0, t: float = 0.0, boost: Sequence[float] | None = None,
                 v3: float = 0.0, **_) -> SpectralField:
    """Taylor-Green cells at time ``t`` of the exact viscous decay.

    2D: (-cos x1 sin x2, sin x1 cos x2) e^{-2 k^2 t} on [0, L)^2 with k = 2pi/L
    (the box must be square), optionally in a frame moving with constant
    velocity ``boost``, which keeps it an exact solution.  3D: the classical
    (sin x cos y cos z, -cos x sin y cos z, 0) initial cells.
    """
    L = grid.box_lengths[0]
    if any(not math.isclose(Lj, L) for Lj in grid.box_lengths):
        raise ConfigurationError("taylor-green needs a cubic box")
    k = 2 * np.pi / L
    x = [grid.axis_coords(j).reshape([-1 if i == j else 1 for i in range(grid.ndim)]) for j in range(grid.ndim)]
    if grid.ndim == 2:
        c = np.zeros(2) if boost is None else np.asarray(boost, dtype=float)
        x1, x2 = k * (x[0] - c[0] * t), k * (x[1] - c[1] * t)
        decay = amplitude * np.exp(-2 * k**2 * t)
        u = np.zeros((3,) + grid.dims)
        u[0] = c[0] - decay * np.cos(x1) * np.sin(x2)
        u[1] = c[1] + decay * np.sin(x1) * np.cos(x2)
        u[2] = v3
        return SpectralField.from_physical(grid, u)
    x1, x2, x3 = (k * xi for xi in x)
    decay = amplitude * np.exp(-3 * k**2 * t)
    u = np.zeros((3,) + grid.dims)
    u[0] = decay * np.sin(x1) * np.cos(x2) * np.cos(x3)
    u[1] = -decay * np.cos(x1) * np.sin(x2) * np.cos(x3)
    return SpectralField.from_physical(grid, u)


def gaussian_vortex(grid: Grid, amplitude: float = 1e-3, sigma: float = 1.0,
                    center: Sequence[float] | None = None, **_) -> SpectralField:
    """Velocity of a Gaussian vorticity blob (2D), scaled to max|v| = amplitude.

    The vorticity mean is removed so that the field is periodic.
    """
    if grid.ndim != 2:
        raise ConfigurationError("gaussian vortex is a 2D generator")
    d = _periodic_offsets(grid, center)
    omega = np.exp(-(d[0] ** 2 + d[1] ** 2) / (2 * sigma**2))
    wc = grid.fwd(omega)
    k2 = grid.k2
    psi = np.where(k2 > 0, -wc / np.where(k2 > 0, k2, 1.0), 0.0)
    c = np.zeros((3,) + grid.spectral_shape, dtype=complex)
    c[0] = -1j * grid.kd[1] * psi
    c[1] = 1j * grid.kd[0] * psi
    return SpectralField(grid, _scale_to_max(c, grid, amplitude))


def gaussian_bump(grid: Grid, amplitude: float = 1.0, sigma: float = 1.0,
                  center: Sequence[float] | None = None, ncomp: int = 1, **_) -> SpectralField:
    """Scalar Gaussian with peak ``amplitude`` (ncomp=1), or the Gaussian-vorticity velocity (ncomp=3, 2D)."""
    if ncomp == 3:
        return gaussian_vortex(grid, amplitude, sigma, center)
    d = _periodic_offsets(grid, center)
    g = amplitude * np.exp(-sum(x**2 for x in d) / (2 * sigma**2))
    return SpectralField.from_physical(grid, g)


def _band_modes(ndim: int, kmin: float, kmax: float) -> list[tuple[int, ...]]:
    """Integer modes with kmin <= |m| <= kmax in the half space (first nonzero entry positive)."""
    r = int(math.floor(kmax))
    axes = [range(-r, r + 1)] * ndim
    out = []
    for m in np.ndindex(*(2 * r + 1,) * ndim):
        mm = tuple(int(axes[j][m[j]]) for j in range(ndim))
        nz = [x for x in mm if x != 0]
        if nz and nz[0] > 0 and kmin <= math.sqrt(sum(x * x for x in mm)) <= kmax:
            out.append(mm)
    return out


def random_band(grid: Grid, amplitude: float = 1.0, seed: int = 0, kmin: float = 1.0, kmax: float = 4.0,
                ncomp: int = 3, solenoidal: bool = True, **_) -> SpectralField:
    """Seeded random field with spectral support kmin <= |m| <= kmax (integer mode units).

    One Gaussian cosine/sine pair is drawn per mode and component, so the
    same seed gives the same continuous field on every grid that resolves
    the band.  Velocity fields are projected; the result is scaled to max
    pointwise magnitude ``amplitude``.
    """
    modes = _band_modes(grid.ndim, kmin, kmax)
    nyq = min(n // 2 for n in grid.dims)
    if modes and max(max(abs(x) for x in m) for m in modes) >= nyq:
        raise ConfigurationError(f"band kmax={kmax} is not resolved by grid {grid.dims}")
    c = _band_coeffs(grid, modes, seed, ncomp, solenoidal)
    # scale on a grid-independent reference sampling so that every grid sees the same field
    n_ref = 16 * max(1, math.ceil(kmax))
    ref = Grid((n_ref,) * grid.ndim, grid.box_lengths)
    c_ref = c if ref.dims == grid.dims else _band_coeffs(ref, modes, seed, ncomp, solenoidal)
    peak = float(np.max(np.sqrt(np.sum(ref.inv(c_ref) ** 2, axis=0))))
    return SpectralField(grid, c * (amplitude / peak) if peak > 0 else c)


def _band_coeffs(grid: Grid, modes: list[tuple[int, ...]], seed: int, ncomp: int, solenoidal: bool) -> np.ndarray:
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal((len(modes), ncomp, 2))
    x = grid.coords()
    phys = np.zeros((ncomp,) + grid.dims)
    for (m, ab) in zip(modes, coef):
        ph = sum(2 * np.pi * mj * x[j] / grid.box_lengths[j] for j, mj in enumerate(m) if mj)
        c, s_ = np.cos(ph), np.sin(ph)
        for i in range(ncomp):
            phys[i] += ab[i, 0] * c + ab[i, 1] * s_
    c = grid.fwd(phys)
    if ncomp >= grid.ndim and solenoidal:
        c = project_coeffs(grid, c)
    return c


def smooth_ball(grid: Grid, radius: float, width: float, center: Sequence[float] | None = None) -> np.ndarray:
    """Indicator of a ball smoothed across a layer of the given width (values in [0, 1])."""
    d = _periodic_offsets(grid, center)
    r = np.sqrt(sum(x**2 for x in d))
    if width <= 0:
        return (r <= radius).astype(float)
    return 0.5 * (1.0 - erf((r - radius) / (math.sqrt(2.0) * width)))


def patch_ball(grid: Grid, eta: float = 0.1, radius: float | None = None, width: float | None = None,
               center: Sequence[float] | None = None, **_) -> SpectralField:
    """h0 = -eta * (indicator of a ball, mollified at the grid scale)."""
    radius = min(grid.box_lengths) / 8 if radius is None else radius
    width = 1.5 * max(grid.dx) if width is None else width
    h = -eta * smooth_ball(grid, radius, width, center)
    return density(SpectralField.from_physical(grid, h))


def density(h0: SpectralField, gate: float = H_LINF_GATE) -> SpectralField:
    """Validate the density-deviation gate ||h0||_inf <= 1/2."""
    hinf = float(np.max(np.abs(h0.physical())))
    if hinf > gate + 1e-12:
        raise ConfigurationError(
            f"||h0||_inf = {hinf:.4g} exceeds {gate}: density must stay within [1/2, 3/2] of the reference"
        )
    return h0


def smooth_density(grid: Grid, amplitude: float = 0.1, seed: int = 0, kmax: float = 3.0, **kw) -> SpectralField:
    """Smooth random density deviation with max |h0| = amplitude."""
    return density(random_band(grid, amplitude, seed, 1.0, kmax, ncomp=1, solenoidal=False))


GENERATORS: dict[str, Callable[..., SpectralField]] = {
    "zero": zero,
    "taylor-green": taylor_green,
    "gaussian-bump": gaussian_bump,
    "random-band": random_band,
    "patch-ball": patch_ball,
}


def initial_data(name: str, grid: Grid, seed: int = 0, **params) -> SpectralField:
    """Look up and evaluate a generator; unknown names raise ConfigurationError."""
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ConfigurationError(f"unknown generator {name!r}; known: {sorted(GENERATORS)}") from None
    if name == "random-band":
        params["seed"] = seed
    return gen(grid, **params)
