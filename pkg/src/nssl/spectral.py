"""Periodic-box spectral infrastructure.

Fields are stored as real-to-complex Fourier coefficients (``rfftn`` layout,
last axis halved) normalised so that the k=0 coefficient equals the spatial
mean.  Component index comes first: a vector field on a 3D grid has
coefficient shape ``(3, n1, n2, n3 // 2 + 1)``.

Derivative operators use the signed wavenumber with the Nyquist entry set to
zero so that odd derivatives of real fields stay real.  The Laplacian keeps
the full |k|^2.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError, DivergenceError, InconsistentDataError

_WORKERS = max(1, int(os.environ.get("NSSL_THREADS", "1") or 1))


def set_workers(n: int) -> None:
    """Set the FFT worker count (pocketfft threads; results do not depend on it)."""
    global _WORKERS
    _WORKERS = max(1, int(n))


def get_workers() -> int:
    return _WORKERS


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on ``[0, L_1) x ... x [0, L_d)``."""

    dims: tuple[int, ...]
    box_lengths: tuple[float, ...] = None  # type: ignore[assignment]
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3):
            raise ConfigurationError(f"grid must be 2D or 3D, got dims={dims}")
        for n in dims:
            if n < 8 or n % 2:
                raise ConfigurationError(f"grid dims must be even and >= 8, got {dims}")
        lengths = self.box_lengths
        if lengths is None:
            lengths = (2 * np.pi,) * len(dims)
        lengths = tuple(float(x) for x in lengths)
        if len(lengths) != len(dims) or any(not (x > 0) for x in lengths):
            raise ConfigurationError(f"box lengths must be {len(dims)} positive reals, got {lengths}")
        if not (0 < self.dealias_fraction <= 1):
            raise ConfigurationError(f"dealias_fraction must lie in (0, 1], got {self.dealias_fraction}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "box_lengths", lengths)
        object.__setattr__(self, "dealias_fraction", float(self.dealias_fraction))

    # ----------------------------------------------------------- geometry
    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.ndim, 0))

    @property
    def npoints(self) -> int:
        return int(np.prod(self.dims))

    @property
    def dx(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.box_lengths, self.dims))

    @property
    def volume(self) -> float:
        return float(np.prod(self.box_lengths))

    @property
    def cell_volume(self) -> float:
        return self.volume / self.npoints

    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return self.dims[:-1] + (self.dims[-1] // 2 + 1,)

    def coords(self) -> np.ndarray:
        """Physical coordinates, shape ``(ndim, *dims)``."""
        axes1d = [np.arange(n) * (L / n) for n, L in zip(self.dims, self.box_lengths)]
        return np.array(np.meshgrid(*axes1d, indexing="ij"))

    def axis_coords(self, j: int) -> np.ndarray:
        n, L = self.dims[j], self.box_lengths[j]
        return np.arange(n) * (L / n)

    def horizontal(self) -> "Grid":
        """The 2D grid spanned by the first two axes."""
        return Grid(self.dims[:2], self.box_lengths[:2], self.dealias_fraction)

    # -------------------------------------------------------- wavenumbers
    def _mode_index(self, j: int) -> np.ndarray:
        n = self.dims[j]
        if j == self.ndim - 1:
            m = np.arange(n // 2 + 1, dtype=float)
        else:
            m = np.fft.fftfreq(n, d=1.0 / n)
        shape = [1] * self.ndim
        shape[j] = m.size
        return m.reshape(shape)

    @cached_property
    def mode_indices(self) -> tuple[np.ndarray, ...]:
        """Signed integer alias m~ per axis, broadcastable over the spectral shape."""
        return tuple(self._mode_index(j) for j in range(self.ndim))

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Physical wavenumbers 2*pi*m~/L_j (Nyquist kept)."""
        return tuple(2 * np.pi * m / L for m, L in zip(self.mode_indices, self.box_lengths))

    @cached_property
    def kd(self) -> tuple[np.ndarray, ...]:
        """Derivative wavenumbers: Nyquist entries zeroed."""
        out = []
        for j, k in enumerate(self.wavenumbers):
            k = k.copy()
            k[np.abs(self.mode_indices[j]) == self.dims[j] // 2] = 0.0
            out.append(k)
        return tuple(out)

    @cached_property
    def k2(self) -> np.ndarray:
        return sum(np.broadcast_to(k, self.spectral_shape) ** 2 for k in self.wavenumbers)

    @cached_property
    def kd2(self) -> np.ndarray:
        return sum(np.broadcast_to(k, self.spectral_shape) ** 2 for k in self.kd)

    @cached_property
    def kmag(self) -> np.ndarray:
        return np.sqrt(self.k2)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        keep = np.ones(self.spectral_shape, dtype=bool)
        for j, m in enumerate(self.mode_indices):
            keep &= np.abs(m) <= self.dealias_fraction * (self.dims[j] / 2)
        return keep

    @cached_property
    def parseval_weights(self) -> np.ndarray:
        """Multiplicity of each stored coefficient in the full spectrum."""
        n = self.dims[-1]
        w = np.full(n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0  # n is even: last stored mode is Nyquist
        shape = [1] * (self.ndim - 1) + [w.size]
        return np.broadcast_to(w.reshape(shape), self.spectral_shape)

    # ---------------------------------------------------------- transforms
    def fwd(self, arr: np.ndarray) -> np.ndarray:
        return sfft.rfftn(arr, axes=self.axes, norm="forward", workers=_WORKERS)

    def inv(self, coeffs: np.ndarray) -> np.ndarray:
        return sfft.irfftn(coeffs, s=self.dims, axes=self.axes, norm="forward", workers=_WORKERS)

    def l2_sq(self, coeffs: np.ndarray) -> float:
        """Squared L2 norm over the box from coefficients (all leading axes summed)."""
        return float(self.volume * np.sum(self.parseval_weights * (coeffs.real**2 + coeffs.imag**2)))


def _as_components(grid: Grid, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.shape == grid.dims:
        return arr[None]
    if arr.ndim == grid.ndim + 1 and arr.shape[1:] == grid.dims:
        return arr
    raise ConfigurationError(f"array shape {arr.shape} does not match grid dims {grid.dims}")


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real field on a periodic grid held by its Fourier coefficients."""

    grid: Grid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex, copy=True)
        if c.shape == self.grid.spectral_shape:
            c = c[None]
        if c.shape[1:] != self.grid.spectral_shape:
            raise ConfigurationError(
                f"coefficient shape {c.shape} does not match grid spectral shape {self.grid.spectral_shape}"
            )
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_physical(cls, grid: Grid, arr) -> "SpectralField":
        return cls(grid, grid.fwd(_as_components(grid, arr)))

    @classmethod
    def zeros(cls, grid: Grid, ncomp: int = 1) -> "SpectralField":
        return cls(grid, np.zeros((ncomp,) + grid.spectral_shape, dtype=complex))

    @property
    def ncomp(self) -> int:
        return self.coeffs.shape[0]

    def physical(self) -> np.ndarray:
        """Samples on the grid, shape ``(ncomp, *dims)``."""
        return self.grid.inv(self.coeffs)

    def component(self, i: int) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs[i : i + 1])

    def mean(self) -> np.ndarray:
        return self.coeffs[(slice(None),) + (0,) * self.grid.ndim].real.copy()

    def l2(self) -> float:
        return float(np.sqrt(self.grid.l2_sq(self.coeffs)))

    def full_coeffs(self) -> np.ndarray:
        """Coefficients in the full (``fftn``) layout."""
        return sfft.fftn(self.physical(), axes=self.grid.axes, norm="forward")

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coeffs)))

    def _check(self, other: "SpectralField"):
        if other.grid != self.grid or other.ncomp != self.ncomp:
            raise ConfigurationError("fields live on different grids or have different component counts")

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, a: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * a)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.grid, -self.coeffs)


# ---------------------------------------------------------------- transforms


def transform(grid: Grid, field_physical) -> SpectralField:
    """Physical samples -> SpectralField."""
    return SpectralField.from_physical(grid, field_physical)


def inverse_transform(field: SpectralField) -> np.ndarray:
    return field.physical()


# ------------------------------------------------------ coefficient kernels
# These act on raw coefficient arrays (leading component axis) and are the
# building blocks the solvers use directly.


def grad_coeffs(grid: Grid, c: np.ndarray) -> np.ndarray:
    """Gradient: ``(..., *spec) -> (..., ndim, *spec)``."""
    return np.stack([1j * k * c for k in grid.kd], axis=-grid.ndim - 1)


def div_coeffs(grid: Grid, c: np.ndarray, ndir: int | None = None) -> np.ndarray:
    """Divergence over the first ``ndir`` components (default: grid.ndim)."""
    ndir = grid.ndim if ndir is None else ndir
    return sum(1j * grid.kd[j] * c[j] for j in range(ndir))


def project_coeffs(grid: Grid, c: np.ndarray) -> np.ndarray:
    """Leray projection of the first ``grid.ndim`` components; others untouched."""
    nd = grid.ndim
    out = np.array(c, dtype=complex, copy=True)
    kd2 = grid.kd2
    safe = np.where(kd2 > 0, kd2, 1.0)
    kdotc = sum(grid.kd[j] * c[j] for j in range(nd))
    factor = np.where(kd2 > 0, kdotc / safe, 0.0)
    for j in range(nd):
        out[j] = c[j] - grid.kd[j] * factor
    return out


def grad_part_coeffs(grid: Grid, c: np.ndarray) -> np.ndarray:
    """Complement of the Leray projection: grad Lap^{-1} div of the first ndim components."""
    nd = grid.ndim
    kd2 = grid.kd2
    safe = np.where(kd2 > 0, kd2, 1.0)
    kdotc = sum(grid.kd[j] * c[j] for j in range(nd))
    factor = np.where(kd2 > 0, kdotc / safe, 0.0)
    return np.stack([grid.kd[j] * factor for j in range(nd)])


def dealias_coeffs(grid: Grid, c: np.ndarray) -> np.ndarray:
    return c * grid.dealias_mask


def product_coeffs(grid: Grid, a_phys: np.ndarray, dealias: bool = True) -> np.ndarray:
    c = grid.fwd(a_phys)
    return c * grid.dealias_mask if dealias else c


# --------------------------------------------------------------- operators


def gradient(f: SpectralField) -> SpectralField:
    """Gradient of a scalar field (ncomp=1) as an ndim-component field."""
    if f.ncomp != 1:
        raise ConfigurationError("gradient expects a scalar field")
    return SpectralField(f.grid, grad_coeffs(f.grid, f.coeffs[0]))


def divergence(u: SpectralField, ndir: int | None = None) -> SpectralField:
    return SpectralField(u.grid, div_coeffs(u.grid, u.coeffs, ndir)[None])


def laplacian(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, -f.grid.k2 * f.coeffs)


def vorticity2d(u: SpectralField) -> SpectralField:
    """Horizontal vorticity d1 u2 - d2 u1."""
    g = u.grid
    return SpectralField(g, (1j * g.kd[0] * u.coeffs[1] - 1j * g.kd[1] * u.coeffs[0])[None])


def dealias(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, dealias_coeffs(f.grid, f.coeffs))


def leray_project(u: SpectralField) -> SpectralField:
    """Remove the gradient part of a velocity field.

    On a 3D grid the field must have three components.  On a 2D grid a
    two- or three-component field is accepted; only the horizontal pair is
    projected, the third component passes through unchanged.
    """
    g = u.grid
    if u.ncomp < g.ndim or (g.ndim == 3 and u.ncomp != 3) or u.ncomp > 3:
        raise ConfigurationError(f"cannot project a {u.ncomp}-component field on a {g.ndim}D grid")
    return SpectralField(g, project_coeffs(g, u.coeffs))


def poisson_solve(f: SpectralField, rtol: float = 1e-12) -> SpectralField:
    """Solve Lap u = f for zero-mean f; the result has zero mean."""
    if f.ncomp != 1:
        raise ConfigurationError("poisson_solve expects a scalar field")
    g = f.grid
    mean = abs(f.mean()[0])
    scale = f.l2() / np.sqrt(g.volume)
    if mean > rtol * max(scale, np.finfo(float).tiny) and mean > 0:
        raise InconsistentDataError(f"Poisson source has nonzero mean {mean:.3e}")
    k2 = g.k2
    safe = np.where(k2 > 0, k2, 1.0)
    return SpectralField(g, np.where(k2 > 0, -f.coeffs / safe, 0.0))


def mollify(f: SpectralField, epsilon: float) -> SpectralField:
    """Gaussian smoothing: multiply by exp(-eps^2 |k|^2 / 2)."""
    if epsilon < 0:
        raise ConfigurationError("epsilon must be nonnegative")
    if epsilon == 0:
        return f
    return SpectralField(f.grid, f.coeffs * np.exp(-0.5 * epsilon**2 * f.grid.k2))


# ------------------------------------------------------------------ Stokes


@dataclass(frozen=True)
class StokesResult:
    u: SpectralField
    gradQ: SpectralField
    u_t: SpectralField
    t: float


def _phi1_phi2(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # phi1 = (1 - e^-z)/z, phi2 = (z - 1 + e^-z)/z^2, with series near 0
    small = z < 1e-4
    zs = np.where(small, 1.0, z)
    em1 = np.expm1(-zs)
    phi1 = np.where(small, 1 - z / 2 + z**2 / 6, -em1 / zs)
    phi2 = np.where(small, 0.5 - z / 6 + z**2 / 24, (zs + em1) / zs**2)
    return phi1, phi2


def _forcing_sampler(f, grid: Grid, ncomp: int, dt: float) -> Callable[[int], np.ndarray]:
    if f is None:
        zero = np.zeros((ncomp,) + grid.spectral_shape, dtype=complex)
        return lambda n: zero
    if isinstance(f, SpectralField):
        return lambda n: f.coeffs
    if callable(f):
        return lambda n: f(n * dt).coeffs
    seq = list(f)
    return lambda n: seq[n].coeffs


def stokes_step(u0: SpectralField, f, dt: float, nsteps: int) -> list[StokesResult]:
    """Integrate du/dt - Lap u + grad Q = f, div u = 0.

    ``f`` may be None, a steady SpectralField, a callable ``t -> SpectralField``
    or a sequence of ``nsteps + 1`` samples at ``t_n = n*dt``.  Diffusion is
    integrated exactly per mode; the projected forcing is taken piecewise
    linear in time (exponential time differencing), which is exact for
    steady forcing.  Returns the trajectory including t=0.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    g = u0.grid
    sample = _forcing_sampler(f, g, u0.ncomp, dt)
    lam = g.k2
    E = np.exp(-lam * dt)
    phi1, phi2 = _phi1_phi2(lam * dt)

    def result(n, uc, fc):
        pf = project_coeffs(g, fc)
        gq = fc - pf
        ut = pf - lam * uc
        return StokesResult(SpectralField(g, uc), SpectralField(g, gq), SpectralField(g, ut), n * dt)

    uc = project_coeffs(g, u0.coeffs)
    f_old = np.asarray(sample(0))
    out = [result(0, uc, f_old)]
    pf_old = project_coeffs(g, f_old)
    for n in range(nsteps):
        f_new = np.asarray(sample(n + 1))
        pf_new = project_coeffs(g, f_new)
        uc = E * uc + dt * (phi1 * pf_old + phi2 * (pf_new - pf_old))
        if not np.all(np.isfinite(uc)):
            raise DivergenceError(f"non-finite Stokes coefficients at step {n + 1}", step=n + 1)
        out.append(result(n + 1, uc, f_new))
        pf_old = pf_new
    return out


def exp_decay_integral(grid: Grid, c_old: np.ndarray, c_new: np.ndarray, dt: float) -> float:
    """Integral over one step of ||grad u||^2 assuming per-mode exponential evolution.

    Each mode's energy is interpolated as a*exp(-r t) between its endpoint
    values, which is exact for pure heat flow.
    """
    w = grid.parseval_weights
    a = np.sum(np.abs(c_old) ** 2, axis=0) * w
    b = np.sum(np.abs(c_new) ** 2, axis=0) * w
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where((a > 0) & (b > 0), a / np.where(b > 0, b, 1.0), 1.0)
        lr = np.log(ratio)
        mean = np.where(np.abs(lr) > 1e-8, (a - b) / np.where(lr != 0, lr, 1.0), 0.5 * (a + b))
    mean = np.where((a > 0) & (b > 0), mean, 0.5 * (a + b))
    return float(grid.volume * dt * np.sum(grid.k2 * mean))
