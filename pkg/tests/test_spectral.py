import math

import numpy as np
import pytest

from nssl import initial
from nssl.errors import ConfigurationError
from nssl.spectral import (Grid, SpectralField, divergence, gradient, laplacian, leray_project, poisson_solve,
                           stokes_step)


class TestGrid:
    def test_rejects_odd_and_small_dims(self):
        with pytest.raises(ConfigurationError):
            Grid((15, 16))
        with pytest.raises(ConfigurationError):
            Grid((4, 4))

    def test_rejects_bad_box(self):
        with pytest.raises(ConfigurationError):
            Grid((16, 16), (1.0, -1.0))

    def test_default_box_is_two_pi(self, grid3):
        assert grid3.box_lengths == (2 * math.pi,) * 3
        assert np.isclose(grid3.volume, (2 * math.pi) ** 3)


class TestTransforms:
    def test_roundtrip(self, grid3, rng):
        a = rng.standard_normal((3,) + grid3.dims)
        f = SpectralField.from_physical(grid3, a)
        assert np.max(np.abs(f.physical() - a)) < 1e-13

    def test_parseval(self, grid2, rng):
        a = rng.standard_normal((1,) + grid2.dims)
        f = SpectralField.from_physical(grid2, a)
        assert np.isclose(f.l2() ** 2, grid2.cell_volume * np.sum(a**2), rtol=1e-12)

    def test_derivative_of_sine(self, grid2):
        x, y = grid2.coords()
        f = SpectralField.from_physical(grid2, np.sin(3 * x) * np.cos(2 * y))
        g = gradient(f).physical()
        assert g.shape == (2,) + grid2.dims
        assert np.max(np.abs(g[0] - 3 * np.cos(3 * x) * np.cos(2 * y))) < 1e-12
        lap = laplacian(f).physical()[0]
        assert np.max(np.abs(lap + 13 * np.sin(3 * x) * np.cos(2 * y))) < 1e-11


class TestLeray:
    def test_projection_is_divergence_free_and_idempotent(self, grid3, rng):
        u = SpectralField.from_physical(grid3, rng.standard_normal((3,) + grid3.dims))
        p = leray_project(u)
        assert divergence(p).l2() < 1e-12 * max(1.0, u.l2())
        assert (leray_project(p) - p).l2() < 1e-12 * p.l2()

    def test_gradient_is_annihilated(self, grid3):
        x = grid3.coords()
        phi = SpectralField.from_physical(grid3, np.sin(x[0]) * np.cos(2 * x[1]) * np.sin(x[2]))
        assert leray_project(gradient(phi)).l2() < 1e-12

    def test_poisson(self, grid2):
        x, y = grid2.coords()
        u = np.sin(x) * np.sin(2 * y)
        f = SpectralField.from_physical(grid2, -5 * u)
        assert np.max(np.abs(poisson_solve(f).physical()[0] - u)) < 1e-12


class TestStokes:
    def test_single_mode_decay_is_exact(self, grid3):
        x = grid3.coords()
        u = np.zeros((3,) + grid3.dims)
        u[1] = np.sin(2 * x[0])
        u0 = SpectralField.from_physical(grid3, u)
        traj = stokes_step(u0, None, 0.01, 10)
        exact = u[1] * math.exp(-4 * 0.1)
        assert np.max(np.abs(traj[-1].u.physical()[1] - exact)) < 1e-13

    def test_steady_gradient_forcing_goes_to_pressure(self, grid3):
        x = grid3.coords()
        f = np.zeros((3,) + grid3.dims)
        f[0] = np.cos(x[0])
        traj = stokes_step(SpectralField.zeros(grid3, 3), SpectralField.from_physical(grid3, f), 0.1, 5)
        assert traj[-1].u.l2() < 1e-13
        assert np.max(np.abs(traj[-1].gradQ.physical()[0] - f[0])) < 1e-12

    def test_random_band_is_solenoidal(self, grid3):
        u = initial.random_band(grid3, 1.0, seed=4)
        assert divergence(u).l2() < 1e-12
