import math

import numpy as np
import pytest

from nssl import initial, ins3d
from nssl import lagrangian as lg
from nssl.errors import CertifiedRegionError, ConfigurationError
from nssl.spectral import Grid

G = Grid((8, 8, 8))


class TestJacobianInverse:
    def test_identity(self):
        inv = lg.invert_jacobian(lg.identity_field(3, G.dims))
        assert np.array_equal(inv.A, lg.identity_field(3, G.dims))

    def test_nilpotent_series_terminates(self):
        eps = 0.3
        M = lg.identity_field(3, G.dims)
        M[0, 1] += eps
        inv = lg.invert_jacobian(M)
        expected = lg.identity_field(3, G.dims)
        expected[0, 1] -= eps
        assert np.max(np.abs(inv.A - expected)) == 0.0 and inv.terms <= 2

    def test_random_field_against_exact_inverse(self, rng):
        N = rng.standard_normal((3, 3) + G.dims)
        N *= 0.3 / lg.sup_norm(N)
        M = lg.identity_field(3, G.dims) + N
        inv = lg.invert_jacobian(M, 20)
        ex = lg.exact_inverse(M)
        assert np.max(np.abs(inv.A - ex)) <= 1e-10

    def test_outside_certified_region(self):
        with pytest.raises(CertifiedRegionError):
            lg.invert_jacobian(2.0 * lg.identity_field(3, G.dims))


class TestFlow:
    def test_zero_velocity(self):
        states = lg.integrate_flow(lg.zero_velocity(), G, 0.1, 1.0, warn=False)
        assert np.max(np.abs(states[-1].displacement)) == 0.0

    def test_constant_velocity_translates(self):
        states = lg.integrate_flow(lg.constant_velocity((1.0, 2.0, 0.5)), G, 0.1, 1.0, warn=False)
        d = states[-1].displacement
        assert np.allclose(d[0], 1.0) and np.allclose(d[1], 2.0) and np.allclose(d[2], 0.5)

    def test_rigid_rotation_closed_form(self):
        omega, T = 1.0, 1.0
        states = lg.integrate_flow(lg.rigid_rotation(omega), G, 1e-2, T, warn=False)
        y = G.coords()
        X = np.einsum("ij,j...->i...", lg.rotation_matrix(omega * T), y)
        assert np.max(np.abs(y + states[-1].displacement - X)) < 1e-8
        assert states[-1].det_gap() < 1e-10

    def test_avbd_bound_and_dxv(self):
        g2 = G.horizontal()
        bg = ins3d.Background(G, initial.random_band(g2, 0.3, 1, 1.0, 2.0), 0.05)
        traj = ins3d.direct_trajectory(initial.zero(G, 1), initial.zero(G, 3), bg, 1.0)
        flow = lg.flow_of_run(traj)
        for s in flow:
            if s.certified:
                assert s.avbd_margin() <= 1e-12
            assert s.dxv_ratio() <= 1.05


class TestConsistency:
    def test_frozen_density_with_zero_w(self):
        g = Grid((16, 16, 16))
        bg = ins3d.Background(g, initial.random_band(g.horizontal(), 0.3, 1, 1.0, 2.0), 0.02)
        h0 = initial.random_band(g, 0.1, 3, 1.0, 2.0, ncomp=1, solenoidal=False)
        traj = ins3d.direct_trajectory(h0, initial.zero(g, 3), bg, 0.2)
        res = lg.euler_lagrange_consistency(traj)
        assert res.density_gap <= 1e-4


class TestMarkers:
    def test_circle_geometry(self):
        c = lg.MarkerCurve.circle((0.0, 0.0, 0.0), 1.0, 256)
        assert abs(c.area() - math.pi) < 1e-3
        assert np.allclose(c.curvature(), 1.0, rtol=1e-3)
        assert abs(c.turning_variation() - 2 * math.pi) < 1e-9

    def test_curvature_constant_under_rotation(self):
        c = lg.MarkerCurve.circle((1.0, 0.5, 0.0), 0.7, 128)
        k0 = c.curvature()
        out = lg.advect_curve(c, lg.rigid_rotation(1.0), 1e-2, 1.0)
        k1 = out[-1].curvature()
        assert np.max(np.abs(k1 - k0)) < 1e-6

    def test_too_few_points(self):
        with pytest.raises(ConfigurationError):
            lg.MarkerCurve(np.zeros((3, 2)))

    def test_self_intersection_count(self):
        figure8 = np.array([[0, 0], [1, 1], [1, 0], [0, 1]], dtype=float)
        assert lg.MarkerCurve(figure8).self_intersections() > 0
        assert lg.MarkerCurve.circle((0, 0), 1.0, 32, ndim=2).self_intersections() == 0
