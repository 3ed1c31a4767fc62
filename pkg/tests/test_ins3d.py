import math

import numpy as np
import pytest

from nssl import initial, ins3d
from nssl.errors import ConfigurationError, StabilityError
from nssl.spectral import Grid, SpectralField

G3 = Grid((16, 16, 16))


@pytest.fixture(scope="module")
def background():
    return ins3d.Background(G3, initial.random_band(G3.horizontal(), 0.3, 1, 1.0, 2.0), 0.04)


def perturbation(h_amp=0.1, w_amp=0.05):
    h0 = initial.random_band(G3, h_amp, 3, 1.0, 2.0, ncomp=1, solenoidal=False)
    w0 = initial.random_band(G3, w_amp, 2, 1.0, 2.0)
    return h0, w0


class TestDensityTransport:
    def test_constant_preserved(self):
        h = SpectralField.from_physical(G3, np.full((1,) + G3.dims, 0.3))
        x = G3.coords()
        v = np.stack([np.sin(x[1]), np.cos(x[0]), np.zeros(G3.dims)])
        out = ins3d.density_advect(h, v, 0.1)
        assert np.max(np.abs(out.physical() - 0.3)) < 1e-14
        assert out.ncomp == 1

    def test_uniform_translation_is_a_shift(self):
        x = G3.coords()
        h = SpectralField.from_physical(G3, np.sin(x[0])[None])
        v = np.zeros((3,) + G3.dims)
        v[0] = G3.dx[0] / 0.1  # one cell per step
        out = ins3d.density_advect(h, v, 0.1).physical()[0]
        assert np.max(np.abs(out - np.sin(x[0] - G3.dx[0]))) < 1e-12

    def test_backtrace_limit(self):
        h = SpectralField.zeros(G3, 1)
        v = np.ones((3,) + G3.dims) * 100.0
        with pytest.raises(StabilityError):
            ins3d.density_advect(h, v, 0.1)

    def test_unknown_method(self):
        with pytest.raises(ConfigurationError):
            ins3d.density_advect(SpectralField.zeros(G3, 1), np.zeros((3,) + G3.dims), 0.1, method="upwind")


class TestPerturbation:
    def test_zero_perturbation_stays_zero(self, background):
        traj = ins3d.direct_trajectory(SpectralField.zeros(G3, 1), SpectralField.zeros(G3, 3), background, 0.2)
        assert max(np.max(np.abs(s.w.coeffs)) for s in traj) == 0.0

    def test_density_gate(self, background):
        h0 = initial.random_band(G3, 0.6, 3, ncomp=1, solenoidal=False)
        with pytest.raises(ConfigurationError):
            ins3d.make_perturbation_state(h0, SpectralField.zeros(G3, 3), background)

    def test_w_stays_solenoidal(self, background):
        traj = ins3d.direct_trajectory(*perturbation(), background, 0.2)
        for s in traj:
            div = 1j * sum(G3.kd[j] * s.w.coeffs[j] for j in range(3))
            assert math.sqrt(G3.l2_sq(div[None])) < 1e-12

    def test_homogeneous_case_matches_monolithic_solver(self, background):
        # with h = 0 the perturbation plus background solves the full 3D equations
        _, w0 = perturbation()
        T = 0.2
        traj = ins3d.direct_trajectory(SpectralField.zeros(G3, 1), w0, background, T)
        n = background.index(T)
        V0 = SpectralField(G3, background.velocity3d(0).coeffs + traj[0].w.coeffs)
        Vs = ins3d.ns3d_solve(V0, background.dt, n)
        gap = max(math.sqrt(G3.l2_sq(Vs[k] - background.velocity3d(k).coeffs - traj[k].w.coeffs))
                  for k in range(n + 1))
        assert gap < 1e-12

    def test_inner_fixed_point_contracts_like_h(self, background):
        traj = ins3d.direct_trajectory(*perturbation(), background, 0.12)
        hinf = max(float(np.max(np.abs(s.h.physical()))) for s in traj)
        assert all(max(s.inner_ratios, default=0.0) <= hinf + 0.05 for s in traj)


class TestPicard:
    def test_contracts_and_matches_direct(self, background):
        h0, w0 = perturbation()
        res = ins3d.picard_solve(h0, w0, background, 0.12, n_max=10, tol=1e-22)
        assert res.converged
        assert max(res.ratios()[1:]) <= 0.75
        direct = ins3d.direct_trajectory(h0, w0, background, 0.12)
        gap = ins3d.sup_l2_gap([s.w.coeffs for s in direct], res.final.w, G3)
        assert gap < 1e-12


class TestStability:
    def test_small_run_monitors(self):
        cfg = ins3d.StabilityConfig(dims=(16, 16, 16), dt=0.05, T=1.0)
        res = ins3d.stability_experiment(cfg)
        failed = [r.monitor for r in res.reports if r.failed]
        assert not failed
        assert math.isfinite(res.w_ratio) and res.failure_time is None
