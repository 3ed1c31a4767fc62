import math

import numpy as np
import pytest

from nssl import hns2d, initial
from nssl.errors import ConfigurationError, StabilityError
from nssl.spectral import Grid, SpectralField


def tg_error(n, dt, T, boost=(0.7, 0.4)):
    g = Grid((n, n))
    v0 = initial.taylor_green(g, 1.0, boost=boost)
    run = hns2d.hns2d_solve(v0, dt, T, hns2d.MonitorConfig(record_every=10**6, keep_states=False))
    exact = initial.taylor_green(g, 1.0, t=T, boost=boost)
    return float(np.max(np.abs(run.states[-1].v.physical() - exact.physical())))


class TestStep:
    def test_zero_stays_zero(self, grid2):
        run = hns2d.hns2d_solve(SpectralField.zeros(grid2, 3), 0.1, 1.0)
        assert all(d.energy == 0 for d in run.diagnostics)
        assert not any(r.failed for r in run.reports)

    def test_unboosted_taylor_green_is_exact_in_space(self):
        # the advection of a TG cell is a pure gradient, so only the pressure is affected
        assert tg_error(32, 0.01, 0.5, boost=None) < 1e-12

    def test_boosted_taylor_green_second_order(self):
        e1, e2 = tg_error(32, 0.02, 0.4), tg_error(32, 0.01, 0.4)
        assert math.log2(e1 / e2) > 1.9

    def test_cfl_violation(self, grid2):
        v0 = initial.taylor_green(grid2, 10.0)
        with pytest.raises(StabilityError):
            hns2d.hns2d_solve(v0, 0.5, 1.0)

    def test_rejects_3d_grid(self, grid3):
        with pytest.raises(ConfigurationError):
            hns2d.make_state(SpectralField.zeros(grid3, 3))

    def test_horizontal_divergence_stays_zero(self, grid2):
        v0 = initial.random_band(grid2, 0.5, seed=7)
        run = hns2d.hns2d_solve(v0, 0.01, 0.5, hns2d.MonitorConfig(record_every=10))
        assert max(d.extra["div_h"] for d in run.diagnostics) < 1e-12


class TestMonitors:
    def test_random_band_suite_passes(self, grid2):
        v0 = initial.random_band(grid2, 0.5, seed=1)
        run = hns2d.hns2d_solve(v0, 0.01, 2.0, hns2d.MonitorConfig(record_every=5))
        by_id = {r.monitor: r for r in run.reports}
        for key in ("hns2d.energy", "hns2d.vorticity_Lp2", "hns2d.vorticity_Lp4", "hns2d.vorticity_Lp6",
                    "hns2d.v3_max", "hns2d.mean"):
            assert not by_id[key].failed, by_id[key].to_text()

    def test_energy_balance_is_tight(self, grid2):
        v0 = initial.taylor_green(grid2, 1.0)
        run = hns2d.hns2d_solve(v0, 0.01, 1.0)
        e0 = run.diagnostics[0].energy
        drift = max(abs(d.energy + 2 * d.dissipation - e0) for d in run.diagnostics)
        assert drift < 1e-6 * e0

    def test_series_names(self, grid2):
        run = hns2d.hns2d_solve(initial.taylor_green(grid2, 1.0), 0.01, 0.1)
        names = run.series.names()
        assert "v.energy" in names and "omega.Lp:2" in names and "v3.Linf" in names


class TestDecayProbe:
    def test_heat_flow_matches_linear_limit(self):
        g = Grid((64, 64), (32.0, 32.0))
        v0 = initial.gaussian_vortex(g, 1e-6, 1.5)
        run = hns2d.hns2d_solve(v0, 0.1, 1.0, hns2d.MonitorConfig(record_every=10))
        heat = hns2d.heat_flow(v0, 1.0)
        assert (run.states[-1].v - heat).l2() < 1e-9 * heat.l2()
