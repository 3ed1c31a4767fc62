import math

import numpy as np
import pytest

from nssl import estimates as est
from nssl.errors import ConfigurationError, DegenerateInputError, WindowError
from nssl.hns2d import MonitorConfig, hns2d_solve
from nssl.initial import taylor_green
from nssl.spectral import Grid, SpectralField, stokes_step


def single_mode(grid, k):
    x = grid.coords()
    return SpectralField.from_physical(grid, np.sin(k * x[0])[None])


class TestNorms:
    def test_lp_of_constant(self, grid3):
        arr = np.full((1,) + grid3.dims, 2.0)
        assert np.isclose(est.lp_of_array(arr, grid3, 2.0), 2.0 * math.sqrt(grid3.volume))
        assert est.lp_of_array(arr, grid3, math.inf) == 2.0

    def test_vector_magnitude_is_pointwise(self, grid2):
        arr = np.zeros((2,) + grid2.dims)
        arr[0], arr[1] = 3.0, 4.0
        assert est.lp_of_array(arr, grid2, math.inf) == 5.0

    def test_besov_single_shell(self, grid3):
        # |k| = 4 lies in shell j = 2, so the norm is 2^{2 s} ||f||_p
        f = single_mode(grid3, 4)
        s, p = 0.5, 4.0
        assert np.isclose(est.besov_norm(f, s, p), 2 ** (2 * s) * est.lp_norm(f, p), rtol=1e-12)

    def test_besov_rejects_bad_exponent(self, grid3):
        with pytest.raises(ConfigurationError):
            est.besov_norm(single_mode(grid3, 1), 1.0, 1.0)

    def test_shells_partition_nonzero_modes(self, grid3):
        shells = est.dyadic_shells(grid3)
        total = sum(m.astype(int) for m in shells.values())
        assert np.all(total[grid3.kmag > 0] == 1)
        assert total.flat[0] == 0

    def test_time_norm(self):
        t = np.linspace(0, 2, 201)
        assert np.isclose(est.time_norm(np.ones_like(t), t, 2.0), math.sqrt(2.0))
        assert est.time_norm([1.0, 3.0, 2.0], [0, 1, 2], math.inf) == 3.0

    def test_sumspace_b_only(self, grid3):
        f = single_mode(grid3, 1)
        val = est.sumspace_norm(None, [f] * 11, 4.0, 1.0)
        assert np.isclose(val, f.l2(), rtol=1e-12)


class TestNormSeries:
    def test_csv_roundtrip_is_exact(self, tmp_path):
        s = est.NormSeries()
        for i in range(5):
            s.add(0.1 * i, "v.L2", math.pi / (i + 1))
        back = est.NormSeries.from_csv(s.to_csv(tmp_path / "s.csv"))
        assert back.records == s.records

    def test_rejects_unknown_name_and_time_reversal(self):
        s = est.NormSeries()
        with pytest.raises(ConfigurationError):
            s.add(0.0, "not a norm", 1.0)
        s.add(1.0, "v.L2", 1.0)
        with pytest.raises(ConfigurationError):
            s.add(0.5, "v.L2", 1.0)

    def test_rejects_nan(self):
        with pytest.raises(ConfigurationError):
            est.NormSeries().add(0.0, "v.L2", float("nan"))


class TestReports:
    def test_report_roundtrip(self):
        reps = [est.check("a.b", "anchor text", 1.0, 2.0, True),
                est.check("c.d", "other", 3.0, 2.0, False, note="x=1"),
                est.check("e.f", "third", 0.5, 1.0, None)]
        back = est.parse_reports("\n".join(r.to_text() for r in reps))
        assert [r.verdict for r in back] == [est.PASS, est.FAIL, est.REPORT]
        assert back[1].note == "x=1" and back[1].failed

    def test_zero_rhs_ratio(self):
        assert est.check("a.b", "x", 0.0, 0.0, True).ratio == 0.0


class TestDecayFit:
    def test_exact_power_law(self):
        t = np.linspace(1, 100, 200)
        fit = est.decay_fit(t, 3 * t**-1.5, (10, 100))
        assert abs(fit.slope + 1.5) < 1e-12 and fit.r2 > 0.999999

    def test_too_few_samples(self):
        with pytest.raises(WindowError):
            est.decay_fit([1.0, 2.0, 3.0], [1.0, 0.5, 0.3], (1, 3))


class TestMaxreg:
    def test_zero_data_is_degenerate(self, grid3):
        traj = stokes_step(SpectralField.zeros(grid3, 3), None, 0.1, 3)
        with pytest.raises(DegenerateInputError):
            est.maxreg_ratio(traj, None, None, 4.0)


class TestWeighted:
    def test_single_mode_peak_location(self):
        # t^2 ||dt v||^2 = t^2 |k|^4 e^{-2|k|^2 t} ||v0||^2 peaks at t = 1/|k|^2
        g = Grid((16, 16))
        v0 = taylor_green(g, 1.0)  # |k|^2 = 2
        run = hns2d_solve(v0, 5e-3, 2.0, MonitorConfig(record_every=1))
        ws = est.weighted_series(run.points())
        tp = est.peak_time(ws["t"], ws["t2_dtv_sq"])
        assert abs(tp / 0.5 - 1) < 0.05

    def test_taylor_green_monitors_bounded(self):
        g = Grid((16, 16))
        run = hns2d_solve(taylor_green(g, 1.0), 1e-2, 4.0)
        reps = est.weighted_monitors(run.points())
        assert all(r.verdict == est.PASS for r in reps)
