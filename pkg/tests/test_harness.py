import json
import math

import numpy as np
import pytest

from nssl import cli, harness, initial
from nssl.errors import ConfigurationError, DivergenceError
from nssl.estimates import NormSeries
from nssl.snapshot import read_snapshot, snapshot_info, write_snapshot
from nssl.spectral import Grid

ZERO = """\
# zero data
experiment.kind = hns2d
grid.dims = 16, 16
grid.box = 2pi
time.dt = 0.01
time.T = 0.05
velocity.generator = zero
"""

TG = """\
experiment.kind = hns2d
grid.dims = 16, 16
time.dt = 0.02
time.T = 3
time.record_every = 5
time.snapshot_every = 50
velocity.generator = taylor-green
velocity.boost = 0.7, 0.4
"""


def write(tmp_path, text, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestParser:
    def test_values(self):
        assert harness.parse_value("2pi") == pytest.approx(2 * math.pi)
        assert harness.parse_value("0.5pi") == pytest.approx(math.pi / 2)
        assert harness.parse_value("1, 2, 3") == [1, 2, 3]
        assert harness.parse_value("true") is True
        assert harness.parse_value("none") is None
        assert harness.parse_value("1e-3") == 1e-3
        assert harness.parse_value("random-band") == "random-band"

    def test_unknown_generator_names_key_and_line(self, tmp_path):
        p = write(tmp_path, ZERO.replace("velocity.generator = zero", "velocity.generator = vortex-sheet"))
        with pytest.raises(ConfigurationError, match=r"line 7.*velocity\.generator"):
            harness.load_config(p)

    def test_malformed_line(self, tmp_path):
        with pytest.raises(ConfigurationError, match=":3:"):
            harness.load_config(write(tmp_path, "experiment.kind = hns2d\n\ngrid dims 16\n"))

    def test_duplicate_key(self, tmp_path):
        with pytest.raises(ConfigurationError, match="duplicate"):
            harness.load_config(write(tmp_path, ZERO + "time.dt = 0.02\n"))

    def test_unknown_kind_monitor_param(self, tmp_path):
        for extra in ("monitors.select = hns2d.nothing\n", "params.bogus = 1\n", "tolerance.nope = 1\n"):
            with pytest.raises(ConfigurationError):
                harness.load_config(write(tmp_path, ZERO + extra))
        with pytest.raises(ConfigurationError, match="unknown experiment kind"):
            harness.load_config(write(tmp_path, ZERO.replace("kind = hns2d", "kind = lbm")))

    def test_generator_parameter_checked(self, tmp_path):
        with pytest.raises(ConfigurationError, match="velocity.radius"):
            harness.load_config(write(tmp_path, ZERO + "velocity.radius = 1\n"))

    def test_dimension_mismatch(self, tmp_path):
        with pytest.raises(ConfigurationError, match="2D grid"):
            harness.load_config(write(tmp_path, ZERO.replace("16, 16", "16, 16, 16")))

    def test_cfl_check_and_waiver(self, tmp_path):
        text = TG.replace("time.dt = 0.02", "time.dt = 1.0")
        cfg = harness.load_config(write(tmp_path, text))
        with pytest.raises(ConfigurationError, match="CFL"):
            harness.execute(cfg, tmp_path / "out")


class TestRun:
    def test_zero_config_all_pass_all_zero(self, tmp_path):
        m = harness.run(write(tmp_path, ZERO), tmp_path / "out")
        assert not m.failed
        series = NormSeries.from_csv(tmp_path / "out" / "series_hns2d.csv")
        for name in ("v.energy", "v3.Linf", "omega.Lp:2"):
            assert np.all(series.get(name)[1] == 0)

    def test_manifest_checksums(self, tmp_path):
        out = tmp_path / "out"
        m = harness.run(write(tmp_path, TG), out)
        data = json.loads((out / "manifest.json").read_text())
        assert data["config_hash"] == m.config_hash and len(m.config_hash) == 64
        assert any(k.startswith("snapshots/") for k in m.files)
        assert harness.verify_manifest(out) == []
        (out / "reports.txt").write_text("tampered")
        assert harness.verify_manifest(out) == ["reports.txt"]

    def test_deterministic_rerun_bitwise(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NSSL_DETERMINISTIC", "1")
        cfg = write(tmp_path, TG)
        a, b = harness.run(cfg, tmp_path / "a"), harness.run(cfg, tmp_path / "b")
        assert a.deterministic and b.deterministic
        for name, digest in a.files.items():
            if name.endswith(".csv"):
                assert b.files[name] == digest

    def test_env_overrides_config(self, tmp_path, monkeypatch):
        cfg = harness.load_config(write(tmp_path, ZERO + "experiment.deterministic = true\n"))
        monkeypatch.setenv("NSSL_DETERMINISTIC", "0")
        assert harness.deterministic_flag(cfg) is False
        monkeypatch.delenv("NSSL_DETERMINISTIC")
        assert harness.deterministic_flag(cfg) is True


class TestCli:
    def test_exit_codes(self, tmp_path, capsys):
        assert cli.main(["run", str(write(tmp_path, ZERO)), "-o", str(tmp_path / "o")]) == 0
        bad = write(tmp_path, ZERO.replace("zero", "nope"), "bad.cfg")
        assert cli.main(["run", str(bad)]) == 2
        assert cli.main(["run", str(tmp_path / "missing.cfg")]) == 2
        assert cli.main(["bogus"]) == 2

    def test_monitor_failure_exit_one(self, tmp_path):
        text = TG + "tolerance.tg_order = 5\nparams.convergence = true\nparams.tg_n = 16\n"
        assert cli.main(["run", str(write(tmp_path, text)), "-o", str(tmp_path / "o")]) == 1

    def test_numerical_failure_exit_three(self, tmp_path, monkeypatch):
        def blow_up(cfg):
            raise DivergenceError("non-finite velocity", step=3)

        monkeypatch.setitem(harness.RUNNERS, "hns2d", blow_up)
        assert cli.main(["run", str(write(tmp_path, ZERO)), "-o", str(tmp_path / "o")]) == 3

    def test_report_and_fit(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert cli.main(["run", str(write(tmp_path, TG)), "-o", str(out)]) == 0
        assert cli.main(["report", str(out)]) == 0
        assert "checksums ok" in capsys.readouterr().out
        code = cli.main(["fit", "--series", str(out / "series_hns2d.csv"), "--window", "0.2,3", "--name", "v.Linf"])
        assert code == 0
        assert "slope=" in capsys.readouterr().out
        assert cli.main(["fit", "--series", str(out / "series_hns2d.csv"), "--window", "2,1"]) == 2

    def test_snapshot_commands(self, tmp_path, capsys):
        g = Grid((8, 8))
        path = write_snapshot(tmp_path / "v.nssl", initial.taylor_green(g, 1.0))
        assert cli.main(["snapshot", "info", str(path)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["dims"] == [8, 8] and info["ncomp"] == 3
        assert cli.main(["snapshot", "dump", str(path)]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 1 + 64


class TestSnapshot:
    def test_roundtrip_bitwise(self, tmp_path):
        g = Grid((16, 16, 16), (1.0, 2.0, 3.0))
        f = initial.random_band(g, 0.5, seed=9)
        back = read_snapshot(write_snapshot(tmp_path / "f.nssl", f))
        assert np.max(np.abs(back.physical() - f.physical())) < 1e-15
        info = snapshot_info(tmp_path / "f.nssl")
        assert info.dims == (16, 16, 16) and info.box_lengths == (1.0, 2.0, 3.0)

    def test_bad_file(self, tmp_path):
        p = tmp_path / "x.nssl"
        p.write_bytes(b"garbage")
        with pytest.raises(ConfigurationError):
            snapshot_info(p)


class TestInitialData:
    def test_seeded_determinism(self):
        g = Grid((16, 16, 16))
        a = initial.initial_data("random-band", g, 5)
        b = initial.initial_data("random-band", g, 5)
        assert np.array_equal(a.coeffs, b.coeffs)

    def test_patch_ball_contrast(self):
        g = Grid((32, 32, 32))
        h = initial.patch_ball(g, eta=0.1)
        assert abs(float(np.max(np.abs(h.physical()))) - 0.1) <= 1e-3

    def test_density_gate(self):
        g = Grid((16, 16, 16))
        with pytest.raises(ConfigurationError):
            initial.density(initial.random_band(g, 0.8, 1, ncomp=1, solenoidal=False))

    def test_unknown_generator(self):
        with pytest.raises(ConfigurationError):
            initial.initial_data("vortex-sheet", Grid((8, 8)))
