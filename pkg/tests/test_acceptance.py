"""Acceptance criteria, run through the shipped configs in configs/.

Each test prints exactly one ``ACCEPTANCE <n> PASS|FAIL`` line with the
measured values.  Tolerances are pinned here, independent of the config
files, so editing a config cannot relax a criterion.
"""

import math
import time
from pathlib import Path

import pytest

from nssl import estimates as est
from nssl import harness

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# pinned tolerances
TG_MIN_ORDER, TG_SPATIAL = 1.9, 1e-10
ENERGY_RTOL, MONO_RTOL, DENSITY_RTOL = 1e-6, 1e-3, 1e-2
DECAY_TOL = {"v": 0.1, "grad_v": 0.1, "dtv": 0.15}
DECAY_TARGET = {"v": -0.5, "grad_v": -1.0, "dtv": -1.5}
ROT_MAP, ROT_DET, ROT_INV = 1e-8, 1e-6, 1e-8
TW_DEV, TW_CONTRACTION, TW_RESIDUAL, TW_LEDGER = 0.2, 0.25, 1e-8, 0.2
PICARD_RATIO, PICARD_TOL = 0.75, 1e-10
EL_DENSITY, EL_MIN_ORDER = 1e-4, 1.7
RESPONSE_TOL = 0.1
MAXREG_CLOSED, MAXREG_SPREAD = 0.02, 2.0
RUNTIME = {1: 60, 2: 600, 3: 600, 4: 120, 5: 120, 6: 600, 7: 600, 8: 1200, 9: 300}

_CACHE: dict[str, tuple] = {}


def run_config(name, tmp_root):
    if name not in _CACHE:
        cfg = harness.load_config(CONFIGS / f"{name}.cfg")
        t0 = time.perf_counter()
        manifest, out = harness.execute(cfg, tmp_root / name)
        _CACHE[name] = (manifest, out, time.perf_counter() - t0)
    return _CACHE[name]


@pytest.fixture(scope="module")
def tmp_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def reports(out):
    return {r.monitor: r for r in out.reports}


def emit(capsys, n, ok, text):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {text}")


def test_criterion_01_taylor_green(tmp_root, capsys):
    _, out, wall = run_config("taylor_green", tmp_root)
    r = reports(out)
    order, spatial = r["hns2d.tg_order"].lhs, r["hns2d.tg_spatial"].lhs
    ok = order >= TG_MIN_ORDER and spatial <= TG_SPATIAL and wall <= RUNTIME[1]
    emit(capsys, 1, ok, f"order {order:.4f} >= {TG_MIN_ORDER}; spatial error {spatial:.2e} <= {TG_SPATIAL:g}; "
                        f"{wall:.1f} s")
    assert ok


def test_criterion_02_torus_inequalities(tmp_root, capsys):
    _, out, wall = run_config("torus_suite", tmp_root)
    r = reports(out)
    e = r["hns2d.energy"]
    energy_ok = e.lhs <= e.rhs and e.rhs <= _initial_energy(out) * (1 + ENERGY_RTOL) * (1 + 1e-15)
    mono = {k: r[k].lhs for k in ("hns2d.vorticity_Lp2", "hns2d.vorticity_Lp4", "hns2d.vorticity_Lp6",
                                  "hns2d.v3_max")}
    mono_ok = all(v <= 1 + MONO_RTOL for v in mono.values())
    _, sout, swall = run_config("stability", tmp_root)
    s = reports(sout)
    h_l2, h_inf = s["ins3d.density_L2"].lhs, s["ins3d.density_Linf"].lhs
    h_ok = h_l2 <= DENSITY_RTOL and h_inf <= 1 + DENSITY_RTOL
    ok = energy_ok and mono_ok and h_ok and wall + swall <= RUNTIME[2] + RUNTIME[8]
    emit(capsys, 2, ok, f"energy E+2D {e.lhs:.8g} vs E0 {_initial_energy(out):.8g}; max growth "
                        + ", ".join(f"{k.split('.')[1]}={v:.6f}" for k, v in mono.items())
                        + f"; h L2 drift {h_l2:.2e}, h Linf ratio {h_inf:.5f} (48^3, T=10)")
    assert ok


def _initial_energy(out):
    t, v = out.series["hns2d"].get("v.energy")
    return float(v[0])


def test_criterion_03_decay_rates(tmp_root, capsys):
    _, out, wall = run_config("decay", tmp_root)
    r = reports(out)
    parts, ok = [], not out.summary["contaminated"]
    for key in ("v", "grad_v", "dtv"):
        slope = out.summary[f"slope_{key}"]
        dev = abs(slope - DECAY_TARGET[key])
        good = dev <= DECAY_TOL[key] and not r[f"decay.{key}_oracle"].failed
        ok &= good
        parts.append(f"{key} slope {slope:.4f} (target {DECAY_TARGET[key]}, oracle "
                     f"{out.summary[f'oracle_slope_{key}']:.4f})")
    ok &= wall <= RUNTIME[3]
    emit(capsys, 3, ok, "; ".join(parts) + f"; window {out.summary['window']}; {wall:.1f} s")
    assert ok


def test_criterion_04_lagrangian(tmp_root, capsys):
    _, out, wall = run_config("rigid_rotation", tmp_root)
    s = out.summary
    avbd = reports(out)["lagrangian.avbd"].lhs
    ok = (s["map_error"] <= ROT_MAP and s["det_gap"] <= ROT_DET and s["inverse_gap"] <= ROT_INV and avbd <= 0.0
          and wall <= RUNTIME[4])
    emit(capsys, 4, ok, f"map error {s['map_error']:.2e}; |det-1| {s['det_gap']:.2e}; "
                        f"|gradX A - I| {s['inverse_gap']:.2e}; ||A-I|| - 2 lip {avbd:.2e}; {wall:.1f} s")
    assert ok


def test_criterion_05_twisted_divergence(tmp_root, capsys):
    _, out, wall = run_config("twisted_div", tmp_root)
    s = out.summary
    ok = (s["contraction"] <= TW_CONTRACTION and s["residual"] <= TW_RESIDUAL
          and s["ledger_deviation"] <= TW_LEDGER and wall <= RUNTIME[5])
    dev_val = s["deviation"]
    ok &= abs(dev_val - TW_DEV) <= 1e-3
    emit(capsys, 5, ok, f"||I-A|| {dev_val:.4f}; contraction {s['contraction']:.4f}; residual "
                        f"{s['residual']:.2e}; ledger drift 32->48 {s['ledger_deviation']:.2e}; {wall:.1f} s")
    assert ok


def test_criterion_06_picard(tmp_root, capsys):
    _, out, wall = run_config("picard", tmp_root)
    s = out.summary
    worst = max(s["ratios"]) if s["ratios"] else 0.0
    allowed = max(PICARD_TOL, 10 * s["truncation"])
    ok = worst <= PICARD_RATIO and s["gap"] <= allowed and wall <= RUNTIME[6]
    emit(capsys, 6, ok, f"max I_(n+1)/I_n (n>=2) {worst:.2e}; Picard-direct gap {s['gap']:.2e} <= "
                        f"{allowed:.2e}; {wall:.1f} s")
    assert ok


def test_criterion_07_euler_lagrange(tmp_root, capsys):
    _, out, wall = run_config("euler_lagrange", tmp_root)
    s = out.summary
    order = min(s["orders"])
    ok = s["density_gap"] <= EL_DENSITY and order >= EL_MIN_ORDER and wall <= RUNTIME[7]
    emit(capsys, 7, ok, f"density gap {s['density_gap']:.2e}; momentum residuals "
                        + ", ".join(f"{x:.3e}" for x in s["residuals"]) + f" (order {order:.3f}); {wall:.1f} s")
    assert ok


def test_criterion_08_stability(tmp_root, capsys):
    _, out, wall = run_config("stability", tmp_root)
    r = reports(out)
    s = out.summary
    resp = abs(s["response_ratio"] - 1.0)
    bound = r["ins3d.density_bound"].lhs
    ok = (math.isfinite(s["w_ratio"]) and resp <= RESPONSE_TOL and bound <= 1 + DENSITY_RTOL
          and wall <= RUNTIME[8])
    emit(capsys, 8, ok, f"sup||w||/||(w0,h0)|| {s['w_ratio']:.4f}; halving change {resp:.2e}; density bound "
                        f"{bound:.5f}; amplification response {s['amplification_response']:.2e} (report-only); "
                        f"{wall:.1f} s")
    assert ok


def test_criterion_09_maximal_regularity(tmp_root, capsys):
    _, out, wall = run_config("stokes_maxreg", tmp_root)
    s = out.summary
    rel = abs(s["single_measured"] / s["single_closed"] - 1)
    ok = rel <= MAXREG_CLOSED and s["T_spread"] <= MAXREG_SPREAD and wall <= RUNTIME[9]
    emit(capsys, 9, ok, f"single mode {s['single_measured']:.6f} vs {s['single_closed']:.6f} "
                        f"({rel:.2e}); T spread {s['T_spread']:.4f}; {wall:.1f} s")
    assert ok


@pytest.mark.parametrize("name", ["taylor_green", "picard"])
def test_criterion_10_determinism(name, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("NSSL_DETERMINISTIC", "1")
    cfg = harness.load_config(CONFIGS / f"{name}.cfg")
    a, _ = harness.execute(cfg, tmp_path / "a")
    b, _ = harness.execute(cfg, tmp_path / "b")
    csvs = sorted(k for k in a.files if k.endswith(".csv"))
    same = [k for k in csvs if (tmp_path / "a" / k).read_bytes() == (tmp_path / "b" / k).read_bytes()]
    ok = bool(csvs) and same == csvs and a.deterministic
    emit(capsys, 10, ok, f"{name}: {len(same)}/{len(csvs)} CSV files bitwise identical")
    assert ok
