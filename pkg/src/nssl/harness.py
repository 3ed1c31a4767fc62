"""Experiment configuration, orchestration and run manifests.

Configuration files are flat UTF-8 text with one ``section.key = value``
assignment per line and ``#`` comments.  Values are ints, floats, booleans
(true/false), ``none``, comma-separated lists or bare strings; a float may
be written as a multiple of pi (``2pi``, ``0.5pi``).
"""

from __future__ import annotations

import hashlib
import inspect
import json
import math
import os
import re
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import estimates as est
from . import experiments as ex
from . import hns2d, ins3d, initial
from . import lagrangian as lg
from .errors import ConfigurationError
from .snapshot import write_snapshot
from .spectral import Grid, set_workers

SECTIONS = ("experiment", "grid", "time", "velocity", "density", "background", "monitors", "tolerance", "params")
FIELD_SECTIONS = ("velocity", "density", "background")
SECTION_KEYS = {
    "experiment": {"kind", "deterministic", "output", "name"},
    "grid": {"dims", "box", "dealias"},
    "time": {"dt", "T", "record_every", "snapshot_every", "cfl_limit", "cfl_waive"},
    "monitors": {"select"},
}
_KEY_RE = re.compile(r"^([a-z]+)\.([A-Za-z_][A-Za-z0-9_]*)$")
_PI_RE = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)?pi$")


# ------------------------------------------------------------------ parsing


def parse_value(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return [parse_value(x) for x in text.split(",") if x.strip()]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    if low in ("inf", "+inf"):
        return math.inf
    m = _PI_RE.match(low)
    if m:
        return (float(m.group(1)) if m.group(1) else 1.0) * math.pi
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, Any]]:
    """Parse ``section.key = value`` lines; errors carry the line number."""
    out: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        m = _KEY_RE.match(key)
        if not m:
            raise ConfigurationError(f"{source}:{lineno}: malformed key {key!r}")
        sec, name = m.groups()
        if sec not in out:
            raise ConfigurationError(f"{source}:{lineno}: unknown section in key {key!r}")
        if sec in SECTION_KEYS and name not in SECTION_KEYS[sec]:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in lines:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {lines[key]})")
        if not value:
            raise ConfigurationError(f"{source}:{lineno}: empty value for {key!r}")
        lines[key] = lineno
        out[sec][name] = parse_value(value)
    out["_lines"] = lines  # type: ignore[assignment]
    return out


# ----------------------------------------------------------------- registry


@dataclass(frozen=True)
class KindSpec:
    ndim: int | None
    params: dict[str, Any]
    tolerances: dict[str, float]
    monitors: tuple[str, ...]
    needs_dt: bool = True
    fields: tuple[str, ...] = ()


_WEIGHTED = tuple(f"hns2d.weighted.{k}" for k in est.WEIGHTED_NAMES)
_CONSISTENCY = ("lagrangian.frozen_density", "lagrangian.momentum_residual", "lagrangian.divergence",
                "lagrangian.momentum_order", "lagrangian.divergence_order")
_ROTATION = ("lagrangian.rotation_map", "lagrangian.det", "lagrangian.inverse", "lagrangian.avbd")

KINDS: dict[str, KindSpec] = {
    "hns2d": KindSpec(
        2,
        {"convergence": False, "tg_dts": [4e-3, 2e-3, 1e-3], "tg_T": 1.0, "tg_boost": [0.7, 0.4], "tg_n": 64,
         "weighted": True},
        {"energy_rtol": 1e-6, "mono_rtol": 1e-3, "tg_order": 1.9, "tg_spatial": 1e-10},
        ("hns2d.energy", "hns2d.vorticity_Lp2", "hns2d.vorticity_Lp4", "hns2d.vorticity_Lp6", "hns2d.v3_max",
         "hns2d.mean", "hns2d.calderon_zygmund", "hns2d.tg_order", "hns2d.tg_spatial") + _WEIGHTED,
        fields=("velocity",),
    ),
    "ins3d-direct": KindSpec(
        3,
        {"linear_response": True, "p": 4.0, "c0": None, "C_prime": None, "density_method": "semi-lagrangian"},
        {"density_rtol": 1e-2, "linf_rtol": 1e-2, "div_tol": 1e-11, "inner_margin": 0.05, "response": 0.1},
        ("ins3d.density_bound", "ins3d.density_L2", "ins3d.density_Linf", "ins3d.energy_amplification",
         "ins3d.div_w", "ins3d.inner_contraction", "ins3d.grad_density_L3", "ins3d.smallness", "ins3d.w_ratio",
         "ins3d.linear_response", "ins3d.linear_response_amplification"),
        fields=("velocity", "density", "background"),
    ),
    "ins3d-picard": KindSpec(
        3, {"n_max": 12, "picard_tol": 1e-24}, {"ratio_max": 0.75, "gap_tol": 1e-10},
        ("picard.contraction", "picard.direct_gap"),
        fields=("velocity", "density", "background"),
    ),
    "decay-probe": KindSpec(
        2, {"window": [12.0, 72.0]}, {"v": 0.1, "grad_v": 0.1, "dtv": 0.15, "oracle": 0.05},
        ("decay.v_Linf", "decay.grad_v_Linf", "decay.dtv_Linf", "decay.v_oracle", "decay.grad_v_oracle",
         "decay.dtv_oracle", "decay.contamination"),
        fields=("velocity",),
    ),
    "patch": KindSpec(
        3, {"eta": 0.1, "markers": 128, "radius": None, "density_method": "semi-lagrangian"},
        {"curvature_factor": 10.0, "area_rtol": 1e-3},
        ("patch.curvature", "patch.turning", "patch.spacing", "patch.area"),
        fields=("velocity", "background"),
    ),
    "twisted-div": KindSpec(
        3, {"nt": 11, "deviation": 0.2, "growth": 0.5, "refine": None, "sweep_tol": 1e-12, "gate": 0.3},
        {"contraction": 0.25, "residual": 1e-8, "ledger_rtol": 0.2},
        ("twisted.gate", "twisted.contraction", "twisted.residual", "twisted.z_LinfL2", "twisted.gradz_L2L2",
         "twisted.zt_sumspace", "twisted.contraction_limit", "twisted.residual_limit", "twisted.ledger_stability"),
        needs_dt=False, fields=("velocity",),
    ),
    "stokes-maxreg": KindSpec(
        3, {"mode": [2, 0, 0], "single_n": 16, "single_dt": 1e-3, "draws": 10, "Ts": [1.0, 2.0, 4.0], "p": 4.0,
            "seed": 100, "refine_n": None},
        {"closed_rtol": 0.02, "spread_max": 2.0},
        ("stokes.single_mode", "stokes.T_spread", "stokes.grid_spread"),
    ),
    "euler-lagrange": KindSpec(
        3, {"suite": "consistency", "refine": 2, "omega": 1.0},
        {"density": 1e-4, "min_order": 1.7, "divergence": 1e-4, "min_div_order": 2.0, "map": 1e-8, "det": 1e-6, "inverse": 1e-8},
        _CONSISTENCY + _ROTATION,
        fields=("velocity", "density", "background"),
    ),
}


@dataclass
class ExperimentConfig:
    kind: str
    dims: tuple[int, ...]
    box: tuple[float, ...]
    dealias: float = 2.0 / 3.0
    dt: float | None = None
    T: float = 1.0
    record_every: int = 1
    snapshot_every: int = 0
    cfl_limit: float = 1.0
    cfl_waive: bool = False
    fields: dict[str, dict[str, Any]] = field(default_factory=dict)
    monitors: tuple[str, ...] = ()
    tolerances: dict[str, float] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)
    deterministic: bool = False
    output: Path = Path("nssl-out")
    name: str = ""
    source_text: str = ""

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.box, self.dealias)

    @property
    def spec(self) -> KindSpec:
        return KINDS[self.kind]

    def config_hash(self) -> str:
        return hashlib.sha256(self.source_text.encode("utf-8")).hexdigest()


def _as_list(v: Any) -> list:
    return v if isinstance(v, list) else [v]


def _validate_field(section: str, spec: dict[str, Any], lines: dict[str, int]) -> None:
    where = lambda k: f"line {lines.get(f'{section}.{k}', '?')}"  # noqa: E731
    name = spec.get("generator")
    if name is None:
        raise ConfigurationError(f"{section}.generator is required ({where('generator')})")
    if name not in initial.GENERATORS:
        raise ConfigurationError(f"{where('generator')}: unknown generator {name!r} in key "
                                 f"'{section}.generator'; known: {sorted(initial.GENERATORS)}")
    sig = inspect.signature(initial.GENERATORS[name])
    allowed = {p for p in sig.parameters if p not in ("grid", "_")} | {"generator", "seed"}
    for k in spec:
        if k not in allowed:
            raise ConfigurationError(f"{where(k)}: key '{section}.{k}' is not a parameter of generator {name!r}")


def build_config(raw: dict[str, dict[str, Any]], source_text: str = "") -> ExperimentConfig:
    lines: dict[str, int] = raw.get("_lines", {})  # type: ignore[assignment]
    where = lambda key: f"line {lines[key]}" if key in lines else "config"  # noqa: E731
    exp = raw["experiment"]
    kind = exp.get("kind")
    if kind is None:
        raise ConfigurationError("experiment.kind is required")
    if kind not in KINDS:
        raise ConfigurationError(f"{where('experiment.kind')}: unknown experiment kind {kind!r}; known: {sorted(KINDS)}")
    spec = KINDS[kind]
    g = raw["grid"]
    if "dims" not in g:
        raise ConfigurationError("grid.dims is required")
    dims = tuple(int(x) for x in _as_list(g["dims"]))
    if spec.ndim is not None and len(dims) != spec.ndim:
        raise ConfigurationError(f"{where('grid.dims')}: kind {kind!r} needs a {spec.ndim}D grid, got {dims}")
    box = _as_list(g.get("box", 2 * math.pi))
    box = tuple(float(x) for x in (box * len(dims) if len(box) == 1 else box))
    if len(box) != len(dims):
        raise ConfigurationError(f"{where('grid.box')}: box has {len(box)} entries for {len(dims)} axes")
    t = raw["time"]
    if spec.needs_dt and "dt" not in t:
        raise ConfigurationError(f"time.dt is required for kind {kind!r}")
    for sec in FIELD_SECTIONS:
        if raw[sec] and sec not in spec.fields:
            raise ConfigurationError(f"{where(next(iter(f'{sec}.{k}' for k in raw[sec])))}: "
                                     f"section {sec!r} is not used by kind {kind!r}")
        if raw[sec]:
            _validate_field(sec, raw[sec], lines)
    for k in raw["tolerance"]:
        if k not in spec.tolerances:
            raise ConfigurationError(f"{where('tolerance.' + k)}: unknown tolerance 'tolerance.{k}' for kind {kind!r}")
    for k in raw["params"]:
        if k not in spec.params:
            raise ConfigurationError(f"{where('params.' + k)}: unknown parameter 'params.{k}' for kind {kind!r}")
    monitors = tuple(str(m) for m in _as_list(raw["monitors"].get("select", [])))
    for m in monitors:
        if m not in spec.monitors:
            raise ConfigurationError(f"{where('monitors.select')}: unknown monitor {m!r} in key 'monitors.select'")
    try:
        cfg = ExperimentConfig(
            kind=kind, dims=dims, box=box, dealias=float(g.get("dealias", 2.0 / 3.0)),
            dt=float(t["dt"]) if "dt" in t else None, T=float(t.get("T", 1.0)),
            record_every=int(t.get("record_every", 1)), snapshot_every=int(t.get("snapshot_every", 0)),
            cfl_limit=float(t.get("cfl_limit", 1.0)), cfl_waive=bool(t.get("cfl_waive", False)),
            fields={s: dict(raw[s]) for s in FIELD_SECTIONS if raw[s]}, monitors=monitors,
            tolerances={**spec.tolerances, **raw["tolerance"]}, params={**spec.params, **raw["params"]},
            deterministic=bool(exp.get("deterministic", False)), output=Path(str(exp.get("output", "nssl-out"))),
            name=str(exp.get("name", "")), source_text=source_text,
        )
        cfg.grid  # validates dims and box
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid configuration value: {exc}") from None
    if cfg.T <= 0 or (cfg.dt is not None and cfg.dt <= 0):
        raise ConfigurationError("time.T and time.dt must be positive")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return build_config(parse_config_text(text, str(path)), text)


# -------------------------------------------------------------- execution


def _check_cfl(cfg: ExperimentConfig, speed: float) -> None:
    if cfg.cfl_waive or cfg.dt is None:
        return
    cfl = speed * cfg.dt / min(cfg.grid.dx)
    if cfl > cfg.cfl_limit:
        raise ConfigurationError(f"time.dt = {cfg.dt} gives CFL {cfl:.3g} > {cfg.cfl_limit}; "
                                 f"reduce dt or set time.cfl_waive = true")


def _max_speed(*fields) -> float:
    return sum(float(np.max(np.sqrt(np.sum(f.physical()[: f.grid.ndim] ** 2, axis=0)))) for f in fields)


def _stability_config(cfg: ExperimentConfig) -> ins3d.StabilityConfig:
    P, tol = cfg.params, cfg.tolerances
    return ins3d.StabilityConfig(
        dims=tuple(cfg.dims), box=cfg.box[0], dt=cfg.dt, T=cfg.T,
        amplitude=float(cfg.fields.get("velocity", {}).get("amplitude", 1.0)), p=float(P.get("p", 4.0)),
        c0=P.get("c0"), C_prime=P.get("C_prime"), record_every=cfg.record_every,
        density_method=str(P.get("density_method", "semi-lagrangian")),
        density_rtol=tol["density_rtol"], linf_rtol=tol["linf_rtol"], div_tol=tol["div_tol"],
        inner_margin=tol["inner_margin"],
    )


def _perturbation_setup(cfg: ExperimentConfig):
    g3 = cfg.grid
    v2 = ex.velocity_field(g3.horizontal(), cfg.fields.get("background"))
    w0 = ex.velocity_field(g3, cfg.fields.get("velocity"))
    h0 = ex.density_field(g3, cfg.fields.get("density"))
    _check_cfl(cfg, _max_speed(v2) + _max_speed(w0))
    return ins3d.Background(g3, v2, cfg.dt, cfl_limit=math.inf if cfg.cfl_waive else cfg.cfl_limit), h0, w0


def _run_hns2d(cfg: ExperimentConfig) -> ex.ExperimentOutput:
    P, tol = cfg.params, cfg.tolerances
    v0 = ex.velocity_field(cfg.grid, cfg.fields.get("velocity"))
    _check_cfl(cfg, _max_speed(v0))
    mcfg = hns2d.MonitorConfig(record_every=cfg.record_every, energy_rtol=tol["energy_rtol"],
                               mono_rtol=tol["mono_rtol"], cfl_limit=cfg.cfl_limit if not cfg.cfl_waive else math.inf)
    out = ex.run_hns2d(v0, cfg.dt, cfg.T, mcfg, bool(P["weighted"]), cfg.snapshot_every)
    if P["convergence"]:
        out.merge(ex.taylor_green_convergence(int(P["tg_n"]), tuple(map(float, _as_list(P["tg_dts"]))),
                                              float(P["tg_T"]), tuple(map(float, _as_list(P["tg_boost"]))),
                                              tol["tg_order"], tol["tg_spatial"]))
    return out


def _run_direct(cfg: ExperimentConfig) -> ex.ExperimentOutput:
    bg, h0, w0 = _perturbation_setup(cfg)
    return ex.stability(_stability_config(cfg), bg, (h0, w0), bool(cfg.params["linear_response"]),
                        cfg.tolerances["response"])


def _run_picard(cfg: ExperimentConfig) -> ex.ExperimentOutput:
    bg, h0, w0 = _perturbation_setup(cfg)
    P, tol = cfg.params, cfg.tolerances
    return ex.picard_vs_direct(bg, h0, w0, cfg.T, int(P["n_max"]), float(P["picard_tol"]), tol["ratio_max"],
                               tol["gap_tol"])


def _run_decay(cfg: ExperimentConfig) -> ex.ExperimentOutput:
    v0 = ex.velocity_field(cfg.grid, cfg.fields.get("velocity"))
    _check_cfl(cfg, _max_speed(v0))
    tol = cfg.tolerances
    w = tuple(map(float, _as_list(cfg.params["window"])))
    return ex.decay_probe(v0, cfg.dt, w, {k: tol[k] for k in ("v", "grad_v", "dtv")}, tol["oracle"])


def _run_patch(cfg: ExperimentConfig) -> ex.ExperimentOutput:
    g3 = cfg.grid
    v2 = ex.velocity_field(g3.horizontal(), cfg.fields.get("background"))
    w0 = ex.velocity_field(g3, cfg.fields.get("velocity"))
    _check_cfl(cfg, _max_speed(v2) + _max_speed(w0))
    P = cfg.params
    pc = lg.PatchConfig(T=cfg.T, radius=P["radius"], markers=int(P["markers"]),
                        curvature_factor=cfg.tolerances["curvature_factor"], area_rtol=cfg.tolerances["area_rtol"],
                        density_method=str(P["density_method"]))
    return ex.patch_experiment(ins3d.Background(g3, v2, cfg.dt), float(P["eta"]), pc, w0)


def _run_twisted(cfg: ExperimentConfig) -> ex.ExperimentOutput:
    P, tol = cfg.params, cfg.tolerances
    if len(set(cfg.dims)) != 1 or len(set(cfg.box)) != 1:
        raise ConfigurationError("twisted-div needs a cubic grid")
    dims = [cfg.dims[0]] + [int(x) for x in _as_list(P["refine"]) if x is not None]
    R_spec = {k: v for k, v in cfg.fields.get("velocity", {"amplitude": 1.0, "seed": 3, "kmax": 3}).items()
              if k != "generator"}
    return ex.twisted_suite(dims, cfg.T, int(P["nt"]), float(P["deviation"]), R_spec, float(P["sweep_tol"]),
                            tol["contraction"], tol["residual"], tol["ledger_rtol"], float(P["gate"]))


def _run_maxreg(cfg: ExperimentConfig) -> ex.ExperimentOutput:
    P, tol = cfg.params, cfg.tolerances
    return ex.maxreg_suite(int(P["single_n"]), tuple(int(x) for x in _as_list(P["mode"])), float(P["single_dt"]),
                           cfg.dims[0], P["refine_n"], int(P["draws"]), tuple(map(float, _as_list(P["Ts"]))),
                           float(P["p"]), cfg.dt, int(P["seed"]), tol["closed_rtol"], tol["spread_max"])


def _run_el(cfg: ExperimentConfig) -> ex.ExperimentOutput:
    P, tol = cfg.params, cfg.tolerances
    if P["suite"] == "rigid-rotation":
        return ex.rigid_rotation_suite(cfg.dims[0], float(P["omega"]), cfg.dt, cfg.T, tol["map"], tol["det"],
                                       tol["inverse"])
    if P["suite"] != "consistency":
        raise ConfigurationError(f"params.suite must be 'consistency' or 'rigid-rotation', got {P['suite']!r}")
    r = int(P["refine"])
    levels = [(cfg.dims[0], cfg.dt), (cfg.dims[0] * r, cfg.dt / r)]
    g3 = cfg.grid
    _check_cfl(cfg, _max_speed(ex.velocity_field(g3.horizontal(), cfg.fields.get("background")))
               + _max_speed(ex.velocity_field(g3, cfg.fields.get("velocity"))))
    return ex.euler_lagrange_study(levels, cfg.T, cfg.fields.get("background", {}), cfg.fields.get("velocity", {}),
                                   cfg.fields.get("density", {}), cfg.box[0], tol["density"], tol["min_order"],
                                   tol["divergence"], tol["min_div_order"])


RUNNERS: dict[str, Callable[[ExperimentConfig], ex.ExperimentOutput]] = {
    "hns2d": _run_hns2d,
    "ins3d-direct": _run_direct,
    "ins3d-picard": _run_picard,
    "decay-probe": _run_decay,
    "patch": _run_patch,
    "twisted-div": _run_twisted,
    "stokes-maxreg": _run_maxreg,
    "euler-lagrange": _run_el,
}


# ------------------------------------------------------------------ output


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    kind: str
    wall_clock: float
    verdicts: dict[str, str]
    files: dict[str, str]
    deterministic: bool

    @property
    def failed(self) -> bool:
        return any(v == est.FAIL for v in self.verdicts.values())

    def to_json(self) -> str:
        return json.dumps({
            "config_hash": self.config_hash, "code_version": self.code_version, "kind": self.kind,
            "wall_clock_seconds": self.wall_clock, "deterministic": self.deterministic,
            "verdicts": self.verdicts, "files": self.files,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        return cls(d["config_hash"], d["code_version"], d["kind"], d["wall_clock_seconds"], d["verdicts"],
                   d["files"], d["deterministic"])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_table(path: Path, rows: list[list[Any]]) -> None:
    fmt = lambda x: repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)  # noqa: E731
    path.write_text("".join(",".join(fmt(x) for x in row) + "\n" for row in rows), encoding="utf-8")


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else repr(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def deterministic_flag(cfg: ExperimentConfig) -> bool:
    env = os.environ.get("NSSL_DETERMINISTIC")
    if env is None or env.strip() == "":
        return cfg.deterministic
    return env.strip().lower() not in ("0", "false", "no", "off")


def execute(cfg: ExperimentConfig, output: Path | None = None) -> tuple[RunManifest, ex.ExperimentOutput]:
    """Run the experiment and write CSV series, reports, snapshots, summary and manifest."""
    out_dir = Path(output) if output is not None else cfg.output
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"output directory {out_dir} is not writable: {exc}") from None
    det = deterministic_flag(cfg)
    if det:
        set_workers(1)
    t0 = time.perf_counter()
    result = RUNNERS[cfg.kind](cfg)
    wall = time.perf_counter() - t0
    if cfg.monitors:
        result.reports = [r for r in result.reports if r.monitor in cfg.monitors]
    files: list[Path] = []
    for name, series in sorted(result.series.items()):
        files.append(series.to_csv(out_dir / f"series_{name}.csv"))
    for name, rows in sorted(result.tables.items()):
        p = out_dir / f"table_{name}.csv"
        _write_table(p, rows)
        files.append(p)
    files.append(est.write_reports(result.reports, out_dir / "reports.txt"))
    if result.snapshots:
        snap_dir = out_dir / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for name, f in sorted(result.snapshots.items()):
            files.append(write_snapshot(snap_dir / f"{name}.nssl", f))
    summary = out_dir / "summary.json"
    summary.write_text(json.dumps(_jsonable(result.summary), indent=2, sort_keys=True), encoding="utf-8")
    files.append(summary)
    cfg_copy = out_dir / "config.txt"
    cfg_copy.write_text(cfg.source_text, encoding="utf-8")
    files.append(cfg_copy)
    manifest = RunManifest(cfg.config_hash(), code_version(), cfg.kind, wall,
                           {r.monitor: r.verdict for r in result.reports},
                           {str(p.relative_to(out_dir)): sha256_file(p) for p in files}, det)
    (out_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest, result


def run(config_path, output: Path | None = None) -> RunManifest:
    return execute(load_config(config_path), output)[0]


def verify_manifest(out_dir) -> list[str]:
    """Files whose checksum no longer matches the manifest."""
    out_dir = Path(out_dir)
    m = RunManifest.from_json((out_dir / "manifest.json").read_text(encoding="utf-8"))
    return [name for name, digest in m.files.items()
            if not (out_dir / name).exists() or sha256_file(out_dir / name) != digest]
