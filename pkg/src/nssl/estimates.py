"""Norm engine, decay fits and inequality monitors."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, WindowError
from .spectral import Grid, SpectralField, grad_coeffs

PASS, FAIL, REPORT = "pass", "fail", "report-only"

# ----------------------------------------------------------------- pointwise


def _physical(field_or_array, grid: Grid | None = None) -> tuple[np.ndarray, Grid]:
    if isinstance(field_or_array, SpectralField):
        return field_or_array.physical(), field_or_array.grid
    if grid is None:
        raise ConfigurationError("a grid is required for raw arrays")
    arr = np.asarray(field_or_array, dtype=float)
    if arr.shape == grid.dims:
        arr = arr[None]
    return arr, grid


def magnitude(arr: np.ndarray, ndim: int) -> np.ndarray:
    """Pointwise Euclidean (Frobenius) magnitude over all leading axes."""
    lead = arr.ndim - ndim
    if lead == 0:
        return np.abs(arr)
    if lead == 1 and arr.shape[0] == 1:
        return np.abs(arr[0])
    flat = arr.reshape((-1,) + arr.shape[lead:])
    return np.sqrt(np.sum(flat * flat, axis=0))


def lp_of_array(arr: np.ndarray, grid: Grid, p: float) -> float:
    m = magnitude(arr, grid.ndim)
    if math.isinf(p):
        return float(m.max())
    if p == 2:
        return float(np.sqrt(grid.cell_volume * np.sum(m * m)))
    return float((grid.cell_volume * np.sum(m**p)) ** (1.0 / p))


def lp_norm(field, p: float, grid: Grid | None = None) -> float:
    """L^p norm over the box by uniform-weight quadrature (p = inf: max)."""
    if not (p >= 1):
        raise ConfigurationError(f"p must be in [1, inf], got {p}")
    arr, grid = _physical(field, grid)
    return lp_of_array(arr, grid, p)


def derivative_tensor(f: SpectralField, order: int) -> np.ndarray:
    """All partial derivatives of the given order, physical, shape (ncomp*ndim^order, *dims)."""
    c = f.coeffs
    for _ in range(order):
        c = grad_coeffs(f.grid, c)
    g = f.grid
    return g.inv(c.reshape((-1,) + g.spectral_shape))


def sobolev_norm(f: SpectralField, m: int, p: float, homogeneous: bool = False) -> float:
    """(sum_j ||grad^j f||_p^p)^{1/p}; homogeneous keeps only j = m."""
    orders = [m] if homogeneous else list(range(m + 1))
    vals = [lp_of_array(derivative_tensor(f, j), f.grid, p) for j in orders]
    if math.isinf(p):
        return max(vals)
    return float(sum(v**p for v in vals) ** (1.0 / p))


# -------------------------------------------------------------------- Besov


def dyadic_shells(grid: Grid) -> dict[int, np.ndarray]:
    """Shell masks: shell j holds 2^j <= |k| < 2^(j+1); the mean mode is in no shell."""
    kmag = grid.kmag
    nz = kmag > 0
    jj = np.full(kmag.shape, np.iinfo(np.int64).min, dtype=np.int64)
    jj[nz] = np.floor(np.log2(kmag[nz]) + 1e-12).astype(np.int64)
    return {int(j): (jj == j) for j in np.unique(jj[nz])}


def besov_norm(f: SpectralField, s: float, p: float) -> float:
    """Discrete homogeneous B^s_{p,p} norm with sharp dyadic annuli."""
    if not (1 < p < math.inf) or abs(s) > 4:
        raise ConfigurationError(f"besov_norm needs p in (1, inf) and |s| <= 4, got s={s}, p={p}")
    g = f.grid
    total = 0.0
    for j, mask in dyadic_shells(g).items():
        block = g.inv(f.coeffs * mask)
        total += 2.0 ** (j * s * p) * lp_of_array(block, g, p) ** p
    return float(total ** (1.0 / p))


# ------------------------------------------------------------ time norms


def time_norm(values: Sequence[float], times: Sequence[float], q: float) -> float:
    """(int |x(t)|^q dt)^{1/q} by the trapezoid rule; q = inf gives the max."""
    v = np.abs(np.asarray(values, dtype=float))
    if math.isinf(q):
        return float(v.max()) if v.size else 0.0
    t = np.asarray(times, dtype=float)
    if v.size < 2:
        return 0.0
    return float(np.trapezoid(v**q, t) ** (1.0 / q))


def sumspace_norm(
    a_part: Sequence[SpectralField] | None,
    b_part: Sequence[SpectralField] | None,
    p: float,
    T: float,
    times: Sequence[float] | None = None,
) -> float:
    """Norm of f = a + b on the supplied splitting.

    a is measured in L_{2p/(2p-n)}(0,T; L_{2p/(p+2)}) and b in L_2(0,T; L_2),
    n being the grid dimension.  Both parts are sampled at the same times
    (uniform on [0, T] unless given).
    """
    parts = [x for x in (a_part, b_part) if x is not None]
    if not parts:
        return 0.0
    nsamp = len(parts[0])
    t = np.linspace(0.0, T, nsamp) if times is None else np.asarray(times, dtype=float)
    total = 0.0
    if a_part is not None:
        n = a_part[0].grid.ndim
        qt, qs = 2 * p / (2 * p - n), 2 * p / (p + 2)
        total += time_norm([lp_norm(a, qs) for a in a_part], t, qt)
    if b_part is not None:
        total += time_norm([b.l2() for b in b_part], t, 2.0)
    return float(total)


# ------------------------------------------------------------ NormSeries

_NORM_VOCAB = re.compile(
    r"^(L1|L2|L3|Linf|energy|dissipation|value|ratio"
    r"|Lp:[0-9.]+|besov:-?[0-9.]+:[0-9.]+|W1p:[0-9.]+"
    r"|weighted:t\^[0-9.]+:[A-Za-z0-9_]+|integral:[A-Za-z0-9_^.]+)$"
)


def validate_name(name: str) -> str:
    """Names are ``<quantity>.<norm>``; the norm part comes from a fixed vocabulary."""
    qty, sep, norm = name.partition(".")
    if not sep or not re.match(r"^[A-Za-z0-9_]+$", qty) or not _NORM_VOCAB.match(norm):
        raise ConfigurationError(f"unregistered norm name {name!r}")
    return name


class NormSeries:
    """Append-only list of (t, name, value) records."""

    def __init__(self, records: Iterable[tuple[float, str, float]] = ()):
        self._records: list[tuple[float, str, float]] = []
        self._last: dict[str, float] = {}
        for t, n, v in records:
            self.add(t, n, v)

    def add(self, t: float, name: str, value: float) -> None:
        validate_name(name)
        value = float(value)
        if not math.isfinite(value):
            raise ConfigurationError(f"non-finite value for {name} at t={t}")
        last = self._last.get(name)
        if last is not None and not t > last:
            raise ConfigurationError(f"times must increase within series {name}: {t} after {last}")
        self._last[name] = float(t)
        self._records.append((float(t), name, value))

    def extend(self, other: "NormSeries") -> None:
        for rec in other.records:
            self.add(*rec)

    @property
    def records(self) -> list[tuple[float, str, float]]:
        return list(self._records)

    def names(self) -> list[str]:
        return list(dict.fromkeys(n for _, n, _ in self._records))

    def get(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        rows = [(t, v) for t, n, v in self._records if n == name]
        if not rows:
            raise KeyError(name)
        arr = np.array(rows)
        return arr[:, 0], arr[:, 1]

    def __len__(self):
        return len(self._records)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("t,name,value\n")
            for t, n, v in self._records:
                fh.write(f"{t!r},{n},{v!r}\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "NormSeries":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["t", "name", "value"]:
                raise ConfigurationError(f"{path}: expected header t,name,value, got {header}")
            return cls((float(t), n, float(v)) for t, n, v in reader)


# --------------------------------------------------------- MonitorReport


@dataclass
class MonitorReport:
    monitor: str
    anchor: str
    lhs: float
    rhs: float
    ratio: float
    verdict: str
    note: str = ""

    def __post_init__(self):
        if self.verdict not in (PASS, FAIL, REPORT):
            raise ConfigurationError(f"bad verdict {self.verdict!r}")

    @property
    def failed(self) -> bool:
        return self.verdict == FAIL

    def to_text(self) -> str:
        lines = [
            f"monitor: {self.monitor}",
            f"anchor: {self.anchor}",
            f"lhs: {self.lhs!r}",
            f"rhs: {self.rhs!r}",
            f"ratio: {self.ratio!r}",
            f"verdict: {self.verdict}",
        ]
        if self.note:
            lines.append(f"note: {self.note}")
        return "\n".join(lines) + "\n"


def check(monitor: str, anchor: str, lhs: float, rhs: float, ok: bool | None, note: str = "") -> MonitorReport:
    """Build a report; ``ok=None`` marks it report-only."""
    ratio = lhs / rhs if rhs not in (0, 0.0) else (0.0 if lhs == 0 else math.inf)
    verdict = REPORT if ok is None else (PASS if ok else FAIL)
    return MonitorReport(monitor, anchor, float(lhs), float(rhs), float(ratio), verdict, note)


def write_reports(reports: Sequence[MonitorReport], path) -> Path:
    path = Path(path)
    path.write_text("\n".join(r.to_text() for r in reports), encoding="utf-8")
    return path


def parse_reports(text: str) -> list[MonitorReport]:
    out = []
    for block in re.split(r"\n\s*\n", text.strip()):
        if not block.strip():
            continue
        kv = {}
        for line in block.splitlines():
            key, _, val = line.partition(":")
            kv[key.strip()] = val.strip()
        out.append(
            MonitorReport(
                kv["monitor"], kv.get("anchor", ""), float(kv["lhs"]), float(kv["rhs"]),
                float(kv["ratio"]), kv["verdict"], kv.get("note", ""),
            )
        )
    return out


# ------------------------------------------------------------- decay fits


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    r2: float
    window: tuple[float, float]
    contaminated: bool = False
    name: str = ""
    nsamples: int = 0


def decay_fit(times, values, window: tuple[float, float] | None = None, *,
              name: str = "", contaminated: bool = False, min_samples: int = 8) -> DecayFit:
    """Least-squares line through (log t, log value) inside ``window``."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is None:
        window = (float(t[t > 0].min()), float(t.max()))
    t0, t1 = window
    sel = (t >= t0) & (t <= t1) & (t > 0) & (v > 0)
    if sel.sum() < min_samples:
        raise WindowError(f"{name or 'series'}: {int(sel.sum())} samples in window {window}, need {min_samples}")
    x, y = np.log(t[sel]), np.log(v[sel])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(slope), float(intercept), min(max(r2, 0.0), 1.0),
                    (float(t0), float(t1)), contaminated, name, int(sel.sum()))


def decay_fit_series(series: NormSeries, name: str, window=None, contaminated: bool = False) -> DecayFit:
    t, v = series.get(name)
    return decay_fit(t, v, window, name=name, contaminated=contaminated)


# ----------------------------------------------------- max regularity


def hessian_lp(u: SpectralField, p: float) -> float:
    return lp_of_array(derivative_tensor(u, 2), u.grid, p)


def maxreg_ratio(stokes_traj, f=None, u0: SpectralField | None = None, p: float = 4.0) -> MonitorReport:
    """Ratio of the two sides of the Stokes maximal-regularity estimate.

    Numerator: sup_t ||u||_{B^{2-2/p}_{p,p}} + ||(u_t, grad^2 u, grad Q)||_{L_p(L_p)};
    denominator: ||f||_{L_p(L_p)} + ||u0||_{B^{2-2/p}_{p,p}}.  The tuple norm is
    (||u_t||^p + ||grad^2 u||^p + ||grad Q||^p)^{1/p}.  If ``f`` is None it is
    rebuilt from the trajectory as u_t + grad Q - Lap u.
    """
    s = 2.0 - 2.0 / p
    times = np.array([r.t for r in stokes_traj])
    u0 = stokes_traj[0].u if u0 is None else u0
    if f is None:
        fs = [SpectralField(r.u.grid, r.u_t.coeffs + r.gradQ.coeffs + r.u.grid.k2 * r.u.coeffs) for r in stokes_traj]
    elif isinstance(f, SpectralField):
        fs = [f] * len(stokes_traj)
    else:
        fs = list(f)
    f_lp = time_norm([lp_norm(x, p) for x in fs], times, p)
    b0 = besov_norm(u0, s, p)
    den = f_lp + b0
    if den == 0:
        raise DegenerateInputError("zero forcing and zero initial data")
    sup_b = max(besov_norm(r.u, s, p) for r in stokes_traj)
    integrand = [lp_norm(r.u_t, p) ** p + hessian_lp(r.u, p) ** p + lp_norm(r.gradQ, p) ** p for r in stokes_traj]
    reg = float(np.trapezoid(integrand, times) ** (1.0 / p))
    num = sup_b + reg
    return check("stokes.maxreg", "stokes maximal regularity ratio", num, den, None,
                 note=f"p={p}; sup_besov={sup_b!r}; lp_part={reg!r}; f_lp={f_lp!r}; u0_besov={b0!r}")


# ------------------------------------------------------- weighted monitors

WEIGHTED_NAMES = ("t_grad_v_sq", "int_t_dtv_sq", "t2_dtv_sq", "t3_grad_dtv_sq", "t4_hess_dtv_sq")


def weighted_series(traj) -> dict[str, np.ndarray]:
    """Time-weighted quantities from items with ``t``, ``v`` and ``v_t`` fields."""
    out = {k: [] for k in ("t",) + WEIGHTED_NAMES}
    acc = 0.0
    prev = None
    for item in traj:
        t, v, vt = item.t, item.v, item.v_t
        g = v.grid
        grad_sq = g.l2_sq(grad_coeffs(g, v.coeffs))
        dtv_sq = g.l2_sq(vt.coeffs)
        grad_dtv_sq = g.l2_sq(grad_coeffs(g, vt.coeffs))
        hess_dtv_sq = g.l2_sq(grad_coeffs(g, grad_coeffs(g, vt.coeffs)))
        if prev is not None:
            acc += 0.5 * (t - prev[0]) * (t * dtv_sq + prev[0] * prev[1])
        prev = (t, dtv_sq)
        out["t"].append(t)
        out["t_grad_v_sq"].append(t * grad_sq)
        out["int_t_dtv_sq"].append(acc)
        out["t2_dtv_sq"].append(t**2 * dtv_sq)
        out["t3_grad_dtv_sq"].append(t**3 * grad_dtv_sq)
        out["t4_hess_dtv_sq"].append(t**4 * hess_dtv_sq)
    return {k: np.asarray(v, dtype=float) for k, v in out.items()}


def weighted_monitors(traj) -> list[MonitorReport]:
    """Boundedness of the time-weighted energy quantities.

    Each pointwise quantity passes when its maximum over the second half of
    the run does not exceed its maximum over the first half; the cumulative
    integral passes when its second-half increment does not exceed the
    first-half one.  The measured constants (running maxima relative to
    ||v0||^2) are reported, never compared with a theoretical constant.
    """
    traj = list(traj)
    ws = weighted_series(traj)
    e0 = traj[0].v.grid.l2_sq(traj[0].v.coeffs)
    n = len(ws["t"])
    half = max(1, n // 2)
    reports = []
    for key in WEIGHTED_NAMES:
        s = ws[key]
        finite = bool(np.all(np.isfinite(s)))
        runmax = float(np.max(s)) if n else 0.0
        if key == "int_t_dtv_sq":
            first = s[half - 1] - s[0] if n > 1 else 0.0
            second = s[-1] - s[half - 1] if n > 1 else 0.0
            ok = finite and second <= first * (1 + 1e-12) + 1e-300
        else:
            ok = finite and float(np.max(s[half:], initial=0.0)) <= float(np.max(s[:half], initial=0.0)) * (1 + 1e-12) + 1e-300
        rhs = e0 if e0 > 0 else 1.0
        reports.append(check(f"hns2d.weighted.{key}", f"time-weighted bound {key}", runmax, rhs, ok,
                             note="rhs is ||v0||_L2^2; ratio is the measured constant"))
    return reports


def peak_time(times, values) -> float:
    """Location of the maximum, refined by a parabola through the top three samples."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    i = int(np.argmax(v))
    if 0 < i < len(v) - 1:
        x = t[i - 1 : i + 2]
        y = v[i - 1 : i + 2]
        a, b, _ = np.polyfit(x, y, 2)
        if a < 0:
            return float(-b / (2 * a))
    return float(t[i])


# ------------------------------------------------- interpolation self-tests


def interpolation_constants(fields: Sequence[SpectralField], p: float = 4.0) -> list[MonitorReport]:
    """Measured constants of standard interpolation inequalities (report-only).

    2D: ||g||_p <= C ||g||_2^{2/p} ||grad g||_2^{1-2/p} and
        ||g||_inf <= C ||g||_2^{1/2} ||grad^2 g||_2^{1/2}.
    3D: ||grad w||_p <= C ||w||_{B^{2-2/p}_{p,p}}^a ||w||_2^b with
        a = (5p-6)/(7p-10), b = (2p-4)/(7p-10).
    """
    worst: dict[str, float] = {}
    for f in fields:
        g = f.grid
        l2 = f.l2()
        if l2 == 0:
            continue
        if g.ndim == 2:
            d1 = np.sqrt(g.l2_sq(grad_coeffs(g, f.coeffs)))
            d2 = np.sqrt(g.l2_sq(grad_coeffs(g, grad_coeffs(g, f.coeffs))))
            c1 = lp_norm(f, p) / (l2 ** (2 / p) * d1 ** (1 - 2 / p))
            c2 = lp_norm(f, math.inf) / (l2**0.5 * d2**0.5)
            worst["lp_gagliardo_2d"] = max(worst.get("lp_gagliardo_2d", 0.0), c1)
            worst["linf_2d"] = max(worst.get("linf_2d", 0.0), c2)
        else:
            a = (5 * p - 6) / (7 * p - 10)
            b = (2 * p - 4) / (7 * p - 10)
            gw = lp_of_array(derivative_tensor(f, 1), g, p)
            c3 = gw / (besov_norm(f, 2 - 2 / p, p) ** a * l2**b)
            worst["grad_lp_besov_3d"] = max(worst.get("grad_lp_besov_3d", 0.0), c3)
    return [check(f"interp.{k}", f"interpolation inequality {k}", v, 1.0, None) for k, v in worst.items()]
