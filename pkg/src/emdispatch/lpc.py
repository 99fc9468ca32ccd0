"""Linearized power characterization of the cell simulator.

Three surrogate families are extracted from constant-current simulations
over one decision step:

* power dynamics: an affine map (SOC0, average power) -> initial current,
* heat dynamics: two planes (theta0, power) -> temperature change sharing
  intercept and theta slope, with separate charge/discharge power slopes,
* SOPT: the maximum sustainable charge/discharge power as a piecewise
  min/max of planes over (SOC0, theta0).

All fits are keyed by cell type, ambient temperature and the operating
limit set they were produced under; mixing keys is refused downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .emcore import BatchCellSim, CellParams, OperatingLimits, VIOLATION_KEYS


def r_squared(samples, predictions) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot."""
    y = np.asarray(samples, dtype=float)
    f = np.asarray(predictions, dtype=float)
    if len(y) < 2:
        raise ValueError("need at least two samples")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("zero-variance targets")
    return 1.0 - float(np.sum((y - f) ** 2)) / ss_tot


@dataclass
class GridSpec:
    """Sampling resolution of the characterization grids."""

    power_soc_points: int = 21
    power_current_points: int = 21
    heat_theta_points: int = 11
    heat_current_points: int = 21
    sopt_soc_points: int = 21
    sopt_theta_points: int = 11
    soc_lo: float = 0.03
    soc_hi: float = 0.97
    theta_below_amb: float = 5.0
    theta_above_amb: float = 20.0

    def validate(self) -> None:
        pts = (self.power_soc_points, self.power_current_points,
               self.heat_theta_points, self.heat_current_points,
               self.sopt_soc_points, self.sopt_theta_points)
        if min(pts) < 5:
            raise ValueError("grids need at least 5 points per axis")


@dataclass
class PowerDynamicsFit:
    a0: float                   # amperes
    a1: float                   # amperes per unit SOC
    a2: float                   # amperes per watt
    r2: float
    sample_count: int = 0
    soc_range: tuple = (0.0, 1.0)
    power_range: tuple = (0.0, 0.0)

    def current(self, soc, power_w):
        return self.a0 + self.a1 * np.asarray(soc) + self.a2 * np.asarray(power_w)


@dataclass
class HeatDynamicsFit:
    e0: float                   # kelvin
    e1: float                   # per kelvin of initial temperature
    e2_dis: float               # kelvin per watt, discharge side
    e2_char: float              # kelvin per watt, charge side
    r2: float
    sample_count: int = 0
    theta_range: tuple = (0.0, 0.0)

    def delta_theta(self, theta0, power_w):
        p = np.asarray(power_w, dtype=float)
        e2 = np.where(p >= 0, self.e2_dis, self.e2_char)
        return self.e0 + self.e1 * np.asarray(theta0) + e2 * p


@dataclass
class SoptFit:
    mode: str                   # "discharge" | "charge"
    planes: list                # [(b0 watts, b1 watts/K, b2 watts/SOC), ...]
    r2: float
    thermostatic: bool = False
    max_residual_w: float = 0.0
    knots: list = field(default_factory=list)

    @property
    def plane_count(self) -> int:
        return len(self.planes)

    def value(self, soc, theta):
        soc = np.asarray(soc, dtype=float)
        vals = np.stack([b0 + b1 * np.asarray(theta) + b2 * soc
                         for (b0, b1, b2) in self.planes])
        return vals.min(axis=0) if self.mode == "discharge" else vals.max(axis=0)


@dataclass
class LpcBundle:
    """Full fitted characterization for one (cell, ambient, limits) key."""

    cell_type: str
    theta_amb: float
    omega_fingerprint: str
    age_label: str
    power: PowerDynamicsFit
    heat: HeatDynamicsFit
    sopt_discharge: SoptFit
    sopt_charge: SoptFit
    sopt_discharge_static: SoptFit
    sopt_charge_static: SoptFit
    dt_decision_s: float
    n_samples: int
    dt_sample_s: float
    cell_capacity_ah: float = 0.0
    cell_voltage_v: float = 0.0
    # SOC domain the fits are valid on; planners must not leave it
    soc_lo: float = 0.03
    soc_hi: float = 0.97

    def __post_init__(self) -> None:
        if abs(self.n_samples * self.dt_sample_s - self.dt_decision_s) > 1e-9:
            raise ValueError("n * delta_t_sample must equal the decision step")

    def key(self) -> tuple:
        return (self.cell_type, round(self.theta_amb, 6), self.omega_fingerprint, self.age_label)

    def sopt(self, mode: str, thermostatic: bool = False) -> SoptFit:
        if mode == "discharge":
            return self.sopt_discharge_static if thermostatic else self.sopt_discharge
        return self.sopt_charge_static if thermostatic else self.sopt_charge

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True, default=_jsonable)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "LpcBundle":
        with open(path) as f:
            d = json.load(f)
        d["power"] = PowerDynamicsFit(**_detuple(d["power"]))
        d["heat"] = HeatDynamicsFit(**_detuple(d["heat"]))
        for k in ("sopt_discharge", "sopt_charge", "sopt_discharge_static", "sopt_charge_static"):
            d[k] = SoptFit(**d[k])
        return cls(**d)


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _detuple(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# constant-current batch runs

def run_constant_current(params: CellParams, limits: OperatingLimits,
                         soc0, theta0, currents, theta_amb: float,
                         n: int, dt_s: float = 1.0) -> dict:
    """Simulate a batch of cells at constant current for n sampling steps.

    Returns per-cell aggregates: mean voltage, feasibility w.r.t. the
    limits at every second, temperature change and final SOC.
    """
    soc0 = np.atleast_1d(np.asarray(soc0, dtype=float))
    currents = np.broadcast_to(np.asarray(currents, dtype=float), soc0.shape)
    sim = BatchCellSim(params, soc0, theta0, theta_amb, dt_s)
    theta_start = sim.theta.copy()
    sum_v = np.zeros(sim.batch)
    feasible = np.ones(sim.batch, dtype=bool)
    min_eta = np.ones(sim.batch)
    for _ in range(n):
        v, eta, phi, _ = sim.step(currents)
        flags = sim.check_limits(limits, currents, v, eta, phi)
        for k in VIOLATION_KEYS:
            feasible &= ~flags[k]
        sum_v += v
        min_eta = np.minimum(min_eta, eta)
    return {
        "mean_v": sum_v / n,
        "feasible": feasible,
        "delta_theta": sim.theta - theta_start,
        "final_soc": sim.soc(),
        "min_eta": min_eta,
    }


def _max_feasible_current(params, limits, soc0, theta0, mode: str, theta_amb,
                          n, dt_s=1.0, tol_c: float = 0.005, max_iter: int = 30):
    """Batched bisection on |I0| for the largest Omega-feasible constant current.

    Returns (|I0|, mean voltage at |I0|). Relies on feasibility being
    monotone in |I0| for this simulator.
    """
    soc0 = np.atleast_1d(np.asarray(soc0, dtype=float))
    theta0 = np.broadcast_to(np.asarray(theta0, dtype=float), soc0.shape)
    sign = 1.0 if mode == "discharge" else -1.0
    imax = (limits.current_max_discharge_a if mode == "discharge"
            else limits.current_max_charge_a)
    tol = tol_c * params.capacity_ah
    eps = 1e-3 * params.capacity_ah

    def feas(mag):
        res = run_constant_current(params, limits, soc0, theta0, sign * mag,
                                   theta_amb, n, dt_s)
        return res["feasible"]

    lo = np.zeros(len(soc0))
    hi = np.full(len(soc0), imax)
    alive = feas(np.full(len(soc0), eps))
    lo = np.where(alive, eps, 0.0)
    top = feas(hi)
    lo = np.where(top, hi, lo)
    hi = np.where(top, hi, hi)
    for _ in range(max_iter):
        gap = hi - lo
        if np.all(gap <= tol):
            break
        mid = np.where(gap > tol, 0.5 * (lo + hi), lo)
        ok = feas(mid)
        lo = np.where(alive & ok & (gap > tol), mid, lo)
        hi = np.where(alive & ~ok & (gap > tol), mid, hi)
    mag = np.where(alive, lo, 0.0)
    res = run_constant_current(params, limits, soc0, theta0, sign * mag,
                               theta_amb, n, dt_s)
    return mag, res["mean_v"]


def solve_sopt_point(soc0: float, theta0: float, mode: str, params: CellParams,
                     limits: OperatingLimits, dt_decision_s: float,
                     dt_sample_s: float = 1.0, method: str = "bisection",
                     grid_resolution_c: float = 0.01) -> float:
    """Maximum sustainable power over one decision step, in watts per cell.

    Discharge values are >= 0, charge values <= 0; 0 means no admissible
    current at all. `method="grid"` scans currents exhaustively at
    `grid_resolution_c` C-rate resolution (the slow reference path).
    """
    if not 0.0 <= soc0 <= 1.0:
        raise ValueError("SOC out of domain")
    if not np.isfinite(theta0):
        raise ValueError("invalid temperature")
    n = int(round(dt_decision_s / dt_sample_s))
    if method == "grid":
        sign = 1.0 if mode == "discharge" else -1.0
        imax = (limits.current_max_discharge_a if mode == "discharge"
                else limits.current_max_charge_a)
        step = grid_resolution_c * params.capacity_ah
        mags = np.arange(step, imax + 0.5 * step, step)
        res = run_constant_current(
            params, limits, np.full(len(mags), soc0), theta0, sign * mags,
            theta0, n, dt_sample_s)
        ok = res["feasible"]
        if not ok.any():
            return 0.0
        best = np.max(np.where(ok, mags, 0.0))
        idx = int(np.argmax(np.where(ok, mags, 0.0)))
        return float(sign * best * res["mean_v"][idx])
    mag, mean_v = _max_feasible_current(
        params, limits, np.array([soc0]), np.array([theta0]), mode,
        theta_amb=theta0, n=n, dt_s=dt_sample_s)
    sign = 1.0 if mode == "discharge" else -1.0
    return float(sign * mag[0] * mean_v[0])


# ---------------------------------------------------------------------------
# plane fitting

def fit_power_plane(soc, power_w, current_a) -> PowerDynamicsFit:
    """Least-squares plane I0 = a0 + a1 * SOC0 + a2 * P0."""
    soc = np.asarray(soc, dtype=float)
    p = np.asarray(power_w, dtype=float)
    i = np.asarray(current_a, dtype=float)
    if len(i) < 3:
        raise ValueError("need at least 3 samples")
    x = np.column_stack([np.ones_like(soc), soc, p])
    if np.linalg.matrix_rank(x) < 3:
        raise ValueError("collinear samples")
    coef, *_ = np.linalg.lstsq(x, i, rcond=None)
    return PowerDynamicsFit(
        a0=float(coef[0]), a1=float(coef[1]), a2=float(coef[2]),
        r2=r_squared(i, x @ coef), sample_count=len(i),
        soc_range=(float(soc.min()), float(soc.max())),
        power_range=(float(p.min()), float(p.max())),
    )


def fit_heat_planes(theta0, power_w, delta_theta) -> HeatDynamicsFit:
    """Joint fit of the two heat planes with shared intercept and theta slope."""
    th = np.asarray(theta0, dtype=float)
    p = np.asarray(power_w, dtype=float)
    y = np.asarray(delta_theta, dtype=float)
    x = np.column_stack([np.ones_like(th), th, np.maximum(p, 0.0), np.minimum(p, 0.0)])
    if np.linalg.matrix_rank(x) < 4:
        raise ValueError("degenerate heat grid")
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    return HeatDynamicsFit(
        e0=float(coef[0]), e1=float(coef[1]), e2_dis=float(coef[2]),
        e2_char=float(coef[3]), r2=r_squared(y, x @ coef),
        sample_count=len(y), theta_range=(float(th.min()), float(th.max())),
    )


def _fit_group_plane(xs, ts, ys, thermostatic):
    if thermostatic or np.ptp(ts) < 1e-9:
        x = np.column_stack([np.ones_like(xs), xs])
        coef, *_ = np.linalg.lstsq(x, ys, rcond=None)
        return float(coef[0]), 0.0, float(coef[1])
    x = np.column_stack([np.ones_like(xs), ts, xs])
    coef, *_ = np.linalg.lstsq(x, ys, rcond=None)
    return float(coef[0]), float(coef[1]), float(coef[2])


def _compose(planes, soc, theta, mode):
    vals = np.stack([b0 + b1 * theta + b2 * soc for (b0, b1, b2) in planes])
    return vals.min(axis=0) if mode == "discharge" else vals.max(axis=0)


def _dp_partition(soc, theta, y, segments, thermostatic):
    """Optimal contiguous least-squares segmentation along the SOC axis."""
    uniq = np.unique(soc)
    nu = len(uniq)
    segments = max(1, min(segments, nu // 2))
    col = np.searchsorted(uniq, soc)
    cache = {}

    def cost(i, j):
        if (i, j) not in cache:
            mask = (col >= i) & (col <= j)
            b = _fit_group_plane(soc[mask], theta[mask], y[mask], thermostatic)
            pred = b[0] + b[1] * theta[mask] + b[2] * soc[mask]
            cache[(i, j)] = (b, float(np.sum((y[mask] - pred) ** 2)))
        return cache[(i, j)]

    dp = np.full((segments, nu), np.inf)
    back = np.zeros((segments, nu), dtype=int)
    for j in range(1, nu):
        dp[0][j] = cost(0, j)[1]
    for m in range(1, segments):
        for j in range(2 * m + 1, nu):
            for i in range(2 * m, j):
                c = dp[m - 1][i - 1] + cost(i, j)[1]
                if c < dp[m][j]:
                    dp[m][j] = c
                    back[m][j] = i
    bounds = []
    j = nu - 1
    for m in range(segments - 1, 0, -1):
        i = back[m][j]
        bounds.append((i, j))
        j = i - 1
    bounds.append((0, j))
    bounds.reverse()
    planes = [cost(i, j)[0] for (i, j) in bounds]
    knots = [float(uniq[0])] + [float(uniq[i]) for (i, _) in bounds[1:]] + [float(uniq[-1])]
    return planes, knots


def _als_refine(planes, soc, theta, y, mode, thermostatic, iters=20):
    """Min/max-affine refinement; returns the best-seen composition."""
    min_pts = 2 if thermostatic else 3
    best = [tuple(p) for p in planes]
    best_sse = float(np.sum((_compose(best, soc, theta, mode) - y) ** 2))
    cur = list(best)
    for _ in range(iters):
        vals = np.stack([b0 + b1 * theta + b2 * soc for (b0, b1, b2) in cur])
        assign = vals.argmin(axis=0) if mode == "discharge" else vals.argmax(axis=0)
        nxt = []
        for m in range(len(cur)):
            mask = assign == m
            if mask.sum() < min_pts:
                nxt.append(cur[m])
                continue
            nxt.append(_fit_group_plane(soc[mask], theta[mask], y[mask], thermostatic))
        sse = float(np.sum((_compose(nxt, soc, theta, mode) - y) ** 2))
        if sse < best_sse:
            best, best_sse = [tuple(p) for p in nxt], sse
        if nxt == cur:
            break
        cur = nxt
    return best, best_sse


def fit_sopt_planes(soc, theta, value, mode: str, segments: int = 3,
                    thermostatic: bool = False) -> SoptFit:
    """Min/max-affine plane fit of the SOPT surface.

    Candidate plane sets come from optimal contiguous SOC segmentations
    at 1..segments pieces, each refined by alternating reassignment; the
    best min/max composition wins. Planes are then nudged so the
    composition keeps the sign convention (discharge >= 0, charge <= 0)
    on the sampled domain.
    """
    soc = np.asarray(soc, dtype=float)
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(value, dtype=float)
    best = None
    best_sse = np.inf
    best_knots = None
    for nseg in range(1, segments + 1):
        planes, knots = _dp_partition(soc, theta, y, nseg, thermostatic)
        refined, sse = _als_refine(planes, soc, theta, y, mode, thermostatic)
        if sse < best_sse:
            best, best_sse, best_knots = refined, sse, knots
    # sign correction over the whole [0, 1] SOC range, not just the
    # sampled domain, so downstream bounds never go the wrong way
    soc_n = np.concatenate([soc, np.zeros_like(np.unique(theta)),
                            np.ones_like(np.unique(theta))])
    th_n = np.concatenate([theta, np.unique(theta), np.unique(theta)])
    nudged = []
    for (b0, b1, b2) in best:
        pred = b0 + b1 * th_n + b2 * soc_n
        if mode == "discharge":
            worst = float(np.min(pred))
            if worst < 0.0:
                b0 -= worst
        else:
            worst = float(np.max(pred))
            if worst > 0.0:
                b0 -= worst
        nudged.append((b0, b1, b2))
    fit = SoptFit(mode=mode, planes=nudged, r2=0.0, thermostatic=thermostatic,
                  knots=best_knots)
    pred = fit.value(soc, theta)
    fit.r2 = r_squared(y, pred)
    fit.max_residual_w = float(np.max(np.abs(pred - y)))
    return fit


# ---------------------------------------------------------------------------
# full characterization

def characterize(params: CellParams, theta_amb: float, limits: OperatingLimits,
                 dt_decision_s: float = 900.0, grid: Optional[GridSpec] = None,
                 age_label: str = "fresh", dt_sample_s: float = 1.0,
                 sopt_segments: int = 3) -> LpcBundle:
    """Run the characterization grids and fit every LPC surrogate."""
    grid = grid or GridSpec()
    grid.validate()
    n = int(round(dt_decision_s / dt_sample_s))

    # --- power dynamics: currents spanning the feasible window per SOC
    socs = np.linspace(grid.soc_lo, grid.soc_hi, grid.power_soc_points)
    id_max, _ = _max_feasible_current(params, limits, socs, theta_amb, "discharge",
                                      theta_amb, n, dt_sample_s)
    ic_max, _ = _max_feasible_current(params, limits, socs, theta_amb, "charge",
                                      theta_amb, n, dt_sample_s)
    fr = np.linspace(-1.0, 1.0, grid.power_current_points)
    soc_s, cur_s = [], []
    for j, s in enumerate(socs):
        cur = np.where(fr >= 0, fr * id_max[j], fr * ic_max[j])
        soc_s.append(np.full(len(fr), s))
        cur_s.append(cur)
    soc_s = np.concatenate(soc_s)
    cur_s = np.concatenate(cur_s)
    res = run_constant_current(params, limits, soc_s, theta_amb, cur_s,
                               theta_amb, n, dt_sample_s)
    keep = res["feasible"]
    if not keep.any():
        raise ValueError("operating limits violated at every power-grid point")
    p0 = cur_s * res["mean_v"]
    power_fit = fit_power_plane(soc_s[keep], p0[keep], cur_s[keep])

    # --- heat dynamics at mid SOC over a theta grid
    thetas = np.linspace(theta_amb - grid.theta_below_amb,
                         theta_amb + grid.theta_above_amb, grid.heat_theta_points)
    idh, _ = _max_feasible_current(params, limits, np.full(len(thetas), 0.5),
                                   thetas, "discharge", theta_amb, n, dt_sample_s)
    ich, _ = _max_feasible_current(params, limits, np.full(len(thetas), 0.5),
                                   thetas, "charge", theta_amb, n, dt_sample_s)
    frh = np.linspace(-1.0, 1.0, grid.heat_current_points)
    th_s, cur_h = [], []
    for j, th in enumerate(thetas):
        cur_h.append(np.where(frh >= 0, frh * idh[j], frh * ich[j]))
        th_s.append(np.full(len(frh), th))
    th_s = np.concatenate(th_s)
    cur_h = np.concatenate(cur_h)
    resh = run_constant_current(params, limits, np.full(len(th_s), 0.5), th_s,
                                cur_h, theta_amb, n, dt_sample_s)
    keep_h = resh["feasible"]
    p0h = cur_h * resh["mean_v"]
    heat_fit = fit_heat_planes(th_s[keep_h], p0h[keep_h], resh["delta_theta"][keep_h])

    # --- SOPT surface over (SOC, theta)
    s_grid = np.linspace(grid.soc_lo, grid.soc_hi, grid.sopt_soc_points)
    t_grid = np.linspace(theta_amb - grid.theta_below_amb,
                         theta_amb + grid.theta_above_amb, grid.sopt_theta_points)
    ss, tt = np.meshgrid(s_grid, t_grid, indexing="ij")
    ss_f, tt_f = ss.ravel(), tt.ravel()
    sopt_fits = {}
    for mode, sign in (("discharge", 1.0), ("charge", -1.0)):
        mag, mean_v = _max_feasible_current(params, limits, ss_f, tt_f, mode,
                                            theta_amb, n, dt_sample_s)
        vals = sign * mag * mean_v
        sopt_fits[mode] = fit_sopt_planes(ss_f, tt_f, vals, mode,
                                          segments=sopt_segments)
        # thermostatic slice at the ambient temperature
        mag_s, mv_s = _max_feasible_current(params, limits, s_grid, theta_amb,
                                            mode, theta_amb, n, dt_sample_s)
        vals_s = sign * mag_s * mv_s
        sopt_fits[mode + "_static"] = fit_sopt_planes(
            s_grid, np.full(len(s_grid), theta_amb), vals_s, mode,
            segments=sopt_segments, thermostatic=True)

    return LpcBundle(
        cell_type=params.cell_type, theta_amb=float(theta_amb),
        omega_fingerprint=limits.fingerprint(), age_label=age_label,
        power=power_fit, heat=heat_fit,
        sopt_discharge=sopt_fits["discharge"],
        sopt_charge=sopt_fits["charge"],
        sopt_discharge_static=sopt_fits["discharge_static"],
        sopt_charge_static=sopt_fits["charge_static"],
        dt_decision_s=float(dt_decision_s), n_samples=n, dt_sample_s=float(dt_sample_s),
        cell_capacity_ah=params.capacity_ah,
        cell_voltage_v=params.nominal_voltage_v,
        soc_lo=grid.soc_lo, soc_hi=grid.soc_hi,
    )


def fit_report(bundle: LpcBundle) -> str:
    """Goodness-of-fit table for the four LPC surrogates."""
    lines = [
        f"LPC fit report  [{bundle.cell_type} @ {bundle.theta_amb:g} degC, {bundle.age_label}]",
        f"  power dynamics        R2 = {bundle.power.r2:.4f}",
        f"  heat dynamics         R2 = {bundle.heat.r2:.4f}",
        f"  SOPT                  R2 = {min(bundle.sopt_discharge.r2, bundle.sopt_charge.r2):.4f}",
        f"  SOPT (thermostatic)   R2 = {min(bundle.sopt_discharge_static.r2, bundle.sopt_charge_static.r2):.4f}",
    ]
    return "\n".join(lines)
