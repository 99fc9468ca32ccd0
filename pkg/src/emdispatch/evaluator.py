"""Plan replay through the full cell model, plus the simpler battery
abstractions (RC circuit, fixed-bound source/sink) used for comparison.

Replay converts each asset's per-step pack power into a per-second cell
current by constant-power tracking (the current is re-solved against the
instantaneous terminal voltage every sub-step), runs the full model, and
reports efficiency, heat, aging and any operating-window violations.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from . import lpc
from .emcore import BatchCellSim, CellParams, OperatingLimits
from .lpc import HeatDynamicsFit, LpcBundle, PowerDynamicsFit


@dataclass
class AssetReplay:
    name: str
    feasible: bool
    violations: dict                   # window name -> violated sub-step count
    first_violation_s: dict            # window name -> first offending second
    eta_min: float                     # 1.0 when the asset never operates
    eta_ok_fraction: float             # operating steps at or above the bound
    heat_kj: float
    lithium_loss_mah: float
    peak_shave_kwh: float
    power_clip_steps: int = 0          # demanded power above the physical peak


@dataclass
class ReplayReport:
    assets: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return all(a.feasible for a in self.assets.values())

    @property
    def eta_min(self) -> float:
        return min((a.eta_min for a in self.assets.values()), default=1.0)

    @property
    def lithium_loss_mah(self) -> float:
        return sum(a.lithium_loss_mah for a in self.assets.values())

    @property
    def heat_kj(self) -> float:
        return sum(a.heat_kj for a in self.assets.values())

    @property
    def peak_shave_kwh(self) -> float:
        return sum(a.peak_shave_kwh for a in self.assets.values())

    def summary(self) -> dict:
        return {"feasible": self.feasible, "eta_min": self.eta_min,
                "heat_kj": self.heat_kj,
                "lithium_loss_mah": self.lithium_loss_mah,
                "peak_shave_kwh": self.peak_shave_kwh,
                "violations": {n: a.violations for n, a in self.assets.items()
                               if a.violations}}


def replay_pack(params: CellParams, limits: OperatingLimits, name: str,
                soc0: float, pack_kw, n_cells: int, theta_amb: float,
                step_s: float = 900.0, dt_s: float = 5.0,
                eta_bound: float = None) -> AssetReplay:
    """Replay one pack's power series at sub-step resolution."""
    pack_kw = np.asarray(pack_kw, dtype=float)
    idle_w = 0.01 * params.capacity_ah * params.nominal_voltage_v
    eta_bound = limits.eta_min if eta_bound is None else eta_bound
    sim = BatchCellSim(params, np.array([soc0]), theta_amb, theta_amb, dt_s)
    n_sub = int(round(step_s / dt_s))
    violations: dict = {}
    first: dict = {}
    eta_ops = []
    clip = 0
    for t, p_kw in enumerate(pack_kw):
        p_cell = 1000.0 * p_kw / n_cells
        for j in range(n_sub):
            ocv = params.ocv(np.clip(sim.surface_soc(), 0.0, 1.0))
            r = params.resistance(sim.theta)
            disc = ocv * ocv - 4.0 * r * p_cell
            if disc[0] < 0.0:       # beyond the physical peak-power point
                clip += 1
                i = ocv / (2.0 * r)
            else:
                i = (ocv - np.sqrt(disc)) / (2.0 * r)
            v, eta, phi, _ = sim.step(i)
            second = t * step_s + j * dt_s
            for key, mask in sim.check_limits(limits, i, v, eta, phi).items():
                if mask[0]:
                    violations[key] = violations.get(key, 0) + 1
                    first.setdefault(key, second)
            if abs(p_cell) > idle_w:
                eta_ops.append(eta[0])
    eta_ops = np.array(eta_ops)
    if clip:
        violations["power_tracking"] = clip
    dt_h = step_s / 3600.0
    return AssetReplay(
        name=name,
        feasible=not violations,
        violations=violations,
        first_violation_s=first,
        eta_min=float(eta_ops.min()) if len(eta_ops) else 1.0,
        eta_ok_fraction=(float(np.mean(eta_ops >= eta_bound - 0.005))
                         if len(eta_ops) else 1.0),
        heat_kj=float(sim.heat_j[0]) / 1000.0,
        lithium_loss_mah=float(sim.tau[0]) * params.capacity_ah * 1000.0,
        peak_shave_kwh=float(np.maximum(pack_kw, 0.0).sum() * dt_h),
        power_clip_steps=clip)


def replay(solution, scenario, cell_params_by_type: dict,
           limits_by_category: dict, dt_s: float = 5.0) -> ReplayReport:
    """Replay every asset of a solved dispatch plan."""
    scn = scenario
    step_s = scn.dt_min * 60.0
    report = ReplayReport()
    v = solution.values

    def series(prefix):
        return np.array([v[f"{prefix}[{t}]"] for t in range(scn.T)])

    ev_params = cell_params_by_type[scn.ev_cell_type]
    for p in scn.ev_profiles:
        pw = (series(f"ev{p.index}_pd") + series(f"ev{p.index}_pc")
              + series(f"ev{p.index}_pu"))
        report.assets[f"ev{p.index}"] = replay_pack(
            ev_params, limits_by_category["ev"], f"ev{p.index}", p.soc_init,
            pw, scn.ev_n_cells, scn.theta_amb, step_s, dt_s)

    es_params = cell_params_by_type[scn.es.cell_type]
    pw = series("es_pd") + series("es_pc")
    report.assets["es"] = replay_pack(
        es_params, limits_by_category["es"], "es", scn.es.soc_init, pw,
        scn.es.n_cells, scn.theta_amb, step_s, dt_s)

    if any(name.startswith("bss0_s[") for name in v):
        bss_params = cell_params_by_type[scn.bss.cell_type]
        th = scn.bss.theta_ratio
        H = scn.T // th
        for k in range(scn.bss.dock_count):
            pw = series(f"bss{k}_pd") + series(f"bss{k}_pc")
            occ = [round(v[f"bss{k}_s[{h}]"]) for h in range(H + 1)]
            h = 0
            seg = 0
            while h < H:
                if not occ[h]:
                    h += 1
                    continue
                h_end = h
                while h_end < H and occ[h_end]:
                    h_end += 1
                t0, t1 = h * th, h_end * th
                soc0 = v[f"bss{k}_soc[{t0}]"]
                # the arrival step has its SOC pinned to the injected
                # value, so replay starts from the following fine step
                report.assets[f"bss{k}_seg{seg}"] = replay_pack(
                    bss_params, limits_by_category["bss"], f"bss{k}_seg{seg}",
                    soc0, pw[t0 + 1:t1], scn.bss.n_cells, scn.theta_amb,
                    step_s, dt_s)
                seg += 1
                h = h_end
    return report


# --------------------------------------------------------------------------
# comparison battery models

@dataclass
class EcmModel:
    """Second-order RC abstraction identified from pulse responses."""
    r0_ohm: float
    r1_ohm: float
    tau1_s: float
    r2_ohm: float
    tau2_s: float
    ocv_soc: np.ndarray
    ocv_v: np.ndarray
    theta_amb: float

    def __post_init__(self):
        if min(self.r0_ohm, self.r1_ohm, self.tau1_s,
               self.r2_ohm, self.tau2_s) <= 0:
            raise ValueError("RC parameters must be positive")

    @property
    def c1_f(self):
        return self.tau1_s / self.r1_ohm

    @property
    def c2_f(self):
        return self.tau2_s / self.r2_ohm

    @property
    def r_steady(self):
        return self.r0_ohm + self.r1_ohm + self.r2_ohm

    def ocv(self, soc):
        return np.interp(soc, self.ocv_soc, self.ocv_v)

    def max_power_w(self, soc, v_min, v_max, i_max_d=np.inf, i_max_c=np.inf):
        """(discharge_w >= 0, charge_w <= 0) from the voltage window and
        the current caps of the operating scheme."""
        ocv = self.ocv(soc)
        i_d = np.minimum(np.maximum(ocv - v_min, 0.0) / self.r_steady, i_max_d)
        i_c = np.minimum(np.maximum(v_max - ocv, 0.0) / self.r_steady, i_max_c)
        return (ocv - i_d * self.r_steady) * i_d, -(ocv + i_c * self.r_steady) * i_c


def fit_ecm(params: CellParams, theta_amb: float = 25.0,
            soc_points=(0.3, 0.5, 0.7), pulse_c: float = 0.5,
            hold_s: float = 120.0, dt_s: float = 1.0) -> EcmModel:
    """Identify RC parameters from discharge-pulse voltage responses."""
    i_a = pulse_c * params.capacity_ah
    r0s, r1s, t1s, r2s, t2s = [], [], [], [], []
    for soc in soc_points:
        sim = BatchCellSim(params, np.array([soc]), theta_amb, theta_amb, dt_s)
        ocv0 = params.ocv(np.clip(sim.surface_soc(), 0.0, 1.0))[0]
        n = int(round(hold_s / dt_s))
        ts, vs = [], []
        for j in range(n):
            v, _, _, _ = sim.step(np.array([i_a]))
            ts.append(j * dt_s)
            vs.append(v[0])
        ts, vs = np.array(ts), np.array(vs)
        drop = (ocv0 - vs) / i_a          # total overpotential per ampere
        r0 = drop[0]

        def model(t, r1, tau1, r2, tau2):
            return r0 + r1 * (1 - np.exp(-t / tau1)) + r2 * (1 - np.exp(-t / tau2))

        try:
            popt, _ = curve_fit(model, ts, drop,
                                p0=[r0 * 0.2, 5.0, r0 * 0.2, 50.0],
                                bounds=(1e-6, [1.0, 600.0, 1.0, 6000.0]),
                                maxfev=20000)
        except RuntimeError as exc:
            raise ValueError(f"RC identification failed at SOC {soc}") from exc
        r0s.append(r0)
        r1s.append(popt[0]); t1s.append(popt[1])
        r2s.append(popt[2]); t2s.append(popt[3])
    soc_tab = np.linspace(0.0, 1.0, 41)
    return EcmModel(float(np.median(r0s)), float(np.median(r1s)),
                    float(np.median(t1s)), float(np.median(r2s)),
                    float(np.median(t2s)), soc_tab, params.ocv(soc_tab),
                    theta_amb)


@dataclass
class SsmModel:
    """Fixed power bounds, fixed efficiency, linear SOC integration."""
    discharge_w: float
    charge_w: float
    efficiency: float = 0.95


def _zero_heat():
    return HeatDynamicsFit(e0=0.0, e1=0.0, e2_dis=0.0, e2_char=0.0, r2=1.0)


def model_bundle(kind: str, params: CellParams, limits: OperatingLimits,
                 theta_amb: float, grid: lpc.GridSpec = None) -> LpcBundle:
    """Planner-facing characterization for one of {em, ecm, ssm}."""
    if kind == "em":
        return lpc.characterize(params, theta_amb, limits, grid=grid)
    soc_grid = np.linspace(0.03, 0.97, 21)
    theta_col = np.full(len(soc_grid), theta_amb)
    if kind == "ecm":
        ecm = fit_ecm(params, theta_amb)
        p_d, p_c = ecm.max_power_w(soc_grid, limits.voltage_min_v,
                                   limits.voltage_max_v,
                                   limits.current_max_discharge_a,
                                   limits.current_max_charge_a)
        # current plane from constant-power tracking on the RC model
        ss, pp = np.meshgrid(soc_grid, np.linspace(-5, 5, 21), indexing="ij")
        ocv = ecm.ocv(ss.ravel())
        disc = np.maximum(ocv ** 2 - 4 * ecm.r_steady * pp.ravel(), 1e-9)
        cur = (ocv - np.sqrt(disc)) / (2 * ecm.r_steady)
        power_fit = lpc.fit_power_plane(ss.ravel(), pp.ravel(), cur)
    elif kind == "ssm":
        ssm = SsmModel(discharge_w=params.capacity_ah * params.nominal_voltage_v,
                       charge_w=-params.capacity_ah * params.nominal_voltage_v)
        p_d = np.full(len(soc_grid), ssm.discharge_w)
        p_c = np.full(len(soc_grid), ssm.charge_w)
        power_fit = PowerDynamicsFit(
            a0=0.0, a1=0.0,
            a2=1.0 / (ssm.efficiency * params.nominal_voltage_v), r2=1.0)
    else:
        raise ValueError(f"unknown battery model {kind!r}")
    fit_d = lpc.fit_sopt_planes(soc_grid, theta_col, p_d, "discharge",
                                thermostatic=True)
    fit_c = lpc.fit_sopt_planes(soc_grid, theta_col, p_c, "charge",
                                thermostatic=True)
    return LpcBundle(
        cell_type=params.cell_type, theta_amb=float(theta_amb),
        omega_fingerprint=f"{kind}:{limits.fingerprint()}", age_label="fresh",
        power=power_fit, heat=_zero_heat(),
        sopt_discharge=fit_d, sopt_charge=fit_c,
        sopt_discharge_static=fit_d, sopt_charge_static=fit_c,
        dt_decision_s=900.0, n_samples=900, dt_sample_s=1.0,
        cell_capacity_ah=params.capacity_ah,
        cell_voltage_v=params.nominal_voltage_v)


def dispatch_with_model(scenario, kind: str, cell_params_by_type: dict,
                        limits_by_category: dict, gap: float = 0.05,
                        time_limit_s: float = 300.0,
                        em_bundles: dict = None):
    """Solve the thermostatic dispatch with a chosen battery abstraction."""
    from . import dispatch as dsp
    if kind == "em" and em_bundles is not None:
        bundles = em_bundles
    else:
        bundles = {}
        for cat in ("ev", "bss", "es"):
            params = cell_params_by_type[getattr_cell_type(scenario, cat)]
            bundles[cat] = model_bundle(kind, params, limits_by_category[cat],
                                        scenario.theta_amb)
    return dsp.solve_dispatch(scenario, bundles, "m2s", gap=gap,
                              time_limit_s=time_limit_s), bundles


def getattr_cell_type(scenario, category: str) -> str:
    if category == "ev":
        return scenario.ev_cell_type
    return getattr(scenario, category).cell_type
