"""Scenario assembly: configuration schema, series data, EV behavior
sampling, and synthetic stand-ins for load/PV/price/swap-demand data.

Everything is seeded; identical (config, seed) pairs produce identical
scenarios down to the last float.
"""

import copy
import zlib
from dataclasses import dataclass, field

import numpy as np
import yaml


def pack_cell_count(energy_kwh: float, capacity_ah: float,
                    nominal_voltage_v: float) -> int:
    """Cells needed to realize a pack energy at nominal cell energy."""
    return int(round(1000.0 * energy_kwh / (capacity_ah * nominal_voltage_v)))


# --------------------------------------------------------------------------
# configuration

DEFAULT_CONFIG = {
    "horizon_steps": 96,
    "delta_t_min": 15,
    "delta_h_min": 60,
    "theta_amb_c": 25.0,
    "grid_interface_efficiency": 0.85,
    "price_avg_per_kwh": 0.12,
    "swap_fee": 2.0,
    "ev": {
        "count": 8,
        "cell_type": "ncm",
        "pack_energy_kwh": 35.0,
        "soc_min": 0.2,
        "soc_max": 0.8,
        "soc_req_departure": 0.7,
        "soc_init_mean": 0.5,
        "soc_init_std": 0.15,
        "cruise_ratio_min": 0.15,
        "cruise_ratio_max": 0.30,
        "scheme": "moderate",
    },
    "bss": {
        "dock_count": 4,
        "aggregation": 6,
        "cell_type": "ncm",
        "pack_energy_kwh": 50.0,
        "soc_min": 0.1,
        "soc_max": 0.9,
        "soc_full": 0.9,
        "soc_empty": 0.1,
        "soc_stocking_loss": 0.02,
        "q_full_init": 300,
        "q_empty_init": 300,
        "equilibrium_tolerance": None,   # default: one aggregated dock (= beta)
        "swaps_per_day": 8,
        "scheme": "fast",
    },
    "es": {
        "cell_type": "lfp",
        "pack_energy_kwh": 1000.0,
        "soc_min": 0.01,
        "soc_max": 0.99,
        "soc_init": 0.5,
        "scheme": "moderate",
    },
    "loads": {
        "commercial_peak_kw": 120.0,
        "residential_peak_kw": 6.0,
        "pv_peak_kw": 150.0,
        "adjustable": [
            {"energy_kwh": 40.0, "power_max_kw": 20.0,
             "window_start_step": 36, "window_end_step": 80},
        ],
    },
    "price": {
        "offpeak_per_kwh": 0.06,
        "peak_per_kwh": 0.18,
        "shoulder_per_kwh": 0.11,
    },
    "seed": 20240501,
}


def load_config(path: str) -> dict:
    with open(path) as f:
        user = yaml.safe_load(f) or {}
    cfg = copy.deepcopy(DEFAULT_CONFIG)

    def merge(base, extra):
        for k, v in extra.items():
            if isinstance(v, dict) and isinstance(base.get(k), dict):
                merge(base[k], v)
            else:
                base[k] = v
    merge(cfg, user)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["delta_h_min"] % cfg["delta_t_min"] != 0:
        raise ValueError("coarse step must be an integer multiple of the fine step")
    if cfg["horizon_steps"] * cfg["delta_t_min"] % cfg["delta_h_min"] != 0:
        raise ValueError("horizon must cover whole coarse steps")
    if not 0 < cfg["grid_interface_efficiency"] <= 1:
        raise ValueError("interface efficiency must lie in (0, 1]")
    ev = cfg["ev"]
    if not ev["soc_min"] < ev["soc_req_departure"] <= ev["soc_max"]:
        raise ValueError("departure SOC requirement outside the EV window")
    if "seed" not in cfg or cfg["seed"] is None:
        raise ValueError("a seed is mandatory")


# --------------------------------------------------------------------------
# series data

@dataclass
class SeriesData:
    name: str
    values: np.ndarray
    unit: str
    step_min: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.unit in ("kW", "count") and np.any(self.values < -1e-12):
            raise ValueError(f"{self.name}: negative values in {self.unit} series")


def load_series(path: str, name: str, unit: str, step_min: float,
                expected_len: int = None) -> SeriesData:
    """Two-column CSV (timestamp, value); header row optional."""
    rows = []
    with open(path) as f:
        for line in f:
            parts = line.strip().split(",")
            if len(parts) < 2:
                continue
            try:
                rows.append(float(parts[1]))
            except ValueError:
                continue                    # header
    if expected_len is not None and len(rows) != expected_len:
        raise ValueError(f"{path}: expected {expected_len} rows, got {len(rows)}")
    return SeriesData(name, np.array(rows), unit, step_min)


def generate_synthetic(kind: str, seed: int, T: int, dt_min: float,
                       scale: float = 1.0) -> SeriesData:
    """Deterministic stand-in day profiles (load/PV/price/swap demand)."""
    rng = np.random.default_rng(seed + zlib.crc32(kind.encode()) % 100000)
    h = np.arange(T) * dt_min / 60.0        # hour of day per step
    if kind == "pv":
        v = np.sin(np.pi * (h - 6.0) / 12.0)
        v = np.clip(v, 0.0, None) ** 1.4
        v *= 1.0 + 0.05 * rng.standard_normal(T)
        v = np.clip(v, 0.0, None) * scale
        unit = "kW"
    elif kind == "load_commercial":
        v = 0.25 + 0.75 * np.exp(-((h - 13.0) / 4.0) ** 2)
        v *= 1.0 + 0.03 * rng.standard_normal(T)
        v = np.clip(v, 0.05, None) * scale
        unit = "kW"
    elif kind == "load_residential":
        v = (0.3 + 0.5 * np.exp(-((h - 7.5) / 1.5) ** 2)
             + 0.9 * np.exp(-((h - 19.5) / 2.0) ** 2))
        v *= 1.0 + 0.05 * rng.standard_normal(T)
        v = np.clip(v, 0.1, None) * scale
        unit = "kW"
    elif kind == "price":
        v = np.full(T, 0.06)
        v[(h >= 7) & (h < 11)] = 0.11
        v[(h >= 11) & (h < 15)] = 0.18
        v[(h >= 15) & (h < 18)] = 0.11
        v[(h >= 18) & (h < 21)] = 0.18
        v = v * scale
        unit = "$/kWh"
    elif kind == "swap_demand":
        # office-arrival shape at coarse resolution; scale = total swaps/day
        w = np.exp(-((h - 8.5) / 1.5) ** 2) + 0.6 * np.exp(-((h - 17.5) / 2.0) ** 2)
        w /= w.sum()
        counts = np.zeros(T, dtype=float)
        total = int(round(scale))
        picks = rng.choice(T, size=total, p=w)
        for p in picks:
            counts[p] += 1
        v = counts
        unit = "count"
    else:
        raise ValueError(f"unknown synthetic series kind {kind!r}")
    return SeriesData(kind, v, unit, dt_min)


# --------------------------------------------------------------------------
# EV behavior

@dataclass
class EvProfile:
    group: str
    index: int
    s_commercial: np.ndarray
    s_residential: np.ndarray
    s_driving: np.ndarray
    soc_init: float
    cruise_ratio: float
    departures: list                      # [(step, soc_req), ...] last plugged step
    n_cells: int = 0

    def validate(self) -> None:
        total = self.s_commercial + self.s_residential + self.s_driving
        if not np.all(total == 1):
            raise ValueError(f"EV {self.group}/{self.index}: states not one-hot")


def _place_visits(T, rng, visits, cruise_len):
    """visits: [(arrive, leave)] sorted commercial stays; cruise abuts both ends."""
    s_c = np.zeros(T, dtype=int)
    s_d = np.zeros(T, dtype=int)
    for a, l in visits:
        a, l = max(0, a), min(T - 1, l)
        if l < a:
            raise ValueError("visit window inverted")
        s_c[a:l + 1] = 1
        for t in range(max(0, a - cruise_len), a):
            s_d[t] = 1
        for t in range(l + 1, min(T, l + 1 + cruise_len)):
            s_d[t] = 1
    s_d[s_c == 1] = 0
    s_r = 1 - s_c - s_d
    if np.any(s_r < 0):
        raise ValueError("overlapping commercial/cruise windows")
    return s_c, s_r, s_d


def sample_ev_profiles(cfg: dict, seed: int, T: int = None) -> list:
    """Fleet with day-shift, night-shift, midday-home and random groups
    in a 2:1:1:1 ratio; plug/unplug times drawn from group windows."""
    T = T or cfg["horizon_steps"]
    ev = cfg["ev"]
    rng = np.random.default_rng(seed)
    n = ev["count"]
    n_day = max(1, round(2 * n / 5))
    n_rest = n - n_day
    groups = (["day_shift"] * n_day
              + ["night_shift"] * (n_rest // 3)
              + ["midday_home"] * (n_rest // 3)
              + ["random"] * (n_rest - 2 * (n_rest // 3)))
    profiles = []
    for idx, g in enumerate(groups):
        cruise = int(rng.integers(2, 5))
        if g == "day_shift":
            a = int(rng.integers(30, 39))
            l = int(rng.integers(66, 75))
            visits = [(a, l)]
        elif g == "night_shift":
            l_morning = int(rng.integers(24, 31))
            a_evening = int(rng.integers(78, 87))
            visits = [(0, l_morning), (a_evening, T - 1)]
        elif g == "midday_home":
            a1 = int(rng.integers(30, 37))
            l1 = int(rng.integers(44, 49))
            a2 = int(rng.integers(56, 61))
            l2 = int(rng.integers(68, 75))
            visits = [(a1, l1), (a2, l2)]
        else:
            k = int(rng.integers(1, 3))
            starts = np.sort(rng.choice(np.arange(20, 80, 4), size=k, replace=False))
            visits = []
            prev_end = -10
            for a in starts:
                if a - cruise <= prev_end + cruise:
                    continue
                l = min(int(a) + int(rng.integers(6, 14)), T - 1 - cruise)
                if l <= a:
                    continue
                visits.append((int(a), l))
                prev_end = l
            if not visits:
                visits = [(40, 52)]
        s_c, s_r, s_d = _place_visits(T, rng, visits, cruise)
        soc0 = float(np.clip(rng.normal(ev["soc_init_mean"], ev["soc_init_std"]),
                             ev["soc_min"] + 0.02, ev["soc_max"] - 0.02))
        ratio = float(rng.uniform(ev["cruise_ratio_min"], ev["cruise_ratio_max"]))
        # departure requirement at the last plugged step before each cruise
        departures = []
        plugged = (s_c + s_r) == 1
        for t in range(T - 1):
            if plugged[t] and s_d[t + 1] == 1:
                departures.append((t, ev["soc_req_departure"]))
        p = EvProfile(g, idx, s_c, s_r, s_d, soc0, ratio, departures)
        p.validate()
        profiles.append(p)
    return profiles


# --------------------------------------------------------------------------
# assembled scenario

@dataclass
class BssSetup:
    dock_count: int
    aggregation: int
    theta_ratio: int                       # coarse/fine step ratio
    soc_full: float
    soc_empty: float
    soc_loss: float
    q_full_init: float
    q_empty_init: float
    epsilon: float
    demand_coarse: np.ndarray              # swaps per coarse step
    n_cells: int
    soc_min: float
    soc_max: float
    scheme: str
    cell_type: str


@dataclass
class EsSetup:
    n_cells: int
    soc_min: float
    soc_max: float
    soc_init: float
    scheme: str
    cell_type: str


@dataclass
class LesScenario:
    T: int
    dt_min: float
    dh_min: float
    theta_amb: float
    gamma: float
    price: np.ndarray                      # $/kWh per step (commercial & residential)
    price_avg: float
    swap_fee: float
    load_commercial_kw: np.ndarray
    load_residential_kw: np.ndarray
    pv_cap_kw: np.ndarray
    adjustable_loads: list                 # [(energy_kwh, p_max_kw, t0, t1)]
    ev_profiles: list
    bss: BssSetup
    es: EsSetup
    ev_n_cells: int
    ev_soc_min: float
    ev_soc_max: float
    ev_scheme: str
    ev_cell_type: str
    config: dict = field(repr=False, default_factory=dict)

    @property
    def dt_h(self):
        return self.dt_min / 60.0

    def validate(self) -> None:
        for arr in (self.price, self.load_commercial_kw,
                    self.load_residential_kw, self.pv_cap_kw):
            if len(arr) != self.T:
                raise ValueError("series length mismatch with horizon")
        theta = int(self.dh_min // self.dt_min)
        if len(self.bss.demand_coarse) != self.T // theta:
            raise ValueError("swap demand length mismatch with coarse horizon")
        for p in self.ev_profiles:
            p.validate()


def build_scenario(cfg: dict, cell_params_by_type: dict) -> LesScenario:
    """cell_params_by_type: {"ncm": CellParams, "lfp": CellParams}."""
    validate_config(cfg)
    seed = cfg["seed"]
    T = cfg["horizon_steps"]
    dt = cfg["delta_t_min"]
    theta = cfg["delta_h_min"] // dt

    loads = cfg["loads"]
    pv = generate_synthetic("pv", seed, T, dt, loads["pv_peak_kw"])
    lc = generate_synthetic("load_commercial", seed, T, dt, loads["commercial_peak_kw"])
    lr = generate_synthetic("load_residential", seed, T, dt, loads["residential_peak_kw"])
    price = generate_synthetic("price", seed, T, dt)
    demand_fine = generate_synthetic("swap_demand", seed, T, dt,
                                     cfg["bss"]["swaps_per_day"])
    demand_coarse = demand_fine.values.reshape(-1, theta).sum(axis=1)

    def cells(section):
        p = cell_params_by_type[cfg[section]["cell_type"]]
        return pack_cell_count(cfg[section]["pack_energy_kwh"],
                               p.capacity_ah, p.nominal_voltage_v)

    profiles = sample_ev_profiles(cfg, seed + 1, T)
    n_ev_cells = cells("ev")
    for p in profiles:
        p.n_cells = n_ev_cells

    b = cfg["bss"]
    eps = b["equilibrium_tolerance"]
    bss = BssSetup(
        dock_count=b["dock_count"], aggregation=b["aggregation"],
        theta_ratio=theta, soc_full=b["soc_full"], soc_empty=b["soc_empty"],
        soc_loss=b["soc_stocking_loss"], q_full_init=b["q_full_init"],
        q_empty_init=b["q_empty_init"],
        epsilon=float(b["aggregation"] if eps is None else eps),
        demand_coarse=demand_coarse, n_cells=cells("bss"),
        soc_min=b["soc_min"], soc_max=b["soc_max"], scheme=b["scheme"],
        cell_type=b["cell_type"])
    e = cfg["es"]
    es = EsSetup(n_cells=cells("es"), soc_min=e["soc_min"], soc_max=e["soc_max"],
                 soc_init=e["soc_init"], scheme=e["scheme"],
                 cell_type=e["cell_type"])
    scn = LesScenario(
        T=T, dt_min=dt, dh_min=cfg["delta_h_min"],
        theta_amb=cfg["theta_amb_c"], gamma=cfg["grid_interface_efficiency"],
        price=price.values, price_avg=cfg["price_avg_per_kwh"],
        swap_fee=cfg["swap_fee"],
        load_commercial_kw=lc.values, load_residential_kw=lr.values,
        pv_cap_kw=pv.values,
        adjustable_loads=[(a["energy_kwh"], a["power_max_kw"],
                           a["window_start_step"], a["window_end_step"])
                          for a in loads["adjustable"]],
        ev_profiles=profiles, bss=bss, es=es,
        ev_n_cells=n_ev_cells,
        ev_soc_min=cfg["ev"]["soc_min"], ev_soc_max=cfg["ev"]["soc_max"],
        ev_scheme=cfg["ev"]["scheme"], ev_cell_type=cfg["ev"]["cell_type"],
        config=cfg)
    scn.validate()
    return scn
