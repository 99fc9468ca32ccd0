"""Surrogate electrochemical cell simulator.

Single-particle-style model per electrode with a small number of radial
nodes, Arrhenius-scaled internal resistance, a lumped thermal equation and
an SEI-style aging proxy triggered by the anode interface potential.
Resolution is one second; all state updates are explicit Euler.

The simulator is vectorized over a batch axis so that characterization
grids can be swept in one pass; `simulate` is the single-cell front end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional

import numpy as np
import yaml

CELSIUS_TO_K = 273.15
REFERENCE_TEMP_C = 25.0


def _load_ocv_table(name: str) -> tuple[np.ndarray, np.ndarray]:
    with resources.files("emdispatch.data").joinpath(name).open() as f:
        rows = np.loadtxt(f, delimiter=",", skiprows=1)
    return rows[:, 0].copy(), rows[:, 1].copy()


@dataclass
class CellParams:
    """Material and thermal parameters of one cell."""

    cell_type: str                      # "NCM" | "LFP"
    capacity_ah: float
    nominal_voltage_v: float
    radial_nodes: int
    stoich_min: float                   # anode stoichiometry at SOC = 0
    stoich_max: float                   # anode stoichiometry at SOC = 1
    ocv_soc: np.ndarray
    ocv_v: np.ndarray
    resistance_ohm: float               # ohmic resistance at 25 degC
    arrhenius_per_k: float              # resistance scaling exponent
    film_resistance_ohm: float          # anode film resistance for phi_se
    thermal_mass_j_per_k: float         # m * C_p
    convection_w_per_k: float           # h_c * A_surf
    pack_heat_w: float                  # lumped h_e * H_e term
    diffusion_rate_per_s: float         # inter-node exchange rate
    sei_rate: float                     # lithium loss per (A * V * s)
    side_reaction_threshold_v: float    # phi_se below this accrues aging
    anode_ocv_offset_v: float = 0.08
    anode_ocv_amp_v: float = 0.45
    anode_ocv_decay: float = 8.0

    def __post_init__(self) -> None:
        self.ocv_soc = np.asarray(self.ocv_soc, dtype=float)
        self.ocv_v = np.asarray(self.ocv_v, dtype=float)
        if self.capacity_ah <= 0:
            raise ValueError("capacity must be positive")
        if not self.stoich_min < self.stoich_max:
            raise ValueError("stoichiometry window is empty")
        if np.any(np.diff(self.ocv_v) <= 0) or np.any(np.diff(self.ocv_soc) <= 0):
            raise ValueError("OCV table must be strictly monotone")
        for v in (self.thermal_mass_j_per_k, self.convection_w_per_k):
            if v < 0:
                raise ValueError("thermal coefficients must be non-negative")
        # explicit Euler stability for the node-exchange diffusion scheme
        if self.diffusion_rate_per_s * 1.0 > 0.5:
            raise ValueError("diffusion rate unstable at 1 s steps")

    @classmethod
    def ncm(cls) -> "CellParams":
        soc, v = _load_ocv_table("ocv_ncm.csv")
        return cls(
            cell_type="NCM", capacity_ah=1.7572, nominal_voltage_v=3.43,
            radial_nodes=5, stoich_min=0.05, stoich_max=0.95,
            ocv_soc=soc, ocv_v=v,
            resistance_ohm=0.030, arrhenius_per_k=0.035,
            film_resistance_ohm=0.045,
            thermal_mass_j_per_k=40.0, convection_w_per_k=0.04,
            pack_heat_w=0.0,
            diffusion_rate_per_s=0.05,
            sei_rate=5e-7, side_reaction_threshold_v=0.05,
        )

    @classmethod
    def lfp(cls) -> "CellParams":
        soc, v = _load_ocv_table("ocv_lfp.csv")
        return cls(
            cell_type="LFP", capacity_ah=1.2184, nominal_voltage_v=2.86,
            radial_nodes=5, stoich_min=0.05, stoich_max=0.95,
            ocv_soc=soc, ocv_v=v,
            resistance_ohm=0.028, arrhenius_per_k=0.035,
            film_resistance_ohm=0.045,
            thermal_mass_j_per_k=45.0, convection_w_per_k=0.045,
            pack_heat_w=0.0,
            diffusion_rate_per_s=0.05,
            sei_rate=5e-7, side_reaction_threshold_v=0.05,
        )

    @classmethod
    def by_type(cls, cell_type: str) -> "CellParams":
        key = cell_type.upper()
        if key == "NCM":
            return cls.ncm()
        if key == "LFP":
            return cls.lfp()
        raise ValueError(f"unknown cell type {cell_type!r}")

    def aged(self, cycles: int) -> "CellParams":
        """Cycle-aged variant: reduced capacity, increased resistance."""
        fade = max(0.5, 1.0 - 5e-5 * cycles)
        growth = 1.0 + 1e-4 * cycles
        return replace(
            self,
            capacity_ah=self.capacity_ah * fade,
            resistance_ohm=self.resistance_ohm * growth,
            film_resistance_ohm=self.film_resistance_ohm * growth,
        )

    def ocv(self, soc):
        return np.interp(soc, self.ocv_soc, self.ocv_v)

    def anode_potential(self, stoich):
        return self.anode_ocv_offset_v + self.anode_ocv_amp_v * np.exp(
            -self.anode_ocv_decay * np.asarray(stoich, dtype=float)
        )

    def resistance(self, theta_c):
        return self.resistance_ohm * np.exp(
            self.arrhenius_per_k * (REFERENCE_TEMP_C - np.asarray(theta_c, dtype=float))
        )

    def soc_to_stoich(self, soc):
        return self.stoich_min + np.asarray(soc, dtype=float) * (self.stoich_max - self.stoich_min)

    def stoich_to_soc(self, stoich):
        return (np.asarray(stoich, dtype=float) - self.stoich_min) / (self.stoich_max - self.stoich_min)

    @classmethod
    def from_file(cls, path: str) -> "CellParams":
        """Load a parameter set from a YAML document.

        The OCV table may be given inline (soc/volts lists) or referenced
        by a 2-column CSV path.
        """
        with open(path) as f:
            doc = yaml.safe_load(f)
        base = cls.by_type(doc.pop("cell_type"))
        ocv_path = doc.pop("ocv_csv", None)
        if ocv_path is not None:
            rows = np.loadtxt(ocv_path, delimiter=",", skiprows=1)
            doc["ocv_soc"], doc["ocv_v"] = rows[:, 0], rows[:, 1]
        return replace(base, cell_type=base.cell_type, **doc)


@dataclass
class OperatingLimits:
    """Operating requirement set enforced inside the simulation."""

    voltage_min_v: float
    voltage_max_v: float
    conc_surface_min: float             # anode surface stoichiometry floor
    conc_surface_max: float
    eta_min: float
    phi_floor_v: float
    tau_ceiling: float
    current_max_discharge_a: float      # positive magnitude
    current_max_charge_a: float         # positive magnitude

    def __post_init__(self) -> None:
        if not 0.0 < self.eta_min < 1.0:
            raise ValueError("eta_min must lie in (0, 1)")
        if self.voltage_min_v >= self.voltage_max_v:
            raise ValueError("empty voltage window")
        if self.conc_surface_min >= self.conc_surface_max:
            raise ValueError("empty concentration window")
        if min(self.current_max_discharge_a, self.current_max_charge_a) <= 0:
            raise ValueError("empty current window")

    @classmethod
    def for_scheme(cls, params: CellParams, scheme: str = "moderate") -> "OperatingLimits":
        """Built-in schemes: 'moderate' (eta >= 99.5 %) and 'fast' (eta >= 98 %)."""
        # current windows sit just above the efficiency-limited mid-SOC
        # current, so the SOPT surface saturates toward high SOC
        eta, c_rate = {"moderate": (0.995, 0.35), "fast": (0.98, 1.2)}[scheme]
        cap = c_rate * params.capacity_ah
        return cls(
            voltage_min_v=float(params.ocv_v[0]) - 0.25,
            voltage_max_v=float(params.ocv_v[-1]) + 0.15,
            conc_surface_min=params.stoich_min,
            conc_surface_max=params.stoich_max,
            eta_min=eta,
            phi_floor_v=0.0,
            tau_ceiling=0.05,
            current_max_discharge_a=cap,
            current_max_charge_a=cap,
        )

    def fingerprint(self) -> str:
        vals = (
            self.voltage_min_v, self.voltage_max_v, self.conc_surface_min,
            self.conc_surface_max, self.eta_min, self.phi_floor_v,
            self.tau_ceiling, self.current_max_discharge_a, self.current_max_charge_a,
        )
        return "omega:" + ",".join(f"{v:.6g}" for v in vals)


@dataclass
class CellState:
    """Electrochemical, thermal and aging state at one instant."""

    xi_neg: np.ndarray                  # anode node stoichiometries
    xi_pos: np.ndarray                  # cathode node stoichiometries (mirrored)
    theta_c: float
    voltage_v: float
    eta: float
    phi_se_v: float
    lithium_loss: float                 # tau_L, dimensionless
    capacity_loss_mah: float
    internal_heat_j: float


VIOLATION_KEYS = (
    "voltage", "concentration", "efficiency", "phi_se", "lithium_loss", "current",
)


@dataclass
class SimulationTrace:
    """Per-second record of one simulation run."""

    current_a: np.ndarray
    voltage_v: np.ndarray
    theta_c: np.ndarray
    soc: np.ndarray
    eta: np.ndarray
    phi_se_v: np.ndarray
    heat_j: np.ndarray                  # internal heat increment per step
    violations: dict[str, np.ndarray]   # per-member boolean flags
    dt_s: float
    final_state: CellState = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return len(self.current_a)

    def violated(self) -> bool:
        return any(bool(v.any()) for v in self.violations.values())


class BatchCellSim:
    """Vectorized cell engine over a batch of independent cells.

    State arrays carry a leading batch axis. `step` advances every cell by
    one sampling interval given a per-cell current (discharge-positive).
    """

    def __init__(self, params: CellParams, soc0: np.ndarray, theta0: np.ndarray,
                 theta_amb: float, dt_s: float = 1.0):
        if dt_s <= 0:
            raise ValueError("dt must be positive")
        soc0 = np.atleast_1d(np.asarray(soc0, dtype=float))
        theta0 = np.broadcast_to(np.asarray(theta0, dtype=float), soc0.shape).copy()
        self.p = params
        self.dt = float(dt_s)
        self.theta_amb = float(theta_amb)
        nb = len(soc0)
        nn = params.radial_nodes
        self.xi = np.tile(params.soc_to_stoich(soc0)[:, None], (1, nn))
        # cathode runs the complementary window
        self.xi_pos = np.tile((params.stoich_max + params.stoich_min
                               - params.soc_to_stoich(soc0))[:, None], (1, nn))
        self.theta = theta0
        self.tau = np.zeros(nb)
        self.heat_j = np.zeros(nb)
        self._dsoc_dq = (params.stoich_max - params.stoich_min) / (3600.0 * params.capacity_ah)

    @property
    def batch(self) -> int:
        return self.xi.shape[0]

    def soc(self) -> np.ndarray:
        return self.p.stoich_to_soc(self.xi.mean(axis=1))

    def surface_soc(self) -> np.ndarray:
        return self.p.stoich_to_soc(self.xi[:, -1])

    def outputs(self, current_a: np.ndarray):
        """Instantaneous (V, eta, phi_se, heat rate) at the present state."""
        i = np.asarray(current_a, dtype=float)
        ocv = self.p.ocv(np.clip(self.surface_soc(), 0.0, 1.0))
        r = self.p.resistance(self.theta)
        v = ocv - i * r
        with np.errstate(divide="ignore", invalid="ignore"):
            eta = np.where(i > 0, v / ocv, np.where(i < 0, ocv / v, 1.0))
        phi = self.p.anode_potential(self.xi[:, -1]) - i * self.p.film_resistance_ohm
        heat_w = i * i * r
        return v, eta, phi, heat_w

    def step(self, current_a: np.ndarray):
        """Advance one interval; returns the pre-step instantaneous outputs."""
        i = np.asarray(current_a, dtype=float)
        v, eta, phi, heat_w = self.outputs(i)
        # aging accrues while phi_se sits below the side-reaction threshold
        deficit = np.maximum(0.0, self.p.side_reaction_threshold_v - phi)
        self.tau += self.p.sei_rate * np.abs(i) * deficit * self.dt
        self.heat_j += heat_w * self.dt
        # lumped thermal equation
        dtheta = (heat_w + self.p.convection_w_per_k * (self.theta_amb - self.theta)
                  + self.p.pack_heat_w) / self.p.thermal_mass_j_per_k
        self.theta = self.theta + dtheta * self.dt
        # node exchange diffusion plus surface (de)lithiation flux
        for xi, sign in ((self.xi, -1.0), (self.xi_pos, 1.0)):
            lap = np.zeros_like(xi)
            lap[:, 1:] += xi[:, :-1] - xi[:, 1:]
            lap[:, :-1] += xi[:, 1:] - xi[:, :-1]
            xi += self.p.diffusion_rate_per_s * self.dt * lap
            xi[:, -1] += sign * i * self._dsoc_dq * xi.shape[1] * self.dt
        return v, eta, phi, heat_w

    def check_limits(self, limits: OperatingLimits, current_a, v, eta, phi) -> dict[str, np.ndarray]:
        i = np.asarray(current_a, dtype=float)
        surf = self.xi[:, -1]
        surf_pos = self.xi_pos[:, -1]
        return {
            "voltage": (v < limits.voltage_min_v) | (v > limits.voltage_max_v),
            "concentration": (
                (surf < limits.conc_surface_min) | (surf > limits.conc_surface_max)
                | (surf_pos < limits.conc_surface_min) | (surf_pos > limits.conc_surface_max)
            ),
            "efficiency": eta < limits.eta_min,
            "phi_se": phi < limits.phi_floor_v,
            "lithium_loss": self.tau > limits.tau_ceiling,
            "current": (i > limits.current_max_discharge_a) | (-i > limits.current_max_charge_a),
        }


def soc_of(state: CellState, params: CellParams) -> float:
    """Normalized mean anode lithium concentration over the radial nodes."""
    return float(params.stoich_to_soc(np.mean(state.xi_neg)))


def simulate(soc0: float, theta0: float, current_a: np.ndarray, params: CellParams,
             theta_amb: float, limits: OperatingLimits, dt_s: float = 1.0,
             initial_tau: float = 0.0) -> SimulationTrace:
    """Integrate one cell over a discharge-positive current series."""
    current_a = np.asarray(current_a, dtype=float)
    if current_a.ndim != 1 or len(current_a) == 0:
        raise ValueError("current series must be 1-D and non-empty")
    if not np.all(np.isfinite(current_a)) or not np.isfinite(soc0) or not np.isfinite(theta0):
        raise ValueError("non-finite input")
    n = len(current_a)
    sim = BatchCellSim(params, np.array([soc0]), np.array([theta0]), theta_amb, dt_s)
    sim.tau[0] = initial_tau
    v_t = np.empty(n)
    th_t = np.empty(n)
    soc_t = np.empty(n)
    eta_t = np.empty(n)
    phi_t = np.empty(n)
    heat_t = np.empty(n)
    viol = {k: np.zeros(n, dtype=bool) for k in VIOLATION_KEYS}
    for i in range(n):
        cur = current_a[i:i + 1]
        v, eta, phi, heat_w = sim.outputs(cur)
        flags = sim.check_limits(limits, cur, v, eta, phi)
        for k in VIOLATION_KEYS:
            viol[k][i] = flags[k][0]
        sim.step(cur)
        v_t[i], eta_t[i], phi_t[i] = v[0], eta[0], phi[0]
        th_t[i] = sim.theta[0]
        soc_t[i] = sim.soc()[0]
        heat_t[i] = heat_w[0] * dt_s
    final = CellState(
        xi_neg=sim.xi[0].copy(), xi_pos=sim.xi_pos[0].copy(),
        theta_c=float(sim.theta[0]), voltage_v=float(v_t[-1]), eta=float(eta_t[-1]),
        phi_se_v=float(phi_t[-1]), lithium_loss=float(sim.tau[0]),
        capacity_loss_mah=float(sim.tau[0] * params.capacity_ah * 1000.0),
        internal_heat_j=float(sim.heat_j[0]),
    )
    return SimulationTrace(
        current_a=current_a.copy(), voltage_v=v_t, theta_c=th_t, soc=soc_t,
        eta=eta_t, phi_se_v=phi_t, heat_j=heat_t, violations=viol, dt_s=dt_s,
        final_state=final,
    )


def charge_throughput(trace: SimulationTrace) -> float:
    """Discrete sum of I * dt in ampere-hours."""
    return float(np.sum(trace.current_a) * trace.dt_s / 3600.0)


def energy_throughput(trace: SimulationTrace) -> float:
    """Discrete sum of I * V * dt in watt-hours."""
    return float(np.sum(trace.current_a * trace.voltage_v) * trace.dt_s / 3600.0)
