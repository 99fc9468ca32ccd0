"""Matrix-form SOC and temperature recursions for pack-level planning.

The fitted power plane I0 = a0 + a1*SOC + a2*P makes the SOC recursion
linear, so a whole horizon can be written as one affine map of the power
series.  Temperature works the same way through the heat planes.  The
iterative step-by-step forms are kept alongside as oracles; the two must
agree to 1e-9 at every step.
"""

from dataclasses import dataclass

import numpy as np

from .lpc import LpcBundle


def _powers(base: float, horizon: int) -> np.ndarray:
    # [base^1, ..., base^horizon]
    return base ** np.arange(1, horizon + 1, dtype=float)


def _lower_triangular(base: float, horizon: int) -> np.ndarray:
    """L[t][j] = base^(t-j) for j <= t, else 0 (unit diagonal)."""
    t = np.arange(horizon)
    exponent = t[:, None] - t[None, :]
    with np.errstate(invalid="ignore"):
        mat = np.where(exponent >= 0, float(base) ** exponent, 0.0)
    return np.tril(mat)


@dataclass
class SocUpdateMatrices:
    chi: float
    A: np.ndarray               # (T,)   chi^t
    B: np.ndarray               # (T,T)  unscaled lower-triangular chi powers
    B_P: np.ndarray             # (T,T)  per pack-watt
    B_CS: np.ndarray            # (T,)   constant-source column
    n_cells: int
    capacity_ah: float
    dt_h: float

    def trajectory(self, soc_init: float, pack_power_w) -> np.ndarray:
        """SOC at steps 1..T for a pack power series of length T."""
        p = np.asarray(pack_power_w, dtype=float)
        return soc_init * self.A + self.B_P @ p + self.B_CS


@dataclass
class TempUpdateMatrices:
    C: np.ndarray               # (T,)   (1+e1)^t
    D: np.ndarray               # (T,T)  unscaled lower-triangular powers
    D_P_dis: np.ndarray         # (T,T)  per pack-watt, discharge side
    D_P_char: np.ndarray        # (T,T)  per pack-watt, charge side
    D_CS: np.ndarray            # (T,)
    n_cells: int

    def trajectory(self, theta_init: float, pack_dis_w, pack_chg_w) -> np.ndarray:
        pd = np.asarray(pack_dis_w, dtype=float)
        pc = np.asarray(pack_chg_w, dtype=float)
        return (theta_init * self.C + self.D_P_dis @ pd
                + self.D_P_char @ pc + self.D_CS)


def build_soc_matrices(bundle: LpcBundle, horizon: int, n_cells: int,
                       capacity_ah: float) -> SocUpdateMatrices:
    if horizon < 1 or capacity_ah <= 0 or n_cells < 1:
        raise ValueError("horizon, cell count and capacity must be positive")
    a0, a1, a2 = bundle.power.a0, bundle.power.a1, bundle.power.a2
    if not all(np.isfinite([a0, a1, a2])):
        raise ValueError("non-finite power-plane coefficients")
    dt_h = bundle.dt_decision_s / 3600.0
    chi = 1.0 - a1 * dt_h / capacity_ah
    A = _powers(chi, horizon)
    B = _lower_triangular(chi, horizon)
    B_P = -(a2 * dt_h / capacity_ah / n_cells) * B
    B_CS = -(a0 * dt_h / capacity_ah) * (B @ np.ones(horizon))
    return SocUpdateMatrices(chi=chi, A=A, B=B, B_P=B_P, B_CS=B_CS,
                             n_cells=n_cells, capacity_ah=capacity_ah,
                             dt_h=dt_h)


def build_temp_matrices(bundle: LpcBundle, horizon: int,
                        n_cells: int) -> TempUpdateMatrices:
    if horizon < 1 or n_cells < 1:
        raise ValueError("horizon and cell count must be positive")
    h = bundle.heat
    if not all(np.isfinite([h.e0, h.e1, h.e2_dis, h.e2_char])):
        raise ValueError("non-finite heat-plane coefficients")
    growth = 1.0 + h.e1
    C = _powers(growth, horizon)
    D = _lower_triangular(growth, horizon)
    D_CS = h.e0 * (D @ np.ones(horizon))
    return TempUpdateMatrices(C=C, D=D,
                              D_P_dis=(h.e2_dis / n_cells) * D,
                              D_P_char=(h.e2_char / n_cells) * D,
                              D_CS=D_CS, n_cells=n_cells)


def iterate_soc(bundle: LpcBundle, soc_init: float, pack_power_w,
                n_cells: int, capacity_ah: float) -> np.ndarray:
    """Step-by-step SOC recursion; the matrix form's reference."""
    a0, a1, a2 = bundle.power.a0, bundle.power.a1, bundle.power.a2
    dt_h = bundle.dt_decision_s / 3600.0
    soc = soc_init
    out = np.empty(len(pack_power_w))
    for t, p in enumerate(np.asarray(pack_power_w, dtype=float)):
        i0 = a0 + a1 * soc + a2 * p / n_cells
        soc = soc - i0 * dt_h / capacity_ah
        out[t] = soc
    return out


def iterate_temp(bundle: LpcBundle, theta_init: float, pack_dis_w,
                 pack_chg_w, n_cells: int) -> np.ndarray:
    h = bundle.heat
    theta = theta_init
    pd = np.asarray(pack_dis_w, dtype=float)
    pc = np.asarray(pack_chg_w, dtype=float)
    out = np.empty(len(pd))
    for t in range(len(pd)):
        theta = (theta + h.e0 + h.e1 * theta
                 + h.e2_dis * pd[t] / n_cells + h.e2_char * pc[t] / n_cells)
        out[t] = theta
    return out
