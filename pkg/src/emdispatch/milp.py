"""Solver-agnostic mixed-integer linear programming layer.

A MilpModel holds variables, sparse constraint rows and a linear
objective (always minimize).  Two backends solve it:

* an embedded branch-and-bound over a dense two-phase simplex, exact and
  fully deterministic, intended for small models (<= a few hundred
  variables, ~20 binaries) and for cross-checking;
* HiGHS via scipy.optimize.milp for dispatch-scale instances.

Models can also round-trip through fixed-format MPS for external
solvers.  The dense simplex hits a scaling cliff around a few thousand
rows; beyond that, export and solve elsewhere.
"""

import heapq
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import milp as _scipy_milp
from scipy.optimize import LinearConstraint, Bounds

FEAS_TOL = 1e-6
INT_TOL = 1e-6


@dataclass
class Variable:
    name: str
    lb: float = 0.0
    ub: float = float("inf")
    kind: str = "continuous"    # "continuous" | "binary"


@dataclass
class Constraint:
    name: str
    coeffs: dict                # var name -> coefficient
    sense: str                  # "<=", "=", ">="
    rhs: float
    group: str = ""


@dataclass
class Solution:
    status: str                 # optimal | feasible-gap | infeasible | timeout | unbounded
    values: dict
    objective: float
    gap: float
    wall_time_s: float
    nodes: int = 0

    def __getitem__(self, name):
        return self.values[name]


class MilpModel:
    def __init__(self, name: str = "model"):
        self.name = name
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.objective: dict = {}
        self._index: dict = {}

    def add_var(self, name, lb=0.0, ub=float("inf"), kind="continuous"):
        if name in self._index:
            raise ValueError(f"duplicate variable {name!r}")
        if kind == "binary":
            lb, ub = 0.0, 1.0
        elif kind != "continuous":
            raise ValueError(f"unknown kind {kind!r}")
        self._index[name] = len(self.variables)
        self.variables.append(Variable(name, float(lb), float(ub), kind))
        return name

    def add_constraint(self, name, coeffs, sense, rhs, group=""):
        if sense not in ("<=", "=", ">="):
            raise ValueError(f"bad sense {sense!r}")
        for v in coeffs:
            if v not in self._index:
                raise ValueError(f"constraint {name!r} references unknown {v!r}")
        self.constraints.append(Constraint(name, dict(coeffs), sense,
                                           float(rhs), group))

    def set_objective(self, coeffs):
        for v in coeffs:
            if v not in self._index:
                raise ValueError(f"objective references unknown {v!r}")
        self.objective = dict(coeffs)

    @property
    def n_vars(self):
        return len(self.variables)

    @property
    def n_binaries(self):
        return sum(1 for v in self.variables if v.kind == "binary")

    def index(self, name):
        return self._index[name]

    def arrays(self):
        """(c, A csr, senses, b, lb, ub, is_binary)."""
        n = self.n_vars
        c = np.zeros(n)
        for v, coef in self.objective.items():
            c[self._index[v]] = coef
        rows, cols, vals = [], [], []
        senses, b = [], []
        for i, con in enumerate(self.constraints):
            for v, coef in con.coeffs.items():
                rows.append(i)
                cols.append(self._index[v])
                vals.append(coef)
            senses.append(con.sense)
            b.append(con.rhs)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(len(self.constraints), n))
        lb = np.array([v.lb for v in self.variables])
        ub = np.array([v.ub for v in self.variables])
        is_bin = np.array([v.kind == "binary" for v in self.variables])
        return c, A, senses, np.array(b), lb, ub, is_bin


@dataclass
class SolveOptions:
    gap: float = 0.05
    time_limit_s: float = 600.0
    backend: str = "auto"       # auto | embedded | highs
    node_limit: int = 200000

    def pick_backend(self, model: MilpModel) -> str:
        if self.backend != "auto":
            return self.backend
        if model.n_binaries <= 20 and model.n_vars <= 400:
            return "embedded"
        return "highs"


# --------------------------------------------------------------------------
# dense two-phase simplex (Bland's rule)

def _solve_lp_dense(c, A_eq, b_eq):
    """min c'x, A_eq x = b_eq, x >= 0.  Returns (status, x, obj)."""
    m, n = A_eq.shape
    A = A_eq.copy()
    b = b_eq.copy()
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # phase 1: artificials
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[m, n:n + m] = 1.0
    basis = list(range(n, n + m))
    T[m] -= T[:m].sum(axis=0)
    if not _simplex_iterate(T, basis, n + m):
        return "unbounded", None, None
    if T[m, -1] < -1e-7:
        return "infeasible", None, None
    # drive artificials out of the basis where possible
    for r in range(m):
        if basis[r] >= n:
            piv = next((j for j in range(n) if abs(T[r, j]) > 1e-9), None)
            if piv is not None:
                _pivot(T, r, piv)
                basis[r] = piv
    keep = [r for r in range(m) if basis[r] < n]
    # rows still basic in an artificial are redundant (zero rows)
    T2 = np.zeros((len(keep) + 1, n + 1))
    for new_r, r in enumerate(keep):
        T2[new_r, :n] = T[r, :n]
        T2[new_r, -1] = T[r, -1]
    basis = [basis[r] for r in keep]
    T2[-1, :n] = c
    for r, bv in enumerate(basis):
        T2[-1] -= c[bv] * T2[r]
    if not _simplex_iterate(T2, basis, n):
        return "unbounded", None, None
    x = np.zeros(n)
    for r, bv in enumerate(basis):
        x[bv] = T2[r, -1]
    return "optimal", x, float(c @ x)


def _pivot(T, r, col):
    T[r] /= T[r, col]
    for i in range(T.shape[0]):
        if i != r and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[r]


def _simplex_iterate(T, basis, n_cols):
    m = len(basis)
    for _ in range(200000):
        # Bland: entering = lowest index with negative reduced cost
        col = next((j for j in range(n_cols) if T[-1, j] < -1e-9), None)
        if col is None:
            return True
        ratios = [(T[r, -1] / T[r, col], basis[r], r)
                  for r in range(m) if T[r, col] > 1e-9]
        if not ratios:
            return False        # unbounded
        _, _, r = min(ratios)
        _pivot(T, r, col)
        basis[r] = col
    raise RuntimeError("simplex iteration limit")


def _lp_relaxation(c, A, senses, b, lb, ub, fixed):
    """LP with bounds handled by shifting; fixed: {var_idx: value}."""
    n = len(c)
    lo = lb.copy()
    hi = ub.copy()
    for j, v in fixed.items():
        lo[j] = hi[j] = v
    if np.any(lo > hi + 1e-12):
        return "infeasible", None, None
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A)
    # shift x = lo + y, 0 <= y <= hi-lo
    b_shift = b - Ad @ lo
    rows = [Ad]
    rhs = [b_shift]
    sense_all = list(senses)
    span = hi - lo
    cap = [(j, span[j]) for j in range(n) if np.isfinite(span[j]) and span[j] > 1e-12]
    if cap:
        extra = np.zeros((len(cap), n))
        for i, (j, s) in enumerate(cap):
            extra[i, j] = 1.0
        rows.append(extra)
        rhs.append(np.array([s for _, s in cap]))
        sense_all += ["<="] * len(cap)
    free = [j for j in range(n) if span[j] <= 1e-12]
    Afull = np.vstack(rows)
    bfull = np.concatenate(rhs)
    for j in free:
        Afull[:, j] = 0.0       # pinned at its bound by the shift
    # slacks to equality form
    m = Afull.shape[0]
    slack_cols = []
    for i, s in enumerate(sense_all):
        if s == "<=":
            col = np.zeros(m); col[i] = 1.0; slack_cols.append(col)
        elif s == ">=":
            col = np.zeros(m); col[i] = -1.0; slack_cols.append(col)
    A_eq = np.hstack([Afull] + ([np.column_stack(slack_cols)] if slack_cols else []))
    c_eq = np.concatenate([c, np.zeros(A_eq.shape[1] - n)])
    c_eq[free] = 0.0
    status, y, _ = _solve_lp_dense(c_eq, A_eq, bfull)
    if status != "optimal":
        return status, None, None
    x = lo + y[:n]
    return "optimal", x, float(c @ x)


def _solve_embedded(model: MilpModel, options: SolveOptions) -> Solution:
    t0 = time.time()
    c, A, senses, b, lb, ub, is_bin = model.arrays()
    bin_idx = np.flatnonzero(is_bin)
    status, x, obj = _lp_relaxation(c, A, senses, b, lb, ub, {})
    if status != "optimal":
        return Solution(status, {}, float("nan"), float("inf"),
                        time.time() - t0)
    heap = [(obj, 0, {})]
    counter = 1
    incumbent, inc_obj = None, float("inf")
    nodes = 0
    best_bound = obj
    while heap:
        bound, _, fixed = heapq.heappop(heap)
        best_bound = bound
        if incumbent is not None:
            gap = (inc_obj - bound) / max(abs(inc_obj), 1e-9)
            if gap <= options.gap:
                break
        if bound >= inc_obj - 1e-12:
            continue
        nodes += 1
        if nodes > options.node_limit or time.time() - t0 > options.time_limit_s:
            break
        st, x, obj = _lp_relaxation(c, A, senses, b, lb, ub, fixed)
        if st != "optimal" or obj >= inc_obj - 1e-12:
            continue
        frac = [(abs(x[j] - round(x[j])), j) for j in bin_idx
                if abs(x[j] - round(x[j])) > INT_TOL]
        if not frac:
            if obj < inc_obj:
                incumbent, inc_obj = x.copy(), obj
            continue
        # most fractional; ties -> lowest variable index
        _, j = max(frac, key=lambda t: (min(t[0], 1 - t[0]), -t[1]))
        for v in (0.0, 1.0):
            heapq.heappush(heap, (obj, counter, {**fixed, j: v}))
            counter += 1
    wall = time.time() - t0
    if incumbent is None:
        st = "timeout" if (nodes > options.node_limit or wall > options.time_limit_s) else "infeasible"
        return Solution(st, {}, float("nan"), float("inf"), wall, nodes)
    if not heap:
        # the tree is exhausted: the incumbent is proven optimal even if
        # the last popped node carried a weaker bound
        best_bound = inc_obj
    final_bound = min(best_bound, inc_obj)
    gap = (inc_obj - final_bound) / max(abs(inc_obj), 1e-9)
    values = {v.name: (round(incumbent[i]) if is_bin[i] else float(incumbent[i]))
              for i, v in enumerate(model.variables)}
    status = "optimal" if gap <= 1e-9 else "feasible-gap"
    return Solution(status, values, float(inc_obj), float(max(gap, 0.0)),
                    wall, nodes)


def _solve_highs(model: MilpModel, options: SolveOptions) -> Solution:
    t0 = time.time()
    c, A, senses, b, lb, ub, is_bin = model.arrays()
    lo = np.full(len(b), -np.inf)
    hi = np.full(len(b), np.inf)
    for i, s in enumerate(senses):
        if s in ("<=", "="):
            hi[i] = b[i]
        if s in (">=", "="):
            lo[i] = b[i]
    constraints = [LinearConstraint(A, lo, hi)] if len(b) else []
    res = _scipy_milp(c=c, constraints=constraints,
                      bounds=Bounds(lb, ub),
                      integrality=is_bin.astype(int),
                      options={"mip_rel_gap": options.gap,
                               "time_limit": options.time_limit_s,
                               "presolve": True})
    wall = time.time() - t0
    if res.status == 2:
        return Solution("infeasible", {}, float("nan"), float("inf"), wall)
    if res.status == 3:
        return Solution("unbounded", {}, float("nan"), float("inf"), wall)
    if res.x is None:
        return Solution("timeout", {}, float("nan"), float("inf"), wall)
    values = {v.name: (round(res.x[i]) if is_bin[i] else float(res.x[i]))
              for i, v in enumerate(model.variables)}
    gap = float(getattr(res, "mip_gap", 0.0) or 0.0)
    status = "optimal" if res.status == 0 and gap <= max(options.gap, 1e-9) else "feasible-gap"
    return Solution(status, values, float(res.fun), gap, wall)


def solve(model: MilpModel, options: SolveOptions = None) -> Solution:
    options = options or SolveOptions()
    backend = options.pick_backend(model)
    if backend == "embedded":
        return _solve_embedded(model, options)
    if backend == "highs":
        return _solve_highs(model, options)
    raise ValueError(f"unknown backend {backend!r}")


@dataclass
class FeasibilityReport:
    ok: bool
    max_violation: float
    residuals: dict = field(repr=False, default_factory=dict)
    worst_constraint: str = ""

    def failures(self, tol=FEAS_TOL):
        return {k: v for k, v in self.residuals.items() if v > tol}


def check_feasibility(model: MilpModel, assignment: dict,
                      tol: float = FEAS_TOL) -> FeasibilityReport:
    """Per-constraint violation of an assignment (0 means satisfied)."""
    for v in model.variables:
        if v.name not in assignment:
            raise KeyError(f"assignment missing {v.name!r}")
    residuals = {}
    for v in model.variables:
        x = assignment[v.name]
        residuals[f"bound:{v.name}"] = max(v.lb - x, x - v.ub, 0.0)
    for con in model.constraints:
        lhs = sum(coef * assignment[name] for name, coef in con.coeffs.items())
        if con.sense == "<=":
            viol = max(lhs - con.rhs, 0.0)
        elif con.sense == ">=":
            viol = max(con.rhs - lhs, 0.0)
        else:
            viol = abs(lhs - con.rhs)
        residuals[con.name] = viol
    worst = max(residuals, key=residuals.get)
    return FeasibilityReport(ok=residuals[worst] <= tol,
                             max_violation=residuals[worst],
                             residuals=residuals,
                             worst_constraint=worst)


# --------------------------------------------------------------------------
# fixed-format MPS

def _num(v: float) -> str:
    s = f"{v:.10g}"
    return s if len(s) <= 12 else f"{v:.6g}"


def export_mps(model: MilpModel, path: str) -> None:
    lines = [f"NAME          {model.name}", "ROWS", " N  OBJ"]
    for con in model.constraints:
        tag = {"<=": "L", ">=": "G", "=": "E"}[con.sense]
        lines.append(f" {tag}  {con.name}")
    lines.append("COLUMNS")
    for var in model.variables:
        entries = []
        if var.name in model.objective:
            entries.append(("OBJ", model.objective[var.name]))
        for con in model.constraints:
            if var.name in con.coeffs:
                entries.append((con.name, con.coeffs[var.name]))
        for row, coef in entries:
            lines.append(f"    {var.name:<10s}{row:<10s}{_num(coef)}")
    lines.append("RHS")
    for con in model.constraints:
        if con.rhs != 0.0:
            lines.append(f"    {'RHS':<10s}{con.name:<10s}{_num(con.rhs)}")
    lines.append("BOUNDS")
    for var in model.variables:
        if var.kind == "binary":
            lines.append(f" BV {'BND':<10s}{var.name}")
            continue
        if var.lb == 0.0 and np.isinf(var.ub):
            continue
        if var.lb == var.ub:
            lines.append(f" FX {'BND':<10s}{var.name:<10s}{_num(var.lb)}")
            continue
        if np.isneginf(var.lb) and np.isinf(var.ub):
            lines.append(f" FR {'BND':<10s}{var.name}")
            continue
        if np.isneginf(var.lb):
            lines.append(f" MI {'BND':<10s}{var.name}")
        elif var.lb != 0.0:
            lines.append(f" LO {'BND':<10s}{var.name:<10s}{_num(var.lb)}")
        if not np.isinf(var.ub):
            lines.append(f" UP {'BND':<10s}{var.name:<10s}{_num(var.ub)}")
    lines.append("ENDATA")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def import_mps(path: str) -> MilpModel:
    model = None
    section = None
    senses = {}
    row_order = []
    seen_vars = {}
    with open(path) as f:
        for raw in f:
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("*"):
                continue
            if not line.startswith(" "):
                head = line.split()
                if head[0] == "NAME":
                    model = MilpModel(head[1] if len(head) > 1 else "model")
                else:
                    section = head[0]
                continue
            fields = line.split()
            if section == "ROWS":
                tag, name = fields
                if tag == "N":
                    continue
                senses[name] = {"L": "<=", "G": ">=", "E": "="}[tag]
                row_order.append(name)
                model.add_constraint(name, {}, senses[name], 0.0)
            elif section == "COLUMNS":
                var, row, coef = fields[0], fields[1], float(fields[2])
                if var not in seen_vars:
                    model.add_var(var)
                    seen_vars[var] = True
                if row == "OBJ":
                    model.objective[var] = coef
                else:
                    next(c for c in model.constraints
                         if c.name == row).coeffs[var] = coef
            elif section == "RHS":
                row, val = fields[1], float(fields[2])
                next(c for c in model.constraints if c.name == row).rhs = val
            elif section == "BOUNDS":
                tag, var = fields[0], fields[2]
                v = model.variables[model.index(var)]
                if tag == "BV":
                    v.kind, v.lb, v.ub = "binary", 0.0, 1.0
                elif tag == "FX":
                    v.lb = v.ub = float(fields[3])
                elif tag == "FR":
                    v.lb, v.ub = float("-inf"), float("inf")
                elif tag == "MI":
                    v.lb = float("-inf")
                elif tag == "LO":
                    v.lb = float(fields[3])
                elif tag == "UP":
                    v.ub = float(fields[3])
    return model
