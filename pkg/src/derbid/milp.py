"""Lightweight LP/MILP model builder with a scipy (HiGHS) solving backend.

Every optimization model in this package is assembled through :class:`Model`.
The builder keeps the full row structure (terms, sense, rhs) so that callers
can do more than just solve: the bilevel machinery re-reads rows to emit KKT
conditions, and big-M sizing uses interval arithmetic over variable bounds.

Dual-value convention: a row dual is d(objective)/d(rhs) of the row as
written, and a bound dual is d(objective)/d(bound). For a minimization this
makes equality duals the usual shadow prices, duals of binding ``>=`` rows
non-negative and duals of binding ``<=`` rows non-positive.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, linprog
from scipy.optimize import milp as _scipy_milp

CONTINUOUS = "continuous"
BINARY = "binary"
INTEGER = "integer"

LE = "<="
GE = ">="
EQ = "=="

_model_counter = itertools.count()


class ModelError(Exception):
    """Raised for structural mistakes while building a model."""


class SolveError(Exception):
    """Raised when a solve cannot produce a usable outcome."""


@dataclass(frozen=True)
class VarRef:
    """Opaque handle to a model variable."""

    index: int
    model_id: int

    def __add__(self, other):
        return LinExpr.of(self) + other

    def __radd__(self, other):
        return LinExpr.of(self) + other

    def __sub__(self, other):
        return LinExpr.of(self) - other

    def __rsub__(self, other):
        return (-1.0) * LinExpr.of(self) + other

    def __mul__(self, coeff):
        return LinExpr.of(self) * coeff

    def __rmul__(self, coeff):
        return LinExpr.of(self) * coeff

    def __neg__(self):
        return LinExpr.of(self) * -1.0


class LinExpr:
    """Sparse linear expression: sum of coeff * var plus a constant."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms: dict[int, float] = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def of(item) -> "LinExpr":
        if isinstance(item, LinExpr):
            return item.copy()
        if isinstance(item, VarRef):
            return LinExpr({item.index: 1.0})
        if isinstance(item, (int, float, np.floating, np.integer)):
            return LinExpr(const=float(item))
        raise TypeError(f"cannot build LinExpr from {type(item)!r}")

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.const)

    def add_term(self, var: VarRef, coeff: float) -> "LinExpr":
        c = self.terms.get(var.index, 0.0) + float(coeff)
        if c == 0.0:
            self.terms.pop(var.index, None)
        else:
            self.terms[var.index] = c
        return self

    def __add__(self, other):
        out = self.copy()
        other = LinExpr.of(other)
        for idx, c in other.terms.items():
            nc = out.terms.get(idx, 0.0) + c
            if nc == 0.0:
                out.terms.pop(idx, None)
            else:
                out.terms[idx] = nc
        out.const += other.const
        return out

    __radd__ = __add__

    def __sub__(self, other):
        return self + (LinExpr.of(other) * -1.0)

    def __rsub__(self, other):
        return (self * -1.0) + other

    def __mul__(self, coeff):
        if isinstance(coeff, (VarRef, LinExpr)):
            raise TypeError("products of variables are not linear")
        out = LinExpr(const=self.const * coeff)
        if coeff != 0.0:
            out.terms = {i: c * coeff for i, c in self.terms.items()}
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def lin_sum(items) -> LinExpr:
    """Sum of vars/exprs/constants; avoids quadratic dict copying."""
    out = LinExpr()
    for item in items:
        e = LinExpr.of(item) if not isinstance(item, LinExpr) else item
        for idx, c in e.terms.items():
            nc = out.terms.get(idx, 0.0) + c
            if nc == 0.0:
                out.terms.pop(idx, None)
            else:
                out.terms[idx] = nc
        out.const += e.const
    return out


@dataclass
class Row:
    """One linear constraint, normalized so the rhs holds every constant."""

    terms: dict[int, float]
    sense: str
    rhs: float
    name: str


@dataclass
class SolverConfig:
    """Tolerances and limits shared by every solve in the package."""

    feas_tol: float = 1e-7
    dual_tol: float = 1e-6
    mip_gap: float = 1e-6
    time_limit: float | None = None
    seed: int = 0
    dump_dir: str | None = None


@dataclass
class SolveOutcome:
    status: str  # optimal | infeasible | unbounded | gap-limit
    objective: float
    x: np.ndarray | None
    row_duals: np.ndarray | None = None
    lb_duals: np.ndarray | None = None
    ub_duals: np.ndarray | None = None
    mip_gap: float = 0.0
    wall_time: float = 0.0
    message: str = ""

    def value(self, item) -> float:
        if self.x is None:
            raise SolveError(f"no primal solution available (status={self.status})")
        e = LinExpr.of(item)
        return float(sum(c * self.x[i] for i, c in e.terms.items()) + e.const)

    def dual(self, row_id: int) -> float:
        if self.row_duals is None:
            raise SolveError("no duals available (MILP solve or non-optimal status)")
        return float(self.row_duals[row_id])


class Model:
    """Incremental LP/MILP container with deterministic ids."""

    def __init__(self, name: str = "model", sense: str = "min"):
        self.name = name
        self.model_id = next(_model_counter)
        self.var_lb: list[float] = []
        self.var_ub: list[float] = []
        self.var_kind: list[str] = []
        self.var_name: list[str] = []
        self.rows: list[Row] = []
        self.obj = LinExpr()
        self.obj_sense = sense
        self._frozen = False

    # -- builders ----------------------------------------------------------

    def add_var(self, lb=-math.inf, ub=math.inf, kind=CONTINUOUS, name="") -> VarRef:
        if self._frozen:
            raise ModelError("model is frozen")
        if kind == BINARY:
            lb, ub = max(0.0, lb), min(1.0, ub)
        if lb > ub:
            raise ModelError(f"variable '{name}': lower bound {lb} exceeds upper {ub}")
        if kind not in (CONTINUOUS, BINARY, INTEGER):
            raise ModelError(f"unknown variable kind {kind!r}")
        self.var_lb.append(float(lb))
        self.var_ub.append(float(ub))
        self.var_kind.append(kind)
        self.var_name.append(name or f"x{len(self.var_lb) - 1}")
        return VarRef(len(self.var_lb) - 1, self.model_id)

    def add_binary(self, name="") -> VarRef:
        return self.add_var(0.0, 1.0, BINARY, name)

    def add_integer(self, lb, ub, name="") -> VarRef:
        return self.add_var(lb, ub, INTEGER, name)

    def _check_expr(self, expr: LinExpr):
        n = len(self.var_lb)
        for idx in expr.terms:
            if idx < 0 or idx >= n:
                raise ModelError(f"expression references unregistered variable index {idx}")

    def add_constr(self, expr, sense: str, rhs=0.0, name="") -> int:
        if self._frozen:
            raise ModelError("model is frozen")
        if sense not in (LE, GE, EQ):
            raise ModelError(f"unknown sense {sense!r}")
        e = LinExpr.of(expr)
        if isinstance(rhs, (VarRef, LinExpr)):
            e = e - rhs
            rhs_val = 0.0
        else:
            rhs_val = float(rhs)
        self._check_expr(e)
        rhs_val -= e.const
        self.rows.append(Row(dict(e.terms), sense, rhs_val, name or f"c{len(self.rows)}"))
        return len(self.rows) - 1

    def set_objective(self, expr, sense: str = "min"):
        if self._frozen:
            raise ModelError("model is frozen")
        if sense not in ("min", "max"):
            raise ModelError(f"unknown objective sense {sense!r}")
        e = LinExpr.of(expr)
        self._check_expr(e)
        self.obj = e
        self.obj_sense = sense

    def freeze(self):
        self._frozen = True

    # -- introspection ------------------------------------------------------

    @property
    def num_vars(self) -> int:
        return len(self.var_lb)

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    def has_free_discrete(self) -> bool:
        return any(
            k != CONTINUOUS and self.var_lb[i] < self.var_ub[i]
            for i, k in enumerate(self.var_kind)
        )

    def expr_bounds(self, expr) -> tuple[float, float]:
        """Interval bound of an expression from the variable boxes."""
        e = LinExpr.of(expr)
        lo = hi = e.const
        for idx, c in e.terms.items():
            a, b = c * self.var_lb[idx], c * self.var_ub[idx]
            lo += min(a, b)
            hi += max(a, b)
        return lo, hi

    def fingerprint(self) -> str:
        """Stable hash of the canonical model form (used by reproducibility tests)."""
        h = hashlib.sha256()
        h.update(repr((self.var_lb, self.var_ub, self.var_kind)).encode())
        for r in self.rows:
            h.update(repr((sorted(r.terms.items()), r.sense, r.rhs)).encode())
        h.update(repr((sorted(self.obj.terms.items()), self.obj.const, self.obj_sense)).encode())
        return h.hexdigest()

    # -- matrix assembly ----------------------------------------------------

    def _matrix(self):
        n = self.num_vars
        data, ri, ci = [], [], []
        lo = np.empty(self.num_rows)
        hi = np.empty(self.num_rows)
        for k, row in enumerate(self.rows):
            for idx, c in row.terms.items():
                ri.append(k)
                ci.append(idx)
                data.append(c)
            if row.sense == LE:
                lo[k], hi[k] = -np.inf, row.rhs
            elif row.sense == GE:
                lo[k], hi[k] = row.rhs, np.inf
            else:
                lo[k], hi[k] = row.rhs, row.rhs
        a = sp.csr_matrix((data, (ri, ci)), shape=(self.num_rows, n))
        return a, lo, hi

    def _cost(self):
        c = np.zeros(self.num_vars)
        for idx, coeff in self.obj.terms.items():
            c[idx] = coeff
        return c

    def write_lp(self, path: str):
        """Dump the model in CPLEX LP text format for inspection."""
        def vn(i):
            raw = self.var_name[i]
            clean = "".join(ch if ch.isalnum() or ch in "_" else "_" for ch in raw)
            return f"v{i}_{clean}" if clean else f"v{i}"

        def expr_str(terms):
            parts = []
            for idx in sorted(terms):
                c = terms[idx]
                sign = "+" if c >= 0 else "-"
                parts.append(f"{sign} {abs(c):.17g} {vn(idx)}")
            return " ".join(parts) if parts else "0 " + vn(0)

        lines = [f"\\ {self.name}"]
        lines.append("Maximize" if self.obj_sense == "max" else "Minimize")
        lines.append(" obj: " + expr_str(self.obj.terms))
        lines.append("Subject To")
        op = {LE: "<=", GE: ">=", EQ: "="}
        for k, row in enumerate(self.rows):
            lines.append(f" c{k}: " + expr_str(row.terms) + f" {op[row.sense]} {row.rhs:.17g}")
        lines.append("Bounds")
        for i in range(self.num_vars):
            lb, ub = self.var_lb[i], self.var_ub[i]
            if lb == -math.inf and ub == math.inf:
                lines.append(f" {vn(i)} free")
            else:
                lhs = f"{lb:.17g} <= " if lb != -math.inf else "-inf <= "
                rhs = f" <= {ub:.17g}" if ub != math.inf else ""
                lines.append(f" {lhs}{vn(i)}{rhs}")
        bins = [vn(i) for i, k in enumerate(self.var_kind) if k == BINARY]
        gens = [vn(i) for i, k in enumerate(self.var_kind) if k == INTEGER]
        if bins:
            lines.append("Binaries")
            lines.append(" " + " ".join(bins))
        if gens:
            lines.append("Generals")
            lines.append(" " + " ".join(gens))
        lines.append("End")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


# -- solving ----------------------------------------------------------------

_LP_STATUS = {0: "optimal", 1: "gap-limit", 2: "infeasible", 3: "unbounded"}


def solve_lp(model: Model, cfg: SolverConfig | None = None) -> SolveOutcome:
    """Solve the continuous model; returns primal values plus row/bound duals.

    Discrete variables are only allowed when fixed (lb == ub).
    """
    cfg = cfg or SolverConfig()
    if model.has_free_discrete():
        raise ModelError("model contains free discrete variables; use solve_milp")
    a, lo, hi = model._matrix()
    sense = 1.0 if model.obj_sense == "min" else -1.0
    c = sense * model._cost()

    a_ub_parts, b_ub_parts, ub_map = [], [], []
    a_eq_parts, b_eq_parts, eq_map = [], [], []
    for k, row in enumerate(model.rows):
        if row.sense == EQ:
            eq_map.append(k)
        else:
            ub_map.append(k)
    if ub_map:
        sel = a[ub_map]
        flip = np.array([1.0 if model.rows[k].sense == LE else -1.0 for k in ub_map])
        a_ub_parts = sp.diags(flip) @ sel
        b_ub_parts = np.array([flip[j] * model.rows[k].rhs for j, k in enumerate(ub_map)])
    if eq_map:
        a_eq_parts = a[eq_map]
        b_eq_parts = np.array([model.rows[k].rhs for k in eq_map])

    t0 = time.perf_counter()
    res = linprog(
        c,
        A_ub=a_ub_parts if ub_map else None,
        b_ub=b_ub_parts if ub_map else None,
        A_eq=a_eq_parts if eq_map else None,
        b_eq=b_eq_parts if eq_map else None,
        bounds=list(zip(model.var_lb, model.var_ub)),
        method="highs",
    )
    wall = time.perf_counter() - t0
    status = _LP_STATUS.get(res.status, "infeasible")
    if status != "optimal":
        return SolveOutcome(status, math.nan, None, wall_time=wall, message=res.message)

    x = np.asarray(res.x)
    objective = float(sense * res.fun + model.obj.const)

    row_duals = np.zeros(model.num_rows)
    if ub_map:
        marg = np.asarray(res.ineqlin.marginals)
        for j, k in enumerate(ub_map):
            flip_j = 1.0 if model.rows[k].sense == LE else -1.0
            row_duals[k] = sense * flip_j * marg[j]
    if eq_map:
        marg = np.asarray(res.eqlin.marginals)
        for j, k in enumerate(eq_map):
            row_duals[k] = sense * marg[j]
    lb_duals = sense * np.asarray(res.lower.marginals)
    ub_duals = sense * np.asarray(res.upper.marginals)
    return SolveOutcome("optimal", objective, x, row_duals, lb_duals, ub_duals, 0.0, wall)


_MILP_STATUS = {0: "optimal", 1: "gap-limit", 2: "infeasible", 3: "unbounded", 4: "infeasible"}


def solve_milp(model: Model, cfg: SolverConfig | None = None) -> SolveOutcome:
    """Solve the (mixed-integer) model to the configured relative gap."""
    cfg = cfg or SolverConfig()
    a, lo, hi = model._matrix()
    sense = 1.0 if model.obj_sense == "min" else -1.0
    c = sense * model._cost()
    integrality = np.array(
        [0 if k == CONTINUOUS else 1 for k in model.var_kind], dtype=np.uint8
    )
    options = {"mip_rel_gap": cfg.mip_gap, "presolve": True}
    if cfg.time_limit is not None:
        options["time_limit"] = cfg.time_limit

    constraints = None
    if model.num_rows:
        constraints = LinearConstraint(a, lo, hi)
    t0 = time.perf_counter()
    res = _scipy_milp(
        c,
        constraints=constraints,
        integrality=integrality,
        bounds=Bounds(np.array(model.var_lb), np.array(model.var_ub)),
        options=options,
    )
    wall = time.perf_counter() - t0
    status = _MILP_STATUS.get(res.status, "infeasible")
    if res.x is None:
        if status == "optimal":
            status = "infeasible"
        return SolveOutcome(status, math.nan, None, wall_time=wall, message=res.message)
    x = np.asarray(res.x)
    objective = float(sense * res.fun + model.obj.const)
    gap = float(res.mip_gap) if res.mip_gap is not None else 0.0
    return SolveOutcome(status, objective, x, None, None, None, gap, wall, res.message)
