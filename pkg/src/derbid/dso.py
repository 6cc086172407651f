"""Per-(hour, scenario) security check of the distribution system.

Given a DER schedule, each scenario fixes the active injections (normal
dispatch, full upward activation, full downward activation); the DSO then
chooses the substation tap, capacitor steps, and DER reactive outputs to
minimize the total voltage deviation subject to the linearized power flow,
voltage limits, and octagonal line-current limits. One MILP per cell, 72
cells per day.

The same cell emitter serves four callers: the standalone security-check
MILP, the exhaustive tap-by-capacitor enumeration oracle, and the free- and
fixed-integer blocks of the bilevel master problem (the fixed-integer form
additionally carries violation slacks and row metadata for KKT embedding).
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import HORIZON, SCENARIOS, SystemCase, build_admittance
from .linpf import (
    TapEncoding,
    current_expressions,
    emit_octagon,
    emit_pf_constraints,
    emit_tap_encoding,
    reduce_and_invert,
)
from .milp import EQ, GE, LE, LinExpr, Model, SolverConfig, lin_sum, solve_lp, solve_milp

M_THETA = 0.5  # angle range backing the tap-product big-M terms
SQRT2_IMAX = math.sqrt(2.0)
TAU_MAX = 1.0  # cap on violation slacks in penalty blocks
SLACK_PENALTY_FACTOR = 1e3  # exact-penalty weight relative to the deviation objective


class SecurityCheckError(Exception):
    pass


@dataclass
class ScContext:
    """Per-case precomputation shared by every security-check cell."""

    case: SystemCase
    imp: object
    interior: tuple

    @staticmethod
    def from_case(case: SystemCase) -> "ScContext":
        adm = build_admittance(case.distribution)
        return ScContext(case, reduce_and_invert(adm), adm.bus_order)


@dataclass
class ScenarioInjections:
    """Fixed active-side data of one (hour, scenario) cell, in MW/Mvar.

    Device entries may be plain numbers (solved schedule) or master-model
    expressions (bilevel embedding).
    """

    scenario: str
    hour: int
    p_cdg: list
    p_ess: list
    p_pv: list
    load_p: dict
    load_q: dict


def scenario_injections(case: SystemCase, sched, s: str, t: int) -> ScenarioInjections:
    """Active injections under scenario s: the scheduled point shifted by the
    activated reserves (flexible DERs) and the forecast-error margin (PV)."""
    fleet = case.fleet
    p_cdg, p_ess, p_pv = [], [], []
    for ci in range(len(fleet.cdgs)):
        base = sched.cdg_p(t, ci)
        if s == "UP":
            p_cdg.append(LinExpr.of(base) + sched.cdg_up(t, ci))
        elif s == "DN":
            p_cdg.append(LinExpr.of(base) - sched.cdg_dn(t, ci))
        else:
            p_cdg.append(LinExpr.of(base))
    for ei in range(len(fleet.esss)):
        net = sched.ess_net(t, ei)
        if s == "UP":
            p_ess.append(LinExpr.of(net) + sched.ess_up(t, ei))
        elif s == "DN":
            p_ess.append(LinExpr.of(net) - sched.ess_dn(t, ei))
        else:
            p_ess.append(LinExpr.of(net))
    for pi, pv in enumerate(fleet.pvs):
        avail = pv.profile_mw[t]
        if s == "UP":
            avail = avail + fleet.pv_r_dn(pv, t)
        elif s == "DN":
            avail = avail - fleet.pv_r_up(pv, t)
        p_pv.append(LinExpr.of(avail) - sched.pv_cv(s, t, pi))
    load_p = {b.id: b.load_p_mw[t] for b in case.distribution.buses if b.id != case.distribution.root_bus}
    load_q = {b.id: b.load_q_mvar[t] for b in case.distribution.buses if b.id != case.distribution.root_bus}
    return ScenarioInjections(s, t, p_cdg, p_ess, p_pv, load_p, load_q)


def injections_numeric(inj: ScenarioInjections) -> ScenarioInjections:
    """Collapse constant expressions to floats (schedule-evaluated cells)."""
    def val(x):
        e = LinExpr.of(x)
        if e.terms:
            raise SecurityCheckError("injections are symbolic; solve the master first")
        return e.const

    return ScenarioInjections(
        inj.scenario, inj.hour,
        [val(x) for x in inj.p_cdg], [val(x) for x in inj.p_ess], [val(x) for x in inj.p_pv],
        dict(inj.load_p), dict(inj.load_q),
    )


def _interval_dot(coeffs, intervals):
    lo = hi = 0.0
    for c, (a, b) in zip(coeffs, intervals):
        lo += c * a if c >= 0 else c * b
        hi += c * b if c >= 0 else c * a
    return lo, hi


def pf_intervals(model: Model, ctx: ScContext, inj: ScenarioInjections, k_lo: float, k_hi: float):
    """Per-bus voltage/angle ranges implied by the linear power flow over the
    variable boxes of the injections and the full reactive-dispatch spans.

    Used to tighten angle variable bounds and to prove current cuts or
    voltage limits slack before emitting them.
    """
    case, imp = ctx.case, ctx.imp
    fleet = case.fleet
    base = case.mva_base
    p_int, q_int = {}, {}
    for bus in ctx.interior:
        p_int[bus] = (-inj.load_p[bus] / base, -inj.load_p[bus] / base)
        q_int[bus] = (-inj.load_q[bus] / base, -inj.load_q[bus] / base)

    def widen(d, bus, lo, hi):
        a, b = d[bus]
        d[bus] = (a + lo, b + hi)

    for ci, c in enumerate(fleet.cdgs):
        lo, hi = model.expr_bounds(LinExpr.of(inj.p_cdg[ci]) * (1.0 / base))
        widen(p_int, c.bus, lo, hi)
        span = c.p_max_mw * c.tan_phi / base
        widen(q_int, c.bus, -span, span)
    for ei, e in enumerate(fleet.esss):
        lo, hi = model.expr_bounds(LinExpr.of(inj.p_ess[ei]) * (1.0 / base))
        widen(p_int, e.bus, lo, hi)
    for pi, p in enumerate(fleet.pvs):
        lo, hi = model.expr_bounds(LinExpr.of(inj.p_pv[pi]) * (1.0 / base))
        widen(p_int, p.bus, lo, hi)
        span = (1.0 + fleet.pv_error) * p.p_installed_mw * p.tan_phi / base
        widen(q_int, p.bus, -span, span)
    for cb in case.distribution.capacitors:
        widen(q_int, cb.bus, cb.q_min_mvar / base, cb.q_max_mvar / base)

    v_rng, t_rng = {}, {}
    order = ctx.interior
    p_ints = [p_int[b] for b in order]
    q_ints = [q_int[b] for b in order]
    for ii, bus in enumerate(order):
        dv_lo, dv_hi = _interval_dot(list(imp.r[ii]) + list(imp.x[ii]), p_ints + q_ints)
        dt_lo, dt_hi = _interval_dot(list(imp.x[ii]) + list(-imp.r[ii]), p_ints + q_ints)
        cand_v = [k + d / k for k in (k_lo, k_hi) for d in (dv_lo, dv_hi)]
        cand_t = [d / k for k in (k_lo, k_hi) for d in (dt_lo, dt_hi)]
        v_rng[bus] = (min(cand_v), max(cand_v))
        t_rng[bus] = (min(cand_t), max(cand_t))
    return v_rng, t_rng


def _oct_cut_survivors(v_rng, t_rng, k_rng, ds, prune_tol=1e-7):
    """Decide which octagonal current cuts can bind; returns per-branch lists
    of (direction index, sense) plus the set of buses whose angles matter."""
    branches = [("xfmr", ds.transformer.i_max_pu, ds.root_bus, ds.transformer.secondary_bus,
                 ds.transformer.admittance)]
    for ln in ds.lines:
        branches.append((f"{ln.from_bus}-{ln.to_bus}", ln.i_max_pu, ln.from_bus, ln.to_bus, ln.admittance))
    survivors = {}
    theta_buses = set()
    for label, imax, fb, tb, y in branches:
        if imax is None:
            continue
        g, b = y.real, y.imag
        va = k_rng if fb == ds.root_bus else v_rng[fb]
        vb = k_rng if tb == ds.root_bus else v_rng[tb]
        ta = (0.0, 0.0) if fb == ds.root_bus else t_rng[fb]
        tb_ = (0.0, 0.0) if tb == ds.root_bus else t_rng[tb]
        dv = (va[0] - vb[1], va[1] - vb[0])
        dt = (ta[0] - tb_[1], ta[1] - tb_[0])
        ire = _interval_dot([g, -b], [dv, dt])
        iim = _interval_dot([b, g], [dv, dt])
        s = (ire[0] + iim[0], ire[1] + iim[1])
        d = (ire[0] - iim[1], ire[1] - iim[0])
        keep = []
        for j, (rng, bound) in enumerate(
            [(ire, imax), (iim, imax), (s, np.sqrt(2.0) * imax), (d, np.sqrt(2.0) * imax)]
        ):
            if rng[1] > bound - prune_tol:
                keep.append((j, LE))
            if rng[0] < -bound + prune_tol:
                keep.append((j, GE))
        if keep:
            survivors[label] = keep
            for bus in (fb, tb):
                if bus != ds.root_bus:
                    theta_buses.add(bus)
    return survivors, theta_buses


@dataclass
class ScCell:
    """Handles and row families of one emitted security-check cell."""

    v: dict
    theta: dict
    dv: dict
    q_cdg: list
    q_pv: list
    q_cb: list  # exprs in p.u. (vars times step size, or constants)
    cb_steps: list  # integer VarRefs (milp mode) or fixed ints (lp mode)
    tap: object  # TapEncoding or float
    objective: LinExpr
    rows: dict = field(default_factory=dict)
    taus: list = field(default_factory=list)
    currents: list = field(default_factory=list)  # (label, imax, i_re, i_im)
    obj_terms: list = field(default_factory=list)
    pf_block: object = None

    def primal_vars(self):
        """Continuous decision variables of the cell LP (fixed-integer mode)."""
        out = list(self.v.values()) + list(self.theta.values()) + list(self.dv.values())
        out += self.q_cdg + self.q_pv + self.taus
        return out

    def all_rows(self):
        out = []
        for rows in self.rows.values():
            out.extend(rows)
        return out


def emit_sc_cell(
    model: Model,
    ctx: ScContext,
    inj: ScenarioInjections,
    tap,
    cb_steps=None,
    with_tau: bool = False,
    v_bounds_as_rows: bool = False,
    prune: bool = False,
    tag: str = "sc",
) -> ScCell:
    """Emit one security-check cell into ``model``.

    ``tap`` is None for a free bit-encoded tap (MILP mode) or a float for a
    fixed ratio; ``cb_steps`` likewise None for free integer capacitor steps
    or a list of fixed step counts. ``with_tau`` adds violation slacks to the
    voltage and current rows; ``v_bounds_as_rows`` keeps voltage limits as
    explicit rows so dual machinery can attach to them. ``prune`` drops
    current cuts that provably cannot bind over the variable boxes, along
    with angle variables nothing references (used for the embedded copies
    inside the bidding master, where size matters).
    """
    case, imp = ctx.case, ctx.imp
    ds = case.distribution
    fleet = case.fleet
    base = case.mva_base
    milp_mode = tap is None

    if milp_mode:
        tap_enc = emit_tap_encoding(model, ds.transformer, f"{tag}_tap")
        k_rng = (ds.transformer.k_min,
                 ds.transformer.k_min + ds.transformer.k_step * (2 ** ds.transformer.tap_bits - 1))
    else:
        tap_enc = float(tap)
        k_rng = (tap_enc, tap_enc)

    oct_survivors = None
    theta_buses = set(ctx.interior)
    m_theta = M_THETA
    if prune:
        v_rng, t_rng = pf_intervals(model, ctx, inj, k_rng[0], k_rng[1])
        v_box = {b: (max(v_rng[b][0], ds.v_min_pu), min(v_rng[b][1], ds.v_max_pu))
                 for b in ctx.interior}
        t_box = {b: (max(t_rng[b][0], -M_THETA), min(t_rng[b][1], M_THETA)) for b in ctx.interior}
        oct_survivors, theta_buses = _oct_cut_survivors(v_box, t_box, k_rng, ds)
        worst = max((max(abs(a), abs(b)) for a, b in t_box.values()), default=0.0)
        m_theta = min(M_THETA, worst + 0.05)

    v, theta, dv = {}, {}, {}
    rows = {name: [] for name in ("dv_hi", "dv_lo", "v_hi", "v_lo", "q_cdg_hi", "q_cdg_lo",
                                  "q_pv_hi", "q_pv_lo", "oct", "pf_v", "pf_t", "tau_pos")}
    for bus in ctx.interior:
        if v_bounds_as_rows:
            v[bus] = model.add_var(ds.v_min_pu - TAU_MAX - 0.2, ds.v_max_pu + TAU_MAX + 0.2,
                                   name=f"{tag}_v_{bus}")
        else:
            v[bus] = model.add_var(ds.v_min_pu, ds.v_max_pu, name=f"{tag}_v_{bus}")
        if bus in theta_buses:
            theta[bus] = model.add_var(-m_theta, m_theta, name=f"{tag}_th_{bus}")
        v_lb, v_ub = model.var_lb[v[bus].index], model.var_ub[v[bus].index]
        dv_cap = max(v_ub - 1.0, 1.0 - v_lb)
        dv[bus] = model.add_var(0.0, dv_cap, name=f"{tag}_dv_{bus}")
        rows["dv_hi"].append(
            model.add_constr(LinExpr.of(dv[bus]) - v[bus], GE, -1.0, name=f"{tag}_dvh_{bus}")
        )
        rows["dv_lo"].append(
            model.add_constr(LinExpr.of(dv[bus]) + v[bus], GE, 1.0, name=f"{tag}_dvl_{bus}")
        )

    taus = []
    tau_v = {}
    if with_tau:
        for bus in ctx.interior:
            tv = model.add_var(-1.0, TAU_MAX, name=f"{tag}_tauv_{bus}")
            rows["tau_pos"].append(model.add_constr(LinExpr.of(tv), GE, 0.0, name=f"{tag}_tvp_{bus}"))
            tau_v[bus] = tv
            taus.append(tv)
    if v_bounds_as_rows:
        for bus in ctx.interior:
            relax = LinExpr.of(tau_v[bus]) if with_tau else LinExpr.of(0.0)
            rows["v_hi"].append(
                model.add_constr(LinExpr.of(v[bus]) - relax, LE, ds.v_max_pu, name=f"{tag}_vh_{bus}")
            )
            rows["v_lo"].append(
                model.add_constr(LinExpr.of(v[bus]) + relax, GE, ds.v_min_pu, name=f"{tag}_vl_{bus}")
            )

    # reactive dispatch: CDGs and PVs within power-factor cones, CBs stepped
    q_cdg, q_pv = [], []
    for ci, c in enumerate(fleet.cdgs):
        span = c.p_max_mw * c.tan_phi / base
        qv = model.add_var(-span, span, name=f"{tag}_qcdg_{c.name}")
        lim = LinExpr.of(inj.p_cdg[ci]) * (c.tan_phi / base)
        rows["q_cdg_hi"].append(model.add_constr(LinExpr.of(qv) - lim, LE, 0.0, name=f"{tag}_qch_{c.name}"))
        rows["q_cdg_lo"].append(model.add_constr(LinExpr.of(qv) + lim, GE, 0.0, name=f"{tag}_qcl_{c.name}"))
        q_cdg.append(qv)
    for pi, p in enumerate(fleet.pvs):
        span = (1.0 + fleet.pv_error) * p.p_installed_mw * p.tan_phi / base
        qv = model.add_var(-span, span, name=f"{tag}_qpv_{p.name}")
        lim = LinExpr.of(inj.p_pv[pi]) * (p.tan_phi / base)
        rows["q_pv_hi"].append(model.add_constr(LinExpr.of(qv) - lim, LE, 0.0, name=f"{tag}_qph_{p.name}"))
        rows["q_pv_lo"].append(model.add_constr(LinExpr.of(qv) + lim, GE, 0.0, name=f"{tag}_qpl_{p.name}"))
        q_pv.append(qv)

    if ds.capacitors and cb_steps is None and not milp_mode:
        raise SecurityCheckError("fixed-tap cells require fixed capacitor steps")
    q_cb_exprs, cb_vars = [], []
    for bi, cb in enumerate(ds.capacitors):
        if cb_steps is None:
            steps = model.add_integer(0, cb.groups, name=f"{tag}_cb_{cb.bus}")
            cb_vars.append(steps)
            q_cb_exprs.append(
                (LinExpr.of(steps) * cb.q_per_group_mvar + cb.q_min_mvar) * (1.0 / base)
            )
        else:
            fixed = int(cb_steps[bi])
            if not 0 <= fixed <= cb.groups:
                raise SecurityCheckError(f"capacitor at bus {cb.bus}: step {fixed} outside [0, {cb.groups}]")
            cb_vars.append(fixed)
            q_cb_exprs.append(LinExpr.of((cb.q_min_mvar + fixed * cb.q_per_group_mvar) / base))

    # nodal net injections in p.u.
    p_inj = {bus: LinExpr.of(-inj.load_p[bus] / base) for bus in ctx.interior}
    q_inj = {bus: LinExpr.of(-inj.load_q[bus] / base) for bus in ctx.interior}
    for ci, c in enumerate(fleet.cdgs):
        p_inj[c.bus] = p_inj[c.bus] + LinExpr.of(inj.p_cdg[ci]) * (1.0 / base)
        q_inj[c.bus] = q_inj[c.bus] + q_cdg[ci]
    for ei, e in enumerate(fleet.esss):
        p_inj[e.bus] = p_inj[e.bus] + LinExpr.of(inj.p_ess[ei]) * (1.0 / base)
    for pi, p in enumerate(fleet.pvs):
        p_inj[p.bus] = p_inj[p.bus] + LinExpr.of(inj.p_pv[pi]) * (1.0 / base)
        q_inj[p.bus] = q_inj[p.bus] + q_pv[pi]
    for cb, qe in zip(ds.capacitors, q_cb_exprs):
        q_inj[cb.bus] = q_inj[cb.bus] + qe

    blk = emit_pf_constraints(
        model, imp, tap_enc, p_inj, q_inj, v, theta,
        m_theta=m_theta, v_max=ds.v_max_pu, tag=f"{tag}_pf",
    )
    rows["pf_v"] = blk.pf_v_rows
    rows["pf_t"] = blk.pf_t_rows

    # line currents: octagonal cuts on every limited branch (the accessors are
    # total: branches dropped by pruning may reference angles never created)
    k_expr = tap_enc.k_expr if milp_mode else LinExpr.of(float(tap_enc))
    v_of = lambda b: k_expr if b == ds.root_bus else LinExpr.of(v[b])
    th_of = lambda b: LinExpr.of(theta[b]) if b in theta else LinExpr.of(0.0)
    currents = []
    for label, imax, i_re, i_im in current_expressions(ds, v_of, th_of):
        if oct_survivors is None:
            currents.append((label, imax, i_re, i_im))
            keep = None
        elif label in oct_survivors:
            currents.append((label, imax, i_re, i_im))
            keep = oct_survivors[label]
        else:
            continue
        if imax is None:
            continue
        tau_i = None
        if with_tau:
            tau_i = model.add_var(-1.0, TAU_MAX, name=f"{tag}_taui_{label}")
            rows["tau_pos"].append(model.add_constr(LinExpr.of(tau_i), GE, 0.0, name=f"{tag}_tip_{label}"))
            taus.append(tau_i)
        if keep is None:
            rows["oct"].extend(emit_octagon(model, i_re, i_im, imax, f"{tag}_i_{label}", tau=tau_i))
        else:
            relax = LinExpr.of(tau_i) if tau_i is not None else LinExpr.of(0.0)
            cuts = [
                (LinExpr.of(i_re), imax),
                (LinExpr.of(i_im), imax),
                (LinExpr.of(i_re) + i_im, SQRT2_IMAX * imax),
                (LinExpr.of(i_re) - i_im, SQRT2_IMAX * imax),
            ]
            for j, sense in keep:
                expr, bound = cuts[j]
                if sense == LE:
                    rows["oct"].append(
                        model.add_constr(expr - relax, LE, bound, name=f"{tag}_i{label}_{j}p")
                    )
                else:
                    rows["oct"].append(
                        model.add_constr(expr + relax, GE, -bound, name=f"{tag}_i{label}_{j}n")
                    )

    objective = lin_sum(LinExpr.of(x) for x in dv.values())
    obj_terms = [(dv[bus], 1.0) for bus in ctx.interior]
    if with_tau:
        rho = SLACK_PENALTY_FACTOR * 1.0  # objective coefficients are all 1
        obj_terms += [(tv, rho) for tv in taus]

    cell = ScCell(v, theta, dv, q_cdg, q_pv, q_cb_exprs, cb_vars, tap_enc, objective,
                  rows, taus, currents, obj_terms)
    cell.pf_block = blk
    return cell


def build_sc_milp(case_or_ctx, inj: ScenarioInjections):
    """Standalone security-check MILP for one cell (free tap and CB steps)."""
    ctx = case_or_ctx if isinstance(case_or_ctx, ScContext) else ScContext.from_case(case_or_ctx)
    model = Model(f"sc_{inj.hour}_{inj.scenario}", "min")
    cell = emit_sc_cell(model, ctx, inj, tap=None, tag="sc")
    model.set_objective(cell.objective, "min")
    return model, cell


@dataclass
class SCResult:
    """Outcome of one security-check cell."""

    hour: int
    scenario: str
    status: str  # pass | infeasible
    objective: float | None
    v: dict
    theta: dict
    tap_k: float | None
    cb_steps: list
    q_cdg: list
    q_pv: list
    q_cb: list
    currents: dict  # label -> (i_re, i_im, i_max)
    violations: list = field(default_factory=list)

    def max_current_ratio(self) -> float:
        worst = 0.0
        for i_re, i_im, imax in self.currents.values():
            if imax:
                worst = max(worst, float(np.hypot(i_re, i_im)) / imax)
        return worst


def _extract_result(outcome, cell: ScCell, inj: ScenarioInjections) -> SCResult:
    vsol = {b: outcome.value(var) for b, var in cell.v.items()}
    tsol = {b: outcome.value(var) for b, var in cell.theta.items()}
    if isinstance(cell.tap, TapEncoding):
        k = outcome.value(cell.tap.k_expr)
    else:
        k = float(cell.tap)
    steps = [int(round(outcome.value(s))) if not isinstance(s, int) else s for s in cell.cb_steps]
    cur = {}
    for label, imax, i_re, i_im in cell.currents:
        cur[label] = (outcome.value(i_re), outcome.value(i_im), imax)
    return SCResult(
        inj.hour, inj.scenario, "pass", outcome.objective, vsol, tsol, k, steps,
        [outcome.value(q) for q in cell.q_cdg],
        [outcome.value(q) for q in cell.q_pv],
        [outcome.value(q) for q in cell.q_cb],
        cur,
    )


def solve_sc_cell(ctx: ScContext, inj: ScenarioInjections, cfg: SolverConfig | None = None,
                  diagnose: bool = False) -> SCResult:
    model, cell = build_sc_milp(ctx, inj)
    out = solve_milp(model, cfg)
    if out.status == "optimal":
        return _extract_result(out, cell, inj)
    res = SCResult(inj.hour, inj.scenario, "infeasible", None, {}, {}, None, [], [], [], [], {})
    if diagnose:
        # penalized re-solve quantifies how deep the violation is
        model2 = Model(f"scdiag_{inj.hour}_{inj.scenario}", "min")
        cell2 = emit_sc_cell(model2, ctx, inj, tap=None, with_tau=True,
                             v_bounds_as_rows=True, tag="scd")
        model2.set_objective(lin_sum(LinExpr.of(v) * c for v, c in cell2.obj_terms), "min")
        out2 = solve_milp(model2, cfg)
        if out2.status == "optimal":
            for tv in cell2.taus:
                depth = out2.value(tv)
                if depth > 1e-7:
                    res.violations.append(
                        f"hour {inj.hour + 1} {inj.scenario}: limit exceeded by {depth:.5f} p.u."
                    )
    return res


def run_security_check(case: SystemCase, sched, cfg: SolverConfig | None = None,
                       parallel: int | None = None, diagnose: bool = False) -> dict:
    """Solve all 72 (hour, scenario) cells; merge deterministically."""
    ctx = ScContext.from_case(case)
    cells = [(t, s) for t in range(HORIZON) for s in SCENARIOS]

    def solve_one(key):
        t, s = key
        inj = injections_numeric(scenario_injections(case, sched, s, t))
        return key, solve_sc_cell(ctx, inj, cfg, diagnose)

    results = {}
    if parallel and parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            for key, res in pool.map(solve_one, cells):
                results[key] = res
    else:
        for key in cells:
            results[key] = solve_one(key)[1]
    return {key: results[key] for key in cells}


def schedule_passes(results: dict) -> bool:
    return all(r.status == "pass" for r in results.values())


# -- exhaustive enumeration oracle ---------------------------------------------------


def count_combinations(case: SystemCase) -> int:
    n = len(case.distribution.transformer.tap_positions())
    for cb in case.distribution.capacitors:
        n *= cb.groups + 1
    return n


def iter_combinations(case: SystemCase):
    taps = case.distribution.transformer.tap_positions()
    step_ranges = [range(cb.groups + 1) for cb in case.distribution.capacitors]
    for k in taps:
        for steps in itertools.product(*step_ranges):
            yield k, list(steps)


def enumerate_sc(ctx: ScContext, inj: ScenarioInjections, cfg: SolverConfig | None = None):
    """Brute-force oracle: best objective over all tap/CB combinations.

    Returns (best objective or None, best (k, steps) or None).
    """
    best, best_combo = None, None
    for k, steps in iter_combinations(ctx.case):
        model = Model("sc_enum", "min")
        cell = emit_sc_cell(model, ctx, inj, tap=k, cb_steps=steps, tag="e")
        model.set_objective(cell.objective, "min")
        out = solve_lp(model, cfg)
        if out.status != "optimal":
            continue
        if best is None or out.objective < best - 1e-12:
            best, best_combo = out.objective, (k, steps)
    return best, best_combo
