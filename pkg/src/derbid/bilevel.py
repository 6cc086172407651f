"""Single-level reformulation and decomposition of the bidding problem.

The bidding model is a bi-level program: the aggregator (leader) chooses bids
and DER allocations; the ISO clears the market (an LP, embedded through its
KKT conditions with big-M complementarity); the DSO runs one security-check
MILP per (hour, scenario) (handled by relaxation and decomposition).

Revenue linearization: the products price*quantity in the aggregator revenue
are replaced using the clearing LP's strong-duality identity. Multiplying
each stationarity equation by its primal variable and applying complementary
slackness cancels every product of a dual with a bid variable, leaving

    F1_t = lambda_en,t * D_t + lambda_up,t * (Rup_t + Rup_agg,t)
         + lambda_dn,t * (Rdn_t + Rdn_agg,t)
         - sum_g [nu_gen_hi * Pg_max + nu_gup_hi * rup_max + nu_gdn_hi * rdn_max]
         - sum_l [(nu_hi + nu_lo) * Pl_max + (nu_hi - nu_lo) * sum_d D_ld * Pd_t]
         - sum_g [Og * Pg + Ogup * rgup + Ogdn * rgdn]

i.e. consumer and reserve payments minus congestion rent, capacity rents and
rival generator payments. Because every bid variable sits on the row
left-hand sides, the formula is exactly the dual objective read off the
stored row right-hand sides minus the generators' offer cost.

The decomposition master carries (i) the upper level, (ii) the KKT-embedded
clearing, (iii) each security-check cell with free integers (feasibility),
and (iv) one KKT-embedded fixed-integer copy per enumerated integer
combination, bounding the cell's deviation objective by that combination's
slack-penalized optimum. Subproblems at the master solution certify
optimality cell by cell; violated cells contribute their optimal integer
combination to the next master.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .aggregator import (
    BidVars,
    ClearedAgg,
    DerSchedule,
    PriceSet,
    ProfitBreakdown,
    ScheduleVars,
    emit_allocation,
    emit_bid_constraints,
    emit_bids,
    emit_schedule,
    profit_report,
)
from .dso import (
    SLACK_PENALTY_FACTOR,
    ScContext,
    SCResult,
    TAU_MAX,
    emit_sc_cell,
    injections_numeric,
    scenario_injections,
    solve_sc_cell,
)
from .grid import HORIZON, SCENARIOS, SystemCase
from .linpf import current_expressions, emit_octagon
from .market import BidSet, ClearingBlock, HourBid, emit_clearing, quantity_caps
from .milp import (
    EQ,
    GE,
    LE,
    LinExpr,
    Model,
    ModelError,
    SolveError,
    SolverConfig,
    VarRef,
    lin_sum,
    solve_milp,
)


class BilevelError(Exception):
    pass


# -- generic KKT embedding -----------------------------------------------------------


@dataclass
class KKTBlock:
    """KKT condition handles for one embedded LP."""

    duals: dict  # row_id -> VarRef (free for EQ, >= 0 otherwise)
    dual_caps: dict  # row_id -> big-M used for that dual
    compl: dict  # row_id -> (binary, slack LinExpr, m_slack)
    stationarity: dict  # var index -> row id


def kkt_embed(model: Model, primal_vars, rows, obj_terms, m_dual, tag: str) -> KKTBlock:
    """Embed optimality conditions of the LP formed by ``rows`` over
    ``primal_vars`` with objective ``obj_terms`` (min sense).

    Rows may reference outer variables; those act as parameters and get no
    stationarity equation. Complementarity uses one binary per inequality:
    the dual is capped by its big-M times the binary and the row slack by its
    interval bound times the complement. ``m_dual`` is a scalar or a
    row_id -> bound mapping.
    """
    primal_set = {
        v.index for v in primal_vars if model.var_lb[v.index] < model.var_ub[v.index]
    }
    caps = m_dual if isinstance(m_dual, dict) else {rid: float(m_dual) for rid in rows}
    obj_coeff = {}
    for v, c in obj_terms:
        cur = obj_coeff.setdefault(v.index, LinExpr())
        obj_coeff[v.index] = cur + LinExpr.of(c)

    duals, compl, dual_caps = {}, {}, {}
    contrib = {i: [] for i in primal_set}  # var index -> [(dual, signed coeff)]

    def row_slack(rid):
        row = model.rows[rid]
        if row.sense == LE:
            slack = LinExpr({}, row.rhs) - LinExpr(row.terms)
        else:
            slack = LinExpr(row.terms) - row.rhs
        _, m_slack = model.expr_bounds(slack)
        if not np.isfinite(m_slack):
            raise ModelError(f"row {row.name}: slack unbounded, cannot size complementarity big-M")
        return slack, max(m_slack, 0.0)

    def add_dual(rid):
        row = model.rows[rid]
        cap = caps[rid]
        dual_caps[rid] = cap
        if row.sense == EQ:
            d = model.add_var(-cap, cap, name=f"{tag}_lam_{rid}")
        else:
            d = model.add_var(0.0, cap, name=f"{tag}_mu_{rid}")
        duals[rid] = d
        sign = -1.0 if row.sense in (EQ, GE) else 1.0
        for idx, a in row.terms.items():
            if idx in primal_set:
                contrib[idx].append((d, sign * a if row.sense != EQ else -a))
        return d

    for rid in rows:
        row = model.rows[rid]
        d = add_dual(rid)
        if row.sense == EQ:
            continue
        u = model.add_binary(f"{tag}_u_{rid}")
        slack, m_slack = row_slack(rid)
        cap = caps[rid]
        model.add_constr(LinExpr.of(d) - LinExpr.of(u) * cap, LE, 0.0, name=f"{tag}_cd_{rid}")
        model.add_constr(slack + LinExpr.of(u) * m_slack, LE, m_slack, name=f"{tag}_cs_{rid}")
        compl[rid] = (u, slack, m_slack)

    stationarity = {}
    for idx in sorted(primal_set):
        expr = obj_coeff.get(idx, LinExpr())
        expr = expr + lin_sum(LinExpr.of(d) * a for d, a in contrib[idx])
        stationarity[idx] = model.add_constr(expr, EQ, 0.0, name=f"{tag}_st_{idx}")
    return KKTBlock(duals, dual_caps, compl, stationarity)


def audit_kkt(outcome, model: Model, block: KKTBlock, rel_tol: float = 1e-6) -> list:
    """Big-M and complementarity health check of a solved KKT block."""
    issues = []
    for rid, d in block.duals.items():
        val = outcome.value(d)
        cap = block.dual_caps[rid]
        if abs(val) >= cap * (1.0 - 1e-6):
            issues.append(f"dual of row {model.rows[rid].name} at big-M bound {cap}")
    for rid, (u, slack, m_slack) in block.compl.items():
        mu = outcome.value(block.duals[rid])
        sl = outcome.value(slack)
        scale = 1.0 + abs(mu) + abs(sl)
        if mu * sl > 1e-5 * scale:
            issues.append(f"complementarity violation {mu * sl:.2e} on row {model.rows[rid].name}")
    return issues


@dataclass
class InnerCellData:
    """Affine data of one fixed-integer security-check cell.

    With the tap and capacitor steps fixed, the linear power flow makes each
    bus voltage affine in the outer decisions x and the cell's reactive
    dispatch q: V_i = c_i(x) + (A q)_i. The cell LP is then

        f(x) = min_{q, tau}  sum_i |V_i - 1| + rho * tau
               s.t. lo(x) <= q <= hi(x),
                    binding-capable limit rows relaxed by tau >= 0,

    which this container captures: the voltage offsets c_i(x), the reactive
    sensitivity columns A, the cone bounds, and the surviving limit rows in
    the form g^T q + h(x) <= tau.
    """

    c_exprs: list  # per interior bus, LinExpr in x
    a_cols: np.ndarray  # (n_bus, n_q) sensitivities of V to q
    q_lo: list  # LinExpr in x per q
    q_hi: list
    relax_g: list  # per surviving row, coefficient vector over q
    relax_h: list  # per surviving row, LinExpr in x


def inner_cell_data(model: Model, ctx: ScContext, inj, k: float, cb_steps) -> InnerCellData:
    """Assemble the affine description of a fixed-integer cell."""
    case, imp = ctx.case, ctx.imp
    ds = case.distribution
    fleet = case.fleet
    base = case.mva_base
    k = float(k)
    n = len(ctx.interior)
    pos = {b: i for i, b in enumerate(ctx.interior)}

    # q variables: CDGs then PVs; bounds are power-factor cones around the
    # scenario active injection
    q_bus, q_lo, q_hi = [], [], []
    for ci, c in enumerate(fleet.cdgs):
        lim = LinExpr.of(inj.p_cdg[ci]) * (c.tan_phi / base)
        q_bus.append(c.bus)
        q_lo.append(lim * -1.0)
        q_hi.append(lim)
    for pi, p in enumerate(fleet.pvs):
        lim = LinExpr.of(inj.p_pv[pi]) * (p.tan_phi / base)
        q_bus.append(p.bus)
        q_lo.append(lim * -1.0)
        q_hi.append(lim)
    nq = len(q_bus)

    # constant (x-dependent) nodal injections in p.u.
    p_inj = {bus: LinExpr.of(-inj.load_p[bus] / base) for bus in ctx.interior}
    qc_inj = {bus: LinExpr.of(-inj.load_q[bus] / base) for bus in ctx.interior}
    for ci, c in enumerate(fleet.cdgs):
        p_inj[c.bus] = p_inj[c.bus] + LinExpr.of(inj.p_cdg[ci]) * (1.0 / base)
    for ei, e in enumerate(fleet.esss):
        p_inj[e.bus] = p_inj[e.bus] + LinExpr.of(inj.p_ess[ei]) * (1.0 / base)
    for pi, p in enumerate(fleet.pvs):
        p_inj[p.bus] = p_inj[p.bus] + LinExpr.of(inj.p_pv[pi]) * (1.0 / base)
    for cb, steps in zip(ds.capacitors, cb_steps):
        qc_inj[cb.bus] = qc_inj[cb.bus] + (cb.q_min_mvar + int(steps) * cb.q_per_group_mvar) / base

    c_exprs, t_exprs = [], []
    a_cols = np.zeros((n, nq))
    a_theta = np.zeros((n, nq))
    for ii, bus in enumerate(ctx.interior):
        ce = LinExpr.of(k)
        te = LinExpr.of(0.0)
        for jj, jb in enumerate(ctx.interior):
            ce = ce + p_inj[jb] * (imp.r[ii, jj] / k) + qc_inj[jb] * (imp.x[ii, jj] / k)
            te = te + p_inj[jb] * (imp.x[ii, jj] / k) - qc_inj[jb] * (imp.r[ii, jj] / k)
        for qi, qb in enumerate(q_bus):
            a_cols[ii, qi] = imp.x[ii, pos[qb]] / k
            a_theta[ii, qi] = -imp.r[ii, pos[qb]] / k
        c_exprs.append(ce)
        t_exprs.append(te)

    # surviving limit rows in the form g^T q + h(x) <= 0 (before slack)
    prune_tol = 1e-7
    q_span = []
    for qi in range(nq):
        lo1, _ = model.expr_bounds(q_lo[qi])
        _, hi2 = model.expr_bounds(q_hi[qi])
        q_span.append((lo1, hi2))

    def row_interval(g, h):
        lo, hi = model.expr_bounds(h)
        for qi, gv in enumerate(g):
            a, b = gv * q_span[qi][0], gv * q_span[qi][1]
            lo += min(a, b)
            hi += max(a, b)
        return lo, hi

    relax_g, relax_h = [], []

    def consider(g, h):
        _, hi = row_interval(g, h)
        if hi > -prune_tol:
            relax_g.append(np.asarray(g, dtype=float))
            relax_h.append(h)

    for ii, bus in enumerate(ctx.interior):
        consider(a_cols[ii], c_exprs[ii] - ds.v_max_pu)
        consider(-a_cols[ii], LinExpr.of(ds.v_min_pu) - c_exprs[ii])
    branches = [("xfmr", ds.transformer.i_max_pu, ds.root_bus, ds.transformer.secondary_bus,
                 ds.transformer.admittance)]
    for ln in ds.lines:
        branches.append((f"{ln.from_bus}-{ln.to_bus}", ln.i_max_pu, ln.from_bus, ln.to_bus, ln.admittance))
    for label, imax, fb, tb, y in branches:
        if imax is None:
            continue
        gg, bb = y.real, y.imag

        def node(busid):
            if busid == ds.root_bus:
                return LinExpr.of(k), LinExpr.of(0.0), np.zeros(nq), np.zeros(nq)
            ii = pos[busid]
            return c_exprs[ii], t_exprs[ii], a_cols[ii], a_theta[ii]

        va, ta, qa, qta = node(fb)
        vb, tb_, qb_, qtb = node(tb)
        ire_x = (va - vb) * gg - (ta - tb_) * bb
        ire_q = gg * (qa - qb_) - bb * (qta - qtb)
        iim_x = (va - vb) * bb + (ta - tb_) * gg
        iim_q = bb * (qa - qb_) + gg * (qta - qtb)
        for expr_x, expr_q, bound in (
            (ire_x, ire_q, imax),
            (iim_x, iim_q, imax),
            (ire_x + iim_x, ire_q + iim_q, math.sqrt(2.0) * imax),
            (ire_x - iim_x, ire_q - iim_q, math.sqrt(2.0) * imax),
        ):
            consider(expr_q, expr_x - bound)
            consider(-expr_q, LinExpr.of(-bound) - expr_x)
    return InnerCellData(c_exprs, a_cols, q_lo, q_hi, relax_g, relax_h)


def _arrangement_vertices(a_cols: np.ndarray, relax_g: list, rho: float, cap: int = 400000):
    """Vertices of the dual region of a fixed-integer cell.

    The dual variables are the deviation sign vector s in [-1, 1]^n and the
    relaxed-row duals mu >= 0 with sum(mu) <= rho (the slack's stationarity).
    The reactive stationarity w(s, mu) = A^T s + G^T mu resolves against the
    cone bound duals in closed form, leaving a concave piecewise objective
    whose pieces switch on the hyperplanes w_c = 0. The value function is
    therefore attained at a vertex of the arrangement of the box, the
    simplex, and those hyperplanes; this enumerates them all.
    """
    n, nq = a_cols.shape
    r = len(relax_g)
    d = n + r
    rows = []
    rhs = []
    kinds = []  # True when the row may act as an equality plane only (w_c = 0)
    for i in range(n):
        e = np.zeros(d)
        e[i] = 1.0
        rows += [e, -e]
        rhs += [1.0, 1.0]
        kinds += [False, False]
    for j in range(r):
        e = np.zeros(d)
        e[n + j] = -1.0
        rows.append(e)
        rhs.append(0.0)
        kinds.append(False)
    if r:
        e = np.zeros(d)
        e[n:] = 1.0
        rows.append(e)
        rhs.append(rho)
        kinds.append(False)
    for c in range(nq):
        e = np.zeros(d)
        e[:n] = a_cols[:, c]
        for j in range(r):
            e[n + j] = relax_g[j][c]
        if np.max(np.abs(e)) < 1e-14:
            continue
        rows.append(e)
        rhs.append(0.0)
        kinds.append(True)
    a = np.array(rows)
    b = np.array(rhs)
    m = len(rows)
    from itertools import combinations

    n_comb = math.comb(m, d)
    if n_comb > cap:
        raise BilevelError(
            f"dual-vertex enumeration needs {n_comb} candidate bases (cap {cap}); "
            "use a smaller feeder or fewer monitored branches for the bidding case"
        )
    verts = []
    seen = set()
    for comb in combinations(range(m), d):
        sub = a[list(comb)]
        try:
            z = np.linalg.solve(sub, b[list(comb)])
        except np.linalg.LinAlgError:
            continue
        # feasibility: inequality rows only (planes are free to be crossed)
        ok = True
        for ri in range(m):
            if kinds[ri]:
                continue
            if a[ri] @ z > b[ri] + 1e-9:
                ok = False
                break
        if not ok:
            continue
        key = tuple(np.round(z, 9))
        if key in seen:
            continue
        seen.add(key)
        verts.append(z)
    return verts


@dataclass
class InnerValueFunction:
    """Affine pieces whose maximum equals the cell value for every x."""

    pieces: list  # LinExpr in x


_VERTEX_CACHE: dict = {}


def inner_value_function(model: Model, ctx: ScContext, inj, k: float, cb_steps,
                         rho: float) -> InnerValueFunction:
    data = inner_cell_data(model, ctx, inj, k, cb_steps)
    n, nq = data.a_cols.shape
    key = (
        id(ctx.imp), round(float(k), 9), len(data.relax_g),
        tuple(np.round(np.concatenate([g for g in data.relax_g]) if data.relax_g else np.zeros(0), 9)),
    )
    verts = _VERTEX_CACHE.get(key)
    if verts is None:
        verts = _arrangement_vertices(data.a_cols, data.relax_g, rho)
        _VERTEX_CACHE[key] = verts

    pieces = []
    for z in verts:
        s = z[:n]
        mu = z[n:]
        w = data.a_cols.T @ s
        for j, g in enumerate(data.relax_g):
            w = w + mu[j] * g
        expr = LinExpr.of(0.0)
        for i in range(n):
            if abs(s[i]) > 1e-12:
                expr = expr + (data.c_exprs[i] - 1.0) * s[i]
        for c in range(nq):
            if w[c] > 1e-12:
                expr = expr + data.q_lo[c] * w[c]
            elif w[c] < -1e-12:
                expr = expr + data.q_hi[c] * w[c]
        for j in range(len(data.relax_g)):
            if mu[j] > 1e-12:
                expr = expr + data.relax_h[j] * mu[j]
        pieces.append(expr)

    # dominance pruning: drop pieces provably below another over the boxes
    keep = []
    for j, ej in enumerate(pieces):
        dominated = False
        for j2, ej2 in enumerate(pieces):
            if j2 == j:
                continue
            dlo, _ = model.expr_bounds(ej2 - ej)
            if dlo > -1e-12 and (j2 < j or model.expr_bounds(ej - ej2)[0] <= -1e-12):
                dominated = True
                break
        if not dominated:
            keep.append(ej)
    return InnerValueFunction(keep or [pieces[0]])


def emit_vertex_cuts(model: Model, cell_objective: LinExpr, vf: InnerValueFunction, tag: str):
    """Bound a cell's deviation objective by the cell value function.

    d^T m <= max_j piece_j(x) becomes a pick-one disjunction: selector
    binaries y_j with sum(y) = 1 and d^T m <= piece_j(x) + M_j (1 - y_j);
    the maximizing leader always selects the active piece, reproducing the
    exact optimality cut.
    """
    _, obj_hi = model.expr_bounds(cell_objective)
    if len(vf.pieces) == 1:
        rid = model.add_constr(cell_objective - vf.pieces[0], LE, 0.0, name=f"{tag}_cut0")
        return [], [rid]
    bounds = [model.expr_bounds(piece) for piece in vf.pieces]
    value_hi = max(hi for _, hi in bounds)
    cap = min(obj_hi, value_hi)
    rids = [model.add_constr(cell_objective, LE, value_hi, name=f"{tag}_roof")]
    ys = []
    for j, piece in enumerate(vf.pieces):
        y = model.add_binary(f"{tag}_y{j}")
        m_j = max(cap - bounds[j][0], 0.0)
        rids.append(
            model.add_constr(cell_objective - piece + LinExpr.of(y) * m_j, LE, m_j, name=f"{tag}_cut{j}")
        )
        ys.append(y)
    model.add_constr(lin_sum(LinExpr.of(y) for y in ys), EQ, 1.0, name=f"{tag}_pick")
    return ys, rids


# -- revenue linearization -----------------------------------------------------------


def linearize_revenue(model: Model, case: SystemCase, blk: ClearingBlock, kkt: KKTBlock) -> LinExpr:
    """Linear expression equal to the aggregator's market revenue F1.

    Demand and reserve-requirement payments at the clearing duals, minus the
    capacity rents of rival generators, congestion rent, and rival offer
    payments (see module docstring for the cancellation argument). Only the
    families with parameter right-hand sides contribute; every bid-entangled
    row canceled against the revenue bilinears.
    """
    ts = case.transmission
    terms = []
    for t in range(HORIZON):
        terms.append(LinExpr.of(kkt.duals[blk.rows["balance"][t]]) * ts.total_demand(t))
        for fam in ("up_req", "dn_req"):
            rid = blk.rows[fam][t]
            terms.append(LinExpr.of(kkt.duals[rid]) * model.rows[rid].rhs)
        for fam in ("gen_hi", "gup_hi", "gdn_hi"):
            for rid in blk.rows[fam][t]:
                terms.append(LinExpr.of(kkt.duals[rid]) * (-model.rows[rid].rhs))
        for rid in blk.rows["line_hi"][t].values():
            terms.append(LinExpr.of(kkt.duals[rid]) * (-model.rows[rid].rhs))
        for rid in blk.rows["line_lo"][t].values():
            terms.append(LinExpr.of(kkt.duals[rid]) * model.rows[rid].rhs)
        for g, gen in enumerate(ts.generators):
            terms.append(LinExpr.of(blk.p_gen[t][g]) * (-gen.offer_energy))
            terms.append(LinExpr.of(blk.r_gup[t][g]) * (-gen.offer_r_up))
            terms.append(LinExpr.of(blk.r_gdn[t][g]) * (-gen.offer_r_dn))
    return lin_sum(terms)


def revenue_from_duals(outcome, model: Model, case: SystemCase, blk: ClearingBlock, kkt: KKTBlock):
    """Post-solve prices: lambda_en/up/dn and the boundary congestion shift."""
    lam_en = np.array([outcome.value(kkt.duals[blk.rows["balance"][t]]) for t in range(HORIZON)])
    lam_up = np.array([outcome.value(kkt.duals[blk.rows["up_req"][t]]) for t in range(HORIZON)])
    lam_dn = np.array([outcome.value(kkt.duals[blk.rows["dn_req"][t]]) for t in range(HORIZON)])
    g_agg = blk.ptdf.column(case.transmission.boundary_bus)
    lam_agg = lam_en.copy()
    for t in range(HORIZON):
        shift = 0.0
        for li in blk.line_indices:
            rid_hi = blk.rows["line_hi"][t].get(li)
            rid_lo = blk.rows["line_lo"][t].get(li)
            nu_hi = outcome.value(kkt.duals[rid_hi]) if rid_hi is not None else 0.0
            nu_lo = outcome.value(kkt.duals[rid_lo]) if rid_lo is not None else 0.0
            shift += g_agg[li] * (nu_hi - nu_lo)
        lam_agg[t] -= shift
    return PriceSet(lam_agg, lam_up, lam_dn), lam_en


# -- master problem -------------------------------------------------------------------


@dataclass
class RBRDState:
    """Integer combinations enumerated so far, per (hour, scenario) cell."""

    combos: dict = field(default_factory=dict)  # (t, s) -> [(k, (steps...))]

    def get(self, key):
        return self.combos.get(key, [])

    def add(self, key, combo) -> bool:
        lst = self.combos.setdefault(key, [])
        for k, steps in lst:
            if abs(k - combo[0]) < 1e-9 and tuple(steps) == tuple(combo[1]):
                return False
        lst.append((combo[0], tuple(combo[1])))
        return True

    def total(self) -> int:
        return sum(len(v) for v in self.combos.values())


@dataclass
class MasterHandles:
    bids: BidVars
    sched: ScheduleVars
    clearing: ClearingBlock
    kkt: KKTBlock
    f1: LinExpr
    sc_cells: dict
    sc_q_aux: dict  # (t, s) -> {"q_cdg": [aux], "q_pv": [aux]}
    inner_cuts: list  # (key, combo, selector binaries, pieces)


def build_master(
    case: SystemCase,
    state: RBRDState,
    ctx: ScContext | None = None,
    with_sc: bool = True,
    m_dual_clearing: float | None = None,
    m_dual_scale: float = 1.0,
) -> tuple:
    """Assemble the single-level master MILP."""
    model = Model("master", "max")
    bids = emit_bids(model, case)
    sched = emit_schedule(model, case)
    emit_bid_constraints(model, case, bids, sched)
    clearing = emit_clearing(
        model, case, [bids.hour_view(t) for t in range(HORIZON)], prune_lines=True
    )
    emit_allocation(model, sched, clearing)

    if m_dual_clearing is None:
        offers = [case.price_cap, case.fleet.inflexible_curtail_penalty]
        for g in case.transmission.generators:
            offers += [g.offer_energy, g.offer_r_up, g.offer_r_dn]
        m_dual_clearing = 10.0 * max(offers) * m_dual_scale
    kkt = kkt_embed(
        model, clearing.primal_vars(), clearing.all_rows(), clearing.obj_terms,
        m_dual_clearing, "kkt",
    )
    f1 = linearize_revenue(model, case, clearing, kkt)

    fleet = case.fleet
    base = case.mva_base
    cost_terms = []  # F2 + F3 + F4 pieces (minimized)
    for t in range(HORIZON):
        for ci, c in enumerate(fleet.cdgs):
            cost_terms.append(LinExpr.of(sched.p_cdg[t][ci]) * c.cost_energy)
        for ei, e in enumerate(fleet.esss):
            cost_terms.append(LinExpr.of(sched.p_ch[t][ei]) * e.cost_ch)
            cost_terms.append(LinExpr.of(sched.p_dis[t][ei]) * e.cost_dis)
        for s in SCENARIOS:
            for pi, p in enumerate(fleet.pvs):
                cost_terms.append(LinExpr.of(sched.p_cv[s][t][pi]) * p.curtail_penalty[s])

    sc_cells, sc_q_aux, inner_cuts = {}, {}, []
    if with_sc:
        ctx = ctx or ScContext.from_case(case)
        for t in range(HORIZON):
            for s in SCENARIOS:
                key = (t, s)
                inj = scenario_injections(case, sched, s, t)
                cell = emit_sc_cell(model, ctx, inj, tap=None, prune=True, tag=f"m{t}{s}")
                sc_cells[key] = cell
                aux = {"q_cdg": [], "q_pv": []}
                for ci, c in enumerate(fleet.cdgs):
                    span = c.p_max_mw * c.tan_phi / base
                    dq = model.add_var(0.0, span, name=f"aq_cdg{ci}_{t}{s}")
                    model.add_constr(LinExpr.of(dq) - cell.q_cdg[ci], GE, 0.0, name=f"aqc_p{ci}_{t}{s}")
                    model.add_constr(LinExpr.of(dq) + cell.q_cdg[ci], GE, 0.0, name=f"aqc_n{ci}_{t}{s}")
                    aux["q_cdg"].append(dq)
                    cost_terms.append(LinExpr.of(dq) * (c.cost_reactive[s] * base))
                for pi, p in enumerate(fleet.pvs):
                    span = (1.0 + fleet.pv_error) * p.p_installed_mw * p.tan_phi / base
                    dq = model.add_var(0.0, span, name=f"aq_pv{pi}_{t}{s}")
                    model.add_constr(LinExpr.of(dq) - cell.q_pv[pi], GE, 0.0, name=f"aqp_p{pi}_{t}{s}")
                    model.add_constr(LinExpr.of(dq) + cell.q_pv[pi], GE, 0.0, name=f"aqp_n{pi}_{t}{s}")
                    aux["q_pv"].append(dq)
                    cost_terms.append(LinExpr.of(dq) * (p.cost_reactive[s] * base))
                sc_q_aux[key] = aux

                for combo in state.get(key):
                    k_fix, steps = combo
                    vf = inner_value_function(
                        model, ctx, inj, k_fix, list(steps), SLACK_PENALTY_FACTOR
                    )
                    ys, _ = emit_vertex_cuts(
                        model, cell.objective, vf, f"i{t}{s}_{len(inner_cuts)}"
                    )
                    inner_cuts.append((key, combo, ys, vf.pieces))

    objective = f1 - lin_sum(cost_terms)
    model.set_objective(objective, "max")
    return model, MasterHandles(bids, sched, clearing, kkt, f1, sc_cells, sc_q_aux, inner_cuts)


def extract_bids(outcome, bids: BidVars) -> BidSet:
    hours = []
    for t in range(HORIZON):
        hours.append(
            HourBid(
                p_flex_min=outcome.value(bids.p_flex_min[t]),
                p_flex_max=outcome.value(bids.p_flex_max[t]),
                p_infl=outcome.value(bids.p_infl[t]),
                price_flex=outcome.value(bids.price_flex[t]),
                r_up_cap=outcome.value(bids.r_up_cap[t]),
                r_dn_cap=outcome.value(bids.r_dn_cap[t]),
                price_r_up=outcome.value(bids.price_r_up[t]),
                price_r_dn=outcome.value(bids.price_r_dn[t]),
                r_up_req=bids.r_up_req[t],
                r_dn_req=bids.r_dn_req[t],
            )
        )
    return BidSet(tuple(hours))


def extract_cleared(outcome, handles: MasterHandles) -> ClearedAgg:
    blk = handles.clearing
    return ClearedAgg(
        p_flex=np.array([outcome.value(blk.p_flex[t]) for t in range(HORIZON)]),
        p_infl=np.array([outcome.value(handles.bids.p_infl[t]) for t in range(HORIZON)]),
        p_cv=np.array([outcome.value(blk.p_cv[t]) for t in range(HORIZON)]),
        r_up=np.array([outcome.value(blk.r_up[t]) for t in range(HORIZON)]),
        r_dn=np.array([outcome.value(blk.r_dn[t]) for t in range(HORIZON)]),
    )


def master_deviation(outcome, cell) -> float:
    """Total voltage deviation of the master's anticipated cell response.

    Recomputed from the voltage values: the cell's deviation variables are
    only lower-bounded inside the master, so they may sit above |V - 1| when
    no optimality cut presses on them.
    """
    return float(sum(abs(outcome.value(v) - 1.0) for v in cell.v.values()))


def master_sc_values(outcome, handles: MasterHandles, base: float) -> dict:
    """Master-anticipated security-check outcome per cell (Mvar units)."""
    out = {}
    for key, cell in handles.sc_cells.items():
        out[key] = {
            "objective": master_deviation(outcome, cell),
            "q_cdg": [outcome.value(q) * base for q in cell.q_cdg],
            "q_pv": [outcome.value(q) * base for q in cell.q_pv],
            "q_cb": [outcome.value(q) * base for q in cell.q_cb],
            "tap_k": outcome.value(cell.tap.k_expr),
            "cb_steps": [int(round(outcome.value(s))) if not isinstance(s, int) else s
                         for s in cell.cb_steps],
            "v": {b: outcome.value(var) for b, var in cell.v.items()},
        }
    return out


# -- RBRD loop -------------------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    master_objective: float
    violated_cells: int
    max_mismatch: float
    combos_total: int
    wall_time: float


@dataclass
class RBRDResult:
    status: str  # optimal | iteration-limit | stalled
    objective: float
    bids: BidSet
    schedule: DerSchedule
    cleared: ClearedAgg
    prices: PriceSet
    lambda_en: np.ndarray
    profit: ProfitBreakdown
    sc_results: dict
    master_sc: dict
    iterations: list
    state: RBRDState
    audit_log: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "optimal"


def _schedule_value_map(handles: MasterHandles, sched: DerSchedule) -> dict:
    """Variable index -> value for every schedule variable, from a solved
    schedule (the cut pieces reference schedule variables only)."""
    sv = handles.sched
    vals = {}
    for t in range(HORIZON):
        for c, var in enumerate(sv.p_cdg[t]):
            vals[var.index] = sched.p_cdg[t, c]
        for c, var in enumerate(sv.r_cdgup[t]):
            vals[var.index] = sched.r_cdgup[t, c]
        for c, var in enumerate(sv.r_cdgdn[t]):
            vals[var.index] = sched.r_cdgdn[t, c]
        for e, var in enumerate(sv.p_ch[t]):
            vals[var.index] = sched.p_ch[t, e]
        for e, var in enumerate(sv.p_dis[t]):
            vals[var.index] = sched.p_dis[t, e]
        for e, var in enumerate(sv.r_essup[t]):
            vals[var.index] = sched.r_essup[t, e]
        for e, var in enumerate(sv.r_essdn[t]):
            vals[var.index] = sched.r_essdn[t, e]
        for s in SCENARIOS:
            for p, var in enumerate(sv.p_cv[s][t]):
                vals[var.index] = sched.p_cv[s][t, p]
    return vals


def _fix_selectors_to_argmax(model: Model, handles: MasterHandles, sched: DerSchedule):
    """Fix every cut's selector binaries to the piece that is maximal at the
    reference schedule (a valid restriction; the reference point stays
    feasible). Returns the undo list."""
    vals = _schedule_value_map(handles, sched)

    def evaluate(expr: LinExpr) -> float:
        return expr.const + sum(c * vals.get(i, 0.0) for i, c in expr.terms.items())

    undo = []
    for key, combo, ys, pieces in handles.inner_cuts:
        if not ys:
            continue
        best = int(np.argmax([evaluate(p) for p in pieces]))
        for j, y in enumerate(ys):
            undo.append((y.index, model.var_lb[y.index], model.var_ub[y.index]))
            val = 1.0 if j == best else 0.0
            model.var_lb[y.index] = val
            model.var_ub[y.index] = val
    return undo


def _solve_master_audited(case, state, ctx, with_sc, cfg, audit_log,
                          hint_sched=None, max_escalations=3):
    """Solve the master exactly, with big-M escalation on audit failures.

    With enumerated combinations and a reference schedule the solve runs in
    phases: (1) restricted masters with the cut selectors fixed to their
    argmax at the reference point, iterated monotonically to a fixed point
    (fast, yields the incumbent); (2) the full master with an objective
    cutoff just above the incumbent, where an infeasibility outcome is the
    certificate that the incumbent is optimal within the cutoff margin.
    """
    scale = 1.0
    last_err = ""
    for attempt in range(max_escalations + 1):
        model, handles = build_master(case, state, ctx, with_sc, m_dual_scale=scale)
        best = None  # (model, handles, out)
        if state.total() and hint_sched is not None:
            hint = hint_sched
            for _ in range(6):
                undo = _fix_selectors_to_argmax(model, handles, hint)
                out_r = solve_milp(model, cfg)
                for idx, lb, ub in undo:
                    model.var_lb[idx] = lb
                    model.var_ub[idx] = ub
                if out_r.status != "optimal":
                    break
                if best is not None and out_r.objective <= best[2].objective + 1e-9:
                    break
                best = (model, handles, out_r)
                hint = DerSchedule.from_solution(out_r, handles.sched)
            if best is not None:
                incumbent = best[2].objective
                delta = max(1e-6, 1e-7 * abs(incumbent))
                model2, handles2 = build_master(case, state, ctx, with_sc, m_dual_scale=scale)
                model2.add_constr(model2.obj, GE, incumbent + delta, name="improve_cutoff")
                out2 = solve_milp(model2, cfg)
                if out2.status == "optimal":
                    best = (model2, handles2, out2)
                elif out2.status != "infeasible":
                    raise BilevelError(
                        f"master improvement solve returned {out2.status}; "
                        "cannot certify optimality"
                    )
                model, handles, out = best
            else:
                out = solve_milp(model, cfg)
        else:
            out = solve_milp(model, cfg)

        if out.status in ("optimal", "gap-limit"):
            issues = audit_kkt(out, model, handles.kkt)
            hard = [m for m in issues if "complementarity" in m]
            audit_log.extend(issues)
            if not hard:
                return model, handles, out
            last_err = "; ".join(hard[:3])
            audit_log.append(f"escalation {attempt + 1} after: {last_err}")
        else:
            last_err = f"master problem {out.status}: {out.message}"
            audit_log.append(f"escalation {attempt + 1} after: {last_err}")
        scale *= 10.0
    raise BilevelError(f"master unsolved after big-M escalations: {last_err}")


def rbrd_solve(
    case: SystemCase,
    cfg: SolverConfig | None = None,
    with_sc: bool = True,
    eps: float = 1e-5,
    max_iter: int = 50,
    logger=None,
) -> RBRDResult:
    """Full bidding solve: iterate master and security-check subproblems.

    Terminates when every cell's master deviation objective matches the true
    security-check optimum within ``eps`` (absolute, on the per-unit voltage
    deviation scale), or at the iteration cap with the best incumbent.
    """
    cfg = cfg or SolverConfig()
    log = logger or (lambda msg: None)
    ctx = ScContext.from_case(case) if with_sc else None
    state = RBRDState()
    audit_log: list = []
    records = []
    sc_results: dict = {}
    status = "iteration-limit"

    hint = None
    for it in range(1, max_iter + 1):
        t0 = time.perf_counter()
        model, handles, out = _solve_master_audited(
            case, state, ctx, with_sc, cfg, audit_log, hint_sched=hint
        )
        if not with_sc:
            records.append(IterationRecord(it, out.objective, 0, 0.0, 0, time.perf_counter() - t0))
            log(f"iter {it}: objective {out.objective:.6f} (no security check)")
            status = "optimal"
            break

        sched = DerSchedule.from_solution(out, handles.sched)
        hint = sched
        violated, max_mis = 0, 0.0
        stalled = False
        sc_results = {}
        for t in range(HORIZON):
            for s in SCENARIOS:
                key = (t, s)
                inj = injections_numeric(scenario_injections(case, sched, s, t))
                sub = solve_sc_cell(ctx, inj, cfg)
                sc_results[key] = sub
                if sub.status != "pass":
                    raise BilevelError(
                        f"subproblem hour {t + 1} {s} infeasible at the master solution; "
                        "feasibility block defect"
                    )
                master_val = master_deviation(out, handles.sc_cells[key])
                mismatch = master_val - sub.objective
                max_mis = max(max_mis, mismatch)
                if mismatch > eps:
                    violated += 1
                    if not state.add(key, (sub.tap_k, tuple(sub.cb_steps))):
                        stalled = True
        records.append(
            IterationRecord(it, out.objective, violated, max_mis, state.total(), time.perf_counter() - t0)
        )
        log(
            f"iter {it}: objective {out.objective:.6f}, violated cells {violated}, "
            f"max mismatch {max_mis:.3e}, combinations {state.total()}"
        )
        if violated == 0:
            status = "optimal"
            break
        if stalled:
            status = "stalled"
            log("no new integer combinations found for violated cells; stopping")
            break

    sched = DerSchedule.from_solution(out, handles.sched)
    bids = extract_bids(out, handles.bids)
    cleared = extract_cleared(out, handles)
    prices, lam_en = revenue_from_duals(out, model, case, handles.clearing, handles.kkt)
    msc = master_sc_values(out, handles, case.mva_base) if with_sc else {}
    reactive = (
        {key: {"q_cdg": v["q_cdg"], "q_pv": v["q_pv"]} for key, v in msc.items()}
        if with_sc
        else None
    )
    profit = profit_report(case, sched, cleared, prices, reactive)
    return RBRDResult(
        status=status,
        objective=out.objective,
        bids=bids,
        schedule=sched,
        cleared=cleared,
        prices=prices,
        lambda_en=lam_en,
        profit=profit,
        sc_results=sc_results,
        master_sc=msc,
        iterations=records,
        state=state,
        audit_log=audit_log,
    )


def exhaustive_master(
    case: SystemCase,
    cfg: SolverConfig | None = None,
    cap: int = 128,
) -> RBRDResult:
    """Exact oracle: master with every integer combination pre-enumerated.

    With the complete combination list the optimality cuts of every cell are
    all present, so the master optimum is the exact (optimistic) bi-level
    optimum. Only tractable for small tap/capacitor ranges; guarded by
    ``cap`` on the number of combinations per cell.
    """
    from .dso import count_combinations, iter_combinations

    n = count_combinations(case)
    if n > cap:
        raise BilevelError(f"{n} integer combinations per cell exceeds oracle cap {cap}")
    state = RBRDState()
    for t in range(HORIZON):
        for s in SCENARIOS:
            for k, steps in iter_combinations(case):
                state.add((t, s), (k, tuple(steps)))
    ctx = ScContext.from_case(case)
    audit_log: list = []
    cfg = cfg or SolverConfig()
    # bootstrap a reference schedule from the relaxed (cut-free) master
    _, handles0, out0 = _solve_master_audited(case, RBRDState(), ctx, True, cfg, audit_log)
    hint = DerSchedule.from_solution(out0, handles0.sched)
    model, handles, out = _solve_master_audited(case, state, ctx, True, cfg, audit_log, hint_sched=hint)
    sched = DerSchedule.from_solution(out, handles.sched)
    bids = extract_bids(out, handles.bids)
    cleared = extract_cleared(out, handles)
    prices, lam_en = revenue_from_duals(out, model, case, handles.clearing, handles.kkt)
    msc = master_sc_values(out, handles, case.mva_base)
    reactive = {key: {"q_cdg": v["q_cdg"], "q_pv": v["q_pv"]} for key, v in msc.items()}
    profit = profit_report(case, sched, cleared, prices, reactive)
    return RBRDResult(
        status="optimal",
        objective=out.objective,
        bids=bids,
        schedule=sched,
        cleared=cleared,
        prices=prices,
        lambda_en=lam_en,
        profit=profit,
        sc_results={},
        master_sc=msc,
        iterations=[],
        state=state,
        audit_log=audit_log,
    )
