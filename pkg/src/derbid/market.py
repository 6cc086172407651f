"""Joint energy and reserve market clearing and price extraction.

The ISO clears both products in one LP over the full horizon: hourly energy
balance, upward/downward reserve requirements, generator and aggregator
quantity limits, and PTDF transmission line limits. Clearing prices are the
duals of the balance and requirement rows; the aggregator's nodal energy
price subtracts the congestion component through the boundary-bus transfer
factors.

The row emission is shared with the bilevel machinery: bid fields may be
plain numbers (standalone clearing) or master-model variables (KKT
embedding), and every row is recorded by family so duals can be read back or
complementarity conditions attached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import HORIZON, Ptdf, SystemCase, compute_ptdf
from .milp import (
    EQ,
    GE,
    LE,
    LinExpr,
    Model,
    SolveError,
    SolverConfig,
    VarRef,
    lin_sum,
    solve_lp,
)


class MarketError(Exception):
    """Invalid bids or an unclearable market."""


@dataclass(frozen=True)
class HourBid:
    """One hour of the aggregator's submission."""

    p_flex_min: float
    p_flex_max: float
    p_infl: float
    price_flex: float
    r_up_cap: float
    r_dn_cap: float
    price_r_up: float
    price_r_dn: float
    r_up_req: float
    r_dn_req: float


@dataclass(frozen=True)
class BidSet:
    hours: tuple

    def __post_init__(self):
        if len(self.hours) != HORIZON:
            raise MarketError(f"bid set has {len(self.hours)} hours, expected {HORIZON}")
        for t, h in enumerate(self.hours):
            if min(h.price_flex, h.price_r_up, h.price_r_dn) < 0:
                raise MarketError(f"hour {t + 1}: negative bid price")
            if h.p_flex_min > h.p_flex_max + 1e-12:
                raise MarketError(f"hour {t + 1}: flexible quantity floor exceeds ceiling")
            if min(h.r_up_cap, h.r_dn_cap) < 0:
                raise MarketError(f"hour {t + 1}: negative reserve cap")

    @staticmethod
    def from_dict(raw: dict) -> "BidSet":
        keys = (
            "p_flex_min", "p_flex_max", "p_infl", "price_flex", "r_up_cap",
            "r_dn_cap", "price_r_up", "price_r_dn", "r_up_req", "r_dn_req",
        )
        hours = []
        for t in range(HORIZON):
            hours.append(HourBid(*(float(raw[k][t]) for k in keys)))
        return BidSet(tuple(hours))

    def to_dict(self) -> dict:
        keys = (
            "p_flex_min", "p_flex_max", "p_infl", "price_flex", "r_up_cap",
            "r_dn_cap", "price_r_up", "price_r_dn", "r_up_req", "r_dn_req",
        )
        return {k: [getattr(h, k) for h in self.hours] for k in keys}


def inflexible_requirements(case: SystemCase, t: int) -> tuple:
    """Aggregated PV reserve requirements (forecast error margins) at hour t."""
    return case.fleet.agg_r_up(t), case.fleet.agg_r_dn(t)


def quantity_caps(case: SystemCase) -> dict:
    """Outer boxes on cleared quantities, derived from fleet capacities."""
    fleet = case.fleet
    p_dis = sum(e.p_dis_max_mw for e in fleet.esss)
    p_ch = sum(e.p_ch_max_mw for e in fleet.esss)
    return {
        "flex_lo": -p_ch,
        "flex_hi": sum(c.p_max_mw for c in fleet.cdgs) + p_dis,
        "r_up": sum(c.r_up_max_mw for c in fleet.cdgs) + p_dis + p_ch,
        "r_dn": sum(c.r_dn_max_mw for c in fleet.cdgs) + p_dis + p_ch,
        "cv": sum(p.p_installed_mw for p in fleet.pvs),
        "infl": sum(p.p_installed_mw for p in fleet.pvs),
    }


@dataclass
class ClearingBlock:
    """Handles of the clearing LP inside some model (standalone or master)."""

    p_gen: list  # [t][g] VarRef
    r_gup: list
    r_gdn: list
    p_flex: list  # [t]
    r_up: list
    r_dn: list
    p_cv: list
    rows: dict = field(default_factory=dict)  # family -> [t] or [t][g/l] row ids
    obj_terms: list = field(default_factory=list)  # (VarRef, float | VarRef)
    ptdf: Ptdf | None = None
    line_indices: list = field(default_factory=list)

    def primal_vars(self):
        out = []
        for t in range(HORIZON):
            out.extend(self.p_gen[t])
            out.extend(self.r_gup[t])
            out.extend(self.r_gdn[t])
            out.extend([self.p_flex[t], self.r_up[t], self.r_dn[t], self.p_cv[t]])
        return out

    def all_rows(self):
        out = []
        for fam in self.rows.values():
            for item in fam:
                if isinstance(item, list):
                    out.extend(item)
                elif isinstance(item, dict):
                    out.extend(item.values())
                else:
                    out.append(item)
        return out


def _f(x):
    """Bid field -> LinExpr term (accepts floats and VarRefs)."""
    return LinExpr.of(x)


def emit_clearing(model: Model, case: SystemCase, bids, caps: dict | None = None,
                  prune_lines: bool = False) -> ClearingBlock:
    """Emit the clearing LP rows for all hours into ``model``.

    ``bids`` is a sequence of 24 objects with HourBid's fields, each field a
    float or a VarRef of ``model``. The objective is returned as term pairs
    but not installed, so the caller decides between welfare minimization
    (standalone) and KKT embedding (master). With ``prune_lines`` the line
    rows whose flow cannot reach the limit over the variable boxes are
    dropped (their duals are identically zero), which spares the embedded
    form their complementarity binaries.
    """
    ts = case.transmission
    ptdf = compute_ptdf(ts)
    caps = caps or quantity_caps(case)
    gens = ts.generators
    limited = [li for li, ln in enumerate(ts.lines) if ln.capacity_mw is not None]

    blk = ClearingBlock([], [], [], [], [], [], [], {}, [], ptdf, limited)
    fam = blk.rows
    for name in (
        "balance", "up_req", "dn_req", "gen_lo", "gen_hi", "gup_lo", "gup_hi",
        "gdn_lo", "gdn_hi", "flex_lo", "flex_hi", "rup_lo", "rup_hi",
        "rdn_lo", "rdn_hi", "cv_lo", "cv_hi", "line_lo", "line_hi",
    ):
        fam[name] = []

    for t in range(HORIZON):
        hb = bids[t]
        pg = [model.add_var(0.0, g.p_max_mw, name=f"pg_{g.name}_{t}") for g in gens]
        rgu = [model.add_var(0.0, g.r_up_max_mw, name=f"rgup_{g.name}_{t}") for g in gens]
        rgd = [model.add_var(0.0, g.r_dn_max_mw, name=f"rgdn_{g.name}_{t}") for g in gens]
        pf = model.add_var(caps["flex_lo"], caps["flex_hi"], name=f"pflex_{t}")
        ru = model.add_var(0.0, caps["r_up"], name=f"rup_{t}")
        rd = model.add_var(0.0, caps["r_dn"], name=f"rdn_{t}")
        pcv = model.add_var(0.0, caps["cv"], name=f"pcv_{t}")
        blk.p_gen.append(pg)
        blk.r_gup.append(rgu)
        blk.r_gdn.append(rgd)
        blk.p_flex.append(pf)
        blk.r_up.append(ru)
        blk.r_dn.append(rd)
        blk.p_cv.append(pcv)

        supply = lin_sum([pf, _f(hb.p_infl), -1.0 * LinExpr.of(pcv)] + [LinExpr.of(g) for g in pg])
        fam["balance"].append(
            model.add_constr(supply, EQ, ts.total_demand(t), name=f"bal_{t}")
        )
        fam["up_req"].append(
            model.add_constr(
                lin_sum([ru] + [LinExpr.of(v) for v in rgu]) - _f(hb.r_up_req),
                EQ,
                ts.reserve_up_mw[t],
                name=f"upreq_{t}",
            )
        )
        fam["dn_req"].append(
            model.add_constr(
                lin_sum([rd] + [LinExpr.of(v) for v in rgd]) - _f(hb.r_dn_req),
                EQ,
                ts.reserve_dn_mw[t],
                name=f"dnreq_{t}",
            )
        )

        fam["gen_lo"].append(
            [model.add_constr(LinExpr.of(pg[g]) - rgd[g], GE, 0.0, name=f"genlo_{g}_{t}") for g in range(len(gens))]
        )
        fam["gen_hi"].append(
            [
                model.add_constr(LinExpr.of(pg[g]) + rgu[g], LE, gens[g].p_max_mw, name=f"genhi_{g}_{t}")
                for g in range(len(gens))
            ]
        )
        fam["gup_lo"].append(
            [model.add_constr(LinExpr.of(rgu[g]), GE, 0.0, name=f"guplo_{g}_{t}") for g in range(len(gens))]
        )
        fam["gup_hi"].append(
            [
                model.add_constr(LinExpr.of(rgu[g]), LE, gens[g].r_up_max_mw, name=f"guphi_{g}_{t}")
                for g in range(len(gens))
            ]
        )
        fam["gdn_lo"].append(
            [model.add_constr(LinExpr.of(rgd[g]), GE, 0.0, name=f"gdnlo_{g}_{t}") for g in range(len(gens))]
        )
        fam["gdn_hi"].append(
            [
                model.add_constr(LinExpr.of(rgd[g]), LE, gens[g].r_dn_max_mw, name=f"gdnhi_{g}_{t}")
                for g in range(len(gens))
            ]
        )

        fam["flex_lo"].append(
            model.add_constr(LinExpr.of(pf) - rd - _f(hb.p_flex_min), GE, 0.0, name=f"flexlo_{t}")
        )
        fam["flex_hi"].append(
            model.add_constr(LinExpr.of(pf) + ru - _f(hb.p_flex_max), LE, 0.0, name=f"flexhi_{t}")
        )
        fam["rup_lo"].append(model.add_constr(LinExpr.of(ru), GE, 0.0, name=f"ruplo_{t}"))
        fam["rup_hi"].append(
            model.add_constr(LinExpr.of(ru) - _f(hb.r_up_cap), LE, 0.0, name=f"ruphi_{t}")
        )
        fam["rdn_lo"].append(model.add_constr(LinExpr.of(rd), GE, 0.0, name=f"rdnlo_{t}"))
        fam["rdn_hi"].append(
            model.add_constr(LinExpr.of(rd) - _f(hb.r_dn_cap), LE, 0.0, name=f"rdnhi_{t}")
        )
        fam["cv_lo"].append(model.add_constr(LinExpr.of(pcv), GE, 0.0, name=f"cvlo_{t}"))
        fam["cv_hi"].append(
            model.add_constr(LinExpr.of(pcv) - _f(hb.p_infl), LE, 0.0, name=f"cvhi_{t}")
        )

        line_lo_t, line_hi_t = {}, {}
        g_agg = ptdf.column(ts.boundary_bus)
        for li in limited:
            ln = ts.lines[li]
            flow = lin_sum(
                [
                    (LinExpr.of(pf) + _f(hb.p_infl) - pcv) * g_agg[li],
                ]
                + [LinExpr.of(pg[g]) * ptdf.factor(li, gens[g].bus) for g in range(len(gens))]
            )
            fixed = sum(ptdf.factor(li, d.bus) * d.profile_mw[t] for d in ts.demands)
            flow_lo, flow_hi = model.expr_bounds(flow) if prune_lines else (-np.inf, np.inf)
            if not prune_lines or flow_hi > ln.capacity_mw + fixed - 1e-7:
                line_hi_t[li] = model.add_constr(
                    flow, LE, ln.capacity_mw + fixed, name=f"linehi_{li}_{t}"
                )
            if not prune_lines or flow_lo < -ln.capacity_mw + fixed + 1e-7:
                line_lo_t[li] = model.add_constr(
                    flow, GE, -ln.capacity_mw + fixed, name=f"linelo_{li}_{t}"
                )
        fam["line_lo"].append(line_lo_t)
        fam["line_hi"].append(line_hi_t)

        for g in range(len(gens)):
            blk.obj_terms.append((pg[g], gens[g].offer_energy))
            blk.obj_terms.append((rgu[g], gens[g].offer_r_up))
            blk.obj_terms.append((rgd[g], gens[g].offer_r_dn))
        blk.obj_terms.append((pf, hb.price_flex))
        blk.obj_terms.append((pcv, case.fleet.inflexible_curtail_penalty))
        blk.obj_terms.append((ru, hb.price_r_up))
        blk.obj_terms.append((rd, hb.price_r_dn))
    return blk


def build_clearing_lp(case: SystemCase, bids: BidSet) -> tuple:
    """Standalone clearing LP (welfare minimization) for a fixed bid set."""
    model = Model("clearing", "min")
    caps = quantity_caps(case)
    lo = min(min(h.p_flex_min for h in bids.hours), caps["flex_lo"])
    hi = max(max(h.p_flex_max for h in bids.hours), caps["flex_hi"])
    caps = dict(
        caps,
        flex_lo=lo,
        flex_hi=hi,
        r_up=max(caps["r_up"], max(h.r_up_cap for h in bids.hours)),
        r_dn=max(caps["r_dn"], max(h.r_dn_cap for h in bids.hours)),
        cv=max(caps["cv"], max(h.p_infl for h in bids.hours)),
    )
    blk = emit_clearing(model, case, bids.hours, caps)
    model.set_objective(lin_sum(LinExpr.of(v) * c for v, c in blk.obj_terms), "min")
    return model, blk


@dataclass
class ClearingResult:
    """Dispatch plus all clearing-LP duals in non-negative convention."""

    objective: float
    p_gen: np.ndarray
    r_gup: np.ndarray
    r_gdn: np.ndarray
    p_flex: np.ndarray
    r_up: np.ndarray
    r_dn: np.ndarray
    p_cv: np.ndarray
    lambda_en: np.ndarray
    lambda_up: np.ndarray
    lambda_dn: np.ndarray
    nu_line_hi: np.ndarray  # (T, n_limited) >= 0
    nu_line_lo: np.ndarray
    bound_duals: dict
    g_agg: np.ndarray  # boundary-bus PTDF column over limited lines

    def nodal_price(self, t: int) -> float:
        """Aggregator's locational energy price at hour t.

        System price minus the congestion component picked up through the
        boundary bus: lambda - sum_l G_l,agg * (nu_hi - nu_lo).
        """
        shift = float(np.dot(self.g_agg, self.nu_line_hi[t] - self.nu_line_lo[t]))
        return float(self.lambda_en[t]) - shift


def aggregator_nodal_price(result: ClearingResult, t: int) -> float:
    return result.nodal_price(t)


def _precheck(case: SystemCase, bids: BidSet):
    ts = case.transmission
    gcap = sum(g.p_max_mw for g in ts.generators)
    ucap = sum(g.r_up_max_mw for g in ts.generators)
    dcap = sum(g.r_dn_max_mw for g in ts.generators)
    for t in range(HORIZON):
        hb = bids.hours[t]
        if gcap + hb.p_flex_max + hb.p_infl < ts.total_demand(t) - 1e-9:
            raise MarketError(f"hour {t + 1}: demand {ts.total_demand(t)} exceeds total supply capacity")
        if ucap + hb.r_up_cap < ts.reserve_up_mw[t] + hb.r_up_req - 1e-9:
            raise MarketError(f"hour {t + 1}: upward reserve requirement cannot be met")
        if dcap + hb.r_dn_cap < ts.reserve_dn_mw[t] + hb.r_dn_req - 1e-9:
            raise MarketError(f"hour {t + 1}: downward reserve requirement cannot be met")


def extract_result(outcome, blk: ClearingBlock, n_gens: int) -> ClearingResult:
    t_range = range(HORIZON)
    p_gen = np.array([[outcome.value(v) for v in blk.p_gen[t]] for t in t_range])
    r_gup = np.array([[outcome.value(v) for v in blk.r_gup[t]] for t in t_range])
    r_gdn = np.array([[outcome.value(v) for v in blk.r_gdn[t]] for t in t_range])
    p_flex = np.array([outcome.value(blk.p_flex[t]) for t in t_range])
    r_up = np.array([outcome.value(blk.r_up[t]) for t in t_range])
    r_dn = np.array([outcome.value(blk.r_dn[t]) for t in t_range])
    p_cv = np.array([outcome.value(blk.p_cv[t]) for t in t_range])
    lam_en = np.array([outcome.dual(blk.rows["balance"][t]) for t in t_range])
    lam_up = np.array([outcome.dual(blk.rows["up_req"][t]) for t in t_range])
    lam_dn = np.array([outcome.dual(blk.rows["dn_req"][t]) for t in t_range])
    n_lim = len(blk.line_indices)
    nu_hi = np.zeros((HORIZON, n_lim))
    nu_lo = np.zeros((HORIZON, n_lim))
    for t in t_range:
        for j, li in enumerate(blk.line_indices):
            if li in blk.rows["line_hi"][t]:
                nu_hi[t, j] = -outcome.dual(blk.rows["line_hi"][t][li])  # LE: classic dual
            if li in blk.rows["line_lo"][t]:
                nu_lo[t, j] = outcome.dual(blk.rows["line_lo"][t][li])  # GE
    bound_duals = {}
    for famname, sign in (
        ("gen_lo", 1.0), ("gen_hi", -1.0), ("gup_lo", 1.0), ("gup_hi", -1.0),
        ("gdn_lo", 1.0), ("gdn_hi", -1.0),
    ):
        bound_duals[famname] = np.array(
            [[sign * outcome.dual(r) for r in blk.rows[famname][t]] for t in t_range]
        )
    for famname, sign in (
        ("flex_lo", 1.0), ("flex_hi", -1.0), ("rup_lo", 1.0), ("rup_hi", -1.0),
        ("rdn_lo", 1.0), ("rdn_hi", -1.0), ("cv_lo", 1.0), ("cv_hi", -1.0),
    ):
        bound_duals[famname] = np.array([sign * outcome.dual(blk.rows[famname][t]) for t in t_range])
    return ClearingResult(
        outcome.objective, p_gen, r_gup, r_gdn, p_flex, r_up, r_dn, p_cv,
        lam_en, lam_up, lam_dn, nu_hi, nu_lo, bound_duals,
        np.zeros(n_lim),
    )


def clear_market(case: SystemCase, bids: BidSet, cfg: SolverConfig | None = None) -> ClearingResult:
    """Solve the clearing LP and return dispatch plus prices."""
    _precheck(case, bids)
    model, blk = build_clearing_lp(case, bids)
    outcome = solve_lp(model, cfg)
    if outcome.status != "optimal":
        raise MarketError(f"market clearing {outcome.status}: {outcome.message}")
    res = extract_result(outcome, blk, len(case.transmission.generators))
    g_agg_col = blk.ptdf.column(case.transmission.boundary_bus)
    res.g_agg = np.array([g_agg_col[li] for li in blk.line_indices])

    # Energy balance residual audit.
    ts = case.transmission
    for t in range(HORIZON):
        resid = (
            res.p_flex[t] + bids.hours[t].p_infl - res.p_cv[t] + res.p_gen[t].sum()
            - ts.total_demand(t)
        )
        if abs(resid) > 1e-7:
            raise SolveError(f"hour {t + 1}: energy balance residual {resid:.2e} exceeds 1e-7")
    return res
