"""Upper-level aggregator model: bids, DER allocation, and profit accounting.

Emits the bid-construction constraints (flexible/inflexible quantity caps,
reserve caps from device headroom), the per-device constraints (CDG limits,
ESS dynamics with mutually exclusive charge/discharge, PV curtailment boxes
per scenario), and the allocation rows tying the cleared aggregate quantities
to individual DER schedules. The profit report evaluates the four objective
components post-solve and lays them out per market and per technology.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .grid import HORIZON, SCENARIOS, SystemCase
from .milp import BINARY, EQ, GE, LE, LinExpr, Model, VarRef, lin_sum


@dataclass
class BidVars:
    """Per-hour bid decision variables of the aggregator."""

    p_flex_min: list
    p_flex_max: list
    p_infl: list
    price_flex: list
    r_up_cap: list
    r_dn_cap: list
    price_r_up: list
    price_r_dn: list
    r_up_req: list  # parameters (floats): PV error margins
    r_dn_req: list

    def hour_view(self, t: int):
        """Field bundle consumable by the clearing emitter."""
        return SimpleNamespace(
            p_flex_min=self.p_flex_min[t],
            p_flex_max=self.p_flex_max[t],
            p_infl=self.p_infl[t],
            price_flex=self.price_flex[t],
            r_up_cap=self.r_up_cap[t],
            r_dn_cap=self.r_dn_cap[t],
            price_r_up=self.price_r_up[t],
            price_r_dn=self.price_r_dn[t],
            r_up_req=self.r_up_req[t],
            r_dn_req=self.r_dn_req[t],
        )


@dataclass
class ScheduleVars:
    """Per-device schedule variables over the horizon."""

    p_cdg: list  # [t][c]
    r_cdgup: list
    r_cdgdn: list
    p_ch: list  # [t][e]
    p_dis: list
    i_ch: list
    i_dis: list
    e_soc: list
    r_essup: list
    r_essdn: list
    p_cv: dict  # scenario -> [t][p]

    # accessors shared with the numeric DerSchedule (duck-typed)
    def cdg_p(self, t, c):
        return self.p_cdg[t][c]

    def cdg_up(self, t, c):
        return self.r_cdgup[t][c]

    def cdg_dn(self, t, c):
        return self.r_cdgdn[t][c]

    def ess_net(self, t, e):
        return LinExpr.of(self.p_dis[t][e]) - self.p_ch[t][e]

    def ess_up(self, t, e):
        return self.r_essup[t][e]

    def ess_dn(self, t, e):
        return self.r_essdn[t][e]

    def pv_cv(self, s, t, p):
        return self.p_cv[s][t][p]


def emit_bids(model: Model, case: SystemCase) -> BidVars:
    """Bid variables with price caps and the inflexible quantity limit."""
    fleet = case.fleet
    flex_hi = sum(c.p_max_mw for c in fleet.cdgs) + sum(e.p_dis_max_mw for e in fleet.esss)
    flex_lo = -sum(e.p_ch_max_mw for e in fleet.esss)
    rup_hi = sum(c.r_up_max_mw for c in fleet.cdgs) + sum(
        e.p_dis_max_mw + e.p_ch_max_mw for e in fleet.esss
    )
    rdn_hi = sum(c.r_dn_max_mw for c in fleet.cdgs) + sum(
        e.p_ch_max_mw + e.p_dis_max_mw for e in fleet.esss
    )
    bv = BidVars([], [], [], [], [], [], [], [], [], [])
    for t in range(HORIZON):
        avail = sum(pv.profile_mw[t] for pv in fleet.pvs)
        bv.p_flex_min.append(model.add_var(flex_lo, flex_hi, name=f"bid_pmin_{t}"))
        bv.p_flex_max.append(model.add_var(flex_lo, flex_hi, name=f"bid_pmax_{t}"))
        bv.p_infl.append(model.add_var(0.0, avail, name=f"bid_pinfl_{t}"))
        bv.price_flex.append(model.add_var(0.0, case.price_cap, name=f"bid_oflex_{t}"))
        bv.r_up_cap.append(model.add_var(0.0, rup_hi, name=f"bid_rup_{t}"))
        bv.r_dn_cap.append(model.add_var(0.0, rdn_hi, name=f"bid_rdn_{t}"))
        bv.price_r_up.append(model.add_var(0.0, case.price_cap, name=f"bid_oup_{t}"))
        bv.price_r_dn.append(model.add_var(0.0, case.price_cap, name=f"bid_odn_{t}"))
        model.add_constr(LinExpr.of(bv.p_flex_min[t]) - bv.p_flex_max[t], LE, 0.0, name=f"bid_order_{t}")
        bv.r_up_req.append(fleet.agg_r_up(t))
        bv.r_dn_req.append(fleet.agg_r_dn(t))
    return bv


def emit_schedule(model: Model, case: SystemCase) -> ScheduleVars:
    """DER schedule variables plus the per-device constraints."""
    fleet = case.fleet
    sv = ScheduleVars([], [], [], [], [], [], [], [], [], [], {s: [] for s in SCENARIOS})
    for t in range(HORIZON):
        sv.p_cdg.append(
            [model.add_var(0.0, c.p_max_mw, name=f"cdg_p_{c.name}_{t}") for c in fleet.cdgs]
        )
        sv.r_cdgup.append(
            [model.add_var(0.0, c.r_up_max_mw, name=f"cdg_ru_{c.name}_{t}") for c in fleet.cdgs]
        )
        sv.r_cdgdn.append(
            [model.add_var(0.0, c.r_dn_max_mw, name=f"cdg_rd_{c.name}_{t}") for c in fleet.cdgs]
        )
        for ci, c in enumerate(fleet.cdgs):
            model.add_constr(
                LinExpr.of(sv.p_cdg[t][ci]) + sv.r_cdgup[t][ci], LE, c.p_max_mw,
                name=f"cdg_head_{c.name}_{t}",
            )
            model.add_constr(
                LinExpr.of(sv.p_cdg[t][ci]) - sv.r_cdgdn[t][ci], GE, c.p_min_mw,
                name=f"cdg_floor_{c.name}_{t}",
            )
        sv.p_ch.append(
            [model.add_var(0.0, e.p_ch_max_mw, name=f"ess_ch_{e.name}_{t}") for e in fleet.esss]
        )
        sv.p_dis.append(
            [model.add_var(0.0, e.p_dis_max_mw, name=f"ess_dis_{e.name}_{t}") for e in fleet.esss]
        )
        sv.i_ch.append([model.add_binary(f"ess_ich_{e.name}_{t}") for e in fleet.esss])
        sv.i_dis.append([model.add_binary(f"ess_idis_{e.name}_{t}") for e in fleet.esss])
        sv.e_soc.append(
            [model.add_var(e.e_min_mwh, e.e_max_mwh, name=f"ess_soc_{e.name}_{t}") for e in fleet.esss]
        )
        sv.r_essup.append(
            [
                model.add_var(0.0, e.p_dis_max_mw + e.p_ch_max_mw, name=f"ess_ru_{e.name}_{t}")
                for e in fleet.esss
            ]
        )
        sv.r_essdn.append(
            [
                model.add_var(0.0, e.p_ch_max_mw + e.p_dis_max_mw, name=f"ess_rd_{e.name}_{t}")
                for e in fleet.esss
            ]
        )
        for ei, e in enumerate(fleet.esss):
            model.add_constr(
                LinExpr.of(sv.p_ch[t][ei]) - LinExpr.of(sv.i_ch[t][ei]) * e.p_ch_max_mw,
                LE, 0.0, name=f"ess_chcap_{e.name}_{t}",
            )
            model.add_constr(
                LinExpr.of(sv.p_dis[t][ei]) - LinExpr.of(sv.i_dis[t][ei]) * e.p_dis_max_mw,
                LE, 0.0, name=f"ess_discap_{e.name}_{t}",
            )
            model.add_constr(
                LinExpr.of(sv.i_ch[t][ei]) + sv.i_dis[t][ei], LE, 1.0,
                name=f"ess_excl_{e.name}_{t}",
            )
            prev = e.e_initial_mwh if t == 0 else sv.e_soc[t - 1][ei]
            model.add_constr(
                LinExpr.of(sv.e_soc[t][ei])
                - LinExpr.of(prev)
                - LinExpr.of(sv.p_ch[t][ei]) * e.eta_ch
                + LinExpr.of(sv.p_dis[t][ei]) * (1.0 / e.eta_dis),
                EQ, 0.0, name=f"ess_dyn_{e.name}_{t}",
            )
            # reserve headroom: power rating and stored-energy sides
            model.add_constr(
                LinExpr.of(sv.r_essup[t][ei]) + sv.p_dis[t][ei] - sv.p_ch[t][ei],
                LE, e.p_dis_max_mw, name=f"ess_rup_pow_{e.name}_{t}",
            )
            model.add_constr(
                LinExpr.of(sv.r_essup[t][ei]) - LinExpr.of(prev) * e.eta_dis,
                LE, -e.eta_dis * e.e_min_mwh, name=f"ess_rup_en_{e.name}_{t}",
            )
            model.add_constr(
                LinExpr.of(sv.r_essdn[t][ei]) - sv.p_dis[t][ei] + sv.p_ch[t][ei],
                LE, e.p_ch_max_mw, name=f"ess_rdn_pow_{e.name}_{t}",
            )
            model.add_constr(
                LinExpr.of(sv.r_essdn[t][ei]) + LinExpr.of(prev) * (1.0 / e.eta_ch),
                LE, e.e_max_mwh / e.eta_ch, name=f"ess_rdn_en_{e.name}_{t}",
            )
        for s in SCENARIOS:
            scale = {"NR": 1.0, "UP": 1.0 + fleet.pv_error, "DN": 1.0 - fleet.pv_error}[s]
            sv.p_cv[s].append(
                [
                    model.add_var(0.0, scale * pv.profile_mw[t], name=f"pv_cv{s}_{pv.name}_{t}")
                    for pv in fleet.pvs
                ]
            )
    for ei, e in enumerate(fleet.esss):
        model.add_constr(
            LinExpr.of(sv.e_soc[HORIZON - 1][ei]), EQ, e.e_initial_mwh, name=f"ess_cycle_{e.name}"
        )
    return sv


def emit_bid_constraints(model: Model, case: SystemCase, bids: BidVars, sched: ScheduleVars):
    """Couple bid quantities to fleet states (flexible caps, reserve caps)."""
    fleet = case.fleet
    for t in range(HORIZON):
        model.add_constr(
            LinExpr.of(bids.p_flex_max[t])
            - lin_sum(LinExpr.of(sched.i_dis[t][ei]) * e.p_dis_max_mw for ei, e in enumerate(fleet.esss)),
            LE,
            sum(c.p_max_mw for c in fleet.cdgs),
            name=f"bid_flexcap_{t}",
        )
        model.add_constr(
            LinExpr.of(bids.p_flex_min[t])
            + lin_sum(LinExpr.of(sched.i_ch[t][ei]) * e.p_ch_max_mw for ei, e in enumerate(fleet.esss)),
            GE,
            0.0,
            name=f"bid_flexfloor_{t}",
        )
        # reserve caps: per-device headroom minimum encoded with one
        # auxiliary per device bounded by both sides of the min
        up_terms, dn_terms = [], []
        for ci, c in enumerate(fleet.cdgs):
            mu = model.add_var(0.0, c.r_up_max_mw, name=f"cap_cdgup_{c.name}_{t}")
            model.add_constr(LinExpr.of(mu) + sched.p_cdg[t][ci], LE, c.p_max_mw, name=f"capu_a_{c.name}_{t}")
            up_terms.append(mu)
            md = model.add_var(0.0, c.r_dn_max_mw, name=f"cap_cdgdn_{c.name}_{t}")
            model.add_constr(LinExpr.of(md) - sched.p_cdg[t][ci], LE, -c.p_min_mw, name=f"capd_a_{c.name}_{t}")
            dn_terms.append(md)
        for ei, e in enumerate(fleet.esss):
            prev = e.e_initial_mwh if t == 0 else sched.e_soc[t - 1][ei]
            mu = model.add_var(0.0, e.p_dis_max_mw + e.p_ch_max_mw, name=f"cap_essup_{e.name}_{t}")
            model.add_constr(
                LinExpr.of(mu) + sched.p_dis[t][ei] - sched.p_ch[t][ei], LE, e.p_dis_max_mw,
                name=f"capu_b_{e.name}_{t}",
            )
            model.add_constr(
                LinExpr.of(mu) - LinExpr.of(prev) * e.eta_dis, LE, -e.eta_dis * e.e_min_mwh,
                name=f"capu_c_{e.name}_{t}",
            )
            up_terms.append(mu)
            md = model.add_var(0.0, e.p_ch_max_mw + e.p_dis_max_mw, name=f"cap_essdn_{e.name}_{t}")
            model.add_constr(
                LinExpr.of(md) - sched.p_dis[t][ei] + sched.p_ch[t][ei], LE, e.p_ch_max_mw,
                name=f"capd_b_{e.name}_{t}",
            )
            model.add_constr(
                LinExpr.of(md) + LinExpr.of(prev) * (1.0 / e.eta_ch), LE, e.e_max_mwh / e.eta_ch,
                name=f"capd_c_{e.name}_{t}",
            )
            dn_terms.append(md)
        model.add_constr(
            LinExpr.of(bids.r_up_cap[t]) - lin_sum(LinExpr.of(v) for v in up_terms), LE, 0.0,
            name=f"bid_rupcap_{t}",
        )
        model.add_constr(
            LinExpr.of(bids.r_dn_cap[t]) - lin_sum(LinExpr.of(v) for v in dn_terms), LE, 0.0,
            name=f"bid_rdncap_{t}",
        )


def emit_allocation(model: Model, sched: ScheduleVars, clearing):
    """Tie the cleared aggregate quantities to the per-DER schedule."""
    for t in range(HORIZON):
        model.add_constr(
            LinExpr.of(clearing.p_flex[t])
            - lin_sum(LinExpr.of(v) for v in sched.p_cdg[t])
            - lin_sum(LinExpr.of(d) - c for d, c in zip(sched.p_dis[t], sched.p_ch[t])),
            EQ, 0.0, name=f"alloc_flex_{t}",
        )
        model.add_constr(
            LinExpr.of(clearing.p_cv[t]) - lin_sum(LinExpr.of(v) for v in sched.p_cv["NR"][t]),
            EQ, 0.0, name=f"alloc_cv_{t}",
        )
        model.add_constr(
            LinExpr.of(clearing.r_up[t])
            - lin_sum(LinExpr.of(v) for v in sched.r_cdgup[t])
            - lin_sum(LinExpr.of(v) for v in sched.r_essup[t]),
            EQ, 0.0, name=f"alloc_rup_{t}",
        )
        model.add_constr(
            LinExpr.of(clearing.r_dn[t])
            - lin_sum(LinExpr.of(v) for v in sched.r_cdgdn[t])
            - lin_sum(LinExpr.of(v) for v in sched.r_essdn[t]),
            EQ, 0.0, name=f"alloc_rdn_{t}",
        )


# -- numeric schedule -----------------------------------------------------------


@dataclass
class DerSchedule:
    """Solved per-DER allocation over the horizon (plain numbers)."""

    p_cdg: np.ndarray  # (T, n_cdg)
    r_cdgup: np.ndarray
    r_cdgdn: np.ndarray
    p_ch: np.ndarray  # (T, n_ess)
    p_dis: np.ndarray
    i_ch: np.ndarray
    i_dis: np.ndarray
    e_soc: np.ndarray
    r_essup: np.ndarray
    r_essdn: np.ndarray
    p_cv: dict  # scenario -> (T, n_pv)

    def cdg_p(self, t, c):
        return float(self.p_cdg[t, c])

    def cdg_up(self, t, c):
        return float(self.r_cdgup[t, c])

    def cdg_dn(self, t, c):
        return float(self.r_cdgdn[t, c])

    def ess_net(self, t, e):
        return float(self.p_dis[t, e] - self.p_ch[t, e])

    def ess_up(self, t, e):
        return float(self.r_essup[t, e])

    def ess_dn(self, t, e):
        return float(self.r_essdn[t, e])

    def pv_cv(self, s, t, p):
        return float(self.p_cv[s][t, p])

    def to_dict(self) -> dict:
        return {
            "p_cdg": self.p_cdg.tolist(),
            "r_cdgup": self.r_cdgup.tolist(),
            "r_cdgdn": self.r_cdgdn.tolist(),
            "p_ch": self.p_ch.tolist(),
            "p_dis": self.p_dis.tolist(),
            "i_ch": self.i_ch.tolist(),
            "i_dis": self.i_dis.tolist(),
            "e_soc": self.e_soc.tolist(),
            "r_essup": self.r_essup.tolist(),
            "r_essdn": self.r_essdn.tolist(),
            "p_cv": {s: m.tolist() for s, m in self.p_cv.items()},
        }

    @staticmethod
    def from_dict(raw: dict) -> "DerSchedule":
        return DerSchedule(
            p_cdg=np.array(raw["p_cdg"], dtype=float),
            r_cdgup=np.array(raw["r_cdgup"], dtype=float),
            r_cdgdn=np.array(raw["r_cdgdn"], dtype=float),
            p_ch=np.array(raw["p_ch"], dtype=float),
            p_dis=np.array(raw["p_dis"], dtype=float),
            i_ch=np.array(raw["i_ch"], dtype=float),
            i_dis=np.array(raw["i_dis"], dtype=float),
            e_soc=np.array(raw["e_soc"], dtype=float),
            r_essup=np.array(raw["r_essup"], dtype=float),
            r_essdn=np.array(raw["r_essdn"], dtype=float),
            p_cv={s: np.array(m, dtype=float) for s, m in raw["p_cv"].items()},
        )

    @staticmethod
    def from_solution(outcome, sv: ScheduleVars) -> "DerSchedule":
        def grab(rows):
            return np.array([[outcome.value(v) for v in row] for row in rows])

        return DerSchedule(
            p_cdg=grab(sv.p_cdg),
            r_cdgup=grab(sv.r_cdgup),
            r_cdgdn=grab(sv.r_cdgdn),
            p_ch=grab(sv.p_ch),
            p_dis=grab(sv.p_dis),
            i_ch=np.round(grab(sv.i_ch)),
            i_dis=np.round(grab(sv.i_dis)),
            e_soc=grab(sv.e_soc),
            r_essup=grab(sv.r_essup),
            r_essdn=grab(sv.r_essdn),
            p_cv={s: grab(sv.p_cv[s]) for s in SCENARIOS},
        )

    @staticmethod
    def zeros(case: SystemCase) -> "DerSchedule":
        nc, ne, np_ = len(case.fleet.cdgs), len(case.fleet.esss), len(case.fleet.pvs)
        z = lambda n: np.zeros((HORIZON, n))
        soc = np.tile([e.e_initial_mwh for e in case.fleet.esss], (HORIZON, 1)) if ne else z(0)
        return DerSchedule(
            z(nc), z(nc), z(nc), z(ne), z(ne), z(ne), z(ne), soc, z(ne), z(ne),
            {s: z(np_) for s in SCENARIOS},
        )


def check_schedule(case: SystemCase, sched: DerSchedule, cleared=None, tol: float = 1e-6) -> list:
    """Invariant audit of an accepted schedule; returns violation messages."""
    fleet = case.fleet
    bad = []
    for t in range(HORIZON):
        for ei, e in enumerate(fleet.esss):
            if sched.i_ch[t, ei] + sched.i_dis[t, ei] > 1 + tol:
                bad.append(f"hour {t + 1} ESS {e.name}: simultaneous charge and discharge")
            prev = e.e_initial_mwh if t == 0 else sched.e_soc[t - 1, ei]
            expect = prev + e.eta_ch * sched.p_ch[t, ei] - sched.p_dis[t, ei] / e.eta_dis
            if abs(sched.e_soc[t, ei] - expect) > tol:
                bad.append(f"hour {t + 1} ESS {e.name}: energy dynamics violated")
        for ci, c in enumerate(fleet.cdgs):
            if sched.p_cdg[t, ci] + sched.r_cdgup[t, ci] > c.p_max_mw + tol:
                bad.append(f"hour {t + 1} CDG {c.name}: upward headroom violated")
            if c.p_min_mw + sched.r_cdgdn[t, ci] > sched.p_cdg[t, ci] + tol:
                bad.append(f"hour {t + 1} CDG {c.name}: downward headroom violated")
    for ei, e in enumerate(fleet.esss):
        if abs(sched.e_soc[HORIZON - 1, ei] - e.e_initial_mwh) > tol:
            bad.append(f"ESS {e.name}: cyclic energy condition violated")
    if cleared is not None:
        for t in range(HORIZON):
            flex = sched.p_cdg[t].sum() + (sched.p_dis[t] - sched.p_ch[t]).sum()
            if abs(cleared.p_flex[t] - flex) > tol:
                bad.append(f"hour {t + 1}: flexible energy allocation mismatch")
            if abs(cleared.p_cv[t] - sched.p_cv["NR"][t].sum()) > tol:
                bad.append(f"hour {t + 1}: curtailment allocation mismatch")
            if abs(cleared.r_up[t] - sched.r_cdgup[t].sum() - sched.r_essup[t].sum()) > tol:
                bad.append(f"hour {t + 1}: upward reserve allocation mismatch")
            if abs(cleared.r_dn[t] - sched.r_cdgdn[t].sum() - sched.r_essdn[t].sum()) > tol:
                bad.append(f"hour {t + 1}: downward reserve allocation mismatch")
    return bad


# -- profit accounting -------------------------------------------------------------


@dataclass
class ClearedAgg:
    """Hourly aggregate quantities as scheduled by the ISO."""

    p_flex: np.ndarray
    p_infl: np.ndarray
    p_cv: np.ndarray
    r_up: np.ndarray
    r_dn: np.ndarray


@dataclass
class PriceSet:
    """Prices seen by the aggregator (nodal energy plus reserve prices)."""

    lambda_en_agg: np.ndarray
    lambda_up: np.ndarray
    lambda_dn: np.ndarray


@dataclass
class ProfitBreakdown:
    total: float
    f1_revenue: float
    f2_cdg_cost: float
    f3_pv_cost: float
    f4_ess_cost: float
    rows: dict = field(default_factory=dict)

    def table(self, currency: str = "¥") -> str:
        order = [
            ("Total profits", self.total),
            ("Profits in energy market", self.rows["energy_market"]),
            ("Profits in upward reserve market", self.rows["up_market"]),
            ("Profits in downward reserve market", self.rows["dn_market"]),
            ("Profits of CDGs in energy market", self.rows["cdg_energy"]),
            ("Profits of CDGs in upward reserve market", self.rows["cdg_up"]),
            ("Profits of CDGs in downward reserve market", self.rows["cdg_dn"]),
            ("Costs of reactive power output of CDGs", self.rows["cdg_reactive_cost"]),
            ("Profits of ESSs in energy market", self.rows["ess_energy"]),
            ("Profits of ESSs in upward reserve market", self.rows["ess_up"]),
            ("Profits of ESSs in downward reserve market", self.rows["ess_dn"]),
            ("Profits of PVs in energy market", self.rows["pv_energy"]),
            ("Costs of reactive power output of PVs", self.rows["pv_reactive_cost"]),
        ]
        width = max(len(k) for k, _ in order)
        lines = [f"{k:<{width}}  {v:>14.3f} {currency}" for k, v in order]
        return "\n".join(lines)


def profit_report(
    case: SystemCase,
    sched: DerSchedule,
    cleared: ClearedAgg,
    prices: PriceSet,
    reactive: dict | None = None,
) -> ProfitBreakdown:
    """Evaluate the profit components from solved values.

    ``reactive`` maps (t, scenario) -> {"q_cdg": [...], "q_pv": [...]} in
    Mvar; absolute values are taken directly (no linearization needed after
    the solve). Without it the reactive cost rows are zero, which matches a
    run without the security check.
    """
    fleet = case.fleet
    lam = prices.lambda_en_agg
    f1 = float(
        np.sum(lam * (cleared.p_flex + cleared.p_infl - cleared.p_cv))
        + np.sum(prices.lambda_up * cleared.r_up)
        + np.sum(prices.lambda_dn * cleared.r_dn)
    )
    cdg_energy_cost = sum(
        c.cost_energy * sched.p_cdg[:, ci].sum() for ci, c in enumerate(fleet.cdgs)
    )
    cdg_q_cost = 0.0
    pv_q_cost = 0.0
    if reactive:
        for (t, s), qs in reactive.items():
            for ci, c in enumerate(fleet.cdgs):
                cdg_q_cost += c.cost_reactive[s] * abs(qs["q_cdg"][ci])
            for pi, p in enumerate(fleet.pvs):
                pv_q_cost += p.cost_reactive[s] * abs(qs["q_pv"][pi])
    pv_cv_cost = sum(
        p.curtail_penalty[s] * sched.p_cv[s][:, pi].sum()
        for pi, p in enumerate(fleet.pvs)
        for s in SCENARIOS
    )
    ess_cost = sum(
        e.cost_ch * sched.p_ch[:, ei].sum() + e.cost_dis * sched.p_dis[:, ei].sum()
        for ei, e in enumerate(fleet.esss)
    )
    f2 = float(cdg_energy_cost + cdg_q_cost)
    f3 = float(pv_cv_cost + pv_q_cost)
    f4 = float(ess_cost)
    total = f1 - f2 - f3 - f4

    rows = {}
    rows["cdg_energy"] = float(np.sum(lam * sched.p_cdg.sum(axis=1)) - cdg_energy_cost)
    rows["ess_energy"] = float(
        np.sum(lam * (sched.p_dis - sched.p_ch).sum(axis=1)) - ess_cost
    )
    rows["pv_energy"] = float(
        np.sum(lam * (cleared.p_infl - cleared.p_cv)) - pv_cv_cost
    )
    rows["cdg_up"] = float(np.sum(prices.lambda_up * sched.r_cdgup.sum(axis=1)))
    rows["ess_up"] = float(np.sum(prices.lambda_up * sched.r_essup.sum(axis=1)))
    rows["cdg_dn"] = float(np.sum(prices.lambda_dn * sched.r_cdgdn.sum(axis=1)))
    rows["ess_dn"] = float(np.sum(prices.lambda_dn * sched.r_essdn.sum(axis=1)))
    rows["energy_market"] = rows["cdg_energy"] + rows["ess_energy"] + rows["pv_energy"]
    rows["up_market"] = rows["cdg_up"] + rows["ess_up"]
    rows["dn_market"] = rows["cdg_dn"] + rows["ess_dn"]
    rows["cdg_reactive_cost"] = float(cdg_q_cost)
    rows["pv_reactive_cost"] = float(pv_q_cost)
    return ProfitBreakdown(float(total), f1, f2, f3, f4, rows)
