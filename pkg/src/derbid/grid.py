"""Data model of the integrated transmission/distribution system.

Holds the immutable case description (transmission network, distribution
feeder, DER fleet), JSON case-file ingestion with validation, and the two
derived network objects everything else builds on: transmission PTDFs and the
partitioned feeder admittance with the substation transformer split behind a
dummy bus.

All network math is in per-unit on the case's MVA base; market quantities are
MW/MWh. Case files carry MW/Mvar and are converted where needed.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

HORIZON = 24
SCENARIOS = ("NR", "UP", "DN")


class CaseError(Exception):
    """Schema or invariant violation in a case description."""


# -- transmission -------------------------------------------------------------


@dataclass(frozen=True)
class TransmissionLine:
    from_bus: int
    to_bus: int
    reactance_pu: float
    capacity_mw: float | None = None  # None: flow not limited


@dataclass(frozen=True)
class Generator:
    bus: int
    p_max_mw: float
    r_up_max_mw: float
    r_dn_max_mw: float
    offer_energy: float
    offer_r_up: float
    offer_r_dn: float
    name: str = ""


@dataclass(frozen=True)
class Demand:
    bus: int
    profile_mw: tuple


@dataclass(frozen=True)
class TransmissionSystem:
    buses: tuple
    lines: tuple
    generators: tuple
    demands: tuple
    reserve_up_mw: tuple
    reserve_dn_mw: tuple
    boundary_bus: int
    slack_bus: int

    def total_demand(self, t: int) -> float:
        return sum(d.profile_mw[t] for d in self.demands)


# -- distribution --------------------------------------------------------------


@dataclass(frozen=True)
class DistBus:
    id: int
    load_p_mw: tuple
    load_q_mvar: tuple


@dataclass(frozen=True)
class DistLine:
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float
    i_max_pu: float | None = None

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r_pu, self.x_pu)


@dataclass(frozen=True)
class Transformer:
    secondary_bus: int
    r_pu: float
    x_pu: float
    k_min: float
    k_max: float
    k_step: float
    tap_bits: int
    i_max_pu: float | None = None

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r_pu, self.x_pu)

    def tap_positions(self) -> list[float]:
        """Reachable tap ratios: bit-encoded steps, truncated at k_max."""
        out = []
        for n in range(2 ** self.tap_bits):
            k = self.k_min + self.k_step * n
            if k <= self.k_max + 1e-12:
                out.append(k)
        return out


@dataclass(frozen=True)
class CapacitorBank:
    bus: int
    groups: int
    q_per_group_mvar: float
    q_min_mvar: float = 0.0

    @property
    def q_max_mvar(self) -> float:
        return self.q_min_mvar + self.groups * self.q_per_group_mvar

    def steps_mvar(self) -> list[float]:
        return [self.q_min_mvar + c * self.q_per_group_mvar for c in range(self.groups + 1)]


@dataclass(frozen=True)
class DistributionSystem:
    buses: tuple
    root_bus: int
    lines: tuple
    transformer: Transformer
    capacitors: tuple
    v_min_pu: float
    v_max_pu: float

    @property
    def interior_ids(self) -> tuple:
        """Non-root DS bus ids, in declaration order."""
        return tuple(b.id for b in self.buses if b.id != self.root_bus)

    def bus_by_id(self, bus_id: int) -> DistBus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise CaseError(f"distribution bus {bus_id} not found")


# -- DER fleet -----------------------------------------------------------------


@dataclass(frozen=True)
class Cdg:
    bus: int
    p_max_mw: float
    r_up_max_mw: float
    r_dn_max_mw: float
    cost_energy: float
    cost_reactive: dict
    power_factor: float
    p_min_mw: float = 0.0
    name: str = ""

    @property
    def tan_phi(self) -> float:
        return math.tan(math.acos(self.power_factor))


@dataclass(frozen=True)
class Ess:
    bus: int
    p_ch_max_mw: float
    p_dis_max_mw: float
    e_min_mwh: float
    e_max_mwh: float
    e_initial_mwh: float
    eta_ch: float
    eta_dis: float
    cost_ch: float
    cost_dis: float
    name: str = ""


@dataclass(frozen=True)
class Pv:
    bus: int
    p_installed_mw: float
    profile_mw: tuple
    power_factor: float
    curtail_penalty: dict
    cost_reactive: dict
    name: str = ""

    @property
    def tan_phi(self) -> float:
        return math.tan(math.acos(self.power_factor))


@dataclass(frozen=True)
class DerFleet:
    cdgs: tuple
    esss: tuple
    pvs: tuple
    pv_error: float
    inflexible_curtail_penalty: float

    def pv_r_up(self, pv: Pv, t: int) -> float:
        """Upward reserve requirement of one PV (forecast shortfall margin)."""
        return self.pv_error * pv.profile_mw[t]

    def pv_r_dn(self, pv: Pv, t: int) -> float:
        """Downward requirement: surplus margin, capped by installed capacity."""
        return min(pv.p_installed_mw - pv.profile_mw[t], self.pv_error * pv.profile_mw[t])

    def agg_r_up(self, t: int) -> float:
        return sum(self.pv_r_up(pv, t) for pv in self.pvs)

    def agg_r_dn(self, t: int) -> float:
        return sum(self.pv_r_dn(pv, t) for pv in self.pvs)


@dataclass(frozen=True)
class SystemCase:
    name: str
    mva_base: float
    currency: str
    transmission: TransmissionSystem
    distribution: DistributionSystem
    fleet: DerFleet
    price_cap: float

    @property
    def hours(self) -> range:
        return range(HORIZON)

    @property
    def scenarios(self) -> tuple:
        return SCENARIOS


# -- profiles and file ingestion ------------------------------------------------


def _read_profile(spec, base_dir: str, what: str) -> tuple:
    """A profile is an inline 24-array or {"csv": file, "column": name}."""
    if isinstance(spec, (int, float)):
        return tuple(float(spec) for _ in range(HORIZON))
    if isinstance(spec, list):
        if len(spec) != HORIZON:
            raise CaseError(f"{what}: profile length {len(spec)} != horizon {HORIZON}")
        return tuple(float(v) for v in spec)
    if isinstance(spec, dict) and "csv" in spec:
        path = os.path.join(base_dir, spec["csv"])
        col = spec["column"]
        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise CaseError(f"{what}: cannot read profile CSV {path}: {exc}") from exc
        if len(rows) != HORIZON:
            raise CaseError(f"{what}: CSV {path} has {len(rows)} rows, expected {HORIZON}")
        try:
            return tuple(float(r[col]) for r in rows)
        except KeyError as exc:
            raise CaseError(f"{what}: CSV {path} missing column {col!r}") from exc
    raise CaseError(f"{what}: profile must be a number, 24-array, or CSV reference")


def _req(obj: dict, key: str, where: str):
    if key not in obj:
        raise CaseError(f"{where}: missing required field {key!r}")
    return obj[key]


_DEFAULT_LOAD_PF = 0.95


def load_case(path: str) -> SystemCase:
    """Parse and fully validate a JSON case file."""
    with open(path) as fh:
        raw = json.load(fh)
    base_dir = os.path.dirname(os.path.abspath(path))
    return parse_case(raw, base_dir)


def parse_case(raw: dict, base_dir: str = ".") -> SystemCase:
    for section in ("transmission", "distribution", "fleet"):
        if section not in raw:
            raise CaseError(f"case: missing section {section!r}")
    mva_base = float(raw.get("mva_base", 10.0))
    if mva_base <= 0:
        raise CaseError("case: mva_base must be positive")

    ts = _parse_transmission(raw["transmission"], base_dir)
    ds = _parse_distribution(raw["distribution"], base_dir)
    fleet = _parse_fleet(raw["fleet"], base_dir)
    market = raw.get("market", {})
    case = SystemCase(
        name=raw.get("name", "unnamed"),
        mva_base=mva_base,
        currency=raw.get("currency", "¥"),
        transmission=ts,
        distribution=ds,
        fleet=fleet,
        price_cap=float(market.get("price_cap", 1000.0)),
    )
    validate_case(case)
    return case


def _parse_transmission(sec: dict, base_dir: str) -> TransmissionSystem:
    buses = tuple(int(b) for b in _req(sec, "buses", "transmission"))
    lines = tuple(
        TransmissionLine(
            int(_req(ln, "from", "transmission.line")),
            int(_req(ln, "to", "transmission.line")),
            float(_req(ln, "reactance_pu", "transmission.line")),
            None if ln.get("capacity_mw") is None else float(ln["capacity_mw"]),
        )
        for ln in sec.get("lines", [])
    )
    gens = tuple(
        Generator(
            int(_req(g, "bus", "generator")),
            float(_req(g, "p_max_mw", "generator")),
            float(_req(g, "r_up_max_mw", "generator")),
            float(_req(g, "r_dn_max_mw", "generator")),
            float(_req(g, "offer_energy", "generator")),
            float(_req(g, "offer_r_up", "generator")),
            float(_req(g, "offer_r_dn", "generator")),
            str(g.get("name", f"g{i}")),
        )
        for i, g in enumerate(_req(sec, "generators", "transmission"))
    )
    demands = tuple(
        Demand(int(_req(d, "bus", "demand")), _read_profile(_req(d, "profile_mw", "demand"), base_dir, "demand"))
        for d in sec.get("demands", [])
    )
    boundary = int(_req(sec, "boundary_bus", "transmission"))
    slack = int(sec.get("slack_bus", gens[0].bus if gens else buses[0]))
    return TransmissionSystem(
        buses,
        lines,
        gens,
        demands,
        _read_profile(sec.get("reserve_up_mw", 0.0), base_dir, "reserve_up"),
        _read_profile(sec.get("reserve_dn_mw", 0.0), base_dir, "reserve_dn"),
        boundary,
        slack,
    )


def _parse_distribution(sec: dict, base_dir: str) -> DistributionSystem:
    root = int(_req(sec, "root_bus", "distribution"))
    buses = []
    for b in _req(sec, "buses", "distribution"):
        bid = int(_req(b, "id", "distribution.bus"))
        p = _read_profile(b.get("load_p_mw", 0.0), base_dir, f"DS bus {bid} load")
        if "load_q_mvar" in b:
            q = _read_profile(b["load_q_mvar"], base_dir, f"DS bus {bid} reactive load")
        else:
            # Reactive load derived from a per-bus power factor (lagging).
            pf = float(b.get("power_factor", _DEFAULT_LOAD_PF))
            if not 0.0 < pf <= 1.0:
                raise CaseError(f"DS bus {bid}: power factor {pf} outside (0, 1]")
            tphi = math.tan(math.acos(pf))
            q = tuple(v * tphi for v in p)
        buses.append(DistBus(bid, p, q))
    tr = _req(sec, "transformer", "distribution")
    transformer = Transformer(
        secondary_bus=int(_req(tr, "secondary_bus", "transformer")),
        r_pu=float(tr.get("r_pu", 0.0)),
        x_pu=float(_req(tr, "x_pu", "transformer")),
        k_min=float(_req(tr, "k_min", "transformer")),
        k_max=float(_req(tr, "k_max", "transformer")),
        k_step=float(_req(tr, "k_step", "transformer")),
        tap_bits=int(_req(tr, "tap_bits", "transformer")),
        i_max_pu=tr.get("i_max_pu"),
    )
    lines = tuple(
        DistLine(
            int(_req(ln, "from", "distribution.line")),
            int(_req(ln, "to", "distribution.line")),
            float(_req(ln, "r_pu", "distribution.line")),
            float(_req(ln, "x_pu", "distribution.line")),
            None if ln.get("i_max_pu") is None else float(ln["i_max_pu"]),
        )
        for ln in sec.get("lines", [])
    )
    caps = []
    for cb in sec.get("capacitors", []):
        groups = int(_req(cb, "groups", "capacitor"))
        if "q_per_group_mvar" in cb:
            per = float(cb["q_per_group_mvar"])
        else:
            per = float(_req(cb, "q_total_mvar", "capacitor")) / groups
        caps.append(
            CapacitorBank(int(_req(cb, "bus", "capacitor")), groups, per, float(cb.get("q_min_mvar", 0.0)))
        )
    return DistributionSystem(
        buses=tuple(buses),
        root_bus=root,
        lines=lines,
        transformer=transformer,
        capacitors=tuple(caps),
        v_min_pu=float(sec.get("v_min_pu", 0.96)),
        v_max_pu=float(sec.get("v_max_pu", 1.04)),
    )


def _scenario_costs(spec, what: str) -> dict:
    if isinstance(spec, (int, float)):
        return {s: float(spec) for s in SCENARIOS}
    out = {}
    for s in SCENARIOS:
        if s not in spec:
            raise CaseError(f"{what}: missing scenario {s!r}")
        out[s] = float(spec[s])
    return out


def _parse_fleet(sec: dict, base_dir: str) -> DerFleet:
    cdgs = tuple(
        Cdg(
            bus=int(_req(c, "bus", "cdg")),
            p_max_mw=float(_req(c, "p_max_mw", "cdg")),
            r_up_max_mw=float(_req(c, "r_up_max_mw", "cdg")),
            r_dn_max_mw=float(_req(c, "r_dn_max_mw", "cdg")),
            cost_energy=float(_req(c, "cost_energy", "cdg")),
            cost_reactive=_scenario_costs(_req(c, "cost_reactive", "cdg"), "cdg.cost_reactive"),
            power_factor=float(_req(c, "power_factor", "cdg")),
            p_min_mw=float(c.get("p_min_mw", 0.0)),
            name=str(c.get("name", f"cdg{i}")),
        )
        for i, c in enumerate(sec.get("cdgs", []))
    )
    esss = tuple(
        Ess(
            bus=int(_req(e, "bus", "ess")),
            p_ch_max_mw=float(_req(e, "p_ch_max_mw", "ess")),
            p_dis_max_mw=float(_req(e, "p_dis_max_mw", "ess")),
            e_min_mwh=float(_req(e, "e_min_mwh", "ess")),
            e_max_mwh=float(_req(e, "e_max_mwh", "ess")),
            e_initial_mwh=float(_req(e, "e_initial_mwh", "ess")),
            eta_ch=float(_req(e, "eta_ch", "ess")),
            eta_dis=float(_req(e, "eta_dis", "ess")),
            cost_ch=float(_req(e, "cost_ch", "ess")),
            cost_dis=float(_req(e, "cost_dis", "ess")),
            name=str(e.get("name", f"ess{i}")),
        )
        for i, e in enumerate(sec.get("esss", []))
    )
    pvs = tuple(
        Pv(
            bus=int(_req(p, "bus", "pv")),
            p_installed_mw=float(_req(p, "p_installed_mw", "pv")),
            profile_mw=_read_profile(_req(p, "profile_mw", "pv"), base_dir, "pv"),
            power_factor=float(_req(p, "power_factor", "pv")),
            curtail_penalty=_scenario_costs(_req(p, "curtail_penalty", "pv"), "pv.curtail_penalty"),
            cost_reactive=_scenario_costs(_req(p, "cost_reactive", "pv"), "pv.cost_reactive"),
            name=str(p.get("name", f"pv{i}")),
        )
        for i, p in enumerate(sec.get("pvs", []))
    )
    return DerFleet(
        cdgs=cdgs,
        esss=esss,
        pvs=pvs,
        pv_error=float(sec.get("pv_error", 0.2)),
        inflexible_curtail_penalty=float(sec.get("inflexible_curtail_penalty", 100.0)),
    )


# -- validation ------------------------------------------------------------------


def _check_connected(nodes: set, edges: list, what: str):
    if not nodes:
        raise CaseError(f"{what}: no buses")
    adj = {n: [] for n in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = set()
    stack = [next(iter(nodes))]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(adj[n])
    missing = nodes - seen
    if missing:
        raise CaseError(f"{what}: graph not connected, unreachable buses {sorted(missing)}")


def validate_case(case: SystemCase):
    ts, ds, fleet = case.transmission, case.distribution, case.fleet
    tbuses = set(ts.buses)
    if len(ts.buses) != len(tbuses):
        raise CaseError("transmission: duplicate bus ids")
    for ln in ts.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in tbuses:
                raise CaseError(f"transmission line {ln.from_bus}-{ln.to_bus}: dangling bus reference {end}")
        if (ln.capacity_mw is not None and ln.capacity_mw < 0) or ln.reactance_pu <= 0:
            raise CaseError(f"transmission line {ln.from_bus}-{ln.to_bus}: capacity/reactance out of range")
    for g in ts.generators:
        if g.bus not in tbuses:
            raise CaseError(f"generator {g.name}: dangling bus reference {g.bus}")
        if min(g.p_max_mw, g.r_up_max_mw, g.r_dn_max_mw) < 0:
            raise CaseError(f"generator {g.name}: negative capacity")
        if min(g.offer_energy, g.offer_r_up, g.offer_r_dn) < 0:
            raise CaseError(f"generator {g.name}: negative offer price")
    for d in ts.demands:
        if d.bus not in tbuses:
            raise CaseError(f"demand at bus {d.bus}: dangling bus reference")
    if ts.boundary_bus not in tbuses:
        raise CaseError(f"boundary bus {ts.boundary_bus} not in transmission buses")
    if ts.slack_bus not in tbuses:
        raise CaseError(f"slack bus {ts.slack_bus} not in transmission buses")
    _check_connected(tbuses, [(l.from_bus, l.to_bus) for l in ts.lines], "transmission")

    dbuses = {b.id for b in ds.buses}
    if len(ds.buses) != len(dbuses):
        raise CaseError("distribution: duplicate bus ids")
    if ds.root_bus not in dbuses:
        raise CaseError(f"distribution root bus {ds.root_bus} not in bus list")
    for ln in ds.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in dbuses:
                raise CaseError(f"DS line {ln.from_bus}-{ln.to_bus}: dangling bus reference {end}")
        if ln.r_pu < 0 or ln.x_pu < 0 or (ln.r_pu == 0 and ln.x_pu == 0):
            raise CaseError(f"DS line {ln.from_bus}-{ln.to_bus}: invalid impedance")
    tr = ds.transformer
    if tr.secondary_bus not in dbuses:
        raise CaseError(f"transformer secondary bus {tr.secondary_bus}: dangling bus reference")
    if tr.k_min > tr.k_max:
        raise CaseError(f"transformer: k_min {tr.k_min} > k_max {tr.k_max}")
    if tr.k_step <= 0 or tr.tap_bits < 1:
        raise CaseError("transformer: k_step must be positive and tap_bits >= 1")
    reach = tr.k_min + tr.k_step * (2 ** tr.tap_bits - 1)
    if reach < tr.k_max - 1e-12:
        raise CaseError(
            f"transformer: bit encoding reaches only {reach:.6f} < k_max {tr.k_max} "
            f"(k_min + k_step*(2^bits - 1) must cover k_max)"
        )
    if not (ds.v_min_pu < 1.0 < ds.v_max_pu):
        raise CaseError(f"voltage limits [{ds.v_min_pu}, {ds.v_max_pu}] must bracket 1.0")
    for cb in ds.capacitors:
        if cb.bus not in dbuses:
            raise CaseError(f"capacitor at bus {cb.bus}: dangling bus reference")
        if cb.groups < 1 or cb.q_per_group_mvar < 0:
            raise CaseError(f"capacitor at bus {cb.bus}: invalid group data")
    edges = [(l.from_bus, l.to_bus) for l in ds.lines]
    edges.append((ds.root_bus, tr.secondary_bus))
    _check_connected(dbuses, edges, "distribution")

    if not 0.0 <= fleet.pv_error < 1.0:
        raise CaseError(f"fleet: pv_error {fleet.pv_error} outside [0, 1)")
    for c in fleet.cdgs:
        if c.bus not in dbuses:
            raise CaseError(f"CDG {c.name}: bus {c.bus} not in distribution system")
        if not 0.0 <= c.p_min_mw <= c.p_max_mw:
            raise CaseError(f"CDG {c.name}: p_min {c.p_min_mw} outside [0, p_max]")
        if not 0.0 < c.power_factor <= 1.0:
            raise CaseError(f"CDG {c.name}: power factor {c.power_factor} outside (0, 1]")
    for e in fleet.esss:
        if e.bus not in dbuses:
            raise CaseError(f"ESS {e.name}: bus {e.bus} not in distribution system")
        if not (0.0 < e.eta_ch <= 1.0 and 0.0 < e.eta_dis <= 1.0):
            raise CaseError(f"ESS {e.name}: efficiencies must lie in (0, 1]")
        if not e.e_min_mwh <= e.e_initial_mwh <= e.e_max_mwh:
            raise CaseError(
                f"ESS {e.name}: initial energy {e.e_initial_mwh} outside "
                f"[{e.e_min_mwh}, {e.e_max_mwh}]"
            )
    for p in fleet.pvs:
        if p.bus not in dbuses:
            raise CaseError(f"PV {p.name}: bus {p.bus} not in distribution system")
        for t, v in enumerate(p.profile_mw):
            if not 0.0 <= v <= p.p_installed_mw + 1e-9:
                raise CaseError(f"PV {p.name}: available power {v} at hour {t + 1} outside [0, installed]")
        if not 0.0 < p.power_factor <= 1.0:
            raise CaseError(f"PV {p.name}: power factor {p.power_factor} outside (0, 1]")


# -- serialization ----------------------------------------------------------------


def case_to_dict(case: SystemCase) -> dict:
    """Inline-profile dict form of a case (CSV references materialized)."""
    ts, ds, fleet = case.transmission, case.distribution, case.fleet
    return {
        "name": case.name,
        "mva_base": case.mva_base,
        "currency": case.currency,
        "market": {"price_cap": case.price_cap},
        "transmission": {
            "buses": list(ts.buses),
            "boundary_bus": ts.boundary_bus,
            "slack_bus": ts.slack_bus,
            "lines": [
                {"from": l.from_bus, "to": l.to_bus, "reactance_pu": l.reactance_pu, "capacity_mw": l.capacity_mw}
                for l in ts.lines
            ],
            "generators": [
                {
                    "bus": g.bus, "p_max_mw": g.p_max_mw, "r_up_max_mw": g.r_up_max_mw,
                    "r_dn_max_mw": g.r_dn_max_mw, "offer_energy": g.offer_energy,
                    "offer_r_up": g.offer_r_up, "offer_r_dn": g.offer_r_dn, "name": g.name,
                }
                for g in ts.generators
            ],
            "demands": [{"bus": d.bus, "profile_mw": list(d.profile_mw)} for d in ts.demands],
            "reserve_up_mw": list(ts.reserve_up_mw),
            "reserve_dn_mw": list(ts.reserve_dn_mw),
        },
        "distribution": {
            "root_bus": ds.root_bus,
            "v_min_pu": ds.v_min_pu,
            "v_max_pu": ds.v_max_pu,
            "buses": [
                {"id": b.id, "load_p_mw": list(b.load_p_mw), "load_q_mvar": list(b.load_q_mvar)}
                for b in ds.buses
            ],
            "lines": [
                {"from": l.from_bus, "to": l.to_bus, "r_pu": l.r_pu, "x_pu": l.x_pu, "i_max_pu": l.i_max_pu}
                for l in ds.lines
            ],
            "transformer": {
                "secondary_bus": ds.transformer.secondary_bus,
                "r_pu": ds.transformer.r_pu, "x_pu": ds.transformer.x_pu,
                "k_min": ds.transformer.k_min, "k_max": ds.transformer.k_max,
                "k_step": ds.transformer.k_step, "tap_bits": ds.transformer.tap_bits,
                "i_max_pu": ds.transformer.i_max_pu,
            },
            "capacitors": [
                {"bus": c.bus, "groups": c.groups, "q_per_group_mvar": c.q_per_group_mvar, "q_min_mvar": c.q_min_mvar}
                for c in ds.capacitors
            ],
        },
        "fleet": {
            "pv_error": fleet.pv_error,
            "inflexible_curtail_penalty": fleet.inflexible_curtail_penalty,
            "cdgs": [
                {
                    "bus": c.bus, "p_max_mw": c.p_max_mw, "p_min_mw": c.p_min_mw,
                    "r_up_max_mw": c.r_up_max_mw, "r_dn_max_mw": c.r_dn_max_mw,
                    "cost_energy": c.cost_energy, "cost_reactive": dict(c.cost_reactive),
                    "power_factor": c.power_factor, "name": c.name,
                }
                for c in fleet.cdgs
            ],
            "esss": [
                {
                    "bus": e.bus, "p_ch_max_mw": e.p_ch_max_mw, "p_dis_max_mw": e.p_dis_max_mw,
                    "e_min_mwh": e.e_min_mwh, "e_max_mwh": e.e_max_mwh, "e_initial_mwh": e.e_initial_mwh,
                    "eta_ch": e.eta_ch, "eta_dis": e.eta_dis, "cost_ch": e.cost_ch,
                    "cost_dis": e.cost_dis, "name": e.name,
                }
                for e in fleet.esss
            ],
            "pvs": [
                {
                    "bus": p.bus, "p_installed_mw": p.p_installed_mw, "profile_mw": list(p.profile_mw),
                    "power_factor": p.power_factor, "curtail_penalty": dict(p.curtail_penalty),
                    "cost_reactive": dict(p.cost_reactive), "name": p.name,
                }
                for p in fleet.pvs
            ],
        },
    }


def save_case(case: SystemCase, path: str):
    with open(path, "w") as fh:
        json.dump(case_to_dict(case), fh, indent=2, ensure_ascii=False)
        fh.write("\n")


# -- derived network objects -------------------------------------------------------


@dataclass(frozen=True)
class Ptdf:
    """Line flow sensitivities to nodal injections (withdrawn at the slack)."""

    matrix: np.ndarray  # (n_lines, n_buses)
    bus_order: tuple

    def factor(self, line_idx: int, bus: int) -> float:
        return float(self.matrix[line_idx, self.bus_order.index(bus)])

    def column(self, bus: int) -> np.ndarray:
        return self.matrix[:, self.bus_order.index(bus)]


def compute_ptdf(ts: TransmissionSystem) -> Ptdf:
    """DC power transfer distribution factors from line reactances.

    Row l, column i: MW on line l per MW injected at bus i and withdrawn at
    the slack bus. Factors are applied to balanced patterns, so the slack
    choice does not affect any flow computed from them.
    """
    buses = tuple(ts.buses)
    n = len(buses)
    idx = {b: i for i, b in enumerate(buses)}
    if not ts.lines:
        raise CaseError("transmission: PTDF requires at least one line")
    _check_connected(set(buses), [(l.from_bus, l.to_bus) for l in ts.lines], "transmission")

    b_mat = np.zeros((n, n))
    for ln in ts.lines:
        i, j = idx[ln.from_bus], idx[ln.to_bus]
        y = 1.0 / ln.reactance_pu
        b_mat[i, i] += y
        b_mat[j, j] += y
        b_mat[i, j] -= y
        b_mat[j, i] -= y
    s = idx[ts.slack_bus]
    keep = [i for i in range(n) if i != s]
    b_red = b_mat[np.ix_(keep, keep)]
    try:
        b_inv = np.linalg.inv(b_red)
    except np.linalg.LinAlgError as exc:
        raise CaseError("transmission: reduced susceptance matrix singular") from exc

    theta_full = np.zeros((n, n))
    theta_full[np.ix_(keep, keep)] = b_inv  # angle response per unit injection
    g = np.zeros((len(ts.lines), n))
    for li, ln in enumerate(ts.lines):
        i, j = idx[ln.from_bus], idx[ln.to_bus]
        g[li, :] = (theta_full[i, :] - theta_full[j, :]) / ln.reactance_pu
    return Ptdf(g, buses)


@dataclass(frozen=True)
class AdmittancePartition:
    """Feeder admittance split per the dummy-bus transformer model.

    ``y_dummy`` is the dummy bus self-admittance, ``y_coupling`` the dummy-to-
    interior vector, ``y_interior`` the interior block, all complex p.u. on
    the case base. ``bus_order`` lists the interior (non-root) bus ids.
    """

    y_dummy: complex
    y_coupling: np.ndarray
    y_interior: np.ndarray
    bus_order: tuple

    def index(self, bus: int) -> int:
        return self.bus_order.index(bus)


def build_admittance(ds: DistributionSystem) -> AdmittancePartition:
    """Assemble the partitioned bus admittance with the transformer split.

    The substation branch is divided into an ideal transformer and its series
    impedance behind a dummy bus; the dummy bus takes the first partition slot
    and all non-root buses form the interior block. With no shunt elements
    every row of the assembled matrix sums to zero.
    """
    interior = ds.interior_ids
    idx = {b: i for i, b in enumerate(interior)}
    n = len(interior)
    if n == 0:
        raise CaseError("distribution: no interior buses")
    edges = [(l.from_bus, l.to_bus) for l in ds.lines]
    edges.append((ds.root_bus, ds.transformer.secondary_bus))
    _check_connected({b.id for b in ds.buses}, edges, "distribution")

    y_int = np.zeros((n, n), dtype=complex)
    y_coup = np.zeros(n, dtype=complex)
    yt = ds.transformer.admittance
    y_dummy = yt
    y_coup[idx[ds.transformer.secondary_bus]] = -yt
    y_int[idx[ds.transformer.secondary_bus], idx[ds.transformer.secondary_bus]] += yt
    for ln in ds.lines:
        if ln.from_bus == ds.root_bus or ln.to_bus == ds.root_bus:
            raise CaseError(
                f"DS line {ln.from_bus}-{ln.to_bus}: feeder lines may not touch the root bus; "
                "the substation transformer is the only root connection"
            )
        y = ln.admittance
        i, j = idx[ln.from_bus], idx[ln.to_bus]
        y_int[i, i] += y
        y_int[j, j] += y
        y_int[i, j] -= y
        y_int[j, i] -= y
    return AdmittancePartition(y_dummy, y_coup, y_int, interior)
