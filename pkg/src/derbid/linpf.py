"""Tap-aware linearized distribution power flow and its MILP encoding.

The feeder model: the substation transformer is split into an ideal
transformer (ratio k, discrete) and its series impedance behind a dummy bus
whose voltage is exactly k times the root voltage (fixed at 1 p.u.). Around
the zero-injection nominal point the interior bus voltages satisfy

    k * V_i = k^2 + sum_j (R_ij P_j + X_ij Q_j)
    k * th_i =       sum_j (X_ij P_j - R_ij Q_j)

with Z = Y^-1 = R + jX the impedance of the interior admittance block. The
tap ratio is bit-encoded, and the bilinear k*V, k*th and quadratic k^2 terms
are linearized exactly over the tap bits with big-M product constraints.

A Newton-Raphson solver of the exact bus-injection equations is included as
the accuracy benchmark, and octagonal cuts outer-approximate the quadratic
line-current limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import AdmittancePartition, DistributionSystem, Transformer, build_admittance
from .milp import EQ, GE, LE, LinExpr, Model, ModelError, VarRef, lin_sum

SQRT2 = math.sqrt(2.0)


class PowerFlowError(Exception):
    """Singular network or non-convergent reference solve."""


@dataclass(frozen=True)
class ImpedanceModel:
    """Real/imaginary split of the interior impedance matrix Z = Y^-1."""

    r: np.ndarray
    x: np.ndarray
    bus_order: tuple

    @property
    def n(self) -> int:
        return len(self.bus_order)

    def index(self, bus: int) -> int:
        return self.bus_order.index(bus)


def reduce_and_invert(adm: AdmittancePartition) -> ImpedanceModel:
    """Invert the interior admittance block and split into R + jX."""
    try:
        z = np.linalg.inv(adm.y_interior)
    except np.linalg.LinAlgError as exc:
        raise PowerFlowError("interior admittance block is singular (isolated bus?)") from exc
    resid = np.max(np.abs(adm.y_interior @ z - np.eye(len(adm.bus_order))))
    if resid > 1e-9:
        raise PowerFlowError(f"impedance inverse residual {resid:.2e} exceeds 1e-9")
    return ImpedanceModel(z.real.copy(), z.imag.copy(), adm.bus_order)


def eval_linear_pf(imp: ImpedanceModel, p_inj, q_inj, k: float):
    """Closed-form voltages/angles of the linear model at a fixed tap ratio.

    ``p_inj``/``q_inj`` are net injections per interior bus in p.u., ordered
    like ``imp.bus_order``. Solves the model equations for V and theta:
    V = k + (R p + X q) / k and theta = (X p - R q) / k.
    """
    p = np.asarray(p_inj, dtype=float)
    q = np.asarray(q_inj, dtype=float)
    v = k + (imp.r @ p + imp.x @ q) / k
    th = (imp.x @ p - imp.r @ q) / k
    return v, th


# -- Newton reference ------------------------------------------------------------


def solve_ac_reference(ds_or_adm, p_inj, q_inj, k: float, tol: float = 1e-10, max_iter: int = 50):
    """Exact power flow with the dummy bus held at k per unit, angle zero.

    Newton-Raphson on the polar bus-injection mismatches of the interior
    buses. Returns (V, theta) ordered like the admittance partition.
    """
    adm = ds_or_adm if isinstance(ds_or_adm, AdmittancePartition) else build_admittance(ds_or_adm)
    n = len(adm.bus_order)
    p = np.asarray(p_inj, dtype=float)
    q = np.asarray(q_inj, dtype=float)

    # Full system: slot 0 is the dummy bus, slots 1..n the interior buses.
    y = np.zeros((n + 1, n + 1), dtype=complex)
    y[0, 0] = adm.y_dummy
    y[0, 1:] = adm.y_coupling
    y[1:, 0] = adm.y_coupling
    y[1:, 1:] = adm.y_interior
    g, b = y.real, y.imag

    v = np.full(n + 1, float(k))
    th = np.zeros(n + 1)

    def injections():
        pc = np.zeros(n + 1)
        qc = np.zeros(n + 1)
        for i in range(n + 1):
            dth = th[i] - th
            cs, sn = np.cos(dth), np.sin(dth)
            pc[i] = v[i] * np.sum(v * (g[i] * cs + b[i] * sn))
            qc[i] = v[i] * np.sum(v * (g[i] * sn - b[i] * cs))
        return pc, qc

    mismatch = math.inf
    for _ in range(max_iter):
        pc, qc = injections()
        dp = p - pc[1:]
        dq = q - qc[1:]
        mismatch = max(np.max(np.abs(dp)), np.max(np.abs(dq)))
        if mismatch < tol:
            return v[1:].copy(), th[1:].copy()

        jac = np.zeros((2 * n, 2 * n))
        for a in range(1, n + 1):
            for c in range(1, n + 1):
                dth = th[a] - th[c]
                cs, sn = math.cos(dth), math.sin(dth)
                ia, ic = a - 1, c - 1
                if a == c:
                    jac[ia, ic] = -qc[a] - b[a, a] * v[a] ** 2
                    jac[ia, n + ic] = pc[a] / v[a] + g[a, a] * v[a]
                    jac[n + ia, ic] = pc[a] - g[a, a] * v[a] ** 2
                    jac[n + ia, n + ic] = qc[a] / v[a] - b[a, a] * v[a]
                else:
                    jac[ia, ic] = v[a] * v[c] * (g[a, c] * sn - b[a, c] * cs)
                    jac[ia, n + ic] = v[a] * (g[a, c] * cs + b[a, c] * sn)
                    jac[n + ia, ic] = -v[a] * v[c] * (g[a, c] * cs + b[a, c] * sn)
                    jac[n + ia, n + ic] = v[a] * (g[a, c] * sn - b[a, c] * cs)
        try:
            step = np.linalg.solve(jac, np.concatenate([dp, dq]))
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("Newton Jacobian singular") from exc
        th[1:] += step[:n]
        v[1:] += step[n:]
        if np.any(v[1:] <= 0):
            raise PowerFlowError("Newton iterate produced non-positive voltage")
    raise PowerFlowError(
        f"Newton power flow did not converge in {max_iter} iterations "
        f"(final mismatch {mismatch:.3e} p.u.)"
    )


# -- MILP building blocks ----------------------------------------------------------


@dataclass
class TapEncoding:
    """Bit-encoded tap ratio with an exact linear expansion of k and k^2."""

    bits: list
    k_expr: LinExpr
    ksq_expr: LinExpr
    k_min: float
    k_step: float
    cap_row: int


def emit_tap_encoding(model: Model, tr: Transformer, tag: str = "tap") -> TapEncoding:
    """Add tap bits w_n with k = k_min + step * sum 2^n w_n, capped at k_max.

    k^2 expands exactly over the same bits: squares of binaries collapse to
    the binaries themselves and cross terms become standard binary products.
    """
    bits = [model.add_binary(f"{tag}_w{n}") for n in range(tr.tap_bits)]
    weights = [2.0 ** n for n in range(tr.tap_bits)]
    s_expr = lin_sum(w * v for w, v in zip(weights, bits))
    k_expr = LinExpr.of(s_expr) * tr.k_step + tr.k_min
    cap_row = model.add_constr(k_expr, LE, tr.k_max, name=f"{tag}_cap")

    sq_terms = [LinExpr.of(0.0)]
    for n, w in enumerate(bits):
        sq_terms.append(LinExpr.of(w) * weights[n] ** 2)
    for n in range(len(bits)):
        for m in range(n + 1, len(bits)):
            y = model.add_var(0.0, 1.0, name=f"{tag}_w{n}w{m}")
            model.add_constr(LinExpr.of(y) - bits[n], LE, 0.0, name=f"{tag}_p{n}{m}a")
            model.add_constr(LinExpr.of(y) - bits[m], LE, 0.0, name=f"{tag}_p{n}{m}b")
            model.add_constr(bits[n] + bits[m] - y, LE, 1.0, name=f"{tag}_p{n}{m}c")
            sq_terms.append(LinExpr.of(y) * (2.0 * weights[n] * weights[m]))
    s_sq = lin_sum(sq_terms)
    ksq_expr = (
        LinExpr.of(s_sq) * tr.k_step ** 2
        + LinExpr.of(s_expr) * (2.0 * tr.k_min * tr.k_step)
        + tr.k_min ** 2
    )
    return TapEncoding(bits, k_expr, ksq_expr, tr.k_min, tr.k_step, cap_row)


@dataclass
class LinearPFBlock:
    """Handles of one emitted linear power-flow block."""

    v: dict
    theta: dict
    tap: TapEncoding | float
    pf_v_rows: list
    pf_t_rows: list
    aux_v: dict
    aux_t: dict
    m_theta: float


def _emit_product(model, w, var, m_bound, tag):
    """Auxiliary u = w * var for binary w, exact via big-M rows."""
    u = model.add_var(-m_bound, m_bound, name=tag)
    one_minus = LinExpr({}, 1.0) - w
    model.add_constr(LinExpr.of(var) - u, LE, one_minus * m_bound, name=f"{tag}_a")
    model.add_constr(LinExpr.of(var) - u, GE, one_minus * (-m_bound), name=f"{tag}_b")
    model.add_constr(LinExpr.of(u) - w * m_bound, LE, 0.0, name=f"{tag}_c")
    model.add_constr(LinExpr.of(u) + w * m_bound, GE, 0.0, name=f"{tag}_d")
    return u


def emit_pf_constraints(
    model: Model,
    imp: ImpedanceModel,
    tap,
    p_inj: dict,
    q_inj: dict,
    v_vars: dict,
    theta_vars: dict,
    m_theta: float = 0.5,
    v_max: float = 1.1,
    tag: str = "pf",
) -> LinearPFBlock:
    """Emit the linearized power-flow equalities for one (hour, scenario).

    ``tap`` is either a TapEncoding (discrete tap, bilinear terms linearized
    over its bits) or a plain float (fixed ratio, purely linear rows).
    ``p_inj``/``q_inj`` map interior bus id -> LinExpr/float net injection in
    p.u.; ``v_vars``/``theta_vars`` map bus id -> VarRef. Buses missing from
    ``theta_vars`` get no angle row (callers drop angles that nothing
    references).
    """
    if isinstance(tap, TapEncoding):
        if m_theta <= 0:
            raise ModelError("theta big-M must be positive")
        for bus in imp.bus_order:
            lo, hi = model.expr_bounds(v_vars[bus])
            if hi > v_max + 1e-9:
                raise ModelError(
                    f"big-M {v_max} smaller than voltage range of bus {bus} (ub {hi})"
                )
            if bus in theta_vars:
                lo_t, hi_t = model.expr_bounds(theta_vars[bus])
                if max(abs(lo_t), abs(hi_t)) > m_theta + 1e-9:
                    raise ModelError(
                        f"big-M {m_theta} smaller than angle range of bus {bus}"
                    )

    aux_v, aux_t = {}, {}
    pf_v_rows, pf_t_rows = [], []
    for ii, bus in enumerate(imp.bus_order):
        rp = lin_sum(
            LinExpr.of(p_inj[jb]) * imp.r[ii, jj] + LinExpr.of(q_inj[jb]) * imp.x[ii, jj]
            for jj, jb in enumerate(imp.bus_order)
        )
        with_theta = bus in theta_vars
        xp = None
        if with_theta:
            xp = lin_sum(
                LinExpr.of(p_inj[jb]) * imp.x[ii, jj] - LinExpr.of(q_inj[jb]) * imp.r[ii, jj]
                for jj, jb in enumerate(imp.bus_order)
            )
        if isinstance(tap, TapEncoding):
            kv_terms = [LinExpr.of(v_vars[bus]) * tap.k_min]
            kt_terms = [LinExpr.of(theta_vars[bus]) * tap.k_min] if with_theta else []
            for n, w in enumerate(tap.bits):
                uv = _emit_product(model, w, v_vars[bus], v_max, f"{tag}_uv{n}_{bus}")
                aux_v[(n, bus)] = uv
                kv_terms.append(LinExpr.of(uv) * (tap.k_step * 2.0 ** n))
                if with_theta:
                    ut = _emit_product(model, w, theta_vars[bus], m_theta, f"{tag}_ut{n}_{bus}")
                    aux_t[(n, bus)] = ut
                    kt_terms.append(LinExpr.of(ut) * (tap.k_step * 2.0 ** n))
            pf_v_rows.append(
                model.add_constr(lin_sum(kv_terms) - tap.ksq_expr - rp, EQ, 0.0, name=f"{tag}_v_{bus}")
            )
            if with_theta:
                pf_t_rows.append(
                    model.add_constr(lin_sum(kt_terms) - xp, EQ, 0.0, name=f"{tag}_t_{bus}")
                )
        else:
            k = float(tap)
            pf_v_rows.append(
                model.add_constr(LinExpr.of(v_vars[bus]) * k - rp, EQ, k * k, name=f"{tag}_v_{bus}")
            )
            if with_theta:
                pf_t_rows.append(
                    model.add_constr(LinExpr.of(theta_vars[bus]) * k - xp, EQ, 0.0, name=f"{tag}_t_{bus}")
                )
    return LinearPFBlock(dict(v_vars), dict(theta_vars), tap, pf_v_rows, pf_t_rows, aux_v, aux_t, m_theta)


def audit_pf_block(outcome, block: LinearPFBlock, tol: float = 1e-6) -> list:
    """Flag auxiliary product variables parked at their big-M bound.

    A healthy encoding keeps every w*theta auxiliary strictly inside ±M;
    an angle pinned at the bound means the configured angle range is too
    small and the block is distorting the solution.
    """
    issues = []
    for (n, bus), ut in block.aux_t.items():
        if abs(outcome.value(ut)) >= block.m_theta - tol:
            issues.append(f"angle product w{n}*theta[{bus}] at big-M bound {block.m_theta}")
        th = outcome.value(block.theta[bus])
        if abs(th) >= block.m_theta - tol:
            issues.append(f"theta[{bus}] at big-M bound {block.m_theta}")
    return issues


# -- line currents ------------------------------------------------------------------


def current_expressions(ds: DistributionSystem, v_of, theta_of):
    """Linearized real/imaginary current of every feeder branch.

    ``v_of``/``theta_of`` map bus id -> LinExpr (the root maps to the tap
    expression and angle zero). Returns a list of
    (branch label, i_max or None, I_re expr, I_im expr).
    """
    out = []
    branches = [("xfmr", ds.transformer.i_max_pu, ds.root_bus, ds.transformer.secondary_bus,
                 ds.transformer.admittance)]
    for ln in ds.lines:
        branches.append((f"{ln.from_bus}-{ln.to_bus}", ln.i_max_pu, ln.from_bus, ln.to_bus, ln.admittance))
    for label, imax, fb, tb, y in branches:
        g, b = y.real, y.imag
        dv = LinExpr.of(v_of(fb)) - v_of(tb)
        dt = LinExpr.of(theta_of(fb)) - theta_of(tb)
        i_re = dv * g - dt * b
        i_im = dv * b + dt * g
        out.append((label, imax, i_re, i_im))
    return out


def emit_octagon(model: Model, i_re, i_im, i_max: float, tag: str, tau=None) -> list:
    """Eight linear cuts bounding (I_re, I_im) inside the octagon of radius I_max.

    With ``tau`` (a non-negative VarRef) every cut is relaxed by tau, which
    turns the block into a soft constraint for penalty formulations.
    """
    relax = LinExpr.of(tau) if tau is not None else LinExpr.of(0.0)
    rows = []
    cuts = [
        (LinExpr.of(i_re), i_max),
        (LinExpr.of(i_im), i_max),
        (LinExpr.of(i_re) + i_im, SQRT2 * i_max),
        (LinExpr.of(i_re) - i_im, SQRT2 * i_max),
    ]
    for j, (expr, bound) in enumerate(cuts):
        rows.append(model.add_constr(expr - relax, LE, bound, name=f"{tag}_o{j}p"))
        rows.append(model.add_constr(expr + relax, GE, -bound, name=f"{tag}_o{j}n"))
    return rows


def octagon_contains(i_re: float, i_im: float, i_max: float) -> bool:
    """Membership test mirroring the emitted cuts (used by property tests)."""
    return (
        abs(i_re) <= i_max + 1e-12
        and abs(i_im) <= i_max + 1e-12
        and abs(i_re + i_im) <= SQRT2 * i_max + 1e-12
        and abs(i_re - i_im) <= SQRT2 * i_max + 1e-12
    )
