"""AC (Newton-Raphson, polar) and DC power flow, section flows, node features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.csgraph import connected_components

from .errors import InvalidCase, NonConvergence, NotConverged, SingularJacobian, SingularSystem
from .grid import PQ, PV, REF

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    vm: np.ndarray  # p.u.
    va: np.ndarray  # rad
    p_inj: np.ndarray  # MW, net injection per bus
    q_inj: np.ndarray  # MVAr
    branch_p: np.ndarray  # MW, measured at the from end
    branch_q: np.ndarray
    branch_p_to: np.ndarray  # MW, measured at the to end
    branch_q_to: np.ndarray
    pg: np.ndarray  # MW per generator after the slack picks up the imbalance
    qg: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float  # p.u.

    @property
    def n(self):
        return len(self.vm)

    @property
    def m(self):
        return len(self.branch_p)


@dataclass(frozen=True)
class SectionFlow:
    p: float  # MW
    q: float  # MVAr
    within_p_bounds: bool
    within_q_bounds: bool = True


# -- network matrices -------------------------------------------------------------


def _check_impedances(case):
    live = case.br_status != 0
    z0 = live & (case.r == 0) & (case.x == 0)
    if np.any(z0):
        k = int(np.flatnonzero(z0)[0])
        raise InvalidCase(
            f"branch {case.f_bus[k]}-{case.t_bus[k]} has zero impedance (r = x = 0); "
            "merge the buses before solving")


def branch_admittances(case):
    """Return ``(Yff, Yft, Ytf, Ytt)`` for every branch (zeros when out of service)."""
    _check_impedances(case)
    live = case.br_status != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ys = np.where(live, 1.0 / (case.r + 1j * case.x), 0.0)
    bc = np.where(live, case.b, 0.0)
    tap = np.where(case.tap == 0, 1.0, case.tap) * np.exp(1j * np.deg2rad(case.shift))
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def make_ybus(case):
    """Dense bus admittance matrix plus from/to branch admittance rows."""
    n, m = case.n_bus, case.n_branch
    yff, yft, ytf, ytt = branch_admittances(case)
    f, t = case.f_idx, case.t_idx
    ybus = np.zeros((n, n), dtype=complex)
    np.add.at(ybus, (f, f), yff)
    np.add.at(ybus, (f, t), yft)
    np.add.at(ybus, (t, f), ytf)
    np.add.at(ybus, (t, t), ytt)
    ybus[np.diag_indices(n)] += (case.gs + 1j * case.bs) / case.base_mva
    rows = np.arange(m)
    yf = np.zeros((m, n), dtype=complex)
    yt = np.zeros((m, n), dtype=complex)
    np.add.at(yf, (rows, f), yff)
    np.add.at(yf, (rows, t), yft)
    np.add.at(yt, (rows, f), ytf)
    np.add.at(yt, (rows, t), ytt)
    return ybus, yf, yt


def bus_injection_schedule(case):
    """Scheduled complex injections in p.u. (generation minus load)."""
    on = case.gen_status != 0
    sg = np.zeros(case.n_bus, dtype=complex)
    np.add.at(sg, case.gen_idx[on], case.pg[on] + 1j * case.qg[on])
    return (sg - (case.pd + 1j * case.qd)) / case.base_mva


def bus_types(case):
    """Effective bus types: PV buses without an in-service generator act as PQ."""
    types = case.bus_type.copy()
    has_gen = np.zeros(case.n_bus, dtype=bool)
    has_gen[case.gen_idx[case.gen_status != 0]] = True
    types[(types == PV) & ~has_gen] = PQ
    return types


def initial_voltage(case):
    """Stored voltage profile, with generator set-points on PV and slack buses."""
    vm = case.vm.copy()
    on = case.gen_status != 0
    vm[case.gen_idx[on]] = case.vg[on]
    if np.any(vm <= 0):
        vm = np.where(vm <= 0, 1.0, vm)
    return vm * np.exp(1j * np.deg2rad(case.va))


def _jacobian(ybus, v, pvpq, pq):
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    diag_v = v[:, None]
    ds_dvm = diag_v * np.conj(ybus * vnorm[None, :])
    ds_dvm[np.diag_indices_from(ds_dvm)] += np.conj(ibus) * vnorm
    ds_dva = 1j * diag_v * np.conj(np.diag(ibus) - ybus * v[None, :])
    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def solve_ac(case, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, *, v0=None, network=None):
    """Full Newton-Raphson AC power flow in polar coordinates.

    Starts from the stored voltage profile (or ``v0``, a complex voltage
    vector, when warm-starting). ``network`` may carry a precomputed
    ``make_ybus(case)`` result; the caller is responsible for it matching
    ``case``. Raises :class:`NonConvergence` when the mismatch does not drop to
    ``tol`` within ``max_iter`` iterations.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    ybus, yf, yt = network if network is not None else make_ybus(case)
    types = bus_types(case)
    ref = np.flatnonzero(types == REF)
    pv = np.flatnonzero(types == PV)
    pq = np.flatnonzero(types == PQ)
    pvpq = np.concatenate([pv, pq])
    sbus = bus_injection_schedule(case)

    v = initial_voltage(case) if v0 is None else np.array(v0, dtype=complex)
    if v0 is not None:
        # set-points still come from the case
        v_set = initial_voltage(case)
        fixed = np.concatenate([ref, pv])
        v[fixed] = np.abs(v_set[fixed]) * np.exp(1j * np.angle(v[fixed]))
        v[ref] = v_set[ref]
    npvpq = len(pvpq)

    def mismatch(v):
        mis = v * np.conj(ybus @ v) - sbus
        return np.concatenate([mis[pvpq].real, mis[pq].imag])

    f = mismatch(v)
    err = np.max(np.abs(f)) if len(f) else 0.0
    it = 0
    while err > tol and it < max_iter:
        it += 1
        jac = _jacobian(ybus, v, pvpq, pq)
        try:
            with np.errstate(all="raise"):
                lu = sla.lu_factor(jac, check_finite=True)
                if np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1.0, np.abs(jac).max())):
                    raise np.linalg.LinAlgError
            dx = -sla.lu_solve(lu, f)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError, sla.LinAlgWarning):
            raise SingularJacobian(f"Jacobian is singular at iteration {it}") from None
        va = np.angle(v)
        vm = np.abs(v)
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        err = np.max(np.abs(f))
        if not np.isfinite(err) or err > 1e10:
            raise NonConvergence(f"power flow diverged at iteration {it}", it, float(err))
    if err > tol:
        raise NonConvergence(
            f"no convergence after {it} iterations (max mismatch {err:.3e} p.u.)", it, float(err))
    return _finish(case, v, ybus, yf, yt, ref, pv, it, float(err))


def _finish(case, v, ybus, yf, yt, ref, pv, iterations, err):
    base = case.base_mva
    s_inj = v * np.conj(ybus @ v) * base
    sf = v[case.f_idx] * np.conj(yf @ v) * base
    st = v[case.t_idx] * np.conj(yt @ v) * base
    pg, qg = generator_dispatch(case, s_inj.real, s_inj.imag, ref, pv)
    return PowerFlowSolution(
        vm=np.abs(v), va=np.angle(v), p_inj=s_inj.real, q_inj=s_inj.imag,
        branch_p=sf.real, branch_q=sf.imag, branch_p_to=st.real, branch_q_to=st.imag,
        pg=pg, qg=qg, converged=True, iterations=iterations, max_mismatch=err)


def generator_dispatch(case, p_inj, q_inj, ref, pv):
    """Generator outputs implied by solved injections.

    The first in-service generator on the slack bus takes whatever active
    power balances the bus; reactive output on slack and PV buses is split
    evenly among the bus's in-service units.
    """
    pg = np.where(case.gen_status != 0, case.pg, 0.0).astype(float)
    qg = np.where(case.gen_status != 0, case.qg, 0.0).astype(float)
    on = np.flatnonzero(case.gen_status != 0)
    for r in ref:
        units = on[case.gen_idx[on] == r]
        if len(units):
            others = pg[units[1:]].sum()
            pg[units[0]] = p_inj[r] + case.pd[r] - others
    for bus in np.concatenate([ref, pv]):
        units = on[case.gen_idx[on] == bus]
        if len(units):
            qg[units] = (q_inj[bus] + case.qd[bus]) / len(units)
    return pg, qg


def residual(case, sol, network=None):
    """Max absolute bus power mismatch (p.u.) of a solution, recomputed from scratch."""
    ybus = (network or make_ybus(case))[0]
    v = sol.vm * np.exp(1j * sol.va)
    types = bus_types(case)
    pvpq = np.flatnonzero(types != REF)
    pq = np.flatnonzero(types == PQ)
    mis = v * np.conj(ybus @ v) - bus_injection_schedule(case)
    return float(max(np.max(np.abs(mis[pvpq].real), initial=0.0), np.max(np.abs(mis[pq].imag), initial=0.0)))


# -- DC power flow -------------------------------------------------------------


def solve_dc(case):
    """Linearized (DC) power flow: ``B theta = P`` with the slack angle fixed."""
    live = case.br_status != 0
    if np.any(live & (case.x <= 0)):
        raise InvalidCase("DC power flow needs strictly positive reactance on every in-service branch")
    n = case.n_bus
    f, t = case.f_idx, case.t_idx
    tap = np.where(case.tap == 0, 1.0, case.tap)
    bser = np.where(live, 1.0 / np.where(live, case.x * tap, 1.0), 0.0)
    shift = np.deg2rad(case.shift)

    adj = np.zeros((n, n))
    adj[f[live], t[live]] = 1
    adj[t[live], f[live]] = 1
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp > 1:
        raise SingularSystem(f"network splits into {ncomp} islands")

    bbus = np.zeros((n, n))
    np.add.at(bbus, (f, f), bser)
    np.add.at(bbus, (t, t), bser)
    np.add.at(bbus, (f, t), -bser)
    np.add.at(bbus, (t, f), -bser)
    pf_shift = -bser * shift
    p_shift = np.zeros(n)
    np.add.at(p_shift, f, pf_shift)
    np.add.at(p_shift, t, -pf_shift)

    on = case.gen_status != 0
    pbus = np.zeros(n)
    np.add.at(pbus, case.gen_idx[on], case.pg[on])
    pbus = (pbus - case.pd - case.gs) / case.base_mva

    ref = case.slack
    keep = np.flatnonzero(np.arange(n) != ref)
    theta = np.full(n, np.deg2rad(case.va[ref]))
    rhs = pbus[keep] - p_shift[keep] - bbus[np.ix_(keep, [ref])].ravel() * theta[ref]
    try:
        theta[keep] = np.linalg.solve(bbus[np.ix_(keep, keep)], rhs)
    except np.linalg.LinAlgError:
        raise SingularSystem("reduced susceptance matrix is singular") from None

    base = case.base_mva
    branch_p = bser * (theta[f] - theta[t]) * base + pf_shift * base
    p_inj = (bbus @ theta + p_shift) * base
    p_inj_gen = p_inj + case.pd + case.gs
    pg = np.where(on, case.pg, 0.0).astype(float)
    units = np.flatnonzero(on & (case.gen_idx == ref))
    if len(units):
        pg[units[0]] = p_inj_gen[ref] - pg[units[1:]].sum()
    zeros_m = np.zeros(case.n_branch)
    return PowerFlowSolution(
        vm=np.ones(n), va=theta, p_inj=p_inj, q_inj=np.zeros(n),
        branch_p=branch_p, branch_q=zeros_m, branch_p_to=-branch_p, branch_q_to=zeros_m.copy(),
        pg=pg, qg=np.zeros(case.n_gen), converged=True, iterations=0, max_mismatch=0.0)


# -- derived quantities -------------------------------------------------------------


def section_flow(sol, section, strict_q=False):
    """Aggregate from-side flows over a section's branches, oriented as declared."""
    if not sol.converged:
        raise NotConverged("section flow needs a converged power-flow solution")
    idx = np.asarray(section.branches)
    sign = np.asarray(section.signs, dtype=float)
    p = float(np.sum(sign * sol.branch_p[idx]))
    q = float(np.sum(sign * sol.branch_q[idx]))
    within_q = True
    if strict_q:
        if section.q_min is not None and q < section.q_min:
            within_q = False
        if section.q_max is not None and q > section.q_max:
            within_q = False
    return SectionFlow(p, q, section.contains_p(p), within_q)


def generation_cost(case, pg):
    """Quadratic generation cost summed over in-service units ($/h)."""
    on = case.gen_status != 0
    pg = np.asarray(pg, dtype=float)
    return float(np.sum(np.where(on, case.cost_a * pg ** 2 + case.cost_b * pg + case.cost_c, 0.0)))


def raw_state(sol):
    """Unscaled node features ``(P MW, Q MVAr, Vm p.u., Va rad)``, shape ``(n, 4)``."""
    if not sol.converged:
        raise NotConverged("state features need a converged solution")
    return np.column_stack([sol.p_inj, sol.q_inj, sol.vm, sol.va])


def raw_branch_state(sol, case):
    """Per-branch ``(P, Q, from-bus Vm, from-bus Va)``, shape ``(m, 4)``."""
    f = case.f_idx
    return np.column_stack([sol.branch_p, sol.branch_q, sol.vm[f], sol.va[f]])


def _zscore(x, mean, std):
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (x - mean) / safe, 0.0)


@dataclass(frozen=True)
class FeatureScaler:
    """Per-column z-score statistics frozen from a set of training snapshots.

    Columns with zero variance map to 0.
    """

    bus_mean: np.ndarray
    bus_std: np.ndarray
    branch_mean: np.ndarray
    branch_std: np.ndarray

    @classmethod
    def fit(cls, bus_rows, branch_rows):
        bus = np.concatenate([np.asarray(b) for b in bus_rows])
        br = np.concatenate([np.asarray(b) for b in branch_rows])
        return cls(bus.mean(0), _std(bus), br.mean(0), _std(br))

    @classmethod
    def identity(cls):
        return cls(np.zeros(4), np.ones(4), np.zeros(4), np.ones(4))

    def bus(self, raw):
        return _zscore(raw, self.bus_mean, self.bus_std)

    def branch(self, raw):
        return _zscore(raw, self.branch_mean, self.branch_std)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("bus_mean", "bus_std", "branch_mean", "branch_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in ("bus_mean", "bus_std", "branch_mean", "branch_std")))


def _std(x):
    s = x.std(0)
    # treat round-off level spread as constant
    scale = np.maximum(np.abs(x).max(0), 1.0)
    return np.where(s > 1e-12 * scale, s, 0.0)


def state_features(sol, case, scaler=None):
    """Standardized ``(n, 4)`` node feature matrix.

    With a fitted ``scaler`` the frozen training statistics are used; without
    one each column is standardized against this snapshot alone.
    """
    raw = raw_state(sol)
    if len(raw) != case.n_bus:
        raise ValueError("solution and case disagree on bus count")
    if scaler is None:
        return _zscore(raw, raw.mean(0), _std(raw))
    return scaler.bus(raw)
