"""Strict-feasibility safeguards and energy-nonexpansive projections.

Three layers, used in escalation order by the trajectory loop:

1. `gs_project_once` - one Gauss-Seidel sweep that repairs violated pair
   slacks exactly by symmetric radial moves (cheap, best-effort).
2. `e_project_x` - minimize a quadratic majorizer of the Lyapunov energy over
   the linearized feasible set in positions only.
3. `e_project_joint` - the same with a basis update block, optionally with a
   volume-descent term for cell shrinking.

The QP behind 2 and 3 is a small dense active-set solve with deterministic
tie-breaking, sized for desk-scale problems (N <= 256).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .barrier import BarrierParams, barrier_energy, barrier_value
from .errors import FeasibilityError, LinearizedInfeasibleError, SingularBasisError
from .geometry import (
    ContactIndex,
    Contacts,
    LatticeBasis,
    PackingState,
    ShiftIndexSet,
    contacts_within,
    gauge_project,
    r_vectors,
    slack_values,
    volume_gradient,
)

logger = logging.getLogger("spit")

_SLACK_GUARD = 1e-6  # accepted states keep min_slack >= delta * (1 - _SLACK_GUARD)


@dataclass(frozen=True)
class LinearizedConstraint:
    """First-order model of one slack constraint: s0 + <a_x, y-x> + <a_B, H> >= rhs."""

    contact: ContactIndex
    s0: float
    a_x: np.ndarray
    a_B: np.ndarray | None
    rhs: float


def linearize_constraints(state: PackingState, contacts: Contacts, delta: float,
                          with_basis: bool = False) -> list[LinearizedConstraint]:
    """Explicit constraint objects for inspection and tests."""
    out = []
    r = r_vectors(state, contacts)
    s = np.einsum("mk,mk->m", r, r) - 4.0
    for k in range(len(contacts)):
        c = contacts.index(k)
        a_x = np.zeros_like(state.x)
        a_x[c.i] += 2.0 * r[k]
        a_x[c.j] -= 2.0 * r[k]
        a_B = -2.0 * np.outer(r[k], np.asarray(c.z, dtype=float)) if with_basis else None
        out.append(LinearizedConstraint(contact=c, s0=float(s[k]), a_x=a_x, a_B=a_B, rhs=delta))
    return out


def gs_project_once(state: PackingState, shifts: ShiftIndexSet, delta: float,
                    radius: float | None = None,
                    base: Contacts | None = None) -> tuple[PackingState, bool]:
    """One Gauss-Seidel sweep repairing violated pair slacks in canonical order.

    Each violated pair is moved symmetrically along its contact normal so the
    exact post-move slack equals delta (the constraint is radial, so the
    minimal exact repair is available in closed form).  Self-image contacts
    are skipped: they depend on the basis only.  Best-effort: later repairs
    may re-violate earlier pairs.
    """
    radius = shifts.R if radius is None else radius
    near = contacts_within(state, shifts, radius, base=base)
    if len(near) == 0:
        return state, False
    s = slack_values(state, near)
    margin = 0.25  # re-check anything close enough that an earlier repair could push it under
    worklist = np.flatnonzero(s < delta + margin)
    if worklist.size == 0 or float(np.min(s)) >= delta * (1.0 - 1e-12):
        return state, False
    x = state.x.copy()
    B = state.basis.B
    target = float(np.sqrt(4.0 + delta))
    changed = False
    for k in worklist:
        i, j = int(near.i[k]), int(near.j[k])
        if i == j:
            continue
        r = x[i] - x[j] - B @ near.z[k].astype(float)
        dist = float(np.linalg.norm(r))
        if dist * dist - 4.0 >= delta * (1.0 - 1e-12):
            continue
        direction = r / dist if dist > 1e-12 else np.eye(1, state.n, 0, dtype=float).ravel()
        t = 0.5 * (target - dist)
        x[i] += t * direction
        x[j] -= t * direction
        changed = True
    if not changed:
        return state, False
    return state.with_x(gauge_project(x)), True


@dataclass
class QuadraticProgram:
    """min 0.5 u^T diag(q) u + c^T u  subject to  A u >= b, with q > 0."""

    diag: np.ndarray
    linear: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if np.any(self.diag <= 0.0):
            raise ValueError("quadratic weights must be strictly positive")


@dataclass
class QPSolution:
    u: np.ndarray
    multipliers: np.ndarray
    active: list
    iterations: int


def solve_qp(qp: QuadraticProgram, tol: float = 1e-10, max_iters: int | None = None) -> QPSolution:
    """Dense primal active-set solve of a strictly convex diagonal QP.

    Deterministic: the most violated constraint enters the working set first,
    with ties broken by the lowest constraint index; blocking multipliers are
    dropped most-negative-first under the same tie rule.
    """
    qinv = 1.0 / qp.diag
    c = qp.linear
    m = qp.b.shape[0]
    if max_iters is None:
        max_iters = 3 * max(m, 1) + 30
    feas_tol = tol * max(1.0, float(np.max(np.abs(qp.b))) if m else 1.0)

    def kkt(working: list[int]) -> tuple[np.ndarray, np.ndarray]:
        if not working:
            return -qinv * c, np.zeros(0)
        Aw = qp.A[working]
        G = (Aw * qinv) @ Aw.T
        rhs = qp.b[working] + Aw @ (qinv * c)
        try:
            mu = np.linalg.solve(G, rhs)
        except np.linalg.LinAlgError:
            mu = np.linalg.lstsq(G, rhs, rcond=None)[0]
        return qinv * (Aw.T @ mu - c), mu

    working: list[int] = []
    for it in range(1, max_iters + 1):
        u, mu_w = kkt(working)
        if working and float(np.min(mu_w)) < -tol:
            working.pop(int(np.argmin(mu_w)))
            continue
        if m:
            viol = qp.b - qp.A @ u
            k = int(np.argmax(viol))
            if viol[k] > feas_tol:
                if k in working:
                    raise LinearizedInfeasibleError("linearized infeasible")
                working.append(k)
                continue
        multipliers = np.zeros(m)
        for idx, w in enumerate(working):
            multipliers[w] = mu_w[idx]
        return QPSolution(u=u, multipliers=multipliers, active=sorted(working), iterations=it)
    raise LinearizedInfeasibleError("linearized infeasible")


def _constraint_rows(state: PackingState, contacts: Contacts, delta: float,
                     joint: bool) -> tuple[np.ndarray, np.ndarray, Contacts]:
    """Dense constraint matrix over the selected contacts.

    Variables are the flattened position move (and basis move for joint
    projections); rows of self contacts are zero in the position block.
    """
    N, n = state.x.shape
    r = r_vectors(state, contacts)
    s = np.einsum("mk,mk->m", r, r) - 4.0
    m = len(contacts)
    dim = N * n + (n * n if joint else 0)
    A = np.zeros((m, dim))
    rows = np.arange(m)
    for axis in range(n):
        A[rows, contacts.i * n + axis] += 2.0 * r[:, axis]
        A[rows, contacts.j * n + axis] -= 2.0 * r[:, axis]
    if joint:
        aB = -2.0 * np.einsum("ma,mb->mab", r, contacts.z.astype(float))
        A[:, N * n:] = aB.reshape(m, n * n)
    b = delta - s
    return A, b, contacts


def _select_constraints(state: PackingState, shifts: ShiftIndexSet, p: BarrierParams,
                        horizon: float, joint: bool) -> Contacts:
    near = contacts_within(state, shifts, p.R)
    s = slack_values(state, near)
    keep = s <= p.delta + horizon
    if not joint:
        keep &= near.i != near.j
    return near.take(keep)


def _lyapunov(state: PackingState, shifts, p, v, x_prev, gamma, members) -> float:
    u = barrier_value(state, shifts, p, members=members)
    return u + 0.5 * float(np.sum(v * v)) + 0.5 * gamma * float(np.sum((state.x - x_prev) ** 2))


def _assert_cell_constraints(state: PackingState, shifts: ShiftIndexSet, p: BarrierParams):
    near = contacts_within(state, shifts, p.R)
    selfs = near.take(near.i == near.j)
    if len(selfs) and float(np.min(slack_values(state, selfs))) < p.delta * (1.0 - _SLACK_GUARD):
        raise FeasibilityError(
            "cell-bound (self-image) slack below margin; a joint basis update is required")


def e_project_x(ds, p: BarrierParams, shifts: ShiftIndexSet, L_hat: float,
                members: Contacts | None = None, horizon: float = 1.0,
                tol: float = 1e-10):
    """Energy-nonexpansive feasibility projection in positions only.

    Minimizes the quadratic majorizer of the Lyapunov energy built from the
    current gradient, curvature weight and step-memory anchor, subject to all
    linearized slack constraints; the velocity is kept unchanged.  Returns the
    updated dynamics state plus an info dict with the before/after energies.
    """
    state: PackingState = ds.packing
    gamma = ds.gamma
    x_prev = ds.x_prev
    v = ds.v
    N, n = state.x.shape
    _assert_cell_constraints(state, shifts, p)

    ev = barrier_energy(state, shifts, p, members=members)
    e_before = ev.value + 0.5 * float(np.sum(v * v)) \
        + 0.5 * gamma * float(np.sum((state.x - x_prev) ** 2))

    weight = L_hat
    backoffs = 0
    rounds = 0
    cur = state
    prev_u = None
    info = {"E_before": e_before, "kind": "qp_x", "n_constraints": 0, "n_active": 0}
    while True:
        cons = _select_constraints(cur, shifts, p, horizon, joint=False)
        A, b, _ = _constraint_rows(cur, cons, p.delta, joint=False)
        # re-anchor the linear model at the current point
        evc = barrier_energy(cur, shifts, p, members=members) if cur is not state else ev
        gb = (evc.grad_x + gamma * (cur.x - x_prev)).ravel()
        qp = QuadraticProgram(diag=np.full(N * n, weight + gamma), linear=gb, A=A, b=b)
        sol = solve_qp(qp, tol=tol)
        cand = cur.with_x(gauge_project(cur.x + sol.u.reshape(N, n)))
        worst = _worst_pair_slack(cand, shifts, p)
        if worst < p.delta * (1.0 - _SLACK_GUARD):
            rounds += 1
            if rounds > 6:
                raise FeasibilityError("projection could not restore the slack margin")
            cur, _ = gs_project_once(cand, shifts, p.delta)
            prev_u = None
            continue
        e_after = _lyapunov(cand, shifts, p, v, x_prev, gamma, members)
        pinned = prev_u is not None and np.allclose(sol.u, prev_u, atol=1e-14, rtol=0.0)
        if e_after > e_before + 1e-12 and backoffs < 30 and not pinned:
            # the curvature weight under-majorized; a larger weight shrinks the
            # move (a pinned solution means the move is a mandatory repair)
            backoffs += 1
            weight *= 2.0
            prev_u = sol.u
            continue
        info.update(E_after=e_after, backoffs=backoffs, guard_rounds=rounds,
                    n_constraints=A.shape[0], n_active=len(sol.active),
                    nonexpansive=bool(e_after <= e_before + 1e-10))
        return dataclasses.replace(ds, packing=cand), info


def _worst_pair_slack(state: PackingState, shifts: ShiftIndexSet, p: BarrierParams) -> float:
    near = contacts_within(state, shifts, p.R)
    pairs = near.take(near.i != near.j)
    if len(pairs) == 0:
        return float("inf")
    return float(np.min(slack_values(state, pairs)))


def e_project_joint(ds, p: BarrierParams, shifts: ShiftIndexSet, L_x: float, L_B: float,
                    volume_weight: float = 0.0, members: Contacts | None = None,
                    horizon: float = 1.0, tol: float = 1e-10):
    """Joint (positions, basis) energy-nonexpansive projection.

    Minimizes the joint majorizer subject to jointly linearized constraints
    and applies (x, B) <- (y*, B + H*), keeping the velocity.  With a positive
    `volume_weight` a cell-volume descent term is added to the basis block and
    the energy-nonexpansiveness backoff is disabled (the energy may then rise
    by design).  Basis nondegeneracy is re-checked; a violating basis move is
    halved up to 10 times, else dropped.
    """
    state: PackingState = ds.packing
    gamma = ds.gamma
    x_prev = ds.x_prev
    v = ds.v
    N, n = state.x.shape

    ev = barrier_energy(state, shifts, p, members=members)
    e_before = ev.value + 0.5 * float(np.sum(v * v)) \
        + 0.5 * gamma * float(np.sum((state.x - x_prev) ** 2))

    wx, wB = L_x, L_B
    backoffs = 0
    rounds = 0
    cur = state
    prev_u = None
    info = {"E_before": e_before, "kind": "qp_joint", "volume_weight": volume_weight}
    while True:
        cons = _select_constraints(cur, shifts, p, horizon, joint=True)
        A, b, _ = _constraint_rows(cur, cons, p.delta, joint=True)
        evc = barrier_energy(cur, shifts, p, members=members) if cur is not state else ev
        gb_x = (evc.grad_x + gamma * (cur.x - x_prev)).ravel()
        gb_B = (evc.grad_B + (volume_weight * volume_gradient(cur.basis) if volume_weight else 0.0)).ravel()
        diag = np.concatenate([np.full(N * n, wx + gamma), np.full(n * n, wB)])
        qp = QuadraticProgram(diag=diag, linear=np.concatenate([gb_x, gb_B]), A=A, b=b)
        sol = solve_qp(qp, tol=tol)
        u = sol.u[: N * n].reshape(N, n)
        H = sol.u[N * n:].reshape(n, n)
        basis = _admissible_basis(cur.basis, H)
        cand = PackingState.make(gauge_project(cur.x + u), basis)
        worst = _worst_all_slack(cand, shifts, p)
        if worst < p.delta * (1.0 - _SLACK_GUARD):
            rounds += 1
            if rounds > 6:
                raise FeasibilityError("joint projection could not restore the slack margin")
            cur, _ = gs_project_once(cand, shifts, p.delta)
            prev_u = None
            continue
        e_after = _lyapunov(cand, shifts, p, v, x_prev, gamma, members)
        pinned = prev_u is not None and np.allclose(sol.u, prev_u, atol=1e-14, rtol=0.0)
        if volume_weight == 0.0 and e_after > e_before + 1e-12 and backoffs < 30 and not pinned:
            backoffs += 1
            wx *= 2.0
            wB *= 2.0
            prev_u = sol.u
            continue
        info.update(E_after=e_after, backoffs=backoffs, guard_rounds=rounds,
                    n_constraints=A.shape[0], n_active=len(sol.active),
                    basis_moved=bool(np.any(basis.B != state.basis.B)),
                    nonexpansive=bool(volume_weight > 0.0 or e_after <= e_before + 1e-10))
        return dataclasses.replace(ds, packing=cand), info


def _worst_all_slack(state: PackingState, shifts: ShiftIndexSet, p: BarrierParams) -> float:
    near = contacts_within(state, shifts, p.R)
    if len(near) == 0:
        return float("inf")
    return float(np.min(slack_values(state, near)))


def _admissible_basis(basis: LatticeBasis, H: np.ndarray) -> LatticeBasis:
    """Apply B <- B + H, halving H while the nondegeneracy window is violated."""
    step = np.asarray(H, dtype=float)
    for _ in range(10):
        try:
            return LatticeBasis(basis.B + step, sigma_lo=basis.sigma_lo, sigma_hi=basis.sigma_hi)
        except SingularBasisError:
            step = 0.5 * step
    logger.warning("basis update rejected after 10 halvings; keeping the old cell")
    return basis
