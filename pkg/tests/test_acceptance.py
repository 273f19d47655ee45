"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; every tolerance is pinned here, nothing is calibrated at runtime.
"""

import time

import numpy as np
import pytest
from util import (
    hex_single_sphere,
    sliding_column_state,
    square_single_sphere,
)

from spit import (
    BarrierParams,
    DynamicsState,
    LatticeBasis,
    MotionVector,
    PackingState,
    active_set,
    barrier_energy,
    barrier_value,
    build_contact_graph,
    build_shift_set,
    cheeger_check,
    companion_rate,
    estimate_L,
    estimate_m,
    fiedler,
    hvp_joint,
    hvp_x,
    is_periodically_rigid,
    lipschitz_bound,
    motion_operator,
    poincare_check,
    prestress_stable,
    run_trajectory,
    select_steps,
    spit_step,
    trivial_motion_basis,
)
from spit.barrier import observed_slack_cap
from spit.cli import main as cli_main
from spit.geometry import contacts_within, slack_values
from spit.harness import RunConfig, certify, config_from_preset, make_testbed

P = BarrierParams(nu=1e-2, delta=1e-3, R=2.5)

# rows of every run executed by this module, for the safeguard criterion
_RUN_LOG = {"min_slacks": [], "delta": 1e-3}


def _register_rows(rows):
    _RUN_LOG["min_slacks"].extend(float(r.min_slack) for r in rows)


@pytest.fixture(scope="module")
def stub_run():
    cfg = config_from_preset("stub32")
    t0 = time.perf_counter()
    record = run_trajectory(cfg)
    duration = time.perf_counter() - t0
    _register_rows(record.rows)
    return cfg, record, duration


@pytest.fixture(scope="module")
def cert_report():
    cfg = RunConfig(N=4, seed=2, cert_max_steps=20000, unsafe=True)
    ds = make_testbed(cfg)
    t0 = time.perf_counter()
    report = certify(cfg, ds.packing)
    duration = time.perf_counter() - t0
    for lv in report["levels"]:
        _RUN_LOG["min_slacks"].append(lv["min_row_slack"])
    return cfg, report, duration


@pytest.fixture(scope="module")
def run_segments():
    """A stub32 trajectory executed in five segments to sample mid-run graphs."""
    cfg = config_from_preset("stub32", max_steps=100)
    states = []
    initial = None
    for _ in range(5):
        record = run_trajectory(cfg, initial=initial)
        _register_rows(record.rows)
        states.append(record.final_state)
        initial = record.final_state
    return cfg, states


@pytest.fixture(scope="module")
def cli_csvs(tmp_path_factory):
    out = []
    for tag in ("a", "b"):
        d = tmp_path_factory.mktemp(f"det_{tag}")
        rc = cli_main(["run", "--preset", "stub32", "--seed", "7", "--out", str(d)])
        assert rc == 0
        text = (d / "trajectory.csv").read_bytes()
        out.append(text)
        for line in text.decode().splitlines()[1:]:
            _RUN_LOG["min_slacks"].append(float(line.split(",")[4]))
    return out


def test_criterion_1_gradients_and_hvps_match_finite_differences():
    from spit.harness import random_feasible_state

    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    sizes = [2, 3, 4, 6, 8, 9, 12, 16]
    worst = 0.0
    h = 1e-5
    for trial in range(100):
        N = sizes[trial % len(sizes)]
        # slack floor 0.05 keeps third-derivative truncation below tolerance
        st = random_feasible_state(seed=1000 + trial, N=N, delta=0.05)
        shifts = build_shift_set(st.basis, P.R)
        members = contacts_within(st, shifts, P.R)
        if len(members) == 0:
            continue
        ev = barrier_energy(st, shifts, P, members=members)

        # position gradient against central differences of the value
        fd_x = np.zeros_like(st.x)
        for i in range(N):
            for k in range(2):
                xp, xm = st.x.copy(), st.x.copy()
                xp[i, k] += h
                xm[i, k] -= h
                fd_x[i, k] = (
                    barrier_value(PackingState(x=xp, basis=st.basis), shifts, P, members)
                    - barrier_value(PackingState(x=xm, basis=st.basis), shifts, P, members)
                ) / (2 * h)
        worst = max(worst, np.linalg.norm(fd_x - ev.grad_x) / max(np.linalg.norm(ev.grad_x), 1e-300))

        # basis gradient
        fd_B = np.zeros((2, 2))
        for a in range(2):
            for b in range(2):
                Bp, Bm = st.basis.B.copy(), st.basis.B.copy()
                Bp[a, b] += h
                Bm[a, b] -= h
                fd_B[a, b] = (
                    barrier_value(PackingState(x=st.x, basis=LatticeBasis(Bp)), shifts, P, members)
                    - barrier_value(PackingState(x=st.x, basis=LatticeBasis(Bm)), shifts, P, members)
                ) / (2 * h)
        worst = max(worst, np.linalg.norm(fd_B - ev.grad_B) / max(np.linalg.norm(ev.grad_B), 1e-300))

        # HVPs against directional differences of the gradients
        d = rng.standard_normal(st.x.shape)
        got = hvp_x(st, shifts, P, d, members=members)
        gp = barrier_energy(PackingState(x=st.x + h * d, basis=st.basis), shifts, P, members).grad_x
        gm = barrier_energy(PackingState(x=st.x - h * d, basis=st.basis), shifts, P, members).grad_x
        fd = (gp - gm) / (2 * h)
        worst = max(worst, np.linalg.norm(fd - got) / max(np.linalg.norm(got), 1e-300))

        dB = rng.standard_normal((2, 2))
        jx, jB = hvp_joint(st, shifts, P, d, dB, members=members)
        evp = barrier_energy(PackingState(x=st.x + h * d, basis=LatticeBasis(st.basis.B + h * dB)),
                             shifts, P, members)
        evm = barrier_energy(PackingState(x=st.x - h * d, basis=LatticeBasis(st.basis.B - h * dB)),
                             shifts, P, members)
        fd_joint = np.concatenate([((evp.grad_x - evm.grad_x) / (2 * h)).ravel(),
                                   ((evp.grad_B - evm.grad_B) / (2 * h)).ravel()])
        hv = np.concatenate([jx.ravel(), jB.ravel()])
        worst = max(worst, np.linalg.norm(fd_joint - hv) / max(np.linalg.norm(hv), 1e-300))
    duration = time.perf_counter() - t0
    assert worst <= 1e-5, f"worst relative FD error {worst:.3e}"
    assert duration < 10.0, f"criterion 1 took {duration:.1f}s"
    print(f"\n[acceptance 1] PASS - gradient/HVP vs finite differences: "
          f"worst rel err {worst:.2e}, {duration:.1f}s")


def test_criterion_2_gradient_lipschitz_bound():
    from spit.harness import random_feasible_state

    rng = np.random.default_rng(7)
    checked = 0
    violations = 0
    for seed in range(140):
        if checked >= 100:
            break
        st = random_feasible_state(seed=3000 + seed, N=4, inflate=0.08, jitter=0.01)
        shifts = build_shift_set(st.basis, P.R)
        members = contacts_within(st, shifts, P.R)
        if len(members) == 0:
            continue
        eps = 1e-3
        u = rng.standard_normal(st.x.shape)
        w = rng.standard_normal(st.x.shape)
        xa = st.x + eps * u / np.linalg.norm(u)
        xb = st.x + eps * w / np.linalg.norm(w)
        sa, sb = PackingState(x=xa, basis=st.basis), PackingState(x=xb, basis=st.basis)
        if min(float(np.min(slack_values(q, members))) for q in (sa, sb)) < P.delta:
            continue
        cap = max(observed_slack_cap(sa, shifts, P, members=members),
                  observed_slack_cap(sb, shifts, P, members=members))
        bound = lipschitz_bound(P, cap, P.R, len(members))
        ga = barrier_energy(sa, shifts, P, members=members).grad_x
        gb = barrier_energy(sb, shifts, P, members=members).grad_x
        ratio = float(np.linalg.norm(ga - gb) / np.linalg.norm(xa - xb))
        checked += 1
        if ratio > bound:
            violations += 1
    assert checked >= 100
    assert violations == 0
    print(f"\n[acceptance 2] PASS - empirical Lipschitz ratio within the closed-form "
          f"bound on {checked} random pairs, zero violations")


def test_criterion_3_unprojected_descent_on_stub32(stub_run):
    cfg, record, duration = stub_run
    assert cfg.N == 32 and cfg.delta == 1e-3 and cfg.nu == 1e-2 and cfg.eta_dt == 1.0
    assert len(record.rows) == 1000
    bad = [r.step for r in record.rows if not (r.E_unprojected <= r.E_before + 1e-10)]
    assert bad == [], f"descent violations at steps {bad[:10]}"
    # the logged energy column itself is non-increasing as well
    E = np.array([r.E for r in record.rows])
    assert np.all(np.diff(E) <= 1e-10)
    assert duration < 60.0, f"criterion 3 run took {duration:.1f}s"
    print(f"\n[acceptance 3] PASS - energy non-increasing across 1000 accepted "
          f"unprojected steps ({duration:.1f}s)")


def test_criterion_4_projection_nonexpansiveness(stub_run):
    _, record, _ = stub_run
    qp_events = [e for e in record.events
                 if e.get("kind", "").startswith("qp") and e.get("volume_weight", 0.0) == 0.0]
    assert len(qp_events) >= 100  # the joint cadence alone fires 100 times
    bad = [e for e in qp_events if not (e["E_after"] <= e["E_before"] + 1e-10)]
    assert bad == [], f"{len(bad)} nonexpansiveness violations"
    print(f"\n[acceptance 4] PASS - all {len(qp_events)} energy projections "
          f"nonexpansive (tolerance 1e-10)")


def test_criterion_5_local_linear_rate_matches_companion_roots():
    t0 = time.perf_counter()
    st_star = sliding_column_state(float(np.sqrt(4.0 + 0.05)))
    shifts = build_shift_set(st_star.basis, P.R)
    assert float(np.linalg.norm(barrier_energy(st_star, shifts, P).grad_x)) <= 1e-12
    L = estimate_L(st_star, shifts, P, tol=1e-12).value
    m = estimate_m(st_star, shifts, P, tol=1e-12, L_hat=L).value
    assert m > 0.0
    dt, eta = select_steps(L, m, 1.0, 1.9)
    rho_pred = max(companion_rate(lam, dt, eta) for lam in (m, L))

    rng = np.random.default_rng(0)
    d = rng.standard_normal(st_star.x.shape)
    d -= d.mean(axis=0)
    d *= 1e-4 / np.linalg.norm(d)
    ds = DynamicsState(packing=st_star.with_x(st_star.x + d), v=np.zeros_like(d),
                       x_prev=(st_star.x + d).copy(), dt=dt, eta=eta,
                       gamma=1.0 / dt**2 - L / 2.0)
    errs = []
    for _ in range(400):
        ds = spit_step(ds, P, shifts)
        errs.append(float(np.linalg.norm(ds.packing.x - st_star.x)))
    tail = np.array(errs[-200:])
    rho_fit = float(np.exp(np.polyfit(np.arange(200), np.log(tail), 1)[0]))
    duration = time.perf_counter() - t0
    assert rho_fit < 1.0
    assert abs(rho_fit - rho_pred) <= 0.1, f"fit {rho_fit:.6f} vs predicted {rho_pred:.6f}"
    assert duration < 10.0
    print(f"\n[acceptance 5] PASS - fitted rate {rho_fit:.6f} vs companion-root "
          f"bound {rho_pred:.6f} ({duration:.1f}s)")


def test_criterion_6_continuation_kkt(cert_report):
    _, report, duration = cert_report
    levels = report["levels"]
    assert [lv["nu"] for lv in levels] == [1e-1, 1e-2, 1e-3, 1e-4]
    for lv in levels:
        assert lv["terminated"] == "gradient", f"sub-solve at nu={lv['nu']} did not converge"
        assert lv["res_x"] <= 1e-6 * (1.0 + lv["res_x_scale"]), \
            f"res_x {lv['res_x']:.3e} too large at nu={lv['nu']}"
        assert lv["mu_min_clamped"] >= 0.0
    comps = [lv["comp"] for lv in levels]
    for a, b in zip(comps, comps[1:]):
        assert b <= a * 1.1, f"complementarity rose: {a:.3e} -> {b:.3e}"
    assert report["rigidity_shift"]["rigid"] is True
    assert duration < 120.0, f"criterion 6 took {duration:.1f}s"
    print(f"\n[acceptance 6] PASS - continuation converged at 4 barrier levels, "
          f"comp {comps[0]:.2e} -> {comps[-1]:.2e}, rigid cell ({duration:.1f}s)")


def test_criterion_7_poincare_and_cheeger(run_segments):
    cfg, states, = run_segments
    rng = np.random.default_rng(99)
    graphs_checked = 0
    for ds in states:
        shifts = build_shift_set(ds.packing.basis, cfg.R)
        graph = build_contact_graph(ds.packing, shifts, cfg.eps_active)
        lam2, _ = fiedler(graph)
        assert lam2 > 1e-10, "run contact graph unexpectedly disconnected"
        for _ in range(100):
            u = rng.standard_normal(graph.n_vertices)
            u -= u.mean()
            assert poincare_check(graph, u)
        graphs_checked += 1
    assert graphs_checked == 5

    cheeger_checked = 0
    for trial in range(200):
        if cheeger_checked >= 50:
            break
        N = int(rng.integers(3, 13))
        edges = [(i, j) for i in range(N) for j in range(i + 1, N)
                 if rng.uniform() < 0.45]
        from test_spectral import graph_from_edges
        rep = cheeger_check(graph_from_edges(N, edges))
        assert rep.ok
        cheeger_checked += 1
    assert cheeger_checked == 50
    print(f"\n[acceptance 7] PASS - Poincare inequality on {graphs_checked} run graphs "
          f"x100 vectors; Cheeger sandwich exact on {cheeger_checked} random graphs")


def test_criterion_8_rigidity_verdicts():
    hex_st = hex_single_sphere()
    shifts = build_shift_set(hex_st.basis, P.R)
    act = active_set(hex_st, shifts, tol_active=1e-9)
    rig = is_periodically_rigid(hex_st, act, convention="shift")
    assert rig.rigid and rig.nontrivial_dim == 0

    sq = square_single_sphere()
    shifts_sq = build_shift_set(sq.basis, P.R)
    act_sq = active_set(sq, shifts_sq, tol_active=1e-9)
    rig_sq = is_periodically_rigid(sq, act_sq, convention="shift")
    assert not rig_sq.rigid and rig_sq.nontrivial_dim >= 1
    # the returned motion is an explicit shear: a genuine flex outside the
    # trivial space with a symmetric off-diagonal cell velocity
    M = motion_operator(sq, act_sq, convention="shift")
    T = trivial_motion_basis(sq)
    w = rig_sq.basis[:, 0]
    assert np.max(np.abs(M @ w)) <= 1e-9
    assert np.max(np.abs(T.T @ w)) <= 1e-9
    mv = MotionVector.from_flat(w, sq.N, sq.n)
    assert abs(0.5 * (mv.A + mv.A.T)[0, 1]) > 0.1

    rng = np.random.default_rng(31)
    for _ in range(10):
        omega = rng.uniform(0.0, 2.0, len(act_sq))
        flag, min_eig = prestress_stable(sq, act_sq, omega, convention="shift")
        assert not flag
        assert min_eig <= 1e-10
    print("\n[acceptance 8] PASS - hexagonal packing rigid; square packing "
          "shears with prestress check failing for 10 nonnegative stresses")


def test_criterion_9_safeguard_margin(stub_run, run_segments, cert_report, cli_csvs):
    delta = _RUN_LOG["delta"]
    floor = delta * (1.0 - 1e-6)
    slacks = _RUN_LOG["min_slacks"]
    assert len(slacks) >= 3500  # stub (1000) + segments (500) + cli (2000) + cert levels
    bad = [s for s in slacks if s < floor]
    assert bad == [], f"{len(bad)} rows below the safeguard margin, worst {min(bad):.3e}"
    print(f"\n[acceptance 9] PASS - all {len(slacks)} logged rows keep "
          f"min_slack >= delta(1 - 1e-6)")


def test_criterion_10_byte_identical_csv(cli_csvs):
    a, b = cli_csvs
    assert len(a.splitlines()) == 1001
    assert a == b
    print(f"\n[acceptance 10] PASS - stub32 seed 7 reproduces {len(a)} CSV bytes exactly")
