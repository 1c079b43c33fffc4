import io
import math

import numpy as np
import pytest

from soseq.mjls import (
    Controller,
    DiscreteModel,
    DivergenceError,
    MjlsModel,
    Mode,
    NotStabilizableError,
    TransitionModel,
    average_power,
    discretize,
    expm,
    lqr_gain,
    ms_stable,
    sample_mode,
    simulate,
    spectral_radius,
    validate_model,
)

# ---------------------------------------------------------------------------
# independent oracles


def taylor_exp(M, order=12):
    """Plain truncated Taylor series, no scaling/squaring."""
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, order + 1):
        term = term @ M / k
        out = out + term
    return out


def taylor_int_exp(A, dt, order=12):
    """integral_0^dt exp(A tau) dtau as the series sum A^k dt^(k+1)/(k+1)!."""
    out = np.eye(A.shape[0]) * dt
    term = np.eye(A.shape[0]) * dt
    for k in range(1, order + 1):
        term = term @ A * dt / (k + 1)
        out = out + term
    return out


def charpoly_radius(A):
    """Spectral radius via Faddeev-LeVerrier coefficients and np.roots."""
    n = A.shape[0]
    coeffs = [1.0]
    Mk = np.zeros_like(A)
    for k in range(1, n + 1):
        Mk = A @ Mk + coeffs[-1] * np.eye(n)
        coeffs.append(-np.trace(A @ Mk) / k)
    return float(np.max(np.abs(np.roots(coeffs))))


def scalar_lqr_cost(A, B, Q, R, K):
    """Closed-form infinite-horizon cost (Q + R K^2) / (1 - (A - B K)^2), x0 = 1."""
    cl = A - B * K
    if abs(cl) >= 1.0:
        return math.inf
    return (Q + R * K * K) / (1.0 - cl * cl)


def mc_mean_square_growth(A_d_modes, Pi, n_runs=4000, n_steps=80, seed=0):
    """Monte Carlo growth factor of E||x_k||^2 under random mode switching."""
    rng = np.random.default_rng(seed)
    M, n_x = len(A_d_modes), A_d_modes[0].shape[0]
    x = rng.standard_normal((n_runs, n_x))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    theta = rng.integers(0, M, n_runs)
    cum = np.cumsum(Pi, axis=1)
    mid = None
    stacked = np.stack(A_d_modes)
    for k in range(n_steps):
        x = np.einsum("rij,rj->ri", stacked[theta], x)
        u = rng.random(n_runs)
        theta = (u[:, None] >= cum[theta]).sum(axis=1)
        if k == n_steps // 2 - 1:
            mid = float(np.mean(np.sum(x * x, axis=1)))
    final = float(np.mean(np.sum(x * x, axis=1)))
    return (final / mid) ** (1.0 / (n_steps - n_steps // 2))


# ---------------------------------------------------------------------------
# fixtures


def two_mode_model(noise=0.0, offset=(1.0, 0.4)):
    A = np.array(
        [
            [[-0.5, 0.0], [0.6, -0.4]],
            [[-0.3, 0.0], [0.6, -0.35]],
        ]
    )
    B = np.array([[[1.0], [0.0]], [[0.5], [0.0]]])
    E = np.array([[[0.3], [0.0]], [[0.6], [0.0]]])
    C = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    y_off = np.array([[offset[0]], [offset[1]]])
    model = MjlsModel(
        n_x=2,
        n_u=1,
        n_w=1,
        n_y=1,
        modes=(Mode(0, "nominal"), Mode(1, "compromised")),
        A=A,
        B=B,
        E=E,
        C=C,
        y_offset=y_off,
        noise_std=np.array([noise]),
        perf_index=0,
    )
    return model


def two_mode_transitions(breach=0.4, recover=0.3):
    Q = np.zeros((2, 2, 2, 2))
    for j in range(2):
        # no attack: only recovery flows
        Q[0, j, 1, 0] = recover
        Q[0, j, 1, 1] = -recover
        # attack 1: breach unless defense matches
        rate = 0.0 if j == 1 else breach
        Q[1, j, 0, 1] = rate
        Q[1, j, 0, 0] = -rate
        Q[1, j, 1, 0] = recover if j == 1 else 0.05
        Q[1, j, 1, 1] = -(recover if j == 1 else 0.05)
    return TransitionModel(Q=Q)


def synthetic_disc(A_d_modes, Pi_single):
    """DiscreteModel wrapper for hand-built closed-loop matrices (B_d = 0)."""
    M = len(A_d_modes)
    n_x = A_d_modes[0].shape[0]
    model = MjlsModel(
        n_x=n_x,
        n_u=1,
        n_w=1,
        n_y=1,
        modes=tuple(Mode(m, f"m{m}") for m in range(M)),
        A=np.zeros((M, n_x, n_x)),
        B=np.zeros((M, n_x, 1)),
        E=np.zeros((M, n_x, 1)),
        C=np.concatenate([np.eye(1, n_x)] * M).reshape(M, 1, n_x),
        y_offset=np.zeros((M, 1)),
        noise_std=np.array([0.0]),
        perf_index=0,
    )
    Pi = np.asarray(Pi_single)[None, None, :, :]
    return DiscreteModel(
        model=model,
        dt=0.1,
        A_d=np.stack(A_d_modes),
        B_d=np.zeros((M, n_x, 1)),
        E_d=np.zeros((M, n_x, 1)),
        Pi=Pi,
    )


def zero_controller(M, n_u, n_x):
    return Controller(K=np.zeros((M, n_u, n_x)))


# ---------------------------------------------------------------------------
# validate_model


def test_validate_well_formed():
    assert validate_model(two_mode_model(), two_mode_transitions()) == []


def test_validate_bad_row_sum():
    trans = two_mode_transitions()
    Q = trans.Q.copy()
    Q[0, 0, 0, 0] = 0.1
    bad = validate_model(two_mode_model(), TransitionModel(Q=Q))
    assert any("Q[0][0] row 0" in v for v in bad)


def test_validate_bad_dimension():
    model = two_mode_model()
    B = np.zeros((2, 2, 3))
    broken = MjlsModel(
        **{**{f: getattr(model, f) for f in model.__dataclass_fields__}, "B": B}
    )
    bad = validate_model(broken, two_mode_transitions())
    assert len(bad) == 1 and "B has shape" in bad[0]


def test_validate_no_attack_breach_flagged():
    trans = two_mode_transitions()
    Q = trans.Q.copy()
    Q[0, 0, 0, 1] = 0.2
    Q[0, 0, 0, 0] = -0.2
    bad = validate_model(two_mode_model(), TransitionModel(Q=Q))
    assert any("non-nominal" in v for v in bad)


# ---------------------------------------------------------------------------
# discretize / expm


def test_discretize_zero_dynamics():
    model = two_mode_model()
    A = np.zeros((2, 2, 2))
    b = np.array([[[1.0], [2.0]], [[0.5], [0.25]]])
    flat = MjlsModel(
        **{
            **{f: getattr(model, f) for f in model.__dataclass_fields__},
            "A": A,
            "B": b,
        }
    )
    disc = discretize(flat, two_mode_transitions(), 0.1)
    for m in range(2):
        np.testing.assert_allclose(disc.A_d[m], np.eye(2), atol=1e-14)
        np.testing.assert_allclose(disc.B_d[m], 0.1 * b[m], atol=1e-14)


def test_discretize_nilpotent_exact():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_allclose(
        expm(A * 0.1), np.array([[1.0, 0.1], [0.0, 1.0]]), atol=1e-15
    )


def test_discretize_matches_taylor_oracle():
    rng = np.random.default_rng(7)
    dt = 0.05
    model = two_mode_model()
    for _ in range(5):
        A3 = rng.normal(scale=0.8, size=(3, 3))
        A3 -= np.eye(3) * (np.max(np.real(np.linalg.eigvals(A3))) + 0.3)
        B3 = rng.normal(size=(3, 1))
        E3 = rng.normal(size=(3, 1))
        m3 = MjlsModel(
            n_x=3,
            n_u=1,
            n_w=1,
            n_y=1,
            modes=(Mode(0, "nominal"),),
            A=A3[None],
            B=B3[None],
            E=E3[None],
            C=np.array([[[1.0, 0.0, 0.0]]]),
            y_offset=np.zeros((1, 1)),
            noise_std=np.array([0.0]),
            perf_index=0,
        )
        trans1 = TransitionModel(Q=np.zeros((1, 1, 1, 1)))
        disc = discretize(m3, trans1, dt)
        np.testing.assert_allclose(disc.A_d[0], taylor_exp(A3 * dt), atol=1e-9)
        np.testing.assert_allclose(
            disc.B_d[0], taylor_int_exp(A3, dt) @ B3, atol=1e-9
        )
        np.testing.assert_allclose(
            disc.E_d[0], taylor_int_exp(A3, dt) @ E3, atol=1e-9
        )
    del model


def test_discretize_rejects_large_dt():
    with pytest.raises(ValueError, match="0.1"):
        discretize(two_mode_model(), two_mode_transitions(), 0.5)
    with pytest.raises(ValueError, match="dt"):
        discretize(two_mode_model(), two_mode_transitions(), 0.0)


def test_pi_rows_stochastic():
    disc = discretize(two_mode_model(), two_mode_transitions(), 0.1)
    sums = disc.Pi.sum(axis=3)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    assert np.all(disc.Pi >= -1e-13)


def test_step_consistency_order():
    # one full-dt closed-loop step vs two half-dt steps: observed order >= 1.9
    model = two_mode_model()
    trans = two_mode_transitions()
    errs = []
    for dt in (0.1, 0.05, 0.025):
        d1 = discretize(model, trans, dt)
        d2 = discretize(model, trans, dt / 2)
        K = lqr_gain(d1.A_d[0], d1.B_d[0], np.eye(2), np.eye(1))
        K2 = lqr_gain(d2.A_d[0], d2.B_d[0], np.eye(2), np.eye(1))
        one = d1.A_d[0] - d1.B_d[0] @ K
        half = d2.A_d[0] - d2.B_d[0] @ K2
        errs.append(np.max(np.abs(one - half @ half)))
    orders = [math.log2(errs[k] / errs[k + 1]) for k in range(2)]
    assert min(orders) >= 1.9, orders


# ---------------------------------------------------------------------------
# lqr_gain


def test_lqr_scalar_deadbeat():
    K = lqr_gain(np.array([[2.0]]), np.array([[1.0]]), np.array([[1.0]]), np.array([[0.0]]))
    assert K == pytest.approx(2.0, abs=1e-8)


def test_lqr_scalar_matches_grid_oracle():
    A, B, Q, R = 0.5, 1.0, 1.0, 1.0
    grid = np.arange(A - 1.0 + 1e-4, A + 1.0, 1e-4)
    costs = [scalar_lqr_cost(A, B, Q, R, k) for k in grid]
    k_star = grid[int(np.argmin(costs))]
    K = lqr_gain(np.array([[A]]), np.array([[B]]), np.array([[Q]]), np.array([[R]]))[0, 0]
    assert abs(A - B * K) < 0.5
    assert K == pytest.approx(k_star, abs=1e-3)


def test_lqr_double_integrator_stabilizes():
    dt = 0.1
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[dt * dt / 2], [dt]])
    K = lqr_gain(A, B, np.eye(2), np.array([[1.0]]))
    assert spectral_radius(A - B @ K) < 1.0


def test_lqr_rejects_unstabilizable():
    # uncontrollable and unstable: B = 0 with  rho(A) > 1
    with pytest.raises(NotStabilizableError, match="not stabilizable"):
        lqr_gain(np.array([[1.5]]), np.array([[0.0]]), np.array([[1.0]]), np.array([[1.0]]))


# ---------------------------------------------------------------------------
# spectral_radius


def test_spectral_radius_identity():
    assert spectral_radius(np.eye(3)) == pytest.approx(1.0, abs=1e-12)


def test_spectral_radius_diag():
    assert spectral_radius(np.diag([0.5, -0.8])) == pytest.approx(0.8, abs=1e-12)


def test_spectral_radius_matches_charpoly_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        A = rng.normal(size=(4, 4))
        assert spectral_radius(A) == pytest.approx(charpoly_radius(A), abs=1e-6)


def test_spectral_radius_large_power_iteration():
    rng = np.random.default_rng(5)
    # Perron-like operator: nonnegative, as in the mean-square lifted matrix
    A = np.abs(rng.normal(size=(12, 12)))
    assert spectral_radius(A) == pytest.approx(charpoly_radius(A), rel=1e-4)


def test_spectral_radius_rejects_nonsquare():
    with pytest.raises(ValueError):
        spectral_radius(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# ms_stable


def test_ms_stable_single_mode_reduction():
    for rho, expect in ((0.9, True), (1.1, False)):
        A_d = np.array([[rho]])
        disc = synthetic_disc([A_d], np.array([[1.0]]))
        assert ms_stable(disc, 0, 0, zero_controller(1, 1, 1)) is expect


def test_ms_stable_agrees_with_monte_carlo():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 8:
        mats = []
        for _ in range(2):
            A = rng.normal(size=(2, 2))
            A *= rng.uniform(0.6, 1.3) / charpoly_radius(A)
            mats.append(A)
        Pi = rng.dirichlet(np.ones(2), size=2)
        disc = synthetic_disc(mats, Pi)
        n2 = 4
        lifted = np.zeros((2 * n2, 2 * n2))
        for m in range(2):
            kr = np.kron(mats[m], mats[m])
            for mp in range(2):
                lifted[mp * n2 : (mp + 1) * n2, m * n2 : (m + 1) * n2] = Pi[m, mp] * kr
        crit = spectral_radius(lifted)
        if 0.95 <= crit <= 1.05:
            continue
        verdict = ms_stable(disc, 0, 0, zero_controller(2, 1, 2))
        growth = mc_mean_square_growth(mats, Pi, seed=checked)
        assert verdict == (growth < 1.0), (crit, growth)
        checked += 1


# ---------------------------------------------------------------------------
# sample_mode


def test_sample_mode_absorbing():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_mode(1, np.array([0.0, 1.0]), rng) == 1


def test_sample_mode_forced_jump():
    rng = np.random.default_rng(0)
    assert sample_mode(0, np.array([0.0, 1.0]), rng) == 1


def test_sample_mode_jump_frequency():
    lam, dt = 0.5, 0.1
    p = 1.0 - math.exp(-lam * dt)
    row = np.array([1.0 - p, p])
    rng = np.random.default_rng(123)
    n = 100_000
    jumps = sum(sample_mode(0, row, rng) == 1 for _ in range(n))
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(jumps / n - p) < 3 * sigma


def test_sample_mode_rejects_bad_row():
    with pytest.raises(ValueError):
        sample_mode(0, np.array([0.5, 0.1]), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# simulate


def make_disc(noise=0.0, offset=(1.0, 0.4), dt=0.1):
    model = two_mode_model(noise=noise, offset=offset)
    disc = discretize(model, two_mode_transitions(), dt)
    K = np.stack(
        [lqr_gain(disc.A_d[m], disc.B_d[m], np.eye(2), np.eye(1)) for m in range(2)]
    )
    return disc, Controller(K=K)


def test_simulate_zero_everything_stays_zero():
    disc, K = make_disc(offset=(0.0, 0.0))
    traj = simulate(disc, K, 0, 0, 50.0, np.zeros(2), 0, seed=1)
    assert np.all(traj.x == 0.0)
    assert np.all(traj.perf == 0.0)
    assert np.all(traj.theta == 0)


def test_simulate_decay_tracks_spectral_radius():
    disc, K = make_disc(offset=(0.0, 0.0))
    Abar = disc.A_d[0] - disc.B_d[0] @ K.K[0]
    rho = spectral_radius(Abar)
    assert rho < 1.0
    traj = simulate(disc, K, 0, 0, 60.0, np.array([1.0, -2.0]), 0, seed=2)
    norms = np.linalg.norm(traj.x, axis=1)
    # ||x_k|| <= c rho^k ||x0||: measure c on the run and require it modest
    ks = np.arange(norms.size)
    c = np.max(norms / (rho**ks * norms[0]))
    assert c < 100.0, c
    assert norms[-1] < 1e-3


def test_simulate_deterministic():
    disc, K = make_disc(noise=0.05)
    a = simulate(disc, K, 1, 0, 80.0, np.zeros(2), 0, seed=99, attack_time=10.0)
    b = simulate(disc, K, 1, 0, 80.0, np.zeros(2), 0, seed=99, attack_time=10.0)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.theta, b.theta)
    assert a.events == b.events
    c = simulate(disc, K, 1, 0, 80.0, np.zeros(2), 0, seed=100, attack_time=10.0)
    assert not np.array_equal(a.x, c.x)


def test_simulate_events_ordering():
    disc, K = make_disc(noise=0.02)
    traj = simulate(disc, K, 1, 0, 200.0, np.zeros(2), 0, seed=5, attack_time=20.0)
    kinds = [k for _, k in traj.events]
    assert kinds[0] == "attack-launched"
    if "breach" in kinds:
        t_breach = dict((k, t) for t, k in traj.events)["breach"]
        assert t_breach >= 20.0 - 1e-9
        assert np.all(traj.theta[traj.t < 20.0 - 1e-9] == 0)


def test_simulate_divergence_guard():
    A = np.array([[[2.0, 0.0], [0.0, 2.0]]])
    model = MjlsModel(
        n_x=2,
        n_u=1,
        n_w=1,
        n_y=1,
        modes=(Mode(0, "nominal"),),
        A=A,
        B=np.zeros((1, 2, 1)),
        E=np.zeros((1, 2, 1)),
        C=np.array([[[1.0, 0.0]]]),
        y_offset=np.zeros((1, 1)),
        noise_std=np.array([0.0]),
        perf_index=0,
    )
    trans = TransitionModel(Q=np.zeros((1, 1, 1, 1)))
    disc = discretize(model, trans, 0.1)
    with pytest.raises(DivergenceError, match="diverged at t="):
        simulate(disc, zero_controller(1, 1, 2), 0, 0, 50.0, np.ones(2), 0, seed=0)


# ---------------------------------------------------------------------------
# average_power


def test_average_power_constant():
    disc, K = make_disc(offset=(5.0, 5.0))
    traj = simulate(disc, K, 0, 0, 10.0, np.zeros(2), 0, seed=0)
    mean, se = average_power(traj, 0.0)
    assert mean == 5.0 and se == 0.0


def test_average_power_alternating():
    disc, K = make_disc()
    traj = simulate(disc, K, 0, 0, 10.0, np.zeros(2), 0, seed=0)
    alt = np.where(np.arange(traj.perf.size) % 2 == 0, 0.0, 2.0)
    patched = Trajectory_replace(traj, perf=alt)
    mean, _ = average_power(patched, 0.0)
    # 101 samples: 51 zeros, 50 twos
    assert mean == pytest.approx(100.0 / 101.0, rel=1e-12)


def Trajectory_replace(traj, **kw):
    from dataclasses import replace

    return replace(traj, **kw)


def test_average_power_matches_streaming_oracle():
    disc, K = make_disc(noise=0.05)
    traj = simulate(disc, K, 1, 0, 100.0, np.zeros(2), 0, seed=17)
    buf = io.StringIO()
    for tv, pv in zip(traj.t, traj.perf):
        buf.write(f"{tv:.17g},{pv:.17g}\n")
    buf.seek(0)
    total = count = 0.0
    for line in buf:
        tv, pv = (float(s) for s in line.split(","))
        if tv >= 30.0:
            total += pv
            count += 1
    mean, _ = average_power(traj, 30.0)
    assert mean == pytest.approx(total / count, abs=1e-12)


def test_average_power_rejects_empty_window():
    disc, K = make_disc()
    traj = simulate(disc, K, 0, 0, 10.0, np.zeros(2), 0, seed=0)
    with pytest.raises(ValueError):
        average_power(traj, 10.0)
