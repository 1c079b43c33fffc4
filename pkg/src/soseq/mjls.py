"""Markov jump linear subsystems: per-mode dynamics, cyber-driven mode switching,
stabilizing controllers, and closed-loop simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from operator import mul
from typing import Optional, Sequence, Union

import numpy as np

SeedLike = Union[int, Sequence[int], np.random.SeedSequence]

DIVERGENCE_LIMIT = 1e9


class NotStabilizableError(RuntimeError):
    """Riccati value iteration failed to converge for the given weights."""


class DivergenceError(RuntimeError):
    """Simulated state left the finite range (||x||_inf > DIVERGENCE_LIMIT)."""

    def __init__(self, time: float):
        super().__init__(f"simulation diverged at t={time:g}")
        self.time = time


@dataclass(frozen=True)
class Mode:
    """Discrete operational mode. Index 0 is the nominal mode by convention."""

    index: int
    label: str


@dataclass(frozen=True)
class MjlsModel:
    """Per-mode linearized dynamics  dx = A x + B u + E w,  y = C x + y_offset.

    States are deviations from each mode's operating point; ``y_offset`` re-adds
    the operating-point output so measured channels (e.g. delivered power) are
    absolute. ``perf_index`` selects the performance channel of y.
    """

    n_x: int
    n_u: int
    n_w: int
    n_y: int
    modes: tuple[Mode, ...]
    A: np.ndarray  # (M, n_x, n_x)
    B: np.ndarray  # (M, n_x, n_u)
    E: np.ndarray  # (M, n_x, n_w)
    C: np.ndarray  # (M, n_y, n_x)
    y_offset: np.ndarray  # (M, n_y)
    noise_std: np.ndarray  # (n_w,)
    perf_index: int

    @property
    def n_modes(self) -> int:
        return len(self.modes)


@dataclass(frozen=True)
class TransitionModel:
    """Continuous-time mode generators Q[i, j], one per (attack i, defense j) pair.

    Rows sum to zero, off-diagonals are nonnegative rates; Q[0, j] (no attack)
    carries no flow into non-nominal modes.
    """

    Q: np.ndarray  # (n+1, n+1, M, M)

    @property
    def n_attacks(self) -> int:
        return self.Q.shape[0] - 1


@dataclass(frozen=True)
class DiscreteModel:
    """Zero-order-hold discretization of an MjlsModel plus per-pair jump chains."""

    model: MjlsModel
    dt: float
    A_d: np.ndarray  # (M, n_x, n_x)
    B_d: np.ndarray  # (M, n_x, n_u)
    E_d: np.ndarray  # (M, n_x, n_w)
    Pi: np.ndarray  # (n+1, n+1, M, M), row-stochastic

    @property
    def n_attacks(self) -> int:
        return self.Pi.shape[0] - 1


@dataclass(frozen=True)
class Controller:
    """Mode-switched linear state feedback u = -K[theta] x."""

    K: np.ndarray  # (M, n_u, n_x)


@dataclass(frozen=True)
class Trajectory:
    """Fixed-step simulation record.

    ``events`` holds (time, kind) pairs with kind in {"attack-launched",
    "breach", "response-triggered", "recovered"}; the simulator emits the first
    three, "recovered" is reserved for downstream annotation.
    """

    t: np.ndarray  # (N+1,)
    x: np.ndarray  # (N+1, n_x)
    theta: np.ndarray  # (N+1,), int
    u: np.ndarray  # (N+1, n_u)
    y: np.ndarray  # (N+1, n_y)
    perf: np.ndarray  # (N+1,)
    events: tuple[tuple[float, str], ...]
    dt: float


def expm(mat: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with a truncated Taylor series.

    The series is truncated once the term's max-abs norm falls below ``tol``
    (with headroom for the squaring stage), giving absolute accuracy near tol
    for the moderate-norm matrices used here.
    """
    A = np.asarray(mat, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expm requires a square matrix")
    if not np.isfinite(A).all():
        raise ValueError("expm requires finite entries")
    n = A.shape[0]
    nrm = float(np.max(np.sum(np.abs(A), axis=1))) if n else 0.0
    n_sq = max(0, int(math.ceil(math.log2(nrm / 0.5)))) if nrm > 0.5 else 0
    As = A / (2.0**n_sq)
    out = np.eye(n)
    term = np.eye(n)
    cutoff = tol / 4.0
    for k in range(1, 80):
        term = term @ As / k
        out += term
        if float(np.max(np.abs(term))) <= cutoff:
            break
    else:
        raise RuntimeError("expm series did not converge")
    for _ in range(n_sq):
        out = out @ out
    return out


def validate_model(model: MjlsModel, trans: TransitionModel) -> list[str]:
    """Check every structural invariant; returns human-readable violations."""
    bad: list[str] = []
    M = model.n_modes
    if M < 1:
        bad.append("model has no modes (M >= 1 required)")
        return bad
    indices = [m.index for m in model.modes]
    if indices != list(range(M)):
        bad.append(f"mode indices {indices} are not dense 0..{M - 1}")

    expected = {
        "A": (M, model.n_x, model.n_x),
        "B": (M, model.n_x, model.n_u),
        "E": (M, model.n_x, model.n_w),
        "C": (M, model.n_y, model.n_x),
        "y_offset": (M, model.n_y),
    }
    for name, shape in expected.items():
        arr = getattr(model, name)
        if arr.shape != shape:
            bad.append(f"{name} has shape {arr.shape}, expected {shape}")
    if model.noise_std.shape != (model.n_w,):
        bad.append(
            f"noise_std has shape {model.noise_std.shape}, expected ({model.n_w},)"
        )
    elif np.any(model.noise_std < 0):
        ch = int(np.argmin(model.noise_std))
        bad.append(f"noise_std[{ch}] = {model.noise_std[ch]:g} is negative")
    if not 0 <= model.perf_index < model.n_y:
        bad.append(f"perf_index {model.perf_index} out of range [0, {model.n_y})")

    Q = trans.Q
    if Q.ndim != 4 or Q.shape[0] != Q.shape[1] or Q.shape[2:] != (M, M):
        bad.append(f"Q has shape {Q.shape}, expected (n+1, n+1, {M}, {M})")
        return bad
    n1 = Q.shape[0]
    for i in range(n1):
        for j in range(n1):
            rows = np.sum(Q[i, j], axis=1)
            for m in range(M):
                if abs(rows[m]) > 1e-12:
                    bad.append(f"Q[{i}][{j}] row {m} sums to {rows[m]:.3e}, not 0")
                for mp in range(M):
                    if mp != m and Q[i, j, m, mp] < -1e-12:
                        bad.append(
                            f"Q[{i}][{j}][{m},{mp}] = {Q[i, j, m, mp]:.3e} is negative"
                        )
            if i == 0:
                for m in range(M):
                    for mp in range(1, M):
                        if mp != m and abs(Q[0, j, m, mp]) > 1e-12:
                            bad.append(
                                f"Q[0][{j}] has rate {Q[0, j, m, mp]:.3e} into "
                                f"non-nominal mode {mp} (no-attack rows must not "
                                "breach)"
                            )
    return bad


def discretize(model: MjlsModel, trans: TransitionModel, dt: float) -> DiscreteModel:
    """Zero-order-hold discretization of the dynamics and the mode generators.

    A_d = exp(A dt);  B_d and E_d come from the augmented exponential of
    [[A, B, E], [0, 0, 0]] dt;  Pi[i, j] = exp(Q[i, j] dt).
    """
    if dt <= 0:
        raise ValueError(f"dt = {dt:g} violates dt > 0")
    qmax = float(np.max(np.abs(np.diagonal(trans.Q, axis1=2, axis2=3))))
    if dt * qmax > 0.1 + 1e-12:
        raise ValueError(
            f"dt*max|Q_mm| = {dt * qmax:.4g} violates the bound 0.1 "
            "(shrink dt so one jump per step dominates)"
        )
    M = model.n_modes
    n_x, n_u, n_w = model.n_x, model.n_u, model.n_w
    A_d = np.empty((M, n_x, n_x))
    B_d = np.empty((M, n_x, n_u))
    E_d = np.empty((M, n_x, n_w))
    for m in range(M):
        aug = np.zeros((n_x + n_u + n_w, n_x + n_u + n_w))
        aug[:n_x, :n_x] = model.A[m]
        aug[:n_x, n_x : n_x + n_u] = model.B[m]
        aug[:n_x, n_x + n_u :] = model.E[m]
        phi = expm(aug * dt)
        A_d[m] = phi[:n_x, :n_x]
        B_d[m] = phi[:n_x, n_x : n_x + n_u]
        E_d[m] = phi[:n_x, n_x + n_u :]
    n1 = trans.Q.shape[0]
    Pi = np.empty((n1, n1, M, M))
    for i in range(n1):
        for j in range(n1):
            Pi[i, j] = expm(trans.Q[i, j] * dt)
    return DiscreteModel(model=model, dt=dt, A_d=A_d, B_d=B_d, E_d=E_d, Pi=Pi)


def lqr_gain(
    A_d: np.ndarray,
    B_d: np.ndarray,
    Q_weight: np.ndarray,
    R_weight: np.ndarray,
    tol: float = 1e-10,
    max_iters: int = 10_000,
) -> np.ndarray:
    """Discrete LQR gain via Riccati value iteration.

    Iterates P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P0 = Q until the
    max-abs change drops below ``tol``; returns K = (R + B'PB)^-1 B'PA.
    """
    A = np.atleast_2d(np.asarray(A_d, float))
    B = np.atleast_2d(np.asarray(B_d, float))
    Q = np.atleast_2d(np.asarray(Q_weight, float))
    R = np.atleast_2d(np.asarray(R_weight, float))
    if np.max(np.abs(Q - Q.T)) > 1e-9 or np.max(np.abs(R - R.T)) > 1e-9:
        raise ValueError("Q_weight and R_weight must be symmetric")
    if np.min(np.linalg.eigvalsh(Q)) < -1e-10:
        raise ValueError("Q_weight must be positive semidefinite")
    r_min = np.min(np.linalg.eigvalsh(R)) if R.size else 0.0
    if r_min < -1e-10:
        raise ValueError("R_weight must be positive semidefinite")
    if r_min <= 0 and np.max(np.abs(R)) > 0:
        raise ValueError("R_weight must be positive definite or exactly zero")
    if np.max(np.abs(R)) == 0:
        if B.shape[0] != B.shape[1]:
            raise ValueError("R_weight = 0 requires a square invertible B_d")
        if abs(np.linalg.det(B)) < 1e-12:
            raise ValueError("R_weight = 0 requires an invertible B_d")

    P = Q.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iters):
            BtP = B.T @ P
            G = R + BtP @ B
            try:
                K = np.linalg.solve(G, BtP @ A)
            except np.linalg.LinAlgError as exc:
                raise NotStabilizableError(
                    "not stabilizable with these weights"
                ) from exc
            P_next = Q + A.T @ P @ A - A.T @ P @ B @ K
            if not np.isfinite(P_next).all():
                raise NotStabilizableError("not stabilizable with these weights")
            if float(np.max(np.abs(P_next - P))) < tol:
                BtP = B.T @ P_next
                return np.linalg.solve(R + BtP @ B, BtP @ A)
            P = P_next
    raise NotStabilizableError("not stabilizable with these weights")


def spectral_radius(mat: np.ndarray) -> float:
    """Largest eigenvalue magnitude.

    Direct eigensolve for n <= 8; 500-step normalized power iteration with a
    geometric growth estimate for larger operators (the mean-square stability
    operators this serves are Perron-like, where power iteration is reliable).
    """
    A = np.asarray(mat, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("spectral_radius requires a square matrix")
    n = A.shape[0]
    if n == 0:
        return 0.0
    if n <= 8:
        return float(np.max(np.abs(np.linalg.eigvals(A))))
    v = 1.0 + 1e-3 * np.sin(np.arange(n))
    v /= np.linalg.norm(v)
    log_r: list[float] = []
    for _ in range(500):
        w = A @ v
        r = float(np.linalg.norm(w))
        if r == 0.0:
            return 0.0
        v = w / r
        log_r.append(math.log(r))
    tail = log_r[len(log_r) // 2 :]
    return float(math.exp(sum(tail) / len(tail)))


def ms_stable(disc: DiscreteModel, i: int, j: int, K: Controller) -> bool:
    """Mean-square stability of the closed loop under the (i, j) jump chain.

    True iff the Kronecker-lifted second-moment operator, with blocks
    Pi[i,j][m, m'] * kron(Abar_m, Abar_m), has spectral radius < 1.
    """
    model = disc.model
    M = model.n_modes
    if K.K.shape != (M, model.n_u, model.n_x):
        raise ValueError(
            f"controller gains have shape {K.K.shape}, "
            f"expected ({M}, {model.n_u}, {model.n_x})"
        )
    if not (0 <= i < disc.Pi.shape[0] and 0 <= j < disc.Pi.shape[1]):
        raise ValueError(f"pair ({i}, {j}) out of range for {disc.Pi.shape[0] - 1} attacks")
    n2 = model.n_x * model.n_x
    lifted = np.zeros((M * n2, M * n2))
    for m in range(M):
        Abar = disc.A_d[m] - disc.B_d[m] @ K.K[m]
        kr = np.kron(Abar, Abar)
        for mp in range(M):
            lifted[mp * n2 : (mp + 1) * n2, m * n2 : (m + 1) * n2] = (
                disc.Pi[i, j, m, mp] * kr
            )
    return spectral_radius(lifted) < 1.0


def _inv_cdf(cum_row: Sequence[float], u: float) -> int:
    """Index of the first cumulative entry exceeding u (inverse-CDF draw)."""
    for idx, c in enumerate(cum_row):
        if u < c:
            return idx
    return len(cum_row) - 1


def sample_mode(theta: int, pi_row: np.ndarray, rng: np.random.Generator) -> int:
    """Draw the next mode from a row of a jump chain by inverse-CDF."""
    row = np.asarray(pi_row, dtype=float)
    if abs(float(row.sum()) - 1.0) > 1e-9 or np.any(row < -1e-12):
        raise ValueError("pi_row must be a stochastic row")
    return _inv_cdf(np.cumsum(row), float(rng.random()))


def _rng_streams(seed: SeedLike) -> tuple[np.random.Generator, np.random.Generator]:
    """Noise and mode-jump generators from two spawned substreams of the seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    noise_ss, mode_ss = ss.spawn(2)
    return np.random.default_rng(noise_ss), np.random.default_rng(mode_ss)


def simulate(
    disc: DiscreteModel,
    K: Controller,
    i: int,
    j: int,
    horizon: float,
    x0: np.ndarray,
    theta0: int,
    seed: SeedLike,
    attack_time: float = 0.0,
) -> Trajectory:
    """Closed-loop simulation under attack i and defense j.

    Steps x_{k+1} = (A_d - B_d K)_{theta_k} x_k + E_d_{theta_k} w_k with i.i.d.
    Gaussian w; modes follow Pi[0, j] before ``attack_time`` and Pi[i, j]
    after. Noise and mode jumps use independent substreams of ``seed``, so the
    result is a pure function of (inputs, seed).
    """
    model = disc.model
    M = model.n_modes
    dt = disc.dt
    if horizon < dt:
        raise ValueError(f"horizon {horizon:g} must be at least dt = {dt:g}")
    if not (0 <= i < disc.Pi.shape[0] and 0 <= j < disc.Pi.shape[1]):
        raise ValueError(f"pair ({i}, {j}) out of range for {disc.n_attacks} attacks")
    if not 0 <= theta0 < M:
        raise ValueError(f"theta0 = {theta0} out of range [0, {M})")
    x_init = np.asarray(x0, dtype=float).reshape(model.n_x)

    n_steps = int(round(horizon / dt))
    noise_rng, mode_rng = _rng_streams(seed)

    # Mode path first: it only consumes the mode substream.
    cum_pre = np.cumsum(disc.Pi[0, j], axis=1).tolist()
    cum_post = np.cumsum(disc.Pi[i, j], axis=1).tolist()
    k_attack = 0 if i == 0 else max(0, int(math.ceil(attack_time / dt - 1e-9)))
    u_mode = mode_rng.random(n_steps).tolist()
    theta = [int(theta0)]
    th = int(theta0)
    for k in range(n_steps):
        rows = cum_post if (i != 0 and k >= k_attack) else cum_pre
        th = _inv_cdf(rows[th], u_mode[k])
        theta.append(th)
    theta_arr = np.asarray(theta, dtype=np.int64)

    # Noise: one bulk draw, mode-gathered through E_d.
    w = noise_rng.standard_normal((n_steps, model.n_w)) * model.noise_std
    n_terms = np.einsum("kij,kj->ki", disc.E_d[theta_arr[:-1]], w)

    xs = np.empty((n_steps + 1, model.n_x))
    xs[0] = x_init
    Abar = [disc.A_d[m] - disc.B_d[m] @ K.K[m] for m in range(M)]
    lim = DIVERGENCE_LIMIT
    if model.n_x <= 6:
        # Tight scalar loop: dominates co-learning runtime for the small models
        # this toolkit ships.
        a_rows = [[tuple(row) for row in Abar[m]] for m in range(M)]
        n_list = n_terms.tolist()
        x = [float(v) for v in x_init]
        for k in range(n_steps):
            a = a_rows[theta[k]]
            nk = n_list[k]
            x = [sum(map(mul, row, x)) + nv for row, nv in zip(a, nk)]
            if max(x) > lim or min(x) < -lim:
                raise DivergenceError((k + 1) * dt)
            xs[k + 1] = x
    else:
        Abar_arr = np.stack(Abar)
        x_vec = x_init.copy()
        for k in range(n_steps):
            x_vec = Abar_arr[theta[k]] @ x_vec + n_terms[k]
            if np.max(np.abs(x_vec)) > lim:
                raise DivergenceError((k + 1) * dt)
            xs[k + 1] = x_vec

    t = np.arange(n_steps + 1) * dt
    ys = np.einsum("kij,kj->ki", model.C[theta_arr], xs) + model.y_offset[theta_arr]
    us = -np.einsum("kij,kj->ki", K.K[theta_arr], xs)
    perf = ys[:, model.perf_index].copy()

    events: list[tuple[float, str]] = []
    if i != 0 and attack_time <= horizon:
        events.append((float(attack_time), "attack-launched"))
    nonnom = np.flatnonzero(theta_arr != 0)
    if nonnom.size:
        k_breach = int(nonnom[0])
        events.append((float(t[k_breach]), "breach"))
        back = np.flatnonzero(theta_arr[k_breach:] == 0)
        if back.size:
            events.append((float(t[k_breach + int(back[0])]), "response-triggered"))
    events.sort(key=lambda e: e[0])

    return Trajectory(
        t=t,
        x=xs,
        theta=theta_arr,
        u=us,
        y=ys,
        perf=perf,
        events=tuple(events),
        dt=dt,
    )


def average_power(traj: Trajectory, burn_in: float) -> tuple[float, float]:
    """Mean of the performance channel after ``burn_in``, with its standard error."""
    if burn_in >= float(traj.t[-1]):
        raise ValueError(
            f"burn_in {burn_in:g} leaves no samples in a horizon of {traj.t[-1]:g}"
        )
    window = traj.perf[traj.t >= burn_in - 1e-12]
    if window.size == 0:
        raise ValueError("empty averaging window")
    mean = float(np.mean(window))
    stderr = (
        float(np.std(window, ddof=1) / math.sqrt(window.size)) if window.size > 1 else 0.0
    )
    return mean, stderr
