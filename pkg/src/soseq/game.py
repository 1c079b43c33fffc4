"""Attacker-defender security game over attack/defense indices 0..n:
payoff construction, learning dynamics, and an exact small-game solver."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class StrategyProfile:
    """Mixed strategies on the (n+1)-simplex: attacker g, defender f."""

    g: np.ndarray
    f: np.ndarray


@dataclass(frozen=True)
class SecurityGame:
    """Bimatrix game induced by the power matrix P and constant action costs.

    The defender (column player j) maximizes U_ij = alpha P_ij - C_d[j]; the
    attacker (row player i) minimizes C_ij = alpha P_ij + C_a[i]. Index 0 is
    the free no-attack / no-defense action.
    """

    n: int
    alpha: float
    P: np.ndarray
    C_d: np.ndarray
    C_a: np.ndarray
    U: np.ndarray
    C: np.ndarray


@dataclass(frozen=True)
class EquilibriumResult:
    profile: StrategyProfile
    defender_gap: float
    attacker_gap: float
    game_value: float
    iterations: int
    trace: tuple[tuple[int, float, float], ...] = field(default_factory=tuple)


def build_game(
    alpha: float, P: np.ndarray, C_d: np.ndarray, C_a: np.ndarray
) -> SecurityGame:
    """Assemble the game of the induced payoff matrices; rejects malformed input."""
    if alpha <= 0:
        raise ValueError(f"alpha = {alpha:g} must be positive")
    P = np.asarray(P, dtype=float)
    C_d = np.asarray(C_d, dtype=float)
    C_a = np.asarray(C_a, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"P must be square, got shape {P.shape}")
    n1 = P.shape[0]
    if C_d.shape != (n1,) or C_a.shape != (n1,):
        raise ValueError(
            f"cost vectors must have length {n1}, got {C_d.shape} and {C_a.shape}"
        )
    if C_d[0] != 0.0 or C_a[0] != 0.0:
        raise ValueError("C_d[0] and C_a[0] must be 0 (no-action options are free)")
    if np.any(P < 0):
        raise ValueError("P entries must be nonnegative")
    U = alpha * P - C_d[None, :]
    C = alpha * P + C_a[:, None]
    return SecurityGame(n=n1 - 1, alpha=alpha, P=P, C_d=C_d, C_a=C_a, U=U, C=C)


def zero_sum_equivalent(game: SecurityGame) -> np.ndarray:
    """Zero-sum matrix M' = alpha P - C_d[j] + C_a[i].

    Own-action costs enter each player's payoff additively, so best responses
    under (U, C) coincide with best responses under M' for every opponent
    strategy; all solvers target the saddle point of M'.
    """
    return game.alpha * game.P - game.C_d[None, :] + game.C_a[:, None]


def _check_simplex(v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if np.any(v < -SIMPLEX_TOL) or abs(float(v.sum()) - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name} is not on the simplex (tol {SIMPLEX_TOL:g})")
    return v


def best_response_defender(game: SecurityGame, g: np.ndarray) -> int:
    """argmax_j of the expected defender utility; lowest index on ties."""
    g = _check_simplex(g, "g")
    return int(np.argmax(g @ game.U))


def best_response_attacker(game: SecurityGame, f: np.ndarray) -> int:
    """argmin_i of the expected attacker cost; lowest index on ties."""
    f = _check_simplex(f, "f")
    return int(np.argmin(game.C @ f))


def exploitability(
    game: SecurityGame, profile: StrategyProfile
) -> tuple[float, float]:
    """Best-response gain of each player against the profile (0 at equilibrium)."""
    g = _check_simplex(profile.g, "g")
    f = _check_simplex(profile.f, "f")
    def_values = g @ game.U
    atk_values = game.C @ f
    dgap = float(np.max(def_values) - def_values @ f)
    agap = float(g @ atk_values - np.min(atk_values))
    return max(0.0, dgap), max(0.0, agap)


def payoff_range(game: SecurityGame) -> float:
    """Spread of the zero-sum-equivalent payoffs; scales default tolerances."""
    M = zero_sum_equivalent(game)
    return float(np.max(M) - np.min(M))


def _midpoint_value(game: SecurityGame, g: np.ndarray, f: np.ndarray) -> float:
    M = zero_sum_equivalent(game)
    upper = float(np.max(g @ M))
    lower = float(np.min(M @ f))
    return 0.5 * (upper + lower)


def _argmax_list(vals) -> int:
    best, arg = vals[0], 0
    for k in range(1, len(vals)):
        if vals[k] > best:
            best, arg = vals[k], k
    return arg


def _argmin_list(vals) -> int:
    best, arg = vals[0], 0
    for k in range(1, len(vals)):
        if vals[k] < best:
            best, arg = vals[k], k
    return arg


def fictitious_play(
    game: SecurityGame,
    max_iters: int,
    tol: float | None = None,
    checkpoint: int = 1000,
) -> EquilibriumResult:
    """Simultaneous fictitious play against empirical opponent averages.

    Both players best-respond each round to the opponent's empirical play
    frequency (seeded with one virtual uniform round), and the time-averaged
    strategies are returned. Convergence follows from best-response
    equivalence to the zero-sum game; stops early once both exploitability
    gaps drop below ``tol`` (default 1e-3 of the payoff range).
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if tol is None:
        tol = 1e-3 * payoff_range(game)
    n1 = game.n + 1
    U_rows = game.U.tolist()
    C_rows = game.C.tolist()
    # cumulative expected payoffs under the opponent's empirical counts,
    # initialized with the virtual uniform round
    def_score = [sum(U_rows[i][j] for i in range(n1)) / n1 for j in range(n1)]
    atk_score = [sum(C_rows[i][j] for j in range(n1)) / n1 for i in range(n1)]
    g_counts = [0] * n1
    f_counts = [0] * n1
    trace: list[tuple[int, float, float]] = []
    t = 0
    while t < max_iters:
        j_t = _argmax_list(def_score)
        i_t = _argmin_list(atk_score)
        g_counts[i_t] += 1
        f_counts[j_t] += 1
        u_row = U_rows[i_t]
        for k in range(n1):
            def_score[k] += u_row[k]
            atk_score[k] += C_rows[k][j_t]
        t += 1
        if t % checkpoint == 0 or t == max_iters:
            g_avg = np.array(g_counts, dtype=float) / t
            f_avg = np.array(f_counts, dtype=float) / t
            dgap, agap = exploitability(game, StrategyProfile(g=g_avg, f=f_avg))
            trace.append((t, dgap, agap))
            if dgap < tol and agap < tol:
                break
    g_avg = np.array(g_counts, dtype=float) / t
    f_avg = np.array(f_counts, dtype=float) / t
    dgap, agap = exploitability(game, StrategyProfile(g=g_avg, f=f_avg))
    return EquilibriumResult(
        profile=StrategyProfile(g=g_avg, f=f_avg),
        defender_gap=dgap,
        attacker_gap=agap,
        game_value=_midpoint_value(game, g_avg, f_avg),
        iterations=t,
        trace=tuple(trace),
    )


def regret_matching(
    game: SecurityGame,
    max_iters: int,
    tol: float | None = None,
    seed: int = 0,
    checkpoint: int = 1000,
) -> EquilibriumResult:
    """No-regret learning: play proportionally to positive cumulative regret.

    Actions are sampled (seeded, reproducible), regrets accumulate against the
    realized opponent action, and the empirical frequencies of play are
    returned; their average regret decays like O(1/sqrt(t)).
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if tol is None:
        tol = 1e-3 * payoff_range(game)
    rng = np.random.default_rng(seed)
    n1 = game.n + 1
    U_rows = game.U.tolist()
    C_rows = game.C.tolist()
    u_atk = rng.random(max_iters).tolist()
    u_def = rng.random(max_iters).tolist()
    reg_a = [0.0] * n1
    reg_d = [0.0] * n1
    g_counts = [0] * n1
    f_counts = [0] * n1
    trace: list[tuple[int, float, float]] = []
    t = 0
    while t < max_iters:
        i_t = _sample_from_regrets(reg_a, u_atk[t], n1)
        j_t = _sample_from_regrets(reg_d, u_def[t], n1)
        g_counts[i_t] += 1
        f_counts[j_t] += 1
        c_paid = C_rows[i_t][j_t]
        u_got = U_rows[i_t][j_t]
        u_row = U_rows[i_t]
        for k in range(n1):
            reg_a[k] += c_paid - C_rows[k][j_t]
            reg_d[k] += u_row[k] - u_got
        t += 1
        if t % checkpoint == 0 or t == max_iters:
            g_avg = np.array(g_counts, dtype=float) / t
            f_avg = np.array(f_counts, dtype=float) / t
            dgap, agap = exploitability(game, StrategyProfile(g=g_avg, f=f_avg))
            trace.append((t, dgap, agap))
            if dgap < tol and agap < tol:
                break
    g_avg = np.array(g_counts, dtype=float) / t
    f_avg = np.array(f_counts, dtype=float) / t
    dgap, agap = exploitability(game, StrategyProfile(g=g_avg, f=f_avg))
    return EquilibriumResult(
        profile=StrategyProfile(g=g_avg, f=f_avg),
        defender_gap=dgap,
        attacker_gap=agap,
        game_value=_midpoint_value(game, g_avg, f_avg),
        iterations=t,
        trace=tuple(trace),
    )


def _sample_from_regrets(regrets, u: float, n1: int) -> int:
    total = 0.0
    for r in regrets:
        if r > 0.0:
            total += r
    if total <= 0.0:
        idx = int(u * n1)
        return idx if idx < n1 else n1 - 1
    acc = 0.0
    threshold = u * total
    for k in range(n1):
        r = regrets[k]
        if r > 0.0:
            acc += r
            if threshold < acc:
                return k
    return n1 - 1


def solve_exact(game: SecurityGame, gap_tol: float = 1e-9) -> EquilibriumResult:
    """Exact saddle point of the zero-sum-equivalent game by support enumeration.

    Tries every square support pair in increasing size (so pure saddles win
    ties), solves the linear indifference system, and returns the first
    simplex-feasible solution with no profitable deviation. Small games only.
    """
    n1 = game.n + 1
    if n1 > 5:
        raise ValueError("support enumeration limited to n+1 <= 5; use learning solvers")
    M = zero_sum_equivalent(game)
    examined = 0
    for k in range(1, n1 + 1):
        for S_a in itertools.combinations(range(n1), k):
            for S_d in itertools.combinations(range(n1), k):
                examined += 1
                sol = _support_solution(M, S_a, S_d, n1)
                if sol is None:
                    continue
                g, f = sol
                profile = StrategyProfile(g=g, f=f)
                dgap, agap = exploitability(game, profile)
                if dgap <= gap_tol and agap <= gap_tol:
                    return EquilibriumResult(
                        profile=profile,
                        defender_gap=dgap,
                        attacker_gap=agap,
                        game_value=float(g @ M @ f),
                        iterations=examined,
                        trace=(),
                    )
    raise RuntimeError("support enumeration found no equilibrium (numeric failure)")


def _support_solution(M, S_a, S_d, n1):
    k = len(S_a)
    sub = M[np.ix_(S_a, S_d)]
    # attacker weights + value: defender indifferent across its support
    A_g = np.zeros((k + 1, k + 1))
    A_g[:k, :k] = sub.T
    A_g[:k, k] = -1.0
    A_g[k, :k] = 1.0
    b = np.zeros(k + 1)
    b[k] = 1.0
    # defender weights + value: attacker indifferent across its support
    A_f = np.zeros((k + 1, k + 1))
    A_f[:k, :k] = sub
    A_f[:k, k] = -1.0
    A_f[k, :k] = 1.0
    try:
        sol_g = np.linalg.solve(A_g, b)
        sol_f = np.linalg.solve(A_f, b)
    except np.linalg.LinAlgError:
        return None
    if np.max(np.abs(A_g @ sol_g - b)) > 1e-9 or np.max(np.abs(A_f @ sol_f - b)) > 1e-9:
        return None
    g_sup, f_sup = sol_g[:k], sol_f[:k]
    if np.min(g_sup) < -1e-10 or np.min(f_sup) < -1e-10:
        return None
    g = np.zeros(n1)
    f = np.zeros(n1)
    g[list(S_a)] = np.clip(g_sup, 0.0, None)
    f[list(S_d)] = np.clip(f_sup, 0.0, None)
    g /= g.sum()
    f /= f.sum()
    return g, f
