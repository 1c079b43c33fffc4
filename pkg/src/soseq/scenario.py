"""Scenario files: a strict line-oriented key/value format holding every free
parameter of a run (model, transitions, game, controller, sim, resilience,
optional network). Unknown keys are rejected; applied defaults are recorded."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .mjls import MjlsModel, Mode, TransitionModel, validate_model

SCENARIO_VERSION = 1


class ScenarioError(ValueError):
    """Malformed scenario file (missing/unknown key, bad dimension, bad value)."""


@dataclass(frozen=True)
class GameSection:
    alpha: float
    C_d: np.ndarray
    C_a: np.ndarray


@dataclass(frozen=True)
class ControllerSection:
    Q: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class SimSection:
    dt: float
    horizon: float
    burn_in: float
    reps: int
    seed: int
    attack_time: float
    paired_seeds: int


@dataclass(frozen=True)
class ResilienceSection:
    eps_deg: float
    eps_rec: float
    dwell: float
    tail_window: float
    T_target: float
    D_target: float


@dataclass(frozen=True)
class ColearnSection:
    max_outer: int
    tol_s: float
    tol_p: Optional[float]  # None: 1e-2 * nominal power at runtime
    tol_g: Optional[float]  # None: 1e-3 * payoff spread at runtime
    damping: float
    solver: str  # "auto" | "exact" | "fp"


@dataclass(frozen=True)
class NetworkSubsystem:
    name: str
    file: str
    scenario: "Scenario"
    weight: float
    attack: Optional[int]  # forced attack index, None: sample from g*
    defense: Optional[int]  # forced defense index, None: sample from f*


@dataclass(frozen=True)
class NetworkSection:
    subsystems: tuple[NetworkSubsystem, ...]
    edges: tuple[tuple[str, str, float], ...]
    sharing: str  # "isolated" | "shared-beliefs"


@dataclass(frozen=True)
class Scenario:
    path: str
    version: int
    model: MjlsModel
    trans: TransitionModel
    game: GameSection
    controller: ControllerSection
    sim: SimSection
    resilience: ResilienceSection
    colearn: ColearnSection
    network: Optional[NetworkSection]
    defaults_applied: tuple[str, ...]

    @property
    def n_attacks(self) -> int:
        return self.trans.n_attacks

    @property
    def nominal_power(self) -> float:
        return float(self.model.y_offset[0, self.model.perf_index])


class _KeyStore:
    """Raw key -> (value, line) map with strict consumption tracking."""

    def __init__(self, path: str):
        self.path = path
        self.entries: dict[str, tuple[Any, int]] = {}
        self.defaults: list[str] = []

    def put(self, key: str, value: Any, line: int) -> None:
        if key in self.entries:
            raise ScenarioError(f"{self.path}:{line}: duplicate key '{key}'")
        self.entries[key] = (value, line)

    def take(self, key: str, default: Any = ...) -> Any:
        if key in self.entries:
            value, _ = self.entries.pop(key)
            return value
        if default is ...:
            raise ScenarioError(f"{self.path}: missing required key '{key}'")
        self.defaults.append(key)
        return default

    def has(self, key: str) -> bool:
        return key in self.entries

    def prefixed(self, prefix: str) -> list[str]:
        return [k for k in self.entries if k.startswith(prefix)]

    def reject_leftovers(self) -> None:
        if self.entries:
            key = min(self.entries, key=lambda k: self.entries[k][1])
            _, line = self.entries[key]
            raise ScenarioError(f"{self.path}:{line}: unknown key '{key}'")


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _load_keys(path: str) -> _KeyStore:
    store = _KeyStore(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                parts = stripped.split(None, 1)
                if len(parts) != 2:
                    raise ScenarioError(
                        f"{path}:{lineno}: expected 'key value', got '{stripped}'"
                    )
                store.put(parts[0], _parse_value(parts[1]), lineno)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ScenarioError(f"{path} is not valid UTF-8: {exc}") from exc
    return store


def _as_float(store: _KeyStore, key: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{store.path}: key '{key}' must be a number")
    value = float(value)
    if not math.isfinite(value):
        raise ScenarioError(f"{store.path}: key '{key}' is not finite")
    return value


def _as_int(store: _KeyStore, key: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"{store.path}: key '{key}' must be an integer")
    return value


def _as_array(store: _KeyStore, key: str, value: Any, shape: tuple[int, ...]) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{store.path}: key '{key}' is not numeric: {exc}") from exc
    if arr.shape != shape:
        raise ScenarioError(
            f"{store.path}: key '{key}' has shape {arr.shape}, expected {shape}"
        )
    if not np.isfinite(arr).all():
        raise ScenarioError(f"{store.path}: key '{key}' contains non-finite entries")
    return arr


def parse_scenario(path: str) -> Scenario:
    """Parse and fully validate a scenario file, applying documented defaults."""
    store = _load_keys(path)

    version = _as_int(store, "version", store.take("version"))
    if version != SCENARIO_VERSION:
        raise ScenarioError(
            f"{path}: unsupported version {version} (this build reads {SCENARIO_VERSION})"
        )

    n_x = _as_int(store, "model.n_x", store.take("model.n_x"))
    n_u = _as_int(store, "model.n_u", store.take("model.n_u"))
    n_w = _as_int(store, "model.n_w", store.take("model.n_w"))
    n_y = _as_int(store, "model.n_y", store.take("model.n_y"))
    if min(n_x, n_u, n_w, n_y) < 1:
        raise ScenarioError(f"{path}: model dimensions must be positive")
    perf_index = _as_int(store, "model.perf_index", store.take("model.perf_index"))
    noise_std = _as_array(
        store, "model.noise_std", store.take("model.noise_std"), (n_w,)
    )
    n_modes = _as_int(store, "model.modes", store.take("model.modes"))
    if n_modes < 1:
        raise ScenarioError(f"{path}: model.modes must be at least 1")

    modes = []
    A = np.empty((n_modes, n_x, n_x))
    B = np.empty((n_modes, n_x, n_u))
    E = np.empty((n_modes, n_x, n_w))
    C = np.empty((n_modes, n_y, n_x))
    y_off = np.zeros((n_modes, n_y))
    for m in range(n_modes):
        base = f"model.mode.{m}"
        label = store.take(f"{base}.label")
        if not isinstance(label, str):
            raise ScenarioError(f"{path}: key '{base}.label' must be text")
        modes.append(Mode(index=m, label=label))
        A[m] = _as_array(store, f"{base}.A", store.take(f"{base}.A"), (n_x, n_x))
        B[m] = _as_array(store, f"{base}.B", store.take(f"{base}.B"), (n_x, n_u))
        E[m] = _as_array(store, f"{base}.E", store.take(f"{base}.E"), (n_x, n_w))
        C[m] = _as_array(store, f"{base}.C", store.take(f"{base}.C"), (n_y, n_x))
        off = store.take(f"{base}.y_offset", [0.0] * n_y)
        y_off[m] = _as_array(store, f"{base}.y_offset", off, (n_y,))
    model = MjlsModel(
        n_x=n_x,
        n_u=n_u,
        n_w=n_w,
        n_y=n_y,
        modes=tuple(modes),
        A=A,
        B=B,
        E=E,
        C=C,
        y_offset=y_off,
        noise_std=noise_std,
        perf_index=perf_index,
    )

    n_attacks = _as_int(store, "transition.n_attacks", store.take("transition.n_attacks"))
    if n_attacks < 0:
        raise ScenarioError(f"{path}: transition.n_attacks must be nonnegative")
    n1 = n_attacks + 1
    Q = np.empty((n1, n1, n_modes, n_modes))
    for i in range(n1):
        for j in range(n1):
            key = f"transition.Q.{i}.{j}"
            Q[i, j] = _as_array(store, key, store.take(key), (n_modes, n_modes))
    trans = TransitionModel(Q=Q)

    violations = validate_model(model, trans)
    if violations:
        raise ScenarioError(f"{path}: invalid model: " + "; ".join(violations))

    alpha = _as_float(store, "game.alpha", store.take("game.alpha", 1.0))
    C_d = _as_array(store, "game.C_d", store.take("game.C_d", [0.0] * n1), (n1,))
    C_a = _as_array(store, "game.C_a", store.take("game.C_a", [0.0] * n1), (n1,))
    if alpha <= 0:
        raise ScenarioError(f"{path}: game.alpha must be positive")
    if C_d[0] != 0.0 or C_a[0] != 0.0:
        raise ScenarioError(f"{path}: game.C_d[0] and game.C_a[0] must be 0")
    game = GameSection(alpha=alpha, C_d=C_d, C_a=C_a)

    ctrl_Q = _as_array(
        store, "controller.Q", store.take("controller.Q", np.eye(n_x).tolist()), (n_x, n_x)
    )
    ctrl_R = _as_array(
        store, "controller.R", store.take("controller.R", np.eye(n_u).tolist()), (n_u, n_u)
    )
    controller = ControllerSection(Q=ctrl_Q, R=ctrl_R)

    sim = SimSection(
        dt=_as_float(store, "sim.dt", store.take("sim.dt")),
        horizon=_as_float(store, "sim.horizon", store.take("sim.horizon")),
        burn_in=_as_float(store, "sim.burn_in", store.take("sim.burn_in", 0.0)),
        reps=_as_int(store, "sim.reps", store.take("sim.reps", 32)),
        seed=_as_int(store, "sim.seed", store.take("sim.seed", 0)),
        attack_time=_as_float(store, "sim.attack_time", store.take("sim.attack_time", 0.0)),
        paired_seeds=_as_int(store, "sim.paired_seeds", store.take("sim.paired_seeds", 100)),
    )
    if sim.dt <= 0 or sim.horizon < sim.dt:
        raise ScenarioError(f"{path}: need sim.dt > 0 and sim.horizon >= sim.dt")
    if sim.burn_in >= sim.horizon:
        raise ScenarioError(f"{path}: sim.burn_in must be below sim.horizon")
    if sim.reps < 1 or sim.paired_seeds < 1:
        raise ScenarioError(f"{path}: sim.reps and sim.paired_seeds must be >= 1")

    res = ResilienceSection(
        eps_deg=_as_float(store, "resilience.eps_deg", store.take("resilience.eps_deg", 0.1)),
        eps_rec=_as_float(store, "resilience.eps_rec", store.take("resilience.eps_rec", 0.05)),
        dwell=_as_float(store, "resilience.dwell", store.take("resilience.dwell", 10.0)),
        tail_window=_as_float(
            store, "resilience.tail_window", store.take("resilience.tail_window", 20.0)
        ),
        T_target=_as_float(store, "resilience.T_target", store.take("resilience.T_target", 60.0)),
        D_target=_as_float(store, "resilience.D_target", store.take("resilience.D_target", 0.1)),
    )
    if not (0 < res.eps_rec <= res.eps_deg < 1):
        raise ScenarioError(f"{path}: need 0 < eps_rec <= eps_deg < 1")
    if res.tail_window > sim.horizon:
        raise ScenarioError(f"{path}: resilience.tail_window exceeds sim.horizon")

    tol_p = store.take("colearn.tol_p", None)
    tol_g = store.take("colearn.tol_g", None)
    colearn = ColearnSection(
        max_outer=_as_int(store, "colearn.max_outer", store.take("colearn.max_outer", 200)),
        tol_s=_as_float(store, "colearn.tol_s", store.take("colearn.tol_s", 1e-3)),
        tol_p=None if tol_p is None else _as_float(store, "colearn.tol_p", tol_p),
        tol_g=None if tol_g is None else _as_float(store, "colearn.tol_g", tol_g),
        damping=_as_float(store, "colearn.damping", store.take("colearn.damping", 0.5)),
        solver=store.take("colearn.solver", "auto"),
    )
    if colearn.solver not in ("auto", "exact", "fp"):
        raise ScenarioError(f"{path}: colearn.solver must be auto, exact, or fp")
    if not (0 < colearn.damping <= 1):
        raise ScenarioError(f"{path}: colearn.damping must lie in (0, 1]")

    network = None
    if store.prefixed("network."):
        network = _parse_network(store, os.path.dirname(os.path.abspath(path)))

    store.reject_leftovers()
    return Scenario(
        path=path,
        version=version,
        model=model,
        trans=trans,
        game=game,
        controller=controller,
        sim=sim,
        resilience=res,
        colearn=colearn,
        network=network,
        defaults_applied=tuple(sorted(store.defaults)),
    )


def _parse_network(store: _KeyStore, base_dir: str) -> NetworkSection:
    sharing = store.take("network.sharing", "isolated")
    if sharing not in ("isolated", "shared-beliefs"):
        raise ScenarioError(
            f"{store.path}: network.sharing must be isolated or shared-beliefs"
        )
    names = sorted(
        {k.split(".")[2] for k in store.prefixed("network.subsystem.")}
    )
    if not names:
        raise ScenarioError(f"{store.path}: network section lists no subsystems")
    subsystems = []
    for name in names:
        base = f"network.subsystem.{name}"
        file_rel = store.take(f"{base}.file")
        if not isinstance(file_rel, str):
            raise ScenarioError(f"{store.path}: key '{base}.file' must be a path")
        weight = _as_float(store, f"{base}.weight", store.take(f"{base}.weight"))
        attack = store.take(f"{base}.attack", None)
        defense = store.take(f"{base}.defense", None)
        sub_path = os.path.join(base_dir, file_rel)
        sub = parse_scenario(sub_path)
        if sub.network is not None:
            raise ScenarioError(f"{store.path}: nested networks are not supported")
        for label, idx in (("attack", attack), ("defense", defense)):
            if idx is not None and not (
                isinstance(idx, int) and 0 <= idx <= sub.n_attacks
            ):
                raise ScenarioError(
                    f"{store.path}: {base}.{label} out of range [0, {sub.n_attacks}]"
                )
        subsystems.append(
            NetworkSubsystem(
                name=name,
                file=file_rel,
                scenario=sub,
                weight=weight,
                attack=attack,
                defense=defense,
            )
        )
    weights = np.array([s.weight for s in subsystems])
    if np.any(weights < 0) or abs(float(weights.sum()) - 1.0) > 1e-9:
        raise ScenarioError(
            f"{store.path}: subsystem weights must be nonnegative and sum to 1"
        )
    edges = []
    for key in sorted(store.prefixed("network.edge."), key=lambda k: int(k.split(".")[2])):
        value = store.take(key)
        if (
            not isinstance(value, list)
            or len(value) != 3
            or not all(isinstance(v, str) for v in value[:2])
        ):
            raise ScenarioError(
                f"{store.path}: key '{key}' must be [source, target, kappa]"
            )
        src, dst, kappa = value[0], value[1], _as_float(store, key, value[2])
        if kappa < 0:
            raise ScenarioError(f"{store.path}: key '{key}' has negative kappa")
        if src == dst:
            raise ScenarioError(f"{store.path}: key '{key}' is a self-loop")
        known = {s.name for s in subsystems}
        if src not in known or dst not in known:
            raise ScenarioError(f"{store.path}: key '{key}' references unknown subsystem")
        edges.append((src, dst, kappa))
    return NetworkSection(
        subsystems=tuple(subsystems), edges=tuple(edges), sharing=sharing
    )


def scenario_manifest(scn: Scenario) -> dict:
    """Fully resolved configuration as a JSON-ready mapping."""
    model = scn.model
    out: dict[str, Any] = {
        "version": scn.version,
        "model": {
            "n_x": model.n_x,
            "n_u": model.n_u,
            "n_w": model.n_w,
            "n_y": model.n_y,
            "perf_index": model.perf_index,
            "noise_std": model.noise_std.tolist(),
            "modes": [
                {
                    "index": m.index,
                    "label": m.label,
                    "A": model.A[m.index].tolist(),
                    "B": model.B[m.index].tolist(),
                    "E": model.E[m.index].tolist(),
                    "C": model.C[m.index].tolist(),
                    "y_offset": model.y_offset[m.index].tolist(),
                }
                for m in model.modes
            ],
        },
        "transition": {
            "n_attacks": scn.n_attacks,
            "Q": scn.trans.Q.tolist(),
        },
        "game": {
            "alpha": scn.game.alpha,
            "C_d": scn.game.C_d.tolist(),
            "C_a": scn.game.C_a.tolist(),
        },
        "controller": {"Q": scn.controller.Q.tolist(), "R": scn.controller.R.tolist()},
        "sim": {
            "dt": scn.sim.dt,
            "horizon": scn.sim.horizon,
            "burn_in": scn.sim.burn_in,
            "reps": scn.sim.reps,
            "seed": scn.sim.seed,
            "attack_time": scn.sim.attack_time,
            "paired_seeds": scn.sim.paired_seeds,
        },
        "resilience": {
            "eps_deg": scn.resilience.eps_deg,
            "eps_rec": scn.resilience.eps_rec,
            "dwell": scn.resilience.dwell,
            "tail_window": scn.resilience.tail_window,
            "T_target": scn.resilience.T_target,
            "D_target": scn.resilience.D_target,
        },
        "colearn": {
            "max_outer": scn.colearn.max_outer,
            "tol_s": scn.colearn.tol_s,
            "tol_p": scn.colearn.tol_p,
            "tol_g": scn.colearn.tol_g,
            "damping": scn.colearn.damping,
            "solver": scn.colearn.solver,
        },
        "defaults_applied": list(scn.defaults_applied),
    }
    if scn.network is not None:
        out["network"] = {
            "sharing": scn.network.sharing,
            "subsystems": [
                {
                    "name": s.name,
                    "file": s.file,
                    "weight": s.weight,
                    "attack": s.attack,
                    "defense": s.defense,
                    "manifest": scenario_manifest(s.scenario),
                }
                for s in scn.network.subsystems
            ],
            "edges": [list(e) for e in scn.network.edges],
        }
    return out
