"""Scenario files and the terminal-ingredient cache.

A scenario is a TOML file; every table and key is checked against the
schema below and unknown keys are rejected.  Example::

    model = "cartpole"
    horizon = 10
    episodes = 4
    steps = 50
    seed = 0

    [initial]
    x0 = [0.02, 0.0, 0.02, 0.0]
    spread = [0.01, 0.0, 0.01, 0.0]

    [controller]
    backend = "alternating"

    [disturbance]
    kind = "uniform"

Relative paths are resolved against the directory of the file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from . import systems
from .model import ErrorBoundParams, Model
from .polytope import ConstraintSet, CostSpec, TerminalIngredients, synth_terminal, verify_rpi
from .scp import BACKENDS, MODES, RmpcController, ScpConfig, terminal_weight
from .sim import KINDS, DisturbancePolicy, SoftMpcController

SCENARIO_SCHEMA = "rnmpc.scenario/1"


class ConfigError(ValueError):
    """Invalid scenario file."""


class StaleCacheError(RuntimeError):
    """A cached terminal set does not belong to the scenario's model or error bound."""


@dataclass(frozen=True)
class CostConfig:
    Q_diag: tuple = ()
    R_diag: tuple = ()
    terminal: str = "auto"          # auto | synth | riccati
    discount: float = 1.0


@dataclass(frozen=True)
class ConstraintConfig:
    x_max: tuple = ()
    x_min: tuple = ()
    u_max: tuple = ()
    u_min: tuple = ()


@dataclass(frozen=True)
class ControllerConfig:
    mode: str = "full_scp"
    backend: str = "alternating"
    simplified: bool = False
    tau_bound: bool = True
    backoff: float = 0.0
    max_iter: int = 15
    trust: float | None = None
    fallback: bool = True
    terminal_method: str = "max"


@dataclass(frozen=True)
class DisturbanceConfig:
    kind: str = "uniform"
    row: int = 0


@dataclass(frozen=True)
class InitialConfig:
    x0: tuple = ()
    spread: tuple = ()


@dataclass(frozen=True)
class SoftConfig:
    penalty: float | None = None
    max_iter: int = 5


@dataclass(frozen=True)
class BenchConfig:
    models: tuple = ("cartpole", "quadcopter", "rocket17")
    horizons: tuple = (10, 20, 40, 80)
    reps: int = 20


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario; see the module docstring for the file layout."""

    model: str
    horizon: int = 10
    episodes: int = 1
    steps: int = 50
    seed: int = 0
    output: str = "out"
    terminal_cache: str | None = None
    thin: int = 1
    workers: int | None = None
    cost: CostConfig = field(default_factory=CostConfig)
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    soft: SoftConfig = field(default_factory=SoftConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    base_dir: str = "."

    def __post_init__(self):
        if self.model not in systems.REGISTRY:
            raise ConfigError(f"unknown model id {self.model!r}; known: {', '.join(systems.REGISTRY)}")
        if self.horizon < 1:
            raise ConfigError("horizon must be a positive integer")
        if self.episodes < 1:
            raise ConfigError("episodes must be a positive integer (got an empty episode count)")
        if self.steps < 1:
            raise ConfigError("steps must be a positive integer")
        if self.thin < 0:
            raise ConfigError("thin must be nonnegative")
        c = self.controller
        if c.mode not in MODES:
            raise ConfigError(f"controller.mode must be one of {MODES}")
        if c.backend not in BACKENDS:
            raise ConfigError(f"controller.backend must be one of {BACKENDS}")
        if c.terminal_method not in ("max", "min"):
            raise ConfigError("controller.terminal_method must be 'max' or 'min'")
        if self.disturbance.kind not in KINDS:
            raise ConfigError(f"disturbance.kind must be one of {KINDS}")
        if self.cost.terminal not in ("auto", "synth", "riccati"):
            raise ConfigError("cost.terminal must be 'auto', 'synth' or 'riccati'")
        if not 0.0 < self.cost.discount <= 1.0:
            raise ConfigError("cost.discount must lie in (0, 1]")

    # -- paths ------------------------------------------------------------
    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def output_dir(self) -> Path:
        return self.path(self.output)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        mode = kw.pop("mode", None)
        out = replace(self, **kw)
        if mode is not None:
            out = replace(out, controller=replace(out.controller, mode=mode))
        return out

    # -- problem data -----------------------------------------------------
    def build_model(self) -> Model:
        return systems.load_model(self.model)

    def build_constraints(self) -> ConstraintSet:
        base = systems.model_entry(self.model)["constraints"]
        c = self.constraints
        pick = lambda key, default=None: list(getattr(c, key)) or base.get(key, default)  # noqa: E731
        return ConstraintSet.from_box(pick("x_max"), pick("u_max", ()), pick("x_min"), pick("u_min"))

    def build_cost(self, m: Model | None = None) -> CostSpec:
        base = systems.default_cost(self.model)
        Q = np.diag(_expand(self.cost.Q_diag, m.n_x if m else base.Q.shape[0])) if self.cost.Q_diag else base.Q
        R = np.diag(_expand(self.cost.R_diag, base.R.shape[0])) if self.cost.R_diag else base.R
        return CostSpec(Q, R)

    def validated_error_bound(self, m: Model) -> ErrorBoundParams:
        """The stored (validated) bound, independent of the controller flags."""
        return systems.stored_error_bound(self.model, m)

    def controller_error_bound(self, m: Model) -> ErrorBoundParams:
        err = self.validated_error_bound(m)
        return err if self.controller.tau_bound else err.simplified()

    def uses_terminal_set(self) -> bool:
        if self.controller.simplified:
            return False
        return self.cost.terminal in ("auto", "synth")

    def scp_config(self) -> ScpConfig:
        c = self.controller
        return ScpConfig(T=self.horizon, mode=c.mode, backend=c.backend, max_iter=c.max_iter,
                         trust=c.trust, simplified=c.simplified, backoff=c.backoff, fallback=c.fallback)

    def disturbance_policy(self) -> DisturbancePolicy:
        return DisturbancePolicy(self.disturbance.kind, self.seed, self.disturbance.row)

    def initial_states(self, n_x: int) -> np.ndarray:
        """One initial state per episode: ``x0`` plus a seeded uniform offset within ``spread``."""
        x0 = _expand(self.initial.x0, n_x) if self.initial.x0 else np.zeros(n_x)
        spread = _expand(self.initial.spread, n_x) if self.initial.spread else np.zeros(n_x)
        rng = np.random.default_rng([self.seed, 7919])
        return x0[None, :] + spread[None, :] * rng.uniform(-1.0, 1.0, (self.episodes, n_x))

    def to_dict(self) -> dict:
        def conv(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, tuple):
                return list(obj)
            return obj
        d = conv(self)
        d.pop("base_dir")
        d["schema"] = SCENARIO_SCHEMA
        return d


def _expand(v, n: int) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.size == 1:
        return np.full(n, a[0])
    if a.size != n:
        raise ConfigError(f"expected 1 or {n} entries, got {a.size}")
    return a


_SECTIONS = {"cost": CostConfig, "constraints": ConstraintConfig, "controller": ControllerConfig,
             "disturbance": DisturbanceConfig, "initial": InitialConfig, "soft": SoftConfig,
             "bench": BenchConfig}


def _section(cls, name: str, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}; "
                          f"allowed: {', '.join(known)}")
    kw = {}
    for k, v in raw.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_scenario(raw: dict, base_dir: str = ".") -> ScenarioConfig:
    """Validate a decoded TOML document."""
    raw = dict(raw)
    schema = raw.pop("schema", SCENARIO_SCHEMA)
    if schema != SCENARIO_SCHEMA:
        raise ConfigError(f"unsupported scenario schema {schema!r} (expected {SCENARIO_SCHEMA!r})")
    if "model" not in raw:
        raise ConfigError("missing required key 'model' (the model id)")
    top = {f.name for f in fields(ScenarioConfig)} - {"base_dir"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(top))}")
    kw = {}
    for k, v in raw.items():
        if k in _SECTIONS:
            kw[k] = _section(_SECTIONS[k], k, v)
        else:
            kw[k] = v
    for k in ("horizon", "episodes", "steps", "seed", "thin"):
        if k in kw and (not isinstance(kw[k], int) or isinstance(kw[k], bool)):
            raise ConfigError(f"{k} must be an integer")
    return ScenarioConfig(base_dir=base_dir, **kw)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc.strerror}") from None
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_scenario(raw, str(path.parent))


# ---------------------------------------------------------------------------
# terminal ingredients


def terminal_key(m: Model, err: ErrorBoundParams, C: ConstraintSet, cost: CostSpec, method: str) -> str:
    """Hash of everything the terminal synthesis depends on."""
    h = hashlib.sha256()
    h.update(m.fingerprint().encode())
    h.update(err.fingerprint().encode())
    for a in (C.H, C.b, cost.Q, cost.R):
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    h.update(method.encode())
    return h.hexdigest()[:16]


def load_terminal(path, m: Model, err: ErrorBoundParams, C: ConstraintSet, cost: CostSpec) -> TerminalIngredients:
    """Read cached terminal ingredients and refuse them if they belong to another problem."""
    path = Path(path)
    ti = TerminalIngredients.from_json(path.read_text())
    problems = []
    if ti.model_hash != m.fingerprint():
        problems.append(f"model hash {ti.model_hash or '<none>'} != {m.fingerprint()}")
    if ti.error_hash != err.fingerprint():
        problems.append(f"error-bound hash {ti.error_hash or '<none>'} != {err.fingerprint()}")
    if not problems:
        rep = verify_rpi(ti, err, C=C, cost=cost, model=m)
        if not rep.passed:
            problems.append(f"cached set fails the current checks ({', '.join(rep.failures)})")
    if problems:
        raise StaleCacheError(
            f"terminal cache {path} is stale: {'; '.join(problems)}. "
            f"Delete the file or regenerate it with `rnmpc synth-terminal --config <scenario>`.")
    return ti


def terminal_path(cfg: ScenarioConfig, m: Model, err: ErrorBoundParams, C: ConstraintSet,
                  cost: CostSpec) -> Path:
    if cfg.terminal_cache:
        return cfg.path(cfg.terminal_cache)
    key = terminal_key(m, err, C, cost, cfg.controller.terminal_method)
    return cfg.output_dir / "cache" / f"terminal-{cfg.model}-{key}.json"


def terminal_for(cfg: ScenarioConfig, m: Model, err: ErrorBoundParams, C: ConstraintSet, cost: CostSpec,
                 synthesize: bool = True) -> TerminalIngredients:
    """Cached terminal ingredients, synthesised and written on a miss."""
    path = terminal_path(cfg, m, err, C, cost)
    if path.exists():
        return load_terminal(path, m, err, C, cost)
    if not synthesize:
        raise FileNotFoundError(f"no terminal cache at {path}")
    ti = synth_terminal(m, cost, err, C, method=cfg.controller.terminal_method)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(ti.to_json())
    return ti


# ---------------------------------------------------------------------------
# controllers


@dataclass
class Problem:
    """Everything needed to build controllers for a scenario."""

    cfg: ScenarioConfig
    model: Model
    C: ConstraintSet
    cost: CostSpec
    err: ErrorBoundParams
    ti: TerminalIngredients | None

    def controller(self) -> RmpcController:
        return RmpcController(self.model, self.err, self.C, self.cost, self.ti, self.cfg.scp_config())

    def soft_controller(self) -> SoftMpcController:
        s = self.cfg.soft
        cost = self.cost if self.ti is None else self.cost.with_terminal(self.ti.P)
        return SoftMpcController(self.model, self.C, cost, self.cfg.horizon, s.penalty, s.max_iter)


def build_problem(cfg: ScenarioConfig) -> Problem:
    m = cfg.build_model()
    C = cfg.build_constraints()
    cost = cfg.build_cost(m)
    err = cfg.controller_error_bound(m)
    ti = None
    if cfg.uses_terminal_set():
        ti = terminal_for(cfg, m, err, C, cost)
    else:
        cost = cost.with_terminal(terminal_weight(m, cost, cfg.cost.discount))
    return Problem(cfg, m, C, cost, err, ti)


class ControllerFactory:
    """Picklable zero-argument factory used by parallel episode runs."""

    def __init__(self, cfg: ScenarioConfig, soft: bool = False):
        self.cfg = cfg
        self.soft = soft
        self._problem = None

    def __getstate__(self):
        return {"cfg": self.cfg, "soft": self.soft, "_problem": None}

    def __call__(self):
        if self._problem is None:
            self._problem = build_problem(self.cfg)
        return self._problem.soft_controller() if self.soft else self._problem.controller()


def config_json(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=1)
