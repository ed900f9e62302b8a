"""Closed-loop simulation driver: configuration, disturbance policies,
trace capture, CSV/JSON artifacts, and independent trace verification.

A simulation executes the offline initializer once, then the per-step
controller (nominal or robust) until the predicted terminal-state norm
falls below the termination threshold or the step cap is reached.  Every
run is deterministic given its configuration and RNG seed.

Configuration is JSON with keys mirroring :class:`SimulationConfig`
(matrices are row-major nested arrays)::

    {
      "preset": "example1",              # or inline "model" + "problem"
      "mode": "nominal",                 # "nominal" | "robust"
      "x_init": [5.0, 10.0],             # optional for presets
      "maxiters": 3, "tol": 1e-6,        # controller overrides
      "termination_threshold": 1e-4,     # null disables early termination
      "step_cap": 100,
      "disturbance": {"policy": "uniform", "seed": 7},
      "disturbance_box": {"lower": [...], "upper": [...]},  # W override
      "rng_seed": 7,
      "out_dir": "runs/demo",
      "record_step0_tubes": false,
      "terminal_ingredients": "sidecar.json"   # inline robust only
    }

Inline models use ``"model"``::

    {"dt": 8e-3, "continuous": true, "n_x": 2, "n_u": 1,
     "g": [expr, ...], "h": [expr, ...]}        # one expr per state

where each convex expression is one of::

    {"affine": {"a": [...], "b": 0.0}}
    {"quad":   {"W": [[...]], "C": [[...]], "d": [...]}}
    {"exp":    {"scale": s, "a": [...], "b": 0.0}}
    {"sum":    {"terms": [expr, ...], "weights": [...]}}

and ``"problem"`` supplies N, Q, R, x_ref, u_ref, the constraint sets
(``{"H": ..., "d": ...}`` | ``{"box": {"lower", "upper"}}`` |
``{"symmetric_box": [...]}``), plus either ``X_N`` (nominal) or
``terminal_box``/``beta``/``W`` (robust); K and Q_N default to the
Riccati pair for (Q, R) unless given or loaded from a terminal-ingredient
sidecar file.

Artifacts written per run (UTF-8, comma-separated, '.' decimal,
deterministic row order; re-running the same configuration and seed
produces byte-identical CSVs):

* ``trajectory.csv`` — ``step,x0..,u0..,w0..,stage_cost``; one row per
  executed step (the final state appears in ``summary.json``).
* ``iterations.csv`` — ``step,iter,J_star,c_norm,solver_iters``.
* ``tube.csv`` (robust) — ``step,k,lower0..,upper0..``; the tube from the
  final controller iteration of each step, in absolute state coordinates.
* ``tube_seed.csv`` (robust) — same schema; the propagated tube of the
  first iteration of each step.  Verification derives cross-step nesting
  from this file together with ``tube.csv``.
* ``tube_step0.csv`` (robust, flag-controlled) — ``iter,k,lower..,upper..``;
  solved tubes from every controller iteration of step 0.
* ``summary.json`` — the trace header: RNG algorithm identifier and seed,
  termination reason, final state, J* at step 0, accumulated closed-loop
  cost, stage-cost weights, constraint data needed by ``verify``, recorded
  wall-clock per step (never asserted), and the invariant-check results.

The checker (:func:`verify_trace`) re-derives the run's guarantees purely
from the emitted files — per-step cost descent across controller
iterations, stage-cost and accumulated-cost consistency, tube containment
of the realized states, disturbance-bound membership, cross-step tube
nesting, and terminal-box membership — sharing only the box/tube geometry
types with the controller.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .expr import (
    Affine,
    ConvexExpr,
    DCFunctionSpec,
    ExpAffine,
    QuadForm,
    WeightedSum,
    eval_dc,
)
from .geometry import Box, BoxTube, Polytope
from .models import (
    ContinuousModelSpec,
    DisturbanceBox,
    EquilibriumReference,
    NMPCProblem,
    PRESETS,
    RobustProblem,
    discretize_euler,
    example1_initial_state,
    example2_initial_state,
)
from .nominal import SeedInitializationError, initialize_seed, run_time_step
from .robust import initialize_seed_robust, run_time_step_robust
from . import terminal as term

__all__ = [
    "ConfigError",
    "DisturbancePolicy",
    "SimulationConfig",
    "SimulationTrace",
    "TraceCheck",
    "load_config",
    "run",
    "emit_csv",
    "write_summary",
    "verify_trace",
    "cli",
    "RNG_ALGORITHM",
    "EXIT_OK",
    "EXIT_ERROR",
    "EXIT_INVARIANT",
    "EXIT_USAGE",
]

RNG_ALGORITHM = "PCG64"

MODE_NOMINAL = "nominal"
MODE_ROBUST = "robust"

POLICY_ZERO = "zero"
POLICY_UNIFORM = "uniform"
POLICY_VERTEX = "vertex"
_POLICIES = (POLICY_ZERO, POLICY_UNIFORM, POLICY_VERTEX)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVARIANT = 2
EXIT_USAGE = 64

TRAJECTORY_FILE = "trajectory.csv"
ITERATIONS_FILE = "iterations.csv"
TUBE_FILE = "tube.csv"
TUBE_SEED_FILE = "tube_seed.csv"
TUBE_STEP0_FILE = "tube_step0.csv"
SUMMARY_FILE = "summary.json"

_DEFAULT_STEP_CAP = 1000
_DEFAULT_OUT_DIR = "scmpc_trace"

_INITIAL_STATES = {
    "example1": example1_initial_state,
    "example2": example2_initial_state,
}


class ConfigError(ValueError):
    """Invalid or inconsistent simulation configuration."""


# ---------------------------------------------------------------------------
# Disturbance policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DisturbancePolicy:
    """Per-step additive disturbance draw.

    ``zero`` consumes no randomness; ``uniform`` draws componentwise from
    the disturbance box; ``vertex`` picks a uniformly random box vertex.
    The policy's own seed, when given, overrides the run-level RNG seed.
    """

    kind: str
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in _POLICIES:
            raise ConfigError(
                f"unknown disturbance policy {self.kind!r}; "
                f"expected one of {_POLICIES}")

    def effective_seed(self, run_seed: int) -> int:
        return int(run_seed if self.seed is None else self.seed)

    def sampler(self, box: Optional[DisturbanceBox], n_x: int,
                run_seed: int) -> Callable[[], np.ndarray]:
        if self.kind == POLICY_ZERO:
            return lambda: np.zeros(n_x)
        if box is None:
            raise ConfigError(
                f"disturbance policy {self.kind!r} needs a disturbance box")
        rng = np.random.Generator(
            np.random.PCG64(self.effective_seed(run_seed)))
        lo, up = box.w_lower, box.w_upper
        if self.kind == POLICY_UNIFORM:
            return lambda: rng.uniform(lo, up)
        return lambda: np.where(rng.integers(0, 2, size=n_x) == 1, up, lo)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class SimulationConfig:
    """Resolved simulation setup (problem data plus run parameters)."""

    problem: Union[NMPCProblem, RobustProblem]
    mode: str
    x_init: np.ndarray
    step_cap: int = _DEFAULT_STEP_CAP
    disturbance: Optional[DisturbancePolicy] = None
    rng_seed: int = 0
    out_dir: Optional[str] = None
    record_step0_tubes: bool = False
    preset: Optional[str] = None
    sampling_box: Optional[DisturbanceBox] = None  # nominal-mode draws only

    def __post_init__(self):
        if self.mode not in (MODE_NOMINAL, MODE_ROBUST):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == MODE_ROBUST:
            if not isinstance(self.problem, RobustProblem):
                raise ConfigError(
                    "robust mode needs robust problem data "
                    "(disturbance box and terminal ingredients)")
            if self.disturbance is None:
                raise ConfigError(
                    "robust mode requires an explicit disturbance policy")
        elif not isinstance(self.problem, NMPCProblem):
            raise ConfigError("nominal mode needs nominal problem data")
        if self.disturbance is None:
            self.disturbance = DisturbancePolicy(POLICY_ZERO)
        if self.step_cap < 0:
            raise ConfigError("step cap must be nonnegative")
        self.x_init = np.asarray(self.x_init, dtype=float).ravel()
        if self.x_init.shape[0] != self.problem.n_x:
            raise ConfigError(
                f"x_init has dimension {self.x_init.shape[0]}, "
                f"expected {self.problem.n_x}")
        self.rng_seed = int(self.rng_seed)

    @property
    def disturbance_box(self) -> Optional[DisturbanceBox]:
        if isinstance(self.problem, RobustProblem):
            return self.problem.W
        return self.sampling_box


def _as_matrix(obj, name: str) -> np.ndarray:
    try:
        arr = np.array(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: expected a numeric array") from exc
    return np.atleast_2d(arr)


def _as_vector(obj, name: str) -> np.ndarray:
    try:
        arr = np.asarray(obj, dtype=float).ravel()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: expected a numeric vector") from exc
    return arr


def _expr_from_json(obj) -> ConvexExpr:
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ConfigError(
            "each expression must be a one-key object "
            "(affine | quad | exp | sum)")
    kind, body = next(iter(obj.items()))
    if kind == "affine":
        return Affine(_as_vector(body["a"], "affine.a"),
                      float(body.get("b", 0.0)))
    if kind == "quad":
        C = _as_matrix(body["C"], "quad.C")
        d = (_as_vector(body["d"], "quad.d") if "d" in body
             else np.zeros(C.shape[0]))
        return QuadForm(_as_matrix(body["W"], "quad.W"), C, d)
    if kind == "exp":
        return ExpAffine(float(body.get("scale", 1.0)),
                         _as_vector(body["a"], "exp.a"),
                         float(body.get("b", 0.0)))
    if kind == "sum":
        terms = tuple(_expr_from_json(t) for t in body["terms"])
        weights = tuple(float(w) for w in body.get(
            "weights", [1.0] * len(terms)))
        return WeightedSum(terms, weights)
    raise ConfigError(f"unknown expression kind {kind!r}")


def _model_from_json(obj: dict) -> Tuple[DCFunctionSpec, float]:
    for key in ("n_x", "n_u", "dt", "g"):
        if key not in obj:
            raise ConfigError(f"model definition is missing {key!r}")
    n_x, n_u = int(obj["n_x"]), int(obj["n_u"])
    dt = float(obj["dt"])
    dim = n_x + n_u
    g = tuple(_expr_from_json(e) for e in obj["g"])
    h_spec = obj.get("h")
    if h_spec is None:
        h = (Affine.zero(dim),) * n_x
    else:
        h = tuple(_expr_from_json(e) for e in h_spec)
    if len(g) != n_x or len(h) != n_x:
        raise ConfigError("model needs one g and one h entry per state")
    rhs = DCFunctionSpec(n_x=n_x, n_u=n_u, g=g, h=h)
    if obj.get("continuous", True):
        return discretize_euler(ContinuousModelSpec(rhs=rhs, dt=dt)), dt
    return rhs, dt


def _set_from_json(obj: dict, name: str) -> Polytope:
    if "H" in obj:
        return Polytope(_as_matrix(obj["H"], f"{name}.H"),
                        _as_vector(obj["d"], f"{name}.d"))
    if "box" in obj:
        box = obj["box"]
        return Polytope.from_box(_as_vector(box["lower"], f"{name}.lower"),
                                 _as_vector(box["upper"], f"{name}.upper"))
    if "symmetric_box" in obj:
        return Polytope.symmetric_box(
            _as_vector(obj["symmetric_box"], name))
    raise ConfigError(
        f"{name}: expected 'H'/'d', 'box', or 'symmetric_box'")


def _box_from_json(obj: dict, name: str) -> Box:
    try:
        return Box(_as_vector(obj["lower"], f"{name}.lower"),
                   _as_vector(obj["upper"], f"{name}.upper"))
    except KeyError as exc:
        raise ConfigError(f"{name}: expected 'lower' and 'upper'") from exc


def _inline_problem(cfg: dict, mode: str, maxiters: int, tol: float,
                    threshold: Optional[float]
                    ) -> Union[NMPCProblem, RobustProblem]:
    if "problem" not in cfg:
        raise ConfigError("inline configuration needs a 'problem' block")
    f, dt = _model_from_json(cfg["model"])
    pb = cfg["problem"]
    for key in ("N", "Q", "R", "X", "U", "x_ref", "u_ref"):
        if key not in pb:
            raise ConfigError(f"problem definition is missing {key!r}")
    Q = _as_matrix(pb["Q"], "Q")
    R = _as_matrix(pb["R"], "R")
    ref = EquilibriumReference(_as_vector(pb["x_ref"], "x_ref"),
                               _as_vector(pb["u_ref"], "u_ref"))
    X = _set_from_json(pb["X"], "X")
    U = _set_from_json(pb["U"], "U")

    sidecar = None
    if cfg.get("terminal_ingredients"):
        sidecar = term.TerminalIngredients.from_json(
            Path(cfg["terminal_ingredients"]).read_text(encoding="utf-8"))
    if "K" in pb and "Q_N" in pb:
        K, Q_N = _as_matrix(pb["K"], "K"), _as_matrix(pb["Q_N"], "Q_N")
    elif sidecar is not None:
        K, Q_N = sidecar.K, sidecar.Q_N
    else:
        K, Q_N = term.compute_k_qn(f, ref.x_ref, ref.u_ref, Q, R)

    common = dict(f=f, dt=dt, N=int(pb["N"]), Q=Q, R=R, Q_N=Q_N, X=X, U=U,
                  K=K, reference=ref, tol=tol, maxiters=maxiters,
                  termination_threshold=threshold)
    if mode == MODE_NOMINAL:
        X_N = _set_from_json(pb["X_N"], "X_N") if "X_N" in pb else X
        return NMPCProblem(X_N=X_N, **common)

    if "W" in pb:
        W_box = _box_from_json(pb["W"], "W")
        W = DisturbanceBox(W_box.lower, W_box.upper)
    else:
        raise ConfigError("robust inline configuration needs problem.W")
    if "terminal_box" in pb:
        t_box = _box_from_json(pb["terminal_box"], "terminal_box")
        beta = float(pb.get("beta", 0.0))
    elif sidecar is not None:
        t_box, beta = sidecar.terminal_box, sidecar.beta
    else:
        raise ConfigError(
            "robust inline configuration needs problem.terminal_box or a "
            "terminal_ingredients sidecar")
    return RobustProblem(terminal_box=t_box, W=W, beta=beta, **common)


_CONFIG_KEYS = {
    "preset", "mode", "x_init", "maxiters", "tol", "termination_threshold",
    "step_cap", "disturbance", "disturbance_box", "rng_seed", "out_dir",
    "record_step0_tubes", "model", "problem", "terminal_ingredients",
}


def load_config(source: Union[None, str, Path, dict] = None, *,
                mode: Optional[str] = None,
                preset: Optional[str] = None,
                maxiters: Optional[int] = None,
                tol: Optional[float] = None,
                rng_seed: Optional[int] = None,
                out_dir: Optional[str] = None,
                step_cap: Optional[int] = None) -> SimulationConfig:
    """Build a :class:`SimulationConfig` from a JSON file/dict plus
    command-line style overrides (overrides win over file values)."""
    if source is None:
        cfg: dict = {}
    elif isinstance(source, dict):
        cfg = dict(source)
    else:
        path = Path(source)
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config root must be a JSON object")
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    if preset is not None:
        cfg["preset"] = preset
    if mode is not None:
        cfg["mode"] = mode
    if maxiters is not None:
        cfg["maxiters"] = maxiters
    if tol is not None:
        cfg["tol"] = tol
    if rng_seed is not None:
        cfg["rng_seed"] = rng_seed
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    if step_cap is not None:
        cfg["step_cap"] = step_cap

    run_mode = cfg.get("mode", MODE_NOMINAL)
    if run_mode not in (MODE_NOMINAL, MODE_ROBUST):
        raise ConfigError(f"unknown mode {run_mode!r}")

    sampling_box = None
    if "disturbance_box" in cfg and run_mode != MODE_ROBUST:
        box = _box_from_json(cfg["disturbance_box"], "disturbance_box")
        sampling_box = DisturbanceBox(box.lower, box.upper)

    preset_name = cfg.get("preset")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset_name!r}; "
                f"expected one of {sorted(PRESETS)}")
        nominal, robust = PRESETS[preset_name]()
        problem = robust if run_mode == MODE_ROBUST else nominal
        updates: dict = {}
        if "maxiters" in cfg:
            updates["maxiters"] = int(cfg["maxiters"])
        if "tol" in cfg:
            updates["tol"] = float(cfg["tol"])
        if "termination_threshold" in cfg:
            t = cfg["termination_threshold"]
            updates["termination_threshold"] = None if t is None else float(t)
        if "disturbance_box" in cfg and run_mode == MODE_ROBUST:
            # Robust controllers treat W as problem data: the override
            # changes both the tube propagation and the sampler.
            box = _box_from_json(cfg["disturbance_box"], "disturbance_box")
            updates["W"] = DisturbanceBox(box.lower, box.upper)
        if updates:
            problem = dataclasses.replace(problem, **updates)
        x_init = cfg.get("x_init")
        if x_init is None:
            x_init = _INITIAL_STATES[preset_name](
                robust=(run_mode == MODE_ROBUST)) \
                if preset_name == "example1" \
                else _INITIAL_STATES[preset_name]()
    elif "model" in cfg:
        problem = _inline_problem(
            cfg, run_mode,
            maxiters=int(cfg.get("maxiters", 3)),
            tol=float(cfg.get("tol", 1e-6)),
            threshold=cfg.get("termination_threshold"))
        if "disturbance_box" in cfg and run_mode == MODE_ROBUST:
            box = _box_from_json(cfg["disturbance_box"], "disturbance_box")
            problem = dataclasses.replace(
                problem, W=DisturbanceBox(box.lower, box.upper))
        x_init = cfg.get("x_init")
        if x_init is None:
            raise ConfigError("inline configuration needs x_init")
    else:
        raise ConfigError(
            "configuration needs either 'preset' or an inline 'model'")

    policy = None
    if "disturbance" in cfg:
        d = cfg["disturbance"]
        if isinstance(d, str):
            policy = DisturbancePolicy(d)
        elif isinstance(d, dict):
            policy = DisturbancePolicy(
                d.get("policy", POLICY_ZERO),
                None if d.get("seed") is None else int(d["seed"]))
        else:
            raise ConfigError("disturbance must be a string or an object")

    return SimulationConfig(
        problem=problem,
        mode=run_mode,
        x_init=x_init,
        step_cap=int(cfg.get("step_cap", _DEFAULT_STEP_CAP)),
        disturbance=policy,
        rng_seed=int(cfg.get("rng_seed", 0)),
        out_dir=cfg.get("out_dir"),
        record_step0_tubes=bool(cfg.get("record_step0_tubes", False)),
        preset=preset_name,
        sampling_box=sampling_box,
    )


# ---------------------------------------------------------------------------
# Simulation trace
# ---------------------------------------------------------------------------


@dataclass
class SimulationTrace:
    """Everything recorded during one closed-loop run."""

    mode: str
    n_x: int
    n_u: int
    rng_algorithm: str
    rng_seed: int
    disturbance_policy: str
    states: np.ndarray                   # (steps+1, n_x), visited states
    inputs: np.ndarray                   # (steps, n_u)
    disturbances: np.ndarray             # (steps, n_x)
    stage_costs: np.ndarray              # (steps,)
    predicted_terminal_norms: np.ndarray  # (steps,)
    iteration_rows: Tuple[Tuple[int, int, float, float, int], ...]
    termination_reason: str              # "threshold" | "step-cap"
    step_wall_seconds: np.ndarray        # (steps,), recorded, never asserted
    init_info: Dict[str, float] = field(default_factory=dict)
    tubes: Tuple[BoxTube, ...] = ()       # robust: final tube per step
    seed_tubes: Tuple[BoxTube, ...] = ()  # robust: first propagated per step
    step0_tubes: Tuple[BoxTube, ...] = ()  # robust + flag: per iteration

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def J_cl(self) -> float:
        return float(np.sum(self.stage_costs))

    @property
    def J_star_initial(self) -> Optional[float]:
        """Optimal cost reported by the last controller iteration of the
        first time step (None for an empty trace)."""
        step0 = [row for row in self.iteration_rows if row[0] == 0]
        return float(step0[-1][2]) if step0 else None

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def run(config: SimulationConfig) -> SimulationTrace:
    """Initialize, then run the closed loop until the predicted
    terminal-state norm reaches the threshold or the step cap."""
    problem = config.problem
    mode = config.mode
    n_x, n_u = problem.n_x, problem.n_u
    x = config.x_init.copy()
    threshold = problem.termination_threshold
    policy = config.disturbance
    draw = policy.sampler(config.disturbance_box, n_x, config.rng_seed)

    if mode == MODE_NOMINAL:
        seed, init_info = initialize_seed(problem, x)
    else:
        c0, init_info = initialize_seed_robust(problem, x)

    states = [x.copy()]
    inputs: List[np.ndarray] = []
    disturbances: List[np.ndarray] = []
    stage_costs: List[float] = []
    predicted: List[float] = []
    iter_rows: List[Tuple[int, int, float, float, int]] = []
    tubes: List[BoxTube] = []
    seed_tubes: List[BoxTube] = []
    step0_tubes: Tuple[BoxTube, ...] = ()
    walls: List[float] = []
    reason = "step-cap"

    for i in range(config.step_cap):
        t0 = time.perf_counter()
        if mode == MODE_NOMINAL:
            result = run_time_step(problem, seed, x, time_index=i)
            seed = result.seed
        else:
            keep = config.record_step0_tubes and i == 0
            result = run_time_step_robust(problem, c0, x, time_index=i,
                                          keep_iteration_tubes=keep)
            c0 = result.seed
            tubes.append(result.tube)
            seed_tubes.append(result.first_seed_tube)
            if keep:
                step0_tubes = result.iteration_tubes
        walls.append(time.perf_counter() - t0)

        u = np.asarray(result.u, dtype=float).ravel()
        w = np.asarray(draw(), dtype=float).ravel()
        stage_costs.append(problem.stage_cost(x, u))
        inputs.append(u)
        disturbances.append(w)
        predicted.append(result.predicted_terminal_norm)
        for rec in result.records:
            iter_rows.append((i, rec.iteration, float(rec.J_star),
                              float(rec.c_norm), int(rec.solver_iterations)))
        x = eval_dc(problem.f, x, u) + w
        states.append(x.copy())
        if threshold is not None \
                and result.predicted_terminal_norm <= threshold:
            reason = "threshold"
            break

    return SimulationTrace(
        mode=mode,
        n_x=n_x,
        n_u=n_u,
        rng_algorithm=RNG_ALGORITHM,
        rng_seed=policy.effective_seed(config.rng_seed),
        disturbance_policy=policy.kind,
        states=np.asarray(states, dtype=float).reshape(-1, n_x),
        inputs=np.asarray(inputs, dtype=float).reshape(-1, n_u),
        disturbances=np.asarray(disturbances, dtype=float).reshape(-1, n_x),
        stage_costs=np.asarray(stage_costs, dtype=float),
        predicted_terminal_norms=np.asarray(predicted, dtype=float),
        iteration_rows=tuple(iter_rows),
        termination_reason=reason,
        step_wall_seconds=np.asarray(walls, dtype=float),
        init_info=dict(init_info),
        tubes=tuple(tubes),
        seed_tubes=tuple(seed_tubes),
        step0_tubes=step0_tubes,
    )


# ---------------------------------------------------------------------------
# CSV / JSON artifacts
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    """Shortest round-trip decimal representation (deterministic)."""
    return repr(float(value))


def _write_csv(path: Path, header: Sequence[str],
               rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _tube_rows(tubes: Sequence[BoxTube], n_x: int,
               outer_label: Callable[[int], str]) -> List[List[str]]:
    rows: List[List[str]] = []
    for idx, tube in enumerate(tubes):
        for k in range(len(tube)):
            rows.append([outer_label(idx), str(k)]
                        + [_fmt(v) for v in tube.lower[k]]
                        + [_fmt(v) for v in tube.upper[k]])
    return rows


def emit_csv(trace: SimulationTrace, out_dir: Union[str, Path]
             ) -> List[Path]:
    """Write the trace's CSV artifacts into ``out_dir`` (created if
    needed); returns the written paths in deterministic order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    traj_header = (["step"]
                   + [f"x{j}" for j in range(trace.n_x)]
                   + [f"u{j}" for j in range(trace.n_u)]
                   + [f"w{j}" for j in range(trace.n_x)]
                   + ["stage_cost"])
    traj_rows = []
    for i in range(trace.steps):
        traj_rows.append([str(i)]
                         + [_fmt(v) for v in trace.states[i]]
                         + [_fmt(v) for v in trace.inputs[i]]
                         + [_fmt(v) for v in trace.disturbances[i]]
                         + [_fmt(trace.stage_costs[i])])
    path = out / TRAJECTORY_FILE
    _write_csv(path, traj_header, traj_rows)
    written.append(path)

    iter_header = ["step", "iter", "J_star", "c_norm", "solver_iters"]
    iter_rows = [[str(s), str(n), _fmt(J), _fmt(c), str(its)]
                 for (s, n, J, c, its) in trace.iteration_rows]
    path = out / ITERATIONS_FILE
    _write_csv(path, iter_header, iter_rows)
    written.append(path)

    if trace.mode == MODE_ROBUST:
        tube_header = (["step", "k"]
                       + [f"lower{j}" for j in range(trace.n_x)]
                       + [f"upper{j}" for j in range(trace.n_x)])
        path = out / TUBE_FILE
        _write_csv(path, tube_header, _tube_rows(trace.tubes, trace.n_x, str))
        written.append(path)
        path = out / TUBE_SEED_FILE
        _write_csv(path, tube_header,
                   _tube_rows(trace.seed_tubes, trace.n_x, str))
        written.append(path)
        if trace.step0_tubes:
            step0_header = (["iter", "k"]
                            + [f"lower{j}" for j in range(trace.n_x)]
                            + [f"upper{j}" for j in range(trace.n_x)])
            path = out / TUBE_STEP0_FILE
            _write_csv(path, step0_header,
                       _tube_rows(trace.step0_tubes, trace.n_x,
                                  lambda idx: str(idx + 1)))
            written.append(path)
    return written


def _box_payload(lower: np.ndarray, upper: np.ndarray) -> dict:
    return {"lower": [float(v) for v in lower],
            "upper": [float(v) for v in upper]}


def write_summary(trace: SimulationTrace, config: SimulationConfig,
                  out_dir: Union[str, Path]) -> dict:
    """Write ``summary.json`` (the trace header) and return its payload."""
    problem = config.problem
    checks = _check_tables(_tables_from_trace(trace, config))
    payload = {
        "mode": trace.mode,
        "preset": config.preset,
        "rng": {"algorithm": trace.rng_algorithm, "seed": trace.rng_seed},
        "disturbance_policy": trace.disturbance_policy,
        "steps": trace.steps,
        "termination_reason": trace.termination_reason,
        "termination_threshold": problem.termination_threshold,
        "step_cap": config.step_cap,
        "maxiters": problem.maxiters,
        "tol": problem.tol,
        "J_cl": trace.J_cl,
        "J_star_0": trace.J_star_initial,
        "x_init": [float(v) for v in config.x_init],
        "final_state": [float(v) for v in trace.final_state],
        "final_predicted_terminal_norm":
            (float(trace.predicted_terminal_norms[-1])
             if trace.steps else None),
        "initialization": {k: float(v) for k, v in trace.init_info.items()},
        "stage_cost": {
            "Q": problem.Q.tolist(),
            "R": problem.R.tolist(),
            "x_ref": [float(v) for v in problem.reference.x_ref],
            "u_ref": [float(v) for v in problem.reference.u_ref],
        },
        "disturbance_box": (
            _box_payload(config.disturbance_box.w_lower,
                         config.disturbance_box.w_upper)
            if config.disturbance_box is not None else None),
        "terminal_box": (
            _box_payload(problem.terminal_box.lower,
                         problem.terminal_box.upper)
            if isinstance(problem, RobustProblem) else None),
        "step_wall_seconds": [float(v) for v in trace.step_wall_seconds],
        "invariant_checks": [dataclasses.asdict(c) for c in checks],
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / SUMMARY_FILE).write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return payload


# ---------------------------------------------------------------------------
# Trace verification (reads only the emitted files + box geometry)
# ---------------------------------------------------------------------------


@dataclass
class TraceCheck:
    """One re-derived invariant; margin <= tolerance means it holds."""

    name: str
    passed: bool
    margin: float
    tolerance: float
    detail: str = ""


@dataclass
class _TraceTables:
    """Numeric view of a trace as verification consumes it."""

    mode: str
    states: np.ndarray          # (steps, n_x) per-step current state
    inputs: np.ndarray          # (steps, n_u)
    disturbances: np.ndarray    # (steps, n_x)
    stage_costs: np.ndarray     # (steps,)
    final_state: np.ndarray     # (n_x,)
    iteration_rows: np.ndarray  # (rows, 5)
    reported_J_cl: float
    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    tube: Optional[np.ndarray] = None       # (rows, 2 + 2 n_x)
    tube_seed: Optional[np.ndarray] = None
    w_lower: Optional[np.ndarray] = None
    w_upper: Optional[np.ndarray] = None
    t_lower: Optional[np.ndarray] = None
    t_upper: Optional[np.ndarray] = None


def _tables_from_trace(trace: SimulationTrace,
                       config: SimulationConfig) -> _TraceTables:
    problem = config.problem
    tube = tube_seed = None
    w_lo = w_up = t_lo = t_up = None
    if config.disturbance_box is not None:
        w_lo = config.disturbance_box.w_lower
        w_up = config.disturbance_box.w_upper
    if trace.mode == MODE_ROBUST:
        tube = _tube_array(trace.tubes)
        tube_seed = _tube_array(trace.seed_tubes)
        t_lo, t_up = problem.terminal_box.lower, problem.terminal_box.upper
    return _TraceTables(
        mode=trace.mode,
        states=trace.states[:trace.steps],
        inputs=trace.inputs,
        disturbances=trace.disturbances,
        stage_costs=trace.stage_costs,
        final_state=trace.final_state,
        iteration_rows=np.asarray(
            [list(r) for r in trace.iteration_rows],
            dtype=float).reshape(-1, 5),
        reported_J_cl=trace.J_cl,
        Q=problem.Q, R=problem.R,
        x_ref=problem.reference.x_ref, u_ref=problem.reference.u_ref,
        tube=tube, tube_seed=tube_seed,
        w_lower=w_lo, w_upper=w_up, t_lower=t_lo, t_upper=t_up)


def _tube_array(tubes: Sequence[BoxTube]) -> np.ndarray:
    rows = []
    for idx, tube in enumerate(tubes):
        for k in range(len(tube)):
            rows.append([float(idx), float(k)]
                        + [float(v) for v in tube.lower[k]]
                        + [float(v) for v in tube.upper[k]])
    if not rows:
        return np.zeros((0, 2))
    return np.asarray(rows, dtype=float)


def _split_tube_rows(arr: np.ndarray, n_x: int
                     ) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Group tube rows by step: step -> (lower (N+1, n_x), upper)."""
    out: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    if arr.shape[0] == 0:
        return out
    steps = arr[:, 0].astype(int)
    for s in np.unique(steps):
        block = arr[steps == s]
        order = np.argsort(block[:, 1])
        block = block[order]
        out[int(s)] = (block[:, 2:2 + n_x], block[:, 2 + n_x:2 + 2 * n_x])
    return out


def _check_tables(t: _TraceTables) -> List[TraceCheck]:
    checks: List[TraceCheck] = []
    steps = t.stage_costs.shape[0]

    # Stage costs recompute from the recorded states and inputs.
    if steps:
        dx = t.states - t.x_ref
        du = t.inputs - t.u_ref
        recomputed = np.einsum("ij,jk,ik->i", dx, t.Q, dx) \
            + np.einsum("ij,jk,ik->i", du, t.R, du)
        tol = 1e-9 * np.maximum(1.0, np.abs(t.stage_costs))
        margin = float(np.max(np.abs(recomputed - t.stage_costs) - tol))
        checks.append(TraceCheck("stage-cost-recompute", margin <= 0.0,
                                 margin, 0.0,
                                 "per-row |recomputed - recorded| within "
                                 "1e-9 relative"))
    else:
        checks.append(TraceCheck("stage-cost-recompute", True, 0.0, 0.0,
                                 "empty trace"))

    # Accumulated closed-loop cost.
    j_tol = 1e-9 * max(1.0, abs(t.reported_J_cl))
    j_err = abs(float(np.sum(t.stage_costs)) - t.reported_J_cl)
    checks.append(TraceCheck("closed-loop-cost", j_err <= j_tol,
                             j_err, j_tol,
                             "sum of stage costs vs reported J_cl"))

    # Optimal cost descends across controller iterations within a step.
    worst = -np.inf
    if t.iteration_rows.shape[0]:
        for s in np.unique(t.iteration_rows[:, 0]):
            block = t.iteration_rows[t.iteration_rows[:, 0] == s]
            block = block[np.argsort(block[:, 1])]
            J = block[:, 2]
            slack = 1e-7 * max(1.0, abs(float(J[0])))
            if J.shape[0] > 1:
                worst = max(worst, float(np.max(np.diff(J)) - slack))
    if worst == -np.inf:
        worst = 0.0
    checks.append(TraceCheck("iteration-cost-monotone", worst <= 0.0,
                             worst, 0.0,
                             "J_star non-increasing across iterations "
                             "within each step (1e-7 relative slack)"))

    # Realized disturbances respect the declared box (any mode that
    # recorded one).
    if t.w_lower is not None and steps:
        wmar = max(float(np.max(t.disturbances - t.w_upper)),
                   float(np.max(t.w_lower - t.disturbances)))
        checks.append(TraceCheck("disturbance-in-box", wmar <= 1e-9,
                                 wmar, 1e-9,
                                 "recorded w_i inside the disturbance box"))

    if t.mode != MODE_ROBUST:
        return checks

    n_x = t.states.shape[1] if steps else t.final_state.shape[0]
    solved = _split_tube_rows(t.tube, n_x) if t.tube is not None else {}
    seeded = _split_tube_rows(t.tube_seed, n_x) \
        if t.tube_seed is not None else {}
    tol = 1e-6

    # Well-formed: lower <= upper everywhere, both files.
    wf = 0.0
    for group in (solved, seeded):
        for lo, up in group.values():
            if lo.size:
                wf = max(wf, float(np.max(lo - up)))
    checks.append(TraceCheck("tube-well-formed", wf <= 1e-12, wf, 1e-12,
                             "lower <= upper at every stage"))

    # The solved tube starts at the measured state (singleton stage 0).
    start = 0.0
    for i in range(steps):
        if i in solved:
            lo, up = solved[i]
            start = max(start,
                        float(np.max(np.abs(lo[0] - t.states[i]))),
                        float(np.max(np.abs(up[0] - t.states[i]))))
    checks.append(TraceCheck("tube-starts-at-state", start <= tol,
                             start, tol,
                             "stage-0 cross-section pinned to x_i"))

    # The realized next state lies in stage 1 of the step's solved tube.
    contain = -np.inf
    for i in range(steps):
        if i not in solved:
            continue
        lo, up = solved[i]
        nxt = t.states[i + 1] if i + 1 < steps else t.final_state
        contain = max(contain,
                      float(np.max(nxt - up[1])),
                      float(np.max(lo[1] - nxt)))
    if contain == -np.inf:
        contain = 0.0
    checks.append(TraceCheck("tube-contains-next-state", contain <= tol,
                             contain, tol,
                             "x_{i+1} inside the step-i stage-1 box"))

    # Cross-step nesting: the next step's propagated tube sits inside the
    # previous step's solved tube shifted by one stage.
    nest = -np.inf
    for i in range(steps - 1):
        if i not in solved or (i + 1) not in seeded:
            continue
        lo_o, up_o = solved[i]
        lo_i, up_i = seeded[i + 1]
        horizon = min(lo_i.shape[0] - 1, lo_o.shape[0] - 1)
        for k in range(horizon):
            nest = max(nest,
                       float(np.max(up_i[k] - up_o[k + 1])),
                       float(np.max(lo_o[k + 1] - lo_i[k])))
    if nest == -np.inf:
        nest = 0.0
    checks.append(TraceCheck("tube-nesting", nest <= tol, nest, tol,
                             "propagated tube of step i+1 inside the "
                             "solved tube of step i, stages shifted by one"))

    # Terminal stage of every solved tube inside the terminal box.
    tmar = -np.inf
    if t.t_lower is not None:
        for lo, up in solved.values():
            tmar = max(tmar,
                       float(np.max(up[-1] - t.t_upper)),
                       float(np.max(t.t_lower - lo[-1])))
    if tmar == -np.inf:
        tmar = 0.0
    checks.append(TraceCheck("terminal-box", tmar <= tol, tmar, tol,
                             "solved tube's last stage inside the "
                             "terminal box"))
    return checks


def _read_csv(path: Path) -> Tuple[List[str], np.ndarray]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        rows = [[float(v) for v in row] for row in reader]
    arr = np.asarray(rows, dtype=float) if rows \
        else np.zeros((0, len(header)))
    return header, arr


def _load_tables(trace_dir: Union[str, Path]) -> _TraceTables:
    base = Path(trace_dir)
    summary_path = base / SUMMARY_FILE
    if not summary_path.exists():
        raise FileNotFoundError(f"missing {summary_path}")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    mode = summary["mode"]
    sc = summary["stage_cost"]
    Q = np.atleast_2d(np.asarray(sc["Q"], dtype=float))
    R = np.atleast_2d(np.asarray(sc["R"], dtype=float))
    x_ref = np.asarray(sc["x_ref"], dtype=float)
    u_ref = np.asarray(sc["u_ref"], dtype=float)
    n_x, n_u = x_ref.shape[0], u_ref.shape[0]

    header, traj = _read_csv(base / TRAJECTORY_FILE)
    expected = (["step"] + [f"x{j}" for j in range(n_x)]
                + [f"u{j}" for j in range(n_u)]
                + [f"w{j}" for j in range(n_x)] + ["stage_cost"])
    if header != expected:
        raise ValueError(
            f"unexpected trajectory.csv header {header!r}")
    states = traj[:, 1:1 + n_x]
    inputs = traj[:, 1 + n_x:1 + n_x + n_u]
    disturbances = traj[:, 1 + n_x + n_u:1 + 2 * n_x + n_u]
    stage_costs = traj[:, -1]

    it_header, iters = _read_csv(base / ITERATIONS_FILE)
    if it_header != ["step", "iter", "J_star", "c_norm", "solver_iters"]:
        raise ValueError(f"unexpected iterations.csv header {it_header!r}")

    tables = _TraceTables(
        mode=mode,
        states=states,
        inputs=inputs,
        disturbances=disturbances,
        stage_costs=stage_costs,
        final_state=np.asarray(summary["final_state"], dtype=float),
        iteration_rows=iters.reshape(-1, 5),
        reported_J_cl=float(summary["J_cl"]),
        Q=Q, R=R, x_ref=x_ref, u_ref=u_ref)

    wb = summary.get("disturbance_box")
    if wb is not None:
        tables.w_lower = np.asarray(wb["lower"], dtype=float)
        tables.w_upper = np.asarray(wb["upper"], dtype=float)
    if mode == MODE_ROBUST:
        tube_header = (["step", "k"] + [f"lower{j}" for j in range(n_x)]
                       + [f"upper{j}" for j in range(n_x)])
        got, tables.tube = _read_csv(base / TUBE_FILE)
        if got != tube_header:
            raise ValueError(f"unexpected tube.csv header {got!r}")
        got, tables.tube_seed = _read_csv(base / TUBE_SEED_FILE)
        if got != tube_header:
            raise ValueError(f"unexpected tube_seed.csv header {got!r}")
        tb = summary.get("terminal_box")
        if tb is not None:
            tables.t_lower = np.asarray(tb["lower"], dtype=float)
            tables.t_upper = np.asarray(tb["upper"], dtype=float)
    return tables


def verify_trace(trace_dir: Union[str, Path]
                 ) -> Tuple[bool, List[TraceCheck]]:
    """Re-derive the run invariants from the emitted files alone.

    Raises ``FileNotFoundError``/``ValueError`` for missing or malformed
    artifacts; returns (all_passed, checks) otherwise.
    """
    checks = _check_tables(_load_tables(trace_dir))
    return all(c.passed for c in checks), checks


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

_SYNOPSIS = """\
usage: scmpc <command> [options]

commands:
  run        closed-loop simulation; writes trajectory.csv, iterations.csv
             and summary.json (robust runs add tube.csv and tube_seed.csv)
  init-seed  offline initializer; writes the feasible seed as JSON
  terminal   terminal-ingredient synthesis + verification report (JSON)
  verify     re-check trace invariants from the emitted CSV files

common forms:
  scmpc run --config cfg.json [--mode nominal|robust] [--preset example1|example2]
            [--maxiters N] [--tol T] [--rng-seed S] [--out DIR]
            [--step-cap M] [--jobs J --seeds LIST]
  scmpc init-seed --config cfg.json --out seed.json
  scmpc terminal --config cfg.json --out ingredients.json
  scmpc verify --trace DIR

exit codes: 0 success, 1 error, 2 invariant violation, 64 usage error
"""


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="scmpc", add_help=True, usage=_SYNOPSIS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p_run = sub.add_parser("run", usage=_SYNOPSIS)
    p_run.add_argument("--config")
    p_run.add_argument("--mode", choices=[MODE_NOMINAL, MODE_ROBUST])
    p_run.add_argument("--preset", choices=sorted(PRESETS))
    p_run.add_argument("--maxiters", type=int)
    p_run.add_argument("--tol", type=float)
    p_run.add_argument("--rng-seed", type=int, dest="rng_seed")
    p_run.add_argument("--out")
    p_run.add_argument("--step-cap", type=int, dest="step_cap")
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--seeds",
                       help="comma list or inclusive range lo-hi of "
                            "disturbance seeds to fan out")

    p_seed = sub.add_parser("init-seed", usage=_SYNOPSIS)
    p_seed.add_argument("--config", required=True)
    p_seed.add_argument("--out", required=True)

    p_term = sub.add_parser("terminal", usage=_SYNOPSIS)
    p_term.add_argument("--config", required=True)
    p_term.add_argument("--out", required=True)

    p_ver = sub.add_parser("verify", usage=_SYNOPSIS)
    p_ver.add_argument("--trace", required=True)
    return parser


def _parse_seed_list(spec: str) -> List[int]:
    spec = spec.strip()
    if "-" in spec and "," not in spec:
        lo_s, hi_s = spec.split("-", 1)
        lo, hi = int(lo_s), int(hi_s)
        if hi < lo:
            raise ConfigError(f"empty seed range {spec!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse seed list {spec!r}") from exc


def _config_from_args(args, forced_seed: Optional[int] = None,
                      forced_out: Optional[str] = None) -> SimulationConfig:
    if args.config is None and args.preset is None:
        raise _UsageError("run needs --config and/or --preset")
    cfg = load_config(
        args.config,
        mode=args.mode,
        preset=args.preset,
        maxiters=args.maxiters,
        tol=args.tol,
        rng_seed=forced_seed if forced_seed is not None else args.rng_seed,
        out_dir=forced_out if forced_out is not None else args.out,
        step_cap=args.step_cap)
    if forced_seed is not None and cfg.disturbance is not None \
            and cfg.disturbance.seed is not None:
        # Fan-out varies the run seed; a fixed per-policy seed would make
        # every worker draw the same disturbances.
        cfg.disturbance = DisturbancePolicy(cfg.disturbance.kind, None)
    return cfg


def _execute_run(config: SimulationConfig) -> dict:
    trace = run(config)
    out_dir = Path(config.out_dir or _DEFAULT_OUT_DIR)
    files = emit_csv(trace, out_dir)
    summary = write_summary(trace, config, out_dir)
    return {
        "out_dir": str(out_dir),
        "files": [str(p) for p in files] + [str(out_dir / SUMMARY_FILE)],
        "steps": trace.steps,
        "termination_reason": trace.termination_reason,
        "J_cl": trace.J_cl,
        "J_star_0": trace.J_star_initial,
        "rng_seed": trace.rng_seed,
        "invariants_passed": all(c["passed"]
                                 for c in summary["invariant_checks"]),
    }


def _fanout_worker(payload: Tuple[Optional[str], dict, int, str]) -> dict:
    config_path, overrides, seed, out_dir = payload
    args = argparse.Namespace(config=config_path, **overrides)
    config = _config_from_args(args, forced_seed=seed, forced_out=out_dir)
    return _execute_run(config)


def _cmd_run(args) -> int:
    if args.seeds is None:
        result = _execute_run(_config_from_args(args))
        print(f"terminated: {result['termination_reason']} "
              f"after {result['steps']} step(s)")
        if result["J_star_0"] is not None:
            print(f"J_star_0 = {result['J_star_0']!r}")
        print(f"J_cl = {result['J_cl']!r}")
        for f in result["files"]:
            print(f"wrote {f}")
        if not result["invariants_passed"]:
            print("invariant checks FAILED (see summary.json)",
                  file=sys.stderr)
            return EXIT_INVARIANT
        return EXIT_OK

    seeds = _parse_seed_list(args.seeds)
    if not seeds:
        raise _UsageError("--seeds produced an empty list")
    base_out = Path(args.out) if args.out else Path(_DEFAULT_OUT_DIR)
    overrides = {k: getattr(args, k) for k in
                 ("mode", "preset", "maxiters", "tol", "rng_seed",
                  "step_cap")}
    overrides["out"] = None
    jobs = max(1, int(args.jobs))
    payloads = [(args.config, overrides, s,
                 str(base_out / f"seed_{s:05d}")) for s in seeds]
    if jobs == 1:
        results = [_fanout_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fanout_worker, payloads))
    ok = True
    rows = []
    for seed, res in zip(seeds, results):
        ok = ok and res["invariants_passed"]
        rows.append({"seed": seed, **res})
        print(f"seed {seed}: {res['termination_reason']} "
              f"after {res['steps']} step(s), J_cl = {res['J_cl']!r}")
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "fanout_summary.json").write_text(
        json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {base_out / 'fanout_summary.json'}")
    return EXIT_OK if ok else EXIT_INVARIANT


def _cmd_init_seed(args) -> int:
    config = load_config(args.config)
    if config.mode == MODE_NOMINAL:
        seed, info = initialize_seed(config.problem, config.x_init)
        payload = {"mode": MODE_NOMINAL,
                   "states": seed.states.tolist(),
                   "inputs": seed.inputs.tolist()}
    else:
        c0, info = initialize_seed_robust(config.problem, config.x_init)
        payload = {"mode": MODE_ROBUST, "perturbation": c0.tolist()}
    payload["x_init"] = [float(v) for v in config.x_init]
    payload.update({k: float(v) for k, v in info.items()})
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n",
                              encoding="utf-8")
    print(f"wrote {args.out} (gap = {payload['gap']!r}, "
          f"rounds = {int(payload['rounds'])})")
    return EXIT_OK


def _cmd_terminal(args) -> int:
    config = load_config(args.config)
    problem = config.problem
    f, ref = problem.f, problem.reference
    Q, R = problem.Q, problem.R
    if isinstance(problem, RobustProblem):
        w_lo, w_up = problem.W.w_lower, problem.W.w_upper
    else:
        w_lo = w_up = np.zeros(problem.n_x)

    K, Q_N = term.compute_k_qn(f, ref.x_ref, ref.u_ref, Q, R)
    box = term.synthesize_terminal_box(f, K, problem.X, problem.U,
                                       ref.x_ref, ref.u_ref, Q_N,
                                       w_lo, w_up)
    nominal_report = term.verify_terminal_nominal(
        f, K, Q_N, box, problem.U, Q, R, ref.x_ref, ref.u_ref)
    robust_report = None
    beta = 0.0
    if isinstance(problem, RobustProblem):
        robust_report = term.verify_terminal_robust(
            f, K, box, w_lo, w_up, problem.U, ref.x_ref, ref.u_ref)
        beta = term.estimate_beta(f, K, Q_N, Q, R, box, w_lo, w_up,
                                  ref.x_ref, ref.u_ref)
    ingredients = term.TerminalIngredients(
        K=K, Q_N=Q_N, terminal_box=box, beta=beta,
        nominal_report=nominal_report, robust_report=robust_report)
    Path(args.out).write_text(ingredients.to_json() + "\n", encoding="utf-8")
    print(f"wrote {args.out}")
    print(nominal_report.summary())
    ok = nominal_report.passed
    if robust_report is not None:
        print(robust_report.summary())
        ok = ok and robust_report.passed
    return EXIT_OK if ok else EXIT_INVARIANT


def _cmd_verify(args) -> int:
    passed, checks = verify_trace(args.trace)
    for c in checks:
        status = "ok  " if c.passed else "FAIL"
        print(f"{status} {c.name}: margin = {c.margin:.3e} "
              f"(tolerance {c.tolerance:.1e})")
    return EXIT_OK if passed else EXIT_INVARIANT


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("missing command")
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "init-seed":
            return _cmd_init_seed(args)
        if args.command == "terminal":
            return _cmd_terminal(args)
        if args.command == "verify":
            return _cmd_verify(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_SYNOPSIS, file=sys.stderr, end="")
        return EXIT_USAGE
    except SystemExit as exc:
        # argparse exits directly for --help; propagate its code.
        return int(exc.code or 0)
    except (ConfigError, FileNotFoundError, OSError, ValueError,
            SeedInitializationError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
