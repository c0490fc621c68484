"""
Declarative experiment runs: YAML configs, per-point pipelines, sweeps and run manifests
"""
import concurrent.futures
import itertools
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

try:
    # python 3.8+
    from typing import TypedDict  # type: ignore
except ImportError:
    from typing_extensions import TypedDict

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

from .geometry import Geometry, MotionConstraint
from .kalman import (
    dare_trace_bounds,
    lift_system,
    lifted_process_noise,
    limiting_trace,
    run_filter,
    steady_state_trace,
)
from .model import (
    NoiseSpec,
    RealBlockModel,
    ReducedModel,
    SnapshotMatrix,
    fit_dmd,
    nyquist_period,
    save_model,
    simulate,
    to_complex_coefficients,
    to_real_blocks,
)
from .observability import (
    Trajectory,
    assemble,
    condition_number,
    is_observable,
    motion_violations,
    save_trajectory,
    write_trajectory_csv,
)
from .planner import PlanConfig, PlanReport, multiscale_refine, place_stationary, plan
from .scenarios import (
    BINARY_GRID,
    KsSpec,
    TorusSpec,
    demo_gridded,
    ks_geometry,
    load_gridded,
    make_torus,
    mask_geometry,
    solve_ks,
    write_gridded,
)
from .utils import (
    ConfigError,
    MobileSensorsError,
    NonConvergenceError,
    PathLike,
    atomic_write,
    derive_seed,
    dump_json,
    sha256_file,
)

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "MOBILESENSORS_OUTPUT_DIR"
WORKERS_ENV = "MOBILESENSORS_WORKERS"

SCENARIO_KINDS = ("torus", "ks", "gridded")
MODEL_KINDS = ("known", "dmd")
MODE_KINDS = ("stationary", "mobile")
SWEEP_AXES = ("sensors", "speed", "sampling_dt", "period", "rank", "refine_factor")

TOP_LEVEL_KEYS = {
    "name",
    "scenario",
    "model",
    "sensors",
    "mode",
    "sampling_dt",
    "noise",
    "steps",
    "duration",
    "seed",
    "sigma0",
    "outputs",
    "sweep",
    "workers",
}
TORUS_KEYS = {
    "rows",
    "cols",
    "n_fourier",
    "n_gauss",
    "gauss_width",
    "freq_range",
    "damp_range",
    "center_separation",
    "seed",
    "max_wavenumber",
}
KS_KEYS = {"n_grid", "domain_length", "dt_solver", "seed", "burn_in", "init_scale"}

SUMMARY_COLUMNS = ["point", "status", "seed", "condition", "rank", "steady_trace", "steady_mse", "error"]

MANIFEST_NAME = "manifest.json"


class RunManifest(TypedDict):
    name: str
    version: str
    config: Dict[str, Any]
    seeds: Dict[str, int]
    points: List[Dict[str, Any]]
    files: List[Dict[str, str]]
    started: float
    finished: float


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)
    path: Optional[str] = None
    format: Optional[str] = None
    wrap_longitude: bool = True


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "known"
    rank: Optional[int] = None
    train_steps: int = 200
    train_time: Optional[float] = None


@dataclass(frozen=True)
class ModeConfig:
    kind: str = "stationary"
    speed: float = math.inf
    period: Optional[int] = None
    refine_factor: Optional[int] = None
    enforce_cycle: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig
    name: str = "experiment"
    model: ModelConfig = ModelConfig()
    sensors: int = 1
    mode: ModeConfig = ModeConfig()
    sampling_dt: float = 1.0
    noise: NoiseSpec = NoiseSpec(q=0.01, rho=0.01)
    noise_per_time: bool = False
    steps: int = 200
    duration: Optional[float] = None
    seed: int = 0
    sigma0: float = 10.0
    outputs: str = "runs"
    sweep: Dict[str, List[Any]] = field(default_factory=dict)
    workers: int = 1

    @property
    def filter_steps(self) -> int:
        """
        Filtered steps: duration / sampling_dt when a duration is set, else steps
        """
        if self.duration is None:
            return self.steps
        return _steps_in(self.duration, self.sampling_dt, "duration")

    @property
    def train_steps(self) -> int:
        if self.model.train_time is None:
            return self.model.train_steps
        return _steps_in(self.model.train_time, self.sampling_dt, "model.train_time", minimum=2)

    @property
    def step_noise(self) -> NoiseSpec:
        """
        Per-step noise; rates per unit time become q dt and rho / dt
        """
        if not self.noise_per_time:
            return self.noise
        return NoiseSpec(q=self.noise.q * self.sampling_dt, rho=self.noise.rho / self.sampling_dt)

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["scenario"]["params"] = {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in self.scenario.params.items()
        }
        doc["mode"]["speed"] = _speed_to_yaml(self.mode.speed)
        if "speed" in self.sweep:
            doc["sweep"]["speed"] = [_speed_to_yaml(v) for v in self.sweep["speed"]]
        return doc


def _speed_to_yaml(speed: float) -> Any:
    return "inf" if math.isinf(speed) else speed


def _check_keys(doc: Any, allowed: set, where: str) -> Dict[str, Any]:
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("%s must be a mapping, got %r" % (where, doc))
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError("unknown key(s) in %s: %s" % (where, ", ".join(map(str, unknown))))
    return doc


def _as_speed(value: Any) -> float:
    if isinstance(value, str) and value.lower() in ("inf", "infinity", "unconstrained"):
        return math.inf
    try:
        speed = float(value)
    except (TypeError, ValueError):
        raise ConfigError('speed must be a number or "inf", got %r' % value)
    if not speed >= 0:
        raise ConfigError("speed must be nonnegative, got %r" % value)
    return speed


def _positive_int(value: Any, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError("%s must be an integer >= %d, got %r" % (name, minimum, value))
    return value


def _steps_in(horizon: float, sampling_dt: float, name: str, minimum: int = 1) -> int:
    steps = int(round(horizon / sampling_dt))
    if steps < minimum:
        raise ConfigError(
            "%s %.6g covers fewer than %d steps of %.6g" % (name, horizon, minimum, sampling_dt)
        )
    return steps


def _positive_float(value: Any, name: str) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ConfigError("%s must be a number, got %r" % (name, value))
    if not number > 0:
        raise ConfigError("%s must be positive, got %r" % (name, value))
    return number


def parse_config(doc: Dict[str, Any], base_dir: str = ".") -> ExperimentConfig:
    """
    Validate a config tree; every problem is a ConfigError raised before any computation
    """
    doc = _check_keys(doc, TOP_LEVEL_KEYS, "config")
    if "scenario" not in doc:
        raise ConfigError("config needs a scenario section")

    scen = _check_keys(doc["scenario"], {"kind", "torus", "ks", "path", "format", "wrap_longitude"}, "scenario")
    kind = scen.get("kind")
    if kind not in SCENARIO_KINDS:
        raise ConfigError("scenario kind must be one of %s, got %r" % (SCENARIO_KINDS, kind))
    path = None
    if kind == "torus":
        params = dict(_check_keys(scen.get("torus"), TORUS_KEYS, "scenario.torus"))
        for key in ("freq_range", "damp_range"):
            if key in params:
                params[key] = tuple(float(v) for v in params[key])
    elif kind == "ks":
        params = dict(_check_keys(scen.get("ks"), KS_KEYS, "scenario.ks"))
    else:
        params = {}
        if "path" not in scen:
            raise ConfigError("gridded scenario needs a path")
        path = os.path.normpath(os.path.join(base_dir, scen["path"]))
        if not os.path.isfile(path):
            raise ConfigError("gridded data file not found: %s" % path)
    scenario = ScenarioConfig(
        kind=kind,
        params=params,
        path=path,
        format=scen.get("format"),
        wrap_longitude=bool(scen.get("wrap_longitude", True)),
    )

    model_doc = _check_keys(doc.get("model"), {"kind", "rank", "train_steps", "train_time"}, "model")
    model = ModelConfig(
        kind=model_doc.get("kind", "known"),
        rank=model_doc.get("rank"),
        train_steps=model_doc.get("train_steps", 200),
        train_time=model_doc.get("train_time"),
    )
    if model.kind not in MODEL_KINDS:
        raise ConfigError("model kind must be one of %s, got %r" % (MODEL_KINDS, model.kind))
    if model.kind == "known" and kind != "torus":
        raise ConfigError("only the torus scenario has a known model; use kind: dmd")
    if model.kind == "dmd":
        if model.rank is None:
            raise ConfigError("dmd model needs a rank")
        _positive_int(model.rank, "model.rank")
        _positive_int(model.train_steps, "model.train_steps", 2)
        if model.train_time is not None:
            model = replace(model, train_time=_positive_float(model.train_time, "model.train_time"))

    mode_doc = _check_keys(
        doc.get("mode"), {"kind", "speed", "period", "refine_factor", "enforce_cycle"}, "mode"
    )
    mode = ModeConfig(
        kind=mode_doc.get("kind", "stationary"),
        speed=_as_speed(mode_doc.get("speed", math.inf)),
        period=mode_doc.get("period"),
        refine_factor=mode_doc.get("refine_factor"),
        enforce_cycle=bool(mode_doc.get("enforce_cycle", True)),
    )
    if mode.kind not in MODE_KINDS:
        raise ConfigError("mode kind must be one of %s, got %r" % (MODE_KINDS, mode.kind))
    if mode.period is not None:
        _positive_int(mode.period, "mode.period")
    if mode.refine_factor is not None:
        _positive_int(mode.refine_factor, "mode.refine_factor", 2)

    noise_doc = _check_keys(doc.get("noise"), {"q", "rho", "per_time"}, "noise")
    try:
        noise = NoiseSpec(q=float(noise_doc.get("q", 0.01)), rho=float(noise_doc.get("rho", 0.01)))
    except ValueError as e:
        raise ConfigError(str(e))

    sweep = _check_keys(doc.get("sweep"), set(SWEEP_AXES), "sweep")
    for axis, values in sweep.items():
        if not isinstance(values, list) or not values:
            raise ConfigError("sweep axis %s must be a non-empty list" % axis)
    sweep = {
        axis: [_as_speed(v) for v in values] if axis == "speed" else list(values)
        for axis, values in sweep.items()
    }

    outputs = os.environ.get(OUTPUT_DIR_ENV) or os.path.join(base_dir, doc.get("outputs", "runs"))
    workers = os.environ.get(WORKERS_ENV) or doc.get("workers", 1)
    try:
        workers = int(workers)
    except ValueError:
        raise ConfigError("workers must be an integer, got %r" % workers)

    cfg = ExperimentConfig(
        scenario=scenario,
        name=str(doc.get("name", "experiment")),
        model=model,
        sensors=_positive_int(doc.get("sensors", 1), "sensors"),
        mode=mode,
        sampling_dt=_positive_float(doc.get("sampling_dt", 1.0), "sampling_dt"),
        noise=noise,
        noise_per_time=bool(noise_doc.get("per_time", False)),
        steps=_positive_int(doc.get("steps", 200), "steps"),
        duration=None if doc.get("duration") is None else _positive_float(doc["duration"], "duration"),
        seed=int(doc.get("seed", 0)),
        sigma0=_positive_float(doc.get("sigma0", 10.0), "sigma0"),
        outputs=os.path.normpath(outputs),
        sweep=sweep,
        workers=max(1, workers),
    )
    for _, overrides in sweep_points(cfg):
        point = apply_overrides(cfg, overrides)
        # horizons must cover whole steps at every swept rate
        _ = (point.filter_steps, point.train_steps)
    return cfg


def load_config(path: PathLike) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e))
    except yaml.YAMLError as e:
        raise ConfigError("invalid YAML in %s: %s" % (path, e))
    return parse_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    for axis, value in overrides.items():
        if axis == "sensors":
            cfg = replace(cfg, sensors=_positive_int(value, "sensors"))
        elif axis == "sampling_dt":
            cfg = replace(cfg, sampling_dt=_positive_float(value, "sampling_dt"))
        elif axis == "speed":
            cfg = replace(cfg, mode=replace(cfg.mode, speed=_as_speed(value)))
        elif axis == "period":
            cfg = replace(cfg, mode=replace(cfg.mode, period=_positive_int(value, "period")))
        elif axis == "refine_factor":
            cfg = replace(
                cfg, mode=replace(cfg.mode, refine_factor=_positive_int(value, "refine_factor", 2))
            )
        elif axis == "rank":
            cfg = replace(cfg, model=replace(cfg.model, rank=_positive_int(value, "rank")))
        else:
            raise ConfigError("Unknown sweep axis: %s" % axis)
    return cfg


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return repr(value)
    return str(value)


def sweep_points(cfg: ExperimentConfig) -> List[Tuple[str, Dict[str, Any]]]:
    """
    Point keys and overrides of the sweep grid in config order ('base' without a sweep)
    """
    if not cfg.sweep:
        return [("base", {})]
    axes = list(cfg.sweep)
    points = []
    for values in itertools.product(*(cfg.sweep[a] for a in axes)):
        overrides = dict(zip(axes, values))
        key = ",".join("%s=%s" % (a, _format_value(v)) for a, v in overrides.items())
        points.append((key, overrides))
    return points


class Scenario(NamedTuple):
    model: ReducedModel
    geometry: Geometry
    truth: SnapshotMatrix
    measurement_noise: bool
    info: Dict[str, Any]


def _stride(sampling_dt: float, base_dt: float) -> int:
    ratio = sampling_dt / base_dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * max(1.0, ratio):
        raise ConfigError(
            "sampling_dt %.6g must be a positive multiple of the source interval %.6g"
            % (sampling_dt, base_dt)
        )
    return stride


def _split(cfg: ExperimentConfig, snaps: SnapshotMatrix) -> Tuple[ReducedModel, SnapshotMatrix]:
    train, steps = cfg.train_steps, cfg.filter_steps
    if snaps.T < train + steps:
        raise ConfigError(
            "data has %d snapshots at this sampling rate, need %d for training and %d for filtering"
            % (snaps.T, train, steps)
        )
    model = fit_dmd(SnapshotMatrix(data=snaps.data[:, :train], dt=snaps.dt), cfg.model.rank)
    truth = SnapshotMatrix(data=snaps.data[:, train : train + steps], dt=snaps.dt)
    return model, truth


def build_scenario(cfg: ExperimentConfig, sim_seed: int) -> Scenario:
    """
    Model, geometry and ground truth for one run; the scenario itself is seeded by the base seed
    so that every sweep point sees the same field
    """
    kind = cfg.scenario.kind
    params = dict(cfg.scenario.params)
    if kind == "torus":
        params.setdefault("seed", cfg.seed)
        spec = TorusSpec(dt=cfg.sampling_dt, **params)
        true_model, geometry = make_torus(spec)
        rng = np.random.default_rng(sim_seed)
        z0 = to_complex_coefficients(true_model, rng.standard_normal(true_model.m))
        train = cfg.train_steps if cfg.model.kind == "dmd" else 0
        sim = simulate(true_model, z0, train + cfg.filter_steps, cfg.step_noise, sim_seed, dt=cfg.sampling_dt)
        info = {"n": spec.n, "m_true": spec.m}
        if cfg.model.kind == "known":
            return Scenario(true_model, geometry, sim, True, info)
        model, truth = _split(cfg, sim)
        return Scenario(model, geometry, truth, True, info)

    if kind == "ks":
        params.setdefault("seed", cfg.seed)
        base = KsSpec(**params)
        stride = _stride(cfg.sampling_dt, base.dt_solver)
        total = cfg.train_steps + cfg.filter_steps
        spec = replace(base, output_every=stride, t_final=(total - 1) * cfg.sampling_dt)
        model, truth = _split(cfg, solve_ks(spec))
        return Scenario(model, ks_geometry(spec), truth, True, {"n": spec.n_grid})

    ds = load_gridded(cfg.scenario.path, cfg.scenario.format)
    stride = _stride(cfg.sampling_dt, ds.dt)
    snaps = SnapshotMatrix(data=ds.snapshots[:, ::stride], dt=ds.dt * stride)
    model, truth = _split(cfg, snaps)
    geometry = mask_geometry(ds, cfg.scenario.wrap_longitude)
    return Scenario(model, geometry, truth, False, {"n": ds.n_valid, "grid": list(ds.mask.shape)})


def default_period(model: ReducedModel, k: int = 1) -> int:
    """
    Planning period budget: whole steps within the Nyquist period, or the rank if nothing
    oscillates. Never fewer than ceil(m / k) steps, the shortest cycle that can collect m rows.
    """
    rows_needed = max(1, math.ceil(model.m / k))
    nyquist = nyquist_period(model)
    if math.isinf(nyquist):
        return max(model.m, rows_needed)
    period = max(1, int(math.floor(nyquist)))
    if period < rows_needed:
        logger.warning(
            "Nyquist period %.3g is shorter than the %d steps %d sensor(s) need for rank %d; using %d",
            nyquist,
            rows_needed,
            k,
            model.m,
            rows_needed,
        )
        return rows_needed
    return period


def plan_trajectory(
    cfg: ExperimentConfig,
    reduced: ReducedModel,
    model: RealBlockModel,
    geometry: Geometry,
    report: Optional[PlanReport] = None,
) -> Trajectory:
    if cfg.mode.kind == "stationary":
        return place_stationary(model, cfg.sensors, geometry)

    period = cfg.mode.period or default_period(reduced, cfg.sensors)
    mc = MotionConstraint(cfg.mode.speed)
    factor = cfg.mode.refine_factor
    if not factor:
        return plan(model, geometry, mc, PlanConfig(cfg.sensors, period, cfg.mode.enforce_cycle), report)

    if period % factor:
        raise ConfigError("period %d is not divisible by refine_factor %d" % (period, factor))
    coarse_model = RealBlockModel(
        dynamics=np.linalg.matrix_power(model.dynamics, factor), modes=model.modes
    )
    coarse = plan(
        coarse_model,
        geometry,
        MotionConstraint(cfg.mode.speed * factor),
        PlanConfig(cfg.sensors, period // factor, cfg.mode.enforce_cycle),
    )
    return multiscale_refine(
        model,
        coarse,
        factor,
        geometry,
        mc,
        PlanConfig(cfg.sensors, period, cfg.mode.enforce_cycle),
        report,
    )


def _json_float(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def conditioning_report(
    cfg: ExperimentConfig,
    reduced: ReducedModel,
    model: RealBlockModel,
    geometry: Geometry,
    traj: Trajectory,
) -> Dict[str, Any]:
    obs = assemble(model, traj)
    rank = is_observable(model, traj)
    speed = cfg.mode.speed if cfg.mode.kind == "mobile" else 0.0
    doc = {
        "k": traj.k,
        "l": traj.period_l,
        "m": model.m,
        "n": model.n,
        "condition_number": _json_float(condition_number(obs)),
        "observable": rank.observable,
        "rank": rank.rank,
        "singular_values": [float(s) for s in rank.singular_values],
        "nyquist_period": _json_float(nyquist_period(reduced)),
        "motion_violations": len(motion_violations(traj, geometry, speed)),
        "trace_bounds": None,
    }
    noise = cfg.step_noise
    if noise.q > 0:
        lifted_A, lifted_C = lift_system(model, traj)
        lifted_Q = lifted_process_noise(model, traj.period_l, noise.q)
        bounds = dare_trace_bounds(lifted_A, lifted_C, lifted_Q, noise.rho * np.eye(lifted_C.shape[0]))
        doc["trace_bounds"] = bounds.to_dict()
    return doc


def _limiting_trace_or_none(
    model: RealBlockModel, traj: Trajectory, noise: NoiseSpec, sigma0: float, key: str
) -> Optional[float]:
    try:
        trace = limiting_trace(model, traj, noise, sigma0)
    except NonConvergenceError as e:
        logger.warning("point %s: no limiting trace: %s", key, e)
        return None
    return _json_float(trace)


def run_point(
    cfg: ExperimentConfig, key: str, out_dir: str, plan_only: bool = False, plan_report: bool = True
) -> Dict[str, Any]:
    """
    Run one configuration end to end and write its data files into out_dir.

    Returns:
        summary row with the point key, seed, condition number and steady-state errors
    """
    sim_seed = derive_seed(cfg.seed, key)
    scenario = build_scenario(cfg, sim_seed)
    reduced = scenario.model
    model = to_real_blocks(reduced)
    if scenario.geometry.n != model.n:
        raise ConfigError("geometry has %d indices, model has %d" % (scenario.geometry.n, model.n))

    report = PlanReport() if plan_report and cfg.mode.kind == "mobile" else None
    traj = plan_trajectory(cfg, reduced, model, scenario.geometry, report)

    os.makedirs(out_dir, exist_ok=True)
    save_trajectory(traj, os.path.join(out_dir, "trajectory.json"))
    write_trajectory_csv(traj, os.path.join(out_dir, "trajectory.csv"), scenario.geometry)
    save_model(reduced, os.path.join(out_dir, "model.json"))
    geometry_doc = scenario.geometry.to_dict()
    if scenario.geometry.kind == "graph":
        geometry_doc["cells"] = scenario.geometry.coords.astype(int).tolist()
    atomic_write(os.path.join(out_dir, "geometry.json"), dump_json(geometry_doc))
    if report is not None:
        report.write_csv(os.path.join(out_dir, "plan_report.csv"))
    conditioning = conditioning_report(cfg, reduced, model, scenario.geometry, traj)

    summary = {
        "point": key,
        "status": "ok",
        "seed": sim_seed,
        "condition": conditioning["condition_number"],
        "rank": conditioning["rank"],
        "steady_trace": None,
        "steady_mse": None,
        "error": "",
    }
    noise, steps = cfg.step_noise, cfg.filter_steps
    if not plan_only:
        run = run_filter(
            model,
            traj,
            scenario.truth,
            noise,
            steps,
            sigma0=cfg.sigma0,
            seed=derive_seed(sim_seed, "measurement"),
            measurement_noise=scenario.measurement_noise,
        )
        run.write_csv(os.path.join(out_dir, "kf_run.csv"))
        window = max(traj.period_l, steps // 2)
        summary["steady_trace"] = _limiting_trace_or_none(model, traj, noise, cfg.sigma0, key)
        conditioning["limiting_trace"] = summary["steady_trace"]
        conditioning["run_final_trace"] = steady_state_trace(run, traj.period_l)
        summary["steady_mse"] = float(np.mean(run.recon_error_series[-window:]))
        conditioning["steady_trace"] = summary["steady_trace"]
        conditioning["steady_recon_mse"] = summary["steady_mse"]
    atomic_write(os.path.join(out_dir, "conditioning.json"), dump_json(conditioning))
    logger.info("point %s: condition %s, steady trace %s", key, summary["condition"], summary["steady_trace"])
    return summary


def _point_dir(root: str, key: str) -> str:
    safe = key.replace("=", "_").replace(",", "__")
    return os.path.join(root, safe)


def _run_point_safe(cfg: ExperimentConfig, key: str, overrides: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
    try:
        return run_point(apply_overrides(cfg, overrides), key, out_dir)
    except (MobileSensorsError, ValueError, np.linalg.LinAlgError) as e:
        logger.warning("point %s failed: %s", key, e)
        return {
            "point": key,
            "status": "failed",
            "seed": derive_seed(cfg.seed, key),
            "condition": None,
            "rank": None,
            "steady_trace": None,
            "steady_mse": None,
            "error": "%s: %s" % (type(e).__name__, e),
        }


def _collect_files(root: str) -> List[Dict[str, str]]:
    files = []
    for dirpath, _, filenames in os.walk(root):
        for filename in filenames:
            if filename == MANIFEST_NAME or filename.startswith(".tmp_"):
                continue
            path = os.path.join(dirpath, filename)
            files.append({"path": os.path.relpath(path, root), "sha256": sha256_file(path)})
    return sorted(files, key=lambda f: f["path"])


def _package_version() -> str:
    from . import __version__

    return __version__


def run_experiment(
    cfg: ExperimentConfig, workers: Optional[int] = None, verbose: bool = False
) -> RunManifest:
    """
    Run every sweep point (independently, in a process pool when workers > 1), then write the
    combined long-format sweep.csv, summary.csv and manifest.json.

    Point failures are recorded in the summary and manifest without stopping the sweep.
    """
    started = time.time()
    root = cfg.outputs
    os.makedirs(root, exist_ok=True)
    atomic_write(os.path.join(root, "config.yaml"), yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    points = sweep_points(cfg)
    workers = workers or cfg.workers

    summaries: Dict[str, Dict[str, Any]] = {}
    if workers > 1 and len(points) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_point_safe, cfg, key, overrides, _point_dir(root, key)): key
                for key, overrides in points
            }
            done = concurrent.futures.as_completed(futures)
            for future in tqdm(done, total=len(futures), disable=not verbose, desc="sweep"):
                summaries[futures[future]] = future.result()
    else:
        for key, overrides in tqdm(points, disable=not verbose, desc="sweep"):
            summaries[key] = _run_point_safe(cfg, key, overrides, _point_dir(root, key))

    frames = []
    for key, overrides in points:
        kf_path = os.path.join(_point_dir(root, key), "kf_run.csv")
        if summaries[key]["status"] != "ok" or not os.path.exists(kf_path):
            continue
        frame = pd.read_csv(kf_path, float_precision="round_trip")
        for position, (axis, value) in enumerate(overrides.items()):
            frame.insert(position, axis, _format_value(value))
        frame.insert(0, "point", key)
        frames.append(frame)
    if frames:
        sweep = pd.concat(frames, ignore_index=True)
        atomic_write(os.path.join(root, "sweep.csv"), sweep.to_csv(index=False))
    summary = pd.DataFrame.from_records([summaries[key] for key, _ in points], columns=SUMMARY_COLUMNS)
    atomic_write(os.path.join(root, "summary.csv"), summary.to_csv(index=False))

    failed = [key for key, _ in points if summaries[key]["status"] != "ok"]
    if failed:
        logger.warning("%d of %d sweep points failed: %s", len(failed), len(points), failed)

    manifest: RunManifest = {
        "name": cfg.name,
        "version": _package_version(),
        "config": cfg.to_dict(),
        "seeds": {key: derive_seed(cfg.seed, key) for key, _ in points},
        "points": [
            {"key": key, "dir": os.path.relpath(_point_dir(root, key), root), **summaries[key]}
            for key, _ in points
        ],
        "files": _collect_files(root),
        "started": started,
        "finished": time.time(),
    }
    atomic_write(os.path.join(root, MANIFEST_NAME), json.dumps(manifest, indent=2, default=str) + "\n")
    return manifest


def load_manifest(run_dir: PathLike) -> RunManifest:
    path = os.path.join(run_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise ConfigError("no manifest in %s" % run_dir)
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def verify_run(run_dir: PathLike) -> List[str]:
    """
    Re-hash every file listed in the manifest; returns the paths that are missing or changed
    """
    manifest = load_manifest(run_dir)
    mismatches = []
    for entry in manifest["files"]:
        path = os.path.join(run_dir, entry["path"])
        if not os.path.exists(path) or sha256_file(path) != entry["sha256"]:
            mismatches.append(entry["path"])
    return mismatches


TORUS_FIXTURE = {
    "rows": 32,
    "cols": 32,
    "n_fourier": 2,
    "n_gauss": 3,
    "gauss_width": 1.5,
    "center_separation": 12.0,
}

FIXTURE_CONFIGS: Dict[str, Dict[str, Any]] = {
    "torus_stationary.yaml": {
        "name": "torus_stationary",
        "scenario": {"kind": "torus", "torus": dict(TORUS_FIXTURE)},
        "model": {"kind": "known"},
        "mode": {"kind": "stationary"},
        "noise": {"q": 0.01, "rho": 0.0001},
        "steps": 200,
        "seed": 1,
        "outputs": "runs/torus_stationary",
        "sweep": {"sensors": [1, 2, 3]},
    },
    "torus_mobile.yaml": {
        "name": "torus_mobile",
        "scenario": {"kind": "torus", "torus": dict(TORUS_FIXTURE)},
        "model": {"kind": "known"},
        "sensors": 1,
        "mode": {"kind": "mobile", "speed": 1.0},
        "noise": {"q": 0.01, "rho": 0.0001},
        "steps": 200,
        "seed": 1,
        "outputs": "runs/torus_mobile",
        "sweep": {"speed": [1.0, 4.0, 24.0]},
    },
    "ks_sampling.yaml": {
        "name": "ks_sampling",
        "scenario": {
            "kind": "ks",
            "ks": {"n_grid": 256, "domain_length": 22.0, "dt_solver": 0.05, "burn_in": 50.0},
        },
        "model": {"kind": "dmd", "rank": 20, "train_time": 100.0},
        "sensors": 4,
        "mode": {"kind": "mobile", "speed": 8.0, "period": 16},
        "sampling_dt": 0.1,
        "noise": {"q": 1.0, "rho": 0.001, "per_time": True},
        "duration": 60.0,
        "seed": 0,
        "outputs": "runs/ks_sampling",
        "sweep": {"sampling_dt": [0.1, 0.2, 0.4]},
    },
    "gridded_demo.yaml": {
        "name": "gridded_demo",
        "scenario": {"kind": "gridded", "path": "demo_grid.bin", "format": BINARY_GRID},
        "model": {"kind": "dmd", "rank": 6, "train_steps": 100},
        "sensors": 2,
        "mode": {"kind": "mobile", "speed": 2.0, "period": 6},
        "noise": {"q": 0.01, "rho": 0.01},
        "steps": 60,
        "seed": 0,
        "outputs": "runs/gridded_demo",
    },
}


def write_fixtures(out_dir: PathLike) -> List[str]:
    """
    Write the desk-scale experiment configs and the demo grid they reference
    """
    written = []
    for filename, doc in FIXTURE_CONFIGS.items():
        path = os.path.join(out_dir, filename)
        atomic_write(path, yaml.safe_dump(doc, sort_keys=False))
        written.append(path)
    grid_path = os.path.join(out_dir, "demo_grid.bin")
    write_gridded(demo_gridded(), grid_path, BINARY_GRID)
    written.append(grid_path)
    return written
