"""Experiment runner: simulate a scenario, estimate, score and write results."""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .aoa import NoDetectionError, direct_path_aoa
from .estimator import Estimator, EstimatorConfig
from .marginalizer import MODES, PolicyConfig
from .rf import LinkConfig, simulate_packet
from .sim import (
    NoiseConfig,
    WorldScenario,
    sample_imu,
    scenario_from_dict,
    true_bearing,
)
from .angles import wrap_2pi

RUN_MODES = ("bearings", "csi")


class ConfigError(ValueError):
    """Malformed run configuration or scenario."""


# Room-scale layout used by the built-in rectangle experiment: a 41.96 m loop
# (about 14 m x 7 m) with one tag beyond each side.
ROOM_TAGS = [[7.0, -2.5], [16.5, 3.5], [7.0, 9.5], [-2.5, 3.5]]


def rectangle_scenario(seed: int = 0, noise: NoiseConfig | None = None, reflectors: int = 2) -> dict:
    return {
        "tag_positions": ROOM_TAGS,
        "noise": asdict(noise or NoiseConfig.calibrated()),
        "seed": seed,
        "reflectors": reflectors,
        "profile": {
            "kind": "composite",
            "segments": [
                {"kind": "stationary", "duration": 2.0},
                {"kind": "ramp", "speed": 0.25, "duration": 1.0},
                {"kind": "rectangle", "perimeter": 41.96, "aspect": 2.0, "speed": 0.25},
                {"kind": "ramp", "speed": 0.0, "duration": 1.0},
            ],
        },
    }


# Tags around the small area covered by the degenerate-motion scenarios.
NEAR_TAGS = [[4.0, -3.0], [4.5, 3.5], [-3.0, 4.0], [-3.5, -3.0]]
DEGENERATE_KINDS = ("stationary", "constant_velocity")


def degenerate_scenario(
    kind: str = "stationary",
    seed: int = 0,
    noise: NoiseConfig | None = None,
    generic_duration: float = 24.0,
    hold_duration: float = 30.0,
    speed: float = 0.25,
    motion_seed: int = 3,
) -> dict:
    """Generic excitation followed by a stretch with no linear acceleration.

    ``kind`` selects whether the robot then stands still or keeps driving
    straight at ``speed``.
    """
    if kind not in DEGENERATE_KINDS:
        raise ConfigError(f"kind must be one of {DEGENERATE_KINDS}")
    moving = kind == "constant_velocity"
    hold = (
        {"kind": "constant_velocity", "speed": speed, "duration": hold_duration}
        if moving
        else {"kind": "stationary", "duration": hold_duration}
    )
    return {
        "tag_positions": NEAR_TAGS,
        "noise": asdict(noise or NoiseConfig.calibrated()),
        "seed": seed,
        "profile": {
            "kind": "composite",
            "segments": [
                {"kind": "stationary", "duration": 2.0},
                {
                    "kind": "generic",
                    "duration": generic_duration,
                    "seed": motion_seed,
                    "end_speed": speed if moving else 0.0,
                },
                hold,
            ],
        },
        "hold_start": 2.0 + generic_duration,
    }


@dataclass
class RunConfig:
    scenario: dict | str
    mode: str = "bearings"
    window: int = 50
    marginalization: str = "flexible"
    seed: int = 0
    trials: int = 1
    epsilon: float = 0.02
    delta: float = 0.5
    out: str | None = None

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}")
        if self.marginalization not in MODES:
            raise ConfigError(f"marginalization must be one of {MODES}")
        if self.window < 2:
            raise ConfigError("window size must be at least 2")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")

    def load_scenario(self, seed: int | None = None) -> WorldScenario:
        payload = self.scenario
        if isinstance(payload, (str, Path)):
            try:
                payload = json.loads(Path(payload).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read scenario {self.scenario}: {exc}") from exc
        payload = dict(payload)
        payload["seed"] = self.seed if seed is None else seed
        try:
            return scenario_from_dict(payload)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scenario: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(payload, dict) or "scenario" not in payload:
        raise ConfigError("config must be an object with a 'scenario' entry")
    scenario = payload["scenario"]
    if isinstance(scenario, str) and not Path(scenario).is_absolute():
        scenario = str(Path(path).parent / scenario)
    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return RunConfig(**{**payload, "scenario": scenario})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# measurement generation


def generate_packets(scn: WorldScenario, mode: str = "bearings"):
    """Array-frame AoA packets [(t, {tag: aoa})] for every packet epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([scn.seed, 7]))
    traj = scn.trajectory
    times = scn.packet_times()
    link = None
    if mode == "csi":
        lo = np.minimum(traj.pos.min(axis=0), scn.tag_positions.min(axis=0)) - 2.0
        hi = np.maximum(traj.pos.max(axis=0), scn.tag_positions.max(axis=0)) + 2.0
        reflectors = rng.uniform(lo, hi, size=(scn.reflectors, 2))
        link = LinkConfig(
            ap_position=scn.ap_position,
            reflectors=[tuple(r) for r in reflectors],
            max_range=scn.tag_max_range,
            snr_db=scn.noise.csi_snr,
        )
    packets = []
    for t in times:
        k = traj.index_of(t)
        pos, heading = traj.pos[k], traj.heading[k]
        obs = {}
        for tag, tpos in enumerate(scn.tag_positions):
            if not scn.visible(tag, pos):
                continue
            if mode == "bearings":
                sigma = scn.noise.aoa_direct_noise
                if not scn.tag_los[tag]:
                    sigma *= scn.noise.nlos_inflation
                obs[tag] = wrap_2pi(true_bearing(pos, heading, tpos) + rng.normal(0.0, sigma))
            else:
                frame = simulate_packet(pos, heading, tpos, link, rng, tag_id=tag, t=float(t))
                if frame is None:
                    continue
                try:
                    obs[tag] = direct_path_aoa(frame)
                except NoDetectionError:
                    continue
        packets.append((float(t), obs))
    return packets


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    seed: int
    times: list
    robot_errors: list
    admitted: list
    tag_errors: dict
    tag_los: dict
    mean_robot_error: float
    median_robot_error: float
    mean_tag_error: float
    mean_los_tag_error: float
    solve_ms: list
    mean_solve_ms: float
    policy: dict
    degenerate: int
    runtime_s: float
    estimates: list = field(default_factory=list)
    truth: list = field(default_factory=list)
    tag_estimates: dict = field(default_factory=dict)
    tag_truth: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def summary(self, timing: bool = True) -> dict:
        d = asdict(self)
        for k in ("estimates", "truth", "trace") + (() if timing else TIMING_FIELDS):
            d.pop(k)
        return d

    def timing(self) -> dict:
        return {"seed": self.seed, **{k: getattr(self, k) for k in TIMING_FIELDS}}


# wall-clock fields vary between identical runs; they go to timing.json so the
# other outputs stay byte-identical per seed
TIMING_FIELDS = ("solve_ms", "mean_solve_ms", "runtime_s")


def _mean(x):
    return float(np.mean(x)) if len(x) else float("nan")


def run_single(cfg: RunConfig, seed: int, packets=None, scenario=None) -> RunReport:
    t0 = time.perf_counter()
    scn = scenario or cfg.load_scenario(seed)
    stream = sample_imu(scn.trajectory, scn.noise, seed)
    if packets is None:
        packets = generate_packets(scn, cfg.mode)
    est_cfg = EstimatorConfig(
        max_states=cfg.window,
        policy=PolicyConfig(delta=cfg.delta, epsilon=cfg.epsilon, mode=cfg.marginalization),
        accel_noise_density=max(scn.noise.accel_noise_density, 1e-4),
        aoa_std=max(scn.noise.aoa_direct_noise, np.deg2rad(0.5)),
    )
    result = Estimator(est_cfg).run(stream, packets)

    traj = scn.trajectory
    times, errors, admitted, est, truth = [], [], [], [], []
    for e in result.epochs:
        p_true = traj.pos[traj.index_of(e.t)]
        times.append(e.t)
        est.append(e.position.tolist())
        truth.append(p_true.tolist())
        errors.append(float(np.hypot(*(e.position - p_true))))
        admitted.append(bool(e.admitted))
    tag_err = {
        int(k): float(np.hypot(*(v - scn.tag_positions[k]))) for k, v in sorted(result.tags.items())
    }
    los = {int(k): bool(scn.tag_los[k]) for k in tag_err}
    counts = {"add": 0, "skip": 0, "FIFO": 0, "LIFO": 0}
    for entry in result.trace:
        counts[entry.decision] += 1
        if entry.evicted_state is not None:
            counts[entry.flag] += 1
    return RunReport(
        seed=seed,
        times=times,
        robot_errors=errors,
        admitted=admitted,
        tag_errors=tag_err,
        tag_los=los,
        mean_robot_error=_mean(errors),
        median_robot_error=float(np.median(errors)) if errors else float("nan"),
        mean_tag_error=_mean(list(tag_err.values())),
        mean_los_tag_error=_mean([v for k, v in tag_err.items() if los[k]]),
        solve_ms=result.solve_ms,
        mean_solve_ms=_mean(result.solve_ms),
        policy=counts,
        degenerate=result.degenerate,
        runtime_s=time.perf_counter() - t0,
        estimates=est,
        truth=truth,
        tag_estimates={int(k): v.tolist() for k, v in result.tags.items()},
        tag_truth={int(k): scn.tag_positions[k].tolist() for k in tag_err},
        trace=[json.loads(e.to_json()) for e in result.trace],
    )


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ROVER_THREADS", "1")))
    except ValueError:
        return 1


def run(cfg: RunConfig) -> list:
    """One report per trial; trial i uses seed ``cfg.seed + i``."""
    seeds = [cfg.seed + i for i in range(cfg.trials)]
    workers = min(_threads(), len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(lambda s: run_single(cfg, s), seeds))
    else:
        reports = [run_single(cfg, s) for s in seeds]
    if cfg.out:
        write_outputs(reports, cfg.out)
    return reports


@dataclass
class PairedReport:
    a: RunReport
    b: RunReport
    times: list
    difference: list  # error_a - error_b per epoch


def compare(cfg_a: RunConfig, cfg_b: RunConfig, seed: int | None = None) -> PairedReport:
    """Run two configurations on the same simulated measurements."""
    if json.dumps(cfg_a.scenario, sort_keys=True, default=str) != json.dumps(cfg_b.scenario, sort_keys=True, default=str):
        raise ConfigError("compared configurations must share a scenario")
    if cfg_a.mode != cfg_b.mode:
        raise ConfigError("compared configurations must share a measurement mode")
    seed = cfg_a.seed if seed is None else seed
    scn = cfg_a.load_scenario(seed)
    packets = generate_packets(scn, cfg_a.mode)
    ra = run_single(cfg_a, seed, packets, scn)
    rb = run_single(cfg_b, seed, packets, scn)
    diff = (np.asarray(ra.robot_errors) - np.asarray(rb.robot_errors)).tolist()
    return PairedReport(ra, rb, ra.times, diff)


def sweep_window_size(cfg: RunConfig, sizes, seeds=None) -> list:
    """Rows of (size, mean robot error, mean solve ms) on shared measurements."""
    if any(not 2 <= s <= 200 for s in sizes):
        raise ConfigError("window sizes must lie in [2, 200]")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    cache = {}
    rows = []
    for size in sizes:
        errs, ms = [], []
        for seed in seeds:
            if seed not in cache:
                scn = cfg.load_scenario(seed)
                cache[seed] = (scn, generate_packets(scn, cfg.mode))
            scn, packets = cache[seed]
            rep = run_single(replace(cfg, window=size), seed, packets, scn)
            errs.append(rep.mean_robot_error)
            ms.append(rep.mean_solve_ms)
        rows.append({"size": size, "errors": errs, "mean_error": _mean(errs), "mean_solve_ms": _mean(ms)})
    return rows


# ---------------------------------------------------------------------------
# output files


def write_outputs(reports, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    single = len(reports) == 1
    for name, rows in (
        ("report.json", [r.summary(timing=False) for r in reports]),
        ("timing.json", [r.timing() for r in reports]),
    ):
        (out / name).write_text(json.dumps(rows[0] if single else rows, indent=2))
    for r in reports:
        suffix = "" if single else f"_{r.seed}"
        with open(out / f"trajectory{suffix}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "x_true", "y_true", "error", "admitted"])
            for t, p, q, e, a in zip(r.times, r.estimates, r.truth, r.robot_errors, r.admitted):
                w.writerow([repr(t), repr(p[0]), repr(p[1]), repr(q[0]), repr(q[1]), repr(e), int(a)])
        with open(out / f"tags{suffix}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tag", "x", "y", "x_true", "y_true", "error", "los"])
            for k, e in r.tag_errors.items():
                p, q = r.tag_estimates[k], r.tag_truth[k]
                w.writerow([k, repr(p[0]), repr(p[1]), repr(q[0]), repr(q[1]), repr(e), int(r.tag_los[k])])
        with open(out / f"policy{suffix}.jsonl", "w") as fh:
            for entry in r.trace:
                fh.write(json.dumps(entry) + "\n")


def read_trajectory_csv(path) -> dict:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}
