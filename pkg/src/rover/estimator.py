"""Online front-end: heading filter, IMU buffering, admission and window solves."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .angles import wrap_pi
from .aoa import DEFAULT_AOA_STD, OmegaTracker, correct_aoa
from .heading import HeadingEKF, HeadingFilterConfig
from .marginalizer import PolicyConfig, TraceEntry, run_policy
from .preint import PreintegratedOdometry, concatenate, preintegrate
from .sim import ImuStream
from .window import DegenerateSystemError, new_window, observe, propagate_state, solve


@dataclass
class EstimatorConfig:
    max_states: int = 50
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    heading: HeadingFilterConfig = field(default_factory=HeadingFilterConfig)
    accel_noise_density: float = 100e-6 * 9.8  # m/s^2/sqrt(Hz)
    cov_inflation: float = 1.0
    aoa_std: float = DEFAULT_AOA_STD
    omega_forgetting: float = 0.0
    # bearings further than this many sigmas from the prediction are dropped
    # once a tag has gate_min_obs observations; inf disables the gate
    gate_sigmas: float = 3.0
    gate_min_obs: int = 5

    def __post_init__(self):
        if self.max_states < 2:
            raise ValueError("window size must be at least 2")


@dataclass
class EpochEstimate:
    t: float
    position: np.ndarray
    admitted: bool


@dataclass
class EstimatorResult:
    epochs: list
    trace: list
    solve_ms: list
    tags: dict
    tag_history: dict
    degenerate: int
    window: object
    rejected: int = 0


class Estimator:
    """Consumes an IMU stream and time-ordered array-frame AoA packets.

    ``packets`` is a sequence of (t, {tag: aoa_in_array_frame}). Epochs with
    no detections still advance the IMU buffer.
    """

    def __init__(self, cfg: EstimatorConfig | None = None):
        self.cfg = cfg or EstimatorConfig()

    def run(self, stream: ImuStream, packets) -> EstimatorResult:
        cfg = self.cfg
        ekf = HeadingEKF(cfg.heading)
        phi, bias = ekf.run(stream)
        omega = stream.omega.copy()
        omega[:, 2] -= bias
        corrected = ImuStream(stream.t, stream.dt, omega, stream.accel)
        tracker = OmegaTracker(cfg.aoa_std**2, cfg.omega_forgetting)

        window = None
        pending: PreintegratedOdometry | None = None
        last_idx = 0
        epochs, trace, solve_ms = [], [], []
        tag_history: dict = {}
        degenerate = 0
        rejected = 0

        for t, aoas in packets:
            i = min(max(stream.index_of(t), 0), len(stream) - 1)
            heading = float(phi[i])
            bearings = {tag: correct_aoa(a, heading) for tag, a in aoas.items()}

            if window is None:
                if not bearings:
                    continue
                window = new_window(t, heading, cfg.max_states)
                observe(window, 0, bearings, {k: tracker.variance(k) for k in bearings},
                        cfg.policy.guess_distance, cfg.policy.tag_guess_std)
                last_idx = i
                try:
                    solve(window)
                except DegenerateSystemError:
                    degenerate += 1
                epochs.append(EpochEstimate(t, window.newest.mu.copy(), True))
                continue

            if i > last_idx:
                chunk = preintegrate(corrected.slice(last_idx, i), cfg.accel_noise_density, cfg.cov_inflation)
                pending = chunk if pending is None else concatenate(pending, chunk)
                last_idx = i
            if pending is None or not bearings:
                epochs.append(EpochEstimate(t, self._dead_reckon(window, pending, heading), False))
                continue

            predicted_mu = self._dead_reckon(window, pending, heading)
            for tag in sorted(bearings):
                if tag not in window.tags:
                    continue
                est = window.tags[tag] - predicted_mu
                innovation = wrap_pi(bearings[tag] - np.arctan2(est[1], est[0]))
                trusted = window.obs_count.get(tag, 0) >= cfg.gate_min_obs
                if trusted and abs(innovation) > cfg.gate_sigmas * np.sqrt(tracker.variance(tag)):
                    del bearings[tag]
                    rejected += 1
                    continue
                tracker.update(tag, innovation)
            if not bearings:
                epochs.append(EpochEstimate(t, predicted_mu, False))
                continue
            omegas = {k: tracker.variance(k) for k in bearings}
            entry: TraceEntry = run_policy(window, t, heading, pending, bearings, omegas, cfg.policy)
            trace.append(entry)
            if entry.decision == "add":
                pending = None
                degenerate += int(entry.degenerate)
                solve_ms.append(window.last_solve.solve_ms)
                for tag, p in window.published_tags().items():
                    tag_history.setdefault(tag, []).append((t, p.copy()))
                epochs.append(EpochEstimate(t, window.newest.mu.copy(), True))
            else:
                epochs.append(EpochEstimate(t, self._dead_reckon(window, pending, heading), False))

        tags = window.published_tags() if window is not None else {}
        # tags evicted from the window keep their last published estimate
        for tag, hist in tag_history.items():
            tags.setdefault(tag, hist[-1][1])
        return EstimatorResult(epochs, trace, solve_ms, tags, tag_history, degenerate, window, rejected)

    @staticmethod
    def _dead_reckon(window, pending, heading) -> np.ndarray:
        if pending is None:
            return window.newest.mu.copy()
        mu, _ = propagate_state(window.newest, pending, heading)
        return mu
