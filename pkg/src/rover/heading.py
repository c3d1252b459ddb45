"""Planar heading filter fusing gyro rate with a magnetometer reference.

State is (heading, gyro z-bias). The magnetometer reference direction is
offset from the world x axis by a fixed declination that is estimated during
an initial stationary alignment window, assuming the robot starts at heading 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .angles import wrap_2pi, wrap_pi
from .sim import ImuStream


@dataclass(frozen=True)
class HeadingState:
    phi: float = 0.0
    gyro_bias: float = 0.0
    P: np.ndarray = field(default_factory=lambda: np.diag([1e-6, 1e-6]))

    def __post_init__(self):
        object.__setattr__(self, "phi", wrap_2pi(self.phi))


@dataclass
class HeadingFilterConfig:
    gyro_noise_density: float = np.deg2rad(0.005)  # rad/s/sqrt(Hz)
    bias_walk: float = 1e-5  # rad/s/sqrt(s)
    mag_noise: float = np.deg2rad(2.0)  # rad
    align_time: float = 2.0  # s
    init_bias_std: float = np.deg2rad(0.1)


def predict(state: HeadingState, omega_z: float, dt: float, cfg=None) -> HeadingState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or HeadingFilterConfig()
    F = np.array([[1.0, -dt], [0.0, 1.0]])
    Q = np.diag([max(cfg.gyro_noise_density, 1e-9) ** 2 * dt, max(cfg.bias_walk, 1e-12) ** 2 * dt])
    P = F @ state.P @ F.T + Q
    return HeadingState(state.phi + (omega_z - state.gyro_bias) * dt, state.gyro_bias, 0.5 * (P + P.T))


def update_mag(state: HeadingState, mag_heading: float, cfg=None, declination: float = 0.0) -> HeadingState:
    """EKF update with a wrapped innovation; ``declination`` is removed first."""
    cfg = cfg or HeadingFilterConfig()
    innovation = wrap_pi(mag_heading - declination - state.phi)
    H = np.array([1.0, 0.0])
    S = H @ state.P @ H + max(cfg.mag_noise, 1e-9) ** 2
    K = state.P @ H / S
    IKH = np.eye(2) - np.outer(K, H)
    # Joseph form keeps P symmetric positive definite
    P = IKH @ state.P @ IKH.T + np.outer(K, K) * max(cfg.mag_noise, 1e-9) ** 2
    return HeadingState(
        state.phi + K[0] * innovation,
        state.gyro_bias + K[1] * innovation,
        0.5 * (P + P.T),
    )


def rotation_about_z(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class HeadingEKF:
    """Sequential filter over an IMU stream with stationary initial alignment."""

    def __init__(self, cfg: HeadingFilterConfig | None = None):
        self.cfg = cfg or HeadingFilterConfig()
        self.declination = 0.0

    def align(self, stream: ImuStream) -> HeadingState:
        """Estimate declination and gyro bias from the first ``align_time`` seconds."""
        t0 = stream.t[0]
        in_mag = stream.mag_t < t0 + self.cfg.align_time
        if np.any(in_mag):
            m = stream.mag_heading[in_mag]
            self.declination = float(np.arctan2(np.mean(np.sin(m)), np.mean(np.cos(m))))
        in_imu = stream.t < t0 + self.cfg.align_time
        bias = float(np.mean(stream.omega[in_imu, 2])) if np.any(in_imu) else 0.0
        n = max(int(np.sum(in_imu)), 1)
        bias_var = self.cfg.gyro_noise_density**2 / (n * stream.dt) + 1e-12
        return HeadingState(0.0, bias, np.diag([1e-8, max(bias_var, 1e-10)]))

    def run(self, stream: ImuStream) -> tuple[np.ndarray, np.ndarray]:
        """Heading and bias estimates at every IMU sample time.

        The estimate at sample i includes magnetometer readings up to t_i and
        gyro samples before i.
        """
        state = self.align(stream)
        n = len(stream)
        phi = np.empty(n)
        bias = np.empty(n)
        mag_idx = np.round((stream.mag_t - stream.t[0]) / stream.dt).astype(int)
        mag_at = dict(zip(mag_idx.tolist(), stream.mag_heading.tolist()))
        unwrapped = 0.0
        for i in range(n):
            if i in mag_at:
                state = update_mag(state, mag_at[i], self.cfg, self.declination)
            unwrapped += wrap_pi(state.phi - wrap_2pi(unwrapped))
            phi[i] = unwrapped
            bias[i] = state.gyro_bias
            state = predict(state, stream.omega[i, 2], stream.dt, self.cfg)
        return phi, bias
