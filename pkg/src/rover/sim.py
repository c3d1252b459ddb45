"""Ground-truth scenarios and raw sensor streams.

Trajectories are planar. Velocities are evaluated analytically at every
sample, positions follow by trapezoidal integration and the acceleration is
held constant over each sample period, so integrating the sampled
acceleration reproduces the sampled positions exactly. That is the property
the IMU round-trip tests rely on.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .angles import TWO_PI, unit, wrap_2pi, wrap_pi

GRAVITY = 9.8


# ---------------------------------------------------------------------------
# noise and sensor samples


@dataclass
class NoiseConfig:
    gyro_noise_density: float = 0.0  # rad/s/sqrt(Hz)
    gyro_bias: float = 0.0  # rad/s, constant, z axis
    accel_noise_density: float = 0.0  # m/s^2/sqrt(Hz)
    mag_heading_noise: float = 0.0  # rad, std
    csi_snr: float = float("inf")  # dB
    aoa_direct_noise: float = 0.0  # rad, std (bearings-only mode)
    mag_declination: float = 0.0  # rad, fixed indoor reference offset
    mag_rate: float = 10.0  # Hz
    nlos_inflation: float = 2.0  # bearing-noise multiplier for NLOS tags

    def __post_init__(self):
        for name in (
            "gyro_noise_density",
            "gyro_bias",
            "accel_noise_density",
            "mag_heading_noise",
            "aoa_direct_noise",
        ):
            value = getattr(self, name)
            if not value >= 0.0:
                raise ValueError(f"{name} must be nonnegative, got {value}")
        if self.mag_rate <= 0:
            raise ValueError("mag_rate must be positive")

    @classmethod
    def noiseless(cls) -> "NoiseConfig":
        return cls()

    @classmethod
    def calibrated(cls) -> "NoiseConfig":
        """MEMS-class IMU with the bearing noise fitted to a 9.3 deg median error.

        Gyro and accelerometer densities are those of a tactical MEMS unit
        (0.005 deg/s/rtHz, 100 ug/rtHz). csi_snr is the value found by
        ``rover.aoa.calibrate_snr``; aoa_direct_noise is the Gaussian sigma whose
        median absolute value is 9.3 deg.
        """
        return cls(
            gyro_noise_density=np.deg2rad(0.005),
            gyro_bias=np.deg2rad(0.05),
            accel_noise_density=100e-6 * GRAVITY,
            mag_heading_noise=np.deg2rad(2.0),
            csi_snr=CALIBRATED_CSI_SNR_DB,
            aoa_direct_noise=np.deg2rad(9.3) / 0.6745,
            mag_declination=np.deg2rad(-17.0),
        )


# SNR (dB) at which the MUSIC front-end reproduces a 9.3 deg median LOS error;
# fitted with rover.aoa.calibrate_snr over 500 frames.
CALIBRATED_CSI_SNR_DB = -1.6


@dataclass
class ImuSample:
    t: float
    omega: np.ndarray
    accel: np.ndarray
    dt: float | None = None
    mag_heading: float | None = None


@dataclass
class ImuStream:
    """Struct-of-arrays IMU stream; sample i is held over [t[i], t[i] + dt)."""

    t: np.ndarray
    dt: float
    omega: np.ndarray  # (N, 3) rad/s
    accel: np.ndarray  # (N, 3) m/s^2, specific force incl. +g on z
    mag_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mag_heading: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[ImuSample]:
        for i in range(len(self.t)):
            yield ImuSample(float(self.t[i]), self.omega[i], self.accel[i], self.dt)

    def index_of(self, t: float) -> int:
        return int(round((t - self.t[0]) / self.dt))

    def slice(self, start: int, stop: int) -> "ImuStream":
        """Samples [start, stop); magnetometer readings are not carried over."""
        return ImuStream(self.t[start:stop], self.dt, self.omega[start:stop], self.accel[start:stop])


# ---------------------------------------------------------------------------
# motion profiles


@dataclass
class Stationary:
    duration: float


@dataclass
class ConstantVelocity:
    speed: float
    duration: float = 10.0


@dataclass
class Ramp:
    """Smoothly change speed along the current heading."""

    speed: float
    duration: float = 1.0


@dataclass
class Rectangle:
    """Rounded-corner rectangle driven counter-clockwise, starting along +x.

    ``distance`` defaults to one lap. ``ramp`` seconds of smooth
    acceleration/deceleration are spent at each end of the segment.
    """

    width: float
    height: float
    speed: float
    corner_radius: float = 0.3
    distance: float | None = None
    ramp: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("rectangle sides must be positive")
        if self.speed <= 0:
            raise ValueError("rectangle speed must be positive")
        r = self.corner_radius
        if r < 0 or 2 * r > min(self.width, self.height):
            raise ValueError("corner radius does not fit the rectangle")

    @property
    def perimeter(self) -> float:
        r = self.corner_radius
        return 2 * (self.width + self.height) - (8 - 2 * np.pi) * r

    @property
    def path_length(self) -> float:
        return self.perimeter if self.distance is None else self.distance

    @property
    def duration(self) -> float:
        return self.path_length / self.speed + self.ramp

    @classmethod
    def with_perimeter(cls, perimeter, aspect, speed, corner_radius=0.3, **kw):
        """Rectangle whose rounded perimeter equals ``perimeter``."""
        straight = (perimeter + (8 - 2 * np.pi) * corner_radius) / 2
        height = straight / (1 + aspect)
        return cls(aspect * height, height, speed, corner_radius, **kw)


@dataclass
class Generic:
    """Random smooth motion through velocity knots (smoothstep blends).

    Starts from the incoming velocity and ends at ``end_speed`` along the
    final heading. Interior knots stay within ``wander`` metres of the
    segment start.
    """

    duration: float
    max_speed: float = 0.3
    knot_interval: float = 2.0
    seed: int = 0
    end_speed: float = 0.0
    max_turn: float = np.deg2rad(60.0)
    wander: float = 1.5


@dataclass
class Composite:
    segments: list

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))


MotionProfile = Union[Stationary, ConstantVelocity, Ramp, Rectangle, Generic, Composite]


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    t: np.ndarray
    pos: np.ndarray  # (N, 2)
    heading: np.ndarray  # (N,), wrapped to [0, 2pi)
    vel: np.ndarray  # (N, 2)
    acc: np.ndarray  # (N, 2), held over [t_i, t_i + dt)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.pos, axis=0), axis=1)))

    def index_of(self, t: float) -> int:
        return int(round((t - self.t[0]) / self.dt))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "heading", "vx", "vy", "ax", "ay"])
            for i in range(len(self.t)):
                w.writerow(
                    [repr(float(v)) for v in (
                        self.t[i], *self.pos[i], self.heading[i], *self.vel[i], *self.acc[i]
                    )]
                )

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:3], data[:, 3], data[:, 4:6], data[:, 6:8])


def _smoothstep(u):
    return u * u * (3.0 - 2.0 * u)


def _heading_from_velocity(vel, held):
    out = np.empty(len(vel))
    for i, v in enumerate(vel):
        if np.hypot(*v) > 1e-9:
            held = np.arctan2(v[1], v[0])
        out[i] = held
    return out


def _segment_samples(seg, n, dt, v0, heading0):
    """Velocities and headings at local times 0, dt, ..., n*dt."""
    t = np.arange(n + 1) * dt
    speed0 = float(np.hypot(*v0))

    if isinstance(seg, Stationary):
        if speed0 > 1e-9:
            raise ValueError("stationary segment entered with nonzero velocity")
        return np.zeros((n + 1, 2)), np.full(n + 1, heading0)

    if isinstance(seg, ConstantVelocity):
        vel = np.tile(seg.speed * unit(heading0), (n + 1, 1))
        return vel, np.full(n + 1, heading0)

    if isinstance(seg, Ramp):
        u = np.clip(t / seg.duration, 0.0, 1.0)
        speed = speed0 + (seg.speed - speed0) * _smoothstep(u)
        return speed[:, None] * unit(heading0), np.full(n + 1, heading0)

    if isinstance(seg, Rectangle):
        s, sdot = _rectangle_progress(seg, t)
        tangent = _rectangle_tangent(seg, s) + heading0
        return sdot[:, None] * unit(tangent), tangent

    if isinstance(seg, Generic):
        knots_t, knots_v = _generic_knots(seg, v0, heading0)
        vel = _blend_knots(knots_t, knots_v, t)
        return vel, _heading_from_velocity(vel, heading0)

    raise TypeError(f"unknown motion segment {seg!r}")


def _rectangle_progress(rect: Rectangle, t):
    """Arc length s(t) and speed ds/dt under optional end ramps."""
    v, ramp, total = rect.speed, rect.ramp, rect.duration
    s = np.empty_like(t)
    sdot = np.empty_like(t)
    for i, ti in enumerate(np.clip(t, 0.0, total)):
        if ramp > 0 and ti < ramp:
            u = ti / ramp
            sdot[i] = v * _smoothstep(u)
            s[i] = v * ramp * (u**3 - u**4 / 2)
        elif ramp > 0 and ti > total - ramp:
            u = (total - ti) / ramp
            sdot[i] = v * _smoothstep(u)
            s[i] = rect.path_length - v * ramp * (u**3 - u**4 / 2)
        else:
            sdot[i] = v
            s[i] = v * (ti - ramp) + v * ramp / 2 if ramp > 0 else v * ti
    return s, sdot


def _rectangle_tangent(rect: Rectangle, s):
    """Tangent angle at arc length s along the rounded rectangle."""
    r = rect.corner_radius
    sides = [rect.width - 2 * r, rect.height - 2 * r] * 2
    arc = np.pi * r / 2
    lap = rect.perimeter
    out = np.empty_like(s)
    for i, si in enumerate(np.mod(s, lap)):
        angle = 0.0
        for side in sides:
            if si < side:
                break
            si -= side
            if si < arc:
                angle += si / r if r > 0 else 0.0
                break
            si -= arc
            angle += np.pi / 2
        out[i] = angle
    # full laps add 2pi each; keep the angle continuous
    return out + TWO_PI * np.floor(s / lap)


def _generic_knots(seg: Generic, v0, heading0):
    rng = np.random.default_rng(seg.seed)
    n_knots = max(int(round(seg.duration / seg.knot_interval)), 1)
    times = np.linspace(0.0, seg.duration, n_knots + 1)
    speed0 = float(np.hypot(*v0))
    direction = np.arctan2(v0[1], v0[0]) if speed0 > 1e-9 else heading0
    knots = [np.asarray(v0, dtype=float)]
    offset = np.zeros(2)
    for j in range(1, n_knots):
        step = rng.uniform(-seg.max_turn, seg.max_turn)
        if j == 1 and speed0 <= 1e-9:
            step = 0.0  # leaving rest: move off along the current heading
        home = -offset
        if np.hypot(*home) > 1e-9 and np.hypot(*offset) > seg.wander:
            to_home = wrap_pi(np.arctan2(home[1], home[0]) - direction)
            step = float(np.clip(to_home, -seg.max_turn, seg.max_turn))
        direction = direction + step
        speed = rng.uniform(0.4, 1.0) * seg.max_speed
        knots.append(speed * unit(direction))
        offset = offset + 0.5 * (knots[-2] + knots[-1]) * (times[j] - times[j - 1])
    knots.append(seg.end_speed * unit(direction))
    return times, np.array(knots)


def _blend_knots(knot_t, knot_v, t):
    vel = np.empty((len(t), 2))
    idx = np.clip(np.searchsorted(knot_t, t, side="right") - 1, 0, len(knot_t) - 2)
    for i, (ti, j) in enumerate(zip(t, idx)):
        span = knot_t[j + 1] - knot_t[j]
        u = np.clip((ti - knot_t[j]) / span, 0.0, 1.0)
        vel[i] = knot_v[j] + (knot_v[j + 1] - knot_v[j]) * _smoothstep(u)
    return vel


def generate_trajectory(
    profile: MotionProfile,
    duration: float | None = None,
    dt: float = 0.005,
    start=(0.0, 0.0),
    heading0: float = 0.0,
) -> Trajectory:
    """Sample a kinematically consistent planar trajectory.

    ``duration`` overrides the profile's own duration for single-segment
    profiles; composites always use the sum of their segments.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if isinstance(profile, Composite):
        segments = list(profile.segments)
    else:
        segments = [profile]
    if duration is not None and not isinstance(profile, Composite):
        if duration <= 0:
            raise ValueError("duration must be positive")
        seg = segments[0]
        if isinstance(seg, Rectangle):
            seg = Rectangle(seg.width, seg.height, seg.speed, seg.corner_radius,
                            seg.speed * duration - seg.speed * seg.ramp, seg.ramp)
        elif hasattr(seg, "duration"):
            seg = type(seg)(**{**asdict(seg), "duration": duration})
        segments = [seg]

    vel_parts, head_parts = [], []
    v0 = np.zeros(2)
    if segments and isinstance(segments[0], (ConstantVelocity, Rectangle)):
        v0 = None  # first segment defines its own initial velocity
    h0 = heading0
    for k, seg in enumerate(segments):
        n = int(round(seg.duration / dt))
        if n < 1:
            raise ValueError(f"segment {seg!r} shorter than one sample")
        vin = np.zeros(2) if v0 is None else v0
        vel, head = _segment_samples(seg, n, dt, vin, h0)
        if v0 is not None and k > 0 and np.linalg.norm(vel[0] - v0) > 1e-6:
            raise ValueError(f"velocity discontinuity entering segment {k}: {seg!r}")
        if k > 0:
            vel, head = vel[1:], head[1:]
        vel_parts.append(vel)
        head_parts.append(head)
        v0, h0 = vel[-1], head[-1]

    vel = np.concatenate(vel_parts)
    heading = np.concatenate(head_parts)
    t = np.arange(len(vel)) * dt
    pos = np.empty_like(vel)
    pos[0] = start
    pos[1:] = start + np.cumsum(0.5 * (vel[1:] + vel[:-1]) * dt, axis=0)
    acc = np.zeros_like(vel)
    acc[:-1] = np.diff(vel, axis=0) / dt
    return Trajectory(t, pos, wrap_2pi(np.unwrap(heading)), vel, acc)


# ---------------------------------------------------------------------------
# sensors


def sample_imu(trajectory: Trajectory, noise: NoiseConfig, seed: int = 0) -> ImuStream:
    """Body-frame gyro/accelerometer samples plus magnetometer headings.

    Sample i holds over [t_i, t_i + dt): omega_z is the heading increment
    divided by dt and the accelerometer reads R(heading_i)^T a_i + g.
    """
    dt = trajectory.dt
    n = len(trajectory)
    gyro_rng, accel_rng, mag_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    heading = np.unwrap(trajectory.heading)
    omega = np.zeros((n, 3))
    omega[:-1, 2] = np.diff(heading) / dt
    c, s = np.cos(heading), np.sin(heading)
    ax, ay = trajectory.acc[:, 0], trajectory.acc[:, 1]
    accel = np.stack([c * ax + s * ay, -s * ax + c * ay, np.full(n, GRAVITY)], axis=1)

    if noise.gyro_noise_density > 0:
        omega += gyro_rng.normal(0.0, noise.gyro_noise_density / np.sqrt(dt), (n, 3))
    omega[:, 2] += noise.gyro_bias
    if noise.accel_noise_density > 0:
        accel += accel_rng.normal(0.0, noise.accel_noise_density / np.sqrt(dt), (n, 3))

    stride = max(int(round(1.0 / (noise.mag_rate * dt))), 1)
    mag_idx = np.arange(0, n, stride)
    mag = heading[mag_idx] + noise.mag_declination
    if noise.mag_heading_noise > 0:
        mag = mag + mag_rng.normal(0.0, noise.mag_heading_noise, len(mag_idx))
    omega = np.nan_to_num(omega, nan=0.0, posinf=0.0, neginf=0.0)
    accel = np.nan_to_num(accel, nan=0.0, posinf=0.0, neginf=0.0)
    return ImuStream(trajectory.t.copy(), dt, omega, accel, trajectory.t[mag_idx], wrap_2pi(mag))


def true_bearing(robot_pos, heading, tag_pos) -> float:
    """Array-frame bearing of a tag (uncorrected for heading), in [0, 2pi)."""
    d = np.asarray(tag_pos, dtype=float)[:2] - np.asarray(robot_pos, dtype=float)[:2]
    if np.hypot(*d) < 1e-12:
        raise ValueError("robot and tag positions coincide; bearing undefined")
    return wrap_2pi(np.arctan2(d[1], d[0]) - heading)


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class WorldScenario:
    tag_positions: np.ndarray  # (M, 2)
    trajectory: Trajectory
    imu_rate: float = 200.0
    packet_rate: float = 10.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    tag_los: Sequence[bool] | None = None
    tag_max_range: float = float("inf")
    ap_position: Sequence[float] = (4.5, -1.0)
    reflectors: int = 0
    profile: dict | None = None

    def __post_init__(self):
        self.tag_positions = np.atleast_2d(np.asarray(self.tag_positions, dtype=float))
        if self.tag_los is None:
            self.tag_los = [True] * len(self.tag_positions)
        if self.imu_rate < self.packet_rate:
            raise ValueError("imu_rate must be >= packet_rate")
        if np.any(np.diff(self.trajectory.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @property
    def n_tags(self) -> int:
        return len(self.tag_positions)

    def packet_times(self) -> np.ndarray:
        step = int(round(self.imu_rate / self.packet_rate))
        return self.trajectory.t[step::step]

    def visible(self, tag: int, pos) -> bool:
        return bool(np.hypot(*(self.tag_positions[tag] - pos)) <= self.tag_max_range)

    def to_json(self, path) -> None:
        payload = {
            "tag_positions": self.tag_positions.tolist(),
            "imu_rate": self.imu_rate,
            "packet_rate": self.packet_rate,
            "noise": asdict(self.noise),
            "seed": self.seed,
            "tag_los": list(self.tag_los),
            "tag_max_range": self.tag_max_range,
            "ap_position": list(self.ap_position),
            "reflectors": self.reflectors,
            "profile": self.profile,
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def from_json(cls, path) -> "WorldScenario":
        return scenario_from_dict(json.loads(Path(path).read_text()))


def profile_from_dict(entry: dict) -> MotionProfile:
    kinds = {
        "stationary": Stationary,
        "constant_velocity": ConstantVelocity,
        "ramp": Ramp,
        "rectangle": Rectangle,
        "generic": Generic,
    }
    entry = dict(entry)
    kind = entry.pop("kind")
    if kind == "composite":
        return Composite([profile_from_dict(s) for s in entry["segments"]])
    if kind == "rectangle" and "perimeter" in entry:
        perimeter = entry.pop("perimeter")
        aspect = entry.pop("aspect", 2.0)
        speed = entry.pop("speed")
        return Rectangle.with_perimeter(perimeter, aspect, speed, **entry)
    if kind not in kinds:
        raise ValueError(f"unknown profile kind {kind!r}")
    return kinds[kind](**entry)


def scenario_from_dict(payload: dict) -> WorldScenario:
    noise = NoiseConfig(**payload.get("noise", {}))
    imu_rate = float(payload.get("imu_rate", 200.0))
    profile = payload["profile"]
    traj = generate_trajectory(profile_from_dict(profile), dt=1.0 / imu_rate)
    return WorldScenario(
        tag_positions=np.asarray(payload["tag_positions"], dtype=float),
        trajectory=traj,
        imu_rate=imu_rate,
        packet_rate=float(payload.get("packet_rate", 10.0)),
        noise=noise,
        seed=int(payload.get("seed", 0)),
        tag_los=payload.get("tag_los"),
        tag_max_range=float(payload.get("tag_max_range", float("inf"))),
        ap_position=tuple(payload.get("ap_position", (4.5, -1.0))),
        reflectors=int(payload.get("reflectors", 0)),
        profile=profile,
    )
