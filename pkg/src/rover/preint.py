"""IMU preintegration between consecutive window states.

The increments are the discrete sums

    V = sum R_t a_t dt
    T = sum [V_t dt + 1/2 R_t a_t dt^2]

with V_t the running velocity sum before sample t and R_t the incremental
rotation accumulated by a first-order skew update, re-orthonormalized at
every step. Gravity stays inside the increments; it is removed when the
increments are used to propagate a state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .angles import skew
from .sim import GRAVITY, ImuStream

G_VEC = np.array([0.0, 0.0, GRAVITY])


@dataclass
class PreintegratedOdometry:
    R_end: np.ndarray = field(default_factory=lambda: np.eye(3))
    V: np.ndarray = field(default_factory=lambda: np.zeros(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cov: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))  # over [T, V]
    dt_total: float = 0.0
    sample_count: int = 0
    t_start: float = 0.0
    t_end: float = 0.0

    @property
    def Lambda(self) -> np.ndarray:
        """Covariance of the translation increment T."""
        return self.cov[:3, :3]

    @classmethod
    def identity(cls, t: float = 0.0) -> "PreintegratedOdometry":
        return cls(t_start=t, t_end=t)


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(M)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] *= -1
        R = u @ vt
    return R


def _as_arrays(samples, dt=None):
    if isinstance(samples, ImuStream):
        n = len(samples)
        return samples.t, np.full(n, samples.dt), samples.omega, samples.accel
    samples = list(samples)
    if not samples:
        raise ValueError("cannot preintegrate an empty sample buffer")
    t = np.array([s.t for s in samples], dtype=float)
    omega = np.array([s.omega for s in samples], dtype=float)
    accel = np.array([s.accel for s in samples], dtype=float)
    dts = np.empty(len(samples))
    dts[:-1] = np.diff(t)
    for i, s in enumerate(samples):
        if s.dt is not None:
            dts[i] = s.dt
    if samples[-1].dt is None:
        if dt is not None:
            dts[-1] = dt
        elif len(samples) > 1:
            dts[-1] = dts[-2]
        else:
            raise ValueError("single sample without dt")
    return t, dts, omega, accel


def preintegrate(
    samples,
    accel_noise_density: float = 0.0,
    cov_inflation: float = 1.0,
    dt: float | None = None,
) -> PreintegratedOdometry:
    """Summarize a buffer of IMU samples as relative increments {R, V, T}.

    ``samples`` is an ImuStream slice or a sequence of ImuSample. The
    covariance is first-order propagation of white accelerometer noise
    through the sums, scaled by ``cov_inflation``.
    """
    t, dts, omega, accel = _as_arrays(samples, dt)
    if len(t) == 0:
        raise ValueError("cannot preintegrate an empty sample buffer")
    if np.any(np.diff(t) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")

    R = np.eye(3)
    V = np.zeros(3)
    T = np.zeros(3)
    P = np.zeros((6, 6))
    A = np.eye(6)
    I3 = np.eye(3)
    for w, a, h in zip(omega, accel, dts):
        Ra = R @ a
        T = T + V * h + 0.5 * Ra * h * h
        V = V + Ra * h
        if accel_noise_density > 0:
            A[:3, 3:] = I3 * h
            B = np.vstack([0.5 * h * h * R, h * R])
            P = A @ P @ A.T + (accel_noise_density**2 / h) * (B @ B.T)
        R = nearest_rotation(R @ (I3 + skew(w) * h))
    return PreintegratedOdometry(
        R_end=R,
        V=V,
        T=T,
        cov=P * cov_inflation,
        dt_total=float(np.sum(dts)),
        sample_count=len(t),
        t_start=float(t[0]),
        t_end=float(t[-1] + dts[-1]),
    )


def concatenate(a: PreintegratedOdometry, b: PreintegratedOdometry) -> PreintegratedOdometry:
    """Compose increments over [k-1, k] and [k, k+1] into [k-1, k+1]."""
    if a.sample_count and b.sample_count:
        period = min(a.dt_total / a.sample_count, b.dt_total / b.sample_count)
        if abs(b.t_start - a.t_end) > period + 1e-9:
            raise ValueError(
                f"preintegration intervals are not contiguous ({a.t_end} -> {b.t_start})"
            )
    Ra = a.R_end
    A = np.eye(6)
    A[:3, 3:] = np.eye(3) * b.dt_total
    B = np.zeros((6, 6))
    B[:3, :3] = Ra
    B[3:, 3:] = Ra
    return PreintegratedOdometry(
        R_end=nearest_rotation(Ra @ b.R_end),
        V=a.V + Ra @ b.V,
        T=a.T + a.V * b.dt_total + Ra @ b.T,
        cov=A @ a.cov @ A.T + B @ b.cov @ B.T,
        dt_total=a.dt_total + b.dt_total,
        sample_count=a.sample_count + b.sample_count,
        t_start=a.t_start if a.sample_count else b.t_start,
        t_end=b.t_end if b.sample_count else a.t_end,
    )


def propagate_position(mu_k, nu_k, R_k0, preint: PreintegratedOdometry) -> np.ndarray:
    """mu_{k+1} = mu_k + R nu dt - R g dt^2/2 + R T  (R: body k -> world)."""
    dt = preint.dt_total
    R = np.asarray(R_k0)
    return (
        np.asarray(mu_k, dtype=float)
        + R @ np.asarray(nu_k, dtype=float) * dt
        - R @ G_VEC * dt * dt / 2
        + R @ preint.T
    )


def propagate_velocity(nu_k, R_k_next, preint: PreintegratedOdometry) -> np.ndarray:
    """nu_{k+1} = R nu_k - R g dt + R V  (R: body k -> body k+1)."""
    dt = preint.dt_total
    R = np.asarray(R_k_next)
    return R @ np.asarray(nu_k, dtype=float) - R @ G_VEC * dt + R @ preint.V
