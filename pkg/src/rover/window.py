"""Sliding-window least squares over robot positions, velocities and tag positions.

The problem is planar and linear in the unknowns once the world bearings and
the state headings are fixed:

* an AoA factor asks the world bearing ray from a robot position to pass
  through the tag, via the z component of r x (b - mu);
* an odometry factor ties two consecutive states through the preintegrated
  translation T and velocity V increments, both expressed in the body frame
  of the earlier state;
* a prior (information matrix plus vector) summarizes marginalized states;
* unary factors pin the origin, the initial rest velocity and each tag's
  initial guess.

Every variable is a 2-vector addressed by a key ``("mu", sid)``,
``("nu", sid)`` or ``("tag", tid)``. Robot velocities are body-frame.

An AoA factor with a frozen ``distance`` is used in exactly that linear form,
weighted by 1/(d^2 Omega). Otherwise its residual is the wrapped angle
between the measured ray and the estimated robot-to-tag direction, weighted
by 1/Omega. That is the cross product scaled by the inverse distance near the
optimum, but it neither rewards shrinking the map nor accepts a tag sitting
behind the robot. Such factors are relinearized at every Gauss-Newton pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .angles import rot2, unit
from .preint import PreintegratedOdometry
from .sim import GRAVITY

ORIGIN_WEIGHT = 1e6
INITIAL_TAG_DISTANCE = 3.0
TAG_GUESS_STD = 10.0
MIN_WEIGHT_DISTANCE = 0.5
MAX_ITERATIONS = 10
CONVERGENCE_TOL = 1e-6
RCOND_MIN = 1e-12


class DegenerateSystemError(RuntimeError):
    """The normal matrix is singular; ``directions`` lists the weakest keys."""

    def __init__(self, message, directions=()):
        super().__init__(message)
        self.directions = list(directions)


@dataclass
class RobotState:
    sid: int
    t: float
    mu: np.ndarray
    nu: np.ndarray
    phi: float  # heading, body -> world

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(2)
        self.nu = np.asarray(self.nu, dtype=float).reshape(2)

    @property
    def R_world_to_body(self) -> np.ndarray:
        return rot2(-self.phi)


@dataclass
class AoaFactor:
    sid: int
    tag: int
    bearing: float  # world frame, rad
    omega: float  # rad^2
    distance: float | None = None  # frozen weighting distance; None tracks the estimate

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("AoA variance must be positive")

    @property
    def direction(self) -> np.ndarray:
        return np.array([np.cos(self.bearing), np.sin(self.bearing), 0.0])


@dataclass
class OdomFactor:
    sid_from: int
    sid_to: int
    preint: PreintegratedOdometry

    @property
    def Lambda(self) -> np.ndarray:
        return self.preint.Lambda

    @property
    def u_hat(self) -> np.ndarray:
        return self.preint.T

    def planar_cov(self, floor: float = 1e-12) -> np.ndarray:
        idx = [0, 1, 3, 4]
        C = self.preint.cov[np.ix_(idx, idx)]
        return 0.5 * (C + C.T) + floor * np.eye(4)


@dataclass
class UnaryFactor:
    key: tuple
    target: np.ndarray
    info: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float).reshape(2)
        self.info = np.asarray(self.info, dtype=float).reshape(2, 2)


@dataclass
class Prior:
    """Cost term x'Gx - 2b'x over ``keys`` (G = Gamma_p, b = b_p), up to a constant."""

    keys: list = field(default_factory=list)
    Gamma_p: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b_p: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def empty(self) -> bool:
        return not self.keys


@dataclass
class SolveInfo:
    iterations: int = 0
    cost: float = 0.0
    solve_ms: float = 0.0
    converged: bool = True


@dataclass
class WindowState:
    states: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)  # tid -> (2,)
    first_seen: dict = field(default_factory=dict)  # tid -> sid
    obs_count: dict = field(default_factory=dict)  # tid -> observations ever used
    aoa: list = field(default_factory=list)
    odom: list = field(default_factory=list)
    unary: list = field(default_factory=list)
    prior: Prior = field(default_factory=Prior)
    flag: str = "FIFO"
    max_states: int = 50
    next_sid: int = 0
    last_solve: SolveInfo = field(default_factory=SolveInfo)

    def __post_init__(self):
        if self.max_states < 2:
            raise ValueError("window must hold at least two states")

    def state(self, sid: int) -> RobotState:
        for s in self.states:
            if s.sid == sid:
                return s
        raise KeyError(f"state {sid} is not in the window")

    @property
    def newest(self) -> RobotState:
        return self.states[-1]

    def keys(self) -> list:
        out = []
        for s in self.states:
            out += [("mu", s.sid), ("nu", s.sid)]
        out += [("tag", t) for t in sorted(self.tags)]
        return out

    def value(self, key) -> np.ndarray:
        kind, ident = key
        if kind == "tag":
            return self.tags[ident]
        s = self.state(ident)
        return s.mu if kind == "mu" else s.nu

    def set_value(self, key, v) -> None:
        kind, ident = key
        v = np.array(v, dtype=float)
        if kind == "tag":
            self.tags[ident] = v
        else:
            setattr(self.state(ident), kind, v)

    def vector(self, keys=None) -> np.ndarray:
        keys = self.keys() if keys is None else keys
        return np.concatenate([self.value(k) for k in keys]) if keys else np.zeros(0)

    def published_tags(self) -> dict:
        return {t: p.copy() for t, p in self.tags.items() if self.obs_count.get(t, 0) >= 2}

    def tag_observers(self, tid) -> list:
        return sorted({f.sid for f in self.aoa if f.tag == tid})


# ---------------------------------------------------------------------------
# residuals


def make_aoa_residual(factor: AoaFactor, window: WindowState):
    """z residual of r x (b - mu) and its coefficient rows on (tag, mu).

    Returns (residual (3,), {key: (3, 2) block}); the x and y rows vanish in
    the plane.
    """
    r = factor.direction
    b = window.tags[factor.tag]
    mu = window.state(factor.sid).mu
    d = np.append(b - mu, 0.0)
    res = np.cross(r, d)
    res[:2] = 0.0
    row_b = np.zeros((3, 2))
    row_b[2] = [-r[1], r[0]]
    return res, {("tag", factor.tag): row_b, ("mu", factor.sid): -row_b}


def make_odometry_residual(factor: OdomFactor, window: WindowState):
    """Measured T minus R(mu_{k+1} - mu_k) - nu_k dt + g dt^2/2, with rows.

    The rows are derivatives of the residual with respect to
    (mu_k, nu_k, mu_{k+1}).
    """
    a, b = window.state(factor.sid_from), window.state(factor.sid_to)
    dt = factor.preint.dt_total
    R = np.eye(3)
    R[:2, :2] = a.R_world_to_body
    pred = R @ np.append(b.mu - a.mu, 0.0) - np.append(a.nu, 0.0) * dt + np.array([0, 0, GRAVITY * dt * dt / 2])
    res = factor.preint.T - pred
    return res, {
        ("mu", a.sid): R[:, :2].copy(),
        ("nu", a.sid): np.vstack([np.eye(2) * dt, np.zeros((1, 2))]),
        ("mu", b.sid): -R[:, :2].copy(),
    }


def make_velocity_residual(factor: OdomFactor, window: WindowState):
    """Measured V minus R_rel nu_{k+1} - nu_k + g dt, with rows on (nu_k, nu_{k+1})."""
    a, b = window.state(factor.sid_from), window.state(factor.sid_to)
    dt = factor.preint.dt_total
    Rrel = np.eye(3)
    Rrel[:2, :2] = rot2(b.phi - a.phi)
    pred = Rrel @ np.append(b.nu, 0.0) - np.append(a.nu, 0.0) + np.array([0, 0, GRAVITY * dt])
    res = factor.preint.V - pred
    return res, {
        ("nu", a.sid): np.vstack([np.eye(2), np.zeros((1, 2))]),
        ("nu", b.sid): -Rrel[:, :2].copy(),
    }


def odometry_jacobian(factor: OdomFactor, window: WindowState):
    """Linear model h = J x over [mu_k, nu_k, mu_{k+1}, nu_{k+1}] and its measurement."""
    a, b = window.state(factor.sid_from), window.state(factor.sid_to)
    dt = factor.preint.dt_total
    R = a.R_world_to_body
    J = np.zeros((4, 8))
    J[:2, 0:2] = -R
    J[:2, 2:4] = -dt * np.eye(2)
    J[:2, 4:6] = R
    J[2:, 2:4] = -np.eye(2)
    J[2:, 6:8] = rot2(b.phi - a.phi)
    z = np.concatenate([factor.preint.T[:2], factor.preint.V[:2]])
    keys = [("mu", a.sid), ("nu", a.sid), ("mu", b.sid), ("nu", b.sid)]
    return keys, J, z


# ---------------------------------------------------------------------------
# assembly


def aoa_weight(factor: AoaFactor, window: WindowState) -> float:
    """Weight of the linear cross-product form of a factor."""
    if factor.distance is not None:
        d = factor.distance
    else:
        d = float(np.hypot(*(window.tags[factor.tag] - window.state(factor.sid).mu)))
    return 1.0 / (max(d, MIN_WEIGHT_DISTANCE) ** 2 * factor.omega)


def aoa_linearization(aoa, window: WindowState):
    """Per-factor (weight, row on the tag, residual, tag - robot) at the current estimate.

    The row on the robot position is the negated tag row.
    """
    mus = {s.sid: s.mu for s in window.states}
    diff = np.array([window.tags[f.tag] - mus[f.sid] for f in aoa])
    return _aoa_terms(_AoaBatch.of(aoa), diff)


@dataclass
class _AoaBatch:
    theta: np.ndarray
    omega: np.ndarray
    frozen: np.ndarray
    fixed_d: np.ndarray

    @classmethod
    def of(cls, aoa):
        return cls(
            np.array([f.bearing for f in aoa]),
            np.array([f.omega for f in aoa]),
            np.array([f.distance is not None for f in aoa]),
            np.array([max(f.distance, MIN_WEIGHT_DISTANCE) if f.distance is not None else 1.0 for f in aoa]),
        )


def _aoa_terms(batch: _AoaBatch, diff: np.ndarray):
    cos, sin = np.cos(batch.theta), np.sin(batch.theta)
    a = np.stack([-sin, cos], axis=1)
    cross = -sin * diff[:, 0] + cos * diff[:, 1]
    along = cos * diff[:, 0] + sin * diff[:, 1]
    d2 = np.maximum(diff[:, 0] ** 2 + diff[:, 1] ** 2, MIN_WEIGHT_DISTANCE**2)
    frozen = batch.frozen
    w = np.where(frozen, 1.0 / (batch.fixed_d**2 * batch.omega), 1.0 / batch.omega)
    e = np.where(frozen, cross, np.arctan2(cross, along))
    perp = np.stack([-diff[:, 1], diff[:, 0]], axis=1) / d2[:, None]
    row = np.where(frozen[:, None], a, perp)
    return w, row, e, diff


def assemble(window: WindowState, keys, aoa=None, odom=None, unary=None, prior=None):
    """Normal equations H x = g over ``keys`` from the given factor sets.

    AoA factors enter linearized at the current estimate. Factor sets default
    to everything stored in the window. Factors touching keys outside
    ``keys`` are an error.
    """
    aoa = window.aoa if aoa is None else aoa
    H, g = assemble_linear(window, keys, odom, unary, prior)
    add_aoa(window, keys, aoa, H, g)
    return H, g


def add_aoa(window: WindowState, keys, aoa, H, g) -> None:
    """Accumulate linearized AoA factors into H and g in place."""
    if not aoa:
        return
    index = {k: 2 * i for i, k in enumerate(keys)}
    ib = np.array([index[("tag", f.tag)] for f in aoa])
    im = np.array([index[("mu", f.sid)] for f in aoa])
    _accumulate_aoa(aoa_linearization(aoa, window), ib, im, H, g)


def _accumulate_aoa(terms, ib, im, H, g) -> None:
    w, row, e, diff = terms
    outer = w[:, None, None] * row[:, :, None] * row[:, None, :]
    # target of the linearized residual: row.(b - mu) - e at the current point
    rhs = w * (np.sum(row * diff, axis=1) - e)
    for r in range(2):
        np.add.at(g, ib + r, rhs * row[:, r])
        np.add.at(g, im + r, -rhs * row[:, r])
        for c in range(2):
            np.add.at(H, (ib + r, ib + c), outer[:, r, c])
            np.add.at(H, (im + r, im + c), outer[:, r, c])
            np.add.at(H, (ib + r, im + c), -outer[:, r, c])
            np.add.at(H, (im + r, ib + c), -outer[:, r, c])


def assemble_linear(window: WindowState, keys, odom=None, unary=None, prior=None):
    """Normal equations of the odometry, unary and prior terms only."""
    odom = window.odom if odom is None else odom
    unary = window.unary if unary is None else unary
    prior = window.prior if prior is None else prior
    index = {k: 2 * i for i, k in enumerate(keys)}
    n = 2 * len(keys)
    H = np.zeros((n, n))
    g = np.zeros(n)

    for f in odom:
        fkeys, Hf, gf, _ = _odometry_normal(f, window)
        cols = np.concatenate([np.arange(index[k], index[k] + 2) for k in fkeys])
        H[np.ix_(cols, cols)] += Hf
        g[cols] += gf

    for u in unary:
        i = index[u.key]
        H[i : i + 2, i : i + 2] += u.info
        g[i : i + 2] += u.info @ u.target

    if prior is not None and not prior.empty:
        cols = np.concatenate([np.arange(index[k], index[k] + 2) for k in prior.keys])
        H[np.ix_(cols, cols)] += prior.Gamma_p
        g[cols] += prior.b_p
    return H, g


def _odometry_normal(f: OdomFactor, window: WindowState):
    # headings and increments are fixed once a factor exists, so its normal
    # block never changes
    cached = getattr(f, "_normal", None)
    if cached is None:
        fkeys, J, z = odometry_jacobian(f, window)
        JtW = J.T @ np.linalg.inv(f.planar_cov())
        cached = (fkeys, JtW @ J, JtW @ z, float(z @ np.linalg.solve(f.planar_cov(), z)))
        f._normal = cached
    return cached


def cost(window: WindowState, x=None, keys=None) -> float:
    """Weighted squared residual sum plus the prior quadratic, at ``x``.

    ``x`` defaults to the current estimate; the window is left untouched.
    """
    keys = window.keys() if keys is None else keys
    x = window.vector(keys) if x is None else np.asarray(x, dtype=float)
    return _Objective(window, keys)(x)


class _Objective:
    """Window cost as a function of the stacked vector, for repeated evaluation."""

    def __init__(self, window: WindowState, keys):
        self.H, self.g = assemble_linear(window, keys)
        self.const = _constant_term(window)
        index = {k: 2 * i for i, k in enumerate(keys)}
        self.batch = _AoaBatch.of(window.aoa)
        self.ib = np.array([index[("tag", f.tag)] for f in window.aoa], dtype=int)
        self.im = np.array([index[("mu", f.sid)] for f in window.aoa], dtype=int)

    def terms(self, x):
        pairs = x.reshape(-1, 2)
        diff = pairs[self.ib // 2] - pairs[self.im // 2]
        return _aoa_terms(self.batch, diff)

    def __call__(self, x) -> float:
        total = float(x @ self.H @ x - 2 * self.g @ x + self.const)
        if self.ib.size:
            w, _, e, _ = self.terms(x)
            total += float(np.sum(w * e * e))
        return total

    def normal(self, x):
        H, g = self.H.copy(), self.g.copy()
        if self.ib.size:
            _accumulate_aoa(self.terms(x), self.ib, self.im, H, g)
        return H, g


def _constant_term(window: WindowState) -> float:
    c = 0.0
    for f in window.odom:
        c += _odometry_normal(f, window)[3]
    for u in window.unary:
        c += u.target @ u.info @ u.target
    return c


def cholesky_solve(H: np.ndarray, g: np.ndarray, keys=None) -> np.ndarray:
    """Jacobi-scaled Cholesky with a reciprocal-condition check."""
    d = np.sqrt(np.maximum(np.diag(H), 0.0))
    if np.any(d == 0):
        raise DegenerateSystemError(
            "unconstrained variables in normal matrix", _weak_keys(H, keys)
        )
    Hs = H / d[:, None] / d[None, :]
    try:
        c, low = linalg.cho_factor(Hs, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise DegenerateSystemError("normal matrix is not positive definite", _weak_keys(H, keys)) from None
    (dpocon,) = linalg.get_lapack_funcs(("pocon",), (c,))
    rcond, _ = dpocon(c, np.linalg.norm(Hs, 1), uplo="L")
    if rcond < RCOND_MIN:
        raise DegenerateSystemError(
            f"normal matrix is numerically singular (rcond {rcond:.2e})", _weak_keys(H, keys)
        )
    return linalg.cho_solve((c, low), g / d, check_finite=False) / d


def _weak_keys(H, keys):
    if keys is None:
        return []
    d = np.sqrt(np.maximum(np.diag(H), 1e-300))
    w, V = np.linalg.eigh(H / d[:, None] / d[None, :])
    weak = V[:, w < max(w.max(), 1.0) * 1e-10]
    if weak.shape[1] == 0:
        weak = V[:, :1]
    names = []
    for j in range(weak.shape[1]):
        energy = weak[0::2, j] ** 2 + weak[1::2, j] ** 2
        for i in np.argsort(energy)[::-1]:
            if energy[i] > 0.1 and keys[i] not in names:
                names.append(keys[i])
    return names


def solve(
    window: WindowState,
    max_iterations: int = MAX_ITERATIONS,
    tol: float = CONVERGENCE_TOL,
) -> WindowState:
    """Gauss-Newton over the window with a backtracking step on the cost."""
    t0 = time.perf_counter()
    keys = window.keys()
    x = window.vector(keys)
    objective = _Objective(window, keys)
    f_x = objective(x)
    it = 0
    converged = False
    for it in range(1, max_iterations + 1):
        H, g = objective.normal(x)
        step = cholesky_solve(H, g, keys) - x
        alpha = 1.0
        while True:
            x_try = x + alpha * step
            f_try = objective(x_try)
            if f_try <= f_x * (1 + 1e-12) + 1e-12 or alpha < 1e-3:
                break
            alpha *= 0.5
        moved = alpha * np.max(np.abs(step)) if x.size else 0.0
        x, f_x = x_try, f_try
        if moved < tol:
            converged = True
            break
    _scatter(window, keys, x)
    window.last_solve = SolveInfo(
        iterations=it,
        cost=f_x,
        solve_ms=(time.perf_counter() - t0) * 1e3,
        converged=converged,
    )
    return window


def _scatter(window, keys, x):
    states = {s.sid: s for s in window.states}
    for i, (kind, ident) in enumerate(keys):
        v = np.array(x[2 * i : 2 * i + 2], dtype=float)
        if kind == "tag":
            window.tags[ident] = v
        else:
            setattr(states[ident], kind, v)


# ---------------------------------------------------------------------------
# growth


def new_window(
    t0: float = 0.0,
    phi0: float = 0.0,
    max_states: int = 50,
    origin_weight: float = ORIGIN_WEIGHT,
    initial_rest: bool = True,
) -> WindowState:
    """Window with the first state at the origin, pinned by a strong prior."""
    w = WindowState(max_states=max_states)
    s = RobotState(0, t0, np.zeros(2), np.zeros(2), phi0)
    w.states.append(s)
    w.next_sid = 1
    w.unary.append(UnaryFactor(("mu", 0), np.zeros(2), origin_weight * np.eye(2)))
    if initial_rest:
        w.unary.append(UnaryFactor(("nu", 0), np.zeros(2), origin_weight * np.eye(2)))
    return w


def propagate_state(prev: RobotState, preint: PreintegratedOdometry, phi_next: float):
    """Planar dead-reckoned position and body velocity at the next state."""
    dt = preint.dt_total
    mu = prev.mu + rot2(prev.phi) @ (prev.nu * dt + preint.T[:2])
    nu = rot2(prev.phi - phi_next) @ (prev.nu + preint.V[:2])
    return mu, nu


def observe(
    window: WindowState,
    sid: int,
    bearings: dict,
    omegas: dict,
    guess_distance: float = INITIAL_TAG_DISTANCE,
    tag_guess_std: float = TAG_GUESS_STD,
) -> list:
    """Attach AoA factors at state ``sid``; unseen tags start on the bearing ray."""
    s = window.state(sid)
    new_tags = []
    for tid in sorted(bearings):
        theta = float(bearings[tid])
        if tid not in window.tags:
            window.tags[tid] = s.mu + guess_distance * unit(theta)
            window.first_seen[tid] = sid
            if tag_guess_std and np.isfinite(tag_guess_std):
                window.unary.append(
                    UnaryFactor(("tag", tid), window.tags[tid].copy(), np.eye(2) / tag_guess_std**2)
                )
            new_tags.append(tid)
        window.aoa.append(AoaFactor(sid, tid, theta, float(omegas[tid])))
        window.obs_count[tid] = window.obs_count.get(tid, 0) + 1
    return new_tags


def add_state(
    window: WindowState,
    t: float,
    phi: float,
    preint: PreintegratedOdometry,
    bearings: dict,
    omegas: dict,
    guess_distance: float = INITIAL_TAG_DISTANCE,
    tag_guess_std: float = TAG_GUESS_STD,
) -> RobotState:
    """Append a state propagated from the newest one and attach its observations.

    Eviction is left to the marginalization policy.
    """
    prev = window.newest
    mu, nu = propagate_state(prev, preint, phi)
    s = RobotState(window.next_sid, t, mu, nu, phi)
    window.next_sid += 1
    window.states.append(s)
    window.odom.append(OdomFactor(prev.sid, s.sid, preint))
    observe(window, s.sid, bearings, omegas, guess_distance, tag_guess_std)
    return s


def snapshot(window: WindowState) -> dict:
    s = window.newest
    return {
        "t": s.t,
        "robot": s.mu.tolist(),
        "tags": {str(k): v.tolist() for k, v in window.published_tags().items()},
        "cost": window.last_solve.cost,
        "iterations": window.last_solve.iterations,
        "solve_ms": window.last_solve.solve_ms,
    }
