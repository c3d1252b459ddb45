"""State admission, FIFO/LIFO eviction and Schur-complement priors."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .angles import unit
from .heading import rotation_about_z
from .preint import PreintegratedOdometry, concatenate
from .window import (
    ORIGIN_WEIGHT,
    INITIAL_TAG_DISTANCE,
    TAG_GUESS_STD,
    DegenerateSystemError,
    OdomFactor,
    Prior,
    UnaryFactor,
    WindowState,
    add_state,
    assemble,
    solve,
)

DELTA = 0.5  # s
EPSILON = 0.02
FIFO, LIFO = "FIFO", "LIFO"
MODES = ("flexible", "fifo", "off")
SCHUR_RIDGE = 1e-9


def similarity(obs_j: dict, obs_k: dict) -> float:
    """1 - mean cosine between matching bearings; 0 identical, 2 antipodal.

    Tags present in only one observation are ignored; an empty overlap is an
    error.
    """
    common = sorted(set(obs_j) & set(obs_k))
    if not common:
        raise ValueError("observations share no tags")
    a = unit(np.array([obs_j[t] for t in common]))
    b = unit(np.array([obs_k[t] for t in common]))
    m = 1.0 - float(np.mean(np.sum(a * b, axis=1)))
    return min(max(m, 0.0), 2.0)


def should_add_state(dt: float, tag_set_changed: bool, m_latest: float, delta: float = DELTA, epsilon: float = EPSILON) -> bool:
    return dt > delta or bool(tag_set_changed) or m_latest > epsilon


def choose_eviction(m_recent: float, tag_set_changed: bool, epsilon: float = EPSILON) -> str:
    return FIFO if (m_recent > epsilon or tag_set_changed) else LIFO


def observation_of(window: WindowState, sid: int) -> dict:
    return {f.tag: f.bearing for f in window.aoa if f.sid == sid}


# ---------------------------------------------------------------------------
# marginalization


def _keys_of(window: WindowState, aoa, odom, unary, prior) -> set:
    keys = set()
    for f in aoa:
        keys |= {("tag", f.tag), ("mu", f.sid)}
    for f in odom:
        keys |= {("mu", f.sid_from), ("nu", f.sid_from), ("mu", f.sid_to), ("nu", f.sid_to)}
    for u in unary:
        keys.add(u.key)
    if prior is not None:
        keys |= set(prior.keys)
    return keys


def schur_complement(H: np.ndarray, g: np.ndarray, keep: np.ndarray, drop: np.ndarray):
    """Eliminate ``drop`` columns from H x = g; a singular block gets a ridge."""
    Hkk = H[np.ix_(keep, keep)]
    Hkd = H[np.ix_(keep, drop)]
    Hdd = H[np.ix_(drop, drop)]
    if drop.size == 0:
        return Hkk, g[keep]
    try:
        L = np.linalg.cholesky(Hdd)
        if np.min(np.diag(L)) ** 2 < 1e-12 * max(np.max(np.diag(Hdd)), 1.0):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        warnings.warn("singular block in marginalization; adding a ridge", RuntimeWarning, stacklevel=3)
        Hdd = Hdd + SCHUR_RIDGE * max(np.max(np.abs(np.diag(Hdd))), 1.0) * np.eye(len(drop))
    X = np.linalg.solve(Hdd, np.column_stack([Hkd.T, g[drop]]))
    Hp = Hkk - Hkd @ X[:, :-1]
    gp = g[keep] - Hkd @ X[:, -1]
    return 0.5 * (Hp + Hp.T), gp


def removable_tags(window: WindowState, sid: int) -> list:
    """Tags whose every window observation comes from state ``sid``."""
    return sorted(t for t in window.tags if window.tag_observers(t) == [sid])


def marginalize(window: WindowState, sid: int, lifo: bool = False):
    """Remove state ``sid`` and turn its measurements into the window prior.

    FIFO style (default): every factor touching the state, plus the existing
    prior if it overlaps, is Schur-complemented onto the surviving neighbours.
    LIFO style: only the AoA factors go into the prior; the two odometry
    factors around the state are concatenated into one.

    Returns (new Prior, removed tag ids).
    """
    state = window.state(sid)
    gone_tags = removable_tags(window, sid)
    drop_keys = {("mu", sid), ("nu", sid)} | {("tag", t) for t in gone_tags}

    aoa = [f for f in window.aoa if f.sid == sid]
    around = [f for f in window.odom if sid in (f.sid_from, f.sid_to)]
    odom = [] if lifo else around
    unary = [u for u in window.unary if u.key in drop_keys]
    prior = window.prior if set(window.prior.keys) & drop_keys else None

    if lifo:
        if len(around) != 2:
            raise ValueError("LIFO target must sit between two odometry factors")
        a, b = sorted(around, key=lambda f: f.sid_from)
        prev = window.state(a.sid_from)
        pa = replace(a.preint, R_end=rotation_about_z(state.phi - prev.phi))
        merged = OdomFactor(a.sid_from, b.sid_to, concatenate(pa, b.preint))

    involved = _keys_of(window, aoa, odom, unary, prior)
    if lifo and ("nu", sid) not in involved:
        # the velocity leaves through the concatenated odometry
        drop_keys.discard(("nu", sid))
    involved |= drop_keys
    order = [k for k in window.keys() if k in involved]
    H, g = assemble(window, order, aoa=aoa, odom=odom, unary=unary, prior=prior if prior is not None else Prior())
    keep = np.array([i for i, k in enumerate(order) if k not in drop_keys for i in (2 * i, 2 * i + 1)], dtype=int)
    drop = np.array([i for i, k in enumerate(order) if k in drop_keys for i in (2 * i, 2 * i + 1)], dtype=int)
    Hp, gp = schur_complement(H, g, keep, drop)
    kept_keys = [k for k in order if k not in drop_keys]

    base = Prior() if prior is not None else window.prior
    new_prior = merge_priors(base, Prior(kept_keys, Hp, gp), window.keys())

    # bookkeeping
    window.aoa = [f for f in window.aoa if f.sid != sid]
    around_ids = {id(f) for f in around}
    window.odom = [f for f in window.odom if id(f) not in around_ids]
    if lifo:
        window.odom.append(merged)
        window.odom.sort(key=lambda f: f.sid_from)
    window.unary = [u for u in window.unary if u.key not in drop_keys and u.key != ("nu", sid)]
    for t in gone_tags:
        del window.tags[t]
        window.first_seen.pop(t, None)
    window.states = [s for s in window.states if s.sid != sid]
    window.prior = new_prior
    return new_prior, gone_tags


def merge_priors(a: Prior, b: Prior, order: list) -> Prior:
    keys = [k for k in order if k in set(a.keys) | set(b.keys)]
    index = {k: 2 * i for i, k in enumerate(keys)}
    n = 2 * len(keys)
    G = np.zeros((n, n))
    v = np.zeros(n)
    for p in (a, b):
        if p.empty:
            continue
        cols = np.concatenate([np.arange(index[k], index[k] + 2) for k in p.keys])
        G[np.ix_(cols, cols)] += p.Gamma_p
        v[cols] += p.b_p
    return Prior(keys, G, v)


def drop_state(window: WindowState, sid: int, anchor_weight: float = ORIGIN_WEIGHT) -> list:
    """Evict a state and discard its information (no prior).

    The oldest surviving state is pinned at its current estimate so the
    window keeps a fixed origin.
    """
    gone_tags = removable_tags(window, sid)
    drop_keys = {("mu", sid), ("nu", sid)} | {("tag", t) for t in gone_tags}
    window.aoa = [f for f in window.aoa if f.sid != sid]
    window.odom = [f for f in window.odom if sid not in (f.sid_from, f.sid_to)]
    window.unary = [u for u in window.unary if u.key not in drop_keys]
    for t in gone_tags:
        del window.tags[t]
        window.first_seen.pop(t, None)
    window.states = [s for s in window.states if s.sid != sid]
    window.prior = Prior()
    oldest = window.states[0]
    anchor = ("mu", oldest.sid)
    if not any(u.key == anchor for u in window.unary):
        window.unary.append(UnaryFactor(anchor, oldest.mu.copy(), anchor_weight * np.eye(2)))
    return gone_tags


# ---------------------------------------------------------------------------
# policy


@dataclass
class PolicyConfig:
    delta: float = DELTA
    epsilon: float = EPSILON
    mode: str = "flexible"
    guess_distance: float = INITIAL_TAG_DISTANCE
    tag_guess_std: float = TAG_GUESS_STD

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"marginalization mode must be one of {MODES}")
        if self.delta < 0 or self.epsilon < 0:
            raise ValueError("delta and epsilon must be nonnegative")


@dataclass
class TraceEntry:
    t: float
    decision: str
    flag: str
    M: float | None
    dt_ms: float
    evicted_state: int | None = None
    evicted_tags: list = field(default_factory=list)
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "t": self.t,
                "decision": self.decision,
                "flag": self.flag,
                "M": self.M,
                "dt_ms": self.dt_ms,
                "evicted_state": self.evicted_state,
            }
        )


def run_policy(
    window: WindowState,
    t: float,
    phi: float,
    preint: PreintegratedOdometry,
    bearings: dict,
    omegas: dict,
    cfg: PolicyConfig | None = None,
) -> TraceEntry:
    """One step of flexible marginalization for a new AoA observation.

    Skips (window untouched) unless the observation is admitted. Otherwise
    appends the state, evicts per the current flag when over capacity, sets
    the flag for the next step and solves.
    """
    cfg = cfg or PolicyConfig()
    newest = window.newest
    last_obs = observation_of(window, newest.sid)
    dt = t - newest.t
    changed = set(bearings) != set(last_obs)
    m = similarity(last_obs, bearings) if (set(bearings) & set(last_obs)) else None
    if not should_add_state(dt, changed, m if m is not None else 0.0, cfg.delta, cfg.epsilon):
        return TraceEntry(t, "skip", window.flag, m, dt * 1e3)

    s = add_state(window, t, phi, preint, bearings, omegas, cfg.guess_distance, cfg.tag_guess_std)
    evicted, gone = None, []
    flag_used = window.flag
    if len(window.states) > window.max_states:
        if cfg.mode == "off":
            evicted = window.states[0].sid
            gone = drop_state(window, evicted)
            flag_used = FIFO
        elif cfg.mode == "fifo" or window.flag == FIFO:
            evicted = window.states[0].sid
            _, gone = marginalize(window, evicted)
            flag_used = FIFO
        else:
            evicted = window.states[-2].sid
            _, gone = marginalize(window, evicted, lifo=True)
            flag_used = LIFO

    # flag for the next step
    if cfg.mode == "flexible":
        prev_obs = observation_of(window, window.states[-2].sid)
        common = set(prev_obs) & set(bearings)
        m_recent = similarity(prev_obs, bearings) if common else 2.0
        window.flag = choose_eviction(m_recent, changed or set(prev_obs) != set(bearings) or bool(gone), cfg.epsilon)
    else:
        window.flag = FIFO

    degenerate = False
    try:
        solve(window)
    except DegenerateSystemError:
        degenerate = True
    return TraceEntry(t, "add", flag_used, m, dt * 1e3, evicted, gone, degenerate)
