import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from problems import batch_oracle, frozen_distance, random_problem
from rover.marginalizer import (
    FIFO,
    LIFO,
    PolicyConfig,
    TraceEntry,
    choose_eviction,
    drop_state,
    marginalize,
    merge_priors,
    removable_tags,
    run_policy,
    schur_complement,
    should_add_state,
    similarity,
)
from rover.preint import PreintegratedOdometry
from rover.window import Prior, assemble, new_window, observe, solve

angle = st.floats(-np.pi, np.pi)


# ---------------------------------------------------------------------------
# similarity and the admission rules


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ({1: 0.3}, {1: 0.3}, 0.0),
        ({1: 0.0, 2: 1.0}, {1: np.pi / 2, 2: 1.0}, 0.5),
        ({1: 0.0}, {1: np.pi}, 2.0),
        ({1: 0.0, 5: 2.0}, {1: 0.0, 7: 1.0}, 0.0),
    ],
)
def test_similarity_examples(a, b, expected):
    assert similarity(a, b) == pytest.approx(expected, abs=1e-12)


def test_similarity_needs_overlap():
    with pytest.raises(ValueError):
        similarity({1: 0.0}, {2: 0.0})


@given(st.dictionaries(st.integers(0, 5), angle, min_size=1), st.lists(angle, min_size=6, max_size=6))
def test_similarity_symmetric_and_bounded(obs, other):
    obs2 = {k: other[k] for k in obs}
    m = similarity(obs, obs2)
    assert 0.0 <= m <= 2.0
    assert m == pytest.approx(similarity(obs2, obs), abs=1e-12)
    assert similarity(obs, obs) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize(
    "dt, changed, m, expected",
    [
        (0.6, False, 0.0, True),
        (0.5, False, 0.0, False),
        (0.1, True, 0.0, True),
        (0.1, False, 0.021, True),
        (0.1, False, 0.02, False),
    ],
)
def test_should_add_state(dt, changed, m, expected):
    assert should_add_state(dt, changed, m) is expected


@pytest.mark.parametrize(
    "m, changed, expected",
    [(0.0, False, LIFO), (0.03, False, FIFO), (0.0, True, FIFO), (0.02, False, LIFO)],
)
def test_choose_eviction(m, changed, expected):
    assert choose_eviction(m, changed) == expected


def test_policy_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(mode="sometimes")
    with pytest.raises(ValueError):
        PolicyConfig(delta=-1.0)


# ---------------------------------------------------------------------------
# Schur complement


def _spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


def test_schur_empty_target_leaves_system():
    rng = np.random.default_rng(0)
    H, g = _spd(rng, 4), rng.normal(size=4)
    Hp, gp = schur_complement(H, g, np.arange(4), np.array([], dtype=int))
    np.testing.assert_array_equal(Hp, H)
    np.testing.assert_array_equal(gp, g)


def test_schur_block_diagonal_returns_other_block():
    rng = np.random.default_rng(1)
    A, B = _spd(rng, 2), _spd(rng, 4)
    H = np.zeros((6, 6))
    H[:2, :2], H[2:, 2:] = A, B
    g = rng.normal(size=6)
    Hp, gp = schur_complement(H, g, np.arange(2, 6), np.arange(2))
    np.testing.assert_allclose(Hp, B, rtol=0, atol=1e-14)
    np.testing.assert_allclose(gp, g[2:], rtol=0, atol=1e-14)


@given(seed=st.integers(0, 10_000), n_drop=st.integers(1, 4))
def test_schur_preserves_solution_of_kept_block(seed, n_drop):
    rng = np.random.default_rng(seed)
    n = 6
    H, g = _spd(rng, n), rng.normal(size=n)
    drop = np.sort(rng.choice(n, n_drop, replace=False))
    keep = np.setdiff1d(np.arange(n), drop)
    Hp, gp = schur_complement(H, g, keep, drop)
    np.testing.assert_allclose(np.linalg.solve(Hp, gp), np.linalg.solve(H, g)[keep], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(Hp, Hp.T, atol=1e-12)
    # the marginal covariance is the kept block of the joint covariance
    np.testing.assert_allclose(np.linalg.inv(Hp), np.linalg.inv(H)[np.ix_(keep, keep)], rtol=1e-9, atol=1e-12)


def test_schur_singular_block_warns_and_ridges():
    H = np.diag([1.0, 1.0, 0.0, 0.0])
    with pytest.warns(RuntimeWarning):
        Hp, _ = schur_complement(H, np.zeros(4), np.arange(2), np.arange(2, 4))
    np.testing.assert_allclose(Hp, np.eye(2))


def test_merge_priors_adds_overlapping_blocks():
    a = Prior([("mu", 1)], np.eye(2), np.ones(2))
    b = Prior([("mu", 1), ("tag", 3)], 2 * np.eye(4), np.arange(4.0))
    m = merge_priors(a, b, [("mu", 1), ("nu", 1), ("tag", 3)])
    assert m.keys == [("mu", 1), ("tag", 3)]
    np.testing.assert_allclose(np.diag(m.Gamma_p), [3, 3, 2, 2])
    np.testing.assert_allclose(m.b_p, [1, 2, 2, 3])


# ---------------------------------------------------------------------------
# windowed estimation versus the batch oracle


def _run_fifo(problem, capacity):
    om = {j: problem.omega for j in range(len(problem.tags))}
    w = new_window(problem.t[0], problem.phi[0], capacity)
    guesses = {}

    def freeze(sid):
        for f in w.aoa:
            if f.sid == sid:
                f.distance = frozen_distance(problem, sid, f.tag)
        for u in w.unary:
            if u.key[0] == "tag":
                guesses.setdefault(u.key[1], u.target.copy())

    observe(w, 0, problem.bearings[0], om)
    freeze(0)
    solve(w)
    from rover.window import add_state

    for k in range(1, len(problem.mu)):
        add_state(w, problem.t[k], problem.phi[k], problem.odom[k - 1], problem.bearings[k], om)
        freeze(k)
        if len(w.states) > capacity:
            marginalize(w, w.states[0].sid)
        solve(w)
    problem.guess_points = guesses
    return w


def _split_reentries(problem, capacity):
    """Give a tag a fresh id when it comes back after leaving the window.

    A tag leaves once every state that saw it has been evicted; the window
    then starts it again from a new guess, so the batch must do the same.
    """
    last, label, tags = {}, {}, list(problem.tags)
    relabelled = []
    for k, obs in enumerate(problem.bearings):
        row = {}
        for j, theta in obs.items():
            if j in last and k - last[j] > capacity:
                label[j] = len(tags)
                tags.append(problem.tags[j])
            last[j] = k
            row[label.get(j, j)] = theta
        relabelled.append(row)
    problem.bearings = relabelled
    problem.tags = np.array(tags)
    return problem


@pytest.mark.parametrize("seed", range(50))
def test_fifo_window_matches_batch(seed):
    rng = np.random.default_rng(1000 + seed)
    problem = random_problem(rng, n_states=int(rng.integers(6, 14)), n_tags=int(rng.integers(2, 5)))
    capacity = int(rng.integers(2, 5))
    problem = _split_reentries(problem, capacity)
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        w = _run_fifo(problem, capacity)
    x, index = batch_oracle(problem)
    assert len(w.states) == capacity
    for key in w.keys():
        np.testing.assert_allclose(w.value(key), x[index[key] : index[key] + 2], rtol=0, atol=1e-6)


def test_fifo_prior_carries_information():
    problem = random_problem(np.random.default_rng(8), n_states=10)
    w = _run_fifo(problem, 3)
    assert not w.prior.empty
    assert set(w.prior.keys) <= set(w.keys())
    assert np.linalg.eigvalsh(w.prior.Gamma_p).min() > -1e-9


def test_removable_tags_and_drop():
    w = new_window(0.0, 0.0, 3)
    observe(w, 0, {1: 0.5, 2: 1.0}, {1: 0.01, 2: 0.01})
    p = PreintegratedOdometry(T=np.array([0.1, 0.0, 0.049]), V=np.array([0.0, 0.0, 0.98]), dt_total=0.1, sample_count=20)
    from rover.window import add_state

    add_state(w, 0.1, 0.0, p, {1: 0.52}, {1: 0.01})
    assert removable_tags(w, 0) == [2]
    gone = drop_state(w, 0)
    assert gone == [2] and 2 not in w.tags
    assert any(u.key == ("mu", 1) for u in w.unary)
    assert w.prior.empty


# ---------------------------------------------------------------------------
# the policy


def _step(dx=0.0, dt=0.1):
    return PreintegratedOdometry(T=np.array([dx, 0.0, 9.8 * dt * dt / 2]), V=np.array([0.0, 0.0, 9.8 * dt]),
                                 cov=np.eye(6) * 1e-8, dt_total=dt, sample_count=int(round(dt * 200)))


def _policy_window(capacity=3):
    w = new_window(0.0, 0.0, capacity)
    observe(w, 0, {1: 0.5, 2: 2.0}, {1: 0.01, 2: 0.01})
    solve(w)
    return w


def test_repeated_observation_is_skipped_then_admitted_on_timeout():
    w = _policy_window()
    obs = {1: 0.5, 2: 2.0}
    e = run_policy(w, 0.1, 0.0, _step(), obs, {1: 0.01, 2: 0.01})
    assert e.decision == "skip" and len(w.states) == 1
    e = run_policy(w, 0.6, 0.0, _step(dt=0.6), obs, {1: 0.01, 2: 0.01})
    assert e.decision == "add" and len(w.states) == 2
    # a static repeat followed by another static repeat points at LIFO
    assert w.flag == LIFO


def test_flag_transitions_and_capacity():
    w = _policy_window(capacity=3)
    om = {1: 0.01, 2: 0.01, 3: 0.01}
    t = 0.0
    flags, used = [], []
    script = [
        {1: 0.5, 2: 2.0},
        {1: 0.5, 2: 2.0},
        {1: 0.5, 2: 2.0, 3: -1.0},
        {1: 0.5, 2: 2.0, 3: -1.0},
        {1: 0.5, 2: 2.0, 3: -1.0},
        {1: 0.5, 2: 2.0, 3: -1.0},
    ]
    for obs in script:
        t += 0.6
        e = run_policy(w, t, 0.0, _step(dt=0.6), obs, om)
        assert e.decision == "add"
        assert len(w.states) <= 3
        flags.append(w.flag)
        used.append(e.flag)
    # a new tag forces FIFO; repeats afterwards go back to LIFO
    assert flags[2] == FIFO
    assert flags[-1] == LIFO
    assert LIFO in used
    assert 3 in w.published_tags()


def test_lifo_merges_odometry_and_keeps_chain():
    w = _policy_window(capacity=3)
    om = {1: 0.01, 2: 0.01}
    for k in range(4):
        run_policy(w, 0.6 * (k + 1), 0.0, _step(dx=0.05, dt=0.6), {1: 0.5, 2: 2.0}, om)
    sids = [s.sid for s in w.states]
    chain = [(f.sid_from, f.sid_to) for f in w.odom]
    assert chain == list(zip(sids[:-1], sids[1:]))
    assert any(f.preint.dt_total > 0.6 + 1e-9 for f in w.odom)
    for f in w.odom:
        span = w.state(f.sid_to).t - w.state(f.sid_from).t
        assert f.preint.dt_total == pytest.approx(span)


@pytest.mark.parametrize("mode", ["flexible", "fifo", "off"])
def test_window_never_exceeds_capacity(mode):
    rng = np.random.default_rng(5)
    w = _policy_window(capacity=4)
    cfg = PolicyConfig(mode=mode)
    t = 0.0
    for _ in range(30):
        t += 0.2
        obs = {j: float(a + rng.normal(0, 0.2)) for j, a in ((1, 0.5), (2, 2.0), (3, -1.0)) if rng.random() < 0.8}
        if not obs:
            continue
        run_policy(w, t, 0.0, _step(dx=0.02, dt=0.2), obs, {j: 0.04 for j in obs}, cfg)
        assert len(w.states) <= 4
        for tag in w.published_tags():
            assert w.obs_count[tag] >= 2
        if mode != "flexible":
            assert w.flag == FIFO


def test_off_mode_anchors_oldest_state():
    w = _policy_window(capacity=2)
    cfg = PolicyConfig(mode="off")
    for k in range(4):
        run_policy(w, 0.6 * (k + 1), 0.0, _step(dx=0.1, dt=0.6), {1: 0.5 + 0.1 * k, 2: 2.0}, {1: 0.01, 2: 0.01}, cfg)
    assert w.prior.empty
    anchors = [u for u in w.unary if u.key[0] == "mu"]
    assert [u.key for u in anchors] == [("mu", w.states[0].sid)]


def test_trace_entry_serializes():
    e = TraceEntry(1.0, "add", FIFO, 0.1, 600.0, 3)
    row = json.loads(e.to_json())
    assert row == {"t": 1.0, "decision": "add", "flag": "FIFO", "M": 0.1, "dt_ms": 600.0, "evicted_state": 3}


def test_marginalized_information_is_not_lost():
    """FIFO keeps the marginal of the remaining block; dropping forgets it."""
    problem = random_problem(np.random.default_rng(31), n_states=8)
    w_full = _run_fifo(problem, 8)
    w_marg = _run_fifo(problem, 4)
    keys = w_marg.keys()
    H_full, _ = assemble(w_full, w_full.keys())
    cov = np.linalg.inv(H_full)
    cols = np.concatenate([[2 * w_full.keys().index(k), 2 * w_full.keys().index(k) + 1] for k in keys])
    H_marg, _ = assemble(w_marg, keys)
    np.testing.assert_allclose(np.linalg.inv(H_marg), cov[np.ix_(cols, cols)], rtol=1e-6, atol=1e-10)
