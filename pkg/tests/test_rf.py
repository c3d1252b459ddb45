import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rover.angles import wrap_pi
from rover.rf import (
    CHANNELS_5GHZ,
    ArrayGeometry,
    CapacityError,
    CsiFrame,
    LinkConfig,
    VirtualPath,
    add_noise,
    allocate_channels,
    channel_frequency,
    dump_csi,
    load_csi,
    sideband_spectrum,
    simulate_packet,
    synthesize_csi,
)


def test_first_sidebands_of_channel_165():
    sidebands = sideband_spectrum(5.825e9, 20e6, n_harmonics=2)
    freqs = [f for f, _ in sidebands.harmonics]
    assert 5.805e9 in freqs and 5.845e9 in freqs
    assert min(freqs) == pytest.approx(5.825e9 - 3 * 20e6)


def test_harmonic_amplitudes():
    sidebands = sideband_spectrum(5.825e9, 20e6, n_harmonics=3)
    amp = {round((f - 5.825e9) / 20e6): a for f, a in sidebands.harmonics}
    assert abs(amp[3]) / abs(amp[1]) == pytest.approx(1 / 3)
    assert abs(amp[-1]) == pytest.approx(2 / np.pi)
    assert amp[1] == pytest.approx(-amp[-1])


@pytest.mark.parametrize("f_b,n", [(0.0, 1), (-1.0, 1), (1e6, 0)])
def test_sideband_preconditions(f_b, n):
    with pytest.raises(ValueError):
        sideband_spectrum(5.8e9, f_b, n)


def test_four_tags_get_separate_channels():
    plan = allocate_channels(4)
    assert len(set(plan.values())) == 4 and 165 not in plan.values()
    f_exc = channel_frequency(165)
    for c in plan.values():
        mirror = 2 * f_exc - channel_frequency(c)
        assert all(abs(mirror - channel_frequency(o)) >= 20e6 for o in plan.values() if o != c)


def test_zero_tags_and_capacity():
    assert allocate_channels(0) == {}
    with pytest.raises(CapacityError):
        allocate_channels(1000)


@given(n=st.integers(0, 12), exc=st.sampled_from(CHANNELS_5GHZ))
def test_allocation_injective_and_excludes_excitation(n, exc):
    try:
        plan = allocate_channels(n, exc)
    except CapacityError:
        return
    assert len(plan) == n
    assert len(set(plan.values())) == n
    assert exc not in plan.values()


def test_broadside_path_has_constant_antenna_two():
    frame = synthesize_csi([VirtualPath(0.0, np.pi / 2)])
    np.testing.assert_allclose(frame.H[1], 1.0, atol=1e-12)
    np.testing.assert_allclose(frame.H[0], 1.0, atol=1e-12)


@given(theta=st.floats(0, 2 * np.pi))
def test_unit_path_has_unit_magnitude(theta):
    frame = synthesize_csi([VirtualPath(0.0, theta)])
    np.testing.assert_allclose(np.abs(frame.H), 1.0, atol=1e-12)


def _phase_oracle(path, geo):
    """Entry-by-entry phase formula, written out per antenna."""
    H = np.empty((3, geo.n_subcarriers), complex)
    d, lam = geo.spacing, geo.wavelength
    extra = [0.0, d * np.cos(path.aoa) / lam, d * np.cos(path.aoa + np.pi / 3) / lam]
    for m in range(3):
        for n in range(geo.n_subcarriers):
            H[m, n] = path.attenuation * np.exp(-2j * np.pi * (path.tof * n * geo.f_delta + extra[m]))
    return H


@given(
    taus=st.lists(st.floats(0, 300e-9), min_size=1, max_size=4),
    thetas=st.lists(st.floats(0, 2 * np.pi), min_size=4, max_size=4),
    gain=st.floats(0.05, 1.0),
)
def test_superposition_and_phase_formula(taus, thetas, gain):
    geo = ArrayGeometry()
    paths = [VirtualPath(t, q, gain * np.exp(1j * q)) for t, q in zip(taus, thetas)]
    frame = synthesize_csi(paths, geo)
    np.testing.assert_allclose(frame.H, sum(_phase_oracle(p, geo) for p in paths), atol=1e-9)
    split = synthesize_csi(paths[:1], geo).H + (synthesize_csi(paths[1:], geo).H if len(paths) > 1 else 0)
    np.testing.assert_allclose(frame.H, split, atol=1e-12)


def test_path_validation():
    with pytest.raises(ValueError):
        synthesize_csi([])
    with pytest.raises(ValueError):
        VirtualPath(-1e-9, 0.0)
    with pytest.raises(ValueError):
        VirtualPath(0.0, 0.0, 1.5)
    with pytest.raises(ValueError):
        CsiFrame(np.zeros((2, 30)))
    with pytest.raises(ValueError):
        CsiFrame(np.full((3, 30), np.nan))


def test_reflector_paths_arrive_after_direct(rng):
    link = LinkConfig(reflectors=[(3.0, 4.0), (-2.0, 1.0)])
    frame = simulate_packet((0.0, 0.0), 0.2, (5.0, 1.0), link, rng)
    direct = min(frame.paths, key=lambda p: p.tof)
    assert frame.paths[0] is direct
    assert wrap_pi(direct.aoa - (np.arctan2(1.0, 5.0) - 0.2)) == pytest.approx(0.0, abs=1e-12)
    assert len(frame.paths) == 9


def test_out_of_range_emits_nothing(rng):
    assert simulate_packet((0, 0), 0.0, (10, 0), LinkConfig(max_range=5.0), rng) is None


@given(phi=st.floats(-np.pi, np.pi))
def test_heading_rotation_shifts_aoa(phi):
    link = LinkConfig(reflectors=[(3.0, 4.0)])
    a = simulate_packet((1.0, 0.5), 0.0, (5.0, 2.0), link, np.random.default_rng(0))
    b = simulate_packet((1.0, 0.5), phi, (5.0, 2.0), link, np.random.default_rng(0))
    for pa, pb in zip(a.paths, b.paths):
        assert abs(wrap_pi(pb.aoa - (pa.aoa - phi))) < 1e-9


def test_noise_levels(rng):
    H = np.zeros((3, 30000), complex)
    noisy = add_noise(H, 10.0, rng)
    assert np.mean(np.abs(noisy) ** 2) == pytest.approx(0.1, rel=0.05)
    assert add_noise(H, np.inf, rng) is H
    only = add_noise(np.ones((3, 30000), complex), -np.inf, rng)
    assert np.mean(np.abs(only) ** 2) == pytest.approx(1.0, rel=0.05)


def test_csi_dump_round_trip(tmp_path, rng):
    frames = [simulate_packet((0, 0), 0.1, (3, 2), LinkConfig(snr_db=5.0), rng, tag_id=k, channel=k + 1, t=0.1 * k)
              for k in range(3)]
    dump_csi(frames, tmp_path / "csi.jsonl")
    back = load_csi(tmp_path / "csi.jsonl")
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.H, b.H)
        assert (a.tag_id, a.channel_index, a.t) == (b.tag_id, b.channel_index, b.t)
