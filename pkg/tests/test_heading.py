import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rover.angles import wrap_pi
from rover.heading import HeadingEKF, HeadingFilterConfig, HeadingState, predict, rotation_about_z, update_mag
from rover.sim import Composite, Generic, NoiseConfig, Stationary, generate_trajectory, sample_imu


def test_predict_integrates_rate():
    s = HeadingState()
    for _ in range(100):
        s = predict(s, 0.1, 0.1)
    assert s.phi == pytest.approx(1.0, abs=1e-12)


def test_rate_equal_to_bias_holds_heading():
    s = HeadingState(0.7, 0.02)
    assert predict(s, 0.02, 0.5).phi == pytest.approx(0.7)


def test_predict_grows_covariance_and_rejects_bad_dt():
    s = HeadingState()
    for _ in range(20):
        nxt = predict(s, 0.0, 0.01)
        assert np.trace(nxt.P) > np.trace(s.P)
        s = nxt
    with pytest.raises(ValueError):
        predict(s, 0.0, 0.0)


def test_zero_innovation_only_shrinks_covariance():
    s = HeadingState(1.2, 0.01, np.diag([1e-3, 1e-6]))
    u = update_mag(s, 1.2)
    assert u.phi == pytest.approx(1.2) and u.gyro_bias == pytest.approx(0.01)
    assert np.trace(u.P) < np.trace(s.P)


def test_innovation_wraps_the_short_way():
    s = HeadingState(np.deg2rad(359.0), 0.0, np.diag([1.0, 1e-9]))
    u = update_mag(s, np.deg2rad(1.0))
    # the correction moves forward by (almost) +2 deg, across 0
    moved = wrap_pi(u.phi - s.phi)
    assert 0 < moved <= np.deg2rad(2.0)


@given(
    phi=st.floats(0, 2 * np.pi, exclude_max=True),
    mag=st.floats(0, 2 * np.pi),
    p=st.floats(1e-6, 1.0),
    c=st.floats(-0.9, 0.9),
)
def test_update_shrinks_innovation_and_keeps_p_spd(phi, mag, p, c):
    pb = 1e-4
    P = np.array([[p, c * np.sqrt(p * pb)], [c * np.sqrt(p * pb), pb]])
    s = HeadingState(phi, 0.0, P)
    u = update_mag(s, mag)
    assert abs(wrap_pi(mag - u.phi)) <= abs(wrap_pi(mag - s.phi)) + 1e-12
    np.testing.assert_allclose(u.P, u.P.T)
    np.linalg.cholesky(u.P)


def test_constant_bias_is_tracked():
    tr = generate_trajectory(Stationary(120.0), dt=0.01)
    noise = NoiseConfig(gyro_bias=0.01, mag_rate=1.0)
    stream = sample_imu(tr, noise)
    ekf = HeadingEKF(HeadingFilterConfig(align_time=0.5))
    phi, bias = ekf.run(stream)
    assert abs(np.rad2deg(wrap_pi(phi[-1] - tr.heading[-1]))) < 2.0
    assert bias[-1] == pytest.approx(0.01, abs=2e-3)


def test_bias_while_turning():
    tr = generate_trajectory(Composite([Stationary(2.0), Generic(118.0, seed=4)]), dt=0.01)
    stream = sample_imu(tr, NoiseConfig(gyro_bias=0.01, mag_rate=1.0, mag_heading_noise=np.deg2rad(1.0)), 3)
    phi, _ = HeadingEKF().run(stream)
    assert abs(np.rad2deg(wrap_pi(phi[-1] - tr.heading[-1]))) < 2.0


def test_noiseless_tracking_and_declination():
    tr = generate_trajectory(Composite([Stationary(2.0), Generic(20.0, seed=2)]), dt=0.005)
    stream = sample_imu(tr, NoiseConfig(mag_declination=np.deg2rad(-17.0)))
    ekf = HeadingEKF()
    phi, _ = ekf.run(stream)
    assert ekf.declination == pytest.approx(np.deg2rad(-17.0))
    np.testing.assert_allclose(wrap_pi(phi - tr.heading), 0.0, atol=1e-9)


def test_filter_is_deterministic():
    tr = generate_trajectory(Composite([Stationary(2.0), Generic(10.0, seed=2)]), dt=0.01)
    stream = sample_imu(tr, NoiseConfig.calibrated(), 5)
    a, b = HeadingEKF().run(stream), HeadingEKF().run(stream)
    assert a[0].tobytes() == b[0].tobytes()


def test_rotation_about_z():
    np.testing.assert_array_equal(rotation_about_z(0.0), np.eye(3))
    np.testing.assert_allclose(rotation_about_z(np.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


@given(a=st.floats(-10, 10), b=st.floats(-10, 10))
def test_rotation_group_property(a, b):
    R = rotation_about_z(a)
    np.testing.assert_allclose(R @ rotation_about_z(b), rotation_about_z(a + b), atol=1e-12)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
