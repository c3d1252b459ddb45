"""Angle wrapping and planar rotation helpers shared across the package."""

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_2pi(angle):
    """Wrap angle(s) into [0, 2*pi)."""
    wrapped = np.mod(angle, TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    return np.where(wrapped >= TWO_PI, 0.0, wrapped) if np.ndim(wrapped) else (
        0.0 if wrapped >= TWO_PI else float(wrapped)
    )


def wrap_pi(angle):
    """Wrap angle(s) into [-pi, pi)."""
    return np.mod(np.asarray(angle) + np.pi, TWO_PI) - np.pi if np.ndim(angle) else (
        float(np.mod(angle + np.pi, TWO_PI) - np.pi)
    )


def unit(theta):
    """Planar unit direction(s) for bearing(s) theta, shape (..., 2)."""
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def rot2(phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s], [s, c]])


def skew(w):
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
