"""Backscatter link model: sideband spectrum, channel plan and CSI synthesis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .sim import true_bearing

SPEED_OF_LIGHT = 299_792_458.0
CHANNEL_WIDTH = 20e6

# 20 MHz channels of the 5 GHz band (UNII-1 .. UNII-3)
CHANNELS_5GHZ = (
    tuple(range(36, 65, 4)) + tuple(range(100, 145, 4)) + tuple(range(149, 166, 4))
)


class CapacityError(ValueError):
    """More tags than non-interfering channels."""


def channel_frequency(channel: int) -> float:
    if channel not in CHANNELS_5GHZ:
        raise ValueError(f"channel {channel} is not a 5 GHz 20 MHz channel")
    return 5e9 + 5e6 * channel


@dataclass
class ShiftSpectrum:
    carrier: float
    shift: float
    harmonics: list  # (frequency Hz, complex amplitude), ascending frequency


def sideband_spectrum(f_c: float, f_b: float, n_harmonics: int = 3) -> ShiftSpectrum:
    """Lines produced by toggling the tag at f_b with a square wave.

    Harmonic n sits at f_c -/+ (2n-1) f_b with amplitude +/- 2j/(pi (2n-1)).
    """
    if not f_b > 0:
        raise ValueError("shift frequency must be positive")
    if n_harmonics < 1:
        raise ValueError("need at least one harmonic")
    lines = []
    for n in range(1, n_harmonics + 1):
        k = 2 * n - 1
        amp = 2j / (np.pi * k)
        lines.append((f_c - k * f_b, amp))
        lines.append((f_c + k * f_b, -amp))
    lines.sort(key=lambda x: x[0])
    return ShiftSpectrum(f_c, f_b, lines)


def allocate_channels(n_tags: int, excitation_channel: int = 165) -> dict[int, int]:
    """Give each tag its own channel, nearest to the excitation first.

    A tag on channel c shifts by |f_c - f_exc|; its mirror sideband at
    2 f_exc - f_c must not overlap any other assigned channel.
    """
    f_exc = channel_frequency(excitation_channel)
    if n_tags < 0:
        raise ValueError("n_tags must be nonnegative")
    candidates = sorted(
        (c for c in CHANNELS_5GHZ if c != excitation_channel),
        key=lambda c: abs(channel_frequency(c) - f_exc),
    )
    chosen: list[int] = []
    for c in candidates:
        if len(chosen) == n_tags:
            break
        trial = chosen + [c]
        if _sidebands_clear(trial, f_exc):
            chosen = trial
    if len(chosen) < n_tags:
        raise CapacityError(
            f"{n_tags} tags requested but only {len(chosen)} channels are free "
            f"around excitation channel {excitation_channel}"
        )
    return {tag: ch for tag, ch in enumerate(chosen)}


def _sidebands_clear(channels: Sequence[int], f_exc: float) -> bool:
    freqs = [channel_frequency(c) for c in channels]
    for i, f in enumerate(freqs):
        mirror = 2 * f_exc - f
        for j, g in enumerate(freqs):
            if i != j and abs(mirror - g) < CHANNEL_WIDTH:
                return False
    return True


# ---------------------------------------------------------------------------
# CSI


@dataclass
class VirtualPath:
    tof: float  # s
    aoa: float  # rad, array frame
    attenuation: complex = 1.0 + 0j

    def __post_init__(self):
        if self.tof < 0:
            raise ValueError("time of flight must be nonnegative")
        if abs(self.attenuation) > 1 + 1e-12:
            raise ValueError("attenuation magnitude must not exceed 1")


@dataclass(frozen=True)
class ArrayGeometry:
    """Three-element circular array and OFDM subcarrier layout."""

    wavelength: float = SPEED_OF_LIGHT / 5.825e9
    spacing: float = SPEED_OF_LIGHT / 5.825e9 / 2
    f_delta: float = 312.5e3
    n_subcarriers: int = 30

    def __post_init__(self):
        if not (self.wavelength > 0 and self.spacing > 0 and self.f_delta > 0):
            raise ValueError("wavelength, spacing and f_delta must be positive")
        if self.n_subcarriers < 2:
            raise ValueError("need at least two subcarriers")

    def antenna_phase(self, theta):
        """Extra path length over wavelength for antennas 1..3, shape (..., 3)."""
        theta = np.asarray(theta, dtype=float)
        d = self.spacing / self.wavelength
        return np.stack(
            [np.zeros_like(theta), d * np.cos(theta), d * np.cos(theta + np.pi / 3)], axis=-1
        )


@dataclass
class CsiFrame:
    H: np.ndarray  # (3, N) complex
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    tag_id: int = 0
    channel_index: int = 0
    t: float = 0.0
    paths: list = field(default_factory=list)  # ground truth, ascending ToF

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=complex)
        if self.H.ndim != 2 or self.H.shape[0] != 3 or self.H.shape[1] < 2:
            raise ValueError(f"CSI must be 3 x N with N >= 2, got {self.H.shape}")
        if not np.all(np.isfinite(self.H)):
            raise ValueError("CSI contains non-finite entries")

    @property
    def f_delta(self) -> float:
        return self.geometry.f_delta

    @property
    def wavelength(self) -> float:
        return self.geometry.wavelength

    @property
    def spacing(self) -> float:
        return self.geometry.spacing


def synthesize_csi(paths: Iterable[VirtualPath], geometry: ArrayGeometry | None = None, **meta) -> CsiFrame:
    """Sum of per-path plane waves over antennas x subcarriers."""
    geometry = geometry or ArrayGeometry()
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one path")
    n = np.arange(geometry.n_subcarriers)
    H = np.zeros((3, geometry.n_subcarriers), dtype=complex)
    for p in paths:
        ant = geometry.antenna_phase(p.aoa)
        phase = p.tof * n[None, :] * geometry.f_delta + ant[:, None]
        H += p.attenuation * np.exp(-2j * np.pi * phase)
    return CsiFrame(H, geometry, paths=sorted(paths, key=lambda p: p.tof), **meta)


def add_noise(H: np.ndarray, snr_db: float, rng: np.random.Generator, ref_power: float = 1.0) -> np.ndarray:
    """Complex white noise at ``snr_db`` relative to ``ref_power``; -inf gives noise only."""
    if snr_db == float("inf"):
        return H
    if snr_db == float("-inf"):
        sigma2, H = 1.0, np.zeros_like(H)
    else:
        sigma2 = ref_power / 10 ** (snr_db / 10)
    noise = rng.normal(size=H.shape) + 1j * rng.normal(size=H.shape)
    return H + np.sqrt(sigma2 / 2) * noise


@dataclass
class LinkConfig:
    ap_position: Sequence[float] = (4.5, -1.0)
    reflectors: Sequence[Sequence[float]] = ()
    reflection_gain: float = 0.4
    max_range: float = float("inf")
    snr_db: float = float("inf")
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)


def simulate_packet(
    robot_pos,
    heading: float,
    tag_pos,
    link: LinkConfig,
    rng: np.random.Generator,
    tag_id: int = 0,
    channel: int = 0,
    t: float = 0.0,
) -> CsiFrame | None:
    """CSI of one backscattered packet, or None when the tag is out of range.

    Virtual paths combine every AP->tag path with every tag->receiver path:
    ToFs add, attenuations multiply and the AoA is that of the receiver leg.
    """
    robot = np.asarray(robot_pos, dtype=float)[:2]
    tag = np.asarray(tag_pos, dtype=float)[:2]
    ap = np.asarray(link.ap_position, dtype=float)[:2]
    if np.hypot(*(tag - robot)) > link.max_range:
        return None

    tx_legs = [(np.hypot(*(tag - ap)) / SPEED_OF_LIGHT, 1.0 + 0j)]
    rx_legs = [(np.hypot(*(robot - tag)) / SPEED_OF_LIGHT, true_bearing(robot, heading, tag), 1.0 + 0j)]
    for q in link.reflectors:
        q = np.asarray(q, dtype=float)[:2]
        g = link.reflection_gain * np.exp(2j * np.pi * rng.uniform())
        tx_legs.append(((np.hypot(*(q - ap)) + np.hypot(*(tag - q))) / SPEED_OF_LIGHT, g))
        if np.hypot(*(q - robot)) > 1e-9:
            g = link.reflection_gain * np.exp(2j * np.pi * rng.uniform())
            rx_legs.append(
                ((np.hypot(*(q - tag)) + np.hypot(*(robot - q))) / SPEED_OF_LIGHT,
                 true_bearing(robot, heading, q), g)
            )
    common = np.exp(2j * np.pi * rng.uniform())
    paths = [
        VirtualPath(tau_j + tau_i, theta_i, common * g_j * g_i)
        for tau_j, g_j in tx_legs
        for tau_i, theta_i, g_i in rx_legs
    ]
    frame = synthesize_csi(paths, link.geometry, tag_id=tag_id, channel_index=channel, t=t)
    frame.H = add_noise(frame.H, link.snr_db, rng)
    return frame


# ---------------------------------------------------------------------------
# JSON-lines dump for replay


def dump_csi(frames: Iterable[CsiFrame], path) -> None:
    with open(path, "w") as fh:
        for f in frames:
            rec = {
                "t": f.t,
                "tag": f.tag_id,
                "channel": f.channel_index,
                "shape": list(f.H.shape),
                "H": [[float(z.real), float(z.imag)] for z in f.H.ravel()],
            }
            fh.write(json.dumps(rec) + "\n")


def load_csi(path, geometry: ArrayGeometry | None = None) -> list[CsiFrame]:
    frames = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            shape = rec.get("shape", [3, len(rec["H"]) // 3])
            H = np.array([complex(re, im) for re, im in rec["H"]]).reshape(shape)
            frames.append(
                CsiFrame(H, geometry or ArrayGeometry(), int(rec["tag"]), int(rec["channel"]), float(rec["t"]))
            )
    return frames
