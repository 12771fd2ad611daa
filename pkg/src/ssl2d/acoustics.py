"""Shoebox room simulation and scene synthesis.

A simplified 2D image-source model: walls are mirrored up to a fixed
reflection order, each image is attenuated by ``(1 - absorption) ** order``
and by spherical spreading, and arrives with a fractional delay realised by
linear interpolation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geom
from .geom import GridSpec, Pose2D

SPEED_OF_SOUND = 343.0
R_MIN = 0.1
SAMPLE_RATE = 16000
DURATION = 0.16
LABEL_SIGMA = 0.3
# 4 mics on a 0.05 m square, centered on the array origin
SQUARE_MICS = ((0.025, 0.025), (-0.025, 0.025), (-0.025, -0.025), (0.025, -0.025))


@dataclass(frozen=True)
class RoomSpec:
    width: float = 6.0
    height: float = 6.0
    absorption: float = 0.0
    max_order: int = 0
    snr_db: Optional[float] = None  # None means noiseless

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("room dimensions must be positive")
        if not 0.0 <= self.absorption <= 1.0:
            raise ValueError("absorption must lie in [0, 1]")
        if self.max_order < 0:
            raise ValueError("max_order must be >= 0")

    def inside(self, p, margin: float = 0.0) -> bool:
        x, y = p
        return margin < x < self.width - margin and margin < y < self.height - margin


@dataclass(frozen=True)
class MicArray:
    pose: Pose2D
    mic_offsets: tuple = SQUARE_MICS

    def __post_init__(self):
        offs = np.asarray(self.mic_offsets, dtype=np.float64)
        if offs.ndim != 2 or offs.shape[1] != 2 or len(offs) < 2:
            raise ValueError("an array needs at least 2 microphones given as (x, y) offsets")
        if len({tuple(o) for o in offs.tolist()}) != len(offs):
            raise ValueError("microphone offsets must be distinct")

    def mic_positions(self):
        """World coordinates of the microphones, shape ``(mics, 2)``."""
        return geom.apply(geom.pose_to_transform(self.pose), np.asarray(self.mic_offsets, dtype=np.float64))


@dataclass
class SceneSample:
    room: RoomSpec
    arrays: list
    sources: list  # [(position, signal)]
    sample_rate: int = SAMPLE_RATE
    duration: float = DURATION

    def __post_init__(self):
        if not 1 <= len(self.sources) <= 2:
            raise ValueError("a scene holds one or two sources")
        pos = [np.asarray(p, dtype=np.float64) for p, _ in self.sources]
        if len(pos) == 2 and np.linalg.norm(pos[0] - pos[1]) < 2.0:
            raise ValueError("sources must be at least 2 m apart")
        for p in pos:
            if not self.room.inside(p):
                raise ValueError(f"source {p} outside the room")
        for a in self.arrays:
            for m in a.mic_positions():
                if not self.room.inside(m):
                    raise ValueError(f"microphone {m} outside the room")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass
class Heatmap:
    grid: GridSpec
    values: np.ndarray  # (rows, cols)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"heatmap shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("heatmap values must be finite")


def synth_source_signal(seed: int, duration: float = DURATION, sample_rate: int = SAMPLE_RATE):
    """Deterministic broadband test signal: 8-16 enveloped sinusoids in
    [100, 4000] Hz, peak-normalised to 1."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    k = rng.integers(8, 17)
    freqs = rng.uniform(100.0, 4000.0, k)
    phases = rng.uniform(0, 2 * np.pi, k)
    amps = rng.uniform(0.2, 1.0, k)
    # slow amplitude modulation, 1 to 12 Hz
    env_f = rng.uniform(1.0, 12.0, k)
    env_p = rng.uniform(0, 2 * np.pi, k)
    env_d = rng.uniform(0.0, 0.9, k)
    env = 1.0 + env_d[:, None] * np.sin(2 * np.pi * env_f[:, None] * t + env_p[:, None])
    s = np.sum(amps[:, None] * env * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]), axis=0)
    return s / np.abs(s).max()


def image_sources(room: RoomSpec, src, max_order: Optional[int] = None):
    """Mirror images of ``src`` up to ``max_order`` wall reflections.

    Returns a list of ``(position, gain)`` with the direct path first.
    """
    if max_order is None:
        max_order = room.max_order
    sx, sy = map(float, src)
    if not room.inside((sx, sy)):
        raise ValueError(f"source ({sx}, {sy}) is not strictly inside the room")
    w, h = room.width, room.height

    def mirror(i, s, size):
        return i * size + (s if i % 2 == 0 else size - s)

    out = [(np.array([sx, sy]), 1.0)]
    for i in range(-max_order, max_order + 1):
        for j in range(-max_order, max_order + 1):
            order = abs(i) + abs(j)
            if order == 0 or order > max_order:
                continue
            pos = np.array([mirror(i, sx, w), mirror(j, sy, h)])
            out.append((pos, (1.0 - room.absorption) ** order))
    return out


def _delayed(signal, delays, n, offset):
    """``signal`` read at fractional indices ``offset + arange(n) - delay``
    for each delay, linear interpolation, zero outside the signal.

    Returns ``(len(delays), n)``.
    """
    idx = offset + np.arange(n)[None, :] - np.asarray(delays)[:, None]
    i0 = np.floor(idx).astype(np.int64)
    frac = idx - i0
    # zero guard on both ends; shift indices by one into the padded buffer
    ext = np.concatenate([[0.0], signal, [0.0]])
    a = ext[np.clip(i0 + 1, 0, len(ext) - 1)]
    b = ext[np.clip(i0 + 2, 0, len(ext) - 1)]
    return a * (1.0 - frac) + b * frac


def render(scene: SceneSample):
    """Microphone signals for all arrays, shape ``(total_mics, samples)``.

    Source signals may be longer than the clip; the extra leading samples act
    as pre-roll so that delayed paths are already sounding at the clip start.
    """
    n = scene.n_samples
    mics = np.concatenate([a.mic_positions() for a in scene.arrays])
    out = np.zeros((len(mics), n))
    for pos, sig in scene.sources:
        sig = np.asarray(sig, dtype=np.float64)
        offset = len(sig) - n
        if offset < 0:
            raise ValueError("source signal shorter than the clip")
        for img, gain in image_sources(scene.room, pos):
            if gain == 0.0:
                continue
            r = np.linalg.norm(mics - img, axis=1)
            amp = gain / np.maximum(r, R_MIN)
            delays = r / SPEED_OF_SOUND * scene.sample_rate
            out += amp[:, None] * _delayed(sig, delays, n, offset)
    return out


def add_noise(wave, snr_db, seed: int):
    """Additive white Gaussian noise at ``snr_db`` per channel.

    The noise of every channel is rescaled to hit the target power exactly
    over the clip. ``snr_db`` of ``None`` or ``+inf`` returns the input.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if snr_db is None or snr_db == math.inf:
        return wave.copy()
    p_sig = np.mean(wave**2, axis=-1, keepdims=True)
    if np.any(p_sig <= 0):
        raise ValueError("cannot set an SNR on a silent channel")
    noise = np.random.default_rng(seed).standard_normal(wave.shape)
    noise -= noise.mean(axis=-1, keepdims=True)
    noise *= np.sqrt(p_sig / 10 ** (snr_db / 10) / np.mean(noise**2, axis=-1, keepdims=True))
    return wave + noise


def make_label(sources, grid: GridSpec, sigma: float = LABEL_SIGMA) -> Heatmap:
    """Unit-peak Gaussians at the source positions, max-combined."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    centers = grid.cell_centers()
    values = np.zeros(grid.shape)
    for s in sources:
        d2 = np.sum((centers - np.asarray(s, dtype=np.float64)) ** 2, axis=-1)
        values = np.maximum(values, np.exp(-d2 / (2 * sigma**2)))
    return Heatmap(grid, values)
