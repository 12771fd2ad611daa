"""STFT front end producing the network input tensors."""
from __future__ import annotations

import numpy as np

WIN = 256
HOP = 128


def stft(wave, win: int = WIN, hop: int = HOP):
    """One-sided Hann-windowed STFT, shape ``(frames, win // 2 + 1)``.

    Frames start at sample 0 and are not padded, so
    ``frames = (len(wave) - win) // hop + 1``.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if win <= 0 or win & (win - 1):
        raise ValueError(f"window length must be a power of two, got {win}")
    if not 0 < hop <= win:
        raise ValueError(f"hop must be in (0, win], got {hop}")
    if wave.ndim != 1:
        raise ValueError("stft expects a mono waveform")
    if len(wave) < win:
        raise ValueError(f"waveform of {len(wave)} samples is shorter than the window ({win})")
    n_frames = (len(wave) - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(wave, win)[::hop][:n_frames]
    # periodic Hann, the usual choice for analysis windows
    window = np.hanning(win + 1)[:-1]
    return np.fft.rfft(frames * window, axis=-1)


def extract_features(wave, win: int = WIN, hop: int = HOP):
    """Stack real and imaginary STFT parts of every microphone channel.

    ``wave`` is ``(mics, samples)``. Returns a float64 array of shape
    ``(2 * mics, frames, bins)`` ordered ``re0, im0, re1, im1, ...`` and
    scaled by ``1 / win``.
    """
    if not isinstance(wave, np.ndarray):
        lengths = {len(ch) for ch in wave}
        if len(lengths) > 1:
            raise ValueError(f"channels have inconsistent lengths {sorted(lengths)}")
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 2:
        raise ValueError(f"expected (mics, samples) waveform, got shape {wave.shape}")
    spectra = [stft(ch, win, hop) for ch in wave]
    out = np.empty((2 * len(spectra),) + spectra[0].shape)
    for i, s in enumerate(spectra):
        out[2 * i] = s.real / win
        out[2 * i + 1] = s.imag / win
    return out


def feature_shape(n_mics: int, n_samples: int, win: int = WIN, hop: int = HOP):
    return (2 * n_mics, (n_samples - win) // hop + 1, win // 2 + 1)
