"""STFT and HTK-Mel filterbank frontend.

The short-time transform uses a periodic Hann window and no center
padding, so the frame count is exactly ``floor((L - window)/hop) + 1`` and
token counts downstream are reproducible.  Power spectra are projected
through triangular filters spaced evenly on the HTK mel scale
(2595*log10(1 + f/700)) and compressed with ``log(eps + x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Waveform
from .errors import DataError

DEFAULT_N_MELS = 128
DEFAULT_WINDOW = 2048
DEFAULT_HOP = 512
DEFAULT_LOG_EPS = 1e-5


def hz_to_mel(freq):
    """Convert Hz to HTK mels.

    Parameters
    ----------
    freq : float or np.ndarray
        Frequency in Hz.

    Returns
    -------
    float or np.ndarray
        The frequency on the HTK mel scale.
    """
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mels):
    """Inverse of :func:`hz_to_mel`."""
    return 700.0 * (10.0 ** (np.asarray(mels, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = DEFAULT_N_MELS,
    n_fft: int = DEFAULT_WINDOW,
    sample_rate: int = 16000,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Triangular HTK-mel filterbank.

    Parameters
    ----------
    n_mels : int
        Number of triangular filters.
    n_fft : int
        FFT size; the filterbank has ``n_fft // 2 + 1`` frequency columns.
    sample_rate : int
        Audio sample rate in Hz.
    fmin, fmax : float
        Frequency span of the filterbank; ``fmax`` defaults to Nyquist.

    Returns
    -------
    np.ndarray of shape (n_mels, n_fft // 2 + 1)
        Filter weights; triangles are linear in mel space, so each filter
        peaks at its center frequency and its weights are nonnegative.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    if not 0 <= fmin < fmax <= sample_rate / 2.0 + 1e-9:
        raise DataError(f"bad filterbank span [{fmin}, {fmax}] at sr={sample_rate}")
    edges_mel = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    bins_mel = hz_to_mel(bin_freqs)
    lower, center, upper = edges_mel[:-2], edges_mel[1:-1], edges_mel[2:]
    up = (bins_mel[None, :] - lower[:, None]) / (center - lower)[:, None]
    down = (upper[:, None] - bins_mel[None, :]) / (upper - center)[:, None]
    return np.maximum(0.0, np.minimum(up, down))


def filter_center_frequencies(
    n_mels: int = DEFAULT_N_MELS,
    sample_rate: int = 16000,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Center frequency in Hz of each filter, strictly increasing."""
    if fmax is None:
        fmax = sample_rate / 2.0
    edges_mel = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(edges_mel[1:-1])


def frame_count(n_samples: int, window: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP) -> int:
    """Number of full analysis frames for an input of ``n_samples``."""
    if n_samples < window:
        raise DataError(f"input of {n_samples} samples is shorter than the {window}-sample window")
    return (n_samples - window) // hop + 1


def stft_power(samples: np.ndarray, window: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP) -> np.ndarray:
    """Hann-windowed power spectrogram without center padding.

    Returns an array of shape ``(window // 2 + 1, n_frames)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    n_frames = frame_count(len(x), window, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n_frames]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    spectra = np.fft.rfft(frames * hann, axis=1)
    return (spectra.real**2 + spectra.imag**2).T


@dataclass
class MelSpectrogram:
    """Log-compressed mel energies, shape (n_mels, n_frames)."""

    data: np.ndarray
    sample_rate: int
    hop: int
    window: int

    @property
    def n_mels(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def mel_spectrogram(
    w: Waveform,
    n_mels: int = DEFAULT_N_MELS,
    window: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    fmin: float = 0.0,
    fmax: float | None = None,
    log_eps: float = DEFAULT_LOG_EPS,
) -> MelSpectrogram:
    """Full frontend: STFT power -> mel filterbank -> log compression.

    Parameters
    ----------
    w : Waveform
        Input audio; must be at least ``window`` samples long.
    n_mels, window, hop, fmin, fmax : see :func:`mel_filterbank`.
    log_eps : float
        Additive floor inside the log; keeps silence finite.

    Returns
    -------
    MelSpectrogram
        ``data[b, t] = log(log_eps + mel_power[b, t])`` as float32.
    """
    power = stft_power(w.samples, window, hop)
    fb = mel_filterbank(n_mels, window, w.sample_rate, fmin, fmax)
    mel_power = fb @ power
    return MelSpectrogram(
        data=np.log(log_eps + mel_power).astype(np.float32),
        sample_rate=w.sample_rate,
        hop=hop,
        window=window,
    )
