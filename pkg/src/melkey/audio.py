"""Waveform container, WAV I/O, and waveform-level transforms.

Pitch shifting here is the generic augmentation path: resample to move the
spectrum, then a phase-coherent overlap-add time stretch back to the
original length.  Ground-truth experiments use exact re-synthesis instead
(see ``melkey.synth.synth_shifted``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

from .errors import DataError

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples)
        if arr.ndim != 1:
            raise DataError(f"waveform must be mono 1-D, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise DataError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = arr

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def seconds(self) -> float:
        return len(self) / self.sample_rate


def resample_linear(samples: np.ndarray, factor: float) -> np.ndarray:
    """Resample by linear interpolation; ``factor`` is the length ratio.

    factor < 1 shortens the signal and scales every frequency up by
    1/factor, factor > 1 does the opposite.
    """
    n_in = len(samples)
    n_out = max(1, int(round(n_in * factor)))
    src = np.arange(n_out) * ((n_in - 1) / max(1, n_out - 1)) if n_out > 1 else np.zeros(1)
    return np.interp(src, np.arange(n_in), samples)


def read_wav(path, target_sr: int | None = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read 16-bit PCM, 32-bit PCM, or 32-bit float WAV as mono float32.

    Stereo is downmixed by averaging.  If the file rate differs from
    ``target_sr`` the audio is resampled by linear interpolation; pass
    ``target_sr=None`` to keep the file's native rate.
    """
    sr, data = wavfile.read(path)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float32)
    else:
        raise DataError(f"unsupported WAV sample format {data.dtype} in {path}")
    if target_sr is not None and sr != target_sr:
        samples = resample_linear(samples, target_sr / sr).astype(np.float32)
        sr = target_sr
    return Waveform(samples, sr)


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM WAV; samples are clipped to [-1, 1] first."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)


def _pv_stretch(samples: np.ndarray, target_len: int, window: int = 1024, hop: int = 256) -> np.ndarray:
    """Phase-coherent overlap-add time stretch to an exact output length.

    Steps through the input's STFT columns at a fractional rate while
    synthesizing one column per output hop; per-bin phases accumulate by
    the locally estimated instantaneous frequency, so steady sinusoids
    keep their frequency exactly.
    """
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < window + hop:
        x = np.pad(x, (0, window + hop - len(x)))
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    starts = np.arange(0, len(x) - window + 1, hop)
    frames = np.stack([x[s:s + window] for s in starts])
    spec = np.fft.rfft(frames * win, axis=1)  # [n_cols, bins]
    n_cols = spec.shape[0]
    mag = np.abs(spec)
    phase = np.angle(spec)

    n_out = max(2, int(np.ceil((target_len - window) / hop)) + 1)
    steps = np.arange(n_out) * ((n_cols - 1) / (n_out - 1))
    omega_hop = 2.0 * np.pi * np.arange(spec.shape[1]) / window * hop

    out = np.zeros((n_out - 1) * hop + window)
    norm = np.zeros_like(out)
    acc = phase[0].copy()
    for j, s in enumerate(steps):
        k = min(int(s), n_cols - 2)
        frac = s - k
        col_mag = (1.0 - frac) * mag[k] + frac * mag[k + 1]
        if j > 0:
            dphi = phase[k + 1] - phase[k] - omega_hop
            dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
            acc += omega_hop + dphi
        col = col_mag * np.exp(1j * acc)
        frame = np.fft.irfft(col, n=window) * win
        pos = j * hop
        out[pos:pos + window] += frame
        norm[pos:pos + window] += win * win
    valid = norm > 1e-8
    out[valid] /= norm[valid]
    return out[:target_len]


def pitch_shift(w: Waveform, semitones: float, max_shift: float = 6.0) -> Waveform:
    """Shift pitch by ``semitones`` while keeping the duration.

    Every sinusoidal component at f Hz moves to f * 2**(semitones/12).
    Shifts beyond ``max_shift`` semitones in magnitude are rejected; relax
    the bound explicitly when a larger shift is intended.
    """
    if abs(semitones) > max_shift:
        raise DataError(f"pitch shift {semitones} outside +/-{max_shift} semitones")
    if len(w) == 0:
        raise DataError("cannot pitch-shift an empty waveform")
    if semitones == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    factor = 2.0 ** (-semitones / 12.0)
    resampled = resample_linear(w.samples.astype(np.float64), factor)
    stretched = _pv_stretch(resampled, target_len=len(w))
    return Waveform(stretched.astype(np.float32), w.sample_rate)


def apply_gain(w: Waveform, gain_db: float) -> Waveform:
    scale = 10.0 ** (gain_db / 20.0)
    return Waveform((w.samples * scale).astype(np.float32), w.sample_rate)


def add_noise(w: Waveform, noise_db: float, seed: int = 0) -> Waveform:
    """Add white noise at ``noise_db`` dB relative to the signal RMS."""
    rng = np.random.default_rng(seed)
    rms = float(np.sqrt(np.mean(np.square(w.samples)))) or 1e-8
    noise = rng.standard_normal(len(w))
    noise *= rms * 10.0 ** (noise_db / 20.0) / (np.sqrt(np.mean(np.square(noise))) + 1e-12)
    return Waveform((w.samples + noise).astype(np.float32), w.sample_rate)


def lowpass(w: Waveform, cutoff_hz: float) -> Waveform:
    """First-order IIR lowpass: y[n] = a*y[n-1] + (1-a)*x[n]."""
    a = float(np.exp(-2.0 * np.pi * cutoff_hz / w.sample_rate))
    y = lfilter([1.0 - a], [1.0, -a], w.samples.astype(np.float64))
    return Waveform(y.astype(np.float32), w.sample_rate)


def highpass(w: Waveform, cutoff_hz: float) -> Waveform:
    """Complement of the first-order lowpass at the same cutoff."""
    low = lowpass(w, cutoff_hz)
    return Waveform((w.samples - low.samples).astype(np.float32), w.sample_rate)
