"""Synthetic keyed-audio generator.

Renders short harmonic clips in a chosen key: every bar opens with the
tonic triad, closes with the subdominant or dominant triad, and fills the
middle beats with single scale tones at random octaves.  Notes are additive
harmonic-series tones with randomized decay and phase, onsets carry tempo
jitter, and an optional white-noise floor is mixed in.  Everything is a
pure function of (spec, seed), so corpora regenerate bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, Waveform
from .errors import DataError
from .keys import MAJOR, Key, transpose_key

MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)
MINOR_SCALE = (0, 2, 3, 5, 7, 8, 10)

# triads are stacked thirds within the scale, rooted at scale degrees
# 0 (tonic), 3 (subdominant) and 4 (dominant)
TRIAD_DEGREES = {"I": 0, "IV": 3, "V": 4}


@dataclass
class SynthSpec:
    """Recipe for one synthetic clip."""

    key: Key
    duration_s: float = 8.0
    harmonics: int = 6
    seed: int = 0
    tempo_bpm: float = 110.0
    noise_db: float = -30.0
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.duration_s <= 0:
            raise DataError(f"duration must be positive, got {self.duration_s}")
        if self.harmonics < 1:
            raise DataError(f"need at least one harmonic, got {self.harmonics}")
        if self.tempo_bpm <= 0:
            raise DataError(f"tempo must be positive, got {self.tempo_bpm}")


def scale_pitch_classes(key: Key) -> tuple:
    """The seven diatonic pitch classes of the key."""
    intervals = MAJOR_SCALE if key.mode == MAJOR else MINOR_SCALE
    return tuple((key.tonic + i) % 12 for i in intervals)


def triad_pitch_classes(key: Key, numeral: str) -> tuple:
    """Diatonic triad (root, third, fifth) for numeral I, IV or V."""
    scale = scale_pitch_classes(key)
    root_degree = TRIAD_DEGREES[numeral]
    return tuple(scale[(root_degree + 2 * k) % 7] for k in range(3))


def pitch_to_hz(pitch_class: int, octave: int) -> float:
    """Equal temperament with A4 = 440 Hz; C4 is pitch class 0, octave 4."""
    return 440.0 * 2.0 ** ((pitch_class - 9) / 12.0 + (octave - 4))


def _voice_chord(pitch_classes, root_octave: int) -> list:
    """Realize chord pitch classes as ascending frequencies from the root."""
    freqs = []
    prev = 0.0
    for pc in pitch_classes:
        octave = root_octave
        f = pitch_to_hz(pc, octave)
        while f < prev:
            octave += 1
            f = pitch_to_hz(pc, octave)
        freqs.append(f)
        prev = f
    return freqs


def _render(spec: SynthSpec, freq_scale: float) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    sr = spec.sample_rate
    n_total = int(round(spec.duration_s * sr))
    beat_s = 60.0 / spec.tempo_bpm
    n_beats = int(spec.duration_s / beat_s)
    if n_beats < 1:
        raise DataError(
            f"duration {spec.duration_s}s is shorter than one beat at {spec.tempo_bpm} bpm"
        )
    nyquist = sr / 2.0
    out = np.zeros(n_total, dtype=np.float64)
    scale = scale_pitch_classes(spec.key)

    for beat in range(n_beats):
        jitter = rng.uniform(-0.05, 0.05) * beat_s
        onset = max(0.0, beat * beat_s + jitter)
        note_len = beat_s * rng.uniform(1.1, 1.6)
        if beat % 4 == 0:
            freqs = _voice_chord(triad_pitch_classes(spec.key, "I"), root_octave=3)
            amp = 1.0
        elif beat % 4 == 3:
            numeral = "IV" if rng.random() < 0.5 else "V"
            freqs = _voice_chord(triad_pitch_classes(spec.key, numeral), root_octave=3)
            amp = 0.75
        else:
            pc = scale[rng.integers(0, len(scale))]
            freqs = [pitch_to_hz(pc, int(rng.integers(3, 6)))]
            amp = 0.45

        start = int(round(onset * sr))
        n = min(int(round(note_len * sr)), n_total - start)
        if n <= 0:
            continue
        t = np.arange(n) / sr
        envelope = np.exp(-t / (note_len * rng.uniform(0.4, 0.9)))
        tone = np.zeros(n)
        for f in freqs:
            decay = rng.uniform(1.2, 2.0)
            for h in range(1, spec.harmonics + 1):
                phase = rng.uniform(0.0, 2.0 * np.pi)
                fh = f * h * freq_scale
                if fh >= nyquist:
                    continue
                tone += h ** (-decay) * np.sin(2.0 * np.pi * fh * t + phase)
        out[start:start + n] += amp * envelope * tone

    if np.isfinite(spec.noise_db):
        signal_rms = float(np.sqrt(np.mean(np.square(out)))) or 1.0
        noise = rng.standard_normal(n_total)
        noise *= signal_rms * 10.0 ** (spec.noise_db / 20.0) / np.sqrt(np.mean(np.square(noise)))
        out += noise

    peak = float(np.max(np.abs(out)))
    if peak > 0.99:
        out *= 0.99 / peak
    return out.astype(np.float32)


def synth_clip(spec: SynthSpec) -> Waveform:
    """Render the clip described by ``spec``; deterministic per seed."""
    return Waveform(_render(spec, freq_scale=1.0), spec.sample_rate)


def synth_shifted(spec: SynthSpec, semitones: int) -> tuple:
    """Re-synthesize the clip with every fundamental scaled by 2**(n/12).

    The random structure (note choices, jitter, decays, phases, noise) is
    identical to ``synth_clip(spec)``; only the frequencies move.  Returns
    the waveform together with the transposed key label.
    """
    wave = Waveform(_render(spec, freq_scale=2.0 ** (semitones / 12.0)), spec.sample_rate)
    return wave, transpose_key(spec.key, semitones)
