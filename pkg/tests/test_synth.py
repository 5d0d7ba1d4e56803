import numpy as np
import pytest

from melkey.errors import DataError
from melkey.keys import Key, transpose_key
from melkey.synth import (SynthSpec, pitch_to_hz, scale_pitch_classes, synth_clip,
                          synth_shifted, triad_pitch_classes)

MAJOR, MINOR = "major", "minor"


def chroma_energy(samples, sr=16000, octaves=range(2, 7)):
    """Brute-force DFT projection onto each pitch class's frequencies."""
    t = np.arange(len(samples)) / sr
    energy = np.zeros(12)
    for pc in range(12):
        for octave in octaves:
            f = pitch_to_hz(pc, octave)
            if f >= sr / 2:
                continue
            c = samples @ np.cos(2 * np.pi * f * t)
            s = samples @ np.sin(2 * np.pi * f * t)
            energy[pc] += c * c + s * s
    return energy


def test_scale_and_triads():
    c_major = Key(0, MAJOR)
    assert scale_pitch_classes(c_major) == (0, 2, 4, 5, 7, 9, 11)
    assert triad_pitch_classes(c_major, "I") == (0, 4, 7)    # C E G
    assert triad_pitch_classes(c_major, "IV") == (5, 9, 0)   # F A C
    assert triad_pitch_classes(c_major, "V") == (7, 11, 2)   # G B D
    a_minor = Key(9, MINOR)
    assert scale_pitch_classes(a_minor) == (9, 11, 0, 2, 4, 5, 7)
    assert triad_pitch_classes(a_minor, "I") == (9, 0, 4)    # A C E


def test_synth_c_major_strongest_pitch_classes():
    spec = SynthSpec(key=Key(0, MAJOR), duration_s=8.0, seed=7)
    wave = synth_clip(spec)
    energy = chroma_energy(wave.samples.astype(np.float64))
    top3 = set(np.argsort(energy)[-3:])
    assert top3 == {0, 4, 7}  # C, E, G


def test_synth_pure_tone_peaks_on_scale():
    spec = SynthSpec(key=Key(9, MINOR), duration_s=6.0, harmonics=1,
                     noise_db=float("-inf"), seed=11)
    wave = synth_clip(spec)
    n = len(wave)
    spectrum = np.abs(np.fft.rfft(wave.samples * np.hanning(n)))
    floor = spectrum.max() * 0.05
    peak_bins = [i for i in range(2, len(spectrum) - 2)
                 if spectrum[i] > floor
                 and spectrum[i] >= spectrum[i - 1] and spectrum[i] >= spectrum[i + 1]
                 and spectrum[i] > spectrum[i - 2] and spectrum[i] > spectrum[i + 2]]
    assert peak_bins
    scale_freqs = [pitch_to_hz(pc, octave)
                   for pc in scale_pitch_classes(spec.key) for octave in range(2, 8)]
    bin_hz = wave.sample_rate / n
    for b in peak_bins:
        nearest = min(abs(b * bin_hz - f) for f in scale_freqs)
        assert nearest <= bin_hz, f"peak at {b * bin_hz:.1f} Hz off the A-minor scale"


def test_synth_determinism():
    spec = SynthSpec(key=Key(5, MAJOR), duration_s=4.0, seed=123)
    a = synth_clip(spec)
    b = synth_clip(spec)
    assert np.array_equal(a.samples, b.samples)
    c = synth_clip(SynthSpec(key=Key(5, MAJOR), duration_s=4.0, seed=124))
    assert not np.array_equal(a.samples, c.samples)


def test_synth_peak_bounded_and_length():
    spec = SynthSpec(key=Key(2, MINOR), duration_s=5.0, seed=1)
    wave = synth_clip(spec)
    assert np.max(np.abs(wave.samples)) <= 1.0
    assert len(wave) == int(5.0 * 16000)


def test_synth_rejects_too_short():
    with pytest.raises(DataError):
        synth_clip(SynthSpec(key=Key(0, MAJOR), duration_s=0.2, tempo_bpm=60))
    with pytest.raises(DataError):
        SynthSpec(key=Key(0, MAJOR), duration_s=-1.0)
    with pytest.raises(DataError):
        SynthSpec(key=Key(0, MAJOR), harmonics=0)


def test_synth_shifted_labels():
    spec = SynthSpec(key=Key(0, MAJOR), duration_s=2.0, seed=3)
    _, label = synth_shifted(spec, 2)
    assert label == Key(2, MAJOR)
    _, label = synth_shifted(SynthSpec(key=Key(11, MINOR), duration_s=2.0, seed=3), 1)
    assert label == Key(0, MINOR)
    _, label = synth_shifted(SynthSpec(key=Key(5, MAJOR), duration_s=2.0, seed=3), -6)
    assert label == Key(11, MAJOR)


def test_synth_shifted_scales_all_fundamentals():
    spec = SynthSpec(key=Key(4, MAJOR), duration_s=4.0, harmonics=1,
                     noise_db=float("-inf"), seed=21)
    base = synth_clip(spec)
    shifted, label = synth_shifted(spec, 3)
    assert label == transpose_key(spec.key, 3)
    # chroma mass moves to the transposed classes
    base_energy = chroma_energy(base.samples.astype(np.float64))
    shift_energy = chroma_energy(shifted.samples.astype(np.float64))
    assert set(np.argsort(shift_energy)[-3:]) == {(pc + 3) % 12
                                                  for pc in np.argsort(base_energy)[-3:]}


def test_synth_shift_zero_matches_clip():
    spec = SynthSpec(key=Key(7, MINOR), duration_s=2.0, seed=9)
    wave, label = synth_shifted(spec, 0)
    assert label == spec.key
    assert np.array_equal(wave.samples, synth_clip(spec).samples)
