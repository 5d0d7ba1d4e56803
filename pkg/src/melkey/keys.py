"""Musical key labels, the MIREX relationship taxonomy, and weighted scoring.

A key is a tonic pitch class (C=0 .. B=11) plus a mode, giving 24 classes.
Estimated keys are scored against references by classifying the relation
between the pair (correct / fifth / relative / parallel / other) and
crediting partial matches with the conventional weights 1 / 0.5 / 0.3 / 0.2.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError

MAJOR = "major"
MINOR = "minor"

PITCH_CLASS_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

_LETTER_TO_PC = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
_MODE_WORDS = {"major": MAJOR, "maj": MAJOR, "minor": MINOR, "min": MINOR}

CATEGORIES = ("correct", "fifth", "relative", "parallel", "other")
WEIGHTS = {"correct": 1.0, "fifth": 0.5, "relative": 0.3, "parallel": 0.2, "other": 0.0}


@dataclass(frozen=True)
class Key:
    """Tonic pitch class (0-11, C=0) plus mode ("major" or "minor")."""

    tonic: int
    mode: str

    def __post_init__(self):
        if not 0 <= self.tonic <= 11:
            raise DataError(f"tonic pitch class out of range: {self.tonic}")
        if self.mode not in (MAJOR, MINOR):
            raise DataError(f"unknown mode: {self.mode!r}")

    @property
    def class_index(self) -> int:
        """Map to the 24-way label space: tonic + 12 for minor keys."""
        return self.tonic + (12 if self.mode == MINOR else 0)

    @classmethod
    def from_class_index(cls, index: int) -> "Key":
        if not 0 <= index <= 23:
            raise DataError(f"class index out of range: {index}")
        return cls(index % 12, MINOR if index >= 12 else MAJOR)

    def name(self) -> str:
        return f"{PITCH_CLASS_NAMES[self.tonic]} {self.mode}"


ALL_KEYS = tuple(Key.from_class_index(i) for i in range(24))


def parse_key(text: str) -> Key:
    """Parse strings like "d minor", "Eb major", "F# min" into a Key.

    Enharmonic spellings normalize to the same pitch class; the mode word
    may be any of major/maj/minor/min, case-insensitive.
    """
    parts = text.strip().split()
    if len(parts) != 2:
        raise DataError(f"cannot parse key string: {text!r}")
    tonic_token, mode_token = parts
    letter = tonic_token[0].upper()
    if letter not in _LETTER_TO_PC:
        raise DataError(f"unknown tonic: {tonic_token!r}")
    pc = _LETTER_TO_PC[letter]
    for accidental in tonic_token[1:]:
        if accidental == "#":
            pc += 1
        elif accidental in ("b", "B"):
            pc -= 1
        else:
            raise DataError(f"unknown accidental in tonic: {tonic_token!r}")
    mode = _MODE_WORDS.get(mode_token.lower())
    if mode is None:
        raise DataError(f"unknown mode: {mode_token!r}")
    return Key(pc % 12, mode)


def format_key(key: Key) -> str:
    """Canonical sharp-spelled name, e.g. "D# minor"."""
    return key.name()


def transpose_key(key: Key, semitones: int) -> Key:
    """Shift the tonic by a number of semitones; the mode is unchanged."""
    return Key((key.tonic + semitones) % 12, key.mode)


def classify_relation(reference: Key, estimate: Key, fifth_both_directions: bool = False) -> str:
    """Classify an estimated key against the reference.

    Categories are mutually exclusive with precedence
    correct > fifth > relative > parallel > other.  "fifth" defaults to the
    ascending direction only (estimate a perfect fifth above the reference);
    set ``fifth_both_directions`` to also accept a fifth below.
    """
    if reference == estimate:
        return "correct"
    interval = (estimate.tonic - reference.tonic) % 12
    if estimate.mode == reference.mode:
        if interval == 7 or (fifth_both_directions and interval == 5):
            return "fifth"
        return "other"
    # modes differ from here on
    relative_interval = 9 if reference.mode == MAJOR else 3
    if interval == relative_interval:
        return "relative"
    if interval == 0:
        return "parallel"
    return "other"


def weighted_score(correct: float, fifth: float, relative: float, parallel: float) -> float:
    """MIREX-style weighted score over category percentages."""
    if min(correct, fifth, relative, parallel) < 0:
        raise DataError("category percentages must be nonnegative")
    return correct + 0.5 * fifth + 0.3 * relative + 0.2 * parallel


@dataclass
class EvalReport:
    """Per-category counts over a track set plus the weighted score."""

    n_tracks: int
    counts: dict

    def percentage(self, category: str) -> float:
        return 100.0 * self.counts[category] / self.n_tracks

    @property
    def weighted(self) -> float:
        return weighted_score(
            self.percentage("correct"),
            self.percentage("fifth"),
            self.percentage("relative"),
            self.percentage("parallel"),
        )

    def as_row(self) -> dict:
        row = {"n_tracks": self.n_tracks, "weighted": round(self.weighted, 4)}
        for cat in CATEGORIES:
            row[cat] = round(self.percentage(cat), 4)
        return row

    def table(self) -> str:
        header = f"{'Weighted':>9} {'Correct':>8} {'Fifth':>7} {'Relative':>9} {'Parallel':>9} {'Other':>7} {'Tracks':>7}"
        vals = (
            f"{self.weighted:9.2f} {self.percentage('correct'):8.2f} "
            f"{self.percentage('fifth'):7.2f} {self.percentage('relative'):9.2f} "
            f"{self.percentage('parallel'):9.2f} {self.percentage('other'):7.2f} "
            f"{self.n_tracks:7d}"
        )
        return header + "\n" + vals


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_track(window_embeddings: np.ndarray, probe) -> Key:
    """Predict a single key for a track from its per-window embeddings.

    ``probe`` is any callable mapping an [n, d] embedding matrix to [n, 24]
    logits.  Per-window softmax probabilities are averaged arithmetically
    and the argmax class wins; ties break toward the lowest class index.
    """
    emb = np.atleast_2d(np.asarray(window_embeddings))
    if emb.shape[0] == 0:
        raise DataError("predict_track needs at least one window embedding")
    probs = softmax_probs(probe(emb))
    mean_probs = probs.mean(axis=0)
    return Key.from_class_index(int(np.argmax(mean_probs)))


def evaluate(predictions, references, fifth_both_directions: bool = False) -> EvalReport:
    """Score aligned prediction/reference key lists into an EvalReport."""
    predictions = list(predictions)
    references = list(references)
    if len(predictions) != len(references):
        raise DataError(
            f"prediction/reference length mismatch: {len(predictions)} vs {len(references)}"
        )
    if not references:
        raise DataError("evaluate needs at least one track")
    counts = {cat: 0 for cat in CATEGORIES}
    for est, ref in zip(predictions, references):
        counts[classify_relation(ref, est, fifth_both_directions)] += 1
    return EvalReport(n_tracks=len(references), counts=counts)


def write_report_csv(report: EvalReport, path) -> None:
    row = report.as_row()
    fields = ["weighted"] + list(CATEGORIES) + ["n_tracks"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: row[k] for k in fields})


def load_key_file(path) -> Key:
    """Read a per-track annotation file containing a single key string."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read().strip()
    if not text:
        raise DataError(f"empty key annotation file: {path}")
    return parse_key(text)


def load_labeled_manifest(path) -> list:
    """Read a `path,key` manifest CSV; audio paths resolve relative to it."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["path", "key"]:
            raise DataError(f"manifest {path} must start with a 'path,key' header")
        for row in reader:
            audio = row["path"]
            if not os.path.isabs(audio):
                audio = os.path.join(base, audio)
            entries.append((audio, parse_key(row["key"])))
    if not entries:
        raise DataError(f"manifest {path} lists no tracks")
    return entries
