"""Do waveform augmentations act linearly in embedding space?

For each augmentation we embed a set of clean clips and their augmented
counterparts, fit a ridge-regularized linear map (with bias) from clean to
augmented embeddings in closed form, and compare its residuals against the
identity-map baseline.  A fitted map that beats identity means the
augmentation corresponds to a consistent linear direction in the space.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass

import numpy as np

from .audio import add_noise, apply_gain, highpass, lowpass, pitch_shift
from .encoder import Encoder, MelStats, extract_features
from .errors import DataError

EMBED_DIM = 384


@dataclass
class AugMapReport:
    augmentation: str
    params: str
    ridge: float
    n_train: int
    n_heldout: int
    train_mse: float
    heldout_mse: float
    train_cos_dist: float
    heldout_cos_dist: float
    identity_train_mse: float
    identity_heldout_mse: float
    identity_train_cos_dist: float
    identity_heldout_cos_dist: float


def default_ridge(x: np.ndarray) -> float:
    """Heuristic ridge strength: 1e-3 * trace(X^T X) / dim."""
    x = np.asarray(x, dtype=np.float64)
    return 1e-3 * float(np.square(x).sum()) / x.shape[1]


def mean_cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1) + 1e-12
    nb = np.linalg.norm(b, axis=1) + 1e-12
    return float(np.mean(1.0 - np.sum(a * b, axis=1) / (na * nb)))


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.square(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def solve_ridge_map(x: np.ndarray, y: np.ndarray, ridge: float):
    """Closed-form solution of min ||XW + b - Y||^2 + ridge * ||W||^2.

    The bias is unpenalized, which centering handles exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    xc, yc = x - x_mean, y - y_mean
    d = x.shape[1]
    if ridge == 0.0 and x.shape[0] <= d:
        raise DataError(
            f"normal equations are singular with {x.shape[0]} rows and dim {d}; use ridge > 0"
        )
    gram = xc.T @ xc + ridge * np.eye(d)
    try:
        w = np.linalg.solve(gram, xc.T @ yc)
    except np.linalg.LinAlgError as err:
        raise DataError("singular system in linear-map fit; use ridge > 0") from err
    b = y_mean - x_mean @ w
    return w, b


def fit_linear_map(x: np.ndarray, y: np.ndarray, ridge: float | None = None,
                   heldout_fraction: float = 0.2, seed: int = 0,
                   augmentation: str = "custom", params: str = ""):
    """Fit the clean -> augmented map and report split residuals.

    Rows are shuffled into an 80/20 train/held-out split; the map is fit
    on the training rows only.  Returns (W, b, AugMapReport).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"paired embeddings must match in shape: {x.shape} vs {y.shape}")
    if x.shape[0] < 5:
        raise DataError("need at least 5 paired rows to fit and hold out")
    rng = np.random.default_rng(seed)
    order = rng.permutation(x.shape[0])
    n_held = max(1, int(round(heldout_fraction * x.shape[0])))
    held, train = order[:n_held], order[n_held:]
    xt, yt = x[train], y[train]
    xh, yh = x[held], y[held]
    if ridge is None:
        ridge = default_ridge(xt)
    w, b = solve_ridge_map(xt, yt, ridge)
    pred_t = xt @ w + b
    pred_h = xh @ w + b
    report = AugMapReport(
        augmentation=augmentation,
        params=params,
        ridge=float(ridge),
        n_train=len(train),
        n_heldout=len(held),
        train_mse=_mse(pred_t, yt),
        heldout_mse=_mse(pred_h, yh),
        train_cos_dist=mean_cosine_distance(pred_t, yt),
        heldout_cos_dist=mean_cosine_distance(pred_h, yh),
        identity_train_mse=_mse(xt, yt),
        identity_heldout_mse=_mse(xh, yh),
        identity_train_cos_dist=mean_cosine_distance(xt, yt),
        identity_heldout_cos_dist=mean_cosine_distance(xh, yh),
    )
    return w, b, report


def default_augmentations(noise_seed: int = 0) -> list:
    """Named waveform transforms probed for embedding-space linearity."""
    return [
        ("pitch_shift", "+2", functools.partial(pitch_shift, semitones=2)),
        ("pitch_shift", "-2", functools.partial(pitch_shift, semitones=-2)),
        ("gain", "+6dB", functools.partial(apply_gain, gain_db=6.0)),
        ("gain", "-6dB", functools.partial(apply_gain, gain_db=-6.0)),
        ("noise", "-20dB", functools.partial(add_noise, noise_db=-20.0, seed=noise_seed)),
        ("lowpass", "2000Hz", functools.partial(lowpass, cutoff_hz=2000.0)),
        ("highpass", "500Hz", functools.partial(highpass, cutoff_hz=500.0)),
    ]


def embed_clips(clips, encoder: Encoder, stats: MelStats | None, context_len: int) -> np.ndarray:
    """One embedding per clip: the mean over its window embeddings."""
    rows = [extract_features(c, context_len, encoder, stats).mean(axis=0) for c in clips]
    return np.stack(rows)


def aug_linearity_report(clips, encoder: Encoder, stats: MelStats | None,
                         context_len: int, augmentations=None,
                         ridge: float | None = None, seed: int = 0) -> list:
    """Fit one linear map per augmentation over paired clip embeddings."""
    clips = list(clips)
    if not clips:
        raise DataError("augmentation analysis needs at least one clip")
    augmentations = default_augmentations() if augmentations is None else augmentations
    clean = embed_clips(clips, encoder, stats, context_len)
    reports = []
    for name, params, fn in augmentations:
        augmented = embed_clips((fn(c) for c in clips), encoder, stats, context_len)
        _, _, report = fit_linear_map(clean, augmented, ridge=ridge, seed=seed,
                                      augmentation=name, params=params)
        reports.append(report)
    return reports


AUG_CSV_FIELDS = ["augmentation", "params", "ridge", "n_train", "n_heldout",
                  "train_mse", "heldout_mse", "train_cos_dist", "heldout_cos_dist",
                  "identity_train_mse", "identity_heldout_mse",
                  "identity_train_cos_dist", "identity_heldout_cos_dist"]


def write_aug_report_csv(reports: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=AUG_CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow({k: getattr(r, k) for k in AUG_CSV_FIELDS})


def pca_coordinates(clean: np.ndarray, augmented: np.ndarray):
    """Top-2 principal-component coordinates of clean plus augmented rows.

    Returns rows of (clip_index, pc1, pc2, is_augmented) for external
    plotting tools.
    """
    stacked = np.vstack([clean, augmented]).astype(np.float64)
    centered = stacked - stacked.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    rows = []
    n = len(clean)
    for i in range(n):
        rows.append((i, float(coords[i, 0]), float(coords[i, 1]), 0))
    for i in range(len(augmented)):
        rows.append((i, float(coords[n + i, 0]), float(coords[n + i, 1]), 1))
    return rows


def write_pca_csv(rows: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "pc1", "pc2", "is_augmented"])
        writer.writerows(rows)
