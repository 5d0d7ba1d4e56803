"""Linear and shallow-wide MLP probes on frozen embeddings.

Probes classify 384-dim embeddings into the 24 keys.  MLP probes use ReLU
hidden layers with heavy dropout after the first activation; the linear
probe is a bare 384 -> 24 map.  Training is soft-label cross-entropy (so
MixUp mixes in embedding space with Beta-distributed weights), model
selection is the validation weighted key score on window-averaged track
predictions, and the grid harness sweeps 160 optimizer settings by 28
architectures.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .audio import Waveform, pitch_shift
from .encoder import Encoder, MelStats, extract_features
from .errors import DataError, NumericalError
from .keys import Key, evaluate, predict_track, transpose_key
from .optim import AdamW
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

INPUT_DIM = 384
N_CLASSES = 24

HIDDEN_LAYER_CHOICES = (1, 2)
HIDDEN_DIM_CHOICES = (1024, 2048, 4096, 8192)
DROPOUT_CHOICES = (0.75, 0.9, 0.95, 0.99)
BATCH_SIZE_CHOICES = (32, 64, 128, 256, 512)
LR_CHOICES = (1e-4, 3e-4, 1e-3, 3e-3)
WEIGHT_DECAY_CHOICES = (1e-5, 1e-4, 1e-3, 1e-2)
MIXUP_CHOICES = (None, (2.0, 5.0))
EXCLUDED_ARCH = (2, 8192)  # 2-layer 8192-dim probes are impractically large


@dataclass(frozen=True)
class ProbeArch:
    hidden_layers: int = 0
    hidden_dim: int | None = None
    dropout_p: float | None = None
    input_dim: int = INPUT_DIM
    classes: int = N_CLASSES

    def __post_init__(self):
        if self.hidden_layers not in (0, 1, 2):
            raise DataError(f"hidden_layers must be 0, 1 or 2, got {self.hidden_layers}")
        if self.hidden_layers == 0:
            return
        if self.hidden_dim is None:
            raise DataError("MLP probes need a hidden_dim")
        if (self.hidden_layers, self.hidden_dim) == EXCLUDED_ARCH:
            raise DataError("2-layer 8192-dim probes are excluded from the search space")

    def param_count(self) -> int:
        dims = [self.input_dim] + [self.hidden_dim] * self.hidden_layers + [self.classes]
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))

    def describe(self) -> str:
        if self.hidden_layers == 0:
            return "linear"
        return f"{self.hidden_layers}x{self.hidden_dim} dropout={self.dropout_p}"


LINEAR_PROBE = ProbeArch(hidden_layers=0)
BB_REFERENCE = ProbeArch(hidden_layers=1, hidden_dim=2048, dropout_p=0.75)
GS_REFERENCE = ProbeArch(hidden_layers=2, hidden_dim=4096, dropout_p=0.99)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    mixup: tuple | None = None
    epochs: int = 200
    patience: int = 20
    seed: int = 0


@dataclass
class LabeledFeature:
    embedding: np.ndarray
    label: int
    track_id: str
    window_index: int = 0
    shift: int = 0

    def __post_init__(self):
        if not 0 <= self.label < N_CLASSES:
            raise DataError(f"label {self.label} outside 0..{N_CLASSES - 1}")


class MlpProbe:
    """Feed-forward probe; dropout sits after the first hidden activation."""

    def __init__(self, arch: ProbeArch, seed: int = 0, dtype=np.float32):
        self.arch = arch
        rng = np.random.default_rng(seed)
        dims = [arch.input_dim] + [arch.hidden_dim] * arch.hidden_layers + [arch.classes]
        self.weights, self.biases = [], []
        for i in range(len(dims) - 1):
            self.weights.append(
                Parameter(T.trunc_normal((dims[i], dims[i + 1]), std=0.02, rng=rng, dtype=dtype),
                          f"layer{i}.w"))
            self.biases.append(Parameter(np.zeros(dims[i + 1], dtype=dtype), f"layer{i}.b"))

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise DataError(f"probe checkpoint missing tensor {p.name!r}")
            p.data = np.asarray(state[p.name]).astype(p.data.dtype)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        n_layers = len(self.weights)
        for i in range(n_layers - 1):
            t = T.relu(T.add(T.matmul(t, self.weights[i]), self.biases[i]))
            if i == 0 and training and self.arch.dropout_p:
                if rng is None:
                    raise DataError("training-mode dropout needs an rng")
                t = T.dropout(t, self.arch.dropout_p, rng, training=True)
        return T.add(T.matmul(t, self.weights[-1]), self.biases[-1])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode logits as a plain array."""
        with T.no_grad():
            return self.forward(np.atleast_2d(x)).data


def build_probe(arch: ProbeArch, seed: int = 0) -> MlpProbe:
    return MlpProbe(arch, seed=seed)


def one_hot(labels: np.ndarray, classes: int = N_CLASSES) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= classes:
        raise DataError(f"label outside 0..{classes - 1}")
    out = np.zeros((len(labels), classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup_batch(features: np.ndarray, labels_onehot: np.ndarray, alpha: float = 2.0,
                beta: float = 5.0, rng: np.random.Generator | None = None):
    """Mix each row with a permuted partner using a Beta(alpha, beta) weight."""
    if len(features) < 2:
        raise DataError("mixup needs a batch of at least 2")
    rng = rng or np.random.default_rng()
    lam = rng.beta(alpha, beta, size=(len(features), 1)).astype(features.dtype)
    perm = rng.permutation(len(features))
    mixed_x = lam * features + (1.0 - lam) * features[perm]
    mixed_y = lam * labels_onehot + (1.0 - lam) * labels_onehot[perm]
    return mixed_x, mixed_y


def enumerate_train_configs(epochs: int = 200, patience: int = 20) -> list:
    """The 160-point optimizer grid."""
    grid = itertools.product(BATCH_SIZE_CHOICES, LR_CHOICES, WEIGHT_DECAY_CHOICES, MIXUP_CHOICES)
    return [TrainConfig(batch_size=b, lr=lr, weight_decay=wd, mixup=mx,
                        epochs=epochs, patience=patience)
            for b, lr, wd, mx in grid]


def enumerate_probe_archs() -> list:
    """The 28-point MLP architecture grid (2-layer 8192 excluded)."""
    archs = []
    for layers, dim, p in itertools.product(HIDDEN_LAYER_CHOICES, HIDDEN_DIM_CHOICES, DROPOUT_CHOICES):
        if (layers, dim) == EXCLUDED_ARCH:
            continue
        archs.append(ProbeArch(hidden_layers=layers, hidden_dim=dim, dropout_p=p))
    return archs


def split_by_track(features: list, val_fraction: float = 0.1, seed: int = 0):
    """Hold out a fraction of tracks for validation (shift-0 variants only)."""
    tracks = sorted({f.track_id for f in features})
    rng = np.random.default_rng(seed)
    rng.shuffle(tracks)
    n_val = max(1, int(round(val_fraction * len(tracks))))
    val_tracks = set(tracks[:n_val])
    train = [f for f in features if f.track_id not in val_tracks]
    val = [f for f in features if f.track_id in val_tracks and f.shift == 0]
    return train, val


def check_track_disjoint(train: list, val: list) -> None:
    overlap = {f.track_id for f in train} & {f.track_id for f in val}
    if overlap:
        raise DataError(f"track leakage between splits: {sorted(overlap)[:5]}")


def _group_by_track(features: list) -> dict:
    groups: dict = {}
    for f in features:
        groups.setdefault(f.track_id, []).append(f)
    for fs in groups.values():
        fs.sort(key=lambda f: f.window_index)
    return groups


def score_tracks(features: list, probe: MlpProbe):
    """Window-averaged track predictions -> EvalReport."""
    groups = _group_by_track(features)
    predictions, references = [], []
    for track_id, fs in sorted(groups.items()):
        emb = np.stack([f.embedding for f in fs])
        predictions.append(predict_track(emb, probe))
        references.append(Key.from_class_index(fs[0].label))
    return evaluate(predictions, references)


@dataclass
class ProbeTrainResult:
    probe: MlpProbe
    best_val_weighted: float
    best_val_correct_pct: float
    best_epoch: int
    history: list = field(default_factory=list)  # (epoch, train_loss, val_weighted)


def train_probe(train_features: list, val_features: list, arch: ProbeArch,
                cfg: TrainConfig) -> ProbeTrainResult:
    """Train a probe on frozen embeddings with early stopping.

    The train and validation sets must be disjoint at track level and the
    validation set may contain only unshifted variants.  Returns the probe
    restored to its best-validation-epoch weights.
    """
    if not train_features or not val_features:
        raise DataError("both train and validation feature sets must be nonempty")
    check_track_disjoint(train_features, val_features)
    if any(f.shift != 0 for f in val_features):
        raise DataError("validation features must all be shift-0 variants")

    x_train = np.stack([f.embedding for f in train_features]).astype(np.float32)
    y_train = one_hot(np.array([f.label for f in train_features]))
    probe = build_probe(arch, seed=cfg.seed)
    opt = AdamW(probe.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    best_state, best_weighted, best_correct, best_epoch = None, -1.0, 0.0, -1
    since_best = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_train))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if cfg.mixup is not None and len(idx) >= 2:
                xb, yb = mixup_batch(xb, yb, cfg.mixup[0], cfg.mixup[1], rng)
            logits = probe.forward(xb, training=True, rng=rng)
            loss = T.cross_entropy_soft(logits, yb)
            loss.backward()
            opt.step()
            opt.zero_grad()
            losses.append(loss.item())
        report = score_tracks(val_features, probe)
        weighted = report.weighted
        history.append((epoch, float(np.mean(losses)), weighted))
        if weighted > best_weighted:
            best_weighted = weighted
            best_correct = report.percentage("correct")
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in probe.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    probe.load_state_dict(best_state)
    return ProbeTrainResult(probe, best_weighted, best_correct, best_epoch, history)


@dataclass
class GridRow:
    arch: ProbeArch
    config: TrainConfig
    seed: int
    best_epoch: int = -1
    val_weighted: float = float("nan")
    val_correct_pct: float = float("nan")
    status: str = "ok"

    def as_csv_row(self, dataset: str) -> dict:
        mixup = "" if self.config.mixup is None else f"{self.config.mixup[0]}:{self.config.mixup[1]}"
        return {
            "dataset": dataset,
            "hidden_layers": self.arch.hidden_layers,
            "hidden_dim": self.arch.hidden_dim or 0,
            "dropout_p": self.arch.dropout_p or 0.0,
            "batch_size": self.config.batch_size,
            "lr": self.config.lr,
            "weight_decay": self.config.weight_decay,
            "mixup": mixup,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "val_weighted": round(self.val_weighted, 4),
            "val_correct_pct": round(self.val_correct_pct, 4),
            "status": self.status,
        }


GRID_CSV_FIELDS = ["dataset", "hidden_layers", "hidden_dim", "dropout_p", "batch_size", "lr",
                   "weight_decay", "mixup", "seed", "best_epoch", "val_weighted",
                   "val_correct_pct", "status"]


def grid_search(train_features: list, val_features: list, dataset: str,
                archs: list | None = None, configs: list | None = None,
                seed: int = 0, out_csv=None) -> list:
    """Train one probe per (architecture, optimizer config) cell and rank.

    Defaults enumerate the full 28 x 160 grid; pass subsets for anything
    desk-sized.  Diverged cells are recorded with status "diverged" rather
    than aborting the sweep.  Rows come back sorted by validation weighted
    score, best first.
    """
    archs = enumerate_probe_archs() if archs is None else archs
    configs = enumerate_train_configs() if configs is None else configs
    rows = []
    for cell, (arch, cfg) in enumerate(itertools.product(archs, configs)):
        cell_seed = seed + cell
        cfg_seeded = replace(cfg, seed=cell_seed)
        row = GridRow(arch=arch, config=cfg_seeded, seed=cell_seed)
        try:
            result = train_probe(train_features, val_features, arch, cfg_seeded)
            row.best_epoch = result.best_epoch
            row.val_weighted = result.best_val_weighted
            row.val_correct_pct = result.best_val_correct_pct
        except NumericalError as err:
            log.warning("grid cell %d diverged: %s", cell, err)
            row.status = "diverged"
        rows.append(row)
        log.info("grid %d/%d %s -> %.2f", cell + 1, len(archs) * len(configs),
                 arch.describe(), row.val_weighted)
    rows.sort(key=lambda r: (-(r.val_weighted if np.isfinite(r.val_weighted) else -1e9)))
    if out_csv is not None:
        write_grid_csv(rows, dataset, out_csv)
    return rows


def write_grid_csv(rows: list, dataset: str, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_csv_row(dataset))


def expand_with_shifts(tracks: list, encoder: Encoder, stats: MelStats | None,
                       context_len: int, shifts=tuple(range(-6, 7)),
                       max_shift: float = 6.0) -> list:
    """Featurize pitch-shifted variants of labeled tracks.

    ``tracks`` is a list of (track_id, Waveform, Key).  Each requested
    shift produces one variant whose label is transposed accordingly; the
    unshifted audio passes through untouched.  Intended for the training
    split only; validation and test stay at shift 0.
    """
    out = []
    for track_id, wave, key in tracks:
        for shift in shifts:
            shifted = wave if shift == 0 else pitch_shift(wave, shift, max_shift=max_shift)
            label = transpose_key(key, shift).class_index
            emb = extract_features(shifted, context_len, encoder, stats)
            for w_idx in range(emb.shape[0]):
                out.append(LabeledFeature(emb[w_idx], label, track_id, w_idx, shift))
    return out
