"""Two-view masked contrastive pretraining with the NT-Xent loss.

Each clip yields one random crop, whose mel tokens are masked twice with
independent seeds; masking is the only augmentation.  Both views pass
through the same encoder and a single linear projector (siamese weight
sharing), and the normalized-temperature cross-entropy loss pulls the two
views of a clip together against every other view in the batch.  The
projector is discarded when the encoder checkpoint is saved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .audio import Waveform
from .encoder import Encoder, EncoderConfig, MelStats, TokenSequence, compute_mel_stats, mask_tokens, patchify
from .errors import DataError, NumericalError
from .mel import MelSpectrogram, mel_spectrogram
from .optim import AdamW, warmup_lr
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    temperature: float = 0.1
    mask_ratio: float = 0.9
    batch_size: int = 16
    steps: int = 1000
    clip_length: int = 100_000
    projector_dim: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    stats_clips: int = 64

    def __post_init__(self):
        if self.temperature <= 0:
            raise DataError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 2:
            raise DataError("contrastive batches need at least 2 clips")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise DataError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "temperature", "mask_ratio", "batch_size", "steps", "clip_length",
            "projector_dim", "lr", "weight_decay", "warmup_steps", "stats_clips")}


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors; rejects zero-norm input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine similarity undefined for zero-norm vectors")
    return float(np.dot(a, b) / (na * nb))


def _partner_matrix(m: int, dtype) -> np.ndarray:
    """One-hot selector of each anchor's positive partner (i XOR 1)."""
    p = np.zeros((m, m), dtype=dtype)
    idx = np.arange(m)
    p[idx, idx ^ 1] = 1.0
    return p


def ntxent_loss(batch, temperature: float) -> Tensor:
    """NT-Xent over a [2N, d] batch ordered (a1, b1, a2, b2, ...).

    For each anchor the positive is its partner view; the denominator runs
    over every other element of the batch.  The log-sum-exp is stabilized
    by detached row-max subtraction, and the result is the mean over all
    2N anchors.
    """
    if temperature <= 0:
        raise DataError(f"temperature must be positive, got {temperature}")
    z = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    if z.data.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2 != 0:
        raise DataError(f"batch must be [2N >= 2, d], got shape {z.shape}")
    m = z.shape[0]
    norms_sq = T.sum_(T.mul(z, z), axis=-1, keepdims=True)
    if np.any(norms_sq.data <= 0.0):
        raise DataError("contrastive batch contains a zero-norm embedding")
    zn = T.div(z, T.sqrt(norms_sq))
    logits = T.mul(T.matmul(zn, T.transpose(zn)), 1.0 / temperature)
    # a large negative diagonal excludes self-similarity from the denominator
    diag_mask = np.zeros((m, m), dtype=z.data.dtype)
    np.fill_diagonal(diag_mask, -1e9)
    logits = T.add(logits, Tensor(diag_mask))
    lse = T.logsumexp(logits, axis=-1)
    positives = T.sum_(T.mul(logits, Tensor(_partner_matrix(m, z.data.dtype))), axis=-1)
    return T.mean_(T.sub(lse, positives))


def positive_pair_cosine(z: np.ndarray) -> float:
    """Mean cosine similarity between the two views of each clip."""
    z = np.asarray(z, dtype=np.float64)
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    return float(np.mean(np.sum(zn[0::2] * zn[1::2], axis=1)))


class Projector:
    """Linear head mapping encoder embeddings into the contrastive space."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.w = Parameter(T.trunc_normal((in_dim, out_dim), std=0.02, rng=rng, dtype=dtype), "projector.w")
        self.b = Parameter(np.zeros(out_dim, dtype=dtype), "projector.b")

    def parameters(self) -> list:
        return [self.w, self.b]

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


def make_views(clip: Waveform, cfg: PretrainConfig, seed: int, stats: MelStats | None = None):
    """One random crop -> mel -> patchify -> two independently masked views."""
    if len(clip) < cfg.clip_length:
        raise DataError(f"clip of {len(clip)} samples is shorter than clip_length {cfg.clip_length}")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, len(clip) - cfg.clip_length + 1))
    crop = Waveform(clip.samples[offset:offset + cfg.clip_length], clip.sample_rate)
    m = mel_spectrogram(crop)
    if stats is not None:
        m = MelSpectrogram(stats.apply(m.data), m.sample_rate, m.hop, m.window)
    ts = patchify(m)
    seed_a, seed_b = rng.integers(0, 2**31 - 1, size=2)
    return mask_tokens(ts, cfg.mask_ratio, int(seed_a)), mask_tokens(ts, cfg.mask_ratio, int(seed_b))


@dataclass
class PretrainResult:
    encoder_state: dict
    stats: MelStats
    curve: list = field(default_factory=list)  # rows of (step, loss, positive-pair cosine)
    status: str = "completed"
    encoder_config: EncoderConfig | None = None
    pretrain_config: PretrainConfig | None = None


def pretrain(corpus, pcfg: PretrainConfig, ecfg: EncoderConfig, seed: int = 0,
             log_every: int = 100) -> PretrainResult:
    """Run masked contrastive pretraining over a corpus of waveforms.

    ``corpus`` is any indexable collection of :class:`Waveform` (supports
    ``len`` and ``__getitem__``), e.g. a lazy WAV-manifest loader.  On a
    non-finite loss the run aborts and returns the last finite parameter
    state with ``status="diverged"``.
    """
    if len(corpus) == 0:
        raise DataError("pretraining corpus is empty")
    rng = np.random.default_rng(seed)
    encoder = Encoder(ecfg, seed=int(rng.integers(2**31)))
    projector = Projector(ecfg.embed_dim, pcfg.projector_dim, seed=int(rng.integers(2**31)))

    n_stats = min(pcfg.stats_clips, len(corpus))
    stats = compute_mel_stats(mel_spectrogram(corpus[i]) for i in range(n_stats))
    log.info("mel normalization stats: mean=%.4f std=%.4f (%d clips)", stats.mean, stats.std, n_stats)

    params = encoder.parameters() + projector.parameters()
    opt = AdamW(params, lr=pcfg.lr, weight_decay=pcfg.weight_decay)
    curve = []
    status = "completed"
    last_good = encoder.state_dict()
    last_good = {k: v.copy() for k, v in last_good.items()}
    for step in range(pcfg.steps):
        replace = len(corpus) < pcfg.batch_size
        clip_ids = rng.choice(len(corpus), size=pcfg.batch_size, replace=replace)
        view_tokens, view_positions = [], []
        for cid in clip_ids:
            va, vb = make_views(corpus[int(cid)], pcfg, seed=int(rng.integers(2**31)), stats=stats)
            view_tokens.extend((va.tokens, vb.tokens))
            view_positions.extend((va.positions, vb.positions))
        tokens = np.stack(view_tokens)
        positions = np.stack(view_positions)
        try:
            emb = encoder.forward(tokens, positions)
            z = projector.forward(emb)
            loss = ntxent_loss(z, pcfg.temperature)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NumericalError("pretraining loss is not finite")
            align = positive_pair_cosine(z.data)
            opt.lr = warmup_lr(step, pcfg.lr, pcfg.warmup_steps)
            loss.backward()
            opt.step()
            opt.zero_grad()
        except NumericalError as err:
            log.error("pretraining diverged at step %d: %s", step, err)
            status = "diverged"
            if not all(np.isfinite(p.data).all() for p in encoder.parameters()):
                encoder.load_state_dict(last_good)
            break
        curve.append((step, loss_val, align))
        if step % 50 == 0:
            last_good = {k: v.copy() for k, v in encoder.state_dict().items()}
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f pos-cos %.4f", step, loss_val, align)
    return PretrainResult(
        encoder_state=encoder.state_dict(),
        stats=stats,
        curve=curve,
        status=status,
        encoder_config=ecfg,
        pretrain_config=pcfg,
    )
