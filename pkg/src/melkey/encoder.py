"""Vertical-patch transformer encoder over log-mel spectrograms.

Spectrograms are cut into vertical patches: each token stacks all 128 mel
bands over two consecutive frames (256 values).  Token masking drops a
random subset of tokens outright, shortening the sequence, while every
surviving token keeps its original time index, which feeds a fixed 1-D
sinusoidal positional encoding.  The encoder itself is a pre-norm
transformer (attention + MLP blocks) whose mean-pooled output is a
384-dim embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .audio import Waveform
from .errors import DataError
from .mel import MelSpectrogram, mel_spectrogram
from .tensor import Parameter, Tensor

EMBED_DIM = 384
PATCH_FRAMES = 2
PATCH_BANDS = 128


@dataclass
class EncoderConfig:
    embed_dim: int = EMBED_DIM
    depth: int = 4
    heads: int = 6
    mlp_dim: int | None = None
    n_mels: int = PATCH_BANDS
    patch_frames: int = PATCH_FRAMES
    mask_ratio: float = 0.9

    def __post_init__(self):
        if self.mlp_dim is None:
            self.mlp_dim = 4 * self.embed_dim
        if self.embed_dim % self.heads != 0:
            raise DataError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise DataError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.depth < 0:
            raise DataError("depth must be nonnegative")

    @property
    def token_dim(self) -> int:
        return self.n_mels * self.patch_frames

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_dim": self.mlp_dim,
            "n_mels": self.n_mels,
            "patch_frames": self.patch_frames,
            "mask_ratio": self.mask_ratio,
        }


@dataclass
class TokenSequence:
    """Patch tokens plus the original time index of each one."""

    tokens: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DataError(f"token matrix must be [n>=1, dim], got {self.tokens.shape}")
        if self.positions.shape != (self.tokens.shape[0],):
            raise DataError("positions must align one-to-one with tokens")
        if np.any(np.diff(self.positions) <= 0):
            raise DataError("token positions must be strictly increasing")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class MelStats:
    """Corpus-level normalization of log-mel values."""

    mean: float = 0.0
    std: float = 1.0

    def apply(self, mel_data: np.ndarray) -> np.ndarray:
        return (mel_data - self.mean) / self.std


def compute_mel_stats(mels) -> MelStats:
    """Pooled mean/std of log-mel values over an iterable of spectrograms."""
    total, total_sq, count = 0.0, 0.0, 0
    for m in mels:
        data = m.data if isinstance(m, MelSpectrogram) else np.asarray(m)
        total += float(data.sum())
        total_sq += float(np.square(data, dtype=np.float64).sum())
        count += data.size
    if count == 0:
        raise DataError("cannot compute normalization stats from an empty corpus")
    mean = total / count
    var = max(total_sq / count - mean * mean, 1e-12)
    return MelStats(mean=mean, std=math.sqrt(var))


def patchify(m: MelSpectrogram) -> TokenSequence:
    """Cut a [128 x n_frames] spectrogram into vertical 2-frame tokens.

    Token t stacks columns 2t and 2t+1; a trailing odd frame is dropped.
    """
    if m.n_mels != PATCH_BANDS:
        raise DataError(f"patchify expects {PATCH_BANDS} mel bands, got {m.n_mels}")
    if m.n_frames < PATCH_FRAMES:
        raise DataError(f"need at least {PATCH_FRAMES} frames, got {m.n_frames}")
    n_tokens = m.n_frames // PATCH_FRAMES
    cols = m.data[:, : n_tokens * PATCH_FRAMES]
    # [bands, tokens, 2] -> [tokens, 2, bands] -> [tokens, 256] with column
    # 2t stacked before column 2t+1
    tokens = cols.reshape(PATCH_BANDS, n_tokens, PATCH_FRAMES).transpose(1, 2, 0).reshape(n_tokens, -1)
    return TokenSequence(tokens.astype(np.float32), np.arange(n_tokens))


def mask_tokens(ts: TokenSequence, mask_ratio: float, seed: int) -> TokenSequence:
    """Keep ceil((1-ratio)*n) uniformly chosen tokens, preserving order.

    Masked tokens are removed from the sequence entirely; survivors keep
    their original positions, so absolute timing is preserved.
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise DataError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    if mask_ratio == 0.0:
        return ts
    n = ts.n_tokens
    keep = math.ceil((1.0 - mask_ratio) * n)
    if keep < 1:
        raise DataError("masking would drop every token")
    rng = np.random.default_rng(seed)
    survivors = np.sort(rng.choice(n, size=keep, replace=False))
    return TokenSequence(ts.tokens[survivors], ts.positions[survivors])


def sincos_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed 1-D sinusoidal encoding evaluated at integer positions."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = positions[..., None] * freqs
    enc = np.empty(positions.shape + (dim,), dtype=np.float32)
    enc[..., 0::2] = np.sin(angles)
    enc[..., 1::2] = np.cos(angles)
    return enc


def _linear_params(rng, n_in, n_out, prefix, dtype=np.float32):
    w = Parameter(T.trunc_normal((n_in, n_out), std=0.02, rng=rng, dtype=dtype), f"{prefix}.w")
    b = Parameter(np.zeros(n_out, dtype=dtype), f"{prefix}.b")
    return w, b


def _norm_params(dim, prefix, dtype=np.float32):
    g = Parameter(np.ones(dim, dtype=dtype), f"{prefix}.g")
    b = Parameter(np.zeros(dim, dtype=dtype), f"{prefix}.b")
    return g, b


class Encoder:
    """Pre-norm transformer over vertical patch tokens."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, mlp = cfg.embed_dim, cfg.mlp_dim
        self.patch_w, self.patch_b = _linear_params(rng, cfg.token_dim, d, "patch_embed", dtype)
        self.blocks = []
        for i in range(cfg.depth):
            blk = {
                "ln1": _norm_params(d, f"block{i}.ln1", dtype),
                "wq": _linear_params(rng, d, d, f"block{i}.attn.q", dtype),
                "wk": _linear_params(rng, d, d, f"block{i}.attn.k", dtype),
                "wv": _linear_params(rng, d, d, f"block{i}.attn.v", dtype),
                "wo": _linear_params(rng, d, d, f"block{i}.attn.out", dtype),
                "ln2": _norm_params(d, f"block{i}.ln2", dtype),
                "w1": _linear_params(rng, d, mlp, f"block{i}.mlp.fc1", dtype),
                "w2": _linear_params(rng, mlp, d, f"block{i}.mlp.fc2", dtype),
            }
            self.blocks.append(blk)
        self.final_ln = _norm_params(d, "final_ln", dtype)

    def parameters(self) -> list:
        params = [self.patch_w, self.patch_b]
        for blk in self.blocks:
            for pair in blk.values():
                params.extend(pair)
        params.extend(self.final_ln)
        return params

    def state_dict(self) -> dict:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise DataError(f"checkpoint is missing tensor {p.name!r}")
            src = np.asarray(state[p.name])
            if src.shape != p.data.shape:
                raise DataError(
                    f"shape mismatch for {p.name!r}: checkpoint {src.shape} vs model {p.data.shape}"
                )
            p.data = src.astype(p.data.dtype)

    def forward(self, tokens: np.ndarray, positions: np.ndarray) -> Tensor:
        """Encode a [B, n, token_dim] batch into [B, embed_dim] embeddings."""
        tokens = np.asarray(tokens, dtype=self.patch_w.data.dtype)
        if tokens.ndim == 2:
            tokens = tokens[None]
            positions = np.asarray(positions)[None]
        if tokens.shape[-1] != self.cfg.token_dim:
            raise DataError(
                f"token dim {tokens.shape[-1]} does not match encoder input {self.cfg.token_dim}"
            )
        b, n, _ = tokens.shape
        heads, d = self.cfg.heads, self.cfg.embed_dim
        head_dim = d // heads

        x = T.add(T.matmul(Tensor(tokens), self.patch_w), self.patch_b)
        pe = sincos_encoding(positions, d).astype(tokens.dtype)
        x = T.add(x, Tensor(pe))
        for blk in self.blocks:
            h = T.layer_norm(x, *blk["ln1"])
            q = self._heads(T.add(T.matmul(h, blk["wq"][0]), blk["wq"][1]), b, n, heads, head_dim)
            k = self._heads(T.add(T.matmul(h, blk["wk"][0]), blk["wk"][1]), b, n, heads, head_dim)
            v = self._heads(T.add(T.matmul(h, blk["wv"][0]), blk["wv"][1]), b, n, heads, head_dim)
            att = T.scaled_dot_attention(q, k, v)
            att = T.reshape(T.swapaxes(att, 1, 2), (b, n, d))
            x = T.add(x, T.add(T.matmul(att, blk["wo"][0]), blk["wo"][1]))
            h2 = T.layer_norm(x, *blk["ln2"])
            hidden = T.gelu(T.add(T.matmul(h2, blk["w1"][0]), blk["w1"][1]))
            x = T.add(x, T.add(T.matmul(hidden, blk["w2"][0]), blk["w2"][1]))
        x = T.layer_norm(x, *self.final_ln)
        return T.mean_pool(x, axis=-2)

    @staticmethod
    def _heads(t: Tensor, b: int, n: int, heads: int, head_dim: int) -> Tensor:
        return T.swapaxes(T.reshape(t, (b, n, heads, head_dim)), 1, 2)

    def encode_sequence(self, ts: TokenSequence) -> np.ndarray:
        """Eval-mode embedding of a single token sequence."""
        with T.no_grad():
            out = self.forward(ts.tokens[None], ts.positions[None])
        return out.data[0].copy()


def window_bounds(n_samples: int, context_len: int) -> list:
    """Non-overlapping windows; a tail is kept iff it spans >= half a window."""
    if n_samples < context_len:
        raise DataError(f"waveform of {n_samples} samples is shorter than context {context_len}")
    bounds = [(s, s + context_len) for s in range(0, n_samples - context_len + 1, context_len)]
    tail_start = len(bounds) * context_len
    tail = n_samples - tail_start
    if tail * 2 >= context_len and tail > 0:
        bounds.append((tail_start, n_samples))
    return bounds


def extract_features(
    w: Waveform,
    context_len: int,
    encoder: Encoder,
    stats: MelStats | None = None,
    batch_size: int = 128,
) -> np.ndarray:
    """Embed non-overlapping ``context_len``-sample windows of a clip.

    The final partial window is zero-padded and kept when it covers at
    least half the context, otherwise dropped.  Runs the encoder in eval
    mode with no masking; returns a [n_windows, embed_dim] float32 matrix.
    """
    bounds = window_bounds(len(w), context_len)
    sequences = []
    for start, end in bounds:
        chunk = w.samples[start:end]
        if len(chunk) < context_len:
            chunk = np.pad(chunk, (0, context_len - len(chunk)))
        m = mel_spectrogram(Waveform(chunk, w.sample_rate))
        if stats is not None:
            m = MelSpectrogram(stats.apply(m.data), m.sample_rate, m.hop, m.window)
        sequences.append(patchify(m))
    tokens = np.stack([s.tokens for s in sequences])
    positions = np.stack([s.positions for s in sequences])
    out = np.empty((len(sequences), encoder.cfg.embed_dim), dtype=np.float32)
    with T.no_grad():
        for lo in range(0, len(sequences), batch_size):
            hi = min(lo + batch_size, len(sequences))
            out[lo:hi] = encoder.forward(tokens[lo:hi], positions[lo:hi]).data
    return out
