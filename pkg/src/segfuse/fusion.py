"""Transformer fusion of a static and a temporal soft mask, plus the weighted-mean baseline.

Both soft masks are cut into non-overlapping patches. Each modality gets its own
kernel-size-1 conv1d projection to ``token_dim`` and a learned modality
embedding, and fixed sinusoidal codes for (row, col, modality) are added. The
joint sequence runs through pre-norm self-attention blocks, and a linear head
reads the static and temporal tokens of each patch together to predict that
patch's logits.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Tuple

import numpy as np

from segfuse.errors import ConfigError, DomainError, ShapeError
from segfuse.history import TrainingHistory
from segfuse.tensor import (
    Conv1d,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    adam,
    bce_with_logits,
    concat,
    matmul,
    no_grad,
    optimizer_step,
    parameter,
    softmax,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionConfig:
    input_size: int = 256
    token_grid: int = 16
    token_dim: int = 32
    n_heads: int = 2
    n_layers: int = 2
    ffn_mult: int = 2

    def __post_init__(self):
        if min(self.input_size, self.token_grid, self.token_dim, self.n_heads, self.ffn_mult) < 1 or self.n_layers < 0:
            raise ConfigError(f"invalid fusion config {asdict(self)}")
        if self.token_dim % self.n_heads:
            raise ConfigError(f"token_dim {self.token_dim} is not divisible by n_heads {self.n_heads}")
        if self.input_size % self.token_grid:
            raise ConfigError(f"mask size {self.input_size} is not divisible by the {self.token_grid}x{self.token_grid} token grid")
        if self.token_dim < 6:
            raise ConfigError(f"token_dim {self.token_dim} is too small for row/col/modality position codes")

    @classmethod
    def from_dict(cls, data: dict) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        if set(data) - known:
            raise ConfigError(f"unknown fusion config keys: {sorted(set(data) - known)}")
        return cls(**data)

    @property
    def patch(self) -> int:
        return self.input_size // self.token_grid

    @property
    def n_tokens(self) -> int:
        return self.token_grid**2


# -- patches ----------------------------------------------------------------

def to_patches(masks: np.ndarray, grid: int) -> np.ndarray:
    """(B, H, W) -> (B, p*p, grid*grid): one column per patch, row-major over the grid."""
    b, h, w = masks.shape
    if h != w or h % grid:
        raise ConfigError(f"mask size {(h, w)} is not divisible by the {grid}x{grid} token grid")
    p = h // grid
    return masks.reshape(b, grid, p, grid, p).transpose(0, 2, 4, 1, 3).reshape(b, p * p, grid * grid)


def from_patches(t: Tensor, grid: int) -> Tensor:
    """(B, grid*grid, p*p) tensor -> (B, H, W)."""
    b, _, pp = t.shape
    p = int(round(np.sqrt(pp)))
    return t.reshape(b, grid, grid, p, p).transpose(0, 1, 3, 2, 4).reshape(b, grid * p, grid * p)


# -- positional codes -------------------------------------------------------

def _sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    i = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2.0 * i / dim))
    ang = positions[:, None] * freq[None, :]
    out = np.zeros((len(positions), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def position_codes(config: FusionConfig) -> np.ndarray:
    """(2 * n_tokens, token_dim) fixed codes: row, column and modality chunks side by side."""
    d = config.token_dim
    chunk = 2 * (d // 6)
    g = config.token_grid
    rows = np.repeat(np.arange(g), g).astype(np.float64)
    cols = np.tile(np.arange(g), g).astype(np.float64)
    parts = []
    for modality in (0.0, 1.0):
        parts.append(np.concatenate([
            _sinusoid(rows, chunk),
            _sinusoid(cols, chunk),
            _sinusoid(np.full(g * g, modality), d - 2 * chunk),
        ], axis=1))
    return np.concatenate(parts)


def positional_encode(tokens: Tensor, config: FusionConfig) -> Tensor:
    """Add the fixed (row, col, modality) codes to a (..., 2 * n_tokens, token_dim) sequence."""
    codes = position_codes(config)
    if tokens.shape[-2:] != codes.shape:
        raise ShapeError(f"token sequence {tokens.shape} does not match position codes {codes.shape}")
    return tokens + Tensor(codes)


# -- attention --------------------------------------------------------------

class AttentionBlock(Module):
    """Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int, rng: np.random.Generator):
        if d % n_heads:
            raise ShapeError(f"token_dim {d} is not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.norm1 = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.ff1 = Linear(d, ffn_mult * d, rng)
        self.ff2 = Linear(ffn_mult * d, d, rng)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def attend(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Multi-head scaled dot-product self-attention on (B, N, d); returns (output, weights (B, h, N, N))."""
        b, n, d = x.shape
        dh = d // self.n_heads
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        weights = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        mixed = matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.o(mixed), weights

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        if x.ndim != 3 or x.shape[-1] != self.q.weight.shape[0]:
            raise ShapeError(f"attention block expects (B, N, {self.q.weight.shape[0]}) tokens, got {x.shape}")
        attn, weights = self.attend(self.norm1(x))
        x = x + attn
        x = x + self.ff2(self.ff1(self.norm2(x)).relu())
        return x, weights


def self_attention_block(tokens: Tensor, block: AttentionBlock) -> Tuple[Tensor, Tensor]:
    """Apply one block to (N, d) or (B, N, d) tokens; returns (tokens, attention weights)."""
    single = tokens.ndim == 2
    x = tokens.reshape((1,) + tokens.shape) if single else tokens
    out, weights = block(x)
    if single:
        return out.reshape(out.shape[1:]), weights.reshape(weights.shape[1:])
    return out, weights


# -- model ------------------------------------------------------------------

class FusionModel(Module):
    def __init__(self, config: FusionConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, pp = config.token_dim, config.patch**2
        self.embed_static = Conv1d(pp, d, 1, rng)
        self.embed_temporal = Conv1d(pp, d, 1, rng)
        self.modality = parameter(0.02 * rng.standard_normal((2, d)))
        self.blocks = [AttentionBlock(d, config.n_heads, config.ffn_mult, rng) for _ in range(config.n_layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(2 * d, pp, rng)

    def tokenize(self, static: np.ndarray, temporal: np.ndarray) -> Tensor:
        """(B,H,W) soft masks -> (B, 2 * n_tokens, d): static tokens first, then temporal."""
        g = self.config.token_grid
        parts = []
        for masks, embed, m in ((static, self.embed_static, 0), (temporal, self.embed_temporal, 1)):
            cols = Tensor(to_patches(masks, g))
            tok = embed(cols).transpose(0, 2, 1)
            parts.append(tok + self.modality[m])
        return concat(parts, axis=1)

    def forward(self, static: np.ndarray, temporal: np.ndarray) -> Tensor:
        """(B,H,W) or (H,W) soft masks to logits of the same shape."""
        static, temporal = check_pair(static, temporal, self.config)
        single = static.ndim == 2
        if single:
            static, temporal = static[None], temporal[None]
        x = positional_encode(self.tokenize(static, temporal), self.config)
        for block in self.blocks:
            x, _ = block(x)
        x = self.norm(x)
        n = self.config.n_tokens
        joint = concat([x[:, :n], x[:, n:]], axis=-1)
        logits = from_patches(self.head(joint), self.config.token_grid)
        return logits.reshape(logits.shape[1:]) if single else logits

    def attention_maps(self, static: np.ndarray, temporal: np.ndarray) -> List[np.ndarray]:
        static, temporal = check_pair(static, temporal, self.config)
        if static.ndim == 2:
            static, temporal = static[None], temporal[None]
        maps = []
        with no_grad():
            x = positional_encode(self.tokenize(static, temporal), self.config)
            for block in self.blocks:
                x, w = block(x)
                maps.append(w.data)
        return maps

    def topology(self) -> dict:
        return {"kind": "fusion", "config": asdict(self.config)}


def build_fusion(config: FusionConfig, seed: int = 0) -> FusionModel:
    return FusionModel(config, seed)


def check_pair(static, temporal, config: Optional[FusionConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(static, dtype=np.float64)
    t = np.asarray(temporal, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"static prediction {s.shape} and temporal prediction {t.shape} are not aligned")
    if s.ndim not in (2, 3):
        raise ShapeError(f"predictions must be (H, W) or (B, H, W), got {s.shape}")
    if config is not None and s.shape[-2:] != (config.input_size, config.input_size):
        raise ConfigError(f"predictions {s.shape[-2:]} do not match fusion input size {config.input_size}")
    return s, t


def fuse(model: FusionModel, static, temporal) -> np.ndarray:
    """Fused logit map(s) without recording a graph."""
    with no_grad():
        return model(static, temporal).data


def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """The k-th of the 8 square symmetries (k % 4 quarter turns, then a left-right flip if k >= 4) of (..., H, W)."""
    if not 0 <= k < 8:
        raise DomainError(f"dihedral index must lie in [0, 8), got {k}")
    out = np.rot90(a, k % 4, axes=(-2, -1))
    return out[..., ::-1] if k >= 4 else out


def train_fusion(model: FusionModel, static: np.ndarray, temporal: np.ndarray, gt: Optional[np.ndarray],
                 epochs: int = 10, batch_size: int = 4, lr: float = 3e-3, seed: int = 0,
                 augment: bool = False) -> TrainingHistory:
    """Adam on BCE-with-logits between fused logits and ``gt``; one history entry per epoch.

    With ``augment`` every sample of a batch gets an independent random square
    symmetry, applied to its static mask, temporal mask and ground truth alike.
    """
    if gt is None:
        raise ConfigError("fusion training needs ground-truth masks for every pair")
    static, temporal = check_pair(static, temporal, model.config)
    gt = np.asarray(gt, dtype=np.float64)
    if static.ndim != 3 or gt.shape != static.shape:
        raise ShapeError(f"fusion training expects aligned (N, H, W) stacks, got {static.shape} and gt {gt.shape}")
    if len(gt) == 0:
        raise ConfigError("fusion training set is empty")
    if batch_size < 1 or epochs < 0:
        raise ConfigError(f"invalid batch_size {batch_size} / epochs {epochs}")
    history = TrainingHistory(stage="fusion")
    rng = np.random.default_rng(seed)
    params = model.named_parameters()
    state = adam(lr)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(gt))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            s_b, t_b, g_b = static[idx], temporal[idx], gt[idx]
            if augment:
                ks = rng.integers(0, 8, size=len(idx))
                s_b, t_b, g_b = (np.stack([dihedral(a[i], k) for i, k in enumerate(ks)]) for a in (s_b, t_b, g_b))
            loss = bce_with_logits(model(s_b, t_b), g_b)
            loss.backward()
            optimizer_step(state, params)
            total += loss.item() * len(idx)
        entry = {"epoch": epoch, "train_loss": total / len(gt)}
        history.entries.append(entry)
        log.info("fusion epoch %d loss %.4f", epoch, entry["train_loss"])
    if history.entries:
        history.best = dict(min(history.entries, key=lambda e: e["train_loss"]))
    return history


def weighted_mean_baseline(static, temporal, alpha: float = 0.5) -> np.ndarray:
    """alpha * static + (1 - alpha) * temporal, thresholded at 0.5 (ties are foreground)."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    s, t = check_pair(static, temporal)
    return (alpha * s + (1.0 - alpha) * t >= 0.5).astype(np.uint8)
