"""Supervised per-frame segmentation with a small encoder-decoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from segfuse.errors import ConfigError, DomainError, ShapeError
from segfuse.history import TrainingHistory
from segfuse.metrics import iou
from segfuse.tensor import (
    Conv2d,
    Module,
    Tensor,
    adam,
    bce_with_logits,
    concat,
    no_grad,
    optimizer_step,
    upsample_nearest,
)
from segfuse.tensor.tensor import _sigmoid_np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegNetConfig:
    base_channels: int = 16
    depth: int = 3
    skip_connections: bool = True
    input_size: int = 256

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1:
            raise ConfigError(f"base_channels and depth must be positive, got {self.base_channels}, {self.depth}")
        if self.input_size % (2**self.depth):
            raise ConfigError(f"input_size {self.input_size} is not divisible by 2^depth = {2 ** self.depth}")

    @classmethod
    def from_dict(cls, data: dict) -> "SegNetConfig":
        known = {f.name for f in fields(cls)}
        if set(data) - known:
            raise ConfigError(f"unknown segnet config keys: {sorted(set(data) - known)}")
        return cls(**data)

    def level_channels(self) -> List[int]:
        return [self.base_channels * min(2**i, 4) for i in range(self.depth + 1)]


def frames_to_input(frames: np.ndarray) -> np.ndarray:
    """uint8 (..., H, W, 3) frames to centred float (..., 3, H, W) network input."""
    x = np.asarray(frames, dtype=np.float64) / 255.0 - 0.5
    return np.moveaxis(x, -1, -3)


class SegModel(Module):
    """Encoder of stride-2 convolutions, mirrored decoder of nearest upsampling + conv."""

    def __init__(self, config: SegNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.level_channels()
        self.stem = Conv2d(3, ch[0], 3, rng)
        self.down = [Conv2d(ch[i], ch[i + 1], 3, rng, stride=2) for i in range(config.depth)]
        self.decoder_in_channels = [
            ch[i + 1] + (ch[i] if config.skip_connections else 0) for i in reversed(range(config.depth))
        ]
        self.up = [Conv2d(c_in, ch[i], 3, rng) for c_in, i in zip(self.decoder_in_channels, reversed(range(config.depth)))]
        self.head = Conv2d(ch[0], 1, 1, rng)

    def bottleneck_size(self) -> int:
        return self.config.input_size // 2**self.config.depth

    def forward(self, x: Tensor) -> Tensor:
        """(N,3,H,W) or (3,H,W) input to (N,H,W) or (H,W) logits."""
        size = self.config.input_size
        if x.shape[-3:] != (3, size, size):
            raise ShapeError(f"segnet expects input (..., 3, {size}, {size}), got {x.shape}")
        h = self.stem(x).relu()
        skips = [h]
        for conv in self.down:
            h = conv(h).relu()
            skips.append(h)
        for conv, skip in zip(self.up, reversed(skips[:-1])):
            h = upsample_nearest(h, 2)
            if self.config.skip_connections:
                h = concat([h, skip], axis=-3)
            h = conv(h).relu()
        out = self.head(h)
        return out.reshape(out.shape[:-3] + out.shape[-2:])

    def topology(self) -> dict:
        return {"kind": "segnet", "config": asdict(self.config)}


def build_segnet(config: SegNetConfig, seed: int = 0) -> SegModel:
    return SegModel(config, seed)


def forward_segment(model: SegModel, frame: np.ndarray) -> Tensor:
    """Logit map for one uint8 (H, W, 3) frame."""
    frame = np.asarray(frame)
    size = model.config.input_size
    if frame.shape != (size, size, 3):
        raise ShapeError(f"frame shape {frame.shape} does not match segnet input ({size}, {size}, 3)")
    return model(Tensor(frames_to_input(frame)))


def predict_logits(model: SegModel, frames: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Logits for a stack of frames, no gradient graph."""
    frames = np.asarray(frames)
    single = frames.ndim == 3
    if single:
        frames = frames[None]
    size = model.config.input_size
    if frames.shape[1:] != (size, size, 3):
        raise ShapeError(f"frames {frames.shape[1:]} do not match segnet input ({size}, {size}, 3)")
    out = []
    with no_grad():
        for i in range(0, len(frames), chunk):
            out.append(model(Tensor(frames_to_input(frames[i : i + chunk]))).data)
    logits = np.concatenate(out)
    return logits[0] if single else logits


def predict_soft(model: SegModel, frames: np.ndarray) -> np.ndarray:
    return _sigmoid_np(predict_logits(model, frames))


def threshold_logits(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {threshold}")
    return (_sigmoid_np(np.asarray(logits, dtype=np.float64)) >= threshold).astype(np.uint8)


def predict_mask(model: SegModel, frame: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary mask: 1 where sigmoid(logit) >= threshold (ties are foreground)."""
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {threshold}")
    return threshold_logits(predict_logits(model, frame), threshold)


def mean_iou(model: SegModel, frames: np.ndarray, masks: np.ndarray) -> float:
    preds = threshold_logits(predict_logits(model, frames))
    return float(np.mean([iou(p, m) for p, m in zip(preds, masks)]))


def train_segnet(model: SegModel, train: Tuple[np.ndarray, np.ndarray],
                 val: Optional[Tuple[np.ndarray, np.ndarray]] = None, epochs: int = 20,
                 batch_size: int = 8, lr: float = 1e-3, seed: int = 0) -> TrainingHistory:
    """Minimise BCE-with-logits with Adam; keep the parameters of the best validation epoch.

    ``train`` and ``val`` are (frames uint8 (N,H,W,3), masks (N,H,W) in {0,1}).
    """
    frames, masks = train
    if len(frames) == 0:
        raise ConfigError("segnet training set is empty")
    if len(frames) != len(masks):
        raise ConfigError(f"{len(frames)} training frames but {len(masks)} masks")
    if batch_size < 1 or epochs < 0:
        raise ConfigError(f"invalid batch_size {batch_size} / epochs {epochs}")
    history = TrainingHistory(stage="seg")
    if epochs == 0:
        return history
    rng = np.random.default_rng(seed)
    x_all = frames_to_input(frames)
    y_all = np.asarray(masks, dtype=np.float64)
    params = model.named_parameters()
    state = adam(lr)
    best_score, best_state = -np.inf, None
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(frames))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss = bce_with_logits(model(Tensor(x_all[idx])), y_all[idx])
            loss.backward()
            optimizer_step(state, params)
            total += loss.item() * len(idx)
        entry = {"epoch": epoch, "train_loss": total / len(frames)}
        score = entry["train_loss"] * -1.0
        if val is not None and len(val[0]):
            entry["val_iou"] = mean_iou(model, *val)
            score = entry["val_iou"]
        if score > best_score:
            best_score, best_state = score, model.state_dict()
            history.best = dict(entry)
        history.entries.append(entry)
        log.info("seg epoch %d loss %.4f val_iou %s", epoch, entry["train_loss"], entry.get("val_iou"))
    model.load_state_dict(best_state)
    return history
