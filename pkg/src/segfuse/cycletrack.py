"""Unsupervised temporal correspondence learned by cycle-consistent patch tracking.

A small fully convolutional encoder maps every frame to a feature grid. A patch
taken from the last frame of a window is tracked backward to the first frame and
forward again; the distance between where it started and where it came back is
the training signal. At inference the same affinities carry a first-frame mask
through the rest of the clip.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import zoom

from segfuse.errors import ConfigError, ShapeError
from segfuse.history import TrainingHistory
from segfuse.segnet import frames_to_input
from segfuse.tensor import (
    Conv2d,
    Linear,
    Module,
    Tensor,
    conv2d,
    crop_bilinear,
    l2_normalize,
    matmul,
    no_grad,
    optimizer_step,
    relu,
    sgd,
    softmax,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CycleConfig:
    input_size: int = 256
    channels: int = 32
    depth: int = 3
    patch_size: int = 80
    cycle_len: int = 4
    temperature: float = 0.07
    placement_temperature: float = 0.01
    top_k: int = 5
    localizer_channels: int = 8
    refine_layers: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.depth < 0 or self.localizer_channels < 1 or self.refine_layers < 0:
            raise ConfigError(f"invalid cycle encoder shape: channels {self.channels}, depth {self.depth}")
        s = self.stride
        if self.input_size % s or self.patch_size % s:
            raise ConfigError(f"input_size {self.input_size} and patch_size {self.patch_size} must be multiples of stride {s}")
        if not 0 < self.patch_size <= self.input_size:
            raise ConfigError(f"patch_size {self.patch_size} must lie in (0, {self.input_size}]")
        if self.cycle_len < 0:
            raise ConfigError(f"cycle_len must be non-negative, got {self.cycle_len}")
        if not (self.temperature > 0 and self.placement_temperature > 0):
            raise ConfigError(f"temperatures must be positive, got {self.temperature}, {self.placement_temperature}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be at least 1, got {self.top_k}")

    @classmethod
    def from_dict(cls, data: dict) -> "CycleConfig":
        known = {f.name for f in fields(cls)}
        if set(data) - known:
            raise ConfigError(f"unknown cycle config keys: {sorted(set(data) - known)}")
        return cls(**data)

    @property
    def stride(self) -> int:
        return 2**self.depth

    @property
    def grid_size(self) -> int:
        return self.input_size // self.stride

    @property
    def patch_cells(self) -> int:
        return self.patch_size // self.stride


class CycleModel(Module):
    """Shared conv encoder plus a localizer head that reads affinity maps."""

    def __init__(self, config: CycleConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.channels
        self.stem = Conv2d(3, c, 3, rng)
        self.down = [Conv2d(c, c, 3, rng, stride=2) for _ in range(config.depth)]
        self.refine = [Conv2d(c, c, 3, rng) for _ in range(config.refine_layers)]
        self.proj = Conv2d(c, c, 1, rng)
        n_cells = config.patch_cells**2
        self.loc_conv = Conv2d(n_cells, config.localizer_channels, 3, rng)
        self.loc_out = Linear(config.localizer_channels, 2, rng)
        # start from the pure soft-argmax estimate; the head learns a correction
        self.loc_out.weight.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        """(N,3,H,W) or (3,H,W) input to (N,C,h,w) or (C,h,w) features."""
        size = self.config.input_size
        if x.shape[-3:] != (3, size, size):
            raise ShapeError(f"cycle encoder expects input (..., 3, {size}, {size}), got {x.shape}")
        h = self.stem(x).relu()
        for conv in self.down + self.refine:
            h = conv(h).relu()
        h = self.proj(h)
        # per-frame channel centring: cosine affinities then spread over [-1, 1] instead of
        # bunching near 1, and a constant feature map cannot satisfy the similarity term
        return center_channels(h)

    def localize(self, aff_map: Tensor) -> Tensor:
        """(n_patch_cells, h, w) affinity map to a 2-vector (dx, dy) in feature cells."""
        h = self.loc_conv(aff_map).relu()
        pooled = h.mean(axis=(1, 2))
        return self.loc_out(pooled.reshape(1, -1)).reshape(2)

    def topology(self) -> dict:
        return {"kind": "cycle", "config": asdict(self.config)}


def center_channels(h: Tensor) -> Tensor:
    """Subtract each channel's spatial mean from (C,h,w) or (N,C,h,w) features."""
    lead = h.ndim - 2
    moved = h.transpose(tuple(range(lead, h.ndim)) + tuple(range(lead)))
    centred = moved - moved.mean(axis=(0, 1))
    back = tuple(range(2, h.ndim)) + (0, 1)
    return centred.transpose(back)


def build_cycle(config: CycleConfig, seed: int = 0) -> CycleModel:
    return CycleModel(config, seed)


def encode_features(model: CycleModel, images: np.ndarray) -> Tensor:
    """Feature grid(s) for uint8 (H,W,3) or (N,H,W,3) images."""
    images = np.asarray(images)
    size = model.config.input_size
    if images.shape[-3:] != (size, size, 3):
        raise ShapeError(f"image shape {images.shape} does not match cycle encoder input ({size}, {size}, 3)")
    return model(Tensor(frames_to_input(images)))


def unit_cells(grid: Tensor) -> Tensor:
    """(C, h, w) or (C, N) features to (C, N) with every cell scaled to unit length."""
    return l2_normalize(grid.reshape(grid.shape[0], -1), axis=0)


def affinity(query: Tensor, reference: Tensor, temperature: float = 0.07) -> Tensor:
    """Row-stochastic (Nq, Nr) weights between two (C, h, w) or (C, N) feature grids."""
    if query.shape[0] != reference.shape[0]:
        raise ShapeError(f"affinity channel mismatch: query {query.shape}, reference {reference.shape}")
    return softmax(matmul(unit_cells(query).T, unit_cells(reference)), axis=-1, temperature=temperature)


def cell_centers(grid_h: int, grid_w: int, stride: int) -> np.ndarray:
    """(h*w, 2) pixel coordinates (x, y) of feature cell centres, row-major."""
    ys, xs = np.mgrid[0:grid_h, 0:grid_w]
    return np.stack([(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride], axis=1).astype(np.float64)


@dataclass
class PatchTrack:
    frame: int
    center: Tensor  # (2,) pixel coordinates (x, y)
    patch_size: int
    clamped: bool = False


def center_bounds(config: CycleConfig) -> Tuple[float, float]:
    half = config.patch_size / 2.0
    return half, config.input_size - half


def clamp_center(center: Tensor, config: CycleConfig) -> Tuple[Tensor, bool]:
    """Keep the patch inside the frame; clamped coordinates stop passing gradient."""
    lo, hi = center_bounds(config)
    inside = (center.data >= lo) & (center.data <= hi)
    if inside.all():
        return center, False
    fixed = np.clip(center.data, lo, hi)
    return center * Tensor(inside.astype(np.float64)) + Tensor(np.where(inside, 0.0, fixed)), True


def patch_features(features: Tensor, center: Tensor, config: CycleConfig) -> Tensor:
    """Bilinear crop of the patch centred at ``center`` from (C, h, w) features."""
    s, n = config.stride, config.patch_cells
    corner = (center - config.patch_size / 2.0) * (1.0 / s)
    return crop_bilinear(features, corner[1], corner[0], n, n)


def placement_centers(grid_h: int, grid_w: int, patch_cells: int, stride: int) -> np.ndarray:
    """(P, 2) pixel centres (x, y) of every patch placement that fits in the grid, row-major."""
    n_y, n_x = grid_h - patch_cells + 1, grid_w - patch_cells + 1
    return cell_centers(n_y, n_x, stride) + (patch_cells - 1) * stride / 2.0


def track_step(model: CycleModel, patch: Tensor, target: Tensor) -> Tuple[Tensor, Tensor, bool]:
    """Locate a (C, n, n) patch in (C, h, w) target features.

    Returns (new centre, affinity, clamped). Every placement of the patch in the
    target is scored by the mean cosine affinity along that displacement (the
    patch template correlated with the target grid). The centre is the
    soft-argmax of those scores at ``placement_temperature``, plus the
    localizer's translation read from the row-softmax affinity map.
    """
    cfg = model.config
    c, gh, gw = target.shape
    n = patch.shape[-1]
    if patch.shape != (c, n, n) or n > min(gh, gw):
        raise ShapeError(f"patch features {patch.shape} do not fit target features {target.shape}")
    q, r = unit_cells(patch), unit_cells(target)
    aff = softmax(matmul(q.T, r), axis=-1, temperature=cfg.temperature)
    scores = conv2d(r.reshape(c, gh, gw), q.reshape(1, c, n, n)) * (1.0 / (n * n))
    # placement scores average n*n cosines, so neighbouring placements differ far less than
    # single cells do; they get their own, sharper temperature
    weights = softmax(scores.reshape(1, -1), axis=-1, temperature=cfg.placement_temperature)
    coords = Tensor(placement_centers(gh, gw, n, cfg.stride))
    soft_argmax = matmul(weights, coords).reshape(2)
    offset = model.localize(aff.reshape(n * n, gh, gw)) * float(cfg.stride)
    center, clamped = clamp_center(soft_argmax + offset, cfg)
    return center, aff, clamped


def _check_window(window: np.ndarray, cycle_len: int) -> None:
    if cycle_len < 0:
        raise ConfigError(f"cycle_len must be non-negative, got {cycle_len}")
    if len(window) < cycle_len + 1:
        raise ConfigError(f"window of {len(window)} frames is too short for cycle_len {cycle_len}")


def run_cycle(model: CycleModel, window: np.ndarray, center: Sequence[float],
              cycle_len: Optional[int] = None) -> Tuple[List[PatchTrack], Tensor, Tensor]:
    """Track the patch at ``center`` in the last window frame back ``cycle_len`` frames and forward again.

    Returns (track, start patch features, end patch features). ``track[0]`` is
    the start and ``track[-1]`` the return to the last frame.
    """
    cfg = model.config
    cycle_len = cfg.cycle_len if cycle_len is None else cycle_len
    window = np.asarray(window)
    _check_window(window, cycle_len)
    window = window[len(window) - cycle_len - 1 :]
    c0 = Tensor(np.asarray(center, dtype=np.float64))
    lo, hi = center_bounds(cfg)
    if c0.shape != (2,) or np.any(c0.data < lo) or np.any(c0.data > hi):
        raise ShapeError(f"start centre {tuple(c0.data)} puts the patch outside the frame")
    feats = encode_features(model, window)
    p0 = patch_features(feats[cycle_len], c0, cfg)
    track = [PatchTrack(cycle_len, c0, cfg.patch_size)]
    p = p0
    for t in list(range(cycle_len - 1, -1, -1)) + list(range(1, cycle_len + 1)):
        c, _, clamped = track_step(model, p, feats[t])
        track.append(PatchTrack(t, c, cfg.patch_size, clamped))
        p = patch_features(feats[t], c, cfg)
    return track, p0, p


def cycle_loss(model: CycleModel, window: np.ndarray, center: Sequence[float], cycle_len: Optional[int] = None) -> Tensor:
    """Return error of one backward-forward cycle.

    Loss = |c_end - c_start|^2 / patch_size^2 + max(0, 1 - cos(start patch, end patch)).
    """
    cycle_len = model.config.cycle_len if cycle_len is None else cycle_len
    _check_window(np.asarray(window), cycle_len)
    if cycle_len == 0:
        return Tensor(0.0)
    track, p0, p_end = run_cycle(model, window, center, cycle_len)
    d = track[-1].center - track[0].center
    position = (d * d).sum() * (1.0 / model.config.patch_size**2)
    a, b = l2_normalize(p0.reshape(-1)), l2_normalize(p_end.reshape(-1))
    similarity = relu(1.0 - (a * b).sum())
    return position + similarity


def sample_window(rng: np.random.Generator, clips: Sequence[np.ndarray], config: CycleConfig,
                  cycle_len: int) -> Tuple[np.ndarray, np.ndarray]:
    clip = clips[rng.integers(len(clips))]
    start = rng.integers(0, len(clip) - cycle_len)
    lo, hi = center_bounds(config)
    center = rng.uniform(lo, hi, size=2)
    return clip[start : start + cycle_len + 1], center


def train_cycle(model: CycleModel, clips: Sequence[np.ndarray], steps: int = 500, lr: float = 2e-4,
                momentum: float = 0.0, windows_per_step: int = 2, smooth_window: int = 50,
                seed: int = 0, clip_norm: Optional[float] = None) -> TrainingHistory:
    """SGD (optionally heavy-ball) on the cycle loss over randomly sampled windows and patch positions.

    ``clips`` are uint8 (T,H,W,3) frame stacks. Each history entry carries the
    step loss, the mean of the last ``smooth_window`` step losses and the global
    gradient norm before any ``clip_norm`` rescaling.
    """
    cfg = model.config
    if not clips:
        raise ConfigError("cycle training needs at least one unlabelled clip")
    if steps < 0 or windows_per_step < 1 or smooth_window < 1:
        raise ConfigError(f"invalid steps {steps} / windows_per_step {windows_per_step} / smooth_window {smooth_window}")
    short = [i for i, c in enumerate(clips) if len(c) < cfg.cycle_len + 1]
    if short:
        raise ConfigError(f"clips {short} are shorter than cycle_len + 1 = {cfg.cycle_len + 1} frames")
    history = TrainingHistory(stage="cycle")
    rng = np.random.default_rng(seed)
    params = model.named_parameters()
    state = sgd(lr, momentum, clip_norm)
    recent: List[float] = []
    for step in range(1, steps + 1):
        total = None
        for _ in range(windows_per_step):
            window, center = sample_window(rng, clips, cfg, cfg.cycle_len)
            loss = cycle_loss(model, window, center)
            total = loss if total is None else total + loss
        total = total * (1.0 / windows_per_step)
        if cfg.cycle_len > 0:
            total.backward()
            optimizer_step(state, params)
        value = total.item()
        recent = (recent + [value])[-smooth_window:]
        entry = {"step": step, "loss": value, "smoothed_loss": float(np.mean(recent)),
                 "grad_norm": state.last_grad_norm}
        history.entries.append(entry)
        if step % 50 == 0:
            log.info("cycle step %d loss %.4f smoothed %.4f", step, value, entry["smoothed_loss"])
    if history.entries:
        history.best = dict(min(history.entries, key=lambda e: e["smoothed_loss"]))
    return history


def pool_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Average a (H, W) mask over stride x stride blocks."""
    h, w = mask.shape
    return np.asarray(mask, dtype=np.float64).reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))


def upsample_bilinear(grid: np.ndarray, stride: int) -> np.ndarray:
    """Cell-centred bilinear upsampling; edges hold the border cell value."""
    return np.clip(zoom(grid, stride, order=1, mode="nearest", grid_mode=True), 0.0, 1.0)


def top_k_weights(logits: np.ndarray, k: int) -> np.ndarray:
    """Row softmax restricted to each row's ``k`` largest logits."""
    if k < logits.shape[1]:
        cut = np.partition(logits, -k, axis=1)[:, -k][:, None]
        logits = np.where(logits >= cut, logits, -np.inf)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def propagate_labels(model: CycleModel, first_mask: np.ndarray, frames: np.ndarray,
                     top_k: Optional[int] = None) -> np.ndarray:
    """Carry a first-frame mask through ``frames``; returns (T, H, W) soft masks in [0, 1].

    Frame t reads labels from frame 0 and frame t-1 through top-k affinities.
    Frame 0 of the output is ``first_mask`` itself.
    """
    cfg = model.config
    frames = np.asarray(frames)
    first = np.asarray(first_mask, dtype=np.float64)
    if first.shape != frames.shape[1:3]:
        raise ShapeError(f"first mask {first.shape} does not match frames {frames.shape[1:3]}")
    k = cfg.top_k if top_k is None else top_k
    if k < 1:
        raise ConfigError(f"top_k must be at least 1, got {k}")
    s = cfg.stride
    with no_grad():
        feats = np.concatenate([encode_features(model, frames[i : i + 8]).data for i in range(0, len(frames), 8)])
    c, gh, gw = feats.shape[1:]
    flat = feats.reshape(len(frames), c, gh * gw)
    norm = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
    flat = flat / np.maximum(norm, 1e-8)
    labels = [pool_mask(first, s).ravel()]
    out = np.empty(frames.shape[:3], dtype=np.float64)
    out[0] = first
    for t in range(1, len(frames)):
        refs = [0] if t == 1 else [0, t - 1]
        ref_feat = np.concatenate([flat[r] for r in refs], axis=1)
        ref_lab = np.concatenate([labels[r] for r in refs])
        weights = top_k_weights(flat[t].T @ ref_feat / cfg.temperature, k)
        labels.append(np.clip(weights @ ref_lab, 0.0, 1.0))
        out[t] = upsample_bilinear(labels[t].reshape(gh, gw), s)
    return out
