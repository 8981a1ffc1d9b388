"""Deterministic synthetic orchard videos with visible-region fruit masks.

Fruits are shaded disks that drift along smooth sinusoidal paths over a
textured green background; dark leaves sway in front of them. Masks mark the
fruit pixels that remain visible after the leaves are drawn.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from segfuse import imageio
from segfuse.errors import ConfigError, DataIOError, MissingArtifactError

SPLITS = ("train", "val", "unlabelled", "test")
LABELLED_SPLITS = ("train", "val", "test")

# Full-scale split sizes; generate_dataset callers usually divide these down.
FULL_SCALE_COUNTS = {"train": 1200, "val": 313, "unlabelled": 240, "test": 20}

_UNRIPE = np.array([0.55, 0.66, 0.16])
_RIPE = np.array([0.96, 0.55, 0.07])
_LEAF = np.array([0.07, 0.24, 0.06])


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 256
    n_fruits: Tuple[int, int] = (1, 6)
    fruit_radius: Tuple[float, float] = (14.0, 30.0)
    occluder_density: float = 0.3
    motion_amplitude: float = 3.0
    lighting_drift: float = 0.1
    clip_length: int = 30
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_fruits", tuple(int(v) for v in self.n_fruits))
        object.__setattr__(self, "fruit_radius", tuple(float(v) for v in self.fruit_radius))
        self.validate()

    def validate(self) -> None:
        lo, hi = self.n_fruits
        if lo < 1 or hi < lo:
            raise ConfigError(f"n_fruits must be a non-empty range with minimum >= 1, got {self.n_fruits}")
        rlo, rhi = self.fruit_radius
        if rlo <= 0 or rhi < rlo:
            raise ConfigError(f"fruit_radius must be a non-empty positive range, got {self.fruit_radius}")
        if self.image_size < 8:
            raise ConfigError(f"image_size too small: {self.image_size}")
        if 2 * rhi >= self.image_size:
            raise ConfigError(f"fruit radius {rhi} does not fit inside a {self.image_size}px image")
        if not 0.0 <= self.occluder_density <= 1.0:
            raise ConfigError(f"occluder_density must lie in [0, 1], got {self.occluder_density}")
        if self.motion_amplitude < 0:
            raise ConfigError(f"motion_amplitude must be non-negative, got {self.motion_amplitude}")
        if not 0.0 <= self.lighting_drift < 1.0:
            raise ConfigError(f"lighting_drift must lie in [0, 1), got {self.lighting_drift}")
        if self.clip_length < 2:
            raise ConfigError(f"clip_length must be at least 2, got {self.clip_length}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_fruits"] = list(self.n_fruits)
        d["fruit_radius"] = list(self.fruit_radius)
        return d

    def with_seed(self, seed: int) -> "SceneConfig":
        return SceneConfig(**{**asdict(self), "seed": int(seed)})

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) uint8
    gt_masks: Optional[np.ndarray] = None  # (T, H, W) uint8 in {0, 1}
    frame_rate: int = 30
    centers: Optional[np.ndarray] = None  # (T, n_fruits, 2) fruit centres as (x, y)
    radii: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ConfigError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.gt_masks is not None and self.gt_masks.shape != self.frames.shape[:3]:
            raise ConfigError(f"gt_masks {self.gt_masks.shape} do not align with frames {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class LabelledClip:
    clip_id: str
    seed: int
    clip: VideoClip
    labelled_frames: List[int] = field(default_factory=list)


@dataclass
class DatasetSplits:
    config: SceneConfig
    frame_stride: int
    train: List[LabelledClip]
    val: List[LabelledClip]
    unlabelled: List[LabelledClip]
    test: List[LabelledClip]

    def split(self, name: str) -> List[LabelledClip]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def images(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """Stack the labelled frames of a split into (N,H,W,3) frames and (N,H,W) masks."""
        frames, masks = [], []
        for lc in self.split(name):
            for t in lc.labelled_frames:
                frames.append(lc.clip.frames[t])
                masks.append(lc.clip.gt_masks[t])
        return np.stack(frames), np.stack(masks)

    def manifest(self) -> dict:
        return {
            "scene": self.config.to_dict(),
            "frame_stride": self.frame_stride,
            "splits": {
                name: [
                    {"clip_id": lc.clip_id, "seed": lc.seed, "n_frames": len(lc.clip),
                     "labelled_frames": list(lc.labelled_frames)}
                    for lc in self.split(name)
                ]
                for name in SPLITS
            },
        }


def _smooth_texture(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode="wrap")
    return tex / (np.abs(tex).max() + 1e-12)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array([0.20, 0.40, 0.13]) * rng.uniform(0.85, 1.15)
    coarse = _smooth_texture(rng, size, size / 10.0)
    fine = _smooth_texture(rng, size, max(size / 64.0, 0.7))
    img = base[None, None, :] * (1.0 + 0.35 * coarse[..., None] + 0.15 * fine[..., None])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # a few branches and pale leaves as distractors
    for _ in range(rng.integers(1, 4)):
        x0, y0 = rng.uniform(0, size, 2)
        ang = rng.uniform(0, math.pi)
        dist = np.abs((xx - x0) * math.sin(ang) - (yy - y0) * math.cos(ang))
        img[dist < rng.uniform(0.01, 0.025) * size] = np.array([0.33, 0.24, 0.14])
    for _ in range(rng.integers(2, 6)):
        cx, cy = rng.uniform(0, size, 2)
        a, b = rng.uniform(0.04, 0.1) * size, rng.uniform(0.02, 0.05) * size
        ang = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(ang) + (yy - cy) * math.sin(ang)
        v = -(xx - cx) * math.sin(ang) + (yy - cy) * math.cos(ang)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = np.array([0.42, 0.55, 0.2]) * rng.uniform(0.8, 1.1)
    return img


def _trajectory(rng: np.random.Generator, start: np.ndarray, steps: int, amp: float,
                lo: float, hi: float) -> np.ndarray:
    """Per-frame centres whose step length never exceeds ``amp``."""
    t = np.arange(steps, dtype=np.float64)[:, None]
    omega = rng.uniform(0.08, 0.35, size=2)
    phase = rng.uniform(0, 2 * math.pi, size=2)
    # per-axis speed bounds: oscillation 0.7*amp/sqrt2, drift 0.3*amp/sqrt2
    osc = rng.uniform(0.3, 1.0, size=2) * 0.7 * amp / math.sqrt(2) / omega
    drift = rng.uniform(-1.0, 1.0, size=2) * 0.3 * amp / math.sqrt(2)
    path = start[None, :] + osc * (np.sin(omega * t + phase) - np.sin(phase)) + drift * t
    return np.clip(path, lo, hi)


def generate_clip(config: SceneConfig) -> VideoClip:
    """Render one clip; identical configs (seed included) give identical bytes."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    size, steps = config.image_size, config.clip_length
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    background = _background(rng, size)

    n_fruits = int(rng.integers(config.n_fruits[0], config.n_fruits[1] + 1))
    radii = rng.uniform(config.fruit_radius[0], config.fruit_radius[1], size=n_fruits)
    ripeness = rng.uniform(0.0, 1.0, size=n_fruits) ** 0.6
    colors = _UNRIPE[None, :] * (1 - ripeness[:, None]) + _RIPE[None, :] * ripeness[:, None]
    centers = np.zeros((steps, n_fruits, 2))
    for i, r in enumerate(radii):
        start = rng.uniform(r, size - r, size=2)
        centers[:, i, :] = _trajectory(rng, start, steps, config.motion_amplitude, r, size - r)
    highlight = rng.uniform(-0.4, 0.4, size=(n_fruits, 2))

    n_leaves = int(round(config.occluder_density * 8))
    leaves = []
    mean_r = float(radii.mean())
    for _ in range(n_leaves):
        anchor = centers[0, rng.integers(n_fruits)] if rng.random() < 0.6 else rng.uniform(0, size, 2)
        offset = rng.normal(0.0, mean_r, size=2)
        semi = (rng.uniform(0.6, 1.3) * mean_r, rng.uniform(0.22, 0.45) * mean_r)
        ang = rng.uniform(0, math.pi)
        sway = rng.uniform(0.0, 0.5) * config.motion_amplitude
        leaves.append((anchor + offset, semi, ang, sway, rng.uniform(0.1, 0.3), rng.uniform(0, 2 * math.pi),
                       rng.uniform(0.8, 1.2)))

    light_period = rng.uniform(20.0, 60.0)
    light_phase = rng.uniform(0, 2 * math.pi)

    frames = np.empty((steps, size, size, 3), dtype=np.uint8)
    masks = np.empty((steps, size, size), dtype=np.uint8)
    for t in range(steps):
        img = background.copy()
        fg = np.zeros((size, size), dtype=bool)
        for i in range(n_fruits):
            cx, cy = centers[t, i]
            r = radii[i]
            d2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / (r * r)
            disk = d2 <= 1.0
            hx, hy = cx + highlight[i, 0] * r, cy + highlight[i, 1] * r
            h2 = ((xx - hx) ** 2 + (yy - hy) ** 2) / (r * r)
            shade = (1.08 - 0.38 * d2 + 0.25 * np.exp(-h2 * 6.0))[disk]
            img[disk] = np.clip(colors[i][None, :] * shade[:, None], 0.0, 1.0)
            fg |= disk
        for (c0, (a, b), ang, sway, freq, ph, tone) in leaves:
            # sway speed sway*freq <= 0.5*amp*0.3 stays inside the motion budget
            cx = c0[0] + sway * math.sin(freq * t + ph)
            cy = c0[1] + 0.5 * sway * math.sin(freq * t + ph + 1.0)
            u = (xx - cx) * math.cos(ang) + (yy - cy) * math.sin(ang)
            v = -(xx - cx) * math.sin(ang) + (yy - cy) * math.cos(ang)
            leaf = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            img[leaf] = _LEAF * tone
            fg &= ~leaf
        light = 1.0 + config.lighting_drift * math.sin(2 * math.pi * t / light_period + light_phase)
        frames[t] = np.round(np.clip(img * light, 0.0, 1.0) * 255.0).astype(np.uint8)
        masks[t] = fg
    return VideoClip(frames=frames, gt_masks=masks, centers=centers, radii=radii)


def labelled_indices(clip_length: int, frame_stride: int) -> List[int]:
    return list(range(0, clip_length, frame_stride))


def scaled_counts(divisor: int = 10) -> Dict[str, int]:
    """Split sizes of the original dataset divided by ``divisor`` (1200/313/240/20 at divisor 1)."""
    if divisor < 1:
        raise ConfigError(f"divisor must be >= 1, got {divisor}")
    return {k: max(1, int(round(v / divisor))) for k, v in FULL_SCALE_COUNTS.items()}


def _clip_seed(base: int, split_index: int, clip_index: int) -> int:
    seq = np.random.SeedSequence(entropy=int(base) & 0xFFFFFFFFFFFFFFFF, spawn_key=(split_index, clip_index))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def generate_dataset(config: SceneConfig, n_train_images: int, n_val_images: int, n_unlabelled_clips: int,
                     n_test_clips: int, frame_stride: int = 5) -> DatasetSplits:
    """Build the four splits. Every clip belongs to exactly one split.

    Labelled images are the frames at multiples of ``frame_stride``; the train
    and val splits generate as many clips as needed to reach the requested
    image counts (the last clip may contribute fewer images).
    """
    counts = {"n_train_images": n_train_images, "n_val_images": n_val_images,
              "n_unlabelled_clips": n_unlabelled_clips, "n_test_clips": n_test_clips}
    for name, value in counts.items():
        if int(value) < 1:
            raise ConfigError(f"{name} must be positive, got {value}")
    if frame_stride < 1:
        raise ConfigError(f"frame_stride must be positive, got {frame_stride}")
    idx = labelled_indices(config.clip_length, frame_stride)
    if len(idx) < 2:
        raise ConfigError(
            f"clip_length {config.clip_length} with frame_stride {frame_stride} yields {len(idx)} labelled "
            "frame(s) per clip; at least 2 are needed"
        )

    def make(split_index: int, n_clips: int, prefix: str, labelled: Optional[int]) -> List[LabelledClip]:
        out = []
        remaining = labelled
        for i in range(n_clips):
            seed = _clip_seed(config.seed, split_index, i)
            clip = generate_clip(config.with_seed(seed))
            if labelled is None:
                clip.gt_masks = None
                frames = []
            else:
                frames = idx if remaining is None else idx[: max(0, remaining)]
                if remaining is not None:
                    remaining -= len(frames)
            out.append(LabelledClip(f"{prefix}_{i:04d}", seed, clip, list(frames)))
        return out

    per_clip = len(idx)
    n_train_clips = math.ceil(n_train_images / per_clip)
    n_val_clips = math.ceil(n_val_images / per_clip)
    return DatasetSplits(
        config=config,
        frame_stride=frame_stride,
        train=make(0, n_train_clips, "train", n_train_images),
        val=make(1, n_val_clips, "val", n_val_images),
        unlabelled=make(2, n_unlabelled_clips, "unlabelled", None),
        test=make(3, n_test_clips, "test", len(idx) * n_test_clips),
    )


# -- on-disk layout ---------------------------------------------------------

def write_dataset(splits: DatasetSplits, root: Path) -> dict:
    """Write ``<root>/<split>/<clip_id>/frame_%05d.png`` (+ ``mask_%05d.png``) and ``manifest.json``."""
    root = Path(root)
    for name in SPLITS:
        for lc in splits.split(name):
            d = root / name / lc.clip_id
            d.mkdir(parents=True, exist_ok=True)
            for t in range(len(lc.clip)):
                imageio.write_rgb(d / f"frame_{t:05d}.png", lc.clip.frames[t])
                if lc.clip.gt_masks is not None:
                    imageio.write_mask(d / f"mask_{t:05d}.png", lc.clip.gt_masks[t])
    manifest = splits.manifest()
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(root: Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"missing dataset manifest {path} (run `segfuse generate` first)")
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc


def read_clip_dir(clip_dir: Path, with_masks: bool = True) -> VideoClip:
    clip_dir = Path(clip_dir)
    frame_paths = sorted(clip_dir.glob("frame_*.png"))
    if not frame_paths:
        raise DataIOError(f"no frame_*.png files in {clip_dir}")
    frames = np.stack([imageio.read_rgb(p) for p in frame_paths])
    masks = None
    if with_masks:
        mask_paths = [clip_dir / p.name.replace("frame_", "mask_") for p in frame_paths]
        if all(p.exists() for p in mask_paths):
            masks = np.stack([imageio.read_mask(p) for p in mask_paths])
    return VideoClip(frames=frames, gt_masks=masks)


def read_dataset(root: Path) -> DatasetSplits:
    root = Path(root)
    manifest = read_manifest(root)
    config = SceneConfig.from_dict(manifest["scene"])
    lists = {}
    for name in SPLITS:
        lists[name] = [
            LabelledClip(e["clip_id"], e["seed"], read_clip_dir(root / name / e["clip_id"], name != "unlabelled"),
                         list(e["labelled_frames"]))
            for e in manifest["splits"][name]
        ]
    return DatasetSplits(config=config, frame_stride=manifest["frame_stride"], **lists)


def clear_dir(path: Path) -> None:
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
