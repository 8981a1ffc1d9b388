"""PNG reading and writing for frames and masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from segfuse.errors import DataIOError


def write_rgb(path: Path, frame: np.ndarray) -> None:
    Image.fromarray(np.asarray(frame, dtype=np.uint8), mode="RGB").save(path, format="PNG", optimize=False)


def write_gray(path: Path, values: np.ndarray) -> None:
    Image.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(path, format="PNG", optimize=False)


def write_mask(path: Path, mask: np.ndarray) -> None:
    """Binary mask stored as 0/255."""
    write_gray(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def write_soft_mask(path: Path, soft: np.ndarray) -> None:
    """Probability map quantised to 0-255."""
    write_gray(path, np.round(np.clip(soft, 0.0, 1.0) * 255.0).astype(np.uint8))


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc


def read_rgb(path: Path) -> np.ndarray:
    return np.asarray(_open(Path(path)).convert("RGB"), dtype=np.uint8)


def read_mask(path: Path) -> np.ndarray:
    """Load a mask PNG as a {0,1} uint8 array (any non-zero value is foreground)."""
    return (np.asarray(_open(Path(path)).convert("L")) > 127).astype(np.uint8)
