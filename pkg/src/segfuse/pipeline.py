"""Pipeline stages behind the CLI: generate, train, evaluate, propagate.

Everything a stage writes lives under the configured output directory::

    config.json                          resolved config of the last generate
    data/                                synthetic dataset (see synthdata.write_dataset)
    checkpoints/{segnet,cycle,fusion}.ckpt
    history/{seg,cycle,fusion}.json
    predictions/<row>/<clip_id>/mask_%05d.png
    reports/<row>.json
    table1.csv  table2.csv  table3.csv
"""

from __future__ import annotations

import logging
import os
import shutil
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from segfuse import imageio
from segfuse.config import ExperimentConfig
from segfuse.cycletrack import CycleConfig, CycleModel, build_cycle, propagate_labels, train_cycle
from segfuse.errors import ConfigError, DataIOError, MissingArtifactError
from segfuse.fusion import FusionConfig, FusionModel, build_fusion, fuse, train_fusion, weighted_mean_baseline
from segfuse.metrics import (
    ClipEvaluation,
    MetricsReport,
    build_report,
    evaluate_clip,
    write_table1,
    write_table2,
)
from segfuse.segnet import SegModel, SegNetConfig, build_segnet, predict_soft, train_segnet
from segfuse.synthdata import LabelledClip, clear_dir, generate_dataset, read_clip_dir, read_dataset, write_dataset
from segfuse.tensor import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("seg", "cycle", "fusion")
THREADS_ENV = "SEGFUSE_THREADS"


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    def checkpoint(self, kind: str) -> Path:
        return self.root / "checkpoints" / f"{kind}.ckpt"

    def history(self, stage: str) -> Path:
        return self.root / "history" / f"{stage}.json"

    def predictions(self, row: str, clip_id: str) -> Path:
        return self.root / "predictions" / row / clip_id

    def report(self, row: str) -> Path:
        return self.root / "reports" / f"{row}.json"

    def table(self, n: int) -> Path:
        return self.root / f"table{n}.csv"


# -- checkpoints --------------------------------------------------------------

_BUILDERS = {
    "segnet": (SegNetConfig, build_segnet),
    "cycle": (CycleConfig, build_cycle),
    "fusion": (FusionConfig, build_fusion),
}


def save_model(path: Path, model, seed: int) -> None:
    try:
        save_checkpoint(path, model.state_dict(), model.topology(), seed)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_model(path: Path, kind: str):
    """Rebuild a model from the topology stored in its checkpoint."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing {kind} checkpoint {path} (run `segfuse train` for it first)")
    header, state = load_checkpoint(path)
    topology = header.get("topology", {})
    if topology.get("kind") != kind:
        raise DataIOError(f"{path} holds a {topology.get('kind')!r} model, expected {kind!r}")
    config_cls, build = _BUILDERS[kind]
    model = build(config_cls.from_dict(topology["config"]), seed=header.get("seed", 0))
    model.load_state_dict(state)
    return model


# -- generate -------------------------------------------------------------------

def generate(cfg: ExperimentConfig) -> dict:
    layout = Layout(cfg.out)
    if layout.data.exists() and any(layout.data.iterdir()):
        if not cfg.force:
            raise ConfigError(f"{layout.data} already holds a dataset; pass --force to overwrite it")
        clear_dir(layout.data)
    d = cfg.dataset
    splits = generate_dataset(cfg.scene, d.n_train_images, d.n_val_images, d.n_unlabelled_clips, d.n_test_clips,
                              d.frame_stride)
    try:
        manifest = write_dataset(splits, layout.data)
        (layout.root / "config.json").write_text(cfg.to_json())
    except OSError as exc:
        raise DataIOError(f"cannot write dataset under {layout.data}: {exc}") from exc
    log.info("wrote %s", {k: len(v) for k, v in manifest["splits"].items()})
    return manifest


# -- train ----------------------------------------------------------------------

def _fusion_inputs(cfg: ExperimentConfig, seg: SegModel, cycle: CycleModel, clips: List[LabelledClip],
                   frame_step: int = 1):
    """Static and temporal soft masks plus ground truth for every non-anchor frame of ``clips``.

    The temporal stream is anchored on the segmentation network's own frame-0
    mask, the same input it sees at test time without the oracle flag.
    """
    statics, temporals, gts = [], [], []
    for lc in clips:
        frames, gt = lc.clip.frames, lc.clip.gt_masks
        if gt is None:
            raise MissingArtifactError(f"clip {lc.clip_id} has no ground-truth masks")
        soft = predict_soft(seg, frames)
        temporal = propagate_labels(cycle, soft[0] >= cfg.segnet.threshold, frames)
        idx = list(range(1, len(frames), frame_step))
        statics.append(soft[idx])
        temporals.append(temporal[idx])
        gts.append(gt[idx])
    return np.concatenate(statics), np.concatenate(temporals), np.concatenate(gts).astype(np.float64)


def train(cfg: ExperimentConfig, stage: str):
    if stage not in STAGES:
        raise ConfigError(f"unknown training stage {stage!r}; choose from {', '.join(STAGES)}")
    layout = Layout(cfg.out)
    data = read_dataset(layout.data)
    if stage == "seg":
        sc = cfg.segnet
        model = build_segnet(sc.model, seed=cfg.seed)
        history = train_segnet(model, data.images("train"), data.images("val"), epochs=sc.epochs,
                               batch_size=sc.batch_size, lr=sc.lr, seed=cfg.seed)
        kind = "segnet"
    elif stage == "cycle":
        cc = cfg.cycle
        model = build_cycle(cc.model, seed=cfg.seed)
        history = train_cycle(model, [lc.clip.frames for lc in data.unlabelled], steps=cc.steps, lr=cc.lr,
                              momentum=cc.momentum, windows_per_step=cc.windows_per_step,
                              smooth_window=cc.smooth_window, seed=cfg.seed, clip_norm=cc.grad_clip)
        kind = "cycle"
    else:
        fc = cfg.fusion
        seg = load_model(layout.checkpoint("segnet"), "segnet")
        cycle = load_model(layout.checkpoint("cycle"), "cycle")
        static, temporal, gt = _fusion_inputs(cfg, seg, cycle, data.val, fc.frame_step)
        model = build_fusion(fc.model, seed=cfg.seed)
        history = train_fusion(model, static, temporal, gt, epochs=fc.epochs, batch_size=fc.batch_size, lr=fc.lr,
                               seed=cfg.seed, augment=fc.augment)
        kind = "fusion"
    save_model(layout.checkpoint(kind), model, cfg.seed)
    try:
        history.save(layout.history(stage))
    except OSError as exc:
        raise DataIOError(f"cannot write training history: {exc}") from exc
    return history


# -- evaluate -------------------------------------------------------------------

def eval_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def predict_rows(cfg: ExperimentConfig, models: Dict[str, object], frames: np.ndarray,
                 gt_first: Optional[np.ndarray]) -> Dict[str, np.ndarray]:
    """Binary (T, H, W) masks for every requested row of the comparison table.

    The temporal stream starts from ``gt_first`` when given (oracle mode) and
    otherwise from the segmentation network's frame-0 mask.
    """
    rows = cfg.evaluate.models
    th = cfg.segnet.threshold
    soft = predict_soft(models["segnet"], frames)
    out = {}
    if "segnet" in rows:
        out["segnet"] = soft >= th
    if any(r in rows for r in ("unsupervised", "weighted_mean", "fusion")):
        anchor = gt_first if gt_first is not None else soft[0] >= th
        temporal = propagate_labels(models["cycle"], anchor, frames)
        if "unsupervised" in rows:
            out["unsupervised"] = temporal >= 0.5
        if "weighted_mean" in rows:
            out["weighted_mean"] = weighted_mean_baseline(soft, temporal, cfg.fusion.alpha).astype(bool)
        if "fusion" in rows:
            out["fusion"] = fuse(models["fusion"], soft, temporal) >= 0.0
    return {r: out[r] for r in rows}


def _needed_models(rows) -> List[str]:
    need = ["segnet"]
    if any(r in rows for r in ("unsupervised", "weighted_mean", "fusion")):
        need.append("cycle")
    if "fusion" in rows:
        need.append("fusion")
    return need


def evaluate(cfg: ExperimentConfig) -> Dict[str, MetricsReport]:
    layout = Layout(cfg.out)
    rows = cfg.evaluate.models
    threads = eval_threads()
    kinds = _needed_models(rows)
    for kind in kinds:
        load_model(layout.checkpoint(kind), kind)  # fail fast before any thread starts
    data = read_dataset(layout.data)
    oracle = cfg.evaluate.oracle_first_frame
    local = threading.local()

    def one_clip(lc: LabelledClip) -> Dict[str, ClipEvaluation]:
        gt = lc.clip.gt_masks
        if gt is None:
            raise MissingArtifactError(f"test clip {lc.clip_id} has no ground-truth masks")
        if not hasattr(local, "models"):
            # one model instance per worker thread
            local.models = {kind: load_model(layout.checkpoint(kind), kind) for kind in kinds}
        preds = predict_rows(cfg, local.models, lc.clip.frames, gt[0] if oracle else None)
        result = {}
        for row, masks in preds.items():
            d = layout.predictions(row, lc.clip_id)
            d.mkdir(parents=True, exist_ok=True)
            for t, m in enumerate(masks):
                imageio.write_mask(d / f"mask_{t:05d}.png", m)
            result[row] = evaluate_clip(row, "test", lc.clip_id, masks, gt)
        return result

    try:
        with ThreadPoolExecutor(max_workers=min(threads, max(1, len(data.test)))) as pool:
            per_clip = list(pool.map(one_clip, data.test))
    except OSError as exc:
        if isinstance(exc, (MissingArtifactError, DataIOError)):
            raise
        raise DataIOError(f"cannot write predictions: {exc}") from exc

    reports = {row: build_report([c[row] for c in per_clip]) for row in rows}
    try:
        for row, report in reports.items():
            layout.report(row).parent.mkdir(parents=True, exist_ok=True)
            layout.report(row).write_text(report.to_json() + "\n")
        write_table1(layout.table(1), [reports[r] for r in rows])
        if "unsupervised" in reports:
            write_table2(layout.table(2), reports["unsupervised"])
        ablation = [reports[r] for r in ("weighted_mean", "fusion") if r in reports]
        if ablation:
            write_table1(layout.table(3), ablation)
    except OSError as exc:
        raise DataIOError(f"cannot write evaluation outputs under {layout.root}: {exc}") from exc
    for row in rows:
        log.info("%-14s P %.4f IoU %.4f", row, reports[row].precision, reports[row].iou)
    return reports


# -- propagate ------------------------------------------------------------------

def propagate(cfg: ExperimentConfig, clip_dir: Path, first_mask: Path, out_dir: Path,
              checkpoint: Optional[Path] = None) -> np.ndarray:
    """Carry ``first_mask`` through the frames in ``clip_dir`` with the trained temporal model.

    Writes ``soft_%05d.png`` and ``mask_%05d.png`` per frame. ``mask_00000.png``
    is a byte copy of ``first_mask``.
    """
    model = load_model(checkpoint or Layout(cfg.out).checkpoint("cycle"), "cycle")
    first_mask = Path(first_mask)
    if not first_mask.exists():
        raise MissingArtifactError(f"first-frame mask {first_mask} does not exist")
    if not Path(clip_dir).is_dir():
        raise MissingArtifactError(f"clip directory {clip_dir} does not exist")
    clip = read_clip_dir(Path(clip_dir), with_masks=False)
    soft = propagate_labels(model, imageio.read_mask(first_mask), clip.frames)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(first_mask, out_dir / "mask_00000.png")
        for t in range(len(soft)):
            imageio.write_soft_mask(out_dir / f"soft_{t:05d}.png", soft[t])
            if t:
                imageio.write_mask(out_dir / f"mask_{t:05d}.png", soft[t] >= 0.5)
    except OSError as exc:
        raise DataIOError(f"cannot write propagation output under {out_dir}: {exc}") from exc
    return soft
