"""Segmentation metrics: pixel precision, IoU, and DAVIS-style J/F statistics.

Masks are 2-D arrays; any non-zero pixel counts as foreground.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from segfuse.errors import ConfigError, ShapeError

RECALL_THRESHOLD = 0.5


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred) != 0, np.asarray(gt) != 0
    if p.shape != g.shape:
        raise ShapeError(f"mask dimensions differ: pred {p.shape}, gt {g.shape}")
    return p, g


def precision(pred, gt) -> float:
    """Fraction of pixels where the prediction agrees with the label (either class)."""
    p, g = _pair(pred, gt)
    return float(np.count_nonzero(p == g)) / p.size


def iou(pred, gt) -> float:
    """Foreground intersection over union; two empty masks score 1.0."""
    p, g = _pair(pred, gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & g)) / union


def boundary(mask) -> np.ndarray:
    """One-pixel inner boundary: foreground pixels with a background 4-neighbour (outside counts as background)."""
    m = np.asarray(mask) != 0
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    return m & ~binary_erosion(m, structure=cross, border_value=0)


def default_tolerance(shape: Sequence[int]) -> int:
    return max(1, int(round(0.008 * math.hypot(shape[0], shape[1]))))


def boundary_f(pred, gt, tolerance_px: int) -> float:
    p, g = _pair(pred, gt)
    bp, bg = boundary(p), boundary(g)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    square = np.ones((2 * tolerance_px + 1, 2 * tolerance_px + 1), dtype=bool)
    gt_zone = binary_dilation(bg, structure=square) if tolerance_px > 0 else bg
    pred_zone = binary_dilation(bp, structure=square) if tolerance_px > 0 else bp
    prec = np.count_nonzero(bp & gt_zone) / n_p
    rec = np.count_nonzero(bg & pred_zone) / n_g
    if prec + rec == 0:
        return 0.0
    return 2.0 * prec * rec / (prec + rec)


def sequence_statistics(values: Sequence[float]) -> Tuple[float, float, Optional[float]]:
    """Mean, recall (fraction strictly above 0.5), and first-minus-last quartile decay.

    Quartile bins split the sequence by index with edges ``floor(k*n/4)``.
    Decay is ``None`` for sequences shorter than four.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("cannot summarise an empty sequence")
    mean = float(v.mean())
    recall = float(np.count_nonzero(v > RECALL_THRESHOLD)) / v.size
    decay = None
    if v.size >= 4:
        edges = [(k * v.size) // 4 for k in range(5)]
        # bin means are taken as offsets from v[0], so equal values give exactly equal means
        first, last = v[edges[0] : edges[1]] - v[0], v[edges[3] : edges[4]] - v[0]
        decay = float(first.mean() - last.mean())
    return mean, recall, decay


def _check_sequences(pred_seq, gt_seq):
    if len(pred_seq) != len(gt_seq):
        raise ShapeError(f"sequence lengths differ: pred {len(pred_seq)}, gt {len(gt_seq)}")


def per_frame_j(pred_seq, gt_seq, exclude_first: bool = True) -> List[float]:
    _check_sequences(pred_seq, gt_seq)
    start = 1 if exclude_first else 0
    return [iou(p, g) for p, g in zip(pred_seq[start:], gt_seq[start:])]


def per_frame_f(pred_seq, gt_seq, tolerance_px: Optional[int] = None, exclude_first: bool = True) -> List[float]:
    _check_sequences(pred_seq, gt_seq)
    start = 1 if exclude_first else 0
    out = []
    for p, g in zip(pred_seq[start:], gt_seq[start:]):
        tol = default_tolerance(np.shape(g)) if tolerance_px is None else tolerance_px
        out.append(boundary_f(p, g, tol))
    return out


def davis_j(pred_seq, gt_seq, exclude_first: bool = True):
    """(j_mean, j_recall, j_decay) over the sequence; the first (given) frame is skipped."""
    return sequence_statistics(per_frame_j(pred_seq, gt_seq, exclude_first))


def davis_f(pred_seq, gt_seq, tolerance_px: Optional[int] = None, exclude_first: bool = True):
    return sequence_statistics(per_frame_f(pred_seq, gt_seq, tolerance_px, exclude_first))


# -- reports ----------------------------------------------------------------

@dataclass
class ClipEvaluation:
    model_name: str
    split: str
    clip_id: str
    precision: float
    iou: float
    j_mean: Optional[float] = None
    j_recall: Optional[float] = None
    j_decay: Optional[float] = None
    f_mean: Optional[float] = None
    f_recall: Optional[float] = None
    f_decay: Optional[float] = None
    per_frame_j: List[float] = field(default_factory=list)
    per_frame_f: List[float] = field(default_factory=list)


def evaluate_clip(model_name: str, split: str, clip_id: str, pred_seq, gt_seq, with_jf: bool = True,
                  tolerance_px: Optional[int] = None) -> ClipEvaluation:
    """Score one clip. The first frame is the given anchor and is left out of every statistic."""
    _check_sequences(pred_seq, gt_seq)
    if len(gt_seq) < 2:
        raise ConfigError(f"clip {clip_id} needs at least two labelled frames to evaluate")
    pairs = list(zip(pred_seq[1:], gt_seq[1:]))
    ev = ClipEvaluation(
        model_name=model_name,
        split=split,
        clip_id=clip_id,
        precision=float(np.mean([precision(p, g) for p, g in pairs])),
        iou=float(np.mean([iou(p, g) for p, g in pairs])),
    )
    if with_jf:
        ev.per_frame_j = per_frame_j(pred_seq, gt_seq)
        ev.per_frame_f = per_frame_f(pred_seq, gt_seq, tolerance_px)
        ev.j_mean, ev.j_recall, ev.j_decay = sequence_statistics(ev.per_frame_j)
        ev.f_mean, ev.f_recall, ev.f_decay = sequence_statistics(ev.per_frame_f)
    return ev


@dataclass
class MetricsReport:
    model_name: str
    split: str
    precision: float
    iou: float
    j_mean: Optional[float] = None
    j_recall: Optional[float] = None
    j_decay: Optional[float] = None
    f_mean: Optional[float] = None
    f_recall: Optional[float] = None
    f_decay: Optional[float] = None
    per_frame: Optional[Dict[str, Dict[str, List[float]]]] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**{f.name: data.get(f.name) for f in fields(cls)})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


_STAT_FIELDS = ("j_mean", "j_recall", "j_decay", "f_mean", "f_recall", "f_decay")


def build_report(evaluations: Sequence[ClipEvaluation]) -> MetricsReport:
    """Average per-clip scores into one dataset-level report."""
    if not evaluations:
        raise ConfigError("cannot build a report from zero evaluations")
    names = {e.model_name for e in evaluations}
    splits = {e.split for e in evaluations}
    if len(names) != 1 or len(splits) != 1:
        raise ConfigError(f"evaluations mix models {sorted(names)} / splits {sorted(splits)}")
    report = MetricsReport(
        model_name=names.pop(),
        split=splits.pop(),
        precision=float(np.mean([e.precision for e in evaluations])),
        iou=float(np.mean([e.iou for e in evaluations])),
    )
    for name in _STAT_FIELDS:
        vals = [getattr(e, name) for e in evaluations if getattr(e, name) is not None]
        setattr(report, name, float(np.mean(vals)) if vals else None)
    if any(e.per_frame_j for e in evaluations):
        report.per_frame = {e.clip_id: {"J": list(e.per_frame_j), "F": list(e.per_frame_f)} for e in evaluations}
    return report


# -- tables -----------------------------------------------------------------

TABLE1_COLUMNS = ("P", "IOU")
TABLE2_COLUMNS = ("J-mean", "J-recall", "J-decay", "F-mean", "F-recall", "F-decay")


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6f}"


def write_aligned_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    """CSV whose fields are padded so columns line up in a terminal."""
    table = [list(header)] + [list(r) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = []
    for r in table:
        cells = [c.ljust(w) if i < len(r) - 1 else c for i, (c, w) in enumerate(zip(r, widths))]
        lines.append(", ".join(cells).rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def read_aligned_csv(path: Path) -> List[List[str]]:
    with open(path, newline="") as fh:
        return [[c.strip() for c in row] for row in csv.reader(fh, skipinitialspace=True) if row]


def write_table1(path: Path, reports: Sequence[MetricsReport]) -> None:
    rows = [[r.model_name, _fmt(r.precision), _fmt(r.iou)] for r in reports]
    write_aligned_csv(path, ("model",) + TABLE1_COLUMNS, rows)


def write_table2(path: Path, report: MetricsReport) -> None:
    write_aligned_csv(path, TABLE2_COLUMNS, [[_fmt(getattr(report, f)) for f in _STAT_FIELDS]])
