import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segfuse.errors import ConfigError, ShapeError
from segfuse.metrics import (
    MetricsReport,
    boundary,
    boundary_f,
    build_report,
    davis_f,
    davis_j,
    default_tolerance,
    evaluate_clip,
    iou,
    precision,
    read_aligned_csv,
    sequence_statistics,
    write_table1,
    write_table2,
)


def brute_precision(p, g):
    agree = 0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            agree += int(bool(p[i, j]) == bool(g[i, j]))
    return agree / (p.shape[0] * p.shape[1])


def brute_iou(p, g):
    inter = union = 0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            a, b = bool(p[i, j]), bool(g[i, j])
            inter += a and b
            union += a or b
    return 1.0 if union == 0 else inter / union


def square(size, lo, hi):
    m = np.zeros((size, size), dtype=np.uint8)
    m[lo:hi, lo:hi] = 1
    return m


# -- precision / iou --------------------------------------------------------

def test_precision_examples():
    m = np.array([[1, 0], [0, 1]])
    assert precision(m, m) == 1.0
    assert precision(1 - m, m) == 0.0
    assert precision(np.array([[1, 0], [0, 0]]), m) == 0.75


def test_iou_examples():
    m = np.zeros((3, 4))
    m[1, 1:3] = 1
    assert iou(m, m) == 1.0
    a, b = np.zeros((3, 3)), np.zeros((3, 3))
    a[0], b[2] = 1, 1
    assert iou(a, b) == 0.0
    pred, gt = np.zeros((3, 5)), np.zeros((3, 5))
    pred[0:2], gt[1:3] = 1, 1
    assert iou(pred, gt) == pytest.approx(1 / 3)


def test_iou_empty_conventions():
    z = np.zeros((4, 4))
    assert iou(z, z) == 1.0
    assert iou(z, square(4, 1, 3)) == 0.0
    assert iou(square(4, 1, 3), z) == 0.0


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        precision(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        iou(np.zeros((2, 2)), np.zeros((3, 2)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.uint8, (16, 16), elements=st.integers(0, 1)), arrays(np.uint8, (16, 16), elements=st.integers(0, 1)))
def test_metrics_match_brute_force(p, g):
    assert abs(precision(p, g) - brute_precision(p, g)) < 1e-12
    assert abs(iou(p, g) - brute_iou(p, g)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (16, 16), elements=st.integers(0, 1)), arrays(np.uint8, (16, 16), elements=st.integers(0, 1)))
def test_symmetry_under_relabelling(p, g):
    assert precision(1 - p, 1 - g) == precision(p, g)
    assert iou(p, g) == iou(g, p)


def test_iou_monotone_with_fixed_union():
    gt = square(10, 0, 10)
    pred = np.zeros((10, 10), dtype=np.uint8)
    pred[0, 0] = 1
    last = iou(pred, gt)
    for k in range(1, 10):
        pred[k, :] = 1
        cur = iou(pred, gt)
        assert cur > last
        last = cur


# -- J / F statistics -------------------------------------------------------

def test_constant_sequence_has_zero_decay():
    for n in (4, 5, 7, 12):
        mean, recall, decay = sequence_statistics([0.37] * n)
        assert decay == 0.0
        assert recall == 0.0


def test_recall_threshold_strictly_greater():
    assert sequence_statistics([0.6] * 5)[1] == 1.0
    assert sequence_statistics([0.5] * 5)[1] == 0.0
    assert sequence_statistics([0.5, 0.5000001, 0.4, 0.9])[1] == 0.5


def test_decay_hand_example():
    gt = [square(8, 2, 6)] * 5
    pred = [gt[0], gt[0], gt[0], np.zeros((8, 8)), np.zeros((8, 8))]
    assert davis_j(pred, gt) == (0.5, 0.5, 1.0)


def test_short_sequence_has_no_decay():
    gt = [square(8, 2, 6)] * 4
    mean, recall, decay = davis_j(gt, gt)
    assert (mean, recall, decay) == (1.0, 1.0, None)


def test_quartile_edges_round_down():
    # n=6: edges 0,1,3,4,6 -> first bin [0], last bin [4,5]
    assert sequence_statistics([1, 0, 0, 0, 0.2, 0.4])[2] == pytest.approx(1 - 0.3)


def test_boundary_of_square_is_its_ring():
    b = boundary(square(8, 2, 6))
    assert b.sum() == 12 and not b[3:5, 3:5].any()


def test_f_identity_and_empty_prediction():
    gt = [square(32, 8, 20)] * 4
    assert davis_f(gt, gt)[0] == 1.0
    assert boundary_f(np.zeros((32, 32)), gt[0], 3) == 0.0


@pytest.mark.parametrize("tol", [1, 2, 3, 5])
def test_f_displaced_edges_tolerance_edge(tol):
    gt = square(64, 10, 40)
    shrunk_ok = square(64, 10 + tol, 40 - tol)
    shrunk_far = square(64, 10 + tol + 1, 40 - tol - 1)
    assert boundary_f(shrunk_ok, gt, tol) == 1.0
    assert boundary_f(shrunk_far, gt, tol) == 0.0
    grown_ok = square(64, 10 - tol, 40 + tol)
    grown_far = square(64, 10 - tol - 1, 40 + tol + 1)
    assert boundary_f(grown_ok, gt, tol) == 1.0
    assert boundary_f(grown_far, gt, tol) == 0.0


def test_f_infinite_tolerance():
    a, b = square(32, 1, 5), square(32, 20, 30)
    assert boundary_f(a, b, int(math.ceil(math.hypot(32, 32)))) == 1.0


def test_default_tolerance_256():
    assert default_tolerance((256, 256)) == 3
    assert default_tolerance((16, 16)) == 1


# -- reports ----------------------------------------------------------------

def _clip(name, cid, quality):
    gt = [square(16, 4, 12)] * 5
    pred = [gt[0]] + [square(16, 4, 12 - quality)] * 4
    return evaluate_clip(name, "test", cid, pred, gt)


def test_single_clip_report_equals_clip():
    ev = _clip("m", "c0", 1)
    r = build_report([ev])
    assert (r.precision, r.iou, r.j_mean, r.f_decay) == (ev.precision, ev.iou, ev.j_mean, ev.f_decay)


def test_two_clip_report_is_mean():
    a, b = _clip("m", "c0", 1), _clip("m", "c1", 3)
    r = build_report([a, b])
    assert r.iou == pytest.approx((a.iou + b.iou) / 2)
    assert r.f_mean == pytest.approx((a.f_mean + b.f_mean) / 2)
    assert set(r.per_frame) == {"c0", "c1"}


def test_empty_report_rejected():
    with pytest.raises(ConfigError):
        build_report([])


def test_report_round_trip():
    r = build_report([_clip("m", "c0", 2), _clip("m", "c1", 1)])
    assert MetricsReport.from_json(r.to_json()) == r


def test_tables(tmp_path):
    reports = [build_report([_clip(n, "c0", q)]) for n, q in (("segnet", 1), ("fusion", 0))]
    write_table1(tmp_path / "t1.csv", reports)
    rows = read_aligned_csv(tmp_path / "t1.csv")
    assert rows[0] == ["model", "P", "IOU"]
    assert [r[0] for r in rows[1:]] == ["segnet", "fusion"]
    assert float(rows[2][2]) == 1.0
    write_table2(tmp_path / "t2.csv", reports[0])
    rows = read_aligned_csv(tmp_path / "t2.csv")
    assert rows[0] == ["J-mean", "J-recall", "J-decay", "F-mean", "F-recall", "F-decay"]
    assert len(rows[1]) == 6
