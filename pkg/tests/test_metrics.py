import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_min, mc_iou

from fusionpred.geometry import CAR, CYCLIST, PEDESTRIAN, Box3D, bev_iou
from fusionpred.metrics import (
    EvalConfig,
    average_precision,
    min_ade,
    min_fde,
    read_report,
    tracking_report,
    write_report,
)


def box(x, y, l=1.0, w=1.0, yaw=0.0, cls=CAR, conf=1.0):
    return Box3D([x, y, 0.5], [l, w, 1.0], yaw, cls, conf)


def random_pair(rng):
    a = box(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-np.pi, np.pi))
    b = box(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-np.pi, np.pi))
    return a, b


def test_bev_iou_examples():
    assert bev_iou(box(0, 0), box(0, 0)) == pytest.approx(1.0)
    assert bev_iou(box(0, 0), box(5, 0)) == 0.0
    assert bev_iou(box(0, 0), box(0.5, 0)) == pytest.approx(1 / 3)


def test_bev_iou_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = random_pair(rng)
        iou = bev_iou(a, b)
        assert 0.0 <= iou <= 1.0
        assert iou == pytest.approx(bev_iou(b, a), abs=1e-12)
        assert abs(iou - mc_iou(a, b, 200_000, rng)) < 0.01


def test_ap_hand_case():
    gts = [box(0, 0), box(10, 0)]
    dets = [box(0, 0, conf=0.9), box(20, 0, conf=0.8), box(10, 0, conf=0.7)]
    # precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1: 21 of 41 recall points see 1, the other 20 see 2/3
    assert average_precision(dets, gts, CAR) == pytest.approx(103 / 123, abs=1e-12)


def test_ap_trivial_cases():
    gts = [box(0, 0), box(10, 0)]
    assert average_precision([box(0, 0, conf=0.5), box(10, 0, conf=0.6)], gts, CAR) == pytest.approx(1.0)
    assert average_precision([], gts, CAR) == 0.0
    assert average_precision([box(0, 0)], [], CAR) is None
    assert average_precision([box(0, 0)], [box(0, 0, cls=PEDESTRIAN)], CAR) is None


def test_ap_multi_frame_and_thresholds():
    # a 0.5-offset car has IoU 1/3: below the car threshold 0.7
    assert average_precision([[box(0.5, 0)]], [[box(0, 0)]], CAR) == 0.0
    # pedestrian boxes offset by 0.2 have IoU 0.8/1.2 = 2/3 >= 0.5
    ped = lambda x, c=1.0: box(x, 0, cls=PEDESTRIAN, conf=c)
    assert average_precision([[ped(0.2)], [ped(5)]], [[ped(0)], [ped(5)]], PEDESTRIAN) == pytest.approx(1.0)
    # detections only match within their own frame
    assert average_precision([[ped(5)], [ped(0)]], [[ped(0)], [ped(5)]], PEDESTRIAN) == 0.0
    with pytest.raises(ValueError):
        EvalConfig(iou_thresholds=(0.0, 0.7, 0.5))


def test_ap_tie_break_by_input_order():
    gts = [box(0, 0)]
    # equal confidence: the earlier false positive ranks first
    fp_first = average_precision([box(9, 0, conf=0.5), box(0, 0, conf=0.5)], gts, CAR)
    tp_first = average_precision([box(0, 0, conf=0.5), box(9, 0, conf=0.5)], gts, CAR)
    assert fp_first == pytest.approx(0.5) and tp_first == pytest.approx(1.0)


def test_ap_non_increasing_with_top_false_positive():
    rng = np.random.default_rng(1)
    for _ in range(100):
        gts = [box(*rng.uniform(-20, 20, 2)) for _ in range(rng.integers(1, 6))]
        dets = [box(*(g.center[:2] + rng.normal(0, 0.2, 2)), conf=rng.uniform(0, 0.9)) for g in gts]
        dets += [box(*rng.uniform(-20, 20, 2), conf=rng.uniform(0, 0.9)) for _ in range(rng.integers(0, 4))]
        base = average_precision(dets, gts, CAR)
        worse = average_precision([box(100, 100, conf=0.95)] + dets, gts, CAR)
        assert worse <= base + 1e-12


def test_min_ade_fde_examples():
    truth = np.cumsum(np.ones((6, 2)), axis=0)
    preds = np.stack([truth + [1.0, 0.0], truth + 5.0])
    assert min_ade(preds, [0.9, 0.1], truth, 1) == pytest.approx(1.0)
    assert min_ade(np.stack([truth + 5, truth]), [0.1, 0.9], truth, 1) == 0.0
    off = truth.copy()
    off[-1] += [3.0, 4.0]
    assert min_fde(off[None], [1.0], truth, 1) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        min_ade(preds, [0.5, 0.5], truth, 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 7), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_min_ade_fde_brute_force(n, t, seed):
    rng = np.random.default_rng(seed)
    preds = rng.normal(size=(n, t, 2))
    scores = rng.integers(0, 3, n).astype(float)  # many ties
    truth = rng.normal(size=(t, 2))
    for k in range(1, n + 1):
        assert min_ade(preds, scores, truth, k) == pytest.approx(brute_min(preds, scores, truth, k, False), abs=1e-12)
        assert min_fde(preds, scores, truth, k) == pytest.approx(brute_min(preds, scores, truth, k, True), abs=1e-12)
        assert min_ade(preds, scores, truth, n) <= min_ade(preds, scores, truth, k) + 1e-15
        assert min_fde(preds, scores, truth, k) >= 0


def gt_stream(frames=20):
    return [[(0, box(0.5 * f, 0)), (1, box(0.5 * f, 10))] for f in range(frames)]


def test_tracking_report_perfect_and_empty():
    gt = gt_stream()
    rep = tracking_report([[(7, b) if g == 0 else (9, b) for g, b in fr] for fr in gt], gt)
    assert rep.id_switches == 0 and rep.misses == 0 and rep.false_tracks == 0
    assert rep.mota == 1.0 and rep.coverage == {0: 1.0, 1: 1.0}
    empty = tracking_report([], gt)
    assert empty.misses == 40 and empty.matches == 0 and empty.coverage == {0: 0.0, 1: 0.0}


def test_tracking_report_counts_one_injected_swap():
    gt = gt_stream()
    tracks = []
    for f, fr in enumerate(gt):
        ids = (7, 9) if f < 10 else (9, 7)
        tracks.append([(ids[0], fr[0][1]), (ids[1], fr[1][1])])
    # one swap event changes the partner of both agents
    rep = tracking_report(tracks, gt)
    assert rep.id_switches == 2
    # swap only one agent's id to a fresh track: exactly one switch
    tracks = [[(7 if f < 10 else 8, fr[0][1]), (9, fr[1][1])] for f, fr in enumerate(gt)]
    assert tracking_report(tracks, gt).id_switches == 1


def test_tracking_report_gate_and_class():
    gt = [[(0, box(0, 0))]]
    assert tracking_report([[(1, box(2.5, 0))]], gt).misses == 1
    assert tracking_report([[(1, box(0, 0, cls=CYCLIST))]], gt).false_tracks == 1


def test_report_format_round_trip():
    recs = [("ap", "car", 0.5), ("ap", "pedestrian", None), ("id_switches", "all", 3)]
    text = write_report(recs)
    assert text.splitlines()[0] == "# fusionpred metrics report v1"
    assert write_report(list(reversed(recs))) == text
    assert read_report(text) == {("ap", "car"): 0.5, ("ap", "pedestrian"): None, ("id_switches", "all"): 3.0}
    csv_text = write_report(recs, "csv")
    assert csv_text.splitlines()[0] == "metric,class,value"
    with pytest.raises(ValueError):
        read_report("# fusionpred metrics report v9\n")
