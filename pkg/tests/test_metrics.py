"""OKS, COCO keypoint AP/AR and PCKh against closed forms and brute-force oracles."""

import math

import numpy as np
import pytest

from danet.metrics import (COCO_KAPPAS, InstanceAnnotation, Prediction, UndefinedOKSError, coco_ap,
                           head_size_from_box, oks, pck, pckh)

from oracles import coco_ap_oracle, random_scene

SCENE_SEEDS = range(20)
SCENE_SHAPES = [(p, g) for p in range(4) for g in range(1, 4)]


def rng(seed=0):
    return np.random.default_rng(seed)


def gt_from(xy, area=10000.0, ann_id=0, image_id=0, head=None):
    kp = np.column_stack([xy, np.full(len(xy), 2.0)])
    return InstanceAnnotation(id=ann_id, image_id=image_id, keypoints=kp, area=area, head_size=head)


def pred_from(xy, score=1.0, image_id=0):
    return Prediction(image_id=image_id, keypoints=np.column_stack([xy, np.ones(len(xy))]), score=score)


# -- OKS -------------------------------------------------------------------------------------

def test_oks_exact_prediction_is_one():
    xy = rng().uniform(0, 100, (17, 2))
    assert oks(xy, gt_from(xy).keypoints, 900.0) == 1.0


def test_oks_far_prediction_is_zero():
    xy = rng().uniform(0, 100, (17, 2))
    assert oks(xy + 1e6, gt_from(xy).keypoints, 900.0) == 0.0


def test_oks_closed_form_e_minus_one():
    area = 1234.5
    gt = np.zeros((17, 3))
    gt[3] = (50.0, 60.0, 2.0)
    pred = np.zeros((17, 2))
    d = math.sqrt(2 * area * COCO_KAPPAS[3] ** 2)
    pred[3] = (50.0 + d * 0.6, 60.0 + d * 0.8)
    assert abs(oks(pred, gt, area) - math.exp(-1)) <= 1e-9


def test_oks_invariant_under_translation_and_scaling():
    g = rng(1)
    for _ in range(50):
        gt = gt_from(g.uniform(0, 200, (17, 2))).keypoints
        gt[g.random(17) < 0.3, 2] = 0
        gt[0, 2] = 2
        pred = gt[:, :2] + g.normal(0, 8, (17, 2))
        area = g.uniform(500, 20000)
        base = oks(pred, gt, area)
        shift = g.uniform(-500, 500, 2)
        moved = gt.copy()
        moved[:, :2] += shift
        assert oks(pred + shift, moved, area) == pytest.approx(base, rel=1e-12)
        c = g.uniform(0.2, 5.0)
        scaled = gt.copy()
        scaled[:, :2] *= c
        assert oks(pred * c, scaled, area * c * c) == pytest.approx(base, rel=1e-12)


def test_oks_ignores_unlabeled_keypoints():
    gt = gt_from(np.zeros((17, 2))).keypoints
    gt[1:, 2] = 0
    pred = np.full((17, 2), 1e5)
    pred[0] = 0.0
    assert oks(pred, gt, 100.0) == 1.0


def test_oks_undefined_without_labels():
    gt = np.zeros((17, 3))
    with pytest.raises(UndefinedOKSError):
        oks(np.zeros((17, 2)), gt, 100.0)


# -- COCO AP -------------------------------------------------------------------------------------

def test_identical_predictions_give_ap_one():
    g = rng(2)
    gts = [gt_from(g.uniform(0, 300, (17, 2)), area=float(a), ann_id=i, image_id=i % 2)
           for i, a in enumerate([50 ** 2, 120 ** 2, 70 ** 2])]
    preds = [pred_from(x.keypoints[:, :2], score=float(s), image_id=x.image_id)
             for x, s in zip(gts, g.uniform(0, 1, 3))]
    res = coco_ap(preds, gts)
    assert res.ap == res.ap50 == res.ap75 == res.ar == 1.0
    assert res.apm == 1.0 and res.apl == 1.0


def test_no_predictions_give_ap_zero():
    res = coco_ap([], [gt_from(np.zeros((17, 2)))])
    assert res.ap == 0.0 and res.ar == 0.0


def test_area_split_at_96_squared():
    medium = gt_from(np.zeros((17, 2)) + 5, area=95.0 ** 2)
    res = coco_ap([pred_from(medium.keypoints[:, :2])], [medium])
    assert res.apm == 1.0 and math.isnan(res.apl)
    large = gt_from(np.zeros((17, 2)) + 5, area=97.0 ** 2)
    res = coco_ap([pred_from(large.keypoints[:, :2])], [large])
    assert res.apl == 1.0 and math.isnan(res.apm)


def test_three_instance_scene_with_one_miss():
    g = rng(3)
    gts = [gt_from(g.uniform(0, 300, (17, 2)), area=80.0 ** 2, ann_id=i) for i in range(3)]
    preds = [pred_from(gts[0].keypoints[:, :2] + 0.1, 0.9), pred_from(gts[1].keypoints[:, :2] - 0.1, 0.3),
             pred_from(g.uniform(1000, 1100, (17, 2)), 0.6)]
    res = coco_ap(preds, gts)
    ap, ar = coco_ap_oracle(preds, gts)
    assert res.ap == pytest.approx(ap, abs=1e-12) and res.ar == pytest.approx(ar, abs=1e-12)
    assert res.ar == pytest.approx(2 / 3)


@pytest.mark.parametrize("shape", SCENE_SHAPES, ids=lambda s: f"{s[0]}pred-{s[1]}gt")
def test_coco_ap_matches_exhaustive_oracle(shape):
    n_pred, n_gt = shape
    for seed in SCENE_SEEDS:
        preds, gts = random_scene(rng([seed, n_pred, n_gt]), n_pred, n_gt)
        res = coco_ap(preds, gts)
        ap, ar = coco_ap_oracle(preds, gts)
        assert abs(res.ap - ap) <= 1e-12 and abs(res.ar - ar) <= 1e-12, (seed, res.ap, ap)


def test_ap_invariant_under_monotone_score_maps():
    for seed in range(20):
        preds, gts = random_scene(rng(seed), 3, 3)
        base = coco_ap(preds, gts)
        for fn in (lambda s: 3 * s + 7, lambda s: math.exp(5 * s), lambda s: s ** 3 - 2):
            moved = [Prediction(p.image_id, p.keypoints, fn(p.score)) for p in preds]
            assert coco_ap(moved, gts) == base


def test_equal_scores_break_ties_by_index():
    xy = np.zeros((17, 2)) + 50
    gts = [gt_from(xy)]
    a = [pred_from(xy, 0.5), pred_from(xy + 200, 0.5)]
    b = list(reversed(a))
    assert coco_ap(a, gts).ap == 1.0 and coco_ap(b, gts).ap == 0.5


# -- PCKh ------------------------------------------------------------------------------------------

def test_pckh_exact_predictions_all_correct():
    xy = rng(4).uniform(0, 100, (16, 2))
    res = pckh([xy], [gt_from(xy, head=10.0)])
    assert res.mean == 1.0 and np.all(res.per_joint == 1.0)


def test_pckh_boundary_is_inclusive():
    xy = rng(5).integers(0, 100, (16, 2)).astype(float)
    gt = gt_from(xy, head=10.0)
    res = pckh([xy + (3.0, 4.0)], [gt], tau=0.5)
    assert res.mean == 1.0
    res = pckh([xy + (3.0, 4.0 + 1e-9)], [gt], tau=0.5)
    assert res.mean == 0.0


def test_pckh_hand_counted_four_instances():
    head = [10.0, 20.0, 8.0, None]
    gts, preds = [], []
    offsets = [
        [0, 4, 6, 5, 0],  # head 10, tau 0.5 -> threshold 5: correct, correct, wrong, correct(=), correct
        [9, 11, 0, 10, 30],  # threshold 10: correct, wrong, correct, correct, wrong
        [4, 4.5, 3, 0, 0],  # threshold 4: correct, wrong, correct, correct, unlabeled
        [0, 0, 0, 0, 0],  # skipped: no head size
    ]
    for i, (h, off) in enumerate(zip(head, offsets)):
        xy = np.full((5, 2), 20.0 * i)
        gt = gt_from(xy, head=h, ann_id=i)
        if i == 2:
            gt.keypoints[4, 2] = 0
        gts.append(gt)
        preds.append(xy + np.column_stack([off, np.zeros(5)]))
    res = pckh(preds, gts)
    assert res.skipped == 1
    np.testing.assert_array_equal(res.labeled, [3, 3, 3, 3, 2])
    np.testing.assert_allclose(res.per_joint, [1.0, 1 / 3, 2 / 3, 1.0, 0.5])
    assert res.mean == pytest.approx(10 / 14)


def test_pckh_monotone_in_tau():
    g = rng(6)
    xy = g.uniform(0, 100, (30, 16, 2))
    gts = [gt_from(x, head=float(h)) for x, h in zip(xy, g.uniform(5, 20, 30))]
    preds = [x + g.normal(0, 6, (16, 2)) for x in xy]
    vals = [pckh(preds, gts, tau).mean for tau in np.linspace(0, 2, 41)]
    assert all(a <= b for a, b in zip(vals, vals[1:])) and vals[-1] > vals[0]


def test_mpii_summary_excludes_pelvis_and_thorax():
    xy = np.zeros((16, 2))
    pred = xy.copy()
    pred[6:8] = 100.0
    res = pckh([pred], [gt_from(xy, head=10.0)])
    assert res.mean == pytest.approx(14 / 16) and res.mpii_summary()["Mean"] == 1.0


def test_pck_masks_invisible_joints():
    ok = pck(np.zeros((1, 3, 2)), np.zeros((1, 3, 2)), np.array([[True, False, True]]), np.array([1.0]))
    assert ok.tolist() == [[True, False, True]]


def test_head_size_from_box():
    assert head_size_from_box((0, 0, 30, 40)) == pytest.approx(30.0)
