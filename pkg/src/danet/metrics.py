"""Object keypoint similarity, COCO-style keypoint AP/AR, and PCK/PCKh."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

# per-keypoint standard deviations of the COCO keypoint benchmark; kappa = 2 * sigma
COCO_SIGMAS = np.array([.26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62, 1.07, 1.07, .87, .87, .89,
                        .89]) / 10.0
COCO_KAPPAS = 2 * COCO_SIGMAS
OKS_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, 1e10), "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, 1e10)}
MAX_DETS = 20

MPII_GROUPS = {
    "Head": (9,), "Shoulder": (12, 13), "Elbow": (11, 14), "Wrist": (10, 15),
    "Hip": (2, 3), "Knee": (1, 4), "Ankle": (0, 5),
}
MPII_MEAN_EXCLUDES = (6, 7)  # pelvis, thorax


class UndefinedOKSError(ValueError):
    """OKS needs at least one labeled ground-truth keypoint."""


@dataclass
class InstanceAnnotation:
    id: int
    image_id: int
    keypoints: np.ndarray  # [K, 3] x, y, v
    area: float = 0.0
    bbox: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    head_size: Optional[float] = None

    @property
    def num_labeled(self) -> int:
        return int(np.sum(self.keypoints[:, 2] > 0))


@dataclass
class Prediction:
    image_id: int
    keypoints: np.ndarray  # [K, 3] x, y, score
    score: float

    @property
    def area(self) -> float:
        """Area of the keypoints' bounding box (used for area-range filtering of misses)."""
        x, y = self.keypoints[:, 0], self.keypoints[:, 1]
        return float((x.max() - x.min()) * (y.max() - y.min()))


@dataclass
class EvalResult:
    """COCO summary values in [0, 1]; NaN when a split has no ground truth."""

    ap: float
    ap50: float
    ap75: float
    apm: float
    apl: float
    ar: float

    def as_dict(self) -> Dict[str, float]:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "APM": self.apm, "APL": self.apl,
                "AR": self.ar}


def oks(pred_xy: np.ndarray, gt_keypoints: np.ndarray, area: float,
        kappas: np.ndarray = COCO_KAPPAS) -> float:
    """Mean over labeled keypoints of ``exp(-d^2 / (2 * area * kappa^2))``."""
    gt = np.asarray(gt_keypoints, dtype=np.float64)
    labeled = gt[:, 2] > 0
    if not labeled.any():
        raise UndefinedOKSError("ground truth has no labeled keypoints")
    if not area > 0:
        raise ValueError(f"OKS needs a positive area, got {area}")
    p = np.asarray(pred_xy, dtype=np.float64)[:, :2]
    d2 = np.sum((p - gt[:, :2]) ** 2, axis=1)
    e = d2 / (2.0 * area * np.asarray(kappas, dtype=np.float64) ** 2)
    return float(np.mean(np.exp(-e[labeled])))


def _stable_desc(scores: Sequence[float]) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _match_image(dts: List[Prediction], gts: List[InstanceAnnotation], area_rng, thresholds, kappas):
    """Greedy matching of one image's detections (already score-sorted and capped)."""
    lo, hi = area_rng
    g_ignore = np.array([not (lo <= g.area <= hi) for g in gts], dtype=bool)
    order = np.argsort(g_ignore, kind="stable")  # non-ignored first
    gts = [gts[i] for i in order]
    g_ignore = g_ignore[order]
    ious = np.array([[oks(d.keypoints[:, :2], g.keypoints, g.area, kappas) for g in gts] for d in dts]
                    ).reshape(len(dts), len(gts))
    nt = len(thresholds)
    dt_matched = np.zeros((nt, len(dts)), bool)
    dt_ignore = np.zeros((nt, len(dts)), bool)
    for ti, t in enumerate(thresholds):
        g_taken = np.zeros(len(gts), bool)
        for di in range(len(dts)):
            best, m = min(t, 1 - 1e-10), -1
            for gi in range(len(gts)):
                if g_taken[gi]:
                    continue
                if m > -1 and not g_ignore[m] and g_ignore[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best, m = ious[di, gi], gi
            if m == -1:
                continue
            g_taken[m] = True
            dt_matched[ti, di] = True
            dt_ignore[ti, di] = g_ignore[m]
    unmatched_out = np.array([not (lo <= d.area <= hi) for d in dts], bool)
    dt_ignore |= ~dt_matched & unmatched_out[None, :]
    return dt_matched, dt_ignore, int(np.sum(~g_ignore))


def _accumulate(scores, matched, ignore, npig):
    """(101-point interpolated AP, final recall) for one threshold; NaN when npig == 0."""
    if npig == 0:
        return math.nan, math.nan
    order = _stable_desc(scores)
    m, ig = matched[order], ignore[order]
    tp = np.cumsum(m & ~ig)
    fp = np.cumsum(~m & ~ig)
    if len(tp) == 0:
        return 0.0, 0.0
    rc = tp / npig
    denom = tp + fp
    pr = np.where(denom > 0, tp / np.maximum(denom, 1), 0.0)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
    return float(np.mean(q)), float(rc[-1])


def evaluate_thresholds(preds: Sequence[Prediction], gts: Sequence[InstanceAnnotation],
                        area: str = "all", thresholds=OKS_THRESHOLDS, kappas=COCO_KAPPAS,
                        max_dets: int = MAX_DETS):
    """Per-threshold (AP, recall) arrays for one area range."""
    gts = [g for g in gts if g.num_labeled > 0]
    by_img_g: Dict[int, list] = {}
    by_img_d: Dict[int, list] = {}
    for g in gts:
        by_img_g.setdefault(g.image_id, []).append(g)
    for p in preds:
        by_img_d.setdefault(p.image_id, []).append(p)
    scores, matched, ignore = [], [], []
    npig = 0
    for img in sorted(set(by_img_g) | set(by_img_d)):
        dts = by_img_d.get(img, [])
        dts = [dts[i] for i in _stable_desc([d.score for d in dts])][:max_dets]
        m, ig, n = _match_image(dts, by_img_g.get(img, []), AREA_RANGES[area], thresholds, kappas)
        scores += [d.score for d in dts]
        matched.append(m)
        ignore.append(ig)
        npig += n
    nt = len(thresholds)
    matched = np.concatenate(matched, axis=1) if matched else np.zeros((nt, 0), bool)
    ignore = np.concatenate(ignore, axis=1) if ignore else np.zeros((nt, 0), bool)
    res = [_accumulate(scores, matched[t], ignore[t], npig) for t in range(nt)]
    return np.array([r[0] for r in res]), np.array([r[1] for r in res])


def coco_ap(preds: Sequence[Prediction], gts: Sequence[InstanceAnnotation], kappas=COCO_KAPPAS,
            max_dets: int = MAX_DETS) -> EvalResult:
    """COCO keypoint AP/AR over OKS thresholds 0.50:0.05:0.95.

    Ground truths without labeled keypoints are dropped. Within the medium and
    large splits, ground truths outside the area range are ignored.
    """
    ap_all, rc_all = evaluate_thresholds(preds, gts, "all", kappas=kappas, max_dets=max_dets)
    ap_m, _ = evaluate_thresholds(preds, gts, "medium", kappas=kappas, max_dets=max_dets)
    ap_l, _ = evaluate_thresholds(preds, gts, "large", kappas=kappas, max_dets=max_dets)

    def avg(a):
        return float(np.mean(a)) if np.all(np.isfinite(a)) else math.nan

    return EvalResult(ap=avg(ap_all), ap50=float(ap_all[0]), ap75=float(ap_all[5]), apm=avg(ap_m),
                      apl=avg(ap_l), ar=avg(rc_all))


def pck(pred_xy: np.ndarray, gt_xy: np.ndarray, visible: np.ndarray, norm: np.ndarray,
        tau: float = 0.5) -> np.ndarray:
    """Correctness flags ``dist <= tau * norm`` for [N, K] joints (False where not visible)."""
    d = np.linalg.norm(np.asarray(pred_xy, np.float64)[..., :2] - np.asarray(gt_xy, np.float64)[..., :2], axis=-1)
    thr = tau * np.asarray(norm, np.float64).reshape(-1, *([1] * (d.ndim - 1)))
    return (d <= thr) & np.asarray(visible, bool)


@dataclass
class PCKhResult:
    per_joint: np.ndarray  # [K] fractions in [0, 1]; NaN where a joint is never labeled
    mean: float  # over all labeled joints of evaluated instances
    labeled: np.ndarray  # [K] counts
    skipped: int  # instances without a head size

    def mpii_summary(self) -> Dict[str, float]:
        """Grouped MPII columns; the mean leaves out pelvis and thorax."""
        out = {}
        for name, idx in MPII_GROUPS.items():
            n = self.labeled[list(idx)]
            out[name] = float(np.nansum(self.per_joint[list(idx)] * n) / n.sum()) if n.sum() else math.nan
        keep = [k for k in range(len(self.labeled)) if k not in MPII_MEAN_EXCLUDES]
        n = self.labeled[keep]
        out["Mean"] = float(np.nansum(self.per_joint[keep] * n) / n.sum()) if n.sum() else math.nan
        return out


def pckh(pred_xy: Sequence[np.ndarray], gts: Sequence[InstanceAnnotation], tau: float = 0.5) -> PCKhResult:
    """Fraction of labeled joints within ``tau * head_size``; instances without one are skipped."""
    keep = [i for i, g in enumerate(gts) if g.head_size is not None and g.head_size > 0]
    skipped = len(gts) - len(keep)
    if not keep:
        k = gts[0].keypoints.shape[0] if gts else 0
        return PCKhResult(np.full(k, math.nan), math.nan, np.zeros(k, int), skipped)
    p = np.stack([np.asarray(pred_xy[i], np.float64)[:, :2] for i in keep])
    g = np.stack([gts[i].keypoints for i in keep]).astype(np.float64)
    vis = g[..., 2] > 0
    ok = pck(p, g[..., :2], vis, np.array([gts[i].head_size for i in keep]), tau)
    labeled = vis.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(labeled > 0, ok.sum(axis=0) / np.maximum(labeled, 1), math.nan)
    mean = float(ok.sum() / vis.sum()) if vis.sum() else math.nan
    return PCKhResult(per, mean, labeled, skipped)


def head_size_from_box(head_box: Sequence[float]) -> float:
    """MPII convention: 0.6 x the head box diagonal, box given as (x, y, w, h)."""
    _, _, w, h = head_box
    return 0.6 * math.hypot(w, h)
