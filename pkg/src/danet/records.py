"""Annotation and prediction interchange files.

Annotations are a minimal COCO-keypoints JSON document::

    {"images": [{"id", "width", "height"}],
     "annotations": [{"id", "image_id", "bbox", "area", "keypoints", "num_keypoints",
                      "head_size" | "head_box"}]}

``keypoints`` is the flat COCO list ``[x1, y1, v1, x2, ...]``. ``head_size``
(or an ``[x, y, w, h]`` ``head_box``) is only needed for PCKh. Unknown fields
are ignored.

Predictions are JSON lines, one instance each, keys in this order::

    {"image_id": 1, "id": 7, "box": [x, y, w, h], "score": 0.9, "keypoints": [[x, y, s], ...]}

``id`` names the annotation the prediction is for (needed for PCKh only) and
``box`` is informational; both may be null. ``score`` defaults to the mean
keypoint score when absent.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .codec import KeypointSet
from .fileio import atomic_write_text
from .metrics import InstanceAnnotation, Prediction, head_size_from_box


class RecordError(ValueError):
    """A record violates the interchange schema; ``index`` is 0-based."""

    def __init__(self, kind: str, index: int, message: str):
        self.kind = kind
        self.index = index
        super().__init__(f"{kind} record {index}: {message}")


def _number(v, what: str, kind: str, index: int) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise RecordError(kind, index, f"{what} must be a finite number, got {v!r}")
    return float(v)


def _int(v, what: str, kind: str, index: int) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise RecordError(kind, index, f"{what} must be an integer, got {v!r}")
    return v


def _numbers(v, n: Optional[int], what: str, kind: str, index: int) -> List[float]:
    if not isinstance(v, list) or (n is not None and len(v) != n):
        raise RecordError(kind, index, f"{what} must be a list of {n if n is not None else 'some'} numbers")
    return [_number(x, what, kind, index) for x in v]


def parse_annotation(rec, index: int) -> InstanceAnnotation:
    kind = "annotation"
    if not isinstance(rec, dict):
        raise RecordError(kind, index, "expected an object")
    for key in ("id", "image_id", "keypoints"):
        if key not in rec:
            raise RecordError(kind, index, f"missing field {key!r}")
    flat = _numbers(rec["keypoints"], None, "keypoints", kind, index)
    if not flat or len(flat) % 3:
        raise RecordError(kind, index, f"keypoints length {len(flat)} is not a positive multiple of 3")
    kp = np.array(flat, np.float64).reshape(-1, 3)
    if not np.all(np.isin(kp[:, 2], (0, 1, 2))):
        raise RecordError(kind, index, "keypoint visibility flags must be 0, 1 or 2")
    bbox = tuple(_numbers(rec.get("bbox", [0, 0, 0, 0]), 4, "bbox", kind, index))
    area = _number(rec.get("area", bbox[2] * bbox[3]), "area", kind, index)
    if area < 0:
        raise RecordError(kind, index, f"area must be >= 0, got {area}")
    head = None
    if rec.get("head_size") is not None:
        head = _number(rec["head_size"], "head_size", kind, index)
    elif rec.get("head_box") is not None:
        head = head_size_from_box(_numbers(rec["head_box"], 4, "head_box", kind, index))
    return InstanceAnnotation(id=_int(rec["id"], "id", kind, index),
                              image_id=_int(rec["image_id"], "image_id", kind, index),
                              keypoints=kp, area=area, bbox=bbox, head_size=head)


def load_annotations(path: Union[str, Path]) -> List[InstanceAnnotation]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RecordError("annotation file", 0, f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("annotations"), list):
        raise RecordError("annotation file", 0, "expected an object with an 'annotations' list")
    anns = [parse_annotation(r, i) for i, r in enumerate(doc["annotations"])]
    ids = [a.id for a in anns]
    if len(set(ids)) != len(ids):
        dup = next(i for i, a in enumerate(anns) if ids.count(a.id) > 1)
        raise RecordError("annotation", dup, f"duplicate id {anns[dup].id}")
    return anns


def annotation_record(ann: InstanceAnnotation) -> dict:
    rec = {"id": ann.id, "image_id": ann.image_id, "bbox": [float(v) for v in ann.bbox],
           "area": float(ann.area), "keypoints": [float(v) for v in ann.keypoints.reshape(-1)],
           "num_keypoints": ann.num_labeled}
    if ann.head_size is not None:
        rec["head_size"] = float(ann.head_size)
    return rec


def write_annotations(anns: Sequence[InstanceAnnotation], path: Union[str, Path],
                      images: Sequence[dict] = ()) -> None:
    doc = {"images": list(images), "annotations": [annotation_record(a) for a in anns]}
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def prediction_record(kps: KeypointSet, image_id: int = 0, ann_id: Optional[int] = None,
                      box: Optional[Sequence[float]] = None, score: Optional[float] = None) -> dict:
    rows = [[float(x), float(y), float(s)] for x, y, s in kps.as_rows()]
    if score is None:
        score = float(np.mean([r[2] for r in rows]))
    return {"image_id": image_id, "id": ann_id, "box": None if box is None else [float(v) for v in box],
            "score": float(score), "keypoints": rows}


def dump_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r) + "\n" for r in records)


def parse_prediction(rec, index: int) -> Tuple[Prediction, Optional[int]]:
    """(prediction, annotation id or None)."""
    kind = "prediction"
    if not isinstance(rec, dict):
        raise RecordError(kind, index, "expected an object")
    for key in ("image_id", "keypoints"):
        if key not in rec:
            raise RecordError(kind, index, f"missing field {key!r}")
    rows = rec["keypoints"]
    if not isinstance(rows, list) or not rows:
        raise RecordError(kind, index, "keypoints must be a non-empty list of [x, y, score]")
    kp = np.array([_numbers(r, 3, "keypoint", kind, index) for r in rows], np.float64)
    score = rec.get("score")
    score = float(kp[:, 2].mean()) if score is None else _number(score, "score", kind, index)
    ann_id = rec.get("id")
    if ann_id is not None:
        ann_id = _int(ann_id, "id", kind, index)
    return Prediction(image_id=_int(rec["image_id"], "image_id", kind, index), keypoints=kp, score=score), ann_id


def load_predictions(path: Union[str, Path]) -> List[Tuple[Prediction, Optional[int]]]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordError("prediction", len(out), f"invalid JSON on line {i + 1}: {exc.msg}") from None
        out.append(parse_prediction(rec, len(out)))
    return out


def pair_by_id(preds: Sequence[Tuple[Prediction, Optional[int]]],
               anns: Sequence[InstanceAnnotation]) -> List[Optional[np.ndarray]]:
    """Predicted xy per annotation (None where no prediction names it)."""
    index: Dict[int, int] = {a.id: i for i, a in enumerate(anns)}
    out: List[Optional[np.ndarray]] = [None] * len(anns)
    for j, (p, ann_id) in enumerate(preds):
        if ann_id is None:
            raise RecordError("prediction", j, "PCKh needs the annotation 'id' on every prediction")
        if ann_id not in index:
            raise RecordError("prediction", j, f"id {ann_id} matches no annotation")
        i = index[ann_id]
        if out[i] is not None:
            raise RecordError("prediction", j, f"second prediction for annotation {ann_id}")
        if p.keypoints.shape[0] != anns[i].keypoints.shape[0]:
            raise RecordError("prediction", j, f"{p.keypoints.shape[0]} keypoints, annotation has "
                                               f"{anns[i].keypoints.shape[0]}")
        out[i] = p.keypoints[:, :2]
    return out
