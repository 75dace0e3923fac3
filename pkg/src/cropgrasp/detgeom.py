"""Box algebra, grid target encoding/decoding, scoring and NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeMismatch

DEFAULT_CONF_THRESHOLD = 0.25
DEFAULT_NMS_IOU = 0.5


@dataclass(frozen=True)
class BBox:
    """Center-size box in normalized image coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max), clipped to the unit square."""
        x0 = min(max(self.cx - self.w / 2.0, 0.0), 1.0)
        y0 = min(max(self.cy - self.h / 2.0, 0.0), 1.0)
        x1 = min(max(self.cx + self.w / 2.0, 0.0), 1.0)
        y1 = min(max(self.cy + self.h / 2.0, 0.0), 1.0)
        return x0, y0, x1, y1

    def area(self) -> float:
        x0, y0, x1, y1 = self.corners()
        return max(x1 - x0, 0.0) * max(y1 - y0, 0.0)

    def is_valid(self) -> bool:
        return (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0
                and 0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0)

    def clipped(self) -> "BBox":
        return BBox.from_corners(*self.corners())

    def to_dict(self) -> dict:
        return {"cx": float(self.cx), "cy": float(self.cy), "w": float(self.w), "h": float(self.h)}

    @classmethod
    def from_dict(cls, d: dict) -> "BBox":
        return cls(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]))


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    objectness: float
    confidence: float
    class_score: float

    def to_dict(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "confidence": float(self.confidence),
            "class_score": float(self.class_score),
            "box": self.box.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        conf = float(d["confidence"])
        return cls(BBox.from_dict(d["box"]), int(d["class_id"]), float(d.get("objectness", conf)),
                   conf, float(d["class_score"]))


@dataclass
class GridTarget:
    """S x S x (B*5 + C) layout; box slot j occupies channels 5j..5j+4 as
    (x, y, w, h, conf) with x, y relative to the cell and w, h to the image.
    Class probabilities follow the B slots."""

    S: int
    B: int
    C: int
    values: np.ndarray
    dropped: int = 0

    @property
    def depth(self) -> int:
        return self.B * 5 + self.C

    @property
    def obj_mask(self) -> np.ndarray:
        """delta_ij^obj, shape [S, S, B]."""
        return (self.values[..., 4:self.B * 5:5] > 0).astype(np.float64)

    @property
    def cell_mask(self) -> np.ndarray:
        """delta_i^obj, shape [S, S]."""
        return self.obj_mask.max(axis=-1)

    @property
    def class_probs(self) -> np.ndarray:
        return self.values[..., self.B * 5:]


def _check_unit(name: str, v: float) -> None:
    if not (0.0 <= v <= 1.0):
        raise DomainError(f"{name}={v} outside [0, 1]")


def iou(a: BBox, b: BBox) -> float:
    if a == b:
        return 1.0
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return float(min(max(inter / (area_a + area_b - inter), 0.0), 1.0))


def confidence(pr_object: float, iou_value: float) -> float:
    """Box confidence: Pr(Object) * IoU(pred, truth)."""
    _check_unit("pr_object", pr_object)
    _check_unit("iou", iou_value)
    return pr_object * iou_value


def class_score(pr_class_given_object: float, conf: float) -> float:
    """Class-specific score: Pr(Class_i | Object) * confidence."""
    _check_unit("pr_class_given_object", pr_class_given_object)
    _check_unit("confidence", conf)
    return pr_class_given_object * conf


def cell_of(cx: float, cy: float, S: int) -> tuple[int, int]:
    """(row, col) of the grid cell containing a normalized point."""
    col = min(max(int(np.floor(cx * S)), 0), S - 1)
    row = min(max(int(np.floor(cy * S)), 0), S - 1)
    return row, col


def encode_grid(objects: Iterable[tuple[BBox, int]], S: int, B: int, C: int) -> GridTarget:
    """Assign each object to the cell holding its center, first come first served.

    Objects whose cell is already taken are dropped and counted.
    """
    values = np.zeros((S, S, B * 5 + C), dtype=np.float64)
    dropped = 0
    for box, cls in objects:
        if not 0 <= cls < C:
            raise DomainError(f"class id {cls} outside [0, {C})")
        row, col = cell_of(box.cx, box.cy, S)
        if values[row, col, 4] > 0:
            dropped += 1
            continue
        values[row, col, 0:5] = (box.cx * S - col, box.cy * S - row, box.w, box.h, 1.0)
        values[row, col, B * 5 + cls] = 1.0
    return GridTarget(S, B, C, values, dropped)


def decode_predictions(pred, threshold: float, B: int) -> list[Detection]:
    """Turn an [S, S, B*5 + C] grid into scored, image-normalized detections.

    Zero-confidence slots never produce a detection, whatever the threshold.
    """
    arr = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != arr.shape[1] or arr.shape[2] <= B * 5:
        raise ShapeMismatch(f"prediction shape {arr.shape} is not [S, S, {B}*5 + C]")
    S = arr.shape[0]
    probs = np.clip(arr[..., B * 5:], 0.0, 1.0)
    cls = probs.argmax(axis=-1)
    dets: list[Detection] = []
    for row in range(S):
        for col in range(S):
            c = int(cls[row, col])
            p = float(probs[row, col, c])
            for j in range(B):
                x, y, w, h, conf = arr[row, col, 5 * j:5 * j + 5]
                conf = min(max(float(conf), 0.0), 1.0)
                score = p * conf
                if conf <= 0.0 or score < threshold:
                    continue
                cx = min(max((col + x) / S, 0.0), 1.0)
                cy = min(max((row + y) / S, 0.0), 1.0)
                w = min(max(float(w), 0.0), 1.0)
                h = min(max(float(h), 0.0), 1.0)
                box = BBox(cx, cy, w, h).clipped()
                dets.append(Detection(box, c, conf, conf, score))
    return dets


def _rank_key(d: Detection) -> tuple:
    return (-d.confidence, d.class_id, d.box.cx, d.box.cy)


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy per-class suppression; a box is removed when its IoU with a
    kept same-class box is strictly greater than ``iou_threshold``."""
    if not 0.0 < iou_threshold <= 1.0:
        raise DomainError(f"iou_threshold={iou_threshold} outside (0, 1]")
    by_class: dict[int, list[Detection]] = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    kept: list[Detection] = []
    for group in by_class.values():
        chosen: list[Detection] = []
        for d in sorted(group, key=_rank_key):
            if all(iou(d.box, k.box) <= iou_threshold for k in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return sorted(kept, key=_rank_key)


def detections_to_json(dets: Sequence[Detection]) -> list[dict]:
    return [d.to_dict() for d in dets]
