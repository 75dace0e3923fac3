"""Detect -> crop -> regress grasp -> simulated vacuum grasp, plus evaluation
and the training recipes used by the CLI."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .config import Config, EvalConfig, TrainConfig
from .detgeom import BBox, Detection, decode_predictions, encode_grid, iou, nms
from .errors import ConfigInvalid, DegenerateBox, EmptyDataset, NoDetections
from .models import (
    DetectorConfig,
    GrasperConfig,
    Network,
    build_detector,
    build_grasper,
    preprocess_detector,
    preprocess_grasper,
)
from .optim import AdamState, EpochReport, fit, grasp_loss, yolo_loss
from .synth import GraspTarget, Manifest, ObjectLabel, compute_grasp_label, point_in_mask, resize_bilinear

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- stage adapters


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float32).tobytes()).hexdigest()


class NetworkDetector:
    def __init__(self, net: Network):
        self.net = net
        self.config: DetectorConfig = net.config

    def predict_grid(self, x: np.ndarray) -> np.ndarray:
        return self.net.predict(x)


class ZeroDetector:
    """Stub whose every output is zero."""

    def __init__(self, config: DetectorConfig):
        self.config = config

    def predict_grid(self, x: np.ndarray) -> np.ndarray:
        c = self.config
        return np.zeros((c.S, c.S, c.depth), dtype=np.float32)


class GroundTruthDetector:
    """Oracle that returns the encoded ground truth of images it has seen."""

    def __init__(self, config: DetectorConfig):
        self.config = config
        self._grids: dict[str, np.ndarray] = {}

    def add(self, image: np.ndarray, labels: Sequence[ObjectLabel]) -> None:
        c = self.config
        grid = encode_grid([(l.box, l.class_id) for l in labels], c.S, c.B, c.C)
        self._grids[_digest(preprocess_detector(image, c))] = grid.values

    @classmethod
    def from_manifest(cls, config: DetectorConfig, manifest: Manifest, split: str | None = None):
        oracle = cls(config)
        for s in manifest.samples:
            if split is None or s.split == split:
                oracle.add(manifest.image(s), s.objects)
        return oracle

    def predict_grid(self, x: np.ndarray) -> np.ndarray:
        c = self.config
        return self._grids.get(_digest(x), np.zeros((c.S, c.S, c.depth))).copy()


class CropContext(NamedTuple):
    """Pixel window [c0, c1) x [r0, r1) of the crop inside an H x W image."""

    c0: int
    r0: int
    c1: int
    r1: int
    H: int
    W: int
    masks: Sequence[np.ndarray] | None = None


class NetworkGrasper:
    def __init__(self, net: Network, dataset_mean=None):
        self.net = net
        self.config: GrasperConfig = net.config
        mean = dataset_mean if dataset_mean is not None else net.metadata.get("dataset_mean")
        self.dataset_mean = None if mean is None else np.asarray(mean, dtype=np.float32)

    def predict_local(self, crop: np.ndarray, ctx: CropContext, dataset_mean=None) -> np.ndarray:
        mean = self.dataset_mean if dataset_mean is None else dataset_mean
        return self.net.predict(preprocess_grasper(crop, self.config, mean))


class ConstantGrasper:
    """Stub returning fixed crop-local coordinates."""

    def __init__(self, value=(0.5, 0.5, 0.5, 0.5)):
        self.value = np.asarray(value, dtype=np.float64)

    def predict_local(self, crop, ctx, dataset_mean=None) -> np.ndarray:
        return self.value.copy()


class CentroidOracleGrasper:
    """Grasp label of the ground-truth mask that best fills the crop window."""

    def predict_local(self, crop, ctx: CropContext, dataset_mean=None) -> np.ndarray:
        if not ctx.masks:
            raise ConfigInvalid("the centroid oracle needs the scene masks")
        inside = [int(m[ctx.r0:ctx.r1, ctx.c0:ctx.c1].sum()) for m in ctx.masks]
        best = int(np.argmax(inside))
        if inside[best] == 0:
            return np.full(4, 0.5)
        g = compute_grasp_label(ctx.masks[best])
        return np.array(to_local(g, ctx))


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class GraspPlan:
    detection: Detection
    grasp: GraspTarget
    contact_point: tuple[float, float]

    def to_dict(self) -> dict:
        return {"detection": self.detection.to_dict(), "grasp": self.grasp.to_dict(),
                "contact_point": [float(v) for v in self.contact_point]}


@dataclass(frozen=True)
class GraspResult:
    success: bool
    matched_object: int | None
    contact_point: tuple[float, float]

    def to_dict(self) -> dict:
        return {"success": bool(self.success), "matched_object": self.matched_object,
                "contact_point": [float(v) for v in self.contact_point]}


@dataclass
class EvalReport:
    per_class_ap: dict[str, float | None]
    map: float
    grasp_success_rate: float | None
    tp: int
    fp: int
    fn: int
    n_ground_truth: int
    grasp_successes: int
    config_digest: str = ""
    checkpoint_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "per_class_ap": self.per_class_ap,
            "map": self.map,
            "grasp_success_rate": self.grasp_success_rate,
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                       "ground_truth": self.n_ground_truth, "grasp_successes": self.grasp_successes},
            "config_digest": self.config_digest,
            "checkpoint_digest": self.checkpoint_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------- operations


def detect(image: np.ndarray, detector, threshold: float = 0.25, iou_threshold: float = 0.5) -> list[Detection]:
    x = preprocess_detector(image, detector.config)
    grid = detector.predict_grid(x)
    return nms(decode_predictions(grid, threshold, detector.config.B), iou_threshold)


def crop_window(box: BBox, H: int, W: int, expand: float = 0.1) -> tuple[int, int, int, int]:
    """Pixel window around ``box`` grown by ``expand`` of its size on each side."""
    x0, y0, x1, y1 = box.corners()
    if (x1 - x0) * W < 1.0 or (y1 - y0) * H < 1.0:
        raise DegenerateBox(f"box {box} is below one pixel")
    dw, dh = expand * (x1 - x0), expand * (y1 - y0)
    x0, x1 = max(x0 - dw, 0.0), min(x1 + dw, 1.0)
    y0, y1 = max(y0 - dh, 0.0), min(y1 + dh, 1.0)
    c0 = min(int(math.floor(x0 * W + 1e-9)), W - 1)
    r0 = min(int(math.floor(y0 * H + 1e-9)), H - 1)
    c1 = max(int(math.ceil(x1 * W - 1e-9)), c0 + 1)
    r1 = max(int(math.ceil(y1 * H - 1e-9)), r0 + 1)
    return c0, r0, min(c1, W), min(r1, H)


def to_local(g: GraspTarget, ctx: CropContext) -> tuple[float, float, float, float]:
    cw, ch = ctx.c1 - ctx.c0, ctx.r1 - ctx.r0
    return ((g.x1 * ctx.W - ctx.c0) / cw, (g.y1 * ctx.H - ctx.r0) / ch,
            (g.x2 * ctx.W - ctx.c0) / cw, (g.y2 * ctx.H - ctx.r0) / ch)


def to_image(local, ctx: CropContext) -> GraspTarget:
    cw, ch = ctx.c1 - ctx.c0, ctx.r1 - ctx.r0
    lx1, ly1, lx2, ly2 = (float(v) for v in local)
    vals = ((ctx.c0 + lx1 * cw) / ctx.W, (ctx.r0 + ly1 * ch) / ctx.H,
            (ctx.c0 + lx2 * cw) / ctx.W, (ctx.r0 + ly2 * ch) / ctx.H)
    return GraspTarget(*(min(max(v, 0.0), 1.0) for v in vals))


def plan_grasp(image: np.ndarray, det: Detection | None, grasper, dataset_mean=None, *,
               expand: float = 0.1, masks: Sequence[np.ndarray] | None = None) -> GraspPlan:
    """Crop around the detection, regress the local grasp segment and map it
    back to full-image coordinates; the contact point is the segment
    midpoint clamped into the detection box."""
    if det is None:
        raise NoDetections("no detection to plan a grasp for")
    H, W = image.shape[1:]
    c0, r0, c1, r1 = crop_window(det.box, H, W, expand)
    ctx = CropContext(c0, r0, c1, r1, H, W, masks)
    local = grasper.predict_local(image[:, r0:r1, c0:c1], ctx, dataset_mean)
    grasp = to_image(local, ctx)
    bx0, by0, bx1, by1 = det.box.corners()
    mx, my = grasp.midpoint
    contact = (min(max(mx, bx0), bx1), min(max(my, by0), by1))
    return GraspPlan(det, grasp, contact)


def _mask_and_class(obj) -> tuple[np.ndarray, int]:
    if hasattr(obj, "mask"):
        return obj.mask, int(obj.class_id)
    mask, cls = obj
    return mask, int(cls)


def execute_grasp(scene_labels: Sequence, plan: GraspPlan) -> GraspResult:
    """Vacuum grasp succeeds iff the contact pixel lies on an object of the detected class."""
    x, y = plan.contact_point
    for idx, obj in enumerate(scene_labels):
        mask, cls = _mask_and_class(obj)
        if cls == plan.detection.class_id and point_in_mask(mask, x, y):
            return GraspResult(True, idx, plan.contact_point)
    return GraspResult(False, None, plan.contact_point)


def average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve.

    ``tp_flags`` must already be in descending-confidence order.
    """
    if n_gt == 0:
        raise EmptyDataset("AP is undefined without ground truth")
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=np.float64))
    if tp.size == 0:
        return 0.0
    rec = np.concatenate(([0.0], tp / n_gt, [1.0]))
    prec = np.concatenate(([0.0], tp / np.maximum(tp + fp, 1e-12), [0.0]))
    for i in range(prec.size - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    idx = np.flatnonzero(rec[1:] != rec[:-1]) + 1
    return float(np.sum((rec[idx] - rec[idx - 1]) * prec[idx]))


def match_detections(dets_per_image: Sequence[Sequence[Detection]],
                     gts_per_image: Sequence[Sequence[ObjectLabel]], iou_threshold: float = 0.5):
    """Greedy matching in descending confidence over the whole set.

    Returns a list of (image index, detection, matched gt index or None),
    in the ranking order used for AP.
    """
    ranked = [(img, k, d) for img, dets in enumerate(dets_per_image) for k, d in enumerate(dets)]
    ranked.sort(key=lambda t: (-t[2].confidence, t[0], t[1]))
    used: set[tuple[int, int]] = set()
    out = []
    for img, _, d in ranked:
        best, best_iou = None, iou_threshold
        for g, gt in enumerate(gts_per_image[img]):
            if gt.class_id != d.class_id or (img, g) in used:
                continue
            v = iou(d.box, gt.box)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        if best is not None:
            used.add((img, best))
        out.append((img, d, best))
    return out


def evaluate(manifest: Manifest, split: str, detector, grasper, thresholds: EvalConfig | None = None,
             *, num_classes: int | None = None, config_digest: str = "",
             checkpoint_digest: str = "") -> EvalReport:
    th = thresholds or EvalConfig()
    samples = manifest.split(split) if isinstance(split, str) else list(split)
    if not samples:
        raise EmptyDataset(f"split {split!r} is empty")
    C = num_classes if num_classes is not None else detector.config.C
    images = [manifest.image(s) for s in samples]
    masks = [manifest.masks(s) for s in samples]
    gts = [s.objects for s in samples]
    dets = [detect(img, detector, th.conf_threshold, th.nms_iou) for img in images]
    matched = match_detections(dets, gts, th.match_iou)

    per_class: dict[str, float | None] = {}
    for c in range(C):
        n_gt = sum(1 for g in gts for o in g if o.class_id == c)
        flags = [m is not None for _, d, m in matched if d.class_id == c]
        per_class[str(c)] = average_precision(flags, n_gt) if n_gt else None
    aps = [v for v in per_class.values() if v is not None]

    tp = sum(m is not None for _, _, m in matched)
    fp = len(matched) - tp
    n_gt = sum(len(g) for g in gts)
    successes = 0
    for img_idx, d, m in matched:
        if m is None:
            continue
        labels = [(mk, o.class_id) for mk, o in zip(masks[img_idx], gts[img_idx])]
        try:
            plan = plan_grasp(images[img_idx], d, grasper, expand=th.crop_expand, masks=masks[img_idx])
        except DegenerateBox:
            continue
        successes += execute_grasp(labels, plan).success
    return EvalReport(
        per_class_ap=per_class,
        map=float(np.mean(aps)) if aps else 0.0,
        grasp_success_rate=(successes / tp) if tp else None,
        tp=tp, fp=fp, fn=n_gt - tp, n_ground_truth=n_gt, grasp_successes=successes,
        config_digest=config_digest, checkpoint_digest=checkpoint_digest,
    )


# ---------------------------------------------------------------- training recipes


def detector_samples(manifest: Manifest, split: str, cfg: DetectorConfig):
    out = []
    for s in manifest.split(split):
        x = preprocess_detector(manifest.image(s), cfg)
        out.append((x, encode_grid([(o.box, o.class_id) for o in s.objects], cfg.S, cfg.B, cfg.C)))
    return out


def _jitter(box: BBox, rng: np.random.Generator, amount: float) -> BBox:
    j = rng.uniform(-amount, amount, size=4)
    return BBox(box.cx + j[0] * box.w, box.cy + j[1] * box.h,
                box.w * (1 + j[2]), box.h * (1 + j[3])).clipped()


def grasper_crops(manifest: Manifest, split: str, tc: TrainConfig, seed: int, expand: float = 0.1):
    """(raw crop, local target) pairs; the first crop per object uses the exact box."""
    rng = np.random.default_rng(seed)
    out = []
    for s in manifest.split(split):
        img = manifest.image(s)
        H, W = img.shape[1:]
        for o in s.objects:
            for k in range(tc.crops_per_object):
                box = o.box if k == 0 else _jitter(o.box, rng, tc.box_jitter)
                try:
                    c0, r0, c1, r1 = crop_window(box, H, W, expand)
                except DegenerateBox:
                    continue
                ctx = CropContext(c0, r0, c1, r1, H, W)
                target = np.clip(to_local(o.grasp, ctx), 0.0, 1.0)
                out.append((img[:, r0:r1, c0:c1], target))
    return out


def crop_mean(crops, cfg: GrasperConfig) -> np.ndarray:
    """Per-channel mean of the resized grasper inputs."""
    d = cfg.input_size
    if not crops:
        raise EmptyDataset("no crops to average")
    return np.mean([resize_bilinear(c, d, d).astype(np.float64).mean(axis=(1, 2)) for c, _ in crops], axis=0)


def train_detector(manifest: Manifest, config: Config, seed: int,
                   on_epoch: Callable[[EpochReport], None] | None = None):
    cfg, tc = config.detector, config.train_detector
    samples = detector_samples(manifest, "train", cfg)
    if not samples:
        raise EmptyDataset("training split is empty")
    net = build_detector(cfg, seed)
    params = config.yolo_loss

    def loss_fn(model, batch):
        stats: dict = {}
        x = np.stack([b[0] for b in batch])
        loss = yolo_loss(model(x), [b[1] for b in batch], params, reduction="mean", stats=stats)
        return loss, stats.get("clamped_sqrt", 0)

    state = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    reports = fit(net, samples, loss_fn, state, tc.epochs, tc.batch_size, seed, on_epoch)
    net.metadata = {"epochs": tc.epochs, "final_loss": reports[-1].mean_loss if reports else None,
                    "seed": seed, "config_digest": config.digest()}
    return net, reports


def train_grasper(manifest: Manifest, config: Config, seed: int,
                  on_epoch: Callable[[EpochReport], None] | None = None):
    cfg, tc = config.grasper, config.train_grasper
    crops = grasper_crops(manifest, "train", tc, seed, config.eval.crop_expand)
    mean = crop_mean(crops, cfg)
    samples = [(preprocess_grasper(c, cfg, mean), t) for c, t in crops]
    net = build_grasper(cfg, seed)
    params = config.grasp_loss

    def loss_fn(model, batch):
        x = np.stack([b[0] for b in batch])
        t = np.stack([b[1] for b in batch])
        return grasp_loss(model(x), t, model.weights(), params, reduction="mean")

    state = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    reports = fit(net, samples, loss_fn, state, tc.epochs, tc.batch_size, seed, on_epoch)
    net.metadata = {"epochs": tc.epochs, "final_loss": reports[-1].mean_loss if reports else None,
                    "seed": seed, "config_digest": config.digest(),
                    "dataset_mean": [float(v) for v in mean]}
    return net, reports


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
