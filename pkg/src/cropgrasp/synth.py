"""Synthetic crop scenes: generation, rasterization, labels, augmentation, datasets."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .detgeom import BBox, cell_of
from .errors import ConfigInvalid, DegenerateCrop, EmptyMask, FormatVersionMismatch, IoFailure
from .tensor import load_tensor, save_tensor

MANIFEST_VERSION = 1
SHAPES = ("ellipse", "capsule", "polygon")

# Saturated crop colours over a low-saturation soil background.
PALETTE = (
    (0.85, 0.18, 0.12),  # tomato
    (0.20, 0.62, 0.18),  # cucumber
    (0.95, 0.72, 0.10),  # pepper
    (0.55, 0.20, 0.65),
    (0.95, 0.45, 0.05),
    (0.15, 0.45, 0.80),
)


class GraspTarget(NamedTuple):
    """Grasp segment endpoints in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def midpoint(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self._asdict().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GraspTarget":
        return cls(float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]))


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    image_size: int = 64
    min_scale: float = 0.12
    max_scale: float = 0.22
    retry_budget: int = 100
    # centers of two objects never share a cell of this grid (None disables)
    distinct_cells: int | None = 8
    gap: float = 0.01
    texture: float = 0.04

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigInvalid("num_classes must be >= 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigInvalid("object count range is empty")
        if not 0 < self.min_scale <= self.max_scale < 0.5:
            raise ConfigInvalid("scale range must satisfy 0 < min <= max < 0.5")
        if self.image_size < 16:
            raise ConfigInvalid("image_size must be >= 16")
        if self.retry_budget < 1:
            raise ConfigInvalid("retry_budget must be >= 1")


@dataclass(frozen=True)
class SceneObject:
    """One crop instance. ``params`` are in a local frame whose extent is
    bounded by the unit disc; world = center + scale * R(angle) @ local."""

    class_id: int
    shape: str
    params: tuple
    color: tuple[float, float, float]
    texture: float
    center: tuple[float, float]
    angle: float
    scale: float


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    background: tuple[float, float, float]
    seed: int


@dataclass
class ObjectLabel:
    class_id: int
    box: BBox
    grasp: GraspTarget
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"class_id": int(self.class_id), "box": self.box.to_dict(), "grasp": self.grasp.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectLabel":
        return cls(int(d["class_id"]), BBox.from_dict(d["box"]), GraspTarget.from_dict(d["grasp"]))


class RasterObject(NamedTuple):
    mask: np.ndarray
    box: BBox
    class_id: int


# ---------------------------------------------------------------- generation


def _shape_params(shape: str, rng: np.random.Generator) -> tuple:
    if shape == "ellipse":
        return (1.0, float(rng.uniform(0.65, 1.0)))
    if shape == "capsule":
        r = float(rng.uniform(0.32, 0.45))
        return (1.0 - r, r)
    n = int(rng.integers(5, 8))
    phase = float(rng.uniform(0, 2 * np.pi / n))
    squash = float(rng.uniform(0.75, 1.0))
    verts = tuple((math.cos(phase + 2 * np.pi * k / n), squash * math.sin(phase + 2 * np.pi * k / n))
                  for k in range(n))
    return verts


def generate_scene(config: GeneratorConfig, seed: int) -> Scene:
    """Deterministic in (config, seed). Poses are rejection-sampled until
    their bounding discs are disjoint; an object that cannot be placed
    within the retry budget is skipped."""
    config.validate()
    rng = np.random.default_rng(seed)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    bg = tuple(float(v) for v in (0.42, 0.36, 0.30) + rng.uniform(-0.06, 0.06, size=3))
    placed: list[SceneObject] = []
    cells: set[tuple[int, int]] = set()
    for _ in range(count):
        cls = int(rng.integers(config.num_classes))
        shape = SHAPES[cls % len(SHAPES)]
        params = _shape_params(shape, rng)
        base = np.array(PALETTE[cls % len(PALETTE)])
        color = tuple(float(v) for v in np.clip(base + rng.uniform(-0.06, 0.06, size=3), 0, 1))
        for _attempt in range(config.retry_budget):
            scale = float(rng.uniform(config.min_scale, config.max_scale))
            cx, cy = (float(v) for v in rng.uniform(scale, 1.0 - scale, size=2))
            angle = float(rng.uniform(0, 2 * np.pi))
            if any(math.hypot(cx - o.center[0], cy - o.center[1]) < scale + o.scale + config.gap
                   for o in placed):
                continue
            if config.distinct_cells:
                cell = cell_of(cx, cy, config.distinct_cells)
                if cell in cells:
                    continue
                cells.add(cell)
            placed.append(SceneObject(cls, shape, params, color, config.texture, (cx, cy), angle, scale))
            break
    return Scene(tuple(placed), bg, int(seed))


# ---------------------------------------------------------------- raster


def _local_coords(obj: SceneObject, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    dx = xs[None, :] - obj.center[0]
    dy = ys[:, None] - obj.center[1]
    c, s = math.cos(obj.angle), math.sin(obj.angle)
    u = (c * dx + s * dy) / obj.scale
    v = (-s * dx + c * dy) / obj.scale
    return u, v


def object_mask(obj: SceneObject, H: int, W: int) -> np.ndarray:
    u, v = _local_coords(obj, H, W)
    if obj.shape == "ellipse":
        a, b = obj.params
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if obj.shape == "capsule":
        half, r = obj.params
        du = np.maximum(np.abs(u) - half, 0.0)
        return du ** 2 + v ** 2 <= r ** 2
    if obj.shape == "polygon":
        verts = np.asarray(obj.params)
        inside = np.ones(u.shape, dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, np.roll(verts, -1, axis=0)):
            inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
        return inside
    raise ConfigInvalid(f"unknown shape {obj.shape!r}")


def mask_bbox(mask: np.ndarray) -> BBox:
    """Tight normalized box of a mask, measured on pixel edges."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("mask has no set pixels")
    H, W = mask.shape
    return BBox.from_corners(cols[0] / W, rows[0] / H, (cols[-1] + 1) / W, (rows[-1] + 1) / H)


def rasterize(scene: Scene, H: int, W: int) -> tuple[np.ndarray, list[RasterObject]]:
    """Render to a [3, H, W] image in [0, 1] plus per-object masks and boxes.

    The background is flat; seeded texture noise is applied to object pixels.

    Objects whose mask is empty at this resolution are left out of the labels.
    """
    if H < 16 or W < 16:
        raise ConfigInvalid("raster size must be at least 16x16")
    rng = np.random.default_rng([scene.seed, H, W])
    img = np.empty((3, H, W), dtype=np.float64)
    img[:] = np.asarray(scene.background)[:, None, None]
    labels: list[RasterObject] = []
    for obj in scene.objects:
        mask = object_mask(obj, H, W)
        if not mask.any():
            continue
        u, v = _local_coords(obj, H, W)
        shade = 1.0 - 0.3 * np.clip(u ** 2 + v ** 2, 0.0, 1.0)
        tex = rng.normal(0.0, obj.texture, size=(H, W))
        body = np.asarray(obj.color)[:, None, None] * shade[None] + tex[None]
        img = np.where(mask[None], body, img)
        labels.append(RasterObject(mask, mask_bbox(mask), obj.class_id))
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


# ---------------------------------------------------------------- labels


def compute_grasp_label(mask: np.ndarray) -> GraspTarget:
    """Grasp segment from image moments of a binary mask.

    The centroid comes from the raw moments m10/m00, m01/m00; the segment
    runs along the principal axis of the central second moments with a
    half-length of a quarter of the mask's extent along that axis, shrunk
    symmetrically so both endpoints stay within the mask's bounding box.
    """
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise EmptyMask("cannot label an empty mask")
    H, W = mask.shape
    xs = xs.astype(np.float64)
    ys = ys.astype(np.float64)
    cx, cy = xs.mean(), ys.mean()
    mu20 = np.mean((xs - cx) ** 2)
    mu02 = np.mean((ys - cy) ** 2)
    mu11 = np.mean((xs - cx) * (ys - cy))
    theta = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    dx, dy = math.cos(theta), math.sin(theta)
    proj = (xs - cx) * dx + (ys - cy) * dy
    half = (proj.max() - proj.min() + 1.0) / 4.0
    # mask bbox in pixel-center coordinates, pixel edges included
    lo_x, hi_x = xs.min() - 0.5, xs.max() + 0.5
    lo_y, hi_y = ys.min() - 0.5, ys.max() + 0.5
    if abs(dx) > 1e-12:
        half = min(half, (cx - lo_x) / abs(dx), (hi_x - cx) / abs(dx))
    if abs(dy) > 1e-12:
        half = min(half, (cy - lo_y) / abs(dy), (hi_y - cy) / abs(dy))
    half = max(half, 0.0)
    return GraspTarget(
        (cx - half * dx + 0.5) / W,
        (cy - half * dy + 0.5) / H,
        (cx + half * dx + 0.5) / W,
        (cy + half * dy + 0.5) / H,
    )


def point_in_mask(mask: np.ndarray, x: float, y: float) -> bool:
    """Whether the pixel holding normalized point (x, y) is set."""
    H, W = mask.shape
    col = min(max(int(math.floor(x * W)), 0), W - 1)
    row = min(max(int(math.floor(y * H)), 0), H - 1)
    return bool(mask[row, col])


def labels_from_raster(objects: Sequence[RasterObject]) -> list[ObjectLabel]:
    return [ObjectLabel(o.class_id, o.box, compute_grasp_label(o.mask), o.mask) for o in objects]


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugSpec:
    p_rotate: float = 0.0
    rotation: str = "quarter"  # "quarter" or "arbitrary"
    p_crop: float = 0.0
    crop_min_scale: float = 0.75
    min_visible: float = 0.3
    p_brightness: float = 0.0
    brightness: tuple[float, float] = (-0.2, 0.2)
    p_contrast: float = 0.0
    contrast: tuple[float, float] = (0.8, 1.2)

    def validate(self) -> None:
        for p in (self.p_rotate, self.p_crop, self.p_brightness, self.p_contrast):
            if not 0.0 <= p <= 1.0:
                raise ConfigInvalid("augmentation probabilities must lie in [0, 1]")
        if self.rotation not in ("quarter", "arbitrary"):
            raise ConfigInvalid(f"unknown rotation mode {self.rotation!r}")
        if not 0.0 < self.crop_min_scale <= 1.0:
            raise ConfigInvalid("crop_min_scale must lie in (0, 1]")
        if self.brightness[0] > self.brightness[1] or self.contrast[0] > self.contrast[1]:
            raise ConfigInvalid("empty brightness or contrast range")
        if self.contrast[0] < 0:
            raise ConfigInvalid("contrast must be non-negative")


def rot90_point(x: float, y: float) -> tuple[float, float]:
    """Normalized point under one counter-clockwise quarter turn of the image."""
    return y, 1.0 - x


def _rot90_label(lab: ObjectLabel) -> ObjectLabel:
    b = lab.box
    g = lab.grasp
    p1 = rot90_point(g.x1, g.y1)
    p2 = rot90_point(g.x2, g.y2)
    mask = None if lab.mask is None else np.ascontiguousarray(np.rot90(lab.mask, 1))
    return ObjectLabel(lab.class_id, BBox(b.cy, 1.0 - b.cx, b.h, b.w), GraspTarget(*p1, *p2), mask)


def _rotate_arbitrary(image, labels, angle):
    from scipy import ndimage

    deg = math.degrees(angle)
    out = np.stack([ndimage.rotate(ch, deg, reshape=False, order=1, mode="nearest") for ch in image])
    H, W = image.shape[1:]
    c, s = math.cos(angle), math.sin(angle)

    def rot(x, y):
        # ndimage.rotate turns the array counter-clockwise as displayed
        px, py = x * W - W / 2.0, y * H - H / 2.0
        return (c * px + s * py + W / 2.0) / W, (-s * px + c * py + H / 2.0) / H

    new = []
    for lab in labels:
        g = lab.grasp
        grasp = GraspTarget(*rot(g.x1, g.y1), *rot(g.x2, g.y2))
        if lab.mask is not None:
            m = ndimage.rotate(lab.mask.astype(np.float32), deg, reshape=False, order=0) > 0.5
            if not m.any():
                continue
            new.append(ObjectLabel(lab.class_id, mask_bbox(m), compute_grasp_label(m), m))
        else:
            x0, y0, x1, y1 = lab.box.corners()
            pts = [rot(x, y) for x in (x0, x1) for y in (y0, y1)]
            xs, ys = zip(*pts)
            box = BBox.from_corners(max(min(xs), 0), max(min(ys), 0), min(max(xs), 1), min(max(ys), 1))
            new.append(ObjectLabel(lab.class_id, box, grasp, None))
    return out.astype(np.float32), new


def _crop(image, labels, x0: int, y0: int, cw: int, ch: int, min_visible: float):
    H, W = image.shape[1:]
    out = np.ascontiguousarray(image[:, y0:y0 + ch, x0:x0 + cw])

    def tx(x):
        return (x * W - x0) / cw

    def ty(y):
        return (y * H - y0) / ch

    new = []
    for lab in labels:
        if lab.mask is not None:
            total = int(lab.mask.sum())
            m = np.ascontiguousarray(lab.mask[y0:y0 + ch, x0:x0 + cw])
            visible = int(m.sum())
            if total == 0 or visible < min_visible * total:
                continue
            if visible == total:
                bx0, by0, bx1, by1 = lab.box.corners()
                g = lab.grasp
                new.append(ObjectLabel(lab.class_id, BBox.from_corners(tx(bx0), ty(by0), tx(bx1), ty(by1)),
                                       GraspTarget(tx(g.x1), ty(g.y1), tx(g.x2), ty(g.y2)), m))
            else:
                new.append(ObjectLabel(lab.class_id, mask_bbox(m), compute_grasp_label(m), m))
        else:
            bx0, by0, bx1, by1 = lab.box.corners()
            nx0, ny0 = max(tx(bx0), 0.0), max(ty(by0), 0.0)
            nx1, ny1 = min(tx(bx1), 1.0), min(ty(by1), 1.0)
            full = (tx(bx1) - tx(bx0)) * (ty(by1) - ty(by0))
            if nx1 <= nx0 or ny1 <= ny0 or full <= 0 or (nx1 - nx0) * (ny1 - ny0) < min_visible * full:
                continue
            g = lab.grasp
            p = [min(max(v, 0.0), 1.0) for v in (tx(g.x1), ty(g.y1), tx(g.x2), ty(g.y2))]
            new.append(ObjectLabel(lab.class_id, BBox.from_corners(nx0, ny0, nx1, ny1), GraspTarget(*p), None))
    return out, new


def augment(image: np.ndarray, labels: Sequence[ObjectLabel], spec: AugSpec,
            seed: int) -> tuple[np.ndarray, list[ObjectLabel]]:
    """Random rotation, crop, brightness and contrast, each with its own
    probability; box and grasp geometry follows the pixels.

    Partially cropped objects keep a label only when at least
    ``min_visible`` of their mask (or box, without masks) survives; their
    box and grasp are then recomputed from the visible mask.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    img = np.array(image, dtype=np.float32)
    labs = [replace(lab) for lab in labels]
    if rng.random() < spec.p_rotate:
        if spec.rotation == "quarter":
            k = int(rng.integers(1, 4))
            img = np.ascontiguousarray(np.rot90(img, k, axes=(1, 2)))
            for _ in range(k):
                labs = [_rot90_label(lab) for lab in labs]
        else:
            img, labs = _rotate_arbitrary(img, labs, float(rng.uniform(0, 2 * np.pi)))
    if rng.random() < spec.p_crop:
        H, W = img.shape[1:]
        s = float(rng.uniform(spec.crop_min_scale, 1.0))
        cw, ch = int(round(s * W)), int(round(s * H))
        if cw < 16 or ch < 16:
            raise DegenerateCrop(f"crop of {cw}x{ch} px is below 16 px")
        x0 = int(rng.integers(0, W - cw + 1))
        y0 = int(rng.integers(0, H - ch + 1))
        img, labs = _crop(img, labs, x0, y0, cw, ch, spec.min_visible)
    b, c = 0.0, 1.0
    if rng.random() < spec.p_brightness:
        b = float(rng.uniform(*spec.brightness))
    if rng.random() < spec.p_contrast:
        c = float(rng.uniform(*spec.contrast))
    if b != 0.0 or c != 1.0:
        img = np.clip((img - 0.5) * c + 0.5 + b, 0.0, 1.0).astype(np.float32)
    return img, labs


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a [C, H, W] or [H, W] array."""
    if out_h < 1 or out_w < 1:
        raise ConfigInvalid("target size must be at least 1x1")
    arr = np.asarray(image)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    H, W = arr.shape[1:]
    if (H, W) == (out_h, out_w):
        out = arr.copy()
        return out[0] if squeeze else out

    def axis(n_in, n_out):
        if n_out == 1:
            src = np.array([(n_in - 1) / 2.0])
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(H, out_h)
    c0, c1, fc = axis(W, out_w)
    a = arr.astype(np.float64)
    rows = a[:, r0, :] * (1 - fr)[None, :, None] + a[:, r1, :] * fr[None, :, None]
    out = rows[:, :, c0] * (1 - fc) + rows[:, :, c1] * fc
    out = out.astype(arr.dtype if arr.dtype.kind == "f" else np.float32)
    return out[0] if squeeze else out


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class DatasetConfig:
    generator: GeneratorConfig = GeneratorConfig()
    augment: AugSpec = AugSpec(p_rotate=0.5, p_crop=0.3, p_brightness=0.5, p_contrast=0.5)
    augment_train: bool = True
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def validate(self) -> None:
        self.generator.validate()
        self.augment.validate()
        if len(self.split) != 3 or any(s < 0 for s in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigInvalid("split ratios must be three non-negative numbers summing to 1")


@dataclass
class Sample:
    file: str
    mask_file: str
    split: str
    objects: list[ObjectLabel]

    def to_dict(self) -> dict:
        return {"file": self.file, "mask_file": self.mask_file, "split": self.split,
                "objects": [o.to_dict() for o in self.objects]}


@dataclass
class Manifest:
    version: int
    seed: int
    config: dict
    samples: list[Sample]
    root: Path | None = None

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def image(self, sample: Sample) -> np.ndarray:
        return load_tensor(self.root / sample.file)

    def masks(self, sample: Sample) -> list[np.ndarray]:
        """One boolean mask per labelled object, same order as ``sample.objects``."""
        lab = load_tensor(self.root / sample.mask_file)
        return [lab == k + 1 for k in range(len(sample.objects))]

    def to_json(self) -> str:
        body = {"version": self.version, "seed": self.seed, "config": self.config,
                "samples": [s.to_dict() for s in self.samples]}
        return json.dumps(body, indent=1, sort_keys=True) + "\n"


def _derive(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def split_indices(n: int, seed: int, ratios=(0.7, 0.15, 0.15)) -> list[str]:
    """train = floor(r0 n), val = floor(r1 n), test = the rest, over a seeded shuffle."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n))
    n_val = int(math.floor(ratios[1] * n))
    names = [""] * n
    for rank, i in enumerate(order):
        names[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return names


def render_sample(config: DatasetConfig, seed: int, index: int, split: str):
    """Image and labels (with masks) of dataset entry ``index``."""
    gen = config.generator
    scene = generate_scene(gen, _derive(seed, index))
    img, objs = rasterize(scene, gen.image_size, gen.image_size)
    labels = labels_from_raster(objs)
    if split == "train" and config.augment_train:
        img, labels = augment(img, labels, config.augment, _derive(seed, index, 1))
    return scene, img, labels


def build_dataset(config: DatasetConfig, n_samples: int, seed: int, out_dir) -> Manifest:
    """Generate, label, augment (train split only) and write a dataset.

    Writes ``images/*.hvst``, ``masks/*.hvst`` (object-index label maps,
    0 = background) and ``manifest.json``. Output is byte-identical for
    fixed inputs.
    """
    config.validate()
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    splits = split_indices(n_samples, seed, config.split)
    samples = []
    for i in range(n_samples):
        _, img, labels = render_sample(config, seed, i, splits[i])
        label_map = np.zeros(img.shape[1:], dtype=np.float32)
        for k, lab in enumerate(labels):
            label_map[lab.mask] = k + 1
        file, mask_file = f"images/{i:05d}.hvst", f"masks/{i:05d}.hvst"
        save_tensor(root / file, img)
        save_tensor(root / mask_file, label_map)
        samples.append(Sample(file, mask_file, splits[i], [replace(lab, mask=None) for lab in labels]))
    manifest = Manifest(MANIFEST_VERSION, int(seed), asdict(config), samples, root)
    try:
        (root / "manifest.json").write_text(manifest.to_json())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest


def load_dataset(path, validate: bool = True) -> Manifest:
    """Read ``manifest.json`` from a dataset directory; optionally check every sample."""
    root = Path(path)
    try:
        raw = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read manifest in {root}: {exc}") from exc
    if raw.get("version") != MANIFEST_VERSION:
        raise FormatVersionMismatch(f"manifest version {raw.get('version')} != {MANIFEST_VERSION}")
    try:
        samples = [Sample(s["file"], s["mask_file"], s["split"],
                          [ObjectLabel.from_dict(o) for o in s["objects"]]) for s in raw["samples"]]
        manifest = Manifest(raw["version"], int(raw["seed"]), raw["config"], samples, root)
    except (KeyError, TypeError, ValueError) as exc:
        raise IoFailure(f"malformed manifest: {exc}") from exc
    if validate:
        validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: Manifest) -> None:
    """Raise IoFailure unless every referenced file parses and labels agree with masks."""
    for s in manifest.samples:
        if s.split not in ("train", "val", "test"):
            raise IoFailure(f"{s.file}: unknown split {s.split!r}")
        img = manifest.image(s)
        if img.ndim != 3 or img.shape[0] != 3 or img.min() < 0 or img.max() > 1:
            raise IoFailure(f"{s.file}: not a [3,H,W] image in [0,1]")
        masks = manifest.masks(s)
        if masks and masks[0].shape != img.shape[1:]:
            raise IoFailure(f"{s.mask_file}: mask size differs from image")
        for lab, m in zip(s.objects, masks):
            if not m.any() or not lab.box.is_valid():
                raise IoFailure(f"{s.file}: invalid object label")
            if not point_in_mask(m, *lab.grasp.midpoint):
                raise IoFailure(f"{s.file}: grasp midpoint outside its mask")
    files = [s.file for s in manifest.samples]
    if len(set(files)) != len(files):
        raise IoFailure("duplicate sample files in manifest")


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 export of a [3, H, W] image in [0, 1]."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    rgb = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    H, W = rgb.shape[:2]
    try:
        with open(os.fspath(path), "wb") as f:
            f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
            f.write(rgb.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
