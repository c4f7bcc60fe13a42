"""Procedural co-saliency benchmark and the episode sampler.

Each class is a shape kind with its own hue band.  Every image of a class
shows one object of that class (the co-salient object) plus 0-3 distractor
objects of other classes, over a desaturated gradient background.  Training
images draw distractors from the other training classes only; held-out images
draw them from every other class.
The common object is painted last, so its mask is never occluded.
"""

from __future__ import annotations

import colorsys
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolyPath

from . import pnm
from .tensor import rng as make_rng

SHAPE_KINDS = ("disk", "square", "triangle", "ring", "cross", "star",
               "bar", "diamond", "L", "T", "H", "plus")

# hue slot per class id: the last four ids (the default eval split) sit
# between the hues of the first eight
HUE_SLOTS = (0, 2, 3, 5, 6, 8, 9, 11, 1, 4, 7, 10)
HUE_JITTER = 8.0 / 360.0
SUPERSAMPLE = 4
PIXEL_NOISE = 0.02
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class ShapeClass:
    id: int
    kind: str
    hue: tuple[float, float]          # HSV hue interval in [0, 1)
    saturation: tuple[float, float] = (0.65, 1.0)
    value: tuple[float, float] = (0.6, 1.0)


def shape_classes(n: int = 12) -> list[ShapeClass]:
    if not 2 <= n <= len(SHAPE_KINDS):
        raise ValueError(f"num_classes must be in [2, {len(SHAPE_KINDS)}]")
    out = []
    for i in range(n):
        centre = HUE_SLOTS[i] / 12.0
        out.append(ShapeClass(i, SHAPE_KINDS[i], (centre - HUE_JITTER, centre + HUE_JITTER)))
    return out


def _poly(points) -> PolyPath:
    return PolyPath(np.asarray(points, dtype=float))


def _star_points(spikes=5, outer=1.0, inner=0.42):
    ang = -np.pi / 2 + np.arange(2 * spikes) * np.pi / spikes
    rad = np.where(np.arange(2 * spikes) % 2 == 0, outer, inner)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)


_POLYS = {
    "triangle": _poly([(0, -0.95), (0.9, 0.75), (-0.9, 0.75)]),
    "star": _poly(_star_points()),
}


def _inside(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership test in object-local coordinates (unit half-extent)."""
    au, av = np.abs(u), np.abs(v)
    if kind == "disk":
        return u * u + v * v <= 1.0
    if kind == "square":
        return np.maximum(au, av) <= 0.8
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.25)
    if kind == "cross":
        a, b = np.abs(u + v) / np.sqrt(2), np.abs(u - v) / np.sqrt(2)
        return ((a <= 0.25) & (b <= 1.0)) | ((b <= 0.25) & (a <= 1.0))
    if kind == "bar":
        return (au <= 1.0) & (av <= 0.28)
    if kind == "diamond":
        return au / 0.6 + av <= 1.0
    if kind == "L":
        return (((u >= -0.8) & (u <= -0.3)) & (av <= 0.9)) | ((au <= 0.8) & (v >= 0.4) & (v <= 0.9))
    if kind == "T":
        return ((au <= 0.9) & (v >= -0.9) & (v <= -0.4)) | ((au <= 0.25) & (av <= 0.9))
    if kind == "H":
        return (av <= 0.9) & (au <= 0.85) & ((au >= 0.4) | (av <= 0.22))
    if kind == "plus":
        return ((au <= 0.25) & (av <= 0.95)) | ((av <= 0.25) & (au <= 0.95))
    if kind in _POLYS:
        pts = np.stack([u.ravel(), v.ravel()], axis=1)
        return _POLYS[kind].contains_points(pts).reshape(u.shape)
    raise KeyError(kind)


def coverage(kind: str, size: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    """Fractional pixel coverage of one object from SUPERSAMPLE² point samples."""
    s = SUPERSAMPLE
    sub = (np.arange(size * s) + 0.5) / s
    ys, xs = np.meshgrid(sub, sub, indexing="ij")
    dx, dy = xs - cx, ys - cy
    c, si = np.cos(angle), np.sin(angle)
    u = (c * dx + si * dy) / radius
    v = (-si * dx + c * dy) / radius
    hit = _inside(kind, u, v).astype(np.float64)
    return hit.reshape(size, s, size, s).mean(axis=(1, 3))


def _background(gen: np.random.Generator, size: int) -> np.ndarray:
    def dull():
        return np.array(colorsys.hsv_to_rgb(gen.random(), gen.uniform(0.0, 0.2), gen.uniform(0.35, 0.85)))

    c0, c1 = dull(), dull()
    theta = gen.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
    t = np.clip(0.5 + (xs - 0.5) * np.cos(theta) + (ys - 0.5) * np.sin(theta), 0, 1)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    coarse = gen.normal(0, 0.05, size=(5, 5))
    grid = np.linspace(0, 4, size)
    rows = np.stack([np.interp(grid, np.arange(5), r) for r in coarse])
    smooth = np.stack([np.interp(grid, np.arange(5), col) for col in rows.T], axis=1)
    return img + smooth[None]


def _object_colour(gen: np.random.Generator, cls: ShapeClass) -> np.ndarray:
    h = gen.uniform(*cls.hue) % 1.0
    return np.array(colorsys.hsv_to_rgb(h, gen.uniform(*cls.saturation), gen.uniform(*cls.value)))


def _placement(gen, size):
    radius = gen.uniform(0.12, 0.2) * size
    cx, cy = gen.uniform(radius, size - radius, size=2)
    return cx, cy, radius, gen.uniform(-25, 25) * np.pi / 180


def render_image(gen: np.random.Generator, cls: ShapeClass, classes: list[ShapeClass], size: int,
                 min_distractors: int = 0) -> tuple[np.ndarray, np.ndarray, int]:
    """One sample: (H×W×3 uint8 image, H×W {0,255} mask, distractor count).

    Distractors are drawn uniformly from ``classes`` minus ``cls``.
    """
    img = _background(gen, size)
    others = [c for c in classes if c.id != cls.id]
    if not others and min_distractors > 0:
        raise ValueError("no distractor classes available")
    n_dis = int(gen.integers(min_distractors, 4))
    cx, cy, radius, angle = _placement(gen, size)
    for _ in range(n_dis):
        dcls = others[int(gen.integers(len(others)))]
        for _attempt in range(20):
            dx, dy, dr, da = _placement(gen, size)
            if np.hypot(dx - cx, dy - cy) >= 0.9 * (dr + radius):
                break
        cov = coverage(dcls.kind, size, dx, dy, dr, da)
        img = img * (1 - cov) + _object_colour(gen, dcls)[:, None, None] * cov
    cov = coverage(cls.kind, size, cx, cy, radius, angle)
    img = img * (1 - cov) + _object_colour(gen, cls)[:, None, None] * cov
    img = img + gen.normal(0, PIXEL_NOISE, size=img.shape)
    rgb = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    mask = np.where(cov >= 0.5, 255, 0).astype(np.uint8)
    return rgb, mask, n_dis


# ------------------------------------------------------------------ dataset

@dataclass(frozen=True)
class Record:
    split: str
    class_id: int
    class_name: str
    path_img: str
    path_mask: str


@dataclass
class DatasetManifest:
    root: Path
    size: int
    num_classes: int
    seed: int
    records: list[Record]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def class_ids(self, split: str) -> list[int]:
        return sorted({r.class_id for r in self.records if r.split == split})

    def class_records(self, class_id: int, split: str | None = None) -> list[Record]:
        return [r for r in self.records if r.class_id == class_id and (split is None or r.split == split)]

    def class_name(self, class_id: int) -> str:
        return next(r.class_name for r in self.records if r.class_id == class_id)

    def load_class(self, class_id: int) -> tuple[np.ndarray, np.ndarray]:
        """All images (K×3×H×W float in [0,1]) and masks (K×1×H×W in {0,1}) of a class."""
        if class_id not in self._cache:
            recs = self.class_records(class_id)
            if not recs:
                raise KeyError(f"no records for class {class_id}")
            imgs = np.stack([pnm.read_image(self.root / r.path_img) for r in recs])
            masks = np.stack([pnm.read_mask(self.root / r.path_mask) for r in recs])
            self._cache[class_id] = (imgs.transpose(0, 3, 1, 2).astype(np.float32) / 255.0,
                                     (masks[:, None] > 0).astype(np.float32))
        return self._cache[class_id]


def train_eval_split(num_classes: int, eval_classes: int | None = None) -> dict[int, str]:
    n_eval = num_classes // 3 if eval_classes is None else eval_classes
    if not 0 <= n_eval <= num_classes - 2:
        raise ValueError("need at least two training classes")
    return {c: ("eval" if c >= num_classes - n_eval else "train") for c in range(num_classes)}


def image_seed(dataset_seed: int, class_id: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([dataset_seed, class_id, index])


def generate_dataset(root, num_classes: int = 12, per_class: int = 40, size: int = 64, seed: int = 0,
                     eval_classes: int | None = None, min_distractors: int = 0) -> DatasetManifest:
    if size < 32:
        raise ValueError("size must be >= 32")
    if not 0 <= min_distractors <= 3:
        raise ValueError("min_distractors must be in [0, 3]")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset root {root}: {e}") from e
    if not os.access(root, os.W_OK):
        raise PermissionError(f"dataset root {root} is not writable")
    classes = shape_classes(num_classes)
    split_of = train_eval_split(num_classes, eval_classes)
    records = []
    train_pool = [c for c in classes if split_of[c.id] == "train"]
    for cls in classes:
        split = split_of[cls.id]
        # held-out classes must not leak into training images, even as distractors
        pool = train_pool if split == "train" else classes
        rel = Path(split) / cls.kind
        (root / rel).mkdir(parents=True, exist_ok=True)
        for idx in range(per_class):
            gen = make_rng(image_seed(seed, cls.id, idx))
            rgb, mask, _ = render_image(gen, cls, pool, size, min_distractors)
            img_path, mask_path = rel / f"{idx:04d}.ppm", rel / f"{idx:04d}.gt.pgm"
            pnm.write_image(root / img_path, rgb)
            pnm.write_mask(root / mask_path, mask)
            records.append(Record(split, cls.id, cls.kind, img_path.as_posix(), mask_path.as_posix()))
    manifest = DatasetManifest(root, size, num_classes, seed, records)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest) -> None:
    lines = [f"size={manifest.size},num_classes={manifest.num_classes},seed={manifest.seed}"]
    lines += [f"{r.split},{r.class_id},{r.class_name},{r.path_img},{r.path_mask}" for r in manifest.records]
    (manifest.root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    lines = path.read_text().splitlines()
    try:
        header = dict(kv.split("=") for kv in lines[0].split(","))
        size, num_classes, seed = int(header["size"]), int(header["num_classes"]), int(header["seed"])
    except (IndexError, KeyError, ValueError) as e:
        raise ValueError(f"malformed manifest header in {path}") from e
    records = []
    for ln in lines[1:]:
        split, cid, name, img, mask = ln.split(",")
        rec = Record(split, int(cid), name, img, mask)
        for p in (img, mask):
            if not (root / p).exists():
                raise FileNotFoundError(f"manifest references missing file {root / p}")
        records.append(rec)
    return DatasetManifest(root, size, num_classes, seed, records)


def dataset_hash(root) -> str:
    """SHA-256 over (relative path, bytes) of every file, in sorted path order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


# ----------------------------------------------------------------- episodes

@dataclass
class ImageGroup:
    class_id: int
    indices: np.ndarray
    images: np.ndarray    # K×3×H×W
    masks: np.ndarray     # K×1×H×W
    seed: int | None = None


@dataclass
class Episode:
    group_a: ImageGroup
    group_b: ImageGroup


def sample_episode(manifest: DatasetManifest, k: int, seed, split: str = "train") -> Episode:
    """Two distinct classes, uniformly; k images from each without replacement.

    ``seed`` may be an int or a ``numpy.random.Generator`` (whose state advances).
    """
    gen = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    ids = manifest.class_ids(split)
    if len(ids) < 2:
        raise ValueError(f"split {split!r} needs at least two classes")
    ca, cb = (ids[i] for i in gen.choice(len(ids), size=2, replace=False))
    groups = []
    for c in (ca, cb):
        imgs, masks = manifest.load_class(c)
        if k > len(imgs):
            raise ValueError(f"k={k} exceeds the {len(imgs)} images of class {c}")
        idx = np.sort(gen.choice(len(imgs), size=k, replace=False))
        groups.append(ImageGroup(c, idx, imgs[idx], masks[idx], seed if isinstance(seed, int) else None))
    return Episode(*groups)
