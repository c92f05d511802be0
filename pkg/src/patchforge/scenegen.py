"""Synthetic labeled scenes: anti-aliased geometric shapes on textured backgrounds."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image as PILImage

SHAPES = ("circle", "square", "triangle", "star")
BACKGROUNDS = ("flat", "gradient", "noise", "mixed")
MAX_ATTEMPTS = 1000


class Box(NamedTuple):
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def coords(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    classes: tuple = SHAPES
    objects_per_image: tuple = (1, 4)
    min_object_size: int = 16
    max_object_size: int = 48
    background: str = "mixed"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "objects_per_image", tuple(int(v) for v in self.objects_per_image))
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shape kinds: {sorted(unknown)}")
        if not 0 < self.min_object_size <= self.max_object_size <= self.image_size:
            raise ValueError("need 0 < min_object_size <= max_object_size <= image_size")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image must be a non-empty range")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")

    @property
    def num_classes(self):
        return len(self.classes)

    def to_dict(self):
        return {
            "image_size": str(self.image_size),
            "classes": ",".join(self.classes),
            "objects_per_image": f"{self.objects_per_image[0]}..{self.objects_per_image[1]}",
            "min_object_size": str(self.min_object_size),
            "max_object_size": str(self.max_object_size),
            "background": self.background,
        }

    @classmethod
    def from_dict(cls, d):
        kw = {}
        if "image_size" in d:
            kw["image_size"] = int(d["image_size"])
        if "classes" in d:
            kw["classes"] = tuple(c for c in d["classes"].split(",") if c)
        if "objects_per_image" in d:
            lo, _, hi = str(d["objects_per_image"]).partition("..")
            kw["objects_per_image"] = (int(lo), int(hi or lo))
        for k in ("min_object_size", "max_object_size"):
            if k in d:
                kw[k] = int(d[k])
        if "background" in d:
            kw["background"] = d["background"]
        return cls(**kw)


# rasterization ------------------------------------------------------------------

def _star_polygon():
    ang = -np.pi / 2 + np.arange(10) * np.pi / 5
    rad = np.where(np.arange(10) % 2 == 0, 1.0, 0.4)
    pts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    # stretch so the outline touches all four sides of the unit square
    lo, hi = pts.min(0), pts.max(0)
    return (pts - lo) / (hi - lo)


_STAR = _star_polygon()


def _inside_polygon(u, v, poly):
    inside = np.zeros(u.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        (xa, ya), (xb, yb) = poly[i], poly[(i + 1) % n]
        crosses = (ya > v) != (yb > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = xa + (v - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (u < xint)
    return inside


def _inside(kind, u, v):
    if kind == "square":
        return np.ones(u.shape, dtype=bool)
    if kind == "circle":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if kind == "triangle":
        return np.abs(u - 0.5) <= v / 2
    if kind == "star":
        return _inside_polygon(u, v, _STAR)
    raise ValueError(kind)


def coverage(kind, x0, y0, w, h, image_size):
    """Fractional pixel coverage of a shape inscribed in the box (x0, y0, x0+w, y0+h).

    Each pixel is sampled at the four points (+0.25, +0.75) in x and y.
    Returns (alpha image, tight pixel box or None when nothing is covered).
    """
    alpha = np.zeros((image_size, image_size), dtype=np.float64)
    xs = x0 + (np.arange(2 * w) + 0.5) / 2
    ys = y0 + (np.arange(2 * h) + 0.5) / 2
    u, v = np.meshgrid((xs - x0) / w, (ys - y0) / h)
    hit = _inside(kind, u, v).astype(np.float64)
    cov = hit.reshape(h, 2, w, 2).mean(axis=(1, 3))
    alpha[y0: y0 + h, x0: x0 + w] = cov
    rows, cols = np.nonzero(cov)
    if rows.size == 0:
        return alpha, None
    return alpha, (x0 + cols.min(), y0 + rows.min(), x0 + cols.max() + 1, y0 + rows.max() + 1)


def _background(rng, kind, n):
    if kind == "mixed":
        kind = ("flat", "gradient", "noise")[rng.integers(3)]
    if kind == "flat":
        return np.broadcast_to(rng.uniform(0, 1, 3), (n, n, 3)).copy()
    if kind == "gradient":
        a, b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        return a + ramp[..., None] * (b - a)
    coarse = rng.uniform(0, 1, (5, 5, 3))
    # bilinear upsample of a coarse grid plus a little pixel noise
    t = np.linspace(0, 4, n)
    i0 = np.minimum(t.astype(int), 3)
    f = (t - i0)[:, None]
    rowsi = coarse[i0] * (1 - f[..., None]) + coarse[i0 + 1] * f[..., None]
    fx = (t - i0)[None, :, None]
    img = rowsi[:, i0] * (1 - fx) + rowsi[:, i0 + 1] * fx
    img = 0.6 * img + 0.2 + rng.normal(0, 0.04, (n, n, 3))
    return np.clip(img, 0, 1)


def _object_color(rng, bg_mean):
    for _ in range(100):
        c = rng.uniform(0, 1, 3)
        if np.abs(c - bg_mean).sum() >= 0.6:
            return c
    return 1.0 - bg_mean


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def render_shape(image, kind, x0, y0, size, color):
    """Composite one shape in place; returns its tight pixel box (or None)."""
    alpha, box = coverage(kind, x0, y0, size, size, image.shape[0])
    image *= 1.0 - alpha[..., None]
    image += alpha[..., None] * np.asarray(color)
    return box


def generate_scene(seed: int, config: SceneConfig = SceneConfig()):
    """Render one image and its labels; a pure function of (seed, config).

    Returns a float32 H×W×3 image whose values are exact multiples of 1/255 (so
    an 8-bit PNG round-trip is lossless) and a list of Box.
    """
    rng = np.random.default_rng(seed)
    n = config.image_size
    img = _background(rng, config.background, n)
    bg_mean = img.mean(axis=(0, 1))
    lo, hi = config.objects_per_image
    wanted = int(rng.integers(lo, hi + 1))
    truth: list[Box] = []
    attempts = 0
    while len(truth) < wanted and attempts < MAX_ATTEMPTS:
        attempts += 1
        cls = int(rng.integers(config.num_classes))
        size = int(rng.integers(config.min_object_size, config.max_object_size + 1))
        x0 = int(rng.integers(0, n - size + 1))
        y0 = int(rng.integers(0, n - size + 1))
        color = _object_color(rng, bg_mean)
        alpha, box = coverage(config.classes[cls], x0, y0, size, size, n)
        if box is None:
            continue
        if (box[2] - box[0]) * (box[3] - box[1]) < config.min_object_size ** 2:
            continue
        if any(box_iou(box, t.coords) > 0.5 for t in truth):
            continue
        img = img * (1.0 - alpha[..., None]) + alpha[..., None] * color
        truth.append(Box(cls, *map(float, box)))
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return img.astype(np.float32), truth


# dataset files --------------------------------------------------------------------

def format_label_line(filename, truth):
    parts = [filename, str(len(truth))]
    for b in truth:
        parts += [str(b.class_id)] + [f"{v:g}" for v in b.coords]
    return " ".join(parts)


def parse_label_line(line):
    tok = line.split()
    name, n = tok[0], int(tok[1])
    boxes = []
    for k in range(n):
        c, x1, y1, x2, y2 = tok[2 + 5 * k: 7 + 5 * k]
        boxes.append(Box(int(c), float(x1), float(y1), float(x2), float(y2)))
    return name, boxes


def save_png(path, image):
    arr = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format="PNG")


def load_png(path):
    with PILImage.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255).astype(np.float32)


def write_manifest(path, items: dict):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def read_manifest(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def generate_dataset(seed: int, config: SceneConfig, count: int, out):
    """Write `count` PNG scenes, labels.txt and manifest.txt into `out`.

    Scene i uses seed + i. On any I/O error the files written so far are removed.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        lines = []
        for i in range(count):
            img, truth = generate_scene(seed + i, config)
            name = f"img_{i:05d}.png"
            save_png(out / name, img)
            written.append(out / name)
            lines.append(format_label_line(name, truth))
        labels = out / "labels.txt"
        labels.write_text("".join(line + "\n" for line in lines))
        written.append(labels)
        manifest = {"seed": seed, "count": count, **config.to_dict()}
        write_manifest(out / "manifest.txt", manifest)
        written.append(out / "manifest.txt")
    except OSError:
        for p in written:
            try:
                os.remove(p)
            except OSError:
                pass
        raise
    return manifest


def regenerate(manifest_dir, out):
    m = read_manifest(Path(manifest_dir) / "manifest.txt")
    return generate_dataset(int(m["seed"]), SceneConfig.from_dict(m), int(m["count"]), out)


@dataclass
class Dataset:
    """In-memory labeled scenes."""

    images: np.ndarray  # N×H×W×3 float32
    truths: list = field(default_factory=list)
    names: list = field(default_factory=list)
    config: SceneConfig = SceneConfig()

    def __len__(self):
        return len(self.truths)

    def subset(self, idx):
        idx = list(idx)
        return dataclasses.replace(self, images=self.images[idx],
                                   truths=[self.truths[i] for i in idx],
                                   names=[self.names[i] for i in idx] if self.names else [])


def make_dataset(seed: int, config: SceneConfig, count: int) -> Dataset:
    """Same scenes generate_dataset would write, kept in memory."""
    n = config.image_size
    images = np.zeros((count, n, n, 3), dtype=np.float32)
    truths = []
    for i in range(count):
        images[i], t = generate_scene(seed + i, config)
        truths.append(t)
    return Dataset(images, truths, [f"img_{i:05d}.png" for i in range(count)], config)


def load_dataset(path) -> Dataset:
    path = Path(path)
    m = read_manifest(path / "manifest.txt")
    config = SceneConfig.from_dict(m)
    names, truths = [], []
    for line in (path / "labels.txt").read_text().splitlines():
        if line.strip():
            name, boxes = parse_label_line(line)
            names.append(name)
            truths.append(boxes)
    n = config.image_size
    images = np.zeros((len(names), n, n, 3), dtype=np.float32)
    for i, name in enumerate(names):
        images[i] = load_png(path / name)
    return Dataset(images, truths, names, config)
