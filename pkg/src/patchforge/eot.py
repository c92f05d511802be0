"""Random patch transformations and the differentiable patch compositor.

A transform rotates the patch (as a planar square in 3-D) about x, y and z,
projects it through a pinhole camera with focal length equal to the image size,
rescales it to a target edge length, translates it and scales its brightness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc

_SNAP = 1e-6


@dataclass(frozen=True)
class TransformRanges:
    rx: tuple = (-5.0, 5.0)
    ry: tuple = (-5.0, 5.0)
    rz: tuple = (-10.0, 10.0)
    scale: tuple = (24.0, 36.0)
    brightness: tuple = (0.4, 1.6)
    image_size: int = 128

    def __post_init__(self):
        for name in ("rx", "ry", "rz", "scale", "brightness"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty {name} range {lo}..{hi}")
        if self.scale[0] <= 0 or self.brightness[0] <= 0:
            raise ValueError("scale and brightness must be positive")
        worst = _worst_footprint(self)
        if worst > self.image_size:
            raise ValueError(f"rotated patch footprint ({worst:.1f}px) exceeds the {self.image_size}px image")


@dataclass(frozen=True)
class TransformSample:
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    scale: float = 32.0
    tx: float = 0.0
    ty: float = 0.0
    brightness: float = 1.0


def neutral(patch_size, tx=0.0, ty=0.0):
    """Axis-aligned placement at native resolution with unchanged brightness."""
    return TransformSample(scale=float(patch_size), tx=float(tx), ty=float(ty))


def rotation(rx, ry, rz):
    """Rz·Ry·Rx for angles in degrees."""
    ax, ay, az = np.radians([rx, ry, rz])
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _centered_homography(t: TransformSample, patch_size, image_size):
    # patch pixel (u, v) -> 3-D point on a square of edge t.scale centred at the origin
    k = t.scale / patch_size
    A = np.array([[k, 0, -t.scale / 2], [0, k, -t.scale / 2], [0, 0, 1.0]])
    R = rotation(t.rx, t.ry, t.rz)
    f = float(image_size)
    # camera at distance f looking down +z: x' = f X / (Z + f)
    M = np.column_stack([R[:, 0], R[:, 1], [0.0, 0.0, f]])
    K = np.diag([f, f, 1.0])
    return K @ M @ A


def _project(H, pts):
    ph = np.c_[pts, np.ones(len(pts))] @ H.T
    return ph[:, :2] / ph[:, 2:3]


def corners(patch_size):
    P = float(patch_size)
    return np.array([[0, 0], [P, 0], [P, P], [0, P]])


def footprint_size(t: TransformSample, patch_size, image_size):
    """Width and height of the bounding box of the projected patch."""
    q = _project(_centered_homography(t, patch_size, image_size), corners(patch_size))
    return q.max(0) - q.min(0)


def _worst_footprint(r: TransformRanges):
    worst = 0.0
    rzs = set(r.rz) | {a for a in (-45.0, 45.0) if r.rz[0] <= a <= r.rz[1]}
    for rx in r.rx:
        for ry in r.ry:
            for rz in sorted(rzs):
                t = TransformSample(rx, ry, rz, r.scale[1])
                worst = max(worst, footprint_size(t, 1, r.image_size).max())
    return worst


def homography(t: TransformSample, patch_size, image_size):
    """3×3 matrix taking patch pixel coordinates to image coordinates.

    The footprint's bounding box is anchored with its top-left at (t.tx, t.ty).
    """
    Hc = _centered_homography(t, patch_size, image_size)
    q = _project(Hc, corners(patch_size))
    lo = q.min(0)
    T = np.array([[1, 0, t.tx - lo[0]], [0, 1, t.ty - lo[1]], [0, 0, 1.0]])
    H = T @ Hc
    return H / H[2, 2]


def sample_transform(ranges: TransformRanges, rng, patch_size=32):
    """Draw t ~ T. Translation is drawn last, so the whole footprint stays in the image."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    rx = rng.uniform(*ranges.rx)
    ry = rng.uniform(*ranges.ry)
    rz = rng.uniform(*ranges.rz)
    scale = rng.uniform(*ranges.scale)
    bright = rng.uniform(*ranges.brightness)
    w, h = footprint_size(TransformSample(rx, ry, rz, scale), patch_size, ranges.image_size)
    n = ranges.image_size
    tx = rng.uniform(0.0, max(n - w, 0.0))
    ty = rng.uniform(0.0, max(n - h, 0.0))
    return TransformSample(float(rx), float(ry), float(rz), float(scale), float(tx), float(ty), float(bright))


def brightness(patch, factor):
    """Scale every channel by `factor` and clip to [0, 1]; factor 1 is the identity.

    Per pixel this equals scaling V in HSV whenever nothing clips, because
    hue and saturation are invariant to a common scale of R, G and B.
    """
    if factor <= 0:
        raise ValueError("brightness factor must be positive")
    if isinstance(patch, gc.Tensor):
        return patch if factor == 1.0 else gc.clip(patch * float(factor), 0.0, 1.0)
    patch = np.asarray(patch)
    return patch if factor == 1.0 else np.clip(patch * factor, 0.0, 1.0).astype(patch.dtype)


# compositing -----------------------------------------------------------------------------

@dataclass
class WarpPlan:
    """Pixels owned by the warped patch and their bilinear taps into the patch."""

    pixels: np.ndarray   # flat output indices (M,)
    taps: np.ndarray     # flat patch indices (M, 4)
    weights: np.ndarray  # (M, 4); zero for taps outside the patch
    mask: np.ndarray     # H×W bool


def warp_plan(t: TransformSample, patch_size, image_size) -> WarpPlan:
    P, n = patch_size, image_size
    H = homography(t, P, n)
    q = _project(H, corners(P))
    x0, y0 = max(int(np.floor(q[:, 0].min())), 0), max(int(np.floor(q[:, 1].min())), 0)
    x1, y1 = min(int(np.ceil(q[:, 0].max())), n), min(int(np.ceil(q[:, 1].max())), n)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    ys, xs = ys.ravel(), xs.ravel()
    uv = _project(np.linalg.inv(H), np.c_[xs + 0.5, ys + 0.5])
    # the mapping is exact in theory for pixel-aligned placements; snap float noise
    rounded = np.round(uv)
    uv = np.where(np.abs(uv - rounded) < _SNAP, rounded, uv)
    half = np.round(uv - 0.5) + 0.5
    uv = np.where(np.abs(uv - half) < _SNAP, half, uv)
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= P) & (uv[:, 1] >= 0) & (uv[:, 1] <= P)
    xs, ys, uv = xs[inside], ys[inside], uv[inside]
    mask = np.zeros((n, n), dtype=bool)
    mask[ys, xs] = True
    # texel centres sit at integer + 0.5
    fx, fy = uv[:, 0] - 0.5, uv[:, 1] - 0.5
    ix, iy = np.floor(fx).astype(int), np.floor(fy).astype(int)
    ax, ay = fx - ix, fy - iy
    taps, weights = [], []
    for dy, dx, w in ((0, 0, (1 - ax) * (1 - ay)), (0, 1, ax * (1 - ay)),
                      (1, 0, (1 - ax) * ay), (1, 1, ax * ay)):
        tx, ty = ix + dx, iy + dy
        ok = (tx >= 0) & (tx < P) & (ty >= 0) & (ty < P)
        taps.append(np.where(ok, ty * P + tx, 0))
        weights.append(np.where(ok, w, 0.0))
    return WarpPlan(ys * n + xs, np.stack(taps, 1), np.stack(weights, 1), mask)


def _sample(flat_patch, plan: WarpPlan):
    # bilinear gather, (M, 3)
    w = plan.weights.astype(flat_patch.dtype)
    out = flat_patch[plan.taps[:, 0]] * w[:, 0:1]
    for k in range(1, 4):
        if np.any(w[:, k]):
            out = out + flat_patch[plan.taps[:, k]] * w[:, k: k + 1]
    return out


def composite(patch, images, samples, plans=None):
    """Paste one shared patch into every image, each under its own transform.

    `patch` is a P×P×3 Tensor (or array), `images` N×H×W×3. Differentiable with
    respect to the patch only. Returns (N×H×W×3 Tensor, list of H×W masks).
    """
    patch = gc.as_tensor(patch)
    images = np.asarray(images, dtype=patch.data.dtype)
    P = patch.shape[0]
    n_img, n = images.shape[0], images.shape[1]
    plans = plans or [warp_plan(t, P, n) for t in samples]
    out = images.copy()
    flat_out = out.reshape(n_img, -1, 3)
    bright = []
    for i, (t, plan) in enumerate(zip(samples, plans)):
        b = patch.data if t.brightness == 1.0 else np.clip(patch.data * t.brightness, 0, 1)
        bright.append(b)
        flat_out[i, plan.pixels] = _sample(b.reshape(-1, 3), plan)

    def backward(g):
        gflat = g.reshape(n_img, -1, 3)
        total = np.zeros((P * P, 3), dtype=np.float64)
        for i, (t, plan) in enumerate(zip(samples, plans)):
            gv = gflat[i, plan.pixels].astype(np.float64)
            gb = np.zeros((P * P, 3))
            for k in range(4):
                wk = plan.weights[:, k]
                for c in range(3):
                    gb[:, c] += np.bincount(plan.taps[:, k], weights=wk * gv[:, c], minlength=P * P)
            if t.brightness != 1.0:
                raw = patch.data.reshape(-1, 3) * t.brightness
                gb *= t.brightness * ((raw >= 0) & (raw <= 1))
            total += gb
        return (total.reshape(patch.shape).astype(patch.data.dtype),)

    return gc.make(out, (patch,), backward, "composite"), [p.mask for p in plans]


def apply_patch(patch, image, t: TransformSample):
    """Single-image A(δ, x, t): returns (patched image array, mask)."""
    out, masks = composite(np.asarray(patch), np.asarray(image)[None], [t])
    return out.data[0], masks[0]


def footprint_box(t: TransformSample, patch_size, image_size):
    """Axis-aligned bounding box of the projected patch corners."""
    q = _project(homography(t, patch_size, image_size), corners(patch_size))
    return (*q.min(0), *q.max(0))
