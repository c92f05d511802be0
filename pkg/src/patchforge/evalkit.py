"""Detection metrics: IoU, greedy per-class NMS, all-points AP, mAP-50 and ROI heatmaps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import eot
from .detector import Detection, DetectorConfig, MiniYOLO, decode, decode_arrays

CONF_THRESHOLDS = (0.001, 0.1, 0.5)
NMS_IOU = 0.45


def iou(a, b):
    """Intersection over union of two corner-form boxes; 0 for degenerate boxes."""
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        return 0.0
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _rank_key(d: Detection):
    return (-d.confidence, d.class_id, d.box[0])


def nms(dets, iou_threshold=NMS_IOU):
    """Greedy per-class suppression, output sorted by descending confidence.

    Ties in confidence go to the lower class id, then the lower x1.
    """
    remaining = sorted(dets, key=_rank_key)
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [d for d in remaining
                     if d.class_id != best.class_id or iou(d.box, best.box) < iou_threshold]
    return keep


def average_precision(dets, truths, iou_match=0.5):
    """All-points interpolated AP for one class.

    `dets` carry image ids; `truths` maps image id -> list of boxes of this class.
    Each detection is matched to its highest-IoU truth in the same image; it is a
    true positive if that IoU reaches `iou_match` and the truth is still unmatched.
    Returns None when the class has no ground truth at all.
    """
    npos = sum(len(v) for v in truths.values())
    if npos == 0:
        return None
    order = sorted(dets, key=lambda d: -d.confidence)
    used = {k: np.zeros(len(v), dtype=bool) for k, v in truths.items()}
    tp = np.zeros(len(order))
    for i, d in enumerate(order):
        gts = truths.get(d.image_id, [])
        if not gts:
            continue
        ious = [iou(d.box, g) for g in gts]
        j = int(np.argmax(ious))
        if ious[j] >= iou_match and not used[d.image_id][j]:
            used[d.image_id][j] = True
            tp[i] = 1
    return ap_from_tp(tp, npos)


def ap_from_tp(tp, npos):
    """Area under the precision envelope for a ranked TP/FP sequence."""
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / npos
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    conf_threshold: float
    ap: dict                       # class name -> AP, or None when the class has no truth
    map: float
    n_images: int
    n_objects: int
    excluded: list = field(default_factory=list)
    detections: list | None = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "ap"])
            for name, ap in self.ap.items():
                w.writerow([name, "nan" if ap is None else f"{ap:.6f}"])
            w.writerow(["mAP", f"{self.map:.6f}"])

    @staticmethod
    def read_csv(path):
        """Returns (per-class dict, mAP)."""
        per_class, m = {}, None
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["class"] == "mAP":
                    m = float(row["ap"])
                else:
                    per_class[row["class"]] = float(row["ap"])
        return per_class, m


def evaluate_detections(detections, truths, class_names, conf_threshold=0.0, keep_detections=False):
    """Aggregate per-image post-NMS detections (image ids = list positions) into a report."""
    per_class_det = {c: [] for c in range(len(class_names))}
    for dets in detections:
        for d in dets:
            if d.confidence >= conf_threshold:
                per_class_det[d.class_id].append(d)
    aps, excluded = {}, []
    for c, name in enumerate(class_names):
        gts = {i: [b.coords for b in t if b.class_id == c] for i, t in enumerate(truths)}
        ap = average_precision(per_class_det[c], gts)
        aps[name] = ap
        if ap is None:
            excluded.append(name)
    valid = [v for v in aps.values() if v is not None]
    return EvalReport(conf_threshold, aps, float(np.mean(valid)) if valid else 0.0,
                      len(truths), sum(len(t) for t in truths), excluded,
                      detections if keep_detections else None)


def placements(policy, n_images, patch_size, image_size, seed=0, ranges=None, scale=None):
    """Per-image TransformSample list for an evaluation placement policy.

    "fixed": neutral transform at the top-left corner, resized to `scale`.
    "random": one EOT draw per image from `ranges`, seeded by `seed`.
    """
    if policy == "fixed":
        t = eot.TransformSample(scale=float(scale or patch_size))
        return [t] * n_images
    if policy == "random":
        ranges = ranges or eot.TransformRanges(image_size=image_size)
        rng = np.random.default_rng(seed)
        return [eot.sample_transform(ranges, rng, patch_size) for _ in range(n_images)]
    raise ValueError(f"unknown placement policy {policy!r}")


def predict(dataset, model: MiniYOLO, patch=None, samples=None, batch_size=32):
    """Raw grids for every image (patched when a patch is given), N×S×S×B×(5+C)."""
    model = model.frozen()
    grids = []
    for s in range(0, len(dataset), batch_size):
        imgs = dataset.images[s: s + batch_size]
        if patch is not None:
            out, _ = eot.composite(np.asarray(patch, dtype=np.float32), imgs, samples[s: s + batch_size])
            imgs = out.data
        grids.append(model.forward(imgs).data)
    if not grids:
        return np.zeros((0, model.config.S, model.config.S, model.config.B, model.config.depth), np.float32)
    return np.concatenate(grids)


def evaluate(dataset, model: MiniYOLO, patch=None, placement="fixed", conf_threshold=0.1,
             nms_iou=NMS_IOU, seed=0, ranges=None, scale=None, grids=None, keep_detections=False):
    """mAP-50 of `model` on `dataset`, optionally with a patch applied to every image."""
    samples = None
    if patch is not None:
        samples = placements(placement, len(dataset), np.asarray(patch).shape[0],
                             model.config.image_size, seed, ranges, scale)
    if grids is None:
        grids = predict(dataset, model, patch, samples)
    detections = [nms(decode(g, conf_threshold, model.config, image_id=i), nms_iou)
                  for i, g in enumerate(grids)]
    names = list(dataset.config.classes)
    return evaluate_detections(detections, dataset.truths, names, conf_threshold, keep_detections)


def evaluate_thresholds(dataset, model, thresholds=CONF_THRESHOLDS, **kw):
    """One report per confidence threshold, sharing a single forward pass."""
    patch = kw.get("patch")
    samples = None
    if patch is not None:
        samples = placements(kw.get("placement", "fixed"), len(dataset), np.asarray(patch).shape[0],
                             model.config.image_size, kw.get("seed", 0), kw.get("ranges"), kw.get("scale"))
    grids = predict(dataset, model, patch, samples)
    return [evaluate(dataset, model, conf_threshold=c, grids=grids,
                     **{k: v for k, v in kw.items() if k != "patch"}) for c in thresholds]


# heatmaps -----------------------------------------------------------------------------

def roi_heatmap(grid, config: DetectorConfig):
    """S×S map of the best pre-NMS confidence (objectness·max class prob) in each cell."""
    _, obj, probs = decode_arrays(grid, config)
    return (obj * probs.max(-1)).max(-1)


def save_heatmap(heat, png_path, csv_path=None, upscale=16):
    from PIL import Image as PILImage

    heat = np.clip(np.asarray(heat, dtype=np.float64), 0, 1)
    img = np.kron(np.round(heat * 255).astype(np.uint8), np.ones((upscale, upscale), dtype=np.uint8))
    PILImage.fromarray(img, mode="L").save(png_path, format="PNG")
    if csv_path is not None:
        np.savetxt(csv_path, heat, delimiter=",", fmt="%.6f")


def footprint_cells(mask, config: DetectorConfig):
    """Grid cells containing at least one patch pixel."""
    s = int(config.cell)
    return mask.reshape(config.S, s, config.S, s).any(axis=(1, 3))


def write_reports(reports, out_dir, prefix="eval"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in reports:
        p = out_dir / f"{prefix}_conf{r.conf_threshold:g}.csv"
        r.to_csv(p)
        paths.append(p)
    return paths
