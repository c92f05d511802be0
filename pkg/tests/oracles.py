"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np

from patchforge import gradcore as gc
from patchforge.detector import DetectorConfig, MiniYOLO, assign_targets, detection_loss
from patchforge.evalkit import iou
from patchforge.scenegen import SHAPES, SceneConfig, make_dataset


def brute_force_nms(dets, thr):
    """Keep a detection iff no kept, higher-ranked, same-class detection overlaps it by ≥ thr."""
    ranked = sorted(dets, key=lambda d: (-d.confidence, d.class_id, d.box[0]))
    kept = []
    for d in ranked:
        if all(k.class_id != d.class_id or iou(k.box, d.box) < thr for k in kept):
            kept.append(d)
    return kept


def hand_ap(tp_flags, npos):
    """All-points AP by enumerating recall levels.

    Precision at recall r is the best precision at any rank whose recall is at least r.
    """
    prec, rec = [], []
    hits = 0
    for k, t in enumerate(tp_flags, 1):
        hits += t
        prec.append(hits / k)
        rec.append(hits / npos)
    total, prev = 0.0, 0.0
    for r in sorted(set(rec)):
        if r == 0:
            continue
        total += (r - prev) * max(p for p, rr in zip(prec, rec) if rr >= r)
        prev = r
    return total


def rotate_project_oracle(t, n):
    """Rotate the 3-D corners of the patch square, project with f = n, anchor the bbox at (tx, ty)."""
    s = t.scale
    pts = np.array([[-s / 2, -s / 2, 0], [s / 2, -s / 2, 0], [s / 2, s / 2, 0], [-s / 2, s / 2, 0]])
    a = np.radians([t.rx, t.ry, t.rz])
    Rx = np.array([[1, 0, 0], [0, np.cos(a[0]), -np.sin(a[0])], [0, np.sin(a[0]), np.cos(a[0])]])
    Ry = np.array([[np.cos(a[1]), 0, np.sin(a[1])], [0, 1, 0], [-np.sin(a[1]), 0, np.cos(a[1])]])
    Rz = np.array([[np.cos(a[2]), -np.sin(a[2]), 0], [np.sin(a[2]), np.cos(a[2]), 0], [0, 0, 1]])
    X = pts @ (Rz @ Ry @ Rx).T
    q = n * X[:, :2] / (X[:, 2:3] + n)
    return q - q.min(0) + [t.tx, t.ty]


def random_detector_case(seed):
    """A random small MiniYOLO configuration with a 2-image labeled batch."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(3, 5))
    S = int(rng.choice([2, 4]))
    n = S * 2 ** (depth - 1)
    B, C = int(rng.integers(1, 3)), int(rng.integers(2, 5))
    cfg = DetectorConfig(image_size=n, S=S, B=B, C=C,
                         anchors=tuple((a, a) for a in rng.uniform(n / 6, n / 2, B)),
                         channels=tuple(int(c) for c in rng.integers(2, 7, depth)),
                         context=bool(rng.integers(0, 2)))
    scenes = SceneConfig(image_size=n, min_object_size=max(4, n // 6), max_object_size=max(5, n // 2),
                         classes=SHAPES[:C])
    return cfg, make_dataset(seed, scenes, 2), rng


def detector_gradient_check(seed, n_coords=100, epsilon=1e-3):
    """Relative errors of backward against central differences on the detection loss.

    Coordinates are drawn over all parameters and input pixels. A coordinate
    whose ±epsilon evaluations take a different branch of any piecewise op
    (a leaky-relu sign or a max-pool winner) is not smooth on the difference
    interval; it is skipped and another one is drawn.
    Returns (errors, skipped).
    """
    cfg, data, rng = random_detector_case(seed)
    with gc.precision(np.float64):
        base = MiniYOLO(cfg, seed=seed)
        model = MiniYOLO(cfg, {k: gc.Tensor(v.data.astype(np.float64), requires_grad=True)
                               for k, v in base.params.items()})
        images = gc.Tensor(data.images.astype(np.float64), requires_grad=True)
        with gc.branch_trace() as trace:
            grid = model.forward(images)
        reference = list(trace)
        targets = [assign_targets(grid.data[i], data.truths[i], cfg) for i in range(len(data))]
        grads = gc.backward(detection_loss(grid, data.truths, cfg, targets=targets))
        leaves = model.parameters() + [images]
        offsets = np.cumsum([0] + [leaf.data.size for leaf in leaves])

        def evaluate(leaf, value):
            old, leaf.data = leaf.data, value
            try:
                with gc.branch_trace() as tr:
                    loss = detection_loss(model.forward(images), data.truths, cfg, targets=targets).item()
                return loss, list(tr)
            finally:
                leaf.data = old

        errors, skipped = [], 0
        for p in rng.permutation(offsets[-1]):
            if len(errors) == n_coords:
                break
            li = int(np.searchsorted(offsets, p, side="right") - 1)
            leaf, j = leaves[li], int(p - offsets[li])
            x = leaf.data.copy()
            x.reshape(-1)[j] += epsilon
            fp, tp = evaluate(leaf, x)
            x.reshape(-1)[j] -= 2 * epsilon
            fm, tm = evaluate(leaf, x)
            if not (gc.same_branches(tp, reference) and gc.same_branches(tm, reference)):
                skipped += 1
                continue
            est = (fp - fm) / (2 * epsilon)
            errors.append(float(gc.relative_error(grads[leaf].reshape(-1)[j], est, floor=1e-8)))
    return np.array(errors), skipped
