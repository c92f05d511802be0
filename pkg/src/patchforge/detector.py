"""MiniYOLO: a small single-scale grid detector and its composite detection loss."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import gradcore as gc
from .scenegen import Box

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 128
    S: int = 8
    B: int = 2
    C: int = 4
    anchors: tuple = ((24.0, 24.0), (48.0, 48.0))
    channels: tuple = (8, 16, 32, 64, 64)
    # global max-pooled context fed into the last block; gives every cell a
    # full-image receptive field
    context: bool = True
    # objectness target of an off-center responsible slot = IoU its clamped
    # target box can reach (1 for the center cell); False trains every slot to 1
    rescore: bool = True
    slope: float = 0.1
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(tuple(float(v) for v in a) for a in self.anchors))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.B < 1 or self.C < 1:
            raise ValueError("B and C must be positive")
        if len(self.anchors) != self.B:
            raise ValueError("need exactly one anchor per box slot")
        if self.image_size % self.S:
            raise ValueError("image_size must be divisible by S")
        if self.image_size // 2 ** (len(self.channels) - 1) != self.S:
            raise ValueError("backbone strides do not reduce image_size to S")

    @property
    def cell(self):
        return self.image_size / self.S

    @property
    def depth(self):
        return 5 + self.C

    def header(self):
        anchors = ",".join(f"{w:g}x{h:g}" for w, h in self.anchors)
        return (f"MiniYOLO image_size={self.image_size} S={self.S} B={self.B} C={self.C} "
                f"anchors={anchors} channels={','.join(map(str, self.channels))} "
                f"context={int(self.context)} rescore={int(self.rescore)} slope={self.slope:g} "
                f"lambda_coord={self.lambda_coord:g} lambda_noobj={self.lambda_noobj:g}")

    @classmethod
    def from_header(cls, line):
        kv = dict(tok.split("=", 1) for tok in line.split()[1:])
        return cls(
            image_size=int(kv["image_size"]), S=int(kv["S"]), B=int(kv["B"]), C=int(kv["C"]),
            anchors=tuple(tuple(float(v) for v in a.split("x")) for a in kv["anchors"].split(",")),
            channels=tuple(int(c) for c in kv["channels"].split(",")),
            context=bool(int(kv["context"])), rescore=bool(int(kv.get("rescore", 1))), slope=float(kv["slope"]),
            lambda_coord=float(kv["lambda_coord"]), lambda_noobj=float(kv["lambda_noobj"]),
        )


class Detection(NamedTuple):
    box: tuple
    objectness: float
    class_id: int
    class_prob: float
    confidence: float
    image_id: int = 0
    cell: tuple = (0, 0, 0)


def param_shapes(config: DetectorConfig):
    """Parameter names and shapes in declaration (= serialization) order."""
    shapes = []
    cin = 3
    for i, c in enumerate(config.channels):
        shapes += [(f"conv{i}.w", (c, cin, 3, 3)), (f"conv{i}.b", (c,))]
        cin = c
    if config.context:
        prev = config.channels[-2]
        shapes += [("context.w", (prev, config.channels[-1]))]
    out = config.B * config.depth
    shapes += [("head.w", (out, cin, 1, 1)), ("head.b", (out,))]
    return shapes


def init_params(config: DetectorConfig, seed=0):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        if name == "head.b":
            b = np.zeros(shape)
            b.reshape(config.B, config.depth)[:, 4] = -4.0
            params[name] = b
        elif name == "head.w":
            params[name] = rng.normal(0, 0.01, shape)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = np.sqrt(2.0 / ((1 + config.slope ** 2) * fan_in))
            params[name] = rng.normal(0, std, shape)
    return {k: gc.Tensor(v, requires_grad=True) for k, v in params.items()}


class MiniYOLO:
    def __init__(self, config: DetectorConfig = DetectorConfig(), params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def parameters(self):
        return [self.params[name] for name, _ in param_shapes(self.config)]

    def frozen(self):
        """Copy sharing no gradient state; used whenever the input, not θ, is optimized."""
        return MiniYOLO(self.config, {k: gc.Tensor(v.data.copy()) for k, v in self.params.items()})

    def forward(self, images):
        """Images N×H×W×3 (or H×W×3) → raw grid N×S×S×B×(5+C) (or S×S×B×(5+C))."""
        cfg = self.config
        x = gc.as_tensor(images)
        single = x.ndim == 3
        if single:
            x = x.reshape(1, *x.shape)
        if x.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise gc.ShapeError(f"expected images of {cfg.image_size}x{cfg.image_size}x3, got {x.shape[1:]}")
        p = self.params
        h = x.transpose(0, 3, 1, 2)
        last = len(cfg.channels) - 1
        for i in range(len(cfg.channels)):
            stride = 2 if i < last else 1
            pre = gc.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=stride, pad=1)
            if i == last and cfg.context:
                g = gc.tmax(h.reshape(h.shape[0], h.shape[1], -1), axis=2)
                ctx = _matmul(g, p["context.w"])
                pre = pre + ctx.reshape(ctx.shape[0], ctx.shape[1], 1, 1)
            h = gc.leaky_relu(pre, cfg.slope)
        out = gc.conv2d(h, p["head.w"], p["head.b"])
        n = out.shape[0]
        out = out.transpose(0, 2, 3, 1).reshape(n, cfg.S, cfg.S, cfg.B, cfg.depth)
        return out.reshape(out.shape[1:]) if single else out

    __call__ = forward

    def save(self, path):
        gc.write_tensors(path, [t.data for t in self.parameters()], header=self.config.header())

    @classmethod
    def load(cls, path):
        header, arrays = gc.read_tensors(path, header=True)
        config = DetectorConfig.from_header(header)
        names = [n for n, _ in param_shapes(config)]
        if len(arrays) != len(names):
            raise ValueError(f"weights file has {len(arrays)} tensors, expected {len(names)}")
        return cls(config, {n: gc.Tensor(a, requires_grad=True) for n, a in zip(names, arrays)})


def _matmul(a, w):
    # (N,K) @ (K,M)
    return gc.make(a.data @ w.data, (a, w), lambda g: (g @ w.data.T, a.data.T @ g), "matmul")


def forward(model: MiniYOLO, image):
    return model.forward(image)


# decoding ---------------------------------------------------------------------------

def decode_arrays(grid, config: DetectorConfig):
    """Vectorized decode of an S×S×B×(5+C) array.

    Returns boxes (S,S,B,4) corner form, objectness (S,S,B), class probs (S,S,B,C).
    """
    g = np.asarray(grid.data if isinstance(grid, gc.Tensor) else grid, dtype=np.float64)
    S, cs = config.S, config.cell
    col = np.arange(S)[None, :, None]
    row = np.arange(S)[:, None, None]
    cx = (col + gc._sigmoid(g[..., 0])) * cs
    cy = (row + gc._sigmoid(g[..., 1])) * cs
    anchors = np.asarray(config.anchors)
    with np.errstate(over="ignore"):
        w = anchors[:, 0] * np.exp(np.minimum(g[..., 2], 30))
        h = anchors[:, 1] * np.exp(np.minimum(g[..., 3], 30))
    n = config.image_size
    boxes = np.stack([np.clip(cx - w / 2, 0, n), np.clip(cy - h / 2, 0, n),
                      np.clip(cx + w / 2, 0, n), np.clip(cy + h / 2, 0, n)], axis=-1)
    obj = gc._sigmoid(g[..., 4])
    probs = gc.softmax(g[..., 5:], axis=-1)
    return boxes, obj, probs


def decode(grid, conf_threshold, config: DetectorConfig, image_id=0):
    """Pre-NMS detections with objectness·class_prob ≥ conf_threshold."""
    boxes, obj, probs = decode_arrays(grid, config)
    cls = probs.argmax(-1)
    cprob = np.take_along_axis(probs, cls[..., None], -1)[..., 0]
    conf = obj * cprob
    keep = np.argwhere(conf >= conf_threshold)
    out = []
    for r, c, b in keep:
        out.append(Detection(tuple(float(v) for v in boxes[r, c, b]), float(obj[r, c, b]),
                             int(cls[r, c, b]), float(cprob[r, c, b]), float(conf[r, c, b]),
                             image_id, (int(r), int(c), int(b))))
    return out


def encode_box(box, row, col, anchor, cell):
    """Target (x offset, y offset, log w/aw, log h/ah) for a box seen from one cell.

    Offsets are clamped to [0, 1]: a cell that does not hold the box center is
    trained toward the nearest center it can express.
    """
    x1, y1, x2, y2 = box
    ox = np.clip((x1 + x2) / 2 / cell - col, 0.0, 1.0)
    oy = np.clip((y1 + y2) / 2 / cell - row, 0.0, 1.0)
    return ox, oy, np.log((x2 - x1) / anchor[0]), np.log((y2 - y1) / anchor[1])


def _iou_many(boxes, box):
    ix = np.clip(np.minimum(boxes[..., 2], box[2]) - np.maximum(boxes[..., 0], box[0]), 0, None)
    iy = np.clip(np.minimum(boxes[..., 3], box[3]) - np.maximum(boxes[..., 1], box[1]), 0, None)
    inter = ix * iy
    area = (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])
    union = area + (box[2] - box[0]) * (box[3] - box[1]) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


class Targets(NamedTuple):
    resp: np.ndarray    # S,S,B in {0,1}
    coord: np.ndarray   # S,S,B,4
    onehot: np.ndarray  # S,S,B,C
    obj: np.ndarray     # S,S,B objectness target (0 off responsibility)


def assign_targets(grid, truth, config: DetectorConfig) -> Targets:
    """Responsibility: in every cell a ground-truth box overlaps, the predicted box
    with the highest IoU against it. A slot claimed twice goes to the box whose
    center lies in the cell, then to the higher IoU.

    With `config.rescore`, a slot outside the center cell gets as objectness
    target the IoU between the truth and the box its clamped target encodes."""
    S, B, C, cs = config.S, config.B, config.C, config.cell
    resp = np.zeros((S, S, B))
    coord = np.zeros((S, S, B, 4))
    onehot = np.zeros((S, S, B, C))
    obj = np.zeros((S, S, B))
    if not truth:
        return Targets(resp, coord, onehot, obj)
    pboxes, _, _ = decode_arrays(grid, config)
    claims = {}
    for k, t in enumerate(truth):
        box = t.coords if isinstance(t, Box) else tuple(t[1:])
        cls = t.class_id if isinstance(t, Box) else int(t[0])
        r0, r1 = int(box[1] // cs), int(np.ceil(box[3] / cs)) - 1
        c0, c1 = int(box[0] // cs), int(np.ceil(box[2] / cs)) - 1
        crow = min(int((box[1] + box[3]) / 2 // cs), S - 1)
        ccol = min(int((box[0] + box[2]) / 2 // cs), S - 1)
        for r in range(max(r0, 0), min(r1, S - 1) + 1):
            for c in range(max(c0, 0), min(c1, S - 1) + 1):
                ious = _iou_many(pboxes[r, c], box)
                b = int(np.argmax(ious))
                rank = (r == crow and c == ccol, float(ious[b]), -k)
                prev = claims.get((r, c, b))
                if prev is None or rank > prev[0]:
                    claims[(r, c, b)] = (rank, box, cls)
    for (r, c, b), (rank, box, cls) in claims.items():
        resp[r, c, b] = 1.0
        coord[r, c, b] = ox, oy, _, _ = encode_box(box, r, c, config.anchors[b], cs)
        onehot[r, c, b, cls] = 1.0
        obj[r, c, b] = 1.0
        if config.rescore and not rank[0]:
            w, h = box[2] - box[0], box[3] - box[1]
            cx, cy = (c + ox) * cs, (r + oy) * cs
            reach = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
            obj[r, c, b] = float(_iou_many(reach, box))
    return Targets(resp, coord, onehot, obj)


def detection_loss(grid, truths, config: DetectorConfig, targets=None):
    """Composite loss J, averaged over the batch.

    Per image: λ_coord·squared error of the encoded box + BCE(objectness, target) +
    Σ_c BCE(softmax class prob, one-hot) over responsible slots, plus
    λ_noobj·BCE(objectness, 0) over all other slots.
    """
    grid = gc.as_tensor(grid)
    single = grid.ndim == 4
    if single:
        grid = grid.reshape(1, *grid.shape)
        truths = [truths]
    n = grid.shape[0]
    if targets is None:
        targets = [assign_targets(grid.data[i], truths[i], config) for i in range(n)]
    resp = np.stack([t.resp for t in targets])
    coord = np.stack([t.coord for t in targets])
    onehot = np.stack([t.onehot for t in targets])
    obj = np.stack([t.obj for t in targets])

    xy = gc.sigmoid(grid[..., 0:2])
    wh = grid[..., 2:4]
    w_coord = config.lambda_coord * resp[..., None]
    coord_term = gc.tsum(gc.square(xy - coord[..., 0:2]) * w_coord) \
        + gc.tsum(gc.square(wh - coord[..., 2:4]) * w_coord)
    w_obj = resp + config.lambda_noobj * (1.0 - resp)
    # soft targets: subtract their entropy so a met target costs exactly zero
    p = np.clip(obj, 1e-12, 1 - 1e-12)
    entropy = np.where((obj > 0) & (obj < 1), -(p * np.log(p) + (1 - p) * np.log1p(-p)), 0.0)
    obj_term = gc.tsum(gc.bce_with_logits(grid[..., 4], obj) * w_obj) - float((entropy * w_obj).sum())
    cls_term = gc.tsum(gc.softmax_bce(grid[..., 5:], onehot) * resp)
    return (coord_term + obj_term + cls_term) * (1.0 / n)


# training ---------------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_map50: list = field(default_factory=list)
    seconds: float = 0.0


def train(dataset, config: DetectorConfig = None, epochs=60, lr=1e-2, momentum=0.9, seed=0,
          batch_size=16, val_set=None, val_conf=0.1, lr_decay_epochs=None, grad_clip=10.0,
          model=None, callback=None):
    """Minimize the detection loss with SGD + momentum over shuffled mini-batches.

    `lr_decay_epochs` lists epochs at which the learning rate is divided by 10;
    by default a single drop at 80% of the run.
    Global gradient-norm clipping at `grad_clip` (None disables it) keeps the
    early epochs from blowing up. Returns (model, TrainHistory).
    """
    from .evalkit import evaluate  # evalkit imports this module

    if len(dataset) == 0:
        raise ValueError("empty training set")
    if config is None:
        config = DetectorConfig(image_size=dataset.config.image_size, C=dataset.config.num_classes)
    if lr_decay_epochs is None:
        lr_decay_epochs = (int(0.8 * epochs),)
    model = model or MiniYOLO(config, seed=seed)
    params = model.parameters()
    state = gc.OptimState(params)
    rng = np.random.default_rng(seed)
    hist = TrainHistory()
    start = time.perf_counter()
    step_lr = lr
    for epoch in range(epochs):
        if epoch in lr_decay_epochs:
            step_lr /= 10
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for s in range(0, len(order), batch_size):
            idx = np.sort(order[s: s + batch_size])
            grid = model.forward(dataset.images[idx])
            loss = detection_loss(grid, [dataset.truths[i] for i in idx], config)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch)
            grads = gc.backward(loss)
            if grad_clip is not None:
                norm = np.sqrt(sum(float((grads[p].astype(np.float64) ** 2).sum()) for p in params))
                if norm > grad_clip:
                    grads = {p.id: grads[p] * (grad_clip / norm) for p in params}
            gc.sgd_momentum_step(params, grads, state, step_lr, momentum)
            total += value * len(idx)
            count += len(idx)
        hist.loss.append(total / count)
        if val_set is not None:
            hist.val_map50.append(evaluate(val_set, model, conf_threshold=val_conf).map)
        log.info("epoch %d loss %.4f%s", epoch, hist.loss[-1],
                 f" val mAP50 {hist.val_map50[-1]:.3f}" if val_set is not None else "")
        if callback is not None:
            callback(epoch, hist)
    hist.seconds = time.perf_counter() - start
    return model, hist
