"""Universal patch optimization: clipped sign ascent (ours) and the DPatch baseline.

Both drivers share one schedule: a step is `iterations` updates on fresh
batches and fresh transforms, the learning rate decays by `decay` every
`decay_every` steps, and the patch is validated every `val_every` steps.
The best of several random restarts is the one that leaves the detector
with the lowest validation mAP-50.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import eot
from . import gradcore as gc
from .detector import MiniYOLO, detection_loss
from .evalkit import evaluate
from .scenegen import Box, save_png

log = logging.getLogger(__name__)

METHODS = ("pgd", "dpatch")


class NonFiniteGradient(FloatingPointError):
    def __init__(self, restart, step, iteration):
        super().__init__(f"non-finite patch gradient (restart {restart}, step {step}, iteration {iteration})")
        self.restart, self.step, self.iteration = restart, step, iteration
        self.completed = []


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"
    clip: bool = True
    lr: float = 0.1
    momentum: float = 0.9
    decay: float = 0.95
    decay_every: int = 5
    iterations: int = 100
    steps: int = 30
    restarts: int = 5
    batch_size: int = 8
    # "eot": random placement and appearance per image; "fixed": neutral top-left
    transform: str = "eot"
    patch_size: int = 32
    ranges: eot.TransformRanges = field(default_factory=eot.TransformRanges)
    target_class: int = 0
    init: str = "random"
    # "buffer": sign of the momentum buffer; "sign": momentum over signed gradients
    momentum_mode: str = "buffer"
    val_every: int = 5
    val_conf: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.steps < 0 or self.iterations < 1 or self.batch_size < 1:
            raise ValueError("steps, iterations and batch_size must be non-negative/positive")
        if self.transform not in ("eot", "fixed"):
            raise ValueError(f"unknown transform mode {self.transform!r}")
        if self.init not in ("random", "constant"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.momentum_mode not in ("buffer", "sign"):
            raise ValueError(f"unknown momentum mode {self.momentum_mode!r}")
        if self.transform == "fixed" and self.patch_size > self.ranges.image_size:
            raise ValueError("patch larger than the image")

    def lr_at(self, step):
        """Learning rate in effect during (0-based) `step`."""
        return self.lr * self.decay ** (step // self.decay_every)

    def to_dict(self):
        d = asdict(self)
        r = d.pop("ranges")
        for k, v in r.items():
            d[f"ranges.{k}"] = f"{v[0]:g}..{v[1]:g}" if isinstance(v, tuple) else v
        return d


@dataclass
class Velocity:
    """Momentum buffer for one patch."""

    v: np.ndarray

    @classmethod
    def zeros(cls, patch):
        return cls(np.zeros(np.shape(patch), dtype=np.float64))


@dataclass
class AttackHistory:
    restart: int
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    map50: list = field(default_factory=list)      # nan where no validation ran
    patch_min: list = field(default_factory=list)  # per iteration
    patch_max: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_map(self):
        vals = [m for m in self.map50 if not math.isnan(m)]
        return vals[-1] if vals else math.nan

    @property
    def final_loss(self):
        return self.loss[-1] if self.loss else math.nan

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr", "map50"])
            for s, l, r, m in zip(self.step, self.loss, self.lr, self.map50):
                w.writerow([s, f"{l:.6f}", f"{r:.6g}", "" if math.isnan(m) else f"{m:.6f}"])


class AttackResult(NamedTuple):
    patch: np.ndarray
    histories: list
    best: int


# single updates ---------------------------------------------------------------------

def patch_loss_and_grad(patch, images, truths, samples, model: MiniYOLO, plans=None):
    """Mean detection loss of the patched batch and its gradient w.r.t. the patch."""
    x = gc.Tensor(np.asarray(patch), requires_grad=True)
    composed, _ = eot.composite(x, images, samples, plans)
    loss = detection_loss(model.forward(composed), truths, model.config)
    grad = gc.backward(loss)[x]
    return loss.item(), np.asarray(grad, dtype=np.float64)


def _check(grad):
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(-1, -1, -1)


def attack_step_pgd(patch, images, truths, samples, model, lr, state: Velocity, momentum=0.9,
                    clip=True, momentum_mode="buffer"):
    """One untargeted ascent update against the original labels.

    v ← μv + g, δ ← clip(δ + lr·sign(v)). With momentum_mode="sign" the buffer
    accumulates sign(g) instead and δ moves by lr·v. Returns (patch, loss).
    """
    loss, g = patch_loss_and_grad(patch, images, truths, samples, model)
    _check(g)
    if momentum_mode == "buffer":
        state.v = momentum * state.v + g
        delta = np.sign(state.v)
    else:
        state.v = momentum * state.v + np.sign(g)
        delta = state.v
    out = np.asarray(patch, dtype=np.float64) + lr * delta
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32), loss


def build_dpatch_target(t: eot.TransformSample, target_class=0, patch_size=32, image_size=128):
    """The one-box label ŷ: the footprint's bounding box, labeled `target_class`."""
    x1, y1, x2, y2 = eot.footprint_box(t, patch_size, image_size)
    n = float(image_size)
    return [Box(int(target_class), float(np.clip(x1, 0, n)), float(np.clip(y1, 0, n)),
                float(np.clip(x2, 0, n)), float(np.clip(y2, 0, n)))]


def attack_step_dpatch(patch, images, samples, model, lr, state: Velocity, momentum=0.9, clip=False,
                       target_class=0):
    """One targeted descent update toward ŷ: v ← μv + g, δ ← δ − lr·v (then clip if asked)."""
    P, n = np.shape(patch)[0], model.config.image_size
    targets = [build_dpatch_target(t, target_class, P, n) for t in samples]
    loss, g = patch_loss_and_grad(patch, images, targets, samples, model)
    _check(g)
    state.v = momentum * state.v + g
    out = np.asarray(patch, dtype=np.float64) - lr * state.v
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32), loss


# driver -----------------------------------------------------------------------------

def initial_patch(config: AttackConfig, rng):
    P = config.patch_size
    if config.init == "constant":
        return np.full((P, P, 3), 0.5, dtype=np.float32)
    return rng.uniform(0.0, 1.0, (P, P, 3)).astype(np.float32)


def draw_transforms(config: AttackConfig, rng, n):
    if config.transform == "fixed":
        return [eot.neutral(config.patch_size)] * n
    return [eot.sample_transform(config.ranges, rng, config.patch_size) for _ in range(n)]


def validate(patch, val_set, model, config: AttackConfig, seed):
    placement = "fixed" if config.transform == "fixed" else "random"
    return evaluate(val_set, model, patch=patch, placement=placement, conf_threshold=config.val_conf,
                    seed=seed, ranges=config.ranges).map


def run_restart(config: AttackConfig, train_set, val_set, model, seed, restart, callback=None):
    """One restart. Returns (patch, AttackHistory)."""
    rng = np.random.default_rng([seed, restart])
    patch = initial_patch(config, rng)
    state = Velocity.zeros(patch)
    hist = AttackHistory(restart)
    start = time.perf_counter()
    n_train = len(train_set)
    bs = min(config.batch_size, n_train)
    for step in range(config.steps):
        lr = config.lr_at(step)
        losses = []
        for it in range(config.iterations):
            idx = np.sort(rng.choice(n_train, bs, replace=False))
            imgs = train_set.images[idx]
            samples = draw_transforms(config, rng, bs)
            try:
                if config.method == "pgd":
                    patch, loss = attack_step_pgd(patch, imgs, [train_set.truths[i] for i in idx], samples,
                                                  model, lr, state, config.momentum, config.clip,
                                                  config.momentum_mode)
                else:
                    patch, loss = attack_step_dpatch(patch, imgs, samples, model, lr, state, config.momentum,
                                                     config.clip, config.target_class)
            except NonFiniteGradient as err:
                err.restart, err.step, err.iteration = restart, step, it
                err.args = (f"non-finite patch gradient (restart {restart}, step {step}, iteration {it})",)
                raise
            losses.append(loss)
            hist.patch_min.append(float(patch.min()))
            hist.patch_max.append(float(patch.max()))
        hist.step.append(step)
        hist.loss.append(float(np.mean(losses)))
        hist.lr.append(lr)
        last = step == config.steps - 1
        if (step + 1) % config.val_every == 0 or last:
            hist.map50.append(validate(patch, val_set, model, config, seed))
        else:
            hist.map50.append(math.nan)
        log.info("restart %d step %d loss %.4f lr %.5f%s", restart, step, hist.loss[-1], lr,
                 "" if math.isnan(hist.map50[-1]) else f" val mAP50 {hist.map50[-1]:.3f}")
        if callback is not None:
            callback(restart, step, patch, hist)
    hist.seconds = time.perf_counter() - start
    return patch, hist


def run_attack(config: AttackConfig, train_set, val_set, model: MiniYOLO, seed=0, callback=None):
    """Best-of-restarts patch search against a frozen detector.

    The winner has the lowest final validation mAP-50; ties go to the higher
    final training loss. Returns an AttackResult.
    """
    frozen = model.frozen()
    patches, histories = [], []
    for r in range(config.restarts):
        try:
            p, h = run_restart(config, train_set, val_set, frozen, seed, r, callback)
        except NonFiniteGradient as err:
            err.completed = list(zip(patches, histories))
            raise
        patches.append(p)
        histories.append(h)

    def rank(i):
        h = histories[i]
        m = h.final_map
        return (math.inf if math.isnan(m) else m, -(h.final_loss if h.loss else 0.0), i)

    best = min(range(len(patches)), key=rank)
    return AttackResult(patches[best], histories, best)


# export -----------------------------------------------------------------------------

def save_patch(path, patch):
    gc.save_tensor(path, np.asarray(patch, dtype=np.float32))


def load_patch(path):
    patch = gc.load_tensor(path)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.shape[0] != patch.shape[1]:
        raise ValueError(f"not a P×P×3 patch: shape {patch.shape}")
    return patch


def save_patch_png(path, patch):
    """PNG view of the patch; unclipped values are clipped for display only."""
    save_png(path, np.clip(patch, 0.0, 1.0))


def fixed_config(**kw):
    """The fixed top-left, unclipped regime (37 px patch, no transformations)."""
    base = AttackConfig(method="pgd", clip=False, transform="fixed", patch_size=37, init="constant")
    return replace(base, **kw)
