"""Command-line driver: gen-data, train, attack, eval, heatmap and report.

Every option can also come from a flat ``section.key=value`` file passed with
``--config``; command-line flags win. Each run writes the fully resolved
options to ``config.txt`` in its output directory, so a run can be repeated
with ``--config <out>/config.txt``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import logging
import math
import os
import re
import sys
from pathlib import Path


EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("patchforge")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this tool reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _range(text):
    lo, sep, hi = str(text).partition("..")
    try:
        return (float(lo), float(hi if sep else lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo..hi, got {text!r}") from None


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return f"{value[0]:g}..{value[1]:g}"
    if isinstance(value, list):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


# option tables: (section.key, type, default, help) ------------------------------------

SCENE_OPTS = [
    ("data.count", int, 100, "number of scenes"),
    ("data.image_size", int, 128, "image edge in pixels"),
    ("data.classes", str, "circle,square,triangle,star", "comma-separated shape classes"),
    ("data.objects_per_image", str, "1..4", "object count range lo..hi"),
    ("data.min_object_size", int, 16, "smallest object edge"),
    ("data.max_object_size", int, 48, "largest object edge"),
    ("data.background", str, "mixed", "flat, gradient, noise or mixed"),
]

TRAIN_OPTS = [
    ("train.data", str, None, "training set directory"),
    ("train.val", str, None, "validation set directory (optional)"),
    ("train.epochs", int, 60, "passes over the training set"),
    ("train.lr", float, 1e-2, "learning rate"),
    ("train.momentum", float, 0.9, "SGD momentum"),
    ("train.batch_size", int, 16, "images per update"),
    ("train.grad_clip", float, 10.0, "global gradient-norm clip (0 disables)"),
    ("train.lr_decay_epochs", str, None, "comma-separated epochs at which lr drops 10x (default: at 80%% of the run)"),
    ("train.val_conf", float, 0.1, "confidence threshold for validation mAP"),
]

ATTACK_OPTS = [
    ("attack.data", str, None, "training scenes for the patch"),
    ("attack.val", str, None, "validation scenes (defaults to attack.data)"),
    ("attack.weights", str, None, "trained detector weights"),
    ("attack.method", str, "pgd", "pgd or dpatch"),
    ("attack.clip", _bool, True, "keep the patch inside [0,1]"),
    ("attack.transform", str, "eot", "eot (random placement) or fixed (top-left)"),
    ("attack.patch_size", int, 32, "patch edge in pixels"),
    ("attack.lr", float, 0.1, "initial learning rate"),
    ("attack.momentum", float, 0.9, "momentum"),
    ("attack.decay", float, 0.95, "learning-rate decay factor"),
    ("attack.decay_every", int, 5, "steps between decays"),
    ("attack.steps", int, 30, "number of steps"),
    ("attack.iterations", int, 100, "iterations per step"),
    ("attack.restarts", int, 5, "random restarts"),
    ("attack.batch_size", int, 8, "images per iteration"),
    ("attack.target_class", int, 0, "dpatch target class"),
    ("attack.init", str, "random", "random or constant"),
    ("attack.momentum_mode", str, "buffer", "buffer (sign of buffer) or sign (momentum of signs)"),
    ("attack.val_every", int, 5, "steps between validations"),
    ("attack.val_conf", float, 0.1, "confidence threshold for validation"),
]


def _range_opts(section):
    """Transformation ranges for EOT training and random placement."""
    return [
        (f"{section}.rx", _range, (-5.0, 5.0), "x rotation range (degrees)"),
        (f"{section}.ry", _range, (-5.0, 5.0), "y rotation range (degrees)"),
        (f"{section}.rz", _range, (-10.0, 10.0), "z rotation range (degrees)"),
        (f"{section}.scale", _range, (24.0, 36.0), "patch edge range after scaling (pixels)"),
        (f"{section}.brightness", _range, (0.4, 1.6), "brightness factor range"),
    ]


ATTACK_OPTS += _range_opts("attack")

EVAL_OPTS = [
    ("eval.data", str, None, "evaluation scenes"),
    ("eval.weights", str, None, "trained detector weights"),
    ("eval.patch", str, None, "patch file (PFT1); omit for the clean baseline"),
    ("eval.placement", str, "random", "random or fixed"),
    ("eval.fixed_scale", float, None, "fixed placement edge length (defaults to patch size)"),
    ("eval.label", str, None, "method name used in report file names"),
    ("eval.nms_iou", float, 0.45, "NMS IoU threshold"),
] + _range_opts("eval")

HEATMAP_OPTS = [
    ("heatmap.data", str, None, "scenes"),
    ("heatmap.weights", str, None, "trained detector weights"),
    ("heatmap.patch", str, None, "patch file (optional)"),
    ("heatmap.placement", str, "random", "random or fixed"),
    ("heatmap.images", str, "0", "comma-separated image indices"),
] + _range_opts("heatmap")

RANGE_KEYS = ("rx", "ry", "rz", "scale", "brightness")

CHOICES = {
    "data.background": ("flat", "gradient", "noise", "mixed"),
    "attack.method": ("pgd", "dpatch"),
    "attack.transform": ("eot", "fixed"),
    "attack.init": ("random", "constant"),
    "attack.momentum_mode": ("buffer", "sign"),
    "eval.placement": ("random", "fixed"),
    "heatmap.placement": ("random", "fixed"),
}


def transform_ranges(r, section, image_size):
    from .eot import TransformRanges

    return TransformRanges(**{k: r[f"{section}.{k}"] for k in RANGE_KEYS}, image_size=image_size)


def _add_options(parser, table):
    for key, typ, default, text in table:
        flag = "--" + key.split(".", 1)[1].replace("_", "-")
        if typ is _bool:
            parser.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=text)
        else:
            suffix = f" (default {_fmt(default)})" if default is not None else ""
            parser.add_argument(flag, dest=key, type=typ, default=None, choices=CHOICES.get(key),
                                metavar=None if key in CHOICES else key.split(".", 1)[1].upper(),
                                help=text + suffix.replace("%", "%%"))


def read_config_file(path):
    """Flat key=value lines; '#' starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def resolve(args, tables):
    """Defaults, then the config file, then explicit flags."""
    file_values = read_config_file(args.config) if args.config else {}
    resolved = {"seed": 0}
    known = {"seed"}
    for table in tables:
        for key, typ, default, _ in table:
            known.add(key)
            value = default
            if key in file_values:
                try:
                    value = typ(file_values[key]) if file_values[key] != "" else None
                except (ValueError, argparse.ArgumentTypeError) as err:
                    raise UsageError(f"bad value for {key}: {err}") from None
                if key in CHOICES and value not in CHOICES[key]:
                    raise UsageError(f"{key} must be one of {', '.join(CHOICES[key])}, got {value!r}")
            if getattr(args, key, None) is not None:
                value = getattr(args, key)
            resolved[key] = value
    if "seed" in file_values:
        resolved["seed"] = int(file_values["seed"])
    if args.seed is not None:
        resolved["seed"] = args.seed
    unknown = sorted(k for k in file_values if k not in known and k.split(".", 1)[0] in
                     {t[0][0].split(".", 1)[0] for t in tables})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return resolved


def write_snapshot(out, resolved):
    lines = [f"{k}={_fmt(v)}\n" for k, v in sorted(resolved.items()) if v is not None]
    (Path(out) / "config.txt").write_text("".join(lines))


def _require(resolved, *keys):
    missing = [k for k in keys if not resolved.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join(
            "--" + k.split(".", 1)[1].replace("_", "-") for k in missing))


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# commands ---------------------------------------------------------------------------

def cmd_gen_data(r, out):
    from .scenegen import SceneConfig, generate_dataset

    cfg = SceneConfig.from_dict({k.split(".", 1)[1]: _fmt(v) for k, v in r.items()
                                 if k.startswith("data.") and k != "data.count"})
    generate_dataset(r["seed"], cfg, r["data.count"], out)
    log.info("wrote %d scenes to %s", r["data.count"], out)


def cmd_train(r, out):
    from .detector import DetectorConfig, train
    from .scenegen import load_dataset

    _require(r, "train.data")
    data = load_dataset(r["train.data"])
    val = load_dataset(r["train.val"]) if r["train.val"] else None
    config = DetectorConfig(image_size=data.config.image_size, C=data.config.num_classes)
    decay = None
    if r["train.lr_decay_epochs"] is not None:
        decay = tuple(int(e) for e in str(r["train.lr_decay_epochs"]).split(",") if e.strip())
    model, hist = train(data, config, epochs=r["train.epochs"], lr=r["train.lr"], momentum=r["train.momentum"],
                        seed=r["seed"], batch_size=r["train.batch_size"], val_set=val, val_conf=r["train.val_conf"],
                        lr_decay_epochs=decay, grad_clip=r["train.grad_clip"] or None)
    model.save(out / "weights.pft")
    with open(out / "history.csv", "w") as fh:
        fh.write("epoch,loss,val_map50\n")
        for e, loss in enumerate(hist.loss):
            m = hist.val_map50[e] if e < len(hist.val_map50) else math.nan
            fh.write(f"{e},{loss:.6f},{'' if math.isnan(m) else f'{m:.6f}'}\n")
    from .scenegen import write_manifest
    write_manifest(out / "manifest.txt", {"command": "train", "seed": r["seed"],
                                          "data": r["train.data"], "weights_sha256": sha256(out / "weights.pft"),
                                          "final_loss": f"{hist.loss[-1]:.6f}" if hist.loss else "",
                                          "seconds": f"{hist.seconds:.1f}"})


def attack_config(r, image_size):
    from .attack import AttackConfig
    from .eot import TransformRanges

    if r["attack.transform"] == "fixed":
        # no transformations: the ranges collapse onto the neutral placement
        p = float(r["attack.patch_size"])
        ranges = TransformRanges((0, 0), (0, 0), (0, 0), (p, p), (1, 1), image_size)
    else:
        ranges = transform_ranges(r, "attack", image_size)
    kw = {k.split(".", 1)[1]: v for k, v in r.items() if k.startswith("attack.")}
    for k in ("data", "val", "weights", *RANGE_KEYS):
        kw.pop(k)
    return AttackConfig(ranges=ranges, **kw)


def cmd_attack(r, out):
    from .attack import run_attack, save_patch, save_patch_png
    from .detector import MiniYOLO
    from .scenegen import load_dataset, write_manifest

    _require(r, "attack.data", "attack.weights")
    model = MiniYOLO.load(r["attack.weights"])
    data = load_dataset(r["attack.data"])
    val = load_dataset(r["attack.val"]) if r["attack.val"] else data
    config = attack_config(r, model.config.image_size)
    result = run_attack(config, data, val, model, seed=r["seed"])
    save_patch(out / "patch.pft", result.patch)
    save_patch_png(out / "patch.png", result.patch)
    for h in result.histories:
        h.to_csv(out / f"history_r{h.restart}.csv")
    best = result.histories[result.best]
    items = {"command": "attack", "seed": r["seed"], "weights": r["attack.weights"],
             "weights_sha256": sha256(r["attack.weights"]), "best_restart": result.best,
             "best_final_map50": f"{best.final_map:.6f}",
             "patch_min": f"{float(result.patch.min()):.6f}", "patch_max": f"{float(result.patch.max()):.6f}"}
    items.update({f"attack.{k}": _fmt(v) for k, v in config.to_dict().items()})
    write_manifest(out / "manifest.txt", items)


def cmd_eval(r, out, thresholds):
    from .attack import load_patch
    from .detector import MiniYOLO
    from .evalkit import evaluate_thresholds, write_reports
    from .scenegen import load_dataset

    _require(r, "eval.data", "eval.weights")
    model = MiniYOLO.load(r["eval.weights"])
    data = load_dataset(r["eval.data"])
    patch = load_patch(r["eval.patch"]) if r["eval.patch"] else None
    label = r["eval.label"] or ("baseline" if patch is None else "patched")
    if not re.fullmatch(r"[A-Za-z0-9_-]+", label):
        raise UsageError(f"label may only contain letters, digits, '-' and '_': {label!r}")
    ranges = None
    if patch is not None and r["eval.placement"] == "random":
        ranges = transform_ranges(r, "eval", model.config.image_size)
    reports = evaluate_thresholds(data, model, thresholds, patch=patch, placement=r["eval.placement"],
                                  seed=r["seed"], scale=r["eval.fixed_scale"], nms_iou=r["eval.nms_iou"],
                                  ranges=ranges)
    write_reports(reports, out, label)
    for rep in reports:
        print(f"{label} conf={rep.conf_threshold:g} mAP50={rep.map:.4f}")


def cmd_heatmap(r, out):
    from .attack import load_patch
    from .detector import MiniYOLO
    from .evalkit import placements, predict, roi_heatmap, save_heatmap
    from .scenegen import load_dataset

    _require(r, "heatmap.data", "heatmap.weights")
    model = MiniYOLO.load(r["heatmap.weights"])
    data = load_dataset(r["heatmap.data"])
    try:
        idx = [int(i) for i in str(r["heatmap.images"]).split(",") if i.strip()]
    except ValueError:
        raise UsageError(f"bad image list {r['heatmap.images']!r}") from None
    if any(not 0 <= i < len(data) for i in idx):
        raise UsageError(f"image index out of range (dataset has {len(data)} images)")
    patch = load_patch(r["heatmap.patch"]) if r["heatmap.patch"] else None
    samples = None
    if patch is not None:
        ranges = None
        if r["heatmap.placement"] == "random":
            ranges = transform_ranges(r, "heatmap", model.config.image_size)
        samples = placements(r["heatmap.placement"], len(data), patch.shape[0], model.config.image_size,
                             r["seed"], ranges)
        samples = [samples[i] for i in idx]
    grids = predict(data.subset(idx), model, patch, samples)
    for i, g in zip(idx, grids):
        save_heatmap(roi_heatmap(g, model.config), out / f"heatmap_{i:05d}.png", out / f"heatmap_{i:05d}.csv")


REPORT_NAME = re.compile(r"^(?P<method>[A-Za-z0-9_-]+)_conf(?P<conf>[0-9.eE+-]+)\.csv$")


def report_rows(run_dir):
    """(method, conf, mAP, smallest (class, AP), largest (class, AP)) per report CSV."""
    from .evalkit import EvalReport

    rows = []
    for path in sorted(Path(run_dir).rglob("*.csv")):
        m = REPORT_NAME.match(path.name)
        if not m:
            continue
        try:
            per_class, mean = EvalReport.read_csv(path)
        except (ValueError, KeyError):
            continue
        valid = {k: v for k, v in per_class.items() if v is not None and not math.isnan(v)}
        lo = min(valid.items(), key=lambda kv: kv[1]) if valid else ("-", math.nan)
        hi = max(valid.items(), key=lambda kv: kv[1]) if valid else ("-", math.nan)
        rows.append((m["method"], float(m["conf"]), mean, lo, hi))
    order = {"baseline": 0}
    rows.sort(key=lambda row: (order.get(row[0].lower(), 1), row[0].lower(), row[1]))
    return rows


def format_report(rows):
    def pct(v):
        return "   n/a" if math.isnan(v) else f"{100 * v:6.2f}"

    lines = [f"{'Method':<14} {'Conf.':>6} {'mAP (%)':>8}  {'Smallest AP (%)':<24} {'Largest AP (%)':<24}"]
    for method, conf, mean, lo, hi in rows:
        name = method[:1].upper() + method[1:]
        lines.append(f"{name:<14} {conf:>6g} {pct(mean):>8}  {pct(lo[1]) + ' ' + lo[0]:<24} {pct(hi[1]) + ' ' + hi[0]:<24}")
    return "\n".join(lines)


def cmd_report(run_dir):
    if not Path(run_dir).is_dir():
        raise FileNotFoundError(f"no such run directory: {run_dir}")
    rows = report_rows(run_dir)
    if not rows:
        raise FileNotFoundError(f"no evaluation reports (<method>_conf<c>.csv) under {run_dir}")
    print(format_report(rows))


# entry point ------------------------------------------------------------------------

def build_parser():
    parser = Parser(prog="patchforge", description="Adversarial patches against a miniature grid detector.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=Parser, required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--config", type=Path, default=None, help="section.key=value options file")

    p = sub.add_parser("gen-data", help="render a synthetic scene dataset")
    common(p)
    _add_options(p, SCENE_OPTS)
    p = sub.add_parser("train", help="train the detector")
    common(p)
    _add_options(p, TRAIN_OPTS)
    p = sub.add_parser("attack", help="optimize a universal patch")
    common(p)
    _add_options(p, ATTACK_OPTS)
    p = sub.add_parser("eval", help="mAP-50 with or without a patch")
    common(p)
    _add_options(p, EVAL_OPTS)
    p.add_argument("--conf", type=float, action="append", default=None,
                   help="confidence threshold; repeatable (default 0.001, 0.1, 0.5)")
    p = sub.add_parser("heatmap", help="export pre-NMS confidence heatmaps")
    common(p)
    _add_options(p, HEATMAP_OPTS)
    p = sub.add_parser("report", help="summarize evaluation reports as a table")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity; unused")
    return parser


TABLES = {"gen-data": [SCENE_OPTS], "train": [TRAIN_OPTS], "attack": [ATTACK_OPTS],
          "eval": [EVAL_OPTS], "heatmap": [HEATMAP_OPTS]}


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads from PATCHFORGE_THREADS, if set."""
    value = os.environ.get("PATCHFORGE_THREADS")
    if not value:
        yield
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"PATCHFORGE_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def run(args):
    if args.command == "report":
        cmd_report(args.run_dir)
        return
    resolved = resolve(args, TABLES[args.command])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "eval":
        thresholds = args.conf or [0.001, 0.1, 0.5]
        resolved["eval.conf"] = [float(c) for c in thresholds]
    write_snapshot(out, resolved)
    if args.command == "gen-data":
        cmd_gen_data(resolved, out)
    elif args.command == "train":
        cmd_train(resolved, out)
    elif args.command == "attack":
        cmd_attack(resolved, out)
    elif args.command == "eval":
        cmd_eval(resolved, out, resolved["eval.conf"])
    elif args.command == "heatmap":
        cmd_heatmap(resolved, out)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:  # --help, or a usage error reported by Parser.error
        return stop.code if isinstance(stop.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with thread_limit():
            run(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"patchforge: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError, RuntimeError) as err:
        print(f"patchforge: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
