"""Command-line entry point: ``python -m gradkd <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
appends a config-echo record to its metrics log before doing any work.
Configuration layers as built-in defaults < ``--config`` file < flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SceneConfig, generate_dataset, load_dataset
from .detector import STUDENT_CONFIG, TEACHER_CONFIG, ConfigError, DetectorConfig, count_complexity
from .distill import (LR_PRESETS, KdConfig, TrainConfig, TrainingDiverged, config_echo,
                      distill_train, evaluate, teacher_signals, train_teacher)
from .io import CheckpointError, export_heatmap, load_checkpoint, log_metrics, save_checkpoint

logger = logging.getLogger(__name__)

ARCHS = {"teacher": TEACHER_CONFIG, "student": STUDENT_CONFIG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------- value types


def _lr(text: str) -> float:
    if text in LR_PRESETS:
        return LR_PRESETS[text]
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or one of {sorted(LR_PRESETS)}, got {text!r}")
    if value <= 0:
        raise argparse.ArgumentTypeError("learning rate must be positive")
    return value


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW such as 64x64, got {text!r}")
    return h, w


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# ------------------------------------------------------------ flag registry


class _Flags:
    """Adds flags whose defaults are tracked here rather than in argparse.

    argparse only stores flags given explicitly, so the caller can layer
    defaults, config-file values and explicit flags in that order.
    """

    def __init__(self, parser):
        self.parser = parser
        self.defaults: dict[str, object] = {}
        self.types: dict[str, object] = {}

    def add(self, flag, default, type=str, help="", boolean=False, dest=None):
        dest = dest or flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        self.types[dest] = _bool if boolean else type
        shown = "none" if default is None else default
        text = f"{help} (default: {shown})"
        if boolean:
            self.parser.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction,
                                     default=argparse.SUPPRESS, help=text)
        else:
            self.parser.add_argument(flag, dest=dest, type=type, default=argparse.SUPPRESS, help=text)

    def resolve(self, ns: argparse.Namespace) -> dict:
        values = dict(self.defaults)
        explicit = vars(ns)
        path = explicit.get("config")
        if path is not None:
            for key, text in read_config_file(path).items():
                if key not in self.types or key == "config":
                    raise UsageError(f"{path}: unknown key {key!r}")
                try:
                    values[key] = self.types[key](text) if text.lower() != "none" else None
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"{path}: bad value for {key!r}: {exc}")
        for key, value in explicit.items():
            if key in self.defaults:
                values[key] = value
        return values


def _common(f: _Flags, metrics_default="metrics.jsonl"):
    f.add("--config", None, help="key = value file; flags override it")
    f.add("--metrics", metrics_default, help="JSON-lines metrics log")


def _train_flags(f: _Flags, epochs):
    t = TrainConfig()
    f.add("--lr", t.lr, type=_lr, help=f"learning rate, number or preset {LR_PRESETS}")
    f.add("--momentum", t.momentum, type=float, help="SGD momentum")
    f.add("--weight-decay", t.weight_decay, type=float, help="L2 weight decay")
    f.add("--epochs", epochs, type=int, help="training epochs")
    f.add("--batch", t.batch_size, type=int, help="batch size")
    f.add("--seed", t.seed, type=int, help="initialisation and shuffling seed")
    f.add("--warmup", t.warmup_steps, type=int, help="linear warmup steps")
    f.add("--grad-clip", t.grad_clip, type=float, help="global gradient-norm clip")


def _kd_flags(f: _Flags):
    k = KdConfig()
    f.add("--gkd", k.enable_gkd, boolean=True, help="gradient-guided target-map loss")
    f.add("--mask", k.enable_mask, boolean=True, help="box-mask weighting of the imitation loss")
    f.add("--mfi", k.enable_mfi, boolean=True, help="attention-weighted feature imitation")
    f.add("--inherit", k.inherit, boolean=True, help="initialise student neck and head from the teacher")
    f.add("--alpha", k.alpha, type=float, help="weight of the attention-transfer term")
    f.add("--beta", k.beta, type=float, help="weight of the BMFI loss inside L_KD")
    f.add("--kd-weight", k.kd_weight, type=float, help="weight of L_KD against the task loss")
    f.add("--temperature", k.temperature, type=float, help="attention softmax temperature")


def _train_config(v: dict) -> TrainConfig:
    return TrainConfig(lr=v["lr"], momentum=v["momentum"], weight_decay=v["weight_decay"],
                       epochs=v["epochs"], batch_size=v["batch"], seed=v["seed"],
                       warmup_steps=v["warmup"], grad_clip=v["grad_clip"])


def _kd_config(v: dict) -> KdConfig:
    return KdConfig(alpha=v["alpha"], beta=v["beta"], temperature=v["temperature"],
                    enable_gkd=v["gkd"], enable_mask=v["mask"], enable_mfi=v["mfi"],
                    kd_weight=v["kd_weight"], inherit=v["inherit"])


def _epoch_logger(path, command):
    def log(record):
        log_metrics({"event": "epoch", "command": command, **record}, path)
    return log


# ----------------------------------------------------------------- commands


def cmd_gen_data(v):
    scene = SceneConfig(size_range=(v["min_size"], v["max_size"]),
                        count_range=(v["min_objects"], v["max_objects"]), noise=v["noise"])
    log_metrics(config_echo(command="gen-data", scene=scene, run={k: v[k] for k in ("seed", "train", "val", "out")}),
                v["metrics"])
    root = generate_dataset(v["seed"], v["train"], v["val"], v["out"], scene, overwrite=v["overwrite"])
    print(f"wrote {v['train']} train / {v['val']} val images to {root}")


def cmd_train_teacher(v):
    det = ARCHS[v["arch"]]
    tc = _train_config(v)
    log_metrics(config_echo(command="train-teacher", detector=det, train=tc,
                            run={"data": v["data"], "out": v["out"]}), v["metrics"])
    ds = load_dataset(v["data"])
    res = train_teacher(det, tc, ds, on_epoch=_epoch_logger(v["metrics"], "train-teacher"))
    save_checkpoint(res.model, v["out"], step=res.steps, optimizer_state=res.optimizer_state,
                    meta={"arch": v["arch"]})
    print(f"val mAP@0.5 {res.history[-1]['val_map50'] if res.history else 0.0:.4f}; saved {v['out']}")


def cmd_distill(v):
    tc, kd = _train_config(v), _kd_config(v)
    log_metrics(config_echo(command="distill", detector=STUDENT_CONFIG, train=tc, kd=kd,
                            run={"data": v["data"], "teacher": v["teacher"], "out": v["out"]}),
                v["metrics"])
    teacher = load_checkpoint(v["teacher"]).model
    ds = load_dataset(v["data"])
    res = distill_train(teacher, STUDENT_CONFIG, kd, tc, ds,
                        on_epoch=_epoch_logger(v["metrics"], "distill"))
    save_checkpoint(res.model, v["out"], step=res.steps, optimizer_state=res.optimizer_state,
                    meta={"arch": "student"})
    print(f"val mAP@0.5 {res.history[-1]['val_map50'] if res.history else 0.0:.4f}; saved {v['out']}")


def cmd_eval(v):
    log_metrics(config_echo(command="eval", run={k: v[k] for k in ("checkpoint", "data", "split")}),
                v["metrics"])
    model = load_checkpoint(v["checkpoint"]).model
    split = getattr(load_dataset(v["data"]), v["split"])
    score = evaluate(model, split.images, split.gts)
    log_metrics({"event": "eval", "split": v["split"], "map50": score}, v["metrics"])
    print(f"mAP@0.5 {score:.6f}")


def cmd_emit_masks(v):
    from .distill import capture_gradient_maps
    from .metrics import mask_similarity
    log_metrics(config_echo(command="emit-masks", run={k: v[k] for k in ("teacher", "student", "data", "out")},
                            images=list(v["images"])), v["metrics"])
    teacher = load_checkpoint(v["teacher"]).model
    student = load_checkpoint(v["student"]).model
    val = load_dataset(v["data"]).val
    out = Path(v["out"])
    for i in v["images"]:
        if not 0 <= i < len(val):
            raise UsageError(f"image index {i} outside the {len(val)} validation images")
        img, gts = val.images[i:i + 1], [val.gts[i]]
        _, t_maps = capture_gradient_maps(teacher, img, gts)
        _, s_maps = capture_gradient_maps(student, img, gts)
        for lvl, (tm, sm) in enumerate(zip(t_maps, s_maps)):
            sim = mask_similarity(tm[0], sm[0])
            for who, m in (("teacher", tm[0]), ("student", sm[0])):
                export_heatmap(m, out / f"img{i:04d}_l{lvl}_{who}", scale=v["scale"], color=True)
            log_metrics({"event": "mask", "image": i, "level": lvl, "mask_similarity": sim}, v["metrics"])
            print(f"image {i} level {lvl}: mask_similarity {sim:.4f}")


def cmd_complexity(v):
    det = ARCHS[v["arch"]]
    overrides = {k: v[k] for k in ("widths", "neck_channels", "num_classes", "stem_channels",
                                   "head_convs", "num_levels") if v[k] is not None}
    if v["hw"] is not None:
        overrides["input_size"] = v["hw"]
    try:
        det = replace(det, **overrides)
    except ConfigError as exc:
        raise UsageError(str(exc))
    log_metrics(config_echo(command="complexity", detector=det), v["metrics"])
    params, flops = count_complexity(det)
    log_metrics({"event": "complexity", "params": params, "flops": flops}, v["metrics"])
    print(f"params {params} flops {flops}")


def cmd_fdcheck(v):
    from .gradcheck import run_gradient_suite
    log_metrics(config_echo(command="fdcheck", run={"seed": v["seed"], "tol": v["tol"]}), v["metrics"])
    ok = True
    for name, err in run_gradient_suite(seed=v["seed"]):
        good = err < v["tol"]
        ok &= good
        log_metrics({"event": "fdcheck", "op": name, "max_rel_error": err, "ok": good}, v["metrics"])
        print(f"{'ok  ' if good else 'FAIL'} {name:<20} max rel error {err:.3e}")
    if not ok:
        raise RuntimeError("gradient check failed")


# ------------------------------------------------------------------- parser


def build_parser():
    parser = _Parser(prog="gradkd", description="Distil a small toy detector from a larger one using gradient-weighted feature maps.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    registry = {}

    def command(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        f = _Flags(p)
        registry[name] = (fn, f)
        return f

    f = command("gen-data", cmd_gen_data, "generate the synthetic shapes dataset")
    _common(f)
    s = SceneConfig()
    f.add("--seed", 0, type=int, help="dataset seed")
    f.add("--train", 500, type=int, help="training images")
    f.add("--val", 100, type=int, help="validation images")
    f.add("--out", "data", help="output directory")
    f.add("--overwrite", False, boolean=True, help="replace a non-empty output directory")
    f.add("--min-size", s.size_range[0], type=int, help="smallest object size in pixels")
    f.add("--max-size", s.size_range[1], type=int, help="largest object size in pixels")
    f.add("--min-objects", s.count_range[0], type=int, help="fewest objects per image")
    f.add("--max-objects", s.count_range[1], type=int, help="most objects per image")
    f.add("--noise", s.noise, type=float, help="background noise standard deviation")

    f = command("train-teacher", cmd_train_teacher, "train a detector with the task loss only")
    _common(f)
    f.add("--data", "data", help="dataset directory")
    f.add("--out", "teacher.ckpt", help="output checkpoint")
    f.add("--arch", "teacher", type=_choice(ARCHS), help=f"architecture {sorted(ARCHS)}")
    _train_flags(f, epochs=30)

    f = command("distill", cmd_distill, "distill a student from a frozen teacher checkpoint")
    _common(f)
    f.add("--teacher", "teacher.ckpt", help="teacher checkpoint")
    f.add("--data", "data", help="dataset directory")
    f.add("--out", "student.ckpt", help="output checkpoint")
    _train_flags(f, epochs=TrainConfig().epochs)
    _kd_flags(f)

    f = command("eval", cmd_eval, "mAP@0.5 of a checkpoint on a dataset split")
    _common(f)
    f.add("--checkpoint", "student.ckpt", help="checkpoint to evaluate")
    f.add("--data", "data", help="dataset directory")
    f.add("--split", "val", type=_choice({"train": 0, "val": 0}), help="split to evaluate")

    f = command("emit-masks", cmd_emit_masks, "write teacher/student target-map heatmaps")
    _common(f)
    f.add("--teacher", "teacher.ckpt", help="teacher checkpoint")
    f.add("--student", "student.ckpt", help="student checkpoint")
    f.add("--data", "data", help="dataset directory")
    f.add("--images", (0,), type=_ints, help="validation image indices")
    f.add("--out", "masks", help="output directory")
    f.add("--scale", 8, type=int, help="nearest-neighbour upscaling of each cell")

    f = command("complexity", cmd_complexity, "parameter and FLOP counts (one multiply-add = one FLOP)")
    _common(f)
    f.add("--arch", "teacher", type=_choice(ARCHS), help=f"base architecture {sorted(ARCHS)}")
    f.add("--hw", None, type=_hw, help="input size HxW, e.g. 64x64")
    f.add("--widths", None, type=_ints, help="backbone stage widths")
    f.add("--neck-channels", None, type=int, help="neck channels")
    f.add("--num-classes", None, type=int, help="object classes")
    f.add("--stem-channels", None, type=int, help="stem conv channels")
    f.add("--head-convs", None, type=int, help="hidden convs per head branch")
    f.add("--num-levels", None, type=int, help="pyramid levels")

    f = command("fdcheck", cmd_fdcheck, "finite-difference check of every autodiff op and loss")
    _common(f)
    f.add("--seed", 0, type=int, help="seed for the random test inputs")
    f.add("--tol", 1e-4, type=float, help="max relative error allowed")
    return parser, registry


def _choice(options):
    def parse(text):
        if text not in options:
            raise argparse.ArgumentTypeError(f"expected one of {sorted(options)}, got {text!r}")
        return text
    return parse


def main(argv=None) -> int:
    parser, registry = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    fn, flags = registry[ns.command]
    try:
        values = flags.resolve(ns)
        fn(values)
    except UsageError as exc:
        print(f"gradkd {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, CheckpointError, TrainingDiverged, RuntimeError) as exc:
        print(f"gradkd {ns.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
