"""Command-line entry point: ``framecons <subcommand> ...``.

Reports go to stdout, logs to stderr. Exit codes: 0 success, 2 usage or
configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import colorsys
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .convlstm import ConvLstmConfig, param_count
from .datagen import (DatasetError, SceneConfig, generate_dataset, read_dataset, read_label_maps,
                      sparse_gt_view, write_dataset)
from .gradsuite import SCOPES, TOLERANCE, run_gradcheck
from .labels import IGNORE
from .losses import LossConfig
from .metrics import MetricAccumulator, inconsistency_maps
from .models import ModelSpec, SpecError, build, parameter_report, predict
from .netpbm import NetpbmError, write_pgm, write_ppm
from .recipes import RECIPES, finetune_row, get_recipe, pretrain_base, RecipeRow, run_experiment
from .tensorio import FormatError, parse_kv
from .training import TrainConfig, TrainLog, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("framecons")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad arguments or configuration; exit code 2."""


# ----------------------------------------------------------------------------
# palette
# ----------------------------------------------------------------------------

def palette(num_classes: int) -> np.ndarray:
    """``[K, 3]`` uint8: class c is HSV(360 c / K, 0.8, 0.95)."""
    rgb = [colorsys.hsv_to_rgb(c / num_classes, 0.8, 0.95) for c in range(num_classes)]
    return np.clip(np.rint(np.array(rgb) * 255.0), 0, 255).astype(np.uint8)


def colorize(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Label map ``[M, N]`` to RGB ``[M, N, 3]``; IGNORE is black."""
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[:num_classes] = palette(num_classes)
    return lut[np.asarray(labels, dtype=np.uint8)]


def decolorize(rgb: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse of :func:`colorize` (black decodes to IGNORE)."""
    pal = palette(num_classes)
    if len({tuple(c) for c in pal} | {(0, 0, 0)}) != num_classes + 1:
        raise ValueError(f"palette is not injective for {num_classes} classes")
    out = np.full(rgb.shape[:2], IGNORE, dtype=np.uint8)
    for c, colour in enumerate(pal):
        out[np.all(rgb == colour, axis=-1)] = c
    return out


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _overrides(items: list[str]) -> dict[str, str]:
    try:
        return parse_kv("\n".join(items), "<command line>")
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read_config_file(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return parse_kv(Path(path).read_text(encoding="utf-8"), path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _echo(title: str, kv: dict) -> None:
    log.info("%s: %s", title, " ".join(f"{k}={v}" for k, v in kv.items()))


def _load_data(path: str):
    try:
        return read_dataset(path)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None


def _parse_spec(text: str, num_classes: int | None = None) -> ModelSpec:
    spec = ModelSpec.parse(text)
    if num_classes is not None and "num_classes" not in text:
        spec = dataclasses.replace(spec, num_classes=num_classes)
    return spec


def _predictions(args, dataset) -> list[np.ndarray]:
    """Label maps per scene from either a checkpoint or a predictions directory."""
    if args.predictions:
        t_len = dataset.frame_shape[0]
        try:
            return read_label_maps(args.predictions, len(dataset), t_len)
        except DatasetError as exc:
            raise UsageError(str(exc)) from None
    model = _load_model(args.ckpt)
    if model.spec.num_classes != dataset.num_classes:
        raise UsageError(f"checkpoint predicts {model.spec.num_classes} classes, "
                         f"dataset has {dataset.num_classes}")
    return [predict(model, dataset[k].frames).argmax(axis=-1).astype(np.uint8)
            for k in range(len(dataset))]


def _load_model(path: str):
    try:
        return load_checkpoint(path).model
    except FileNotFoundError:
        raise UsageError(f"no checkpoint at {path}") from None
    except (FormatError, SpecError, ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    if args.scenes < 1:
        raise UsageError(f"--scenes must be at least 1, got {args.scenes}")
    kv = _read_config_file(args.config)
    kv.update(_overrides(args.overrides))
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    try:
        config = SceneConfig.from_kv(kv, args.config or "<command line>")
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    _echo("generate-data config", {"out": args.out, "scenes": args.scenes, "split": args.split,
                                   **config.to_kv()})
    dataset = generate_dataset(config, args.scenes, args.split)
    try:
        write_dataset(dataset, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from None
    hist = np.zeros(config.num_classes, dtype=np.int64)
    for k in range(len(dataset)):
        hist += np.bincount(dataset[k].labels.ravel(), minlength=256)[:config.num_classes]
    t_len, h, w = dataset.frame_shape
    print(f"scenes={len(dataset)}")
    print(f"frames={t_len}")
    print(f"height={h}")
    print(f"width={w}")
    print(f"pixels={len(dataset) * t_len * h * w}")
    print("class_histogram=" + ",".join(str(int(v)) for v in hist))
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    kv = _read_config_file(args.config)
    kv.update(_overrides(args.overrides))
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    if args.epochs is not None:
        kv["epochs"] = str(args.epochs)
    try:
        return TrainConfig.from_kv(kv, args.config or "<command line>")
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    dataset = _load_data(args.data)
    val = _load_data(args.val) if args.val else None
    try:
        spec = _parse_spec(args.model, dataset.num_classes)
    except SpecError as exc:
        raise UsageError(f"bad model spec: {exc}") from None
    out = Path(args.out)
    train_log = TrainLog(Path(args.log) if args.log else out.with_name(out.name + ".log"))

    if args.recipe:
        try:
            recipe = get_recipe(args.recipe)
        except KeyError as exc:
            raise UsageError(exc.args[0]) from None
        if args.resume:
            raise UsageError("--resume works with --config runs only")
        config = _train_config(args)
        _echo("train recipe", {"recipe": recipe.name, "pretrain_epochs": recipe.pretrain_epochs,
                               "finetune_epochs": recipe.finetune_epochs, "phase": recipe.phase,
                               **spec.to_kv(), **config.loss.__dict__})
        seed = config.seed
        if spec.has_lstm:
            base_arch = "SSNet" if spec.architecture == "VSSNet" else spec.architecture
            base_spec = dataclasses.replace(spec, architecture=base_arch, lstm_position="None")
            recipe = dataclasses.replace(recipe, base=base_spec)
            base = pretrain_base(recipe, dataset, seed, train_log=train_log)
            model = finetune_row(RecipeRow(spec.architecture, spec, config.loss), recipe, base,
                                 dataset, seed, train_log=train_log)
        else:
            recipe = dataclasses.replace(recipe, base=spec)
            model = pretrain_base(recipe, dataset, seed,
                                  recipe.pretrain_epochs + recipe.finetune_epochs, train_log=train_log)
        save_checkpoint(out, model)
    else:
        config = _train_config(args)
        if args.resume:
            ckpt = load_checkpoint(args.resume)
            if ckpt.model.spec != spec:
                raise UsageError(f"--resume checkpoint has spec {ckpt.model.spec}, not {spec}")
            model, state = ckpt.model, ckpt.train_state(config)
        else:
            model, state = build(spec, config.seed), None
        _echo("train config", {**spec.to_kv(), **config.to_kv(), "data": args.data, "out": args.out})
        model, _, state = train(model, dataset, config, val, train_log, state, checkpoint_path=out)
        save_checkpoint(out, model, state)
    if val is not None:
        report = evaluate(model, val)
        train_log.report(f"final {val.split}", report)
        print(report.to_kv_text(), end="")
    log.info("checkpoint written to %s", out)
    return EXIT_OK


def cmd_eval(args) -> int:
    if bool(args.ckpt) == bool(args.predictions):
        raise UsageError("give exactly one of --ckpt or --predictions")
    dataset = _load_data(args.data)
    _echo("eval config", {"data": args.data, "ckpt": args.ckpt, "predictions": args.predictions,
                          "sparse_gt": args.sparse_gt, "cons_mode": args.cons_mode})
    if args.sparse_gt is not None:
        if args.sparse_gt < 1:
            raise UsageError(f"--sparse-gt must be positive, got {args.sparse_gt}")
        dataset = sparse_gt_view(dataset, args.sparse_gt)
    preds = _predictions(args, dataset)
    gt_mode = f"sparse(stride={args.sparse_gt})" if args.sparse_gt else "dense"
    acc = MetricAccumulator(dataset.num_classes, args.cons_mode, gt_mode)
    for k, pred in enumerate(preds):
        scene = dataset[k]
        if pred.shape != scene.labels.shape:
            raise UsageError(f"scene {k}: predictions {pred.shape} vs labels {scene.labels.shape}")
        acc.add(pred, scene.labels, scene.temporal_labels)
    report = acc.report()
    text = report.to_kv_text()
    sys.stdout.write(text)
    target = Path(args.report) if args.report else \
        (Path(args.ckpt + ".eval.txt") if args.ckpt else Path(args.predictions) / "eval_report.txt")
    target.write_text(text, encoding="utf-8", newline="\n")
    sys.stderr.write(report.summary(f"eval {args.data}"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    _echo("gradcheck config", {"scope": args.scope, "seeds": args.seeds, "tolerance": args.tolerance})
    results = run_gradcheck(scopes, seeds=args.seeds, tolerance=args.tolerance)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"checks={len(results)} failed={len(failed)} worst={max(r.error for r in results):.3e}")
    return EXIT_OK if not failed else EXIT_RUNTIME


def _lstm_config(text: str) -> ConvLstmConfig:
    """``convlstm,in=19,out=19,filter=3,variant=Standard[,activation=tanh]``"""
    parts = [p.strip() for p in text.replace(";", ",").split(",") if p.strip()]
    kv = _overrides(parts[1:])
    aliases = {"in": "in_channels", "out": "out_channels", "activation": "state_activation"}
    kv = {aliases.get(k, k): v for k, v in kv.items()}
    if "filter" in kv:
        kv["filter_height"] = kv["filter_width"] = kv.pop("filter")
    known = {f.name: f for f in dataclasses.fields(ConvLstmConfig)}
    unknown = set(kv) - set(known)
    if unknown:
        raise UsageError(f"bad ConvLSTM spec: unknown field {sorted(unknown)[0]!r}")
    try:
        typed = {k: int(v) if known[k].type == "int" else v for k, v in kv.items()}
        return ConvLstmConfig(**typed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad ConvLSTM spec: {exc}") from None


def cmd_params(args) -> int:
    if args.model.strip().lower().startswith("convlstm"):
        cfg = _lstm_config(args.model)
        _echo("params config", dataclasses.asdict(cfg))
        print(f"convlstm={cfg.in_channels}->{cfg.out_channels} {cfg.filter_height}x{cfg.filter_width} "
              f"{cfg.variant}")
        print(f"params={param_count(cfg)}")
        return EXIT_OK
    try:
        spec = ModelSpec.parse(args.model)
    except SpecError as exc:
        raise UsageError(f"bad model spec: {exc}") from None
    _echo("params config", spec.to_kv())
    model = build(spec, 0)
    for layer, count in parameter_report(model).items():
        print(f"{layer}={count}")
    if model.lstm is not None:
        print(f"convlstm_params={param_count(model.lstm.config)}")
    print(f"params={model.parameter_count()}")
    return EXIT_OK


def cmd_render(args) -> int:
    if bool(args.ckpt) == bool(args.predictions):
        raise UsageError("give exactly one of --ckpt or --predictions")
    dataset = _load_data(args.data)
    if not 0 <= args.scene < len(dataset):
        raise UsageError(f"--scene {args.scene} outside [0, {len(dataset) - 1}]")
    _echo("render config", {"data": args.data, "ckpt": args.ckpt, "scene": args.scene, "out": args.out})
    one = dataset[args.scene:args.scene + 1]
    if args.predictions:
        t_len = dataset.frame_shape[0]
        try:
            pred = read_label_maps(args.predictions, len(dataset), t_len)[args.scene]
        except DatasetError as exc:
            raise UsageError(str(exc)) from None
    else:
        model = _load_model(args.ckpt)
        pred = predict(model, one[0].frames).argmax(axis=-1).astype(np.uint8)
    labels = one[0].labels
    k = dataset.num_classes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(labels.shape[0]):
        write_ppm(out / f"pred_{t:03d}.ppm", colorize(pred[t], k))
        write_ppm(out / f"gt_{t:03d}.ppm", colorize(labels[t], k))
    for t in range(labels.shape[0] - 1):
        flips, change = inconsistency_maps(pred, labels, t)
        write_pgm(out / f"pred_incons_{t:03d}.pgm", flips.astype(np.uint8) * 255)
        write_pgm(out / f"gt_change_{t:03d}.pgm", change.astype(np.uint8) * 255)
    print(f"frames={labels.shape[0]}")
    print(f"pairs={labels.shape[0] - 1}")
    print(f"out={out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    try:
        get_recipe(args.recipe)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    train_ds, val_ds = _load_data(args.data), _load_data(args.val)
    _echo("experiment config", {"recipe": args.recipe, "data": args.data, "val": args.val,
                                "seed": args.seed or 0, "pretrain_epochs": args.pretrain_epochs,
                                "finetune_epochs": args.finetune_epochs})
    result = run_experiment(args.recipe, train_ds, val_ds, seed=args.seed or 0,
                            pretrain_epochs=args.pretrain_epochs,
                            finetune_epochs=args.finetune_epochs,
                            train_log=TrainLog(Path(args.log) if args.log else None))
    sys.stdout.write(result.table())
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framecons",
                                     description="Temporally consistent video segmentation toolkit.")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")
    # the same flags after the subcommand; SUPPRESS keeps them from clobbering the global ones
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--config", help="key=value scene config file")
    p.add_argument("--split", default="train")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="model spec, e.g. architecture=MiniEsp,lstm_position=L1b")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--recipe", choices=sorted(RECIPES))
    group.add_argument("--config", help="key=value training config file")
    p.add_argument("--out", required=True)
    p.add_argument("--val", help="validation dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--log", help="training log (default: OUT.log)")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or stored predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--predictions", help="directory of scene_XXXXX/pred_TTT.pgm label maps")
    p.add_argument("--sparse-gt", type=int, metavar="STRIDE")
    p.add_argument("--cons-mode", choices=("raw", "dilated"), default="raw")
    p.add_argument("--report", help="report file (default next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", parents=[common], help="colour-coded predictions and masks")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--predictions")
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("params", parents=[common], help="parameter counts")
    p.add_argument("--model", required=True,
                   help="model spec, or convlstm,in=C,out=D,filter=P,variant=V")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("experiment", parents=[common], help="run a named recipe and print its table")
    p.add_argument("--recipe", required=True, choices=sorted(RECIPES))
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--log")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DatasetError, FormatError, NetpbmError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
