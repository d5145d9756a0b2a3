"""Command line entry point: ``iap {gen-data,train,localize,attack,eval,ablate}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data/model error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackOutcome, localize
from .config import ABLATION_AXES, ConfigError, RunConfig, load_config
from .data import (
    DataError, LabeledImage, read_image_ppm, synthetic_splits, load_cifar10_dir, write_cifar10_binary,
    write_image_ppm, write_map_pgm, write_report,
)
from .engine import EngineError
from .experiments import attack_images, baseline_images, select_images, summarize, sweep
from .localization import make_mask
from .metrics import evaluate
from .model import (
    TrainConfig, WeightFileError, attention_argmax, build_default_model, grad_cam, load_weights, save_weights, train,
)

log = logging.getLogger("iap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class DataModelError(Exception):
    pass


class InvariantError(Exception):
    pass


# -- helpers ------------------------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    return out


def load_splits(cfg: RunConfig) -> tuple[list[LabeledImage], list[LabeledImage]]:
    if cfg.dataset == "synthetic":
        return synthetic_splits(cfg.n_train, cfg.n_test, cfg.data_seed)
    path = Path(cfg.dataset)
    if not path.is_dir():
        raise UsageError(f"dataset path {path} does not exist")
    try:
        return load_cifar10_dir(path)
    except DataError as exc:
        raise DataModelError(str(exc)) from None


def load_model(cfg: RunConfig):
    if not cfg.model:
        raise UsageError("no model given (set model = PATH or pass --model)")
    path = Path(cfg.model)
    if not path.is_file():
        raise UsageError(f"model file {path} does not exist")
    try:
        return load_weights(path)
    except (WeightFileError, EngineError) as exc:
        raise DataModelError(f"{path}: {exc}") from None


def check_compatible(model, items: list[LabeledImage], target: int) -> None:
    if not items:
        raise DataModelError("dataset split is empty")
    labels = {it.label for it in items}
    if max(labels) >= model.class_count:
        raise DataModelError(f"dataset has label {max(labels)} but the model has {model.class_count} classes")
    if target >= model.class_count:
        raise UsageError(f"target class {target} out of range for {model.class_count} classes")
    try:
        model.logits(items[0].image)
    except EngineError as exc:
        raise DataModelError(f"model does not accept images of shape {items[0].image.shape}: {exc}") from None


def check_outcome(x: np.ndarray, o: AttackOutcome) -> None:
    adv = o.adversarial
    outside = ~o.region.mask
    if not np.array_equal(adv[outside], x[outside]):
        raise InvariantError("adversarial image differs from the original outside the patch")
    if adv.min() < 0 or adv.max() > 1:
        raise InvariantError("adversarial pixel outside [0, 1]")


def outcome_json(it: LabeledImage, o: AttackOutcome, method: str) -> dict:
    return {
        "id": it.id, "method": method, "label": int(it.label), "target": int(o.target), "predicted": int(o.predicted),
        "success": bool(o.success), "final_confidence": float(o.final_confidence),
        "iterations_used": int(o.iterations_used), "reinits_used": int(o.reinits_used),
        "anchor": [int(o.anchor[0]), int(o.anchor[1])],
        "region": {"w": int(o.region.w), "h": int(o.region.h), "shape": o.region.shape, "area": o.region.area},
    }


def write_outcomes(directory: Path, items, outcomes, method: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for it, o in zip(items, outcomes):
        check_outcome(it.image, o)
        write_image_ppm(it.image, directory / f"{it.id}.orig.ppm")
        write_image_ppm(o.adversarial, directory / f"{it.id}.adv.ppm")
        (directory / f"{it.id}.json").write_text(json.dumps(outcome_json(it, o, method), indent=2, sort_keys=True))


def write_field_csv(scores: np.ndarray, path: Path) -> None:
    """Window-score field as ``row,col,score`` lines (one per candidate anchor)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "score"])
        for (r, c), v in np.ndenumerate(scores):
            w.writerow([r, c, repr(float(v))])


def _fmt_metric(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# -- subcommands --------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tr, te = synthetic_splits(cfg.n_train, cfg.n_test, cfg.data_seed)
    write_cifar10_binary(tr, out / "data_batch_1.bin")
    write_cifar10_binary(te, out / "test_batch.bin")
    log.info("wrote %d train and %d test records to %s", len(tr), len(te), out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    tr, te = load_splits(cfg)
    if not tr or not te:
        raise DataModelError("training and test splits must be non-empty")
    labels = max(it.label for it in tr + te) + 1
    class_count = max(10, labels)
    out = _out_dir(cfg)
    x, y = np.stack([it.image for it in tr]), np.array([it.label for it in tr])
    xt, yt = np.stack([it.image for it in te]), np.array([it.label for it in te])
    model = build_default_model(class_count, seed=cfg.seed, in_channels=x.shape[-1])
    tc = TrainConfig(cfg.epochs, cfg.lr, cfg.momentum, cfg.batch, cfg.seed)
    trained, history = train(model, x, y, tc, xt, yt)
    save_weights(trained, out / "model.iapw")
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "test_accuracy"])
        for i, (loss, acc) in enumerate(zip(history.train_loss, history.test_accuracy), 1):
            w.writerow([i, repr(float(loss)), repr(float(acc))])
    log.info("final test accuracy %.4f", history.test_accuracy[-1])
    print(f"final test accuracy {history.test_accuracy[-1]:.4f}; weights: {out / 'model.iapw'}")
    return EXIT_OK


def cmd_localize(cfg: RunConfig, args) -> int:
    model = load_model(cfg)
    _, te = load_splits(cfg)
    check_compatible(model, te, cfg.target)
    out = _out_dir(cfg)
    items, targets, skipped = select_images(model, te, cfg.target, cfg.limit)
    for sid in skipped:
        log.info("skipping %s (misclassified or already the target)", sid)
    acfg = cfg.attack_config(te[0].image.shape)
    maps = out / "maps"
    if args.dump_maps:
        maps.mkdir(exist_ok=True)
    fields_dir = out / "fields"
    fields_dir.mkdir(exist_ok=True)
    with open(out / "localize.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "anchor_row", "anchor_col", "patch_w", "patch_h", "shape", "score"])
        for it in items:
            region, sens, field = localize(model, it.image, it.label, acfg)
            i, j = region.anchor
            w.writerow([it.id, it.label, i, j, region.w, region.h, region.shape, repr(float(field.window_scores[i, j]))])
            write_field_csv(field.window_scores, fields_dir / f"{it.id}.csv")
            if args.dump_maps:
                write_map_pgm(grad_cam(model, it.image, it.label, acfg.cam_resize).upsampled, maps / f"{it.id}.cam.pgm")
                write_map_pgm(sens.values, maps / f"{it.id}.sens.pgm")
    print(f"localized {len(items)} images -> {out / 'localize.csv'}")
    return EXIT_OK


def cmd_attack(cfg: RunConfig, args) -> int:
    model = load_model(cfg)
    _, te = load_splits(cfg)
    check_compatible(model, te, cfg.target)
    out = _out_dir(cfg)
    items, targets, skipped = select_images(model, te, cfg.target, cfg.limit)
    for sid in skipped:
        log.info("skipping %s (misclassified or already the target)", sid)
    if not items:
        raise DataModelError("no correctly classified inputs to attack")
    x = np.stack([it.image for it in items])
    y = np.array([it.label for it in items])
    acfg = cfg.attack_config(x.shape[1:3])
    log.info("attacking %d images, patch %dx%d %s, s=%s", len(items), acfg.patch_w, acfg.patch_h, acfg.shape, acfg.s)
    outcomes = attack_images(model, x, y, targets, acfg, cfg.chunk, cfg.workers)
    write_outcomes(out, items, outcomes, "iap")
    lines = [f"iap: ASR {sum(o.success for o in outcomes) / len(outcomes):.4f} over {len(outcomes)} images"]
    if cfg.baselines:
        regions = np.empty(len(outcomes), dtype=object)
        regions[:] = [o.region for o in outcomes]
        mp = baseline_images("mpgd", model, x, y, targets, regions, cfg.chunk, cfg.workers,
                             epsilon=cfg.epsilon, steps=cfg.mpgd_steps, step_size=cfg.mpgd_step, s=cfg.s)
        write_outcomes(out / "mpgd", items, mp, "mpgd")
        lv = baseline_images("lavan", model, x, y, targets, regions, cfg.chunk, cfg.workers,
                             steps=cfg.lavan_steps, step_size=cfg.lavan_step, s=cfg.s, seed=cfg.seed)
        write_outcomes(out / "lavan", items, lv, "lavan")
        for name, res in (("mpgd", mp), ("lavan", lv)):
            lines.append(f"{name}: ASR {sum(o.success for o in res) / len(res):.4f}")
    print("\n".join(lines))
    return EXIT_OK


def _load_attack_dir(directory: Path):
    records = sorted(directory.glob("*.json"))
    if not records:
        raise DataModelError(f"{directory}: no outcome files (*.json)")
    originals, outcomes, ids = [], [], []
    for path in records:
        try:
            rec = json.loads(path.read_text())
            stem = rec["id"]
            x = read_image_ppm(directory / f"{stem}.orig.ppm")
            adv = read_image_ppm(directory / f"{stem}.adv.ppm", x.shape[:2])
            reg = rec["region"]
            region = make_mask(rec["anchor"], reg["w"], reg["h"], x.shape, reg["shape"])
        except (OSError, KeyError, ValueError) as exc:
            raise DataModelError(f"{path}: incomplete outcome ({exc})") from None
        outcomes.append(AttackOutcome(
            adv, bool(rec["success"]), float(rec["final_confidence"]), int(rec["iterations_used"]),
            int(rec["reinits_used"]), tuple(rec["anchor"]), region, int(rec["target"]), int(rec["predicted"]),
        ))
        originals.append(x)
        ids.append(stem)
    return originals, outcomes, ids


def _heatmap(shape, outcomes, model) -> list[list]:
    anchors = np.zeros(shape, dtype=np.int64)
    peaks = np.zeros(shape, dtype=np.int64)
    for o in outcomes:
        anchors[o.anchor] += 1
        if model is not None:
            pred = int(model.predict(o.adversarial))
            peaks[attention_argmax(grad_cam(model, o.adversarial, pred))] += 1
    return [[r, c, int(anchors[r, c]), int(peaks[r, c])] for r in range(shape[0]) for c in range(shape[1])]


def cmd_eval(cfg: RunConfig, args) -> int:
    src = Path(args.attack_dir)
    if not src.is_dir():
        raise UsageError(f"attack output directory {src} does not exist")
    originals, outcomes, ids = _load_attack_dir(src)
    model = None
    model_path = cfg.model
    if not model_path and (src / "config.txt").exists():
        model_path = load_config(src / "config.txt").model
    if model_path and Path(model_path).is_file():
        model = load_model(RunConfig(model=model_path))
    else:
        log.info("no model available; NoPatchLoc will be omitted")
    report = evaluate(model, originals, outcomes, ids)
    dest = Path(args.out) if args.out else src
    write_report(report.rows, dest, {"asr": report.asr, "no_patch_loc": report.no_patch_loc})
    with open(dest / "heatmap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "anchor_count", "attention_peak_count"])
        w.writerows(_heatmap(originals[0].shape[:2], outcomes, model))
    agg = report.aggregates or {}

    def mean(key):
        v = agg.get(key)
        return None if v is None else v["mean"]

    print(f"{'metric':<14}{'value':>10}")
    print(f"{'ASR':<14}{report.asr:>10.4f}")
    for key in ("ssim_local", "ssim_global", "uiq_local", "uiq_global", "sre_local", "sre_global"):
        print(f"{key:<14}{_fmt_metric(mean(key)):>10}")
    print(f"{'NoPatchLoc':<14}{_fmt_metric(report.no_patch_loc):>10}")
    return EXIT_OK


def _parse_values(axis: str, text: str):
    field, defaults = ABLATION_AXES[axis]
    if not text:
        return list(defaults)
    kind = type(defaults[0])
    try:
        return [kind(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad value list for axis {axis}: {text!r}") from None


def cmd_ablate(cfg: RunConfig, args) -> int:
    values = _parse_values(cfg.axis, cfg.values)
    model = load_model(cfg)
    _, te = load_splits(cfg)
    check_compatible(model, te, cfg.target)
    out = _out_dir(cfg)
    items, targets, _ = select_images(model, te, cfg.target, cfg.limit)
    if not items:
        raise DataModelError("no correctly classified inputs to attack")
    rows = sweep(model, items, targets, cfg, cfg.axis, values, cfg.chunk, cfg.workers)
    keys = list(rows[0].keys())
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(keys)
        for row in rows:
            w.writerow(["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in keys])
    (out / "sweep.json").write_text(json.dumps({"axis": cfg.axis, "rows": rows}, indent=2))
    print(f"{cfg.axis:<12}{'ASR':>8}{'SSIM_L':>10}{'iters':>9}")
    for row in rows:
        print(f"{str(row['value']):<12}{row['asr']:>8.3f}{_fmt_metric(row['ssim_local']):>10}{row['mean_iterations']:>9.1f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "localize": cmd_localize,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="'synthetic' or a directory of CIFAR-10 binary batches")
    common.add_argument("--model", help="IAPW weight file")
    common.add_argument("--limit", type=int, help="maximum number of images to attack")
    common.add_argument("--target", type=int, help="target class (negative: label + 1 mod K)")
    common.add_argument("--patch-frac", type=float, dest="patch_frac")
    common.add_argument("--patch-shape", choices=("rect", "circle"), dest="patch_shape")
    common.add_argument("--stride", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")

    parser = argparse.ArgumentParser(prog="iap", description="Invisible adversarial patch toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as CIFAR-10 binaries")
    sub.add_parser("train", parents=[common], help="train the victim model")
    p = sub.add_parser("localize", parents=[common], help="pick patch anchors")
    p.add_argument("--dump-maps", action="store_true", help="write Grad-CAM and sensitivity maps as PGM")
    p = sub.add_parser("attack", parents=[common], help="run the patch attack")
    p.add_argument("--baselines", action="store_const", const=True, help="also run MPGD and LaVAN-style attacks")
    p = sub.add_parser("eval", parents=[common], help="score an attack output directory")
    p.add_argument("attack_dir")
    p = sub.add_parser("ablate", parents=[common], help="sweep one attack setting")
    p.add_argument("--axis", choices=sorted(ABLATION_AXES))
    p.add_argument("--values", help="comma-separated values (default: the axis' standard sweep)")
    return parser


def _overrides(args) -> dict:
    keys = ("seed", "dataset", "model", "limit", "target", "patch_frac", "patch_shape", "stride", "workers",
            "baselines", "axis", "values")
    out = {k: getattr(args, k, None) for k in keys}
    if args.command != "eval":
        out["out"] = args.out
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def setup_logging() -> None:
    name = os.environ.get("IAP_LOG", "info").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"IAP_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging()
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"iap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataModelError, DataError) as exc:
        print(f"iap {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"iap {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"iap {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
