"""Command-line runner: gen-data, train-cls, train-seg, eval, report.

Exit codes: 0 success, 1 config error, 2 I/O or input-data error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Mapping, Sequence

from .config import ConfigError, ExperimentConfig, config_keys, parse_config
from .data import (Dataset, concat_datasets, gen_synthetic_classification,
                   gen_synthetic_segmentation, write_dataset)
from .metrics import ConfusionMatrix, class_names, classification_metrics, segmentation_metrics
from .models import load_checkpoint
from .trainer import (MetricsLog, TrainingDiverged, _sub_seed, build_model, evaluate,
                      load_experiment_data, train)

log = logging.getLogger("floodssl")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3

TASK_ALIASES = {"cls": "classification", "classification": "classification",
                "seg": "segmentation", "segmentation": "segmentation"}


# -- outputs ------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv_text(mlog: MetricsLog) -> str:
    header = ["epoch", "alpha", "lr", "optimizer", "sup_loss", "pseudo_loss", "total_loss"]
    metric_keys = [c.removeprefix("val_") for c in mlog.metric_columns()]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header + mlog.metric_columns() + ["pseudo_labels"])
    for r in mlog.records:
        row = [r.epoch, r.alpha, r.lr, r.optimizer, r.sup_loss, r.pseudo_loss, r.total_loss]
        row += [r.metrics.get(k, "") for k in metric_keys]
        row.append(r.pseudo_labels)
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _metrics_of(cm: ConfusionMatrix, task: str, positive_class: int) -> dict:
    if task == "classification":
        return classification_metrics(cm, positive_class)
    return segmentation_metrics(cm)


def per_class_iou_text(rows: Mapping[str, dict], n_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row"] + class_names(n_classes) + ["mIoU"])
    for name, m in rows.items():
        w.writerow([name] + [_fmt(v) for v in m["per_class_iou"]] + [_fmt(m["miou"])])
    return buf.getvalue()


def write_outputs(mlog: MetricsLog, confusions: Mapping[str, ConfusionMatrix], outdir: str | Path,
                  config: ExperimentConfig) -> dict[str, Path]:
    """Write metrics.csv, summary.json, resolved_config.cfg and, for segmentation,
    per_class_iou.csv. ``confusions`` maps row names (e.g. final_val, final_test)
    to confusion matrices."""
    if not mlog.records:
        raise ValueError("metrics log is empty; nothing to write")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    task = mlog.task
    scored = {name: _metrics_of(cm, task, config.positive_class)
              for name, cm in confusions.items() if cm is not None}
    summary = {
        "task": task,
        "epochs": len(mlog.records),
        "final_val": scored.get("final_val", mlog.records[-1].metrics),
        "best_val": {"epoch": mlog.best_epoch, "metrics": mlog.best_metrics},
    }
    for name, m in scored.items():
        if name != "final_val":
            summary[name] = m
    summary["warnings"] = list(mlog.warnings)
    summary["config"] = dataclasses.asdict(config)

    paths = {
        "metrics": outdir / "metrics.csv",
        "summary": outdir / "summary.json",
        "config": outdir / "resolved_config.cfg",
    }
    paths["metrics"].write_text(metrics_csv_text(mlog), encoding="utf-8")
    paths["summary"].write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    paths["config"].write_text(config.to_text(), encoding="utf-8")
    if task == "segmentation":
        rows = {}
        if "final_val" in scored:
            rows["final_val"] = scored["final_val"]
        if mlog.best_metrics:
            rows["best_val"] = mlog.best_metrics
        rows.update((k, v) for k, v in scored.items() if k != "final_val")
        n = next((cm.n_classes for cm in confusions.values() if cm is not None), config.n_classes)
        paths["per_class_iou"] = outdir / "per_class_iou.csv"
        paths["per_class_iou"].write_text(per_class_iou_text(rows, n), encoding="utf-8")
    return paths


# -- report rendering ---------------------------------------------------------

def render_table(rows: Sequence[Sequence[str]], digits: int = 4) -> str:
    def cell(v: str) -> str:
        try:
            f = float(v)
        except ValueError:
            return v
        if v.strip().lstrip("-").isdigit():
            return v
        return f"{f:.{digits}f}"

    body = [[cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in body if i < len(r)) for i in range(len(body[0]))]
    lines = []
    for k, r in enumerate(body):
        lines.append("  ".join(v.rjust(widths[i]) for i, v in enumerate(r)))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_csv(path: str | Path, digits: int = 4) -> str:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return render_table(rows, digits)


def render_report(target: str | Path, digits: int = 4) -> str:
    """Tabulate a CSV file, or every report file found in a run directory."""
    target = Path(target)
    if target.is_file():
        return render_csv(target, digits)
    if not target.is_dir():
        raise FileNotFoundError(f"no such file or directory: {target}")
    parts = []
    summary_path = target / "summary.json"
    if summary_path.is_file():
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        if summary.get("task") == "classification":
            rows = [["split", "accuracy", "precision", "recall", "f1"]]
            for name in ("final_val", "final_test"):
                if name in summary:
                    m = summary[name]
                    rows.append([name] + [repr(m[k]) for k in ("accuracy", "precision", "recall", "f1")])
            parts.append(render_table(rows, digits))
    iou = target / "per_class_iou.csv"
    if iou.is_file():
        parts.append(render_csv(iou, digits))
    metrics = target / "metrics.csv"
    if metrics.is_file():
        parts.append(render_csv(metrics, digits))
    if not parts:
        raise FileNotFoundError(f"{target}: no metrics.csv, per_class_iou.csv or summary.json")
    return "\n".join(parts)


# -- commands -----------------------------------------------------------------

def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for key in config_keys():
        value = getattr(args, f"key_{key}", None)
        if value is not None:
            out[key] = value
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    if "task" in out:
        out["task"] = TASK_ALIASES.get(out["task"], out["task"])
    return out


def _resolve(args: argparse.Namespace, task: str | None) -> ExperimentConfig:
    return parse_config(args.config, _overrides(args), task)


def _outdir(args: argparse.Namespace, config: ExperimentConfig, fallback: str) -> Path:
    return Path(config.outdir or fallback)


def cmd_gen_data(args: argparse.Namespace) -> int:
    task = TASK_ALIASES.get(args.task)
    if task is None:
        raise ConfigError(f"task: unknown task {args.task!r}")
    if args.n < 0 or args.n_unlabeled < 0 or args.n_val < 0 or args.n_test < 0:
        raise ConfigError("n: counts must be >= 0")
    if args.image_size < 4 or args.image_size % 4:
        raise ConfigError("image_size: must be a positive multiple of 4")
    plan = [("train", True, args.n), ("train", False, args.n_unlabeled),
            ("val", True, args.n_val), ("test", True, args.n_test)]
    parts = []
    for k, (split, labeled, n) in enumerate(plan):
        if n == 0:
            continue
        seed = _sub_seed(args.seed, k)
        if task == "classification":
            if not 0 < args.positive_fraction < 1:
                raise ConfigError("positive_fraction: must be in (0, 1)")
            parts.append(gen_synthetic_classification(n, args.positive_fraction, args.image_size,
                                                      seed, split, labeled))
        else:
            if args.classes < 2:
                raise ConfigError("classes: must be >= 2")
            parts.append(gen_synthetic_segmentation(n, args.classes, args.image_size, seed,
                                                    split, labeled))
    n_classes = args.classes if task == "segmentation" else 2
    dataset = concat_datasets(parts) if parts else Dataset([], task, n_classes)
    manifest = write_dataset(dataset, args.outdir)
    print(f"wrote {len(dataset)} samples to {manifest}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, task: str) -> int:
    config = _resolve(args, task)
    outdir = _outdir(args, config, f"runs/{args.verb}-seed{config.seed}")
    outdir.mkdir(parents=True, exist_ok=True)
    dataset = load_experiment_data(config)
    model, mlog = train(config, dataset, outdir)
    confusions = {"final_val": mlog.final_confusion}
    test = dataset.subset("test").samples
    if test:
        _, confusions["final_test"] = evaluate(
            model, test, task, dataset.n_classes if task == "segmentation" else 2,
            config.positive_class)
    write_outputs(mlog, confusions, outdir, config)
    for w in mlog.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(render_report(outdir).split("\n\n")[0].rstrip("\n"))
    print(f"outputs written to {outdir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve(args, None)
    dataset = load_experiment_data(config)
    task = config.task
    in_channels = dataset.samples[0].image.shape[0] if dataset.samples else 3
    model = build_model(config, in_channels)
    if args.checkpoint:
        load_checkpoint(args.checkpoint, model)
    samples = dataset.subset(args.split).samples
    if not samples:
        raise ValueError(f"split {args.split!r} has no samples")
    n_classes = dataset.n_classes if task == "segmentation" else 2
    metrics, cm = evaluate(model, samples, task, n_classes, config.positive_class)
    outdir = _outdir(args, config, "runs/eval")
    outdir.mkdir(parents=True, exist_ok=True)
    report = {"task": task, "split": args.split, "checkpoint": args.checkpoint or "",
              "n_samples": len(samples), "metrics": metrics, "confusion": cm.counts.tolist()}
    (outdir / "eval.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if task == "segmentation":
        (outdir / "per_class_iou.csv").write_text(
            per_class_iou_text({args.split: metrics}, n_classes), encoding="utf-8")
    shown = {k: v for k, v in metrics.items() if not isinstance(v, list)}
    print(json.dumps(shown, indent=2))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    print(render_report(args.target, args.digits), end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    group = p.add_argument_group("config keys")
    for key in config_keys():
        if key in skip:
            continue
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"key_{key}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset (manifest + PNM files)")
    g.add_argument("--task", default="cls", help="cls|seg")
    g.add_argument("--n", type=int, default=64, help="labeled training samples")
    g.add_argument("--n-unlabeled", type=int, default=0)
    g.add_argument("--n-val", type=int, default=0)
    g.add_argument("--n-test", type=int, default=0)
    g.add_argument("--classes", type=int, default=10, help="segmentation classes")
    g.add_argument("--positive-fraction", type=float, default=51 / 398)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--outdir", default="data")

    for verb, text in (("train-cls", "train the pseudo-label classifier"),
                       ("train-seg", "train the pseudo-mask segmenter")):
        t = sub.add_parser(verb, help=text)
        _add_config_flags(t, skip=("task",))

    e = sub.add_parser("eval", help="score a checkpoint (or a fresh seeded model) on a split")
    _add_config_flags(e)
    e.add_argument("--checkpoint", help="checkpoint file; omitted -> untrained seeded model")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))

    r = sub.add_parser("report", help="render a metrics CSV or run directory as a table")
    r.add_argument("target", help="CSV file or run directory")
    r.add_argument("--digits", type=int, default=4)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.verb == "gen-data":
            return cmd_gen_data(args)
        if args.verb == "train-cls":
            return cmd_train(args, "classification")
        if args.verb == "train-seg":
            return cmd_train(args, "segmentation")
        if args.verb == "eval":
            return cmd_eval(args)
        return cmd_report(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
