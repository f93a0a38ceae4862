"""Command-line driver.

Subcommands: gen-data, init-clusters, train, eval, sweep, plot. Failures
print one JSON line ``{"error": ..., "message": ...}`` to stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, load_config
from .metrics import ConfusionMatrix, confusion_update, miou, miou_per_image, pixel_accuracy
from .model import load_checkpoint, save_checkpoint
from .plotting import line_chart, run_series
from .synthworld import DOMAINS, WorldSpec, generate_world, load_world, save_world
from .tensorio import TensorFileError

log = logging.getLogger("c2a")

# exit codes
EXIT_USAGE = 2
EXIT_FAILURE = 1
EXIT_ORDER = 3


class CliError(Exception):
    def __init__(self, code: str, message: str, extra: dict | None = None):
        super().__init__(message)
        self.code = code
        self.extra = extra or {}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _fail(code: str, message: str, extra: dict | None = None, status: int = EXIT_FAILURE) -> int:
    payload = {"error": code, "message": message}
    payload.update(extra or {})
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return status


# ---------------------------------------------------------------- config flags

def _config_flags(p: argparse.ArgumentParser, skip=("schema_version",)) -> None:
    """One override flag per TrainConfig key; unset flags leave the file value."""
    g = p.add_argument_group("config overrides (take precedence over --config)")
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        d = getattr(defaults, f.name)
        if isinstance(d, bool):
            g.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction,
                           help=f"default {d}")
        elif isinstance(d, list):
            g.add_argument(flag, dest=f.name, default=None, type=_int_list,
                           help=f"comma-separated ints, default {','.join(map(str, d))}")
        else:
            g.add_argument(flag, dest=f.name, default=None, type=type(d), help=f"default {d}")


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _str_list(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _effective_config(args, skip=("schema_version",)) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(TrainConfig)
                 if f.name not in skip}
    return load_config(args.config, overrides)


def _need(args, *names):
    missing = ["--" + n.replace("_", "-") for n in names if getattr(args, n) is None]
    if missing:
        raise CliError("usage", f"{args.command}: missing required option(s): {', '.join(missing)}")


def _load_world(path):
    if not (Path(path) / "world.json").is_file():
        raise CliError("not_found", f"no world manifest in {path}")
    return load_world(path)


def _load_ckpt(path):
    if not (Path(path) / "checkpoint.json").is_file():
        raise CliError("not_found", f"no checkpoint manifest in {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    spec = WorldSpec()
    if args.spec is not None:
        spec = WorldSpec.from_json(json.loads(Path(args.spec).read_text()))
    world = generate_world(spec, args.seed)
    save_world(world, args.out)
    sizes = {tag: len(world[tag]) for tag in DOMAINS}
    print(json.dumps({"out": str(args.out), "seed": args.seed, "sizes": sizes}, sort_keys=True))
    return 0


def cmd_init_clusters(args) -> int:
    from .clusterinit import init_clusters

    world = _load_world(args.world)
    cfg = _effective_config(args)
    model, extras = init_clusters(world, cfg)
    meta = {"iter": 0, "stage": "init", "config": cfg.to_json(), "world_seed": world.seed}
    save_checkpoint(model, args.out, meta, extras)
    print(json.dumps({"out": str(args.out)}))
    return 0


def cmd_train(args) -> int:
    from .trainer import run_training

    cfg = _effective_config(args)
    if args.print_defaults:
        print(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        return 0
    _need(args, "world", "out")
    world = _load_world(args.world)
    init = _load_ckpt(args.init)[0] if args.init is not None else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    res = run_training(world, cfg, out, init=init, resume=args.resume)
    final = res.final
    print(json.dumps({"iter": final["iter"], "miou": final["miou"], "pixel_acc": final["pixel_acc"]}))
    return 0


def cmd_eval(args) -> int:
    world = _load_world(args.world)
    model, meta, _ = _load_ckpt(args.ckpt)
    ds = world[args.split]
    space = ds.label_space
    target_side = args.split.startswith("target")
    predict = model.predict_target if target_side else model.predict_source
    cm = ConfusionMatrix(space.num_classes)
    preds = []
    for i in range(0, len(ds), 50):
        p = predict(ds.images[i : i + 50])
        preds.append(p)
        confusion_update(cm, p, ds.labels[i : i + 50])
    per_class, mean = miou(cm)
    result = {
        "split": args.split,
        "ckpt": str(args.ckpt),
        "iter": meta.get("iter"),
        "classes": list(space.class_names),
        "per_class_iou": per_class,
        "miou": mean,
        "pixel_acc": pixel_accuracy(cm),
        "confusion": cm.counts.tolist(),
    }
    if args.per_image:
        result["miou_per_image"] = miou_per_image(np.concatenate(preds), ds.labels, space.num_classes)

    width = max(len(n) for n in space.class_names) + 2
    print(f"{'id':>3}  {'class':<{width}}{'IoU':>8}")
    for cid, (name, iou) in enumerate(zip(space.class_names, per_class)):
        print(f"{cid:>3}  {name:<{width}}{iou:>8.4f}")
    print(f"{'':>3}  {'mIoU':<{width}}{mean:>8.4f}")
    if args.per_image:
        print(f"{'':>3}  {'mIoU/img':<{width}}{result['miou_per_image']:>8.4f}")

    out = Path(args.out) if args.out else Path(args.ckpt) / f"eval_{args.split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


def _sweep_seed(job):
    from .trainer import run_sweep

    spec_json, cfg_json, seed, variants, out_dir = job
    return run_sweep(WorldSpec.from_json(spec_json), TrainConfig.from_json(cfg_json), [seed],
                     variants, out_dir)


def cmd_sweep(args) -> int:
    from .trainer import SWEEP_VARIANTS, summarize

    cfg = _effective_config(args, skip=("schema_version", "seed", "mode"))
    spec = WorldSpec()
    if args.world_spec is not None:
        spec = WorldSpec.from_json(json.loads(Path(args.world_spec).read_text()))
    unknown = [m for m in args.modes if m not in SWEEP_VARIANTS]
    if unknown:
        raise CliError("usage", f"sweep: unknown mode(s) {', '.join(unknown)}; "
                                f"choose from {', '.join(SWEEP_VARIANTS)}")
    out = Path(args.out) if args.out else None
    jobs = [(spec.to_json(), cfg.to_json(), s, args.modes, out) for s in args.seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as ex:
            parts = list(ex.map(_sweep_seed, jobs))
    else:
        parts = [_sweep_seed(j) for j in jobs]
    rows = [r for part in parts for r in part]
    summary = summarize(rows)

    # paired per-seed differences between consecutive modes as listed
    by_seed: dict[int, dict[str, float]] = {}
    for r in rows:
        by_seed.setdefault(r["seed"], {})[r["variant"]] = r["miou"]
    pairs = []
    for a, b in zip(args.modes, args.modes[1:]):
        d = np.array([v[b] - v[a] for v in by_seed.values()])
        se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
        pairs.append({"lower": a, "higher": b, "mean_diff": float(d.mean()), "paired_se": se,
                      "holds": bool(d.mean() > 0)})

    print(f"{'mode':<16}{'n':>3}{'mean':>9}{'sd':>9}{'se':>9}")
    for v, s in summary.items():
        print(f"{v:<16}{s['n']:>3}{s['mean']:>9.4f}{s['sd']:>9.4f}{s['se']:>9.4f}")
    for p in pairs:
        print(f"{p['higher']} > {p['lower']}: diff {p['mean_diff']:+.4f} "
              f"(paired se {p['paired_se']:.4f}) {'ok' if p['holds'] else 'VIOLATED'}")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "rows.jsonl", "w") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        (out / "summary.json").write_text(
            json.dumps({"summary": summary, "ordering": pairs, "config": cfg.to_json()},
                       indent=2, sort_keys=True) + "\n")
    if args.check_order and not all(p["holds"] for p in pairs):
        return _fail("ordering_violated", "mean mIoU does not increase along --modes",
                     {"ordering": pairs}, status=EXIT_ORDER)
    return 0


def cmd_plot(args) -> int:
    for d in args.runs:
        if not (Path(d) / "metrics.jsonl").is_file():
            raise CliError("not_found", f"no metrics.jsonl in {d}")
    series = run_series(args.runs, args.metric)
    ylabel = args.metric[5:] + " loss" if args.metric.startswith("loss.") else args.metric
    svg = line_chart(series, title=args.title or ylabel, xlabel="iteration", ylabel=ylabel)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(svg)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="c2a", description="Clustering-based few-shot segmentation transfer on synthetic worlds.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic world")
    g.add_argument("--spec", help="world spec JSON (defaults used when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0, help="world seed (default 0)")
    g.set_defaults(func=cmd_gen_data)

    i = sub.add_parser("init-clusters", help="pretrain, PCA and k-means; write the init checkpoint")
    i.add_argument("--world", required=True, help="world directory from gen-data")
    i.add_argument("--config", help="training config JSON")
    i.add_argument("--out", required=True, help="checkpoint directory")
    _config_flags(i)
    i.set_defaults(func=cmd_init_clusters)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--world", help="world directory from gen-data")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--init", help="init checkpoint from init-clusters (c2a modes)")
    t.add_argument("--resume", help="continue from a checkpoint written with the same config")
    t.add_argument("--out", help="run directory (metrics.jsonl, checkpoints)")
    t.add_argument("--print-defaults", action="store_true",
                   help="print the effective config as JSON and exit")
    _config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class IoU of a checkpoint")
    e.add_argument("--world", required=True, help="world directory")
    e.add_argument("--ckpt", required=True, help="checkpoint directory")
    e.add_argument("--split", default="target_val", choices=DOMAINS, help="split (default target_val)")
    e.add_argument("--out", help="JSON output path (default <ckpt>/eval_<split>.json)")
    e.add_argument("--per-image", action="store_true", help="also report per-image averaged mIoU")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="mode x seed grid with a summary table")
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--world-spec", help="world spec JSON (defaults used when omitted)")
    s.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="comma-separated seeds")
    s.add_argument("--modes", type=_str_list, default=["target_only", "lambda_c_zero", "c2a_full"],
                   help="comma-separated modes, listed from expected worst to best")
    s.add_argument("--out", help="directory for per-cell runs, rows.jsonl and summary.json")
    s.add_argument("--workers", type=int, default=1, help="parallel processes, one seed each")
    s.add_argument("--check-order", action="store_true",
                   help=f"exit {EXIT_ORDER} unless mean mIoU increases along --modes")
    _config_flags(s, skip=("schema_version", "seed", "mode"))
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="SVG curves from run directories")
    pl.add_argument("--runs", nargs="+", required=True, help="run directories with metrics.jsonl")
    pl.add_argument("--out", required=True, help="output .svg path")
    pl.add_argument("--metric", default="miou",
                    help="record key (miou, pixel_acc, largest_cluster_frac) or loss.<name>")
    pl.add_argument("--title", help="chart title")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as e:
        return _fail(e.code, str(e), e.extra, status=EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        return _fail(e.code, str(e), e.extra, status=EXIT_USAGE if e.code == "usage" else EXIT_FAILURE)
    except ConfigError as e:
        return _fail("config_error", str(e), {"problems": e.problems}, status=EXIT_USAGE)
    except TensorFileError as e:
        return _fail(e.code, str(e))
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as e:
        return _fail("io_error", str(e).replace("\n", " "))
    except ValueError as e:
        return _fail("invalid", str(e).replace("\n", " "))


if __name__ == "__main__":
    sys.exit(main())
