"""Command-line driver.

Exit codes: 0 ok, 1 usage or malformed config, 2 training diverged, 3 I/O.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .analysis import ProbeBudget, module_end_layers, probe_layer, reports_csv, reports_json
from .config import ConfigError, RunConfig, load_config
from .data import IDXError, generate_digit_scenes, load_idx
from .memory import k_sweep
from .study import LAMBDA_GRID
from .train import DivergenceError, TrainData, TrainPlan, build_model, load_checkpoint, train, write_run

log = logging.getLogger(__name__)

EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 1, 2, 3
LAMBDA_FIELDS = ("lambda1_first", "lambda2_first", "lambda1_last", "lambda2_last")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- data

def load_data(cfg: RunConfig):
    """TrainData for the configured label plus every label of the digit scenes (empty for IDX)."""
    d = cfg.data
    if d.source == "idx":
        xtr, ytr = load_idx(d.train_images, d.train_labels)
        xte, yte = load_idx(d.test_images, d.test_labels)
        n_classes = int(max(ytr.max(), yte.max())) + 1
        return TrainData(xtr[:, None], ytr, xte[:, None], yte, n_classes), {}
    ds = generate_digit_scenes(d.n_train + d.n_test, d.image_size, d.n_backgrounds, d.n_positions, d.seed)
    tr, te = ds.subset(slice(0, d.n_train)), ds.subset(slice(d.n_train, None))
    data = TrainData(tr.images, tr.labels(d.label), te.images, te.labels(d.label), tr.n_classes(d.label))
    labels = {k: (tr.labels(k), te.labels(k), tr.n_classes(k)) for k in ("y1", "y2", "y3")}
    return data, labels


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    plan = cfg.plan
    if args.mode:
        plan = replace(plan, mode=args.mode)
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    try:
        plan.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out or cfg.output.directory)
    data, _ = load_data(cfg)
    result = train(plan, data)
    write_run(result, out, {"data": vars(cfg.data), "final_test_err": result.final_test_err})
    print(f"final test error {result.final_test_err:.4f}; wrote {out}")
    return 0


def _load_run(run_dir: Path, data: TrainData):
    meta = json.loads((run_dir / "run.json").read_text())
    plan = TrainPlan.from_dict(meta["plan"])
    model = build_model(plan, data.input_shape, data.n_classes)
    ckpt = load_checkpoint(run_dir / "checkpoint.npz")
    try:
        state = [[ckpt[f"m{i + 1}_{j:03d}"] for j in range(len(st))] for i, st in enumerate(model.state())]
    except KeyError as exc:
        raise OSError(f"{run_dir / 'checkpoint.npz'}: missing array {exc}") from None
    model.load(state)
    return plan, model


def cmd_probe(args) -> int:
    cfg = load_config(args.config)
    data, labels = load_data(cfg)
    run_dir = Path(args.run)
    _, model = _load_run(run_dir, data)
    if cfg.probe.layers == "modules":
        layers = module_end_layers(model)
    else:
        layers = [int(v) for v in cfg.probe.layers.split(",")]
    if not labels:
        labels = {"y": (data.y_train, data.y_test, data.n_classes)}
        names, target = ["y"], "y"
    else:
        names, target = list(cfg.probe.labels), cfg.data.label
    budget = ProbeBudget(cfg.probe.decoder_epochs, cfg.probe.classifier_epochs, cfg.probe.linear_epochs)
    reports = []
    for layer in layers:
        r = probe_layer(model, layer, data.x_train, data.x_test, {k: labels[k][0] for k in names},
                        {k: labels[k][1] for k in names}, {k: labels[k][2] for k in names}, target, budget,
                        cfg.probe.seed)
        reports.append(r)
        print(f"layer {layer}: linear probe error {r.linear_probe_error:.3f}, I(h,x) {r.i_hx:.3f}, I(h,y) "
              + ", ".join(f"{k}={v:.3f}" for k, v in r.i_hy.items()))
    _write(run_dir / "mi_report.json", reports_json(reports))
    _write(run_dir / "mi_report.csv", reports_csv(reports, target))
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_memory_sweep(args) -> int:
    cfg = load_config(args.config)
    ks = _int_list(args.k)
    data, _ = load_data(cfg)
    bs = cfg.plan.batch_size
    x, y = data.x_train[:bs], data.y_train[:bs]
    points, crossover = k_sweep(cfg.plan, data.input_shape, data.n_classes, x, y, ks)
    out = Path(args.out or Path(cfg.output.directory) / "memory_sweep.csv")
    _write(out, _csv_text(["k", "peak_elements", "ratio"], [[p.k, p.peak, repr(p.ratio)] for p in points]))
    for p in points:
        print(f"K={p.k}: peak {p.peak} elements, ratio {p.ratio:.4f}")
    print(f"crossover K: {crossover if crossover is not None else 'none within sweep'}")
    return 0


def _grid_axis(spec: str) -> tuple[str, list]:
    name, sep, values = spec.partition("=")
    names = {f.name for f in fields(TrainPlan)}
    if not sep or name not in names:
        raise UsageError(f"--grid expects FIELD=v1,v2,... with a plan field, got {spec!r}")
    try:
        vals = [float(v) for v in values.split(",")]
    except ValueError:
        raise UsageError(f"--grid {name}: values must be numbers") from None
    if name in LAMBDA_FIELDS and any(v not in LAMBDA_GRID for v in vals):
        raise UsageError(f"--grid {name}: values must come from {list(LAMBDA_GRID)}")
    kind = type(getattr(TrainPlan(), name))
    return name, [kind(v) for v in vals]


def cmd_sensitivity_sweep(args) -> int:
    cfg = load_config(args.config)
    axes = [_grid_axis(g) for g in args.grid]
    if len({n for n, _ in axes}) != len(axes):
        raise UsageError("each --grid field may appear once")
    data, _ = load_data(cfg)
    rows = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        plan = replace(cfg.plan, **dict(zip([n for n, _ in axes], combo)))
        try:
            plan.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        res = train(plan, data)
        rows.append([*combo, repr(res.final_test_err)])
        print(", ".join(f"{n}={v}" for (n, _), v in zip(axes, combo)) + f": test error {res.final_test_err:.4f}")
    out = Path(args.out or Path(cfg.output.directory) / "sensitivity.csv")
    _write(out, _csv_text([n for n, _ in axes] + ["final_test_err"], rows))
    return 0


def cmd_compare(args) -> int:
    runs = [Path(r) for r in args.runs]
    rows, header = [], None
    for r in runs:
        with open(r / "metrics.csv", newline="") as f:
            reader = csv.reader(f)
            h = next(reader)
            header = header or h
            rows += [[str(r), *row] for row in reader]
    table = _csv_text(["run", *header], rows)
    if args.out:
        _write(Path(args.out), table)
    else:
        sys.stdout.write(table)
    base = load_checkpoint(runs[0] / "checkpoint.npz")
    for r in runs[1:]:
        other = load_checkpoint(r / "checkpoint.npz")
        if other.keys() != base.keys() or any(base[k].shape != other[k].shape for k in base):
            print(f"{r}: parameters not comparable with {runs[0]}")
            continue
        delta = max((float(np.max(np.abs(base[k] - other[k]))) if base[k].size else 0.0) for k in base)
        print(f"max parameter delta {runs[0]} vs {r}: {delta:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="locallearn", description="Local learning with reconstruction and label-information losses.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one run and write metrics.csv, run.json, checkpoint.npz")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=["simultaneous", "async", "parallel"])
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", help="probe a trained run and write mi_report.json/.csv")
    pr.add_argument("--config", required=True)
    pr.add_argument("--run", required=True)
    pr.set_defaults(func=cmd_probe)

    m = sub.add_parser("memory-sweep", help="measured activation peak against K")
    m.add_argument("--config", required=True)
    m.add_argument("--k", default="1,2,4,8")
    m.add_argument("--out")
    m.set_defaults(func=cmd_memory_sweep)

    s = sub.add_parser("sensitivity-sweep", help="final test error over a grid of plan fields")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", action="append", required=True, metavar="FIELD=v1,v2,...")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sensitivity_sweep)

    c = sub.add_parser("compare", help="join metrics of several runs and report parameter deltas")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, IDXError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
