"""Command-line entry point.

Subcommands: train, eval, gradcheck, params, plot-mapping.  Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.  Every run
writes a manifest next to its outputs; deterministic mode (on by default,
override with BREGNEXT_DETERMINISTIC=0/1) makes reruns bitwise identical.

Output directory layout: manifest.txt, log.csv, model.bngx, reports/.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dataio
from . import mappings, metrics, training
from .builder import (DEPTH_SERIES, TABLE2_NAMES, build_network,
                      config_from_json, count_flops, count_parameters,
                      depth_config, table2_config)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


@dataclass
class RunManifest:
    """Reproducibility record written alongside every command's outputs."""
    command: str
    arch: str
    dataset: str
    seed: int
    epochs: int
    batch_size: int
    out_dir: str
    deterministic: bool

    def write(self, path) -> None:
        lines = [f"{k}: {v}" for k, v in vars(self).items()]
        Path(path).write_text("\n".join(lines) + "\n")


def _deterministic(flag_value: bool | None) -> bool:
    env = os.environ.get("BREGNEXT_DETERMINISTIC")
    if flag_value is not None:
        return flag_value
    if env is not None:
        return env not in ("0", "false", "no")
    return True


def _resolve_config(args):
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        return config_from_json(text)
    name = args.arch.lower()
    head = getattr(args, "head", "categorical")
    if name.startswith("breg-next-") and name not in TABLE2_NAMES:
        return depth_config(int(name.rsplit("-", 1)[1]), head=head)
    return table2_config(name, head=head)


def _resolve_dataset(spec: str) -> dataio.Dataset:
    """Dataset specs: 'synth:K=8[,n=200][,seed=0]' or 'fer2013:<csv path>'."""
    if spec.startswith("synth:"):
        params = {"K": 8, "n": 200, "seed": 0}
        body = spec[len("synth:"):]
        for item in filter(None, body.split(",")):
            if "=" not in item:
                raise UsageError(f"bad synth parameter {item!r}")
            key, _, val = item.partition("=")
            if key not in params:
                raise UsageError(f"unknown synth parameter {key!r}")
            params[key] = int(val)
        return dataio.synth_blobs(params["K"], params["n"], params["seed"])
    if spec.startswith("fer2013:"):
        return dataio.load_fer2013(spec[len("fer2013:"):])
    raise UsageError(f"unrecognized dataset spec {spec!r}")


# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _resolve_config(args)
    dataset = _resolve_dataset(args.data)
    manifest = RunManifest("train", cfg.name, args.data, args.seed,
                           args.epochs, args.batch_size, str(out_dir),
                           _deterministic(args.deterministic))
    manifest.write(out_dir / "manifest.txt")
    model = build_network(cfg, seed=args.seed)
    loss_kind = "mse" if cfg.head == "dimensional" else "focal"
    state = training.OptimizerState()
    log = training.train_epochs(
        model, dataset, epochs=args.epochs, loss_kind=loss_kind,
        seed=args.seed, batch_size=args.batch_size, state=state,
        augment_cfg=training.AugmentConfig() if args.augment else None,
        progress=print if args.verbose else None)
    log.save_csv(out_dir / "log.csv")
    dataio.save_checkpoint(model, out_dir / "model.bngx",
                           optimizer_state=state)
    print(f"trained {cfg.name} for {args.epochs} epochs; "
          f"final loss {log.records[-1].loss:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = dataio.load_checkpoint(args.checkpoint)
    dataset = _resolve_dataset(args.data)
    if args.split != "all":
        dataset = dataset.subset(args.split)
    if len(dataset) == 0:
        raise dataio.DatasetError(f"split {args.split!r} is empty")
    reports = Path(args.out) / "reports"
    reports.mkdir(parents=True, exist_ok=True)

    preds = []
    n = len(dataset)
    bs = args.batch_size
    for start in range(0, n, bs):
        batch = dataset.images[start:start + bs].astype(model.dtype)
        out = ad.evaluate([model.outputs],
                          {model.input.name: batch}, training=False)
        preds.append(out[model.outputs.name])
    preds = np.concatenate(preds)

    if model.config.head == "categorical":
        if dataset.class_labels is None:
            raise dataio.DatasetError(
                "categorical model but dataset lacks class labels")
        pred_labels = preds.argmax(axis=1)
        report = metrics.class_report(pred_labels, dataset.class_labels,
                                      model.config.head_width)
        lines = [f"accuracy: {report.accuracy!r}",
                 f"macro_precision: {report.macro_precision!r}",
                 f"macro_recall: {report.macro_recall!r}",
                 f"macro_f1: {report.macro_f1!r}"]
        (reports / "metrics.txt").write_text("\n".join(lines) + "\n")
        with open(reports / "confusion.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(report.confusion.tolist())
        print("\n".join(lines))
    else:
        if dataset.va_labels is None:
            raise dataio.DatasetError(
                "dimensional model but dataset lacks valence/arousal labels")
        report = metrics.dimensional_report(preds, dataset.va_labels)
        lines = [f"{k}: {v!r}" for k, v in report.items()]
        (reports / "metrics.txt").write_text("\n".join(lines) + "\n")
        for dim, name in ((0, "valence"), (1, "arousal")):
            centers, counts = metrics.error_histogram(
                preds[:, dim], dataset.va_labels[:, dim])
            with open(reports / f"error_hist_{name}.csv", "w",
                      newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["bin_center", "count"])
                writer.writerows(zip(centers.tolist(), counts.tolist()))
        print("\n".join(lines))
    return EXIT_OK


def _gradcheck_mappings(rng, tolerance):
    from .autodiff.gradcheck import finite_difference_gradient as fd
    from .autodiff.gradcheck import max_relative_error as rel
    worst = 0.0
    for _ in range(40):
        x, a, b = rng.normal(size=3) * np.array([2.0, 1.0, 1.0])
        a = a if abs(a) > 0.05 else 0.5
        p = mappings.MappingParams(float(a), float(b))
        worst = max(worst, rel(
            np.array([mappings.breg_derivative(np.array([x]), p)[0]]),
            fd(lambda v: mappings.breg_forward(v, p), np.array([x]))))
        ga, gb = mappings.breg_param_gradients(np.array([x]), p)
        worst = max(worst, rel(
            np.array([ga]),
            fd(lambda v: mappings.breg_forward(
                np.array([x]),
                mappings.MappingParams(float(v[0]), p.beta)).sum(),
               np.array([p.alpha]))))
        worst = max(worst, rel(
            np.array([gb]),
            fd(lambda v: mappings.breg_forward(
                np.array([x]),
                mappings.MappingParams(p.alpha, float(v[0]))).sum(),
               np.array([p.beta]))))
    for kind in (mappings.MappingKind.h1(), mappings.MappingKind.h2(),
                 mappings.MappingKind.h3(1.0)):
        for _ in range(20):
            x = np.array([rng.normal() * 2.0])
            worst = max(worst, rel(
                mappings.mapping_derivative(kind, x),
                fd(lambda v: mappings.mapping_eval(kind, v), x)))
    return worst


def _gradcheck_network(arch, samples, tolerance, rng):
    from .autodiff.gradcheck import finite_difference_gradient as fd
    from .autodiff.gradcheck import max_relative_error as rel
    cfg = (depth_config(26) if arch == "breg-next-26"
           else table2_config(arch))
    model = build_network(cfg, seed=1, dtype=np.float64, input_hw=(8, 8))
    model.mark_bn_stats_recorded()
    images = rng.random((2, 8, 8, 3))
    labels = rng.integers(0, cfg.head_width, size=2)
    loss_node = ad.FocalLoss(model.outputs,
                             ad.IntPlaceholder("gc_labels", (None,)),
                             name="gc_loss")
    feeds = {model.input.name: images, "gc_labels": labels}
    entries = [e for e in model.store.trainable_entries()]
    if not entries:
        print("no parameters: vacuous pass")
        return 0.0
    # training-mode forward: batch-norm gradients are defined against the
    # per-batch statistics that the backward pass caches
    ad.evaluate([loss_node], feeds, training=True)
    model.store.zero_grad()
    ad.backward(loss_node, model.store)
    worst = 0.0
    checked = 0
    rng2 = np.random.default_rng(7)
    for entry in entries:
        if checked >= samples:
            break
        flat = entry.value.reshape(-1)
        idx = int(rng2.integers(0, flat.size))

        def f(v, entry=entry, idx=idx):
            old = entry.value.reshape(-1)[idx]
            entry.value.reshape(-1)[idx] = v[0]
            out = ad.evaluate([loss_node], feeds, training=True)
            entry.value.reshape(-1)[idx] = old
            return np.array(out["gc_loss"])

        numeric = fd(f, np.array([flat[idx]]))
        analytic = np.array([entry.grad.reshape(-1)[idx]])
        worst = max(worst, rel(analytic, numeric))
        checked += 1
    return worst


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    results = {}
    if args.mapping and args.mapping not in ("h1", "h2", "h3", "adaptive"):
        raise UsageError(f"unknown mapping {args.mapping!r}")
    results["mappings"] = _gradcheck_mappings(rng, args.tolerance)
    results["network"] = _gradcheck_network(args.arch, args.samples,
                                            args.tolerance, rng)
    failed = False
    for name, err in results.items():
        status = "PASS" if err <= args.tolerance else "FAIL"
        if status == "FAIL":
            failed = True
        print(f"{name}: max relative error {err:.3e} [{status}]")
    if failed:
        raise NumericalError("gradient check exceeded tolerance")
    return EXIT_OK


def cmd_params(args) -> int:
    if args.series:
        print(f"{'layers':>8} {'parameters':>12} {'delta':>10}")
        prev = None
        for layers in DEPTH_SERIES:
            model = build_network(depth_config(layers), seed=0)
            count = count_parameters(model).parameter_count
            delta = "" if prev is None else f"{count - prev:>10}"
            print(f"{layers:>8} {count:>12} {delta}")
            prev = count
        return EXIT_OK
    cfg = _resolve_config(args)
    model = build_network(cfg, seed=0)
    report = count_parameters(model)
    flops = count_flops(model)
    print(f"architecture: {cfg.name}")
    print(f"parameters: {report.parameter_count}")
    print(f"flops_per_image: {flops.flop_count}")
    return EXIT_OK


_PRESETS = {
    "a": (1.0, 1.0), "b": (1.0, 0.0), "c": (1e-7, 1.0), "d": (1e-7, 0.0),
}


def cmd_plot_mapping(args) -> int:
    if args.preset:
        alpha, beta = _PRESETS[args.preset]
    else:
        alpha, beta = args.alpha, args.beta
    x = np.linspace(args.lo, args.hi, args.grid)
    if args.kind == "adaptive":
        p = mappings.MappingParams(alpha, beta)
        h = mappings.breg_forward(x, p)
        hp = mappings.breg_derivative(x, p)
    else:
        kind = {"h1": mappings.MappingKind.h1(),
                "h2": mappings.MappingKind.h2(),
                "h3": mappings.MappingKind.h3(alpha)}[args.kind]
        h = mappings.mapping_eval(kind, x)
        hp = mappings.mapping_derivative(kind, x)
    out = Path(args.out) if args.out else None
    rows = [f"{float(xv)!r},{float(hv)!r},{float(dv)!r}"
            for xv, hv, dv in zip(x, h, hp)]
    text = "x,H,Hprime\n" + "\n".join(rows) + "\n"
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"wrote {out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bregnext",
        description="Bounded-gradient residual network toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("train", help="train a model")
    pt.add_argument("--arch", default="breg-next-32")
    pt.add_argument("--config", help="network config JSON file")
    pt.add_argument("--head", default="categorical",
                    choices=["categorical", "dimensional"])
    pt.add_argument("--data", required=True)
    pt.add_argument("--epochs", type=int, default=30)
    pt.add_argument("--batch-size", type=int, default=128)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--out", default="run")
    pt.add_argument("--augment", action="store_true")
    pt.add_argument("--verbose", action="store_true")
    pt.add_argument("--deterministic", type=int, choices=[0, 1],
                    default=None)
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--split", default="all")
    pe.add_argument("--batch-size", type=int, default=128)
    pe.add_argument("--out", default="run")
    pe.set_defaults(func=cmd_eval)

    pg = sub.add_parser("gradcheck", help="finite-difference verification")
    pg.add_argument("--arch", default="breg-next-26")
    pg.add_argument("--samples", type=int, default=12)
    pg.add_argument("--tolerance", type=float, default=1e-3)
    pg.add_argument("--mapping", default=None)
    pg.add_argument("--seed", type=int, default=0)
    pg.set_defaults(func=cmd_gradcheck)

    pp = sub.add_parser("params", help="parameter/FLOP accounting")
    pp.add_argument("--arch", default="breg-next-50")
    pp.add_argument("--config")
    pp.add_argument("--series", action="store_true",
                    help="print the 26..68 depth series")
    pp.set_defaults(func=cmd_params)

    pm = sub.add_parser("plot-mapping", help="emit x,H,Hprime CSV")
    pm.add_argument("--kind", default="adaptive",
                    choices=["adaptive", "h1", "h2", "h3"])
    pm.add_argument("--alpha", type=float, default=1.0)
    pm.add_argument("--beta", type=float, default=0.0)
    pm.add_argument("--preset", choices=sorted(_PRESETS))
    pm.add_argument("--lo", type=float, default=-12.0)
    pm.add_argument("--hi", type=float, default=12.0)
    pm.add_argument("--grid", type=int, default=241)
    pm.add_argument("--out")
    pm.set_defaults(func=cmd_plot_mapping)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dataio.DatasetError, dataio.CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ad.NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
