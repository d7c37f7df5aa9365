"""Command-line entry point: ``cachenet <subcommand> [options]``.

Every subcommand reads the same flat ``key = value`` config (``--config``),
then applies ``-o key=value`` overrides and finally ``--seed``. Unknown keys
and unparsable values exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import harness
from .bundle import load_bundle, save_bundle
from .cache import CacheState, EdgeUnavailable, belady_check, summarize_trace
from .config import ConfigError, coerce, parse_config, read_config
from .edge import EdgeServer, LoopbackEdge, RemoteEdge, device_loop
from .gradcheck import DEFAULT_TOLERANCE, gradient_suite
from .submodels import CacheNet
from .utils import atomic_write_text

STREAM_KEYS = ("num_classes", "input_dim", "latent_dim", "class_spread", "within_std",
               "ambient_std", "samples_per_class", "run_length", "frames", "seed")
MODEL_KEYS = ("n_partitions", "z_dim", "vae_hidden", "vae_hidden2", "trunk_widths", "tau",
              "gamma", "alpha_mix", "epsilon_std", "alpha_info", "lambda_scale",
              "learning_rate", "momentum", "epochs", "nu", "batch_size", "patience")

DEFAULTS = {
    # stream and dataset
    "num_classes": 8, "input_dim": 32, "latent_dim": 6, "class_spread": 2.0,
    "within_std": 0.6, "ambient_std": 0.05, "samples_per_class": 250,
    "run_length": 50.0, "frames": 5000, "seed": 0,
    # model and training
    "n_partitions": 4, "z_dim": 16, "vae_hidden": 64, "vae_hidden2": 32,
    "trunk_widths": (32,), "tau": 0.3, "gamma": 0.3, "alpha_mix": 0.5,
    "epsilon_std": 0.05, "alpha_info": 0.9, "lambda_scale": 1.5,
    "learning_rate": 0.02, "momentum": 0.9, "epochs": 40, "nu": None,
    "batch_size": 64, "patience": 3,
    # device cache and experiment
    "thresholds": harness.DEFAULT_THRESHOLDS, "threshold": 0.3, "capacity": 1,
    "host": "127.0.0.1", "port": 7070, "retries": 3, "backoff": 0.05,
}

logger = logging.getLogger("cachenet")


def load_settings(args) -> dict:
    raw = read_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "override", None) or []:
        raw.update(parse_config(item, "-o"))
    settings = coerce(raw, DEFAULTS)
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    return settings


def stream_config(s) -> harness.StreamConfig:
    return harness.StreamConfig(**{k: s[k] for k in STREAM_KEYS})


def build_model(s) -> CacheNet:
    return CacheNet(random_state=s["seed"], **{k: s[k] for k in MODEL_KEYS})


def _fit(s):
    cfg = stream_config(s)
    X, y = harness.gen_dataset(cfg, "train")
    return build_model(s).fit(X, y)


def _out_dir(path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- subcommands ---------------------------------------------------------------

def cmd_train(args, s):
    model = _fit(s)
    out = _out_dir(args.out)
    save_bundle(model.to_bundle(), out)
    atomic_write_text(out / "losses.csv", harness.losses_csv(model.loss_log_))
    log = model.loss_log_
    print(f"trained {len(log)} epochs: J {log[0]['J']:.4f} -> {log[-1]['J']:.4f}")
    print(f"bundle written to {out}")
    return 0


def cmd_serve(args, s):
    bundle = load_bundle(args.bundle)
    host = args.host or s["host"]
    port = s["port"] if args.port is None else args.port
    with EdgeServer(bundle, host, port) as server:
        print("listening on {}:{}".format(*server.address), flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return 0


def cmd_device(args, s):
    host = args.host or s["host"]
    port = s["port"] if args.port is None else args.port
    threshold = s["threshold"] if args.threshold is None else args.threshold
    stream = harness.gen_stream(stream_config(s))
    edge = RemoteEdge(host, port, retries=s["retries"], backoff=s["backoff"])
    try:
        edge.connect()
    except EdgeUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    with edge:
        records = device_loop(stream.frames, stream.labels,
                              CacheState(s["capacity"], threshold), edge)
    if args.out:
        atomic_write_text(args.out, harness.trace_csv(records))
    _print_summary(summarize_trace(records))
    return 0


def cmd_simulate(args, s):
    cfg = stream_config(s)
    if args.bundle:
        bundle, log = load_bundle(args.bundle), None
    else:
        model = _fit(s)
        bundle, log = model.to_bundle(), model.loss_log_
    stream = harness.gen_stream(cfg)
    factory = (lambda: LoopbackEdge(bundle)) if args.loopback else None
    report = harness.run_experiment(bundle, stream, s["thresholds"], s["capacity"], factory)
    trace = harness.run_experiment(bundle, stream, (s["threshold"],), s["capacity"], factory,
                                   keep_traces=True).traces[s["threshold"]]
    out = _out_dir(args.out)
    if log is not None:
        atomic_write_text(out / "losses.csv", harness.losses_csv(log))
    atomic_write_text(out / "report.csv", harness.report_csv(report))
    atomic_write_text(out / "histogram.csv", harness.histogram_csv(report.histogram))
    atomic_write_text(out / "trace.csv", harness.trace_csv(trace))
    print(f"edge-only accuracy: {report.edge_accuracy:.4f}")
    print(f"partition histogram entropy: {harness.histogram_entropy(report.histogram):.4f}")
    print(_format_csv(harness.report_csv(report)), end="")
    return 0


def cmd_belady(args, s):
    seed = s["seed"] if args.seed is not None else 0
    rep = belady_check(num_traces=args.traces, K=args.K, trace_length=args.length,
                       locality=args.locality, seed=seed, policy=args.policy)
    print(f"violations: {rep.violations}")
    print(f"inclusion failures: {rep.inclusion_failures}")
    return 0 if rep.violations == 0 and rep.inclusion_failures == 0 else 1


def cmd_gradcheck(args, s):
    cases, seconds = gradient_suite(seed=s["seed"], trials=args.trials)
    failed = 0
    for c in cases:
        ok = c.max_error < args.tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {c.loss:8s} {c.leaf:14s} max_rel_err={c.max_error:.3e} "
              f"excluded={c.excluded}/{c.coords}")
    print(f"{len(cases) - failed}/{len(cases)} checks below {args.tol:g} in {seconds:.1f}s")
    return 1 if failed else 0


def cmd_report(args, s):
    for path in args.files:
        text = Path(path).read_text()
        header = text.splitlines()[0].split(",") if text else []
        print(f"== {path}")
        if tuple(header) == harness.TRACE_COLUMNS:
            _print_summary(harness.summarize_trace_rows(harness.read_trace_csv(text)))
        elif tuple(header) == harness.LOSS_COLUMNS:
            rows = list(csv.DictReader(io.StringIO(text)))
            first, last = float(rows[0]["J"]), float(rows[-1]["J"])
            print(f"epochs: {len(rows)}  J first={first:.4f} last={last:.4f} "
                  f"ratio={last / first:.3f}")
        else:
            print(_format_csv(text), end="")
    return 0


def _print_summary(summary):
    for key, value in summary.items():
        print(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")


def _format_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return ""
    widths = [max(len(r[i]) for r in rows if i < len(r)) for i in range(len(rows[0]))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n" for r in rows)


# -- parser --------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("-o", "--override", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="root seed for data and training")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cachenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="fit a bundle and write blobs + losses.csv")
    p.add_argument("--out", required=True, help="bundle directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("serve", parents=[common], help="run the edge server")
    p.add_argument("--bundle", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("device", parents=[common], help="run the device loop against a server")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="trace CSV path")
    p.set_defaults(func=cmd_device)

    p = sub.add_parser("simulate", parents=[common], help="in-process end-to-end experiment")
    p.add_argument("--out", required=True, help="output directory for CSVs")
    p.add_argument("--bundle", help="reuse a trained bundle instead of training")
    p.add_argument("--loopback", action="store_true",
                   help="route edge calls through the wire codec")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("belady", parents=[common], help="LRU stack-property check")
    p.add_argument("--traces", type=int, default=100)
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--length", type=int, default=200)
    p.add_argument("--locality", type=float, default=0.3)
    p.add_argument("--policy", choices=("lru", "fifo"), default="lru")
    p.set_defaults(func=cmd_belady)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference loss suite")
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", parents=[common], help="summarise CSV outputs")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args)
        return args.func(args, settings)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
