"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure,
4 network failure. Artifacts are written under ``--out`` and depend only on
the configuration and seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

from . import checkpoint, config as config_mod
from .baselines import (
    assemble,
    benchmark_report,
    bp_train_in_silico,
    deploy_and_measure_gap,
    dfa_train,
    pat_train,
    report_json,
)
from .data import make_ood_split
from .distributed import DistributedConfig, Worker, coordinator_run
from .engine import (
    cascade_train,
    evaluate,
    generalization_suite,
    inject_adc_fault,
    retrain_downstream,
)
from .errors import DataError, NetworkError, PibError, UsageError
from .rl import train_rl_agent
from .variants import linear_probe, probe_network, train_unsupervised

COMMANDS = ("train", "eval", "fault", "unsup", "probe", "rl", "bench", "coordinator", "worker",
            "export-features", "export-infoplane")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the command from being reset by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed for every random stream (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")
    parser = _Parser(prog="pib", description="Physical information bottleneck training", parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "train": "layer-wise supervised training",
        "eval": "evaluate a checkpoint on the test split",
        "fault": "inject an ADC fault and retrain downstream units",
        "unsup": "unsupervised two-view training with probe checkpoints",
        "probe": "linear probe on a checkpoint's hidden features",
        "rl": "CartPole with an optical Q-network",
        "bench": "baseline comparison and generalization suite",
        "coordinator": "distributed training across workers",
        "worker": "serve one unit for a coordinator",
        "export-features": "write penultimate features with labels as CSV",
        "export-infoplane": "write the information-plane trace as CSV",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], parents=[common])
        if name in ("eval", "fault", "probe", "export-features", "export-infoplane"):
            p.add_argument("--checkpoint", help="network checkpoint (default: <out>/model.pibc)")
        if name == "export-features":
            p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "coordinator":
            p.add_argument("--workers", help="comma-separated host:port list (overrides the config)")
        if name == "worker":
            p.add_argument("--listen", help="host:port to bind (overrides the config)")
    return parser


class Run:
    def __init__(self, args):
        self.args = args
        self.cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
        self.base = Path(args.config).parent if args.config else Path(".")
        if args.seed is not None:
            config_mod.with_seed(self.cfg, args.seed)
        else:
            config_mod.with_seed(self.cfg, self.cfg.seed)
        self.out = Path(args.out or self.cfg.out)

    def log(self, msg: str) -> None:
        if not self.args.quiet:
            print(msg, file=sys.stderr, flush=True)

    def write(self, name: str, content) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content)
        self.log(f"wrote {path}")
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def dataset(self):
        return self.cfg.dataset.load(self.cfg.seed, self.base)

    def checkpoint_path(self) -> Path:
        return Path(getattr(self.args, "checkpoint", None) or self.out / "model.pibc")

    def load_network(self):
        return checkpoint.network_from_checkpoint(checkpoint.load(self.checkpoint_path()))

    def save_network(self, name: str, net, extra=None) -> None:
        self.write(name, checkpoint.dumps(checkpoint.network_to_checkpoint(net, self.cfg.seed, extra)))


# -- commands -------------------------------------------------------------------


def cmd_train(run: Run) -> None:
    data = run.dataset()
    net = cascade_train(run.cfg.network, data.X_train, data.y_train, run.cfg.train, log=run.log)
    metrics = {"dataset": data.name, "seed": run.cfg.seed, "train_accuracy": evaluate(net, data.X_train, data.y_train),
               "test_accuracy": evaluate(net, data.X_test, data.y_test),
               "ideal_test_accuracy": evaluate(net, data.X_test, data.y_test, ideal=True)}
    run.save_network("model.pibc", net)
    run.write("infoplane.csv", net.trace.to_csv())
    run.write_json("metrics.json", metrics)


def cmd_eval(run: Run) -> None:
    data = run.dataset()
    net = run.load_network()
    result = {"checkpoint": run.checkpoint_path().name, "test_accuracy": evaluate(net, data.X_test, data.y_test)}
    run.write_json("eval.json", result)
    print(json.dumps(result, sort_keys=True))


def cmd_fault(run: Run) -> None:
    data = run.dataset()
    fc = run.cfg.fault
    if getattr(run.args, "checkpoint", None) or (run.out / "model.pibc").exists():
        net = run.load_network()
    else:
        net = cascade_train(run.cfg.network, data.X_train, data.y_train, run.cfg.train, log=run.log)
    before = evaluate(net, data.X_test, data.y_test)
    fault = inject_adc_fault(net, fc.unit, fc.fraction, fc.mode, run.cfg.seed)
    faulted = evaluate(net, data.X_test, data.y_test)
    net = retrain_downstream(net, data.X_train, data.y_train, fc.unit, run.cfg.train)
    recovered = evaluate(net, data.X_test, data.y_test)
    run.save_network("model_recovered.pibc", net)
    run.write_json("fault.json", {"fault": fault.to_dict(), "accuracy_before": before,
                                  "accuracy_faulted": faulted, "accuracy_recovered": recovered})


def cmd_unsup(run: Run) -> None:
    data = run.dataset()
    uc = run.cfg.unsup
    raw = linear_probe(data.X_test, data.y_test, uc.probe_seed, data.n_classes)
    rows = []
    net = None
    for iters in sorted(uc.checkpoints):
        cfg = dataclasses.replace(run.cfg.train, iterations_per_unit=int(iters))
        net = train_unsupervised(run.cfg.network, data.X_train, cfg, uc.augment, log=run.log)
        acc = probe_network(net, data.X_test, data.y_test, uc.probe_seed, data.n_classes)
        run.log(f"{iters} iterations: probe accuracy {acc:.4f}")
        rows.append({"iterations": int(iters), "probe_accuracy": acc})
    run.write_json("unsup.json", {"raw_probe_accuracy": raw, "checkpoints": rows})
    if net is not None:
        run.save_network("unsup_model.pibc", net)
        run.write("unsup_infoplane.csv", net.trace.to_csv())


def cmd_probe(run: Run) -> None:
    data = run.dataset()
    net = run.load_network()
    acc = probe_network(net, data.X_test, data.y_test, run.cfg.unsup.probe_seed, data.n_classes)
    run.write_json("probe.json", {"checkpoint": run.checkpoint_path().name, "probe_accuracy": acc})


def cmd_rl(run: Run) -> None:
    rl = run.cfg.rl
    spec = rl.network or config_mod.default_rl_network(rl.config.encoder_bins)
    train = rl.train or config_mod.default_rl_train(run.cfg.seed)
    result = train_rl_agent(spec, rl.config, train, log=run.log)
    run.write("rl_scores.csv", result.to_csv())
    avg = result.running_average
    run.write_json("rl.json", {"episodes": len(result.scores), "solved_episode": result.solved_episode,
                               "final_running_average": avg[-1] if avg else None,
                               "max_running_average": max(avg) if avg else None})


def _bench_method(method, spec, X, y, run: Run):
    """Train one method; returns (network, simulated accuracy, trainer for the low-data curve)."""
    cfg = run.cfg
    bc = cfg.bench.baseline
    if method == "pib":
        def trainer(Xs, ys):
            return cascade_train(spec, Xs, ys, cfg.train)
        net = trainer(X, y)
        return net, None, trainer
    if method == "bp":
        def trainer(Xs, ys):
            return assemble(spec, bp_train_in_silico(spec, Xs, ys, bc)[0], bc.seed)
        weights, _ = bp_train_in_silico(spec, X, y, bc)
        return assemble(spec, weights, bc.seed), weights, trainer
    fn = {"pat": pat_train, "dfa": dfa_train}.get(method)
    if fn is None:
        raise UsageError(f"unknown bench method {method!r}")

    def trainer(Xs, ys):
        return fn(spec, Xs, ys, bc)
    return trainer(X, y), None, trainer


def cmd_bench(run: Run) -> None:
    data = run.dataset()
    held = run.cfg.dataset.held_out
    X_ood = None
    if held:
        data, X_ood = make_ood_split(data, held)
    spec = run.cfg.network
    if spec.n_classes != data.n_classes:
        spec = dataclasses.replace(spec, final_readout=(spec.final_readout[0], data.n_classes))
    reports = []
    for method in run.cfg.bench.methods:
        run.log(f"bench: {method}")
        net, weights, trainer = _bench_method(method, spec, data.X_train, data.y_train, run)
        if weights is not None:
            sim = evaluate(net, data.X_test, data.y_test, ideal=True)
            deployed, _ = deploy_and_measure_gap(weights, spec, data.X_test, data.y_test, sim, run.cfg.bench.baseline.seed)
        else:
            sim = evaluate(net, data.X_test, data.y_test, ideal=True)
            deployed = evaluate(net, data.X_test, data.y_test)
        noise = low = ood = None
        if run.cfg.bench.generalization and X_ood is not None:
            g = generalization_suite(net, data.X_test, data.y_test, X_ood, trainer, data.X_train, data.y_train,
                                     seed=run.cfg.seed)
            noise, low, ood = g["noise_curve"], g["low_data_curve"], g["ood_auroc"]
        reports.append(benchmark_report(method, data.name, run.cfg.seed, sim, deployed, noise, low, ood))
    run.write("bench.json", report_json(reports))


def _endpoints(run: Run) -> list:
    raw = getattr(run.args, "workers", None)
    if raw is not None:
        return [e for e in raw.split(",") if e]
    return list(run.cfg.distributed.workers)


def cmd_coordinator(run: Run) -> None:
    data = run.dataset()
    d = run.cfg.distributed
    dcfg = DistributedConfig(run.cfg.train, d.progress_every, d.timeout)
    try:
        result = coordinator_run(run.cfg.network, data, _endpoints(run), dcfg, log=run.log)
    except NetworkError as exc:
        log = getattr(exc, "session_log", None)
        if log is not None:
            run.write("session.jsonl", log.to_jsonl())
        raise
    run.save_network("model.pibc", result.network)
    run.write("session.jsonl", result.log.to_jsonl())
    run.write("infoplane.csv", result.network.trace.to_csv())
    run.write_json("metrics.json", {"dataset": data.name, "seed": run.cfg.seed,
                                    "train_accuracy": result.train_accuracy, "test_accuracy": result.test_accuracy})


def cmd_worker(run: Run) -> None:
    endpoint = getattr(run.args, "listen", None) or run.cfg.distributed.listen
    worker = Worker(endpoint, timeout=run.cfg.distributed.timeout)
    print(worker.endpoint, flush=True)
    worker.serve()


def cmd_export_features(run: Run) -> None:
    data = run.dataset()
    net = run.load_network()
    X, y = (data.X_test, data.y_test) if run.args.split == "test" else (data.X_train, data.y_train)
    F = net.features(X)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"f{i}" for i in range(F.shape[1])])
    for label, row in zip(y, F):
        w.writerow([int(label)] + [repr(float(v)) for v in row])
    run.write(f"features_{run.args.split}.csv", buf.getvalue())


def cmd_export_infoplane(run: Run) -> None:
    run.write("infoplane.csv", run.load_network().trace.to_csv())


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": None, "quiet": False}
HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for flag, default in GLOBAL_DEFAULTS.items():
            if not hasattr(args, flag):
                setattr(args, flag, default)
        if args.command is None:
            raise UsageError("a command is required")
        HANDLERS[args.command](Run(args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return exc.exit_code
    except PibError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ConnectionError, TimeoutError) as exc:
        print(f"error: network failure: {exc}", file=sys.stderr)
        return NetworkError.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
