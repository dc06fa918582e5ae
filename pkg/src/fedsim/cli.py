"""Command-line entry point wiring configuration to data, simulation, and files.

Exit status: 0 on success, 2 on usage/config errors (argparse), 1 on runtime
failures (IO, component errors); each failure prints a distinct message.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, federation, models
from .coreset import DIST_KINDS
from .data import generate_synthetic, load_mnist_idx, partition_label_shards

BENCHMARK_DEFAULTS = {
    "clients": 30, "rounds": 100, "epochs": 10, "k": 10,
    "lr": 0.001, "batch": 8, "mu_prox": 0.1,
}


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--benchmark", choices=["synthetic", "mnist"], default="synthetic")
    p.add_argument("--alpha", type=float, default=0.0, help="synthetic cross-client heterogeneity")
    p.add_argument("--beta", type=float, default=0.0, help="synthetic within-client heterogeneity")
    p.add_argument("--mnist-images", help="path to IDX image file (mnist benchmark)")
    p.add_argument("--mnist-labels", help="path to IDX label file (mnist benchmark)")
    p.add_argument("--labels-per-client", type=int, default=2)
    p.add_argument("--clients", type=int, default=BENCHMARK_DEFAULTS["clients"])
    p.add_argument("--stragglers", type=float, default=30.0,
                   help="slowest s%% of clients become stragglers (0 <= s < 100)")
    p.add_argument("--rounds", type=int, default=BENCHMARK_DEFAULTS["rounds"])
    p.add_argument("--epochs", type=int, default=BENCHMARK_DEFAULTS["epochs"])
    p.add_argument("--k", type=int, default=BENCHMARK_DEFAULTS["k"],
                   help="clients selected per round")
    p.add_argument("--batch", type=int, default=BENCHMARK_DEFAULTS["batch"],
                   help="mini-batch size; 0 for full-batch epochs")
    p.add_argument("--lr", type=float, default=BENCHMARK_DEFAULTS["lr"])
    p.add_argument("--lr-schedule", choices=["fixed", "theorem"], default="fixed",
                   help="theorem uses the strong-convexity schedule (requires --l2 > 0)")
    p.add_argument("--mu-prox", type=float, default=BENCHMARK_DEFAULTS["mu_prox"])
    p.add_argument("--l2", type=float, default=0.0, help="ridge coefficient")
    p.add_argument("--model", choices=[models.LOGISTIC, models.MLP], default=models.LOGISTIC)
    p.add_argument("--hidden", type=int, default=32, help="mlp hidden width")
    p.add_argument("--distance", choices=list(DIST_KINDS), default=None,
                   help="fedcore distance kind (default: per model)")
    p.add_argument("--tau", type=float, default=None,
                   help="explicit deadline in simulated seconds; accepts inf")
    p.add_argument("--gamma", type=float, default=0.0,
                   help="coreset-build time surcharge as a fraction of one epoch")
    p.add_argument("--pool-cap", type=int, default=1024,
                   help="cap on coreset candidate-pool size per client")
    p.add_argument("--probes", dest="probes", action="store_true", default=True)
    p.add_argument("--no-probes", dest="probes", action="store_false")
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--cap-seed", type=int, default=2)
    p.add_argument("--run-seed", type=int, default=3)
    p.add_argument("--out", default="out", help="output directory")


def _load_benchmark(args):
    if args.benchmark == "synthetic":
        return generate_synthetic(args.alpha, args.beta, args.clients, args.data_seed)
    if not args.mnist_images or not args.mnist_labels:
        raise ValueError("mnist benchmark requires --mnist-images and --mnist-labels")
    features, labels = load_mnist_idx(args.mnist_images, args.mnist_labels)
    return partition_label_shards(
        features, labels, args.clients, args.labels_per_client, args.data_seed
    )


def _build(args, strategy: str):
    dataset = _load_benchmark(args)
    caps = federation.capabilities(args.clients, args.cap_seed)
    profiles = federation.build_profiles(dataset, caps)
    tau = args.tau if args.tau is not None else federation.deadline_for_stragglers(
        profiles, args.epochs, args.stragglers
    )
    spec = models.ModelSpec(
        args.model, dataset.d_feat, dataset.n_classes,
        hidden=args.hidden if args.model == models.MLP else 0, l2=args.l2,
    )
    if args.lr_schedule == "theorem":
        pooled_x, pooled_y = dataset.pooled_train()
        mu, smooth = analysis.estimate_mu_L(spec, pooled_x, pooled_y)
        lr = federation.LrSpec("theorem", mu=mu, smooth=smooth)
    else:
        lr = federation.LrSpec("fixed", value=args.lr)
    config = federation.RoundConfig(
        strategy=strategy,
        e_epochs=args.epochs,
        rounds=args.rounds,
        k_clients=args.k,
        tau=tau,
        lr=lr,
        batch_size=args.batch,
        mu_prox=args.mu_prox,
        distance_kind=args.distance,
        gamma=args.gamma,
        pool_cap=args.pool_cap,
        probes=args.probes,
    )
    seeds = {"data": args.data_seed, "cap": args.cap_seed, "run": args.run_seed}
    return dataset, profiles, spec, config, seeds


def _execute(args, strategy: str, out_dir: Path) -> federation.RunLog:
    dataset, profiles, spec, config, seeds = _build(args, strategy)
    runlog = federation.run(dataset, profiles, spec, config, seeds)
    out_dir.mkdir(parents=True, exist_ok=True)
    federation.write_metrics_csv(runlog, out_dir / "metrics.csv")
    federation.write_run_json(runlog, out_dir / "run.json")
    return runlog


def cmd_run(args) -> int:
    runlog = _execute(args, args.strategy, Path(args.out))
    final = runlog.records[-1] if runlog.records else None
    acc = final.test_acc if final else float("nan")
    print(
        f"{args.strategy}: rounds={len(runlog.records)} final_test_acc={acc:.4f} "
        f"mean_norm_time={runlog.mean_normalized_time():.3f} out={args.out}"
    )
    return 0


def cmd_sweep(args) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = [s for s in strategies if s not in federation.STRATEGIES]
    if unknown:
        raise ValueError(f"unknown strategies: {unknown}")
    out = Path(args.out)
    rows = []
    for strategy in strategies:
        runlog = _execute(args, strategy, out / strategy)
        final = runlog.records[-1] if runlog.records else None
        rows.append(
            (
                strategy,
                final.test_acc if final else float("nan"),
                runlog.mean_normalized_time(),
            )
        )
    lines = ["strategy,final_test_acc,mean_normalized_time"]
    lines += [f"{s},{a!r},{t!r}" for s, a, t in rows]
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print(f"{'strategy':<12} {'final_acc':>9} {'norm_time':>9}")
    for s, a, t in rows:
        print(f"{s:<12} {a:>9.4f} {t:>9.3f}")
    return 0


def cmd_bound(args) -> int:
    report = analysis.bound_experiment(
        n_runs=args.runs,
        rounds=args.rounds,
        e_epochs=args.epochs,
        k_clients=args.k,
        s_percent=args.stragglers,
        l2=args.l2,
        n_clients=args.clients,
        data_seed=args.data_seed,
        cap_seed=args.cap_seed,
        run_seed_base=args.run_seed_base,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bound_report.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    worst = min(s["margin"] for s in report["steps"])
    print(f"bound check: {report['verdict']} (worst margin {worst:.6g}) -> {path}")
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulator with coreset "
        "straggler mitigation.",
    )
    parser.add_argument("--config", help="JSON config file; explicit flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment and write metrics")
    _add_experiment_flags(p_run)
    p_run.add_argument("--strategy", choices=list(federation.STRATEGIES), default="fedcore")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run several strategies on paired seeds")
    _add_experiment_flags(p_sweep)
    p_sweep.add_argument("--strategies", default=",".join(federation.STRATEGIES))
    p_sweep.set_defaults(func=cmd_sweep)

    p_bound = sub.add_parser("bound", help="run the convergence-bound check scenario")
    p_bound.add_argument("--runs", type=int, default=10)
    p_bound.add_argument("--rounds", type=int, default=50)
    p_bound.add_argument("--epochs", type=int, default=5)
    p_bound.add_argument("--k", type=int, default=10)
    p_bound.add_argument("--stragglers", type=float, default=30.0)
    p_bound.add_argument("--l2", type=float, default=0.1)
    p_bound.add_argument("--clients", type=int, default=30)
    p_bound.add_argument("--data-seed", type=int, default=101)
    p_bound.add_argument("--cap-seed", type=int, default=202)
    p_bound.add_argument("--run-seed-base", type=int, default=1000)
    p_bound.add_argument("--out", default="out")
    p_bound.set_defaults(func=cmd_bound)
    return parser, [p_run, p_sweep, p_bound]


def parse_args(argv=None) -> argparse.Namespace:
    parser, subparsers = build_parser()
    # Two-pass parse so explicit flags override values from --config.
    pre, _ = parser.parse_known_args(argv)
    if pre.config:
        with open(pre.config) as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ValueError(f"{pre.config}: config must be a JSON object")
        for sub_parser in subparsers:
            known = {a.dest for a in sub_parser._actions}
            sub_parser.set_defaults(**{k: v for k, v in loaded.items() if k in known})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except OSError as exc:
        print(f"error: io failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
