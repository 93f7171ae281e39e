"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 assertion failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .benchmarks import (BenchReport, DaBenchSpec, GaussianBenchSpec, MiBenchSpec,
                         gen_block_correlated, gen_da_mixture, gen_two_gaussians,
                         run_da_bench, run_gaussian_bench, run_mi_bench)
from .config import RunConfig, defaults_toml, load_config
from .errors import (CheckpointError, ConfigurationError, DomainError, IntegrationError,
                     RatioFlowError, TrainingDivergedError)
from .flow_model import FlowScoreModel, load_checkpoint, model_field_provider, save_checkpoint, train
from .io import fmt, read_dataset, read_labeled, write_dataset, write_labeled
from .oracles import (GaussianSpec, analytic_log_ratio, endpoint_gaussian, oracle_field_provider,
                      pooled_gaussian, shifted_gaussian, standard_gaussian)
from .ratio import SolverConfig, estimate_log_ratio, naive_log_ratio
from .schedules import Schedule

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_ASSERT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(args) -> int | None:
    value = getattr(args, "threads", None) or os.environ.get("RATIOFLOW_THREADS")
    if value in (None, ""):
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigurationError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigurationError("thread count must be at least 1")
    return n


def _parse_labels(text: str):
    """``"1"`` or ``"1,null"`` -> tuple of tokens."""
    return tuple(tok.strip() for tok in text.split(","))


def _solver(args) -> SolverConfig:
    return SolverConfig(args.method, args.steps, args.t_eps)


def _write_text(path, text: str):
    Path(path).write_text(text, encoding="utf-8")


# -- generate -----------------------------------------------------------------

def cmd_generate(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.kind == "gaussians":
        ds = gen_two_gaussians(shifted_gaussian(args.s, args.d), standard_gaussian(args.d),
                               args.n, rng)
    elif args.kind == "blockcorr":
        ds = gen_block_correlated(MiBenchSpec(args.d, args.n, args.seed, args.rho), rng)
    else:
        spec = DaBenchSpec(args.a, n_per_cluster=args.n, seed=args.seed)
        ds, clusters = gen_da_mixture(spec, rng)
        if args.clusters_out:
            write_dataset(args.clusters_out, ds.points, clusters, ["cluster"])
    write_labeled(args.out, ds)
    for value in np.unique(ds.labels[:, 0]):
        pts = ds.points[ds.labels[:, 0] == value]
        print(f"{ds.condition_spec.names[0]}={value}: n={pts.shape[0]} "
              f"mean={np.round(pts.mean(axis=0)[:4], 4).tolist()}")
    return EXIT_OK


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.resume:
        model = load_checkpoint(args.resume)
        ds = read_labeled(args.data, model.condition_spec)
        if ds.dim != model.data_dim:
            raise ConfigurationError(
                f"dataset has dimension {ds.dim} but the checkpoint expects {model.data_dim}")
    else:
        ds = read_labeled(args.data)
        model = None
    tcfg = cfg.train
    rng = np.random.default_rng(tcfg.seed)
    if model is None:
        model = FlowScoreModel.create(ds.dim, ds.condition_spec, cfg.schedule, cfg.model, rng,
                                      tcfg.t_window)
    model, trace = train(ds, model, tcfg, rng)
    save_checkpoint(model, args.out_checkpoint)
    trace_path = args.loss_trace or str(args.out_checkpoint) + ".loss.csv"
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{fmt(v)}\n")
    print(f"trained {tcfg.steps} steps; final loss {trace[-1]:.6g}; "
          f"checkpoint {args.out_checkpoint}")
    return EXIT_OK


# -- estimate -----------------------------------------------------------------

def _oracle_backend(path):
    """Providers from a JSON file describing one Gaussian per condition."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    schedule = Schedule.from_dict(doc["schedule"])
    table = {}
    for entry in doc["conditions"]:
        key = tuple(str(v).lower() if v is not None else "null" for v in entry["labels"])
        table[key] = GaussianSpec(np.asarray(entry["mean"], float), np.asarray(entry["cov"], float))

    def lookup(labels):
        key = tuple(str(v).lower() for v in labels)
        if key in table:
            return table[key]
        if all(k in ("null", "none") for k in key):
            return pooled_gaussian([g for k, g in table.items() if "null" not in k])
        raise ConfigurationError(
            f"unknown condition {labels}; known tokens are {sorted(table)}")
    return schedule, lambda labels: oracle_field_provider(lookup(labels), schedule)


def _estimate_points(path, d=None):
    points, _, _ = read_dataset(path)
    if d is not None and points.shape[1] != d:
        raise ConfigurationError(f"points have dimension {points.shape[1]}, expected {d}")
    return points


def cmd_estimate(args) -> int:
    num_l, den_l = _parse_labels(args.num_cond), _parse_labels(args.den_cond)
    solver = _solver(args)
    if args.oracle:
        _, provider = _oracle_backend(args.oracle)
        if tuple(t.lower() for t in num_l) == tuple(t.lower() for t in den_l):
            raise ConfigurationError("numerator and denominator conditions must differ")
        points = _estimate_points(args.data)
        num, den = provider(num_l), provider(den_l)
        null = tuple("null" for _ in num_l)
        dim = num.velocity(points[:1], 0.5).shape[1]
        if dim != points.shape[1]:
            raise ConfigurationError(f"points have dimension {points.shape[1]}, expected {dim}")
    else:
        if not args.checkpoint:
            raise ConfigurationError("estimate needs --checkpoint or --oracle")
        model = load_checkpoint(args.checkpoint)
        points = _estimate_points(args.data, model.data_dim)
        spec = model.condition_spec
        num_n, den_n = spec.normalize(num_l), spec.normalize(den_l)
        if num_n == den_n:
            raise ConfigurationError("numerator and denominator conditions must differ")
        if args.variant == "s2" and model.dropout_beta <= 0:
            print("warning: checkpoint was trained without condition dropout; the null token "
                  "was never seen, so S2 uses an untrained unconditional field",
                  file=sys.stderr)
        provider = lambda labels: model_field_provider(model, labels)  # noqa: E731
        num, den = provider(num_n), provider(den_n)
        null = spec.null_labels()
    if args.variant == "s1":
        sim = None
    elif args.variant == "s2":
        sim = provider(null)
    else:
        if not args.sim_cond:
            raise ConfigurationError("--variant general needs --sim-cond")
        sim = provider(_parse_labels(args.sim_cond))
    res = estimate_log_ratio(points, num, den, sim, solver)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("index,log_ratio,converged\n")
        for i, (v, c) in enumerate(zip(res.values, res.converged)):
            fh.write(f"{i},{fmt(v)},{int(c)}\n")
    ok = res.values[res.converged]
    summary = {"schema": 1, "n": int(points.shape[0]), "n_failed": res.n_failed,
               "mean": float(ok.mean()) if ok.size else None,
               "std": float(ok.std()) if ok.size else None,
               "runtime_seconds": res.runtime_seconds, "variant": args.variant,
               "solver": solver.to_dict()}
    summary_path = args.summary or str(args.out) + ".summary.json"
    _write_text(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    if ok.size == 0:
        print("error: every trajectory diverged", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- benchmark ----------------------------------------------------------------

def _build_benchmark(kind: str, cfg: RunConfig):
    b = cfg.benchmark[kind]
    common = dict(schedule=cfg.schedule, train_cfg=cfg.train, solver=cfg.solver,
                  model_cfg=cfg.model)
    if kind == "gaussians":
        spec = GaussianBenchSpec(b["s"], b["d"], b["n_train"], b["n_test"], cfg.seed)
        return lambda: run_gaussian_bench(spec, n_eval=b["n_eval"], **common)
    if kind == "mi":
        spec = MiBenchSpec(b["d"], b["n_samples"], cfg.seed, n_eval=b["n_eval"],
                           n_eval_oracle=b["n_eval_oracle"])
        return lambda: run_mi_bench(spec, **common)
    specs = [DaBenchSpec(a, n_per_cluster=b["n_per_cluster"], seed=cfg.seed + i)
             for i, a in enumerate(b["a_values"])]
    return lambda: run_da_bench(specs, n_eval=b["n_eval"], **common)


def check_assertions(report: BenchReport, assertions: dict):
    """Returns a list of failure messages (empty when everything holds)."""
    failures = []
    for name, bounds in assertions.items():
        recs = [r for r in report.records if r.name == name]
        if not recs:
            failures.append(f"{name}: no such metric in the report")
            continue
        for r in recs:
            v = r.value
            if v is None or not np.isfinite(v):
                failures.append(f"{name}{r.config or ''}: value {v} is not finite")
                continue
            if "min" in bounds and v < bounds["min"]:
                failures.append(f"{name}{r.config or ''}: {v:.6g} < min {bounds['min']}")
            if "max" in bounds and v > bounds["max"]:
                failures.append(f"{name}{r.config or ''}: {v:.6g} > max {bounds['max']}")
    return failures


def cmd_benchmark(args) -> int:
    cfg = load_config(args.config)
    run = _build_benchmark(args.kind, cfg)
    if args.dry_run:
        print(f"config ok: {args.kind} benchmark")
        return EXIT_OK
    report = run()
    _write_text(args.out, report.to_json())
    _write_text(args.timings or str(args.out) + ".timings.json", report.timings_json())
    for r in report.records:
        if r.value is not None:
            print(f"{r.name}{'' if not r.config else ' ' + json.dumps(r.config, sort_keys=True)}"
                  f" = {r.value}")
    failures = check_assertions(report, cfg.assertions)
    for msg in failures:
        print(f"ASSERTION FAILED: {msg}", file=sys.stderr)
    return EXIT_ASSERT if failures else EXIT_OK


# -- oracle-check -------------------------------------------------------------

def cmd_oracle_check(args) -> int:
    schedule = Schedule(args.schedule, args.sigma_min, args.lam)
    solver = _solver(args)
    rng = np.random.default_rng(args.seed)
    q, q0 = shifted_gaussian(args.s, args.d), standard_gaussian(args.d)
    x = q.sample(args.n, rng)
    num, den = oracle_field_provider(q, schedule), oracle_field_provider(q0, schedule)
    pooled = oracle_field_provider(pooled_gaussian([q, q0]), schedule)
    truth = analytic_log_ratio(endpoint_gaussian(q, schedule), endpoint_gaussian(q0, schedule), x)
    start = time.perf_counter()
    s1 = estimate_log_ratio(x, num, den, solver=solver)
    s2 = estimate_log_ratio(x, num, den, pooled, solver)
    rev = estimate_log_ratio(x, den, num, solver=solver)
    naive = naive_log_ratio(num, den, x, solver)
    errors = {
        "s1_vs_analytic": float(np.max(np.abs(s1.values - truth))),
        "s2_vs_analytic": float(np.max(np.abs(s2.values - truth))),
        "naive_vs_s1": float(np.max(np.abs(naive.values - s1.values))),
        "antisymmetry": float(np.max(np.abs(s1.values + rev.values))),
    }
    if args.order:
        coarse = SolverConfig(solver.method, solver.steps // 2 or 1, solver.t_eps)
        e_c = np.max(np.abs(estimate_log_ratio(x, num, den, solver=coarse).values - truth))
        errors["step_halving_error_ratio"] = float(e_c / max(errors["s1_vs_analytic"], 1e-300))
    elapsed = time.perf_counter() - start
    failed = False
    for name, err in errors.items():
        if name == "step_halving_error_ratio":
            print(f"{name}: {err:.3f}")
            continue
        bad = not np.isfinite(err) or err >= args.tol
        failed |= bad
        print(f"{name}: max |error| = {err:.3e} [{'FAIL' if bad else 'ok'}]")
    print(f"elapsed: {elapsed:.2f}s")
    if not all(np.isfinite(v) for v in errors.values()):
        return EXIT_NUMERIC
    return EXIT_ASSERT if failed else EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(defaults_toml())
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_solver_flags(p, t_eps=1e-3):
    p.add_argument("--method", choices=["euler", "rk4"], default="rk4")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--t-eps", type=float, default=t_eps)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ratioflow", description="Log-density ratios of conditional flows.")
    parser.add_argument("--version", action="version", version=f"ratioflow {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap native thread pools (also RATIOFLOW_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a benchmark dataset as CSV")
    p.add_argument("kind", choices=["gaussians", "blockcorr", "da-mixture"])
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--n", type=int, default=1000, help="points per condition (per cluster for da-mixture)")
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clusters-out", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a conditional flow model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--loss-trace", default=None)
    p.add_argument("--resume", default=None, help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="log-ratios of data points")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle", default=None, help="JSON file of Gaussian conditions")
    p.add_argument("--data", required=True)
    p.add_argument("--num-cond", required=True)
    p.add_argument("--den-cond", required=True)
    p.add_argument("--sim-cond", default=None)
    p.add_argument("--variant", choices=["s1", "s2", "general"], default="s1")
    _add_solver_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("benchmark", help="run a benchmark and write a JSON report")
    p.add_argument("kind", choices=["gaussians", "mi", "da"])
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="report.json")
    p.add_argument("--timings", default=None)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("oracle-check", help="training-free check of the ratio ODE")
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--schedule", choices=["I", "II", "III"], default="I")
    p.add_argument("--sigma-min", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.25)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--order", action="store_true", help="also report the step-halving error ratio")
    _add_solver_flags(p, t_eps=0.0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("config", help="configuration helpers")
    csub = p.add_subparsers(dest="config_command", required=True, parser_class=_Parser)
    c = csub.add_parser("print-defaults")
    c.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        n_threads = _threads(args)
        if n_threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=n_threads):
                return args.func(args)
        return args.func(args)
    except (TrainingDivergedError, IntegrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, DomainError, CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RatioFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
