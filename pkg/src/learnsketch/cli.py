"""Benchmark harness: ``learnsketch <command> [flags]``.

Commands: gen-data, train, run-ihs, run-fastreg, run-oracle-se, report.
Every command is deterministic given ``--seed``; trial ``k`` draws from
``np.random.default_rng(SeedSequence([seed, k]))`` (see :func:`trial_rng`).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data_io, oracle_se
from .constraints import ConstraintSpec
from .data_io import DataError, DatasetManifest, ExperimentRecord, format_extra
from .estimate import RankDeficientError
from .fastreg import IterationCapExceeded, fast_regression_solve
from .ihs import SolverNotConverged, choose_sketch, reference_solution, sketched_quadratic_solve
from .learn import COND_NUMBER, IHS_ROUND, TrainConfig, TrainedSketchSequence, train_sequence
from .sketch import make_countsketch, make_gaussian, make_sjlt

log = logging.getLogger("learnsketch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; validation failures exit with 1 here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, trial]))


def parse_m(text, d: int) -> int:
    """``"40"`` or ``"5d"`` (a multiple of the task dimension)."""
    text = str(text).strip()
    try:
        m = math.ceil(float(text[:-1]) * d) if text.endswith("d") else int(text)
    except ValueError:
        raise UsageError(f"invalid sketch size {text!r}") from None
    if m < 1:
        raise UsageError("sketch size must be positive")
    return int(m)


def _map_trials(fn, trials: int, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, range(trials)))
    return [fn(k) for k in range(trials)]


# --- gen-data --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    count = args.train + args.test
    if args.family == "csv":
        if not args.csv:
            raise UsageError("--csv is required for the csv family")
        spec = ConstraintSpec(args.constraint, lam=args.lam, rho=args.rho)
        manifest, _ = data_io.chunk_csv(args.csv, args.rows_per_chunk, args.target_cols, args.train_frac,
                                        rng, out_dir=out, constraint=spec)
        manifest.seed = args.seed
        manifest.save(out)
        print(f"wrote {len(manifest.train)} train / {len(manifest.test)} test chunks to {out}")
        return 0
    if args.family == "lowrank":
        tasks = data_io.gen_lowrank_matrix(args.n, args.d1, args.d2, args.r, args.rho, args.sigma, count, rng)
        family, params = "lowrank-matrix", dict(n=args.n, d1=args.d1, d2=args.d2, r=args.r, rho=args.rho,
                                                sigma=args.sigma,
                                                rescaled=sum(bool(t.rescaled) for t in tasks))
    elif args.family == "svm":
        tasks = data_io.gen_gaussian_mixture_svm(args.n, args.d, args.C, count, rng)
        family, params = "gaussian-mixture-svm", dict(n=args.n, d=args.d, C=args.C)
    else:
        tasks = data_io.gen_leverage_dataset(args.n, args.d, args.eps, args.sigma, None, count, rng)
        family, params = "leverage-synthetic", dict(n=args.n, d=args.d, eps=args.eps, sigma=args.sigma)
    manifest = DatasetManifest(family, params, seed=args.seed)
    data_io.save_tasks(out, tasks, manifest, args.train)
    print(f"wrote {args.train} train / {args.test} test tasks to {out}")
    return 0


# --- train -----------------------------------------------------------------

def cmd_train(args) -> int:
    _, tasks = data_io.load_tasks(args.data, "train")
    if not tasks:
        raise UsageError("training split is empty")
    loss = COND_NUMBER if args.task == "fastreg" else IHS_ROUND
    config = TrainConfig(steps=args.steps, alpha=args.lr, batch_size=args.batch, seed=args.seed,
                         fd_step=args.fd_step, loss=loss, gradient=args.gradient)
    m = parse_m(args.m, tasks[0].d)
    seq = train_sequence(tasks, config, m, args.rounds)
    seq.save(args.out)
    for r in seq.rounds:
        first = r.loss_trace[0] if r.loss_trace else math.nan
        last = r.loss_trace[-1] if r.loss_trace else math.nan
        print(f"round {r.round}: loss {first:.6g} -> {last:.6g}")
    return 0


# --- run-ihs ---------------------------------------------------------------

def _random_sketch_factory(kind: str, m: int, n: int):
    if kind == "gaussian":
        return lambda gen: make_gaussian(m, n, gen)
    if kind == "countsketch":
        return lambda gen: make_countsketch(m, n, gen)
    if kind.startswith("sjlt"):
        try:
            s = int(kind.split(":", 1)[1]) if ":" in kind else 1
        except ValueError:
            raise UsageError(f"invalid SJLT spec {kind!r}") from None
        if s < 1 or m % s:
            raise UsageError(f"SJLT block count {s} must divide m = {m}")
        return lambda gen: make_sjlt(m, n, s, gen)
    raise UsageError(f"unknown sketch family {kind!r}")


def _dataset_id(path) -> str:
    return Path(path).name or str(path)


def cmd_run_ihs(args) -> int:
    _, tasks = data_io.load_tasks(args.data, "test")
    if not tasks:
        raise UsageError("test split is empty")
    m = parse_m(args.m, tasks[0].d)
    learned = None
    if args.sketch.startswith("learned:"):
        learned = TrainedSketchSequence.load(args.sketch.split(":", 1)[1])
        if learned.rounds[0].sketch.m != m or learned.rounds[0].sketch.n != tasks[0].n:
            raise UsageError("learned sketch dimensions do not match --m and the data")
        family = "learned" if args.no_safeguard else "learned-safeguarded"
        make_random = _random_sketch_factory("countsketch", m, tasks[0].n)
    else:
        family = args.sketch
        make_random = _random_sketch_factory(args.sketch, m, tasks[0].n)
    references = [reference_solution(t) for t in tasks]
    dataset = _dataset_id(args.data)

    def run_trial(trial):
        gen = trial_rng(args.seed, trial)
        rows = []
        for task, x_star in zip(tasks, references):
            x = task.initial_point()
            for t in range(1, args.rounds + 1):
                chosen = family
                if learned is not None:
                    S = learned.sketch(t)
                    start = time.perf_counter()
                    if not args.no_safeguard:
                        S, chosen, _, _ = choose_sketch(S, make_random(gen), task.A, args.eta, gen)
                else:
                    S = make_random(gen)
                    start = time.perf_counter()
                x = sketched_quadratic_solve(S, task, x)
                elapsed = 1e3 * (time.perf_counter() - start)
                rows.append(ExperimentRecord("ihs", dataset, family, m, t, trial, task.error(x, x_star),
                                             elapsed, format_extra(task=task.name, chosen=chosen)))
        return rows

    records = [r for rows in _map_trials(run_trial, args.trials, args.threads) for r in rows]
    data_io.write_results(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


# --- run-fastreg -----------------------------------------------------------

def cmd_run_fastreg(args) -> int:
    _, tasks = data_io.load_tasks(args.data, "test")
    if not tasks:
        raise UsageError("test split is empty")
    m = parse_m(args.m, tasks[0].d)
    learned = TrainedSketchSequence.load(args.sketch_learned) if args.sketch_learned else None
    family = "learned" if learned is not None else "countsketch"
    dataset = _dataset_id(args.data)

    def run_trial(trial):
        gen = trial_rng(args.seed, trial)
        rows = []
        for task in tasks:
            x = np.zeros(task.d)
            for t in range(1, args.rounds + 1):
                y = task.A.T @ (task.A @ x - task.b)
                S_l = learned.sketch(t) if learned is not None else None
                S_r = make_countsketch(m, task.n, gen)
                start = time.perf_counter()
                res = fast_regression_solve(S_l, S_r, task.A, y, args.eps, args.eta_est, gen,
                                            step_scale=args.step_scale, update=args.update)
                elapsed = 1e3 * (time.perf_counter() - start)
                x = x - res.x
                for it, err in enumerate(res.residuals):
                    rows.append(ExperimentRecord(
                        f"fastreg-round{t}", dataset, family, m, it, trial, err,
                        elapsed if it == len(res.residuals) - 1 else 0.0,
                        format_extra(task=task.name, chosen=res.chosen, iterations=res.iterations)))
        return rows

    records = [r for rows in _map_trials(run_trial, args.trials, args.threads) for r in rows]
    data_io.write_results(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


# --- run-oracle-se ---------------------------------------------------------

def _oracle_tasks(data: str, seed: int):
    if data.startswith("synthetic"):
        params = {"eps": 0.1, "n": 1000, "d": 10, "sigma": 0.1, "count": 100}
        if ":" in data:
            for item in data.split(":", 1)[1].split(","):
                key, _, value = item.partition("=")
                if key not in params:
                    raise UsageError(f"unknown synthetic parameter {key!r}")
                params[key] = float(value) if key in ("eps", "sigma") else int(value)
        gen = np.random.default_rng(np.random.SeedSequence([seed, 2**31]))
        tasks = data_io.gen_leverage_dataset(params["n"], params["d"], params["eps"], params["sigma"], None,
                                             params["count"], gen)
        return f"synthetic-eps{params['eps']:g}", tasks
    _, tasks = data_io.load_tasks(data, "all")
    return _dataset_id(data), tasks


def cmd_run_oracle_se(args) -> int:
    dataset, tasks = _oracle_tasks(args.data, args.seed)
    if not tasks:
        raise UsageError("dataset is empty")
    d = tasks[0].d
    m_list = [parse_m(x, d) for x in args.m_list.split(",")]
    modes = {"both": (False, True), "with": (True,), "without": (False,)}[args.oracle]
    records = []
    for with_oracle in modes:
        gen = trial_rng(args.seed, int(with_oracle))
        summaries = oracle_se.table1_experiment(tasks, m_list, with_oracle, args.trials, gen,
                                                budget=args.budget, metric=args.metric, dataset=dataset)
        for s in summaries:
            records.extend(s.records)
            tag = "with" if with_oracle else "without"
            print(f"m={s.m} {tag} oracle: mean error {s.mean_error:.6g} (failed {s.failed})")
    data_io.write_results(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


# --- report ----------------------------------------------------------------

def aggregate(records):
    """Mean and population std of ``error`` per (experiment, sketch, m, round)."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.experiment, r.sketch, r.m, r.round)].append(r.error)
    rows = []
    for key in sorted(groups):
        vals = np.array(groups[key])
        rows.append(key + (len(vals), float(vals.mean()), float(vals.std())))
    return rows


def cumulative_time(records):
    """Mean error against mean cumulative time per (experiment, sketch, m, round).

    Time accumulates over rounds within each (dataset, trial, task) run.
    """
    runs = defaultdict(list)
    for r in records:
        task = data_io.parse_extra(r.extra).get("task", "")
        runs[(r.experiment, r.dataset, r.sketch, r.m, r.trial, task)].append(r)
    groups = defaultdict(lambda: ([], []))
    for (exp, _, sketch, m, _, _), rs in runs.items():
        total = 0.0
        for r in sorted(rs, key=lambda r: r.round):
            total += r.time_ms
            errs, times = groups[(exp, sketch, m, r.round)]
            errs.append(r.error)
            times.append(total)
    return [key + (float(np.mean(e)), float(np.mean(t))) for key, (e, t) in sorted(groups.items())]


def cmd_report(args) -> int:
    records = data_io.read_results(args.results)
    per_round = aggregate(records)
    timing = cumulative_time(records)
    import csv

    def emit(rows, header, path):
        fh = open(path, "w", newline="") if path else sys.stdout
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        finally:
            if path:
                fh.close()

    prefix = args.out
    emit(per_round, ["experiment", "sketch", "m", "round", "count", "mean_error", "std_error"],
         f"{prefix}_rounds.csv" if prefix else None)
    emit(timing, ["experiment", "sketch", "m", "round", "mean_error", "mean_cumulative_time_ms"],
         f"{prefix}_time.csv" if prefix else None)
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--config", help="JSON file whose keys mirror the long flag names")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="learnsketch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate or chunk a dataset")
    p.add_argument("--family", choices=["lowrank", "svm", "leverage", "csv"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=270)
    p.add_argument("--test", type=int, default=30)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--d1", type=int, default=7)
    p.add_argument("--d2", type=int, default=7)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--rho", type=float, default=30.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--csv")
    p.add_argument("--rows-per-chunk", type=int, default=300)
    p.add_argument("--target-cols", type=int, default=1)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--constraint", choices=["free", "l1", "simplex", "nuclear"], default="free")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="learn sketch values")
    p.add_argument("--task", choices=["ihs-lasso", "ihs-svm", "ihs-nuclear", "fastreg"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--fd-step", type=float, default=1e-4)
    p.add_argument("--gradient", choices=["gram", "coordinate"], default="gram")
    p.add_argument("--m", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run-ihs", parents=[common], help="IHS error per round")
    p.add_argument("--data", required=True)
    p.add_argument("--m", required=True)
    p.add_argument("--rounds", type=int, default=8)
    p.add_argument("--sketch", default="countsketch",
                   help="gaussian | countsketch | sjlt:s | learned:<file>")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--no-safeguard", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_ihs)

    p = sub.add_parser("run-fastreg", parents=[common], help="preconditioned Hessian regression")
    p.add_argument("--data", required=True)
    p.add_argument("--m", required=True)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--sketch-learned")
    p.add_argument("--step-scale", type=float, default=1.0)
    p.add_argument("--eta-est", type=float, default=0.1)
    p.add_argument("--update", choices=["richardson", "verbatim"], default="richardson")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_fastreg)

    p = sub.add_parser("run-oracle-se", parents=[common], help="oracle-split sketch-and-solve table")
    p.add_argument("--data", default="synthetic:eps=0.1")
    p.add_argument("--m-list", default="5d,7d,10d")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--with-oracle", dest="oracle", action="store_const", const="with")
    g.add_argument("--no-oracle", dest="oracle", action="store_const", const="without")
    p.set_defaults(oracle="both")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--budget", choices=["total", "extra"], default="total")
    p.add_argument("--metric", choices=["residual", "excess"], default="residual")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_oracle_se)

    p = sub.add_parser("report", parents=[common], help="aggregate a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--out", help="output prefix; tables go to stdout when omitted")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv``; keys of the ``--config`` JSON become subcommand defaults, so explicit flags win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    if "lambda" in cfg:
        cfg["lam"] = cfg.pop("lambda")
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if command is None:
        return parser.parse_args(argv)
    sub = choices[command]
    known_dests = {a.dest for a in sub._actions}
    unknown = set(cfg) - known_dests
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for action in sub._actions:
        if action.dest in cfg:
            action.required = False
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "trials", 1) is None:
            args.trials = 5 if not str(getattr(args, "sketch", "")).startswith("learned") else 3
        if getattr(args, "trials", 1) < 1 or args.threads < 1:
            raise UsageError("--trials and --threads must be positive")
        return args.func(args)
    except (SolverNotConverged, IterationCapExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DataError, ValueError, OSError, RankDeficientError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
