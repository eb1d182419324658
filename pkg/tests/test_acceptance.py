"""End-to-end acceptance checks, one test per criterion, each at its stated tolerance."""

import csv
import math

import numpy as np
import pytest

from learnsketch.cli import main
from learnsketch.constraints import ConstraintSpec, project_nuclear_ball, project_simplex
from learnsketch.data_io import gen_gaussian_mixture_svm, gen_leverage_dataset, gen_lowrank_matrix
from learnsketch.estimate import estimate_z, exact_z
from learnsketch.fastreg import (IterationCapExceeded, build_preconditioner, fast_regression_solve,
                                 identity_preconditioner, newton_driver)
from learnsketch.ihs import Task, hessian_sketch_select, reference_solution, run_ihs, sketched_quadratic_solve
from learnsketch.learn import RoundContext, TrainConfig, train_sketch
from learnsketch.oracle_se import embedding_distortion, norm_distortion, table1_experiment
from learnsketch.sketch import identity_sketch, make_countsketch, make_gaussian

from test_constraints import nuclear_oracle, simplex_oracle

ETA = 0.1


def test_criterion_01_identity_contracts(criterion):
    gen = np.random.default_rng(1)
    worst = 0.0
    tasks = [Task(gen.standard_normal((80, 5)), gen.standard_normal(80)),
             Task(gen.standard_normal((80, 5)), gen.standard_normal(80), ConstraintSpec("l1", lam=2.0))]
    tasks += gen_gaussian_mixture_svm(40, 8, 1.0, 1, gen)
    tasks += gen_lowrank_matrix(100, 4, 4, 2, 3.0, 0.5, 1, gen)
    for task in tasks:
        x_star = reference_solution(task)
        state = run_ihs(task, identity_sketch(task.n), 1, x_star=x_star)
        worst = max(worst, abs(state.errors[0]) / max(abs(task.objective(x_star)), 1e-300))
    calls = violations = 0
    for _ in range(40):
        A = gen.standard_normal((300, 8)) * np.exp(gen.uniform(-3, 3, 8))
        b = gen.standard_normal(300)
        trace = newton_driver(A, b, lambda t: (make_countsketch(64, 300, gen), make_countsketch(64, 300, gen)), 2,
                              1e-8, gen)
        for call, x in zip(trace.calls, trace.iterates):
            y = A.T @ (A @ x - b)
            calls += 1
            violations += np.linalg.norm(A.T @ (A @ call.x) - y) > 1e-8 * np.linalg.norm(y)
    ok = worst <= 1e-8 and violations == 0
    criterion(1, ok, f"max round-1 relative suboptimality {worst:.2e}; residual contract violations {violations}/{calls}")
    assert ok


def test_criterion_02_z_estimate_intervals(criterion):
    gen = np.random.default_rng(2)
    hits = 0
    for _ in range(100):
        A = gen.standard_normal((200, 5))
        S = make_countsketch(25, 200, gen)
        z1, z2 = exact_z(S, A)
        est = estimate_z(S, A, ETA, gen)
        ok1 = z1 / (1 + ETA) <= est.z1_hat <= z1 / (1 - ETA)
        ok2 = z2 / (1 + ETA) ** 2 - 3 * ETA <= est.z2_hat <= z2 / (1 - ETA) ** 2 + 3 * ETA
        hits += ok1 and ok2
    criterion(2, hits >= 95, f"{hits}/100 pairs inside both intervals (need 95)")
    assert hits >= 95


def test_criterion_03_safeguard(criterion):
    gen = np.random.default_rng(3)
    hits = random_chosen = 0
    for _ in range(100):
        task = Task(gen.standard_normal((200, 5)), gen.standard_normal(200))
        bad = make_countsketch(25, 200, gen).with_values(np.zeros(200))
        sel = hessian_sketch_select(bad, make_countsketch(25, 200, gen), task, ETA, gen)
        random_chosen += sel.chosen == "random"
        x_star = reference_solution(task)
        bound = (1 + ETA) ** 4 * (sel.random.ratio + 4 * ETA) * np.linalg.norm(task.A @ x_star)
        hits += sel.chosen == "random" and np.linalg.norm(task.A @ (sel.x - x_star)) <= bound
    criterion(3, hits >= 95, f"{hits}/100 within the bound (random branch chosen {random_chosen}/100; need 95)")
    assert hits >= 95


def test_criterion_04_embedding(criterion):
    # (1 +- eps) in the norm: singular values of S U within [0.5, 1.5]
    hits = gram_hits = 0
    d, n = 10, 2000
    for seed in range(100):
        gen = np.random.default_rng(seed)
        A = gen.standard_normal((n, d))
        S = make_countsketch(d * d, n, gen)
        hits += norm_distortion(S, A) <= 0.5
        gram_hits += embedding_distortion(S, A) <= 0.5
    criterion(4, hits >= 90, f"{hits}/100 seeds with all singular values of SU in [0.5, 1.5] (need 90); "
                             f"Gram form ||U'S'SU - I|| <= 0.5 in {gram_hits}/100")
    assert hits >= 90


def constructed(kappa, gen, n=500, d=10):
    U = np.linalg.qr(gen.standard_normal((n, d)))[0]
    V = np.linalg.qr(gen.standard_normal((d, d)))[0]
    return (U * np.geomspace(kappa, 1.0, d)) @ V.T


def test_criterion_05_preconditioner(criterion):
    hits = 0
    for seed in range(100):
        gen = np.random.default_rng(seed)
        A = gen.standard_normal((500, 10))
        pre = build_preconditioner(make_gaussian(200, 500, gen), A, ETA, gen)
        s = np.linalg.svd(A @ pre.P, compute_uv=False)
        hits += s[0] / s[-1] <= 1.5
    kappas, iters = [], []
    for kappa in (1.5, 5.0, 20.0):
        counts = []
        for seed in range(5):
            gen = np.random.default_rng(seed)
            A = constructed(kappa, gen)
            sv = np.linalg.svd(A, compute_uv=False)
            pre = identity_preconditioner(A, 1.0 / (sv[0] ** 2 + sv[-1] ** 2))
            res = fast_regression_solve(None, None, A, gen.standard_normal(10), 1e-8, ETA, gen,
                                        preconditioner=pre, max_iter=10**6)
            counts.append(res.iterations)
        kappas.append(kappa)
        iters.append(np.mean(counts))
    slope = np.polyfit(np.log(kappas), np.log(iters), 1)[0]
    ok = hits >= 95 and slope <= 2.3
    criterion(5, ok, f"kappa(AR^-1) <= 1.5 in {hits}/100 (need 95); iterations {np.round(iters).astype(int).tolist()} "
                     f"at kappa {kappas}, log-log slope {slope:.2f} (need <= 2.3)")
    assert ok


def test_criterion_06_projection_oracles(criterion):
    gen = np.random.default_rng(6)
    err_s = max(np.max(np.abs(project_simplex(x) - simplex_oracle(x)))
                for x in (2 * gen.standard_normal(4) for _ in range(1000)))
    err_n = max(np.max(np.abs(project_nuclear_ball(X, 4.0) - nuclear_oracle(X, 4.0)))
                for X in (3 * gen.standard_normal((5, 5)) for _ in range(100)))
    err_d = np.max(np.abs(project_nuclear_ball(np.diag([8.0, 6.0]), 10.0) - np.diag([6.0, 4.0])))
    ok = err_s <= 1e-10 and err_n <= 1e-8 and err_d <= 1e-12
    criterion(6, ok, f"simplex max err {err_s:.1e}, nuclear max err {err_n:.1e}, diag(8,6) err {err_d:.1e}")
    assert ok


def test_criterion_07_contraction(criterion):
    hits = 0
    for seed in range(100):
        gen = np.random.default_rng(seed)
        task = Task(gen.standard_normal((300, 9)), gen.standard_normal(300))
        state = run_ihs(task, lambda t: make_gaussian(90, 300, gen), 5)
        hits += all(a > b for a, b in zip(state.errors, state.errors[1:]))
    criterion(7, hits >= 90, f"{hits}/100 seeds strictly decreasing over 5 rounds (need 90)")
    assert hits >= 90


def _round1_error(S, task, x_star):
    return task.error(sketched_quadratic_solve(S, task, task.initial_point(), strict=False), x_star)


def test_criterion_08_learned_sketch(criterion):
    data = np.random.default_rng(8)
    train = gen_lowrank_matrix(500, 7, 7, 3, 30.0, 1.0, 60, data)
    test = gen_lowrank_matrix(500, 7, 7, 3, 30.0, 1.0, 30, data)
    refs = [reference_solution(t) for t in test]
    items = [RoundContext(t, t.initial_point()) for t in train]
    m = 35
    ratios = []
    for seed in range(3):
        cfg = TrainConfig(steps=200, alpha=1e-3, batch_size=8, seed=seed)
        S = train_sketch(items, cfg, m).sketch
        learned = np.mean([_round1_error(S, t, x) for t, x in zip(test, refs)])
        gen = np.random.default_rng(1000 + seed)
        random = np.mean([np.mean([_round1_error(make_countsketch(m, 500, gen), t, x) for _ in range(5)])
                          for t, x in zip(test, refs)])
        ratios.append(learned / random)
    wins = sum(r <= 0.8 for r in ratios)
    criterion(8, wins >= 2, f"learned/random mean test error per training seed {np.round(ratios, 3).tolist()} "
                            f"(need <= 0.8 in 2 of 3)")
    assert wins >= 2


def test_criterion_09_table1_direction(criterion):
    gen = np.random.default_rng(9)
    tasks = gen_leverage_dataset(1000, 10, 0.1, 0.1, None, 100, gen)
    m_list = [50, 70, 100]
    without = table1_experiment(tasks, m_list, False, 10, np.random.default_rng(90))
    with_ = table1_experiment(tasks, m_list, True, 10, np.random.default_rng(91))
    ratios = [w.mean_error / wo.mean_error for w, wo in zip(with_, without)]
    # the other accounting choices, reported for context only
    alt = []
    for metric, budget in (("excess", "total"), ("excess", "extra")):
        a = table1_experiment(tasks, m_list, False, 10, np.random.default_rng(90), metric=metric)
        b = table1_experiment(tasks, m_list, True, 10, np.random.default_rng(91), metric=metric, budget=budget)
        alt.append(f"{metric}/{budget} ratios {np.round([y.mean_error / x.mean_error for x, y in zip(a, b)], 2).tolist()}")
    ok = all(r <= 0.75 for r in ratios)
    criterion(9, ok, f"with/without oracle mean residual ratios {np.round(ratios, 3).tolist()} at m={m_list} "
                     f"(need <= 0.75 each); means without {[round(s.mean_error, 3) for s in without]}; "
                     + "; ".join(alt))
    assert ok


def _strip_time(path):
    rows = list(csv.reader(open(path)))
    col = rows[0].index("time_ms")
    return [r[:col] + r[col + 1:] for r in rows]


def test_criterion_10_reproducibility(criterion, tmp_path):
    def run_all(tag, threads):
        base = tmp_path / tag
        base.mkdir()
        out = {}
        main(["gen-data", "--family", "lowrank", "--n", "80", "--d1", "3", "--d2", "3", "--r", "1", "--rho", "5",
              "--train", "4", "--test", "3", "--seed", "7", "--out", str(base / "lr")])
        main(["gen-data", "--family", "svm", "--n", "20", "--d", "6", "--train", "2", "--test", "2", "--seed", "7",
              "--out", str(base / "svm")])
        main(["gen-data", "--family", "leverage", "--n", "300", "--d", "5", "--train", "4", "--test", "2",
              "--sigma", "0.1", "--seed", "7", "--out", str(base / "lev")])
        codes = [
            main(["train", "--task", "ihs-nuclear", "--data", str(base / "lr"), "--m", "5d", "--steps", "3",
                  "--rounds", "2", "--lr", "1e-3", "--seed", "7", "--out", str(base / "seq.json")]),
            main(["train", "--task", "fastreg", "--data", str(base / "lev"), "--m", "10d", "--steps", "3",
                  "--lr", "1.0", "--seed", "7", "--out", str(base / "fr.json")]),
            main(["run-ihs", "--data", str(base / "lr"), "--m", "5d", "--rounds", "3", "--trials", "3",
                  "--sketch", f"learned:{base / 'seq.json'}", "--threads", threads, "--seed", "7",
                  "--out", str(base / "ihs.csv")]),
            main(["run-ihs", "--data", str(base / "svm"), "--m", "24", "--rounds", "3", "--trials", "3",
                  "--sketch", "sjlt:2", "--threads", threads, "--seed", "7", "--out", str(base / "svm.csv")]),
            main(["run-fastreg", "--data", str(base / "lev"), "--m", "10d", "--rounds", "2", "--trials", "2",
                  "--sketch-learned", str(base / "fr.json"), "--threads", threads, "--seed", "7",
                  "--out", str(base / "fr.csv")]),
            main(["run-oracle-se", "--data", "synthetic:n=300,d=5,count=4", "--trials", "2", "--seed", "7",
                  "--out", str(base / "ose.csv")]),
            main(["report", "--results", str(base / "ihs.csv"), "--out", str(base / "rep")]),
        ]
        assert codes == [0] * len(codes)
        for name in ("lr/task_0003_b.csv", "svm/task_0001_A.csv", "lev/manifest.json", "seq.json", "fr.json",
                     "rep_rounds.csv"):
            out[name] = (base / name).read_bytes()
        for name in ("ihs.csv", "svm.csv", "fr.csv", "ose.csv"):
            out[name] = _strip_time(base / name)
        return out

    a = run_all("a", "1")
    b = run_all("b", "3")
    diff = sorted(k for k in a if a[k] != b[k])
    criterion(10, not diff, f"{len(a)} outputs compared across two runs (1 vs 3 threads); differing: {diff or 'none'}")
    assert not diff
