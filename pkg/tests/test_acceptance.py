"""
Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL verdict that is printed in the terminal
summary (and to stdout with ``-s``) and then asserts it.
"""

import itertools
import os
import time

import numpy as np
import pytest

from mirror_gossip import (MirrorMap, RunConfig, aggregate_row, centralized_oracle,
                           corollary_rates, generate_schedule, metropolis_weights, run,
                           skew_correction_check, unrolled_state_check)
from mirror_gossip.analysis import (TheoryConstants, amgm_sweep, consensus_bound_check,
                                    mixing_bound_suite, skew_sweep, theory_report,
                                    uniform_convexity_suite)
from mirror_gossip.engine import THREADS_ENV, build_problem, build_schedule


def verdict(criteria, key, passed, detail):
    criteria[key] = (bool(passed), detail)
    print(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


def test_criterion_1_motivating_example(criteria):
    start = time.perf_counter()
    lin, pw = MirrorMap(1), MirrorMap(5)
    models = [[3.0], [11.0]]
    lin_diff = (aggregate_row([0.4, 0.6], models, lin) - aggregate_row([0.6, 0.4], models, lin))[0]
    pw_diff = (aggregate_row([0.4, 0.6], models, pw) - aggregate_row([0.6, 0.4], models, pw))[0]
    elapsed = time.perf_counter() - start
    ok = abs(lin_diff - 1.6) <= 1e-12 and abs(pw_diff - 0.7705) <= 0.005 and elapsed < 0.1
    verdict(criteria, "1", ok,
            f"linear diff {float(lin_diff)!r}, p=5 diff {pw_diff:.5f}, {elapsed * 1e3:.2f} ms")


def test_criterion_2_mixing_bound(criteria):
    start = time.perf_counter()
    grid = list(itertools.product((2, 4, 8), (0.3, 0.6, 1.0), (1, 3)))
    violations, checked = 0, 0
    for n in range(50):
        m, density, B = grid[n % len(grid)]
        sched = generate_schedule(m, 12 * B, density, B=B, seed=1000 + n)
        res = mixing_bound_suite(sched, max_windows=10)
        checked += res.detail["checked"]
        violations += not res.passed
    elapsed = time.perf_counter() - start
    verdict(criteria, "2", violations == 0 and elapsed < 10,
            f"50 schedules, {checked} products, {violations} violations, {elapsed:.2f} s")


def _bound_runs():
    for m, p, loss in itertools.product((2, 4, 8), (1, 3, 5), ("quadratic", "logistic")):
        cfg = RunConfig(m=m, T=200, p=p, loss=loss, eta=0.05, density=0.5, alpha=0.5,
                        seed=10 * m + int(p), dim=3)
        problem = build_problem(cfg)
        metrics = run(cfg, problem=problem)
        yield cfg, problem, metrics


@pytest.fixture(scope="module")
def bound_runs():
    start = time.perf_counter()
    runs = list(_bound_runs())
    run_time = time.perf_counter() - start
    oracles = []
    for cfg, problem, _ in runs:
        oracles.append(centralized_oracle(problem.losses, problem.shards, tolerance=1e-8))
    return runs, oracles, run_time, time.perf_counter() - start


def test_criterion_3_consensus_bound(criteria, bound_runs):
    runs, _, run_time, _ = bound_runs
    bad = [(cfg.m, cfg.p, cfg.loss, chk.detail) for cfg, _, met in runs
           if not (chk := consensus_bound_check(met)).passed]
    slack = min(consensus_bound_check(met).detail["min_slack"] for _, _, met in runs)
    verdict(criteria, "3", not bad and run_time < 60,
            f"{len(runs)} runs, {len(bad)} violating, min slack {slack:.3g}, {run_time:.1f} s")


def test_criterion_4_theorem_bound(criteria, bound_runs):
    runs, oracles, _, total_time = bound_runs
    bad, ratios = [], []
    for (cfg, _, met), (x_star, f_star) in zip(runs, oracles):
        rep = theory_report(met, x_star, f_star)
        ratios.append(rep.empirical_gap / rep.theorem1_bound)
        if not rep.checks[1].passed:
            bad.append((cfg.m, cfg.p, cfg.loss))
    verdict(criteria, "4", not bad and total_time < 60,
            f"{len(runs)} runs, {len(bad)} violating, max gap/bound {max(ratios):.3g}, "
            f"{total_time:.1f} s incl. oracle")


def test_criterion_5_inequality_suites(criteria):
    start = time.perf_counter()
    convex = uniform_convexity_suite([1, 3, 5, 15], samples=10_000, seed=0)
    amgm = amgm_sweep(10_000, seed=0)
    skew = skew_sweep(10_000, seed=0)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(2, 10))
        a = rng.dirichlet(np.full(m, 50.0))
        if np.max(np.abs(a - 1 / m)) > 1 / m:
            continue
        x = rng.uniform(0.1, 10, m)
        p = rng.uniform(1, 8)
        ratio = skew_correction_check(a, x, 2 * p).excess / skew_correction_check(a, x, p).excess
        worst = max(worst, abs(ratio / 0.5 - 1))
    elapsed = time.perf_counter() - start
    ok = convex.passed and amgm.passed and skew.passed and worst <= 0.1 and elapsed < 10
    verdict(criteria, "5", ok,
            f"convexity {convex.passed}, AM-GM {amgm.passed}, skew {skew.passed}, "
            f"halving error {worst:.2e}, {elapsed:.2f} s")


def test_criterion_6_linear_reduction(criteria):
    cfg = RunConfig(m=10, T=200, p=1, eta=0.1, density=0.3, alpha=0.3, seed=6,
                    classes=4, dim=5, record_bounds=False)
    met = run(cfg)
    prob, sched = build_problem(cfg), build_schedule(cfg)
    # independent plain-averaging loop
    W = np.zeros((cfg.m, prob.dim))
    ref = [prob.global_loss(W.mean(axis=0))]
    for t in range(cfg.T):
        G = np.array([loss.gradient(shard, W[i])
                      for i, (loss, shard) in enumerate(zip(prob.losses, prob.shards))])
        W = metropolis_weights(sched.edge_sets[t], cfg.m).entries @ W - cfg.eta * G
        ref.append(prob.global_loss(W.mean(axis=0)))
    dev = max(float(np.max(np.abs(met.final_models - W))),
              float(np.max(np.abs(met.loss - np.array(ref)))))
    verdict(criteria, "6", dev <= 1e-9, f"max deviation {dev:.2e} over 200 rounds, m=10")


def test_criterion_7_unrolled_formula(criteria):
    met = run(RunConfig(m=4, T=20, p=3, density=0.5, alpha=0.5, seed=7, record_trace=True))
    t = 19
    results = {k: unrolled_state_check(met.trace, t, k) for k in (0, t // 2, t)}
    worst = max(r.device_deviation / r.tolerance for r in results.values())
    verdict(criteria, "7", all(results.values()),
            f"k in {sorted(results)} at t={t}, worst deviation/tolerance {worst:.2e}")


ETA_GRID = (0.03, 0.1, 0.3, 1.0, 3.0)


def _c8_base(seed):
    return RunConfig(m=10, T=300, density=0.2, alpha=0.1, classes=10, dim=10, per_class=50,
                     separation=3.0, seed=seed, record_bounds=False)


@pytest.mark.slow
def test_criterion_8_large_power_converges_faster(criteria):
    start = time.perf_counter()
    # tune eta for p=1 on the first seed: fewest iterations, then lowest loss
    base = _c8_base(0)
    prob = build_problem(base)
    _, f_star = centralized_oracle(prob.losses, prob.shards)
    thr = 1.05 * f_star

    def score(met):
        it = met.iterations_to(thr)
        return (it if it >= 0 else np.inf, met.min_loss)

    eta = min(ETA_GRID, key=lambda e: score(run(base.replace(eta=e, p=1), problem=prob)))
    wins, rows = 0, []
    for seed in range(5):
        cfg = _c8_base(seed).replace(eta=eta)
        prob = build_problem(cfg)
        _, f_star = centralized_oracle(prob.losses, prob.shards)
        thr = 1.05 * f_star
        r1 = run(cfg.replace(p=1), problem=prob)
        r15 = run(cfg.replace(p=15), problem=prob)
        i1, i15 = r1.iterations_to(thr), r15.iterations_to(thr)
        fewer = i15 >= 0 and (i1 < 0 or i15 < i1)
        win = fewer and r15.min_loss <= r1.min_loss
        wins += win
        rows.append(f"s{seed}: it {i1}/{i15} min {r1.min_loss:.3f}/{r15.min_loss:.3f}")
    elapsed = time.perf_counter() - start
    verdict(criteria, "8", wins >= 4 and elapsed < 300,
            f"eta={eta}, p=15 wins {wins}/5 (p=1/p=15: {'; '.join(rows)}), {elapsed:.0f} s")


def test_criterion_9_corollary(criteria):
    rate, _ = corollary_rates(16, 4, 2, "optimal")
    smaller = all(corollary_rates(m, T, r)[0] < corollary_rates(m, T, 2)[0]
                  for m in range(2, 65) for T in range(1, m) for r in (3, 5, 9, 16))
    verdict(criteria, "9", rate == 32 and smaller,
            f"rate(16,4,2) = {rate!r}; large r strictly smaller for all m > T up to 64")


@pytest.mark.xfail(strict=True, reason="at m == T every r gives rate m, so the inequality is "
                                       "equality at the boundary of the regime")
def test_criterion_9_boundary_case():
    for m in (2, 8, 32):
        assert corollary_rates(m, m, 16)[0] < corollary_rates(m, m, 2)[0]


def test_criterion_10_thread_determinism(criteria, monkeypatch):
    configs = [RunConfig(m=8, T=60, p=5, density=0.3, alpha=0.1, seed=3),
               RunConfig(m=10, T=40, p=15, density=0.2, alpha=0.1, classes=10, dim=10,
                         seed=1, batch_size=16),
               RunConfig(m=4, T=50, p=3, loss="quadratic", seed=2)]
    same = True
    for cfg in configs:
        texts = []
        for cap in ("1", "2", "8"):
            monkeypatch.setenv(THREADS_ENV, cap)
            texts.append(run(cfg).csv_text())
        same &= len(set(texts)) == 1
    verdict(criteria, "10", same, f"{len(configs)} configs x thread caps 1/2/8 byte-identical")
