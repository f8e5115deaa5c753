"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

The end-to-end and few-shot criteria share one trained model (module fixture),
so this file takes several minutes.
"""

import time

import pytest

from mamlicl import verify
from mamlicl.config import ExperimentConfig
from mamlicl.experiments import few_shot_unseen, run_end_to_end

RESULTS = []


def report(name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print("\n" + line, flush=True)
    assert passed, line


@pytest.fixture(scope="module", autouse=True)
def summary():
    yield
    print("\nacceptance summary")
    for line in RESULTS:
        print("  " + line)


def run_check(fn):
    c = fn()
    report(c.name, c.passed, c.detail)


def test_gradient_correctness():
    run_check(verify.check_first_order)


def test_second_order_correctness():
    run_check(verify.check_second_order)


def test_analytic_bilevel_oracle():
    run_check(verify.check_quadratic)


def test_first_order_gap_scaling():
    run_check(verify.check_gap_scaling)


def test_meta_update_bookkeeping():
    run_check(verify.check_bookkeeping)


def test_shared_moment_equivalence():
    run_check(verify.check_shared_moments)


def test_metric_oracle():
    run_check(verify.check_macro_f1)


def test_memory_proportionality():
    run_check(verify.check_memory)


@pytest.fixture(scope="module")
def e2e():
    t0 = time.perf_counter()
    res = run_end_to_end(ExperimentConfig())
    return res, time.perf_counter() - t0


def test_end_to_end_learning(e2e):
    res, seconds = e2e
    raw, maml, metaicl = res.unseen("raw"), res.unseen("maml"), res.unseen("metaicl")
    lm = res.label_mapping("maml")
    ok = maml - raw >= 0.10 and lm >= 0.75 and metaicl > raw and seconds < 1800
    report("end-to-end learning", ok,
           f"unseen acc raw {raw:.3f} maml {maml:.3f} (+{100 * (maml - raw):.1f} pts, need >= 10) "
           f"metaicl {metaicl:.3f} (need > raw); maml label-mapping acc {lm:.3f} (need >= 0.75); "
           f"{seconds:.0f}s (< 1800s)")


def test_few_shot_adaptation_protocol(e2e):
    res, _ = e2e
    cfg = ExperimentConfig()
    params = res.params["maml"]
    b0, a0, same = few_shot_unseen(cfg, params, lr=0.0)
    b, a, _ = few_shot_unseen(cfg, params)
    ok = same and a0 == b0 and b - a <= 0.01
    report("few-shot adaptation protocol", ok,
           f"lr=0 before {b0:.4f} after {a0:.4f} identical={same}; default lr before {b:.4f} after {a:.4f} "
           f"(drop {100 * (b - a):.2f} pts, need <= 1)")
