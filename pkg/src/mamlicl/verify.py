"""Oracle suite: each check returns a ``Check`` with the measured value and a verdict.

Used by ``mamlicl verify`` and by the acceptance tests, which re-assert the
same tolerances on the returned values.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import oracles
from .evalharness import macro_f1
from .metatrain import MetaConfig, maml_inner_adapt, maml_meta_update, run_meta_training
from .optim import OptHyper, OptimizerPair, OptState, adamw_step
from .params import Params, audit_params
from .taskgen import UniverseConfig, make_task_universe
from .tinylm import ModelConfig, TinyLM, init_model


@dataclass
class Check:
    name: str
    passed: bool
    value: object
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def check_first_order() -> Check:
    err, dt = _timed(oracles.first_order_error)
    return Check("first-order gradient vs central differences", err < 1e-6 and dt < 30, err,
                 f"max rel err {err:.2e} (< 1e-6), {dt:.1f}s (< 30s)", dt)


def check_second_order() -> Check:
    def run():
        return {(n, k): oracles.second_order_error(0, n, k) for n in (1, 2) for k in (1, 2)}
    errs, dt = _timed(run)
    worst = max(errs.values())
    cells = ", ".join(f"n={n} k={k}: {e:.1e}" for (n, k), e in errs.items())
    return Check("second-order meta-gradient vs finite differences", worst < 1e-4 and dt < 120, errs,
                 f"{cells} (< 1e-4), {dt:.1f}s (< 120s)", dt)


def check_quadratic() -> Check:
    (second, first, _, _), dt = _timed(oracles.quadratic_meta_gradients)
    ok = abs(second - 0.64) <= 1e-8 and abs(first - 0.8) <= 1e-8
    return Check("quadratic bi-level oracle", ok, (second, first),
                 f"second {second!r} (0.64), first {first!r} (0.8), tol 1e-8", dt)


def check_gap_scaling(alphas=(1e-2, 5e-3, 2.5e-3)) -> Check:
    gaps, dt = _timed(lambda: [oracles.maml_fomaml_gap(a) for a in alphas])
    ratios = [gaps[i] / gaps[i + 1] for i in range(len(gaps) - 1)]
    ok = all(1.7 <= r <= 2.3 for r in ratios)
    return Check("maml-fomaml gap halves with alpha", ok, ratios,
                 "gaps " + ", ".join(f"{g:.3e}" for g in gaps) + "; ratios " + ", ".join(f"{r:.3f}" for r in ratios)
                 + " (in [1.7, 2.3])", dt)


def tiny_training_setup(shots: int = 2):
    """A small model and the default task universe, sized for quick training-loop checks."""
    config = ModelConfig(d_model=8, n_layers=1, n_heads=2, max_seq=32, mlp_ratio=2)
    universe = make_task_universe(UniverseConfig(), 0)
    return config, TinyLM(config), universe


def check_bookkeeping(steps: int = 2) -> Check:
    def run():
        config, model, universe = tiny_training_setup()
        out = {}
        for n in (1, 4):
            meta = MetaConfig(mode="maml", n=n, k=1, steps=steps, batch_size=2, shots=2)
            _, log, _ = run_meta_training(meta, universe, model, init_model(config), 100)
            out[f"MAML-2-{n}"] = (log.batches_consumed / log.meta_updates, log.meta_updates)
        return out
    out, dt = _timed(run)
    ok = out["MAML-2-1"][0] == 2 and out["MAML-2-4"][0] == 8
    return Check("batches per meta-update", ok, out,
                 ", ".join(f"{k}: {v[0]:g} batches/update over {v[1]} updates" for k, v in out.items())
                 + " (2 and 8)", dt)


def _moments(state: OptState):
    return ({k: a.copy() for k, a in state.m.items()}, {k: a.copy() for k, a in state.v.items()}, state.t)


def _same(a, b) -> bool:
    return a[2] == b[2] and all(
        set(x) == set(y) and all(np.array_equal(x[k], y[k]) for k in x) for x, y in ((a[0], b[0]), (a[1], b[1])))


def shared_trace_matches(steps: int = 10, seed: int = 0) -> bool:
    """Alternating inner/outer steps on a shared store versus one optimizer fed the same gradients."""
    rng = np.random.default_rng(seed)
    shapes = {"a": (3, 4), "b": (5,)}
    params = Params.from_arrays({k: rng.standard_normal(s) for k, s in shapes.items()})
    grads = [{k: rng.standard_normal(s) for k, s in shapes.items()} for _ in range(steps)]
    inner, outer = OptHyper(lr=1e-2), OptHyper(lr=1e-3)
    pair = OptimizerPair(inner, outer, "shared")
    single = OptState()
    p1 = p2 = params
    for i, g in enumerate(grads):
        hyper = inner if i % 2 == 0 else outer
        p1 = pair.inner_step(p1, g) if i % 2 == 0 else pair.outer_step(p1, g)
        p2, _ = adamw_step(single, p2, g, hyper)
        if not _same(_moments(pair.inner_state), _moments(single)):
            return False
        if any(not np.array_equal(p1[k].data, p2[k].data) for k in p1):
            return False
    return pair.inner_state.t == steps


class _WatchedPair(OptimizerPair):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.fresh, self.starts = False, []

    def begin_adaptation(self):
        super().begin_adaptation()
        self.fresh = True

    def inner_step(self, params, grads):
        if self.fresh:
            self.starts.append(self.inner_state.is_zero() and self.inner_state.t == 0)
            self.fresh = False
        return super().inner_step(params, grads)


def none_mode_resets(n: int = 3, k: int = 2, meta_steps: int = 2) -> bool:
    """With sharing=none every adaptation phase starts from zero inner moments."""
    model, params, support, query, loss_fn = oracles.tiny_meta_problem(0, n, k)
    pair = _WatchedPair(OptHyper(lr=1e-2), OptHyper(lr=1e-3), "none")
    for _ in range(meta_steps):
        params, _ = maml_meta_update(params, support, query, pair, loss_fn, "first")
    return len(pair.starts) == n * meta_steps and all(pair.starts)


def check_shared_moments() -> Check:
    (shared, none), dt = _timed(lambda: (shared_trace_matches(), none_mode_resets()))
    return Check("shared-moment equivalence", shared and none, (shared, none),
                 f"shared trace bit-identical: {shared}; none-mode inner moments zero at each adaptation: {none}", dt)


def alpha_zero_matches_metaicl(steps: int = 3) -> bool:
    """MAML with a null SGD inner step traces MetaICL on the query stream bit for bit."""
    config, model, universe = tiny_training_setup()
    common = dict(n=1, k=1, steps=steps, batch_size=2, shots=2, inner_opt="sgd", inner_lr=0.0,
                  outer_opt="adamw", outer_lr=1e-3, sharing="none")
    p_maml, log_maml, _ = run_meta_training(MetaConfig(mode="maml", **common), universe, model, init_model(config), 100)
    p_icl, log_icl, _ = run_meta_training(MetaConfig(mode="metaicl", **common), universe, model, init_model(config), 100)
    losses = [r["loss"] for r in log_maml.records] == [r["loss"] for r in log_icl.records]
    return losses and p_maml.digest() == p_icl.digest()


def brute_macro_f1(preds, golds, labels) -> float:
    """Per-class F1 from an explicit confusion matrix, averaged over classes seen on either side."""
    idx = {c: i for i, c in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, g in zip(preds, golds):
        cm[idx[g], idx[p]] += 1
    scores = []
    for i in range(len(labels)):
        tp = cm[i, i]
        fp = cm[:, i].sum() - tp
        fn = cm[i, :].sum() - tp
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def check_macro_f1(cases: int = 1000, seed: int = 0) -> Check:
    def run():
        rng = np.random.default_rng(seed)
        mismatches = 0
        for _ in range(cases):
            c = int(rng.integers(2, 6))
            labels = tuple(int(v) for v in rng.choice(50, c, replace=False))
            size = int(rng.integers(1, 30))
            preds = [labels[i] for i in rng.integers(c, size=size)]
            golds = [labels[i] for i in rng.integers(c, size=size)]
            mismatches += macro_f1(preds, golds, labels) != brute_macro_f1(preds, golds, labels)
        return mismatches, macro_f1([0, 0, 1], [0, 1, 1], (0, 1))
    (mismatches, worked), dt = _timed(run)
    ok = mismatches == 0 and abs(worked - 2 / 3) < 1e-15
    return Check("macro-F1 vs brute-force confusion matrix", ok, (mismatches, worked),
                 f"{mismatches} mismatches in {cases} cases; worked example {worked!r} (2/3)", dt)


def audit_peak(n: int, k: int = 1, order: str = "second") -> int:
    """Peak live parameter sets over one MAML meta-step with n tasks."""
    _, params, support, query, loss_fn = oracles.tiny_meta_problem(0, n, k)
    pair = OptimizerPair(OptHyper("sgd", lr=0.1, weight_decay=0.0), OptHyper(lr=1e-3))
    with audit_params() as audit:
        theta = Params(params)
        new, _ = maml_meta_update(theta, support, query, pair, loss_fn, order)
        del new
    return audit.peak


def check_memory(ns=(1, 4)) -> Check:
    peaks, dt = _timed(lambda: {n: audit_peak(n) for n in ns})
    ok = all(p == n + 2 for n, p in peaks.items())
    return Check("live parameter sets per meta-step", ok, peaks,
                 ", ".join(f"n={n}: peak {p} (want {n + 2})" for n, p in peaks.items()), dt)


def check_alpha_zero() -> Check:
    ok, dt = _timed(alpha_zero_matches_metaicl)
    return Check("alpha=0 MAML reduces to MetaICL", ok, ok, f"losses and parameters bit-identical: {ok}", dt)


CHECKS: tuple[Callable[[], Check], ...] = (
    check_first_order, check_second_order, check_quadratic, check_gap_scaling, check_bookkeeping,
    check_shared_moments, check_alpha_zero, check_macro_f1, check_memory,
)


def run_all(emit=print) -> bool:
    ok = True
    for fn in CHECKS:
        c = fn()
        emit(c.line())
        ok &= c.passed
    return ok
