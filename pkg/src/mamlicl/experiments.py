"""End-to-end experiment: Raw LM vs MetaICL vs MAML on held-out tasks, then few-shot adaptation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, with_overrides
from .evalharness import EvalReport, evaluate, few_shot_adapt, write_report
from .metatrain import run_meta_training
from .prompting import Vocab
from .taskgen import LABEL_MAPPING, make_task_universe
from .tinylm import TinyLM, init_model


@dataclass
class EndToEnd:
    reports: dict[str, EvalReport] = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def unseen(self, name: str) -> float:
        return self.reports[name].aggregate("unseen", key="accuracy")["average"]

    def label_mapping(self, name: str) -> float:
        rep = self.reports[name]
        per = rep.per_task("accuracy")
        vals = [v["average"] for v in per.values() if v["family"] == LABEL_MAPPING]
        return float(np.mean(vals))

    def lines(self) -> list[str]:
        out = []
        for name, rep in self.reports.items():
            out.append(f"{name:8s} unseen acc {self.unseen(name):.4f}  label-mapping acc {self.label_mapping(name):.4f}"
                       f"  held-out score {rep.aggregate()['average']:.4f}  ({self.seconds.get(name, 0.0):.0f}s)")
        return out


def run_end_to_end(cfg: ExperimentConfig = ExperimentConfig(), out: Path | None = None, log=print) -> EndToEnd:
    """Train MAML and MetaICL from the same init and score both against the untrained model."""
    vocab = Vocab(size=cfg.model.vocab_size)
    universe = make_task_universe(cfg.tasks, cfg.run.universe_seed, vocab)
    model = TinyLM(cfg.model)
    init = init_model(cfg.model, cfg.run.seed)
    tasks = universe.test + universe.unseen
    res = EndToEnd()
    for name, mode in (("raw", None), ("metaicl", "metaicl"), ("maml", "maml")):
        t0 = time.perf_counter()
        params = init
        if mode is not None:
            meta = with_overrides(cfg, meta={"mode": mode}).meta
            params, tlog, _ = run_meta_training(meta, universe, model, init, cfg.run.seed, vocab)
            log(f"{name}: {tlog.meta_updates} updates, final loss {tlog.records[-1]['loss']:.4f}")
        rep = evaluate(model, params, universe, tasks, cfg.eval.prompt_mode, cfg.eval.seeds, vocab, cfg.eval.shots,
                       cfg.eval.batch_size)
        res.seconds[name] = time.perf_counter() - t0
        res.reports[name] = rep
        res.params[name] = params
        log(res.lines()[-1])
        if out is not None:
            Path(out).mkdir(parents=True, exist_ok=True)
            write_report(rep, Path(out) / f"{name}_report.tsv", Path(out) / f"{name}_summary.json")
    return res


def few_shot_unseen(cfg: ExperimentConfig, params, lr: float | None = None) -> tuple[float, float, bool]:
    """Average unseen-domain score before and after adaptation, and whether every task's rows matched."""
    vocab = Vocab(size=cfg.model.vocab_size)
    universe = make_task_universe(cfg.tasks, cfg.run.universe_seed, vocab)
    adapt = cfg.adapt if lr is None else with_overrides(cfg, adapt={"lr": lr}).adapt
    model = TinyLM(cfg.model)
    before, after, same = [], [], True
    for task in universe.unseen:
        _, b, a = few_shot_adapt(model, params, universe, task, adapt, cfg.eval.prompt_mode, cfg.eval.seeds, vocab,
                                 cfg.run.seed)
        before.append(b.aggregate()["average"])
        after.append(a.aggregate()["average"])
        same &= [r["score"] for r in b.rows] == [r["score"] for r in a.rows]
    return float(np.mean(before)), float(np.mean(after)), same
