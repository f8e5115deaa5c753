"""Evaluation: multi-seed ICL scoring, win-rate and few-shot adaptation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .optim import OptHyper, OptState, step
from .autodiff import Tape, grad
from .params import Params
from .prompting import CHANNEL, STANDARD, Vocab, collate, encode, prompt_for_scoring, score_channel_batch, score_standard_batch
from .taskgen import TaskSpec, TaskUniverse, rng_for, with_exemplars, ICLExample

EVAL_SEEDS = (100, 13, 21, 42, 87)


class EvalError(ValueError):
    pass


def macro_f1(predictions, golds, label_set) -> float:
    """Unweighted mean of per-class F1 over labels present in predictions or golds."""
    p = np.asarray(predictions)
    g = np.asarray(golds)
    if p.size == 0 or p.shape != g.shape:
        raise EvalError(f"need equal-length non-empty inputs, got {p.shape} and {g.shape}")
    labels = list(label_set)
    unknown = set(np.unique(np.concatenate([p, g])).tolist()) - set(labels)
    if unknown:
        raise EvalError(f"labels {sorted(unknown)} not in label_set")
    scores = []
    for c in labels:
        tp = int(np.sum((p == c) & (g == c)))
        fp = int(np.sum((p == c) & (g != c)))
        fn = int(np.sum((p != c) & (g == c)))
        if tp + fp + fn == 0:
            continue  # absent from both sides
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def accuracy(predictions, golds) -> float:
    p, g = np.asarray(predictions), np.asarray(golds)
    if p.size == 0 or p.shape != g.shape:
        raise EvalError(f"need equal-length non-empty inputs, got {p.shape} and {g.shape}")
    return float(np.mean(p == g))


@dataclass
class EvalReport:
    """One row per (task, seed).  ``score`` is the task's metric, ``accuracy`` is always kept."""
    rows: list[dict] = field(default_factory=list)

    def tasks(self) -> list[str]:
        return list(dict.fromkeys(r["task"] for r in self.rows))

    def _scores(self, task: str, key: str = "score") -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["task"] == task])

    def per_task(self, key: str = "score") -> dict[str, dict]:
        out = {}
        for t in self.tasks():
            s = self._scores(t, key)
            row = next(r for r in self.rows if r["task"] == t)
            out[t] = {"average": float(s.mean()), "worst": float(s.min()), "std": float(s.std()),
                      "seeds": len(s), "split": row["split"], "family": row["family"], "metric": row["metric"]}
        return out

    def aggregate(self, split: str | None = None, family: str | None = None, key: str = "score") -> dict:
        per = {t: v for t, v in self.per_task(key).items()
               if (split is None or v["split"] == split) and (family is None or v["family"] == family)}
        if not per:
            raise EvalError(f"no tasks for split={split} family={family}")
        return {"average": float(np.mean([v["average"] for v in per.values()])),
                "worst": float(np.mean([v["worst"] for v in per.values()])), "tasks": len(per)}

    def table(self) -> str:
        """Tab-separated records: setting, task, seed, metric, score, accuracy."""
        lines = ["setting\ttask\tseed\tmetric\tscore\taccuracy"]
        for r in self.rows:
            lines.append(f"{r['split']}\t{r['task']}\t{r['seed']}\t{r['metric']}\t{r['score']:.6f}\t{r['accuracy']:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        splits = list(dict.fromkeys(r["split"] for r in self.rows))
        out = {"all": {"score": self.aggregate(), "accuracy": self.aggregate(key="accuracy")}}
        for s in splits:
            out[s] = {"score": self.aggregate(s), "accuracy": self.aggregate(s, key="accuracy")}
        out["per_task"] = self.per_task()
        return out


def _split_of(universe: TaskUniverse, task: TaskSpec) -> str:
    for s in ("train", "test", "unseen"):
        if any(t.name == task.name for t in universe.split(s)):
            return s
    raise EvalError(f"task {task.name} not in universe")


def predict(model, params, task: TaskSpec, examples: list[ICLExample], vocab: Vocab, mode: str,
            batch_size: int = 16) -> np.ndarray:
    max_len = model.config.max_seq
    cands = list(task.label_set)
    out = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        if mode == STANDARD:
            out.append(score_standard_batch(model, params, [prompt_for_scoring(e, vocab, max_len) for e in chunk], cands))
        else:
            out.append(score_channel_batch(model, params, [(e.exemplars, e.target.x) for e in chunk], cands, vocab, max_len))
    return np.concatenate(out)


def eval_examples(universe: TaskUniverse, task: TaskSpec, seed: int, shots: int) -> list[ICLExample]:
    """Test targets with exemplars re-drawn from the task's train pool for this seed."""
    test = universe.pools[task.name]["test"]
    train = universe.pools[task.name]["train"]
    if not test:
        raise EvalError(f"task {task.name} has an empty test pool")
    rng = rng_for(seed, "eval-exemplars:" + task.name)
    out = []
    for t in test:
        take = min(shots, len(train))
        idx = rng.choice(len(train), take, replace=False)
        out.append(ICLExample(tuple(train[j] for j in idx), t))
    return out


def evaluate(model, params, universe: TaskUniverse, tasks: list[TaskSpec], prompt_mode: str = STANDARD,
             seeds=EVAL_SEEDS, vocab: Vocab | None = None, shots: int = 16, batch_size: int = 16) -> EvalReport:
    if not tasks:
        raise EvalError("no tasks to evaluate")
    vocab = vocab or Vocab()
    report = EvalReport()
    for task in tasks:
        split = _split_of(universe, task)
        for seed in seeds:
            ex = eval_examples(universe, task, seed, shots)
            pred = predict(model, params, task, ex, vocab, prompt_mode, batch_size)
            gold = np.array([e.target.y for e in ex])
            acc = accuracy(pred, gold)
            score = macro_f1(pred, gold, task.label_set) if task.metric == "macro_f1" else acc
            report.rows.append({"task": task.name, "family": task.family, "split": split, "seed": int(seed),
                                "metric": task.metric, "score": score, "accuracy": acc})
    return report


def win_rate(a: EvalReport, b: EvalReport, key: str = "score") -> float:
    """Fraction of tasks where ``a`` strictly beats ``b`` on both average and worst."""
    pa, pb = a.per_task(key), b.per_task(key)
    if set(pa) != set(pb) or not pa:
        raise EvalError(f"reports cover different settings: {sorted(set(pa) ^ set(pb))}")
    wins = sum(pa[t]["average"] > pb[t]["average"] and pa[t]["worst"] > pb[t]["worst"] for t in pa)
    return wins / len(pa)


def win_rate_from_scores(a: dict[str, tuple[float, float]], b: dict[str, tuple[float, float]]) -> float:
    """Same rule over precomputed {setting: (average, worst)} tables."""
    if set(a) != set(b) or not a:
        raise EvalError("score tables cover different settings")
    return sum(a[s][0] > b[s][0] and a[s][1] > b[s][1] for s in a) / len(a)


@dataclass(frozen=True)
class AdaptConfig:
    adapt_count: int = 16
    steps: int = 16
    lr: float = 1e-7
    opt: str = "adamw"
    weight_decay: float = 0.01
    shots: int = 16


def adaptation_examples(universe: TaskUniverse, task: TaskSpec, count: int, shots: int, seed: int) -> list[ICLExample]:
    """``count`` targets from the train pool, each with exemplars drawn from the rest of the pool."""
    pool = universe.pools[task.name]["train"]
    if len(pool) < count:
        raise EvalError(f"task {task.name} has {len(pool)} train examples, adaptation needs {count}")
    rng = rng_for(seed, "adapt:" + task.name)
    picks = rng.choice(len(pool), count, replace=False)
    return [with_exemplars(pool, int(j), shots, rng) for j in picks]


def few_shot_adapt(model, params: Params, universe: TaskUniverse, task: TaskSpec, config: AdaptConfig = AdaptConfig(),
                   prompt_mode: str = STANDARD, seeds=EVAL_SEEDS, vocab: Vocab | None = None,
                   seed: int = 100) -> tuple[Params, EvalReport, EvalReport]:
    """Fine-tune on ``adapt_count`` examples, one step each in a single pass; report before and after."""
    vocab = vocab or Vocab()
    if config.steps != config.adapt_count:
        raise EvalError("few-shot protocol is a single pass: steps must equal adapt_count")
    examples = adaptation_examples(universe, task, config.adapt_count, config.shots, seed)
    before = evaluate(model, params, universe, [task], prompt_mode, seeds, vocab, config.shots)
    hyper = OptHyper(kind=config.opt, lr=config.lr, weight_decay=config.weight_decay)
    state = OptState()
    cur = params
    for ex in examples:
        b = collate([encode(ex, vocab, model.config.max_seq, prompt_mode)], vocab.pad)
        tape = Tape(retain_graph=False)
        w = {k: tape.leaf(v) for k, v in cur.items()}
        g = grad(model.loss(w, b.tokens, b.loss_mask), w)
        cur = step(state, cur, g, hyper)
    after = evaluate(model, cur, universe, [task], prompt_mode, seeds, vocab, config.shots)
    return cur, before, after


def write_report(report: EvalReport, table_path, summary_path) -> None:
    with open(table_path, "w") as f:
        f.write(report.table())
    with open(summary_path, "w") as f:
        f.write(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
