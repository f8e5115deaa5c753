"""Training loops: MetaICL multi-task steps, first-order MAML and second-order MAML.

The second-order meta-step keeps one tape: θ is watched, every inner step
takes its gradient with ``create_graph=True``, and a single backward pass of
the mean query loss gives the meta-gradient through all n adaptations.
"""

from __future__ import annotations

import json
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .optim import OptHyper, OptimizerPair, OptState, step
from .params import Params
from .prompting import MODES, Vocab, collate, encode
from .taskgen import TaskUniverse, rng_for, sample_task_batch

MODES_TRAIN = ("metaicl", "fomaml", "maml")
LossFn = Callable[[dict, object], Tensor]


class TrainError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    mode: str = "maml"
    n: int = 1
    k: int = 1
    steps: int = 2000
    batch_size: int = 4
    prompt_mode: str = "standard"
    shots: int = 16
    permute_labels: bool = True
    inner_opt: str = "sgd"
    inner_lr: float = 1e-3
    outer_opt: str = "adamw"
    outer_lr: float = 1e-3
    sharing: str = "none"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    correction: str = "standard"
    max_grad_norm: float = 0.0
    checkpoint_every: int = 0
    max_bad_steps: int = 10

    def __post_init__(self):
        if self.mode not in MODES_TRAIN:
            raise TrainError(f"meta.mode must be one of {MODES_TRAIN}, got {self.mode!r}")
        if self.prompt_mode not in MODES:
            raise TrainError(f"meta.prompt_mode must be one of {MODES}, got {self.prompt_mode!r}")
        for name in ("n", "k", "batch_size"):
            if getattr(self, name) < 1:
                raise TrainError(f"meta.{name} must be at least 1")
        if self.steps < 0 or self.shots < 0 or self.checkpoint_every < 0:
            raise TrainError("meta.steps, meta.shots and meta.checkpoint_every must be non-negative")
        self.optimizers()  # validates optimizer fields

    @property
    def batches_per_update(self) -> int:
        return 1 if self.mode == "metaicl" else 2 * self.k * self.n

    def hyper(self, kind: str, lr: float) -> OptHyper:
        return OptHyper(kind=kind, lr=lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                        weight_decay=self.weight_decay, correction=self.correction,
                        max_grad_norm=self.max_grad_norm)

    def optimizers(self) -> OptimizerPair:
        inner = self.hyper(self.inner_opt, self.inner_lr)
        outer = self.hyper(self.outer_opt, self.outer_lr)
        return OptimizerPair(inner, outer, self.sharing)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    meta_updates: int = 0
    batches_consumed: int = 0
    skipped: int = 0
    wall_time: float = 0.0

    def lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _watch(tape: Tape, params) -> dict:
    # leaf views share θ's buffers, so they are not a new parameter set
    return {k: tape.leaf(v) for k, v in params.items()}


def _mean(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total / float(len(losses))


def metaicl_train_step(params: Params, state: OptState, batch, hyper: OptHyper, loss_fn: LossFn):
    """One plain gradient step on the mean masked loss of ``batch``."""
    tape = Tape(retain_graph=False)
    w = _watch(tape, params)
    loss = loss_fn(w, batch)
    g = ad.grad(loss, w)
    return step(state, params, g, hyper), state, float(loss.data)


def maml_inner_adapt(params, support: Sequence[Sequence[object]], opt: OptimizerPair, loss_fn: LossFn,
                     track_graph: bool) -> list[Params]:
    """k sequential inner steps per task, one support batch each; θ is left untouched.

    With ``track_graph`` the inner gradients are tape nodes, so each θᵢ stays
    differentiable with respect to ``params`` (which must then be tape leaves).
    """
    adapted = []
    for batches in support:
        opt.begin_adaptation()
        cur = params
        for batch in batches:
            if track_graph:
                loss = loss_fn(cur, batch)
                g = ad.grad(loss, cur, create_graph=True)
            else:
                tape = Tape(retain_graph=False)
                w = _watch(tape, cur)
                g = ad.grad(loss_fn(w, batch), w)
            cur = opt.inner_step(cur, g)
        adapted.append(cur if isinstance(cur, Params) else Params(cur))
    return adapted


def query_loss(adapted: Sequence, query: Sequence[Sequence[object]], loss_fn: LossFn) -> Tensor:
    """(1/n) Σᵢ (1/k) Σⱼ ℓ(θᵢ, Qᵢⱼ): task i's adapted parameters on task i's query batches."""
    if len(adapted) != len(query):
        raise TrainError(f"{len(adapted)} adapted parameter sets but {len(query)} query task sets")
    return _mean([_mean([loss_fn(th, b) for b in batches]) for th, batches in zip(adapted, query)])


def meta_gradient(params, support, query, opt: OptimizerPair, loss_fn: LossFn, order: str = "second"):
    """Meta-gradient and mean query loss.  Returns (gradients, loss, adapted)."""
    if order not in ("first", "second"):
        raise TrainError(f"order must be 'first' or 'second', got {order!r}")
    if len(support) != len(query):
        raise TrainError(f"{len(support)} support task sets but {len(query)} query task sets")
    if order == "second":
        tape = Tape()
        theta = _watch(tape, params)
        adapted = maml_inner_adapt(theta, support, opt, loss_fn, track_graph=True)
        loss = query_loss(adapted, query, loss_fn)
        return ad.grad(loss, theta), float(loss.data), adapted
    adapted = maml_inner_adapt(params, support, opt, loss_fn, track_graph=False)
    # inner dependence dropped: differentiate each task's query loss at θᵢ itself
    total, losses = None, []
    for th, batches in zip(adapted, query):
        tape = Tape(retain_graph=False)
        w = _watch(tape, th)
        loss = _mean([loss_fn(w, b) for b in batches])
        g = ad.grad(loss, w)
        losses.append(float(loss.data))
        total = {k: v.data.copy() for k, v in g.items()} if total is None else {k: total[k] + g[k].data for k in total}
    n = float(len(adapted))
    grads = ad.Gradients({k: Tensor(v / n) for k, v in total.items()})
    return grads, float(np.mean(losses)), adapted


def maml_meta_update(params: Params, support, query, opt: OptimizerPair, loss_fn: LossFn,
                     order: str = "second") -> tuple[Params, float]:
    """One meta-update of θ from n tasks' support and query batches."""
    grads, loss, adapted = meta_gradient(params, support, query, opt, loss_fn, order)
    # θ, the n adapted sets and the new θ are alive together here: n + 2 sets
    new = opt.outer_step(params, {k: g.detach() for k, g in grads.items()})
    del adapted
    return new, loss


class BatchSource:
    """Turns a task universe into encoded training batches."""

    def __init__(self, universe: TaskUniverse, vocab: Vocab, max_len: int, config: MetaConfig, seed: int):
        self.universe, self.vocab, self.max_len = universe, vocab, max_len
        self.config, self.seed = config, seed

    def encode(self, examples):
        mode = self.config.prompt_mode
        return collate([encode(e, self.vocab, self.max_len, mode) for e in examples], self.vocab.pad)

    def draw(self, step_index: int):
        cfg = self.config
        rng = rng_for(self.seed, "train-batch", step_index)
        n = 1 if cfg.mode == "metaicl" else cfg.n
        k = 1 if cfg.mode == "metaicl" else cfg.k
        tb = sample_task_batch(self.universe, "train", n, k, cfg.batch_size, rng, cfg.shots, cfg.permute_labels)
        support = [[self.encode(b) for b in task] for task in tb.support]
        query = [[self.encode(b) for b in task] for task in tb.query]
        return tb, support, query


def run_meta_training(config: MetaConfig, universe: TaskUniverse, model, params: Params, seed: int,
                      vocab: Vocab | None = None, on_checkpoint=None, on_record=None) -> tuple[Params, TrainLog, OptimizerPair]:
    """N steps of the configured loop.  Deterministic given ``seed``.

    metaicl consumes one task batch per step (the query batch of the draw);
    maml/fomaml consume 2kn.  Non-finite steps are skipped and logged; more
    than ``max_bad_steps`` in a row abort training.
    """
    vocab = vocab or Vocab()
    src = BatchSource(universe, vocab, model.config.max_seq, config, seed)
    opt = config.optimizers()
    loss_fn = lambda p, b: model.loss(p, b.tokens, b.loss_mask)
    log = TrainLog()
    start = time.perf_counter()
    bad = 0
    for i in range(config.steps):
        tb, support, query = src.draw(i)
        try:
            if config.mode == "metaicl":
                params, _, loss = metaicl_train_step(params, opt.outer_state, query[0][0], opt.outer_hyper, loss_fn)
                used = 1
            else:
                order = "second" if config.mode == "maml" else "first"
                params, loss = maml_meta_update(params, support, query, opt, loss_fn, order)
                used = 2 * config.k * config.n
            if not math.isfinite(loss):
                raise ad.NonFiniteError("non-finite loss")
        except ad.NonFiniteError as err:
            bad += 1
            log.skipped += 1
            rec = {"step": i, "mode": config.mode, "skipped": str(err)}
            log.records.append(rec)
            if bad > config.max_bad_steps:
                raise TrainingDiverged(f"{bad} consecutive non-finite steps, last at step {i}") from err
            continue
        bad = 0
        log.meta_updates += 1
        log.batches_consumed += used
        rec = {"step": i, "mode": config.mode, "loss": loss, "meta_updates": log.meta_updates,
               "batches": log.batches_consumed, "elapsed": round(time.perf_counter() - start, 3)}
        log.records.append(rec)
        if on_record:
            on_record(rec)
        if on_checkpoint and config.checkpoint_every and (i + 1) % config.checkpoint_every == 0:
            on_checkpoint(i + 1, params, opt)
    log.wall_time = time.perf_counter() - start
    return params, log, opt
