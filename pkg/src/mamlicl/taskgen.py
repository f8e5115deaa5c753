"""Synthetic in-context-learning tasks.

Three families, each owning named domains that are disjoint ranges of the
content vocabulary.  A domain held out of training gives the unseen split.

label-mapping  one content token -> class; a random partition of the domain's words
key-value      one content token -> label; a bijection from keys onto labels
linear-sign    three content tokens -> sign of the sum of per-token weights in {-1, +1}

Every family needs the exemplars: the target alone carries no information
about which partition, table or weight vector the task uses.
"""

from __future__ import annotations

import itertools
import json
import zlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

LABEL_MAPPING = "label-mapping"
KEY_VALUE = "key-value"
LINEAR_SIGN = "linear-sign"
FAMILIES = (LABEL_MAPPING, KEY_VALUE, LINEAR_SIGN)
METRIC = {LABEL_MAPPING: "macro_f1", KEY_VALUE: "accuracy", LINEAR_SIGN: "macro_f1"}


class TaskError(ValueError):
    pass


def rng_for(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent stream keyed by (seed, purpose, index)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode()), int(index)])


@dataclass(frozen=True)
class Example:
    x: tuple[int, ...]
    y: int


@dataclass(frozen=True)
class ICLExample:
    exemplars: tuple[Example, ...]
    target: Example


@dataclass(frozen=True)
class Domain:
    family: str
    name: str
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class TaskSpec:
    name: str
    family: str
    domain: str
    task_seed: int
    label_set: tuple[int, ...]
    # label-mapping and key-value: token -> label; linear-sign: token -> weight
    table: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.label_set or len(set(self.label_set)) != len(self.label_set):
            raise TaskError(f"{self.name}: label_set must be non-empty and duplicate-free")

    @property
    def metric(self) -> str:
        return METRIC[self.family]

    @property
    def x_len(self) -> int:
        return 3 if self.family == LINEAR_SIGN else 1

    def label_of(self, x: tuple[int, ...]) -> int:
        t = dict(self.table)
        if self.family == LINEAR_SIGN:
            return self.label_set[0] if sum(t[tok] for tok in x) > 0 else self.label_set[1]
        return t[x[0]]

    def sample(self, rng: np.random.Generator, count: int) -> list[Example]:
        """Examples with a uniform label marginal: draw the label, then an input carrying it."""
        out = []
        if self.family == LINEAR_SIGN:
            toks = np.array([k for k, _ in self.table])
            w = np.array([v for _, v in self.table])
            for _ in range(count):
                want = self.label_set[rng.integers(len(self.label_set))]
                while True:
                    pick = rng.integers(len(toks), size=3)
                    x = tuple(int(v) for v in toks[pick])
                    if (w[pick].sum() > 0) == (want == self.label_set[0]):
                        break
                out.append(Example(x, int(want)))
            return out
        by_label: dict[int, list[int]] = {}
        for tok, lab in self.table:
            by_label.setdefault(lab, []).append(tok)
        for _ in range(count):
            lab = self.label_set[rng.integers(len(self.label_set))]
            words = by_label[lab]
            out.append(Example((int(words[rng.integers(len(words))]),), int(lab)))
        return out

    def record(self) -> dict:
        return {"name": self.name, "family": self.family, "domain": self.domain, "task_seed": self.task_seed}


@dataclass(frozen=True)
class UniverseConfig:
    n_train: int = 20
    n_test: int = 6
    n_unseen: int = 2
    train_pool: int = 128
    test_pool: int = 64
    mapping_labels: tuple[int, ...] = (2, 3, 4)  # label-set sizes drawn per label-mapping task
    domains_per_family: tuple[int, int, int] = (3, 3, 2)
    domain_sizes: tuple[int, int, int] = (8, 6, 5)
    holdout_families: tuple[str, ...] = (LABEL_MAPPING, KEY_VALUE)

    def __post_init__(self):
        for name in ("n_train", "n_test", "n_unseen", "train_pool", "test_pool"):
            if getattr(self, name) < 1:
                raise TaskError(f"tasks.{name} must be at least 1")
        if min(self.domains_per_family) < 2:
            raise TaskError("tasks.domains_per_family: every family needs at least 2 domains")
        for fam in self.holdout_families:
            if fam not in FAMILIES:
                raise TaskError(f"tasks.holdout_families: unknown family {fam!r}")


@dataclass
class TaskUniverse:
    train: list[TaskSpec]
    test: list[TaskSpec]
    unseen: list[TaskSpec]
    pools: dict[str, dict[str, list[Example]]] = field(default_factory=dict)
    domains: list[Domain] = field(default_factory=list)

    def split(self, name: str) -> list[TaskSpec]:
        if name not in ("train", "test", "unseen"):
            raise TaskError(f"unknown split {name!r}")
        return getattr(self, name)

    def task(self, name: str) -> TaskSpec:
        for t in self.train + self.test + self.unseen:
            if t.name == name:
                return t
        raise TaskError(f"unknown task {name!r}")

    def dump(self) -> str:
        """One JSON record per task: family, domain, task seed, split."""
        lines = []
        for split in ("train", "test", "unseen"):
            for t in self.split(split):
                lines.append(json.dumps({**t.record(), "split": split}, sort_keys=True))
        return "\n".join(lines) + "\n"


def build_domains(config: UniverseConfig, vocab) -> list[Domain]:
    content = list(vocab.content)
    need = sum(n * s for n, s in zip(config.domains_per_family, config.domain_sizes))
    if need > len(content):
        raise TaskError(f"domains need {need} content tokens, vocabulary has {len(content)}")
    out, pos = [], 0
    for fam, n, size in zip(FAMILIES, config.domains_per_family, config.domain_sizes):
        for i in range(n):
            out.append(Domain(fam, f"{fam}/{chr(ord('a') + i)}", tuple(content[pos:pos + size])))
            pos += size
    return out


def _make_task(family: str, domain: Domain, task_seed: int, labels: tuple[int, ...],
               config: UniverseConfig, name: str) -> TaskSpec:
    rng = rng_for(task_seed, "task-params")
    toks = domain.tokens
    if family == LABEL_MAPPING:
        size = int(config.mapping_labels[rng.integers(len(config.mapping_labels))])
        if size > min(len(labels), len(toks)):
            raise TaskError(f"{name}: label-set size {size} exceeds available labels or words")
        label_set = tuple(sorted(int(v) for v in rng.choice(labels, size, replace=False)))
        # every class gets at least one word
        assign = np.concatenate([np.arange(size), rng.integers(size, size=len(toks) - size)])
        rng.shuffle(assign)
        table = tuple((int(t), label_set[a]) for t, a in zip(toks, assign))
    elif family == KEY_VALUE:
        if len(toks) > len(labels):
            raise TaskError(f"{name}: {len(toks)} keys need as many labels, vocabulary has {len(labels)}")
        vals = [int(v) for v in rng.choice(labels, len(toks), replace=False)]
        label_set = tuple(sorted(vals))
        table = tuple((int(t), v) for t, v in zip(toks, vals))
    else:
        label_set = tuple(int(v) for v in rng.choice(labels, 2, replace=False))
        while True:
            w = rng.choice([-1, 1], size=len(toks))
            if (w > 0).any() and (w < 0).any():
                break
        table = tuple((int(t), int(v)) for t, v in zip(toks, w))
    return TaskSpec(name, family, domain.name, task_seed, label_set, table)


def make_task_universe(config: UniverseConfig, seed: int, vocab=None) -> TaskUniverse:
    """Deterministic universe; train and test share domains, unseen tasks use held-out domains."""
    if vocab is None:
        from .prompting import Vocab
        vocab = Vocab()
    domains = build_domains(config, vocab)
    by_family = {f: [d for d in domains if d.family == f] for f in FAMILIES}
    held = {f: by_family[f][-1] for f in config.holdout_families}
    seen = {f: [d for d in by_family[f] if d is not held.get(f)] for f in FAMILIES}
    if config.n_unseen and not held:
        raise TaskError("unseen tasks requested but no family holds out a domain")
    labels = tuple(vocab.labels)

    counter = itertools.count()
    identities: set = set()

    def draw(split: str, count: int, families: list[str], pick_domain) -> list[TaskSpec]:
        tasks = []
        for i in range(count):
            fam = families[i % len(families)]
            dom = pick_domain(fam, i // len(families))
            for attempt in range(1000):
                idx = next(counter)
                task_seed = int(rng_for(seed, "task-seed", idx).integers(2 ** 31))
                t = _make_task(fam, dom, task_seed, labels, config, f"{split}-{i:02d}-{fam}")
                key = (t.family, t.domain, t.label_set, t.table)
                if key not in identities:
                    identities.add(key)
                    tasks.append(t)
                    break
            else:
                raise TaskError(f"could not draw {count} distinct {split} tasks")
        return tasks

    fams = list(FAMILIES)
    train = draw("train", config.n_train, fams, lambda f, j: seen[f][j % len(seen[f])])
    test = draw("test", config.n_test, fams, lambda f, j: seen[f][(j + 1) % len(seen[f])])
    hold = [f for f in FAMILIES if f in held]
    unseen = draw("unseen", config.n_unseen, hold, lambda f, j: held[f])

    pools = {}
    for i, t in enumerate(train + test + unseen):
        pools[t.name] = {"train": t.sample(rng_for(seed, "pool-train", i), config.train_pool),
                         "test": t.sample(rng_for(seed, "pool-test", i), config.test_pool)}
    return TaskUniverse(train, test, unseen, pools, domains)


@dataclass
class TaskBatch:
    tasks: list[TaskSpec]
    support: list[list[list[ICLExample]]]  # [task][batch][example]
    query: list[list[list[ICLExample]]]

    @property
    def n_batches(self) -> int:
        return sum(len(s) for s in self.support) + sum(len(q) for q in self.query)


def with_exemplars(pool: list[Example], target_idx: int, shots: int, rng) -> ICLExample:
    """Target ``pool[target_idx]`` with up to ``shots`` other pool entries as exemplars."""
    others = np.delete(np.arange(len(pool)), target_idx)
    take = min(shots, others.size)
    chosen = rng.choice(others, take, replace=False) if take else []
    return ICLExample(tuple(pool[j] for j in chosen), pool[target_idx])


def relabel(ex: ICLExample, task: TaskSpec, rng: np.random.Generator) -> ICLExample:
    """Apply one random permutation of the task's label set to a whole prompt."""
    perm = dict(zip(task.label_set, (int(v) for v in rng.permutation(task.label_set))))
    return ICLExample(tuple(Example(e.x, perm[e.y]) for e in ex.exemplars), Example(ex.target.x, perm[ex.target.y]))


def sample_task_batch(universe: TaskUniverse, split: str, n: int, k: int, batch_size: int,
                      rng: np.random.Generator, shots: int = 16, permute_labels: bool = False) -> TaskBatch:
    """n tasks, each with k support and k query batches of ``batch_size`` examples.

    Support and query targets are distinct pool entries; exemplars come from
    the same task's pool and never include the example's own target entry.
    With ``permute_labels`` each prompt renames the task's labels by a fresh
    permutation, so the answer is only recoverable from the exemplars.
    """
    if n < 1 or k < 1 or batch_size < 1:
        raise TaskError("n, k and batch_size must be at least 1")
    tasks = universe.split(split)
    if n > len(tasks):
        raise TaskError(f"n={n} exceeds the {len(tasks)} tasks in split {split!r}")
    chosen = [tasks[i] for i in sorted(rng.choice(len(tasks), n, replace=False))]
    support, query = [], []
    for t in chosen:
        pool = universe.pools[t.name]["train"]
        need = 2 * k * batch_size
        if need > len(pool):
            raise TaskError(f"{t.name}: pool of {len(pool)} too small for {need} disjoint support/query targets")
        idx = rng.choice(len(pool), need, replace=False)
        ex = [with_exemplars(pool, int(j), shots, rng) for j in idx]
        if permute_labels:
            ex = [relabel(e, t, rng) for e in ex]
        batches = [ex[b * batch_size:(b + 1) * batch_size] for b in range(2 * k)]
        support.append(batches[:k])
        query.append(batches[k:])
    return TaskBatch(chosen, support, query)


def stratified_subsample(pool: list[Example], fraction: float, rng: np.random.Generator) -> list[Example]:
    """Keep ``fraction`` of each label's examples (largest-remainder rounding), original order."""
    if not 0 < fraction <= 1:
        raise TaskError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return list(pool)
    counts = Counter(e.y for e in pool)
    labels = sorted(counts)
    exact = {lab: counts[lab] * fraction for lab in labels}
    keep = {lab: int(np.floor(exact[lab])) for lab in labels}
    target = int(round(len(pool) * fraction))
    rest = sorted(labels, key=lambda lab: (-(exact[lab] - keep[lab]), lab))
    for lab in rest[:max(0, target - sum(keep.values()))]:
        keep[lab] += 1
    empty = [lab for lab in labels if keep[lab] == 0]
    if empty:
        raise TaskError(f"fraction {fraction} leaves no examples for labels {empty}")
    picked = set()
    for lab in labels:
        idx = [i for i, e in enumerate(pool) if e.y == lab]
        picked.update(int(i) for i in rng.choice(idx, keep[lab], replace=False))
    return [pool[i] for i in sorted(picked)]


def solve(task: TaskSpec, exemplars: tuple[Example, ...], x: tuple[int, ...]) -> int:
    """Rule-based solver that sees only the exemplars.

    Mapping families copy the label of a matching exemplar; linear-sign votes
    over every weight vector consistent with the exemplars.  Ties and unseen
    inputs fall back to the lowest label.
    """
    labels = sorted(task.label_set)
    if task.family != LINEAR_SIGN:
        for e in exemplars:
            if e.x == x:
                return e.y
        return labels[0]
    toks = sorted({t for t, _ in task.table})
    pos = task.label_set[0]
    votes = Counter()
    for w in itertools.product((-1, 1), repeat=len(toks)):
        wt = dict(zip(toks, w))
        if all((sum(wt[t] for t in e.x) > 0) == (e.y == pos) for e in exemplars):
            votes[pos if sum(wt[t] for t in x) > 0 else task.label_set[1]] += 1
    if not votes:
        return labels[0]
    best = max(votes.values())
    return min(lab for lab, c in votes.items() if c == best)
