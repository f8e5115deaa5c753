"""Prompt rendering for standard and channel modes, and label scoring.

standard  BOS x1 SEP y1 EXS ... EXS x SEP y     loss on y
channel   BOS y1 SEP x1 EXS ... EXS y SEP x     loss on every token of x

Labels are single tokens.  Over-long prompts lose whole exemplars, oldest first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .taskgen import Example, ICLExample

STANDARD, CHANNEL = "standard", "channel"
MODES = (STANDARD, CHANNEL)


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    bos: int = 0
    sep: int = 1
    exs: int = 2
    n_labels: int = 8
    size: int = 64

    def __post_init__(self):
        if len({self.bos, self.sep, self.exs}) != 3 or max(self.bos, self.sep, self.exs) > 2:
            raise PromptError("reserved ids must be the distinct ids 0, 1, 2")
        if self.n_labels < 2 or 3 + self.n_labels >= self.size:
            raise PromptError("vocabulary too small for the requested labels")

    @property
    def labels(self) -> range:
        return range(3, 3 + self.n_labels)

    @property
    def content(self) -> range:
        return range(3 + self.n_labels, self.size)

    @property
    def pad(self) -> int:
        return self.bos


@dataclass(frozen=True)
class EncodedExample:
    tokens: tuple[int, ...]
    loss_mask: tuple[bool, ...]
    answer_positions: tuple[int, ...]
    mode: str
    n_exemplars: int

    def __len__(self) -> int:
        return len(self.tokens)

    def debug_line(self) -> str:
        mask = "".join("1" if m else "0" for m in self.loss_mask)
        return f"mode={self.mode} shots={self.n_exemplars} tokens={' '.join(map(str, self.tokens))} mask={mask}"


def _unit(e: Example, mode: str, vocab: Vocab) -> list[int]:
    if mode == STANDARD:
        return [*e.x, vocab.sep, e.y]
    return [e.y, vocab.sep, *e.x]


def _fit(exemplars, target: Example, mode: str, vocab: Vocab, max_len: int) -> tuple[list[int], list[int], int]:
    tail = _unit(target, mode, vocab)
    if 1 + len(tail) > max_len:
        raise PromptError(f"target alone needs {1 + len(tail)} tokens, max_len is {max_len}")
    units = [_unit(e, mode, vocab) for e in exemplars]
    total = 1 + len(tail) + sum(len(u) + 1 for u in units)
    drop = 0
    while total > max_len:
        total -= len(units[drop]) + 1
        drop += 1
    head = [vocab.bos]
    for u in units[drop:]:
        head += u + [vocab.exs]
    return head, tail, len(units) - drop


def render(exemplars, target: Example, vocab: Vocab, max_len: int, mode: str = STANDARD) -> EncodedExample:
    if mode not in MODES:
        raise PromptError(f"prompt mode must be one of {MODES}, got {mode!r}")
    head, tail, kept = _fit(exemplars, target, mode, vocab, max_len)
    tokens = head + tail
    if mode == STANDARD:
        answer = (len(tokens) - 1,)
    else:
        answer = tuple(range(len(tokens) - len(target.x), len(tokens)))
    mask = [False] * len(tokens)
    for p in answer:
        mask[p] = True
    return EncodedExample(tuple(tokens), tuple(mask), answer, mode, kept)


def render_standard(exemplars, target: Example, vocab: Vocab, max_len: int) -> EncodedExample:
    return render(exemplars, target, vocab, max_len, STANDARD)


def render_channel(exemplars, target: Example, vocab: Vocab, max_len: int) -> EncodedExample:
    return render(exemplars, target, vocab, max_len, CHANNEL)


def encode(ex: ICLExample, vocab: Vocab, max_len: int, mode: str = STANDARD) -> EncodedExample:
    return render(ex.exemplars, ex.target, vocab, max_len, mode)


def decode(enc: EncodedExample, vocab: Vocab) -> tuple[tuple[Example, ...], Example]:
    """Recover (exemplars, target) from a rendered prompt."""
    toks = list(enc.tokens)
    if not toks or toks[0] != vocab.bos:
        raise PromptError("prompt must start with BOS")
    units, cur = [], []
    for t in toks[1:]:
        if t == vocab.exs:
            units.append(cur)
            cur = []
        else:
            cur.append(t)
    units.append(cur)
    out = []
    for u in units:
        if u.count(vocab.sep) != 1:
            raise PromptError(f"malformed unit {u}")
        i = u.index(vocab.sep)
        left, right = u[:i], u[i + 1:]
        if enc.mode == STANDARD:
            out.append(Example(tuple(left), right[0]))
        else:
            out.append(Example(tuple(right), left[0]))
    return tuple(out[:-1]), out[-1]


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray  # (B, T) int64, right-padded
    loss_mask: np.ndarray  # (B, T) bool
    lengths: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def collate(encoded: list[EncodedExample], pad: int = 0) -> Batch:
    if not encoded:
        raise PromptError("cannot collate an empty batch")
    width = max(len(e) for e in encoded)
    tokens = np.full((len(encoded), width), pad, dtype=np.int64)
    mask = np.zeros((len(encoded), width), dtype=bool)
    for i, e in enumerate(encoded):
        tokens[i, :len(e)] = e.tokens
        mask[i, :len(e)] = e.loss_mask
    return Batch(tokens, mask, np.array([len(e) for e in encoded]))


def _argmax_lowest(scores: np.ndarray, candidates) -> np.ndarray:
    """Row-wise argmax over candidates; exact ties go to the lowest label id."""
    order = np.argsort(np.asarray(candidates), kind="stable")
    cand = np.asarray(candidates)[order]
    return cand[np.argmax(scores[..., order], axis=-1)]


def score_labels_standard(model, params, prompt_without_answer, candidates) -> int:
    """argmax over candidates of the next-token probability after ``prompt`` (ends in SEP)."""
    if len(candidates) == 0:
        raise PromptError("no candidate labels")
    return int(score_standard_batch(model, params, [tuple(prompt_without_answer)], candidates)[0])


def score_standard_batch(model, params, prompts: list[tuple[int, ...]], candidates) -> np.ndarray:
    if len(candidates) == 0:
        raise PromptError("no candidate labels")
    width = max(len(p) for p in prompts)
    tokens = np.zeros((len(prompts), width), dtype=np.int64)
    for i, p in enumerate(prompts):
        tokens[i, :len(p)] = p
    logp = model.next_token_logprobs(model.detached(params), tokens)
    last = np.array([len(p) - 1 for p in prompts])
    rows = logp[np.arange(len(prompts)), last]
    return _argmax_lowest(rows[:, list(candidates)], candidates)


def score_labels_channel(model, params, exemplars, target_x, candidates, vocab: Vocab, max_len: int) -> int:
    """argmax over c of P(target_x | channel exemplars, c); one prompt per candidate."""
    return int(score_channel_batch(model, params, [(tuple(exemplars), tuple(target_x))], candidates, vocab, max_len)[0])


def score_channel_batch(model, params, items, candidates, vocab: Vocab, max_len: int) -> np.ndarray:
    if len(candidates) == 0:
        raise PromptError("no candidate labels")
    enc = [render_channel(ex, Example(x, c), vocab, max_len) for ex, x in items for c in candidates]
    b = collate(enc, vocab.pad)
    lp = model.sequence_logprob(params, b.tokens, b.loss_mask)
    scores = np.asarray(lp).reshape(len(items), len(candidates))
    return _argmax_lowest(scores, candidates)


def prompt_for_scoring(ex: ICLExample, vocab: Vocab, max_len: int) -> tuple[int, ...]:
    """Standard prompt up to and including the SEP before the answer."""
    enc = render_standard(ex.exemplars, ex.target, vocab, max_len)
    return enc.tokens[:-1]
