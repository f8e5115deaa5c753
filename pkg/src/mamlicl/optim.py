"""SGD and AdamW over named parameter sets, plus the inner/outer moment coupling.

Steps accept plain or tape tensors.  When the gradients are tape nodes (an
inner step inside a second-order meta-step) the returned parameters stay on
the tape; stored moments are always plain arrays, so history is a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import Params

KINDS = ("sgd", "adamw")
SHARING = ("none", "copy", "shared")
CORRECTIONS = ("standard", "stored")


class OptimError(ValueError):
    pass


@dataclass(frozen=True)
class OptHyper:
    kind: str = "adamw"
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    correction: str = "standard"
    max_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OptimError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if self.correction not in CORRECTIONS:
            raise OptimError(f"correction must be one of {CORRECTIONS}, got {self.correction!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise OptimError("betas must lie in [0, 1)")
        if self.lr < 0 or self.eps < 0 or self.weight_decay < 0 or self.max_grad_norm < 0:
            raise OptimError("lr, eps, weight_decay and max_grad_norm must be non-negative")

    @property
    def adaptive(self) -> bool:
        return self.kind == "adamw"


@dataclass
class OptState:
    """First/second moments and step counter.  Sharing means two optimizers hold the same object."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def reset(self) -> None:
        self.m, self.v, self.t = {}, {}, 0

    def copy(self) -> OptState:
        return OptState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)

    def load(self, other: OptState) -> None:
        src = other.copy()
        self.m, self.v, self.t = src.m, src.v, src.t

    def is_zero(self) -> bool:
        return all(not a.any() for a in self.m.values()) and all(not a.any() for a in self.v.values())


def _check(params, grads) -> None:
    if set(params) != set(grads):
        raise OptimError(f"gradient names differ from parameter names: {sorted(set(params) ^ set(grads))}")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise OptimError(f"{k}: gradient shape {g.shape} differs from parameter shape {params[k].shape}")
        if not np.isfinite(ad._data(g)).all():
            raise ad.NonFiniteError(f"non-finite gradient for {k}; step rejected")


def _clip_scale(grads, cap: float) -> float:
    if cap <= 0:
        return 1.0
    norm = float(np.sqrt(sum(float(np.sum(ad._data(g) ** 2)) for g in grads.values())))
    return 1.0 if norm <= cap else cap / norm


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def sgd_step(state: OptState, params, grads, hyper: OptHyper) -> tuple[Params, OptState]:
    """θ ← θ − lr·g − lr·λ·θ."""
    _check(params, grads)
    c = _clip_scale(grads, hyper.max_grad_norm)
    out = Params()
    for k, p in params.items():
        p = _lift(p)
        g = _lift(grads[k])
        if c != 1.0:
            g = g * c
        out[k] = p - g * hyper.lr - p * (hyper.lr * hyper.weight_decay)
    state.t += 1
    return out, state


def _sqrt(v: Tensor) -> Tensor:
    # sqrt(v + 1) - 1 == 0 exactly where v == 0, and keeps the derivative finite there
    zero = (v.data == 0).astype(v.data.dtype)
    if not zero.any():
        return ad.sqrt(v)
    return ad.sqrt(v + zero) - zero


def adamw_step(state: OptState, params, grads, hyper: OptHyper) -> tuple[Params, OptState]:
    """One AdamW step; moments are written to ``state`` as plain arrays."""
    _check(params, grads)
    c = _clip_scale(grads, hyper.max_grad_norm)
    b1, b2 = hyper.beta1, hyper.beta2
    t = state.t + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = Params()
    new_m, new_v = {}, {}
    for k, p in params.items():
        p = _lift(p)
        g = _lift(grads[k])
        if c != 1.0:
            g = g * c
        m_prev = state.m.get(k)
        v_prev = state.v.get(k)
        m = g * (1.0 - b1) if m_prev is None else m_prev * b1 + g * (1.0 - b1)
        v = (g * g) * (1.0 - b2) if v_prev is None else v_prev * b2 + (g * g) * (1.0 - b2)
        if hyper.correction == "stored":
            m, v = m / c1, v / c2
            m_hat, v_hat = m, v
        else:
            m_hat, v_hat = m / c1, v / c2
        update = m_hat / (_sqrt(v_hat) + hyper.eps)
        out[k] = p - update * hyper.lr - p * (hyper.lr * hyper.weight_decay)
        new_m[k], new_v[k] = m.data, v.data
    state.m.update(new_m)
    state.v.update(new_v)
    state.t = t
    return out, state


def step(state: OptState, params, grads, hyper: OptHyper) -> Params:
    fn = adamw_step if hyper.adaptive else sgd_step
    return fn(state, params, grads, hyper)[0]


class OptimizerPair:
    """Inner and outer optimizers with one of three moment-coupling modes.

    none   inner state zeroed at the start of every adaptation phase
    copy   inner (m, v, t) copied into the outer before each meta-update, back after
    shared one store and one counter used by every inner and outer step
    """

    def __init__(self, inner: OptHyper, outer: OptHyper, sharing: str = "none"):
        if sharing not in SHARING:
            raise OptimError(f"sharing must be one of {SHARING}, got {sharing!r}")
        if sharing != "none" and not (inner.adaptive and outer.adaptive):
            raise OptimError(f"sharing={sharing} needs adaptive inner and outer optimizers, got {inner.kind}+{outer.kind}")
        self.inner_hyper, self.outer_hyper, self.sharing = inner, outer, sharing
        self.inner_state = OptState()
        self.outer_state = self.inner_state if sharing == "shared" else OptState()

    def begin_adaptation(self) -> None:
        if self.sharing == "none":
            self.inner_state.reset()

    def inner_step(self, params, grads) -> Params:
        return step(self.inner_state, params, grads, self.inner_hyper)

    def outer_step(self, params, grads) -> Params:
        if self.sharing == "copy":
            self.outer_state.load(self.inner_state)
        out = step(self.outer_state, params, grads, self.outer_hyper)
        if self.sharing == "copy":
            self.inner_state.load(self.outer_state)
        return out

    def state_dict(self) -> dict:
        return {"inner": self.inner_state, "outer": self.outer_state}


def make_shared_pair(inner: OptHyper, outer: OptHyper, sharing: str = "none") -> OptimizerPair:
    return OptimizerPair(inner, outer, sharing)
