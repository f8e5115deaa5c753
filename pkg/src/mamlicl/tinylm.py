"""A small pre-norm decoder-only transformer built on the autodiff tape.

Attention keys carry no bias: a key bias shifts every score of a query by the
same amount, so softmax ignores it and its gradient is identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import Params

DEFAULT_SEED = 100


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_seq: int = 128
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ModelError(f"model.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ModelError(f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v, hidden = config.d_model, config.vocab_size, config.d_model * config.mlp_ratio
    shapes = {"tok_emb": (v, d), "pos_emb": (config.max_seq, d)}
    for layer in range(config.n_layers):
        p = f"h{layer}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, hidden), p + "mlp.b1": (hidden,),
            p + "mlp.w2": (hidden, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, v), "head.b": (v,)})
    return shapes


def init_model(config: ModelConfig, seed: int = DEFAULT_SEED) -> Params:
    """Deterministic init: N(0, 1/d_model) for matrices and embeddings, ones for
    norm gains, zeros for every bias."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.d_model)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.standard_normal(shape) * scale
    return Params.from_arrays(arrays)


class TinyLM:
    """Stateless model: parameters are passed to every call."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._masks: dict[int, np.ndarray] = {}

    def _causal(self, t: int) -> np.ndarray:
        if t not in self._masks:
            self._masks[t] = np.tril(np.ones((t, t), dtype=bool))
        return self._masks[t]

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim not in (1, 2):
            raise ModelError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
        if tokens.shape[-1] > self.config.max_seq:
            raise ModelError(f"sequence length {tokens.shape[-1]} exceeds max_seq {self.config.max_seq}")
        if tokens.shape[-1] == 0:
            raise ModelError("empty token sequence")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ModelError(f"token id out of range [0, {self.config.vocab_size})")
        return tokens

    def forward_logits(self, params, tokens) -> Tensor:
        """Logits of shape (T, V) for a 1-D sequence or (B, T, V) for a batch."""
        tokens = self.check_tokens(tokens)
        cfg = self.config
        t = tokens.shape[-1]
        d, h = cfg.d_model, cfg.n_heads
        dh = d // h
        pos = ad.take_rows(params["pos_emb"], np.arange(t))
        x = ad.take_rows(params["tok_emb"], tokens) + pos
        lead = tokens.shape[:-1]
        mask = self._causal(t)
        inv_sqrt = 1.0 / np.sqrt(dh)
        for layer in range(cfg.n_layers):
            p = f"h{layer}."
            a = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
            q = self._heads(a @ params[p + "attn.wq"] + params[p + "attn.bq"], lead, t, h, dh)
            k = self._heads(a @ params[p + "attn.wk"], lead, t, h, dh)
            v = self._heads(a @ params[p + "attn.wv"] + params[p + "attn.bv"], lead, t, h, dh)
            att = ad.softmax((q @ k.swapaxes(-1, -2)) * inv_sqrt, mask)
            y = (att @ v).swapaxes(-2, -3).reshape(lead + (t, d))
            x = x + (y @ params[p + "attn.wo"] + params[p + "attn.bo"])
            m = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
            m = ad.gelu(m @ params[p + "mlp.w1"] + params[p + "mlp.b1"])
            x = x + (m @ params[p + "mlp.w2"] + params[p + "mlp.b2"])
        x = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
        return x @ params["head.w"] + params["head.b"]

    @staticmethod
    def _heads(x: Tensor, lead, t, h, dh) -> Tensor:
        # (..., T, D) -> (..., H, T, dh)
        return x.reshape(lead + (t, h, dh)).swapaxes(-2, -3)

    def loss(self, params, tokens, loss_mask) -> Tensor:
        """Next-token cross-entropy averaged over positions flagged in ``loss_mask``.

        ``loss_mask[..., p]`` marks token p as supervised; it is predicted from
        the logits at p-1, so position 0 can never be supervised.
        """
        tokens = self.check_tokens(tokens)
        loss_mask = np.asarray(loss_mask, dtype=bool)
        if loss_mask.shape != tokens.shape:
            raise ModelError(f"loss_mask shape {loss_mask.shape} differs from tokens {tokens.shape}")
        if loss_mask[..., 0].any():
            raise ModelError("position 0 has no prefix and cannot be supervised")
        logits = self.forward_logits(params, tokens[..., :-1])
        return masked_ce_loss(logits, tokens[..., 1:], loss_mask[..., 1:])

    def next_token_logprobs(self, params, tokens) -> np.ndarray:
        return ad.log_softmax(self.forward_logits(params, tokens)).data

    def sequence_logprob(self, params, tokens, scored) -> np.ndarray | float:
        """Σ over scored positions p of log P(tokens[p] | tokens[:p]).

        Accepts one sequence (returns a float) or a batch (returns one value per row).
        """
        tokens = self.check_tokens(tokens)
        scored = np.asarray(scored, dtype=bool)
        if scored.shape != tokens.shape:
            raise ModelError(f"scored mask shape {scored.shape} differs from tokens {tokens.shape}")
        if not scored.any(axis=-1).all():
            raise ModelError("every sequence needs at least one scored position")
        if scored[..., 0].any():
            raise ModelError("position 0 has no prefix and cannot be scored")
        logp = self.next_token_logprobs(self.detached(params), tokens[..., :-1])
        picked = np.take_along_axis(logp, tokens[..., 1:, None], axis=-1)[..., 0]
        out = (picked * scored[..., 1:]).sum(axis=-1)
        return float(out) if out.ndim == 0 else out

    @staticmethod
    def detached(params) -> dict:
        return {k: v.detach() if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def masked_ce_loss(logits, targets, mask) -> Tensor:
    """Mean cross-entropy over masked positions only."""
    return ad.masked_cross_entropy(logits, targets, mask)
