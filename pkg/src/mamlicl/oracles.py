"""Independent reference computations used to verify the tape-based paths.

``reference_loss`` re-implements the tiny LM forward pass in plain numpy.  It
shares no code with ``tinylm``/``autodiff``, works in any float dtype and
accepts a leading ensemble axis on any parameter so many finite-difference
perturbations are evaluated in one pass.
"""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .autodiff import Tensor
from .tinylm import ModelConfig, param_shapes


def _arr(x):
    return getattr(x, "data", x)


def reference_loss(params: Mapping, config: ModelConfig, tokens, loss_mask) -> np.ndarray:
    """Masked next-token cross-entropy for a (B, T) batch.

    Each parameter may carry one extra leading axis of size E; the result then
    has shape (E,), otherwise it is a 0-d array.
    """
    shapes = param_shapes(config)
    arrays = {}
    ens, stacked = 1, False
    for name, shape in shapes.items():
        a = np.asarray(_arr(params[name]))
        if a.ndim == len(shape):
            a = a[None]
        else:
            stacked = True
        ens = max(ens, a.shape[0])
        arrays[name] = a
    tokens = np.asarray(tokens, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    inp, tgt, msk = tokens[:, :-1], tokens[:, 1:], loss_mask[:, 1:]
    b, t = inp.shape
    d, h = config.d_model, config.n_heads
    dh = d // h

    def vec(name):  # (E, n) -> (E, 1, 1, n)
        a = arrays[name]
        return a[:, None, None, :]

    def lin(x, name):
        w = arrays[name]
        if w.shape[0] == 1:
            return (x.reshape(-1, x.shape[-1]) @ w[0]).reshape(x.shape[:-1] + (w.shape[-1],))
        return x @ w[:, None]

    def norm(x, prefix):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + 1e-5) * vec(prefix + ".g") + vec(prefix + ".b")

    x = arrays["tok_emb"][:, inp] + arrays["pos_emb"][:, None, :t]
    causal = np.tril(np.ones((t, t), dtype=bool))
    c = np.sqrt(2.0 / np.pi)
    for layer in range(config.n_layers):
        p = f"h{layer}."
        a = norm(x, p + "ln1")
        q = lin(a, p + "attn.wq") + vec(p + "attn.bq")
        k = lin(a, p + "attn.wk")
        v = lin(a, p + "attn.wv") + vec(p + "attn.bv")
        split = lambda z: z.reshape(z.shape[:-1] + (h, dh)).swapaxes(-2, -3)
        q, k, v = split(q), split(k), split(v)
        s = q @ k.swapaxes(-1, -2) / np.sqrt(dh)
        s = np.where(causal, s, -np.inf)
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        s = s / s.sum(axis=-1, keepdims=True)
        y = (s @ v).swapaxes(-2, -3)
        y = y.reshape(y.shape[:-2] + (d,))
        x = x + lin(y, p + "attn.wo") + vec(p + "attn.bo")
        m = lin(norm(x, p + "ln2"), p + "mlp.w1") + vec(p + "mlp.b1")
        m = 0.5 * m * (1.0 + np.tanh(c * (m + 0.044715 * m ** 3)))
        x = x + lin(m, p + "mlp.w2") + vec(p + "mlp.b2")
    logits = lin(norm(x, "ln_f"), "head.w") + vec("head.b")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, np.broadcast_to(tgt, logp.shape[:-1])[..., None], axis=-1)[..., 0]
    per = -(picked * msk).sum(axis=(-1, -2)) / msk.sum()
    per = np.broadcast_to(per, (ens,))
    return per if stacked else per[0]


# ---------------------------------------------------------------- bi-level oracles

def quadratic_meta_gradients(a_s: float = 2.0, a_q: float = 1.0, alpha: float = 0.1, theta: float = 1.0):
    """Meta-gradients of the scalar bi-level problem L_S = A_S θ²/2, L_Q = A_Q θ²/2 (SGD inner, k=1).

    Computed through ``meta_gradient`` (the training code path).  Returns
    (second_order, first_order, closed_second, closed_first).
    """
    from .metatrain import meta_gradient
    from .optim import OptHyper, OptimizerPair

    def loss_fn(p, a):
        return p["theta"] * p["theta"] * (0.5 * a)

    pair = OptimizerPair(OptHyper("sgd", lr=alpha, weight_decay=0.0), OptHyper("sgd", lr=1.0, weight_decay=0.0))
    params = {"theta": Tensor(np.array(theta))}
    second = float(meta_gradient(params, [[a_s]], [[a_q]], pair, loss_fn, "second")[0]["theta"].data)
    first = float(meta_gradient(params, [[a_s]], [[a_q]], pair, loss_fn, "first")[0]["theta"].data)
    shrink = 1.0 - alpha * a_s
    return second, first, shrink * a_q * shrink * theta, a_q * shrink * theta


def _random_batch(rng, config: ModelConfig, batch: int, length: int):
    from .prompting import Batch
    tokens = rng.integers(0, config.vocab_size, (batch, length))
    mask = rng.random((batch, length)) < 0.6
    mask[:, 0] = False
    mask[:, -1] = True
    return Batch(tokens, mask, np.full(batch, length))


def tiny_meta_problem(seed: int, n: int, k: int, config: ModelConfig | None = None, batch: int = 2, length: int = 6):
    """A small random model with n tasks × k support and query batches of random tokens."""
    from .tinylm import TinyLM, init_model
    config = config or ModelConfig(vocab_size=12, d_model=8, n_layers=1, n_heads=2, max_seq=length, mlp_ratio=2)
    rng = np.random.default_rng(seed)
    model = TinyLM(config)
    params = init_model(config, seed)
    # biases and gains off their init values so every parameter has a generic gradient
    for name, t in params.items():
        if t.ndim == 1:
            params[name] = Tensor(t.data + 0.1 * rng.standard_normal(t.shape))
    support = [[_random_batch(rng, config, batch, length) for _ in range(k)] for _ in range(n)]
    query = [[_random_batch(rng, config, batch, length) for _ in range(k)] for _ in range(n)]
    loss_fn = lambda p, b: model.loss(p, b.tokens, b.loss_mask)
    return model, params, support, query, loss_fn


def second_order_error(seed: int = 0, n: int = 1, k: int = 1, alpha: float = 0.1) -> float:
    """Max relative error of the second-order meta-gradient against finite differences
    of the whole map θ -> mean query loss after k SGD inner steps per task."""
    from . import autodiff as ad
    from .metatrain import maml_inner_adapt, meta_gradient, query_loss
    from .optim import OptHyper, OptimizerPair

    config = ModelConfig(vocab_size=8, d_model=4, n_layers=1, n_heads=2, max_seq=5, mlp_ratio=1)
    model, params, support, query, loss_fn = tiny_meta_problem(seed, n, k, config, batch=2, length=5)
    pair = lambda: OptimizerPair(OptHyper("sgd", lr=alpha, weight_decay=0.0), OptHyper("sgd", lr=1.0, weight_decay=0.0))
    analytic = meta_gradient(params, support, query, pair(), loss_fn, "second")[0]

    def full_map(p):
        adapted = maml_inner_adapt(p, support, pair(), loss_fn, track_graph=False)
        return query_loss(adapted, query, loss_fn)

    return ad.finite_difference_check(full_map, params, 1e-5, analytic=analytic, richardson_below=1e-2)


def first_order_error(seed: int = 0, d_model: int = 32, n_layers: int = 2, batch: int = 1, length: int = 12,
                      ensemble: int = 128) -> float:
    """Max relative error of autodiff gradients of the tiny-LM loss against central differences
    of ``reference_loss`` on a random batch."""
    from . import autodiff as ad
    from .tinylm import TinyLM, init_model
    config = ModelConfig(d_model=d_model, n_layers=n_layers, max_seq=length)
    model = TinyLM(config)
    params = init_model(config, seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, config.vocab_size, (batch, length))
    mask = np.ones((batch, length), dtype=bool)
    mask[:, 0] = False
    tape = ad.Tape()
    w = tape.watch(dict(params))
    analytic = ad.grad(model.loss(w, tokens, mask), w)
    f = lambda p: reference_loss(p, config, tokens, mask)
    return ad.finite_difference_check(f, params, 1e-5, analytic=analytic, ensemble=ensemble,
                                      richardson_below=2e-3, extended_below=2e-4)


def maml_fomaml_gap(alpha: float, seed: int = 0, n: int = 2, k: int = 1) -> float:
    """‖second-order − first-order meta-gradient‖₂ on a tiny LM with SGD inner steps of size alpha."""
    from .metatrain import meta_gradient
    from .optim import OptHyper, OptimizerPair
    config = ModelConfig(vocab_size=16, d_model=16, n_layers=2, n_heads=2, max_seq=8, mlp_ratio=2)
    model, params, support, query, loss_fn = tiny_meta_problem(seed, n, k, config, batch=2, length=8)
    pair = lambda: OptimizerPair(OptHyper("sgd", lr=alpha, weight_decay=0.0), OptHyper("sgd", lr=1.0, weight_decay=0.0))
    g2 = meta_gradient(params, support, query, pair(), loss_fn, "second")[0]
    g1 = meta_gradient(params, support, query, pair(), loss_fn, "first")[0]
    return float(np.sqrt(sum(np.sum((g2[k_].data - g1[k_].data) ** 2) for k_ in g2)))
