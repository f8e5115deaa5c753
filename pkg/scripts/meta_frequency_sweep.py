"""MAML-2k-n sweep: batches per meta-update and held-out score for a few (n, k).

    python scripts/meta_frequency_sweep.py --steps 200
"""

import argparse

from mamlicl.config import ExperimentConfig, with_overrides
from mamlicl.evalharness import evaluate
from mamlicl.metatrain import run_meta_training
from mamlicl.prompting import Vocab
from mamlicl.taskgen import make_task_universe
from mamlicl.tinylm import TinyLM, init_model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--grid", default="1x1,2x1,4x1,2x2")
    args = ap.parse_args()
    base = ExperimentConfig()
    vocab = Vocab(size=base.model.vocab_size)
    universe = make_task_universe(base.tasks, base.run.universe_seed, vocab)
    model = TinyLM(base.model)
    for cell in args.grid.split(","):
        n, k = (int(v) for v in cell.split("x"))
        cfg = with_overrides(base, meta={"n": n, "k": k, "steps": args.steps})
        params, log, _ = run_meta_training(cfg.meta, universe, model, init_model(cfg.model, cfg.run.seed),
                                           cfg.run.seed, vocab)
        rep = evaluate(model, params, universe, universe.unseen, seeds=cfg.eval.seeds, vocab=vocab)
        print(f"MAML-{2 * k}-{n}: {log.batches_consumed // log.meta_updates} batches/update, "
              f"{log.wall_time:.0f}s, unseen {rep.aggregate('unseen')['average']:.4f}")


if __name__ == "__main__":
    main()
