"""Command-line entry point: train, evaluate, adapt, ablate-optimizers, verify.

Thread count for the BLAS backend comes from MAMLICL_THREADS (default 1),
applied before numpy is imported.
"""

from __future__ import annotations

import os

_threads = os.environ.get("MAMLICL_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint  # noqa: E402
from .config import ConfigError, ExperimentConfig, load_config, resolved_text, with_overrides  # noqa: E402
from .evalharness import EvalReport, evaluate, few_shot_adapt, write_report  # noqa: E402
from .metatrain import TrainingDiverged, run_meta_training  # noqa: E402
from .prompting import Vocab  # noqa: E402
from .taskgen import make_task_universe  # noqa: E402
from .tinylm import TinyLM, init_model, param_shapes  # noqa: E402

ABLATION_GRID = (
    ("SGD+SGD", "sgd", "sgd", "none", ""),
    ("SGD+AdamW", "sgd", "adamw", "none", ""),
    ("AdamW+SGD", "adamw", "sgd", "none", "(*) identical setting to SGD+SGD"),
    ("AdamW+AdamW", "adamw", "adamw", "none", ""),
    ("AdamW+AdamW shared", "adamw", "adamw", "shared", ""),
)


def _vocab(cfg: ExperimentConfig) -> Vocab:
    return Vocab(size=cfg.model.vocab_size)


def _setup(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    vocab = _vocab(cfg)
    universe = make_task_universe(cfg.tasks, cfg.run.universe_seed, vocab)
    (out / "resolved_config.txt").write_text(resolved_text(cfg))
    (out / "universe.jsonl").write_text(universe.dump())
    return vocab, universe


def train_run(cfg: ExperimentConfig, out: Path, log=print):
    vocab, universe = _setup(cfg, out)
    model = TinyLM(cfg.model)
    params = init_model(cfg.model, cfg.run.seed)
    m = cfg.meta
    log(f"mode={m.mode} n={m.n} k={m.k} steps={m.steps}: meta-update frequency {m.batches_per_update} batches")
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def on_checkpoint(step, p, opt):
        save_checkpoint(out / f"checkpoint_{step:06d}.ckpt", cfg.model, p, cfg.run.seed, opt, {"step": step})

    with log_path.open("a") as fh:
        params, tlog, opt = run_meta_training(m, universe, model, params, cfg.run.seed, vocab,
                                              on_checkpoint=on_checkpoint,
                                              on_record=lambda r: fh.write(json.dumps(r, sort_keys=True) + "\n"))
    save_checkpoint(out / "checkpoint.ckpt", cfg.model, params, cfg.run.seed, opt, {"step": m.steps, "mode": m.mode})
    summary = {"meta_updates": tlog.meta_updates, "batches_consumed": tlog.batches_consumed,
               "batches_per_update": m.batches_per_update, "skipped": tlog.skipped}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log(f"done: {tlog.meta_updates} updates, {tlog.batches_consumed} batches, {tlog.wall_time:.1f}s")
    return model, params, universe, vocab, tlog


def _load_params(cfg: ExperimentConfig, checkpoint: str | None):
    if checkpoint is None:
        return init_model(cfg.model, cfg.run.seed)
    ck = load_checkpoint(checkpoint)
    want, got = param_shapes(cfg.model), param_shapes(ck["config"])
    if want != got:
        diff = {k: (want.get(k), got.get(k)) for k in set(want) | set(got) if want.get(k) != got.get(k)}
        raise CheckpointError(f"checkpoint model shapes differ from config (config, checkpoint): {diff}")
    return ck["params"]


def eval_run(cfg: ExperimentConfig, params, out: Path, universe=None, vocab=None, name: str = "eval") -> EvalReport:
    out.mkdir(parents=True, exist_ok=True)
    vocab = vocab or _vocab(cfg)
    universe = universe or make_task_universe(cfg.tasks, cfg.run.universe_seed, vocab)
    tasks = [t for s in cfg.eval.splits for t in universe.split(s)]
    report = evaluate(TinyLM(cfg.model), params, universe, tasks, cfg.eval.prompt_mode, cfg.eval.seeds, vocab,
                      cfg.eval.shots, cfg.eval.batch_size)
    write_report(report, out / f"{name}_report.tsv", out / f"{name}_summary.json")
    return report


def cmd_train(args) -> int:
    cfg = _config(args)
    try:
        train_run(cfg, Path(cfg.run.out_dir))
    except TrainingDiverged as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return 3
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    params = _load_params(cfg, args.checkpoint)
    report = eval_run(cfg, params, Path(cfg.run.out_dir))
    for split in cfg.eval.splits:
        agg = report.aggregate(split)
        print(f"{split}: average {agg['average']:.4f} worst {agg['worst']:.4f} over {agg['tasks']} tasks")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    params = _load_params(cfg, args.checkpoint)
    vocab = _vocab(cfg)
    universe = make_task_universe(cfg.tasks, cfg.run.universe_seed, vocab)
    model = TinyLM(cfg.model)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["phase\ttask\tseed\tmetric\tscore\taccuracy"]
    for task in universe.unseen:
        _, before, after = few_shot_adapt(model, params, universe, task, cfg.adapt, cfg.eval.prompt_mode,
                                          cfg.eval.seeds, vocab, cfg.run.seed)
        for phase, rep in (("before", before), ("after", after)):
            for r in rep.rows:
                lines.append(f"{phase}\t{r['task']}\t{r['seed']}\t{r['metric']}\t{r['score']:.6f}\t{r['accuracy']:.6f}")
            agg = rep.aggregate()
            print(f"{task.name} {phase}: average {agg['average']:.4f} worst {agg['worst']:.4f}")
    (out / "adapt_report.tsv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    root = Path(cfg.run.out_dir)
    rows = ["setting\tinner\touter\tsharing\tseed\tunseen_score\tall_score\tnote"]
    for label, inner, outer, sharing, note in ABLATION_GRID:
        for seed in cfg.run.ablation_seeds:
            sub = with_overrides(cfg, meta={"inner_opt": inner, "outer_opt": outer, "sharing": sharing},
                                 run={"seed": seed, "out_dir": str(root / f"{label.replace(' ', '_').replace('+', '_')}_s{seed}")})
            out = Path(sub.run.out_dir)
            try:
                _, params, universe, vocab, _ = train_run(sub, out, log=lambda s: None)
            except TrainingDiverged as err:
                rows.append(f"{label}\t{inner}\t{outer}\t{sharing}\t{seed}\tnan\tnan\tdiverged: {err}")
                continue
            rep = eval_run(sub, params, out, universe, vocab)
            unseen = rep.aggregate("unseen")["average"] if "unseen" in sub.eval.splits else float("nan")
            rows.append(f"{label}\t{inner}\t{outer}\t{sharing}\t{seed}\t{unseen:.6f}\t{rep.aggregate()['average']:.6f}\t{note}")
            print(rows[-1])
    (root / "ablation.tsv").write_text("\n".join(rows) + "\n")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all
    return 0 if run_all(print) else 1


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    run = {}
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "out", None):
        run["out_dir"] = args.out
    return with_overrides(cfg, run=run) if run else cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mamlicl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, needs_ckpt in (("train", cmd_train, False), ("evaluate", cmd_evaluate, True),
                                 ("adapt", cmd_adapt, True), ("ablate-optimizers", cmd_ablate, False)):
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat section.key = value file; defaults apply when omitted")
        s.add_argument("--out", help="output directory (overrides run.out_dir)")
        s.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        if needs_ckpt:
            s.add_argument("--checkpoint", help="checkpoint file; a fresh init when omitted")
        s.set_defaults(fn=fn)
    s = sub.add_parser("verify", help="run the oracle suite")
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
