"""Command-line entry point.

Every command reads one JSON config (``--config``; defaults when omitted),
applies ``--set key=value`` overrides and runs once per ``--seed`` into
``OUT/seed_<n>/``.  Exit codes: 0 ok, 2 config error, 3 data/IO error,
4 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import data as data_mod
from .errors import CheckpointError, ConfigError, DataError, LetorParseError, NonFiniteError
from .evaluation import (
    DEFAULT_KS,
    evaluate_model,
    reward_accuracy,
    write_metrics_csv,
    write_metrics_jsonl,
)
from .models import ActorModel
from .pipeline import (
    CheckpointSet,
    ExperimentConfig,
    holdout_pairs,
    init_stage3,
    load_checkpoint,
    load_config,
    load_domains,
    prepare_split,
    resume_stage3,
    run_stage1,
    run_stage2,
    run_stage3,
    save_checkpoint,
    stage3_checkpoint,
    write_jsonl,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ANNOTATION_GRID = (0.0, 0.05, 0.10, 0.20, 0.40)
RATIO_MODES = ("partial_order", "original", "original_clipped")


def say(msg):
    print(msg, flush=True)


def _ckpt_path(run_dir, stage):
    return os.path.join(run_dir, f"{stage}.ckpt.json")


def _stage1(cfg, seed, split, run_dir):
    path = _ckpt_path(run_dir, "stage1")
    if os.path.exists(path):
        return load_checkpoint(path, "stage1", cfg.config_hash()).models["actor"]
    say(f"[seed {seed}] stage 1: training actor on {len(split.stage1_instances)} source instances")
    actor, hist = run_stage1(cfg, split.stage1_instances, seed)
    save_checkpoint(path, CheckpointSet("stage1", {"actor": actor}, cfg.config_hash(), {"seed": seed}, 0, hist))
    write_jsonl(os.path.join(run_dir, "history_stage1.jsonl"), hist)
    return actor


def _stage2(cfg, seed, split, run_dir, tag="stage2"):
    path = _ckpt_path(run_dir, tag)
    if os.path.exists(path):
        return load_checkpoint(path, "stage2", cfg.config_hash()).models["reward"]
    say(f"[seed {seed}] stage 2: training reward model on {len(split.stage2_pairs)} pairs")
    lookup = split.instances_by_id()
    reward, hist = run_stage2(cfg, split.stage2_pairs, lookup, seed=seed, eval_pairs=holdout_pairs(split))
    save_checkpoint(path, CheckpointSet("stage2", {"reward": reward}, cfg.config_hash(), {"seed": seed}, 0, hist))
    write_jsonl(os.path.join(run_dir, f"history_{tag}.jsonl"), hist)
    return reward


def _progress(seed):
    def report(state, diag):
        if "test_ndcg5" in diag:
            say(f"[seed {seed}] stage 3 iter {state.iteration}: reward {diag['mean_reward']:.4f} "
                f"test NDCG@5 {diag['test_ndcg5']:.4f}")
    return report


def _stage3(cfg, seed, split, run_dir, actor, reward, resume=False, stop_after=None, tag="stage3"):
    path = _ckpt_path(run_dir, tag)
    if resume and os.path.exists(path):
        state = resume_stage3(cfg, load_checkpoint(path, "stage3", cfg.config_hash()))
        say(f"[seed {seed}] stage 3: resuming at iteration {state.iteration}")
    else:
        state = init_stage3(cfg, actor, reward, seed)
    run_stage3(cfg, state, split, seed, stop_after=stop_after, callback=_progress(seed))
    save_checkpoint(path, stage3_checkpoint(cfg, state, seed))
    write_jsonl(os.path.join(run_dir, f"history_{tag}.jsonl"), state.history)
    return state


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg, seed, run_dir, args):
    source, target = load_domains(cfg, seed)
    data_mod.write_letor(os.path.join(run_dir, "source.letor"), source)
    data_mod.write_letor(os.path.join(run_dir, "target.letor"), target)
    split = data_mod.build_splits(source, target, cfg.stage2.annotation_proportion,
                                  cfg.data.stage3_pair_fraction, seed, cfg.data.test_fraction)
    manifest = split.manifest()
    manifest["config"] = cfg.to_dict()
    data_mod.write_manifest(os.path.join(run_dir, "manifest.json"), manifest)
    # post-check: the written files must parse back
    for name in ("source.letor", "target.letor"):
        data_mod.read_letor(os.path.join(run_dir, name))
    say(f"[seed {seed}] wrote {len(source)} source / {len(target)} target instances to {run_dir}")


def cmd_train_stage1(cfg, seed, run_dir, args):
    _stage1(cfg, seed, prepare_split(cfg, seed), run_dir)


def cmd_train_stage2(cfg, seed, run_dir, args):
    _stage2(cfg, seed, prepare_split(cfg, seed), run_dir)


def cmd_train_stage3(cfg, seed, run_dir, args):
    split = prepare_split(cfg, seed)
    try:
        actor = load_checkpoint(_ckpt_path(run_dir, "stage1"), "stage1", cfg.config_hash()).models["actor"]
        reward = load_checkpoint(_ckpt_path(run_dir, "stage2"), "stage2", cfg.config_hash()).models["reward"]
    except CheckpointError as exc:
        raise CheckpointError(f"stage 3 needs stage-1 and stage-2 checkpoints in {run_dir}: {exc}") from exc
    state = _stage3(cfg, seed, split, run_dir, actor, reward, resume=args.resume, stop_after=args.stop_after)
    row = evaluate_model(state.actor, split.test_instances, split="final", iteration=state.iteration, seed=seed)
    write_metrics_jsonl(os.path.join(run_dir, "metrics_stage3.jsonl"), [row])


def cmd_train_all(cfg, seed, run_dir, args):
    split = prepare_split(cfg, seed)
    actor = _stage1(cfg, seed, split, run_dir)
    reward = _stage2(cfg, seed, split, run_dir)
    say(f"[seed {seed}] stage 3: {cfg.stage3.n_iters} iterations on {len(split.stage3_pairs)} unannotated pairs")
    state = _stage3(cfg, seed, split, run_dir, actor, reward, resume=args.resume)
    lookup = split.instances_by_id()
    rows = [
        evaluate_model(actor, split.test_instances, split="stage1", seed=seed),
        evaluate_model(state.actor, split.test_instances, split="final", iteration=state.iteration, seed=seed),
    ]
    rows[1].reward_acc = reward_accuracy(reward, holdout_pairs(split), lookup)
    write_metrics_jsonl(os.path.join(run_dir, "metrics.jsonl"), rows)
    write_metrics_csv(os.path.join(run_dir, "metrics.csv"), rows)
    say(f"[seed {seed}] NDCG@5 stage1 {rows[0].ndcg[5]:.4f} -> final {rows[1].ndcg[5]:.4f}")


def cmd_evaluate(cfg, seed, run_dir, args):
    split = prepare_split(cfg, seed)
    path = args.checkpoint or _ckpt_path(run_dir, "stage3")
    ckpt = load_checkpoint(path)
    actor = ckpt.models.get("actor")
    if not isinstance(actor, ActorModel):
        raise CheckpointError(f"{path} holds no actor")
    row = evaluate_model(actor, split.test_instances, split=ckpt.stage, iteration=ckpt.iteration, seed=seed)
    write_metrics_jsonl(os.path.join(run_dir, "metrics_evaluate.jsonl"), [row])
    write_metrics_csv(os.path.join(run_dir, "metrics_evaluate.csv"), [row])
    say(f"[seed {seed}] {path}: " + " ".join(f"NDCG@{k} {row.ndcg[k]:.4f}" for k in DEFAULT_KS))


def cmd_ablate_ratio(cfg, seed, run_dir, args):
    split = prepare_split(cfg, seed)
    actor = _stage1(cfg, seed, split, run_dir)
    reward = _stage2(cfg, seed, split, run_dir)
    base = evaluate_model(actor, split.test_instances, split="stage1", seed=seed)
    summary = [base.as_record()]
    for mode in RATIO_MODES:
        mcfg = cfg.with_overrides([f"stage3.ratio_mode={json.dumps(mode)}", "stage3.eval_every=1"])
        say(f"[seed {seed}] ratio ablation: {mode}")
        state = init_stage3(mcfg, actor, reward, seed)
        try:
            run_stage3(mcfg, state, split, seed)
            status = "ok"
        except NonFiniteError as exc:
            # a collapsing ratio is an outcome to record, not a command failure
            status = f"non-finite: {exc}"
        curve = [{"iteration": d["iteration"] + 1, "ratio_mode": mode,
                  **{f"ndcg{k}": d[f"test_ndcg{k}"] for k in DEFAULT_KS},
                  "mean_reward": d["mean_reward"], "policy_loss": d["policy_loss"]}
                 for d in state.history]
        write_jsonl(os.path.join(run_dir, f"ratio_curve_{mode}.jsonl"), curve)
        row = evaluate_model(state.actor, split.test_instances, split=mode, iteration=state.iteration, seed=seed)
        rec = row.as_record()
        rec["status"] = status
        summary.append(rec)
    write_jsonl(os.path.join(run_dir, "ratio_ablation.jsonl"), summary)


def cmd_ablate_annotation(cfg, seed, run_dir, args):
    base_split = prepare_split(cfg, seed)
    actor = _stage1(cfg, seed, base_split, run_dir)
    rows = [evaluate_model(actor, base_split.test_instances, split="proportion_0", seed=seed)]
    records = [{"proportion": 0.0, **rows[0].as_record()}]
    for prop in ANNOTATION_GRID[1:]:
        tag = f"p{int(round(prop * 100)):02d}"
        split = prepare_split(cfg, seed, annotation_proportion=prop)
        pcfg = cfg.with_overrides([f"stage2.annotation_proportion={prop}"])
        reward = _stage2(pcfg, seed, split, run_dir, tag=f"stage2_{tag}")
        say(f"[seed {seed}] annotation {prop:.0%}: stage 3")
        state = _stage3(pcfg, seed, split, run_dir, actor, reward, tag=f"stage3_{tag}")
        row = evaluate_model(state.actor, split.test_instances, split=f"proportion_{tag}",
                             iteration=state.iteration, seed=seed)
        row.reward_acc = reward_accuracy(reward, holdout_pairs(split), split.instances_by_id())
        rows.append(row)
        records.append({"proportion": prop, **row.as_record()})
    write_jsonl(os.path.join(run_dir, "annotation_grid.jsonl"), records)
    write_metrics_csv(os.path.join(run_dir, "annotation_grid.csv"), rows)
    for rec in records:
        acc = "-" if rec["reward_acc"] is None else f"{rec['reward_acc']:.4f}"
        say(f"[seed {seed}] {rec['proportion']:.0%}: reward acc {acc} NDCG@5 {rec['ndcg5']:.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "train-stage3": cmd_train_stage3,
    "train-all": cmd_train_all,
    "evaluate": cmd_evaluate,
    "ablate-ratio": cmd_ablate_ratio,
    "ablate-annotation": cmd_ablate_annotation,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="lrppo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON (defaults if omitted)")
        p.add_argument("--seed", type=int, action="append", help="seed; repeat for several runs")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="trajectory collection threads")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. stage3.n_iters=20")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-stage3", "train-all"):
            p.add_argument("--resume", action="store_true", help="continue from an existing stage-3 checkpoint")
        if name == "train-stage3":
            p.add_argument("--stop-after", type=int, default=None, help="stop after this many stage-3 iterations")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="checkpoint holding the actor (default: stage3 in the run dir)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = cfg.with_overrides(args.overrides)
        if args.threads is not None:
            cfg.threads = args.threads
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seeds = args.seed or [cfg.seed]
    try:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "run_manifest.json"), "w", encoding="utf-8") as fh:
            json.dump({"command": args.command, "config": cfg.to_dict(), "overrides": args.overrides,
                       "seeds": seeds, "config_hash": cfg.config_hash()}, fh, indent=2, sort_keys=True)
        for seed in seeds:
            scfg = cfg.with_overrides([f"seed={seed}"])
            scfg.threads = cfg.threads
            run_dir = os.path.join(args.out, f"seed_{seed}")
            os.makedirs(run_dir, exist_ok=True)
            COMMANDS[args.command](scfg, seed, run_dir, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, LetorParseError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
