"""Three-stage training: supervised actor, pair reward model, actor-critic."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as data_mod
from .autodiff import Tape, adam_step, apply_mlp
from .core import (
    PairEnvironment,
    PPOConfig,
    collect_trajectories,
    ppo_iteration,
    reward_margin_node,
    smooth_l1_node,
)
from .errors import CheckpointError, ConfigError, DataError
from .evaluation import evaluate_model, reward_accuracy
from .models import (
    ActorModel,
    RewardModel,
    encode_pairs,
    init_critic_from_reward,
    model_from_container,
    model_to_container,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DataConfig:
    source_path: Optional[str] = None
    target_path: Optional[str] = None
    grade_scheme: str = "clamp"
    pad_to: Optional[int] = None
    n_source: int = 300
    n_target: int = 300
    items_per_instance: int = 20
    feature_dim: int = 16
    world_seed: int = 0
    rotation_deg: float = 60.0
    target_shift: float = 0.5
    context_dims: int = 4
    context_strength: float = 0.25
    noise: float = 0.25
    test_fraction: float = 0.2
    stage3_pair_fraction: float = 0.4


@dataclass
class Stage1Config:
    epochs: int = 15
    lr: float = 3e-3
    beta: float = 0.3
    batch_size: int = 64
    hidden: int = 64
    weight_decay: float = 0.01
    val_fraction: float = 0.1


@dataclass
class Stage2Config:
    epochs: int = 15
    lr: float = 3e-3
    m_R: float = 1.0
    annotation_proportion: float = 0.1
    batch_size: int = 32
    trunk_dim: int = 64
    hidden: int = 64
    weight_decay: float = 0.01


@dataclass
class Stage3Config(PPOConfig):
    eval_every: int = 5


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    seed: int = 0
    threads: int = 1

    def validate(self):
        for name, stage in (("stage1", self.stage1), ("stage2", self.stage2)):
            if stage.lr <= 0:
                raise ConfigError(f"{name}.lr must be > 0")
            if stage.epochs < 1:
                raise ConfigError(f"{name}.epochs must be >= 1")
            if stage.batch_size < 1:
                raise ConfigError(f"{name}.batch_size must be >= 1")
        if self.stage1.beta <= 0:
            raise ConfigError("stage1.beta must be > 0")
        if self.stage2.m_R <= 0:
            raise ConfigError("stage2.m_R must be > 0")
        if not 0.0 <= self.stage2.annotation_proportion <= 1.0:
            raise ConfigError("stage2.annotation_proportion must be in [0, 1]")
        if not 0.0 < self.stage1.val_fraction < 1.0:
            raise ConfigError("stage1.val_fraction must be in (0, 1)")
        if self.data.grade_scheme not in ("clamp", "mslr"):
            raise ConfigError("data.grade_scheme must be 'clamp' or 'mslr'")
        self.stage3.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        """Digest of everything except execution-only knobs."""
        payload = self.to_dict()
        payload.pop("threads", None)
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, raw):
        return _build_dataclass(cls, raw or {}, "")

    def with_overrides(self, overrides):
        """Copy with dotted ``key=value`` overrides applied; unknown keys raise."""
        raw = self.to_dict()
        for item in overrides:
            key, eq, text = item.partition("=")
            if not eq:
                raise ConfigError(f"override {item!r} is not key=value")
            path = key.strip().split(".")
            node = raw
            for part in path[:-1]:
                if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if path[-1] not in node or isinstance(node[path[-1]], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node[path[-1]] = _parse_value(text)
        return ExperimentConfig.from_dict(raw)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _build_dataclass(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - fields.keys()
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in raw.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build_dataclass(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(default, value, prefix + name)
    return cls(**kwargs)


def _coerce(default, value, key):
    if default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}")
    return value


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def paper_scale_config():
    """Hyperparameters as reported for the full-scale experiments."""
    cfg = ExperimentConfig()
    cfg.stage1.lr = 2e-5
    cfg.stage2.lr = 2e-5
    cfg.stage3.lr = 1e-3
    cfg.stage3.n_iters = 412
    return cfg


# ---------------------------------------------------------------------------
# data

def synthetic_config(cfg, domain, seed):
    d = cfg.data
    return data_mod.SyntheticConfig(
        n_instances=d.n_source if domain == "source" else d.n_target,
        items_per_instance=d.items_per_instance, feature_dim=d.feature_dim, domain=domain, seed=seed,
        world_seed=d.world_seed, rotation_deg=d.rotation_deg, target_shift=d.target_shift,
        context_dims=d.context_dims, context_strength=d.context_strength, noise=d.noise,
    )


def load_domains(cfg, seed):
    """Source and target instances from files or the synthetic generator."""
    d = cfg.data
    if (d.source_path is None) != (d.target_path is None):
        raise ConfigError("data.source_path and data.target_path must be given together")
    if d.source_path is not None:
        try:
            source = data_mod.read_letor(d.source_path, d.grade_scheme)
            target = data_mod.read_letor(d.target_path, d.grade_scheme)
        except OSError as exc:
            raise DataError(f"cannot read data: {exc}") from exc
        source, target = list(source), list(target)
        if d.pad_to:
            source = [data_mod.pad_or_truncate(i, d.pad_to) for i in source]
            target = [data_mod.pad_or_truncate(i, d.pad_to) for i in target]
        for inst in source + target:
            if inst.item_count < 2:
                raise DataError(f"instance {inst.instance_id} has fewer than 2 items")
        if source and target and source[0].features.shape[1] != target[0].features.shape[1]:
            raise DataError("source and target feature widths differ")
        return source, target
    source = data_mod.generate_synthetic(synthetic_config(cfg, "source", seed))
    target = data_mod.generate_synthetic(synthetic_config(cfg, "target", seed))
    return source, target


def prepare_split(cfg, seed, annotation_proportion=None):
    source, target = load_domains(cfg, seed)
    prop = cfg.stage2.annotation_proportion if annotation_proportion is None else annotation_proportion
    return data_mod.build_splits(source, target, prop, cfg.data.stage3_pair_fraction, seed,
                                 cfg.data.test_fraction)


def holdout_pairs(split):
    """All unequal-grade pairs of the target test instances."""
    return data_mod.sample_pair_annotations(split.test_instances, 1.0, split.seed, stream=9)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class CheckpointSet:
    stage: str
    models: dict
    config_hash: str
    rng: dict
    iteration: int = 0
    history: list = field(default_factory=list)

    def to_dict(self):
        return {
            "format": "lrppo-checkpoint-set",
            "version": 1,
            "stage": self.stage,
            "config_hash": self.config_hash,
            "rng": self.rng,
            "iteration": self.iteration,
            "history": self.history,
            "models": {name: model_to_container(m) for name, m in self.models.items()},
        }

    @classmethod
    def from_dict(cls, raw):
        if raw.get("format") != "lrppo-checkpoint-set" or raw.get("version") != 1:
            raise CheckpointError("not a checkpoint set")
        try:
            models = {name: model_from_container(c) for name, c in raw["models"].items()}
            return cls(raw["stage"], models, raw["config_hash"], raw["rng"], raw["iteration"], raw["history"])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing {exc}") from exc


def save_checkpoint(path, ckpt):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(ckpt.to_dict(), fh)
    os.replace(tmp, path)


def load_checkpoint(path, expected_stage=None, config_hash=None):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    ckpt = CheckpointSet.from_dict(raw)
    if expected_stage is not None and ckpt.stage != expected_stage:
        raise CheckpointError(f"{path} is a {ckpt.stage} checkpoint, expected {expected_stage}")
    if config_hash is not None and ckpt.config_hash != config_hash:
        raise CheckpointError(f"{path} was written under a different configuration")
    return ckpt


# ---------------------------------------------------------------------------
# stages

def _reset_optimizer(params_list):
    for p in params_list:
        p.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in p.layers]
        p.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in p.layers]
        p.step = 0


def _validation_split(instances, fraction, seed):
    n_val = max(1, int(round(fraction * len(instances))))
    if n_val >= len(instances):
        return list(instances), []
    perm = np.random.default_rng([seed, 5]).permutation(len(instances))
    val_idx = set(perm[:n_val].tolist())
    train = [inst for k, inst in enumerate(instances) if k not in val_idx]
    val = [inst for k, inst in enumerate(instances) if k in val_idx]
    return train, val


def run_stage1(cfg, instances, seed=None, val_instances=None):
    """Fit the actor to relevance grades with smooth-L1 regression.

    Returns ``(actor, history)``.  Unless ``val_instances`` is given, a
    deterministic ``val_fraction`` of ``instances`` is held out for NDCG.
    """
    seed = cfg.seed if seed is None else seed
    s1 = cfg.stage1
    if not instances:
        raise DataError("stage 1 needs at least one instance")
    for inst in instances:
        if not inst.graded:
            raise DataError(f"stage 1 instance {inst.instance_id} has ungraded items")
    if val_instances is None:
        train, val = _validation_split(instances, s1.val_fraction, seed)
    else:
        train, val = list(instances), list(val_instances)
    X = np.vstack([inst.features for inst in train])
    y = np.concatenate([np.asarray(inst.grades, dtype=np.float64) for inst in train]).reshape(-1, 1)
    rng = np.random.default_rng([seed, 101])
    actor = ActorModel.create(X.shape[1], rng, hidden=s1.hidden)
    history = []
    for epoch in range(s1.epochs):
        order = np.random.default_rng([seed, 102, epoch]).permutation(len(X))
        losses = []
        for start in range(0, len(X), s1.batch_size):
            idx = order[start:start + s1.batch_size]
            tape = Tape()
            pred = actor.score_node(tape, X[idx])
            loss = tape.mean(smooth_l1_node(tape, pred, y[idx], s1.beta))
            grads = tape.backward(loss)
            adam_step(actor.params, grads[actor.params], s1.lr, weight_decay=s1.weight_decay)
            losses.append(loss.item())
        entry = {"stage": "stage1", "epoch": epoch, "train_loss": float(np.mean(losses))}
        if val:
            row = evaluate_model(actor, val, split="stage1_val", iteration=epoch, seed=seed)
            entry.update({f"val_ndcg{k}": v for k, v in row.ndcg.items()})
        history.append(entry)
        logger.info("stage1 epoch %d loss %.4f", epoch, entry["train_loss"])
    return actor, history


def _pair_batches(pairs, lookup):
    """Encode every pair once: initial order, true order, flipped order."""
    feats = {p.instance_id: lookup[p.instance_id].features for p in pairs}
    ids = [p.instance_id for p in pairs]
    ini = [p.initial for p in pairs]
    enc_ini = encode_pairs(feats, ids, [a for a, _ in ini], [b for _, b in ini])
    enc_c = encode_pairs(feats, ids, [p.preferred_index for p in pairs], [p.other_index for p in pairs])
    enc_f = encode_pairs(feats, ids, [p.other_index for p in pairs], [p.preferred_index for p in pairs])
    return enc_ini, enc_c, enc_f


def run_stage2(cfg, pairs, lookup, feature_dim=None, seed=None, eval_pairs=None, eval_lookup=None):
    """Train the reward model on oriented preference pairs with the margin loss.

    ``lookup`` maps instance id to instance (grades are not read).
    Returns ``(reward_model, history)``.
    """
    seed = cfg.seed if seed is None else seed
    s2 = cfg.stage2
    if not pairs:
        raise DataError("stage 2 needs at least one preference pair")
    enc_ini, enc_c, enc_f = _pair_batches(pairs, lookup)
    feature_dim = feature_dim or enc_ini.shape[1] // 2
    rng = np.random.default_rng([seed, 201])
    model = RewardModel.create(feature_dim, rng, trunk_dim=s2.trunk_dim, hidden=s2.hidden)
    history = []
    for epoch in range(s2.epochs):
        order = np.random.default_rng([seed, 202, epoch]).permutation(len(pairs))
        losses = []
        for start in range(0, len(pairs), s2.batch_size):
            idx = order[start:start + s2.batch_size]
            tape = Tape()
            trunk_ini = apply_mlp(tape, model.trunk, enc_ini[idx])
            r_correct = model.node(tape, None, enc_c[idx], initial_trunk=trunk_ini)
            r_flipped = model.node(tape, None, enc_f[idx], initial_trunk=trunk_ini)
            loss = tape.mean(reward_margin_node(tape, r_correct, r_flipped, s2.m_R))
            grads = tape.backward(loss)
            for params in model.parameters():
                adam_step(params, grads[params], s2.lr, weight_decay=s2.weight_decay)
            losses.append(loss.item())
        train_acc = float(np.mean(model.forward_array(enc_ini, enc_c) > model.forward_array(enc_ini, enc_f)))
        entry = {"stage": "stage2", "epoch": epoch, "train_loss": float(np.mean(losses)),
                 "train_accuracy": train_acc}
        if eval_pairs:
            entry["heldout_accuracy"] = reward_accuracy(model, eval_pairs, eval_lookup or lookup)
        history.append(entry)
        logger.info("stage2 epoch %d loss %.4f acc %.3f", epoch, entry["train_loss"], train_acc)
    return model, history


@dataclass
class Stage3State:
    actor: ActorModel
    critic: object
    reward: RewardModel
    reference: ActorModel
    iteration: int = 0
    history: list = field(default_factory=list)


def init_stage3(cfg, actor, reward_model, seed=None):
    """Fresh stage-3 state: actor copy, critic from the reward trunk, frozen reference."""
    seed = cfg.seed if seed is None else seed
    if actor is None or reward_model is None:
        raise CheckpointError("stage 3 needs both the stage-1 actor and the stage-2 reward model")
    policy = actor.copy()
    critic = init_critic_from_reward(reward_model, seed=seed)
    _reset_optimizer([policy.params] + critic.parameters())
    return Stage3State(policy, critic, reward_model, actor.copy())


def stage3_checkpoint(cfg, state, seed):
    return CheckpointSet(
        stage="stage3",
        models={"actor": state.actor, "critic": state.critic, "reward": state.reward,
                "reference": state.reference},
        config_hash=cfg.config_hash(),
        # every random draw in stage 3 is derived from (seed, iteration)
        rng={"seed": seed, "next_iteration": state.iteration},
        iteration=state.iteration,
        history=state.history,
    )


def resume_stage3(cfg, ckpt):
    if ckpt.stage != "stage3":
        raise CheckpointError(f"expected a stage3 checkpoint, got {ckpt.stage}")
    if ckpt.config_hash != cfg.config_hash():
        raise CheckpointError("stage3 checkpoint was written under a different configuration")
    m = ckpt.models
    return Stage3State(m["actor"], m["critic"], m["reward"], m["reference"], ckpt.iteration, list(ckpt.history))


def run_stage3(cfg, state, split, seed=None, stop_after=None, threads=None, callback=None):
    """Run actor-critic iterations until ``n_iters`` (or ``stop_after``) is reached.

    Only ungraded target training instances and the frozen reward model
    drive the updates; test NDCG is logged every ``eval_every`` iterations.
    Returns the updated ``state``.
    """
    seed = cfg.seed if seed is None else seed
    s3 = cfg.stage3
    threads = cfg.threads if threads is None else threads
    env = PairEnvironment(split.stage3_pairs, split.stage3_instances)
    end = s3.n_iters if stop_after is None else min(s3.n_iters, stop_after)
    while state.iteration < end:
        it = state.iteration
        records = collect_trajectories(state.actor, state.reward, state.critic, env, s3, seed, it,
                                       reference=state.reference, threads=threads)
        diag = ppo_iteration(records, state.actor, state.critic, s3, seed, it, env)
        diag["stage"] = "stage3"
        if s3.eval_every and ((it + 1) % s3.eval_every == 0 or it + 1 == s3.n_iters):
            row = evaluate_model(state.actor, split.test_instances, iteration=it + 1, seed=seed)
            diag.update({f"test_ndcg{k}": v for k, v in row.ndcg.items()})
        state.history.append(diag)
        state.iteration = it + 1
        if callback is not None:
            callback(state, diag)
        logger.info("stage3 iter %d reward %.4f policy %.4f", it, diag["mean_reward"], diag["policy_loss"])
    return state


# ---------------------------------------------------------------------------
# end to end

def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class RunResult:
    stage1_actor: ActorModel
    reward: RewardModel
    final_actor: ActorModel
    metrics: list
    histories: dict
    split: object


def train_all(cfg, seed=None, out_dir=None, split=None):
    """Stages 1 -> 2 -> 3 and side-by-side test metrics of the stage-1 and final actors."""
    seed = cfg.seed if seed is None else seed
    cfg.validate()
    split = split or prepare_split(cfg, seed)
    lookup = split.instances_by_id()
    h_pairs = holdout_pairs(split)

    actor, h1 = run_stage1(cfg, split.stage1_instances, seed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "stage1.ckpt.json"),
                        CheckpointSet("stage1", {"actor": actor}, cfg.config_hash(), {"seed": seed}, 0, h1))
    reward, h2 = run_stage2(cfg, split.stage2_pairs, lookup, seed=seed, eval_pairs=h_pairs)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "stage2.ckpt.json"),
                        CheckpointSet("stage2", {"reward": reward}, cfg.config_hash(), {"seed": seed}, 0, h2))
    state = init_stage3(cfg, actor, reward, seed)
    state = run_stage3(cfg, state, split, seed)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "stage3.ckpt.json"), stage3_checkpoint(cfg, state, seed))

    acc = reward_accuracy(reward, h_pairs, lookup) if h_pairs else None
    rows = [evaluate_model(actor, split.test_instances, split="stage1", seed=seed),
            evaluate_model(state.actor, split.test_instances, split="final", iteration=state.iteration, seed=seed)]
    rows[1].reward_acc = acc
    histories = {"stage1": h1, "stage2": h2, "stage3": state.history}
    return RunResult(actor, reward, state.actor, rows, histories, split)
