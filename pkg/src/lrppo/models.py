"""Actor, reward and critic networks over pair-state encodings."""

from __future__ import annotations

import json

import numpy as np

from .autodiff import ScorerParams, apply_mlp, forward_array
from .errors import CheckpointError, ShapeError

CHECKPOINT_FORMAT = "lrppo-checkpoint"
CHECKPOINT_VERSION = 1


def encode_pair(features, first, second):
    """State vector for a pair: first item's features followed by the second's."""
    return np.concatenate([features[first], features[second]])


def encode_pairs(features_by_instance, instance_ids, firsts, seconds):
    """Batch version of :func:`encode_pair`; returns ``(n, 2 * dim)``."""
    rows = [np.concatenate([features_by_instance[iid][a], features_by_instance[iid][b]])
            for iid, a, b in zip(instance_ids, firsts, seconds)]
    return np.stack(rows)


def policy_distribution(p1, p2, temperature=1.0):
    """Probabilities of keeping (``order12``) or swapping (``order21``) a pair."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = np.array([p1, p2], dtype=np.float64) / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


class ActorModel:
    kind = "actor"

    def __init__(self, params):
        if params.output_dim != 1:
            raise ShapeError("actor must emit one score per item")
        self.params = params

    @classmethod
    def create(cls, feature_dim, rng, hidden=64, activation="tanh"):
        return cls(ScorerParams.init([feature_dim, hidden, 1], rng, activation=activation))

    @property
    def feature_dim(self):
        return self.params.input_dim

    def score_items(self, features):
        return forward_array(self.params, features)[:, 0]

    def score_node(self, tape, features):
        return apply_mlp(tape, self.params, features)

    def copy(self):
        return ActorModel(self.params.copy())

    def to_dict(self):
        return {"params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, data):
        return cls(ScorerParams.from_dict(data["params"]))

    def equals(self, other):
        return self.params.equals(other.params)


def actor_scores(actor, pair_state):
    """Scores ``(p1, p2)`` of the two items in an encoded pair state."""
    pair_state = np.asarray(pair_state, dtype=np.float64)
    d = actor.feature_dim
    if pair_state.shape != (2 * d,):
        raise ShapeError(f"pair state must have length {2 * d}, got shape {pair_state.shape}")
    s = actor.score_items(pair_state.reshape(2, d))
    return float(s[0]), float(s[1])


class RewardModel:
    """``R = head([trunk(initial pair), trunk(candidate pair)])``."""

    kind = "reward"

    def __init__(self, trunk, head):
        if head.input_dim != 2 * trunk.output_dim or head.output_dim != 1:
            raise ShapeError("reward head must map 2 * trunk_dim -> 1")
        self.trunk = trunk
        self.head = head

    @classmethod
    def create(cls, feature_dim, rng, trunk_dim=64, hidden=64, activation="tanh"):
        trunk = ScorerParams.init([2 * feature_dim, trunk_dim], rng, activation=activation,
                                  final_activation=True)
        head = ScorerParams.init([2 * trunk_dim, hidden, 1], rng, activation=activation)
        return cls(trunk, head)

    @property
    def feature_dim(self):
        return self.trunk.input_dim // 2

    def parameters(self):
        return [self.trunk, self.head]

    def forward_array(self, initial, candidate):
        h = np.hstack([forward_array(self.trunk, initial), forward_array(self.trunk, candidate)])
        return forward_array(self.head, h)[:, 0]

    def node(self, tape, initial, candidate, initial_trunk=None):
        """Reward node; pass ``initial_trunk`` to reuse an already recorded trunk output."""
        h_ini = initial_trunk if initial_trunk is not None else apply_mlp(tape, self.trunk, initial)
        h_cand = apply_mlp(tape, self.trunk, candidate)
        return apply_mlp(tape, self.head, tape.concat(h_ini, h_cand))

    def score_pairs(self, pairs, lookup):
        """Rewards of each pair in true order and flipped, both seen from the initial order."""
        feats = {p.instance_id: lookup[p.instance_id].features for p in pairs}
        ids = [p.instance_id for p in pairs]
        ini = [p.initial for p in pairs]
        enc_ini = encode_pairs(feats, ids, [a for a, _ in ini], [b for _, b in ini])
        enc_c = encode_pairs(feats, ids, [p.preferred_index for p in pairs], [p.other_index for p in pairs])
        enc_f = encode_pairs(feats, ids, [p.other_index for p in pairs], [p.preferred_index for p in pairs])
        return self.forward_array(enc_ini, enc_c), self.forward_array(enc_ini, enc_f)

    def copy(self):
        return RewardModel(self.trunk.copy(), self.head.copy())

    def to_dict(self):
        return {"trunk": self.trunk.to_dict(), "head": self.head.to_dict()}

    @classmethod
    def from_dict(cls, data):
        return cls(ScorerParams.from_dict(data["trunk"]), ScorerParams.from_dict(data["head"]))

    def equals(self, other):
        return self.trunk.equals(other.trunk) and self.head.equals(other.head)


def reward_forward(reward_model, initial_pair, candidate_pair):
    """Scalar reward for two encoded pairs from the same instance."""
    ini = np.asarray(initial_pair, dtype=np.float64).reshape(1, -1)
    cand = np.asarray(candidate_pair, dtype=np.float64).reshape(1, -1)
    width = reward_model.trunk.input_dim
    if ini.shape[1] != width or cand.shape[1] != width:
        raise ShapeError(f"pair encodings must have length {width}")
    return float(reward_model.forward_array(ini, cand)[0])


class CriticModel:
    """``V(s) = value_head(trunk(s))``."""

    kind = "critic"

    def __init__(self, trunk, value_head):
        if value_head.input_dim != trunk.output_dim or value_head.output_dim != 1:
            raise ShapeError("value head must map trunk_dim -> 1")
        self.trunk = trunk
        self.value_head = value_head

    def parameters(self):
        return [self.trunk, self.value_head]

    def forward_array(self, states):
        return forward_array(self.value_head, forward_array(self.trunk, states))[:, 0]

    def node(self, tape, states):
        return apply_mlp(tape, self.value_head, apply_mlp(tape, self.trunk, states))

    def copy(self):
        return CriticModel(self.trunk.copy(), self.value_head.copy())

    def to_dict(self):
        return {"trunk": self.trunk.to_dict(), "value_head": self.value_head.to_dict()}

    @classmethod
    def from_dict(cls, data):
        return cls(ScorerParams.from_dict(data["trunk"]), ScorerParams.from_dict(data["value_head"]))

    def equals(self, other):
        return self.trunk.equals(other.trunk) and self.value_head.equals(other.value_head)


def critic_value(critic, pair_state):
    s = np.asarray(pair_state, dtype=np.float64).reshape(1, -1)
    if s.shape[1] != critic.trunk.input_dim:
        raise ShapeError(f"pair state must have length {critic.trunk.input_dim}")
    return float(critic.forward_array(s)[0])


def init_critic_from_reward(reward_model, seed=0, head_scale=0.1):
    """Critic sharing a deep copy of the reward trunk and a fresh value head."""
    src = reward_model.trunk
    trunk = ScorerParams([(w.copy(), b.copy()) for w, b in src.layers],
                         activation=src.activation, final_activation=src.final_activation)
    rng = np.random.default_rng([seed, 11])
    head = ScorerParams.init([trunk.output_dim, 1], rng, activation=src.activation, scale=head_scale)
    return CriticModel(trunk, head)


MODEL_KINDS = {cls.kind: cls for cls in (ActorModel, RewardModel, CriticModel)}


def model_to_container(model):
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": model.kind,
            "model": model.to_dict()}


def model_from_container(data, expected_kind=None):
    if data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a model checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data.get('version')!r}")
    kind = data.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"checkpoint holds a {kind!r} model, expected {expected_kind!r}")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    try:
        return MODEL_KINDS[kind].from_dict(data["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt {kind} checkpoint: {exc}") from exc


def save_model(path, model):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_container(model), fh)


def load_model(path, expected_kind=None):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_container(data, expected_kind)
