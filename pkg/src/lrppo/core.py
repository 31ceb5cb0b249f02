"""Losses and the actor-critic update with the partial-order policy ratio.

Each loss has a tape-level form (``*_node``) used in training and a scalar
wrapper that evaluates the same tape code on constants.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, adam_step
from .errors import ConfigError, NonFiniteError, ShapeError

RATIO_MODES = ("partial_order", "original", "original_clipped")
KL_PLACEMENTS = ("in_loss", "subtracted_from_reward")
ORDER12, ORDER21 = 0, 1
# trajectories are evaluated in fixed-size chunks so results do not depend on threading
COLLECT_CHUNK = 64


@dataclass
class PPOConfig:
    gamma: float = 0.0
    T: int = 1
    n_trajs: int = 200
    k_epochs: int = 1
    minibatch: int = 24
    n_iters: int = 50
    m: float = 1.0
    m_R: float = 1.0
    delta: float = -0.1
    c1: float = 1.0
    c2: float = 1e-3
    c3: float = 1e-3
    clip_epsilon: float = 0.2
    ratio_mode: str = "partial_order"
    kl_placement: str = "subtracted_from_reward"
    temperature: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.minibatch > self.n_trajs * self.T:
            raise ConfigError("minibatch must be <= n_trajs * T")
        if self.minibatch < 1 or self.n_trajs < 1 or self.T < 1 or self.k_epochs < 1 or self.n_iters < 0:
            raise ConfigError("minibatch, n_trajs, T and k_epochs must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        if self.m <= 0 or self.m_R <= 0:
            raise ConfigError("margins must be > 0")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigError("clip_epsilon must be in (0, 1)")
        if self.ratio_mode not in RATIO_MODES:
            raise ConfigError(f"ratio_mode must be one of {RATIO_MODES}")
        if self.kl_placement not in KL_PLACEMENTS:
            raise ConfigError(f"kl_placement must be one of {KL_PLACEMENTS}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        return self


# ---------------------------------------------------------------------------
# tape-level losses

def _col(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1)


def smooth_l1_node(tape, p, y, beta):
    """Elementwise smooth-L1: quadratic below ``beta``, linear above."""
    diff = tape.add(p, tape.mul(tape._lift(y), -1.0))
    a = tape.abs(diff)
    q = tape.minimum(a, tape.constant(np.full(a.shape, float(beta))))
    quad = tape.mul(tape.mul(q, q), 0.5 / beta)
    return tape.add(quad, tape.add(a, tape.mul(q, -1.0)))


def hinge_node(tape, margin, gap):
    """``max(0, margin - gap)``."""
    return tape.maximum(tape.add(tape.mul(gap, -1.0), float(margin)), 0.0)


def reward_margin_node(tape, r_correct, r_flipped, m_R):
    return hinge_node(tape, m_R, tape.add(r_correct, tape.mul(r_flipped, -1.0)))


def partial_order_node(tape, p1, p2, m):
    return hinge_node(tape, m, tape.add(p1, tape.mul(p2, -1.0)))


def partial_order_ratio_node(tape, p1, p2, advantages, delta, m):
    """``-H(p1, p2)`` where the advantage reaches ``delta``, else ``-H(p2, p1)``."""
    sign = np.where(_col(advantages) >= delta, 1.0, -1.0)
    gap = tape.mul(tape.add(p1, tape.mul(p2, -1.0)), sign)
    return tape.mul(hinge_node(tape, m, gap), -1.0)


def policy_loss_partial_node(tape, ratios, advantages):
    return tape.mul(tape.mean(tape.mul(ratios, np.abs(_col(advantages)))), -1.0)


def policy_loss_original_node(tape, ratios, advantages):
    return tape.mul(tape.mean(tape.mul(ratios, _col(advantages))), -1.0)


def clipped_policy_loss_node(tape, ratios, advantages, epsilon):
    adv = _col(advantages)
    plain = tape.mul(ratios, adv)
    clipped = tape.mul(tape.clip(ratios, 1.0 - epsilon, 1.0 + epsilon), adv)
    return tape.mul(tape.mean(tape.minimum(plain, clipped)), -1.0)


def value_loss_node(tape, values, targets):
    diff = tape.add(values, tape.mul(tape._lift(_col(targets)), -1.0))
    return tape.mean(tape.mul(diff, diff))


_TINY = 1e-300


def entropy_node(tape, probs):
    """Batch mean of ``-sum_a p log p`` for a ``(batch, actions)`` node."""
    logp = tape.log(tape.maximum(probs, _TINY))
    per_row = tape.row_sum(tape.mul(probs, logp))
    return tape.mul(tape.mean(per_row), -1.0)


def kl_node(tape, old_probs, new_probs):
    """Batch mean of ``KL(old || new)``; ``old_probs`` is a constant array."""
    old = np.asarray(old_probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        old_log = np.where(old > 0, np.log(np.where(old > 0, old, 1.0)), 0.0)
    new_log = tape.log(new_probs)
    diff = tape.add(tape.mul(new_log, -1.0), old_log)
    return tape.mean(tape.row_sum(tape.mul(diff, old)))


def total_loss_node(tape, policy, value, entropy, kl, c1, c2, c3, kl_placement="in_loss"):
    out = tape.add(policy, tape.mul(value, float(c1)))
    out = tape.add(out, tape.mul(entropy, -float(c2)))
    if kl_placement == "in_loss":
        out = tape.add(out, tape.mul(kl, float(c3)))
    elif kl_placement != "subtracted_from_reward":
        raise ConfigError(f"unknown kl_placement {kl_placement!r}")
    return out


# ---------------------------------------------------------------------------
# scalar forms

def _scalar(build):
    tape = Tape()
    return build(tape).item()


def smooth_l1(p, y, beta):
    if beta <= 0:
        raise ValueError("beta must be > 0")
    return _scalar(lambda t: smooth_l1_node(t, t.constant(p), y, beta))


def reward_margin_loss(r_correct, r_flipped, m_R):
    if m_R <= 0:
        raise ValueError("m_R must be > 0")
    return _scalar(lambda t: reward_margin_node(t, t.constant(r_correct), t.constant(r_flipped), m_R))


def target_value(rewards, gamma, v_old_terminal):
    """Discounted reward-to-go plus the discounted old terminal value."""
    rewards = list(rewards)
    if not rewards:
        raise ValueError("rewards must be nonempty")
    total = 0.0
    for i, r in enumerate(rewards):
        total += gamma ** i * r
    return total + gamma ** len(rewards) * v_old_terminal


def advantage(v_target, v_old_state):
    return v_target - v_old_state


def partial_order(p1, p2, m):
    if m <= 0:
        raise ValueError("m must be > 0")
    return _scalar(lambda t: partial_order_node(t, t.constant(p1), t.constant(p2), m))


def partial_order_ratio(p1, p2, adv, delta, m):
    if m <= 0:
        raise ValueError("m must be > 0")
    return _scalar(lambda t: partial_order_ratio_node(t, t.constant(p1), t.constant(p2), [adv], delta, m))


def _check_lengths(a, b):
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise ShapeError(f"length mismatch: {len(a)} vs {len(b)}")
    if not a:
        raise ShapeError("empty batch")
    return a, b


def policy_loss_partial(ratios, advantages):
    ratios, advantages = _check_lengths(ratios, advantages)
    return _scalar(lambda t: policy_loss_partial_node(t, t.constant(_col(ratios)), advantages))


def original_ratio(pi_new, pi_old):
    if pi_old <= 0:
        raise ValueError("pi_old must be > 0")
    return pi_new / pi_old


def clipped_policy_loss(ratios, advantages, epsilon):
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must be in (0, 1)")
    ratios, advantages = _check_lengths(ratios, advantages)
    return _scalar(lambda t: clipped_policy_loss_node(t, t.constant(_col(ratios)), advantages, epsilon))


def value_loss(values, targets):
    values, targets = _check_lengths(values, targets)
    return _scalar(lambda t: value_loss_node(t, t.constant(_col(values)), targets))


def _as_dists(dist):
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim == 1:
        d = d.reshape(1, -1)
    if np.any(d < 0):
        raise ValueError("negative probability")
    if np.any(np.abs(d.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("probabilities must sum to 1")
    return d


def entropy_bonus(dist):
    """Mean entropy (nats) of one distribution or a batch of them."""
    d = _as_dists(dist)
    return _scalar(lambda t: entropy_node(t, t.constant(d)))


def kl_penalty(old_dist, new_dist):
    """Mean ``KL(old || new)`` over a batch."""
    old, new = _as_dists(old_dist), _as_dists(new_dist)
    if old.shape != new.shape:
        raise ShapeError("distribution shapes differ")
    if np.any((old > 0) & (new <= 0)):
        raise ValueError("new distribution has zero mass where old has support")
    return _scalar(lambda t: kl_node(t, old, t.constant(new)))


def total_loss(policy_loss, value_loss_, entropy, kl, c1, c2, c3, kl_placement="in_loss"):
    return _scalar(lambda t: total_loss_node(t, t.constant(policy_loss), t.constant(value_loss_),
                                             t.constant(entropy), t.constant(kl), c1, c2, c3, kl_placement))


def policy_probs(p1, p2, temperature):
    """Row-wise 2-way softmax of score columns (numpy)."""
    z = np.hstack([_col(p1), _col(p2)]) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kl_rows(old, new):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(old > 0, old * (np.log(np.where(old > 0, old, 1.0)) - np.log(new)), 0.0)
    return terms.sum(axis=1)


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class TrajectoryRecord:
    instance_id: str
    first: int
    second: int
    state: np.ndarray
    action: int
    reward: float
    old_prob: float
    old_dist: np.ndarray
    old_value: float
    terminal_value: float
    target: float
    advantage: float
    kl: float = 0.0

    @property
    def ordered(self):
        """Item indices in the order chosen by the action."""
        return (self.first, self.second) if self.action == ORDER12 else (self.second, self.first)


class PairEnvironment:
    """Pairs of items from ungraded instances; the state is a pair order."""

    def __init__(self, pairs, instances):
        if not pairs:
            raise ValueError("empty pair pool")
        self.pairs = list(pairs)
        self.features = {inst.instance_id: inst.features for inst in instances}
        missing = {p.instance_id for p in self.pairs} - self.features.keys()
        if missing:
            raise KeyError(f"pairs reference unknown instances: {sorted(missing)[:5]}")

    def encode(self, ids, firsts, seconds):
        return np.stack([np.concatenate([self.features[i][a], self.features[i][b]])
                         for i, a, b in zip(ids, firsts, seconds)])

    def item_features(self, ids, idx):
        return np.stack([self.features[i][a] for i, a in zip(ids, idx)])


def _collect_chunk(actor, reward_model, critic, env, config, draws, reference):
    """Roll out one chunk of trajectories; ``draws`` is a list of (pair_index, uniforms)."""
    T = config.T
    pairs = [env.pairs[k] for k, _ in draws]
    ids = [p.instance_id for p in pairs]
    first = np.array([p.preferred_index for p in pairs])
    second = np.array([p.other_index for p in pairs])
    uniforms = np.array([u for _, u in draws])
    steps = []
    for t in range(T):
        state = env.encode(ids, first, second)
        p1 = actor.score_items(env.item_features(ids, first))
        p2 = actor.score_items(env.item_features(ids, second))
        dist = policy_probs(p1, p2, config.temperature)
        action = np.where(uniforms[:, t] < dist[:, 0], ORDER12, ORDER21)
        nf = np.where(action == ORDER12, first, second)
        ns = np.where(action == ORDER12, second, first)
        reward = reward_model.forward_array(state, env.encode(ids, nf, ns))
        kl = np.zeros(len(pairs))
        if reference is not None:
            q1 = reference.score_items(env.item_features(ids, first))
            q2 = reference.score_items(env.item_features(ids, second))
            kl = kl_rows(policy_probs(q1, q2, config.temperature), dist)
        if config.kl_placement == "subtracted_from_reward":
            reward = reward - config.c3 * kl
        old_value = critic.forward_array(state)
        steps.append((first, second, state, action, reward, dist, old_value, kl))
        first, second = nf, ns
    terminal = critic.forward_array(env.encode(ids, first, second))
    out = []
    for n in range(len(pairs)):
        rewards = [steps[t][4][n] for t in range(T)]
        for t, (f, s, state, action, reward, dist, old_value, kl) in enumerate(steps):
            target = target_value(rewards[t:], config.gamma, terminal[n])
            out.append(TrajectoryRecord(
                instance_id=ids[n], first=int(f[n]), second=int(s[n]), state=state[n],
                action=int(action[n]), reward=float(reward[n]),
                old_prob=float(dist[n, action[n]]), old_dist=dist[n].copy(),
                old_value=float(old_value[n]), terminal_value=float(terminal[n]),
                target=float(target), advantage=float(advantage(target, old_value[n])), kl=float(kl[n]),
            ))
    return out


def trajectory_draws(n_pairs, config, seed, iteration):
    """Per-trajectory random streams: stream id is the trajectory index."""
    draws = []
    for k in range(config.n_trajs):
        rng = np.random.default_rng([seed, iteration, k])
        draws.append((int(rng.integers(n_pairs)), rng.random(config.T)))
    return draws


def collect_trajectories(actor, reward_model, critic, env, config, seed, iteration=0,
                         reference=None, threads=1):
    """Sample ``n_trajs`` pairs and roll each out for ``T`` steps.

    ``reference`` is the policy the per-step KL is measured against when the
    penalty is subtracted from the reward.  Output order and values do not
    depend on ``threads``.
    """
    if isinstance(env, (list, tuple)):
        raise TypeError("pass a PairEnvironment")
    if not env.pairs:
        raise ValueError("empty pair pool")
    draws = trajectory_draws(len(env.pairs), config, seed, iteration)
    chunks = [draws[i:i + COLLECT_CHUNK] for i in range(0, len(draws), COLLECT_CHUNK)]

    def run(chunk):
        return _collect_chunk(actor, reward_model, critic, env, config, chunk, reference)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    # trajectory-major: record (k, t) sits at k * T + t
    return [rec for part in parts for rec in part]


# ---------------------------------------------------------------------------
# update

@dataclass
class BatchTerms:
    loss: object
    policy: object
    value: object
    entropy: object
    kl: object
    score_gap: float


def build_loss(tape, records, actor, critic, config, env):
    """Record the total loss for a minibatch on ``tape``."""
    ids = [r.instance_id for r in records]
    first = np.array([r.first for r in records])
    second = np.array([r.second for r in records])
    actions = np.array([r.action for r in records])
    adv = np.array([r.advantage for r in records])
    n = len(records)

    p_s1 = actor.score_node(tape, env.item_features(ids, first))
    p_s2 = actor.score_node(tape, env.item_features(ids, second))
    logits = tape.mul(tape.concat(p_s1, p_s2), 1.0 / config.temperature)
    probs = tape.softmax(logits)

    keep = _col(actions == ORDER12).astype(np.float64)
    swap = 1.0 - keep
    # scores in the order the action put the items
    p_first = tape.add(tape.mul(p_s1, keep), tape.mul(p_s2, swap))
    p_second = tape.add(tape.mul(p_s2, keep), tape.mul(p_s1, swap))

    if config.ratio_mode == "partial_order":
        ratios = partial_order_ratio_node(tape, p_first, p_second, adv, config.delta, config.m)
        policy = policy_loss_partial_node(tape, ratios, adv)
    else:
        onehot = np.zeros((n, 2))
        onehot[np.arange(n), actions] = 1.0
        pi_new = tape.row_sum(tape.mul(probs, onehot))
        old = _col([r.old_prob for r in records])
        if np.any(old <= 0):
            raise ValueError("old action probability must be > 0")
        ratios = tape.mul(pi_new, 1.0 / old)
        if config.ratio_mode == "original":
            policy = policy_loss_original_node(tape, ratios, adv)
        else:
            policy = clipped_policy_loss_node(tape, ratios, adv, config.clip_epsilon)

    states = np.stack([r.state for r in records])
    values = critic.node(tape, states)
    vloss = value_loss_node(tape, values, [r.target for r in records])
    ent = entropy_node(tape, probs)
    kl = kl_node(tape, np.stack([r.old_dist for r in records]), probs)
    loss = total_loss_node(tape, policy, vloss, ent, kl, config.c1, config.c2, config.c3, config.kl_placement)
    gap = float(np.max(np.abs(p_s1.value - p_s2.value)))
    return BatchTerms(loss, policy, vloss, ent, kl, gap)


def ppo_iteration(records, actor, critic, config, seed, iteration=0, env=None):
    """K epochs of shuffled minibatch AdamW steps on actor and critic.

    Returns scalar diagnostics.  The caller's next collection uses the updated
    networks, which is the old-policy sync.
    """
    if len(records) < config.minibatch:
        raise ValueError(f"need at least {config.minibatch} records, got {len(records)}")
    rng = np.random.default_rng([seed, iteration, 1_000_003])
    critic_params = critic.parameters()
    num_batches = len(records) // config.minibatch
    sums = {"policy_loss": [], "value_loss": [], "entropy": [], "kl": [], "total_loss": []}
    bound_ratio = 0.0
    steps = 0
    for _ in range(config.k_epochs):
        order = rng.permutation(len(records))
        for b in range(num_batches):
            batch = [records[i] for i in order[b * config.minibatch:(b + 1) * config.minibatch]]
            tape = Tape()
            terms = build_loss(tape, batch, actor, critic, config, env)
            values = {
                "policy_loss": terms.policy.item(), "value_loss": terms.value.item(),
                "entropy": terms.entropy.item(), "kl": terms.kl.item(), "total_loss": terms.loss.item(),
            }
            if not all(math.isfinite(v) for v in values.values()):
                raise NonFiniteError(f"non-finite loss at iteration {iteration}", dict(values, iteration=iteration))
            if config.ratio_mode == "partial_order":
                bound = np.mean([abs(r.advantage) for r in batch]) * (config.m + terms.score_gap)
                if bound > 0:
                    bound_ratio = max(bound_ratio, abs(values["policy_loss"]) / bound)
                elif abs(values["policy_loss"]) > 0:
                    bound_ratio = math.inf
            grads = tape.backward(terms.loss)
            adam_step(actor.params, grads[actor.params], config.lr, config.beta1, config.beta2,
                      config.eps, config.weight_decay)
            for params in critic_params:
                adam_step(params, grads[params], config.lr, config.beta1, config.beta2,
                          config.eps, config.weight_decay)
            for key, v in values.items():
                sums[key].append(v)
            steps += 1
    diag = {k: float(np.mean(v)) for k, v in sums.items()}
    diag.update(
        iteration=iteration,
        gradient_steps=steps,
        mean_reward=float(np.mean([r.reward for r in records])),
        mean_advantage=float(np.mean([r.advantage for r in records])),
        mean_abs_advantage=float(np.mean([abs(r.advantage) for r in records])),
        mean_value=float(np.mean([r.old_value for r in records])),
        policy_bound_ratio=float(bound_ratio),
    )
    return diag
