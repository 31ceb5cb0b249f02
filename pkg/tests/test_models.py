import math

import numpy as np
import pytest

from lrppo.autodiff import ScorerParams
from lrppo.errors import CheckpointError, ShapeError
from lrppo.models import (
    ActorModel,
    CriticModel,
    RewardModel,
    actor_scores,
    critic_value,
    encode_pair,
    init_critic_from_reward,
    load_model,
    model_from_container,
    model_to_container,
    policy_distribution,
    reward_forward,
    save_model,
)

DIM = 4


def seed7_pair():
    return np.random.default_rng(7).normal(size=(2, DIM))


def mlp_oracle(params, x):
    """Plain-Python forward pass, one unit at a time."""
    h = [float(v) for v in x]
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        out = []
        for r in range(w.shape[0]):
            z = float(b[r])
            for c in range(w.shape[1]):
                z += float(w[r, c]) * h[c]
            if i < last or params.final_activation:
                z = math.tanh(z) if params.activation == "tanh" else max(z, 0.0)
            out.append(z)
        h = out
    return h


# ---------------------------------------------------------------------------
# actor


def test_zero_actor_scores_are_bias():
    actor = ActorModel(ScorerParams.zeros([DIM, 3, 1], bias=0.4))
    p1, p2 = actor_scores(actor, seed7_pair().ravel())
    # hidden tanh(0.4) feeds zero output weights, so only the output bias remains
    assert p1 == p2 == 0.4


def test_swapping_items_swaps_scores():
    actor = ActorModel.create(DIM, np.random.default_rng(42), hidden=5)
    a, b = seed7_pair()
    p1, p2 = actor_scores(actor, encode_pair(np.stack([a, b]), 0, 1))
    q1, q2 = actor_scores(actor, encode_pair(np.stack([a, b]), 1, 0))
    assert (p1, p2) == (q2, q1)


def test_actor_matches_oracle():
    actor = ActorModel.create(DIM, np.random.default_rng(42), hidden=5)
    a, b = seed7_pair()
    p1, p2 = actor_scores(actor, np.concatenate([a, b]))
    assert p1 == pytest.approx(mlp_oracle(actor.params, a)[0], abs=1e-14)
    assert p2 == pytest.approx(mlp_oracle(actor.params, b)[0], abs=1e-14)


def test_item_score_independent_of_partner():
    actor = ActorModel.create(DIM, np.random.default_rng(1))
    feats = np.random.default_rng(2).normal(size=(5, DIM))
    first = {actor_scores(actor, encode_pair(feats, 0, j))[0] for j in range(1, 5)}
    assert len(first) == 1


def test_actor_shape_errors():
    actor = ActorModel.create(DIM, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        actor_scores(actor, np.zeros(2 * DIM + 1))
    with pytest.raises(ShapeError):
        ActorModel(ScorerParams.zeros([DIM, 2]))


# ---------------------------------------------------------------------------
# policy distribution


def test_policy_distribution_values():
    assert policy_distribution(0.3, 0.3).tolist() == [0.5, 0.5]
    probs = policy_distribution(1.0, 0.0)
    assert probs[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
    assert probs.tolist() == pytest.approx([0.7311, 0.2689], abs=1e-4)
    assert policy_distribution(1.0, 0.9, temperature=1e-4)[0] == pytest.approx(1.0)
    assert policy_distribution(400.0, -400.0, temperature=0.01).sum() == 1.0


def test_policy_distribution_translation_invariant():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p1, p2, c = rng.normal(size=3) * 5
        np.testing.assert_allclose(policy_distribution(p1, p2), policy_distribution(p1 + c, p2 + c), atol=1e-15)


def test_policy_distribution_rejects_bad_temperature():
    with pytest.raises(ValueError):
        policy_distribution(0.0, 1.0, temperature=0.0)


# ---------------------------------------------------------------------------
# reward and critic


def seed3_reward():
    return RewardModel.create(DIM, np.random.default_rng(3), trunk_dim=6, hidden=5)


def test_zero_reward_model_returns_head_bias():
    trunk = ScorerParams.zeros([2 * DIM, 3], final_activation=True)
    head = ScorerParams.zeros([6, 2, 1], bias=-0.7)
    model = RewardModel(trunk, head)
    a, b = seed7_pair()
    assert reward_forward(model, np.concatenate([a, b]), np.concatenate([b, a])) == -0.7


def test_reward_sees_candidate_order():
    model = seed3_reward()
    a, b = seed7_pair()
    g = np.concatenate([a, b])
    flip = np.concatenate([b, a])
    assert reward_forward(model, g, g) != reward_forward(model, g, flip)
    assert reward_forward(model, g, flip) == reward_forward(model, g, flip)


def test_reward_matches_oracle():
    model = seed3_reward()
    a, b = seed7_pair()
    g, flip = np.concatenate([a, b]), np.concatenate([b, a])
    h = mlp_oracle(model.trunk, g) + mlp_oracle(model.trunk, flip)
    assert reward_forward(model, g, flip) == pytest.approx(mlp_oracle(model.head, h)[0], abs=1e-13)


def test_reward_shape_error():
    with pytest.raises(ShapeError):
        reward_forward(seed3_reward(), np.zeros(2 * DIM), np.zeros(DIM))


def test_zero_critic_returns_bias():
    critic = CriticModel(ScorerParams.zeros([2 * DIM, 3], final_activation=True),
                         ScorerParams.zeros([3, 1], bias=1.25))
    assert critic_value(critic, np.ones(2 * DIM)) == 1.25


def test_critic_not_symmetrized_and_matches_oracle():
    critic = init_critic_from_reward(seed3_reward(), seed=3, head_scale=1.0)
    a, b = seed7_pair()
    v_ab = critic_value(critic, np.concatenate([a, b]))
    v_ba = critic_value(critic, np.concatenate([b, a]))
    assert v_ab != v_ba
    expected = mlp_oracle(critic.value_head, mlp_oracle(critic.trunk, np.concatenate([a, b])))[0]
    assert v_ab == pytest.approx(expected, abs=1e-13)


def test_critic_init_copies_trunk_deeply():
    reward = seed3_reward()
    critic = init_critic_from_reward(reward, seed=0)
    for (w, b), (cw, cb) in zip(reward.trunk.layers, critic.trunk.layers):
        assert np.array_equal(w, cw) and np.array_equal(b, cb)
    before = reward.trunk.copy()
    critic.trunk.layers[0][0][...] += 1.0
    assert reward.trunk.equals(before)


def test_critic_head_depends_on_seed():
    reward = seed3_reward()
    h0 = init_critic_from_reward(reward, seed=0).value_head
    h1 = init_critic_from_reward(reward, seed=1).value_head
    assert not h0.equals(h1)
    assert h0.equals(init_critic_from_reward(reward, seed=0).value_head)


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("make", [
    lambda: ActorModel.create(DIM, np.random.default_rng(0)),
    seed3_reward,
    lambda: init_critic_from_reward(seed3_reward(), seed=2),
])
def test_model_round_trip(tmp_path, make):
    model = make()
    path = tmp_path / "m.json"
    save_model(path, model)
    back = load_model(path, expected_kind=model.kind)
    assert type(back) is type(model) and back.equals(model)


def test_wrong_kind_rejected(tmp_path):
    path = tmp_path / "m.json"
    save_model(path, seed3_reward())
    with pytest.raises(CheckpointError, match="expected 'actor'"):
        load_model(path, expected_kind="actor")


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(format="other"),
    lambda c: c.update(version=99),
    lambda c: c.update(kind="mystery"),
    lambda c: c["model"].pop("params"),
])
def test_corrupt_containers_rejected(mutate):
    container = model_to_container(ActorModel.create(DIM, np.random.default_rng(0)))
    mutate(container)
    with pytest.raises(CheckpointError):
        model_from_container(container)


def test_invalid_json_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_model(path)
