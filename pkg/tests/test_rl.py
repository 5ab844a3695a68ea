"""Reinforcement-learning tests: the analytic reward, replay machinery,
hindsight relabeling, the actor-critic update, and one scaled
learning run (a fixed-scene azimuth bandit the agent must beat the
zero-action baseline on by a wide margin)."""

import math

import numpy as np
import pytest
from scipy import stats

from posenav import autodiff as ad
from posenav.generator import PoseState, render, sample_state, spec_for_category
from posenav.geometry import EulerPose, Translation, euler_difference, wrap_angle
from posenav.policy import (
    ACTION_BOUNDS,
    STATE_DIM,
    Action,
    PolicyNet,
    apply_action,
    features_from_pooled,
    pooled_gray,
)
from posenav.rl import (
    SAC,
    ReplayBuffer,
    RlTrainConfig,
    SacConfig,
    Transition,
    expert_action,
    hindsight_relabel,
    inject_expert,
    make_transition,
    reward,
    squashed_sample,
    train_rl,
)


def _pose(az=0.0, el=0.0, ip=0.0, tx=0.0, ty=0.0, sc=0.0, z=None):
    return PoseState(
        EulerPose(az, el, ip), Translation(tx, ty, sc),
        np.zeros(16) if z is None else z,
    )


# ------------------------------------------------------------------- reward


def test_reward_quarter_turn_hand_value():
    # residual azimuth pi/2, zero action: quaternion gap (w-1)^2 + y^2
    # with w = y = sqrt(2)/2, so 10 * (2 - sqrt(2))
    r = reward(_pose(az=math.pi / 2), _pose(), Action.zero())
    assert r == pytest.approx(-10.0 * (2.0 - math.sqrt(2.0)), abs=1e-12)


def test_reward_zero_exactly_at_expert_action():
    spec = spec_for_category("box")
    rng = np.random.default_rng(0)
    for _ in range(50):
        goal = sample_state(spec, rng)
        state = sample_state(spec, rng)
        assert reward(goal, state, expert_action(goal, state)) == 0.0


def test_reward_negative_off_the_expert_action():
    spec = spec_for_category("box")
    rng = np.random.default_rng(1)
    for _ in range(50):
        goal = sample_state(spec, rng)
        state = sample_state(spec, rng)
        vec = expert_action(goal, state).as_vector()
        vec[rng.integers(0, STATE_DIM)] += 1e-3 * (1 if rng.random() < 0.5 else -1)
        assert reward(goal, state, Action.from_vector(vec)) < -1e-10


def test_reward_has_no_seam_at_the_half_turn():
    eps = 1e-6
    just_under = reward(_pose(az=math.pi - eps), _pose(), Action.zero())
    just_over = reward(_pose(az=-math.pi + eps), _pose(), Action.zero())
    assert just_under == pytest.approx(just_over, abs=1e-12)


def test_reward_weights_components():
    assert reward(_pose(tx=0.1), _pose(), Action.zero()) == pytest.approx(-0.05)
    z = np.zeros(16)
    z[3] = 0.2
    assert reward(_pose(z=z), _pose(), Action.zero()) == pytest.approx(-0.04)


def test_expert_action_reaches_the_goal():
    spec = spec_for_category("laptop")
    rng = np.random.default_rng(2)
    for _ in range(20):
        goal = sample_state(spec, rng)
        state = sample_state(spec, rng)
        landed = apply_action(state, expert_action(goal, state))
        gap = euler_difference(goal.theta, landed.theta).as_array()
        np.testing.assert_allclose(gap, 0.0, atol=1e-12)
        np.testing.assert_allclose(landed.trans.as_array(),
                                   goal.trans.as_array(), atol=1e-12)
        np.testing.assert_allclose(landed.z, goal.z, atol=1e-12)


# ------------------------------------------------------------------- replay


def _toy_transition(spec, rng, reward_marker=None):
    goal = sample_state(spec, rng)
    state = sample_state(spec, rng)
    action = expert_action(goal, state).clipped()
    nxt = apply_action(state, action)
    t = make_transition(
        goal, state, action, nxt,
        pooled_gray(render(spec, state)),
        pooled_gray(render(spec, nxt)),
        pooled_gray(render(spec, goal)),
        done=False,
    )
    if reward_marker is None:
        return t
    return Transition(**{**t.__dict__, "reward": reward_marker})


def test_make_transition_computes_the_reward():
    spec = spec_for_category("box")
    rng = np.random.default_rng(3)
    goal, state = sample_state(spec, rng), sample_state(spec, rng)
    action = Action.zero()
    t = make_transition(goal, state, action, state,
                        np.zeros(256), np.zeros(256), np.zeros(256), done=True)
    assert t.reward == reward(goal, state, action)


def test_buffer_is_a_fifo_ring():
    spec = spec_for_category("box")
    rng = np.random.default_rng(4)
    buf = ReplayBuffer(capacity=3)
    for marker in (-1.0, -2.0, -3.0, -4.0):
        buf.add(_toy_transition(spec, rng, reward_marker=marker))
    assert len(buf) == 3
    seen = set()
    for _ in range(30):
        seen.update(buf.sample(8, np.random.default_rng(0))["rewards"].tolist())
    assert -1.0 not in seen  # the oldest row was overwritten
    assert seen <= {-2.0, -3.0, -4.0}


def test_buffer_sample_shapes_and_determinism():
    spec = spec_for_category("box")
    rng = np.random.default_rng(5)
    buf = ReplayBuffer(capacity=16)
    for _ in range(10):
        buf.add(_toy_transition(spec, rng))
    batch = buf.sample(6, np.random.default_rng(7))
    assert batch["features"].shape == (6, 768)
    assert batch["next_features"].shape == (6, 768)
    assert batch["actions"].shape == (6, STATE_DIM)
    assert batch["rewards"].shape == (6,)
    assert batch["dones"].shape == (6,)
    again = buf.sample(6, np.random.default_rng(7))
    for k in batch:
        np.testing.assert_array_equal(batch[k], again[k])


def test_buffer_rejects_empty_sample_and_bad_capacity():
    with pytest.raises(ValueError):
        ReplayBuffer(capacity=0)
    with pytest.raises(ValueError):
        ReplayBuffer(capacity=4).sample(2, np.random.default_rng(0))


def test_buffer_feature_layout_matches_encoder():
    spec = spec_for_category("box")
    rng = np.random.default_rng(6)
    buf = ReplayBuffer(capacity=4)
    t = _toy_transition(spec, rng)
    buf.add(t)
    batch = buf.sample(1, np.random.default_rng(0))
    want = features_from_pooled(
        t.pooled_state.astype(np.float32).astype(np.float64),
        t.pooled_goal.astype(np.float32).astype(np.float64),
    )
    np.testing.assert_array_equal(batch["features"][0], want)


# ---------------------------------------------------------------- hindsight


def test_hindsight_relabel_swaps_goal_and_rewards():
    spec = spec_for_category("box")
    rng = np.random.default_rng(8)
    goal = sample_state(spec, rng)
    state = sample_state(spec, rng)
    episode = []
    pooled_goal = pooled_gray(render(spec, goal))
    pooled_cur = pooled_gray(render(spec, state))
    for t in range(3):
        action = Action.from_vector(rng.uniform(-0.05, 0.05, STATE_DIM))
        nxt = apply_action(state, action)
        pooled_nxt = pooled_gray(render(spec, nxt))
        episode.append(make_transition(goal, state, action, nxt, pooled_cur,
                                       pooled_nxt, pooled_goal, done=(t == 2)))
        state, pooled_cur = nxt, pooled_nxt

    relabeled = hindsight_relabel(episode)
    assert len(relabeled) == 3
    assert [t.done for t in relabeled] == [False, False, True]
    reached = episode[-1].next_state
    for t in relabeled:
        np.testing.assert_array_equal(t.pooled_goal, episode[-1].pooled_next)
        assert t.goal is reached
    # tiny actions engage no clamp, so the final relabeled step is
    # perfect (up to one rounding of the additive transition)
    assert relabeled[-1].reward > -1e-25
    assert episode[-1].reward < -1e-6  # originals untouched


def test_hindsight_relabel_rejects_empty():
    with pytest.raises(ValueError):
        hindsight_relabel([])


def test_inject_expert_seeds_near_successes():
    spec = spec_for_category("laptop")
    buf = ReplayBuffer(capacity=256)
    ts = inject_expert(buf, spec, np.random.default_rng(9), n=64)
    assert len(buf) == 64 and len(ts) == 64
    rewards = np.array([t.reward for t in ts])
    assert np.all(rewards <= 0.0)
    # only the latent/scale clamps keep these off zero
    assert np.median(rewards) > -3.0
    for t in ts:
        assert t.done
        np.testing.assert_array_equal(
            apply_action(t.state, t.action).as_vector(), t.next_state.as_vector()
        )


def test_inject_expert_validates_n():
    spec = spec_for_category("box")
    with pytest.raises(ValueError):
        inject_expert(ReplayBuffer(4), spec, np.random.default_rng(0), n=0)


# ------------------------------------------------------------------- agent


def test_squashed_sample_matches_direct_density():
    net = PolicyNet(seed=3, hidden=32)
    feats = np.random.default_rng(1).normal(size=(6, 768))
    eps = np.random.default_rng(2).standard_normal((6, STATE_DIM))
    action, logp = squashed_sample(net, feats, eps)
    mu, log_std = net.forward(feats)
    mu, log_std = ad.value_of(mu), ad.value_of(log_std)
    std = np.exp(log_std)
    u = mu + std * eps
    direct = stats.norm.logpdf(u, mu, std).sum(axis=1) - np.sum(
        np.log(ACTION_BOUNDS * (1.0 - np.tanh(u) ** 2)), axis=1
    )
    np.testing.assert_allclose(ad.value_of(logp), direct, atol=1e-9)
    assert np.all(np.abs(ad.value_of(action)) < ACTION_BOUNDS)


def test_squashed_sample_requires_batches():
    net = PolicyNet(seed=0, hidden=16)
    with pytest.raises(ValueError):
        squashed_sample(net, np.zeros(768), np.zeros(STATE_DIM))


def _seeded_buffer(n=100, seed=0):
    spec = spec_for_category("laptop")
    buf = ReplayBuffer(capacity=512)
    inject_expert(buf, spec, np.random.default_rng(seed), n=n)
    return buf


def test_sac_update_is_deterministic():
    buf = _seeded_buffer()
    outs = []
    for _ in range(2):
        sac = SAC(SacConfig(hidden=32, batch=32), seed=5)
        for _ in range(5):
            stats_ = sac.update(buf)
        outs.append((sac.actor.params["w1"].value.copy(),
                     sac.q1.params["w1"].value.copy(), stats_))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    np.testing.assert_array_equal(outs[0][1], outs[1][1])
    assert outs[0][2] == outs[1][2]


def test_sac_critic_fits_the_reward():
    buf = _seeded_buffer()
    sac = SAC(SacConfig(hidden=64, batch=64, lr=1e-3), seed=0)
    losses = [sac.update(buf)["critic_loss"] for _ in range(150)]
    assert np.mean(losses[-10:]) < 0.5 * losses[0]


def test_sac_temperature_adapts_only_when_asked():
    buf = _seeded_buffer(n=40)
    tuned = SAC(SacConfig(hidden=16, batch=16), seed=1)
    a0 = tuned.alpha
    for _ in range(10):
        tuned.update(buf)
    assert tuned.alpha != a0

    frozen = SAC(SacConfig(hidden=16, batch=16, tune_alpha=False), seed=1)
    for _ in range(10):
        frozen.update(buf)
    assert frozen.alpha == a0


def test_sac_target_networks_track_slowly():
    buf = _seeded_buffer(n=40)
    sac = SAC(SacConfig(hidden=16, batch=16, tau=0.01), seed=2)
    w_before = sac.q1_target.params["w1"].value.copy()
    online_before = sac.q1.params["w1"].value.copy()
    np.testing.assert_array_equal(w_before, online_before)  # synced at init
    for _ in range(3):
        sac.update(buf)
    w_after = sac.q1_target.params["w1"].value
    assert not np.array_equal(w_after, w_before)
    # far closer to where they started than the online net moved
    drift_target = np.abs(w_after - w_before).max()
    drift_online = np.abs(sac.q1.params["w1"].value - online_before).max()
    assert drift_target < 0.2 * drift_online


def test_sac_save_load_round_trip(tmp_path):
    buf = _seeded_buffer(n=40)
    sac = SAC(SacConfig(hidden=16, batch=16), seed=3)
    for _ in range(3):
        sac.update(buf)
    path = tmp_path / "agent.pnav"
    sac.save(path)
    other = SAC(SacConfig(hidden=16, batch=16), seed=99)
    other.load(path)
    feats = np.random.default_rng(0).normal(size=768)
    np.testing.assert_array_equal(
        sac.actor.action_vector(feats), other.actor.action_vector(feats)
    )
    np.testing.assert_array_equal(
        other.q1_target.params["w1"].value, other.q1.params["w1"].value
    )


def test_sac_load_rejects_foreign_layout(tmp_path):
    from posenav.autodiff import save_weights

    path = tmp_path / "foreign.pnav"
    save_weights(path, {"actor.w1": np.zeros((2, 2))})
    with pytest.raises(ValueError):
        SAC(SacConfig(hidden=16, batch=16), seed=0).load(path)


def test_config_validation():
    with pytest.raises(ValueError):
        SacConfig(gamma=1.0)
    with pytest.raises(ValueError):
        SacConfig(tau=0.0)
    with pytest.raises(ValueError):
        SacConfig(init_alpha=0.0)
    with pytest.raises(ValueError):
        RlTrainConfig(episodes=0)
    with pytest.raises(ValueError):
        RlTrainConfig(random_episodes=-1)


# ----------------------------------------------------------------- training


def test_train_rl_smoke_and_determinism(tmp_path):
    spec = spec_for_category("box")
    cfg = RlTrainConfig(episodes=3, steps=2, random_episodes=1,
                        expert_transitions=24, buffer_capacity=256,
                        sac=SacConfig(hidden=16, batch=16))
    log = tmp_path / "rl.csv"
    sac_a, rows = train_rl(spec, cfg, seed=7, log_path=log)
    assert len(rows) == 3
    assert set(rows[0]) == {"episode", "mean_reward", "critic_loss",
                            "actor_loss", "alpha", "entropy"}
    header = log.read_text().splitlines()[0]
    assert header == "episode,mean_reward,critic_loss,actor_loss,alpha,entropy"

    sac_b, rows_b = train_rl(spec, cfg, seed=7)
    np.testing.assert_array_equal(
        sac_a.actor.params["w1"].value, sac_b.actor.params["w1"].value
    )
    assert rows == rows_b


def test_sac_learns_a_fixed_scene_bandit():
    """Scaled learning run (~1 min): one scene, start states offset by a
    random azimuth, single-step episodes.  The deterministic policy must
    far outscore the zero-action baseline (measured: about -1.4 against
    -6.7 across seeds; threshold leaves wide margin)."""
    spec = spec_for_category("laptop")
    base = sample_state(spec, np.random.default_rng(42))
    base = PoseState(base.theta, base.trans, np.zeros(16))

    def pair(spec_, rng):
        off = rng.uniform(-math.pi, math.pi)
        s0 = PoseState(
            EulerPose(wrap_angle(base.theta.azimuth + off),
                      base.theta.elevation, base.theta.inplane),
            base.trans, np.zeros(16),
        )
        return base, s0

    cfg = RlTrainConfig(episodes=800, steps=1, random_episodes=30,
                        expert_transitions=300, buffer_capacity=8000,
                        updates_per_step=3,
                        sac=SacConfig(lr=1e-3, hidden=128, batch=128))
    agent, _ = train_rl(spec, cfg, seed=0, pair_sampler=pair)

    rng = np.random.default_rng(999)
    learned, baseline = 0.0, 0.0
    for _ in range(50):
        goal, s0 = pair(spec, rng)
        feats = features_from_pooled(
            pooled_gray(render(spec, s0)), pooled_gray(render(spec, goal))
        )
        act = Action.from_vector(agent.actor.action_vector(feats))
        learned += reward(goal, s0, act)
        baseline += reward(goal, s0, Action.zero())
    learned /= 50
    baseline /= 50
    assert baseline < -5.0  # the bandit is not trivial
    assert learned > -2.5
    assert learned > 0.3 * baseline
