"""Imitation learning: loss identity, demo plumbing, cloning, aggregation."""

import math

import numpy as np
import pytest

from posenav import autodiff as ad
from posenav.autodiff import Tensor
from posenav.generator import LATENT_DIM, PoseState, render, sample_state, spec_for_category
from posenav.geometry import (
    EulerPose,
    Translation,
    euler_to_matrix,
    euler_to_quaternion,
    rotation_error,
    wrap_angle,
)
from posenav.il import (
    BcConfig,
    DaggerConfig,
    Demos,
    hybrid_rollout,
    il_loss,
    il_loss_single,
    il_loss_terms,
    load_demos,
    make_bc_dataset,
    protocol_pair,
    quat_of_rotation_actions,
    residual_targets,
    save_demos,
    train_bc,
    train_dagger,
)
from posenav.policy import ACTION_BOUNDS, Action, GdConfig, PolicyNet, apply_action
from posenav.rl import expert_action, reward

SPEC = spec_for_category("laptop")


def _rot_err_deg(a: PoseState, b: PoseState) -> float:
    return math.degrees(rotation_error(euler_to_matrix(a.theta), euler_to_matrix(b.theta)))


# ------------------------------------------------------- quaternion batching


def test_batched_quaternion_matches_scalar_geometry():
    rng = np.random.default_rng(0)
    dtheta = rng.uniform(-math.pi, math.pi, size=(64, 3))
    got = ad.value_of(quat_of_rotation_actions(dtheta))
    for i in range(64):
        want = euler_to_quaternion(EulerPose.from_array(dtheta[i])).as_array()
        np.testing.assert_allclose(got[i], want, atol=1e-14)


def test_batched_quaternion_rows_are_canonical():
    rng = np.random.default_rng(1)
    q = ad.value_of(quat_of_rotation_actions(rng.uniform(-math.pi, math.pi, (200, 3))))
    for row in q:
        lead = row[row != 0.0][0]
        assert lead > 0.0


def test_batched_quaternion_is_differentiable():
    with ad.Tape() as tape:
        dtheta = Tensor(np.array([[0.3, -0.2, 0.9], [2.9, 0.1, -1.4]]), requires_grad=True)
        q = quat_of_rotation_actions(dtheta)
        grads = ad.backward(tape, ad.sum_(ad.square(q)), [dtheta])
    assert grads[0].shape == (2, 3)
    assert np.all(np.isfinite(grads[0]))


# ------------------------------------------------------------- loss identity


def test_il_loss_negates_reward_on_random_tuples():
    # the acceptance identity, with room to spare on the sample count
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(400):
        goal = sample_state(SPEC, rng)
        state = sample_state(SPEC, rng)
        action = Action.from_vector(rng.uniform(-1.0, 1.0, 22) * ACTION_BOUNDS)
        gap = abs(il_loss_single(goal, state, action) + reward(goal, state, action))
        worst = max(worst, gap)
    assert worst < 1e-12


def test_il_loss_negates_reward_across_the_double_cover():
    # rotation actions drawn full-circle so the mirrored branch engages
    rng = np.random.default_rng(3)
    for _ in range(400):
        goal = sample_state(SPEC, rng)
        state = sample_state(SPEC, rng)
        v = expert_action(goal, state).as_vector()
        v[:3] = rng.uniform(-math.pi, math.pi, 3)
        action = Action.from_vector(np.clip(v, -ACTION_BOUNDS, ACTION_BOUNDS))
        assert il_loss_single(goal, state, action) == pytest.approx(
            -reward(goal, state, action), abs=1e-12
        )


def test_il_loss_zero_only_at_the_expert_action():
    rng = np.random.default_rng(4)
    for _ in range(30):
        goal = sample_state(SPEC, rng)
        state = sample_state(SPEC, rng)
        expert = expert_action(goal, state)
        # zero up to quaternion recomposition roundoff
        assert il_loss_single(goal, state, expert) < 1e-24
        off = expert.as_vector()
        off[rng.integers(0, 22)] += 1e-3
        assert il_loss_single(goal, state, Action.from_vector(off)) > 1e-10


def test_labels_on_both_sides_of_the_half_turn_agree():
    # +175 and -175 degree residuals canonicalize to opposite sheets; the
    # aligned loss must score a near-half-turn action equally for both
    state = PoseState(EulerPose(0.0, 0.0, 0.0), Translation(0.0, 0.0, 1.5), np.zeros(LATENT_DIM))
    turn = Action(np.array([math.pi, 0.0, 0.0]), np.zeros(3), np.zeros(LATENT_DIM))
    losses = []
    for deg in (175.0, -175.0):
        goal = PoseState(
            EulerPose(math.radians(deg), 0.0, 0.0), state.trans, np.zeros(LATENT_DIM)
        )
        losses.append(il_loss_single(goal, state, turn))
    assert losses[0] == pytest.approx(losses[1], abs=1e-12)
    assert losses[0] < 0.1  # small: the action is 5 degrees off the residual


def test_rotation_gradient_finite_at_the_half_turn():
    goal = PoseState(EulerPose(math.pi, 0.0, 0.0), Translation(0.0, 0.0, 1.5), np.zeros(LATENT_DIM))
    state = PoseState(EulerPose(0.0, 0.0, 0.0), goal.trans, np.zeros(LATENT_DIM))
    q, dt, dz = residual_targets(goal, state)
    with ad.Tape() as tape:
        pred = Tensor(np.full((1, 22), 1e-3), requires_grad=True)
        loss = il_loss(pred, q[None, :], dt[None, :], dz[None, :])
        grads = ad.backward(tape, loss, [pred])
    assert np.all(np.isfinite(grads[0]))


def test_il_loss_without_latent_term_drops_exactly_that_term():
    rng = np.random.default_rng(5)
    goal = sample_state(SPEC, rng)
    state = sample_state(SPEC, rng)
    action = Action.from_vector(rng.uniform(-1.0, 1.0, 22) * ACTION_BOUNDS)
    q, dt, dz = residual_targets(goal, state)
    pred = action.as_vector()[None, :]
    full = float(ad.value_of(il_loss_terms(pred, q[None], dt[None], dz[None]))[0])
    bare = float(ad.value_of(il_loss_terms(pred, q[None], dt[None], dz[None], False))[0])
    assert full - bare == pytest.approx(float(np.sum((action.dz - dz) ** 2)), abs=1e-12)


# ------------------------------------------------------------------- targets


def test_residual_targets_hand_case():
    state = PoseState(EulerPose(0.2, -0.1, 0.4), Translation(0.1, -0.2, 0.2), np.zeros(LATENT_DIM))
    goal = PoseState(
        EulerPose(0.2 + 0.5, -0.1, 0.4), Translation(0.3, 0.1, 0.8), np.ones(LATENT_DIM)
    )
    q, dt, dz = residual_targets(goal, state)
    np.testing.assert_allclose(
        q, euler_to_quaternion(EulerPose(0.5, 0.0, 0.0)).as_array(), atol=1e-15
    )
    np.testing.assert_allclose(dt, [0.2, 0.3, 0.6], atol=1e-15)
    np.testing.assert_allclose(dz, np.ones(LATENT_DIM), atol=1e-15)


def test_expert_action_closes_the_residual():
    rng = np.random.default_rng(6)
    for _ in range(25):
        goal = sample_state(SPEC, rng)
        start = sample_state(SPEC, rng)
        landed = apply_action(start, expert_action(goal, start))
        assert _rot_err_deg(landed, goal) < 1e-5
        np.testing.assert_allclose(landed.trans.as_array(), goal.trans.as_array(), atol=1e-12)
        np.testing.assert_allclose(landed.z, goal.z, atol=1e-12)


def test_protocol_pair_varies_only_azimuth_and_latent():
    rng = np.random.default_rng(7)
    offsets = []
    for _ in range(200):
        goal, start = protocol_pair(SPEC, rng)
        assert start.theta.elevation == goal.theta.elevation
        assert start.theta.inplane == goal.theta.inplane
        np.testing.assert_array_equal(start.trans.as_array(), goal.trans.as_array())
        np.testing.assert_array_equal(start.z, np.zeros(LATENT_DIM))
        offsets.append(wrap_angle(start.theta.azimuth - goal.theta.azimuth))
    offsets = np.array(offsets)
    assert offsets.min() < -math.radians(150) and offsets.max() > math.radians(150)
    assert np.mean(np.abs(offsets) > math.pi / 2) > 0.3  # far starts are common


# ----------------------------------------------------------------- demo sets


@pytest.fixture(scope="module")
def small_demos():
    return make_bc_dataset(SPEC, 160, np.random.default_rng(11))


def test_make_bc_dataset_shapes_and_determinism():
    a = make_bc_dataset(SPEC, 5, np.random.default_rng(8))
    b = make_bc_dataset(SPEC, 5, np.random.default_rng(8))
    assert a.features.shape == (5, 768)
    assert a.quats.shape == (5, 4)
    assert a.dts.shape == (5, 3)
    assert a.dzs.shape == (5, 16)
    for k in ("features", "quats", "dts", "dzs"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_make_bc_dataset_labels_match_the_injected_pair():
    from posenav.policy import encode_observation

    rng = np.random.default_rng(9)
    goal, start = protocol_pair(SPEC, rng)

    demos = make_bc_dataset(SPEC, 1, rng, pair_sampler=lambda s, r: (goal, start))
    np.testing.assert_array_equal(
        demos.features[0], encode_observation(render(SPEC, start), render(SPEC, goal))
    )
    q, dt, dz = residual_targets(goal, start)
    np.testing.assert_array_equal(demos.quats[0], q)
    np.testing.assert_array_equal(demos.dts[0], dt)
    np.testing.assert_array_equal(demos.dzs[0], dz)


def test_make_bc_dataset_rejects_empty():
    with pytest.raises(ValueError):
        make_bc_dataset(SPEC, 0, np.random.default_rng(0))


def test_demos_validates_widths():
    with pytest.raises(ValueError):
        Demos(np.zeros((4, 767)), np.zeros((4, 4)), np.zeros((4, 3)), np.zeros((4, 16)))
    with pytest.raises(ValueError):
        Demos(np.zeros((4, 768)), np.zeros((3, 4)), np.zeros((4, 3)), np.zeros((4, 16)))


def test_demos_concatenate_sums_lengths(small_demos):
    both = Demos.concatenate([small_demos, small_demos])
    assert len(both) == 2 * len(small_demos)
    np.testing.assert_array_equal(both.features[len(small_demos):], small_demos.features)


def test_save_load_demos_round_trip(tmp_path, small_demos):
    path = tmp_path / "demos.pnav"
    save_demos(path, small_demos)
    loaded = load_demos(path)
    for k in ("features", "quats", "dts", "dzs"):
        np.testing.assert_array_equal(getattr(loaded, k), getattr(small_demos, k))


def test_load_demos_rejects_other_archives(tmp_path):
    path = tmp_path / "weights.pnav"
    PolicyNet(seed=0, hidden=8).save(path)
    with pytest.raises(ValueError):
        load_demos(path)


# ------------------------------------------------------------------- cloning


def test_train_bc_reduces_the_loss(small_demos):
    net, losses = train_bc(small_demos, BcConfig(epochs=25, lr=3e-3, hidden=64), seed=0)
    assert len(losses) == 25
    assert losses[-1] < 0.8 * losses[0]


def test_train_bc_is_deterministic(small_demos):
    cfg = BcConfig(epochs=3, lr=1e-3, hidden=32)
    net_a, losses_a = train_bc(small_demos, cfg, seed=5)
    net_b, losses_b = train_bc(small_demos, cfg, seed=5)
    assert losses_a == losses_b
    for k in net_a.params:
        np.testing.assert_array_equal(net_a.params[k].value, net_b.params[k].value)


def test_train_bc_fine_tunes_a_given_net(small_demos):
    cfg = BcConfig(epochs=6, lr=3e-3, hidden=64)
    net, first = train_bc(small_demos, cfg, seed=0)
    again, second = train_bc(small_demos, cfg, seed=0, net=net)
    assert again is net
    assert second[0] < first[0]  # picks up where the first run left off


def test_train_bc_without_latent_keeps_latent_columns_bitwise(small_demos):
    cfg = BcConfig(epochs=4, lr=3e-3, hidden=48, include_latent=False)
    net, _ = train_bc(small_demos, cfg, seed=3)
    fresh = PolicyNet(seed=3, hidden=48)
    # latent output columns receive zero gradient, so Adam must not move them
    np.testing.assert_array_equal(net.params["w_mu"].value[:, 6:], fresh.params["w_mu"].value[:, 6:])
    np.testing.assert_array_equal(net.params["b_mu"].value[6:], fresh.params["b_mu"].value[6:])
    # pose columns did move
    assert not np.array_equal(net.params["w_mu"].value[:, :6], fresh.params["w_mu"].value[:, :6])
    # the log-std head is never part of the cloning objective
    np.testing.assert_array_equal(net.params["w_sig"].value, fresh.params["w_sig"].value)
    np.testing.assert_array_equal(net.params["b_sig"].value, fresh.params["b_sig"].value)


# --------------------------------------------------------------- aggregation


def test_train_dagger_history_counts_aggregated_samples(small_demos):
    cfg = DaggerConfig(
        rounds=2,
        rollouts_per_round=3,
        steps=4,
        epochs_per_round=2,
        bc=BcConfig(epochs=2, lr=1e-3, hidden=32),
    )
    net, history = train_dagger(SPEC, small_demos, cfg, seed=0)
    assert [h["round"] for h in history] == [0, 1, 2]
    n = len(small_demos)
    assert [h["dataset"] for h in history] == [n, n + 12, n + 24]
    assert all(np.isfinite(h["loss"]) for h in history)


def test_train_dagger_is_deterministic(small_demos):
    cfg = DaggerConfig(
        rounds=1,
        rollouts_per_round=2,
        steps=3,
        epochs_per_round=1,
        bc=BcConfig(epochs=1, lr=1e-3, hidden=32),
    )
    net_a, hist_a = train_dagger(SPEC, small_demos, cfg, seed=4)
    net_b, hist_b = train_dagger(SPEC, small_demos, cfg, seed=4)
    assert hist_a == hist_b
    for k in net_a.params:
        np.testing.assert_array_equal(net_a.params[k].value, net_b.params[k].value)


def test_train_dagger_reset_refits_from_scratch(small_demos):
    cfg = DaggerConfig(
        rounds=1,
        rollouts_per_round=2,
        steps=3,
        epochs_per_round=1,
        reset_per_round=True,
        bc=BcConfig(epochs=2, lr=1e-3, hidden=32),
    )
    net, history = train_dagger(SPEC, small_demos, cfg, seed=0)
    assert history[-1]["dataset"] == len(small_demos) + 6
    assert np.all(np.isfinite(net.params["w1"].value))


# -------------------------------------------------------------------- hybrid


def test_hybrid_rollout_stitches_without_double_counting():
    rng = np.random.default_rng(12)
    goal = sample_state(SPEC, rng)
    start = sample_state(SPEC, rng)
    traj = hybrid_rollout(
        SPEC,
        PolicyNet(seed=0),
        start,
        render(SPEC, goal),
        il_steps=3,
        gd_cfg=GdConfig(steps=4),
        record_trajectory=True,
    )
    assert len(traj.states) == 8  # 3 learned + 4 refined + start
    assert len(traj.actions) == 7
    assert len(traj.losses) == 8
    assert len(traj.images) == 8
    assert traj.final_state is traj.states[-1]


def test_hybrid_rollout_skips_images_unless_recording():
    rng = np.random.default_rng(13)
    goal = sample_state(SPEC, rng)
    start = sample_state(SPEC, rng)
    traj = hybrid_rollout(
        SPEC, PolicyNet(seed=0), start, render(SPEC, goal), il_steps=2, gd_cfg=GdConfig(steps=2)
    )
    assert traj.images == []
    assert len(traj.states) == 5


def test_hybrid_rollout_refines_an_easy_start():
    # untrained net proposes near-zero steps; the descent tail must close
    # a small azimuth gap on its own
    rng = np.random.default_rng(14)
    goal = sample_state(SPEC, rng)
    start = PoseState(
        EulerPose(
            float(wrap_angle(goal.theta.azimuth + math.radians(10.0))),
            goal.theta.elevation,
            goal.theta.inplane,
        ),
        goal.trans,
        goal.z.copy(),
    )
    traj = hybrid_rollout(
        SPEC, PolicyNet(seed=0), start, render(SPEC, goal), il_steps=2, gd_cfg=GdConfig(steps=50)
    )
    assert _rot_err_deg(traj.final_state, goal) < 6.0
    assert traj.losses[-1] < traj.losses[0]


def test_hybrid_rollout_validates_steps():
    rng = np.random.default_rng(15)
    goal = sample_state(SPEC, rng)
    with pytest.raises(ValueError):
        hybrid_rollout(SPEC, PolicyNet(seed=0), goal, render(SPEC, goal), il_steps=0)
