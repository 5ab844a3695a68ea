"""Imitation learning over the generator's input space.

Cloning targets come from a privileged expert that reads the goal state
directly: the label for a visited state is its residual to the goal.
The regression loss is the negated one-step reward: quaternion embedding
for the rotation block, Euclidean for translation and latent.  Cloning
and reinforcement therefore optimize the same objective in two regimes,
and either policy can be dropped into the other's evaluation unchanged.

Three trainers build on that loss:

* behavior cloning on a fixed demo set of (observation, residual) pairs;
* an aggregation loop that labels the student's own visited states each
  round, which keeps the training distribution matched to deployment;
* a hybrid deployment that runs the learned policy for a few steps and
  hands the result to the gradient-descent policy to refine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, load_weights, save_weights
from .generator import LATENT_DIM, GeneratorSpec, PoseState, render, sample_state
from .geometry import EulerPose, Translation, quat_residual, wrap_angle
from .policy import (
    ACTION_BOUNDS,
    FEATURE_DIM,
    STATE_DIM,
    Action,
    EpisodeConfig,
    GdConfig,
    GdPolicy,
    NetworkPolicy,
    PolicyNet,
    Trajectory,
    encode_observation,
    features_from_pooled,
    pooled_gray,
    rollout,
)
from .rl import LATENT_WEIGHT, ROT_WEIGHT, TRANS_WEIGHT

# BC and aggregation train the deterministic mean path only; the log-std
# head stays at its seed values unless an RL phase trains it.
_MEAN_PARAMS = ("w1", "b1", "w2", "b2", "w_mu", "b_mu")


def protocol_pair(spec: GeneratorSpec, rng: np.random.Generator):
    """(goal, start) with a full-circle azimuth offset between them.

    The start matches the goal's elevation, in-plane angle and
    translation, and begins at the neutral latent.  This is the same
    family the azimuth-sweep evaluation walks deterministically, with
    the offset drawn uniformly instead.
    """
    goal = sample_state(spec, rng)
    offset = rng.uniform(-math.pi, math.pi)
    start = PoseState(
        EulerPose(
            float(wrap_angle(goal.theta.azimuth + offset)),
            goal.theta.elevation,
            goal.theta.inplane,
        ),
        goal.trans,
        np.zeros(LATENT_DIM),
    )
    return goal, start


# Far starts are only sampled against goals whose half-turn view stays
# readable after gray 16x16 pooling; below this distance the label is
# unlearnable and only drags the far response toward "hold".
_FAR_CONTRAST = 0.3


def _banded_start(spec: GeneratorSpec, goal: PoseState, rng: np.random.Generator,
                  az_off: float, pose_jit: float, dt_jit: float, z_jit: float,
                  keep_z: bool) -> PoseState:
    theta = EulerPose(
        float(wrap_angle(goal.theta.azimuth + az_off)),
        float(goal.theta.elevation + rng.normal(0.0, pose_jit)),
        float(goal.theta.inplane + rng.normal(0.0, pose_jit)),
    )
    dt = goal.trans.as_array() + rng.normal(0.0, dt_jit, size=3)
    z = goal.z.copy() if keep_z else goal.z + rng.normal(0.0, z_jit, size=LATENT_DIM)
    return PoseState(theta, Translation(*dt), z)


def curriculum_pair(spec: GeneratorSpec, rng: np.random.Generator):
    """(goal, start) drawn from the bands a deployed episode visits.

    Uniform full-circle offsets leave two gaps that sink multi-step
    rollouts: almost no nearly-converged states, so a settled policy
    jitters itself back off the goal, and a thin 15-60 degree band
    between "hold" and "turn around", so off-path states snap to one of
    those two prototypes instead of taking a graded correction.  Band
    sampling closes both gaps.  Latent and pose jitter shrink with the
    band: far starts keep the goal's latent so the label asks for the
    turn alone, and far goals are re-drawn until their half-turn view is
    resolvable (see _FAR_CONTRAST).
    """
    band = rng.random()
    if band < 0.40:  # hold: converged wobble
        goal = sample_state(spec, rng)
        az = rng.normal(0.0, math.radians(12.0))
        keep_z = rng.random() < 0.5
        return goal, _banded_start(spec, goal, rng, az, math.radians(3.0),
                                   0.02, 0.10, keep_z)
    if band < 0.60:  # recovery: where wobbles land
        goal = sample_state(spec, rng)
        az = rng.choice((-1.0, 1.0)) * rng.uniform(math.radians(15), math.radians(60))
        return goal, _banded_start(spec, goal, rng, az, math.radians(3.0),
                                   0.02, 0.08, False)
    if band < 0.75:  # mid swing
        goal = sample_state(spec, rng)
        az = rng.choice((-1.0, 1.0)) * rng.uniform(math.radians(60), math.radians(150))
        return goal, _banded_start(spec, goal, rng, az, 0.0, 0.0, 0.15, False)
    while True:  # far: near the opposite side, goal latent kept
        goal = sample_state(spec, rng)
        twin = PoseState(
            EulerPose(float(wrap_angle(goal.theta.azimuth + math.pi)),
                      goal.theta.elevation, goal.theta.inplane),
            goal.trans, goal.z)
        contrast = np.linalg.norm(pooled_gray(render(spec, twin))
                                  - pooled_gray(render(spec, goal)))
        if contrast >= _FAR_CONTRAST:
            break
    az = rng.choice((-1.0, 1.0)) * rng.uniform(math.radians(150), math.pi)
    return goal, _banded_start(spec, goal, rng, az, math.radians(2.0),
                               0.01, 0.0, True)


def residual_targets(goal: PoseState, state: PoseState):
    """(quaternion, dt, dz) regression targets for one state."""
    return (
        quat_residual(goal.theta, state.theta).as_array(),
        goal.trans.as_array() - state.trans.as_array(),
        goal.z - state.z,
    )


def _canonical_signs(q: np.ndarray) -> np.ndarray:
    # first nonzero component positive, matching the scalar geometry rule
    nonzero = q != 0.0
    first = np.argmax(nonzero, axis=1)
    lead = q[np.arange(len(q)), first]
    return np.where(lead < 0.0, -1.0, 1.0)[:, None]


def quat_of_rotation_actions(dtheta):
    """Batched canonical-sign quaternion of (azimuth, elevation, inplane).

    Tape ops throughout, so it differentiates; the sign choice is made
    from detached values, which keeps the loss surface smooth across the
    double-cover boundary instead of folding a step into the gradient.
    """
    half = ad.mul(dtheta, 0.5)
    c1 = ad.cos(ad.slice_(half, (slice(None), 0)))
    s1 = ad.sin(ad.slice_(half, (slice(None), 0)))
    c2 = ad.cos(ad.slice_(half, (slice(None), 1)))
    s2 = ad.sin(ad.slice_(half, (slice(None), 1)))
    c3 = ad.cos(ad.slice_(half, (slice(None), 2)))
    s3 = ad.sin(ad.slice_(half, (slice(None), 2)))
    c3c2, c3s2 = ad.mul(c3, c2), ad.mul(c3, s2)
    s3s2, s3c2 = ad.mul(s3, s2), ad.mul(s3, c2)
    w = ad.sub(ad.mul(c3c2, c1), ad.mul(s3s2, s1))
    x = ad.sub(ad.mul(c3s2, c1), ad.mul(s3c2, s1))
    y = ad.add(ad.mul(c3c2, s1), ad.mul(s3s2, c1))
    z = ad.add(ad.mul(c3s2, s1), ad.mul(s3c2, c1))
    q = ad.stack([w, x, y, z], axis=1)
    return ad.mul(q, _canonical_signs(ad.value_of(q)))


def il_loss_terms(pred, quats, dts, dzs, include_latent: bool = True):
    """Per-sample imitation losses for predicted actions (B, 22).

    Exactly the negated reward of taking ``pred`` in the labeled state:
    10 |q(dtheta) - q*|^2 + 5 |dt - dt*|^2 + |dz - dz*|^2, the last term
    dropped when the latent head is not being trained.  The rotation term
    lives on the quaternion double cover: each label row is flipped to
    whichever of +-q* is nearer the prediction, so residuals just past a
    half turn do not straddle the sign seam.  The flip is a detached
    per-row constant, leaving the gradient that of a plain squared error
    to the chosen representative.
    """
    q_pred = quat_of_rotation_actions(ad.slice_(pred, (slice(None), slice(0, 3))))
    sign = np.sign(np.sum(ad.value_of(q_pred) * quats, axis=1, keepdims=True))
    sign = np.where(sign == 0.0, 1.0, sign)
    rot = ad.sum_(ad.square(ad.sub(q_pred, sign * quats)), axis=1)
    dt_pred = ad.slice_(pred, (slice(None), slice(3, 6)))
    trans = ad.sum_(ad.square(ad.sub(dt_pred, dts)), axis=1)
    terms = ad.add(ad.mul(rot, ROT_WEIGHT), ad.mul(trans, TRANS_WEIGHT))
    if include_latent:
        dz_pred = ad.slice_(pred, (slice(None), slice(6, STATE_DIM)))
        latent = ad.sum_(ad.square(ad.sub(dz_pred, dzs)), axis=1)
        terms = ad.add(terms, ad.mul(latent, LATENT_WEIGHT))
    return terms


def il_loss(pred, quats, dts, dzs, include_latent: bool = True):
    """Batch-mean imitation loss."""
    return ad.mean_(il_loss_terms(pred, quats, dts, dzs, include_latent))


def il_loss_single(goal: PoseState, state: PoseState, action: Action) -> float:
    """Imitation loss of one action against one labeled state."""
    q, dt, dz = residual_targets(goal, state)
    terms = il_loss_terms(
        action.as_vector()[None, :], q[None, :], dt[None, :], dz[None, :]
    )
    return float(ad.value_of(terms)[0])


# -------------------------------------------------------------------- demos


@dataclass(frozen=True)
class Demos:
    """Observation features with residual regression targets."""

    features: np.ndarray  # (N, 768)
    quats: np.ndarray     # (N, 4)
    dts: np.ndarray       # (N, 3)
    dzs: np.ndarray       # (N, 16)

    def __post_init__(self):
        n = len(self.features)
        for name, width in (("features", FEATURE_DIM), ("quats", 4),
                            ("dts", 3), ("dzs", LATENT_DIM)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n, width):
                raise ValueError(f"{name} must have shape ({n}, {width}), got {arr.shape}")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.features)

    @staticmethod
    def concatenate(parts: "list[Demos]") -> "Demos":
        return Demos(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.quats for p in parts]),
            np.concatenate([p.dts for p in parts]),
            np.concatenate([p.dzs for p in parts]),
        )


def make_bc_dataset(spec: GeneratorSpec, n: int, rng: np.random.Generator,
                    pair_sampler=None) -> Demos:
    """Render n (goal, start) pairs and label the starts with residuals."""
    if n < 1:
        raise ValueError("n must be at least 1")
    pair = pair_sampler or protocol_pair
    features = np.empty((n, FEATURE_DIM))
    quats = np.empty((n, 4))
    dts = np.empty((n, 3))
    dzs = np.empty((n, LATENT_DIM))
    for i in range(n):
        goal, start = pair(spec, rng)
        features[i] = encode_observation(render(spec, start), render(spec, goal))
        quats[i], dts[i], dzs[i] = residual_targets(goal, start)
    return Demos(features, quats, dts, dzs)


_DEMO_KEYS = ("features", "quats", "dts", "dzs")


def save_demos(path, demos: Demos) -> None:
    save_weights(path, {k: getattr(demos, k) for k in _DEMO_KEYS})


def load_demos(path) -> Demos:
    loaded = load_weights(path)
    if set(loaded) != set(_DEMO_KEYS):
        raise ValueError("file does not hold a demo dataset")
    return Demos(*(loaded[k] for k in _DEMO_KEYS))


# ----------------------------------------------------------------- cloning


@dataclass
class BcConfig:
    epochs: int = 25
    batch: int = 256
    lr: float = 1e-3
    hidden: int = 256
    include_latent: bool = True
    lr_decay_stages: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.hidden < 1:
            raise ValueError("epochs, batch and hidden must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 1 <= self.lr_decay_stages <= self.epochs:
            raise ValueError("lr_decay_stages must be in [1, epochs]")


def _stage_lrs(cfg: BcConfig) -> list[float]:
    """Geometric decay from lr to lr/10 across the stages."""
    n = cfg.lr_decay_stages
    if n == 1:
        return [cfg.lr]
    return [cfg.lr * 10.0 ** (-s / (n - 1)) for s in range(n)]


def train_bc(demos: Demos, cfg: BcConfig | None = None, seed: int = 0,
             net: PolicyNet | None = None) -> tuple[PolicyNet, list[float]]:
    """Minimize the imitation loss of the squashed mean action.

    Returns the network and per-epoch mean losses.  Pass ``net`` to keep
    fine-tuning an existing policy (the aggregation loop does).  Epochs
    split evenly across ``lr_decay_stages``; each stage restarts the
    optimizer at the next decayed learning rate, which melts the loss
    past where a single rate stalls.
    """
    cfg = cfg or BcConfig()
    net = net or PolicyNet(seed=seed, hidden=cfg.hidden)
    params = [net.params[k] for k in _MEAN_PARAMS]
    rng = np.random.default_rng([seed, 1])
    stage_lrs = _stage_lrs(cfg)
    per_stage = [len(chunk) for chunk in
                 np.array_split(np.arange(cfg.epochs), len(stage_lrs))]
    losses = []
    for stage_lr, stage_epochs in zip(stage_lrs, per_stage):
        opt = AdamState(lr=stage_lr)
        for _ in range(stage_epochs):
            order = rng.permutation(len(demos))
            total, batches = 0.0, 0
            for lo in range(0, len(demos), cfg.batch):
                idx = order[lo:lo + cfg.batch]
                with ad.Tape() as tape:
                    mu, _ = net.forward(demos.features[idx])
                    pred = ad.mul(ad.tanh(mu), ACTION_BOUNDS)
                    loss = il_loss(pred, demos.quats[idx], demos.dts[idx],
                                   demos.dzs[idx], cfg.include_latent)
                    grads = ad.backward(tape, loss, params)
                adam_step(opt, params, grads)
                total += float(ad.value_of(loss))
                batches += 1
            losses.append(total / batches)
    return net, losses


# -------------------------------------------------------------- aggregation


@dataclass
class DaggerConfig:
    rounds: int = 4
    rollouts_per_round: int = 60
    steps: int = 10
    epochs_per_round: int = 8
    reset_per_round: bool = False
    bc: BcConfig = field(default_factory=BcConfig)

    def __post_init__(self):
        if self.rounds < 1 or self.rollouts_per_round < 1 or self.steps < 1:
            raise ValueError("rounds, rollouts_per_round and steps must be positive")
        if self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be at least 1")


def _label_states(spec, goal, traj: Trajectory, pooled_goal) -> Demos:
    # label every state an action was taken from
    n = len(traj.actions)
    features = np.empty((n, FEATURE_DIM))
    quats = np.empty((n, 4))
    dts = np.empty((n, 3))
    dzs = np.empty((n, LATENT_DIM))
    for i in range(n):
        features[i] = features_from_pooled(pooled_gray(traj.images[i]), pooled_goal)
        quats[i], dts[i], dzs[i] = residual_targets(goal, traj.states[i])
    return Demos(features, quats, dts, dzs)


def train_dagger(spec: GeneratorSpec, demos: Demos,
                 cfg: DaggerConfig | None = None, seed: int = 0,
                 pair_sampler=None) -> tuple[PolicyNet, list[dict]]:
    """Clone, then alternate on-policy collection with refitting.

    Each round rolls the current policy out on fresh protocol pairs,
    labels every visited state with its expert residual, aggregates, and
    fine-tunes (or refits from scratch with ``reset_per_round``).  The
    visited states are exactly where the deployed policy will find
    itself, which is what the plain clone never trains on.
    """
    cfg = cfg or DaggerConfig()
    pair = pair_sampler or protocol_pair
    rng = np.random.default_rng([seed, 2])

    net, losses = train_bc(demos, cfg.bc, seed=seed)
    history = [{"round": 0, "dataset": len(demos), "loss": losses[-1]}]
    pool = [demos]

    episode = EpisodeConfig(steps=cfg.steps, record_trajectory=True)
    for rnd in range(1, cfg.rounds + 1):
        policy = NetworkPolicy(net, use_latent=cfg.bc.include_latent)
        for _ in range(cfg.rollouts_per_round):
            goal, start = pair(spec, rng)
            target = render(spec, goal)
            traj = rollout(policy, spec, start, target, episode)
            pool.append(_label_states(spec, goal, traj, pooled_gray(target)))
        aggregated = Demos.concatenate(pool)
        pool = [aggregated]
        if cfg.reset_per_round:
            net, losses = train_bc(aggregated, cfg.bc, seed=seed)
        else:
            # gentle fine-tune at the schedule's terminal rate so new
            # rounds refine the clone instead of tearing it up
            tune = BcConfig(epochs=cfg.epochs_per_round, batch=cfg.bc.batch,
                            lr=_stage_lrs(cfg.bc)[-1], hidden=cfg.bc.hidden,
                            include_latent=cfg.bc.include_latent)
            net, losses = train_bc(aggregated, tune, seed=seed, net=net)
        history.append({"round": rnd, "dataset": len(aggregated),
                        "loss": losses[-1]})
    return net, history


# ------------------------------------------------------------------ hybrid


def hybrid_rollout(spec: GeneratorSpec, net: PolicyNet, s0: PoseState,
                   target: np.ndarray, il_steps: int = 10,
                   gd_cfg: GdConfig | None = None, use_latent: bool = True,
                   record_trajectory: bool = False) -> Trajectory:
    """Learned coarse estimate, then gradient refinement, one trajectory.

    The learned policy runs ``il_steps`` from s0; the gradient-descent
    policy continues from wherever it lands.  The seam state appears
    once, and its loss comes from the refiner's own render (bit-identical
    to the handoff render, so nothing is double counted).
    """
    if il_steps < 1:
        raise ValueError("il_steps must be at least 1")
    gd_cfg = gd_cfg or GdConfig(steps=10)
    coarse = rollout(
        NetworkPolicy(net, use_latent=use_latent), spec, s0, target,
        EpisodeConfig(steps=il_steps, record_trajectory=record_trajectory),
    )
    fine = rollout(
        GdPolicy(gd_cfg), spec, coarse.final_state, target,
        EpisodeConfig(steps=gd_cfg.steps, record_trajectory=record_trajectory),
    )
    return Trajectory(
        states=coarse.states + fine.states[1:],
        actions=coarse.actions + fine.actions,
        losses=coarse.losses[:-1] + fine.losses,
        images=(coarse.images[:-1] + fine.images) if record_trajectory else [],
    )
