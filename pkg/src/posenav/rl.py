"""Off-policy reinforcement learning over the generator's input space.

The agent is a soft actor-critic: a tanh-Gaussian policy (PolicyNet)
plus twin Q critics with slowly tracking target copies and a learned
entropy temperature.  The reward is analytic in the poses, no pixels:

    r(s, a; g) = -10 |q(theta_g - theta_s) - q(dtheta)|^2
                 - 5 |(t_g - t_s) - dt|^2
                 -   |(z_g - z_s) - dz|^2

where q is the canonical-sign quaternion of a wrapped Euler triple and
the rotation distance is taken on the double cover: |.|^2 is the smaller
of the distances to +q and -q, since both name the same rotation.  That
makes the reward continuous in state and action everywhere, including
across half turns, where the two quaternion sheets meet; it is 0 exactly
when the action's rotation matches the residual rotation.

Goals enter the agent only through the observation features (pooled
current/target/difference), so an episode can be relabeled in hindsight
by swapping the pooled-target block of every stored transition for the
pooled final render; nothing is re-rendered and rewards are recomputed
from the poses alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, load_weights, save_weights
from .generator import LATENT_DIM, GeneratorSpec, PoseState, render, sample_state
from .geometry import EulerPose, euler_difference, euler_to_quaternion
from .policy import (
    ACTION_BOUNDS,
    FEATURE_DIM,
    POOLED_DIM,
    STATE_DIM,
    Action,
    PolicyNet,
    apply_action,
    features_from_pooled,
    pooled_gray,
)

ROT_WEIGHT = 10.0
TRANS_WEIGHT = 5.0
LATENT_WEIGHT = 1.0


def expert_action(goal: PoseState, state: PoseState) -> Action:
    """Privileged one-step residual: the action that reaches the goal.

    Unclipped; call ``.clipped()`` before feeding it to anything that
    promises to stay inside the learned-policy bounds.
    """
    return Action(
        euler_difference(goal.theta, state.theta).as_array(),
        goal.trans.as_array() - state.trans.as_array(),
        goal.z - state.z,
    )


def quat_gap(q_a: np.ndarray, q_b: np.ndarray) -> float:
    """Squared quaternion distance on the double cover.

    q and -q are the same rotation, so the gap is the smaller of the
    distances to the two representatives.  Without this, targets just
    past a half turn sit on the far sheet and a squared error would
    charge nearly 4 for rotations that are physically close.
    """
    direct = float(np.sum((q_a - q_b) ** 2))
    mirrored = float(np.sum((q_a + q_b) ** 2))
    return min(direct, mirrored)


def reward(goal: PoseState, state: PoseState, action: Action) -> float:
    """Dense action-matching reward; 0 exactly at the perfect action."""
    q_res = euler_to_quaternion(euler_difference(goal.theta, state.theta))
    q_act = euler_to_quaternion(EulerPose.from_array(action.dtheta))
    rot = quat_gap(q_res.as_array(), q_act.as_array())
    trans = float(
        np.sum((goal.trans.as_array() - state.trans.as_array() - action.dt) ** 2)
    )
    latent = float(np.sum((goal.z - state.z - action.dz) ** 2))
    return -(ROT_WEIGHT * rot + TRANS_WEIGHT * trans + LATENT_WEIGHT * latent)


# ------------------------------------------------------------------- replay


@dataclass(frozen=True)
class Transition:
    """One environment step, kept in relabelable form.

    Pose states carry the analytic reward; pooled grayscale renders
    (256 each) carry the observation features.  ``reward`` is stored so
    a relabeled copy and the original can coexist in one buffer.
    """

    state: PoseState
    action: Action
    next_state: PoseState
    goal: PoseState
    pooled_state: np.ndarray
    pooled_next: np.ndarray
    pooled_goal: np.ndarray
    reward: float
    done: bool


def make_transition(spec_goal: PoseState, state: PoseState, action: Action,
                    next_state: PoseState, pooled_state, pooled_next,
                    pooled_goal, done: bool) -> Transition:
    return Transition(
        state=state,
        action=action,
        next_state=next_state,
        goal=spec_goal,
        pooled_state=np.asarray(pooled_state, dtype=np.float64),
        pooled_next=np.asarray(pooled_next, dtype=np.float64),
        pooled_goal=np.asarray(pooled_goal, dtype=np.float64),
        reward=reward(spec_goal, state, action),
        done=done,
    )


class ReplayBuffer:
    """Fixed-capacity FIFO ring over numeric transition rows."""

    def __init__(self, capacity: int = 20000):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._size = 0
        self._next = 0
        self._pooled_state = np.zeros((capacity, POOLED_DIM), dtype=np.float32)
        self._pooled_next = np.zeros((capacity, POOLED_DIM), dtype=np.float32)
        self._pooled_goal = np.zeros((capacity, POOLED_DIM), dtype=np.float32)
        self._actions = np.zeros((capacity, STATE_DIM), dtype=np.float64)
        self._rewards = np.zeros(capacity, dtype=np.float64)
        self._dones = np.zeros(capacity, dtype=np.float64)

    def __len__(self) -> int:
        return self._size

    def add(self, t: Transition) -> None:
        row = self._next
        self._pooled_state[row] = t.pooled_state
        self._pooled_next[row] = t.pooled_next
        self._pooled_goal[row] = t.pooled_goal
        self._actions[row] = t.action.as_vector()
        self._rewards[row] = t.reward
        self._dones[row] = float(t.done)
        self._next = (row + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, transitions: Sequence[Transition]) -> None:
        for t in transitions:
            self.add(t)

    def sample(self, batch: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform sample with replacement; features are assembled here."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=batch)
        ps = self._pooled_state[idx].astype(np.float64)
        pn = self._pooled_next[idx].astype(np.float64)
        pg = self._pooled_goal[idx].astype(np.float64)
        return {
            "features": np.concatenate([ps, pg, ps - pg], axis=1),
            "next_features": np.concatenate([pn, pg, pn - pg], axis=1),
            "actions": self._actions[idx].copy(),
            "rewards": self._rewards[idx].copy(),
            "dones": self._dones[idx].copy(),
        }


def hindsight_relabel(episode: Sequence[Transition]) -> list[Transition]:
    """Rewrite an episode as if its final state had been the goal.

    The pooled-target block of every transition becomes the pooled final
    render (already stored as the last transition's pooled_next), rewards
    are recomputed against the reached state, and the last transition is
    marked done.  The relabeled last step scores reward 0 (to rounding)
    whenever its action engaged no clamp, which is what seeds the buffer
    with successes long before the behavior policy earns one for real.
    """
    if not episode:
        raise ValueError("cannot relabel an empty episode")
    reached = episode[-1].next_state
    pooled_reached = episode[-1].pooled_next
    out = []
    for i, t in enumerate(episode):
        out.append(
            make_transition(
                reached, t.state, t.action, t.next_state,
                t.pooled_state, t.pooled_next, pooled_reached,
                done=(i == len(episode) - 1),
            )
        )
    return out


def inject_expert(buffer: ReplayBuffer, spec: GeneratorSpec,
                  rng: np.random.Generator, n: int = 64,
                  pair_sampler: Callable | None = None) -> list[Transition]:
    """Seed the buffer with one-step privileged solutions.

    Each sample is a random (goal, start) pair plus the clipped residual
    action: a near-zero-regret transition the critic can anchor on long
    before the actor finds its first success.  ``pair_sampler`` overrides
    the pair distribution (defaults to independent scene samples).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    pair = pair_sampler or _default_pair
    out = []
    for _ in range(n):
        goal, state = pair(spec, rng)
        action = expert_action(goal, state).clipped()
        nxt = apply_action(state, action)
        t = make_transition(
            goal, state, action, nxt,
            pooled_gray(render(spec, state)),
            pooled_gray(render(spec, nxt)),
            pooled_gray(render(spec, goal)),
            done=True,
        )
        buffer.add(t)
        out.append(t)
    return out


# ---------------------------------------------------------------- networks


class QNet:
    """Dense critic: (features, action / bounds) -> scalar value."""

    def __init__(self, seed: int = 0, hidden: int = 256):
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        n_in = FEATURE_DIM + STATE_DIM

        def dense(n_in_, n_out, scale=None):
            s = (1.0 / math.sqrt(n_in_)) if scale is None else scale
            return Tensor(rng.normal(0.0, s, size=(n_in_, n_out)), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "w1": dense(n_in, hidden),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": dense(hidden, hidden),
            "b2": Tensor(np.zeros(hidden), requires_grad=True),
            "w3": dense(hidden, 1, scale=0.01),
            "b3": Tensor(np.zeros(1), requires_grad=True),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x):
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p["w1"]), p["b1"]))
        h = ad.relu(ad.add(ad.matmul(h, p["w2"]), p["b2"]))
        return ad.add(ad.matmul(h, p["w3"]), p["b3"])

    def copy_from(self, other: "QNet") -> None:
        for k, v in other.params.items():
            self.params[k].value = v.value.copy()


_LOG_2PI = math.log(2.0 * math.pi)
_LOG_BOUNDS_SUM = float(np.sum(np.log(ACTION_BOUNDS)))


def squashed_sample(net: PolicyNet, features: np.ndarray, eps: np.ndarray):
    """Reparameterized tanh-Gaussian sample and its log density.

    a = bounds * tanh(mu + std * eps); the density includes the squash
    correction 2(log 2 - u - softplus(-2u)) per dimension and the
    constant -sum(log bounds) from the output scaling.  Built from tape
    ops, so it differentiates when called under a tape and is plain
    arithmetic when not.
    """
    if features.ndim != 2:
        raise ValueError("squashed_sample expects a batch of feature rows")
    mu, log_std = net.forward(features)
    u = ad.add(mu, ad.mul(ad.exp(log_std), eps))
    action = ad.mul(ad.tanh(u), ACTION_BOUNDS)
    # log N(u; mu, std) = -0.5 eps^2 - log_std - 0.5 log 2pi, elementwise
    squash = ad.mul(
        ad.sub(ad.sub(math.log(2.0), u), ad.softplus(ad.mul(u, -2.0))), 2.0
    )
    per_dim = ad.sub(ad.sub(-0.5 * eps * eps, log_std), squash)
    const = -0.5 * STATE_DIM * _LOG_2PI - _LOG_BOUNDS_SUM
    log_prob = ad.add(ad.sum_(per_dim, axis=1), const)
    return action, log_prob


@dataclass
class SacConfig:
    gamma: float = 0.95
    tau: float = 0.005
    lr: float = 3e-4
    batch: int = 128
    hidden: int = 256
    init_alpha: float = 0.1
    target_entropy: float = -float(STATE_DIM)
    tune_alpha: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if self.lr <= 0 or self.batch < 1 or self.hidden < 1:
            raise ValueError("lr, batch and hidden must be positive")
        if self.init_alpha <= 0:
            raise ValueError("init_alpha must be positive")


class SAC:
    """Twin-critic soft actor-critic over the 22-dim action space."""

    def __init__(self, cfg: SacConfig | None = None, seed: int = 0):
        self.cfg = cfg or SacConfig()
        c = self.cfg
        self.actor = PolicyNet(seed=seed, hidden=c.hidden)
        self.q1 = QNet(seed=seed + 1, hidden=c.hidden)
        self.q2 = QNet(seed=seed + 2, hidden=c.hidden)
        self.q1_target = QNet(seed=seed + 1, hidden=c.hidden)
        self.q2_target = QNet(seed=seed + 2, hidden=c.hidden)
        self.q1_target.copy_from(self.q1)
        self.q2_target.copy_from(self.q2)
        self.log_alpha = Tensor(np.array(math.log(c.init_alpha)), requires_grad=True)
        self._actor_opt = AdamState(lr=c.lr)
        self._critic_opt = AdamState(lr=c.lr)
        self._alpha_opt = AdamState(lr=c.lr)
        self.rng = np.random.default_rng(seed)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value))

    def act(self, current, target, deterministic: bool = True,
            rng: np.random.Generator | None = None) -> Action:
        return self.actor.act(current, target, deterministic, rng)

    def _targets(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        eps = self.rng.standard_normal((len(batch["rewards"]), STATE_DIM))
        a2, logp2 = squashed_sample(self.actor, batch["next_features"], eps)
        x2 = np.concatenate(
            [batch["next_features"], ad.value_of(a2) / ACTION_BOUNDS], axis=1
        )
        q1t = ad.value_of(self.q1_target.forward(x2))
        q2t = ad.value_of(self.q2_target.forward(x2))
        soft_q = np.minimum(q1t, q2t) - self.alpha * ad.value_of(logp2)[:, None]
        r = batch["rewards"][:, None]
        live = 1.0 - batch["dones"][:, None]
        return r + self.cfg.gamma * live * soft_q

    def update(self, buffer: ReplayBuffer) -> dict[str, float]:
        """One gradient step of critics, actor, and temperature."""
        c = self.cfg
        batch = buffer.sample(c.batch, self.rng)
        y = self._targets(batch)

        q_params = self.q1.parameters() + self.q2.parameters()
        x = np.concatenate(
            [batch["features"], batch["actions"] / ACTION_BOUNDS], axis=1
        )
        with ad.Tape() as tape:
            err1 = ad.sub(self.q1.forward(x), y)
            err2 = ad.sub(self.q2.forward(x), y)
            critic_loss = ad.add(
                ad.mean_(ad.square(err1)), ad.mean_(ad.square(err2))
            )
            grads = ad.backward(tape, critic_loss, q_params)
        adam_step(self._critic_opt, q_params, grads)

        actor_params = self.actor.parameters()
        eps = self.rng.standard_normal((c.batch, STATE_DIM))
        with ad.Tape() as tape:
            a, logp = squashed_sample(self.actor, batch["features"], eps)
            xa = ad.concat(
                [Tensor(batch["features"]), ad.div(a, ACTION_BOUNDS)], axis=1
            )
            q_min = ad.minimum(self.q1.forward(xa), self.q2.forward(xa))
            actor_loss = ad.mean_(
                ad.sub(ad.mul(logp, self.alpha), ad.reshape(q_min, (c.batch,)))
            )
            grads = ad.backward(tape, actor_loss, actor_params)
        adam_step(self._actor_opt, actor_params, grads)

        mean_logp = float(np.mean(ad.value_of(logp)))
        if c.tune_alpha:
            # d/dlog_alpha of -exp(log_alpha) (mean_logp + target_entropy)
            gap = mean_logp + c.target_entropy
            adam_step(self._alpha_opt, [self.log_alpha],
                      [np.asarray(-self.alpha * gap)])

        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for k in online.params:
                tv = target.params[k].value
                tv *= 1.0 - c.tau
                tv += c.tau * online.params[k].value

        self.updates += 1
        return {
            "critic_loss": float(ad.value_of(critic_loss)),
            "actor_loss": float(ad.value_of(actor_loss)),
            "alpha": self.alpha,
            "entropy": -mean_logp,
        }

    def save(self, path) -> None:
        blob = {f"actor.{k}": v.value for k, v in self.actor.params.items()}
        blob.update({f"q1.{k}": v.value for k, v in self.q1.params.items()})
        blob.update({f"q2.{k}": v.value for k, v in self.q2.params.items()})
        blob["log_alpha"] = self.log_alpha.value
        save_weights(path, blob)

    def load(self, path) -> None:
        loaded = load_weights(path)
        expected = (
            {f"actor.{k}" for k in self.actor.params}
            | {f"q1.{k}" for k in self.q1.params}
            | {f"q2.{k}" for k in self.q2.params}
            | {"log_alpha"}
        )
        if set(loaded) != expected:
            raise ValueError("weight file does not match the agent layout")
        for k, v in loaded.items():
            if k == "log_alpha":
                self.log_alpha.value = np.asarray(v, dtype=np.float64)
                continue
            group, name = k.split(".", 1)
            net = {"actor": self.actor, "q1": self.q1, "q2": self.q2}[group]
            if v.shape != net.params[name].value.shape:
                raise ValueError(f"shape mismatch for {k}")
            net.params[name].value = v.astype(np.float64)
        self.q1_target.copy_from(self.q1)
        self.q2_target.copy_from(self.q2)


# ---------------------------------------------------------------- training


@dataclass
class RlTrainConfig:
    episodes: int = 150
    steps: int = 10
    random_episodes: int = 10
    updates_per_step: int = 1
    buffer_capacity: int = 20000
    expert_transitions: int = 64
    hindsight: bool = True
    sac: SacConfig = field(default_factory=SacConfig)

    def __post_init__(self):
        if self.episodes < 1 or self.steps < 1:
            raise ValueError("episodes and steps must be positive")
        if self.random_episodes < 0 or self.updates_per_step < 0:
            raise ValueError("random_episodes and updates_per_step must be >= 0")


def _default_pair(spec: GeneratorSpec, rng: np.random.Generator):
    return sample_state(spec, rng), sample_state(spec, rng)


def train_rl(spec: GeneratorSpec, cfg: RlTrainConfig | None = None,
             seed: int = 0, log_path=None,
             pair_sampler: Callable | None = None) -> tuple[SAC, list[dict]]:
    """Run the collect/update loop; returns the agent and per-episode rows.

    ``pair_sampler(spec, rng) -> (goal, start)`` overrides the start and
    goal distribution (both default to independent scene samples).  One
    update per environment step once the buffer holds a full batch; an
    optional hindsight copy of each episode is added at its end.  Fully
    deterministic for a fixed seed.
    """
    cfg = cfg or RlTrainConfig()
    pair = pair_sampler or _default_pair
    env_rng = np.random.default_rng([seed, 0])
    sac = SAC(cfg.sac, seed=seed)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    if cfg.expert_transitions:
        inject_expert(buffer, spec, env_rng, cfg.expert_transitions, pair)

    rows: list[dict] = []
    for ep in range(cfg.episodes):
        goal, state = pair(spec, env_rng)
        pooled_goal = pooled_gray(render(spec, goal))
        pooled_cur = pooled_gray(render(spec, state))
        episode: list[Transition] = []
        total_r = 0.0
        stats: dict[str, float] = {}
        for t in range(cfg.steps):
            if ep < cfg.random_episodes:
                vec = env_rng.uniform(-ACTION_BOUNDS, ACTION_BOUNDS)
            else:
                feats = features_from_pooled(pooled_cur, pooled_goal)
                vec = sac.actor.action_vector(feats, deterministic=False,
                                              rng=env_rng)
            action = Action.from_vector(vec)
            nxt = apply_action(state, action)
            pooled_nxt = pooled_gray(render(spec, nxt))
            tr = make_transition(goal, state, action, nxt, pooled_cur,
                                 pooled_nxt, pooled_goal,
                                 done=(t == cfg.steps - 1))
            buffer.add(tr)
            episode.append(tr)
            total_r += tr.reward
            state, pooled_cur = nxt, pooled_nxt
            if len(buffer) >= cfg.sac.batch:
                for _ in range(cfg.updates_per_step):
                    stats = sac.update(buffer)
        if cfg.hindsight:
            buffer.extend(hindsight_relabel(episode))
        rows.append({
            "episode": ep,
            "mean_reward": total_r / cfg.steps,
            "critic_loss": stats.get("critic_loss", math.nan),
            "actor_loss": stats.get("actor_loss", math.nan),
            "alpha": stats.get("alpha", sac.alpha),
            "entropy": stats.get("entropy", math.nan),
        })

    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return sac, rows
