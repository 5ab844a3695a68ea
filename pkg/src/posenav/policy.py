"""Navigation policies over the generator's input space.

An episode is a walk through (theta, t, z): the policy looks at the
current synthesized image next to the target image and proposes an
additive update.  Two families share this interface:

* the gradient-descent policy, which backpropagates the image loss
  through the renderer and takes an Adam-preconditioned step (it is the
  unconstrained baseline: no action bounds);
* learned policies (a small dense network), whose actions are squashed
  by tanh into fixed per-component bounds.

Observations are encoded as grayscale 16x16 poolings of the current
image, the target image, and their difference, flattened to 768
features.  The difference channel hands the network the raw error
signal so it never has to learn subtraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, load_weights, save_weights
from .generator import (
    IMAGE_SIZE,
    LATENT_DIM,
    GeneratorSpec,
    PoseState,
    mean_pose,
    perceptual_loss,
    render,
    render_tensors,
)
from .geometry import EulerPose, Translation, wrap_angle

STATE_DIM = 6 + LATENT_DIM  # 3 angles + 3 translation + latent

# Squashing bounds for learned policies: |dtheta| <= pi, |dt| <= 0.5,
# |dz| <= 2.  The GD baseline ignores them.
ACTION_BOUNDS = np.concatenate(
    [np.full(3, math.pi), np.full(3, 0.5), np.full(LATENT_DIM, 2.0)]
)

POOLED_DIM = 16 * 16  # one gray pooling
FEATURE_DIM = 3 * POOLED_DIM  # current, target, difference
assert FEATURE_DIM == 768


@dataclass(frozen=True)
class Action:
    """Additive state update (dtheta, dt, dz)."""

    dtheta: np.ndarray
    dt: np.ndarray
    dz: np.ndarray

    def __post_init__(self):
        for name, size in (("dtheta", 3), ("dt", 3), ("dz", LATENT_DIM)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (size,):
                raise ValueError(f"{name} must have shape ({size},), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dtheta, self.dt, self.dz])

    @staticmethod
    def from_vector(v) -> "Action":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (STATE_DIM,):
            raise ValueError(f"action vector must have shape ({STATE_DIM},)")
        return Action(v[:3].copy(), v[3:6].copy(), v[6:].copy())

    @staticmethod
    def zero() -> "Action":
        return Action(np.zeros(3), np.zeros(3), np.zeros(LATENT_DIM))

    def clipped(self) -> "Action":
        """Clip into the learned-policy bounds (used for expert labels)."""
        return Action.from_vector(
            np.clip(self.as_vector(), -ACTION_BOUNDS, ACTION_BOUNDS)
        )


@dataclass(frozen=True)
class Observation:
    """Current synthesis next to the target it should match."""

    current: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        cur = np.asarray(self.current, dtype=np.float64)
        tgt = np.asarray(self.target, dtype=np.float64)
        if cur.shape != tgt.shape:
            raise ValueError(f"image shapes differ: {cur.shape} vs {tgt.shape}")
        object.__setattr__(self, "current", cur)
        object.__setattr__(self, "target", tgt)


@dataclass(frozen=True)
class EpisodeConfig:
    steps: int = 10
    record_trajectory: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


def apply_action(state: PoseState, action: Action) -> PoseState:
    """Additive transition.  Angles re-wrap and translation/latent
    re-clamp through the state types' construction invariants."""
    theta = state.theta.as_array() + action.dtheta
    trans = state.trans.as_array() + action.dt
    return PoseState(
        EulerPose(float(theta[0]), float(theta[1]), float(theta[2])),
        Translation(float(trans[0]), float(trans[1]), float(trans[2])),
        state.z + action.dz,
    )


def _gray_pool16(image: np.ndarray) -> np.ndarray:
    """Channel-mean then average-pool to 16x16."""
    gray = image.mean(axis=2)
    n = gray.shape[0]
    k = n // 16
    return gray.reshape(16, k, 16, k).mean(axis=(1, 3))


def pooled_gray(image) -> np.ndarray:
    """Flattened 16x16 gray pooling of one image, the unit the replay
    machinery stores (features are assembled from three of these)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] % 16:
        raise ValueError(f"expected (H, W, 3) with H divisible by 16, got {image.shape}")
    return _gray_pool16(image).ravel()


def features_from_pooled(pooled_current: np.ndarray,
                         pooled_target: np.ndarray) -> np.ndarray:
    """[current, target, current - target] from two 256-entry poolings."""
    pooled_current = np.asarray(pooled_current, dtype=np.float64)
    pooled_target = np.asarray(pooled_target, dtype=np.float64)
    if pooled_current.shape != (POOLED_DIM,) or pooled_target.shape != (POOLED_DIM,):
        raise ValueError(f"poolings must have shape ({POOLED_DIM},)")
    feats = np.concatenate(
        [pooled_current, pooled_target, pooled_current - pooled_target]
    )
    assert feats.shape == (FEATURE_DIM,)
    return feats


def encode_observation(current, target=None) -> np.ndarray:
    """Flattened [current, target, current - target] gray poolings.

    Feature length is fixed at 3 * 16 * 16 = 768 (asserted): three
    grayscale images pooled to 16x16.
    """
    if target is None:
        obs = current
        current, target = obs.current, obs.target
    current = np.asarray(current, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if current.shape != target.shape:
        raise ValueError(f"image shapes differ: {current.shape} vs {target.shape}")
    return features_from_pooled(pooled_gray(current), pooled_gray(target))


# ------------------------------------------------------------------ network


class PolicyNet:
    """Dense tanh network: 768 -> 256 -> 256 -> (mean, log-std) of 22.

    The mean head is squashed by tanh and scaled to ACTION_BOUNDS; the
    log-std head is clamped to [-5, 2].  Heads start near zero so the
    untrained policy proposes tiny steps.
    """

    LOG_STD_MIN = -5.0
    LOG_STD_MAX = 2.0

    def __init__(self, seed: int = 0, hidden: int = 256):
        rng = np.random.default_rng(seed)
        self.hidden = hidden

        def dense(n_in, n_out, scale=None):
            s = (1.0 / math.sqrt(n_in)) if scale is None else scale
            return Tensor(rng.normal(0.0, s, size=(n_in, n_out)), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "w1": dense(FEATURE_DIM, hidden),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": dense(hidden, hidden),
            "b2": Tensor(np.zeros(hidden), requires_grad=True),
            "w_mu": dense(hidden, STATE_DIM, scale=0.01),
            "b_mu": Tensor(np.zeros(STATE_DIM), requires_grad=True),
            "w_sig": dense(hidden, STATE_DIM, scale=0.01),
            "b_sig": Tensor(np.full(STATE_DIM, -1.0), requires_grad=True),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, features):
        """(B, 768) or (768,) features -> (mu, log_std) pre-squash heads."""
        p = self.params
        h = ad.tanh(ad.add(ad.matmul(features, p["w1"]), p["b1"]))
        h = ad.tanh(ad.add(ad.matmul(h, p["w2"]), p["b2"]))
        mu = ad.add(ad.matmul(h, p["w_mu"]), p["b_mu"])
        log_std = ad.clamp(
            ad.add(ad.matmul(h, p["w_sig"]), p["b_sig"]),
            self.LOG_STD_MIN,
            self.LOG_STD_MAX,
        )
        return mu, log_std

    def action_vector(self, features: np.ndarray, deterministic: bool = True,
                      rng: np.random.Generator | None = None) -> np.ndarray:
        """Squashed action for one feature vector, outside any tape."""
        mu, log_std = self.forward(features)
        u = ad.value_of(mu)
        if not deterministic:
            if rng is None:
                raise ValueError("stochastic action needs an rng")
            u = u + np.exp(ad.value_of(log_std)) * rng.standard_normal(u.shape)
        return np.tanh(u) * ACTION_BOUNDS

    def act(self, current, target, deterministic: bool = True,
            rng: np.random.Generator | None = None) -> Action:
        feats = encode_observation(current, target)
        return Action.from_vector(self.action_vector(feats, deterministic, rng))

    def save(self, path) -> None:
        save_weights(path, {k: v.value for k, v in self.params.items()})

    def load(self, path) -> None:
        loaded = load_weights(path)
        if set(loaded) != set(self.params):
            raise ValueError("weight file does not match the network layout")
        for k, v in loaded.items():
            if v.shape != self.params[k].value.shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k].value = v.astype(np.float64)


# ------------------------------------------------------------------ gradient


@dataclass
class GdConfig:
    """Gradient-descent policy settings (the lr is the step-speed knob).

    Defaults are calibrated on the toy generator: lr 0.015 with beta1 0.8
    gives quasi-monotone descent (low momentum avoids overshoot near the
    optimum) while still converging well inside the 50-step budget.
    """

    lr: float = 0.015
    steps: int = 50
    beta1: float = 0.8
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


def _fresh_adam(cfg: GdConfig) -> AdamState:
    return AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def _gd_step(spec, state, target, cfg, opt_state):
    """One traced descent step; returns the rendered image as well."""
    if opt_state is None:
        opt_state = _fresh_adam(cfg)
    with ad.Tape() as tape:
        theta = Tensor(state.theta.as_array(), requires_grad=True)
        trans = Tensor(state.trans.as_array(), requires_grad=True)
        z = Tensor(state.z.copy(), requires_grad=True)
        image = render_tensors(spec, theta, trans, z)
        loss = perceptual_loss(image, target)
        grads = ad.backward(tape, loss, [theta, trans, z])

    before = state.as_vector()
    scratch = Tensor(before.copy(), requires_grad=True)
    adam_step(opt_state, [scratch], [np.concatenate(grads)])
    action = Action.from_vector(scratch.value - before)
    return action, opt_state, image.value


def gd_policy_step(spec: GeneratorSpec, state: PoseState, target: np.ndarray,
                   cfg: GdConfig, opt_state: AdamState | None = None):
    """Adam-preconditioned negative gradient of the image loss.

    The action is the raw optimizer step: no squashing bounds.  Optimizer
    moments persist across the episode through ``opt_state``; pass None
    at the first step.  Non-finite losses raise through the tape.
    """
    action, opt_state, _ = _gd_step(spec, state, target, cfg, opt_state)
    return action, opt_state


# ------------------------------------------------------------------ rollout


@dataclass
class Trajectory:
    """One episode: T+1 states/losses, T actions, optionally T+1 images."""

    states: list
    actions: list
    losses: list
    images: list = field(default_factory=list)

    @property
    def final_state(self) -> PoseState:
        return self.states[-1]


class GdPolicy:
    """Rollout adapter for the gradient-descent rule.

    Policies follow a two-call protocol: ``reset(spec, target, rng)``
    once per episode, then ``step(state, render_fn) -> (Action, image)``
    per step, where the returned image is the current render the policy
    used or produced (GD hands back the tape render, bit-identical to a
    plain one, so nothing is rendered twice).
    """

    def __init__(self, cfg: GdConfig | None = None):
        self.cfg = cfg or GdConfig()
        self._opt = None
        self._spec = None
        self._target = None

    def reset(self, spec: GeneratorSpec, target: np.ndarray,
              rng: np.random.Generator | None = None) -> None:
        self._opt = None
        self._spec = spec
        self._target = target

    def step(self, state: PoseState, render_fn):
        action, self._opt, image = _gd_step(
            self._spec, state, self._target, self.cfg, self._opt
        )
        return action, image


class NetworkPolicy:
    """Rollout adapter for a trained PolicyNet (mean action by default)."""

    def __init__(self, net: PolicyNet, deterministic: bool = True,
                 use_latent: bool = True):
        self.net = net
        self.deterministic = deterministic
        self.use_latent = use_latent
        self._target = None
        self._rng = None

    def reset(self, spec, target, rng=None) -> None:
        self._target = target
        self._rng = rng

    def step(self, state: PoseState, render_fn):
        current = render_fn()
        a = self.net.act(current, self._target, self.deterministic, self._rng)
        if not self.use_latent:
            a = Action(a.dtheta, a.dt, np.zeros(LATENT_DIM))
        return a, current


def rollout(policy, spec: GeneratorSpec, s0: PoseState, target: np.ndarray,
            cfg: EpisodeConfig, rng: np.random.Generator | None = None) -> Trajectory:
    """Run one episode of cfg.steps actions from s0 toward target.

    The spec is never mutated: the simulator is fixed, policies only
    move the state.  With record_trajectory off, images are not kept
    (losses and states still are).
    """
    policy.reset(spec, target, rng)
    record = cfg.record_trajectory
    states = [s0]
    actions = []
    losses = []
    images = []

    state = s0
    for _ in range(cfg.steps):
        action, current = policy.step(state, lambda s=state: render(spec, s))
        if current is None:
            current = render(spec, state)
        losses.append(float(perceptual_loss(current, target).value))
        if record:
            images.append(current)
        actions.append(action)
        state = apply_action(state, action)
        states.append(state)

    final_img = render(spec, state)
    losses.append(float(perceptual_loss(final_img, target).value))
    if record:
        images.append(final_img)
    return Trajectory(states=states, actions=actions, losses=losses, images=images)


def multi_start_gd(spec: GeneratorSpec, target: np.ndarray, n_starts: int,
                   cfg: GdConfig | None = None) -> PoseState:
    """Restarted descent: mean pose plus n azimuth offsets 2*pi*k/n.

    Every start runs the full budget; the final state with the lowest
    image loss wins.  n_starts = 1 is exactly the plain GD episode.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    cfg = cfg or GdConfig()
    base = mean_pose(spec)
    episode = EpisodeConfig(steps=cfg.steps, record_trajectory=False)
    best_state, best_loss = None, math.inf
    for k in range(n_starts):
        offset = wrap_angle(2.0 * math.pi * k / n_starts)
        s0 = PoseState(
            EulerPose(float(offset), base.theta.elevation, base.theta.inplane),
            base.trans,
            base.z,
        )
        traj = rollout(GdPolicy(cfg), spec, s0, target, episode)
        if traj.losses[-1] < best_loss:
            best_loss = traj.losses[-1]
            best_state = traj.final_state
    return best_state
