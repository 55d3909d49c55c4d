"""Actor-critic with imagined subgoals.

One :class:`Agent` owns every network:

* twin Q functions ``q1``/``q2`` over (state, action, goal) and their EMA targets,
* the goal-conditioned policy (tanh-squashed Gaussian) and its EMA copy, which
  is evaluated at imagined subgoals to form the prior policy,
* the high-level policy, a diagonal Laplace over subgoal positions.

The update functions below take explicit random generators so that a run is
a deterministic function of its seed. Anything computed without gradients
goes through the graph-free ``*_np`` helpers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParameterSet, Tensor, init_mlp, mlp_apply, mlp_forward, polyak_update
from .distributions import (
    LOG_2,
    LOG_STD_MAX,
    LOG_STD_MIN,
    DiagLaplaceParams,
    SquashedGaussianParams,
    laplace_log_prob,
    laplace_sample,
    presquash_log_prob,
)
from .env import ACTION_DIM, STATE_DIM, MazeSpec
from .errors import ConfigurationError, NonFiniteError
from .replay import Batch

LOG_SCALE_MIN = -10.0
LOG_SCALE_MAX = 2.0
# keeps inverse-CDF Laplace draws finite
_U_EDGE = 0.5 - 1e-12


class PriorMode(str, enum.Enum):
    IMAGINED_SUBGOALS = "ris"
    UNIFORM = "uniform"
    MOVING_AVERAGE = "ema"
    ORACLE_SUBGOALS = "oracle"
    # imagined-subgoal prior, but the high-level policy minimises the cost directly
    NO_IMPLICIT_REGULARIZATION = "noreg"

    @property
    def trains_highlevel(self) -> bool:
        return self in (PriorMode.IMAGINED_SUBGOALS, PriorMode.NO_IMPLICIT_REGULARIZATION)


@dataclass
class RISHyperparams:
    gamma: float = 0.99
    tau: float = 5e-3
    alpha: float = 0.1
    lam: float = 0.1
    eps_prior: float = 1e-16
    batch_size: int = 2048
    lr_critic: float = 1e-3
    lr_policy: float = 1e-3
    lr_highlevel: float = 1e-4
    prior_samples: int = 10
    kl_samples: int = 1
    baseline_samples: int = 10
    value_clip: tuple = (-100.0, 0.0)
    q_hidden: tuple = (256, 256)
    policy_hidden: tuple = (256, 256)
    highlevel_hidden: tuple = (256, 256)
    oracle_scale: float = 0.5
    prior_mode: PriorMode = PriorMode.IMAGINED_SUBGOALS

    def __post_init__(self):
        self.prior_mode = PriorMode(self.prior_mode)
        self.value_clip = tuple(float(v) for v in self.value_clip)
        for name in ("q_hidden", "policy_hidden", "highlevel_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must be in (0, 1), got {self.tau}")
        if not self.alpha >= 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("lam", "eps_prior", "lr_critic", "lr_policy", "lr_highlevel", "oracle_scale"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("batch_size", "prior_samples", "kl_samples", "baseline_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        lo, hi = self.value_clip
        if not lo < hi:
            raise ConfigurationError(f"value_clip must be increasing, got {self.value_clip}")
        for name in ("q_hidden", "policy_hidden", "highlevel_hidden"):
            if not getattr(self, name) or min(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} needs at least one positive width")


def _check_finite(value: float, what: str, **context) -> None:
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={v}" for k, v in context.items())
        raise NonFiniteError(f"non-finite {what} ({detail})")


def softmax_weights(advantages, lam: float) -> np.ndarray:
    """Batch softmax of ``advantages / lam``."""
    z = np.asarray(advantages, dtype=float) / lam
    z = z - z.max()
    w = np.exp(z)
    w /= w.sum()
    if not np.all(np.isfinite(w)):
        raise NonFiniteError("non-finite high-level weights")
    return w


@dataclass
class UpdateStats:
    critic_loss: float = float("nan")
    highlevel_loss: float = float("nan")
    policy_loss: float = float("nan")
    policy_kl: float = float("nan")


class Agent:
    """Networks, optimisers and the input normalisation for one maze."""

    def __init__(self, spec: MazeSpec, hp: RISHyperparams, rng: np.random.Generator):
        self.spec = spec
        self.hp = hp
        self.state_dim = STATE_DIM
        self.action_dim = ACTION_DIM
        self.center = spec.center
        self.half = spec.center.copy()
        self.log_half = np.log(self.half)
        sd, adim = STATE_DIM, ACTION_DIM
        self.q1 = init_mlp([2 * sd + adim, *hp.q_hidden, 1], rng)
        self.q2 = init_mlp([2 * sd + adim, *hp.q_hidden, 1], rng)
        self.policy = init_mlp([2 * sd, *hp.policy_hidden, 2 * adim], rng)
        self.highlevel = init_mlp([2 * sd, *hp.highlevel_hidden, 2 * sd], rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.policy_ema = self.policy.copy()
        self.q1_opt = Adam(self.q1, hp.lr_critic)
        self.q2_opt = Adam(self.q2, hp.lr_critic)
        self.policy_opt = Adam(self.policy, hp.lr_policy)
        self.highlevel_opt = Adam(self.highlevel, hp.lr_highlevel)
        self._midpoints = None

    # -- checkpoint layout -------------------------------------------------

    NETWORKS = ("policy", "policy_ema", "highlevel", "q1", "q2", "q1_target", "q2_target")

    def parameters(self) -> ParameterSet:
        """Every network tensor under a ``<network>.<layer>`` name, in fixed order."""
        out = ParameterSet()
        for net in self.NETWORKS:
            for name, t in getattr(self, net).items():
                out.add(f"{net}.{name}", t)
        return out

    def load_arrays(self, arrays) -> None:
        expected = self.parameters()
        extra = sorted(set(arrays) - set(expected.names()))
        if extra:
            raise ConfigurationError(f"unexpected tensors in checkpoint: {extra}")
        expected.load_state(arrays)

    # -- normalisation -----------------------------------------------------

    def _norm(self, x):
        if isinstance(x, Tensor):
            return (x - self.center) * (1.0 / self.half)
        return (np.asarray(x, float) - self.center) / self.half

    def _q_input(self, s, a, g):
        return np.concatenate([self._norm(s), a, self._norm(g)], axis=-1)

    # -- graph-free evaluation ---------------------------------------------

    def policy_np(self, params: ParameterSet, s, g) -> tuple:
        out = mlp_apply(params, np.concatenate([self._norm(s), self._norm(g)], axis=-1))
        d = self.action_dim
        return out[..., :d], np.clip(out[..., d:], LOG_STD_MIN, LOG_STD_MAX)

    def q_np(self, params: ParameterSet, s, a, g) -> np.ndarray:
        return mlp_apply(params, self._q_input(s, a, g))[..., 0]

    def highlevel_np(self, s, g) -> tuple:
        out = mlp_apply(self.highlevel, np.concatenate([self._norm(s), self._norm(g)], axis=-1))
        d = self.state_dim
        loc = self.center + self.half * out[..., :d]
        log_scale = self.log_half + np.clip(out[..., d:], LOG_SCALE_MIN, LOG_SCALE_MAX)
        return loc, log_scale

    def mean_subgoal(self, s, g) -> np.ndarray:
        return self.highlevel_np(s, g)[0]

    def act(self, s, g, noise=None) -> np.ndarray:
        """Policy action; the distribution mean when ``noise`` is None."""
        mu, log_std = self.policy_np(self.policy, s, g)
        if noise is None:
            return np.tanh(mu)
        return np.tanh(mu + np.exp(log_std) * noise)

    def value_np(self, s, g, noise) -> np.ndarray:
        """min(Q1, Q2)(s, a, g) for one reparametrised action a ~ pi(.|s, g)."""
        a = self.act(s, g, noise)
        return np.minimum(self.q_np(self.q1, s, a, g), self.q_np(self.q2, s, a, g))

    # -- graph builders ----------------------------------------------------

    def policy_dist(self, params: ParameterSet, s, g) -> SquashedGaussianParams:
        out = mlp_forward(params, ad.concat([self._norm(s), self._norm(g)], axis=-1))
        d = self.action_dim
        return SquashedGaussianParams(out[:, :d], out[:, d:])

    def q_forward(self, params: ParameterSet, s, a, g) -> Tensor:
        x = ad.concat([self._norm(s), a, self._norm(g)], axis=-1)
        return mlp_forward(params, x)[:, 0]

    def highlevel_dist(self, params: ParameterSet, s, g) -> DiagLaplaceParams:
        out = mlp_forward(params, ad.concat([self._norm(s), self._norm(g)], axis=-1))
        d = self.state_dim
        loc = out[:, :d] * self.half + self.center
        log_scale = ad.clip(out[:, d:], LOG_SCALE_MIN, LOG_SCALE_MAX) + self.log_half
        return DiagLaplaceParams(loc, log_scale)

    def oracle_midpoints(self, s, g) -> np.ndarray:
        if self._midpoints is None:
            from .oracle import MidpointTable

            self._midpoints = MidpointTable(self.spec)
        return self._midpoints.midpoint(s, g)


# --- policy evaluation -----------------------------------------------------


def bellman_target(agent: Agent, batch: Batch, noise) -> np.ndarray:
    """r + (1 - done) * gamma * min target Q at a' ~ pi(.|s', g); no entropy bonus."""
    a_next = agent.act(batch.next_state, batch.goal, noise)
    q_next = np.minimum(
        agent.q_np(agent.q1_target, batch.next_state, a_next, batch.goal),
        agent.q_np(agent.q2_target, batch.next_state, a_next, batch.goal),
    )
    return batch.reward + (1.0 - batch.done) * agent.hp.gamma * q_next


def critic_loss(agent: Agent, q: ParameterSet, batch: Batch, y) -> Tensor:
    err = agent.q_forward(q, batch.state, batch.action, batch.goal) - y
    return ad.mean(err * err)


def critic_update(agent: Agent, batch: Batch, rng: np.random.Generator, noise=None) -> float:
    """One Adam step on each Q towards the shared target, then Polyak targets."""
    if noise is None:
        noise = rng.standard_normal((len(batch), agent.action_dim))
    y = bellman_target(agent, batch, noise)
    losses = []
    for q, opt, name in ((agent.q1, agent.q1_opt, "q1"), (agent.q2, agent.q2_opt, "q2")):
        q.zero_grad()
        loss = critic_loss(agent, q, batch, y)
        _check_finite(loss.item(), "critic loss", network=name, step=opt.t)
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    polyak_update(agent.q1_target, agent.q1, agent.hp.tau)
    polyak_update(agent.q2_target, agent.q2, agent.hp.tau)
    return 0.5 * (losses[0] + losses[1])


# --- values and subgoal cost -----------------------------------------------


def value(agent: Agent, s, g, rng: np.random.Generator = None, noise=None) -> np.ndarray:
    if noise is None:
        noise = rng.standard_normal(np.shape(s)[:-1] + (agent.action_dim,))
    return agent.value_np(s, g, noise)


def clip_value(v, bounds=(-100.0, 0.0)):
    return np.clip(v, *bounds)


def subgoal_cost(agent: Agent, s, s_g, g, rng: np.random.Generator = None, noise=None) -> np.ndarray:
    """max(|V(s, s_g)|, |V(s_g, g)|) with both values clipped to the value window.

    ``noise`` (optional) has shape (2, ..., action_dim): one draw per leg.
    """
    s, s_g, g = (np.asarray(x, float) for x in (s, s_g, g))
    s, s_g, g = np.broadcast_arrays(s, s_g, g)
    if noise is None:
        noise = rng.standard_normal((2,) + s.shape[:-1] + (agent.action_dim,))
    # both legs in one forward pass
    v = agent.value_np(np.stack([s, s_g]), np.stack([s_g, g]), noise)
    v = clip_value(v, agent.hp.value_clip)
    return np.maximum(np.abs(v[0]), np.abs(v[1]))


def sample_subgoals_np(loc, log_scale, u) -> np.ndarray:
    u = np.clip(u, -_U_EDGE, _U_EDGE)
    return loc - np.exp(log_scale) * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def highlevel_advantage(agent: Agent, s, g, s_g, rng: np.random.Generator, m: int = None) -> np.ndarray:
    """Mean cost of m fresh subgoals from the high-level policy minus the cost of ``s_g``."""
    m = m or agent.hp.baseline_samples
    s, g, s_g = (np.asarray(x, float) for x in (s, g, s_g))
    loc, log_scale = agent.highlevel_np(s, g)
    u = rng.uniform(-0.5, 0.5, size=(m,) + loc.shape)
    baseline = sample_subgoals_np(loc, log_scale, u)
    candidates = np.concatenate([s_g[None], baseline], axis=0)
    cost = subgoal_cost(agent, s[None], candidates, g[None], rng)
    return cost[1:].mean(axis=0) - cost[0]


def highlevel_loss(agent: Agent, params: ParameterSet, batch: Batch, candidates, weights) -> Tensor:
    """Weighted negative log-likelihood of the candidates; weights are constants."""
    dist = agent.highlevel_dist(params, batch.state, batch.goal)
    return -ad.tsum(laplace_log_prob(candidates, dist) * weights)


def highlevel_update(agent: Agent, candidates, batch: Batch, rng: np.random.Generator) -> float:
    """Advantage-weighted maximum likelihood on replay-buffer subgoal candidates."""
    adv = highlevel_advantage(agent, batch.state, batch.goal, candidates, rng)
    weights = softmax_weights(adv, agent.hp.lam)
    agent.highlevel.zero_grad()
    loss = highlevel_loss(agent, agent.highlevel, batch, candidates, weights)
    _check_finite(loss.item(), "high-level loss", step=agent.highlevel_opt.t)
    ad.backward(loss)
    agent.highlevel_opt.step()
    return loss.item()


def _value_graph(agent: Agent, s, g, noise) -> Tensor:
    """Differentiable min-Q value w.r.t. the state/goal inputs; network weights are constants."""
    dist = agent.policy_dist(agent.policy.detached(), s, g)
    a = ad.tanh(dist.mean + ad.exp(dist.log_std) * noise)
    return ad.minimum(
        agent.q_forward(agent.q1.detached(), s, a, g),
        agent.q_forward(agent.q2.detached(), s, a, g),
    )


def cost_graph(agent: Agent, s, s_g: Tensor, g, noise) -> Tensor:
    lo, hi = agent.hp.value_clip
    v1 = ad.absolute(ad.clip(_value_graph(agent, s, s_g, noise[0]), lo, hi))
    v2 = ad.absolute(ad.clip(_value_graph(agent, s_g, g, noise[1]), lo, hi))
    return ad.maximum(v1, v2)


def highlevel_update_unregularized(agent: Agent, batch: Batch, rng: np.random.Generator) -> float:
    """Ablation: gradient descent on the expected cost of reparametrised subgoal samples."""
    n = len(batch)
    agent.highlevel.zero_grad()
    dist = agent.highlevel_dist(agent.highlevel, batch.state, batch.goal)
    u = np.clip(rng.uniform(-0.5, 0.5, size=(n, agent.state_dim)), -_U_EDGE, _U_EDGE)
    s_g = laplace_sample(dist, u)
    noise = rng.standard_normal((2, n, agent.action_dim))
    loss = ad.mean(cost_graph(agent, batch.state, s_g, batch.goal, noise))
    _check_finite(loss.item(), "high-level cost", step=agent.highlevel_opt.t)
    ad.backward(loss)
    agent.highlevel_opt.step()
    return loss.item()


# --- prior policy and policy improvement -----------------------------------


def _mixture_log_prob(agent: Agent, s, subgoals: np.ndarray, pre) -> Tensor:
    """log(mean_i pi_ema(a | s, subgoal_i) + eps) with max-shifted log-sum-exp."""
    count = subgoals.shape[0]
    s_rep = np.broadcast_to(np.asarray(s, float), subgoals.shape)
    mu, log_std = agent.policy_np(agent.policy_ema, s_rep, subgoals)
    comp = presquash_log_prob(SquashedGaussianParams(mu, log_std), ad.reshape(pre, (1,) + pre.shape))
    mix = ad.logsumexp(comp, axis=0) - math.log(count)
    return ad.logaddexp(mix, math.log(agent.hp.eps_prior))


def draw_prior_subgoals(agent: Agent, s, g, rng: np.random.Generator, mode: PriorMode = None) -> np.ndarray:
    """Subgoal draws of shape (I, batch, state_dim) for the mixture prior."""
    mode = PriorMode(mode or agent.hp.prior_mode)
    count = agent.hp.prior_samples
    if mode is PriorMode.ORACLE_SUBGOALS:
        loc = agent.oracle_midpoints(s, g)
        log_scale = np.full_like(loc, math.log(agent.hp.oracle_scale))
    else:
        loc, log_scale = agent.highlevel_np(s, g)
    u = rng.uniform(-0.5, 0.5, size=(count,) + loc.shape)
    return sample_subgoals_np(loc, log_scale, u)


def prior_log_prob_pre(agent: Agent, s, g, pre, rng: np.random.Generator, mode: PriorMode = None) -> Tensor:
    """Prior log-density at action tanh(pre); differentiable w.r.t. ``pre`` only."""
    mode = PriorMode(mode or agent.hp.prior_mode)
    pre = ad.as_tensor(pre)
    if mode is PriorMode.UNIFORM:
        return Tensor(np.full(pre.shape[:-1], -agent.action_dim * LOG_2))
    if mode is PriorMode.MOVING_AVERAGE:
        mu, log_std = agent.policy_np(agent.policy_ema, s, g)
        return presquash_log_prob(SquashedGaussianParams(mu, log_std), pre)
    subgoals = draw_prior_subgoals(agent, s, g, rng, mode)
    return _mixture_log_prob(agent, s, subgoals, pre)


def prior_log_prob(agent: Agent, s, g, action, rng: np.random.Generator, mode: PriorMode = None,
                   subgoals: np.ndarray = None) -> np.ndarray:
    """Monte-Carlo prior log-density log(mean_i pi_ema(a | s, s_g^i) + eps) at ``action``.

    ``subgoals`` (I, batch, state_dim) overrides the subgoal draws.
    """
    action = np.clip(np.asarray(action, float), -1.0 + 1e-6, 1.0 - 1e-6)
    pre = np.arctanh(action)
    if subgoals is not None:
        return _mixture_log_prob(agent, s, np.asarray(subgoals, float), Tensor(pre)).data
    return prior_log_prob_pre(agent, s, g, pre, rng, mode).data


def policy_loss(agent: Agent, params: ParameterSet, s, g, noise, rng: np.random.Generator,
                mode: PriorMode = None) -> tuple:
    """mean(alpha * KL estimate - min Q) for one reparametrised action per row; returns (loss, kl)."""
    dist = agent.policy_dist(params, s, g)
    pre = dist.mean + ad.exp(dist.log_std) * noise
    action = ad.tanh(pre)
    kl = presquash_log_prob(dist, pre) - prior_log_prob_pre(agent, s, g, pre, rng, mode)
    q = ad.minimum(
        agent.q_forward(agent.q1.detached(), s, action, g),
        agent.q_forward(agent.q2.detached(), s, action, g),
    )
    return ad.mean(agent.hp.alpha * kl - q), kl


def policy_update(agent: Agent, batch: Batch, rng: np.random.Generator, mode: PriorMode = None) -> tuple:
    """KL-regularised policy improvement; returns (loss, mean KL estimate)."""
    hp = agent.hp
    mode = PriorMode(mode or hp.prior_mode)
    reps = hp.kl_samples
    s = np.tile(batch.state, (reps, 1))
    g = np.tile(batch.goal, (reps, 1))
    agent.policy.zero_grad()
    noise = rng.standard_normal((len(s), agent.action_dim))
    loss, kl = policy_loss(agent, agent.policy, s, g, noise, rng, mode)
    _check_finite(loss.item(), "policy loss", step=agent.policy_opt.t, mode=mode.value)
    ad.backward(loss)
    agent.policy_opt.step()
    polyak_update(agent.policy_ema, agent.policy, hp.tau)
    return loss.item(), float(kl.data.mean())


def train_step(agent: Agent, batch: Batch, candidates, rng: np.random.Generator) -> UpdateStats:
    """Q, then the high-level policy, then the policy."""
    stats = UpdateStats()
    stats.critic_loss = critic_update(agent, batch, rng)
    mode = agent.hp.prior_mode
    if mode is PriorMode.IMAGINED_SUBGOALS:
        stats.highlevel_loss = highlevel_update(agent, candidates, batch, rng)
    elif mode is PriorMode.NO_IMPLICIT_REGULARIZATION:
        stats.highlevel_loss = highlevel_update_unregularized(agent, batch, rng)
    stats.policy_loss, stats.policy_kl = policy_update(agent, batch, rng)
    return stats
