"""Recurrent state-space model over the learned embedding space.

State = deterministic recurrent vector h plus a matrix of categorical
one-hot rows z. Five heads share parameters phi:

    recurrent   h_t = f(h_{t-1}, z_{t-1}, a_{t-1})        (GRU cell)
    posterior   z_t ~ q(z_t | h_t, e_t)                    (sees the embedding)
    prior       z_t ~ p(z_t | h_t)                         (does not)
    embedding   e_hat_t = g(h_t, z_t)
    reward      r_hat_t = r(h_t, z_t, e_goal)

Training minimizes embedding reconstruction, a unit-variance Gaussian
reward log loss, and a KL between posterior and prior with stop-gradient
balancing so the prior is pulled toward the posterior harder than the
posterior is pulled back. Embeddings fed here are precomputed by a frozen
encoder; nothing in this module touches encoder parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import _init_linear, _linear

__all__ = [
    "RSSMConfig",
    "RSSMState",
    "init_rssm_params",
    "initial_state",
    "step_posterior",
    "step_prior",
    "predict_embedding",
    "predict_reward",
    "rollout",
    "categorical_kl",
    "balanced_kl",
    "gaussian_reward_nll",
    "dynamics_loss",
]

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RSSMConfig:
    deter_dim: int = 128
    num_categoricals: int = 16
    num_classes: int = 16
    embed_dim: int = 256
    action_dim: int = 4
    hidden: int = 128
    kl_alpha: float = 0.8
    kl_beta: float = 1.0
    free_nats: float = 1.0
    embed_weight: float = 1.0
    reward_weight: float = 1.0

    @property
    def stoch_dim(self) -> int:
        return self.num_categoricals * self.num_classes


@dataclass
class RSSMState:
    """Batched latent state; ``logits`` are kept for KL terms."""

    deter: Tensor  # (b, deter_dim)
    stoch: Tensor  # (b, num_categoricals * num_classes), one-hot rows
    logits: Tensor | None = None  # (b, num_categoricals, num_classes)

    @property
    def batch(self) -> int:
        return self.deter.shape[0]

    def detached(self) -> "RSSMState":
        return RSSMState(
            deter=self.deter.detach(),
            stoch=self.stoch.detach(),
            logits=None if self.logits is None else self.logits.detach(),
        )


def init_rssm_params(config: RSSMConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    x_dim = config.stoch_dim + config.action_dim
    h = config.deter_dim
    for gate in ("reset", "update", "cand"):
        _init_linear(params, f"rssm/gru_{gate}_x", x_dim, h, rng, scale=np.sqrt(1.0 / x_dim))
        _init_linear(params, f"rssm/gru_{gate}_h", h, h, rng, scale=np.sqrt(1.0 / h))

    def head(name, fan_in, fan_out):
        _init_linear(params, f"rssm/{name}0", fan_in, config.hidden, rng)
        _init_linear(params, f"rssm/{name}1", config.hidden, fan_out, rng, scale=np.sqrt(1.0 / config.hidden))

    head("posterior", h + config.embed_dim, config.stoch_dim)
    head("prior", h, config.stoch_dim)
    head("embed", h + config.stoch_dim, config.embed_dim)
    head("reward", h + config.stoch_dim + config.embed_dim, 1)
    return params


def initial_state(config: RSSMConfig, batch: int = 1) -> RSSMState:
    return RSSMState(
        deter=Tensor(np.zeros((batch, config.deter_dim))),
        stoch=Tensor(np.zeros((batch, config.stoch_dim))),
    )


def _gru(prev: RSSMState, action, params, config: RSSMConfig) -> Tensor:
    x = ad.concatenate([prev.stoch, action], axis=1)
    h = prev.deter
    reset = ad.sigmoid(_linear(params, "rssm/gru_reset_x", x) + _linear(params, "rssm/gru_reset_h", h))
    update = ad.sigmoid(_linear(params, "rssm/gru_update_x", x) + _linear(params, "rssm/gru_update_h", h))
    cand = ad.tanh(_linear(params, "rssm/gru_cand_x", x) + _linear(params, "rssm/gru_cand_h", reset * h))
    return (1.0 - update) * h + update * cand


def _head(params, name, x: Tensor) -> Tensor:
    return _linear(params, f"rssm/{name}1", ad.relu(_linear(params, f"rssm/{name}0", x)))


def _coerce_action(action, batch: int) -> Tensor:
    if isinstance(action, Tensor):
        t = action
    else:
        t = Tensor(action)
    if t.data.ndim == 1:
        t = t.reshape(1, -1)
    if t.shape[0] != batch:
        raise ValueError(f"action batch {t.shape[0]} != state batch {batch}")
    return t


def step_posterior(
    prev: RSSMState,
    action,
    embedding,
    params: dict[str, Tensor],
    config: RSSMConfig,
    rng: np.random.Generator,
) -> RSSMState:
    """Advance the recurrence and sample z from the embedding-conditioned head."""
    action = _coerce_action(action, prev.batch)
    emb = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
    if emb.data.ndim == 1:
        emb = emb.reshape(1, -1)
    h = _gru(prev, action, params, config)
    logits = _head(params, "posterior", ad.concatenate([h, emb], axis=1)).reshape(
        (prev.batch, config.num_categoricals, config.num_classes)
    )
    z = ad.straight_through_sample(logits, rng).reshape((prev.batch, config.stoch_dim))
    return RSSMState(deter=h, stoch=z, logits=logits)


def step_prior(
    prev: RSSMState,
    action,
    params: dict[str, Tensor],
    config: RSSMConfig,
    rng: np.random.Generator | None = None,
    mode: bool = False,
) -> RSSMState:
    """Advance without embedding access.

    The recurrence is shared with step_posterior, so prior and posterior
    agree bitwise on h given identical history. With ``mode=True`` the
    stochastic rows are the softmax probability rows themselves (no
    sampling): deterministic without an rng, smooth, and genuinely
    differentiable w.r.t. actions, which is what planner gradients need.
    Sampled mode draws hard one-hot rows with a straight-through gradient.
    """
    action = _coerce_action(action, prev.batch)
    h = _gru(prev, action, params, config)
    logits = _head(params, "prior", h).reshape(
        (prev.batch, config.num_categoricals, config.num_classes)
    )
    if mode:
        z = ad.softmax(logits, axis=-1)
    else:
        if rng is None:
            raise ValueError("step_prior: sampled mode needs an rng")
        z = ad.straight_through_sample(logits, rng)
    return RSSMState(deter=h, stoch=z.reshape((prev.batch, config.stoch_dim)), logits=logits)


def predict_embedding(state: RSSMState, params, config: RSSMConfig) -> Tensor:
    return _head(params, "embed", ad.concatenate([state.deter, state.stoch], axis=1))


def predict_reward(state: RSSMState, goal_embedding, params, config: RSSMConfig) -> Tensor:
    """Scalar reward estimate per batch row, conditioned on the goal embedding."""
    goal = goal_embedding if isinstance(goal_embedding, Tensor) else Tensor(goal_embedding)
    if goal.data.ndim == 1:
        goal = ad.broadcast_to(goal.reshape(1, -1), (state.batch, goal.shape[0]))
    out = _head(params, "reward", ad.concatenate([state.deter, state.stoch, goal], axis=1))
    return out.reshape(state.batch)


def rollout(
    initial: RSSMState,
    actions,
    goal_embedding,
    params,
    config: RSSMConfig,
    mode: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[list[RSSMState], Tensor]:
    """Open-loop prior rollout; returns per-step states and (b, horizon) rewards.

    ``actions`` is (b, horizon, action_dim), Tensor or array. Mode rollouts
    are deterministic and differentiable w.r.t. the actions.
    """
    acts = actions if isinstance(actions, Tensor) else Tensor(actions)
    if acts.data.ndim != 3:
        raise ValueError(f"rollout: actions must be (batch, horizon, dim), got {acts.shape}")
    horizon = acts.shape[1]
    if horizon < 1:
        raise ValueError("rollout: horizon must be >= 1")
    states: list[RSSMState] = []
    rewards: list[Tensor] = []
    state = initial
    for t in range(horizon):
        state = step_prior(state, acts[:, t, :], params, config, rng=rng, mode=mode)
        states.append(state)
        rewards.append(predict_reward(state, goal_embedding, params, config).reshape(-1, 1))
    return states, ad.concatenate(rewards, axis=1)


# ------------------------------------------------------------------------- KL


def _log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(t.data.max(axis=axis, keepdims=True))  # constant shift, grad-safe
    z = t - shift
    return z - ad.log(ad.exp(z).sum(axis=axis, keepdims=True))


def categorical_kl(logits_q, logits_p) -> Tensor:
    """KL(q || p) summed over categorical rows; shape (batch,).

    Nonnegative; zero exactly when the logits induce equal distributions.
    """
    lq = _log_softmax(logits_q)
    lp = _log_softmax(logits_p)
    q = ad.softmax(logits_q, axis=-1)
    per_row = (q * (lq - lp)).sum(axis=-1)
    return per_row.sum(axis=-1)


def balanced_kl(post_logits, prior_logits, alpha: float, free_nats: float, beta: float = 1.0) -> Tensor:
    """Stop-gradient balanced KL, averaged over the batch.

    beta * (alpha * KL(sg(q) || p) + (1 - alpha) * KL(q || sg(p))), each
    term clipped from below at ``free_nats`` after batch-averaging.
    """
    toward_prior = categorical_kl(post_logits.detach(), prior_logits).mean()
    toward_post = categorical_kl(post_logits, prior_logits.detach()).mean()
    if free_nats > 0.0:
        toward_prior = free_nats + ad.relu(toward_prior - free_nats)
        toward_post = free_nats + ad.relu(toward_post - free_nats)
    return beta * (alpha * toward_prior + (1.0 - alpha) * toward_post)


def gaussian_reward_nll(r_hat: Tensor, r_true) -> Tensor:
    """Negative log-likelihood under a unit-variance Gaussian, batch mean."""
    diff = r_hat - Tensor(np.asarray(r_true, dtype=np.float64))
    return (0.5 * (diff * diff)).mean() + _HALF_LOG_2PI


def dynamics_loss(
    batch: dict,
    params: dict[str, Tensor],
    config: RSSMConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, dict]:
    """Teacher-forced loss over an episode batch.

    ``batch`` carries "embeddings" (b, T+1, E), "actions" (b, T, A),
    "rewards" (b, T+1), "goal" (E,) or (b, E). Terms are summed over time
    and averaged over the batch. Returns (loss, diagnostics).
    """
    embeds = np.asarray(batch["embeddings"], dtype=np.float64)
    actions = np.asarray(batch["actions"], dtype=np.float64)
    rewards = np.asarray(batch["rewards"], dtype=np.float64)
    goal = np.asarray(batch["goal"], dtype=np.float64)
    b, steps = embeds.shape[0], embeds.shape[1]
    if steps < 2:
        raise ValueError(f"dynamics_loss: episodes must have at least 2 steps, got {steps}")
    if actions.shape[:2] != (b, steps - 1):
        raise ValueError(
            f"dynamics_loss: actions shape {actions.shape} does not match embeddings {embeds.shape}"
        )

    state = initial_state(config, b)
    zero_action = np.zeros((b, config.action_dim))
    total = Tensor(np.zeros(()))
    embed_mse = 0.0
    kl_raw = 0.0
    reward_nll = 0.0
    for t in range(steps):
        act = zero_action if t == 0 else actions[:, t - 1, :]
        h = _gru(state, _coerce_action(act, b), params, config)
        post_logits = _head(params, "posterior", ad.concatenate([h, Tensor(embeds[:, t, :])], axis=1)).reshape(
            (b, config.num_categoricals, config.num_classes)
        )
        prior_logits = _head(params, "prior", h).reshape(
            (b, config.num_categoricals, config.num_classes)
        )
        z = ad.straight_through_sample(post_logits, rng).reshape((b, config.stoch_dim))
        state = RSSMState(deter=h, stoch=z, logits=post_logits)

        e_hat = predict_embedding(state, params, config)
        diff = e_hat - Tensor(embeds[:, t, :])
        embed_term = (diff * diff).sum(axis=1).mean()

        r_hat = predict_reward(state, goal, params, config)
        reward_term = gaussian_reward_nll(r_hat, rewards[:, t])

        kl_term = balanced_kl(post_logits, prior_logits, config.kl_alpha, config.free_nats, config.kl_beta)

        total = total + config.embed_weight * embed_term + config.reward_weight * reward_term + kl_term
        embed_mse += embed_term.item() / embeds.shape[2]
        reward_nll += reward_term.item()
        kl_raw += categorical_kl(post_logits.detach(), prior_logits.detach()).mean().item()

    diagnostics = {
        "embed_mse_per_dim": embed_mse / steps,
        "reward_nll": reward_nll / steps,
        "kl_nats": kl_raw / steps,
    }
    return total, diagnostics
