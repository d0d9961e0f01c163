"""Cross-entropy trajectory optimization with gradient refinement.

The planner samples time-correlated (colored-noise) action sequences,
evaluates them through a rollout model, nudges the best candidates uphill
along the model's action gradient (with backtracking so refinement never
hurts), refits a diagonal Gaussian to the elites, and repeats with a
decaying population. The best sequence ever evaluated is returned.

A closed-loop driver re-observes, corrects the model state, plans, and
executes the first action until a predicted-reward threshold is exceeded
or the step budget runs out.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PlannerConfig",
    "PlanProblem",
    "PlanResult",
    "sample_colored_noise",
    "gradient_refine",
    "plan",
    "MPCResult",
    "mpc_loop",
]


@dataclass(frozen=True)
class PlannerConfig:
    population: int = 64
    elites: int = 10
    iterations: int = 10
    noise_beta: float = 2.0
    population_decay: float = 1.25
    elite_keep: float = 0.3
    shift_init: bool = True
    grad_steps: int = 3
    grad_lr: float = 0.05
    refine_count: int = 10
    init_sigma_scale: float = 0.25  # of the bound range, per dimension

    def __post_init__(self):
        if self.elites > self.population:
            raise ValueError("elite count must not exceed population")
        if self.iterations < 1 or self.population < 1 or self.elites < 1:
            raise ValueError("population, elites, iterations must be positive")


class PlanProblem:
    """Rollout objective over bounded action sequences.

    Subclasses provide ``returns`` (batched evaluation); differentiable
    problems also provide ``returns_and_grads``. Bounds are per action
    dimension and apply at every step of the horizon.
    """

    def __init__(self, horizon: int, lower, upper):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.horizon = int(horizon)
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise ValueError("action bounds must satisfy lower < upper per dimension")

    @property
    def action_dim(self) -> int:
        return len(self.lower)

    def clip(self, actions: np.ndarray) -> np.ndarray:
        return np.clip(actions, self.lower, self.upper)

    def returns(self, actions: np.ndarray) -> np.ndarray:
        """Total return per candidate; actions is (batch, horizon, dim)."""
        raise NotImplementedError

    supports_gradient = False

    def returns_and_grads(self, actions: np.ndarray):
        """(returns (b,), gradients (b, horizon, dim)) for refinement."""
        raise NotImplementedError


@dataclass
class PlanResult:
    actions: np.ndarray  # (horizon, dim)
    expected_return: float
    diagnostics: list[dict] = field(default_factory=list)


def sample_colored_noise(
    rng: np.random.Generator, beta: float, count: int, horizon: int, dims: int
) -> np.ndarray:
    """Unit-variance noise with power spectrum ~ 1/f^beta along the time axis.

    Shape (count, horizon, dims); beta = 0 reduces to white noise. Each
    (candidate, dimension) pair gets an independent time series.
    """
    if horizon == 1:
        return rng.standard_normal((count, 1, dims))
    freqs = np.fft.rfftfreq(horizon)
    scales = np.empty_like(freqs)
    scales[1:] = freqs[1:] ** (-beta / 2.0)
    scales[0] = scales[1]  # flatten the DC bin instead of diverging

    # exact time-domain variance of the synthesized series, so the output is
    # unit variance for every beta (DC and Nyquist bins carry doubled power)
    var = 2.0 * scales[0] ** 2 + 4.0 * np.sum(scales[1:-1] ** 2)
    var += (2.0 if horizon % 2 == 0 else 4.0) * scales[-1] ** 2
    sigma = np.sqrt(var) / horizon

    shape = (count, dims, len(freqs))
    real = rng.standard_normal(shape) * scales
    imag = rng.standard_normal(shape) * scales
    imag[..., 0] = 0.0
    real[..., 0] *= np.sqrt(2.0)
    if horizon % 2 == 0:
        imag[..., -1] = 0.0
        real[..., -1] *= np.sqrt(2.0)
    series = np.fft.irfft(real + 1j * imag, n=horizon, axis=-1) / sigma
    return np.swapaxes(series, 1, 2)


def gradient_refine(
    candidates: np.ndarray,
    problem: PlanProblem,
    steps: int,
    lr: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Ascend each candidate along the model gradient, projecting onto bounds.

    Backtracking (up to 5 halvings per step) rejects any update that
    lowers a candidate's predicted return, so refined returns are never
    worse than the inputs. Candidates with non-finite gradients are left
    untouched with a warning. Returns (refined (m,h,d), returns (m,)).
    """
    current = problem.clip(np.array(candidates, dtype=np.float64))
    returns = problem.returns(current)
    if steps == 0 or lr == 0.0:
        return current, returns
    for _ in range(steps):
        _, grads = problem.returns_and_grads(current)
        bad = ~np.isfinite(grads).all(axis=(1, 2))
        if bad.any():
            warnings.warn(f"gradient_refine: skipping {int(bad.sum())} candidate(s) with non-finite gradient")
            grads[bad] = 0.0
        scale = np.full(len(current), lr)
        proposal = problem.clip(current + scale[:, None, None] * grads)
        new_returns = problem.returns(proposal)
        for _ in range(5):
            worse = new_returns < returns
            if not worse.any():
                break
            scale[worse] *= 0.5
            proposal[worse] = problem.clip(current[worse] + scale[worse, None, None] * grads[worse])
            new_returns[worse] = problem.returns(proposal[worse])
        accept = new_returns >= returns
        current[accept] = proposal[accept]
        returns[accept] = new_returns[accept]
    return current, returns


def plan(
    problem: PlanProblem,
    config: PlannerConfig,
    rng: np.random.Generator,
    init_mean: np.ndarray | None = None,
) -> PlanResult:
    """Run the full optimization; returns the best sequence ever evaluated."""
    h, d = problem.horizon, problem.action_dim
    mean = (
        np.broadcast_to(0.5 * (problem.lower + problem.upper), (h, d)).copy()
        if init_mean is None
        else problem.clip(np.array(init_mean, dtype=np.float64))
    )
    sigma = np.broadcast_to(config.init_sigma_scale * (problem.upper - problem.lower), (h, d)).copy()

    best_actions: np.ndarray | None = None
    best_return = -np.inf
    elite_pool: np.ndarray | None = None
    diagnostics: list[dict] = []

    for iteration in range(config.iterations):
        n_samples = max(2 * config.elites, int(round(config.population * config.population_decay**-iteration)))
        noise = sample_colored_noise(rng, config.noise_beta, n_samples, h, d)
        candidates = problem.clip(mean + sigma * noise)

        extras = [mean.reshape(1, h, d)]
        if elite_pool is not None and config.elite_keep > 0:
            keep = max(1, int(round(config.elite_keep * len(elite_pool))))
            extras.append(elite_pool[:keep])
        if best_actions is not None:
            extras.append(best_actions.reshape(1, h, d))
        candidates = np.concatenate([candidates] + extras, axis=0)

        returns = problem.returns(candidates)

        if problem.supports_gradient and config.refine_count > 0 and config.grad_steps > 0:
            top = np.argsort(-returns, kind="stable")[: config.refine_count]
            refined, refined_returns = gradient_refine(
                candidates[top], problem, config.grad_steps, config.grad_lr
            )
            candidates[top] = refined
            returns[top] = refined_returns

        order = np.argsort(-returns, kind="stable")
        if returns[order[0]] > best_return:
            best_return = float(returns[order[0]])
            best_actions = candidates[order[0]].copy()
        elite_pool = candidates[order[: config.elites]]
        mean = elite_pool.mean(axis=0)
        sigma = np.maximum(elite_pool.std(axis=0), 1e-8)
        diagnostics.append(
            {
                "iteration": iteration,
                "evaluated": len(candidates),
                "best_return": best_return,
                "elite_mean_return": float(returns[order[: config.elites]].mean()),
                "sigma_norm": float(np.linalg.norm(sigma)),
            }
        )

    return PlanResult(actions=best_actions, expected_return=best_return, diagnostics=diagnostics)


# ------------------------------------------------------------------ MPC loop


@dataclass
class MPCResult:
    actions: list
    step_logs: list
    initial_costs: dict
    final_costs: dict
    terminated_early: bool = False


def shift_sequence(actions: np.ndarray) -> np.ndarray:
    """Drop the executed first action; repeat the last as the fresh tail."""
    return np.concatenate([actions[1:], actions[-1:]], axis=0)


def mpc_loop(
    env,
    backend,
    planner_config: PlannerConfig,
    rng: np.random.Generator,
    max_steps: int,
    reward_threshold: float = np.inf,
) -> MPCResult:
    """Closed-loop control: observe, correct, plan, execute the first action.

    ``env`` implements observe()/step(action); ``backend`` turns
    observations into planning problems (learned latent state or oracle
    simulation) and exposes a predicted reward for the termination test.
    Stops early once the predicted reward exceeds ``reward_threshold``.
    With a zero step budget only the initial metrics are returned.
    """
    backend.reset()
    observation = env.observe()
    backend.observe(observation, prev_action=None)
    initial_costs = backend.true_costs(observation)

    actions: list = []
    logs: list = []
    plan_mean = None
    terminated = False
    costs = dict(initial_costs)
    for step in range(max_steps):
        predicted = backend.predicted_reward()
        if predicted > reward_threshold:
            terminated = True
            break
        problem = backend.make_problem()
        result = plan(problem, planner_config, rng, init_mean=plan_mean)
        action = result.actions[0]
        env.step(action)
        observation = env.observe()
        backend.observe(observation, prev_action=action)
        costs = backend.true_costs(observation)
        actions.append(action)
        logs.append(
            {
                "step": step,
                "action": action.tolist(),
                "planned_return": result.expected_return,
                "predicted_reward": backend.predicted_reward(),
                **{f"cost_{k}": v for k, v in costs.items()},
            }
        )
        plan_mean = shift_sequence(result.actions) if planner_config.shift_init else None
    return MPCResult(
        actions=actions,
        step_logs=logs,
        initial_costs=initial_costs,
        final_costs=costs,
        terminated_early=terminated,
    )
