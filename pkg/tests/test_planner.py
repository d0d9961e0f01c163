import numpy as np
import pytest

from deformplan.planner import (
    PlannerConfig,
    PlanProblem,
    gradient_refine,
    plan,
    sample_colored_noise,
    shift_sequence,
)
from deformplan.rng import make_rng


class QuadraticProblem(PlanProblem):
    """Analytic objective: return = -sum_t ||a_t - target||^2."""

    supports_gradient = True

    def __init__(self, target, horizon=1, lower=(-1.0, -1.0), upper=(1.0, 1.0)):
        super().__init__(horizon, lower, upper)
        self.target = np.asarray(target, dtype=np.float64)

    def returns(self, actions):
        diff = actions - self.target
        return -(diff**2).sum(axis=(1, 2))

    def returns_and_grads(self, actions):
        diff = actions - self.target
        return -(diff**2).sum(axis=(1, 2)), -2.0 * diff


# ------------------------------------------------------------- colored noise


def test_white_noise_lag1_autocorrelation_near_zero():
    rng = make_rng(0)
    draws = sample_colored_noise(rng, beta=0.0, count=10_000, horizon=30, dims=1)[:, :, 0]
    x, y = draws[:, :-1].reshape(-1), draws[:, 1:].reshape(-1)
    rho = np.corrcoef(x, y)[0, 1]
    # n independent pairs: rho ~ N(0, 1/sqrt(n))
    assert abs(rho) < 3.0 / np.sqrt(len(x))


def test_colored_noise_lag1_autocorrelation_positive():
    rng = make_rng(1)
    draws = sample_colored_noise(rng, beta=2.0, count=10_000, horizon=30, dims=1)[:, :, 0]
    x, y = draws[:, :-1].reshape(-1), draws[:, 1:].reshape(-1)
    rho = np.corrcoef(x, y)[0, 1]
    assert rho > 0.3


def test_noise_unit_variance():
    rng = make_rng(2)
    for beta in (0.0, 1.0, 2.0):
        draws = sample_colored_noise(rng, beta, count=4000, horizon=16, dims=2)
        assert draws.std() == pytest.approx(1.0, abs=0.05)


def test_degenerate_sigma_returns_mean():
    # stddev -> 0: every sampled candidate collapses onto the mean
    problem = QuadraticProblem([0.3, -0.4])
    config = PlannerConfig(
        population=16, elites=4, iterations=1, init_sigma_scale=0.0, grad_steps=0
    )
    rng = make_rng(3)
    result = plan(problem, config, rng, init_mean=np.array([[0.2, 0.2]]))
    np.testing.assert_allclose(result.actions, [[0.2, 0.2]], atol=1e-12)


def test_horizon_one_noise_shape():
    draws = sample_colored_noise(make_rng(4), 2.0, count=10, horizon=1, dims=3)
    assert draws.shape == (10, 1, 3)


# ---------------------------------------------------------- gradient refine


def test_gradient_refine_converges_on_quadratic():
    problem = QuadraticProblem([0.3, -0.4])
    start = np.zeros((1, 1, 2))
    refined, returns = gradient_refine(start, problem, steps=20, lr=0.1)
    assert np.linalg.norm(refined[0, 0] - problem.target) < 1e-2
    assert returns[0] > problem.returns(start)[0]


def test_gradient_refine_lr_zero_is_identity():
    problem = QuadraticProblem([0.5, 0.5])
    start = np.array([[[0.1, -0.2]]])
    refined, _ = gradient_refine(start, problem, steps=5, lr=0.0)
    np.testing.assert_array_equal(refined, start)


def test_gradient_refine_projects_onto_bounds():
    # optimum outside the box: gradient points outward, iterate must stay on it
    problem = QuadraticProblem([2.0, 0.0])
    start = np.array([[[1.0, 0.0]]])
    refined, _ = gradient_refine(start, problem, steps=10, lr=0.5)
    assert refined[0, 0, 0] == 1.0
    assert abs(refined[0, 0, 1]) <= 1.0


def test_gradient_refine_never_worsens():
    rng = make_rng(5)

    class NastyProblem(QuadraticProblem):
        def returns_and_grads(self, actions):
            rets, grads = super().returns_and_grads(actions)
            return rets, -3.0 * grads  # adversarial: wrong direction

    problem = NastyProblem([0.2, 0.1])
    start = rng.uniform(-1, 1, (8, 1, 2))
    base = problem.returns(start)
    refined, returns = gradient_refine(start, problem, steps=4, lr=0.3)
    assert (returns >= base - 1e-9).all()


def test_gradient_refine_skips_non_finite_gradients():
    class BrokenProblem(QuadraticProblem):
        def returns_and_grads(self, actions):
            rets, grads = super().returns_and_grads(actions)
            grads[0] = np.nan
            return rets, grads

    problem = BrokenProblem([0.0, 0.0])
    start = np.array([[[0.5, 0.5]], [[0.4, -0.4]]])
    with pytest.warns(UserWarning, match="non-finite"):
        refined, returns = gradient_refine(start, problem, steps=2, lr=0.1)
    np.testing.assert_array_equal(refined[0], start[0])  # untouched
    assert (returns >= problem.returns(start) - 1e-9).all()


# ------------------------------------------------------------------- plan


def test_plan_recovers_quadratic_optimum():
    problem = QuadraticProblem([0.3, -0.4])
    config = PlannerConfig(population=64, elites=10, iterations=10)
    result = plan(problem, config, make_rng(7))
    assert np.linalg.norm(result.actions[0] - problem.target) < 1e-2


def test_plan_quadratic_success_rate():
    problem = QuadraticProblem([0.3, -0.4])
    config = PlannerConfig(population=64, elites=10, iterations=10)
    hits = 0
    for seed in range(100):
        result = plan(problem, config, make_rng(seed))
        hits += np.linalg.norm(result.actions[0] - problem.target) < 1e-2
    assert hits >= 95


def test_plan_all_elites_degenerate_still_returns_best():
    problem = QuadraticProblem([0.1, 0.2])
    config = PlannerConfig(population=8, elites=8, iterations=3)
    result = plan(problem, config, make_rng(8))
    assert result.expected_return == max(d["best_return"] for d in result.diagnostics)


def test_plan_deterministic_given_seed():
    problem = QuadraticProblem([0.25, -0.3], horizon=3)
    config = PlannerConfig(population=32, elites=6, iterations=4)
    a = plan(problem, config, make_rng(9))
    b = plan(problem, config, make_rng(9))
    np.testing.assert_array_equal(a.actions, b.actions)
    assert a.expected_return == b.expected_return


def test_plan_respects_bounds():
    problem = QuadraticProblem([5.0, -5.0], horizon=4)  # optimum far outside
    config = PlannerConfig(population=32, elites=6, iterations=5)
    result = plan(problem, config, make_rng(10))
    assert (result.actions >= problem.lower - 1e-12).all()
    assert (result.actions <= problem.upper + 1e-12).all()


def test_plan_best_return_monotone_across_iterations():
    problem = QuadraticProblem([0.4, 0.1], horizon=2)
    config = PlannerConfig(population=24, elites=5, iterations=8)
    result = plan(problem, config, make_rng(11))
    bests = [d["best_return"] for d in result.diagnostics]
    assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))


def test_plan_return_is_max_of_examined():
    class CountingProblem(QuadraticProblem):
        def __init__(self, *a, **k):
            super().__init__(*a, **k)
            self.seen = []

        def returns(self, actions):
            rets = super().returns(actions)
            self.seen.extend(rets.tolist())
            return rets

    problem = CountingProblem([0.2, -0.1])
    result = plan(problem, PlannerConfig(population=16, elites=4, iterations=3), make_rng(12))
    assert result.expected_return == pytest.approx(max(problem.seen), abs=1e-12)


def test_shift_sequence():
    seq = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    shifted = shift_sequence(seq)
    np.testing.assert_array_equal(shifted, [[3, 4], [5, 6], [5, 6]])


def test_planner_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig(population=4, elites=10)
