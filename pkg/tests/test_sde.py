import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from fpgap.errors import ConfigError, DomainError
from fpgap.fields import FunctionScore, ZeroScore
from fpgap.losses import lfp_integrand
from fpgap.sde import (GaussianScore, GaussianState, SdeSpec, analytic_potential, drift,
                       drift_divergence, gaussian_evolution, kernel_score, ode_drift,
                       perturbation_kernel, reverse_drift)

from .conftest import LOG_PI, rel_err


def stationary_score(x, t):
    return -2 * x


def test_drift_ou(spec):
    assert torch.equal(drift(spec, torch.tensor([[1.0, 2.0]]), 3.0), torch.tensor([[-1.0, -2.0]]))
    assert torch.equal(drift(spec, torch.zeros(1, 2)), torch.zeros(1, 2))
    assert drift_divergence(spec) == -2


def test_spec_validation():
    with pytest.raises(ConfigError):
        SdeSpec(kind="ve")
    with pytest.raises(ConfigError):
        SdeSpec(T=0.0)
    with pytest.raises(ConfigError):
        SdeSpec(dim=0)


def test_kernel_examples(spec):
    k0 = perturbation_kernel(spec, np.array([3.0, -1.0]), 0.0)
    np.testing.assert_allclose(k0.mean, [3.0, -1.0])
    np.testing.assert_allclose(k0.cov, 0.0)
    k = perturbation_kernel(spec, np.array([2.0, 0.0]), math.log(2))
    np.testing.assert_allclose(k.mean, [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(np.diag(k.cov), 0.375, rtol=1e-14)
    kinf = perturbation_kernel(spec, np.array([2.0, 0.0]), 10.0)
    assert abs(kinf.cov[0, 0] - 0.5) < 1e-8
    with pytest.raises(DomainError):
        perturbation_kernel(spec, np.zeros(2), -0.1)
    with pytest.raises(DomainError):
        perturbation_kernel(spec, np.zeros(2), 11.0)


def test_variance_matches_ode(spec):
    # dS/dt = -2 S + g^2, S(0) = 0, integrated numerically
    ts = np.linspace(0.0, 10.0, 20)
    sol = solve_ivp(lambda t, s: -2 * s + 1.0, (0, 10), [0.0], t_eval=ts, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(spec.variance(ts), sol.y[0], atol=1e-8)


def test_kernel_moments_monte_carlo(spec):
    # Euler-Maruyama of the forward SDE to t = ln 2 from x0 = (2, 0)
    rng = np.random.default_rng(5)
    n, steps, t = 100_000, 400, math.log(2)
    dt = t / steps
    x = np.tile([2.0, 0.0], (n, 1))
    for _ in range(steps):
        x = x - x * dt + math.sqrt(dt) * rng.standard_normal(x.shape)
    k = perturbation_kernel(spec, np.array([2.0, 0.0]), t)
    se_mean = math.sqrt(0.375 / n)
    assert np.all(np.abs(x.mean(0) - k.mean) < 3 * se_mean + 2 * dt)
    se_var = 0.375 * math.sqrt(2 / n)
    assert np.all(np.abs(x.var(0) - 0.375) < 3 * se_var + 2 * dt)


def test_kernel_score(spec):
    t = math.log(2)
    s = kernel_score(spec, torch.tensor([[1.0, 1.0]]), torch.tensor([[2.0, 0.0]]), t)
    np.testing.assert_allclose(s.numpy(), [[0.0, -8 / 3]], atol=1e-14)
    s0 = kernel_score(spec, torch.tensor([[1.0, 0.0]]), torch.tensor([[2.0, 0.0]]), t)
    np.testing.assert_allclose(s0.numpy(), 0.0, atol=1e-14)
    with pytest.raises(DomainError):
        kernel_score(spec, torch.zeros(1, 2), torch.zeros(1, 2), 0.0)


def test_kernel_score_finite_difference(spec, rng):
    h = 1e-5
    for _ in range(10):
        x0, xt, t = rng.normal(size=2), rng.normal(size=2), rng.uniform(0.1, 5)
        k = perturbation_kernel(spec, x0, t)
        fd = np.array([(k.log_density(xt + h * e) - k.log_density(xt - h * e))[0] / (2 * h)
                       for e in np.eye(2)])
        s = kernel_score(spec, torch.tensor(xt[None]), torch.tensor(x0[None]), t)[0].numpy()
        assert rel_err(s, fd, 1e-3) < 1e-6


def test_gaussian_evolution(spec):
    st0 = GaussianState(np.zeros(2), 0.5 * np.eye(2), 0.0)
    for t in (0.3, 2.0, 9.0):
        g = gaussian_evolution(spec, st0, t)
        np.testing.assert_allclose(g.mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(g.cov, 0.5 * np.eye(2), atol=1e-15)
    p0 = GaussianState(np.array([0.4, -1.0]), np.array([[0.3, 0.1], [0.1, 0.2]]), 0.0)
    same = gaussian_evolution(spec, p0, 0.0)
    np.testing.assert_allclose(same.mean, p0.mean)
    np.testing.assert_allclose(same.cov, p0.cov)


@given(s=st.floats(0.0, 4.0), t=st.floats(0.0, 4.0))
def test_evolution_semigroup(s, t):
    spec = SdeSpec()
    p0 = GaussianState(np.array([0.4, -1.0]), np.array([[0.3, 0.1], [0.1, 0.2]]), 0.0)
    mid = gaussian_evolution(spec, p0, s)
    restarted = gaussian_evolution(spec, GaussianState(mid.mean, mid.cov, 0.0), t)
    direct = gaussian_evolution(spec, p0, s + t)
    np.testing.assert_allclose(restarted.mean, direct.mean, atol=1e-10)
    np.testing.assert_allclose(restarted.cov, direct.cov, atol=1e-10)


def test_evolution_monte_carlo(spec):
    rng = np.random.default_rng(9)
    p0 = GaussianState(np.array([0.5, -0.5]), np.array([[0.25, 0.05], [0.05, 0.1]]), 0.0)
    n, t, steps = 100_000, 1.0, 500
    dt = t / steps
    x = rng.multivariate_normal(p0.mean, p0.cov, n)
    for _ in range(steps):
        x = x - x * dt + math.sqrt(dt) * rng.standard_normal(x.shape)
    g = gaussian_evolution(spec, p0, t)
    se = np.sqrt(np.diag(g.cov) / n)
    assert np.all(np.abs(x.mean(0) - g.mean) < 3 * se + dt)
    cov = np.cov(x.T)
    se_cov = np.sqrt((g.cov**2 + np.outer(np.diag(g.cov), np.diag(g.cov))) / n)
    assert np.all(np.abs(cov - g.cov) < 3 * se_cov + dt)


def test_gaussian_state_invariants():
    with pytest.raises(ConfigError):
        GaussianState(np.zeros(2), np.array([[1.0, 0.2], [0.0, 1.0]]), 0.0)
    with pytest.raises(ConfigError):
        GaussianState(np.zeros(2), -np.eye(2), 0.0)


def test_stationary_potential(stationary, rng):
    pot = analytic_potential(stationary)
    x = rng.normal(size=(20, 2))
    d = pot.derivatives(x)
    np.testing.assert_allclose(d.value.numpy(), -(x**2).sum(1) - LOG_PI, rtol=1e-13)
    np.testing.assert_allclose(d.grad.numpy(), -2 * x, rtol=1e-13)
    np.testing.assert_allclose(d.laplacian.numpy(), -4.0, rtol=1e-13)
    np.testing.assert_allclose(pot.derivatives(np.zeros((1, 2))).grad.numpy(), 0.0)


def test_stationary_potential_residual_zero(spec, stationary, rng):
    pot = analytic_potential(stationary, spec)
    x = torch.tensor(rng.uniform(-2, 2, (100, 2)))
    t = torch.tensor(rng.uniform(0, 10, 100))
    r = lfp_integrand(pot.derivatives(x, t), x, t, spec)
    assert r.abs().max() < 1e-12


def test_analytic_potential_finite_difference(spec):
    rng = np.random.default_rng(2)
    p0 = GaussianState(np.array([0.2, -0.1]), np.array([[0.3, 0.1], [0.1, 0.2]]), 0.0)
    pot = analytic_potential(p0, spec)
    h = 1e-5
    for _ in range(10):
        x, t = rng.normal(size=(1, 2)), rng.uniform(0.1, 5)
        d = pot.derivatives(x, t)
        u = lambda y, s=t: float(pot.derivatives(y, s).value[0])
        E = np.eye(2)
        grad = [(u(x + h * e) - u(x - h * e)) / (2 * h) for e in E]
        lap = sum((u(x + 1e-3 * e) - 2 * u(x) + u(x - 1e-3 * e)) / 1e-6 for e in E)
        dt = (u(x, t + h) - u(x, t - h)) / (2 * h)
        assert rel_err(d.grad[0].numpy(), grad, 1e-2) < 1e-5
        assert rel_err(float(d.laplacian[0]), lap) < 1e-5
        assert rel_err(float(d.dt[0]), dt, 1e-2) < 1e-5
    with pytest.raises(DomainError):
        analytic_potential(GaussianState(np.zeros(2), np.diag([1.0, 0.0]), 0.0))


def test_gaussian_score_matches_potential_gradient(spec):
    p0 = GaussianState(np.array([0.2, -0.1]), np.array([[0.3, 0.1], [0.1, 0.2]]), 0.0)
    pot = analytic_potential(p0, spec)
    score = GaussianScore(spec, p0)
    x = torch.randn(50, 2)
    t = torch.rand(50) * 10
    torch.testing.assert_close(score(x, t), pot.derivatives(x, t).grad, rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(score.divergence(x, t), pot.derivatives(x, t).laplacian)


def test_drifts(spec, rng):
    x = torch.tensor(rng.normal(size=(10_000, 2)))
    stat = FunctionScore(stationary_score, 2)
    zero = ZeroScore(2)
    torch.testing.assert_close(reverse_drift(spec, zero, x, 1.0), drift(spec, x))
    torch.testing.assert_close(reverse_drift(spec, stat, x, 1.0), x)
    assert ode_drift(spec, stat, x, 1.0).abs().max() < 1e-12
    torch.testing.assert_close(ode_drift(spec, zero, x, 1.0), drift(spec, x))
    diff = reverse_drift(spec, stat, x, 2.0) - ode_drift(spec, stat, x, 2.0)
    torch.testing.assert_close(diff, -0.5 * stationary_score(x, 2.0))


@given(c=st.floats(0.1, 3.0))
def test_reverse_drift_scales_with_g_squared(c):
    x = torch.tensor([[0.3, -0.7], [1.0, 2.0]])
    score = FunctionScore(lambda y, t: torch.stack([y[:, 1], -y[:, 0] ** 2], 1), 2)
    base, scaled = SdeSpec(g=1.0), SdeSpec(g=c)
    term = drift(base, x) - reverse_drift(base, score, x, 1.0)
    term_c = drift(scaled, x) - reverse_drift(scaled, score, x, 1.0)
    torch.testing.assert_close(term_c, c**2 * term)


@given(t=st.floats(0.0, 10.0))
def test_variance_bounded_and_monotone(t):
    spec = SdeSpec()
    v = spec.variance(t)
    assert 0.0 <= v <= spec.stationary_variance
    assert spec.variance(min(t + 0.1, 10.0)) >= v
