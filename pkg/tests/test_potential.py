import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from fpgap.errors import ConfigError, NumericError
from fpgap.potential import (Checkpoint, DirectScore, MlpConfig, PotentialScore, derivatives_eval,
                             direct_score_eval, forward, init_params, jet, load_checkpoint,
                             loss_gradient, potential_eval, potential_grad, save_checkpoint, unflatten)

from .conftest import rel_err

SOFTPLUS0 = math.log(2.0)


def fd_derivatives(theta, cfg, x, t, h=1e-4):
    """Central differences of the forward pass in x and t."""
    f = lambda y, s: potential_eval(theta, cfg, y, s).numpy()
    grad, lap = [], 0.0
    f0 = f(x, t)
    for i in range(x.shape[1]):
        e = torch.zeros_like(x)
        e[:, i] = h
        fp, fm = f(x + e, t), f(x - e, t)
        grad.append((fp - fm) / (2 * h))
        lap = lap + (fp - 2 * f0 + fm) / h**2
    dt = (f(x, t + h) - f(x, t - h)) / (2 * h)
    return np.stack(grad, 1), lap, dt


def test_param_count_independent():
    cfg = MlpConfig.potential(2, (80, 80))
    assert cfg.n_params == 3 * 80 + 80 + 80 * 80 + 80 + 80 + 1
    cfg = MlpConfig.score(3, (5,))
    assert cfg.n_params == (4 * 5 + 5) + (5 * 3 + 3)
    assert init_params(cfg, 0).shape == (cfg.n_params,)


def test_layer_order():
    cfg = MlpConfig(3, (2,), 1)
    theta = torch.arange(cfg.n_params, dtype=torch.float64)
    (W1, b1), (W2, b2) = unflatten(theta, cfg)
    assert W1.tolist() == [[0, 1, 2], [3, 4, 5]]
    assert b1.tolist() == [6, 7]
    assert W2.tolist() == [[8, 9]] and b2.tolist() == [10]


def test_zero_weights_by_hand():
    cfg = MlpConfig.potential(2, (4, 3))
    theta = torch.zeros(cfg.n_params)
    theta[-1] = 0.7  # output bias
    x = torch.randn(6, 2)
    np.testing.assert_allclose(potential_eval(theta, cfg, x, 0.3).numpy(), 0.7)
    # unit output weights: phi = b + 3 * softplus(4 * softplus(0))
    theta[-4:-1] = 1.0
    theta[cfg.n_params - 4 - 3 - 12: cfg.n_params - 4 - 3] = 1.0  # second-layer weights
    expected = 0.7 + 3 * math.log1p(math.exp(4 * SOFTPLUS0))
    np.testing.assert_allclose(potential_eval(theta, cfg, x, 1.0).numpy(), expected, rtol=1e-14)
    d = derivatives_eval(theta, cfg, x, 1.0)
    for v in (d.grad, d.laplacian, d.dt):
        assert torch.count_nonzero(v) == 0


def test_linear_potential():
    # one hidden unit whose preactivation is huge keeps softplus in its linear regime
    cfg = MlpConfig.potential(2, (1,))
    w = np.array([0.3, -1.2])
    W1 = [w[0] * 1e-3, w[1] * 1e-3, 0.0]
    theta = torch.tensor(W1 + [50.0] + [1e3, 0.0])
    x = torch.rand(10, 2)
    d = derivatives_eval(theta, cfg, x, 0.5)
    np.testing.assert_allclose(d.grad.numpy(), np.tile(w, (10, 1)), rtol=1e-12)
    assert d.laplacian.abs().max() < 1e-12


def test_hidden_unit_permutation(small_net):
    theta, cfg = small_net
    (W1, b1), (W2, b2), (W3, b3) = unflatten(theta, cfg)
    perm = torch.randperm(W1.shape[0])
    W1p, b1p, W2p = W1[perm], b1[perm], W2[:, perm]
    theta_p = torch.cat([W1p.ravel(), b1p, W2p.ravel(), b2, W3.ravel(), b3])
    x, t = torch.randn(8, 2), torch.rand(8)
    torch.testing.assert_close(potential_eval(theta_p, cfg, x, t), potential_eval(theta, cfg, x, t))


def test_derivatives_against_finite_differences(small_net):
    theta, cfg = small_net
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(50, 2, generator=gen) * 4 - 2
    t = torch.rand(50, generator=gen) * 10
    d = derivatives_eval(theta, cfg, x, t)
    grad, lap, dt = fd_derivatives(theta, cfg, x, t)
    assert rel_err(d.grad.numpy(), grad, 1e-2) < 1e-4
    assert rel_err(d.laplacian.numpy(), lap, 1e-2) < 1e-4
    assert rel_err(d.dt.numpy(), dt, 1e-2) < 1e-4


def test_jet_agrees_with_autograd(small_net):
    theta, cfg = small_net
    x = torch.randn(7, 2, requires_grad=True)
    t = torch.rand(7, requires_grad=True)
    phi = forward(theta, cfg, x, t)[:, 0]
    gx, gt = torch.autograd.grad(phi.sum(), (x, t), create_graph=True)
    H = torch.stack([torch.autograd.grad(gx[:, i].sum(), x, retain_graph=True)[0] for i in range(2)], 1)
    j = jet(theta, cfg, x.detach(), t.detach(), second="full")
    torch.testing.assert_close(j.jac[:, 0, :2], gx.detach(), rtol=1e-12, atol=1e-14)
    torch.testing.assert_close(j.jac[:, 0, 2], gt.detach(), rtol=1e-12, atol=1e-14)
    torch.testing.assert_close(j.hessian()[:, 0], H.detach(), rtol=1e-12, atol=1e-14)
    torch.testing.assert_close(potential_grad(theta, cfg, x.detach(), t.detach()), gx.detach())


def test_curl_free_by_construction(small_net):
    theta, cfg = small_net
    s = PotentialScore(theta, cfg)
    J = s.jacobian(torch.randn(200, 2) * 2, torch.rand(200) * 10)
    assert (J[:, 0, 1] - J[:, 1, 0]).abs().max() < 1e-8


def test_direct_score():
    cfg = MlpConfig.score(2, (10, 10))
    zero = torch.zeros(cfg.n_params)
    out = direct_score_eval(zero, cfg, torch.randn(4, 2), 1.0)
    assert out.shape == (4, 2) and torch.count_nonzero(out) == 0
    theta = init_params(cfg, 1)
    s = DirectScore(theta, cfg)
    x, t = torch.randn(20, 2), torch.rand(20)
    J = s.jacobian(x, t)
    h = 1e-5
    for i in range(2):
        e = torch.zeros(1, 2)
        e[0, i] = h
        fd = (s(x + e, t) - s(x - e, t)) / (2 * h)
        assert rel_err(J[:, :, i].numpy(), fd.numpy(), 1e-2) < 1e-4
    with pytest.raises(ConfigError):
        direct_score_eval(init_params(MlpConfig.potential(2, (3,)), 0), MlpConfig.potential(2, (3,)), x, t)


def test_dimension_mismatch(small_net):
    theta, cfg = small_net
    with pytest.raises(ConfigError):
        potential_eval(theta, cfg, torch.zeros(3, 3), 0.0)
    with pytest.raises(ConfigError):
        MlpConfig(3, (0,), 1)
    with pytest.raises(ConfigError):
        MlpConfig(3, (4,), 1, activation="relu")


def _dir_fd(fn, theta, idx, h=1e-5):
    e = torch.zeros_like(theta)
    e[idx] = h
    return (fn(theta + e) - fn(theta - e)) / (2 * h)


@pytest.mark.parametrize("which", ["value", "grad_sq", "lap_sq"])
def test_loss_gradient_finite_difference(small_net, which):
    theta, cfg = small_net
    x0, t0 = torch.tensor([[0.3, -0.4]]), torch.tensor([2.5])

    def loss(th):
        if which == "value":
            return potential_eval(th, cfg, x0, t0).sum()
        d = derivatives_eval(th, cfg, x0, t0)
        return (d.grad**2).sum() if which == "grad_sq" else (d.laplacian**2).sum()

    _, g = loss_gradient(theta, cfg, loss)
    if which == "value":
        th = theta.clone().requires_grad_(True)
        (ref,) = torch.autograd.grad(forward(th, cfg, x0, t0).sum(), th)
        torch.testing.assert_close(g, ref)
    idx = np.random.default_rng(0).choice(cfg.n_params, 20, replace=False)
    with torch.no_grad():
        fd = np.array([float(_dir_fd(loss, theta, i)) for i in idx])
    assert rel_err(g[idx].numpy(), fd, 1e-3) < 1e-3


def test_loss_gradient_names_bad_term(small_net):
    theta, cfg = small_net
    with pytest.raises(NumericError, match="bad"):
        loss_gradient(theta, cfg, lambda th: {"ok": th.sum(), "bad": th.sum() * float("nan")})


def test_checkpoint_roundtrip(tmp_path, small_net):
    theta, cfg = small_net
    ck = Checkpoint(theta, cfg, seed=3, iteration=17, arrays={"m": theta * 2}, meta={"note": "x"})
    path = save_checkpoint(tmp_path / "a.fpck", ck)
    back = load_checkpoint(path)
    assert torch.equal(back.theta, theta)
    assert back.cfg == cfg and back.seed == 3 and back.iteration == 17
    assert torch.equal(back.arrays["m"], theta * 2)
    raw = path.read_bytes()
    assert raw[:8] == b"FPGAPCK\x00"
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + hlen])
    assert header["format_version"] == 1 and header["n_params"] == cfg.n_params
    np.testing.assert_array_equal(np.frombuffer(raw[16 + hlen:16 + hlen + 8 * cfg.n_params], "<f8"), theta.numpy())


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_checkpoint(p)


@given(seed=st.integers(0, 2**31 - 1))
def test_init_deterministic_and_bounded(seed):
    cfg = MlpConfig.potential(2, (6, 5))
    a, b = init_params(cfg, seed), init_params(cfg, seed)
    assert torch.equal(a, b)
    (W1, b1), (W2, _), (W3, _) = unflatten(a, cfg)
    assert W1.abs().max() <= 1 / math.sqrt(3) and b1.abs().max() <= 1 / math.sqrt(3)
    assert W2.abs().max() <= 1 / math.sqrt(6) and W3.abs().max() <= 1 / math.sqrt(5)
