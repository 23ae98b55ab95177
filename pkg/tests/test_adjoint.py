import numpy as np
import pytest

from conftest import central_fd, ld_gtf_loss, random_shplrnn
from gtfdeer.adjoint import (backward_solve, gtf_value_and_grad, loss_cotangents, lssm_forward,
                             lssm_value_and_grad)
from gtfdeer.deer import DeerConfig
from gtfdeer.forcing import build_plan
from gtfdeer.model import init_lssm, relu
from gtfdeer.numerics import make_rng


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_cotangents_vanish_on_perfect_fit(rng):
    x = rng.normal(size=(2, 10, 3))
    assert np.all(loss_cotangents(x, x.copy(), 3, rng.normal(size=(3, 4))) == 0)


def test_cotangents_single_row_after_long_warmup(rng):
    x, xh = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    g = loss_cotangents(x, xh, 9, np.eye(3))
    assert np.all(g[:9] == 0)
    np.testing.assert_allclose(g[9], 2.0 / 3.0 * (xh[9] - x[9]))


def test_cotangents_match_finite_differences(rng):
    b = rng.normal(size=(2, 3))
    z, x = rng.normal(size=(4, 7, 3)), rng.normal(size=(4, 7, 2))

    def loss(zz):
        return np.mean((zz[:, 2:] @ b.T - x[:, 2:]) ** 2)

    g = loss_cotangents(x, z @ b.T, 2, b)
    fd = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        e = np.zeros_like(z)
        e[idx] = 1e-6
        fd[idx] = (loss(z + e) - loss(z - e)) / 2e-6
    np.testing.assert_allclose(g, fd, atol=1e-9)


def test_backward_solve_zero_jacobians_gives_minus_cotangents(rng):
    g = rng.normal(size=(3, 12, 4))
    np.testing.assert_allclose(backward_solve(np.zeros((3, 12, 4, 4)), g), -g)


def test_backward_solve_identity_jacobians_gives_suffix_sums(rng):
    g = rng.normal(size=(12, 4))
    v = backward_solve(np.broadcast_to(np.eye(4), (12, 4, 4)), g)
    np.testing.assert_allclose(v, -np.cumsum(g[::-1], axis=0)[::-1], atol=1e-12)


def test_backward_solve_matches_adjoint_loop(rng):
    jac = rng.normal(0, 0.5, size=(2, 30, 3, 3))
    g = rng.normal(size=(2, 30, 3))
    v = backward_solve(jac, g)
    ref = np.zeros_like(g)
    for b in range(2):
        ref[b, -1] = -g[b, -1]
        for t in range(28, -1, -1):
            ref[b, t] = jac[b, t + 1].T @ ref[b, t + 1] - g[b, t]
    np.testing.assert_allclose(v, ref, atol=1e-12)
    np.testing.assert_allclose(backward_solve(jac, g, mode="sequential"), ref, atol=1e-12)


@pytest.mark.parametrize("alpha,t_w", [(0.3, 0), (0.15, 8), (1.0, 4)])
def test_gradient_matches_extended_precision_fd(alpha, t_w):
    rng = make_rng(int(alpha * 100) + t_w)
    p = random_shplrnn(rng, 4, 8, 2)
    x = rng.normal(size=(2, 33, 2))
    plan = build_plan(p.readout, x, alpha, t_w)
    gb = gtf_value_and_grad(p, x, alpha, t_w, DeerConfig(tolerance=1e-12), plan=plan)
    arrs = p.arrays()
    assert abs(gb.loss_value - float(ld_gtf_loss(arrs, plan, x, t_w))) < 1e-12
    fd = central_fd(arrs, lambda a: ld_gtf_loss(a, plan, x, t_w), 1e-9)
    for k in arrs:
        assert rel_err(gb[k], fd[k]) < 1e-6, k


def test_sequential_and_deer_gradients_agree(rng):
    p = random_shplrnn(rng, 5, 16, 3)
    x = rng.normal(size=(3, 129, 3))
    a = gtf_value_and_grad(p, x, 0.2, 16, DeerConfig(tolerance=1e-12))
    b = gtf_value_and_grad(p, x, 0.2, 16, DeerConfig(tolerance=1e-12), forward="sequential")
    assert abs(a.loss_value - b.loss_value) < 1e-12
    for k in a.grads:
        np.testing.assert_allclose(a[k], b[k], atol=1e-10)


def test_bias_h_gradient_is_minus_adjoint_sum(rng):
    p = random_shplrnn(rng, 3, 6, 3)
    x = rng.normal(size=(65, 3))
    gb = gtf_value_and_grad(p, x, 0.5, 0, DeerConfig(tolerance=1e-12))
    plan = build_plan(p.readout, x, 0.5)
    from gtfdeer.deer import previous_states, forced_rollout
    from gtfdeer.forcing import force_states, forced_jacobians
    z = forced_rollout(p, plan)
    zt = force_states(plan, previous_states(z, plan.targets[0]))
    v = backward_solve(forced_jacobians(p, plan, zt),
                       loss_cotangents(x[1:], z @ p.readout.T, 0, p.readout))
    np.testing.assert_allclose(gb["h"], -v.sum(axis=0), atol=1e-12)


def test_quasi_gradient_exact_without_interactions(rng):
    p = random_shplrnn(rng, 3, 6, 3).with_arrays(w=np.zeros((3, 6)))
    x = rng.normal(size=(2, 65, 3))
    full = gtf_value_and_grad(p, x, 0.0, 0, DeerConfig(tolerance=1e-12))
    quasi = gtf_value_and_grad(p, x, 0.0, 0, DeerConfig(tolerance=1e-12, jacobian_mode="diagonal"))
    for k in full.grads:
        np.testing.assert_allclose(quasi[k], full[k], atol=1e-12)


def test_low_rank_gradient_matches_fd(rng):
    p = random_shplrnn(rng, 4, 8, 2, rank=2)
    x = rng.normal(size=(33, 2))
    plan = build_plan(p.readout, x, 0.4)
    gb = gtf_value_and_grad(p, x, 0.4, 0, DeerConfig(tolerance=1e-12), plan=plan)

    def loss(a):
        dense = {k: v for k, v in a.items() if k not in ("w_l", "w_r")}
        dense["w"] = a["w_l"] @ a["w_r"]
        return ld_gtf_loss(dense, plan, x, 0)

    fd = central_fd(p.arrays(), loss, 1e-9)
    for k in ("w_l", "w_r", "v", "a_raw"):
        assert rel_err(gb[k], fd[k]) < 1e-6, k


def _lssm_random(rng, m=4, l=6, n=2):
    p = init_lssm(m, l, n, seed=rng)
    return p.with_arrays(a_raw=rng.uniform(-2, 2, m), u=rng.normal(0, 0.5, (m, n)),
                         h=rng.normal(0, 0.1, m), readout_b=rng.normal(0, 1, (n, l)),
                         readout_v=rng.normal(0, 1, (l, m)), readout_bias=rng.normal(0, 0.5, l))


def test_lssm_gradient_matches_fd(rng):
    p = _lssm_random(rng)
    x = rng.normal(size=(2, 41, 2))
    gb = lssm_value_and_grad(p, x, 5)

    def loss(pp):
        _, _, xh = lssm_forward(pp, x)
        return np.mean((xh[:, 5:] - x[:, 6:]) ** 2)

    assert abs(loss(p) - gb.loss_value) < 1e-14
    for k, arr in p.arrays().items():
        fd = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            e = np.zeros(arr.shape)
            e[idx] = 1e-6
            fd[idx] = (loss(p.with_arrays(**{k: arr + e})) - loss(p.with_arrays(**{k: arr - e}))) / 2e-6
        assert rel_err(gb[k], fd) < 1e-6, k


def test_lssm_adjoint_within_power_envelope(rng):
    for _ in range(5):
        p = _lssm_random(rng)
        x = rng.normal(size=(129, 2))
        z, pre, xh = lssm_forward(p, x)
        e = (2.0 / (2 * 128)) * (xh - x[1:])
        g = ((e @ p.readout_b) * (pre > 0)) @ p.readout_v
        v = backward_solve(np.broadcast_to(p.a, g.shape), g)
        a_max = np.max(np.abs(p.a))
        for r in range(0, 128, 16):
            bound = sum(a_max ** (t - r) * np.linalg.norm(g[t]) for t in range(r, 128))
            assert np.linalg.norm(v[r]) <= bound * (1 + 1e-9)


def test_gradient_bundle_finite_flag(rng):
    p = random_shplrnn(rng, 3, 6, 2)
    gb = gtf_value_and_grad(p, rng.normal(size=(17, 2)), 0.5, 0)
    assert gb.all_finite()
    gb.grads["h"] = gb["h"] * np.nan
    assert not gb.all_finite()
