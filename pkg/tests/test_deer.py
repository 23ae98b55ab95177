import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_shplrnn, tent_shplrnn
from gtfdeer.deer import (DeerConfig, DeerDivergenceError, DeerState, forced_rollout, free_rollout,
                          initial_guess, newton_iteration, residual, solve_forward)
from gtfdeer.forcing import build_plan, force_state
from gtfdeer.model import shplrnn_step
from gtfdeer.numerics import make_rng


def sequential_oracle(p, plan, s=None):
    """Plain per-step forced loop written independently of the numba kernel."""
    z = plan.targets[..., 0, :]
    out = []
    for t in range(plan.seq_len):
        z = shplrnn_step(p, force_state(plan, z, t), None if s is None else s[..., t, :])
        out.append(z)
    return np.stack(out, axis=-2)


def test_config_validation():
    for bad in (dict(tolerance=0), dict(max_iters=1), dict(jacobian_mode="sparse"),
                dict(init_strategy="ones")):
        with pytest.raises(ValueError):
            DeerConfig(**bad)
    assert DeerConfig().tolerance == 1e-7 and DeerConfig().max_iters == 500


def test_forced_rollout_matches_python_loop(rng):
    p = random_shplrnn(rng, 4, 8, 2)
    plan = build_plan(p.readout, rng.normal(size=(2, 31, 2)), 0.3, warmup_len=5)
    np.testing.assert_allclose(forced_rollout(p, plan), sequential_oracle(p, plan), atol=1e-12)


def test_forced_rollout_with_inputs(rng):
    p = random_shplrnn(rng, 3, 6, 2, input_dim=2)
    plan = build_plan(p.readout, rng.normal(size=(21, 2)), 0.4)
    s = rng.normal(size=(20, 2))
    np.testing.assert_allclose(forced_rollout(p, plan, s=s), sequential_oracle(p, plan, s), atol=1e-12)
    st_ = solve_forward(p, plan, DeerConfig(tolerance=1e-12), s=s)
    np.testing.assert_allclose(st_.z, forced_rollout(p, plan, s=s), atol=1e-10)


def test_residual_zero_at_rollout(rng):
    p = random_shplrnn(rng, 4, 8, 3)
    plan = build_plan(p.readout, rng.normal(size=(41, 3)), 0.2, 4)
    z = forced_rollout(p, plan)
    assert np.max(np.abs(residual(p, plan, z, plan.targets[0]))) < 1e-12


def test_residual_of_zero_map_is_identity(rng):
    p = random_shplrnn(rng, 3, 5, 2)
    p = p.with_arrays(**{k: np.zeros_like(v) for k, v in p.arrays().items() if k != "readout"})
    plan = build_plan(p.readout, rng.normal(size=(11, 2)), 0.5)
    z = rng.normal(size=(10, 3))
    np.testing.assert_allclose(residual(p, plan, z, plan.targets[0]), z, atol=1e-14)


def test_residual_elementwise(rng):
    p = random_shplrnn(rng, 3, 5, 2)
    plan = build_plan(p.readout, rng.normal(size=(11, 2)), 0.5, 3)
    z = rng.normal(size=(10, 3))
    r = residual(p, plan, z, plan.targets[0])
    prev = plan.targets[0]
    for t in range(10):
        np.testing.assert_allclose(r[t], z[t] - shplrnn_step(p, force_state(plan, prev, t)), atol=1e-13)
        prev = z[t]


def test_affine_map_converges_after_one_update(rng):
    p = random_shplrnn(rng, 3, 5, 2).with_arrays(w=np.zeros((3, 5)))
    plan = build_plan(p.readout, rng.normal(size=(101, 2)), 0.2)
    cfg = DeerConfig(init_strategy="zeros", tolerance=1e-9)
    state = DeerState(z=initial_guess(plan, "zeros"), z0=plan.targets[0])
    newton_iteration(state, p, plan, cfg)
    np.testing.assert_allclose(state.z, forced_rollout(p, plan), atol=1e-10)
    assert solve_forward(p, plan, cfg).iterations_used == 2


@pytest.mark.parametrize("t", [2 ** 8, 2 ** 12])
def test_two_iterations_under_full_forcing(rng, t):
    p = random_shplrnn(rng, 3, 20, 3)
    plan = build_plan(p.readout, rng.normal(size=(t + 1, 3)), 1.0)
    st_ = solve_forward(p, plan, DeerConfig(init_strategy="pinv_targets"))
    assert st_.converged and st_.iterations_used == 2


def test_chaotic_unforced_newton_diverges():
    p = tent_shplrnn()
    z, bad = free_rollout(p, np.array([0.1, 0.2, -0.3]), 4097)
    assert bad == -1
    plan = build_plan(p.readout, z, 0.0)
    with pytest.raises(DeerDivergenceError) as info:
        solve_forward(p, plan, DeerConfig(init_strategy="zeros"))
    assert info.value.iteration >= 1


def test_forcing_above_critical_converges_for_chaotic_model():
    p = tent_shplrnn()
    z, _ = free_rollout(p, np.array([0.1, 0.2, -0.3]), 4097)
    plan = build_plan(p.readout, z, 0.6)
    st_ = solve_forward(p, plan, DeerConfig(init_strategy="zeros", tolerance=1e-10))
    assert st_.converged
    np.testing.assert_allclose(st_.z, forced_rollout(p, plan), atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([3, 5]), st.sampled_from([1, 3]),
       st.sampled_from([0.15, 0.4, 1.0]), st.sampled_from(["zeros", "pinv_targets", "standard_normal"]))
def test_oracle_equivalence(seed, m, n, alpha, init):
    rng = make_rng(seed)
    p = random_shplrnn(rng, m, 16, n)
    plan = build_plan(p.readout, rng.normal(size=(2, 257, n)), alpha, warmup_len=16)
    cfg = DeerConfig(tolerance=1e-9, init_strategy=init)
    st_ = solve_forward(p, plan, cfg, rng=rng)
    assert st_.converged
    assert np.max(np.abs(st_.z - forced_rollout(p, plan))) <= 10 * cfg.tolerance


def test_standard_normal_init_needs_rng(rng):
    plan = build_plan(np.eye(2), rng.normal(size=(5, 2)), 0.5)
    with pytest.raises(ValueError):
        initial_guess(plan, "standard_normal")


def test_non_convergence_is_reported(rng):
    p = random_shplrnn(rng, 5, 20, 2, scale=1.0)
    plan = build_plan(p.readout, rng.normal(size=(513, 2)), 0.05)
    st_ = solve_forward(p, plan, DeerConfig(max_iters=2, tolerance=1e-14, init_strategy="zeros"))
    assert not st_.converged and st_.iterations_used == 2


def test_state_histories_and_monotone_tail(rng):
    p = random_shplrnn(rng, 3, 20, 3, scale=0.8)
    plan = build_plan(p.readout, rng.normal(size=(1025, 3)), 0.5)
    st_ = solve_forward(p, plan, DeerConfig(init_strategy="zeros", tolerance=1e-12))
    r = np.array(st_.residual_norm_history)
    assert len(r) == st_.iterations_used == len(st_.delta_norm_history)
    tail = r[np.argmax(r < 1):]
    assert np.all(np.diff(tail) <= 1e-12)
    assert st_.delta_norm_history[-1] < 1e-12
    assert st_.jacobians.shape == (1024, 3, 3)


def test_diagonal_mode_converges_to_same_fixed_point(rng):
    p = random_shplrnn(rng, 4, 10, 2)
    plan = build_plan(p.readout, rng.normal(size=(201, 2)), 0.4, 10)
    st_ = solve_forward(p, plan, DeerConfig(jacobian_mode="diagonal", tolerance=1e-11))
    assert st_.converged
    np.testing.assert_allclose(st_.z, forced_rollout(p, plan), atol=1e-9)
    assert st_.jacobians.shape == (200, 4)


def test_solver_deterministic(rng):
    p = random_shplrnn(rng, 4, 10, 2)
    plan = build_plan(p.readout, rng.normal(size=(3, 301, 2)), 0.3, 8)
    cfg = DeerConfig(workers=3)
    a, b = solve_forward(p, plan, cfg), solve_forward(p, plan, cfg)
    assert a.iterations_used == b.iterations_used and a.z.tobytes() == b.z.tobytes()


def test_free_rollout_divergence_flag(rng):
    p = random_shplrnn(rng, 3, 5, 2).with_arrays(a_raw=np.full(3, 5.0), h=np.full(3, 1e7),
                                                  w=np.zeros((3, 5)))
    z, bad = free_rollout(p, np.zeros(3), 100)
    assert 0 <= bad < 100
    assert np.all(np.isfinite(z[:bad + 1])) and np.all(np.isnan(z[bad + 1:]))
    zb, badb = free_rollout(p, np.zeros((2, 3)), 50)
    assert zb.shape == (2, 50, 3) and badb.shape == (2,)
