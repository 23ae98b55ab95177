"""Newton fixed-point solver for forced shPLRNN rollouts, plus the sequential oracle.

The forced rollout ``z_t = F(z~_{t-1})`` is recast as the root of the stacked
residual ``r_t = z_t - F(z~_{t-1})``. Each Newton step solves the linear
recursion ``dz_t = J~_{t-1} dz_{t-1} - r_t`` (``dz_0 = 0``) with one scan.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from . import pscan
from .forcing import ForcingPlan, force_states, forced_jacobians
from .model import ShplrnnParams, relu_grad, shplrnn_step

__all__ = [
    "DeerConfig",
    "DeerState",
    "DeerDivergenceError",
    "residual",
    "newton_iteration",
    "solve_forward",
    "initial_guess",
    "forced_rollout",
    "free_rollout",
    "previous_states",
]

INIT_STRATEGIES = ("zeros", "standard_normal", "pinv_targets")
JACOBIAN_MODES = ("full", "diagonal")


class DeerDivergenceError(FloatingPointError):
    def __init__(self, iteration: int, message: str | None = None):
        super().__init__(message or f"Newton update became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class DeerConfig:
    tolerance: float = 1e-7
    max_iters: int = 500
    jacobian_mode: str = "full"
    init_strategy: str = "pinv_targets"
    scan_mode: str = "parallel"
    workers: int | None = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 2:
            raise ValueError("max_iters must be at least 2")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise ValueError(f"jacobian_mode must be one of {JACOBIAN_MODES}")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"init_strategy must be one of {INIT_STRATEGIES}")

    @property
    def diagonal(self) -> bool:
        return self.jacobian_mode == "diagonal"


@dataclass
class DeerState:
    z: np.ndarray  # (..., T, M) latents z_1 .. z_T
    z0: np.ndarray
    iterations_used: int = 0
    residual_norm_history: list = field(default_factory=list)
    delta_norm_history: list = field(default_factory=list)
    converged: bool = False
    jacobians: np.ndarray | None = None  # forced Jacobians of the last iteration

    @property
    def final_residual(self) -> float:
        return self.residual_norm_history[-1] if self.residual_norm_history else float("nan")


def previous_states(z, z0):
    """``(z_0, .., z_{T-1})`` from ``z = (z_1 .. z_T)`` and ``z_0``."""
    z = np.asarray(z)
    first = np.broadcast_to(np.asarray(z0, dtype=np.float64), z.shape[:-2] + (z.shape[-1],))
    return np.concatenate([first[..., None, :], z[..., :-1, :]], axis=-2)


def residual(params: ShplrnnParams, plan: ForcingPlan, z_seq, z0, s=None):
    z_seq = np.asarray(z_seq, dtype=np.float64)
    zt = force_states(plan, previous_states(z_seq, z0))
    return z_seq - shplrnn_step(params, zt, s)


def initial_guess(plan: ForcingPlan, strategy: str, rng=None):
    target = plan.targets[..., 1:, :]
    if strategy == "pinv_targets":
        return target.copy()
    if strategy == "zeros":
        return np.zeros_like(target)
    if strategy == "standard_normal":
        if rng is None:
            raise ValueError("standard_normal initialization needs an rng")
        return rng.standard_normal(target.shape)
    raise ValueError(f"unknown init strategy {strategy!r}")


def newton_iteration(state: DeerState, params: ShplrnnParams, plan: ForcingPlan,
                     config: DeerConfig, s=None) -> DeerState:
    """One Newton step in place on ``state``; returns it for chaining."""
    k = state.iterations_used + 1
    with np.errstate(over="ignore", invalid="ignore"):
        zt = force_states(plan, previous_states(state.z, state.z0))
        pre = zt @ params.v.T + params.bias
        r = state.z - shplrnn_step(params, zt, s, pre=pre)
        jac = forced_jacobians(params, plan, zt, diagonal=config.diagonal, gate=relu_grad(pre))
        dz = pscan.scan(jac, -r, np.zeros(state.z.shape[-1]), mode=config.scan_mode,
                        workers=config.workers)
        if not np.all(np.isfinite(dz)):
            raise DeerDivergenceError(k)
        z_new = state.z + dz
    if not np.all(np.isfinite(z_new)):
        raise DeerDivergenceError(k)
    state.z = z_new
    state.jacobians = jac
    state.iterations_used = k
    state.residual_norm_history.append(float(np.max(np.abs(r))))
    dn = float(np.max(np.abs(dz)))
    state.delta_norm_history.append(dn)
    state.converged = dn < config.tolerance
    return state


def solve_forward(params: ShplrnnParams, plan: ForcingPlan, config: DeerConfig = DeerConfig(),
                  s=None, z0=None, rng=None) -> DeerState:
    """Run Newton iterations until ``||dz||_inf < tolerance`` or ``max_iters``.

    ``z0`` defaults to the teacher signal ``B^+ x_0`` and stays fixed. A
    non-converged state is returned with ``converged = False``.
    """
    if z0 is None:
        z0 = plan.targets[..., 0, :]
    z0 = np.asarray(z0, dtype=np.float64)
    state = DeerState(z=initial_guess(plan, config.init_strategy, rng), z0=z0)
    while state.iterations_used < config.max_iters:
        newton_iteration(state, params, plan, config, s)
        if state.converged:
            break
    return state


# --------------------------------------------------------------------------
# sequential reference loops

@numba.njit(cache=True, nogil=True)
def _forced_loop(a, w, v, bias, drive, p1, pa, off, n_warm, z0, out):
    nb, t_len, m = out.shape
    l = v.shape[0]
    d_t = drive.shape[1]
    z = np.empty(m)
    zt = np.empty(m)
    act = np.empty(l)
    for b in range(nb):
        for i in range(m):
            z[i] = z0[b, i]
        for t in range(t_len):
            p = p1 if t < n_warm else pa
            for i in range(m):
                acc = off[b, t, i]
                for k in range(m):
                    acc += p[i, k] * z[k]
                zt[i] = acc
            for j in range(l):
                acc = bias[j]
                for k in range(m):
                    acc += v[j, k] * zt[k]
                act[j] = acc if acc > 0.0 else 0.0
            td = t if d_t > 1 else 0
            for i in range(m):
                acc = a[i] * zt[i] + drive[b, td, i]
                for j in range(l):
                    acc += w[i, j] * act[j]
                out[b, t, i] = acc
            for i in range(m):
                z[i] = out[b, t, i]


@numba.njit(cache=True, nogil=True)
def _free_loop(a, w, v, bias, drive, z0, out, limit):
    nb, t_len, m = out.shape
    l = v.shape[0]
    d_t = drive.shape[1]
    z = np.empty(m)
    act = np.empty(l)
    first_bad = np.full(nb, -1)
    for b in range(nb):
        for i in range(m):
            z[i] = z0[b, i]
        for t in range(t_len):
            for j in range(l):
                acc = bias[j]
                for k in range(m):
                    acc += v[j, k] * z[k]
                act[j] = acc if acc > 0.0 else 0.0
            td = t if d_t > 1 else 0
            nrm = 0.0
            for i in range(m):
                acc = a[i] * z[i] + drive[b, td, i]
                for j in range(l):
                    acc += w[i, j] * act[j]
                out[b, t, i] = acc
                nrm += acc * acc
            for i in range(m):
                z[i] = out[b, t, i]
            if not nrm <= limit * limit:
                first_bad[b] = t
                for tt in range(t + 1, t_len):
                    for i in range(m):
                        out[b, tt, i] = np.nan
                break
    return first_bad


def _drive(params: ShplrnnParams, s, lead, t_len):
    m = params.latent_dim
    if s is None or params.c is None:
        return np.broadcast_to(params.h, (int(np.prod(lead)) if lead else 1, 1, m)).copy()
    d = np.asarray(s, dtype=np.float64) @ params.c.T + params.h
    d = np.broadcast_to(d, lead + (t_len, m))
    return np.ascontiguousarray(d.reshape(-1, t_len, m))


def forced_rollout(params: ShplrnnParams, plan: ForcingPlan, z0=None, s=None):
    """Sequential forced rollout ``z_1 .. z_T`` (the oracle the Newton solve must match)."""
    targets = plan.targets
    lead = targets.shape[:-2]
    t_len = targets.shape[-2] - 1
    m = params.latent_dim
    nb = int(np.prod(lead)) if lead else 1
    if z0 is None:
        z0 = targets[..., 0, :]
    z0 = np.ascontiguousarray(np.broadcast_to(z0, lead + (m,)).reshape(nb, m), dtype=np.float64)
    weights = np.where(np.arange(t_len) < plan.n_warm, 1.0, plan.alpha)
    off = np.ascontiguousarray((targets[..., :t_len, :] * weights[:, None]).reshape(nb, t_len, m))
    out = np.empty((nb, t_len, m))
    _forced_loop(params.a, np.ascontiguousarray(params.w_eff), np.ascontiguousarray(params.v),
                 params.bias, _drive(params, s, lead, t_len), np.ascontiguousarray(plan.p_one),
                 np.ascontiguousarray(plan.p_alpha), off, plan.n_warm, z0, out)
    return out.reshape(lead + (t_len, m))


def free_rollout(params: ShplrnnParams, z0, n_steps: int, s=None, limit: float = 1e8):
    """Autonomous rollout ``F^k(z0)`` for ``k = 1 .. n_steps``.

    Returns ``(z, diverged_at)``; rows after the first state whose norm
    exceeds ``limit`` are NaN and ``diverged_at`` holds that step (or -1).
    """
    z0 = np.asarray(z0, dtype=np.float64)
    lead = z0.shape[:-1]
    m = params.latent_dim
    nb = int(np.prod(lead)) if lead else 1
    out = np.empty((nb, n_steps, m))
    bad = _free_loop(params.a, np.ascontiguousarray(params.w_eff), np.ascontiguousarray(params.v),
                     params.bias, _drive(params, s, lead, n_steps),
                     np.ascontiguousarray(z0.reshape(nb, m)), out, float(limit))
    out = out.reshape(lead + (n_steps, m))
    return out, (bad.reshape(lead) if lead else int(bad[0]))
