"""Gradients through the converged forced rollout via one backward (adjoint) scan.

With ``g_t = dL/dz_t`` the adjoint states obey ``v_T = -g_T`` and
``v_{t-1} = J~_{t-1}^T v_t - g_{t-1}``; parameter gradients are
``dL/dtheta = -sum_t v_t^T dF(z~_{t-1})/dtheta``. The forcing plan
(``B^+``, projectors, teacher signals) is a constant of the update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pscan
from .deer import DeerConfig, DeerState, forced_rollout, previous_states, solve_forward
from .forcing import ForcingPlan, build_plan, force_states, forced_jacobians
from .model import LssmParams, ShplrnnParams, lssm_param_vjp, relu, relu_grad, shplrnn_param_vjp
from .objective import LossParts, RegConfig, regularizers

__all__ = [
    "GradientBundle",
    "loss_cotangents",
    "backward_solve",
    "assemble_gradients",
    "gtf_value_and_grad",
    "lssm_forward",
    "lssm_value_and_grad",
]


@dataclass
class GradientBundle:
    grads: dict
    loss_value: float
    parts: LossParts = field(default_factory=LossParts)
    deer: DeerState | None = None

    def __getitem__(self, name):
        return self.grads[name]

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.loss_value)) and all(
            np.all(np.isfinite(g)) for g in self.grads.values())


def _mse_scale(x, warmup_len):
    x = np.asarray(x)
    n_batch = int(np.prod(x.shape[:-2])) if x.ndim > 2 else 1
    t = x.shape[-2]
    return 1.0 / (n_batch * x.shape[-1] * (t - warmup_len))


def loss_cotangents(x, x_hat, warmup_len: int, readout):
    """``dL_mse/dz_t`` for a linear readout ``x_hat = B z``; rows ``t <= T_w`` are zero.

    ``x`` and ``x_hat`` hold ``x_1 .. x_T`` and the MSE is averaged over
    batch, time after warm-up and observation dimension.
    """
    err = np.asarray(x_hat, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    err[..., :warmup_len, :] = 0.0
    return (2.0 * _mse_scale(x, warmup_len)) * (err @ np.asarray(readout))


def backward_solve(forced_jacobians, cotangents, mode: str = "parallel", workers=None):
    """Adjoint states ``v_1 .. v_T`` from the forward Jacobian array.

    ``forced_jacobians[i]`` is ``J~`` at forced state ``z~_i`` (``i = 0 .. T-1``),
    i.e. the matrix of forward scan element ``i``; the backward recursion for
    ``v_{i+1}`` needs ``J~_{i+1}``, so the array is shifted by one.
    """
    jac = np.asarray(forced_jacobians, dtype=np.float64)
    g = np.asarray(cotangents, dtype=np.float64)
    time_axis = g.ndim - 2
    shifted = np.zeros_like(jac)
    lead = (slice(None),) * time_axis
    shifted[lead + (slice(0, -1),)] = jac[lead + (slice(1, None),)]
    return pscan.scan_transposed(shifted, -g, np.zeros(g.shape[-1]), mode=mode, workers=workers)


def assemble_gradients(params: ShplrnnParams, z_tilde, v, s=None, z=None, x=None,
                       warmup_len: int = 0) -> dict:
    """``-sum_t v_t^T dF/dtheta`` plus the direct readout path ``dL/dB``."""
    grads = {k: -g for k, g in shplrnn_param_vjp(params, z_tilde, v, s).items()}
    if z is not None and x is not None:
        err = z @ params.readout.T - x
        err[..., :warmup_len, :] = 0.0
        c = 2.0 * _mse_scale(x, warmup_len)
        n = params.obs_dim
        grads["readout"] = c * (err.reshape(-1, n).T @ z.reshape(-1, params.latent_dim))
    else:
        grads["readout"] = np.zeros_like(params.readout)
    return grads


def gtf_value_and_grad(params: ShplrnnParams, x_window, alpha: float, warmup_len: int,
                       deer: DeerConfig | None = DeerConfig(), reg: RegConfig | None = None,
                       s=None, forward: str = "deer", rng=None,
                       plan: ForcingPlan | None = None) -> GradientBundle:
    """Loss and gradient of one GTF update on ``x_window = x_0 .. x_T``.

    ``forward="deer"`` solves the rollout with Newton scans, ``"sequential"``
    uses the plain loop and a sequential adjoint fold (backpropagation through
    time written as an adjoint recursion).
    """
    x_window = np.asarray(x_window, dtype=np.float64)
    if plan is None:
        plan = build_plan(params.readout, x_window, alpha, warmup_len)
    x = x_window[..., 1:, :]
    deer = deer or DeerConfig()
    z0 = plan.targets[..., 0, :]
    state = None
    if forward == "deer":
        state = solve_forward(params, plan, deer, s=s, rng=rng)
        z = state.z
        zt = force_states(plan, previous_states(z, z0))
        jac = state.jacobians
        scan_mode = deer.scan_mode
    elif forward == "sequential":
        z = forced_rollout(params, plan, s=s)
        zt = force_states(plan, previous_states(z, z0))
        jac = forced_jacobians(params, plan, zt, diagonal=deer.diagonal)
        scan_mode = "sequential"
    else:
        raise ValueError(f"unknown forward mode {forward!r}")

    x_hat = z @ params.readout.T
    g = loss_cotangents(x, x_hat, warmup_len, params.readout)
    v = backward_solve(jac, g, mode=scan_mode, workers=deer.workers)
    grads = assemble_gradients(params, zt, v, s=s, z=z, x=x, warmup_len=warmup_len)
    d = x_hat[..., warmup_len:, :] - x[..., warmup_len:, :]
    parts = LossParts(mse=float(np.mean(d * d)))
    if reg is not None:
        rparts, rgrads = regularizers(params, reg)
        parts.mar, parts.l1, parts.l2 = rparts.mar, rparts.l1, rparts.l2
        for k, gk in rgrads.items():
            grads[k] = grads[k] + gk
    for k in grads:
        grads[k] = np.asarray(grads[k], dtype=np.float64)
    return GradientBundle(grads=grads, loss_value=parts.total, parts=parts, deer=state)


# --------------------------------------------------------------------------
# LSSM: linear recurrence driven by the previous observation

def lssm_forward(params: LssmParams, x_window, s=None, mode="parallel", workers=None):
    """Latents ``z_1 .. z_T`` (``z_0 = 0``) and readouts for ``x_window = x_0 .. x_T``."""
    x_window = np.asarray(x_window, dtype=np.float64)
    x_prev = x_window[..., :-1, :]
    drive = x_prev @ params.u.T + params.h
    if s is not None and params.c is not None:
        drive = drive + np.asarray(s) @ params.c.T
    mats = np.broadcast_to(params.a, drive.shape)
    z = pscan.scan(mats, drive, np.zeros(params.latent_dim), mode=mode, workers=workers)
    pre = z @ params.readout_v.T + params.readout_bias
    x_hat = relu(pre) @ params.readout_b.T
    return z, pre, x_hat


def lssm_value_and_grad(params: LssmParams, x_window, warmup_len: int,
                        reg: RegConfig | None = None, s=None, mode="parallel",
                        workers=None) -> GradientBundle:
    x_window = np.asarray(x_window, dtype=np.float64)
    x = x_window[..., 1:, :]
    z, pre, x_hat = lssm_forward(params, x_window, s, mode, workers)
    err = x_hat - x
    err[..., :warmup_len, :] = 0.0
    c = 2.0 * _mse_scale(x, warmup_len)
    e = c * err
    act = relu(pre)
    delta = (e @ params.readout_b) * relu_grad(pre)
    g = delta @ params.readout_v
    m, l, n = params.latent_dim, params.hidden_dim, params.obs_dim
    grads = {
        "readout_b": e.reshape(-1, n).T @ act.reshape(-1, l),
        "readout_v": delta.reshape(-1, l).T @ z.reshape(-1, m),
        "readout_bias": delta.reshape(-1, l).sum(axis=0),
    }
    mats = np.broadcast_to(params.a, g.shape)
    v = backward_solve(mats, g, mode=mode, workers=workers)
    z_prev = previous_states(z, np.zeros(m))
    for k, gk in lssm_param_vjp(params, z_prev, x_window[..., :-1, :], v, s).items():
        grads[k] = -gk
    d = x_hat[..., warmup_len:, :] - x[..., warmup_len:, :]
    parts = LossParts(mse=float(np.mean(d * d)))
    if reg is not None:
        rparts, rgrads = regularizers(params, reg)
        parts.mar = rparts.mar
        for k, gk in rgrads.items():
            grads[k] = grads[k] + gk
    return GradientBundle(grads=grads, loss_value=parts.total, parts=parts)
