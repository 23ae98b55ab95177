"""Teacher signals, the projector-based forcing interpolation and forced Jacobians.

Index convention: a window holds observations ``x_0 .. x_T``. The forced state
``z~_t`` (``t = 0 .. T-1``) is the input that produces ``z_{t+1} = F(z~_t)``.
Forced-state indices ``1 .. T_w`` form the warm-up and are fully forced
(``alpha = 1``, projector ``P_1``); the rest use ``P_alpha`` and weight
``alpha``. Index 0 carries ``z_0 = B^+ x_0`` which is a fixed point of both
forcing rules, so it is grouped with the warm-up whenever ``T_w > 0``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import ShplrnnParams, jacobian_kernel, relu_grad
from .numerics import DEFAULT_PINV_CUTOFF, pinv, svd

__all__ = [
    "ForcingPlan",
    "build_plan",
    "force_state",
    "force_states",
    "forced_jacobians",
    "forced_jacobian",
    "critical_alpha",
    "RankDeficientReadoutWarning",
]


class RankDeficientReadoutWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ForcingPlan:
    alpha: float
    b_pinv: np.ndarray  # M x N
    p_alpha: np.ndarray  # I - alpha B^+ B
    p_one: np.ndarray  # I - B^+ B
    warmup_len: int
    targets: np.ndarray  # (..., T+1, M), z_bar_t = B^+ x_t

    @property
    def n_warm(self) -> int:
        """Number of leading forced-state indices that use full forcing."""
        return self.warmup_len + 1 if self.warmup_len > 0 else 0

    @property
    def seq_len(self) -> int:
        return self.targets.shape[-2] - 1

    def projector(self, t: int) -> np.ndarray:
        return self.p_one if t < self.n_warm else self.p_alpha

    def weight(self, t: int) -> float:
        return 1.0 if t < self.n_warm else self.alpha


def build_plan(readout_b, x_seq, alpha: float, warmup_len: int = 0,
               cutoff: float = DEFAULT_PINV_CUTOFF) -> ForcingPlan:
    """Precompute ``B^+``, both projectors and the teacher signals for one update.

    ``x_seq`` has shape ``(..., T+1, N)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    b = np.asarray(readout_b, dtype=np.float64)
    x = np.asarray(x_seq, dtype=np.float64)
    if x.shape[-1] != b.shape[0]:
        raise ValueError("observation dimension does not match the readout")
    if not 0 <= warmup_len < x.shape[-2] - 1:
        raise ValueError("need 0 <= warmup_len < T")
    s = svd(b).singular_values
    if s.size and (s[0] == 0.0 or s[-1] <= cutoff * s[0]):
        warnings.warn("readout is rank deficient; using cutoff-regularized pseudo-inverse",
                      RankDeficientReadoutWarning, stacklevel=2)
    bp = pinv(b, cutoff)
    m = b.shape[1]
    proj = bp @ b
    return ForcingPlan(alpha=float(alpha), b_pinv=bp, p_alpha=np.eye(m) - alpha * proj,
                       p_one=np.eye(m) - proj, warmup_len=int(warmup_len),
                       targets=x @ bp.T)


def force_state(plan: ForcingPlan, z, t: int):
    """``z~_t`` for a single state at forced-state index ``t``."""
    zbar = plan.targets[..., t, :]
    return np.asarray(z) @ plan.projector(t).T + plan.weight(t) * zbar


def force_states(plan: ForcingPlan, z_prev):
    """Forced inputs for ``z_prev = (z_0 .. z_{T-1})`` of shape ``(..., T, M)``."""
    z_prev = np.asarray(z_prev, dtype=np.float64)
    t = z_prev.shape[-2]
    k = min(plan.n_warm, t)
    zbar = plan.targets[..., :t, :]
    out = np.empty(np.broadcast_shapes(z_prev.shape, zbar.shape))
    out[..., :k, :] = z_prev[..., :k, :] @ plan.p_one.T + zbar[..., :k, :]
    out[..., k:, :] = z_prev[..., k:, :] @ plan.p_alpha.T + plan.alpha * zbar[..., k:, :]
    return out


def _jac_block(p: ShplrnnParams, z, right, diagonal, gate=None):
    m = p.latent_dim
    g = relu_grad(z @ p.v.T + p.bias) if gate is None else gate
    if diagonal:
        kd = p.w_eff.T * (p.v @ right)
        return g @ kd + p.a * np.diag(right)
    k = jacobian_kernel(p, right)
    return (g @ k).reshape(z.shape[:-1] + (m, m)) + p.a[:, None] * right


def forced_jacobians(p: ShplrnnParams, plan: ForcingPlan, z_tilde, diagonal: bool = False,
                     gate=None):
    """``J_F(z~_t) P_t`` for every forced-state index (``P_1`` in warm-up, ``P_alpha`` after).

    Returns ``(..., T, M, M)``, or ``(..., T, M)`` diagonals when ``diagonal``.
    ``gate`` optionally supplies the precomputed ReLU derivatives at ``z_tilde``.
    """
    z = np.asarray(z_tilde, dtype=np.float64)
    t = z.shape[-2]
    k = min(plan.n_warm, t)
    m = p.latent_dim
    shape = z.shape + (() if diagonal else (m,))
    out = np.empty(shape)
    tail = (slice(None),) * (1 if diagonal else 2)
    if k:
        g = None if gate is None else gate[..., :k, :]
        out[(Ellipsis, slice(0, k)) + tail] = _jac_block(p, z[..., :k, :], plan.p_one, diagonal, g)
    if k < t:
        g = None if gate is None else gate[..., k:, :]
        out[(Ellipsis, slice(k, t)) + tail] = _jac_block(p, z[..., k:, :], plan.p_alpha, diagonal, g)
    return out


def forced_jacobian(p: ShplrnnParams, plan: ForcingPlan, z_tilde, t: int, diagonal: bool = False):
    return _jac_block(p, np.asarray(z_tilde, dtype=np.float64), plan.projector(t), diagonal)


def critical_alpha(sigma_bar: float) -> float:
    """Smallest forcing strength that makes the forced map globally contracting."""
    if sigma_bar <= 0:
        raise ValueError("sigma_bar must be positive")
    return max(0.0, 1.0 - 1.0 / sigma_bar)
