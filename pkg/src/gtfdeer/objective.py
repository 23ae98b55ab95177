"""Training objective: warm-up masked MSE plus MAR and readout regularizers.

Every penalty returns ``(value, grads)`` where ``grads`` maps parameter names
(as in ``params.arrays()``) to arrays of the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LssmParams, ShplrnnParams
from .numerics import svd

__all__ = [
    "RegConfig",
    "LossParts",
    "mse_warmup",
    "mar_penalty",
    "readout_penalties",
    "regularizers",
    "total_loss",
]


@dataclass(frozen=True)
class RegConfig:
    lambda_mar: float = 1.0
    mar_p: int = 2
    init_scaled: bool = True
    gamma_w: float | None = None  # None -> 1/(3L)
    gamma_v: float | None = None  # None -> 1/(3M)
    lambda_1: float = 1.0
    lambda_2: float = 1e-4
    m_reg: int | None = None  # None -> params.m_reg

    def __post_init__(self):
        if min(self.lambda_mar, self.lambda_1, self.lambda_2) < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.mar_p not in (1, 2):
            raise ValueError("mar_p must be 1 or 2")

    @classmethod
    def off(cls) -> "RegConfig":
        return cls(lambda_mar=0.0, lambda_1=0.0, lambda_2=0.0)


@dataclass
class LossParts:
    mse: float = 0.0
    mar: float = 0.0
    l1: float = 0.0
    l2: float = 0.0

    @property
    def total(self) -> float:
        return self.mse + self.mar + self.l1 + self.l2

    def as_dict(self) -> dict:
        return {"loss": self.total, "mse": self.mse, "mar": self.mar, "l1": self.l1, "l2": self.l2}


def mse_warmup(x, x_hat, t_w: int) -> float:
    """Mean squared error over steps ``t > t_w``; rows of ``x`` are ``x_1 .. x_T``.

    Leading batch axes are averaged as well.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape[-2] <= t_w:
        raise ValueError("sequence must be longer than the warm-up")
    d = x_hat[..., t_w:, :] - x[..., t_w:, :]
    return float(np.mean(d * d))


def _pow_and_grad(x, p):
    if p == 2:
        return x * x, 2.0 * x
    return np.abs(x), np.sign(x)


def _m_reg(params, cfg):
    mr = params.m_reg if cfg.m_reg is None else cfg.m_reg
    if not 0 <= mr <= params.latent_dim:
        raise ValueError("m_reg must lie in [0, M]")
    return mr


def mar_penalty(params, cfg: RegConfig):
    """Manifold-attractor penalty over the last ``M_r`` latent units."""
    grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    mr = _m_reg(params, cfg)
    if mr == 0 or cfg.lambda_mar == 0:
        return 0.0, grads
    p = cfg.mar_p
    m = params.latent_dim
    blk = slice(m - mr, m)
    scale = cfg.lambda_mar / mr
    a = np.tanh(params.a_raw[blk])
    fa, dfa = _pow_and_grad(1.0 - a, p)
    fh, dfh = _pow_and_grad(params.h[blk], p)
    value = fa.sum() + fh.sum()
    grads["a_raw"][blk] = scale * (-dfa) * (1.0 - a * a)
    grads["h"][blk] = scale * dfh

    if isinstance(params, LssmParams):
        n = params.obs_dim
        fu, dfu = _pow_and_grad(params.u[blk], p)
        value += fu.sum() / n
        grads["u"][blk] = scale * dfu / n
        return scale * value, grads

    l, = params.bias.shape
    if cfg.init_scaled:
        gw = 1.0 / (3 * l) if cfg.gamma_w is None else cfg.gamma_w
        gv = 1.0 / (3 * m) if cfg.gamma_v is None else cfg.gamma_v
    else:
        gw = gv = 1.0
    fv, dfv = _pow_and_grad(params.v[:, blk], p)
    value += gv * fv.sum() / l
    grads["v"][:, blk] = scale * gv * dfv / l
    if params.w is not None:
        fw, dfw = _pow_and_grad(params.w[blk], p)
        value += gw * fw.sum() / l
        grads["w"][blk] = scale * gw * dfw / l
    else:
        # penalize the effective rows of W = W_L W_R
        w_blk = params.w_l[blk] @ params.w_r
        fw, dfw = _pow_and_grad(w_blk, p)
        value += gw * fw.sum() / l
        gw_blk = scale * gw * dfw / l
        grads["w_l"][blk] = gw_blk @ params.w_r.T
        grads["w_r"] = params.w_l[blk].T @ gw_blk
    return scale * value, grads


def readout_penalties(b_matrix, cfg: RegConfig, m_reg: int):
    """Sparsity of the MAR-unit readout columns and the singular-value conditioning term.

    Returns ``(l1_value, l2_value, grad_b)``.
    """
    b = np.asarray(b_matrix, dtype=np.float64)
    n, m = b.shape
    grad = np.zeros_like(b)
    l1 = 0.0
    if cfg.lambda_1 > 0 and m_reg > 0:
        blk = b[:, m - m_reg:]
        f, df = _pow_and_grad(blk, cfg.mar_p)
        c = cfg.lambda_1 / (n * m_reg)
        l1 = c * f.sum()
        grad[:, m - m_reg:] += c * df
    l2 = 0.0
    if cfg.lambda_2 > 0:
        fac = svd(b)
        s = fac.singular_values
        tol = max(b.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
        keep = s > tol
        r = int(keep.sum())
        if r:
            c = cfg.lambda_2 / r
            l2 = c * float(np.sum((s[keep] - 1.0) ** 2))
            # d sigma_i / dB = u_i v_i^T
            grad += (fac.u[:, keep] * (2.0 * c * (s[keep] - 1.0))) @ fac.vt[keep]
    return l1, l2, grad


def regularizers(params, cfg: RegConfig):
    """All parameter penalties; returns ``(LossParts without mse, grads)``."""
    mar, grads = mar_penalty(params, cfg)
    parts = LossParts(mar=mar)
    if isinstance(params, ShplrnnParams):
        l1, l2, gb = readout_penalties(params.readout, cfg, _m_reg(params, cfg))
        parts.l1, parts.l2 = l1, l2
        grads["readout"] = grads["readout"] + gb
    return parts, grads


def total_loss(x, x_hat, params, cfg: RegConfig, t_w: int) -> LossParts:
    parts, _ = regularizers(params, cfg)
    parts.mse = mse_warmup(x, x_hat, t_w)
    return parts
