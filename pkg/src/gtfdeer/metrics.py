"""Reconstruction metrics: state-space divergence, n-step RMSE and Lyapunov exponents."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import LssmParams, shplrnn_jacobian, shplrnn_step
from .numerics import make_rng

__all__ = [
    "DstspConfig",
    "DstspValue",
    "LyapunovReport",
    "delay_embed",
    "silverman_bandwidth",
    "dstsp",
    "rmse_n",
    "estimate_lle",
    "model_lle",
    "evaluate",
]


@dataclass(frozen=True)
class DstspConfig:
    mc_samples: int = 100_000
    rollout_factor: float = 3.0
    embed_m: int = 1
    embed_tau: int = 1
    bandwidth_override: float | None = None
    max_components: int = 10_000  # truth points kept (uniform stride) in the mixture

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.embed_m < 1 or self.embed_tau < 1:
            raise ValueError("embed_m and embed_tau must be >= 1")


class DstspValue(float):
    """A divergence value; ``diverged`` marks rollouts that blew up (value NaN)."""

    diverged: bool = False

    @classmethod
    def divergence(cls) -> "DstspValue":
        out = cls(float("nan"))
        out.diverged = True
        return out


@dataclass(frozen=True)
class LyapunovReport:
    lle_per_step: float
    lle_per_time_unit: float
    horizon: int


def delay_embed(x, m: int, tau: int):
    """Rows ``[x_t, x_{t-tau}, .., x_{t-(m-1)tau}]`` for every ``t >= (m-1) tau``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    span = (m - 1) * tau
    t = x.shape[0]
    if t <= span:
        raise ValueError(f"series of length {t} too short for m={m}, tau={tau}")
    rows = t - span
    return np.hstack([x[span - k * tau: span - k * tau + rows] for k in range(m)])


def silverman_bandwidth(t1: float, d: int) -> float:
    """Bandwidth factor ``f_bw`` with covariance ``f_bw * diag(sigma^2)``."""
    if t1 <= 0 or d < 1:
        raise ValueError("need t1 > 0 and d >= 1")
    return (t1 * (d + 2) / 4.0) ** (-1.0 / (d + 4))


def _log_mixture(samples, centers, block_elems=2_000_000):
    """``log (1/K) sum_k exp(-|x - c_k|^2 / 2)`` for each row of ``samples`` (pre-whitened).

    One augmented product yields ``-|x - c|^2 / 2`` directly, which is <= 0, so
    the exponentials cannot overflow; rows where every term underflows are
    redone with an explicit max shift.
    """
    n = samples.shape[0]
    k = centers.shape[0]
    c_aug = np.hstack([centers, -0.5 * np.einsum("ij,ij->i", centers, centers)[:, None],
                       np.ones((k, 1))])
    x_aug = np.hstack([samples, np.ones((n, 1)),
                       -0.5 * np.einsum("ij,ij->i", samples, samples)[:, None]])
    out = np.empty(n)
    rows = max(1, block_elems // max(k, 1))
    buf = np.empty((rows, k))
    for lo in range(0, n, rows):
        x = x_aug[lo:lo + rows]
        g = buf[:x.shape[0]]
        np.matmul(x, c_aug.T, out=g)
        np.minimum(g, 0.0, out=g)
        total = np.exp(g, out=g).sum(axis=1)
        bad = total < 1e-250
        if bad.any():
            g2 = x[bad] @ c_aug.T
            mx = g2.max(axis=1)
            total_bad = np.exp(g2 - mx[:, None]).sum(axis=1)
            res = np.log(np.where(bad, 1.0, total))
            res[bad] = mx + np.log(total_bad)
        else:
            res = np.log(total)
        out[lo:lo + rows] = res
    return out - math.log(k)


def dstsp(truth, generated, cfg: DstspConfig = DstspConfig(), rng=None) -> DstspValue:
    """Monte-Carlo KL divergence between Gaussian mixtures placed on two orbits.

    Both mixtures share the diagonal covariance ``f_bw * diag(var(truth))``;
    samples are drawn from the truth mixture. Applies the delay embedding of
    ``cfg`` first and keeps at most ``cfg.max_components`` truth points by
    uniform striding (the generated orbit is strided identically).
    """
    rng = make_rng(0) if rng is None else rng
    generated = np.asarray(generated, dtype=np.float64)
    if not np.all(np.isfinite(generated)):
        return DstspValue.divergence()
    truth = np.asarray(truth, dtype=np.float64)
    if truth.ndim == 1:
        truth, generated = truth[:, None], generated.reshape(-1, 1)
    if truth.shape[1] != generated.shape[1]:
        raise ValueError("truth and generated must have the same dimension")
    if cfg.embed_m > 1:
        truth = delay_embed(truth, cfg.embed_m, cfg.embed_tau)
        generated = delay_embed(generated, cfg.embed_m, cfg.embed_tau)
    stride = max(1, math.ceil(truth.shape[0] / cfg.max_components))
    p_pts = truth[::stride]
    q_pts = generated[::stride]
    t1, d = p_pts.shape
    f_bw = cfg.bandwidth_override if cfg.bandwidth_override is not None else silverman_bandwidth(t1, d)
    std = np.sqrt(f_bw) * truth.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    p_w = p_pts / std
    q_w = q_pts / std
    if not np.all(np.abs(q_w) < 1e150):
        return DstspValue.divergence()
    idx = rng.integers(0, t1, size=cfg.mc_samples)
    samples = p_w[idx] + rng.standard_normal((cfg.mc_samples, d))
    val = float(np.mean(_log_mixture(samples, p_w) - _log_mixture(samples, q_w)))
    return DstspValue(val)


def estimate_lle(step_fn, jac_fn, z0, horizon: int, dt: float = 1.0, discard: float = 0.1,
                 rng=None, limit: float = 1e8) -> LyapunovReport:
    """Benettin estimate: push one tangent vector through the Jacobians, renormalizing each step.

    ``step_fn(z, t)`` and ``jac_fn(z, t)`` evaluate the map and its Jacobian at
    step ``t``. The first ``discard`` fraction of the log-growth series is dropped.
    """
    if horizon < 1000:
        raise ValueError("horizon must be >= 1000")
    z = np.array(z0, dtype=np.float64)
    rng = make_rng(0) if rng is None else rng
    u = rng.standard_normal(z.shape[-1])
    u /= np.linalg.norm(u)
    logs = np.empty(horizon)
    for t in range(horizon):
        jac = jac_fn(z, t)
        u = jac @ u if np.ndim(jac) == 2 else jac * u
        nrm = np.linalg.norm(u)
        logs[t] = math.log(nrm) if nrm > 0 else -np.inf
        u = u / nrm if nrm > 0 else u
        z = step_fn(z, t)
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > limit:
            raise FloatingPointError(f"trajectory diverged at step {t}")
    lam = float(np.mean(logs[int(discard * horizon):]))
    return LyapunovReport(lle_per_step=lam, lle_per_time_unit=lam / dt, horizon=horizon)


def model_lle(params, z0, horizon: int, dt: float = 1.0, rng=None) -> LyapunovReport:
    rnn = params.as_shplrnn() if isinstance(params, LssmParams) else params
    return estimate_lle(lambda z, t: shplrnn_step(rnn, z), lambda z, t: shplrnn_jacobian(rnn, z),
                        z0, horizon, dt, rng=rng)


def rmse_n(params, trajectory, n: int, n_windows: int = 100, t_w: int = 128, rng=None) -> float:
    """Mean over random windows of ``sqrt(1/n sum_k ||x_k - x_hat_k||^2)``.

    Each window's initial latent comes from a fully forced warm-up over the
    ``t_w`` preceding observations.
    """
    from .trainer import generate, warmup_state

    x = np.asarray(trajectory, dtype=np.float64)
    if t_w < 1:
        raise ValueError("t_w must be >= 1")
    hi = x.shape[0] - n
    if hi <= t_w:
        raise ValueError("trajectory too short for warm-up plus horizon")
    rng = make_rng(0) if rng is None else rng
    starts = rng.integers(t_w, hi + 1, size=n_windows)
    hist = x[starts[:, None] + np.arange(-t_w, 0)[None, :]]
    z0 = warmup_state(params, hist)
    x_hat, _, _ = generate(params, n, z0=z0)
    truth = x[starts[:, None] + np.arange(n)[None, :]]
    err = np.sum((truth - x_hat) ** 2, axis=-1)
    return float(np.mean(np.sqrt(err.mean(axis=1))))


def evaluate(params, test, dt: float, cfg: DstspConfig = DstspConfig(), n_rmse: int = 128,
             n_windows: int = 100, t_w: int = 128, lle_horizon: int = 10_000, seed: int = 0,
             test_length: int | None = None) -> dict:
    """Full metric report for a model against a clean test orbit ``(T1, N)``."""
    from .trainer import generate, warmup_state

    rng = make_rng(seed)
    test = np.asarray(test, dtype=np.float64)
    truth = test[t_w:] if test_length is None else test[t_w:t_w + test_length]
    t2 = int(round(cfg.rollout_factor * truth.shape[0]))
    z0 = warmup_state(params, test[:t_w])
    x_gen, z_gen, bad = generate(params, t2, z0=z0)
    diverged = bool(bad >= 0)
    report = {"dstsp": None, "dstsp_de": None, "rmse_n": None, "lle": None,
              "diverged": diverged, "config": {**asdict(cfg), "n_rmse": n_rmse,
                                               "n_windows": n_windows, "t_w": t_w,
                                               "lle_horizon": lle_horizon, "seed": seed}}
    plain = DstspConfig(cfg.mc_samples, cfg.rollout_factor, 1, 1, cfg.bandwidth_override,
                        cfg.max_components)
    d = dstsp(truth, x_gen, plain, rng)
    report["dstsp"] = None if d.diverged else float(d)
    if cfg.embed_m > 1:
        d = dstsp(truth, x_gen, cfg, rng)
        report["dstsp_de"] = None if d.diverged else float(d)
    try:
        report["rmse_n"] = rmse_n(params, test, n_rmse, n_windows, t_w, rng)
    except ValueError:
        report["rmse_n"] = None
    if not diverged:
        try:
            start = z_gen[min(len(z_gen) - 1, 1000)]
            lle = model_lle(params, start, lle_horizon, dt, rng)
            report["lle"] = {"per_step": lle.lle_per_step, "per_time_unit": lle.lle_per_time_unit}
        except FloatingPointError:
            report["diverged"] = True
    return report
