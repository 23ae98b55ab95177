"""Small dense-matrix kernels and the shared random number source.

The matrices handled here are tiny (readouts, Jacobians, at most a few hundred
on a side), so the SVD is a plain one-sided Jacobi iteration which is accurate
to working precision and easy to reason about.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SvdFactors",
    "SvdConvergenceError",
    "svd",
    "pinv",
    "spectral_norm",
    "spectral_norm_upper_bound",
    "make_rng",
    "spawn_rngs",
    "DEFAULT_PINV_CUTOFF",
]

DEFAULT_PINV_CUTOFF = 1e-12
_MAX_SWEEPS = 80


class SvdConvergenceError(RuntimeError):
    """Raised when the Jacobi sweeps fail to orthogonalize within the cap."""


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m = u @ diag(singular_values) @ vt``.

    ``u`` is ``rows x k``, ``vt`` is ``k x cols`` with ``k = min(rows, cols)``;
    singular values are sorted in descending order.
    """

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def _complete_orthonormal(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``q`` not flagged in ``keep`` by an orthonormal completion."""
    if keep.all():
        return q
    m, k = q.shape
    good = q[:, keep]
    # project a standard basis onto the complement, Gram-Schmidt style
    basis = [good[:, i] for i in range(good.shape[1])]
    out = q.copy()
    cand = iter(np.eye(m))
    for j in np.flatnonzero(~keep):
        while True:
            e = next(cand)
            w = e.copy()
            for b in basis:
                w -= (b @ w) * b
            for b in basis:  # second pass for stability
                w -= (b @ w) * b
            nrm = np.linalg.norm(w)
            if nrm > 1e-8:
                w /= nrm
                break
        basis.append(w)
        out[:, j] = w
    return out


def _jacobi_tall(a: np.ndarray) -> SvdFactors:
    """One-sided (Hestenes) Jacobi on a tall matrix ``a`` (rows >= cols)."""
    u = np.array(a, dtype=np.float64, copy=True)
    m, n = u.shape
    v = np.eye(n)
    tol = np.finfo(np.float64).eps * max(m, 1)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui = u[:, i]
                uj = u[:, j]
                alpha = ui @ ui
                beta = uj @ uj
                gamma = ui @ uj
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * ui - s * uj
                new_j = s * ui + c * uj
                u[:, i] = new_i
                u[:, j] = new_j
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if not rotated:
            break
    else:
        raise SvdConvergenceError(f"Jacobi SVD did not converge in {_MAX_SWEEPS} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->j", u, u))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]
    scale = sigma[0] if n and sigma[0] > 0 else 1.0
    keep = sigma > tol * scale
    uu = np.zeros_like(u)
    uu[:, keep] = u[:, keep] / sigma[keep]
    uu = _complete_orthonormal(uu, keep)
    sigma = np.where(keep, sigma, 0.0)
    return SvdFactors(uu, sigma, v.T.copy())


def svd(m: np.ndarray) -> SvdFactors:
    """Thin singular value decomposition of a finite real matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("svd expects a 2-d matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains non-finite entries")
    if m.size == 0:
        k = min(m.shape)
        return SvdFactors(np.zeros((m.shape[0], k)), np.zeros(k), np.zeros((k, m.shape[1])))
    if m.shape[0] >= m.shape[1]:
        return _jacobi_tall(m)
    f = _jacobi_tall(m.T)
    return SvdFactors(f.vt.T.copy(), f.singular_values, f.u.T.copy())


def pinv(m: np.ndarray, cutoff: float = DEFAULT_PINV_CUTOFF) -> np.ndarray:
    """Moore-Penrose pseudo-inverse; singular values below ``cutoff * s_max`` are dropped."""
    if cutoff < 0:
        raise ValueError("cutoff must be non-negative")
    f = svd(m)
    s = f.singular_values
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((m.shape[1], m.shape[0]))
    keep = s > cutoff * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (f.vt.T * inv) @ f.u.T


def spectral_norm(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0.0
    return float(svd(m).singular_values[0])


def spectral_norm_upper_bound(params) -> float:
    """Upper bound on ``||J_F(z)||_2`` over all ``z`` for a shPLRNN.

    ``J_F = A + W D V`` with the ReLU gate ``D`` diagonal in ``[0, 1]``, hence
    ``||J_F|| <= ||A|| + ||W|| ||V||``.
    """
    a = np.tanh(np.asarray(params.a_raw))
    norm_a = float(np.max(np.abs(a))) if a.size else 0.0
    return norm_a + spectral_norm(params.w_eff) * spectral_norm(params.v)


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based (Philox) generator from an explicit 64-bit seed."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed) & (2**64 - 1))))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent streams derived from one seed (one per worker/batch element)."""
    children = np.random.SeedSequence(int(seed) & (2**64 - 1)).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]
