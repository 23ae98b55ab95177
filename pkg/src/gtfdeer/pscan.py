"""Inclusive scans over the affine-map semigroup ``z -> A z + b``.

Elements are stored as stacked arrays rather than per-step objects:

* dense mode:    ``mats`` of shape ``(..., T, M, M)``, ``vecs`` of shape ``(..., T, M)``
* diagonal mode: ``mats`` of shape ``(..., T, M)`` holding the diagonals

``scan`` returns ``out[t] = mats[t] @ out[t-1] + vecs[t]`` with ``out[-1] = z0``.
The parallel driver splits the time axis into contiguous chunks, folds each
chunk in a worker (numba kernels release the GIL), combines the chunk
aggregates with a Blelloch up/down sweep, and finally replays every chunk
from its carry-in state. The chunk boundaries depend only on ``(T, workers)``
so results are bitwise reproducible for a fixed worker count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

__all__ = [
    "AffineElement",
    "compose",
    "compose_work",
    "identity_element",
    "scan",
    "scan_transposed",
    "chunk_bounds",
    "ScanError",
    "default_workers",
]


class ScanError(RuntimeError):
    pass


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class AffineElement:
    """One step ``z -> mat @ z + vec``; ``mat`` is a vector in diagonal mode."""

    mat: np.ndarray
    vec: np.ndarray

    @property
    def diagonal(self) -> bool:
        return self.mat.ndim == self.vec.ndim

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self.diagonal:
            return self.mat * z + self.vec
        return self.mat @ z + self.vec


def identity_element(m: int, diagonal: bool = False) -> AffineElement:
    if diagonal:
        return AffineElement(np.ones(m), np.zeros(m))
    return AffineElement(np.eye(m), np.zeros(m))


def compose(second: AffineElement, first: AffineElement) -> AffineElement:
    """``second ∘ first`` = ``(A2 A1, A2 b1 + b2)``."""
    if second.diagonal != first.diagonal:
        raise ValueError("cannot mix diagonal and dense elements")
    if second.diagonal:
        return AffineElement(second.mat * first.mat, second.mat * first.vec + second.vec)
    return AffineElement(second.mat @ first.mat, second.mat @ first.vec + second.vec)


def compose_work(m: int, diagonal: bool = False) -> int:
    """Multiply-adds performed by one ``compose`` call."""
    return 2 * m if diagonal else m**3 + m**2


# --------------------------------------------------------------------------
# numba kernels; arrays are (batch, T, ...) with contiguous layout

@numba.njit(cache=True, nogil=True)
def _fold_dense(mats, vecs, z0, out, lo, hi):
    nb, _, m = vecs.shape
    z = np.empty(m)
    for b in range(nb):
        for i in range(m):
            z[i] = z0[b, i]
        for t in range(lo, hi):
            for i in range(m):
                acc = vecs[b, t, i]
                for k in range(m):
                    acc += mats[b, t, i, k] * z[k]
                out[b, t, i] = acc
            for i in range(m):
                z[i] = out[b, t, i]


@numba.njit(cache=True, nogil=True)
def _fold_diag(mats, vecs, z0, out, lo, hi):
    nb, _, m = vecs.shape
    for b in range(nb):
        for i in range(m):
            z = z0[b, i]
            for t in range(lo, hi):
                z = mats[b, t, i] * z + vecs[b, t, i]
                out[b, t, i] = z


@numba.njit(cache=True, nogil=True)
def _aggregate_dense(mats, vecs, lo, hi, agg_a, agg_b):
    # agg = e[hi-1] ∘ ... ∘ e[lo]
    nb, _, m = vecs.shape
    tmp_a = np.empty((m, m))
    tmp_b = np.empty(m)
    for b in range(nb):
        a = agg_a[b]
        v = agg_b[b]
        for i in range(m):
            v[i] = 0.0
            for k in range(m):
                a[i, k] = 1.0 if i == k else 0.0
        for t in range(lo, hi):
            for i in range(m):
                acc = vecs[b, t, i]
                for k in range(m):
                    acc += mats[b, t, i, k] * v[k]
                tmp_b[i] = acc
                for j in range(m):
                    s = 0.0
                    for k in range(m):
                        s += mats[b, t, i, k] * a[k, j]
                    tmp_a[i, j] = s
            for i in range(m):
                v[i] = tmp_b[i]
                for j in range(m):
                    a[i, j] = tmp_a[i, j]


@numba.njit(cache=True, nogil=True)
def _aggregate_diag(mats, vecs, lo, hi, agg_a, agg_b):
    nb, _, m = vecs.shape
    for b in range(nb):
        for i in range(m):
            a = 1.0
            v = 0.0
            for t in range(lo, hi):
                v = mats[b, t, i] * v + vecs[b, t, i]
                a = mats[b, t, i] * a
            agg_a[b, i] = a
            agg_b[b, i] = v


def chunk_bounds(t: int, workers: int) -> np.ndarray:
    """Boundaries of the ``4 * workers`` contiguous chunks (fewer if ``T`` is small)."""
    n_chunks = max(1, min(t, 4 * max(1, workers)))
    return np.linspace(0, t, n_chunks + 1).round().astype(np.int64)


@lru_cache(maxsize=8)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="pscan")


def _compose_batched(second_a, second_b, first_a, first_b, diagonal):
    if diagonal:
        return second_a * first_a, second_a * first_b + second_b
    return second_a @ first_a, np.einsum("bij,bj->bi", second_a, first_b) + second_b


def _blelloch_exclusive(agg_a, agg_b, diagonal):
    """Exclusive scan of chunk aggregates with an up-sweep / down-sweep tree.

    Inputs have shape ``(C, batch, ...)``; returns prefixes with the same shape,
    ``prefix[c] = agg[c-1] ∘ ... ∘ agg[0]`` and ``prefix[0] = identity``.
    """
    c = agg_a.shape[0]
    size = 1
    while size < c:
        size *= 2
    m = agg_b.shape[-1]
    nb = agg_b.shape[1]
    if diagonal:
        ident_a = np.ones((nb, m))
    else:
        ident_a = np.broadcast_to(np.eye(m), (nb, m, m))
    tree_a = [ident_a.copy() for _ in range(size)]
    tree_b = [np.zeros((nb, m)) for _ in range(size)]
    for i in range(c):
        tree_a[i] = agg_a[i].copy()
        tree_b[i] = agg_b[i].copy()

    step = 1
    while step < size:
        for k in range(0, size, 2 * step):
            left = k + step - 1
            right = k + 2 * step - 1
            tree_a[right], tree_b[right] = _compose_batched(
                tree_a[right], tree_b[right], tree_a[left], tree_b[left], diagonal)
        step *= 2

    tree_a[size - 1] = ident_a.copy()
    tree_b[size - 1] = np.zeros((nb, m))
    step = size // 2
    while step >= 1:
        for k in range(0, size, 2 * step):
            left = k + step - 1
            right = k + 2 * step - 1
            left_sum_a, left_sum_b = tree_a[left], tree_b[left]
            parent_a, parent_b = tree_a[right], tree_b[right]
            tree_a[left], tree_b[left] = parent_a, parent_b
            tree_a[right], tree_b[right] = _compose_batched(
                left_sum_a, left_sum_b, parent_a, parent_b, diagonal)
        step //= 2
    return np.stack(tree_a[:c]), np.stack(tree_b[:c])


def _as_batched(mats, vecs, z0):
    vecs = np.asarray(vecs, dtype=np.float64)
    mats = np.asarray(mats, dtype=np.float64)
    if vecs.ndim < 2:
        raise ValueError("vecs must have shape (..., T, M)")
    lead = vecs.shape[:-2]
    t, m = vecs.shape[-2:]
    diagonal = mats.ndim == vecs.ndim
    if diagonal:
        if mats.shape != vecs.shape:
            raise ValueError("diagonal mats must match vecs shape")
    elif mats.shape != vecs.shape + (m,):
        raise ValueError(f"dense mats must have shape {vecs.shape + (m,)}, got {mats.shape}")
    nb = int(np.prod(lead)) if lead else 1
    v = np.ascontiguousarray(vecs.reshape(nb, t, m))
    a = np.ascontiguousarray(mats.reshape((nb, t, m) if diagonal else (nb, t, m, m)))
    z = np.broadcast_to(np.asarray(z0, dtype=np.float64), lead + (m,)).reshape(nb, m)
    return a, v, np.ascontiguousarray(z), lead, diagonal


def scan(mats, vecs, z0, mode: str = "parallel", workers: int | None = None) -> np.ndarray:
    """Solve ``out[t] = mats[t] out[t-1] + vecs[t]`` from ``out[-1] = z0``.

    ``mode`` is ``"sequential"`` (single left fold) or ``"parallel"``.
    """
    a, v, z, lead, diagonal = _as_batched(mats, vecs, z0)
    nb, t, m = v.shape
    if t < 1:
        raise ValueError("scan needs at least one element")
    out = np.empty_like(v)
    fold = _fold_diag if diagonal else _fold_dense
    if mode == "sequential":
        fold(a, v, z, out, 0, t)
        return out.reshape(lead + (t, m))
    if mode != "parallel":
        raise ValueError(f"unknown scan mode {mode!r}")

    workers = default_workers() if workers is None else int(workers)
    bounds = chunk_bounds(t, workers)
    n_chunks = len(bounds) - 1
    agg_shape = (n_chunks, nb, m) if diagonal else (n_chunks, nb, m, m)
    agg_a = np.empty(agg_shape)
    agg_b = np.empty((n_chunks, nb, m))
    aggregate = _aggregate_diag if diagonal else _aggregate_dense
    pool = _pool(workers)

    def run(tasks):
        futures = [pool.submit(fn, *args) for fn, args in tasks]
        errors = []
        for f in futures:
            try:
                f.result()
            except Exception as exc:  # collect all, report the first
                errors.append(exc)
        if errors:
            raise ScanError("worker failed during scan") from errors[0]

    # the last chunk's aggregate is never consumed
    run([(aggregate, (a, v, int(bounds[c]), int(bounds[c + 1]), agg_a[c], agg_b[c]))
         for c in range(n_chunks - 1)])
    pre_a, pre_b = _blelloch_exclusive(agg_a, agg_b, diagonal)
    if diagonal:
        carry = pre_a * z[None] + pre_b
    else:
        carry = np.einsum("cbij,bj->cbi", pre_a, z) + pre_b
    carry = np.ascontiguousarray(carry)
    run([(fold, (a, v, carry[c], out, int(bounds[c]), int(bounds[c + 1])))
         for c in range(n_chunks)])
    return out.reshape(lead + (t, m))


def scan_transposed(mats, vecs, v_final, mode: str = "parallel",
                    workers: int | None = None) -> np.ndarray:
    """Backward recursion ``out[t] = mats[t]^T out[t+1] + vecs[t]`` with ``out[T] = v_final``.

    Implemented as a forward ``scan`` over reversed, transposed elements.
    """
    mats = np.asarray(mats, dtype=np.float64)
    vecs = np.asarray(vecs, dtype=np.float64)
    diagonal = mats.ndim == vecs.ndim
    rev_v = vecs[..., ::-1, :]
    if diagonal:
        rev_a = mats[..., ::-1, :]
    else:
        rev_a = np.swapaxes(mats[..., ::-1, :, :], -1, -2)
    out = scan(rev_a, rev_v, v_final, mode=mode, workers=workers)
    return np.ascontiguousarray(out[..., ::-1, :])
