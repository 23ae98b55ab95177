"""shPLRNN and LSSM parameter containers, single-step maps and derivatives.

All maps broadcast over leading axes, so ``z`` may be a single state ``(M,)``
or a whole batch of trajectories ``(B, T, M)``. Parameter-derivative
contractions (``*_param_vjp``) sum over every leading axis.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .numerics import make_rng

__all__ = [
    "ShplrnnParams",
    "LssmParams",
    "relu",
    "relu_grad",
    "shplrnn_step",
    "shplrnn_jacobian",
    "shplrnn_jacobian_diag",
    "jacobian_kernel",
    "lssm_train_step",
    "lssm_generate_step",
    "readout",
    "init_shplrnn",
    "init_lssm",
    "init",
    "shplrnn_param_vjp",
    "lssm_param_vjp",
    "param_vjp",
    "save_checkpoint",
    "load_checkpoint",
    "CKPT_MAGIC",
]


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    # subgradient convention: phi'(0) = 0
    return (x > 0).astype(np.float64)


@dataclass(frozen=True)
class ShplrnnParams:
    """``z_t = A z + W relu(V z + b) + C s_t + h`` with readout ``x = B z``.

    ``A = diag(tanh(a_raw))``. ``W`` is either dense (``w``) or the product
    ``w_l @ w_r``.
    """

    a_raw: np.ndarray
    v: np.ndarray
    bias: np.ndarray
    h: np.ndarray
    readout: np.ndarray
    w: np.ndarray | None = None
    w_l: np.ndarray | None = None
    w_r: np.ndarray | None = None
    c: np.ndarray | None = None
    m_reg: int = 0

    def __post_init__(self):
        if (self.w is None) == (self.w_l is None or self.w_r is None):
            raise ValueError("give either dense w or both low-rank factors w_l, w_r")
        if not 0 <= self.m_reg <= self.latent_dim:
            raise ValueError("m_reg must lie in [0, M]")

    kind = "shplrnn"

    @property
    def latent_dim(self) -> int:
        return self.a_raw.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.v.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.readout.shape[0]

    @property
    def low_rank(self) -> bool:
        return self.w is None

    @property
    def a(self) -> np.ndarray:
        return np.tanh(self.a_raw)

    @property
    def w_eff(self) -> np.ndarray:
        return self.w if self.w is not None else self.w_l @ self.w_r

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name."""
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name != "m_reg" and getattr(self, f.name) is not None}

    def with_arrays(self, **arrays) -> "ShplrnnParams":
        return replace(self, **arrays)


@dataclass(frozen=True)
class LssmParams:
    """``z_t = A z + U x_{t-1} + C s_t + h`` with readout ``x = B relu(V z + b)``."""

    a_raw: np.ndarray
    u: np.ndarray
    h: np.ndarray
    readout_b: np.ndarray
    readout_v: np.ndarray
    readout_bias: np.ndarray
    c: np.ndarray | None = None
    m_reg: int = 0

    kind = "lssm"

    @property
    def latent_dim(self) -> int:
        return self.a_raw.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.readout_v.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.readout_b.shape[0]

    @property
    def a(self) -> np.ndarray:
        return np.tanh(self.a_raw)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name != "m_reg" and getattr(self, f.name) is not None}

    def with_arrays(self, **arrays) -> "LssmParams":
        return replace(self, **arrays)

    def as_shplrnn(self) -> ShplrnnParams:
        """Equivalent generation-time shPLRNN with ``W = U B`` kept in factored form."""
        return ShplrnnParams(a_raw=self.a_raw, v=self.readout_v, bias=self.readout_bias,
                             h=self.h, readout=np.zeros((self.obs_dim, self.latent_dim)),
                             w_l=self.u, w_r=self.readout_b, c=self.c, m_reg=self.m_reg)


def _external(c, s):
    if s is None or c is None:
        return 0.0
    return np.asarray(s) @ c.T


# --------------------------------------------------------------------------
# shPLRNN

def _w_apply(p: ShplrnnParams, act):
    if p.w is not None:
        return act @ p.w.T
    return (act @ p.w_r.T) @ p.w_l.T


def shplrnn_step(p: ShplrnnParams, z, s=None, pre=None):
    """One step; ``pre = V z + b`` may be passed in when already computed."""
    z = np.asarray(z, dtype=np.float64)
    act = relu(z @ p.v.T + p.bias if pre is None else pre)
    return p.a * z + _w_apply(p, act) + _external(p.c, s) + p.h


def jacobian_kernel(p: ShplrnnParams, right: np.ndarray | None = None) -> np.ndarray:
    """``K[l] = outer(W[:, l], (V R)[l, :])`` flattened to ``(L, M*M)``.

    With the gate vector ``g`` this gives ``W diag(g) V R = (g @ K).reshape(M, M)``
    without materializing per-step ``M x L`` temporaries.
    """
    w = p.w_eff
    vr = p.v if right is None else p.v @ right
    m = w.shape[0]
    return np.einsum("ml,lk->lmk", w, vr).reshape(p.hidden_dim, m * vr.shape[1])


def shplrnn_jacobian(p: ShplrnnParams, z, right: np.ndarray | None = None):
    """``J_F(z) = A + W diag(relu'(V z + b)) V``, optionally right-multiplied by ``right``."""
    z = np.asarray(z, dtype=np.float64)
    m = p.latent_dim
    g = relu_grad(z @ p.v.T + p.bias)
    a_part = np.diag(p.a) if right is None else p.a[:, None] * right
    jac = (g @ jacobian_kernel(p, right)).reshape(z.shape[:-1] + (m, m))
    return jac + a_part


def shplrnn_jacobian_diag(p: ShplrnnParams, z, right: np.ndarray | None = None):
    """Diagonal of ``J_F(z) @ right`` (``right`` defaults to the identity)."""
    z = np.asarray(z, dtype=np.float64)
    g = relu_grad(z @ p.v.T + p.bias)
    vr = p.v if right is None else p.v @ right
    kd = p.w_eff.T * vr  # (L, M): W[i, l] * (V R)[l, i]
    a_diag = p.a if right is None else p.a * np.diag(right)
    return g @ kd + a_diag


def shplrnn_param_vjp(p: ShplrnnParams, z_tilde, v, s=None) -> dict[str, np.ndarray]:
    """``sum_t v_t^T dF(z_tilde_t)/d theta`` for every recurrent parameter."""
    z = np.asarray(z_tilde, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m = p.latent_dim
    zf = z.reshape(-1, m)
    vf = v.reshape(-1, m)
    pre = zf @ p.v.T + p.bias
    act = relu(pre)
    gate = relu_grad(pre)
    out = {
        "a_raw": np.einsum("ti,ti->i", vf, zf) * (1.0 - p.a**2),
        "h": vf.sum(axis=0),
    }
    if p.w is not None:
        out["w"] = vf.T @ act
        wtv = vf @ p.w
    else:
        rv = vf @ p.w_l  # (T, r)
        out["w_l"] = vf.T @ (act @ p.w_r.T)
        out["w_r"] = rv.T @ act
        wtv = rv @ p.w_r
    gv = wtv * gate
    out["v"] = gv.T @ zf
    out["bias"] = gv.sum(axis=0)
    if p.c is not None:
        if s is None:
            out["c"] = np.zeros_like(p.c)
        else:
            out["c"] = vf.T @ np.asarray(s).reshape(-1, p.c.shape[1])
    return out


# --------------------------------------------------------------------------
# LSSM

def lssm_train_step(p: LssmParams, z, x_prev, s=None):
    return p.a * np.asarray(z) + np.asarray(x_prev) @ p.u.T + _external(p.c, s) + p.h


def lssm_generate_step(p: LssmParams, z, s=None):
    z = np.asarray(z, dtype=np.float64)
    act = relu(z @ p.readout_v.T + p.readout_bias)
    # U (B phi) keeps rank(U B) <= min(N, M, L) without forming U B
    return p.a * z + (act @ p.readout_b.T) @ p.u.T + _external(p.c, s) + p.h


def lssm_param_vjp(p: LssmParams, z_prev, x_prev, v, s=None) -> dict[str, np.ndarray]:
    m = p.latent_dim
    zf = np.asarray(z_prev).reshape(-1, m)
    vf = np.asarray(v).reshape(-1, m)
    xf = np.asarray(x_prev).reshape(-1, p.u.shape[1])
    out = {
        "a_raw": np.einsum("ti,ti->i", vf, zf) * (1.0 - p.a**2),
        "u": vf.T @ xf,
        "h": vf.sum(axis=0),
    }
    if p.c is not None:
        out["c"] = np.zeros_like(p.c) if s is None else vf.T @ np.asarray(s).reshape(-1, p.c.shape[1])
    return out


def param_vjp(p, z_tilde, v, s=None, x_prev=None):
    if isinstance(p, LssmParams):
        return lssm_param_vjp(p, z_tilde, x_prev, v, s)
    return shplrnn_param_vjp(p, z_tilde, v, s)


def readout(p, z):
    z = np.asarray(z, dtype=np.float64)
    if isinstance(p, LssmParams):
        return relu(z @ p.readout_v.T + p.readout_bias) @ p.readout_b.T
    return z @ p.readout.T


# --------------------------------------------------------------------------
# initialization

def _uniform(rng, scale, shape):
    return rng.uniform(-scale, scale, size=shape)


def init_shplrnn(latent_dim: int, hidden_dim: int, obs_dim: int, kappa: float = 0.9995,
                 seed=0, input_dim: int = 0, rank: int | None = None,
                 m_reg: int = 0) -> ShplrnnParams:
    """Near-identity initialization with identity readout of the first ``N`` units."""
    m, l, n = latent_dim, hidden_dim, obs_dim
    if m < n:
        raise ValueError("identity readout initialization needs M >= N")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    eps = 1.0 - kappa
    kw = {}
    if rank is None:
        kw["w"] = _uniform(rng, eps / np.sqrt(l), (m, l))
    else:
        # each factor is drawn so that the product keeps the dense-W scale
        kw["w_l"] = _uniform(rng, np.sqrt(eps / np.sqrt(l)), (m, rank))
        kw["w_r"] = _uniform(rng, np.sqrt(eps / np.sqrt(l)), (rank, l))
    v = _uniform(rng, eps / np.sqrt(m), (l, m))
    c = _uniform(rng, eps / np.sqrt(input_dim), (m, input_dim)) if input_dim else None
    b_out = np.hstack([np.eye(n), np.zeros((n, m - n))])
    return ShplrnnParams(a_raw=np.full(m, np.arctanh(kappa)), v=v, bias=np.zeros(l),
                         h=np.zeros(m), readout=b_out, c=c, m_reg=m_reg, **kw)


def init_lssm(latent_dim: int, hidden_dim: int, obs_dim: int, kappa: float = 0.9995,
              seed=0, input_dim: int = 0, m_reg: int = 0) -> LssmParams:
    m, l, n = latent_dim, hidden_dim, obs_dim
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    eps = 1.0 - kappa
    u = _uniform(rng, eps / np.sqrt(n), (m, n))
    c = _uniform(rng, eps / np.sqrt(input_dim), (m, input_dim)) if input_dim else None
    b_out = _uniform(rng, eps / np.sqrt(l), (n, l))
    v = _uniform(rng, eps / np.sqrt(m), (l, m))
    return LssmParams(a_raw=np.full(m, np.arctanh(kappa)), u=u, h=np.zeros(m),
                      readout_b=b_out, readout_v=v, readout_bias=np.zeros(l), c=c,
                      m_reg=m_reg)


def init(kind: str, dims: dict, kappa: float = 0.9995, seed=0):
    """Dispatch on ``kind`` (``"shplrnn"`` or ``"lssm"``); ``dims`` holds M, L, N and optional K, rank, m_reg."""
    common = dict(latent_dim=dims["M"], hidden_dim=dims["L"], obs_dim=dims["N"],
                  kappa=kappa, seed=seed, input_dim=dims.get("K", 0),
                  m_reg=dims.get("m_reg", 0))
    if kind == "shplrnn":
        return init_shplrnn(rank=dims.get("rank"), **common)
    if kind == "lssm":
        return init_lssm(**common)
    raise ValueError(f"unknown model kind {kind!r}")


# --------------------------------------------------------------------------
# checkpoints
#
# layout: 32-byte header {magic "DSRCKPT1", u32 version, u32 n_arrays,
# u64 json_len, u64 reserved}, UTF-8 JSON index (json_len bytes), then the
# arrays as little-endian f64, row-major, in index order.

CKPT_MAGIC = b"DSRCKPT1"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIQQ")


def save_checkpoint(path, params, meta: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in params.arrays().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v
    index = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    body = {"kind": params.kind, "m_reg": int(params.m_reg),
            "dims": {"M": params.latent_dim, "L": params.hidden_dim, "N": params.obs_dim},
            "arrays": index, "meta": meta or {}}
    blob = json.dumps(body, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(index), len(blob), 0))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, meta, extra_arrays)``."""
    raw = Path(path).read_bytes()
    magic, version, n_arrays, json_len, _ = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = _CKPT_HEADER.size
    body = json.loads(raw[start:start + json_len].decode("utf-8"))
    base = start + json_len
    params_kw, extra = {}, {}
    for entry in body["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = base + entry["offset"]
        arr = np.frombuffer(raw[lo:lo + 8 * count], dtype="<f8").reshape(shape).astype(np.float64)
        name = entry["name"]
        if name.startswith("param/"):
            params_kw[name[len("param/"):]] = arr
        else:
            extra[name] = arr
    if len(body["arrays"]) != n_arrays:
        raise ValueError("checkpoint index does not match header")
    cls = ShplrnnParams if body["kind"] == "shplrnn" else LssmParams
    params = cls(m_reg=body["m_reg"], **params_kw)
    return params, body["meta"], extra
