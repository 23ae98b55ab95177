"""Benchmark dynamical systems and ground-truth trajectory generation.

Trajectories are produced with fixed-step Dormand-Prince 5(4): one step per
output sample. The embedded 4th-order solution is kept only as a per-step
error diagnostic.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .numerics import make_rng

__all__ = [
    "OdeSpec",
    "SplitConfig",
    "TrajectorySet",
    "IntegrationDivergence",
    "lorenz63",
    "forced_lorenz96",
    "bursting_neuron",
    "get_system",
    "vector_field",
    "integrate",
    "flow_step",
    "make_dataset",
    "default_split",
    "write_trajectory",
    "read_trajectory",
    "export_csv",
    "TRAJ_MAGIC",
]

DIVERGENCE_NORM = 1e8
TRAJ_MAGIC = b"DSRTRAJ1"
_TRAJ_HEADER = struct.Struct("<8sIIdII")  # 32 bytes

FLAG_TEST = 1
FLAG_NOISY = 2
FLAG_NONAUTONOMOUS = 4


class IntegrationDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"state norm exceeded {DIVERGENCE_NORM:g} at step {step}")
        self.step = step


NEURON_PARAM_NAMES = (
    "I", "C", "g_L", "E_L", "g_Na", "E_Na", "V_h_Na", "k_Na", "g_K", "E_K",
    "V_h_K", "k_K", "tau_n", "g_M", "V_h_M", "k_M", "tau_h", "g_NMDA", "E_NMDA",
)
_PARAM_ORDER = {
    "Lorenz63": ("sigma", "rho", "beta"),
    "ForcedLorenz96": ("F0", "A", "omega"),
    "BurstingNeuron": NEURON_PARAM_NAMES,
}
_VAR_NAMES = {
    "Lorenz63": ("x", "y", "z"),
    "BurstingNeuron": ("V", "n", "h"),
}


@dataclass(frozen=True)
class OdeSpec:
    name: str
    dim: int
    params: dict
    dt: float
    is_nonautonomous: bool = False

    def __post_init__(self):
        if self.name not in _PARAM_ORDER:
            raise ValueError(f"unknown system {self.name!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        missing = [k for k in _PARAM_ORDER[self.name] if k not in self.params]
        if missing:
            raise ValueError(f"missing parameters for {self.name}: {missing}")

    def param_vector(self) -> np.ndarray:
        return np.array([float(self.params[k]) for k in _PARAM_ORDER[self.name]])

    @property
    def variable_names(self) -> tuple[str, ...]:
        if self.name in _VAR_NAMES:
            return _VAR_NAMES[self.name]
        return tuple(f"x{i + 1}" for i in range(self.dim))


def lorenz63(sigma=10.0, rho=28.0, beta=8.0 / 3.0, dt=0.01) -> OdeSpec:
    return OdeSpec("Lorenz63", 3, {"sigma": sigma, "rho": rho, "beta": beta}, dt)


def forced_lorenz96(n=6, F0=14.0, A=12.0, omega=2 * math.pi / 75, dt=5e-3) -> OdeSpec:
    return OdeSpec("ForcedLorenz96", n, {"F0": F0, "A": A, "omega": omega}, dt,
                   is_nonautonomous=True)


def bursting_neuron(dt=2.5e-2, **overrides) -> OdeSpec:
    values = (0.0, 6.0, 8.0, -80.0, 20.0, 60.0, -20.0, 15.0, 10.0, -90.0,
              -25.0, 7.0, 1.0, 25.2, -18.0, 5.0, 1000.0, 10.2, 0.0)
    params = dict(zip(NEURON_PARAM_NAMES, values))
    params.update(overrides)
    return OdeSpec("BurstingNeuron", 3, params, dt)


def get_system(name: str) -> OdeSpec:
    key = name.lower().replace("-", "_")
    table = {
        "lorenz63": lorenz63,
        "forced_lorenz96": forced_lorenz96,
        "lorenz96_forced": forced_lorenz96,
        "lorenz96": forced_lorenz96,
        "bursting_neuron": bursting_neuron,
        "neuron": bursting_neuron,
    }
    if key not in table:
        raise ValueError(f"unknown system {name!r}")
    return table[key]()


# --------------------------------------------------------------------------
# right-hand sides (numba so that long integrations stay cheap)

@numba.njit(cache=True)
def _rhs_lorenz63(x, t, p, out):
    out[0] = p[0] * (x[1] - x[0])
    out[1] = x[0] * (p[1] - x[2]) - x[1]
    out[2] = x[0] * x[1] - p[2] * x[2]


@numba.njit(cache=True)
def _rhs_lorenz96(x, t, p, out):
    n = x.shape[0]
    forcing = p[0] + p[1] * math.sin(p[2] * t)
    for i in range(n):
        out[i] = (x[(i + 1) % n] - x[(i - 2) % n]) * x[(i - 1) % n] - x[i] + forcing


@numba.njit(cache=True)
def _sigmoid(v, vh, k):
    return 1.0 / (1.0 + math.exp((vh - v) / k))


@numba.njit(cache=True)
def _rhs_neuron(x, t, p, out):
    v = x[0]
    n = x[1]
    h = x[2]
    (I, C, gL, EL, gNa, ENa, VhNa, kNa, gK, EK, VhK, kK, taun, gM, VhM, kM, tauh,
     gNMDA, ENMDA) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9],
                      p[10], p[11], p[12], p[13], p[14], p[15], p[16], p[17], p[18])
    m_inf = _sigmoid(v, VhNa, kNa)
    n_inf = _sigmoid(v, VhK, kK)
    h_inf = _sigmoid(v, VhM, kM)
    s_inf = 1.0 / (1.0 + 0.33 * math.exp(-0.0625 * v))
    out[0] = (I - gL * (v - EL) - gNa * m_inf * (v - ENa) - gK * n * (v - EK)
              - gM * h * (v - EK) - gNMDA * s_inf * (v - ENMDA)) / C
    out[1] = (n_inf - n) / taun
    out[2] = (h_inf - h) / tauh


_RHS = {
    "Lorenz63": _rhs_lorenz63,
    "ForcedLorenz96": _rhs_lorenz96,
    "BurstingNeuron": _rhs_neuron,
}

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.zeros((7, 7))
_A[1, :1] = [1 / 5]
_A[2, :2] = [3 / 40, 9 / 40]
_A[3, :3] = [44 / 45, -56 / 15, 32 / 9]
_A[4, :4] = [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]
_A[5, :5] = [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]
_A[6, :6] = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


@numba.njit(cache=True)
def _dopri_run(rhs, x0, t0, dt, n_steps, p, c, a, b5, b4, out, err):
    n = x0.shape[0]
    k = np.zeros((7, n))
    x = x0.copy()
    stage = np.empty(n)
    for step in range(n_steps):
        t = t0 + step * dt
        for s in range(7):
            for i in range(n):
                acc = x[i]
                for j in range(s):
                    acc += dt * a[s, j] * k[j, i]
                stage[i] = acc
            rhs(stage, t + c[s] * dt, p, k[s])
        e2 = 0.0
        nrm = 0.0
        for i in range(n):
            hi = x[i]
            lo = x[i]
            for s in range(7):
                hi += dt * b5[s] * k[s, i]
                lo += dt * b4[s] * k[s, i]
            x[i] = hi
            out[step, i] = hi
            e2 += (hi - lo) ** 2
            nrm += hi * hi
        err[step] = math.sqrt(e2)
        if not (math.sqrt(nrm) <= 1e8):
            return step
    return -1


def vector_field(spec: OdeSpec, x, t: float = 0.0) -> np.ndarray:
    """Exact right-hand side of the named ODE at state ``x`` and time ``t``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (spec.dim,):
        raise ValueError(f"state must have shape ({spec.dim},)")
    out = np.empty(spec.dim)
    _RHS[spec.name](x, float(t), spec.param_vector(), out)
    return out


def integrate(spec: OdeSpec, x0, t0: float, n_steps: int, return_error: bool = False):
    """Integrate ``n_steps`` fixed Dormand-Prince steps of size ``spec.dt``.

    Returns the ``n_steps x dim`` array of states after each step (``x0`` itself
    is not included). With ``return_error`` the per-step norm of the embedded
    5th-minus-4th order difference is returned as well.
    """
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if x0.shape != (spec.dim,):
        raise ValueError(f"x0 must have shape ({spec.dim},)")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    out = np.empty((n_steps, spec.dim))
    err = np.empty(n_steps)
    bad = _dopri_run(_RHS[spec.name], x0, float(t0), float(spec.dt), int(n_steps),
                     spec.param_vector(), _C, _A, _B5, _B4, out, err)
    if bad >= 0:
        raise IntegrationDivergence(int(bad))
    if return_error:
        return out, err
    return out


def flow_step(spec: OdeSpec, x, t: float = 0.0) -> np.ndarray:
    """One Dormand-Prince step of the discrete-time flow map."""
    return integrate(spec, x, t, 1)[0]


# --------------------------------------------------------------------------
# datasets

@dataclass
class SplitConfig:
    n_steps: int
    transient_steps: int = 0
    noise_fraction: float = 0.05
    dropped_variables: tuple[int, ...] = ()


def default_split(spec: OdeSpec) -> SplitConfig:
    """Lengths and preprocessing used for each benchmark."""
    if spec.name == "Lorenz63":
        return SplitConfig(n_steps=100_000, transient_steps=0, noise_fraction=0.05)
    if spec.name == "ForcedLorenz96":
        return SplitConfig(n_steps=int(round(500 / spec.dt)), transient_steps=0,
                           noise_fraction=0.05)
    return SplitConfig(n_steps=int(round(4000 / spec.dt)),
                       transient_steps=int(round(1000 / spec.dt)),
                       noise_fraction=0.05, dropped_variables=(2,))


@dataclass
class TrajectorySet:
    """Standardized observations plus the metadata needed to undo the scaling."""

    data: np.ndarray
    dt: float
    mean: np.ndarray
    std: np.ndarray
    noise_std_fraction: float = 0.0
    role: str = "train"
    dropped_variables: tuple[int, ...] = ()
    variable_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] == 0:
            raise ValueError("trajectory data must be a non-empty T x N matrix")

    def __len__(self):
        return self.data.shape[0]

    @property
    def n_vars(self) -> int:
        return self.data.shape[1]

    def destandardize(self, data: np.ndarray | None = None) -> np.ndarray:
        d = self.data if data is None else np.asarray(data)
        return d * self.std + self.mean


def _initial_condition(spec: OdeSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.name == "Lorenz63":
        return np.array([0.0, 0.0, 25.0]) + rng.normal(0.0, 5.0, 3)
    if spec.name == "ForcedLorenz96":
        return spec.params["F0"] + rng.normal(0.0, 1.0, spec.dim)
    return np.array([rng.uniform(-70.0, -50.0), rng.uniform(0.0, 0.1), rng.uniform(0.0, 0.1)])


def _standardize(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (x - mean) / std, mean, std


def make_dataset(spec: OdeSpec, seed: int, split: SplitConfig | None = None):
    """Generate the (noisy train, clean test) trajectory pair for a benchmark.

    Both orbits start from independent seeded initial conditions; non-autonomous
    systems start the test orbit at a random phase of the forcing. Each orbit is
    standardized per variable; Gaussian noise with standard deviation
    ``noise_fraction`` (in standardized units) is then added to the train orbit.
    """
    split = split or default_split(spec)
    rng = make_rng(seed)
    total = split.n_steps + split.transient_steps
    out = []
    for role in ("train", "test"):
        x0 = _initial_condition(spec, rng)
        t0 = 0.0
        if spec.is_nonautonomous and role == "test":
            t0 = float(rng.uniform(0.0, 2 * math.pi / spec.params["omega"]))
        raw = integrate(spec, x0, t0, total)[split.transient_steps:]
        keep = [i for i in range(spec.dim) if i not in split.dropped_variables]
        z, mean, std = _standardize(raw)
        noise = 0.0
        if role == "train" and split.noise_fraction > 0:
            z = z + rng.normal(0.0, split.noise_fraction, z.shape)
            noise = split.noise_fraction
        names = spec.variable_names
        out.append(TrajectorySet(
            data=z[:, keep], dt=spec.dt, mean=mean[keep], std=std[keep],
            noise_std_fraction=noise, role=role,
            dropped_variables=tuple(split.dropped_variables),
            variable_names=tuple(names[i] for i in keep),
            meta={"system": spec.name, "params": dict(spec.params), "seed": int(seed),
                  "t0": t0, "x0": x0.tolist(), "transient_steps": split.transient_steps,
                  "nonautonomous": spec.is_nonautonomous},
        ))
    return out[0], out[1]


# --------------------------------------------------------------------------
# file formats

def write_trajectory(ts: TrajectorySet, path) -> None:
    """Binary trajectory file: 32-byte header, little-endian f64 rows, JSON footer."""
    t, n = ts.data.shape
    flags = (FLAG_TEST if ts.role == "test" else 0) \
        | (FLAG_NOISY if ts.noise_std_fraction > 0 else 0) \
        | (FLAG_NONAUTONOMOUS if ts.meta.get("nonautonomous") else 0)
    footer = {
        "mean": ts.mean.tolist(),
        "std": ts.std.tolist(),
        "noise_std_fraction": ts.noise_std_fraction,
        "role": ts.role,
        "dropped_variables": list(ts.dropped_variables),
        "variable_names": list(ts.variable_names),
        "meta": ts.meta,
    }
    with open(path, "wb") as fh:
        fh.write(_TRAJ_HEADER.pack(TRAJ_MAGIC, t, n, float(ts.dt), flags, 0))
        fh.write(np.ascontiguousarray(ts.data, dtype="<f8").tobytes())
        fh.write(json.dumps(footer, sort_keys=True).encode("utf-8"))


def read_trajectory(path) -> TrajectorySet:
    raw = Path(path).read_bytes()
    if len(raw) < _TRAJ_HEADER.size:
        raise ValueError("file too short for a trajectory header")
    magic, t, n, dt, flags, _ = _TRAJ_HEADER.unpack_from(raw, 0)
    if magic != TRAJ_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    start = _TRAJ_HEADER.size
    stop = start + 8 * t * n
    if len(raw) < stop:
        raise ValueError("truncated trajectory payload")
    data = np.frombuffer(raw[start:stop], dtype="<f8").reshape(t, n).astype(np.float64)
    footer = json.loads(raw[stop:].decode("utf-8")) if len(raw) > stop else {}
    role = footer.get("role", "test" if flags & FLAG_TEST else "train")
    return TrajectorySet(
        data=data, dt=dt,
        mean=np.asarray(footer.get("mean", np.zeros(n))),
        std=np.asarray(footer.get("std", np.ones(n))),
        noise_std_fraction=footer.get("noise_std_fraction", 0.0),
        role=role,
        dropped_variables=tuple(footer.get("dropped_variables", ())),
        variable_names=tuple(footer.get("variable_names", ())),
        meta=footer.get("meta", {}),
    )


def export_csv(ts: TrajectorySet, path) -> None:
    names = list(ts.variable_names) or [f"x{i + 1}" for i in range(ts.n_vars)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in ts.data:
            w.writerow([repr(float(v)) for v in row])
