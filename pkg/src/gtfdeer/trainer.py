"""Training loops: LSSM scan, sequential GTF and GTF-DEER, with Adam and cosine decay."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import gtf_value_and_grad, lssm_forward, lssm_value_and_grad
from .deer import DeerConfig, DeerDivergenceError, forced_rollout, free_rollout
from .forcing import build_plan, force_state
from .model import LssmParams, ShplrnnParams, init, load_checkpoint, readout, save_checkpoint
from .numerics import make_rng
from .objective import RegConfig

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDivergedError",
    "ConfigError",
    "Adam",
    "lr_at",
    "sample_batch",
    "train",
    "init_model",
    "generate",
    "warmup_state",
    "parse_config_text",
    "load_config",
    "config_to_text",
    "LOG_COLUMNS",
    "read_log",
]

log = logging.getLogger(__name__)

MODES = ("lssm_scan", "gtf_sequential", "gtf_deer")
LOG_COLUMNS = ("update", "loss", "mse", "mar", "l1", "l2", "lr", "deer_iters", "wall_ns", "converged",
               "final_residual")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists one message per offending field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class TrainingDivergedError(FloatingPointError):
    def __init__(self, update: int, checkpoint: str | None):
        super().__init__(f"non-finite loss at update {update}")
        self.update = update
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "gtf_deer"
    model: str = "shplrnn"
    latent_dim: int = 5
    hidden_dim: int = 50
    rank: int | None = None
    m_reg: int = 0
    kappa: float = 0.9995
    batch_size: int = 16
    seq_len: int = 256
    warmup_len: int | None = None  # None -> seq_len // 2
    alpha: float = 0.15
    updates: int = 1000
    lr_start: float = 5e-5
    lr_end: float = 1e-6
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    deer: DeerConfig = DeerConfig()
    reg: RegConfig = RegConfig()

    @property
    def t_w(self) -> int:
        return self.seq_len // 2 if self.warmup_len is None else self.warmup_len

    def validate(self):
        errs = []
        if self.mode not in MODES:
            errs.append(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.model not in ("shplrnn", "lssm"):
            errs.append(f"model: must be shplrnn or lssm, got {self.model!r}")
        if self.mode == "lssm_scan" and self.model != "lssm":
            errs.append("mode: lssm_scan requires model = lssm")
        if self.mode != "lssm_scan" and self.model == "lssm":
            errs.append("model: lssm can only be trained with mode = lssm_scan")
        for name in ("latent_dim", "hidden_dim", "batch_size", "seq_len", "updates"):
            if getattr(self, name) < 1:
                errs.append(f"{name}: must be >= 1")
        if not 0 <= self.t_w < self.seq_len:
            errs.append("warmup_len: must satisfy 0 <= T_w < seq_len")
        if not 0.0 <= self.alpha <= 1.0:
            errs.append("alpha: must lie in [0, 1]")
        if not 0 <= self.m_reg <= self.latent_dim:
            errs.append("m_reg: must lie in [0, latent_dim]")
        if self.lr_start <= 0 or self.lr_end < 0:
            errs.append("lr_start/lr_end: must be positive")
        if self.optimizer != "adam":
            errs.append("optimizer: only adam is supported")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            errs.append("adam_beta1/adam_beta2: must lie in [0, 1)")
        if self.rank is not None and self.rank < 1:
            errs.append("rank: must be >= 1")
        if errs:
            raise ConfigError(errs)
        return self


# --------------------------------------------------------------------------
# config text: flat ``key = value`` lines; keys are TrainConfig, DeerConfig
# and RegConfig field names (``m_reg`` belongs to TrainConfig)

def _coerce(raw: str, current):
    s = raw.strip()
    if s.lower() in ("none", "null", ""):
        return None
    if isinstance(current, bool):
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(float(s)) if float(s).is_integer() else int(s)
    if isinstance(current, float):
        return float(s)
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def _field_defaults(cls):
    return {f.name: f.default for f in dataclasses.fields(cls)}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected key = value"])
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return apply_overrides(base or TrainConfig(), dict(pairs))


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    top, deer_kw, reg_kw = {}, {}, {}
    errs = []
    top_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"deer", "reg"}
    deer_fields = {f.name for f in dataclasses.fields(DeerConfig)}
    reg_fields = {f.name for f in dataclasses.fields(RegConfig)} - {"m_reg"}
    for key, raw in overrides.items():
        if key in top_fields:
            target, current = top, getattr(cfg, key)
            if current is None:
                current = _field_defaults(TrainConfig)[key]
        elif key in deer_fields:
            target, current = deer_kw, getattr(cfg.deer, key)
        elif key in reg_fields:
            target, current = reg_kw, getattr(cfg.reg, key)
        else:
            errs.append(f"{key}: unknown config key")
            continue
        try:
            target[key] = _coerce(raw, current) if isinstance(raw, str) else raw
        except ValueError as exc:
            errs.append(f"{key}: {exc}")
    deer, reg = cfg.deer, cfg.reg
    try:
        deer = dataclasses.replace(cfg.deer, **deer_kw)
    except (TypeError, ValueError) as exc:
        errs.append(f"deer: {exc}")
    try:
        reg = dataclasses.replace(cfg.reg, **reg_kw)
    except (TypeError, ValueError) as exc:
        errs.append(f"reg: {exc}")
    out = dataclasses.replace(cfg, deer=deer, reg=reg, **top)
    try:
        out.validate()
    except ConfigError as exc:
        errs.extend(exc.errors)
    if errs:
        raise ConfigError(errs)
    return out


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {k: v for k, v in dataclasses.asdict(cfg).items() if k not in ("deer", "reg")}
    out.update(dataclasses.asdict(cfg.deer))
    out.update({k: v for k, v in dataclasses.asdict(cfg.reg).items() if k != "m_reg"})
    return out


def config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_to_dict(cfg).items())


# --------------------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr_start`` (step 0) to ``lr_end`` (step ``updates``)."""
    frac = min(max(step, 0), cfg.updates) / cfg.updates
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Bias-corrected Adam over a dict of named arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_arrays(self) -> dict:
        arrays = {f"adam_m/{k}": v for k, v in self.m.items()}
        arrays.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return arrays

    def load_state(self, t: int, arrays: dict):
        self.t = t
        self.m = {k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
        self.v = {k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}


def read_log(path):
    """``(config_dict, rows)`` from a training CSV log; rows are dicts of floats."""
    cfg, rows = None, []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh]
    body = []
    for ln in lines:
        if ln.startswith("# config: "):
            cfg = json.loads(ln[len("# config: "):])
        elif not ln.startswith("#"):
            body.append(ln)
    for rec in csv.DictReader(body):
        rows.append({k: float(v) for k, v in rec.items()})
    return cfg, rows


def sample_batch(data, batch_size: int, seq_len: int, rng):
    """``batch_size`` windows ``x_{s .. s+T}`` with uniform start indices (with replacement).

    Returns ``(windows, starts)`` with windows of shape ``(B, T+1, N)``.
    """
    data = np.asarray(data)
    n_starts = data.shape[0] - seq_len
    if n_starts < 1:
        raise ValueError(f"trajectory of length {data.shape[0]} too short for T = {seq_len}")
    starts = rng.integers(0, n_starts, size=batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    return data[idx], starts


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    deer_iters: list = field(default_factory=list)
    wall_ns: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    checkpoint_path: str | None = None
    divergence_events: list = field(default_factory=list)
    skipped: int = 0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def init_model(cfg: TrainConfig, obs_dim: int):
    dims = {"M": cfg.latent_dim, "L": cfg.hidden_dim, "N": obs_dim, "m_reg": cfg.m_reg}
    if cfg.rank is not None:
        dims["rank"] = cfg.rank
    return init(cfg.model, dims, kappa=cfg.kappa, seed=make_rng(cfg.seed))


def _rng_state_json(rng) -> dict:
    def enc(o):
        if isinstance(o, np.ndarray):
            return [int(v) for v in o]
        return int(o)
    return json.loads(json.dumps(rng.bit_generator.state, default=enc))


def _rng_state_restore(state: dict) -> dict:
    def dec(o):
        if isinstance(o, dict):
            return {k: dec(v) for k, v in o.items()}
        if isinstance(o, list):
            return np.array(o, dtype=np.uint64)
        return o
    return dec(state)


def _checkpoint(path, params, cfg, update, adam, rng) -> str:
    meta = {"config": config_to_dict(cfg), "update": update, "adam_t": adam.t,
            "rng_state": _rng_state_json(rng), "kappa": cfg.kappa, "seed": cfg.seed}
    save_checkpoint(path, params, meta, adam.state_arrays())
    return str(path)


def train(data, cfg: TrainConfig, params=None, log_path=None, checkpoint_path=None,
          resume_from=None, callback=None, stop_at: int | None = None):
    """Run ``cfg.updates`` parameter updates on the ``(T_obs, N)`` array ``data``.

    ``stop_at`` ends the run early at that update index while keeping the
    learning-rate schedule of the full ``cfg.updates`` run.

    Returns ``(params, TrainReport)``. Updates whose Newton solve does not
    converge (or blows up) are skipped and counted. A non-finite loss saves
    the last good state and raises ``TrainingDivergedError``.
    """
    cfg.validate()
    data = np.asarray(data, dtype=np.float64)
    rng = make_rng(cfg.seed + 1)
    adam = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    start = 0
    if resume_from is not None:
        params, meta, extra = load_checkpoint(resume_from)
        adam.load_state(meta["adam_t"], extra)
        rng.bit_generator.state = _rng_state_restore(meta["rng_state"])
        start = meta["update"]
    elif params is None:
        params = init_model(cfg, data.shape[1])
    t_w = cfg.t_w
    report = TrainReport()
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "a" if resume_from else "w", newline="")
        writer = csv.writer(fh)
        if not resume_from:
            fh.write("# config: " + json.dumps(config_to_dict(cfg), sort_keys=True) + "\n")
            writer.writerow(LOG_COLUMNS)
    last_good = params
    try:
        end = cfg.updates if stop_at is None else min(cfg.updates, stop_at)
        for update in range(start, end):
            lr = lr_at(update, cfg)
            x, _ = sample_batch(data, cfg.batch_size, cfg.seq_len, rng)
            t0 = time.perf_counter_ns()
            iters, converged, resid = 0, True, float("nan")
            try:
                if cfg.mode == "lssm_scan":
                    gb = lssm_value_and_grad(params, x, t_w, cfg.reg, mode=cfg.deer.scan_mode,
                                             workers=cfg.deer.workers)
                else:
                    fwd = "deer" if cfg.mode == "gtf_deer" else "sequential"
                    gb = gtf_value_and_grad(params, x, cfg.alpha, t_w, cfg.deer, cfg.reg,
                                            forward=fwd, rng=rng)
                    if gb.deer is not None:
                        iters, converged = gb.deer.iterations_used, gb.deer.converged
                        resid = gb.deer.final_residual
            except DeerDivergenceError as exc:
                gb, iters, converged = None, exc.iteration, False
                report.divergence_events.append({"update": update, "iteration": exc.iteration})
            wall = time.perf_counter_ns() - t0

            if gb is not None and converged and not gb.all_finite():
                path = None
                if checkpoint_path is not None:
                    path = _checkpoint(checkpoint_path, last_good, cfg, update, adam, rng)
                raise TrainingDivergedError(update, path)

            parts = gb.parts.as_dict() if gb is not None else dict.fromkeys(
                ("loss", "mse", "mar", "l1", "l2"), float("nan"))
            if converged:
                new = adam.step(params.arrays(), gb.grads, lr)
                last_good = params
                params = params.with_arrays(**new)
            else:
                report.skipped += 1
            report.losses.append(parts["loss"])
            report.mse.append(parts["mse"])
            report.deer_iters.append(iters)
            report.wall_ns.append(wall)
            report.converged.append(converged)
            report.lrs.append(lr)
            if writer is not None:
                writer.writerow([update, parts["loss"], parts["mse"], parts["mar"], parts["l1"],
                                 parts["l2"], lr, iters, wall, int(converged), resid])
            if callback is not None:
                callback(update, params, parts)
            if (checkpoint_path is not None and cfg.checkpoint_every
                    and (update + 1) % cfg.checkpoint_every == 0):
                report.checkpoint_path = _checkpoint(checkpoint_path, params, cfg, update + 1,
                                                     adam, rng)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        report.checkpoint_path = _checkpoint(checkpoint_path, params, cfg, end, adam, rng)
    return params, report


# --------------------------------------------------------------------------
# generation

def warmup_state(params, history):
    """Latent state aligned with the last row of ``history`` (shape ``(..., T_w+1, N)``).

    shPLRNN: fully forced rollout (alpha = 1) through the history, returning the
    forced state at the last observation. LSSM: the teacher-forced linear scan.
    """
    history = np.asarray(history, dtype=np.float64)
    if isinstance(params, LssmParams):
        z, _, _ = lssm_forward(params, history, mode="sequential")
        return z[..., -1, :]
    plan = build_plan(params.readout, history, 1.0, 0)
    t = history.shape[-2] - 1
    if t == 0:
        return plan.targets[..., 0, :]
    z = forced_rollout(params, plan)
    return force_state(plan, z[..., -1, :], t)


def generate(params, n_steps: int, z0=None, warmup_data=None, s=None, limit: float = 1e8):
    """Free-running rollout; returns ``(x_hat, z, diverged_at)``.

    ``x_hat`` holds readouts of ``F^k(z0)`` for ``k = 1 .. n_steps``; after a
    divergence (state norm above ``limit``) rows are NaN.
    """
    if z0 is None:
        if warmup_data is None:
            raise ValueError("give z0 or warmup_data")
        z0 = warmup_state(params, warmup_data)
    rnn = params.as_shplrnn() if isinstance(params, LssmParams) else params
    z, bad = free_rollout(rnn, z0, n_steps, s=s, limit=limit)
    return readout(params, z), z, bad
