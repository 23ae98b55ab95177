"""Command-line entry point: generate, train, eval, bench and sweep.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 non-convergence budget exceeded.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .deer import DeerConfig
from .metrics import DstspConfig, dstsp, evaluate
from .model import init_shplrnn, load_checkpoint
from .numerics import make_rng
from .presets import PRESETS, constant_product_grid, dataset_for, get_preset
from .pscan import default_workers
from .systems import (SplitConfig, default_split, get_system, make_dataset, read_trajectory,
                      write_trajectory)
from .trainer import (ConfigError, TrainConfig, TrainingDivergedError, apply_overrides,
                      config_to_dict, config_to_text, load_config, train)

__all__ = ["main", "build_parser", "resolve_train_config", "bench", "sweep", "BENCH_COLUMNS",
           "SWEEP_RUN_COLUMNS", "SWEEP_COLUMNS", "EXIT_OK", "EXIT_CONFIG", "EXIT_DIVERGED",
           "EXIT_NONCONVERGED"]

log = logging.getLogger("gtfdeer")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_NONCONVERGED = 0, 2, 3, 4

BENCH_COLUMNS = ("T", "M", "mode", "workers", "median_ns", "mad_ns", "deer_iters")
SWEEP_RUN_COLUMNS = ("T", "B", "seed", "dstsp", "dstsp_de", "rmse_n", "diverged", "skipped",
                     "wall_s")
SWEEP_COLUMNS = ("T", "B", "n_runs", "n_diverged", "dstsp_de_median", "dstsp_de_mad",
                 "rmse_median", "rmse_mad", "dstsp_median", "dstsp_mad")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _median_mad(values):
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    med = float(np.median(v))
    return med, float(np.median(np.abs(v - med)))


# --------------------------------------------------------------------------
# config resolution

def _parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError([f"{item}: overrides must look like key=value"])
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_train_config(args) -> TrainConfig:
    """Preset (or defaults) < config file < flags < ``key=value`` overrides."""
    base = get_preset(args.preset).train if getattr(args, "preset", None) else TrainConfig()
    if getattr(args, "config", None):
        base = load_config(args.config, base)
    flags = {}
    if getattr(args, "mode", None):
        flags["mode"] = args.mode
        if args.mode == "lssm_scan":
            flags["model"] = "lssm"
    for attr, key in (("alpha", "alpha"), ("seq_len", "seq_len"), ("batch", "batch_size"),
                      ("updates", "updates"), ("workers", "workers"), ("seed", "seed")):
        val = getattr(args, attr, None)
        if val is not None:
            flags[key] = val
    if getattr(args, "quasi", False):
        flags["jacobian_mode"] = "diagonal"
    flags.update(_parse_overrides(getattr(args, "overrides", None)))
    return apply_overrides(base, flags) if flags else base.validate()


def _load_data(args, role: str):
    """Trajectory from ``--train``/``--test`` or generated from the preset or ``--dataset``."""
    path = getattr(args, role, None)
    if path:
        return read_trajectory(path)
    name = getattr(args, "dataset", None) or getattr(args, "preset", None)
    if not name:
        raise ConfigError([f"{role}: give a trajectory file, --preset or --dataset"])
    _, tr, te = dataset_for(name, args.data_seed)
    return tr if role == "train" else te


# --------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.n_steps is not None:
        key = args.dataset.lower().replace("-", "_")
        if key in PRESETS:
            spec = get_system(PRESETS[key].system)
            split = dataclasses.replace(PRESETS[key].split(), n_steps=args.n_steps)
        else:
            spec = get_system(args.dataset)
            split = dataclasses.replace(default_split(spec), n_steps=args.n_steps)
        tr, te = make_dataset(spec, args.seed, split)
    else:
        _, tr, te = dataset_for(args.dataset, args.seed)
    stem = args.dataset.lower().replace("-", "_")
    paths = []
    for ts in (tr, te):
        p = out / f"{stem}_{ts.role}.dsrtraj"
        write_trajectory(ts, p)
        paths.append(str(p))
    print(json.dumps({"files": paths, "shape": list(tr.data.shape), "seed": args.seed}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    if args.dump_config:
        sys.stdout.write(config_to_text(cfg))
        return EXIT_OK
    data = _load_data(args, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg))
    ckpt = out / "model.ckpt"
    t0 = time.time()
    status = EXIT_OK
    error = None
    try:
        params, report = train(data.data, cfg, log_path=out / "train_log.csv", checkpoint_path=ckpt,
                               resume_from=args.resume)
    except TrainingDivergedError as exc:
        log.error("training diverged: %s", exc)
        summary = {"config": config_to_dict(cfg), "status": "diverged", "update": exc.update,
                   "checkpoint": exc.checkpoint}
        _write_json(out / "report.json", summary)
        return EXIT_DIVERGED
    skip_frac = report.skipped / max(1, len(report.converged))
    if skip_frac > args.max_skip_frac:
        status, error = EXIT_NONCONVERGED, f"{report.skipped} of {len(report.converged)} updates skipped"
        log.error("non-convergence budget exceeded: %s", error)
    it = np.asarray(report.deer_iters, dtype=np.float64)
    summary = {
        "config": config_to_dict(cfg),
        "data": {"source": args.train or (args.dataset or args.preset), "data_seed": args.data_seed,
                 "shape": list(data.data.shape)},
        "status": "ok" if status == EXIT_OK else "nonconverged",
        "error": error,
        "final_loss": report.losses[-1] if report.losses else None,
        "skipped": report.skipped,
        "deer_iters_median": float(np.median(it)) if it.size else None,
        "deer_iters_max": int(it.max()) if it.size else None,
        "divergence_events": report.divergence_events,
        "checkpoint": report.checkpoint_path,
        "wall_s": time.time() - t0,
    }
    _write_json(out / "report.json", summary)
    print(json.dumps({k: summary[k] for k in ("status", "final_loss", "skipped",
                                             "deer_iters_median", "checkpoint")}))
    return status


def _eval_settings(args):
    preset = get_preset(args.preset) if args.preset else None
    cfg = preset.dstsp if preset else DstspConfig()
    changes = {}
    if args.mc_samples is not None:
        changes["mc_samples"] = args.mc_samples
    if args.embed_m is not None:
        changes["embed_m"] = args.embed_m
    if args.embed_tau is not None:
        changes["embed_tau"] = args.embed_tau
    cfg = dataclasses.replace(cfg, **changes)
    t_w = args.eval_warmup if args.eval_warmup is not None else (preset.eval_warmup if preset else 128)
    n_rmse = preset.n_rmse if preset else 128
    return cfg, t_w, n_rmse


def cmd_eval(args) -> int:
    cfg, t_w, n_rmse = _eval_settings(args)
    test = _load_data(args, "test")
    echo = {"preset": args.preset, "eval_seed": args.seed, "test": args.test or args.preset,
            "data_seed": args.data_seed}
    if args.generated:
        gen = read_trajectory(args.generated).data
        d = dstsp(test.data, gen, dataclasses.replace(cfg, embed_m=1, embed_tau=1), make_rng(args.seed))
        de = dstsp(test.data, gen, cfg, make_rng(args.seed)) if cfg.embed_m > 1 else None
        report = {"dstsp": None if d.diverged else float(d),
                  "dstsp_de": None if de is None or de.diverged else float(de),
                  "rmse_n": None, "lle": None, "diverged": bool(d.diverged),
                  "config": {**dataclasses.asdict(cfg), **echo, "generated": args.generated}}
    else:
        params, meta, _ = load_checkpoint(args.checkpoint)
        report = evaluate(params, test.data, test.dt, cfg, n_rmse=n_rmse, n_windows=args.n_windows,
                          t_w=t_w, lle_horizon=args.lle_horizon, seed=args.seed,
                          test_length=args.test_length)
        report["config"].update(echo)
        report["config"]["checkpoint"] = args.checkpoint
        report["train_config"] = meta.get("config")
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# benchmarking

def bench_point(params, x, mode: str, workers: int, repeats: int, alpha: float = 0.15):
    """Median and MAD (ns) of one forward+backward pass; ``mode`` is sequential or parallel."""
    from .adjoint import gtf_value_and_grad

    deer = DeerConfig(scan_mode="parallel", workers=workers)
    fwd = "sequential" if mode == "sequential" else "deer"
    times, iters = [], []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        gb = gtf_value_and_grad(params, x, alpha, 0, deer, None, forward=fwd)
        times.append(time.perf_counter_ns() - t0)
        iters.append(gb.deer.iterations_used if gb.deer is not None else 0)
    med, mad = _median_mad(times)
    return med, mad, int(np.median(iters))


def bench(seq_lens, latent_dims, workers_grid, repeats: int = 5, hidden_dim: int = 50,
          seed: int = 0, max_bytes: float = 2e9, out=None):
    """Forward+backward timing grid; rows follow ``BENCH_COLUMNS``.

    Points whose Jacobian storage (about four ``T x M x M`` float arrays) exceeds
    ``max_bytes`` are skipped with a log message.
    """
    spec = get_system("lorenz63")
    t_max = max(seq_lens)
    tr, _ = make_dataset(spec, seed, SplitConfig(n_steps=t_max + 1, noise_fraction=0.0))
    rows = []
    for m in latent_dims:
        params = init_shplrnn(m, hidden_dim, tr.n_vars, seed=make_rng(seed))
        for t in seq_lens:
            if 4.0 * t * m * m * 8 > max_bytes:
                log.warning("skipping T=%d M=%d: exceeds memory budget", t, m)
                continue
            x = tr.data[: t + 1]
            # warm up compiled kernels outside the timed region
            bench_point(params, x[:9], "sequential", 1, 1)
            grid = [("sequential", 1)] + [("parallel", w) for w in workers_grid]
            for mode, w in grid:
                med, mad, it = bench_point(params, x, mode, w, repeats)
                row = {"T": t, "M": m, "mode": mode, "workers": w, "median_ns": med,
                       "mad_ns": mad, "deer_iters": it}
                rows.append(row)
                log.info("%s", row)
                if out is not None:
                    out.writerow([row[c] for c in BENCH_COLUMNS])
    return rows


def cmd_bench(args) -> int:
    seq_lens = args.seq_lens or [2 ** k for k in range(7, 18)]
    workers = args.workers_grid or sorted({1, default_workers()})
    echo = {"seq_lens": seq_lens, "latent_dims": args.latent_dims, "workers": workers,
            "repeats": args.repeats, "hidden_dim": args.hidden_dim, "seed": args.seed,
            "max_bytes": args.max_bytes, "version": __version__}
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        fh.write("# config: " + json.dumps(echo, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        bench(seq_lens, args.latent_dims, workers, args.repeats, args.hidden_dim, args.seed,
              args.max_bytes, out=w)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# --------------------------------------------------------------------------
# sequence-length sweep

def _read_runs(path):
    done = {}
    if path.exists():
        with open(path, newline="") as fh:
            for rec in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
                done[(int(rec["T"]), int(rec["seed"]))] = rec
    return done


def _num(v):
    if v in (None, "", "None", "nan"):
        return None
    return float(v)


def aggregate_runs(runs):
    """Median and MAD per ``T`` over seeds; diverged runs count but carry no value."""
    by_t = {}
    for r in runs:
        by_t.setdefault(int(r["T"]), []).append(r)
    rows = []
    for t in sorted(by_t):
        group = by_t[t]
        de = _median_mad([_num(r["dstsp_de"]) for r in group])
        rm = _median_mad([_num(r["rmse_n"]) for r in group])
        ds = _median_mad([_num(r["dstsp"]) for r in group])
        n_div = sum(str(r["diverged"]).lower() in ("1", "true") for r in group)
        rows.append({"T": t, "B": int(group[0]["B"]), "n_runs": len(group), "n_diverged": n_div,
                     "dstsp_de_median": de[0], "dstsp_de_mad": de[1], "rmse_median": rm[0],
                     "rmse_mad": rm[1], "dstsp_median": ds[0], "dstsp_mad": ds[1]})
    return rows


def sweep(preset_name: str, seq_lens, seeds, out_dir, overrides=None, data_seed: int = 0,
          product: int | None = None, eval_kw=None, resume: bool = True):
    """Train and evaluate every ``(T, seed)`` with ``B * T`` held fixed.

    Per-run results go to ``runs.csv`` as they finish (completed runs are
    skipped when resuming); the aggregate lands in ``sweep.csv``.
    """
    preset = get_preset(preset_name)
    product = product or preset.product_bt
    try:
        grid = constant_product_grid(seq_lens, product)
    except ValueError as exc:
        raise ConfigError([f"seq_lens: {exc}"]) from None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec, tr, te = dataset_for(preset_name, data_seed)
    base = apply_overrides(preset.train, overrides or {})
    eval_kw = dict(eval_kw or {})
    dcfg = dataclasses.replace(preset.dstsp, **eval_kw.pop("dstsp", {}))
    echo = {"preset": preset.name, "product_bt": product, "seq_lens": list(seq_lens),
            "seeds": list(seeds), "data_seed": data_seed, "train": config_to_dict(base),
            "dstsp": dataclasses.asdict(dcfg), "eval": eval_kw}
    runs_path = out_dir / "runs.csv"
    done = _read_runs(runs_path) if resume else {}
    new_file = not runs_path.exists() or not resume
    with open(runs_path, "w" if new_file else "a", newline="") as fh:
        w = csv.writer(fh)
        if new_file:
            fh.write("# config: " + json.dumps(echo, sort_keys=True) + "\n")
            w.writerow(SWEEP_RUN_COLUMNS)
        for b, t in grid:
            for seed in seeds:
                if (t, seed) in done:
                    continue
                cfg = dataclasses.replace(base, batch_size=b, seq_len=t, seed=seed).validate()
                t0 = time.time()
                diverged, skipped = False, 0
                try:
                    params, rep = train(tr.data, cfg)
                    skipped = rep.skipped
                    r = evaluate(params, te.data, te.dt, dcfg, n_rmse=preset.n_rmse,
                                 t_w=preset.eval_warmup, seed=seed, **eval_kw)
                    diverged = r["diverged"]
                except TrainingDivergedError:
                    r = {"dstsp": None, "dstsp_de": None, "rmse_n": None}
                    diverged = True
                row = {"T": t, "B": b, "seed": seed, "dstsp": r["dstsp"], "dstsp_de": r["dstsp_de"],
                       "rmse_n": r["rmse_n"], "diverged": int(diverged), "skipped": skipped,
                       "wall_s": round(time.time() - t0, 2)}
                w.writerow([row[c] for c in SWEEP_RUN_COLUMNS])
                fh.flush()
                done[(t, seed)] = row
                log.info("sweep run %s", row)
    rows = aggregate_runs(done.values())
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        fh.write("# config: " + json.dumps(echo, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([row[c] for c in SWEEP_COLUMNS])
    return rows


def cmd_sweep(args) -> int:
    preset = get_preset(args.preset)
    seq_lens = args.seq_lens or list(preset.sweep_seq_lens)
    overrides = _parse_overrides(args.overrides)
    for attr, key in (("updates", "updates"), ("workers", "workers")):
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    eval_kw = {"lle_horizon": args.lle_horizon}
    if args.mc_samples is not None:
        eval_kw["dstsp"] = {"mc_samples": args.mc_samples}
    rows = sweep(args.preset, seq_lens, range(args.seed, args.seed + args.seeds), args.out,
                 overrides, args.data_seed, args.product_bt, eval_kw, resume=not args.fresh)
    for row in rows:
        print(json.dumps(row, default=_json_default))
    return EXIT_OK


# --------------------------------------------------------------------------

def _int_list(text):
    return [int(float(v)) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtfdeer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write train/test trajectories")
    g.add_argument("dataset", help="system or preset name")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", default=".")
    g.add_argument("--n-steps", type=int, default=None, help="override the orbit length")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--train", help="training trajectory file (default: generate from preset)")
    t.add_argument("--dataset", help="system or preset name to generate data from")
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--mode", choices=("lssm_scan", "gtf_sequential", "gtf_deer"))
    t.add_argument("--alpha", type=float)
    t.add_argument("--seq-len", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--updates", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--quasi", action="store_true", help="diagonal Jacobians (quasi-Newton)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--max-skip-frac", type=float, default=0.5,
                   help="exit with code 4 when more updates than this fraction are skipped")
    t.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    t.add_argument("-o", "--out", default="run")
    t.add_argument("overrides", nargs="*", help="key=value config overrides")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or a trajectory file)")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--generated", help="trajectory file compared directly to the test orbit")
    e.add_argument("--test", help="test trajectory file (default: generate from preset)")
    e.add_argument("--preset", choices=sorted(PRESETS))
    e.add_argument("--dataset")
    e.add_argument("--data-seed", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--mc-samples", type=int)
    e.add_argument("--embed-m", type=int)
    e.add_argument("--embed-tau", type=int)
    e.add_argument("--eval-warmup", type=int)
    e.add_argument("--n-windows", type=int, default=100)
    e.add_argument("--lle-horizon", type=int, default=10_000)
    e.add_argument("--test-length", type=int)
    e.add_argument("-o", "--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="forward+backward runtime grid")
    b.add_argument("--seq-lens", type=_int_list)
    b.add_argument("--latent-dims", type=_int_list, default=[4, 16, 64])
    b.add_argument("--workers-grid", type=_int_list)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--hidden-dim", type=int, default=50)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--max-bytes", type=float, default=2e9)
    b.add_argument("-o", "--out")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="sequence-length ablation at constant B*T")
    s.add_argument("--preset", required=True, choices=sorted(PRESETS))
    s.add_argument("--seq-lens", type=_int_list)
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--updates", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--data-seed", type=int, default=0)
    s.add_argument("--product-bt", type=int)
    s.add_argument("--mc-samples", type=int)
    s.add_argument("--lle-horizon", type=int, default=2000)
    s.add_argument("--fresh", action="store_true", help="ignore completed runs")
    s.add_argument("-o", "--out", default="sweep")
    s.add_argument("overrides", nargs="*", help="key=value training overrides")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as exc:
        print(f"config error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
