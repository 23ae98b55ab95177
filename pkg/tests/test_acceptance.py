"""Acceptance criteria 1-11, one test each (criterion 11 is in the nightly tier)."""
import dataclasses
import math
import os
import statistics

import numpy as np
import pytest

from conftest import central_fd, ld_gtf_loss, random_shplrnn
from gtfdeer.adjoint import backward_solve, gtf_value_and_grad, lssm_forward
from gtfdeer.cli import bench, sweep
from gtfdeer.deer import DeerConfig, DeerDivergenceError, forced_rollout, solve_forward
from gtfdeer.forcing import build_plan, critical_alpha, force_state, forced_jacobian
from gtfdeer.metrics import DstspConfig, delay_embed, dstsp, estimate_lle, evaluate, silverman_bandwidth
from gtfdeer.model import init_lssm, shplrnn_step
from gtfdeer.numerics import make_rng, spectral_norm, spectral_norm_upper_bound
from gtfdeer.presets import dataset_for, get_preset, with_deer
from gtfdeer.trainer import train


def test_criterion_01_deer_matches_sequential(record_property):
    rng = make_rng(101)
    worst, n, converged = 0.0, 50, 0
    for _ in range(n):
        m, nobs = int(rng.choice([3, 5, 8])), int(rng.choice([1, 3]))
        p = random_shplrnn(rng, m, int(rng.integers(4, 51)), nobs)
        alpha = float(rng.choice([0.15, 0.4, 1.0]))
        plan = build_plan(p.readout, rng.normal(size=(1025, nobs)), alpha)
        try:
            st = solve_forward(p, plan, DeerConfig())
        except DeerDivergenceError:
            continue
        if not st.converged:
            continue
        converged += 1
        worst = max(worst, float(np.max(np.abs(st.z - forced_rollout(p, plan)))))
    record_property("detail", f"worst inf-norm gap {worst:.2e} over {converged}/{n} converged models")
    # strongly expanding draws (alpha far below the critical value) may not converge;
    # the comparison is only meaningful if most draws do
    assert converged >= 0.8 * n
    assert worst <= 1e-7


def test_criterion_02_two_iterations_full_forcing(record_property):
    rng = make_rng(102)
    used = {}
    for t in (2 ** 8, 2 ** 12, 2 ** 15):
        p = random_shplrnn(rng, 3, 20, 3)
        plan = build_plan(p.readout, rng.normal(size=(t + 1, 3)), 1.0)
        used[t] = solve_forward(p, plan, DeerConfig(init_strategy="pinv_targets")).iterations_used
    record_property("detail", f"iterations {used}")
    assert all(v == 2 for v in used.values())


def test_criterion_03_contraction_above_critical_alpha(record_property):
    rng = make_rng(103)
    worst_gap, done = -np.inf, 0
    while done < 20:
        m = int(rng.choice([3, 4, 5]))
        p = random_shplrnn(rng, m, 16, m, scale=1.0)
        sigma = spectral_norm_upper_bound(p)
        if sigma <= 1.0:
            continue
        alpha = critical_alpha(sigma) + 0.05
        rho = (1.0 - alpha) * sigma
        x = rng.normal(size=(2001, m)) * 2.0
        plan = build_plan(p.readout, x, alpha)
        z = plan.targets[0]
        prod = np.eye(m)
        for k in range(1, 51):
            zt = force_state(plan, z, k - 1)
            prod = forced_jacobian(p, plan, zt, k - 1) @ prod
            assert spectral_norm(prod) <= rho ** k
            z = shplrnn_step(p, zt)

        def step(z, t):
            return shplrnn_step(p, force_state(plan, z, t))

        def jac(z, t):
            return forced_jacobian(p, plan, force_state(plan, z, t), t)

        lle = estimate_lle(step, jac, plan.targets[0], 2000, rng=rng).lle_per_step
        worst_gap = max(worst_gap, lle - math.log(rho))
        assert lle <= math.log(rho) + 0.05
        done += 1
    record_property("detail", f"max(LLE - log rho) = {worst_gap:.3f}")


def test_criterion_04_adjoint_gradient_vs_fd(record_property):
    rng = make_rng(104)
    worst = 0.0
    for i in range(20):
        p = random_shplrnn(rng, 4, 8, 2)
        alpha = float(rng.choice([0.15, 0.4, 1.0]))
        t_w = int(rng.choice([0, 8]))
        x = rng.normal(size=(65, 2))
        plan = build_plan(p.readout, x, alpha, t_w)
        gb = gtf_value_and_grad(p, x, alpha, t_w, DeerConfig(tolerance=1e-12), plan=plan)
        fd = central_fd(p.arrays(), lambda a: ld_gtf_loss(a, plan, x, t_w), 1e-12)
        for k in fd:
            err = np.linalg.norm(gb[k] - fd[k]) / np.linalg.norm(fd[k])
            worst = max(worst, err)
    record_property("detail", f"worst per-parameter relative error {worst:.2e}")
    assert worst <= 1e-5


def test_criterion_05_lorenz63_fo_reconstruction(record_property):
    preset = get_preset("lorenz63_fo")
    _, tr, te = dataset_for("lorenz63_fo", 0)
    values, diverged = [], 0
    for seed in range(5):
        cfg = dataclasses.replace(preset.train, seed=seed)
        params, _ = train(tr.data, cfg)
        rep = evaluate(params, te.data, te.dt, preset.dstsp, n_rmse=preset.n_rmse,
                       t_w=preset.eval_warmup, seed=seed)
        if rep["diverged"] or rep["dstsp"] is None:
            diverged += 1
        else:
            values.append(rep["dstsp"])
    med = statistics.median(values) if values else float("nan")
    record_property("detail", f"median D_stsp {med:.4f}, values {[round(v, 4) for v in values]}, "
                              f"diverged {diverged}/5")
    assert 5 - diverged >= 4 and med <= 5e-2


def test_criterion_06_quasi_vs_full_iterations(record_property):
    preset = get_preset("lorenz63_po")
    _, tr, _ = dataset_for("lorenz63_po", 0)
    med = {}
    for mode in ("full", "diagonal"):
        cfg = dataclasses.replace(with_deer(preset.train, jacobian_mode=mode), seed=0)
        _, rep = train(tr.data, cfg, stop_at=500)
        med[mode] = float(np.median(rep.deer_iters))
    ratio = med["diagonal"] / med["full"]
    record_property("detail", f"median iterations {med}, ratio {ratio:.1f}")
    assert ratio >= 10


def test_criterion_07_sequential_parallel_training_agree(record_property):
    preset = get_preset("lorenz63_fo")
    _, tr, _ = dataset_for("lorenz63_fo", 0)
    cfg = dataclasses.replace(with_deer(preset.train, tolerance=1e-10), updates=50, seed=0)
    _, a = train(tr.data, cfg)
    _, b = train(tr.data, dataclasses.replace(cfg, mode="gtf_sequential"))
    rel = np.max(np.abs(np.array(a.losses) - b.losses) / np.abs(b.losses))
    record_property("detail", f"max relative loss gap {rel:.2e}")
    assert rel <= 1e-4


def test_criterion_08_runtime_scaling(record_property):
    workers = max(8, os.cpu_count() or 1)
    seq_lens = [2 ** k for k in range(7, 18)]
    rows = bench(seq_lens, [4], [workers], repeats=5)
    seq = sorted((r["T"], r["median_ns"]) for r in rows if r["mode"] == "sequential")
    slope = np.polyfit(np.log([t for t, _ in seq]), np.log([v for _, v in seq]), 1)[0]
    top = {r["mode"]: r for r in rows if r["T"] == 2 ** 17}
    speedup = top["sequential"]["median_ns"] / top["parallel"]["median_ns"]
    iters = top["parallel"]["deer_iters"]
    record_property("detail", f"sequential slope {slope:.3f}; speedup at T=2^17 with {workers} "
                              f"workers {speedup:.2f}x ({iters} iterations, "
                              f"{os.cpu_count()} cpu(s) available)")
    assert abs(slope - 1.0) <= 0.1
    assert iters <= 3 and speedup >= 2.0


def test_criterion_09_lssm_cotangent_envelope(record_property):
    rng = make_rng(109)
    worst = 0.0
    for _ in range(20):
        m, l, n, t_len = 4, 8, 2, 256
        p = init_lssm(m, l, n, seed=rng).with_arrays(
            a_raw=rng.uniform(-2, 2, m), u=rng.normal(0, 0.5, (m, n)),
            readout_v=rng.normal(size=(l, m)), readout_bias=rng.normal(size=l))
        x = rng.normal(size=(t_len + 1, n))
        z, pre, xh = lssm_forward(p, x)
        e = (2.0 / (n * t_len)) * (xh - x[1:])
        g = ((e @ p.readout_b) * (pre > 0)) @ p.readout_v
        mats = np.broadcast_to(p.a, g.shape)
        a_norm = float(np.max(np.abs(p.a)))
        v = backward_solve(mats, g)
        gn = np.linalg.norm(g, axis=1)
        for r in range(t_len):
            bound = float(np.sum(a_norm ** np.arange(t_len - r) * gn[r:]))
            worst = max(worst, np.linalg.norm(v[r]) / bound)
        # a single injected cotangent decays no slower than ||A||^(t - r)
        t_inj = t_len - 1
        single = np.zeros_like(g)
        single[t_inj] = g[t_inj]
        vs = backward_solve(mats, single)
        for r in range(t_len):
            bound = a_norm ** (t_inj - r) * gn[t_inj]
            if bound > 0:
                worst = max(worst, np.linalg.norm(vs[r]) / bound)
    record_property("detail", f"max norm / envelope {worst:.6f}")
    assert worst <= 1 + 1e-9


def test_criterion_10_metric_suite(record_property, lorenz63_data):
    _, _, test = lorenz63_data
    x = test.data[:20_000]
    self_d = float(dstsp(x, x, DstspConfig(mc_samples=100_000), make_rng(10)))
    assert self_d < 0.01
    for t, m, tau in ((100, 3, 10), (4096 * 3, 3, 4096), (5000, 7, 100)):
        assert delay_embed(np.zeros((t, 2)), m, tau).shape == (t - (m - 1) * tau, 2 * m)
    assert abs(silverman_bandwidth(10_000, 3) - 0.2598526445218819) < 1e-12
    assert silverman_bandwidth(1, 2) == 1.0
    lle = estimate_lle(lambda z, t: 0.5 * z, lambda z, t: 0.5 * np.eye(3), np.ones(3), 1000)
    assert abs(lle.lle_per_step - math.log(0.5)) <= 1e-6
    record_property("detail", f"dstsp(x, x) = {self_d:.2e}, LLE(0.5 I) = {lle.lle_per_step:.8f}")


C11_UPDATES = int(os.environ.get("GTFDEER_C11_UPDATES", "1500"))
C11_LR = float(os.environ.get("GTFDEER_C11_LR", "1e-3"))


@pytest.mark.nightly
def test_criterion_11_long_sequence_trend(record_property, tmp_path):
    out = os.environ.get("GTFDEER_C11_DIR", str(tmp_path))
    rows = sweep("lorenz96_forced", [512, 4096, 32768], range(3), out,
                 overrides={"updates": C11_UPDATES, "lr_start": C11_LR, "lr_end": C11_LR / 50},
                 eval_kw={"lle_horizon": 2000})
    med = {r["T"]: r["dstsp_de_median"] for r in rows}
    record_property("detail", f"median D_stsp^DE by T {med} ({C11_UPDATES} updates, lr {C11_LR})")
    vals = [med[t] for t in (512, 4096, 32768)]
    assert all(v is not None for v in vals)
    assert vals[0] >= vals[1] >= vals[2] and vals[2] < vals[0]
