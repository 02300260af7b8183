"""Acceptance suite: one test per criterion, one printed verdict line each.

The two Monte-Carlo-heavy runs (the 1-d linear benchmark and the
figure-eight benchmark) are module-scoped fixtures shared by several
criteria.  Expected values come from closed forms or independent
oracles computed in-line; tolerances are fixed here, not calibrated.
"""

import json
import time

import numpy as np
import pytest

from deepwkb import net
from deepwkb.density import DensityHistogram, GridSpec
from deepwkb.expand import CharState, min_action_scan, trace_curve
from deepwkb.models import figure8_hamiltonian, make_benchmark
from deepwkb.net import MlpParams, MlpSpec
from deepwkb.pipeline import (RunConfig, evaluate_wkb_grid, fp_residual_grid,
                              run_all, _load_trained_v)
from deepwkb.regression import (NoiseLadder, PointData, regress_point,
                                apply_far_field_threshold)
from deepwkb.simulate import SimConfig, sample_attractor, simulate_ensemble
from deepwkb.train_v import QpTrainConfig, assemble_qp_sets, hj_residual, train_qp
from deepwkb.train_z import TrainedZ, assemble_z_sets, train_z
from deepwkb.validation import ks_test

from conftest import figure8_quasipotential
from test_pipeline import ou_mini_config


def _verdict(num, ok, detail):
    line = f"ACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}"
    print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------------------
# Shared OU Monte Carlo run: criteria 1 and 2.
# ---------------------------------------------------------------------------

OU_LADDER = tuple(float(e) for e in np.linspace(0.2, 0.6, 10) ** 2)
OU_BINS = 256
OU_MIN_COUNT = 200  # keeps the fully-sampled region's noise floor >4 sigma
                    # inside the stated tolerances (see decisions ledger)


@pytest.fixture(scope="module")
def ou_histograms():
    """10 noise levels, exactly 10^6 retained samples each (dT = 200 dt)."""
    system = make_benchmark("ou1d")
    grid = GridSpec((-2.0,), (2.0,), (OU_BINS,))
    hists = []
    t0 = time.time()
    for i, eps in enumerate(OU_LADDER):
        hist = DensityHistogram(grid, eps)
        cfg = SimConfig(epsilon=eps, dt=0.01, total_time=2020.0, n_traj=1000,
                        sample_interval=2.0, seed=77001 + i,
                        domain=(grid.lower_arr, grid.upper_arr))
        simulate_ensemble(system, cfg, hist.add_batch)
        assert hist.total == 1_000_000
        hists.append(hist)
    return grid, hists, time.time() - t0


def _regress_all_bins(grid, hists, min_count):
    eps = np.array([h.epsilon for h in hists])
    ladder = NoiseLadder(tuple(eps))
    flat = np.arange(grid.n_cells)
    centers = grid.centers(flat)
    counts = np.stack([h.counts_at_flat(flat) for h in hists], axis=1).astype(float)
    totals = np.array([h.total for h in hists], dtype=float)
    results = []
    for i in range(grid.n_cells):
        data = PointData(eps=eps, u_hat=counts[i] / (grid.bin_volume * totals),
                         n0=counts[i], n=totals)
        results.append(regress_point(data, ladder, (1, 0), min_count=min_count,
                                     point=centers[i]))
    apply_far_field_threshold(results)
    return results


def test_criterion_1_ou_regression_oracle(ou_histograms):
    grid, hists, sim_seconds = ou_histograms
    t0 = time.time()
    results = _regress_all_bins(grid, hists, OU_MIN_COUNT)
    full = [r for r in results
            if r is not None and r.reliable and r.used_rows == len(OU_LADDER)
            and abs(r.point[0]) <= 1.0]
    v_err = max(abs(r.v_hat - r.point[0] ** 2) for r in full)
    z_err = max(abs(np.exp(r.log_z0_hat) - np.pi**-0.5) for r in full)
    elapsed = sim_seconds + (time.time() - t0)
    ok = v_err < 0.05 and z_err < 0.05 and len(full) >= 50 and elapsed < 180
    _verdict(1, ok,
             f"|V-x^2|max={v_err:.4f} |Z-pi^-1/2|max={z_err:.4f} over {len(full)} "
             f"fully-sampled bins, {elapsed:.0f}s (<180s)")


def test_criterion_2_chi2_validation(ou_histograms):
    grid, hists, _ = ou_histograms
    t0 = time.time()
    # dT = 200 dt >= 50 dt: pooled rescaled RSS vs chi^2(7)
    results = _regress_all_bins(grid, hists, OU_MIN_COUNT)
    full = [r for r in results if r is not None and r.reliable
            and r.used_rows == len(OU_LADDER)]
    rss = np.array([r.rss_rescaled for r in full])
    _, p_value = ks_test(rss, 7)

    # contrast run: dT = dt makes samples strongly correlated
    system = make_benchmark("ou1d")
    hists_fast = []
    for i, eps in enumerate(OU_LADDER):
        hist = DensityHistogram(grid, eps)
        cfg = SimConfig(epsilon=eps, dt=0.01, total_time=110.0, n_traj=100,
                        sample_interval=0.01, seed=88001 + i,
                        domain=(grid.lower_arr, grid.upper_arr))
        simulate_ensemble(system, cfg, hist.add_batch)
        hists_fast.append(hist)
    results_fast = _regress_all_bins(grid, hists_fast, OU_MIN_COUNT)
    full_fast = [r for r in results_fast if r is not None and r.reliable
                 and r.used_rows == len(OU_LADDER)]
    rss_fast = np.array([r.rss_rescaled for r in full_fast])
    elapsed = time.time() - t0
    ok = p_value > 0.01 and rss_fast.mean() > rss.mean() and elapsed < 300
    _verdict(2, ok,
             f"KS p={p_value:.3f} (>0.01) over {len(rss)} bins; correlated-sampling "
             f"mean RSS {rss_fast.mean():.1f} > {rss.mean():.1f}; {elapsed:.0f}s (<300s)")


# ---------------------------------------------------------------------------
# Criterion 3: derivative suite.
# ---------------------------------------------------------------------------


def test_criterion_3_derivative_suite(rng):
    t0 = time.time()
    worst = {"grad_params": 0.0, "grad_input": 0.0, "hessian": 0.0,
             "dirgrad": 0.0, "hessian_dir": 0.0}
    step = 1e-5
    for k in range(20):
        n = int(rng.integers(1, 4))
        widths = (n, int(rng.integers(3, 9)), int(rng.integers(3, 7)), 1)
        spec = MlpSpec(widths=widths, l2_lambda=0.0)
        params = net.init_params(spec, seed=100 + k)
        x = rng.uniform(-1.5, 1.5, size=n)
        w = rng.normal(size=n)

        g = net.grad_params(params, x, 1.0)
        fd = np.zeros(params.size)
        for i in range(params.size):
            hi = MlpParams(spec, params.flat.copy()); hi.flat[i] += step
            lo = MlpParams(spec, params.flat.copy()); lo.flat[i] -= step
            fd[i] = (net.forward(hi, x) - net.forward(lo, x)) / (2 * step)
        worst["grad_params"] = max(worst["grad_params"],
                                   np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12))

        gi = net.grad_input(params, x)
        fdi = np.zeros(n)
        for j in range(n):
            e = np.zeros(n); e[j] = step
            fdi[j] = (net.forward(params, x + e) - net.forward(params, x - e)) / (2 * step)
        worst["grad_input"] = max(worst["grad_input"],
                                  np.max(np.abs(gi - fdi)) / max(np.max(np.abs(fdi)), 1e-12))

        hess = net.hessian_input(params, x)
        fdh = np.zeros((n, n))
        for j in range(n):
            e = np.zeros(n); e[j] = step
            fdh[:, j] = (net.grad_input(params, x + e) - net.grad_input(params, x - e)) / (2 * step)
        scale = max(np.max(np.abs(fdh)), 1e-12)
        worst["hessian"] = max(worst["hessian"], np.max(np.abs(hess - fdh)) / scale)
        worst["hessian_dir"] = max(worst["hessian_dir"],
                                   np.max(np.abs(hess @ w - fdh @ w)) / max(np.max(np.abs(fdh @ w)), 1e-12))

        dg = net.grad_params_of_directional_input_grad(params, x, w)
        fdd = np.zeros(params.size)
        for i in range(params.size):
            hi = MlpParams(spec, params.flat.copy()); hi.flat[i] += step
            lo = MlpParams(spec, params.flat.copy()); lo.flat[i] -= step
            fdd[i] = (w @ net.grad_input(hi, x) - w @ net.grad_input(lo, x)) / (2 * step)
        worst["dirgrad"] = max(worst["dirgrad"],
                               np.max(np.abs(dg - fdd)) / max(np.max(np.abs(fdd)), 1e-12))
    elapsed = time.time() - t0
    ok = (worst["grad_params"] < 1e-6 and worst["grad_input"] < 1e-6
          and worst["hessian"] < 1e-5 and worst["dirgrad"] < 1e-5
          and worst["hessian_dir"] < 1e-5 and elapsed < 60)
    _verdict(3, ok, "worst rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
             + f"; {elapsed:.0f}s (<60s)")


def test_criterion_4_hamilton_jacobi_oracles(rng):
    t0 = time.time()
    ou = make_benchmark("ou1d")
    x1 = rng.uniform(-2, 2, size=(1000, 1))
    r1 = np.max(np.abs(hj_residual(ou, 2.0 * x1, x1)))
    f8 = make_benchmark("figure8")
    _, grad, _ = figure8_quasipotential(mu=0.5)
    x2 = rng.uniform(-2.5, 2.5, size=(1000, 2))
    r2 = np.max(np.abs(hj_residual(f8, grad(x2), x2)))
    elapsed = time.time() - t0
    ok = r1 < 1e-12 and r2 < 1e-12 and elapsed < 1.0
    _verdict(4, ok, f"max residual ou={r1:.2e} figure8={r2:.2e}; {elapsed:.2f}s (<1s)")


def test_criterion_5_symplectic_characteristics():
    t0 = time.time()
    ou = make_benchmark("ou1d")
    domain = (np.array([-5.0]), np.array([5.0]))
    worst_v = 0.0
    drifts = {}
    for x0 in (0.1, 0.2, -0.15):
        for h in (1e-4, 5e-5):
            init = CharState(x=np.array([x0]), p=np.array([2 * x0]), v=x0**2)
            curve = trace_curve(ou, init, h, 0.4, domain, 20)
            assert curve.reason == "reached_v_max"
            xs = curve.points().ravel()
            vs = curve.values()
            if h == 1e-4:
                worst_v = max(worst_v, np.max(np.abs(vs - xs**2)))
            drifts[(x0, h)] = curve.max_energy_drift
    halving = all(drifts[(x0, 5e-5)] <= 0.6 * drifts[(x0, 1e-4)] for x0 in (0.1, 0.2, -0.15))
    drift_ok = all(d < 1e-3 for (x0, h), d in drifts.items() if h == 1e-4)
    elapsed = time.time() - t0
    ok = worst_v < 2e-3 and drift_ok and halving and elapsed < 60
    _verdict(5, ok, f"|v-x^2|max={worst_v:.1e} (<2e-3), drift<1e-3 and halves "
             f"with h; {elapsed:.0f}s (<60s)")


def test_criterion_8_normalization_scaling():
    t0 = time.time()
    eps = 1e-3
    # 10^5-node trapezoid quadrature of exp(-x^2/eps)
    x = np.linspace(-0.5, 0.5, 100_000)
    integral = np.trapezoid(np.exp(-x * x / eps), x)
    ratio = integral / np.sqrt(eps)
    quad_ok = abs(ratio - np.sqrt(np.pi)) < 0.01 * np.sqrt(np.pi)

    grid = GridSpec((-2.0,), (2.0,), (4096,))
    v = lambda pts: np.atleast_2d(pts)[:, 0] ** 2
    z = lambda pts: np.full(np.atleast_2d(pts).shape[0], np.pi**-0.5)
    _, mass = evaluate_wkb_grid(v, z, 0.04, grid, dims=(1, 0))
    elapsed = time.time() - t0
    ok = quad_ok and 0.999 <= mass <= 1.001 and elapsed < 10
    _verdict(8, ok, f"quadrature/sqrt(eps)={ratio:.5f} vs sqrt(pi)={np.sqrt(np.pi):.5f}; "
             f"analytic WKB mass={mass:.6f}; {elapsed:.1f}s (<10s)")


def test_criterion_9_fp_residual_diagnostic():
    t0 = time.time()
    ou = make_benchmark("ou1d")
    eps = 0.25
    rels = {}
    for bins in (256, 512):
        grid = GridSpec((-3.0,), (3.0,), (bins,))
        centers = grid.centers(np.arange(bins))[:, 0]
        u = (np.pi * eps) ** -0.5 * np.exp(-centers**2 / eps)
        _, rels[bins] = fp_residual_grid(ou, u, grid, eps)
    conv = rels[256] / rels[512]
    elapsed = time.time() - t0
    ok = rels[512] < 1e-3 and 3.3 < conv < 4.7 and elapsed < 10
    _verdict(9, ok, f"relative residual={rels[512]:.2e} (<1e-3), halving ratio={conv:.2f} "
             f"(~4); {elapsed:.1f}s (<10s)")


def test_criterion_10_min_action_oracle():
    t0 = time.time()
    ou = make_benchmark("ou1d")
    est, path = min_action_scan(ou, np.array([0.6]), np.array([[0.3], [-0.3]]),
                                n_nodes=50, iters=20000, lr_per_dt=0.3,
                                level_value=0.09)
    elapsed = time.time() - t0
    ok = abs(est - 0.36) < 0.02 and elapsed < 30
    _verdict(10, ok, f"estimate={est:.4f} vs 0.36 +- 0.02; {elapsed:.0f}s (<30s)")


def test_criterion_11_pipeline_determinism(tmp_path):
    cfg = ou_mini_config()
    outputs = []
    for run in ("a", "b"):
        outdir = tmp_path / run
        run_all(cfg, outdir)
        blob = {}
        for name in ("manifest.json", "checkpoint_v.dwkbnet",
                     "checkpoint_v_refined.dwkbnet", "checkpoint_z.dwkbnet"):
            blob[name] = (outdir / name).read_bytes()
        outputs.append(blob)
    same = {name: outputs[0][name] == outputs[1][name] for name in outputs[0]}
    ok = all(same.values())
    _verdict(11, ok, "bitwise identical: " + ", ".join(f"{k}={v}" for k, v in same.items()))
