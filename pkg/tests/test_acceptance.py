"""Acceptance suite: one test per headline criterion, each printing a
PASS/FAIL line with the measured numbers.  Tolerances are pinned here and
nowhere else."""

import json
import time

import numpy as np
import pytest

from spdelab import evolution as ev
from spdelab import spde
from spdelab.config import config_from_dict
from spdelab.runner import (run_energy, run_experiment, run_ito_suite,
                            run_morrey_suite, run_resolvent_suite,
                            sweep_experiment)
from spdelab.triple import SpectralTriple


def announce(num, name, ok, detail):
    print(f"\nACCEPTANCE {num} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"acceptance criterion {num} failed: {detail}"


# ----------------------------------------------------------------------
# 1. resolvent suite
# ----------------------------------------------------------------------

def test_acceptance_01_resolvent_suite(tmp_path):
    cfg = config_from_dict({
        "experiment": {"kind": "resolvent-suite"},
        "triple": {"dim": 1, "grid_points": 128,
                   "box_length": 2 * np.pi},
        "noise": {"seed": 0},
        "reports": {"n_random": 100, "smoothing_max_j": 20},
    })
    start = time.time()
    rep = run_resolvent_suite(cfg, tmp_path)
    elapsed = time.time() - start
    ok = (rep["symmetry_h_rel"] < 1e-12 and rep["symmetry_v_rel"] < 1e-12
          and rep["dual_identity_rel"] < 1e-12
          and rep["contraction_h_max"] <= 1 + 1e-12
          and rep["contraction_v_max"] <= 1 + 1e-12
          and rep["smoothing_monotone"] and rep["smoothing_v_final"] < 1e-6
          and rep["resolvent_v_over_h_max"] <= 2 + 1e-12
          and elapsed < 1.0)
    announce(1, "resolvent suite", ok,
             f"symmetry {rep['symmetry_h_rel']:.2e}/{rep['symmetry_v_rel']:.2e}, "
             f"identity {rep['dual_identity_rel']:.2e}, contractions "
             f"{rep['contraction_h_max']:.6f}/{rep['contraction_v_max']:.6f}, "
             f"smoothing final {rep['smoothing_v_final']:.2e}, "
             f"V-over-H bound {rep['resolvent_v_over_h_max']:.3f} <= 2, "
             f"runtime {elapsed:.2f}s < 1s")


# ----------------------------------------------------------------------
# 2. Morrey suite
# ----------------------------------------------------------------------

def test_acceptance_02_morrey_suite(tmp_path):
    cfg = config_from_dict({
        "experiment": {"kind": "morrey-suite"},
        "triple": {"dim": 3, "grid_points": 96, "box_length": 2.0},
        "admissibility": {"r": 2.5, "rho0": 0.6, "n_radii": 4},
        "reports": {"lpq_p": 8.0, "lpq_power": 0.5,
                    "stable_power": 1.0 / 3.0, "second_grid": 48},
    })
    start = time.time()
    rep = run_morrey_suite(cfg, tmp_path)
    elapsed = time.time() - start
    ok = (rep["const_norm_rel_err"] < 1e-12
          and rep["origin_ladder_spread"] <= 0.10
          and rep["lpq_bound_ok"] and rep["lpq_hats_nonincreasing"]
          and rep["lpq_reconstruction_exact"]
          and rep["fitted_n_two_grid_rel"] <= 0.25
          and elapsed < 30.0)
    announce(2, "Morrey suite", ok,
             f"const-norm err {rep['const_norm_rel_err']:.2e}, origin ladder "
             f"spread {rep['origin_ladder_spread']*100:.1f}% <= 10%, split "
             f"bound fitted {max(rep['lpq_bound_fitted']):.4f} <= "
             f"{rep['lpq_bound_limit']:.4f}, two-grid drift "
             f"{rep['fitted_n_two_grid_rel']*100:.1f}% <= 25%, "
             f"runtime {elapsed:.1f}s < 30s")


# ----------------------------------------------------------------------
# 3. squared-norm identity suite
# ----------------------------------------------------------------------

def test_acceptance_03_ito_suite(tmp_path):
    cfg = config_from_dict({
        "experiment": {"kind": "ito-suite"},
        "noise": {"dt": 1e-2, "t_final": 1.0, "n_paths": 1000, "seed": 0},
        "reports": {"u0": 0.3, "rate": 1.0},
    })
    start = time.time()
    rep = run_ito_suite(cfg, tmp_path)
    elapsed = time.time() - start
    ok = (abs(rep["halving_ratio"] - 0.5) <= 0.30 * 0.5
          and rep["martingale_identity_residual"] <= 1e-2 * 1.0
          and elapsed < 10.0)
    announce(3, "squared-norm identity suite", ok,
             f"mean max-residual {rep['mean_max_residual']:.3e} -> "
             f"{rep['mean_max_residual_half_dt']:.3e}, halving ratio "
             f"{rep['halving_ratio']:.3f} in [0.35, 0.65], driftless identity "
             f"residual {rep['martingale_identity_residual']:.2e} = O(dt), "
             f"runtime {elapsed:.1f}s < 10s")


# ----------------------------------------------------------------------
# 4. deterministic exactness
# ----------------------------------------------------------------------

def test_acceptance_04_heat_exactness():
    triple = SpectralTriple(dim=1, grid_points_per_axis=128,
                            box_length=2 * np.pi, order=1)
    x = triple.mesh()[0]
    ops = ev.OperatorPair.from_symbol(triple, -triple.xi_squared)
    prob = ev.EvolutionProblem(triple, ops, u0=np.sin(x))
    dt = 1e-3
    noise = ev.NoiseModel(n_channels=0, dt=dt, steps=1000, seed=0)
    traj = ev.solve(prob, noise, n_paths=1)
    err = float(np.abs(traj.states[-1, 0] - np.exp(-1.0) * np.sin(x)).max())
    ok = err <= 5 * dt
    announce(4, "deterministic exactness", ok,
             f"max error {err:.3e} <= 5*dt = {5*dt:.1e} "
             f"(spectrally exact in space)")


# ----------------------------------------------------------------------
# 5. exact moving-bump benchmark
# ----------------------------------------------------------------------

def test_acceptance_05_gaussian_benchmark():
    rep = spde.gaussian_benchmark(dim=1, box_length=24.0, grid_points=256,
                                  times=[0.5, 1.0, 2.0], seed=3)
    l2_rel = max(abs(r["l2_sq"] / r["l2_sq_exact"] - 1.0) for r in rep["rows"])
    fit_ok = (abs(rep["l2_power_fit"] - 0.5) < 1e-2
              and abs(rep["grad_power_fit"] + 0.5) < 1e-2)
    mass_ok = max(r["boundary_mass"] for r in rep["rows"]) < 1e-8

    ladder = []
    for m, box, steps in [(128, 16.0, 192), (256, 20.0, 384), (512, 24.0, 768)]:
        tri = SpectralTriple(dim=1, grid_points_per_axis=m, box_length=box,
                             order=1)
        bench = spde.ExactGaussianBenchmark(tri, np.array([0.5, 1.0, 2.0]),
                                            seed=3, drift_amplitude=0.5)
        ladder.append(spde.benchmark_weak_residual(bench, 0.5, 2.0, steps))
    monotone = bool(np.all(np.diff(ladder) < 0))

    sharp = rep["sharpness"]
    ok = (l2_rel < 1e-4 and fit_ok and mass_ok and monotone
          and sharp["estimate_violated"] and sharp["rhs"] == 0.0
          and sharp["lhs_sup"] > 0)
    announce(5, "exact moving-bump benchmark", ok,
             f"|u_t|^2 rel err {l2_rel:.2e} < 1e-4 at t in (0.5,1,2), fitted "
             f"exponents {rep['l2_power_fit']:.4f}/{rep['grad_power_fit']:.4f} "
             f"(targets 0.5/-0.5), residual ladder "
             f"{[f'{r:.4f}' for r in ladder]} monotone={monotone}, sharpness "
             f"exhibit lhs={sharp['lhs_sup']:.3f} > rhs=0")


# ----------------------------------------------------------------------
# 6. energy-estimate stability battery
# ----------------------------------------------------------------------

def energy_config(grid=16, dt=0.02, n_paths=100):
    return {
        "experiment": {"kind": "energy"},
        "triple": {"dim": 3, "grid_points": grid, "box_length": 1.0},
        "admissibility": {"r": 2.5, "rho0": 0.25, "n_radii": 3},
        "coefficients": {"delta": 0.5, "a": 1.0, "sigma": 0.5,
                         "b": {"singular": {"kind": "inverse_norm_drift",
                                            "amplitude": 0.04,
                                            "support": 0.2}}},
        "forcing": {"h": {"kind": "gaussian_bump", "width": 0.3,
                          "amplitude": 2.0},
                    "f": {"kind": "gaussian_bump", "width": 0.3,
                          "amplitude": 0.5}},
        "initial": {"kind": "gaussian_bump", "width": 0.3, "amplitude": 1.0},
        "noise": {"channels": 3, "dt": dt, "t_final": 0.2, "seed": 7,
                  "n_paths": n_paths},
        "reports": {"smallness_threshold": 0.1, "alpha_lambda": 0.02},
    }


@pytest.fixture(scope="module")
def energy_battery(tmp_path_factory):
    out = tmp_path_factory.mktemp("energy")
    reports = {}
    reports["base"] = run_energy(config_from_dict(energy_config()), out)
    reports["dt_half"] = run_energy(
        config_from_dict(energy_config(dt=0.01)), out)
    reports["grid_double"] = run_energy(
        config_from_dict(energy_config(grid=32)), out)
    reports["paths_double"] = run_energy(
        config_from_dict(energy_config(n_paths=200)), out)
    return reports


def test_acceptance_06_energy_ratio_stability(energy_battery, tmp_path):
    base = energy_battery["base"]["ratio"]
    drifts = {name: abs(energy_battery[name]["ratio"] / base - 1.0)
              for name in ("dt_half", "grid_double", "paths_double")}
    stable = max(drifts.values()) <= 0.15

    # quadratic data-scale invariance on one shared noise record
    cfg = config_from_dict(energy_config(n_paths=20))
    (triple, _p, _s, _co, asm, forcing, u0, noise,
     n_paths) = __import__("spdelab.runner", fromlist=["x"])._assembled_from_config(cfg)
    weights = asm.weights(noise.dt, noise.steps, lam=0.02)
    traj1 = ev.solve(asm.problem(u0, forcing), noise, n_paths=n_paths,
                     settings=ev.SolveSettings(store_states=False))
    rep1 = spde.l2_energy_report(traj1, asm, forcing, weights)
    scaled = forcing.scaled(3.0)
    traj3 = ev.solve(asm.problem(3.0 * u0, scaled), noise, n_paths=n_paths,
                     settings=ev.SolveSettings(store_states=False))
    rep3 = spde.l2_energy_report(traj3, asm, scaled, weights)
    scale_drift = abs(rep3.ratio / rep1.ratio - 1.0)

    ok = (np.isfinite(base) and base > 0 and stable and scale_drift <= 1e-9
          and energy_battery["base"]["n_paths"] >= 100)
    announce(6, "energy-estimate stability", ok,
             f"ratio {base:.4f}; variation dt/grid/ensemble = "
             f"{drifts['dt_half']*100:.1f}%/{drifts['grid_double']*100:.1f}%/"
             f"{drifts['paths_double']*100:.1f}% (all <= 15%), scale "
             f"invariance {scale_drift:.2e} <= 1e-9")


# ----------------------------------------------------------------------
# 7. approximation-stability chain
# ----------------------------------------------------------------------

def test_acceptance_07_mollification_chain(tmp_path):
    raw = {
        "experiment": {"kind": "stability"},
        "triple": {"dim": 3, "grid_points": 16, "box_length": 0.1875},
        "admissibility": {"r": 2.5, "rho0": 0.09, "n_radii": 3},
        "coefficients": {"delta": 0.5, "a": 1.0, "sigma": 0.5,
                         "b": {"singular": {"kind": "inverse_norm_drift",
                                            "amplitude": 0.04,
                                            "support": 0.07},
                               "bounded": {"kind": "gaussian_bump",
                                           "amplitude": 3.0, "width": 0.05,
                                           "component": 0}}},
        "forcing": {"h": {"kind": "gaussian_bump", "width": 0.03,
                          "l2_normalize": 3.0}},
        "initial": {"kind": "gaussian_bump", "width": 0.04, "amplitude": 1.0},
        "noise": {"channels": 3, "dt": 0.02, "t_final": 0.24, "seed": 5,
                  "n_paths": 8},
        "stability": {"epsilons": [2.0**-n for n in range(1, 7)]},
        "reports": {"smallness_threshold": 0.1},
    }
    from spdelab.runner import run_stability
    rep = run_stability(config_from_dict(raw), tmp_path)
    ratios = np.asarray(rep["ratios"])
    ok = rep["monotone_decreasing"] and ratios.max() <= 0.9
    announce(7, "approximation-stability chain", ok,
             f"D_n = {[f'{d:.3e}' for d in rep['d_values']]}, ratios "
             f"{[f'{r:.3f}' for r in ratios]} (max "
             f"{ratios.max():.3f} <= 0.9), hats "
             f"{[f'{h:.4f}' for h in rep['mollified_hats']]} <= base "
             f"{rep['base_hat']:.4f}")


# ----------------------------------------------------------------------
# 8. Lp / W1p suites
# ----------------------------------------------------------------------

def lp_config(dt=0.01, n_paths=256, order=1):
    kind = "lp" if order == 1 else "w1p"
    return {
        "experiment": {"kind": kind},
        "triple": {"dim": 1, "grid_points": 64, "box_length": 8.0,
                   "order": order},
        "coefficients": {"delta": 0.5, "a": 1.0, "sigma": 0.5},
        "forcing": {"h": {"kind": "gaussian_bump", "width": 0.6,
                          "amplitude": 1.0}},
        "initial": {"kind": "gaussian_bump", "width": 0.8, "amplitude": 1.0},
        "noise": {"channels": 1, "dt": dt, "t_final": 0.5, "seed": 9,
                  "n_paths": n_paths},
        "reports": {"p": 4.0, "alpha_lambda": 0.2, "lambda_c": 0.2},
    }


def test_acceptance_08_lp_and_w1p_suites(tmp_path):
    from spdelab.runner import run_lp, run_w1p
    details = []
    ok = True
    for order, runner in ((1, run_lp), (2, run_w1p)):
        base = runner(config_from_dict(lp_config(order=order)), tmp_path)
        half = runner(config_from_dict(lp_config(dt=0.005, order=order)),
                      tmp_path)
        douple = runner(config_from_dict(lp_config(n_paths=512, order=order)),
                        tmp_path)
        drift = max(abs(half["ratio"] / base["ratio"] - 1.0),
                    abs(douple["ratio"] / base["ratio"] - 1.0))

        # p-homogeneity on one noise record
        cfg1 = config_from_dict(lp_config(n_paths=16, order=order))
        from spdelab.runner import _assembled_from_config
        (triple, _p, _s, coeffs, asm, forcing, u0, noise,
         n_paths) = _assembled_from_config(cfg1, order=order)
        if order == 1:
            weights = spde.lp_weight_recipe(coeffs, noise.dt, noise.steps,
                                            lam=0.2)
            report_fun = spde.lp_report
        else:
            weights = spde.w1p_weight_recipe(coeffs, noise.dt, noise.steps,
                                             c_const=0.2)
            report_fun = spde.w1p_report
        t1 = ev.solve(asm.problem(u0, forcing), noise, n_paths=n_paths)
        r1 = report_fun(t1, 4.0, weights, forcing)
        t3 = ev.solve(asm.problem(3.0 * u0, forcing.scaled(3.0)), noise,
                      n_paths=n_paths)
        r3 = report_fun(t3, 4.0, weights, forcing.scaled(3.0))
        scale_drift = abs(r3.ratio / r1.ratio - 1.0)

        name = "Lp" if order == 1 else "W1p"
        ok = ok and np.isfinite(base["ratio"]) and base["ratio"] > 0 \
            and drift <= 0.15 and scale_drift <= 1e-9
        details.append(f"{name}: ratio {base['ratio']:.4f}, refinement drift "
                       f"{drift*100:.1f}% <= 15%, scale invariance "
                       f"{scale_drift:.2e} <= 1e-9")
    announce(8, "Lp / W1p suites", ok, "; ".join(details))


# ----------------------------------------------------------------------
# 9. supercriticality probe
# ----------------------------------------------------------------------

def test_acceptance_09_supercriticality_probe(tmp_path):
    raw = {
        "experiment": {"kind": "gaussian-benchmark"},
        "benchmark": {"dim": 1, "box_length": 20.0, "grid_points": 512,
                      "times": [0.5, 1.0, 1.5], "seed": 3,
                      "ratio": {"t0": 0.05, "t1": 1.5, "n_eval": 60,
                                "alpha": 0.2}},
    }
    cfg = config_from_dict(raw)
    ladder = [0.5, 0.625, 0.75, 0.875, 1.0]
    rep = sweep_experiment(cfg, "kappa", ladder, tmp_path)
    col = rep["headers"].index("estimate_ratio")
    ratios = [row[col] for row in rep["rows"]]
    monotone = all(a < b for a, b in zip(ratios, ratios[1:]))
    growth = ratios[-1] / ratios[0]
    ok = monotone and growth >= 10.0
    announce(9, "supercriticality probe", ok,
             f"estimate-ratio column {[f'{r:.1f}' for r in ratios]} along "
             f"amplitude {ladder}; monotone={monotone}, last/first = "
             f"{growth:.1f}x >= 10x")


# ----------------------------------------------------------------------
# 10. reproducibility
# ----------------------------------------------------------------------

def test_acceptance_10_reproducibility(tmp_path):
    cfg_dict = energy_config(n_paths=20)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run_experiment(config_from_dict(cfg_dict), out1)
    run_experiment(config_from_dict(cfg_dict), out2)
    same_report = (out1 / "report.json").read_bytes() == \
        (out2 / "report.json").read_bytes()
    same_csv = (out1 / "norms.csv").read_bytes() == \
        (out2 / "norms.csv").read_bytes()
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    m1.pop("wall_clock"), m2.pop("wall_clock")
    ok = same_report and same_csv and m1 == m2
    announce(10, "reproducibility", ok,
             f"report.json byte-identical={same_report}, norms.csv "
             f"byte-identical={same_csv}, manifests agree modulo wall clock")
