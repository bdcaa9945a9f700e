"""Experiment dispatch: build problems from a config, run them, and emit
machine-readable results (JSON report + CSV series + a run manifest).

Exit-code taxonomy (used by the CLI): 0 success, 1 unreadable or invalid
config, 2 hypothesis-gate refusal, 3 numerical divergence.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import evolution as ev
from . import fields as flds
from . import spde
from .config import ConfigError, ExperimentConfig, config_from_dict, override
from .evolution import NoiseModel, SolverDivergence, SolveSettings
from .morrey import (AdmissibleField, BallSampler, MorreyParams, check_weak_ld,
                     decompose_lpq, lpq_split_constant, morrey_norm,
                     unit_ball_volume)
from .triple import SpectralTriple


# ----------------------------------------------------------------------
# serialization helpers
# ----------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and (obj != obj):
        return None
    return obj


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(x)) if isinstance(x, (float, np.floating))
                              else str(x) for x in row) + "\n")


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seed: int
    wall_clock: float
    files: list

    def write(self, outdir: Path) -> None:
        write_json(outdir / "manifest.json", {
            "config_hash": self.config_hash, "code_version": self.code_version,
            "seed": self.seed, "wall_clock": self.wall_clock,
            "files": sorted(self.files)})


# ----------------------------------------------------------------------
# field construction from config tables
# ----------------------------------------------------------------------

def build_triple(cfg: ExperimentConfig, order: int | None = None) -> SpectralTriple:
    tri = cfg.section("triple", required=True)
    return SpectralTriple(dim=int(tri.get("dim", 1)),
                          grid_points_per_axis=int(tri.get("grid_points", 64)),
                          box_length=float(tri.get("box_length", 1.0)),
                          order=order if order is not None else int(tri.get("order", 1)))


def build_scalar_field(spec: dict | None, triple: SpectralTriple) -> np.ndarray | None:
    if spec is None:
        return None
    kind = spec.get("kind", "none")
    if kind == "none":
        return None
    amp = float(spec.get("amplitude", 1.0))
    if kind == "constant":
        out = flds.constant_field(triple, amp)
    elif kind == "gaussian_bump":
        out = flds.gaussian_bump(triple, amplitude=amp,
                                 width=float(spec.get("width", 0.2)),
                                 center=spec.get("center"))
    elif kind == "sin_mode":
        out = flds.sin_mode(triple, mode=int(spec.get("mode", 1)),
                            amplitude=amp, axis=int(spec.get("axis", 0)))
    elif kind == "band_limited":
        out = amp * flds.band_limited(triple,
                                      max_mode=int(spec.get("max_mode", 4)),
                                      decay=float(spec.get("decay", 0.1)))
    elif kind == "inverse_norm_scalar":
        out = flds.inverse_norm_scalar(triple, amplitude=amp,
                                       power=float(spec.get("power", 1.0)),
                                       support=spec.get("support"))
    elif kind == "file":
        out, _meta = flds.load_field(spec["path"])
    else:
        raise ConfigError(f"scalar channel cannot use field kind '{kind}'")
    return _normalized(out, spec, triple)


def _normalized(values: np.ndarray, spec: dict, triple: SpectralTriple) -> np.ndarray:
    target = spec.get("l2_normalize")
    if target is None:
        return values
    mag = values if values.ndim == triple.dim else np.sqrt((values**2).sum(axis=0))
    norm = float(triple.l2_norm(mag))
    if norm == 0:
        raise ConfigError("cannot l2-normalize a zero field")
    return values * (float(target) / norm)


def build_vector_field(spec: dict | None, triple: SpectralTriple,
                       n_comp: int) -> np.ndarray | None:
    if spec is None:
        return None
    kind = spec.get("kind", "none")
    if kind == "none":
        return None
    if kind == "inverse_norm_drift":
        out = flds.inverse_norm_drift(triple,
                                      amplitude=float(spec.get("amplitude", 1.0)),
                                      support=spec.get("support"))
        if out.shape[0] != n_comp:
            raise ConfigError("drift profile has d components; channel wants "
                              f"{n_comp}")
        return _normalized(out, spec, triple)
    if kind == "file":
        out, _meta = flds.load_field(spec["path"])
        return _normalized(out.reshape((n_comp,) + triple.shape), spec, triple)
    scalar = build_scalar_field(spec, triple)
    out = np.zeros((n_comp,) + triple.shape)
    comp = int(spec.get("component", 0))
    out[comp] = scalar
    if spec.get("replicate", False):
        out = np.broadcast_to(scalar, (n_comp,) + triple.shape).copy()
    return _normalized(out, spec, triple)


def build_morrey_params(cfg: ExperimentConfig, triple: SpectralTriple,
                        alpha: float = 1.0) -> tuple[MorreyParams, BallSampler]:
    adm = cfg.section("admissibility")
    rho0 = float(adm.get("rho0", min(1.0, triple.box_length / 2.0 * 0.96)))
    r = float(adm.get("r", min(float(triple.dim), 2.5)))
    params = MorreyParams(r=r, rho0=rho0, alpha=alpha)
    sampler = BallSampler.from_rho0(triple, rho0,
                                    n_radii=int(adm.get("n_radii", 3)),
                                    center_stride=int(adm.get("center_stride", 1)))
    return params, sampler


def build_admissible(chan: dict | None, triple: SpectralTriple,
                     params: MorreyParams, sampler: BallSampler,
                     n_comp: int | None) -> AdmissibleField | None:
    """Channel table with optional ``singular`` and ``bounded`` subtables;
    a bare field table counts as fully singular."""
    if not chan:
        return None
    sing_spec = chan.get("singular", chan if "kind" in chan else None)
    bnd_spec = chan.get("bounded")
    build = (lambda s: build_scalar_field(s, triple)) if n_comp is None else \
        (lambda s: build_vector_field(s, triple, n_comp))
    sing = build(sing_spec)
    bnd = build(bnd_spec)
    if sing is None and bnd is None:
        return None
    shape = sing.shape if sing is not None else bnd.shape
    if sing is None:
        sing = np.zeros(shape)
    if bnd is None:
        bnd = np.zeros(shape)
    return AdmissibleField.from_split(sing, bnd, params, sampler)


def build_coefficients(cfg: ExperimentConfig, triple: SpectralTriple,
                       params: MorreyParams, sampler: BallSampler,
                       n_channels: int) -> spde.SPDECoefficients:
    co = cfg.section("coefficients")
    delta = float(co.get("delta", 0.5))
    a = co.get("a", 1.0)
    sigma = co.get("sigma", 0.0)
    half_c = bool(co.get("half_admissible_c", False))
    c_params = MorreyParams(r=params.r, rho0=params.rho0,
                            alpha=0.5 if half_c else 1.0)
    return spde.SPDECoefficients(
        dim=triple.dim, n_channels=n_channels, delta=delta,
        a=a if np.isscalar(a) else np.asarray(a, float),
        sigma=sigma if np.isscalar(sigma) else np.asarray(sigma, float),
        b=build_admissible(co.get("b"), triple, params, sampler, triple.dim),
        beta=build_admissible(co.get("beta"), triple, params, sampler, triple.dim),
        c=build_admissible(co.get("c"), triple, c_params, sampler, None),
        nu=build_admissible(co.get("nu"), triple, params, sampler, n_channels),
    )


def build_forcing(cfg: ExperimentConfig, triple: SpectralTriple,
                  n_channels: int) -> spde.SPDEForcing:
    fo = cfg.section("forcing")
    h_spec = fo.get("h")
    h = None
    if h_spec is not None and h_spec.get("kind", "none") != "none":
        if h_spec.get("kind") == "file":
            h, _ = flds.load_field(h_spec["path"])
            h = h.reshape((n_channels,) + triple.shape)
        else:
            prof = build_scalar_field(dict(h_spec, l2_normalize=None), triple)
            h = np.broadcast_to(prof, (n_channels,) + triple.shape).copy()
        h = _normalized(h, h_spec, triple)
    return spde.SPDEForcing(
        frf=build_vector_field(fo.get("frf"), triple, triple.dim),
        f=build_scalar_field(fo.get("f"), triple),
        g=build_scalar_field(fo.get("g"), triple),
        h=h)


def build_noise(cfg: ExperimentConfig) -> tuple[NoiseModel, int]:
    noi = cfg.section("noise")
    dt = float(noi.get("dt", 1e-2))
    t_final = float(noi.get("t_final", 1.0))
    steps = int(round(t_final / dt))
    model = NoiseModel(n_channels=int(noi.get("channels", 0)), dt=dt,
                       steps=steps, seed=int(noi.get("seed", 0)))
    return model, int(noi.get("n_paths", 1))


def build_settings(cfg: ExperimentConfig, store_states: bool) -> SolveSettings:
    sch = cfg.section("scheme")
    return SolveSettings(inner_tol=float(sch.get("inner_tol", 1e-10)),
                         inner_max_iter=int(sch.get("inner_max_iter", 400)),
                         divergence_guard=float(sch.get("divergence_guard", 1e12)),
                         store_states=store_states)


def _smooth_random_fields(triple: SpectralTriple, count: int, seed: int):
    rng = np.random.Generator(np.random.Philox(key=[seed, 77]))
    xi_char_sq = (2.0 * np.pi / triple.box_length
                  * max(1, triple.grid_points_per_axis // 8)) ** 2
    out = []
    for _ in range(count):
        coeffs = rng.standard_normal(triple.spectral_shape) \
            + 1j * rng.standard_normal(triple.spectral_shape)
        coeffs *= np.exp(-triple.xi_squared / xi_char_sq)
        f = triple.ifft(coeffs)
        out.append(f / max(float(triple.h_norm(f)), 1e-300))
    return out


# ----------------------------------------------------------------------
# experiments
# ----------------------------------------------------------------------

def run_resolvent_suite(cfg: ExperimentConfig, outdir: Path) -> dict:
    triple = build_triple(cfg)
    rep = cfg.section("reports")
    seed = int(cfg.get("noise", "seed", 0))
    n_random = int(rep.get("n_random", 100))
    lambdas = [float(x) for x in rep.get("lambdas", [1.0, 10.0, 1000.0])]
    randoms = _smooth_random_fields(triple, n_random, seed)

    sym_h = sym_v = dual = 0.0
    for f, g in zip(randoms[:8], randoms[8:16]):
        rf, rg = triple.resolvent(2.0, f), triple.resolvent(2.0, g)
        hh = float(triple.h_inner(rf, g)), float(triple.h_inner(f, rg))
        vv = float(triple.v_inner(rf, g)), float(triple.v_inner(f, rg))
        sym_h = max(sym_h, abs(hh[0] - hh[1]) / max(abs(hh[0]), 1e-300))
        sym_v = max(sym_v, abs(vv[0] - vv[1]) / max(abs(vv[0]), 1e-300))
        lhs = float(triple.v_inner(rf, g))
        rhs = float(triple.h_inner(f - 2.0 * rf, g))
        dual = max(dual, abs(lhs - rhs) / max(abs(lhs), 1e-300))

    contraction_h = contraction_v = bound_2h = 0.0
    for f in randoms:
        hn, vn = triple.norms(f)
        for lam in lambdas:
            rf = triple.resolvent(lam, f)
            h2, v2 = triple.norms(lam * rf)
            contraction_h = max(contraction_h, float(h2 / hn))
            contraction_v = max(contraction_v, float(v2 / vn))
            bound_2h = max(bound_2h, float(triple.v_norm(rf) / hn))

    band = flds.band_limited(triple, max_mode=int(rep.get("band_max_mode", 4)),
                             decay=float(rep.get("band_decay", 0.1)))
    band = band / float(triple.v_norm(band))
    series = []
    for j in range(int(rep.get("smoothing_max_j", 20)) + 1):
        lam = 2.0**j
        res = band - lam * triple.resolvent(lam, band)
        series.append((j, lam, float(triple.h_norm(res)), float(triple.v_norm(res))))
    h_seq = [s[2] for s in series]
    v_seq = [s[3] for s in series]

    g_rec = triple.multiply_symbol(
        (2.0 * triple.h_symbol + triple.v_symbol) / triple.h_symbol, band)
    surrogate = float(triple.v_norm(triple.resolvent(2.0, g_rec) - band)
                      / triple.v_norm(band))

    fp = randoms[0]
    lam = 3.0
    fp_res = float(triple.h_norm(lam * triple.resolvent(lam, fp) - fp))

    write_csv(outdir / "smoothing.csv", ["j", "lambda", "h_residual", "v_residual"],
              series)
    report = {
        "triple": {"dim": triple.dim, "grid_points": triple.grid_points_per_axis,
                   "box_length": triple.box_length, "order": triple.order},
        "symmetry_h_rel": sym_h, "symmetry_v_rel": sym_v,
        "dual_identity_rel": dual,
        "contraction_h_max": contraction_h, "contraction_v_max": contraction_v,
        "resolvent_v_over_h_max": bound_2h,
        "smoothing_v_final": v_seq[-1], "smoothing_h_final": h_seq[-1],
        "smoothing_monotone": bool(np.all(np.diff(v_seq) <= 1e-16)
                                   and np.all(np.diff(h_seq) <= 1e-16)),
        "density_surrogate_rel": surrogate,
        "fixed_point_shrinks": bool(fp_res < float(triple.h_norm(fp))),
        "passed": bool(sym_h < 1e-12 and sym_v < 1e-12 and dual < 1e-12
                       and contraction_h <= 1 + 1e-12
                       and contraction_v <= 1 + 1e-12
                       and bound_2h <= 2 + 1e-12 and v_seq[-1] < 1e-6
                       and surrogate < 1e-10),
    }
    return report


def run_morrey_suite(cfg: ExperimentConfig, outdir: Path) -> dict:
    triple = build_triple(cfg)
    params, sampler = build_morrey_params(cfg, triple)
    rep = cfg.section("reports")
    d = triple.dim

    const_val = float(rep.get("const_value", 3.0))
    lam1 = MorreyParams(r=params.r, rho0=params.rho0, lambda_exp=1.0)
    norm_const = morrey_norm(flds.constant_field(triple, const_val), lam1, sampler)
    const_rel = abs(norm_const - params.rho0 * const_val) / (params.rho0 * const_val)

    inv = flds.inverse_norm_scalar(triple, 1.0)
    ladder = []
    for rho in sampler.radii:
        m = sampler.ball_mean_at_origin(inv**2, rho)
        ladder.append((rho, rho * np.sqrt(m)))
    vals = np.array([v for _, v in ladder])
    spread = float(vals.max() / vals.min() - 1.0)

    p_exp = float(rep.get("lpq_p", 8.0))
    test_power = float(rep.get("lpq_power", 0.5))
    bfield = flds.inverse_norm_scalar(triple, 1.0, power=test_power)[None]
    hats = []
    bounds = []
    for n_hat in (1.0, 2.0, 4.0, 8.0):
        split = decompose_lpq(bfield, p_exp, n_hat, triple, sampler)
        hats.append(split.hat)
        bounds.append(lpq_split_constant(split, sampler, p_exp, n_hat))
    recon = decompose_lpq(bfield, p_exp, 1.0, triple, sampler)
    recon_exact = bool(np.array_equal(recon.singular + recon.bounded, bfield))

    stable_field = flds.inverse_norm_scalar(triple, 1.0,
                                            power=float(rep.get("stable_power", 1.0 / 3.0)))
    n_ref = lpq_split_constant(
        decompose_lpq(stable_field[None], p_exp, 1.0, triple, sampler),
        sampler, p_exp, 1.0)
    m2 = int(rep.get("second_grid", triple.grid_points_per_axis // 2))
    tri2 = SpectralTriple(dim=d, grid_points_per_axis=m2,
                          box_length=triple.box_length, order=1)
    samp2 = BallSampler.from_rho0(tri2, params.rho0, n_radii=len(sampler.radii))
    stable2 = flds.inverse_norm_scalar(tri2, 1.0,
                                       power=float(rep.get("stable_power", 1.0 / 3.0)))
    n_coarse = lpq_split_constant(
        decompose_lpq(stable2[None], p_exp, 1.0, tri2, samp2),
        samp2, p_exp, 1.0)
    two_grid_rel = abs(n_ref - n_coarse) / max(n_ref, 1e-300)

    weak = check_weak_ld(inv, sampler, r=params.r,
                         radius=min(1.0, triple.box_length / 2.0), min_nodes=30)

    write_csv(outdir / "origin_ladder.csv", ["rho", "scaled_mean"], ladder)
    return {
        "const_norm_rel_err": const_rel,
        "origin_ladder_spread": spread,
        "origin_ladder_vs_sqrt3": float(np.abs(vals / np.sqrt(3.0) - 1.0).max()),
        "lpq_hats": hats,
        "lpq_hats_nonincreasing": bool(np.all(np.diff(hats) <= 1e-15)),
        "lpq_bound_fitted": bounds,
        "lpq_bound_limit": 1.0 / unit_ball_volume(d),
        "lpq_bound_ok": bool(max(bounds) <= 1.0 / unit_ball_volume(d) + 1e-9),
        "lpq_reconstruction_exact": recon_exact,
        "fitted_n_fine": n_ref, "fitted_n_coarse": n_coarse,
        "fitted_n_two_grid_rel": two_grid_rel,
        "weak_ld_constant": weak.weak_constant,
        "weak_ld_levels": list(weak.level_values),
        "weak_bound_fitted_n": weak.fitted_bound_constant,
        "passed": bool(const_rel < 1e-12 and spread <= 0.10
                       and np.all(np.diff(hats) <= 1e-15)
                       and two_grid_rel <= 0.25),
    }


def run_ito_suite(cfg: ExperimentConfig, outdir: Path) -> dict:
    noi = cfg.section("noise")
    dt = float(noi.get("dt", 1e-2))
    t_final = float(noi.get("t_final", 1.0))
    n_paths = int(noi.get("n_paths", 1000))
    seed = int(noi.get("seed", 0))
    u0_val = float(cfg.get("reports", "u0", 0.3))
    rate = float(cfg.get("reports", "rate", 1.0))

    triple = SpectralTriple(dim=1, grid_points_per_axis=2, box_length=1.0, order=1)
    ones = np.ones(triple.shape)

    def battery(dt_run):
        steps = int(round(t_final / dt_run))
        ops = ev.OperatorPair.from_symbol(
            triple, np.full(triple.spectral_shape, -rate))
        prob = ev.EvolutionProblem(triple, ops, u0=u0_val * ones,
                                   forcing=ev.ForcingSet(h=ones[None]))
        noise = NoiseModel(n_channels=1, dt=dt_run, steps=steps, seed=seed)
        traj = ev.solve(prob, noise, n_paths=n_paths)
        res = ev.ito_residual(traj, prob)
        var_final = float((traj.h_norms[-1] ** 2).mean())
        return float(res.mean()), float(res.max()), var_final

    mean_res, max_res, var_final = battery(dt)
    mean_res2, max_res2, _ = battery(dt / 2.0)
    ratio = mean_res2 / mean_res

    # driftless channel: the squared increments cancel the realized bracket
    steps = int(round(t_final / dt))
    ops0 = ev.OperatorPair.from_symbol(triple, np.zeros(triple.spectral_shape))
    prob0 = ev.EvolutionProblem(triple, ops0, u0=0.0 * ones,
                                forcing=ev.ForcingSet(h=ones[None]))
    noise0 = NoiseModel(n_channels=1, dt=dt, steps=steps, seed=seed + 1)
    traj0 = ev.solve(prob0, noise0, n_paths=min(n_paths, 200))
    mart_res = float(ev.ito_residual(traj0, prob0).max())

    var_exact = u0_val**2 * np.exp(-2 * rate * t_final) \
        + (1 - np.exp(-2 * rate * t_final)) / (2 * rate)
    write_csv(outdir / "residuals.csv",
              ["dt", "mean_max_residual", "max_max_residual"],
              [(dt, mean_res, max_res), (dt / 2.0, mean_res2, max_res2)])
    return {
        "dt": dt, "n_paths": n_paths,
        "mean_max_residual": mean_res, "mean_max_residual_half_dt": mean_res2,
        "halving_ratio": ratio,
        "martingale_identity_residual": mart_res,
        "var_final": var_final, "var_exact": float(var_exact),
        "var_rel_err": abs(var_final - var_exact) / var_exact,
        "passed": bool(abs(ratio - 0.5) <= 0.15 and mart_res <= 10 * dt),
    }


def _assembled_from_config(cfg: ExperimentConfig, order: int = 1):
    triple = build_triple(cfg, order=order)
    alpha_c = 0.5 if cfg.get("coefficients", "half_admissible_c", False) else 1.0
    params, sampler = build_morrey_params(cfg, triple, alpha=alpha_c)
    noise, n_paths = build_noise(cfg)
    coeffs = build_coefficients(cfg, triple, params, sampler, noise.n_channels)
    theta = float(cfg.get("reports", "smallness_threshold", 0.1))
    if order == 1:
        asm = spde.assemble_L2(coeffs, triple, theta=theta)
    else:
        asm = spde.assemble_W12(coeffs, triple, theta=theta,
                                half_admissible_c=bool(
                                    cfg.get("coefficients", "half_admissible_c",
                                            False)))
    forcing = build_forcing(cfg, triple, noise.n_channels)
    u0 = build_scalar_field(cfg.section("initial") or None, triple)
    if u0 is None:
        u0 = np.zeros(triple.shape)
    return triple, params, sampler, coeffs, asm, forcing, u0, noise, n_paths


def run_energy(cfg: ExperimentConfig, outdir: Path) -> dict:
    (triple, _params, _sampler, _coeffs, asm, forcing, u0, noise,
     n_paths) = _assembled_from_config(cfg)
    settings = build_settings(cfg, store_states=False)
    prob = asm.problem(u0, forcing)
    traj = ev.solve(prob, noise, n_paths=n_paths, settings=settings)
    if traj.diverged.all():
        raise SolverDivergence("all paths crossed the divergence guard")
    lam = float(cfg.get("reports", "alpha_lambda", 1.0))
    weights = asm.weights(noise.dt, noise.steps, lam=lam)
    report = spde.l2_energy_report(traj, asm, forcing, weights)
    traj.dump_norms_csv(outdir / "norms.csv", weights)
    out = report.to_dict()
    out.update({"n0": asm.n0, "delta_est": asm.delta_est, "gate": asm.gate,
                "inner_iterations": traj.inner_iterations})
    return out


def run_stability(cfg: ExperimentConfig, outdir: Path) -> dict:
    (triple, _params, sampler, coeffs, asm, forcing, u0, noise,
     n_paths) = _assembled_from_config(cfg)
    eps_list = [float(e) for e in cfg.get("stability", "epsilons", required=True)]
    settings = build_settings(cfg, store_states=True)
    base_prob = asm.problem(u0, forcing)
    probs = []
    hats = []
    for eps in eps_list:
        co_e, forc_e, u0_e = spde.mollify_problem(coeffs, forcing, u0, triple,
                                                  eps, sampler=sampler)
        hats.append(co_e.b.hat if co_e.b is not None else 0.0)
        asm_e = spde.assemble_L2(co_e, triple, n0=asm.n0,
                                 theta=float(cfg.get("reports",
                                                     "smallness_threshold", 0.1)))
        probs.append(asm_e.problem(u0_e, forc_e))
    table = ev.stability_experiment(base_prob, probs, noise, n_paths=n_paths,
                                    settings=settings)
    rows = [(eps, d, s, v) for eps, d, s, v in
            zip(eps_list, table.d_values, table.sup_terms, table.v_terms)]
    write_csv(outdir / "stability.csv",
              ["epsilon", "d_value", "sup_term", "v_term"], rows)
    ratios = table.ratios()
    return {
        "epsilons": eps_list, "d_values": list(table.d_values),
        "ratios": list(ratios), "mollified_hats": hats,
        "base_hat": coeffs.b.hat if coeffs.b is not None else 0.0,
        "monotone_decreasing": table.monotone_decreasing(),
        "max_ratio": float(ratios.max()) if ratios.size else 0.0,
        "passed": bool(table.monotone_decreasing()
                       and (ratios.size == 0 or ratios.max() <= 0.9)),
    }


def run_gaussian_benchmark(cfg: ExperimentConfig, outdir: Path) -> dict:
    ben = cfg.section("benchmark", required=True)
    dim = int(ben.get("dim", 1))
    times = [float(t) for t in ben.get("times", [0.5, 1.0, 2.0])]
    report = spde.gaussian_benchmark(
        dim=dim, box_length=float(ben.get("box_length", 24.0)),
        grid_points=int(ben.get("grid_points", 256)), times=times,
        seed=int(ben.get("seed", 3)),
        drift_amplitude=ben.get("drift_amplitude"),
        mass_tol=float(ben.get("mass_tol", 1e-8)))
    bench = report.pop("benchmark")

    levels = ben.get("residual_levels")
    if levels:
        t0, t1 = float(ben.get("residual_t0", times[0])), float(
            ben.get("residual_t1", times[-1]))
        ladder = []
        for m, box, steps in levels:
            tri = SpectralTriple(dim=dim, grid_points_per_axis=int(m),
                                 box_length=float(box), order=1)
            b2 = spde.ExactGaussianBenchmark(tri, np.asarray(times),
                                             seed=int(ben.get("seed", 3)),
                                             drift_amplitude=bench.drift_amplitude)
            ladder.append(spde.benchmark_weak_residual(b2, t0, t1, int(steps)))
        report["weak_residual_ladder"] = ladder
        report["weak_residual_monotone"] = bool(
            np.all(np.diff(ladder) < 0))

    ratio_cfg = ben.get("ratio")
    if ratio_cfg:
        report["estimate_ratio"] = exact_family_ratio(
            dim=dim, box_length=float(ben.get("box_length", 24.0)),
            grid_points=int(ben.get("grid_points", 256)),
            t0=float(ratio_cfg.get("t0", 0.05)),
            t1=float(ratio_cfg.get("t1", 1.5)),
            n_eval=int(ratio_cfg.get("n_eval", 60)),
            alpha=float(ratio_cfg.get("alpha", 0.2)),
            seed=int(ben.get("seed", 3)),
            drift_amplitude=bench.drift_amplitude)

    write_csv(outdir / "benchmark.csv",
              ["t", "l2_sq", "l2_sq_exact", "grad_sq", "grad_sq_exact",
               "boundary_mass"],
              [(r["t"], r["l2_sq"], r["l2_sq_exact"], r["grad_sq"],
                r["grad_sq_exact"], r["boundary_mass"]) for r in report["rows"]])
    report["passed"] = bool(
        max(abs(r["l2_sq"] / r["l2_sq_exact"] - 1.0) for r in report["rows"]) < 1e-4
        and abs(report["l2_power_fit"] - report["l2_power_expected"]) < 1e-2
        and abs(report["grad_power_fit"] - report["grad_power_expected"]) < 1e-2
        and report["sharpness"]["estimate_violated"])
    return report


def exact_family_ratio(dim: int, box_length: float, grid_points: int,
                       t0: float, t1: float, n_eval: int, alpha: float,
                       seed: int, drift_amplitude: float) -> float:
    """Weighted energy ratio of the exact moving-bump family over [t0, t1]
    against the data of the zero-initial problem restarted at t0 (the only
    nonzero right-hand side term is the restart norm)."""
    tri = SpectralTriple(dim=dim, grid_points_per_axis=grid_points,
                         box_length=box_length, order=1)
    times = np.linspace(t0, t1, n_eval)
    bench = spde.ExactGaussianBenchmark(tri, times, seed=seed,
                                        drift_amplitude=drift_amplitude)
    dts = np.diff(times)
    phi = np.concatenate([[0.0], np.cumsum(alpha * dts)])
    sup = vint = aint = 0.0
    for i, t in enumerate(times):
        u = bench.state(float(t))
        h2 = float(tri.l2_norm(u) ** 2)
        v2 = float(tri.v_norm(u) ** 2)
        w = float(np.exp(-2.0 * phi[i]))
        sup = max(sup, w * h2)
        if i < dts.size:
            vint += w * v2 * dts[i]
            aint += alpha * w * h2 * dts[i]
    rhs = float(tri.l2_norm(bench.state(t0)) ** 2)
    return (sup + vint + aint) / rhs


def run_lp(cfg: ExperimentConfig, outdir: Path) -> dict:
    (triple, _params, _sampler, coeffs, asm, forcing, u0, noise,
     n_paths) = _assembled_from_config(cfg)
    settings = build_settings(cfg, store_states=True)
    prob = asm.problem(u0, forcing)
    traj = ev.solve(prob, noise, n_paths=n_paths, settings=settings)
    p = float(cfg.get("reports", "p", required=True))
    lam = float(cfg.get("reports", "alpha_lambda", 1.0))
    weights = spde.lp_weight_recipe(coeffs, noise.dt, noise.steps, lam=lam)
    report = spde.lp_report(traj, p, weights, forcing)
    traj.dump_norms_csv(outdir / "norms.csv", weights)
    out = report.to_dict()
    out.update({"p": p, "n0": asm.n0, "delta_est": asm.delta_est})
    return out


def run_w1p(cfg: ExperimentConfig, outdir: Path) -> dict:
    (triple, _params, _sampler, coeffs, asm, forcing, u0, noise,
     n_paths) = _assembled_from_config(cfg, order=2)
    settings = build_settings(cfg, store_states=True)
    prob = asm.problem(u0, forcing)
    traj = ev.solve(prob, noise, n_paths=n_paths, settings=settings)
    p = float(cfg.get("reports", "p", required=True))
    c_const = float(cfg.get("reports", "lambda_c", 1.0))
    weights = spde.w1p_weight_recipe(coeffs, noise.dt, noise.steps,
                                     c_const=c_const)
    report = spde.w1p_report(traj, p, weights, forcing)
    traj.dump_norms_csv(outdir / "norms.csv", weights)
    out = report.to_dict()
    out.update({"p": p, "n0": asm.n0, "delta_est": asm.delta_est})
    return out


_RUNNERS = {
    "resolvent-suite": run_resolvent_suite,
    "morrey-suite": run_morrey_suite,
    "ito-suite": run_ito_suite,
    "energy": run_energy,
    "stability": run_stability,
    "gaussian-benchmark": run_gaussian_benchmark,
    "lp": run_lp,
    "w1p": run_w1p,
}


def run_experiment(cfg: ExperimentConfig, outdir=None) -> tuple[dict, RunManifest]:
    """Execute one experiment; returns the report dict and the manifest."""
    outdir = Path(outdir if outdir is not None else cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.time()
    if cfg.kind == "sweep":
        sw = cfg.section("sweep", required=True)
        report = sweep_experiment(cfg, sw.get("parameter"),
                                  sw.get("values"), outdir)
    else:
        runner = _RUNNERS.get(cfg.kind)
        if runner is None:
            raise ConfigError(f"unknown experiment kind '{cfg.kind}'")
        report = runner(cfg, outdir)
    write_json(outdir / "report.json", report)
    blob = cfg.source_bytes if cfg.source_bytes is not None \
        else json.dumps(_plain(cfg.raw), sort_keys=True).encode()
    manifest = RunManifest(
        config_hash=hashlib.sha256(blob).hexdigest(),
        code_version=__version__,
        seed=int(cfg.get("noise", "seed", cfg.get("benchmark", "seed", 0) or 0)),
        wall_clock=time.time() - start,
        files=[str(p.name) for p in sorted(outdir.iterdir())
               if p.name != "manifest.json"] + ["manifest.json"])
    manifest.write(outdir)
    return report, manifest


# ----------------------------------------------------------------------
# parameter sweeps
# ----------------------------------------------------------------------

_PARAM_ALIASES = {
    "dt": ("noise.dt", float),
    "n_paths": ("noise.n_paths", int),
    "grid_points": ("triple.grid_points", int),
    "channels": ("noise.channels", int),
    "seed": ("noise.seed", int),
    "kappa": ("benchmark.drift_amplitude", float),
    "epsilon": ("stability.epsilons", lambda v: [float(v)]),
    "drift_amplitude": ("coefficients.b.singular.amplitude", float),
}


def _flatten_numeric(prefix: str, obj, out: dict, depth: int = 0) -> None:
    if isinstance(obj, bool):
        out[prefix] = int(obj)
    elif isinstance(obj, (int, float)):
        out[prefix] = obj
    elif isinstance(obj, dict) and depth < 2:
        for k, v in obj.items():
            _flatten_numeric(f"{prefix}.{k}" if prefix else str(k), v, out,
                             depth + 1)
    elif isinstance(obj, (list, tuple)) and depth < 2 and len(obj) <= 8:
        for i, v in enumerate(obj):
            _flatten_numeric(f"{prefix}.{i}" if prefix else str(i), v, out,
                             depth + 1)


def sweep_experiment(cfg: ExperimentConfig, parameter: str, values,
                     outdir: Path) -> dict:
    if parameter is None or values is None:
        raise ConfigError("sweep needs sweep.parameter and sweep.values")
    if parameter in _PARAM_ALIASES:
        dotted, conv = _PARAM_ALIASES[parameter]
    elif "." in parameter:
        dotted, conv = parameter, float
    else:
        raise ConfigError(
            f"unknown sweep parameter '{parameter}'; aliases: "
            f"{', '.join(sorted(_PARAM_ALIASES))} (or a dotted config path)")
    base_kind = cfg.get("sweep", "base_kind", cfg.kind) if cfg.kind == "sweep" \
        else cfg.kind
    rows = []
    headers: list[str] = []
    points = []
    for value in values:
        raw = override(cfg.raw, dotted, conv(value))
        raw.setdefault("experiment", {})["kind"] = base_kind
        points.append((value, raw))

    workers = int(os.environ.get("SPDELAB_WORKERS", "1"))
    results = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_sweep_point, raw, str(outdir), i)
                    for i, (_v, raw) in enumerate(points)]
            results = [f.result() for f in futs]
    else:
        results = [_sweep_point(raw, str(outdir), i)
                   for i, (_v, raw) in enumerate(points)]

    for (value, _raw), headline in zip(points, results):
        flat = {}
        _flatten_numeric("", headline, flat)
        if not headers:
            headers = [parameter] + sorted(flat)
        rows.append([value] + [flat.get(k, "") for k in headers[1:]])
    write_csv(outdir / "sweep.csv", headers, rows)
    return {"parameter": parameter, "values": list(values),
            "base_kind": base_kind, "rows": rows, "headers": headers}


def _sweep_point(raw: dict, outdir: str, index: int) -> dict:
    cfg = config_from_dict(raw)
    sub = Path(outdir) / f"point_{index:03d}"
    sub.mkdir(parents=True, exist_ok=True)
    runner = _RUNNERS[cfg.kind]
    report = runner(cfg, sub)
    write_json(sub / "report.json", report)
    return report
