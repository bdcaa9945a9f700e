import math

import numpy as np
import pytest

from spdelab import evolution as ev
from spdelab import fields, spde
from spdelab.morrey import AdmissibleField, BallSampler, MorreyParams
from spdelab.triple import SpectralTriple


@pytest.fixture(scope="module")
def cube():
    return SpectralTriple(dim=3, grid_points_per_axis=16, box_length=1.0, order=1)


@pytest.fixture(scope="module")
def sampler(cube):
    return BallSampler.from_rho0(cube, 0.25, n_radii=3)


@pytest.fixture(scope="module")
def params():
    return MorreyParams(r=2.5, rho0=0.25)


def singular_drift(cube, sampler, params, amplitude=0.04):
    bf = fields.inverse_norm_drift(cube, amplitude=amplitude, support=0.2)
    return AdmissibleField.from_split(bf, np.zeros_like(bf), params, sampler)


@pytest.fixture(scope="module")
def coeffs(cube, sampler, params):
    c_field = 0.02 * fields.gaussian_bump(cube, width=0.15)
    beta_f = fields.inverse_norm_drift(cube, amplitude=0.01, support=0.15)
    return spde.SPDECoefficients(
        dim=3, n_channels=3, delta=0.5, a=1.0, sigma=0.5,
        b=singular_drift(cube, sampler, params),
        beta=AdmissibleField.from_split(beta_f, np.zeros_like(beta_f),
                                        params, sampler),
        c=AdmissibleField.from_split(c_field, np.zeros_like(c_field),
                                     params, sampler),
    )


def grid_pair(triple, f, g):
    return float((np.asarray(f) * np.asarray(g)).sum()
                 * triple.spacing**triple.dim)


def test_parabolicity_check(cube):
    good = spde.SPDECoefficients(dim=3, n_channels=3, delta=0.5, a=1.0,
                                 sigma=np.sqrt(1.5))
    assert good.check_parabolicity(cube)["ok"]
    bad = spde.SPDECoefficients(dim=3, n_channels=3, delta=0.5, a=1.0,
                                sigma=1.5)
    assert not bad.check_parabolicity(cube)["ok"]


def test_assembly_pairing_matches_direct_quadrature(cube, sampler, params, coeffs):
    """The dual pairing of the assembled operator must equal the direct
    quadrature of the bilinear form (u, b.Dv + c v - shift v) - (Du, a Dv
    + beta v) on smooth fields."""
    asm = spde.assemble_L2(coeffs, cube, theta=0.2)
    rng = np.random.default_rng(0)
    shift = asm.n0 / params.rho0**2 + coeffs.delta
    for _ in range(3):
        spec = rng.standard_normal(cube.spectral_shape) \
            + 1j * rng.standard_normal(cube.spectral_shape)
        spec *= np.exp(-cube.xi_squared / 60.0)
        u = cube.ifft(spec)
        v = fields.gaussian_bump(cube, width=0.15 + 0.1 * rng.random())
        lhs = float(cube.h_inner(u, asm.ops.apply_A(0, v)))
        grad_u = cube.gradient(u)
        grad_v = cube.gradient(v)
        bulk = np.einsum("i...,i...->...", coeffs.b.singular_at(0), grad_v) \
            + coeffs.c.singular_at(0) * v - shift * v
        flux = grad_v + coeffs.beta.singular_at(0) * v
        rhs = grid_pair(cube, u, bulk) \
            - sum(grid_pair(cube, grad_u[i], flux[i]) for i in range(3))
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)

        # noise channels: B^k v = sigma^{ik} D_i v + nu^{Mk} v with nu = 0
        bv = asm.ops.apply_B(0, v)
        for k in range(3):
            assert np.abs(bv[k] - 0.5 * grad_v[k]).max() < 1e-12

        # lower-order dual channel <u, a* v> = (Du, beta^B v)
        beta_b = coeffs.beta.bounded_at(0)
        lhs2 = float(cube.h_inner(u, asm.lower.apply_astar(0, v)))
        rhs2 = sum(grid_pair(cube, grad_u[i], beta_b[i] * v) for i in range(3))
        assert lhs2 == pytest.approx(rhs2, rel=1e-9, abs=1e-12)


def test_assembly_shift_and_margin_examples(cube):
    # no lower-order terms, unit a, no noise: per-mode margin
    # 2(|xi|^2 + shift)/(1 + |xi|^2) >= 2 min(1, shift)
    co = spde.SPDECoefficients(dim=3, n_channels=0, delta=0.5, a=1.0, sigma=0.0)
    asm = spde.assemble_L2(co, cube)
    shift = asm.n0 / 1.0 + co.delta  # rho0 defaults to 1 without splits
    assert asm.delta_est >= 2.0 * min(1.0, shift) - 1e-9

    co2 = spde.SPDECoefficients(dim=3, n_channels=3, delta=0.5, a=1.0,
                                sigma=math.sqrt(2.0 - 0.5))
    asm2 = spde.assemble_L2(co2, cube)
    # margin tends to delta from above as modes grow
    assert co2.delta <= asm2.delta_est <= co2.delta * 1.15


def test_assembly_margin_at_least_quarter_delta(cube, coeffs):
    asm = spde.assemble_L2(coeffs, cube, theta=0.2)
    assert asm.delta_est >= coeffs.delta / 4.0
    assert asm.gate["passed"]


def test_smallness_gate_refuses_large_hats(cube, sampler, params):
    big = singular_drift(cube, sampler, params, amplitude=2.0)
    co = spde.SPDECoefficients(dim=3, n_channels=0, delta=0.5, a=1.0,
                               sigma=0.0, b=big)
    with pytest.raises(ev.HypothesesUnmet) as err:
        spde.assemble_L2(co, cube, theta=0.1)
    assert "gate" in str(err.value)


def test_w12_assembly_symbols_and_forcing_norm():
    tri = SpectralTriple(dim=1, grid_points_per_axis=64, box_length=2 * np.pi,
                         order=2)
    co = spde.SPDECoefficients(dim=1, n_channels=1, delta=0.5, a=1.0,
                               sigma=0.5)
    asm = spde.assemble_W12(co, tri)
    assert asm.delta_est >= co.delta / 2.0

    # dual-channel mapping of the plain forcing: |F|_V* = |f|_L2
    rng = np.random.default_rng(5)
    spec = rng.standard_normal(tri.spectral_shape) \
        + 1j * rng.standard_normal(tri.spectral_shape)
    spec *= np.exp(-tri.xi_squared / 50.0)
    f = tri.ifft(spec)
    assert float(tri.vstar_norm(f)) == pytest.approx(float(tri.l2_norm(f)),
                                                     rel=1e-12)

    # constant sigma: B^k v collapses to sigma D_k v exactly
    v = np.sin(tri.mesh()[0])
    bv = asm.ops.apply_B(0, v)
    assert np.abs(bv[0] - 0.5 * tri.derivative(0, v)).max() < 1e-12


def test_w12_solution_matches_l2_solution_for_heat():
    tri1 = SpectralTriple(dim=1, grid_points_per_axis=64,
                          box_length=2 * np.pi, order=1)
    tri2 = SpectralTriple(dim=1, grid_points_per_axis=64,
                          box_length=2 * np.pi, order=2)
    co1 = spde.SPDECoefficients(dim=1, n_channels=1, delta=0.5, a=1.0, sigma=0.5)
    asm1 = spde.assemble_L2(co1, tri1)
    asm2 = spde.assemble_W12(co1, tri2)
    u0 = np.sin(tri1.mesh()[0])
    h = fields.gaussian_bump(tri1, width=0.5)[None]
    noise = ev.NoiseModel(n_channels=1, dt=5e-3, steps=100, seed=13)
    t1 = ev.solve(asm1.problem(u0, spde.SPDEForcing(h=h)), noise, n_paths=2)
    t2 = ev.solve(asm2.problem(u0, spde.SPDEForcing(h=h)), noise, n_paths=2)
    scale = np.abs(t1.states).max()
    assert np.abs(t1.states - t2.states).max() < 1e-8 * scale


def test_w12_requires_beta_zero_and_derivative_fields(cube, sampler, params):
    tri2 = SpectralTriple(dim=3, grid_points_per_axis=16, box_length=1.0,
                          order=2)
    beta_f = fields.inverse_norm_drift(cube, amplitude=0.01, support=0.15)
    co = spde.SPDECoefficients(
        dim=3, n_channels=3, delta=0.5, a=1.0, sigma=0.5,
        beta=AdmissibleField.from_split(beta_f, np.zeros_like(beta_f),
                                        params, sampler))
    with pytest.raises(ev.HypothesesUnmet):
        spde.assemble_W12(co, tri2)

    a_var = np.eye(3).reshape(3, 3, 1, 1, 1) \
        * (1.0 + 0.05 * fields.gaussian_bump(cube, width=0.2))
    co2 = spde.SPDECoefficients(dim=3, n_channels=3, delta=0.5, a=a_var,
                                sigma=0.5)
    with pytest.raises(ValueError):
        spde.assemble_W12(co2, tri2)


def test_mollifier_kernel_and_consistency(cube):
    k = spde.mollifier_kernel(cube, 0.3)
    assert k.sum() == pytest.approx(1.0, rel=1e-12)
    smooth = fields.gaussian_bump(cube, width=0.3)
    khat = np.fft.rfftn(spde.mollifier_kernel(cube, 0.11))
    conv = spde._convolve(cube, khat, smooth)
    # kernel consistency: smooth fields move by O(eps) in sup norm
    assert np.abs(conv - smooth).max() < 0.2 * np.abs(smooth).max()
    with pytest.raises(ValueError):
        spde.mollifier_kernel(cube, 1.5)


def test_mollify_problem_cutoffs_and_certificates(cube, sampler, params, coeffs):
    u0 = fields.gaussian_bump(cube, width=0.15)
    h = fields.gaussian_bump(cube, width=0.1)[None] * np.ones((3,) + cube.shape)
    forcing = spde.SPDEForcing(h=h, f=20.0 * fields.gaussian_bump(cube, width=0.3))
    co_e, forc_e, u0_e = spde.mollify_problem(coeffs, forcing, u0, cube,
                                              eps=0.25, sampler=sampler)
    assert co_e.b.hat <= coeffs.b.hat + 1e-13
    assert co_e.beta.hat <= coeffs.beta.hat + 1e-13
    assert co_e.c.hat <= coeffs.c.hat + 1e-13
    # bounded envelopes never grow
    assert np.all(co_e.b.bar <= coeffs.b.bar + 1e-13)
    assert np.abs(u0_e - u0).max() < np.abs(u0).max()
    # the f channel has |f|_L2 = 20 |bump| > 1/eps = 4, so it is cut
    assert not forc_e.f.any()
    assert forc_e.h.any()


def test_weak_residual_stationary_balance():
    tri = SpectralTriple(dim=1, grid_points_per_axis=64, box_length=2 * np.pi)
    x = tri.mesh()[0]
    u = np.sin(x)
    # du = (Lap u + f) dt with f = sin stays at u: drift cancels exactly
    states = np.stack([u, u, u])
    times = np.array([0.0, 0.1, 0.2])
    dW = np.zeros((2, 0))
    eye = np.ones((1, 1) + tri.shape)

    def co(_n):
        return {"a": eye, "sigma": None, "b": None, "beta": None,
                "c": None, "nu": None}

    def fo(_n):
        return {"f": np.sin(x)}

    res = spde.weak_residual(states, times, dW, tri, co, fo)
    assert res <= 1e-10


def test_weak_residual_heat_self_convergence():
    tri = SpectralTriple(dim=1, grid_points_per_axis=64, box_length=2 * np.pi)
    x = tri.mesh()[0]
    co_def = spde.SPDECoefficients(dim=1, n_channels=1, delta=0.5, a=1.0,
                                   sigma=0.5)
    asm = spde.assemble_L2(co_def, tri)
    h = fields.gaussian_bump(tri, width=0.5)[None]
    eye = np.ones((1, 1) + tri.shape)
    sig = 0.5 * np.ones((1, 1) + tri.shape)
    res = {}
    for dt in (2e-2, 1e-2):
        steps = int(round(0.4 / dt))
        noise = ev.NoiseModel(n_channels=1, dt=dt, steps=steps, seed=2)
        traj = ev.solve(asm.problem(np.sin(x), spde.SPDEForcing(h=h)), noise,
                        n_paths=1)
        dW = noise.increments_block(1)[:, 0, :]

        def co(_n):
            return {"a": eye, "sigma": sig, "b": None, "beta": None,
                    "c": None, "nu": None}

        def fo(_n):
            return {"h": h}

        res[dt] = spde.weak_residual(traj.states[:, 0], traj.times, dW, tri,
                                     co, fo)
    assert res[1e-2] < 0.75 * res[2e-2]


def test_gaussian_benchmark_closed_forms():
    rep = spde.gaussian_benchmark(dim=1, box_length=24.0, grid_points=256,
                                  times=[0.5, 1.0, 2.0], seed=3)
    for row in rep["rows"]:
        assert abs(row["l2_sq"] / row["l2_sq_exact"] - 1.0) < 1e-6
        assert abs(row["grad_sq"] / row["grad_sq_exact"] - 1.0) < 1e-6
    assert rep["rows"][1]["l2_sq"] == pytest.approx(math.sqrt(math.pi),
                                                    rel=1e-6)
    assert abs(rep["l2_power_fit"] - 0.5) < 1e-3
    assert abs(rep["grad_power_fit"] + 0.5) < 1e-3
    assert rep["sharpness"]["estimate_violated"]
    assert rep["sharpness"]["rhs"] == 0.0


def test_gaussian_benchmark_mass_guard():
    with pytest.raises(ValueError):
        spde.gaussian_benchmark(dim=1, box_length=3.0, grid_points=64,
                                times=[2.0], seed=3)


def test_gaussian_benchmark_drift_hat_d3():
    rep = spde.gaussian_benchmark(dim=3, box_length=20.0, grid_points=64,
                                  times=[0.5, 1.0], seed=5)
    assert rep["drift_hat"] is not None and np.isfinite(rep["drift_hat"])
    assert abs(rep["l2_power_fit"] - 1.5) < 1e-2


def heat_lp_setup(scale=1.0, dt=0.02, n_paths=32, seed=9):
    tri = SpectralTriple(dim=1, grid_points_per_axis=64, box_length=8.0)
    co = spde.SPDECoefficients(dim=1, n_channels=1, delta=0.5, a=1.0, sigma=0.5)
    asm = spde.assemble_L2(co, tri)
    u0 = scale * fields.gaussian_bump(tri, width=0.8)
    h = scale * fields.gaussian_bump(tri, width=0.6)[None]
    forcing = spde.SPDEForcing(h=h)
    steps = int(round(0.5 / dt))
    noise = ev.NoiseModel(n_channels=1, dt=dt, steps=steps, seed=seed)
    traj = ev.solve(asm.problem(u0, forcing), noise, n_paths=n_paths)
    weights = spde.lp_weight_recipe(co, dt, steps, lam=0.2)
    return traj, weights, forcing, co


def test_lp_report_zero_data():
    tri = SpectralTriple(dim=1, grid_points_per_axis=32, box_length=4.0)
    co = spde.SPDECoefficients(dim=1, n_channels=0, delta=0.5, a=1.0, sigma=0.0)
    asm = spde.assemble_L2(co, tri)
    noise = ev.NoiseModel(n_channels=0, dt=0.02, steps=10, seed=0)
    traj = ev.solve(asm.problem(np.zeros(tri.shape), spde.SPDEForcing()),
                    noise, n_paths=1)
    weights = spde.lp_weight_recipe(co, 0.02, 10)
    rep = spde.lp_report(traj, 4.0, weights, spde.SPDEForcing())
    assert rep.ratio == 0.0


def test_lp_report_scale_invariance():
    traj1, w1, f1, _ = heat_lp_setup(1.0)
    rep1 = spde.lp_report(traj1, 4.0, w1, f1)
    traj3, w3, f3, _ = heat_lp_setup(3.0)
    rep3 = spde.lp_report(traj3, 4.0, w3, f3)
    p = 4.0
    assert rep3.lhs == pytest.approx(3.0**p * rep1.lhs, rel=1e-9)
    assert rep3.rhs == pytest.approx(3.0**p * rep1.rhs, rel=1e-9)
    assert rep3.ratio == pytest.approx(rep1.ratio, rel=1e-9)
    assert np.isfinite(rep1.ratio) and rep1.ratio > 0


def test_lp_report_rejects_small_p():
    traj, weights, forcing, _co = heat_lp_setup(1.0, n_paths=2)
    with pytest.raises(ValueError):
        spde.lp_report(traj, 2.0, weights, forcing)


def w1p_setup(scale=1.0, dt=0.02, n_paths=16, seed=9):
    tri = SpectralTriple(dim=1, grid_points_per_axis=64, box_length=8.0,
                         order=2)
    co = spde.SPDECoefficients(dim=1, n_channels=1, delta=0.5, a=1.0, sigma=0.5)
    asm = spde.assemble_W12(co, tri)
    u0 = scale * fields.gaussian_bump(tri, width=0.8)
    h = scale * fields.gaussian_bump(tri, width=0.6)[None]
    forcing = spde.SPDEForcing(h=h)
    steps = int(round(0.5 / dt))
    noise = ev.NoiseModel(n_channels=1, dt=dt, steps=steps, seed=seed)
    traj = ev.solve(asm.problem(u0, forcing), noise, n_paths=n_paths)
    weights = spde.w1p_weight_recipe(co, dt, steps, c_const=0.2)
    return traj, weights, forcing


def test_w1p_report_scale_invariance_and_domination():
    traj, weights, forcing = w1p_setup(1.0)
    rep = spde.w1p_report(traj, 4.0, weights, forcing)
    traj3, weights3, forcing3 = w1p_setup(3.0)
    rep3 = spde.w1p_report(traj3, 4.0, weights3, forcing3)
    assert rep3.ratio == pytest.approx(rep.ratio, rel=1e-9)

    # the W1p sup term dominates the plain Lp sup term pathwise
    lp_weights = ev.WeightProcess(weights.alpha, weights.dt)
    rep_lp = spde.lp_report(traj, 4.0, lp_weights, forcing)
    assert rep.lhs_terms["sup_w1p"] >= rep_lp.lhs_terms["sup_lp"]


def test_w1p_report_rejects_divergence_forcing():
    traj, weights, _ = w1p_setup(1.0, n_paths=2)
    bad = spde.SPDEForcing(frf=np.ones((1,) + traj.triple.shape))
    with pytest.raises(ev.HypothesesUnmet):
        spde.w1p_report(traj, 4.0, weights, bad)


def test_half_admissible_variant_flags_f(cube, sampler):
    tri2 = SpectralTriple(dim=3, grid_points_per_axis=16, box_length=1.0,
                          order=2)
    p_half = MorreyParams(r=2.5, rho0=0.25, alpha=0.5)
    c_field = 0.01 * fields.inverse_norm_scalar(cube, 1.0, power=2.0,
                                                support=0.2)
    dc = np.zeros((3,) + cube.shape)
    co = spde.SPDECoefficients(
        dim=3, n_channels=3, delta=0.5, a=1.0, sigma=0.5,
        c=AdmissibleField.from_split(c_field, np.zeros_like(c_field),
                                     p_half, sampler),
        d_c=AdmissibleField.from_split(dc, dc.copy(), p_half, sampler))
    asm = spde.assemble_W12(co, tri2, half_admissible_c=True)
    noise = ev.NoiseModel(n_channels=3, dt=0.02, steps=5, seed=0)
    forcing = spde.SPDEForcing(f=fields.gaussian_bump(cube, width=0.2))
    traj = ev.solve(asm.problem(np.zeros(cube.shape), forcing), noise,
                    n_paths=1)
    weights = asm.weights(noise.dt, noise.steps)
    rep = spde.w12_energy_report(traj, asm, forcing, weights)
    assert any("hypotheses unmet" in f for f in rep.flags)
    assert "f_l2_sq" not in rep.rhs_terms
