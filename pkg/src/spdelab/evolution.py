"""Semi-implicit solver and verification harness for linear evolution
equations

    du = (A u + a* u + a u + c u + f* + f + g) dt
         + sum_k (B^k u + b^k u + h^k) dW^k

posed on a spectral triple.  Operators act through their H-representation:
for a dual-valued output w the pairing <v, w> is computed as the H inner
product of v with the representative, which makes drift pairings, dual
norms and the implicit step all diagonal-friendly.

The time step treats A implicitly (the coercive, stiff part) and every
lower-order operator, forcing channel and noise term explicitly.  Expected
values are ensemble means over paths with independent counter-based noise
streams, so runs are reproducible bit-for-bit for a fixed (seed, config).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .triple import SpectralTriple


class SolverDivergence(RuntimeError):
    """Raised when the inner linear solve fails to reach tolerance."""


class HypothesesUnmet(RuntimeError):
    """Raised when a certification gate refuses a problem."""


# ----------------------------------------------------------------------
# operators
# ----------------------------------------------------------------------

BlockMap = Callable[[int, np.ndarray], np.ndarray]


def _zero_like(_t: int, u: np.ndarray) -> np.ndarray:
    return np.zeros_like(u)


@dataclass
class OperatorPair:
    """The coercive pair (A, B) plus its certified constants.

    ``apply_A`` maps (time index, state block) to the H-representation of
    A_t u; ``apply_B`` returns the noise channels stacked on a new leading
    axis of size ``n_channels``.  When A is a pure Fourier multiplier set
    ``a_symbol`` (half-spectrum grid) and the implicit step is exact; for a
    variable-coefficient A set ``a_symbol_part`` to the multiplier of its
    constant-coefficient part and ``apply_A_offdiag`` to the remainder, and
    the implicit step runs a preconditioned inner iteration.
    """

    apply_A: BlockMap
    apply_B: BlockMap | None = None
    n_channels: int = 0
    a_symbol: np.ndarray | None = None
    a_symbol_part: np.ndarray | None = None
    apply_A_offdiag: BlockMap | None = None
    delta: float | None = None
    k_bound: float | None = None
    k0_bound: float | None = None
    k1_bound: float | None = None

    @classmethod
    def from_symbol(cls, triple: SpectralTriple, symbol, n_channels: int = 0,
                    apply_B: BlockMap | None = None, **kw) -> "OperatorPair":
        symbol = np.asarray(symbol, dtype=float)

        def apply_A(_t, u):
            return triple.multiply_symbol(symbol, u)

        return cls(apply_A=apply_A, apply_B=apply_B, n_channels=n_channels,
                   a_symbol=symbol, **kw)


@dataclass
class LowerOrderSet:
    """Relatively bounded perturbations with their envelope series.

    Envelopes bound the operator norms per time step: |a_t| by ``a_env``
    (V->H), |a*_t| by ``astar_env`` (H->V*), |b_t| by ``b_env``
    (H->channels), |c_t| by ``c_env`` (H->H); each is a scalar or a series
    over time steps.  The discrete time integrals of the squared envelopes
    are the integrated bounds used by the weight recipes.
    """

    apply_a: BlockMap = _zero_like
    apply_astar: BlockMap = _zero_like
    apply_c: BlockMap = _zero_like
    apply_b: BlockMap | None = None
    a_env: np.ndarray | float = 0.0
    astar_env: np.ndarray | float = 0.0
    b_env: np.ndarray | float = 0.0
    c_env: np.ndarray | float = 0.0

    def env_series(self, name: str, n_steps: int) -> np.ndarray:
        env = getattr(self, name)
        arr = np.atleast_1d(np.asarray(env, dtype=float))
        if arr.size == 1:
            return np.full(n_steps, arr[0])
        if arr.size < n_steps:
            out = np.full(n_steps, arr[-1])
            out[: arr.size] = arr
            return out
        return arr[:n_steps]

    def integrated_bounds(self, dt: float, n_steps: int) -> dict:
        out = {}
        for name in ("a_env", "astar_env", "b_env"):
            s = self.env_series(name, n_steps)
            out[name] = float(np.sqrt((s**2).sum() * dt))
        out["c_env"] = float(self.env_series("c_env", n_steps).sum() * dt)
        return out


def _series_provider(data, n_steps: int):
    """Normalize a forcing channel: None, array over steps, static array,
    or callable of the step index."""
    if data is None:
        return None
    if callable(data):
        return data
    arr = np.asarray(data, dtype=float)

    def provider(n: int) -> np.ndarray:
        return arr

    return provider


@dataclass
class ForcingSet:
    """Forcing channels: dual-valued f*, H-valued f (weighted channel),
    H-valued g entering only through its time integral, and the noise
    channels h stacked on a leading axis."""

    f_star: object = None
    f: object = None
    g: object = None
    h: object = None

    def providers(self, n_steps: int):
        return (_series_provider(self.f_star, n_steps),
                _series_provider(self.f, n_steps),
                _series_provider(self.g, n_steps),
                _series_provider(self.h, n_steps))

    def scaled(self, c: float) -> "ForcingSet":
        def scale(ch):
            if ch is None:
                return None
            if callable(ch):
                return lambda n: c * np.asarray(ch(n), dtype=float)
            return c * np.asarray(ch, dtype=float)

        return ForcingSet(scale(self.f_star), scale(self.f),
                          scale(self.g), scale(self.h))


@dataclass
class NoiseModel:
    """Truncated cylindrical noise: K channels of independent increments
    Normal(0, dt), one counter-based stream per (seed, path)."""

    n_channels: int
    dt: float
    steps: int
    seed: int

    def increments(self, path: int) -> np.ndarray:
        gen = np.random.Generator(np.random.Philox(key=[self.seed, path]))
        return gen.standard_normal((self.steps, self.n_channels)) * np.sqrt(self.dt)

    def increments_block(self, n_paths: int) -> np.ndarray:
        """Shape (steps, n_paths, n_channels)."""
        if self.n_channels == 0:
            return np.zeros((self.steps, n_paths, 0))
        block = np.stack([self.increments(p) for p in range(n_paths)], axis=1)
        return block

    @property
    def horizon(self) -> float:
        return self.dt * self.steps


@dataclass
class WeightProcess:
    """Predictable exponential-weight data: alpha series, its cumulative
    integral phi (phi_0 = 0, left rectangles), and the certified bound on
    the total integral."""

    alpha: np.ndarray
    dt: float
    mu: np.ndarray | float = 0.0

    def __post_init__(self):
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if mu.size == 1:
            mu = np.full(self.alpha.shape, mu[0])
        self.alpha = self.alpha + 0.0  # defensive copy
        self._mu = mu

    @property
    def total(self) -> np.ndarray:
        return self.alpha

    def phi(self) -> np.ndarray:
        """phi at step times t_0..t_N (length steps+1), nondecreasing."""
        return np.concatenate([[0.0], np.cumsum(self.alpha * self.dt)])

    @property
    def sup_bound(self) -> float:
        return float((self.alpha * self.dt).sum())

    @classmethod
    def constant(cls, value: float, dt: float, n_steps: int) -> "WeightProcess":
        return cls(np.full(n_steps, float(value)), dt)

    @classmethod
    def from_lower_order(cls, lower: LowerOrderSet, delta: float, k0: float,
                         dt: float, n_steps: int, eps: float = 1e-6,
                         mu=0.0, k1: float = 0.0) -> "WeightProcess":
        """Smallest predictable weight meeting the certified thresholds

            (16/delta)|a_t|^2            <= alpha_t,
            (32/delta)|a*_t|^2 + (2056 + 32 K0^2/delta)|b_t|^2 + 4|c_t|
                                         <= alpha_t,

        plus a floor eps, the affine-noise floor k1^2 when the channel bound
        carries an extra K1|u|_H term, and an optional extra channel mu."""
        a = lower.env_series("a_env", n_steps)
        astar = lower.env_series("astar_env", n_steps)
        b = lower.env_series("b_env", n_steps)
        c = lower.env_series("c_env", n_steps)
        row1 = (16.0 / delta) * a**2
        row2 = (32.0 / delta) * astar**2 + (2056.0 + 32.0 * k0**2 / delta) * b**2 + 4.0 * c
        mu_arr = np.full(n_steps, 0.0) + np.asarray(mu, dtype=float)
        alpha = np.maximum(np.maximum(np.maximum(row1, row2), k1**2), eps) + mu_arr
        return cls(alpha, dt, mu=mu_arr)

    def meets_lower_order_thresholds(self, lower: LowerOrderSet, delta: float,
                                     k0: float, n_steps: int) -> bool:
        a = lower.env_series("a_env", n_steps)
        astar = lower.env_series("astar_env", n_steps)
        b = lower.env_series("b_env", n_steps)
        c = lower.env_series("c_env", n_steps)
        row1 = (16.0 / delta) * a**2
        row2 = (32.0 / delta) * astar**2 + (2056.0 + 32.0 * k0**2 / delta) * b**2 + 4.0 * c
        need = np.maximum(row1, row2)
        return bool(np.all(self.alpha >= need - 1e-12))


@dataclass
class EvolutionProblem:
    triple: SpectralTriple
    ops: OperatorPair
    u0: np.ndarray
    lower: LowerOrderSet = field(default_factory=LowerOrderSet)
    forcing: ForcingSet = field(default_factory=ForcingSet)

    def scaled_data(self, c: float) -> "EvolutionProblem":
        """Scale the data channels (u0 and all forcing) by c; operators fixed."""
        return EvolutionProblem(self.triple, self.ops, c * np.asarray(self.u0),
                                self.lower, self.forcing.scaled(c))


@dataclass
class SolveSettings:
    inner_tol: float = 1e-10
    inner_max_iter: int = 400
    divergence_guard: float = 1e12
    store_states: bool = True


@dataclass
class Trajectory:
    """Discrete record of an ensemble run."""

    triple: SpectralTriple
    dt: float
    times: np.ndarray
    h_norms: np.ndarray            # (steps+1, n_paths)
    v_norms: np.ndarray
    states: np.ndarray | None      # (steps+1, n_paths, *grid) when stored
    diverged: np.ndarray           # (n_paths,) bool
    noise: NoiseModel
    n_paths: int
    inner_iterations: int = 0

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def state_bytes(self) -> bytes:
        if self.states is None:
            raise ValueError("states were not stored for this run")
        return np.ascontiguousarray(self.states).tobytes()

    def dump_norms_csv(self, path, weights: WeightProcess | None = None) -> None:
        phi = weights.phi() if weights is not None else np.zeros(self.times.size)
        h_mean = self.h_norms.mean(axis=1)
        v_mean = self.v_norms.mean(axis=1)
        with open(path, "w") as fh:
            fh.write("step,t,h_norm,v_norm,phi\n")
            for n in range(self.times.size):
                fh.write(f"{n},{float(self.times[n])!r},{float(h_mean[n])!r},"
                         f"{float(v_mean[n])!r},{float(phi[n])!r}\n")

    def dump_states(self, path) -> None:
        from .fields import save_field
        if self.states is None:
            raise ValueError("states were not stored for this run")
        save_field(path, self.states.reshape((-1,) + self.triple.shape),
                   self.triple.box_length, n_times=self.times.size)


# ----------------------------------------------------------------------
# time stepping
# ----------------------------------------------------------------------

def _implicit_step(triple: SpectralTriple, ops: OperatorPair, n: int,
                   rhs: np.ndarray, dt: float,
                   settings: SolveSettings) -> tuple[np.ndarray, int]:
    if ops.a_symbol is not None:
        sym = 1.0 / (1.0 - dt * ops.a_symbol)
        return triple.multiply_symbol(sym, rhs), 0

    if ops.a_symbol_part is None or ops.apply_A_offdiag is None:
        raise SolverDivergence(
            "operator lacks both a full symbol and a symbol part for the "
            "implicit step")

    # preconditioned fixed point x <- P(rhs + dt*offdiag(x)) with
    # P = (I - dt*symbol_part)^-1; since x_new solves the preconditioner
    # system exactly, the true residual collapses to
    # dt*(offdiag(x_new) - offdiag(x)).
    pre = 1.0 / (1.0 - dt * ops.a_symbol_part)
    rhs_norm = max(float(np.max(triple.h_norm(rhs))), 1e-300)
    x = triple.multiply_symbol(pre, rhs)
    corr = ops.apply_A_offdiag(n, x)
    for it in range(settings.inner_max_iter):
        x_new = triple.multiply_symbol(pre, rhs + dt * corr)
        corr_new = ops.apply_A_offdiag(n, x_new)
        rel = dt * float(np.max(triple.h_norm(corr_new - corr))) / rhs_norm
        x, corr = x_new, corr_new
        if rel <= settings.inner_tol:
            return x, it + 1
    raise SolverDivergence(
        f"inner linear solve stalled at step {n}: relative residual {rel:.3e} "
        f"after {settings.inner_max_iter} iterations")


def solve(problem: EvolutionProblem, noise: NoiseModel, n_paths: int = 1,
          settings: SolveSettings | None = None) -> Trajectory:
    """Run the semi-implicit scheme over an ensemble of noise paths.

    Per step the update solves

        (I - dt A_{t_n}) u_{n+1} = u_n + dt (a* + a + c)(u_n)
            + dt (f*_n + f_n + g_n)
            + sum_k (B^k u_n + b^k u_n + h^k_n) dW^k_n.

    Paths whose H-norm crosses the divergence guard are flagged, frozen and
    excluded from reports; they never raise.
    """
    settings = settings or SolveSettings()
    triple = problem.triple
    dt = noise.dt
    steps = noise.steps
    grid = triple.shape

    u = np.broadcast_to(np.asarray(problem.u0, dtype=float),
                        (n_paths,) + grid).copy()
    f_star, f_chan, g_chan, h_chan = problem.forcing.providers(steps)
    lower = problem.lower
    ops = problem.ops

    dW = noise.increments_block(n_paths)      # (steps, n_paths, K)
    times = np.arange(steps + 1) * dt
    h_norms = np.empty((steps + 1, n_paths))
    v_norms = np.empty((steps + 1, n_paths))
    h_norms[0], v_norms[0] = triple.norms(u)
    states = None
    if settings.store_states:
        states = np.empty((steps + 1, n_paths) + grid)
        states[0] = u
    diverged = np.zeros(n_paths, dtype=bool)
    total_iters = 0

    for n in range(steps):
        expl = u.copy()
        drift = lower.apply_a(n, u) + lower.apply_astar(n, u) + lower.apply_c(n, u)
        for provider in (f_star, f_chan, g_chan):
            if provider is not None:
                drift = drift + provider(n)
        expl += dt * drift
        if noise.n_channels > 0:
            noise_fields = None
            if ops.apply_B is not None:
                noise_fields = ops.apply_B(n, u)
            if lower.apply_b is not None:
                extra = lower.apply_b(n, u)
                noise_fields = extra if noise_fields is None else noise_fields + extra
            if h_chan is not None:
                # deterministic forcing: insert the paths axis for broadcasting
                hval = np.asarray(h_chan(n), dtype=float)
                hval = hval.reshape((noise.n_channels, 1) + grid)
                noise_fields = hval if noise_fields is None else noise_fields + hval
            if noise_fields is not None:
                w = dW[n].T.reshape((noise.n_channels, n_paths) + (1,) * triple.dim)
                expl += (noise_fields * w).sum(axis=0)

        u_next, iters = _implicit_step(triple, ops, n, expl, dt, settings)
        total_iters += iters

        bad = ~np.isfinite(u_next.reshape(n_paths, -1)).all(axis=1)
        hn, vn = triple.norms(u_next)
        bad |= hn > settings.divergence_guard
        if bad.any():
            newly = bad & ~diverged
            diverged |= newly
            u_next[diverged] = u[diverged]
            hn = np.where(diverged, h_norms[n], hn)
            vn = np.where(diverged, v_norms[n], vn)
        u = u_next
        h_norms[n + 1], v_norms[n + 1] = hn, vn
        if states is not None:
            states[n + 1] = u

    return Trajectory(triple=triple, dt=dt, times=times, h_norms=h_norms,
                      v_norms=v_norms, states=states, diverged=diverged,
                      noise=noise, n_paths=n_paths,
                      inner_iterations=total_iters)


# ----------------------------------------------------------------------
# coercivity certification
# ----------------------------------------------------------------------

@dataclass
class CoercivityReport:
    delta_est: float
    worst: dict
    n_samples: int

    @property
    def certified(self) -> bool:
        return self.delta_est > 0


def _sample_fields(triple: SpectralTriple, n_random: int, seed: int):
    """Fourier cos/sin atoms across the spectrum plus random smooth mixes."""
    m = triple.grid_points_per_axis
    mesh = triple.mesh()
    out = [np.ones(triple.shape)]
    modes = sorted({k for k in (1, 2, 3, m // 4, m // 2 - 1) if 1 <= k <= m // 2 - 1})
    for k in modes:
        phase = 2.0 * np.pi * k / triple.box_length
        for axis in range(triple.dim):
            x = mesh[axis]
            out.append(np.cos(phase * x))
            out.append(np.sin(phase * x))
    # random mixes concentrated on the lower quarter of the spectrum
    xi_char_sq = (2.0 * np.pi / triple.box_length * max(1, m // 8)) ** 2
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    for _ in range(n_random):
        coeffs = rng.standard_normal(triple.spectral_shape) \
            + 1j * rng.standard_normal(triple.spectral_shape)
        coeffs *= np.exp(-triple.xi_squared / xi_char_sq)
        out.append(triple.ifft(coeffs))
    return out


def check_coercivity(ops: OperatorPair, triple: SpectralTriple,
                     samples: int = 16, times=(0,), seed: int = 0) -> CoercivityReport:
    """Estimate the dissipation margin

        delta_est = min over sampled v, t of
            -(2 <v, A_t v> + sum_k |B^k_t v|_H^2) / |v|_V^2.

    A positive value certifies the pair on the sampled battery; otherwise
    the worst sample is reported.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    fields = _sample_fields(triple, samples, seed)
    best = np.inf
    worst = {}
    for t in times:
        for idx, v in enumerate(fields):
            av = ops.apply_A(t, v)
            if not np.all(np.isfinite(av)):
                raise FloatingPointError(
                    f"operator pairing returned non-finite values on sample {idx}")
            quad = 2.0 * float(triple.h_inner(v, av))
            if ops.apply_B is not None and ops.n_channels:
                bv = ops.apply_B(t, v)
                quad += float((triple.h_norm(bv) ** 2).sum())
            vv = float(triple.v_norm(v)) ** 2
            if vv == 0.0:
                continue
            ratio = -quad / vv
            if ratio < best:
                best = ratio
                worst = {"time": t, "sample": idx, "ratio": ratio}
    return CoercivityReport(delta_est=float(best), worst=worst,
                            n_samples=len(fields) * len(tuple(times)))


def estimate_operator_bounds(ops: OperatorPair, triple: SpectralTriple,
                             samples: int = 12, times=(0,), seed: int = 1) -> dict:
    """Fitted operator norms: K with |A v|_V* <= K |v|_V and K0 with
    (sum_k |B^k v|^2)^(1/2) <= K0 |v|_V on the sample battery."""
    fields = _sample_fields(triple, samples, seed)
    k = k0 = 0.0
    for t in times:
        for v in fields:
            vn = float(triple.v_norm(v))
            if vn == 0:
                continue
            k = max(k, float(triple.vstar_norm(ops.apply_A(t, v))) / vn)
            if ops.apply_B is not None and ops.n_channels:
                bn = float(np.sqrt((triple.h_norm(ops.apply_B(t, v)) ** 2).sum()))
                k0 = max(k0, bn / vn)
    return {"k_bound": k, "k0_bound": k0}


# ----------------------------------------------------------------------
# squared-norm identity residual
# ----------------------------------------------------------------------

def ito_residual(traj: Trajectory, problem: EvolutionProblem,
                 max_paths: int | None = None) -> np.ndarray:
    """Residual of the discrete squared-norm identity along each path.

    R(t) accumulates |u_t|_H^2 minus the initial value, the drift pairings
    2 <u_{n+1}, A u_{n+1} + lower/forcing at u_n> dt, the realized quadratic
    variation of the noise increments, and the martingale pairing
    2 (u_n, dM_n)_H.  Returns max_t |R(t)| per path.
    """
    if traj.states is None:
        raise ValueError("ito_residual needs stored states")
    triple = problem.triple
    dt = traj.dt
    steps = traj.n_steps
    n_paths = traj.n_paths if max_paths is None else min(max_paths, traj.n_paths)
    states = traj.states[:, :n_paths]
    dW = traj.noise.increments_block(n_paths)

    f_star, f_chan, g_chan, h_chan = problem.forcing.providers(steps)
    lower = problem.lower
    ops = problem.ops

    r = np.zeros((steps + 1, n_paths))
    acc = np.zeros(n_paths)
    h0_sq = traj.h_norms[0, :n_paths] ** 2
    for n in range(steps):
        u_n = states[n]
        u_next = states[n + 1]
        drift = ops.apply_A(n, u_next)
        drift = drift + lower.apply_a(n, u_n) + lower.apply_astar(n, u_n) \
            + lower.apply_c(n, u_n)
        for provider in (f_star, f_chan, g_chan):
            if provider is not None:
                drift = drift + provider(n)
        acc += 2.0 * dt * triple.h_inner(u_next, drift)

        if traj.noise.n_channels > 0:
            noise_fields = None
            if ops.apply_B is not None:
                noise_fields = ops.apply_B(n, u_n)
            if lower.apply_b is not None:
                extra = lower.apply_b(n, u_n)
                noise_fields = extra if noise_fields is None else noise_fields + extra
            if h_chan is not None:
                hval = np.asarray(h_chan(n), dtype=float)
                hval = hval.reshape((traj.noise.n_channels, 1) + triple.shape)
                noise_fields = hval if noise_fields is None else noise_fields + hval
            if noise_fields is not None:
                w = dW[n].T.reshape((traj.noise.n_channels, n_paths)
                                    + (1,) * triple.dim)
                dM = (noise_fields * w).sum(axis=0)
                acc += triple.h_norm(dM) ** 2
                acc += 2.0 * triple.h_inner(u_n, dM)
        r[n + 1] = traj.h_norms[n + 1, :n_paths] ** 2 - h0_sq - acc
    return np.abs(r).max(axis=0)


# ----------------------------------------------------------------------
# weighted energy report
# ----------------------------------------------------------------------

@dataclass
class EstimateReport:
    """Both sides of a weighted energy estimate with the observed ratio."""

    lhs_terms: dict
    rhs_terms: dict
    ratio: float
    n_paths: int
    dt: float
    flags: list
    stderr: dict = field(default_factory=dict)

    @property
    def lhs(self) -> float:
        return float(sum(self.lhs_terms.values()))

    @property
    def rhs(self) -> float:
        return float(sum(self.rhs_terms.values()))

    def to_dict(self) -> dict:
        return {"lhs_terms": self.lhs_terms, "rhs_terms": self.rhs_terms,
                "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio,
                "n_paths": self.n_paths, "dt": self.dt, "flags": self.flags,
                "stderr": self.stderr}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _mean_and_stderr(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0.0, 0.0
    mean = float(values.mean())
    if values.size == 1:
        return mean, 0.0
    return mean, float(values.std(ddof=1) / np.sqrt(values.size))


def _ratio(lhs: float, rhs: float) -> float:
    if lhs == 0.0 and rhs == 0.0:
        return 0.0
    if rhs == 0.0:
        return float("inf")
    return lhs / rhs


def energy_report(traj: Trajectory, problem: EvolutionProblem,
                  weights: WeightProcess, delta: float | None = None,
                  k0: float | None = None) -> EstimateReport:
    """Evaluate the weighted second-moment estimate on the ensemble.

    LHS: mean of sup_t |u_t|_H^2 e^{-2 phi_t}, of the weighted V-energy
    integral, and of the alpha-weighted H integral.  RHS: mean |u_0|_H^2,
    the weighted data integral |f*|_V*^2 + alpha^{-1} |f|_H^2 + |h|^2, and
    the squared weighted time-L1 norm of g.  The ratio is their quotient;
    an analogous inequality with an unquantified constant is the certified
    statement, so the ratio is reported, not asserted.
    """
    triple = problem.triple
    steps = traj.n_steps
    dt = traj.dt
    phi = weights.phi()
    alpha = weights.alpha
    keep = ~traj.diverged
    flags = []
    if (~keep).sum():
        flags.append(f"excluded {int((~keep).sum())} diverged paths")
    if delta is not None and k0 is not None:
        if not weights.meets_lower_order_thresholds(problem.lower, delta, k0, steps):
            flags.append("hypotheses unmet: alpha below lower-order thresholds")

    w2 = np.exp(-2.0 * phi)[:, None]
    h_sq = traj.h_norms[:, keep] ** 2
    v_sq = traj.v_norms[:, keep] ** 2
    sup_term = (h_sq * w2).max(axis=0)
    v_term = (v_sq * w2)[:-1].sum(axis=0) * dt
    alpha_term = (h_sq[:-1] * w2[:-1] * alpha[:, None]).sum(axis=0) * dt

    lhs_terms = {}
    stderr = {}
    for name, series in (("sup_h_sq", sup_term), ("v_energy", v_term),
                         ("alpha_h_sq", alpha_term)):
        lhs_terms[name], stderr[name] = _mean_and_stderr(series)

    f_star, f_chan, g_chan, h_chan = problem.forcing.providers(steps)
    u0_sq = traj.h_norms[0, keep] ** 2
    rhs_terms = {}
    rhs_terms["u0_sq"], stderr["u0_sq"] = _mean_and_stderr(u0_sq)

    data_int = 0.0
    g_int = 0.0
    for n in range(steps):
        w = np.exp(-2.0 * phi[n])
        if f_star is not None:
            data_int += w * float(triple.vstar_norm(f_star(n))) ** 2 * dt
        if f_chan is not None:
            data_int += w / alpha[n] * float(triple.h_norm(f_chan(n))) ** 2 * dt
        if h_chan is not None:
            data_int += w * float((triple.h_norm(np.asarray(h_chan(n), float)) ** 2).sum()) * dt
        if g_chan is not None:
            g_int += np.exp(-phi[n]) * float(triple.h_norm(g_chan(n))) * dt
    rhs_terms["data_sq"] = data_int
    rhs_terms["g_l1_sq"] = g_int**2

    lhs = sum(lhs_terms.values())
    rhs = sum(rhs_terms.values())
    return EstimateReport(lhs_terms=lhs_terms, rhs_terms=rhs_terms,
                          ratio=_ratio(lhs, rhs), n_paths=int(keep.sum()),
                          dt=dt, flags=flags, stderr=stderr)


# ----------------------------------------------------------------------
# approximation stability
# ----------------------------------------------------------------------

@dataclass
class StabilityTable:
    d_values: np.ndarray
    sup_terms: np.ndarray
    v_terms: np.ndarray

    def monotone_decreasing(self) -> bool:
        d = self.d_values
        return bool(np.all(np.diff(d) < 0))

    def ratios(self) -> np.ndarray:
        d = self.d_values
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[1:] / d[:-1]


def stability_experiment(base: EvolutionProblem, approximations,
                         noise: NoiseModel, n_paths: int = 4,
                         settings: SolveSettings | None = None,
                         certify: bool = True) -> StabilityTable:
    """Solve the base problem and each approximation on one shared noise
    record and accumulate

        D_n = mean sup_t |u^n_t - u^0_t|_H^2 + mean int |u^n - u^0|_V^2 dt.

    All problems must share the base grid and step; mismatches are
    configuration errors.
    """
    settings = settings or SolveSettings(store_states=True)
    settings.store_states = True
    for p in approximations:
        if p.triple.shape != base.triple.shape or p.triple.order != base.triple.order:
            raise ValueError("approximating problems must share the base grid")
        if certify:
            rep = check_coercivity(p.ops, p.triple, samples=4)
            if not rep.certified:
                raise HypothesesUnmet(
                    f"approximation failed coercivity: delta_est={rep.delta_est:.3e}")
    ref = solve(base, noise, n_paths=n_paths, settings=settings)
    triple = base.triple
    d_vals, sups, vints = [], [], []
    for p in approximations:
        out = solve(p, noise, n_paths=n_paths, settings=settings)
        diff = out.states - ref.states
        h_sq = triple.h_norm(diff) ** 2          # (steps+1, n_paths)
        v_sq = triple.v_norm(diff) ** 2
        sup_term = h_sq.max(axis=0).mean()
        v_term = (v_sq[:-1].sum(axis=0) * noise.dt).mean()
        sups.append(sup_term)
        vints.append(v_term)
        d_vals.append(sup_term + v_term)
    return StabilityTable(np.asarray(d_vals), np.asarray(sups), np.asarray(vints))
