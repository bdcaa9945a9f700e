"""Morrey norms, admissible coefficient splits, and embedding checks.

A coefficient f is stored as a split f = f^M + f^B: a singular part whose
ball averages obey the Morrey-type bound

    (avg over B_rho of |f^M|^(alpha*r))^(1/r) <= hat^alpha / rho,

and a bounded part controlled by a time envelope bar_t.  Ball averages are
node averages over the periodic grid, evaluated for every center at once by
FFT convolution with the ball indicator, so reported norms are certified
lower bounds of the continuum suprema that converge under grid refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .triple import SpectralTriple


def unit_ball_volume(dim: int) -> float:
    return math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0)


@dataclass(frozen=True)
class MorreyParams:
    """Exponents of the admissibility class."""

    r: float
    rho0: float
    lambda_exp: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if not 0 < self.rho0 <= 1:
            raise ValueError("rho0 must lie in (0, 1]")
        if self.alpha not in (1.0, 0.5):
            raise ValueError("admissibility order alpha must be 1 or 1/2")
        if self.lambda_exp < 0:
            raise ValueError("lambda_exp must be nonnegative")

    def validate_for_dim(self, dim: int) -> None:
        if not 2 < self.r <= dim:
            raise ValueError(
                f"admissibility requires 2 < r <= d, got r={self.r}, d={dim}")


class BallSampler:
    """Deterministic family of grid balls: a radius ladder times all centers.

    Radii must span at least two grid cells so every ball contains a
    nontrivial node set; balls wrap periodically.  ``center_stride``
    subsamples the centers entering the max-reduction (the averages are
    still computed everywhere; only the reduction is restricted).
    """

    def __init__(self, triple: SpectralTriple, radii, center_stride: int = 1):
        radii = tuple(sorted(float(r) for r in radii))
        if not radii:
            raise ValueError("sampler needs at least one radius")
        h = triple.spacing
        for rho in radii:
            if rho < 2.0 * h:
                raise ValueError(f"radius {rho} below two grid spacings {2*h}")
            if rho > triple.box_length / 2.0:
                raise ValueError(f"radius {rho} exceeds half the box")
        self.triple = triple
        self.radii = radii
        self.center_stride = int(center_stride)
        self._kernels: dict[float, tuple[np.ndarray, float]] = {}

    @classmethod
    def from_rho0(cls, triple: SpectralTriple, rho0: float, n_radii: int = 4,
                  center_stride: int = 1, min_radius: float | None = None):
        h = triple.spacing
        top = min(rho0, triple.box_length / 2.0)
        lo = max(2.0 * h, top / 8.0 if min_radius is None else min_radius)
        if lo > top:
            raise ValueError(
                f"rho0={rho0} leaves no admissible radius on spacing {h}")
        if n_radii == 1:
            return cls(triple, [top], center_stride)
        ladder = np.geomspace(lo, top, n_radii)
        return cls(triple, ladder, center_stride)

    def _offsets_sq(self) -> np.ndarray:
        m = self.triple.grid_points_per_axis
        h = self.triple.spacing
        line = np.minimum(np.arange(m), m - np.arange(m)) * h
        grids = np.meshgrid(*([line] * self.triple.dim), indexing="ij")
        return sum(g**2 for g in grids)

    def _kernel(self, rho: float) -> tuple[np.ndarray, float]:
        if rho not in self._kernels:
            mask = self._offsets_sq() <= rho**2 * (1 + 1e-12)
            count = float(mask.sum())
            khat = np.fft.rfftn(mask.astype(float))
            self._kernels[rho] = (khat, count)
        return self._kernels[rho]

    def node_count(self, rho: float) -> float:
        return self._kernel(rho)[1]

    def ball_means(self, g: np.ndarray, rho: float) -> np.ndarray:
        """Node average of g over B_rho(c) for every grid center c."""
        khat, count = self._kernel(rho)
        axes = tuple(range(-self.triple.dim, 0))
        means = np.fft.irfftn(np.fft.rfftn(g, axes=axes) * khat,
                              s=self.triple.shape, axes=axes)
        means /= count
        # convolution round-off can turn exact zeros slightly negative
        return np.maximum(means, 0.0) if g.min() >= 0 else means

    def ball_mean_at_origin(self, g: np.ndarray, rho: float) -> float:
        """Node average over the ball centered at the coordinate origin."""
        from .fields import radial_distance
        mask = radial_distance(self.triple) <= rho * (1 + 1e-12)
        return float(g[mask].mean())

    def max_ball_mean(self, g: np.ndarray, rho: float) -> float:
        means = self.ball_means(g, rho)
        s = self.center_stride
        if s > 1:
            means = means[(slice(None, None, s),) * self.triple.dim]
        return float(means.max())


def _magnitude(values: np.ndarray, dim: int) -> np.ndarray:
    """Euclidean magnitude over any leading component axes."""
    values = np.asarray(values, dtype=float)
    if values.ndim == dim:
        return np.abs(values)
    lead = tuple(range(values.ndim - dim))
    return np.sqrt((values**2).sum(axis=lead))


def morrey_norm(f, params: MorreyParams, sampler: BallSampler,
                r: float | None = None) -> float:
    """sup over sampled (center, rho) of rho**lambda * (avg |f|^r)^(1/r).

    Vector or tensor fields contribute through their pointwise Euclidean
    magnitude.  The returned value is a lower bound of the continuum
    supremum and is monotone in the sampled ball family.
    """
    if not sampler.radii:
        raise ValueError("empty ball sampler")
    r_exp = params.r if r is None else r
    g = _magnitude(f, sampler.triple.dim) ** r_exp
    best = 0.0
    for rho in sampler.radii:
        if rho > params.rho0 * (1 + 1e-12):
            continue
        best = max(best,
                   rho**params.lambda_exp * sampler.max_ball_mean(g, rho) ** (1.0 / r_exp))
    return best


def singular_hat(singular, params: MorreyParams, sampler: BallSampler,
                 time_indexed: bool = False) -> float:
    """Certified constant of the split: smallest hat compatible with the
    sampled ball family, i.e. max over times of
    [max rho*(avg |f^M_t|^(alpha r))^(1/r)]^(1/alpha)."""
    dim = sampler.triple.dim
    values = np.asarray(singular, dtype=float)
    slices = values if time_indexed else values[None]
    best = 0.0
    for snap in slices:
        g = _magnitude(snap, dim) ** (params.alpha * params.r)
        for rho in sampler.radii:
            if rho > params.rho0 * (1 + 1e-12):
                continue
            best = max(best, rho * sampler.max_ball_mean(g, rho) ** (1.0 / params.r))
    return best ** (1.0 / params.alpha)


@dataclass
class AdmissibleField:
    """A coefficient split f = f^M + f^B with certified constants.

    ``singular`` and ``bounded`` share a shape ``([T,] [C,] *grid)``; the
    optional time axis is flagged by ``time_indexed`` and any remaining
    leading axes are vector/channel components.  ``bar`` is the bounded-part
    envelope: a scalar for static fields, a length-T series otherwise.
    """

    singular: np.ndarray
    bounded: np.ndarray
    hat: float
    bar: np.ndarray
    params: MorreyParams
    time_indexed: bool = False
    grid_dim: int | None = None

    def __post_init__(self):
        self.singular = np.asarray(self.singular, dtype=float)
        self.bounded = np.asarray(self.bounded, dtype=float)
        if self.singular.shape != self.bounded.shape:
            raise ValueError("singular and bounded parts must share a shape")
        self.bar = np.atleast_1d(np.asarray(self.bar, dtype=float))

    # -- accessors -------------------------------------------------------

    @property
    def n_times(self) -> int:
        return self.singular.shape[0] if self.time_indexed else 1

    def singular_at(self, i: int) -> np.ndarray:
        return self.singular[min(i, self.n_times - 1)] if self.time_indexed else self.singular

    def bounded_at(self, i: int) -> np.ndarray:
        return self.bounded[min(i, self.n_times - 1)] if self.time_indexed else self.bounded

    def total_at(self, i: int) -> np.ndarray:
        return self.singular_at(i) + self.bounded_at(i)

    def bar_at(self, i: int) -> float:
        return float(self.bar[min(i, self.bar.size - 1)])

    def bar_series(self, n_steps: int) -> np.ndarray:
        if self.bar.size == 1:
            return np.full(n_steps, float(self.bar[0]))
        if self.bar.size < n_steps:
            out = np.full(n_steps, self.bar[-1])
            out[: self.bar.size] = self.bar
            return out
        return self.bar[:n_steps].copy()

    # -- certification -----------------------------------------------------

    def measure_hat(self, sampler: BallSampler) -> float:
        return singular_hat(self.singular, self.params, sampler,
                            time_indexed=self.time_indexed)

    def envelope_violation(self) -> float:
        """max over time of (sup |f^B_t| - bar_t); <= 0 when certified."""
        gd = self._grid_dim()
        worst = -np.inf
        for i in range(self.n_times):
            mag = _magnitude(self.bounded_at(i), gd)
            worst = max(worst, float(mag.max(initial=0.0)) - self.bar_at(i))
        return worst

    def _grid_dim(self) -> int:
        if self.grid_dim is not None:
            return self.grid_dim
        # fall back on the trailing block of equal-length axes
        nd = self.singular.ndim - (1 if self.time_indexed else 0)
        shape = self.singular.shape[-nd:] if nd else ()
        m = shape[-1] if shape else 0
        g = 0
        for s in reversed(shape):
            if s == m:
                g += 1
            else:
                break
        return g

    @classmethod
    def from_split(cls, singular, bounded, params: MorreyParams,
                   sampler: BallSampler, time_indexed: bool = False,
                   bar=None) -> "AdmissibleField":
        obj = cls(np.asarray(singular, float), np.asarray(bounded, float),
                  hat=0.0, bar=np.zeros(1), params=params,
                  time_indexed=time_indexed, grid_dim=sampler.triple.dim)
        obj.hat = obj.measure_hat(sampler)
        if bar is None:
            gd = obj._grid_dim()
            bars = [float(_magnitude(obj.bounded_at(i), gd).max(initial=0.0))
                    for i in range(obj.n_times)]
            obj.bar = np.asarray(bars)
        else:
            obj.bar = np.atleast_1d(np.asarray(bar, dtype=float))
        return obj

    @classmethod
    def zero(cls, shape, params: MorreyParams) -> "AdmissibleField":
        z = np.zeros(shape)
        return cls(z, z.copy(), hat=0.0, bar=np.zeros(1), params=params)

    def scaled(self, c: float) -> "AdmissibleField":
        return AdmissibleField(self.singular * c, self.bounded * c,
                               hat=self.hat * abs(c), bar=self.bar * abs(c),
                               params=self.params, time_indexed=self.time_indexed,
                               grid_dim=self.grid_dim)


def decompose_lpq(b: np.ndarray, p: float, n_hat: float,
                  triple: SpectralTriple, sampler: BallSampler,
                  params: MorreyParams | None = None) -> AdmissibleField:
    """Split a time-indexed field by the level threshold

        lam(t) = n_hat * (integral |b_t|^p dx)^(1/(p-d)),

    putting the above-threshold part into the singular slot and the rest,
    bounded by lam(t), into the bounded slot.  Requires p > d.
    """
    if p <= triple.dim:
        raise ValueError(f"threshold split needs p > d, got p={p}, d={triple.dim}")
    b = np.asarray(b, dtype=float)
    if b.ndim < triple.dim + 1:
        raise ValueError("expected a time-indexed field (leading time axis)")
    d = triple.dim
    if params is None:
        params = MorreyParams(r=float(d), rho0=min(1.0, triple.box_length / 2.0))
    n_times = b.shape[0]
    lam = np.empty(n_times)
    singular = np.zeros_like(b)
    bounded = np.zeros_like(b)
    for t in range(n_times):
        mag = _magnitude(b[t], d)
        lp = float((mag**p).sum() * triple.spacing**d)
        lam[t] = n_hat * lp ** (1.0 / (p - d))
        above = mag >= lam[t]
        singular[t] = np.where(above, b[t], 0.0)
        bounded[t] = b[t] - singular[t]
    return AdmissibleField.from_split(singular, bounded, params, sampler,
                                      time_indexed=True, bar=lam)


def lpq_split_constant(split: AdmissibleField, sampler: BallSampler,
                       p: float, n_hat: float) -> float:
    """Fitted constant N in  avg_B |b^M|^d * rho^d <= N * n_hat^(d-p).

    Stable under refinement with limit 1/|B_1| for the threshold split.
    """
    d = sampler.triple.dim
    best = 0.0
    for t in range(split.n_times):
        g = _magnitude(split.singular_at(t), d) ** d
        for rho in sampler.radii:
            best = max(best, sampler.max_ball_mean(g, rho) * rho**d)
    return best / n_hat ** (d - p)


@dataclass(frozen=True)
class LpsCheck:
    value: float
    critical: bool
    subcritical: bool


def check_lps(p: float, q: float, dim: int, tol: float = 1e-12) -> LpsCheck:
    """Evaluate the mixed-integrability scaling d/p + 2/q against 1."""
    if p < 2 or q < 2:
        raise ValueError("exponents must lie in [2, inf]")
    value = (0.0 if math.isinf(p) else dim / p) + (0.0 if math.isinf(q) else 2.0 / q)
    return LpsCheck(value=value, critical=abs(value - 1.0) <= tol,
                    subcritical=value < 1.0 - tol)


@dataclass
class WeakLdReport:
    weak_constant: float
    levels: np.ndarray
    level_values: np.ndarray
    fitted_bound_constant: float


def check_weak_ld(b: np.ndarray, sampler: BallSampler, r: float,
                  n_levels: int = 8, radius: float | None = None,
                  min_nodes: int = 8) -> WeakLdReport:
    """Weak-L_d certificate: M = sup over levels and balls of
    lam^d * |B ∩ {|b| > lam}|, plus the fitted constant N of the derived
    Morrey bound rho^r * avg_B |b|^r <= N * M^(r/d) for r < d.

    The level ladder stays in the grid-resolved range: the top level keeps
    at least ``min_nodes`` nodes above it, and the bottom level keeps the
    superlevel set within half the measuring ball, so neither staircase
    artifacts nor ball clipping pollute the supremum.
    """
    triple = sampler.triple
    d = triple.dim
    mag = _magnitude(b, d)
    positive = np.sort(mag[mag > 0].ravel())
    if positive.size == 0:
        return WeakLdReport(0.0, np.zeros(0), np.zeros(0), 0.0)
    rho_meas = radius if radius is not None else min(1.0, triple.box_length / 2.0)
    cell = triple.spacing**d
    hi = float(positive[max(0, positive.size - min_nodes)]) * 0.999
    half_ball_nodes = int(0.5 * unit_ball_volume(d) * rho_meas**d / cell)
    lo_idx = max(0, positive.size - max(half_ball_nodes, min_nodes))
    lo = float(positive[lo_idx])
    if not lo < hi:
        lo = hi / 4.0
    levels = np.geomspace(lo, hi, n_levels)
    vals = np.empty(n_levels)
    khat, _ = sampler._kernel(rho_meas)
    axes = tuple(range(-d, 0))
    for i, lam in enumerate(levels):
        indic = (mag > lam).astype(float)
        local = np.fft.irfftn(np.fft.rfftn(indic, axes=axes) * khat,
                              s=triple.shape, axes=axes)
        vals[i] = lam**d * max(local.max(), 0.0) * cell
    m_const = float(vals.max())
    fitted = 0.0
    if m_const > 0:
        g = mag**r
        for rho in sampler.radii:
            lhs = rho**r * sampler.max_ball_mean(g, rho)
            fitted = max(fitted, lhs / m_const ** (r / d))
    return WeakLdReport(m_const, levels, vals, fitted)


@dataclass
class EmbeddingReport:
    constant: float
    per_sample: list
    alpha: float


def verify_embedding(f: AdmissibleField, test_fields, triple: SpectralTriple) -> EmbeddingReport:
    """Fit the smallest C with

        integral |f_t|^2 u^2 <= C * (hat^2 |Du|^2 + (hat^2/rho0^2 + 2 bar_t^2) |u|^2)

    over a battery of test fields (order-1 class), or the order-1/2 form

        integral |f^M_t| u^2 <= C * hat * (|Du|^2 + |u|^2/rho0^2).

    Both sides use grid quadrature; 0/0 counts as 0.
    """
    rho0 = f.params.rho0
    alpha = f.params.alpha
    d = triple.dim
    rows = []
    best = 0.0
    for u in test_fields:
        u = np.asarray(u, dtype=float)
        du_sq = float((triple.l2_norm(triple.gradient(u)) ** 2).sum())
        u_sq = float(triple.l2_norm(u) ** 2)
        for t in range(f.n_times):
            if alpha == 1.0:
                weight = _magnitude(f.total_at(t), d) ** 2
                lhs = float(triple.integrate(weight * u**2))
                rhs = f.hat**2 * du_sq + (f.hat**2 / rho0**2 + 2.0 * f.bar_at(t)**2) * u_sq
            else:
                weight = _magnitude(f.singular_at(t), d)
                lhs = float(triple.integrate(weight * u**2))
                rhs = f.hat * (du_sq + u_sq / rho0**2)
            ratio = 0.0 if lhs == 0.0 else (math.inf if rhs == 0.0 else lhs / rhs)
            rows.append({"time": t, "lhs": lhs, "rhs": rhs, "ratio": ratio})
            best = max(best, ratio)
    return EmbeddingReport(constant=best, per_sample=rows, alpha=alpha)


def drift_pairing_constant(split: AdmissibleField, test_pairs,
                           triple: SpectralTriple) -> float:
    """Fitted N in |(v, b^M . Du)| <= N * hat * (|Dv| + |v|/rho0) * |Du|,
    over (v, u) pairs; the gradient contraction uses the split's component
    axes."""
    rho0 = split.params.rho0
    if split.hat == 0.0:
        return 0.0
    best = 0.0
    for v, u in test_pairs:
        grad_u = triple.gradient(np.asarray(u, float))
        bM = split.singular_at(0)
        if bM.ndim == triple.dim:
            transport = bM * grad_u[0]
        else:
            transport = np.einsum("i...,i...->...", bM, grad_u)
        lhs = abs(float(triple.l2_inner(v, transport)))
        dv = float(np.sqrt((triple.l2_norm(triple.gradient(v)) ** 2).sum()))
        vn = float(triple.l2_norm(v))
        du = float(np.sqrt((triple.l2_norm(grad_u) ** 2).sum()))
        denom = split.hat * (dv + vn / rho0) * du
        if denom > 0:
            best = max(best, lhs / denom)
    return best
