"""Discrete Hilbert pair V ⊂ H on a periodic grid, realized by Fourier symbols.

The pair is either (L2, W^1_2) (order 1) or (W^1_2, W^2_2) (order 2).  All
inner products, resolvents and derivatives are diagonal in the discrete
Fourier basis, so the structural identities of the pair hold to round-off.
Grid axes are always the *last* ``dim`` axes of an array; leading axes are
treated as batch dimensions (ensemble paths, noise channels, ...).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


def _as_values(f) -> np.ndarray:
    if isinstance(f, GridFunction):
        return f.values
    return np.asarray(f, dtype=float)


@dataclass(frozen=True)
class SpectralTriple:
    """Periodic grid carrying the weighted spectral norms of the pair V ⊂ H.

    Parameters
    ----------
    dim : spatial dimension d.
    grid_points_per_axis : M, even, number of nodes per axis.
    box_length : L, physical period of the box.
    order : 1 selects (H, V) = (L2, W^1_2), 2 selects (W^1_2, W^2_2).

    The V-weight per wavenumber xi = 2*pi*k/L is (1+|xi|^2)**order and the
    H-weight is (1+|xi|^2)**(order-1), so |u|_H <= |u|_V for every grid
    function and the embedding constant is exactly one.
    """

    dim: int
    grid_points_per_axis: int
    box_length: float
    order: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if self.grid_points_per_axis < 2 or self.grid_points_per_axis % 2:
            raise ValueError("grid_points_per_axis must be even and >= 2")
        if self.box_length <= 0:
            raise ValueError("box_length must be positive")
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")

    # -- grid geometry -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.grid_points_per_axis,) * self.dim

    @property
    def spacing(self) -> float:
        return self.box_length / self.grid_points_per_axis

    @property
    def n_nodes(self) -> int:
        return self.grid_points_per_axis ** self.dim

    @cached_property
    def axes_coords(self) -> np.ndarray:
        """Node coordinates along one axis, in [-L/2, L/2)."""
        m = self.grid_points_per_axis
        return (np.arange(m) - m // 2) * self.spacing

    def mesh(self) -> list[np.ndarray]:
        """Coordinate arrays of shape ``self.shape``, one per axis."""
        return list(np.meshgrid(*([self.axes_coords] * self.dim), indexing="ij"))

    # -- spectral layout (rfftn over the grid axes) ---------------------

    @property
    def _grid_axes(self) -> tuple[int, ...]:
        return tuple(range(-self.dim, 0))

    @cached_property
    def spectral_shape(self) -> tuple[int, ...]:
        m = self.grid_points_per_axis
        return (m,) * (self.dim - 1) + (m // 2 + 1,)

    @cached_property
    def wavenumbers(self) -> list[np.ndarray]:
        """Physical wavenumber arrays xi_i on the half-spectrum grid."""
        m = self.grid_points_per_axis
        scale = 2.0 * np.pi / self.box_length
        full = np.fft.fftfreq(m, d=1.0 / m) * scale
        half = np.fft.rfftfreq(m, d=1.0 / m) * scale
        out = []
        for axis in range(self.dim):
            per_axis = half if axis == self.dim - 1 else full
            shape = [1] * self.dim
            shape[axis] = per_axis.size
            out.append(per_axis.reshape(shape))
        return out

    @cached_property
    def xi_squared(self) -> np.ndarray:
        acc = np.zeros(self.spectral_shape)
        for xi in self.wavenumbers:
            acc = acc + xi**2
        return acc

    @cached_property
    def v_symbol(self) -> np.ndarray:
        return (1.0 + self.xi_squared) ** self.order

    @cached_property
    def h_symbol(self) -> np.ndarray:
        return (1.0 + self.xi_squared) ** (self.order - 1)

    @cached_property
    def _multiplicity(self) -> np.ndarray:
        # rfftn stores half of the last axis; interior modes stand for a
        # conjugate pair, the k=0 and Nyquist planes for themselves.
        m = self.grid_points_per_axis
        mult = np.full(m // 2 + 1, 2.0)
        mult[0] = 1.0
        mult[-1] = 1.0
        shape = [1] * self.dim
        shape[-1] = mult.size
        return mult.reshape(shape)

    @cached_property
    def _parseval_scale(self) -> float:
        # |u|^2_{L2} = scale * sum mult*|uhat|^2 for the unnormalized rfftn.
        return self.box_length**self.dim / self.n_nodes**2

    @cached_property
    def _derivative_factors(self) -> list[np.ndarray]:
        # First derivatives zero the Nyquist plane so real fields stay real
        # and D stays exactly skew-adjoint on the grid.
        m = self.grid_points_per_axis
        nyq = -(m // 2) * 2.0 * np.pi / self.box_length
        out = []
        for xi in self.wavenumbers:
            fac = 1j * xi.astype(complex)
            fac[np.isclose(xi, nyq)] = 0.0
            out.append(fac)
        return out

    def fft(self, u) -> np.ndarray:
        return np.fft.rfftn(_as_values(u), axes=self._grid_axes)

    def ifft(self, uhat) -> np.ndarray:
        return np.fft.irfftn(uhat, s=self.shape, axes=self._grid_axes)

    def multiply_symbol(self, symbol: np.ndarray, f) -> np.ndarray:
        """Apply a Fourier multiplier given on the half-spectrum grid."""
        return self.ifft(symbol * self.fft(f))

    # -- norms and inner products ---------------------------------------

    def _weighted_sq(self, fhat: np.ndarray, weight) -> np.ndarray:
        acc = self._multiplicity * weight * (fhat.real**2 + fhat.imag**2)
        return self._parseval_scale * acc.sum(axis=self._grid_axes)

    def _weighted_inner(self, fhat, ghat, weight) -> np.ndarray:
        acc = self._multiplicity * weight * (fhat * ghat.conj()).real
        return self._parseval_scale * acc.sum(axis=self._grid_axes)

    def h_norm(self, f) -> np.ndarray | float:
        return np.sqrt(self._weighted_sq(self.fft(f), self.h_symbol))

    def v_norm(self, f) -> np.ndarray | float:
        return np.sqrt(self._weighted_sq(self.fft(f), self.v_symbol))

    def norms(self, f) -> tuple:
        """Return ``(h_norm, v_norm)``; always h_norm <= v_norm."""
        fhat = self.fft(f)
        h = np.sqrt(self._weighted_sq(fhat, self.h_symbol))
        v = np.sqrt(self._weighted_sq(fhat, self.v_symbol))
        return h, v

    def h_inner(self, f, g) -> np.ndarray | float:
        return self._weighted_inner(self.fft(f), self.fft(g), self.h_symbol)

    def v_inner(self, f, g) -> np.ndarray | float:
        return self._weighted_inner(self.fft(f), self.fft(g), self.v_symbol)

    def l2_inner(self, f, g) -> np.ndarray | float:
        """Plain L2 inner product; equals the grid quadrature sum(f*g)*h^d."""
        return self._weighted_inner(self.fft(f), self.fft(g), 1.0)

    def l2_norm(self, f) -> np.ndarray | float:
        return np.sqrt(self._weighted_sq(self.fft(f), 1.0))

    def vstar_norm(self, w) -> np.ndarray | float:
        """Dual norm of an H-representative: sup over |u|_V = 1 of (u, w)_H."""
        return np.sqrt(self._weighted_sq(self.fft(w), self.h_symbol**2 / self.v_symbol))

    # -- resolvent family ------------------------------------------------

    def resolvent_symbol(self, lam: float) -> np.ndarray:
        if lam < 0:
            raise ValueError("resolvent parameter must be nonnegative")
        return self.h_symbol / (lam * self.h_symbol + self.v_symbol)

    def resolvent(self, lam: float, f) -> np.ndarray:
        """Unique v with (f, u)_H = lam*(v, u)_H + (v, u)_V for all grid u."""
        values = _as_values(f)
        if values.shape[-self.dim:] != self.shape:
            raise ValueError(
                f"grid mismatch: trailing shape {values.shape[-self.dim:]} "
                f"!= {self.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("resolvent input must be finite")
        return self.multiply_symbol(self.resolvent_symbol(lam), values)

    def smooth(self, n: int, f) -> np.ndarray:
        """Smoothing family member n*resolvent(n, f); maps H into V."""
        if n < 1:
            raise ValueError("smoothing index must be >= 1")
        return n * self.resolvent(float(n), f)

    # -- spectral calculus ------------------------------------------------

    def gradient(self, u) -> np.ndarray:
        """All first derivatives, stacked on a new leading axis of size d."""
        uhat = self.fft(u)
        return np.stack([self.ifft(fac * uhat) for fac in self._derivative_factors])

    def derivative(self, axis: int, u) -> np.ndarray:
        return self.ifft(self._derivative_factors[axis] * self.fft(u))

    def divergence(self, flux) -> np.ndarray:
        """Divergence of a field stacked on the leading axis (size d)."""
        flux = np.asarray(flux, dtype=float)
        acc = None
        for i in range(self.dim):
            term = self.ifft(self._derivative_factors[i] * self.fft(flux[i]))
            acc = term if acc is None else acc + term
        return acc

    def laplacian(self, u) -> np.ndarray:
        return self.multiply_symbol(-self.xi_squared, u)

    def hessian(self, u) -> np.ndarray:
        """Second derivatives with shape (d, d) + batch/grid shape."""
        uhat = self.fft(u)
        facs = self._derivative_factors
        rows = []
        for i in range(self.dim):
            rows.append(
                np.stack([self.ifft(facs[i] * facs[j] * uhat) for j in range(self.dim)])
            )
        return np.stack(rows)

    # -- Lp quadrature -----------------------------------------------------

    def lp_norm(self, f, p: float) -> np.ndarray | float:
        """Grid quadrature of the Lp norm over the box."""
        values = np.abs(_as_values(f)) ** p
        cell = self.spacing**self.dim
        return (values.sum(axis=self._grid_axes) * cell) ** (1.0 / p)

    def integrate(self, f) -> np.ndarray | float:
        values = _as_values(f)
        return values.sum(axis=self._grid_axes) * self.spacing**self.dim


@dataclass
class GridFunction:
    """A validated scalar field over the triple's periodic grid."""

    values: np.ndarray
    triple: SpectralTriple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-self.triple.dim:] != self.triple.shape:
            raise ValueError(
                f"shape {self.values.shape} does not end with {self.triple.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function entries must be finite")

    def norms(self) -> tuple:
        return self.triple.norms(self.values)

    def __add__(self, other):
        return GridFunction(self.values + _as_values(other), self.triple)

    def __sub__(self, other):
        return GridFunction(self.values - _as_values(other), self.triple)

    def __mul__(self, scalar: float):
        return GridFunction(self.values * scalar, self.triple)

    __rmul__ = __mul__
