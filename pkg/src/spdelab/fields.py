"""Field constructors and flat-array field I/O.

Constructors return plain numpy arrays over a triple's grid.  Singular
profiles follow the convention that any node closer to the singularity than
half a grid cell is assigned the average of the profile over that cell
(estimated on a fixed deterministic subgrid), which keeps grid quadratures
of the singular fields finite and consistent.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .triple import SpectralTriple

_MAGIC = b"SPLF"
_VERSION = 1

# fixed 4^d cell subsample used for the cell-average value at a singular node
_CELL_SUBDIV = 4


def _cell_average_inverse_power(dim: int, spacing: float, power: float) -> float:
    """Average of |x|**(-power) over the grid cell centered at the origin."""
    offs = (np.arange(_CELL_SUBDIV) + 0.5) / _CELL_SUBDIV - 0.5
    pts = np.meshgrid(*([offs * spacing] * dim), indexing="ij")
    r = np.sqrt(sum(p**2 for p in pts))
    return float(np.mean(r ** (-power)))


def radial_distance(triple: SpectralTriple, center=None) -> np.ndarray:
    """Periodic distance to ``center`` (defaults to the coordinate origin)."""
    coords = triple.mesh()
    L = triple.box_length
    acc = np.zeros(triple.shape)
    for axis, x in enumerate(coords):
        dx = x - (0.0 if center is None else center[axis])
        dx = (dx + L / 2.0) % L - L / 2.0
        acc += dx**2
    return np.sqrt(acc)


def node_offset_distance(triple: SpectralTriple) -> np.ndarray:
    """Periodic distance of every node from grid index (0, ..., 0).

    Convolution kernels must be centered here: index 0 is the FFT origin,
    while the coordinate origin sits at index M/2 of each axis.
    """
    m = triple.grid_points_per_axis
    line = np.minimum(np.arange(m), m - np.arange(m)) * triple.spacing
    grids = np.meshgrid(*([line] * triple.dim), indexing="ij")
    return np.sqrt(sum(g**2 for g in grids))


def smooth_cutoff(r: np.ndarray, radius: float) -> np.ndarray:
    """C^inf bump profile equal to 1 at r=0 and 0 for r >= radius."""
    out = np.zeros_like(r)
    inside = r < radius
    s = r[inside] / radius
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s**2))
    return out


def constant_field(triple: SpectralTriple, value: float) -> np.ndarray:
    return np.full(triple.shape, float(value))


def gaussian_bump(triple: SpectralTriple, amplitude: float = 1.0,
                  width: float = 0.2, center=None) -> np.ndarray:
    r = radial_distance(triple, center)
    return amplitude * np.exp(-(r**2) / (2.0 * width**2))


def sin_mode(triple: SpectralTriple, mode=1, amplitude: float = 1.0,
             axis: int = 0) -> np.ndarray:
    x = triple.mesh()[axis]
    return amplitude * np.sin(2.0 * np.pi * mode * x / triple.box_length)


def band_limited(triple: SpectralTriple, max_mode: int = 4,
                 decay: float = 0.1, axis: int = 0) -> np.ndarray:
    """Low-mode test profile sum_k decay**k * cos(2 pi k x / L)."""
    x = triple.mesh()[axis]
    out = np.zeros(triple.shape)
    for k in range(max_mode + 1):
        out += decay**k * np.cos(2.0 * np.pi * k * x / triple.box_length)
    return out


def inverse_norm_scalar(triple: SpectralTriple, amplitude: float = 1.0,
                        power: float = 1.0, support: float | None = None,
                        center=None) -> np.ndarray:
    """amplitude/|x|**power, smoothly cut off at ``support``, periodized.

    The origin node carries the cell average of the profile.
    """
    r = radial_distance(triple, center)
    near = r < triple.spacing / 2.0
    safe = np.where(near, 1.0, r)
    out = amplitude * safe ** (-power)
    out[near] = amplitude * _cell_average_inverse_power(
        triple.dim, triple.spacing, power)
    if support is not None:
        out *= smooth_cutoff(r, support)
    return out


def inverse_norm_drift(triple: SpectralTriple, amplitude: float = 1.0,
                       support: float | None = None, center=None) -> np.ndarray:
    """Vector field -amplitude * x / |x|^2, cut off at ``support``.

    Shape ``(d,) + grid``.  Nodes within half a cell of the center get the
    principal-value convention (zero vector: the profile is odd).
    """
    coords = triple.mesh()
    L = triple.box_length
    comps = []
    r = radial_distance(triple, center)
    near = r < triple.spacing / 2.0
    safe_r2 = np.where(near, 1.0, r**2)
    cut = 1.0 if support is None else smooth_cutoff(r, support)
    for axis, x in enumerate(coords):
        dx = x - (0.0 if center is None else center[axis])
        dx = (dx + L / 2.0) % L - L / 2.0
        comp = -amplitude * dx / safe_r2
        comp[near] = 0.0
        comps.append(comp * cut)
    return np.stack(comps)


# ----------------------------------------------------------------------
# flat binary field format: magic, version, dim, M, time count, L, payload
# ----------------------------------------------------------------------

_HEADER = struct.Struct("<4sHHIIId")


def save_field(path, values: np.ndarray, box_length: float,
               n_times: int = 0) -> None:
    """Write a field as a flat float64 array with a small self-describing header.

    ``n_times = 0`` marks a static field; otherwise the leading axis of
    ``values`` is the time axis.  Any extra leading axes (vector components)
    are flattened into the payload and restored by the caller's context.
    """
    values = np.ascontiguousarray(values, dtype="<f8")
    grid_axes = values.shape[-1]
    dim = 0
    m = values.shape[-1]
    # infer dim as the number of trailing axes equal to m
    for ax in reversed(values.shape):
        if ax == m:
            dim += 1
        else:
            break
    header = _HEADER.pack(_MAGIC, _VERSION, dim, m, n_times,
                          int(np.prod(values.shape, dtype=np.int64)), box_length)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())
    del grid_axes


def load_field(path) -> tuple[np.ndarray, dict]:
    """Read a field written by :func:`save_field`.

    Returns the flat payload reshaped as (..., M, ..., M) when possible and a
    metadata dict with keys dim, grid_points, n_times, box_length.
    """
    raw = Path(path).read_bytes()
    try:
        magic, version, dim, m, n_times, count, box_length = _HEADER.unpack_from(raw)
    except struct.error as exc:
        raise ValueError(f"{path}: not a field file ({exc})") from exc
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a field file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported field format version {version}")
    payload = np.frombuffer(raw[_HEADER.size:], dtype="<f8", count=count)
    grid = (m,) * dim
    lead = count // int(np.prod(grid))
    shape = ((lead,) if lead > 1 else ()) + grid
    meta = {"dim": dim, "grid_points": m, "n_times": n_times,
            "box_length": box_length}
    return payload.reshape(shape).copy(), meta


def save_slice_csv(path, values: np.ndarray, triple: SpectralTriple,
                   axis: int = 0) -> None:
    """Dump a 1-d or 2-d slice through the origin node as CSV."""
    values = np.asarray(values)
    idx = [s // 2 for s in triple.shape]
    coords = triple.axes_coords
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if triple.dim == 1 or values.ndim == 1:
            writer.writerow(["x", "value"])
            line = values if values.ndim == 1 else values[tuple(idx[:-1])]
            for x, v in zip(coords, line):
                writer.writerow([repr(float(x)), repr(float(v))])
        else:
            sel = list(idx)
            sel[axis] = slice(None)
            sel[(axis + 1) % triple.dim] = slice(None)
            plane = values[tuple(sel)]
            writer.writerow(["x", "y", "value"])
            for i, x in enumerate(coords):
                for j, y in enumerate(coords):
                    writer.writerow([repr(float(x)), repr(float(y)),
                                     repr(float(plane[i, j]))])
