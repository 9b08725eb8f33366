"""Grids, nodal fields, quadrature, random data and snapshot I/O.

Everything downstream works on a closed tensor grid over time t in [0, T],
age a in [0, A] and space x in an interval (default (0, 1)).  Fields store
nodal values.  Quadrature is composite trapezoid; endpoint cells whose
weight is singular at the boundary node fall back to a midpoint evaluation
of the weight so that integrable singularities (Hardy weights, degenerate
diffusion factors) can be integrated without special-casing callers.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Grid",
    "Field2",
    "Field3",
    "axis_weights",
    "integrate_nodes",
    "weighted_norm",
    "window_mask",
    "random_final_data",
    "sine_mode_data",
    "spawn_rng",
    "write_field_csv",
    "read_field_csv",
    "write_field_raw",
    "read_field_raw",
    "RAW_FORMAT_VERSION",
]

RAW_FORMAT_VERSION = 1

_REL_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Tensor grid over [0, T] x [0, A] x [x_lo, x_hi] with Nt/Na/Nx cells.

    When ``dt_equals_da`` is set (the default, and required by the
    evolution solvers) the time and age spacings must agree exactly, so
    that the transport part of the dynamics advects one age cell per time
    step.  ``x_span`` defaults to (0, 1); subinterval grids are used by the
    two-sided gluing construction and keep the parent spacing.
    """

    T: float
    A: float
    Nt: int
    Na: int
    Nx: int
    dt_equals_da: bool = True
    x_span: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        if self.T <= 0 or self.A <= 0:
            raise ValueError("horizons T and A must be positive")
        if min(self.Nt, self.Na, self.Nx) < 1:
            raise ValueError("cell counts must be positive")
        lo, hi = self.x_span
        if not hi > lo:
            raise ValueError("x_span must be an increasing pair")
        if self.dt_equals_da:
            dt, da = self.T / self.Nt, self.A / self.Na
            if abs(dt - da) > _REL_TOL * max(dt, da):
                raise ValueError(
                    f"dt_equals_da grid needs T/Nt == A/Na, got dt={dt!r}, da={da!r}"
                )

    @classmethod
    def aligned(cls, T: float, A: float, Nt: int, Nx: int,
                x_span: tuple[float, float] = (0.0, 1.0)) -> "Grid":
        """Build a dt == da grid from (T, Nt), deriving the age cell count."""
        na = (A / T) * Nt
        na_int = int(round(na))
        if abs(na - na_int) > 1e-9 or na_int < 1:
            raise ValueError(f"A/T * Nt = {na} is not a positive integer")
        return cls(T=T, A=A, Nt=Nt, Na=na_int, Nx=Nx, x_span=x_span)

    @property
    def dt(self) -> float:
        return self.T / self.Nt

    @property
    def da(self) -> float:
        return self.A / self.Na

    @property
    def dx(self) -> float:
        lo, hi = self.x_span
        return (hi - lo) / self.Nx

    @property
    def t_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.Nt + 1)

    @property
    def a_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.A, self.Na + 1)

    @property
    def x_nodes(self) -> np.ndarray:
        lo, hi = self.x_span
        return np.linspace(lo, hi, self.Nx + 1)

    def axis_nodes(self, name: str) -> np.ndarray:
        try:
            return {"t": self.t_nodes, "a": self.a_nodes, "x": self.x_nodes}[name]
        except KeyError:
            raise ValueError(f"unknown axis {name!r}") from None

    def with_time(self, T: float, Nt: int) -> "Grid":
        """Same age/space lattice over a different time window."""
        return replace(self, T=T, Nt=Nt)


def window_mask(nodes: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Membership of nodes in the closed window [lo, hi].

    Node coordinates come from linspace on each (sub)grid, so a node
    nominally on the window edge can sit a few ulp to either side
    depending on how its lattice was built; membership must not depend on
    that, or the same physical node flips between a grid and a subgrid
    sharing its spacing.  The fuzz is far below any cell width in use.
    """
    nodes = np.asarray(nodes, dtype=float)
    fuzz = 1e-12 * max(hi - lo, 1.0)
    return (nodes >= lo - fuzz) & (nodes <= hi + fuzz)


def _check_values(values: np.ndarray, shape: tuple[int, ...], what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{what} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


@dataclass
class Field3:
    """Nodal field over the full (t, a, x) grid, shape (Nt+1, Na+1, Nx+1)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        shape = (self.grid.Nt + 1, self.grid.Na + 1, self.grid.Nx + 1)
        self.values = _check_values(self.values, shape, "Field3 values")

    @classmethod
    def zeros(cls, grid: Grid) -> "Field3":
        return cls(grid, np.zeros((grid.Nt + 1, grid.Na + 1, grid.Nx + 1)))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "Field3":
        t = grid.t_nodes[:, None, None]
        a = grid.a_nodes[None, :, None]
        x = grid.x_nodes[None, None, :]
        return cls(grid, np.broadcast_to(fn(t, a, x),
                   (grid.Nt + 1, grid.Na + 1, grid.Nx + 1)).astype(float).copy())

    @property
    def axes(self) -> tuple[str, str, str]:
        return ("t", "a", "x")

    def copy(self) -> "Field3":
        return Field3(self.grid, self.values.copy())


@dataclass
class Field2:
    """Nodal field over two of the grid axes (default (a, x))."""

    grid: Grid
    values: np.ndarray
    axes: tuple[str, str] = ("a", "x")

    def __post_init__(self) -> None:
        self.axes = tuple(self.axes)  # type: ignore[assignment]
        if len(self.axes) != 2 or len(set(self.axes)) != 2:
            raise ValueError(f"axes must be two distinct names, got {self.axes}")
        shape = tuple(len(self.grid.axis_nodes(ax)) for ax in self.axes)
        self.values = _check_values(self.values, shape, "Field2 values")

    @classmethod
    def zeros(cls, grid: Grid, axes: tuple[str, str] = ("a", "x")) -> "Field2":
        shape = tuple(len(grid.axis_nodes(ax)) for ax in axes)
        return cls(grid, np.zeros(shape), axes)

    @classmethod
    def from_function(cls, grid: Grid, fn, axes: tuple[str, str] = ("a", "x")) -> "Field2":
        u = grid.axis_nodes(axes[0])[:, None]
        v = grid.axis_nodes(axes[1])[None, :]
        shape = (u.size, v.size)
        return cls(grid, np.broadcast_to(fn(u, v), shape).astype(float).copy(), axes)

    def copy(self) -> "Field2":
        return Field2(self.grid, self.values.copy(), self.axes)


# ---------------------------------------------------------------------------
# quadrature


def axis_weights(n_nodes: int, h: float) -> np.ndarray:
    """Composite trapezoid weights for ``n_nodes`` equispaced nodes."""
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    w = np.full(n_nodes, h)
    w[0] = w[-1] = h / 2.0
    return w


def integrate_nodes(values: np.ndarray, spacings: tuple[float, ...]) -> float:
    """Tensor trapezoid integral of nodal data; exact for multilinear data."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != len(spacings):
        raise ValueError("one spacing per array axis required")
    for h in spacings:
        w = axis_weights(arr.shape[0], h)
        arr = np.tensordot(w, arr, axes=([0], [0]))
    return float(arr)


def _trap_1d(g: np.ndarray, h: float) -> np.ndarray:
    """Trapezoid along the last axis of ``g``."""
    return h * (g.sum(axis=-1) - 0.5 * (g[..., 0] + g[..., -1]))


def weighted_norm(values: np.ndarray, nodes: tuple[np.ndarray, ...],
                  weight=None, weight_values: np.ndarray | None = None) -> float:
    """Integral of weight * field**2 over the tensor domain of ``nodes``.

    ``weight`` is a callable of the axis coordinates (broadcasting
    numpy-style); ``weight_values`` may supply precomputed nodal weights
    instead.  Endpoint cells of the *last* axis where the nodal weight is
    non-finite are integrated on a geometric subdivision toward the
    endpoint (Simpson per sub-cell, field interpolated linearly), which
    resolves any integrable power singularity of the weight.  Returns the
    squared weighted L2 norm.
    """
    f = np.asarray(values, dtype=float)
    if f.ndim != len(nodes):
        raise ValueError("one node array per field axis required")
    mesh = np.meshgrid(*nodes, indexing="ij", sparse=True)
    if weight_values is not None:
        w = np.broadcast_to(np.asarray(weight_values, dtype=float), f.shape)
        if not np.all(np.isfinite(w)):
            raise ValueError("precomputed weight values must be finite")
    elif weight is None:
        w = np.ones_like(f)
    else:
        w = np.broadcast_to(np.asarray(weight(*mesh), dtype=float), f.shape)

    hs = [float(n[1] - n[0]) for n in nodes]
    g = np.where(np.isfinite(w), w, 0.0) * f * f

    # Integrate the last axis cell by cell (end cells singular-aware), then
    # trapezoid over the remaining axes.
    h = hs[-1]
    cells = 0.5 * h * (g[..., :-1] + g[..., 1:])
    if weight is not None and weight_values is None:
        wl = np.asarray(w[..., 0], dtype=float)
        wr = np.asarray(w[..., -1], dtype=float)
        xs = nodes[-1]
        if np.any(~np.isfinite(wl)):
            sing_l = _singular_cell(weight, mesh, xs, h, f, side="lo")
            cells[..., 0] = np.where(np.isfinite(wl), cells[..., 0], sing_l)
        if np.any(~np.isfinite(wr)):
            sing_r = _singular_cell(weight, mesh, xs, h, f, side="hi")
            cells[..., -1] = np.where(np.isfinite(wr), cells[..., -1], sing_r)
    total = cells.sum(axis=-1)
    for h_prev in reversed(hs[:-1]):
        total = _trap_1d(total, h_prev)
    return float(total)


def _weight_at(weight, sparse_mesh, x_value: float) -> np.ndarray:
    args = [m[..., :1] for m in sparse_mesh[:-1]] + [np.asarray(x_value)]
    out = np.asarray(weight(*args), dtype=float)
    return out[..., 0] if out.ndim == len(sparse_mesh) else out


def _singular_cell(weight, sparse_mesh, xs: np.ndarray, h: float,
                   f: np.ndarray, side: str) -> np.ndarray:
    """End cell of ``weighted_norm`` with the weight singular at one node.

    The cell is split geometrically toward the singular endpoint and each
    sub-cell integrated by Simpson with the exact weight and the field
    interpolated linearly between the two cell nodes; the untouched sliver
    next to the endpoint carries O((2^-60)^(1-gamma)) of the cell mass for
    a |x - x_s|^(-gamma) weight, negligible for every integrable gamma.
    """
    if side == "lo":
        x_s, f_sing, f_reg = xs[0], f[..., 0], f[..., 1]
        orient = 1.0
    else:
        x_s, f_sing, f_reg = xs[-1], f[..., -1], f[..., -2]
        orient = -1.0
    dist = h * 0.5 ** np.arange(61)
    keep = dist > 8.0 * np.finfo(float).eps * max(1.0, abs(x_s))
    dist = dist[keep]
    if dist.size < 2:
        return np.zeros_like(f_sing)

    def g_at(d: float) -> np.ndarray:
        wv = _weight_at(weight, sparse_mesh, x_s + orient * d)
        wv = np.where(np.isfinite(wv), wv, 0.0)
        fv = f_sing + (d / h) * (f_reg - f_sing)
        return wv * fv * fv

    total = np.zeros_like(f_sing, dtype=float)
    g_hi = g_at(dist[0])
    for j in range(dist.size - 1):
        d_hi, d_lo = dist[j], dist[j + 1]
        g_mid = g_at(0.5 * (d_hi + d_lo))
        g_lo = g_at(d_lo)
        total = total + (d_hi - d_lo) / 6.0 * (g_hi + 4.0 * g_mid + g_lo)
        g_hi = g_lo
    return total


# ---------------------------------------------------------------------------
# random data


def spawn_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Named, splittable generator: (seed, stream) fully determines output."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def sine_mode_data(grid: Grid, coeffs: np.ndarray) -> Field2:
    """Double sine series in (a, x) scaled by (A - a)/A.

    ``coeffs[m-1, n-1]`` multiplies sin(m pi a / A) sin(n pi xhat) where
    xhat maps x_span to (0, 1).  The age ramp makes the a = A row exactly
    zero, matching the admissible final-data class of the adjoint system.
    """
    c = np.atleast_2d(np.asarray(coeffs, dtype=float))
    a = grid.a_nodes
    lo, hi = grid.x_span
    xhat = (grid.x_nodes - lo) / (hi - lo)
    vals = np.zeros((a.size, xhat.size))
    for m in range(c.shape[0]):
        sa = np.sin((m + 1) * np.pi * a / grid.A)
        for n in range(c.shape[1]):
            if c[m, n] == 0.0:
                continue
            vals += c[m, n] * np.outer(sa, np.sin((n + 1) * np.pi * xhat))
    vals *= ((grid.A - a) / grid.A)[:, None]
    vals[-1, :] = 0.0
    return Field2(grid, vals, ("a", "x"))


def random_final_data(grid: Grid, seed: int, modes: int = 4, stream: int = 0,
                      amplitude: float = 1.0) -> Field2:
    """Random truncated double sine series, deterministic in (seed, stream)."""
    if modes < 1:
        raise ValueError("modes must be >= 1")
    rng = spawn_rng(seed, stream)
    m = np.arange(1, modes + 1)
    scale = amplitude / np.outer(m, m)
    coeffs = rng.standard_normal((modes, modes)) * scale
    return sine_mode_data(grid, coeffs)


# ---------------------------------------------------------------------------
# snapshots

_AXIS_ORDER = ("t", "a", "x")


def write_field_csv(fld: Field2 | Field3, path) -> None:
    """CSV snapshot: header row, one row per node, row-major order."""
    axes = fld.axes
    nodes = [fld.grid.axis_nodes(ax) for ax in axes]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(axes) + ["value"])
        flat = fld.values.reshape(-1)
        grids = np.meshgrid(*nodes, indexing="ij")
        coords = [g.reshape(-1) for g in grids]
        for row in zip(*coords, flat):
            writer.writerow([repr(float(v)) for v in row])


def read_field_csv(path, grid: Grid):
    """Read a snapshot written by :func:`write_field_csv` back onto ``grid``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        axes = tuple(header[:-1])
        data = np.array([[float(v) for v in row] for row in reader])
    shape = tuple(len(grid.axis_nodes(ax)) for ax in axes)
    if data.shape[0] != int(np.prod(shape)):
        raise ValueError("snapshot row count does not match grid")
    values = data[:, -1].reshape(shape)
    if len(axes) == 3:
        return Field3(grid, values)
    return Field2(grid, values, axes)  # type: ignore[arg-type]


def write_field_raw(fld: Field2 | Field3, path) -> None:
    """Raw snapshot: 4 little-endian int64 (Nt, Na, Nx, version; -1 marks an
    absent axis) followed by the float64 values, row-major."""
    counts = {ax: len(fld.grid.axis_nodes(ax)) - 1 for ax in fld.axes}
    header = [counts.get(ax, -1) for ax in _AXIS_ORDER] + [RAW_FORMAT_VERSION]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4q", *header))
        fh.write(np.ascontiguousarray(fld.values, dtype="<f8").tobytes())


def read_field_raw(path, grid: Grid):
    with open(path, "rb") as fh:
        nt, na, nx, version = struct.unpack("<4q", fh.read(32))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    if version != RAW_FORMAT_VERSION:
        raise ValueError(f"unsupported raw snapshot version {version}")
    counts = dict(zip(_AXIS_ORDER, (nt, na, nx)))
    axes = tuple(ax for ax in _AXIS_ORDER if counts[ax] >= 0)
    shape = tuple(counts[ax] + 1 for ax in axes)
    values = payload.reshape(shape).astype(float)
    if len(axes) == 3:
        return Field3(grid, values)
    return Field2(grid, values, axes)  # type: ignore[arg-type]
