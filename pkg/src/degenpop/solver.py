"""Forward population solver, exact-transpose adjoint, energy audit.

The forward scheme is Lie splitting per time step: exact age advection
(Delta t = Delta a moves every cohort one age cell), an implicit
conservative finite-volume diffusion-reaction solve per age level, then
the trapezoid renewal integral fills the newborn row.  The adjoint march
is the algebraic transpose of that one-step map in the uniform lattice
inner product Delta a * Delta x, which makes the duality identity

    <y(T), v_T> - <y0, v(0)> = dt * sum_n <f^n, obs^n>

exact to round-off; obs is the adjoint's post-diffusion intermediate
restricted to the control window, the quantity HUM feeds back as control.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .coeffs import DegenerateCoefficient, VitalRates
from .discretize import Field2, Field3, Grid, window_mask

__all__ = [
    "ProblemSpec",
    "Trajectory",
    "solve_forward",
    "solve_adjoint",
    "characteristic_gamma",
    "characteristic_consistency",
    "ConsistencyReport",
    "energy_audit",
    "EnergyAudit",
    "lattice_inner",
    "lattice_norm",
    "control_inner",
    "control_norm",
]


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficient, vital rates, grid and control window for one model."""

    k: DegenerateCoefficient
    rates: VitalRates
    grid: Grid
    omega: tuple[float, float]
    y0: Field2 | None = None

    def __post_init__(self) -> None:
        lo, hi = self.omega
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("control window must satisfy 0 < lo < hi < 1")
        if self.y0 is not None and self.y0.grid != self.grid:
            raise ValueError("initial data grid does not match the problem grid")


def lattice_inner(u: np.ndarray, v: np.ndarray, grid: Grid) -> float:
    """Uniform-lattice inner product over (a, x): da*dx*sum(u*v)."""
    return float(grid.da * grid.dx * np.sum(u * v))


def lattice_norm(u: np.ndarray, grid: Grid) -> float:
    return math.sqrt(lattice_inner(u, u, grid))


def control_inner(f: Field3, g: Field3) -> float:
    """L2 pairing over (0,T)x(0,A)x(0,1): dt * sum over steps n >= 1.

    Slice 0 is excluded: the march consumes f^1..f^Nt, one slice per step.
    """
    grid = f.grid
    if g.grid != grid:
        raise ValueError("control fields live on different grids")
    return float(grid.dt * grid.da * grid.dx
                 * np.sum(f.values[1:] * g.values[1:]))


def control_norm(f: Field3) -> float:
    return math.sqrt(control_inner(f, f))


def _thomas(diag: np.ndarray, lower: np.ndarray, upper: np.ndarray,
            rhs: np.ndarray) -> np.ndarray:
    """Solve the batched tridiagonal systems diag[r]*x = rhs[r].

    diag and rhs have shape (rows, N); lower/upper hold the (N-1,)
    off-diagonals shared by every row.  No pivoting: the diffusion
    matrices are strictly diagonally dominant M-matrices.
    """
    rows, n = rhs.shape
    cp = np.empty((rows, max(n - 1, 0)))
    xs = np.empty_like(rhs)
    piv = diag[:, 0].copy()
    _check_pivot(piv, 0)
    sol = np.empty_like(rhs)
    sol[:, 0] = rhs[:, 0] / piv
    for i in range(1, n):
        cp[:, i - 1] = upper[i - 1] / piv
        piv = diag[:, i] - lower[i - 1] * cp[:, i - 1]
        _check_pivot(piv, i)
        sol[:, i] = (rhs[:, i] - lower[i - 1] * sol[:, i - 1]) / piv
    xs[:, n - 1] = sol[:, n - 1]
    for i in range(n - 2, -1, -1):
        xs[:, i] = sol[:, i] - cp[:, i] * xs[:, i + 1]
    return xs


def _check_pivot(piv: np.ndarray, column: int) -> None:
    bad = np.abs(piv) < 1e-300
    if np.any(bad):
        row = int(np.argmax(bad))
        raise RuntimeError(
            f"tridiagonal solve failed at age level {row + 1} (column {column})")


class _Propagator:
    """Cached per-problem arrays shared by every forward/adjoint march."""

    def __init__(self, spec: ProblemSpec, t_offset: float = 0.0):
        grid = spec.grid
        if not grid.dt_equals_da:
            raise ValueError("solver requires a grid with dt equal to da")
        self.spec = spec
        self.grid = grid
        self.t_offset = t_offset
        self.k_faces = np.asarray(spec.k.face_values(grid.x_nodes), dtype=float)
        if np.any(self.k_faces < 0.0):
            raise ValueError("negative face diffusivity")
        self.beta = spec.rates.beta_grid(grid)
        if np.any(self.beta < 0.0):
            raise ValueError("negative fertility on the grid")
        denom = 1.0 - 0.5 * grid.da * self.beta[0]
        if np.any(denom <= 0.0):
            raise ValueError(
                "renewal quadrature factor nonpositive: da * beta(0,x) >= 2")
        self.renewal_c = 1.0 / denom
        w = np.full(grid.Na, grid.da)
        w[-1] = 0.5 * grid.da
        self.age_weights = w  # trapezoid weights for rows 1..Na
        lo, hi = spec.omega
        xs = grid.x_nodes
        self.omega_mask = window_mask(xs, lo, hi).astype(float)
        self.mu = np.stack([spec.rates.mu_grid(t_offset + n * grid.dt, grid)
                            for n in range(grid.Nt + 1)])
        if np.any(self.mu < 0.0):
            raise ValueError("negative mortality on the grid")
        ratio = grid.dt / grid.dx ** 2
        # off-diagonal between interior nodes i and i+1 is the interior
        # face coupling -dt*k_{i+1/2}/dx^2, identical on both sides
        self.offdiag = -ratio * self.k_faces[1:-1]
        self.diag_flux = ratio * (self.k_faces[:-1] + self.k_faces[1:])

    def _diag(self, level: int) -> np.ndarray:
        """Diagonal of the implicit matrix at a time level, rows 1..Na."""
        return (1.0 + self.grid.dt * self.mu[level][1:, 1:-1]
                + self.diag_flux[None, :])

    def solve_diffusion(self, level: int, rhs_rows: np.ndarray) -> np.ndarray:
        """Apply D^{-1} at ``level`` to interior-x data for rows 1..Na."""
        return _thomas(self._diag(level), self.offdiag, self.offdiag, rhs_rows)

    def apply_diffusion(self, level: int, rows: np.ndarray) -> np.ndarray:
        """Apply D at ``level`` to interior-x data for rows 1..Na."""
        out = self._diag(level) * rows
        out[:, 1:] += self.offdiag[None, :] * rows[:, :-1]
        out[:, :-1] += self.offdiag[None, :] * rows[:, 1:]
        return out

    def renewal_row(self, values: np.ndarray) -> np.ndarray:
        """Trapezoid renewal integral from rows 1..Na of ``values``."""
        integral = np.einsum("j,ji->i", self.age_weights,
                             self.beta[1:] * values[1:])
        return self.renewal_c * integral

    def flux_form(self, level_values: np.ndarray) -> float:
        """Discrete int int k y_x^2 over (a, x) at one time level."""
        diff = np.diff(level_values, axis=1)
        return float(self.grid.da / self.grid.dx
                     * np.sum(self.k_faces[None, :] * diff ** 2))


@dataclass
class Trajectory:
    """A stored space-age field per time level plus energy records."""

    state: Field3
    kind: str
    t_offset: float = 0.0
    norms: np.ndarray | None = None
    fluxes: np.ndarray | None = None
    control: Field3 | None = None
    observation: Field3 | None = None

    @property
    def grid(self) -> Grid:
        return self.state.grid

    def final_level(self) -> np.ndarray:
        return self.state.values[-1]

    def write_energy_csv(self, path) -> None:
        if self.norms is None or self.fluxes is None:
            raise ValueError("trajectory has no energy records")
        grid = self.grid
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "t", "supnorm", "flux"])
            for n in range(grid.Nt + 1):
                writer.writerow([n, repr(self.t_offset + n * grid.dt),
                                 repr(float(self.norms[n])),
                                 repr(float(self.fluxes[n]))])


def _control_slice(control: Field3 | None, prop: _Propagator, level: int) -> np.ndarray | None:
    if control is None:
        return None
    return control.values[level] * prop.omega_mask[None, :]


def solve_forward(spec: ProblemSpec, control: Field3 | None = None, *,
                  y0: Field2 | None = None, t_offset: float = 0.0) -> Trajectory:
    """March the population model forward from y0 with optional control.

    The control field is read one slice per step (slice n+1 drives the
    step n -> n+1) and is masked to the control window before use.
    """
    data = y0 if y0 is not None else spec.y0
    if data is None:
        raise ValueError("no initial data: pass y0 or set it on the problem")
    if data.grid != spec.grid:
        raise ValueError("initial data grid does not match the problem grid")
    if control is not None and control.grid != spec.grid:
        raise ValueError("control grid does not match the problem grid")
    prop = _Propagator(spec, t_offset)
    grid = spec.grid
    values = np.zeros((grid.Nt + 1, grid.Na + 1, grid.Nx + 1))
    values[0] = data.values
    norms = np.zeros(grid.Nt + 1)
    fluxes = np.zeros(grid.Nt + 1)
    norms[0] = lattice_norm(values[0], grid)
    fluxes[0] = prop.flux_form(values[0])
    for n in range(grid.Nt):
        rhs = values[n][:-1, 1:-1].copy()
        f_slice = _control_slice(control, prop, n + 1)
        if f_slice is not None:
            rhs += grid.dt * f_slice[1:, 1:-1]
        level = np.zeros((grid.Na + 1, grid.Nx + 1))
        level[1:, 1:-1] = prop.solve_diffusion(n + 1, rhs)
        level[0] = prop.renewal_row(level)
        values[n + 1] = level
        norms[n + 1] = lattice_norm(level, grid)
        fluxes[n + 1] = prop.flux_form(level)
    return Trajectory(state=Field3(grid, values), kind="forward",
                      t_offset=t_offset, norms=norms, fluxes=fluxes,
                      control=control)


def solve_adjoint(spec: ProblemSpec, v_T: Field2, *, source: Field3 | None = None,
                  renewal_coupling: bool = True, t_offset: float = 0.0) -> Trajectory:
    """March the exact discrete transpose backward from final data v_T.

    One backward step from level n+1 to n is

        q_j   = v^{n+1}_j + w_j c beta_j v^{n+1}(a=0)   (rows j >= 1)
        q_j  -= dt * source^{n+1}_j                      (when given)
        m     = D^{-1} q   per age row, interior x
        v^n_j = m_{j+1} for j < Na,  v^n_{Na} = 0

    where w_j are the trapezoid weights and c the renewal closing factor;
    dropping the coupling term gives the beta-free transpose.  The
    returned observation field stores chi_omega * m at slices 1..Nt: this
    is the integrand pairing with a forward control in the duality
    identity, hence the natural control sample of the adjoint state.
    """
    if v_T.grid != spec.grid:
        raise ValueError("final data grid does not match the problem grid")
    if source is not None and source.grid != spec.grid:
        raise ValueError("source grid does not match the problem grid")
    prop = _Propagator(spec, t_offset)
    grid = spec.grid
    values = np.zeros((grid.Nt + 1, grid.Na + 1, grid.Nx + 1))
    values[grid.Nt] = v_T.values
    obs = np.zeros_like(values)
    norms = np.zeros(grid.Nt + 1)
    fluxes = np.zeros(grid.Nt + 1)
    norms[grid.Nt] = lattice_norm(v_T.values, grid)
    fluxes[grid.Nt] = prop.flux_form(v_T.values)
    for n in range(grid.Nt - 1, -1, -1):
        w = values[n + 1]
        q = w[1:, 1:-1].copy()
        if renewal_coupling:
            coupling = (prop.age_weights[:, None] * prop.renewal_c[None, :]
                        * prop.beta[1:] * w[0][None, :])
            q += coupling[:, 1:-1]
        if source is not None:
            q -= grid.dt * source.values[n + 1][1:, 1:-1]
        m = np.zeros((grid.Na + 1, grid.Nx + 1))
        m[1:, 1:-1] = prop.solve_diffusion(n + 1, q)
        obs[n + 1] = prop.omega_mask[None, :] * m
        level = np.zeros_like(m)
        level[:-1] = m[1:]
        values[n] = level
        norms[n] = lattice_norm(level, grid)
        fluxes[n] = prop.flux_form(level)
    return Trajectory(state=Field3(grid, values), kind="adjoint",
                      t_offset=t_offset, norms=norms, fluxes=fluxes,
                      observation=Field3(grid, obs))


def characteristic_gamma(t: float, a: float, T_tilde: float, a_bar: float,
                         A: float) -> float:
    """Age-room along the backward characteristic: min(a_bar, A-a+t-T_tilde)."""
    return min(a_bar, A - a + t - T_tilde)


@dataclass(frozen=True)
class ConsistencyReport:
    samples: int
    max_abs_defect: float
    max_rel_defect: float
    scale: float


def characteristic_consistency(spec: ProblemSpec, v_T: Field2, *,
                               stride: int = 1) -> ConsistencyReport:
    """Check the adjoint against the characteristic-line representation.

    With beta identically zero the adjoint value at (t_n, a_j) equals the
    final data row a_j + (T - t_n) pushed through the per-level diffusion
    solves along the characteristic (zero once the characteristic exits
    through a = A).  Both paths use the same tridiagonal stepper, so the
    defect is pure round-off; it is reported relative to max|v_T|.
    """
    prop = _Propagator(spec)
    if np.any(prop.beta != 0.0):
        raise ValueError("characteristic consistency requires beta == 0")
    grid = spec.grid
    traj = solve_adjoint(spec, v_T, renewal_coupling=False)
    values = traj.state.values
    scale = float(np.max(np.abs(v_T.values)))
    worst = 0.0
    count = 0
    for n in range(0, grid.Nt + 1, stride):
        steps = grid.Nt - n
        for j in range(0, grid.Na + 1, stride):
            target = j + steps
            if target > grid.Na:
                ref = np.zeros(grid.Nx - 1)
            else:
                ref = v_T.values[target, 1:-1].copy()
                for m in range(grid.Nt - 1, n - 1, -1):
                    row = j + (m - n) + 1
                    diag = (1.0 + grid.dt * prop.mu[m + 1][row, 1:-1]
                            + prop.diag_flux)
                    ref = _thomas(diag[None, :], prop.offdiag, prop.offdiag,
                                  ref[None, :])[0]
            defect = float(np.max(np.abs(values[n, j, 1:-1] - ref)))
            worst = max(worst, defect)
            count += 1
    rel = worst / scale if scale > 0.0 else 0.0
    return ConsistencyReport(samples=count, max_abs_defect=worst,
                             max_rel_defect=rel, scale=scale)


@dataclass(frozen=True)
class EnergyAudit:
    sup_norm: float
    flux_integral: float
    rhs_bound: float
    constant: float
    passed: bool


def energy_audit(traj: Trajectory, spec: ProblemSpec) -> EnergyAudit:
    """Check sup_t ||y(t)||^2 + int int int k y_x^2 <= C(||y0||^2 + ||f||^2).

    C = exp(A ||beta||_inf^2 T) * (1 + T): the Gronwall rate of the
    renewal Jensen estimate composed with the source square completion.
    """
    if traj.norms is None or traj.fluxes is None:
        raise ValueError("trajectory has no energy records")
    grid = traj.grid
    beta_max = float(np.max(np.abs(
        spec.rates.beta_grid(grid))))
    c_beta = grid.A * beta_max ** 2
    constant = math.exp(c_beta * grid.T) * (1.0 + grid.T)
    sup_norm = float(np.max(traj.norms) ** 2)
    # right-endpoint rule: the implicit step's energy identity bounds
    # dt * sum_{n>=1} flux(y^n); slice 0 holds the given data, whose
    # gradient energy the estimate does not control
    flux_integral = float(grid.dt * np.sum(traj.fluxes[1:]))
    y0_sq = float(traj.norms[0] ** 2)
    f_sq = control_norm(traj.control) ** 2 if traj.control is not None else 0.0
    rhs_bound = constant * (y0_sq + f_sq)
    lhs = sup_norm + flux_integral
    passed = lhs <= rhs_bound * (1.0 + 1e-12) + 1e-300
    return EnergyAudit(sup_norm=sup_norm, flux_integral=flux_integral,
                       rhs_bound=rhs_bound, constant=constant, passed=passed)
