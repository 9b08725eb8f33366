"""Null-control construction: penalized HUM, delay composition, gluing.

The quadratic minimized by conjugate gradient equals the penalized dual
functional exactly at the discrete level, because the solver's adjoint is
the exact transpose of its forward step.  All certificates reported here
are therefore post-hoc identities of the computed numbers, not continuum
estimates.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .coeffs import classify_degeneracy
from .discretize import Field2, Field3, Grid, window_mask
from .inequalities import CutoffFamily, nodal_gradient_x
from .solver import (ProblemSpec, Trajectory, _Propagator, control_norm,
                     lattice_inner, lattice_norm, solve_adjoint, solve_forward)

__all__ = [
    "HUMConfig",
    "ControlSolution",
    "ControlError",
    "hum_control",
    "compose_delay_control",
    "glue_two_sided",
    "control_bound_report",
    "forward_defect",
    "scheme_consistency_error",
]


class ControlError(RuntimeError):
    """Breakdown of the control solve; carries the CG residual curve."""

    def __init__(self, message: str, residuals=()):
        super().__init__(message)
        self.residuals = tuple(float(r) for r in residuals)


@dataclass(frozen=True, kw_only=True)
class HUMConfig:
    epsilon: float = 1e-6
    cg_tol: float = 1e-8
    cg_max_iter: int = 300
    delta: float

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.cg_tol <= 0.0 or self.cg_max_iter < 1:
            raise ValueError("cg_tol must be positive and cg_max_iter >= 1")


@dataclass
class ControlSolution:
    """A computed control with its certificates and solve diagnostics.

    final_residual is the lattice norm of y(T) over the target rows
    delta < a < A; j_star the achieved value of the penalized functional
    (primal form 0.5*||f||^2 + ||y(T)||^2/(2 eps)), so the certificate
    final_residual <= sqrt(2 eps j_star) is an identity of the reported
    numbers.  bound_ratio is control_norm / ||y0||.
    """

    f: Field3
    y: Trajectory
    final_residual: float
    control_norm: float
    bound_ratio: float
    epsilon: float | None = None
    j_star: float | None = None
    certificate: float | None = None
    cg_iterations: int = 0
    cg_residuals: tuple = ()
    cg_functionals: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    def write_cg_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["iter", "functional", "residual"])
            for i, (q, r) in enumerate(zip(self.cg_functionals,
                                           self.cg_residuals)):
                writer.writerow([i, repr(float(q)), repr(float(r))])

    def write_summary(self, path) -> None:
        payload = {
            "final_residual": self.final_residual,
            "control_norm": self.control_norm,
            "bound_ratio": self.bound_ratio,
            "epsilon": self.epsilon,
            "j_star": self.j_star,
            "certificate": self.certificate,
            "cg_iterations": self.cg_iterations,
            **{k: v for k, v in self.diagnostics.items()
               if isinstance(v, (int, float, str, bool, list))},
        }
        with open(path, "w") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")


# ---------------------------------------------------------------------------
# penalized HUM


def _target_rows(grid: Grid, delta: float) -> np.ndarray:
    if not grid.T < delta < grid.A:
        raise ValueError(
            f"delta must lie in (T, A) = ({grid.T:g}, {grid.A:g}), got {delta:g}")
    idx = np.nonzero((grid.a_nodes > delta) & (grid.a_nodes < grid.A))[0]
    if idx.size == 0:
        raise ValueError("no age rows strictly between delta and A; refine the grid")
    return idx


class _Gramian:
    """xi -> restriction of the controlled final state driven by xi.

    xi holds nodal adjoint final data on the target rows (interior x
    columns); the map is adjoint solve -> forward solve from zero ->
    final-state restriction, self-adjoint and positive semidefinite in the
    lattice inner product by the discrete duality identity.
    """

    def __init__(self, spec: ProblemSpec, rows: np.ndarray, t_start: float):
        self.spec = spec
        self.rows = rows
        self.t_start = t_start
        self.grid = spec.grid
        self._zero_y0 = Field2.zeros(spec.grid)

    def embed(self, xi: np.ndarray) -> Field2:
        vals = np.zeros((self.grid.Na + 1, self.grid.Nx + 1))
        vals[self.rows, 1:-1] = xi
        return Field2(self.grid, vals)

    def restrict(self, final_values: np.ndarray) -> np.ndarray:
        return final_values[self.rows][:, 1:-1].copy()

    def observation(self, xi: np.ndarray) -> Field3:
        traj = solve_adjoint(self.spec, self.embed(xi),
                             renewal_coupling=True, t_offset=self.t_start)
        return traj.observation

    def apply(self, xi: np.ndarray) -> np.ndarray:
        obs = self.observation(xi)
        traj = solve_forward(self.spec, control=obs, y0=self._zero_y0,
                             t_offset=self.t_start)
        return self.restrict(traj.final_level())

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return lattice_inner(u, v, self.grid)


def _conjugate_gradient(op: _Gramian, b: np.ndarray, epsilon: float,
                        tol: float, max_iter: int):
    """Solve (Gramian + epsilon) xi = -b, logging the dual functional.

    The logged functional q(xi) = 0.5 <(Lambda+eps) xi, xi> + <b, xi> is
    exactly the penalized functional J_eps of the embedded final data; CG
    decreases it by 0.5 * alpha * <r, r> per step, hence monotonically.
    """
    xi = np.zeros_like(b)
    r = -b.copy()
    rs = op.inner(r, r)
    rs0 = math.sqrt(rs)
    residuals = [rs0]
    functionals = [0.0]
    if rs0 == 0.0:
        return xi, residuals, functionals
    p = r.copy()
    q = 0.0
    best = rs0
    since_best = 0
    for _ in range(max_iter):
        if math.sqrt(rs) <= tol * rs0:
            break
        a_p = op.apply(p) + epsilon * p
        p_ap = op.inner(p, a_p)
        if p_ap <= 0.0:
            raise ControlError(
                "Gramian lost positive definiteness (curvature "
                f"{p_ap:.3e}); duality is broken", residuals)
        alpha = rs / p_ap
        xi += alpha * p
        q -= 0.5 * alpha * rs
        r -= alpha * a_p
        rs_new = op.inner(r, r)
        res = math.sqrt(rs_new)
        residuals.append(res)
        functionals.append(q)
        if res < best:
            best = res
            since_best = 0
        else:
            since_best += 1
        # plain CG residuals oscillate; a plateau only means breakdown
        # when the (provably monotone) functional has stopped moving too
        if since_best > 20:
            progress = functionals[-21] - q
            if progress <= 1e-14 * max(abs(q), 1e-300):
                raise ControlError(
                    "CG stagnated: no residual reduction over 20 iterations",
                    residuals)
        p = r + (rs_new / rs) * p
        rs = rs_new
    else:
        warnings.warn(
            f"CG hit the iteration cap ({max_iter}) at relative residual "
            f"{math.sqrt(rs) / rs0:.3e}")
    return xi, residuals, functionals


def hum_control(spec: ProblemSpec, config: HUMConfig, *,
                y0: Field2 | None = None, t_start: float = 0.0) -> ControlSolution:
    """Penalized-HUM control steering the target age rows toward zero.

    Minimizes J_eps over adjoint final data supported on the rows
    delta < a < A (interior x columns, so v_T(A,.) = 0 and the Dirichlet
    rows hold), using conjugate gradient on the gradient map
    xi -> Gramian(xi) + eps*xi + b.  The control is the masked adjoint
    observation of the minimizer.
    """
    grid = spec.grid
    data = y0 if y0 is not None else spec.y0
    if data is None:
        raise ValueError("no initial data: set spec.y0 or pass y0")
    rows = _target_rows(grid, config.delta)
    op = _Gramian(spec, rows, t_start)

    free = solve_forward(spec, y0=data, t_offset=t_start)
    b = op.restrict(free.final_level())
    xi, residuals, functionals = _conjugate_gradient(
        op, b, config.epsilon, config.cg_tol, config.cg_max_iter)

    f = op.observation(xi) if np.any(xi) else Field3.zeros(grid)
    traj = solve_forward(spec, control=f, y0=data, t_offset=t_start)
    final_residual = lattice_norm(op.restrict(traj.final_level()), grid)
    f_norm = control_norm(f)
    j_star = 0.5 * f_norm ** 2 + final_residual ** 2 / (2.0 * config.epsilon)
    certificate = math.sqrt(2.0 * config.epsilon * j_star)
    if final_residual > certificate * (1.0 + 1e-9):
        raise ControlError(
            "final residual exceeds the epsilon certificate; "
            "internal consistency lost", residuals)
    y0_norm = lattice_norm(data.values, grid)
    return ControlSolution(
        f=f, y=traj, final_residual=final_residual, control_norm=f_norm,
        bound_ratio=f_norm / y0_norm if y0_norm > 0.0 else 0.0,
        epsilon=config.epsilon, j_star=j_star, certificate=certificate,
        cg_iterations=len(residuals) - 1,
        cg_residuals=tuple(residuals), cg_functionals=tuple(functionals),
        diagnostics={"duality_gap": j_star + functionals[-1],
                     "t_start": t_start})


# ---------------------------------------------------------------------------
# delay composition


def compose_delay_control(spec: ProblemSpec, config: HUMConfig, *,
                          y0: Field2 | None = None) -> ControlSolution:
    """Control vanishing before T_tilde = T - a_bar, active afterwards.

    Phase one lets the population evolve freely to T_tilde; phase two runs
    hum_control on the remaining window from the reached state.  a_bar is
    snapped to the time lattice with a warning when off it.  The reported
    intermediate bound is the discrete renewal-growth estimate
    ||u(T_tilde)||^2 <= exp(C*T)*||y0||^2 with C = A * max(beta)^2.
    """
    grid = spec.grid
    data = y0 if y0 is not None else spec.y0
    if data is None:
        raise ValueError("no initial data: set spec.y0 or pass y0")
    a_bar = spec.rates.a_bar
    if not 0.0 < a_bar <= grid.T:
        raise ValueError("need 0 < a_bar <= T for the delay construction")
    steps = a_bar / grid.dt
    n_ctrl = int(round(steps))
    if abs(steps - n_ctrl) > 1e-9 * max(1.0, steps):
        warnings.warn(
            f"a_bar = {a_bar:g} is not a multiple of dt; snapping to "
            f"{n_ctrl * grid.dt:g}")
    n_ctrl = min(max(n_ctrl, 1), grid.Nt)
    n_tilde = grid.Nt - n_ctrl
    t_tilde = n_tilde * grid.dt

    free = solve_forward(spec, y0=data)
    window_grid = grid.with_time(grid.T - t_tilde, n_ctrl)
    switch_state = Field2(window_grid, free.state.values[n_tilde].copy())
    switch_norm = lattice_norm(switch_state.values, grid)
    beta_max = float(np.max(spec.rates.beta_grid(grid)))
    growth = grid.A * beta_max ** 2
    switch_bound = math.exp(0.5 * growth * grid.T) * lattice_norm(
        data.values, grid)

    window_spec = ProblemSpec(k=spec.k, rates=spec.rates, grid=window_grid,
                              omega=spec.omega)
    inner = hum_control(window_spec, config, y0=switch_state, t_start=t_tilde)

    f_vals = np.zeros((grid.Nt + 1, grid.Na + 1, grid.Nx + 1))
    f_vals[n_tilde + 1:] = inner.f.values[1:]
    f = Field3(grid, f_vals)
    y_vals = np.concatenate([free.state.values[:n_tilde + 1],
                             inner.y.state.values[1:]], axis=0)
    norms = np.concatenate([free.norms[:n_tilde + 1], inner.y.norms[1:]])
    fluxes = np.concatenate([free.fluxes[:n_tilde + 1], inner.y.fluxes[1:]])
    traj = Trajectory(state=Field3(grid, y_vals), kind="delay-composed",
                      norms=norms, fluxes=fluxes, control=f)

    y0_norm = lattice_norm(data.values, grid)
    return ControlSolution(
        f=f, y=traj, final_residual=inner.final_residual,
        control_norm=control_norm(f),
        bound_ratio=control_norm(f) / y0_norm if y0_norm > 0.0 else 0.0,
        epsilon=config.epsilon, j_star=inner.j_star,
        certificate=inner.certificate, cg_iterations=inner.cg_iterations,
        cg_residuals=inner.cg_residuals, cg_functionals=inner.cg_functionals,
        diagnostics={"t_tilde": t_tilde, "switch_norm": switch_norm,
                     "switch_bound": switch_bound,
                     "growth_constant": growth})


# ---------------------------------------------------------------------------
# discrete residual of a (state, source) pair


def forward_defect(spec: ProblemSpec, state: Field3, source: Field3 | None,
                   *, t_offset: float = 0.0) -> float:
    """Worst per-step defect of the forward scheme, in equation units.

    For each step the implicit operator is applied to the stored new level
    and compared with the age-shifted old level plus dt times the source;
    the defect norm is divided by dt so it measures the PDE residual.  The
    source enters unmasked (callers restrict support themselves).
    """
    grid = spec.grid
    prop = _Propagator(spec, t_offset=t_offset)
    vals = state.values
    worst = 0.0
    for n in range(grid.Nt):
        rhs = vals[n][:-1, 1:-1].copy()
        if source is not None:
            rhs += grid.dt * source.values[n + 1][1:, 1:-1]
        defect = prop.apply_diffusion(n + 1, vals[n + 1][1:, 1:-1]) - rhs
        worst = max(worst, lattice_norm(defect, grid) / grid.dt)
    return worst


def scheme_consistency_error(spec: ProblemSpec, *, amplitude: float = 1.0,
                             t_offset: float = 0.0) -> float:
    """Defect of a smooth closed-form state with its symbolic source.

    The yardstick for assembly checks: a manufactured solution
    amplitude * e^{-t} a(A-a)/A^2 sin(pi xhat) is evaluated on the grid
    together with its exact source, and the forward defect of that pair is
    the scheme's own consistency error at this resolution.
    """
    grid = spec.grid
    lo, hi = grid.x_span
    span = hi - lo
    coef = spec.k

    def y_star(t, a, x):
        xhat = (x - lo) / span
        return (amplitude * np.exp(-t) * a * (grid.A - a) / grid.A ** 2
                * np.sin(np.pi * xhat))

    def source(t, a, x):
        xhat = (x - lo) / span
        sin_part = np.sin(np.pi * xhat)
        cos_part = np.cos(np.pi * xhat)
        q = a * (grid.A - a) / grid.A ** 2
        q_a = (grid.A - 2.0 * a) / grid.A ** 2
        amp_t = amplitude * np.exp(-t)
        y_t = -amp_t * q * sin_part
        y_a = amp_t * q_a * sin_part
        y_x = amp_t * q * cos_part * np.pi / span
        y_xx = -amp_t * q * sin_part * (np.pi / span) ** 2
        diff = coef.kprime(x) * y_x + coef.k(x) * y_xx
        mu = np.asarray(spec.rates.mu(t, a, x), dtype=float)
        return y_t + y_a - diff + mu * amp_t * q * sin_part

    state = Field3.from_function(
        grid, lambda t, a, x: y_star(t + t_offset, a, x))
    # k' can blow up at a degenerate endpoint; the defect only reads the
    # source at interior x nodes, so evaluate it there and leave the
    # boundary columns at zero.
    t = grid.t_nodes[:, None, None]
    a = grid.a_nodes[None, :, None]
    x = grid.x_nodes[None, None, 1:-1]
    src_vals = np.zeros(state.values.shape)
    src_vals[:, :, 1:-1] = np.broadcast_to(
        source(t + t_offset, a, x), src_vals[:, :, 1:-1].shape)
    src = Field3(grid, src_vals)
    return forward_defect(spec, state, src, t_offset=t_offset)


# ---------------------------------------------------------------------------
# two-sided gluing


def _snap_to_node(grid: Grid, value: float, what: str) -> int:
    idx = int(round((value - grid.x_span[0]) / grid.dx))
    idx = min(max(idx, 1), grid.Nx - 1)
    snapped = float(grid.x_nodes[idx])
    if abs(snapped - value) > 1e-12 * max(1.0, abs(value)):
        warnings.warn(f"{what} = {value:g} snapped to the grid node {snapped:g}")
    return idx


def _face_commutator(k_faces: np.ndarray, cut: np.ndarray,
                     u: np.ndarray, dx: float) -> np.ndarray:
    """Nodal values of -(k c' u)_x - k c' u_x in the solver's face form.

    With face slopes dc_{i+1/2} = (c_{i+1}-c_i)/dx this is
    -(k_{i+1/2} dc_{i+1/2} u_{i+1} - k_{i-1/2} dc_{i-1/2} u_{i-1}) / dx,
    exactly the commutator of the nodal cut-off with the discrete
    diffusion operator, so the assembled residual carries no new error.
    """
    dcut = np.diff(cut) / dx
    flux = k_faces * dcut
    out = np.zeros_like(u)
    out[..., 1:-1] = -(flux[1:] * u[..., 2:] - flux[:-1] * u[..., :-2]) / dx
    return out


def _extend_columns(values: np.ndarray, n_t: int, n_a: int, n_x: int,
                    col_lo: int) -> np.ndarray:
    out = np.zeros((n_t, n_a, n_x))
    out[:, :, col_lo:col_lo + values.shape[2]] = values
    return out


def glue_two_sided(spec: ProblemSpec, config: HUMConfig, alpha_bar: float,
                   beta_bar: float) -> ControlSolution:
    """Control for k degenerate at both endpoints by cut-off gluing.

    Solves delayed one-sided problems on (0, beta_bar) and (alpha_bar, 1),
    extends them by zero, adds the free solution weighted by
    F(t) = (T-t)/T, and assembles y = xi*u1 + eta*u2 + F*phi*u3 with the
    matching source.  The cut-off commutator terms use the solver's face
    stencil, so the discrete residual of (y, f_delta) stays at the scale
    of round-off rather than of the cut-off derivatives.
    """
    grid = spec.grid
    if spec.y0 is None:
        raise ValueError("glue_two_sided needs spec.y0")
    report = classify_degeneracy(spec.k)
    if not (report.degenerate_at_zero and report.degenerate_at_one):
        raise ValueError("gluing requires degeneracy at both endpoints")
    lo, hi = spec.omega
    if not (0.0 < alpha_bar < lo and hi < beta_bar < 1.0):
        raise ValueError("need 0 < alpha_bar < omega and omega < beta_bar < 1")
    i_a = _snap_to_node(grid, alpha_bar, "alpha_bar")
    i_b = _snap_to_node(grid, beta_bar, "beta_bar")
    if not 0 < i_a < int(np.searchsorted(grid.x_nodes, lo)) \
            or not int(np.searchsorted(grid.x_nodes, hi)) < i_b < grid.Nx:
        raise ValueError("snapped cut points collide with the control window")

    xs = grid.x_nodes
    grid1 = Grid(T=grid.T, A=grid.A, Nt=grid.Nt, Na=grid.Na, Nx=i_b,
                 x_span=(0.0, float(xs[i_b])))
    grid2 = Grid(T=grid.T, A=grid.A, Nt=grid.Nt, Na=grid.Na, Nx=grid.Nx - i_a,
                 x_span=(float(xs[i_a]), 1.0))
    y0_1 = Field2(grid1, spec.y0.values[:, :i_b + 1].copy())
    y0_2 = Field2(grid2, spec.y0.values[:, i_a:].copy())
    spec1 = ProblemSpec(k=spec.k, rates=spec.rates, grid=grid1,
                        omega=spec.omega, y0=y0_1)
    spec2 = ProblemSpec(k=spec.k, rates=spec.rates, grid=grid2,
                        omega=spec.omega, y0=y0_2)

    sol1 = compose_delay_control(spec1, config)
    sol2 = compose_delay_control(spec2, config)
    free = solve_forward(spec)

    shape = (grid.Nt + 1, grid.Na + 1, grid.Nx + 1)
    u1 = _extend_columns(sol1.y.state.values, *shape, col_lo=0)
    h1 = _extend_columns(sol1.f.values, *shape, col_lo=0)
    u2 = _extend_columns(sol2.y.state.values, *shape, col_lo=i_a)
    h2 = _extend_columns(sol2.f.values, *shape, col_lo=i_a)
    u3 = free.state.values

    cuts = CutoffFamily(lo, hi)
    xi = cuts.xi(xs)
    eta = cuts.eta(xs)
    phi = cuts.phi_cut(xs)
    f_lv = ((grid.T - grid.t_nodes) / grid.T)[:, None, None]  # F(t)

    y_vals = xi[None, None, :] * u1 + eta[None, None, :] * u2 \
        + f_lv * phi[None, None, :] * u3
    y_vals[0] = spec.y0.values.copy()

    prop = _Propagator(spec)
    k_faces = prop.k_faces
    f_vals = xi[None, None, :] * h1 + eta[None, None, :] * h2
    # -(1/T) phi u3 evaluated at the foot of the characteristic (previous
    # level, previous age row): the discretization of the F-derivative
    # term that keeps the assembled defect at round-off
    f_vals[1:, 1:, :] -= (1.0 / grid.T) * phi[None, None, :] * u3[:-1, :-1, :]
    f_vals[1:, 0, :] -= (1.0 / grid.T) * phi[None, :] * u3[:-1, 0, :]
    f_vals[1:] += _face_commutator(k_faces, xi, u1[1:], grid.dx)
    f_vals[1:] += _face_commutator(k_faces, eta, u2[1:], grid.dx)
    f_vals[1:] += f_lv[1:] * _face_commutator(k_faces, phi, u3[1:], grid.dx)
    f_vals[0] = 0.0
    f = Field3(grid, f_vals)

    outside = ~window_mask(xs, lo, hi)
    if np.max(np.abs(f_vals[:, :, outside]), initial=0.0) != 0.0:
        raise ControlError("assembled control leaks outside the window")

    residual = forward_defect(spec, Field3(grid, y_vals), f)
    y0_sup = float(np.max(np.abs(spec.y0.values)))
    baseline = scheme_consistency_error(spec, amplitude=max(y0_sup, 1.0))
    if residual > 10.0 * baseline:
        raise ControlError(
            f"assembled residual {residual:.3e} exceeds 10x the scheme "
            f"consistency error {baseline:.3e}; assembly bug")

    renewal_defect = 0.0
    for n in range(1, grid.Nt + 1):
        predicted = prop.renewal_row(y_vals[n])
        renewal_defect = max(renewal_defect,
                             float(np.max(np.abs(y_vals[n][0] - predicted))))

    norms = np.array([lattice_norm(y_vals[n], grid)
                      for n in range(grid.Nt + 1)])
    fluxes = np.array([prop.flux_form(y_vals[n])
                       for n in range(grid.Nt + 1)])
    traj = Trajectory(state=Field3(grid, y_vals), kind="glued",
                      norms=norms, fluxes=fluxes, control=f)

    rows = _target_rows(grid, config.delta)
    final_residual = lattice_norm(y_vals[-1][rows][:, 1:-1], grid)
    combined = (sol1.certificate or 0.0) + (sol2.certificate or 0.0)
    f_norm = control_norm(f)
    y0_norm = lattice_norm(spec.y0.values, grid)
    return ControlSolution(
        f=f, y=traj, final_residual=final_residual, control_norm=f_norm,
        bound_ratio=f_norm / y0_norm if y0_norm > 0.0 else 0.0,
        epsilon=config.epsilon, j_star=None, certificate=combined,
        diagnostics={"residual": residual, "baseline": baseline,
                     "renewal_defect": renewal_defect,
                     "alpha_bar": float(xs[i_a]), "beta_bar": float(xs[i_b]),
                     "sub_residuals": [sol1.final_residual,
                                       sol2.final_residual]})


# ---------------------------------------------------------------------------
# ensemble reporting


def control_bound_report(solutions) -> dict:
    """Tabulate bound_ratio over an ensemble and assert finiteness."""
    if not solutions:
        raise ValueError("empty solution list")
    rows = []
    for i, sol in enumerate(solutions):
        if not math.isfinite(sol.bound_ratio):
            raise ArithmeticError(f"solution {i} has non-finite bound_ratio")
        rows.append({"run": i, "control_norm": sol.control_norm,
                     "final_residual": sol.final_residual,
                     "bound_ratio": sol.bound_ratio})
    ratios = [r["bound_ratio"] for r in rows if r["bound_ratio"] > 0.0]
    return {"rows": rows, "max_ratio": max(ratios) if ratios else None}
