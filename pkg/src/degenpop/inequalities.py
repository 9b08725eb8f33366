"""Empirical audits of the weighted functional inequalities.

Each audit evaluates both sides of an inequality on a family of exact
discrete solutions and reports the worst ratio as an empirical constant.
The weighted integrands combine singular time-age factors with
exponentially small weights, so every integrand is assembled in log
space: the exponent is set to -inf at the Theta poles and wherever the
field vanishes, which makes those quadrature nodes contribute exactly 0
instead of NaN.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .coeffs import (CarlemanWeights, DegenerateCoefficient, PowerLaw,
                     Tabulated, build_carleman_weights, classify_degeneracy,
                     eval_theta)
from .discretize import (
    Field2,
    Field3,
    Grid,
    integrate_nodes,
    spawn_rng,
    weighted_norm,
    window_mask,
)
from .solver import ProblemSpec, _Propagator, solve_adjoint

__all__ = [
    "InequalityReport",
    "ReportRow",
    "CutoffFamily",
    "hardy_ratio",
    "hardy_ratio_at_zero",
    "random_hardy_test_functions",
    "manufactured_adjoint",
    "random_adjoint_profiles",
    "manufactured_family",
    "nodal_gradient_x",
    "carleman_audit_deg0",
    "carleman_audit_deg1",
    "carleman_audit_nondeg",
    "carleman_local_audit",
    "caccioppoli_audit",
    "observability_ratio",
    "reflect_coefficient",
    "reflect_field",
]


@dataclass(frozen=True)
class ReportRow:
    sample_id: int
    s: float
    lhs: float
    rhs: float
    ratio: float | None  # None marks an excluded 0/0 sample


@dataclass
class InequalityReport:
    name: str
    rows: tuple[ReportRow, ...]
    s_used: tuple[float, ...]
    empirical_constant: float | None
    unstable_s: bool = False
    meta: dict = field(default_factory=dict)

    def ratios(self) -> list[float]:
        return [r.ratio for r in self.rows if r.ratio is not None]

    def per_s_constant(self) -> dict[float, float]:
        out: dict[float, float] = {}
        for r in self.rows:
            if r.ratio is not None:
                out[r.s] = max(out.get(r.s, 0.0), r.ratio)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["sample_id", "s", "lhs", "rhs", "ratio"])
            for r in self.rows:
                writer.writerow([r.sample_id, repr(r.s), repr(r.lhs), repr(r.rhs),
                                 "" if r.ratio is None else repr(r.ratio)])

    def summary(self) -> dict:
        return {
            "name": self.name,
            "empirical_constant": self.empirical_constant,
            "sweep": list(self.s_used),
            "unstable_s": self.unstable_s,
            "samples": len({r.sample_id for r in self.rows}),
            **self.meta,
        }

    def write_summary(self, path) -> None:
        with open(path, "w") as handle:
            json.dump(self.summary(), handle, indent=2, sort_keys=True)
            handle.write("\n")


def _finish_report(name, rows, sweep, meta) -> InequalityReport:
    ratios = [r.ratio for r in rows if r.ratio is not None]
    constant = max(ratios) if ratios else None
    report = InequalityReport(name=name, rows=tuple(rows), s_used=tuple(sweep),
                              empirical_constant=constant, meta=meta)
    per_s = report.per_s_constant()
    svals = sorted(per_s)
    if len(svals) >= 4:
        top = svals[len(svals) // 2:]
        seq = [per_s[s] for s in top]
        growing = all(b > a for a, b in zip(seq, seq[1:]))
        if growing and per_s[svals[-1]] > 5.0 * per_s[svals[0]] > 0.0:
            report.unstable_s = True
    return report


# ---------------------------------------------------------------------------
# cut-off functions


def _smoothstep(u: np.ndarray) -> np.ndarray:
    return 6.0 * u ** 5 - 15.0 * u ** 4 + 10.0 * u ** 3


def _smoothstep_d1(u: np.ndarray) -> np.ndarray:
    return 30.0 * u ** 4 - 60.0 * u ** 3 + 30.0 * u ** 2


def _smoothstep_d2(u: np.ndarray) -> np.ndarray:
    return 120.0 * u ** 3 - 180.0 * u ** 2 + 60.0 * u


def _ramp(x, lo, hi, derivative: int):
    """C^2 quintic rise from 0 at lo to 1 at hi, clamped outside."""
    x = np.asarray(x, dtype=float)
    u = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    if derivative == 0:
        return _smoothstep(u)
    inner = {1: _smoothstep_d1, 2: _smoothstep_d2}[derivative](u)
    active = (x > lo) & (x < hi)
    return np.where(active, inner / (hi - lo) ** derivative, 0.0)


@dataclass(frozen=True)
class CutoffFamily:
    """The three C^2 cut-offs of the two-sided gluing construction.

    xi is 1 left of q1 = (2*alpha+rho)/3 and 0 right of the midpoint m of
    [q1, q2]; eta mirrors it (0 left of m, 1 right of q2 = (alpha+2*rho)/3);
    phi_cut = 1 - xi - eta is the interior bump; tau plateaus at 1 on
    [q1, q2] and vanishes outside (alpha_tilde, rho_tilde).  All
    derivatives are supported strictly inside omega = (alpha, rho).
    """

    alpha: float
    rho: float

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < self.rho < 1.0:
            raise ValueError("cut-off window must satisfy 0 < alpha < rho < 1")

    @property
    def q1(self) -> float:
        return (2.0 * self.alpha + self.rho) / 3.0

    @property
    def q2(self) -> float:
        return (self.alpha + 2.0 * self.rho) / 3.0

    @property
    def mid(self) -> float:
        return 0.5 * (self.q1 + self.q2)

    @property
    def alpha_tilde(self) -> float:
        return 0.5 * (self.alpha + self.q1)

    @property
    def rho_tilde(self) -> float:
        return 0.5 * (self.q2 + self.rho)

    def xi(self, x, derivative: int = 0):
        val = _ramp(x, self.q1, self.mid, derivative)
        return (1.0 - val) if derivative == 0 else -val

    def eta(self, x, derivative: int = 0):
        return _ramp(x, self.mid, self.q2, derivative)

    def phi_cut(self, x, derivative: int = 0):
        base = 1.0 if derivative == 0 else 0.0
        return base - self.xi(x, derivative) - self.eta(x, derivative)

    def tau(self, x, derivative: int = 0):
        rise = _ramp(x, self.alpha_tilde, self.q1, derivative)
        fall = _ramp(x, self.q2, self.rho_tilde, derivative)
        return rise - fall


# ---------------------------------------------------------------------------
# Hardy-Poincare ratios

_HARDY_CASES = ("HP1", "HP1p", "HP2", "HP2p")


def _as_pairs(test_functions):
    pairs = []
    for item in test_functions:
        if callable(item):
            pairs.append((item, None))
        else:
            w, wp = item
            pairs.append((w, wp))
    return pairs


def hardy_ratio(k, theta: float, case: str, test_functions, *,
                n_quad: int = 400_001) -> InequalityReport:
    """Ratios of int k/(1-x)^2 w^2 over int k |w'|^2 per test function.

    ``case`` follows the proposition's naming: HP1/HP1p need w(1) = 0 and
    theta in (0,1); HP2/HP2p need w(0) = 0 and theta in (1,2).  For the
    primed cases, where k/(1-x)^theta is monotone on all of (0,1), the
    ratio is checked against the closed bound 4/(1-theta)^2 and an
    arithmetic error is raised on violation (that bound is exact theory,
    so exceeding it means a quadrature or input bug).
    """
    if case not in _HARDY_CASES:
        raise ValueError(f"unknown case {case!r}; expected one of {_HARDY_CASES}")
    if case in ("HP1", "HP1p"):
        if not 0.0 < theta < 1.0:
            raise ValueError("theta must lie in (0,1) for HP1 cases")
        vanish_at = 1.0
    else:
        if not 1.0 < theta < 2.0:
            raise ValueError("theta must lie in (1,2) for HP2 cases")
        vanish_at = 0.0
    bound = 4.0 / (1.0 - theta) ** 2
    nodes = np.linspace(0.0, 1.0, n_quad)
    k_fn = k.k if hasattr(k, "k") else k
    kv = np.asarray(k_fn(nodes), dtype=float)

    def weight_lhs(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return k_fn(x) / (1.0 - x) ** 2

    rows = []
    for idx, (w, wp) in enumerate(_as_pairs(test_functions)):
        wv = np.asarray(w(nodes), dtype=float)
        scale = float(np.max(np.abs(wv)))
        edge = abs(float(w(np.asarray(vanish_at))))
        if scale > 0.0 and edge > 1e-9 * scale:
            raise ValueError(
                f"test function {idx} does not vanish at x = {vanish_at:g}")
        if wp is None:
            wpv = np.gradient(wv, nodes, edge_order=2)
        else:
            wpv = np.asarray(wp(nodes), dtype=float)
        lhs = weighted_norm(wv, (nodes,), weight=weight_lhs)
        rhs = integrate_nodes(kv * wpv ** 2, (float(nodes[1] - nodes[0]),))
        if lhs == 0.0 and rhs == 0.0:
            rows.append(ReportRow(idx, 0.0, 0.0, 0.0, None))
            continue
        ratio = lhs / rhs
        if case.endswith("p") and ratio > bound * (1.0 + 1e-9):
            raise ArithmeticError(
                f"Hardy ratio {ratio:.6g} exceeds the certified bound {bound:.6g}")
        rows.append(ReportRow(idx, 0.0, lhs, rhs, ratio))
    return _finish_report("hardy", rows, (), {"case": case, "theta": theta,
                                              "bound": bound})


def hardy_ratio_at_zero(k, theta: float, case: str, test_functions, *,
                        n_quad: int = 400_001) -> InequalityReport:
    """Mirror inequality int k/x^2 w^2 <= C int k |w'|^2 via x -> 1-x.

    Inputs describe the problem near x = 0 (so HP1 cases need w(0) = 0);
    everything is reflected and delegated, which keeps the two audits
    identical by construction.
    """
    k_fn = k.k if hasattr(k, "k") else k

    def k_reflected(x):
        return k_fn(1.0 - np.asarray(x, dtype=float))

    reflected = []
    for w, wp in _as_pairs(test_functions):
        def make(wf, wpf):
            rw = lambda x: wf(1.0 - np.asarray(x, dtype=float))
            rwp = None if wpf is None else (
                lambda x: -wpf(1.0 - np.asarray(x, dtype=float)))
            return rw, rwp
        reflected.append(make(w, wp))
    report = hardy_ratio(k_reflected, theta, case, reflected, n_quad=n_quad)
    report.name = "hardy_at_zero"
    return report


def random_hardy_test_functions(case: str, count: int, seed: int, *,
                                degree: int = 6):
    """Smooth random polynomials satisfying the case's vanishing condition."""
    rng = spawn_rng(seed, stream=11)
    pairs = []
    vanish_at_one = case in ("HP1", "HP1p")
    for _ in range(count):
        poly = np.polynomial.Polynomial(rng.standard_normal(degree + 1))
        edge = np.polynomial.Polynomial([1.0, -1.0]) if vanish_at_one \
            else np.polynomial.Polynomial([0.0, 1.0])
        w = edge * poly
        pairs.append((w, w.deriv()))
    return pairs


# ---------------------------------------------------------------------------
# manufactured adjoint pairs


def manufactured_adjoint(spec: ProblemSpec, profile, *,
                         renewal_coupling: bool = False) -> tuple[Field3, Field3]:
    """Build an exact discrete (v, f) pair for the backward equation.

    ``profile`` is a smooth callable v(t, a, x) (or an already evaluated
    Field3) with homogeneous Dirichlet x-rows and v(., A, .) = 0.  The
    source f is extracted by applying the discrete one-step transpose to
    v, so re-running solve_adjoint with this source reproduces v to
    round-off; no continuum differentiation is involved.
    """
    grid = spec.grid
    if isinstance(profile, Field3):
        v = profile.copy()
    else:
        v = Field3.from_function(grid, profile)
    vals = v.values
    scale = max(float(np.max(np.abs(vals))), 1e-300)
    if np.max(np.abs(vals[:, :, 0])) > 1e-9 * scale or \
            np.max(np.abs(vals[:, :, -1])) > 1e-9 * scale:
        raise ValueError("profile must vanish on the x-boundary rows")
    if np.max(np.abs(vals[:, -1, :])) > 1e-9 * scale:
        raise ValueError("profile must vanish at a = A")
    # snap round-off residue on the constrained rows so the extracted pair
    # reproduces under solve_adjoint to machine precision
    vals[:, :, 0] = 0.0
    vals[:, :, -1] = 0.0
    vals[:, -1, :] = 0.0
    prop = _Propagator(spec)
    f = np.zeros_like(vals)
    for n in range(grid.Nt):
        target = vals[n + 1][1:, 1:-1].copy()
        if renewal_coupling:
            coupling = (prop.age_weights[:, None] * prop.renewal_c[None, :]
                        * prop.beta[1:] * vals[n + 1][0][None, :])
            target += coupling[:, 1:-1]
        m_rows = vals[n][:-1, 1:-1]
        f[n + 1][1:, 1:-1] = (target - prop.apply_diffusion(n + 1, m_rows)) / grid.dt
    return v, Field3(grid, f)


def random_adjoint_profiles(T: float, A: float, count: int, seed: int, *,
                            modes: int = 2):
    """Smooth random closures vanishing at a = A and on the x-boundary.

    Returned callables are grid-free, so the same family can be evaluated
    on several resolutions for refinement studies.
    """
    rng = spawn_rng(seed, stream=23)
    profiles = []
    for _ in range(count):
        coeffs = rng.standard_normal((modes, modes))
        phases = rng.uniform(0.0, 2.0 * math.pi, size=(modes, modes))

        def profile(t, a, x, *, coeffs=coeffs, phases=phases):
            total = 0.0
            for m in range(coeffs.shape[0]):
                for n in range(coeffs.shape[1]):
                    total = total + (
                        coeffs[m, n]
                        * np.sin((m + 1) * math.pi * x)
                        * np.sin((n + 1) * math.pi * a / A)
                        * (1.0 + 0.3 * np.cos((m + n + 1) * math.pi * t / T
                                              + phases[m, n])))
            return total

        profiles.append(profile)
    return profiles


def manufactured_family(spec: ProblemSpec, count: int, seed: int, **kwargs):
    """Evaluate ``random_adjoint_profiles`` on the problem grid."""
    grid = spec.grid
    profiles = random_adjoint_profiles(grid.T, grid.A, count, seed)
    return [manufactured_adjoint(spec, p, **kwargs) for p in profiles]


def nodal_gradient_x(values: np.ndarray, dx: float) -> np.ndarray:
    """Second-order x-derivative: central interior, 3-point one-sided ends."""
    return np.gradient(values, dx, axis=-1, edge_order=2)


# ---------------------------------------------------------------------------
# weighted quadrature plumbing


def _log_theta_grid(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    theta = eval_theta(grid.t_nodes[:, None], grid.a_nodes[None, :], grid.T)
    with np.errstate(divide="ignore"):
        return theta, np.log(theta)


def _exponent(theta, log_theta, s, theta_power, profile_x, log_geom_x):
    """log of s-free weight: theta_power*log(Theta) + 2s*Theta*profile + geom.

    profile_x must be strictly negative so the Theta poles force the
    exponent to -inf (weight exactly 0 there).
    """
    with np.errstate(invalid="ignore"):
        e = (theta_power * log_theta[:, :, None]
             + 2.0 * s * theta[:, :, None] * profile_x[None, None, :]
             + log_geom_x[None, None, :])
        e = np.where(np.isinf(theta)[:, :, None], -np.inf, e)
    return e


def _weighted_square(grid: Grid, log_weight: np.ndarray,
                     values: np.ndarray) -> float:
    """Trapezoid integral of exp(log_weight) * values^2 over Q."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_i = np.where(values == 0.0, -np.inf,
                         log_weight + 2.0 * np.log(np.abs(values)))
        integrand = np.exp(log_i)
    return integrate_nodes(integrand, (grid.dt, grid.da, grid.dx))


def _weighted_square_ta(grid: Grid, log_weight: np.ndarray,
                        values: np.ndarray) -> float:
    """Same as _weighted_square over the (t, a) rectangle only."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_i = np.where(values == 0.0, -np.inf,
                         log_weight + 2.0 * np.log(np.abs(values)))
        integrand = np.exp(log_i)
    return integrate_nodes(integrand, (grid.dt, grid.da))


def _log_k_nodes(coef: DegenerateCoefficient, x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.asarray(coef.log_k(x), dtype=float)


def _log_x2_over_k(coef: DegenerateCoefficient, x: np.ndarray) -> np.ndarray:
    if isinstance(coef, PowerLaw):
        with np.errstate(divide="ignore"):
            out = (2.0 - coef.alpha0) * np.log(x)
            if coef.alpha1 != 0.0:
                out = out - coef.alpha1 * np.log1p(-x)
        return out
    kv = np.asarray(coef.k(x), dtype=float)
    out = np.empty_like(kv)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:] = 2.0 * np.log(x) - np.log(kv)
    out[x == 0.0] = -np.inf
    out[(kv == 0.0) & (x > 0.0)] = np.inf
    return out


def reflect_coefficient(coef: DegenerateCoefficient) -> DegenerateCoefficient:
    """The coefficient of the x -> 1-x reflected problem."""
    if isinstance(coef, PowerLaw):
        return PowerLaw(coef.alpha1, coef.alpha0, M1=coef.M2, M2=coef.M1,
                        theta0=coef.theta1, theta1=coef.theta0)
    return Tabulated(x=1.0 - coef.x[::-1], k_values=coef.k_values[::-1],
                     kprime_values=-coef.kprime_values[::-1],
                     M1=coef.M2, M2=coef.M1,
                     theta0=coef.theta1, theta1=coef.theta0)


def reflect_field(f: Field3) -> Field3:
    return Field3(f.grid, f.values[:, :, ::-1].copy())


def _check_samples(samples) -> None:
    if not samples:
        raise ValueError("empty sample list")
    if all(float(np.max(np.abs(v.values))) == 0.0
           and float(np.max(np.abs(f.values))) == 0.0 for v, f in samples):
        raise ValueError("all samples are zero; no informative ratios")


# ---------------------------------------------------------------------------
# Carleman audits


def carleman_audit_deg0(samples, weights: CarlemanWeights,
                        s_sweep=None) -> InequalityReport:
    """Weighted estimate with boundary observation at x = 1.

    LHS: int_Q (s Theta k v_x^2 + s^3 Theta^3 (x^2/k) v^2) e^{2s phi};
    RHS: int_Q f^2 e^{2s phi} + s int int Theta [k v_x^2 e^{2s phi}](x=1).
    """
    _check_samples(samples)
    sweep = tuple(s_sweep) if s_sweep is not None else weights.s_sweep
    grid = weights.grid
    coef = weights.coef
    xs = grid.x_nodes
    theta, log_theta = _log_theta_grid(grid)
    prof = weights.phi_profile()
    log_k = _log_k_nodes(coef, xs)
    log_geom = _log_x2_over_k(coef, xs)
    zeros = np.zeros_like(xs)
    k_edge = float(coef.k(xs[-1]))
    rows = []
    for idx, (v, f) in enumerate(samples):
        if v.grid != grid or f.grid != grid:
            raise ValueError("sample grid does not match the weight grid")
        vx = nodal_gradient_x(v.values, grid.dx)
        for s in sweep:
            lhs = (_weighted_square(grid, _exponent(theta, log_theta, s, 1.0,
                                                    prof, log_k), vx)
                   * s
                   + _weighted_square(grid, _exponent(theta, log_theta, s, 3.0,
                                                      prof, log_geom), v.values)
                   * s ** 3)
            fterm = _weighted_square(grid, _exponent(theta, log_theta, s, 0.0,
                                                     prof, zeros), f.values)
            with np.errstate(invalid="ignore"):
                log_bt = log_theta + 2.0 * s * theta * prof[-1]
                log_bt = np.where(np.isinf(theta), -np.inf, log_bt)
            bterm = 0.0 if k_edge == 0.0 else k_edge * _weighted_square_ta(
                grid, log_bt, vx[:, :, -1])
            rhs = fterm + s * bterm
            rows.append(_make_row(idx, s, lhs, rhs))
    return _finish_report("carleman_deg0", rows, sweep,
                          {"kappa": weights.kappa})


def _make_row(idx: int, s: float, lhs: float, rhs: float) -> ReportRow:
    if lhs == 0.0 and rhs == 0.0:
        return ReportRow(idx, s, lhs, rhs, None)
    return ReportRow(idx, s, lhs, rhs, lhs / rhs if rhs != 0.0 else math.inf)


def carleman_audit_deg1(samples, weights: CarlemanWeights,
                        s_sweep=None) -> InequalityReport:
    """Mirror audit (degeneracy at x = 1, boundary observation at x = 0).

    Implemented literally as the reflection x -> 1-x of the deg0 audit:
    the stored phi_bar normalization equals the reflected phi exactly, so
    the two audits agree to round-off on mirror-symmetric inputs.
    """
    _check_samples(samples)
    grid = weights.grid
    reflected_coef = reflect_coefficient(weights.coef)
    reflected_weights = build_carleman_weights(
        grid, reflected_coef, kappa=weights.kappa, s_sweep=weights.s_sweep)
    reflected_samples = [(reflect_field(v), reflect_field(f))
                         for v, f in samples]
    report = carleman_audit_deg0(reflected_samples, reflected_weights,
                                 s_sweep=s_sweep)
    report.name = "carleman_deg1"
    return report


def carleman_audit_nondeg(samples, weights: CarlemanWeights,
                          s_sweep=None) -> InequalityReport:
    """Non-degenerate estimate with the exponential-of-sigma weights.

    LHS: int_Q (s^3 phi^3 z^2 + s phi z_x^2) e^{2s Phi} with
    phi = Theta e^{kappa sigma}; RHS: int_Q f^2 e^{2s Phi} minus the
    signed boundary bracket -s kappa [k e^{2s Phi} phi z_x^2] from 0 to 1.
    """
    _check_samples(samples)
    weights.require_nondeg()
    sweep = tuple(s_sweep) if s_sweep is not None else weights.s_sweep
    grid = weights.grid
    xs = grid.x_nodes
    theta, log_theta = _log_theta_grid(grid)
    psi = weights.Psi
    kappa_sigma = weights.kappa * weights.sigma
    zeros = np.zeros_like(xs)
    kv = np.asarray(weights.coef.k(xs), dtype=float)
    rows = []
    for idx, (v, f) in enumerate(samples):
        if v.grid != grid or f.grid != grid:
            raise ValueError("sample grid does not match the weight grid")
        vx = nodal_gradient_x(v.values, grid.dx)
        for s in sweep:
            log_w1 = _exponent(theta, log_theta, s, 3.0, psi,
                               3.0 * kappa_sigma)
            log_w2 = _exponent(theta, log_theta, s, 1.0, psi, kappa_sigma)
            lhs = (s ** 3 * _weighted_square(grid, log_w1, v.values)
                   + s * _weighted_square(grid, log_w2, vx))
            fterm = _weighted_square(grid, _exponent(theta, log_theta, s, 0.0,
                                                     psi, zeros), f.values)

            def edge(i: int) -> float:
                with np.errstate(invalid="ignore"):
                    log_e = (log_theta + 2.0 * s * theta * psi[i]
                             + kappa_sigma[i])
                    log_e = np.where(np.isinf(theta), -np.inf, log_e)
                return kv[i] * _weighted_square_ta(grid, log_e, vx[:, :, i])

            bracket = edge(-1) - edge(0)
            rhs = fterm - s * weights.kappa * bracket
            rows.append(_make_row(idx, s, lhs, rhs))
    return _finish_report("carleman_nondeg", rows, sweep,
                          {"kappa": weights.kappa, "frak_d": weights.frak_d})


def _subgrid_from(grid: Grid, i0: int, i1: int) -> Grid:
    xs = grid.x_nodes
    return Grid(T=grid.T, A=grid.A, Nt=grid.Nt, Na=grid.Na, Nx=i1 - i0,
                dt_equals_da=grid.dt_equals_da,
                x_span=(float(xs[i0]), float(xs[i1])))


def carleman_local_audit(samples, omega: tuple[float, float],
                         s_sweep=None, *, kappa: float = 1.0,
                         coef: DegenerateCoefficient | None = None,
                         weights: CarlemanWeights | None = None) -> InequalityReport:
    """Omega-local estimate: degenerate LHS against source plus window terms.

    LHS is the degenerate-audit left side; RHS combines int_Q f^2 e^{2s Phi}
    (Phi from non-degenerate weights built away from the degeneracy and
    continued by a constant across it) with the unweighted window integral
    of v^2.  A coefficient degenerate at x = 1 is handled by reflecting
    the whole setup onto the x = 0 machinery.
    """
    _check_samples(samples)
    if weights is None:
        if coef is None:
            raise ValueError("pass either prebuilt weights or a coefficient")
        weights = build_carleman_weights(samples[0][0].grid, coef, kappa=kappa)
    grid = weights.grid
    coef = weights.coef
    lo, hi = omega
    if not 0.0 < lo < hi < 1.0:
        raise ValueError("window must be strictly interior to (0,1)")
    report_cls = classify_degeneracy(coef)
    if report_cls.degenerate_at_zero and report_cls.degenerate_at_one:
        raise ValueError("local audit needs one-sided degeneracy; "
                         "use the gluing construction for two-sided k")
    if report_cls.degenerate_at_one:
        reflected = carleman_local_audit(
            [(reflect_field(v), reflect_field(f)) for v, f in samples],
            (1.0 - hi, 1.0 - lo), s_sweep, kappa=kappa,
            coef=reflect_coefficient(coef))
        reflected.name = "carleman_local_deg1"
        reflected.meta["omega"] = [lo, hi]
        return reflected

    sweep = tuple(s_sweep) if s_sweep is not None else weights.s_sweep
    xs = grid.x_nodes
    theta, log_theta = _log_theta_grid(grid)
    prof = weights.phi_profile()
    log_k = _log_k_nodes(coef, xs)
    log_geom = _log_x2_over_k(coef, xs)
    zeros = np.zeros_like(xs)

    # nondegenerate profile on (alpha_bar, 1), constant left of alpha_bar
    i0 = int(np.searchsorted(xs, 0.5 * lo, side="left"))
    i0 = max(1, min(i0, grid.Nx - 2))
    sub = _subgrid_from(grid, i0, grid.Nx)
    sub_weights = build_carleman_weights(sub, coef, kappa=kappa)
    sub_weights.require_nondeg()
    psi_ext = np.empty_like(xs)
    psi_ext[i0:] = sub_weights.Psi
    psi_ext[:i0] = sub_weights.Psi[0]

    sel = window_mask(xs, lo, hi)
    rows = []
    for idx, (v, f) in enumerate(samples):
        if v.grid != grid or f.grid != grid:
            raise ValueError("sample grid does not match the weight grid")
        vx = nodal_gradient_x(v.values, grid.dx)
        window = integrate_nodes(v.values[:, :, sel] ** 2,
                                 (grid.dt, grid.da, grid.dx))
        for s in sweep:
            lhs = (s * _weighted_square(grid, _exponent(theta, log_theta, s,
                                                        1.0, prof, log_k), vx)
                   + s ** 3 * _weighted_square(
                       grid, _exponent(theta, log_theta, s, 3.0, prof,
                                       log_geom), v.values))
            fterm = _weighted_square(grid, _exponent(theta, log_theta, s, 0.0,
                                                     psi_ext, zeros), f.values)
            rhs = fterm + window
            rows.append(_make_row(idx, s, lhs, rhs))
    return _finish_report("carleman_local_deg0", rows, sweep,
                          {"kappa": kappa, "omega": [lo, hi]})


def caccioppoli_audit(samples, omega_prime: tuple[float, float],
                      omega: tuple[float, float], psi_weights,
                      s: float) -> InequalityReport:
    """Interior gradient bound: weighted v_x^2 on omega' by v^2 on omega.

    psi_weights supplies the strictly negative spatial profile Psi (either
    a CarlemanWeights with non-degenerate profiles or a plain callable).
    """
    _check_samples(samples)
    lo_p, hi_p = omega_prime
    lo, hi = omega
    if not (0.0 < lo < lo_p < hi_p < hi < 1.0):
        raise ValueError("need omega' strictly inside omega strictly inside (0,1)")
    grid = samples[0][0].grid
    xs = grid.x_nodes
    if isinstance(psi_weights, CarlemanWeights):
        psi_weights.require_nondeg()
        if psi_weights.grid != grid:
            raise ValueError("weight grid does not match the sample grid")
        psi = psi_weights.Psi
    else:
        psi = np.asarray(psi_weights(xs), dtype=float)
    if np.any(psi >= 0.0):
        raise ValueError("Psi must be strictly negative on [0,1]")
    theta, log_theta = _log_theta_grid(grid)
    sel_p = window_mask(xs, lo_p, hi_p)
    sel = window_mask(xs, lo, hi)
    zeros = np.zeros_like(xs)
    log_w = _exponent(theta, log_theta, s, 0.0, psi, zeros)
    rows = []
    for idx, (v, f) in enumerate(samples):
        vx = nodal_gradient_x(v.values, grid.dx)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            log_i = np.where(vx == 0.0, -np.inf,
                             log_w + 2.0 * np.log(np.abs(vx)))
            integrand = np.exp(log_i)
        lhs = integrate_nodes(integrand[:, :, sel_p],
                              (grid.dt, grid.da, grid.dx))
        window = integrate_nodes(v.values[:, :, sel] ** 2,
                                 (grid.dt, grid.da, grid.dx))
        fterm = _weighted_square(grid, log_w, f.values)
        rhs = window + fterm
        rows.append(_make_row(idx, s, lhs, rhs))
    return _finish_report("caccioppoli", rows, (s,),
                          {"omega": [lo, hi], "omega_prime": [lo_p, hi_p]})


# ---------------------------------------------------------------------------
# observability


def observability_ratio(spec: ProblemSpec, ensemble, delta: float, *,
                        mode: str = "standard",
                        omega: tuple[float, float] | None = None) -> InequalityReport:
    """Empirical constant of the intermediate-time observability bound.

    For each final datum the renewal-coupled adjoint is solved and

        int int v^2(T - a_bar)  <=  C (int_{a<delta} v_T^2 + window term)

    is evaluated; ``mode`` selects the right side: "standard" keeps the
    final-datum term, "zero_final" drops it (each v_T must then vanish
    for a < delta), and "band" adds the age-band integral of v^2 while
    widening the final-datum term, matching the variant statement.
    The window integral uses ``omega`` (default: the problem's own), so
    ratios for nested windows can reuse identical adjoint solves.
    """
    if not ensemble:
        raise ValueError("empty ensemble")
    if mode not in ("standard", "zero_final", "band"):
        raise ValueError(f"unknown mode {mode!r}")
    grid = spec.grid
    if not grid.T < delta < grid.A:
        raise ValueError("delta must lie in (T, A)")
    lo, hi = omega if omega is not None else spec.omega
    xs = grid.x_nodes
    sel = window_mask(xs, lo, hi)
    steps_back = spec.rates.a_bar / grid.dt
    n_star = grid.Nt - int(round(steps_back))
    if abs(steps_back - round(steps_back)) > 1e-9:
        warnings.warn("a_bar is not a multiple of dt; sampling the nearest level")
    n_star = min(max(n_star, 0), grid.Nt)
    t_weights = np.full(grid.Nt + 1, grid.dt)
    t_weights[0] = t_weights[-1] = 0.5 * grid.dt
    a_nodes = grid.a_nodes
    rows = []
    for idx, v_T in enumerate(ensemble):
        if v_T.grid != grid:
            raise ValueError("ensemble grid does not match the problem grid")
        tail = float(np.max(np.abs(v_T.values[-1])))
        if tail > 1e-12 * max(float(np.max(np.abs(v_T.values))), 1e-300):
            raise ValueError(f"ensemble member {idx} has v_T(A,.) != 0")
        traj = solve_adjoint(spec, v_T, renewal_coupling=True)
        vals = traj.state.values
        lhs = grid.da * grid.dx * float(np.sum(vals[n_star] ** 2))
        window = float(np.sum(
            t_weights[:, None, None] * vals[:, :, sel] ** 2)) * grid.da * grid.dx
        if mode == "zero_final":
            early = v_T.values[a_nodes < delta]
            if np.max(np.abs(early), initial=0.0) > 0.0:
                raise ValueError(
                    f"mode 'zero_final' requires v_T = 0 on (0, delta); "
                    f"member {idx} violates it")
            rhs = window
        elif mode == "standard":
            final_term = grid.da * grid.dx * float(
                np.sum(v_T.values[a_nodes <= delta] ** 2))
            rhs = final_term + window
        else:
            final_term = grid.da * grid.dx * float(
                np.sum(v_T.values[a_nodes <= grid.T] ** 2))
            band = float(np.sum(
                t_weights[:, None, None]
                * vals[:, a_nodes <= delta, :] ** 2)) * grid.da * grid.dx
            rhs = final_term + window + band
        rows.append(_make_row(idx, 0.0, lhs, rhs))
    return _finish_report("observability", rows, (),
                          {"delta": delta, "mode": mode, "omega": [lo, hi]})
