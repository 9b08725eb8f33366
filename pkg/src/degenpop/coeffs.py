"""Degenerate diffusion coefficients, vital rates and weight profiles.

The diffusion coefficient k vanishes at one or both ends of the spatial
interval.  Classification certifies the degeneracy strength M at each end
(weak for M < 1, strong for 1 <= M < 2; M >= 2 is rejected) together with
the monotonicity side exponents theta used by the Hardy-type inequalities.
The module also builds the spatial profiles entering the weighted
(Carleman-type) audit integrals and runs the report-only hypothesis
validation used by the scenario layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .discretize import Grid

__all__ = [
    "PowerLaw",
    "Tabulated",
    "DegenerateCoefficient",
    "DegeneracyReport",
    "classify_degeneracy",
    "VitalRates",
    "CarlemanWeights",
    "build_carleman_weights",
    "eval_theta",
    "eval_weights",
    "HypothesisCheck",
    "HypothesisReport",
    "validate_hypotheses",
    "DEFAULT_S_SWEEP",
]

DEFAULT_S_SWEEP = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)


@dataclass(frozen=True)
class PowerLaw:
    """k(x) = x**alpha0 * (1-x)**alpha1 on [0, 1]."""

    alpha0: float
    alpha1: float = 0.0
    M1: float | None = None
    M2: float | None = None
    theta0: float | None = None
    theta1: float | None = None

    def __post_init__(self) -> None:
        if self.alpha0 < 0 or self.alpha1 < 0:
            raise ValueError("power-law exponents must be nonnegative")
        for name in ("M1", "M2"):
            m = getattr(self, name)
            if m is not None and not 0.0 < m < 2.0:
                raise ValueError(f"{name} must lie in (0, 2)")

    def k(self, x):
        x = np.asarray(x, dtype=float)
        return np.power(x, self.alpha0) * np.power(1.0 - x, self.alpha1)

    def kprime(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(self.alpha0 == 0.0, 0.0,
                            self.alpha0 * np.power(x, self.alpha0 - 1.0)
                            * np.power(1.0 - x, self.alpha1))
            right = np.where(self.alpha1 == 0.0, 0.0,
                             self.alpha1 * np.power(x, self.alpha0)
                             * np.power(1.0 - x, self.alpha1 - 1.0))
        return left - right

    def slope_ratio_at_zero(self, x):
        """x k'(x) / k(x), computed without the removable singularity."""
        x = np.asarray(x, dtype=float)
        return self.alpha0 - self.alpha1 * x / (1.0 - x)

    def slope_ratio_at_one(self, x):
        """(x - 1) k'(x) / k(x)."""
        x = np.asarray(x, dtype=float)
        return self.alpha1 - self.alpha0 * (1.0 - x) / x

    def face_values(self, x_nodes: np.ndarray) -> np.ndarray:
        """Exact k at the cell midpoints (conservative face diffusivities)."""
        x = np.asarray(x_nodes, dtype=float)
        return self.k(0.5 * (x[:-1] + x[1:]))

    def log_k(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        with np.errstate(divide="ignore"):
            if self.alpha0 != 0.0:
                out = out + self.alpha0 * np.log(x)
            if self.alpha1 != 0.0:
                out = out + self.alpha1 * np.log1p(-x)
        return out


@dataclass(frozen=True)
class Tabulated:
    """Sampled coefficient with sampled derivative, linearly interpolated."""

    x: np.ndarray
    k_values: np.ndarray
    kprime_values: np.ndarray
    M1: float | None = None
    M2: float | None = None
    theta0: float | None = None
    theta1: float | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        kv = np.asarray(self.k_values, dtype=float)
        kp = np.asarray(self.kprime_values, dtype=float)
        if x.ndim != 1 or x.size < 2 or np.any(np.diff(x) <= 0):
            raise ValueError("sample abscissae must be strictly increasing")
        if kv.shape != x.shape or kp.shape != x.shape:
            raise ValueError("k and k' samples must match the abscissae")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "k_values", kv)
        object.__setattr__(self, "kprime_values", kp)
        for name in ("M1", "M2"):
            m = getattr(self, name)
            if m is not None and not 0.0 < m < 2.0:
                raise ValueError(f"{name} must lie in (0, 2)")

    def k(self, x):
        return np.interp(np.asarray(x, dtype=float), self.x, self.k_values)

    def kprime(self, x):
        return np.interp(np.asarray(x, dtype=float), self.x, self.kprime_values)

    def slope_ratio_at_zero(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x * self.kprime(x) / self.k(x)
        return out

    def slope_ratio_at_one(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (x - 1.0) * self.kprime(x) / self.k(x)
        return out

    def face_values(self, x_nodes: np.ndarray) -> np.ndarray:
        """Arithmetic mean of the nodal values (tabulated coefficients)."""
        kv = self.k(np.asarray(x_nodes, dtype=float))
        return 0.5 * (kv[:-1] + kv[1:])

    def log_k(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.k(x))


DegenerateCoefficient = PowerLaw | Tabulated


@dataclass(frozen=True)
class DegeneracyReport:
    weak_at_zero: bool
    strong_at_zero: bool
    weak_at_one: bool
    strong_at_one: bool
    nondegenerate: bool
    M1: float | None
    M2: float | None
    theta0: float | None
    theta1: float | None

    @property
    def degenerate_at_zero(self) -> bool:
        return self.weak_at_zero or self.strong_at_zero

    @property
    def degenerate_at_one(self) -> bool:
        return self.weak_at_one or self.strong_at_one


def _theta_certificate(slope_ratio, side: str, start: float = 0.05) -> float:
    """Largest sampled-valid monotonicity exponent near an endpoint.

    k/x**theta nondecreasing near 0 is equivalent to theta <= x k'/k on a
    neighborhood; the mirrored condition at 1 reads theta <= (x-1) k'/k.
    The infimum over a shrinking neighborhood certifies a valid theta.
    """
    nb = start
    for _ in range(40):
        pts = np.linspace(nb * 1e-3, nb, 64)
        xs = pts if side == "zero" else 1.0 - pts
        val = float(np.min(slope_ratio(xs)))
        if val > 0.0:
            return val
        nb /= 2.0
    raise ValueError(f"could not certify a monotonicity exponent near {side}")


def classify_degeneracy(coef: DegenerateCoefficient, n_samples: int = 2001) -> DegeneracyReport:
    """Classify the endpoint degeneracy of ``coef`` and certify M, theta.

    Raises if the certified M at either end reaches 2 (excluded range) or
    if the coefficient is nonpositive somewhere in the open interval.
    """
    if isinstance(coef, PowerLaw):
        deg0 = coef.alpha0 > 0.0
        deg1 = coef.alpha1 > 0.0
        m1 = coef.alpha0 if deg0 else None
        m2 = coef.alpha1 if deg1 else None
    else:
        xs = np.linspace(0.0, 1.0, n_samples)[1:-1]
        kv = coef.k(xs)
        if np.any(kv <= 0.0):
            bad = xs[int(np.argmin(kv))]
            raise ValueError(f"coefficient nonpositive on the interior (x={bad:.6g})")
        deg0 = coef.k(0.0) <= 0.0
        deg1 = coef.k(1.0) <= 0.0
        m1 = float(np.max(coef.slope_ratio_at_zero(xs[xs < 0.5]))) if deg0 else None
        m2 = float(np.max(coef.slope_ratio_at_one(xs[xs > 0.5]))) if deg1 else None
    for name, m in (("M1", m1), ("M2", m2)):
        if m is not None and m >= 2.0:
            raise ValueError(f"certified {name} = {m:.6g} is >= 2 (outside the admissible range)")
    theta0 = _theta_certificate(coef.slope_ratio_at_zero, "zero") if deg0 else None
    theta1 = _theta_certificate(coef.slope_ratio_at_one, "one") if deg1 else None
    return DegeneracyReport(
        weak_at_zero=bool(deg0 and m1 < 1.0),
        strong_at_zero=bool(deg0 and m1 >= 1.0),
        weak_at_one=bool(deg1 and m2 < 1.0),
        strong_at_one=bool(deg1 and m2 >= 1.0),
        nondegenerate=not (deg0 or deg1),
        M1=m1, M2=m2, theta0=theta0, theta1=theta1,
    )


# ---------------------------------------------------------------------------
# vital rates


@dataclass(frozen=True)
class VitalRates:
    """Fertility beta(a, x), mortality mu(t, a, x), fertility onset a_bar.

    ``beta_age``/``mu_age`` hold the pure age profiles when the rates do
    not vary in space (and, for mu, in time); the net reproduction rate is
    only defined in that case.  Callables must broadcast over numpy arrays.
    """

    beta: object
    mu: object
    a_bar: float
    beta_age: object | None = None
    mu_age: object | None = None

    def __post_init__(self) -> None:
        if self.a_bar < 0:
            raise ValueError("a_bar must be nonnegative")

    def beta_grid(self, grid: Grid) -> np.ndarray:
        a = grid.a_nodes[:, None]
        x = grid.x_nodes[None, :]
        return np.broadcast_to(np.asarray(self.beta(a, x), dtype=float),
                               (grid.Na + 1, grid.Nx + 1)).copy()

    def mu_grid(self, t: float, grid: Grid) -> np.ndarray:
        a = grid.a_nodes[:, None]
        x = grid.x_nodes[None, :]
        return np.broadcast_to(np.asarray(self.mu(t, a, x), dtype=float),
                               (grid.Na + 1, grid.Nx + 1)).copy()


# ---------------------------------------------------------------------------
# weight profiles


def _cumulative_integral(fn, nodes: np.ndarray, refine: int = 32,
                         singular_lo: bool = False, singular_hi: bool = False) -> np.ndarray:
    """Cumulative integral of ``fn`` from nodes[0] along ``nodes``.

    Each cell is subdivided ``refine`` times and integrated by trapezoid;
    the first/last sub-cell switches to the midpoint rule when the
    integrand is singular (but integrable) at the corresponding endpoint.
    """
    out = np.zeros(nodes.size)
    acc = 0.0
    for i in range(nodes.size - 1):
        sub = np.linspace(nodes[i], nodes[i + 1], refine + 1)
        vals = np.asarray(fn(sub), dtype=float)
        h = sub[1] - sub[0]
        cells = 0.5 * h * (vals[:-1] + vals[1:])
        if i == 0 and singular_lo and not np.isfinite(vals[0]):
            cells[0] = h * float(fn(np.asarray(sub[0] + h / 2.0)))
        if i == nodes.size - 2 and singular_hi and not np.isfinite(vals[-1]):
            cells[-1] = h * float(fn(np.asarray(sub[-1] - h / 2.0)))
        acc += float(np.sum(cells))
        out[i + 1] = acc
    return out


@dataclass
class CarlemanWeights:
    """Cached spatial profiles for the weighted audit integrals.

    p is the primitive of y/k(y) from 0 (degeneracy at 0), p_bar the one of
    (y-1)/k(y); sigma and Psi are the non-degenerate profiles built from
    frak_d = sup|k'| and are only available when k is strictly positive on
    the grid span.  The stored phi_bar normalization is Theta*(p_bar -
    ||p_bar||_inf), the exact x -> 1-x mirror of phi = Theta*(p - 2||p||_inf).
    """

    grid: Grid
    coef: DegenerateCoefficient
    kappa: float = 1.0
    frak_d: float | None = None
    s_sweep: tuple[float, ...] = DEFAULT_S_SWEEP
    p: np.ndarray = field(init=False)
    p_bar: np.ndarray = field(init=False)
    p_inf: float = field(init=False)
    p_bar_inf: float = field(init=False)
    sigma: np.ndarray | None = field(init=False, default=None)
    sigma_max: float = field(init=False, default=0.0)
    Psi: np.ndarray | None = field(init=False, default=None)

    def __post_init__(self) -> None:
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        xs = self.grid.x_nodes
        lo, hi = self.grid.x_span
        if isinstance(self.coef, PowerLaw) and self.coef.alpha1 == 0.0 and lo == 0.0:
            a0 = self.coef.alpha0
            if a0 >= 2.0:
                raise ValueError("power-law exponent must be < 2")
            self.p = np.power(xs, 2.0 - a0) / (2.0 - a0)
        else:
            self.p = _cumulative_integral(
                lambda y: _safe_ratio(y, self.coef, offset=0.0),
                xs, singular_lo=(lo == 0.0), singular_hi=(hi == 1.0))
        self.p_bar = _cumulative_integral(
            lambda y: _safe_ratio(y, self.coef, offset=1.0),
            xs, singular_lo=(lo == 0.0), singular_hi=(hi == 1.0))
        self.p_inf = float(np.max(np.abs(self.p)))
        self.p_bar_inf = float(np.max(np.abs(self.p_bar)))

        kv = self.coef.k(xs)
        if np.all(kv > 0.0):
            d = self.frak_d
            if d is None:
                d = float(np.max(np.abs(self.coef.kprime(xs))))
            if d > 0.0 and np.isfinite(d):
                self.frak_d = d
                tail = _cumulative_integral(lambda y: d / self.coef.k(y), xs)
                self.sigma = tail[-1] - tail  # integral from x to the right end
                self.sigma_max = float(self.sigma[0])
                self.Psi = np.exp(self.kappa * self.sigma) - math.exp(
                    2.0 * self.kappa * self.sigma_max)

    def phi_profile(self) -> np.ndarray:
        """Negative spatial part of phi: phi = Theta * phi_profile."""
        return self.p - 2.0 * self.p_inf

    def phi_bar_profile(self) -> np.ndarray:
        return self.p_bar - self.p_bar_inf

    def require_nondeg(self) -> None:
        if self.Psi is None:
            raise ValueError(
                "non-degenerate weights unavailable: k must be strictly positive "
                "on the grid span with frak_d = sup|k'| > 0 (pass frak_d to override)")


def _safe_ratio(y: np.ndarray, coef: DegenerateCoefficient, offset: float) -> np.ndarray:
    """(y - offset)/k(y) with sign conventions used by the primitives."""
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (y - offset) / coef.k(y)
    return out


def build_carleman_weights(grid: Grid, coef: DegenerateCoefficient, *,
                           kappa: float = 1.0, frak_d: float | None = None,
                           s_sweep: tuple[float, ...] = DEFAULT_S_SWEEP) -> CarlemanWeights:
    return CarlemanWeights(grid=grid, coef=coef, kappa=kappa, frak_d=frak_d, s_sweep=s_sweep)


def eval_theta(t, a, T: float):
    """Singular time-age factor 1/(t^4 (T-t)^4 a^4); +inf on the poles."""
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore"):
        denom = (t ** 4) * ((T - t) ** 4) * (a ** 4)
        out = np.where(denom > 0.0, 1.0 / np.where(denom > 0.0, denom, 1.0), np.inf)
    if out.ndim == 0:
        return float(out)
    return out


def eval_weights(weights: CarlemanWeights, s: float, t, a, x) -> dict:
    """Pointwise weight values with exponentials evaluated in log space.

    Returns phi, phi_bar, Phi (None without non-degenerate profiles) and
    the exponentials exp(2 s phi), exp(2 s Phi); exponents below the
    representable floor come out as exactly 0.0.
    """
    th = eval_theta(t, a, weights.grid.T)
    th = np.asarray(th, dtype=float)
    xs = np.asarray(x, dtype=float)
    prof = np.interp(xs, weights.grid.x_nodes, weights.phi_profile())
    prof_bar = np.interp(xs, weights.grid.x_nodes, weights.phi_bar_profile())
    with np.errstate(invalid="ignore"):
        phi = np.where(np.isinf(th), -np.inf, th * prof)
        phi_bar = np.where(np.isinf(th), -np.inf, th * prof_bar)

    def _exp2s(values):
        if s == 0.0:
            return np.ones_like(values)
        with np.errstate(over="ignore"):
            return np.exp(2.0 * s * values)

    out = {"phi": phi, "phi_bar": phi_bar, "Phi": None,
           "exp2s_phi": _exp2s(phi), "exp2s_Phi": None}
    if weights.Psi is not None:
        psi_prof = np.interp(xs, weights.grid.x_nodes, weights.Psi)
        with np.errstate(invalid="ignore"):
            Phi = np.where(np.isinf(th), -np.inf, th * psi_prof)
        out["Phi"] = Phi
        out["exp2s_Phi"] = _exp2s(Phi)
    return out


# ---------------------------------------------------------------------------
# hypothesis validation


@dataclass(frozen=True)
class HypothesisCheck:
    name: str
    passed: bool
    detail: str
    witness: float | None = None


@dataclass(frozen=True)
class HypothesisReport:
    checks: tuple[HypothesisCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> tuple[HypothesisCheck, ...]:
        return tuple(c for c in self.checks if not c.passed)

    def lines(self) -> list[str]:
        return [f"[{'ok' if c.passed else 'FAIL'}] {c.name}: {c.detail}"
                for c in self.checks]


def validate_hypotheses(coef: DegenerateCoefficient, rates: VitalRates,
                        T: float, A: float, omega: tuple[float, float],
                        delta: float | None = None,
                        n_samples: int = 801) -> HypothesisReport:
    """Check every structural hypothesis and report, without raising.

    Covers the horizon ordering, fertility onset, control window geometry,
    coefficient positivity, the certified slope bounds M and theta side
    conditions, rate sign conditions and the vanishing of beta before the
    onset age.  Failed checks carry a witness point where available.
    """
    checks: list[HypothesisCheck] = []

    def add(name, passed, detail, witness=None):
        checks.append(HypothesisCheck(name, bool(passed), detail, witness))

    add("horizon", T < A, f"T = {T:.6g}, A = {A:.6g} (need T < A)")
    add("fertility onset", 0.0 < rates.a_bar <= T,
        f"a_bar = {rates.a_bar:.6g} (need 0 < a_bar <= T)")
    if delta is not None:
        add("age cutoff", T < delta < A,
            f"delta = {delta:.6g} (need T < delta < A)")
    lo, hi = omega
    add("control window", 0.0 < lo < hi < 1.0,
        f"omega = ({lo:.6g}, {hi:.6g}) (need 0 < lo < hi < 1)")

    xs = np.linspace(0.0, 1.0, n_samples)[1:-1]
    kv = coef.k(xs)
    bad = kv <= 0.0
    add("interior positivity", not np.any(bad),
        "k > 0 on (0, 1)" if not np.any(bad)
        else f"k <= 0 at x = {xs[bad][0]:.6g}",
        witness=float(xs[bad][0]) if np.any(bad) else None)

    try:
        report = classify_degeneracy(coef)
    except ValueError as exc:
        add("degeneracy class", False, str(exc))
        report = None
    if report is not None:
        if report.degenerate_at_zero:
            margin = coef.slope_ratio_at_zero(xs) <= report.M1 + 1e-9
            add("slope bound at 0", bool(np.all(margin)),
                f"x k'/k <= M1 = {report.M1:.6g} on sampled interior",
                witness=None if np.all(margin) else float(xs[~margin][0]))
            add("monotonicity exponent at 0", report.theta0 is not None
                and report.theta0 > 0.0,
                f"theta0 = {report.theta0:.6g} certified near 0")
        if report.degenerate_at_one:
            margin = coef.slope_ratio_at_one(xs) <= report.M2 + 1e-9
            add("slope bound at 1", bool(np.all(margin)),
                f"(x-1) k'/k <= M2 = {report.M2:.6g} on sampled interior",
                witness=None if np.all(margin) else float(xs[~margin][0]))
            add("monotonicity exponent at 1", report.theta1 is not None
                and report.theta1 > 0.0,
                f"theta1 = {report.theta1:.6g} certified near 1")
        if report.nondegenerate:
            add("degeneracy class", False,
                "k is bounded away from zero at both ends; no degenerate endpoint")

    a_grid = np.linspace(0.0, A, 257)[:, None]
    x_grid = np.linspace(0.0, 1.0, 65)[None, :]
    beta_vals = np.broadcast_to(np.asarray(rates.beta(a_grid, x_grid), dtype=float),
                                (257, 65))
    add("fertility sign", bool(np.all(beta_vals >= 0.0)), "beta >= 0 on samples")
    pre = a_grid[:, 0] <= rates.a_bar
    quiet = np.all(np.abs(beta_vals[pre, :]) <= 1e-12 * max(1.0, np.max(np.abs(beta_vals))))
    add("fertility support", bool(quiet),
        f"beta vanishes for a <= a_bar = {rates.a_bar:.6g}")
    mu_ok = True
    witness_mu = None
    for t in np.linspace(0.0, T, 5):
        mu_vals = np.asarray(rates.mu(t, a_grid, x_grid), dtype=float)
        if np.any(mu_vals < 0.0):
            mu_ok = False
            witness_mu = float(t)
            break
    add("mortality sign", mu_ok, "mu >= 0 on samples", witness=witness_mu)

    return HypothesisReport(checks=tuple(checks))
