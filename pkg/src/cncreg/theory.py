"""Numerical checks of weak convexity and of the regularization guarantees.

Includes the piecewise-linear machinery showing that a continuous PWL
function is weakly convex only when it is convex, a sampled estimator for
weak-convexity moduli, and convergence/stability experiments for the
strongly convex regime.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

CONTINUITY_TOL = 1e-9


@dataclass(frozen=True)
class PiecewiseLinear1D:
    """``f(x) = a_i x + b_i`` on ``(x_{i-1}, x_i]`` with ``x_0 = -inf``, ``x_{n+1} = +inf``."""

    breakpoints: tuple
    slopes: tuple
    intercepts: tuple

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=np.float64)
        a = np.asarray(self.slopes, dtype=np.float64)
        b = np.asarray(self.intercepts, dtype=np.float64)
        if len(a) != len(bp) + 1 or len(b) != len(a):
            raise ValueError("need n breakpoints and n + 1 slopes/intercepts")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        left = a[:-1] * bp + b[:-1]
        right = a[1:] * bp + b[1:]
        if np.any(np.abs(left - right) > CONTINUITY_TOL * np.maximum(1.0, np.abs(left))):
            raise ValueError("pieces do not join continuously")
        for name, arr in (("breakpoints", bp), ("slopes", a), ("intercepts", b)):
            object.__setattr__(self, name, tuple(float(v) for v in arr))

    @classmethod
    def from_slopes(cls, breakpoints, slopes, first_intercept: float = 0.0) -> "PiecewiseLinear1D":
        """Build the continuous PWL with the given slopes, solving for intercepts."""
        bp = [float(v) for v in breakpoints]
        b = [float(first_intercept)]
        for i, x in enumerate(bp):
            b.append(slopes[i] * x + b[i] - slopes[i + 1] * x)
        return cls(tuple(bp), tuple(float(s) for s in slopes), tuple(b))


def pwl_eval(f: PiecewiseLinear1D, x):
    """Value of the active piece; piece ``i`` is right-closed."""
    bp = np.asarray(f.breakpoints)
    xs = np.asarray(x, dtype=np.float64)
    idx = np.searchsorted(bp, xs, side="left")
    out = np.asarray(f.slopes)[idx] * xs + np.asarray(f.intercepts)[idx]
    return float(out) if out.ndim == 0 else out


def pwl_max_form(f: PiecewiseLinear1D, x):
    """``max_j (a_j x + b_j)``, which equals ``f`` exactly when ``f`` is convex."""
    xs = np.asarray(x, dtype=np.float64)
    vals = np.multiply.outer(xs, np.asarray(f.slopes)) + np.asarray(f.intercepts)
    return vals.max(axis=-1)


def pwl_is_convex(f: PiecewiseLinear1D) -> bool:
    return bool(np.all(np.diff(np.asarray(f.slopes)) >= 0))


@dataclass(frozen=True)
class ViolationWitness:
    x1: float
    x2: float
    lam: float
    lhs: float
    rhs: float
    rho: float
    implied_rho: float

    @property
    def verified(self) -> bool:
        return self.lhs > self.rhs


def weak_convexity_gap(f, x1, x2, lam: float, rho: float):
    """``(lhs, rhs)`` of ``f(l x1 + (1-l) x2) <= l f(x1) + (1-l) f(x2) + rho l (1-l) |x1 - x2|^2``."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    lhs = float(f(lam * x1 + (1 - lam) * x2))
    rhs = lam * float(f(x1)) + (1 - lam) * float(f(x2)) + rho * lam * (1 - lam) * float(np.sum((x1 - x2) ** 2))
    return lhs, rhs


def pwl_weak_convexity_witness(f: PiecewiseLinear1D, rho: float) -> ViolationWitness | None:
    """Midpoint witness that ``f`` is not ``rho``-weakly convex, or ``None`` if ``f`` is convex.

    At a breakpoint where the slope drops by ``d > 0`` the symmetric pair
    ``x_i -/+ eps`` violates the inequality whenever ``eps < d / (2 rho)`` and
    both points stay on the adjacent pieces.  ``eps`` is a quarter of the
    smaller of those two limits, leaving a strict margin.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if pwl_is_convex(f):
        return None
    a = np.asarray(f.slopes)
    bp = np.asarray(f.breakpoints)
    drops = a[:-1] - a[1:]
    i = int(np.argmax(drops))
    limits = []
    if rho > 0:
        limits.append(drops[i] / (2 * rho))
    if i > 0:
        limits.append(bp[i] - bp[i - 1])
    if i < len(bp) - 1:
        limits.append(bp[i + 1] - bp[i])
    eps = min(limits) / 4 if limits else 1.0
    x1, x2 = bp[i] - eps, bp[i] + eps
    g = lambda t: pwl_eval(f, t)  # noqa: E731
    lhs, rhs = weak_convexity_gap(g, x1, x2, 0.5, rho)
    implied = (lhs - 0.5 * g(x1) - 0.5 * g(x2)) / (0.25 * (2 * eps) ** 2)
    return ViolationWitness(float(x1), float(x2), 0.5, lhs, rhs, float(rho), float(implied))


def random_pwl(rng: np.random.Generator, convex: bool, max_breakpoints: int = 8, span: float = 5.0):
    """Random continuous PWL; ``convex`` sorts the slopes, otherwise at least one slope drops."""
    n = int(rng.integers(1, max_breakpoints + 1))
    bp = np.sort(rng.uniform(-span, span, size=n))
    while np.any(np.diff(bp) < 1e-3):
        bp = np.sort(rng.uniform(-span, span, size=n))
    slopes = rng.normal(0.0, 2.0, size=n + 1)
    if convex:
        slopes = np.sort(slopes)
    elif np.all(np.diff(slopes) >= 0):
        j = int(rng.integers(0, n))
        slopes[j], slopes[j + 1] = slopes[j + 1] + 0.5, slopes[j]
    return PiecewiseLinear1D.from_slopes(bp, slopes, float(rng.normal()))


def estimate_weak_convexity_modulus(f, domain_box, n_samples: int, seed=0, scale=None,
                                    batched: bool = False) -> float:
    """Sampled lower bound on the weak-convexity modulus of ``f``.

    Returns the largest observed
    ``[f(l x1 + (1-l) x2) - l f(x1) - (1-l) f(x2)] / [l (1-l) |x1 - x2|^2]``,
    floored at 0.  Half the triples use ``l = 1/2``, the rest ``l ~ U(0, 1)``.
    ``x1`` is uniform in ``domain_box = (lo, hi)``; ``x2`` is uniform too, or
    when ``scale`` is set, ``x1`` plus a uniform offset in ``[-scale, scale]``
    per coordinate.  With ``batched=True``, ``f`` maps an ``(n, d)`` array to
    ``(n,)`` values.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    lo = np.atleast_1d(np.asarray(domain_box[0], dtype=np.float64))
    hi = np.atleast_1d(np.asarray(domain_box[1], dtype=np.float64))
    rng = np.random.default_rng(seed)
    d = lo.size
    x1 = rng.uniform(lo, hi, size=(n_samples, d))
    if scale is None:
        x2 = rng.uniform(lo, hi, size=(n_samples, d))
    else:
        x2 = x1 + rng.uniform(-scale, scale, size=(n_samples, d))
    lam = np.full(n_samples, 0.5)
    half = n_samples // 2
    lam[half:] = rng.uniform(0.0, 1.0, size=n_samples - half)
    dist2 = np.sum((x1 - x2) ** 2, axis=1)
    keep = (dist2 > 0) & (lam > 0) & (lam < 1)
    x1, x2, lam, dist2 = x1[keep], x2[keep], lam[keep], dist2[keep]
    mid = lam[:, None] * x1 + (1 - lam[:, None]) * x2
    if batched:
        fm, f1, f2 = (np.asarray(f(v), dtype=np.float64) for v in (mid, x1, x2))
    else:
        squeeze = (lambda v: v[0]) if d == 1 else (lambda v: v)
        fm, f1, f2 = (np.array([float(f(squeeze(r))) for r in v]) for v in (mid, x1, x2))
    ratio = (fm - lam * f1 - (1 - lam) * f2) / (lam * (1 - lam) * dist2)
    return float(max(0.0, np.max(ratio, initial=0.0)))


# ---------------------------------------------------------------------------
# regularization experiments


@dataclass
class ConvergenceReport:
    deltas: list
    alphas: list
    errors: list = field(default_factory=list)
    realized_noise: list = field(default_factory=list)
    passed: bool = False
    schedule_valid: bool = True
    failed: bool = False
    message: str = ""

    def to_dict(self):
        return asdict(self)


def schedule_is_valid(deltas, alphas) -> bool:
    """Finite-sample reading of ``delta -> 0``, ``alpha -> 0``, ``delta / alpha -> 0``."""
    d = np.asarray(deltas, dtype=np.float64)
    a = np.asarray(alphas, dtype=np.float64)
    if d.shape != a.shape or d.size < 2 or np.any(d < 0) or np.any(a <= 0):
        return False
    if np.any(np.diff(d) > 0) or np.any(np.diff(a) >= 0):
        return False
    r = d / a
    if np.any(np.diff(r) > 1e-15 * np.maximum(1.0, r[:-1])):
        return False
    return bool(r[-1] < r[0] or np.all(r == 0))


def convergence_experiment(op, reg, x_true, schedule, solver_cfg, seed=0, tol: float = 1e-2) -> ConvergenceReport:
    """Reconstruct from ``A x_true + e_k`` with ``||e_k|| = delta_k`` at each ``(delta_k, alpha_k)``.

    Passes when the last error is below ``tol`` and the worst of the last
    three levels beats the worst of the first three.
    """
    from .solvers import solve, with_alpha

    deltas = [float(d) for d, _ in schedule]
    alphas = [float(a) for _, a in schedule]
    report = ConvergenceReport(deltas, alphas)
    if not schedule_is_valid(deltas, alphas):
        report.schedule_valid = False
        report.message = "schedule violates delta->0, alpha->0, delta/alpha->0"
        return report
    lip, beta = reg.modulus_bound()
    if max(alphas) * lip * beta > 1:
        raise ValueError("convergence experiment requires alpha * rho <= 1 at every level")
    x_true = np.asarray(x_true, dtype=np.float64)
    y0 = op.apply(x_true)
    rng = np.random.default_rng(seed)
    for k, (delta, alpha) in enumerate(zip(deltas, alphas)):
        g = rng.standard_normal(y0.shape)
        e = delta * g / np.linalg.norm(g)
        x_hat, trace = solve(op, reg, y0 + e, with_alpha(solver_cfg, alpha))
        if trace.error:
            report.failed = True
            report.message = f"level {k}: {trace.error}"
            return report
        report.realized_noise.append(float(np.linalg.norm(e)))
        report.errors.append(float(np.linalg.norm(x_hat - x_true)))
    errs = report.errors
    report.passed = bool(errs[-1] < tol and max(errs[-3:]) < max(errs[:3]))
    return report


@dataclass
class StabilityReport:
    alpha: float
    mu: float
    op_norm: float
    perturbations: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    bounds: list = field(default_factory=list)
    passed: bool = False

    def to_dict(self):
        return asdict(self)


def stability_experiment(op, reg, alpha, y, n_perturbations, magnitude, seed=0, solver_cfg=None,
                         tol: float = 1e-6) -> StabilityReport:
    """Check ``||x(y) - x(y + dy)|| <= 2 ||A|| ||dy|| / (alpha mu) + tol`` on random ``dy``.

    ``||dy||`` is uniform in ``[0, magnitude]``.  The bound follows from strong
    monotonicity of the subdifferential and needs ``alpha * rho <= 1``.
    """
    from .operators import estimate_operator_norm
    from .solvers import SolveConfig, solve

    lip, beta = reg.modulus_bound()
    if alpha * lip * beta > 1:
        raise ValueError("stability bound requires alpha*rho <= 1")
    if reg.mu <= 0:
        raise ValueError("stability bound requires mu > 0")
    norm = estimate_operator_norm(op, iters=1000, tol=1e-12)
    if solver_cfg is None:
        solver_cfg = SolveConfig(alpha=alpha, method="subgradient", n_steps=4000, step_rule="constant",
                                 step=1.0 / (2 * norm**2 + 2 * alpha * reg.mu), init="zero")
    y = np.asarray(y, dtype=np.float64)
    x_ref, _ = solve(op, reg, y, solver_cfg)
    rng = np.random.default_rng(seed)
    report = StabilityReport(alpha, reg.mu, norm)
    for _ in range(n_perturbations):
        g = rng.standard_normal(y.shape)
        dy = magnitude * rng.uniform() * g / np.linalg.norm(g)
        x_pert, _ = solve(op, reg, y + dy, solver_cfg)
        size = float(np.linalg.norm(dy))
        report.perturbations.append(size)
        report.distances.append(float(np.linalg.norm(x_pert - x_ref)))
        report.bounds.append(2 * norm * size / (alpha * reg.mu))
    report.passed = all(d <= b + tol for d, b in zip(report.distances, report.bounds))
    return report
