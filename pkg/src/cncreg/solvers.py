"""Variational reconstruction ``min_x ||Ax - y||^2 + alpha R(x, Ax)``."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .networks import RegularizerCNC
from .operators import LinearOperator, estimate_operator_norm, fbp
from .tensors import psnr as _psnr

METHODS = ("subgradient", "accelerated")
STEP_RULES = ("constant", "diminishing", "strongly_convex")
INITS = ("fbp", "zero", "provided")


@dataclass(frozen=True)
class SolveConfig:
    """Solver hyperparameters.

    ``step`` is the constant ``c`` of the constant and diminishing rules.
    ``momentum=None`` selects the Nesterov schedule ``k / (k + 3)``; a number
    fixes the extrapolation weight (0 gives plain gradient steps).
    """

    alpha: float
    method: str = "accelerated"
    n_steps: int = 200
    step_rule: str = "constant"
    step: float = 0.5
    momentum: float | None = None
    init: str = "fbp"
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")
        if not self.step > 0:
            raise ValueError("step must be positive")


@dataclass
class SolveTrace:
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    step: list = field(default_factory=list)
    psnr: list | None = None
    best_index: int | None = None
    best_iterate: np.ndarray | None = None
    error: str | None = None

    def __len__(self):
        return len(self.objective)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "grad_norm", "step", "psnr"])
            for k in range(len(self.objective)):
                w.writerow([
                    k,
                    repr(self.objective[k]),
                    repr(self.grad_norm[k]),
                    "" if k >= len(self.step) else repr(self.step[k]),
                    "" if self.psnr is None else repr(self.psnr[k]),
                ])


@dataclass(frozen=True)
class RegimeReport:
    alpha: float
    rho: float
    mu: float
    op_norm: float
    classification: str
    modulus: float


def classify_regime(alpha: float, rho: float, mu: float, op_norm: float) -> RegimeReport:
    """Convexity regime of ``J_alpha``.

    ``alpha * rho <= 1``: strongly convex with modulus ``alpha * mu``.
    Otherwise weakly convex with modulus ``-alpha mu + (alpha rho - 1) ||A||^2``.
    """
    if alpha * rho <= 1:
        return RegimeReport(alpha, rho, mu, op_norm, "strongly_convex", alpha * mu)
    return RegimeReport(alpha, rho, mu, op_norm, "weakly_convex", -alpha * mu + (alpha * rho - 1) * op_norm**2)


def objective(op: LinearOperator, reg: RegularizerCNC, x, y, alpha: float) -> float:
    ax = op.apply(x)
    _check_data(ax, y)
    return float(np.sum((ax - y) ** 2)) + alpha * reg.value(x, ax)


def objective_subgradient(op: LinearOperator, reg: RegularizerCNC, x, y, alpha: float) -> np.ndarray:
    return _value_and_subgradient(op, reg, np.asarray(x, dtype=np.float64), y, alpha)[1]


def _check_data(ax, y):
    if np.shape(y) != ax.shape:
        raise ValueError(f"data shape {np.shape(y)} does not match operator range {ax.shape}")


def _value_and_subgradient(op, reg, x, y, alpha):
    ax = op.apply(x)
    _check_data(ax, y)
    r = ax - y
    rv, gx, gy = reg.value_and_gradient(x, ax)
    val = float(np.sum(r * r)) + alpha * rv
    grad = 2.0 * op.adjoint(r) + alpha * (gx + op.adjoint(gy))
    return val, grad


def pseudo_inverse(op: LinearOperator, y) -> np.ndarray:
    """FBP for Radon operators, Moore-Penrose solve for explicit matrices."""
    if op.kind == "radon":
        return fbp(np.asarray(y) / op.scale, op.geometry)
    return (np.linalg.pinv(op.dense()) @ np.asarray(y, dtype=np.float64).ravel()).reshape(op.domain_shape)


def _initial(op, y, cfg, x0):
    if cfg.init == "provided" or x0 is not None:
        if x0 is None:
            raise ValueError("init='provided' needs x0")
        x0 = np.array(x0, dtype=np.float64)
        if x0.shape != op.domain_shape:
            raise ValueError("x0 does not match the operator domain")
        return x0
    if cfg.init == "zero":
        return np.zeros(op.domain_shape)
    return pseudo_inverse(op, y)


def _step_size(cfg: SolveConfig, k: int, mu: float) -> float:
    if cfg.step_rule == "constant":
        return cfg.step
    if cfg.step_rule == "diminishing":
        return cfg.step / (k + 1)
    if mu <= 0:
        raise ValueError("strongly_convex step rule needs mu > 0")
    return 2.0 / (cfg.alpha * mu * (k + 2))


def _run(op, reg, y, cfg: SolveConfig, x0, reference, momentum_schedule):
    # overflow is detected below and reported through trace.error
    with np.errstate(over="ignore", invalid="ignore"):
        return _iterate(op, reg, y, cfg, x0, reference, momentum_schedule)


def _iterate(op, reg, y, cfg, x0, reference, momentum_schedule):
    y = np.asarray(y, dtype=np.float64)
    x = _initial(op, y, cfg, x0)
    trace = SolveTrace(psnr=[] if reference is not None else None)
    best_obj = math.inf
    best_x = x.copy()
    best_psnr = -math.inf
    x_prev = x
    w = x
    for k in range(cfg.n_steps + 1):
        if momentum_schedule is None or w is x:
            val, grad = _value_and_subgradient(op, reg, x, y, cfg.alpha)
        else:
            val = objective(op, reg, x, y, cfg.alpha)
            _, grad = _value_and_subgradient(op, reg, w, y, cfg.alpha)
        if not (math.isfinite(val) and np.all(np.isfinite(grad))):
            trace.error = f"non-finite iterate at step {k}"
            return best_x, trace
        trace.objective.append(val)
        trace.grad_norm.append(float(np.linalg.norm(grad)))
        if reference is not None:
            p = _psnr(x, reference)
            trace.psnr.append(p)
            if p > best_psnr:
                best_psnr, trace.best_index, trace.best_iterate = p, k, x.copy()
        if val < best_obj:
            best_obj, best_x = val, x.copy()
        if k == cfg.n_steps:
            break
        eta = _step_size(cfg, k, reg.mu)
        trace.step.append(eta)
        x_new = w - eta * grad
        if momentum_schedule is None:
            x_prev, x, w = x, x_new, x_new
        else:
            beta = momentum_schedule(k)
            x_prev, x = x, x_new
            w = x + beta * (x - x_prev) if beta != 0 else x
    return x, trace


def subgradient_descent(op: LinearOperator, reg: RegularizerCNC, y, cfg: SolveConfig, x0=None, reference=None):
    """``x_{k+1} = x_k - eta_k v_k`` with ``v_k`` a subgradient of ``J_alpha``.

    Returns ``(x_final, trace)``.  On a non-finite iterate the lowest-objective
    iterate so far is returned and ``trace.error`` is set.
    """
    return _run(op, reg, y, cfg, x0, reference, None)


def accelerated_gd(op: LinearOperator, reg: RegularizerCNC, y, cfg: SolveConfig, x0=None, reference=None):
    """Nesterov-accelerated gradient descent for a fixed number of steps.

    The objective is traced at the main iterates ``x_k``; the gradient norm
    at the extrapolated points where gradients are taken.  With a
    ``reference`` image, ``trace.best_iterate`` holds the highest-PSNR
    iterate.
    """
    if cfg.momentum is None:
        def schedule(k):
            return k / (k + 3)
    else:
        def schedule(k):
            return cfg.momentum
    return _run(op, reg, y, cfg, x0, reference, schedule)


def solve(op, reg, y, cfg: SolveConfig, x0=None, reference=None):
    fn = accelerated_gd if cfg.method == "accelerated" else subgradient_descent
    return fn(op, reg, y, cfg, x0=x0, reference=reference)


# ---------------------------------------------------------------------------
# total variation baseline


def _grad2d(x):
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :-1] = x[:, 1:] - x[:, :-1]
    gy[:-1, :] = x[1:, :] - x[:-1, :]
    return gx, gy


def _div2d(px, py):
    # negative adjoint of _grad2d
    d = np.zeros_like(px)
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    d[:-1, :] += py[:-1, :]
    d[1:, :] -= py[:-1, :]
    return d


def tv_smooth(x, eps: float = 1e-6) -> float:
    gx, gy = _grad2d(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.sqrt(gx * gx + gy * gy + eps)))


def tv_smooth_gradient(x, eps: float = 1e-6) -> np.ndarray:
    gx, gy = _grad2d(np.asarray(x, dtype=np.float64))
    mag = np.sqrt(gx * gx + gy * gy + eps)
    return -_div2d(gx / mag, gy / mag)


def tv_reconstruct(op: LinearOperator, y, weight: float, n_steps: int, eps: float = 1e-6,
                   x0=None, reference=None):
    """Minimize ``||Ax - y||^2 + weight * sum sqrt(|grad x|^2 + eps)`` by accelerated descent.

    Returns the final iterate, or the best-PSNR one when ``reference`` is given.
    """
    if weight <= 0:
        raise ValueError("weight must be positive")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != op.range_shape:
        raise ValueError("data shape does not match operator range")
    if len(op.domain_shape) != 2:
        raise ValueError("tv_reconstruct expects a 2-D image domain")
    lip = 2 * estimate_operator_norm(op, iters=100, tol=1e-6) ** 2 + weight * 8 / math.sqrt(eps)
    eta = 1.0 / lip
    x = pseudo_inverse(op, y) if x0 is None else np.array(x0, dtype=np.float64)
    w = x
    best, best_p = x, -math.inf
    for k in range(n_steps):
        g = 2 * op.adjoint(op.apply(w) - y) + weight * tv_smooth_gradient(w, eps)
        x_new = w - eta * g
        w = x_new + (k / (k + 3)) * (x_new - x)
        x = x_new
        if reference is not None:
            p = _psnr(x, reference)
            if p > best_p:
                best, best_p = x, p
    return best if reference is not None else x


def with_alpha(cfg: SolveConfig, alpha: float) -> SolveConfig:
    return replace(cfg, alpha=alpha)
