"""The ``theory-check`` suite: self-contained numerical checks with a JSON report."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import theory
from .networks import (
    DenseICNN,
    DenseSmoothNet,
    IWCNN,
    RegularizerCNC,
    certify_weak_convexity,
    torch_batch_fn,
)
from .operators import build_matrix_operator
from .solvers import SolveConfig, classify_regime


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class TheoryReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "failed": self.failed,
                           "checks": [asdict(c) for c in self.checks]}, indent=2, default=float)


def count_midpoint_violations(f, sample_shape, n: int, seed=0, mu: float = 0.0, tol: float = 1e-6,
                              low: float = 0.0, high: float = 1.0, batch: int = 512) -> int:
    """Count pairs breaking ``f(m) <= (f(a) + f(b)) / 2 - mu |a - b|^2 / 4 + tol``.

    ``f`` is batched: ``(k, *sample_shape) -> (k,)``; points are uniform in
    ``[low, high]``.
    """
    rng = np.random.default_rng(seed)
    bad = 0
    done = 0
    while done < n:
        k = min(batch, n - done)
        a = rng.uniform(low, high, size=(k, *sample_shape))
        b = rng.uniform(low, high, size=(k, *sample_shape))
        fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
        d2 = np.sum((a - b).reshape(k, -1) ** 2, axis=1)
        bad += int(np.sum(fm > 0.5 * (fa + fb) - 0.25 * mu * d2 + tol))
        done += k
    return bad


def random_iwcnn(rng_seed: int, dim: int = 6, m: int = 6, dtype=torch.float64) -> IWCNN:
    """Small dense IWCNN with nonconvex random smooth inner part."""
    torch.manual_seed(rng_seed)
    inner = DenseSmoothNet(dim, (16, 16), m)
    outer = DenseICNN(m, (16, 16))
    with torch.no_grad():
        for p in inner.parameters():
            p.mul_(2.0)
    return IWCNN(outer, inner).to(dtype)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    return wrapper


@_timed
def check_pwl_sweep(n: int = 1000, samples: int = 200, seed: int = 0, inject_bad: bool = False) -> CheckResult:
    """Random PWLs: convex ones have zero sampled modulus and equal their max of affines;
    nonconvex ones get verified violation witnesses at rho in {1, 10, 100}."""
    rng = np.random.default_rng(seed)
    cases = [(theory.random_pwl(rng, convex=(i % 2 == 0)), i % 2 == 0) for i in range(n)]
    if inject_bad:
        cases.append((theory.PiecewiseLinear1D.from_slopes([0.0], [1.0, -1.0]), True))
    failures = []
    worst_rho = 0.0
    worst_max = 0.0
    for j, (f, labeled_convex) in enumerate(cases):
        if labeled_convex:
            span = max(6.0, 2 * max(abs(b) for b in f.breakpoints) + 1)
            rho = theory.estimate_weak_convexity_modulus(
                lambda x, f=f: theory.pwl_eval(f, x[:, 0]), (-span, span), samples, seed=(seed, j), batched=True)
            xs = rng.uniform(-span, span, size=200)
            gap = float(np.max(np.abs(theory.pwl_eval(f, xs) - theory.pwl_max_form(f, xs))))
            worst_rho, worst_max = max(worst_rho, rho), max(worst_max, gap)
            if rho > 1e-6 or gap > 1e-9:
                failures.append({"index": j, "rho_hat": rho, "max_form_gap": gap})
        else:
            for r in (1.0, 10.0, 100.0):
                w = theory.pwl_weak_convexity_witness(f, r)
                if w is None or not w.verified:
                    failures.append({"index": j, "rho": r})
    return CheckResult("pwl_sweep", not failures, {
        "n": len(cases), "failures": failures[:10], "n_failures": len(failures),
        "max_convex_rho_hat": worst_rho, "max_form_gap": worst_max})


@_timed
def check_modulus_stub(samples: int = 100_000, seed: int = 0, dim: int = 4) -> CheckResult:
    rho = theory.estimate_weak_convexity_modulus(
        lambda x: -np.sum(x * x, axis=1), (-np.ones(dim), np.ones(dim)), samples, seed=seed, batched=True)
    return CheckResult("modulus_stub", abs(rho - 1.0) <= 0.02, {"rho_hat": rho})


@_timed
def check_icnn_convexity(n_nets: int = 10, n_checks: int = 10_000, seed: int = 0, dim: int = 8) -> CheckResult:
    per = max(1, n_checks // n_nets)
    bad = 0
    for i in range(n_nets):
        torch.manual_seed(seed * 1000 + i)
        net = DenseICNN(dim, (32, 32, 32)).double()
        bad += count_midpoint_violations(torch_batch_fn(net, (dim,)), (dim,), per, seed=(seed, i), low=-1, high=1)
    return CheckResult("icnn_convexity", bad == 0, {"violations": bad, "checks": per * n_nets})


@_timed
def check_iwcnn_certificates(n_nets: int = 50, samples: int = 3000, seed: int = 0) -> CheckResult:
    rows = []
    for i in range(n_nets):
        net = random_iwcnn(seed * 1000 + i)
        reg = RegularizerCNC(None, net, 0.0, (1,), (6,))
        c = certify_weak_convexity(reg, samples, seed=(seed, i), box=(-2.0, 2.0))
        rows.append({"L": c.L, "beta": c.beta, "rho_bound": c.rho_bound, "empirical_rho": c.empirical_rho,
                     "holds": c.holds})
    return CheckResult("iwcnn_certificates", all(r["holds"] for r in rows), {
        "n": n_nets, "max_ratio": max(r["empirical_rho"] / r["rho_bound"] for r in rows),
        "nonconvex_instances": sum(r["empirical_rho"] > 0 for r in rows)})


def canonical_instance(mu: float = 1.0):
    """``A = [1 0]`` on R^2 with the zero-network regularizer ``mu ||x||^2``."""
    op = build_matrix_operator([[1.0, 0.0]])
    reg = RegularizerCNC(None, None, mu, (2,), (1,))
    return op, reg


def canonical_schedule(levels: int):
    return [(2.0**-k, math.sqrt(2.0**-k)) for k in range(1, levels + 1)]


CANONICAL_SOLVER = SolveConfig(alpha=1.0, method="subgradient", n_steps=300, step_rule="constant",
                               step=0.25, init="zero")


@_timed
def check_convergence(levels: int = 20, tol: float = 1e-2, seeds=(0, 1, 2)) -> CheckResult:
    op, reg = canonical_instance()
    x_dag = np.array([1.0, 0.0])
    out = {}
    ok = True
    for s in seeds:
        rep = theory.convergence_experiment(op, reg, x_dag, canonical_schedule(levels), CANONICAL_SOLVER,
                                            seed=s, tol=tol)
        out[str(s)] = {"final_error": rep.errors[-1] if rep.errors else None, "passed": rep.passed}
        ok &= rep.passed
    return CheckResult("convergence", ok, {"levels": levels, "tol": tol, "seeds": out})


@_timed
def check_stability(n_perturbations: int = 50, seed: int = 0) -> CheckResult:
    op, reg = canonical_instance()
    r1 = theory.stability_experiment(op, reg, 1.0, np.array([1.0]), n_perturbations, 0.5, seed=seed)
    rng = np.random.default_rng(seed)
    op2 = build_matrix_operator(rng.standard_normal((10, 10)))
    reg2 = RegularizerCNC(None, None, 1.0, (10,), (10,))
    r2 = theory.stability_experiment(op2, reg2, 0.5, rng.standard_normal(10), n_perturbations, 1.0, seed=seed)
    return CheckResult("stability", r1.passed and r2.passed, {
        "canonical_max_slack": min(b - d for b, d in zip(r1.bounds, r1.distances)),
        "random_max_slack": min(b - d for b, d in zip(r2.bounds, r2.distances))})


@_timed
def check_regime_boundary() -> CheckResult:
    rho = 2.0
    at = classify_regime(0.5, rho, 0.1, 1.0).classification
    above = classify_regime(np.nextafter(0.5, 1.0), rho, 0.1, 1.0).classification
    below = classify_regime(np.nextafter(0.5, 0.0), rho, 0.1, 1.0).classification
    ok = at == "strongly_convex" and below == "strongly_convex" and above == "weakly_convex"
    return CheckResult("regime_boundary", ok, {"below": below, "at": at, "above": above})


@_timed
def check_trained_regularizer(reg: RegularizerCNC, n_checks: int = 10_000, samples: int = 600,
                              seed: int = 0, data_box=(-1.0, 1.0)) -> CheckResult:
    reg = copy.deepcopy(reg).double()
    details = {}
    ok = True
    if reg.convex is not None and reg.convex.constrained:
        bad = count_midpoint_violations(torch_batch_fn(reg.convex, reg.image_shape), reg.image_shape,
                                        n_checks, seed=seed, batch=128)
        details["convex_violations"] = bad
        ok &= bad == 0
    if reg.weak is not None:
        c = certify_weak_convexity(reg, samples, seed=seed, box=data_box)
        details["certificate"] = asdict(c)
        ok &= c.holds
    return CheckResult("trained_regularizer", bool(ok), details)


def run_suite(tcfg, seed: int = 0, reg: RegularizerCNC | None = None, data_box=(-1.0, 1.0)) -> TheoryReport:
    report = TheoryReport()
    report.checks.append(check_pwl_sweep(tcfg.n_pwl, tcfg.pwl_samples, seed, tcfg.inject_bad_pwl))
    report.checks.append(check_modulus_stub(tcfg.modulus_samples, seed))
    report.checks.append(check_icnn_convexity(10, tcfg.icnn_checks, seed))
    report.checks.append(check_iwcnn_certificates(tcfg.n_iwcnn, tcfg.iwcnn_samples, seed))
    report.checks.append(check_convergence(tcfg.convergence_levels, tcfg.convergence_tol,
                                           tuple(tcfg.convergence_seeds)))
    report.checks.append(check_stability(tcfg.stability_perturbations, seed))
    report.checks.append(check_regime_boundary())
    if reg is not None:
        report.checks.append(check_trained_regularizer(reg, tcfg.checkpoint_checks, seed=seed, data_box=data_box))
    return report
