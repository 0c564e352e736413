"""Decoupled adversarial training of the convex and weakly convex parts.

The convex part learns to separate clean images from pseudo-inverse
reconstructions; the weak part, independently, separates clean sinograms
from noisy ones.  Both use the Wasserstein-critic loss with a one-sided
gradient penalty on random interpolates.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .networks import ICNN, RegularizerCNC, project_regularizer, save_checkpoint
from .operators import LinearOperator, estimate_operator_norm

log = logging.getLogger(__name__)

MODES = ("acncr", "acr", "ar")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    n_iters: int = 5000
    learning_rate: float = 1e-4
    penalty_weight: float = 10.0
    decay: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    mode: str = "acncr"

    def __post_init__(self):
        if self.batch_size < 1 or self.n_iters < 0 or self.checkpoint_every < 0:
            raise ValueError("batch_size must be positive, n_iters and checkpoint_every nonnegative")
        if self.learning_rate <= 0 or self.penalty_weight < 0:
            raise ValueError("learning_rate must be positive and penalty_weight nonnegative")
        if not 0 < self.decay < 1 or self.eps <= 0:
            raise ValueError("decay must be in (0, 1) and eps positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class SampleStreams:
    """Unpaired sample iterators; no index correspondence is assumed."""

    real_images: Iterator
    artifact_images: Iterator
    clean_sinograms: Iterator | None = None
    noisy_sinograms: Iterator | None = None


def shuffled_stream(samples, seed: int) -> Iterator:
    """Endless iterator over ``samples``, reshuffled every epoch."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot stream an empty sample set")
    rng = np.random.default_rng(seed)
    while True:
        for i in rng.permutation(len(samples)):
            yield samples[i]


@dataclass
class OptimizerState:
    """RMSprop second-moment accumulators keyed by parameter name."""

    sq_avg: dict = field(default_factory=dict)
    step: int = 0


def _generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def _penalty_and_norms(net, a, b, seed):
    if a.shape != b.shape:
        raise ValueError("penalty batches must have the same shape")
    if a.shape[0] == 0:
        raise ValueError("empty batch")
    gen = _generator(seed)
    u = torch.rand(a.shape[0], generator=gen, dtype=a.dtype).reshape(-1, *([1] * (a.ndim - 1)))
    xh = (u * a + (1 - u) * b).detach().requires_grad_(True)
    (g,) = torch.autograd.grad(net(xh).sum(), xh, create_graph=True)
    norms = g.reshape(g.shape[0], -1).norm(dim=1)
    return torch.relu(norms - 1).pow(2).mean(), norms


def gradient_penalty(net, a_batch, b_batch, seed=0):
    """``mean((||grad net(u a + (1 - u) b)|| - 1)_+^2)`` with one ``u ~ U(0, 1)`` per pair."""
    return _penalty_and_norms(net, a_batch, b_batch, seed)[0]


def _critic_terms(net, real, fake, lam, seed):
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty batch")
    pen = gradient_penalty(net, real, fake, seed) if lam != 0 else torch.zeros((), dtype=real.dtype)
    vr, vf = net(real), net(fake)
    return vr.mean() - vf.mean() + lam * pen, pen, vr, vf


def critic_loss(net, real_batch, fake_batch, lam: float, seed=0):
    """``mean(net(real)) - mean(net(fake)) + lam * gradient_penalty``; small on real, large on fake."""
    return _critic_terms(net, real_batch, fake_batch, lam, seed)[0]


def optimizer_step(state: OptimizerState, params: dict, grads: dict, lr: float, decay: float = 0.9,
                   eps: float = 1e-8, nonneg: Iterable[str] = ()):
    """One RMSprop step; returns ``(new_state, new_params)`` without mutating the inputs.

    ``v <- decay v + (1 - decay) g^2``, ``p <- p - lr g / sqrt(v + eps)``; names
    in ``nonneg`` are clamped at zero afterwards.
    """
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient for {name}")
    nonneg = set(nonneg)
    new_sq, new_params = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        v = state.sq_avg.get(name)
        if v is None:
            v = torch.zeros_like(p)
        if g is None:
            new_sq[name], new = v.clone(), p.clone()
        else:
            v = decay * v + (1 - decay) * g * g
            new = p - lr * g / torch.sqrt(v + eps)
            new_sq[name] = v
        if name in nonneg:
            new = new.clamp(min=0.0)
        new_params[name] = new
    return OptimizerState(new_sq, state.step + 1), new_params


def empirical_lipschitz(net, sample_pairs) -> float:
    """``max |net(a) - net(b)| / ||a - b||`` over the pairs; coincident pairs are skipped."""
    best = 0.0
    seen = False
    for a, b in sample_pairs:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        d = float(np.linalg.norm(a - b))
        if d == 0.0:
            continue
        seen = True
        best = max(best, abs(float(net(a)) - float(net(b))) / d)
    if not seen:
        raise ValueError("need at least one non-coincident pair")
    return best


def _lipschitz_from_values(xa, xb, va, vb) -> float:
    d = (xa - xb).reshape(xa.shape[0], -1).norm(dim=1)
    ok = d > 0
    if not bool(ok.any()):
        return 0.0
    return float(((va - vb).abs()[ok] / d[ok]).max())


def nonneg_parameter_names(reg: RegularizerCNC) -> list[str]:
    names = []
    ids = set()
    for net in (reg.convex, None if reg.weak is None else reg.weak.outer):
        if isinstance(net, ICNN) and net.constrained:
            ids.update(id(w) for w in net.z_weights())
    for name, p in reg.named_parameters():
        if id(p) in ids:
            names.append(name)
    return names


def _next_batch(stream, name, batch_size, dtype):
    try:
        items = [np.asarray(next(stream)) for _ in range(batch_size)]
    except StopIteration:
        raise TrainingError(f"sample stream '{name}' exhausted") from None
    return torch.as_tensor(np.stack(items), dtype=dtype)


def check_unit_norm(op: LinearOperator, tol: float = 0.01) -> float:
    norm = estimate_operator_norm(op, iters=200, tol=1e-8)
    if abs(norm - 1.0) > tol:
        raise ValueError(f"operator must be normalized to unit norm (estimated {norm:.4g})")
    return norm


def train_acncr(streams: SampleStreams, op: LinearOperator, cfg: TrainConfig, reg: RegularizerCNC,
                opt_state: OptimizerState | None = None, checkpoint_dir=None, log_path=None,
                checkpoint_extra: dict | None = None):
    """Train ``reg`` in place and return ``(reg, opt_state)``.

    Each iteration updates the convex part on clean vs. artifact images and,
    separately, the weak part on clean vs. noisy sinograms.  The two losses
    share no parameters.  A non-finite loss aborts with :class:`TrainingError`
    before anything is written, so the last checkpoint on disk stays good.
    """
    check_unit_norm(op)
    if cfg.mode != "acncr" and reg.weak is not None:
        raise ValueError(f"mode {cfg.mode!r} trains the image-space critic only")
    if reg.weak is not None and (streams.clean_sinograms is None or streams.noisy_sinograms is None):
        raise ValueError("weak part needs clean and noisy sinogram streams")
    opt_state = opt_state or OptimizerState()
    dtype = reg.dtype
    gen_c = torch.Generator().manual_seed(2 * cfg.seed + 1)
    gen_wc = torch.Generator().manual_seed(2 * cfg.seed + 2)
    convex_params = [(n, p) for n, p in reg.named_parameters() if n.startswith("convex.")]
    weak_params = [(n, p) for n, p in reg.named_parameters() if n.startswith("weak.")]
    nonneg = nonneg_parameter_names(reg)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    t0 = time.perf_counter()
    try:
        for it in range(1, cfg.n_iters + 1):
            real = _next_batch(streams.real_images, "real_images", cfg.batch_size, dtype)
            fake = _next_batch(streams.artifact_images, "artifact_images", cfg.batch_size, dtype)
            loss_c, pen_c, vr, vf = _critic_terms(reg.convex_value, real, fake, cfg.penalty_weight, gen_c)
            grads = {}
            if convex_params:
                gs = torch.autograd.grad(loss_c, [p for _, p in convex_params])
                grads.update({n: g for (n, _), g in zip(convex_params, gs)})
            loss_wc = pen_wc = None
            if reg.weak is not None:
                clean = _next_batch(streams.clean_sinograms, "clean_sinograms", cfg.batch_size, dtype)
                noisy = _next_batch(streams.noisy_sinograms, "noisy_sinograms", cfg.batch_size, dtype)
                loss_wc, pen_wc, _, _ = _critic_terms(reg.weak, clean, noisy, cfg.penalty_weight, gen_wc)
                gs = torch.autograd.grad(loss_wc, [p for _, p in weak_params])
                grads.update({n: g for (n, _), g in zip(weak_params, gs)})
            loss_c, pen_c = loss_c.detach(), pen_c.detach()
            if loss_wc is not None:
                loss_wc, pen_wc = loss_wc.detach(), pen_wc.detach()
            losses = [float(loss_c)] + ([] if loss_wc is None else [float(loss_wc)])
            if not all(math.isfinite(v) for v in losses):
                raise TrainingError(f"non-finite loss at iteration {it}")
            params = {n: p.detach() for n, p in reg.named_parameters()}
            try:
                opt_state, new = optimizer_step(opt_state, params, grads, cfg.learning_rate, cfg.decay,
                                                cfg.eps, nonneg)
            except FloatingPointError as exc:
                raise TrainingError(f"iteration {it}: {exc}") from exc
            with torch.no_grad():
                for n, p in reg.named_parameters():
                    p.copy_(new[n])
            if cfg.mode != "ar":
                project_regularizer(reg)
            if log_fh is not None:
                rec = {
                    "iteration": it,
                    "loss_c": float(loss_c),
                    "loss_wc": None if loss_wc is None else float(loss_wc),
                    "penalty_c": float(pen_c),
                    "penalty_wc": None if pen_wc is None else float(pen_wc),
                    "lipschitz_estimate": _lipschitz_from_values(real, fake, vr.detach(), vf.detach()),
                    "wallclock": time.perf_counter() - t0,
                }
                log_fh.write(json.dumps(rec) + "\n")
            if checkpoint_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(reg, checkpoint_dir, checkpoint_extra, opt_state)
            if it % max(1, cfg.n_iters // 10) == 0:
                log.info("iter %d loss_c %.4g loss_wc %s", it, float(loss_c),
                         "-" if loss_wc is None else f"{float(loss_wc):.4g}")
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint_dir is not None:
        save_checkpoint(reg, checkpoint_dir, checkpoint_extra, opt_state)
    return reg, opt_state
