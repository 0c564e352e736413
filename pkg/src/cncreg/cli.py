"""``cncreg`` command line: datasets, training, reconstruction, evaluation and theory checks.

Exit codes: 0 success, 1 check or validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import checks
from .config import ConfigError, RunConfig, load_config
from .networks import (
    ConvICNN,
    ConvSmoothNet,
    DenseICNN,
    DenseSmoothNet,
    IWCNN,
    RegularizerCNC,
    certify_weak_convexity,
    load_checkpoint,
    save_checkpoint,
)
from .operators import (
    NoiseModel,
    RadonGeometry,
    build_radon,
    estimate_operator_norm,
    fbp,
    limited_geometry,
    simulate_measurement,
    sparse_geometry,
)
from .solvers import SolveConfig, accelerated_gd, classify_regime, tv_reconstruct
from .tensors import PhantomSpec, TensorFormatError, generate_phantom, psnr, read_tensor, ssim, write_tensor
from .training import OptimizerState, SampleStreams, TrainConfig, TrainingError, shuffled_stream, train_acncr

log = logging.getLogger("cncreg")

METHODS = ("fbp", "tv", "acncr", "acr", "ar")
SPLITS = ("train", "test")


class CheckFailure(Exception):
    """Validation or check failure (exit code 1)."""


# ---------------------------------------------------------------------------
# helpers


def _seeds(seed: int, stream: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([seed, stream]).generate_state(n)] if n else []


def _fresh_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CheckFailure(f"{path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, default=float) + "\n", encoding="utf-8")
    tmp.replace(path)


def _read_json(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"missing {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def geometry_from_config(cfg: RunConfig) -> RadonGeometry:
    g = cfg.geometry
    nd = g.n_detectors or None
    if g.kind == "sparse":
        return sparse_geometry(g.image_size, g.n_angles, nd)
    geom = limited_geometry(g.image_size, g.n_angles, g.arc_degrees)
    return replace(geom, n_detectors=nd) if nd else geom


def _geometry_dict(geom: RadonGeometry, kind: str) -> dict:
    return {"kind": kind, "image_size": geom.image_size, "n_angles": geom.n_angles,
            "n_detectors": geom.n_detectors, "detector_spacing": geom.detector_spacing,
            "angles": list(geom.angles)}


def _load_split(directory: Path, names: list[str]) -> list[np.ndarray]:
    return [read_tensor(directory / n) for n in names]


def _sim_data(cfg: RunConfig):
    root = cfg.path("data_dir") / "sim"
    man = _read_json(root / "manifest.json")
    geom = geometry_from_config(cfg)
    if man["geometry"] != _geometry_dict(geom, cfg.geometry.kind):
        raise CheckFailure("geometry mismatch between config and simulated data")
    return root, man, geom


def build_model(cfg: RunConfig, geom: RadonGeometry, mode: str) -> RegularizerCNC:
    """Regularizer described by the ``model`` block; ``acr``/``ar`` drop the weak part."""
    m = cfg.model
    img = geom.image_shape
    sino = geom.sinogram_shape
    constrained = mode != "ar"
    if m.kind == "conv":
        convex = ConvICNN(img, m.icnn_channels, m.icnn_layers, m.icnn_kernel, m.slope, constrained)
        inner = ConvSmoothNet(sino, m.smooth_channels, m.smooth_layers, m.smooth_kernel, m.smooth_out)
    else:
        convex = DenseICNN(math.prod(img), m.dense_hidden, m.slope, constrained)
        inner = DenseSmoothNet(math.prod(sino), m.dense_hidden, m.smooth_out)
    weak = IWCNN(DenseICNN(m.smooth_out, m.outer_hidden, m.slope), inner) if mode == "acncr" else None
    return RegularizerCNC(convex, weak, m.mu, img, sino)


def _checkpoint_dir(cfg: RunConfig, mode: str, override) -> Path:
    return Path(override) if override else cfg.path("checkpoint_dir") / mode


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(cfg: RunConfig, args) -> int:
    p = cfg.phantom
    counts = {"train": p.n_train, "test": p.n_test}
    if sum(counts.values()) == 0:
        raise CheckFailure("empty dataset")
    root = _fresh_dir(cfg.path("data_dir") / "phantoms", args.force)
    manifest = {"config_hash": cfg.hash(), "image_size": cfg.geometry.image_size,
                "n_ellipses": p.n_ellipses, "intensity_range": [p.intensity_lo, p.intensity_hi], "splits": {}}
    for k, split in enumerate(SPLITS):
        d = root / split
        d.mkdir()
        seeds = _seeds(cfg.seed, k, counts[split])
        files = []
        for i, s in enumerate(seeds):
            spec = PhantomSpec(cfg.geometry.image_size, p.n_ellipses, s, (p.intensity_lo, p.intensity_hi))
            name = f"{i:04d}.cnct"
            write_tensor(generate_phantom(spec), d / name)
            files.append(name)
        manifest["splits"][split] = {"files": files, "seeds": seeds}
    _write_json(root / "manifest.json", manifest)
    print(f"phantom: wrote {counts['train']} train / {counts['test']} test images to {root}")
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    data = cfg.path("data_dir")
    pman = _read_json(data / "phantoms" / "manifest.json")
    geom = geometry_from_config(cfg)
    if pman["image_size"] != geom.image_size:
        raise CheckFailure(f"geometry mismatch: phantoms are {pman['image_size']}px, "
                           f"config expects {geom.image_size}px")
    root = data / "sim"
    gdict = _geometry_dict(geom, cfg.geometry.kind)
    old = root / "manifest.json"
    if old.is_file() and not args.force:
        if _read_json(old).get("geometry") != gdict:
            raise CheckFailure("geometry mismatch with existing simulated data (use --force to replace)")
    root = _fresh_dir(root, args.force)
    op = build_radon(geom)
    norm = estimate_operator_norm(op)
    manifest = {"config_hash": cfg.hash(), "geometry": gdict, "op_norm": norm, "sigma": cfg.noise.sigma,
                "splits": {}}
    for k, split in enumerate(SPLITS):
        files = pman["splits"][split]["files"]
        seeds = _seeds(cfg.seed, 100 + k, len(files))
        for sub in ("clean", "noisy", "fbp"):
            (root / split / sub).mkdir(parents=True)
        deltas = []
        for name, s in zip(files, seeds):
            x = read_tensor(data / "phantoms" / split / name)
            clean = op.apply(x)
            noisy, delta = simulate_measurement(op, x, NoiseModel(cfg.noise.sigma, s))
            write_tensor(clean, root / split / "clean" / name)
            write_tensor(noisy, root / split / "noisy" / name)
            write_tensor(fbp(noisy, geom), root / split / "fbp" / name)
            deltas.append(delta)
        manifest["splits"][split] = {"files": files, "noise_seeds": seeds, "delta": deltas}
    _write_json(root / "manifest.json", manifest)
    print(f"simulate: {cfg.geometry.kind} geometry, {geom.n_angles} angles, op_norm {norm:.6g}, "
          f"sigma {cfg.noise.sigma}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    root, man, geom = _sim_data(cfg)
    data = cfg.path("data_dir")
    t = cfg.train
    mode = args.mode or t.mode
    tcfg = TrainConfig(t.batch_size, t.n_iters, t.learning_rate, t.penalty_weight, t.decay, t.eps, cfg.seed,
                       t.checkpoint_every, mode)
    ckpt = _checkpoint_dir(cfg, mode, args.checkpoint)
    if args.resume:
        reg, _, opt_state = load_checkpoint(ckpt)
    else:
        _fresh_dir(ckpt, args.force)
        torch.manual_seed(cfg.seed)
        reg = build_model(cfg, geom, mode)
        opt_state = OptimizerState()
    scale = 1.0 / man["op_norm"]
    op = build_radon(geom).with_scale(scale)
    files = man["splits"]["train"]["files"]
    real = _load_split(data / "phantoms" / "train", files)
    fake = _load_split(root / "train" / "fbp", files)
    seeds = _seeds(cfg.seed, 200 + (opt_state.step if args.resume else 0), 4)
    streams = SampleStreams(shuffled_stream(real, seeds[0]), shuffled_stream(fake, seeds[1]))
    if reg.weak is not None:
        clean = [scale * s for s in _load_split(root / "train" / "clean", files)]
        noisy = [scale * s for s in _load_split(root / "train" / "noisy", files)]
        streams.clean_sinograms = shuffled_stream(clean, seeds[2])
        streams.noisy_sinograms = shuffled_stream(noisy, seeds[3])
    extra = {"config_hash": cfg.hash(), "mode": mode, "op_norm": man["op_norm"]}
    if mode == "ar":
        extra["label"] = "no guarantees"
    t0 = time.perf_counter()
    reg, opt_state = train_acncr(streams, op, tcfg, reg, opt_state, ckpt, ckpt / "train_log.jsonl", extra)
    elapsed = time.perf_counter() - t0
    if reg.weak is not None:
        box = max(float(np.abs(s).max()) for s in noisy)
        cert = certify_weak_convexity(reg, t.certificate_samples, seed=cfg.seed, box=(-box, box))
        extra.update({f"certificate.{k}": v for k, v in asdict(cert).items()})
        extra["certificate.holds"] = cert.holds
        print(f"train: certificate L={cert.L:.4g} beta={cert.beta:.4g} rho_bound={cert.rho_bound:.4g} "
              f"empirical_rho={cert.empirical_rho:.4g} holds={cert.holds}")
    save_checkpoint(reg, ckpt, extra, opt_state)
    label = " (no guarantees)" if mode == "ar" else ""
    print(f"train: mode {mode}{label}, {t.n_iters} iterations in {elapsed:.1f}s, "
          f"{reg.n_params()} parameters, checkpoint {ckpt}")
    return 0


def _metric_range(cfg: RunConfig, truth: np.ndarray) -> float:
    r = cfg.metrics.data_range
    return float(truth.max() - truth.min()) if r == "max" else float(r)


def _solve_cfg(cfg: RunConfig) -> SolveConfig:
    s = cfg.solve
    momentum = None if s.momentum == "nesterov" else float(s.momentum)
    return SolveConfig(s.alpha, s.method, s.n_steps, s.step_rule, s.step, momentum, s.init, cfg.seed)


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    method = args.method
    if method == "ar-convexified":
        raise CheckFailure("method 'ar-convexified' is not supported")
    root, man, geom = _sim_data(cfg)
    data = cfg.path("data_dir")
    out = cfg.path("report_dir")
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"{method}.json"
    if report_path.exists() and not args.force:
        raise CheckFailure(f"{report_path} exists (use --force to overwrite)")
    img_dir = _fresh_dir(out / "images" / method, True)
    files = man["splits"]["test"]["files"]
    truths = _load_split(data / "phantoms" / "test", files)
    ys = _load_split(root / "test" / "noisy", files)
    scale = 1.0 / man["op_norm"]
    op = build_radon(geom).with_scale(scale)
    report = {"method": method, "experiment": cfg.experiment, "geometry": _geometry_dict(geom, cfg.geometry.kind),
              "config_hash": cfg.hash(), "test_ids": files, "oracle_stopped": method != "fbp",
              "metrics": {"data_range": cfg.metrics.data_range, "ssim_window": "gaussian", "ssim_sigma": 1.5,
                          "ssim_border": 5}}
    reg = None
    if method in ("acncr", "acr", "ar"):
        ckpt = _checkpoint_dir(cfg, "ar" if method == "ar" else "acncr", args.checkpoint)
        if not (ckpt / "manifest.txt").is_file():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        reg, _, _ = load_checkpoint(ckpt)
        if method == "acr":
            reg.weak = None
        lip, beta = reg.modulus_bound()
        scfg = _solve_cfg(cfg)
        reg_report = classify_regime(scfg.alpha, lip * beta, reg.mu, 1.0)
        report.update({"n_params": reg.n_params(), "checkpoint": str(ckpt), "alpha": scfg.alpha,
                       "regime": asdict(reg_report)})
        if method == "ar":
            report["label"] = "no guarantees"
        (out / "traces").mkdir(exist_ok=True)
    elif method == "tv":
        report.update({"n_params": 1, "tv_weight": cfg.tv.weight})
    else:
        report["n_params"] = 0
    rows = []
    t0 = time.perf_counter()
    for name, x_true, y in zip(files, truths, ys):
        best = None
        if method == "fbp":
            x = fbp(y, geom)
        elif method == "tv":
            x = tv_reconstruct(op, y * scale, cfg.tv.weight, cfg.tv.n_steps, reference=x_true)
        else:
            _, trace = accelerated_gd(op, reg, y * scale, scfg, reference=x_true)
            x, best = trace.best_iterate, trace.best_index
            trace.to_csv(out / "traces" / f"{method}_{Path(name).stem}.csv")
        rng = _metric_range(cfg, x_true)
        rows.append({"id": name, "psnr": psnr(x, x_true, rng), "ssim": ssim(x, x_true, rng), "best_index": best})
        write_tensor(x, img_dir / name)
    report["wallclock"] = time.perf_counter() - t0
    report["images"] = rows
    report["mean_psnr"] = float(np.mean([r["psnr"] for r in rows]))
    report["mean_ssim"] = float(np.mean([r["ssim"] for r in rows]))
    _write_json(report_path, report)
    with open(out / f"{method}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psnr", "ssim", "best_index"])
        for r in rows:
            w.writerow([r["id"], repr(r["psnr"]), repr(r["ssim"]), "" if r["best_index"] is None else r["best_index"]])
    print(f"reconstruct: {method} on {len(rows)} images, mean PSNR {report['mean_psnr']:.3f} dB, "
          f"mean SSIM {report['mean_ssim']:.4f}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = cfg.path("report_dir")
    paths = [Path(p) for p in args.reports] or sorted(
        p for p in out.glob("*.json") if p.name not in ("theory.json",))
    if not paths:
        raise CheckFailure("no reports to evaluate")
    reports = [_read_json(p) for p in paths]
    ids = reports[0]["test_ids"]
    for p, r in zip(paths, reports):
        if r["test_ids"] != ids:
            raise CheckFailure(f"inconsistent test sets: {p} differs from {paths[0]}")
    header = ["method", "geometry", "n_images", "psnr", "ssim", "n_params"]
    rows = [[r["method"], r["geometry"]["kind"], len(r["images"]), r["mean_psnr"], r["mean_ssim"], r["n_params"]]
            for r in reports]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print(f"{'method':<8} {'geometry':<8} {'n':>4} {'PSNR':>8} {'SSIM':>7} {'#param':>9}")
    for m, g, n, p, s, k in rows:
        print(f"{m:<8} {g:<8} {n:>4} {p:>8.3f} {s:>7.4f} {k:>9}")
    return 0


def cmd_theory_check(cfg: RunConfig, args) -> int:
    reg = None
    ckpt = _checkpoint_dir(cfg, "acncr", args.checkpoint)
    if cfg.theory.use_checkpoint and (ckpt / "manifest.txt").is_file():
        reg, _, _ = load_checkpoint(ckpt)
    report = checks.run_suite(cfg.theory, seed=cfg.seed, reg=reg)
    out = cfg.path("report_dir")
    out.mkdir(parents=True, exist_ok=True)
    (out / "theory.json").write_text(report.to_json() + "\n", encoding="utf-8")
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} ({c.seconds:.2f}s)")
    if not report.passed:
        print(f"theory-check failed: {', '.join(report.failed)}")
        return 1
    return 0


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "theory-check": cmd_theory_check,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cncreg", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("reports", nargs="*", help="report JSON files (evaluate only)")
    ap.add_argument("--config", required=True, help="TOML run configuration")
    ap.add_argument("--force", action="store_true", help="overwrite existing outputs")
    ap.add_argument("--seed", type=int, default=None, help="override the global seed")
    ap.add_argument("--method", default="acncr", help="reconstruction method: " + ", ".join(METHODS))
    ap.add_argument("--mode", choices=("acncr", "acr", "ar"), default=None, help="training mode override")
    ap.add_argument("--checkpoint", default=None, help="checkpoint directory override")
    ap.add_argument("--resume", action="store_true", help="continue training from the checkpoint")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "reconstruct" and args.method not in METHODS + ("ar-convexified",):
            raise CheckFailure(f"unknown method {args.method!r}")
        return COMMANDS[args.command](cfg, args)
    except (OSError, TensorFormatError, json.JSONDecodeError) as exc:
        print(f"cncreg {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except (CheckFailure, ConfigError, TrainingError, ValueError) as exc:
        print(f"cncreg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
