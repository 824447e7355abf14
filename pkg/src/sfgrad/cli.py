"""Command-line entry points tying the pipeline together.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import classical, discontinuity, evaluate, fileio, training
from .errors import DataError, NumericalError
from .fno import fnin_forward, init_params
from .geometry import (
    CameraModel,
    DepthMap,
    GradientField,
    NormalMap,
    gradients_from_normals,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def worker_count() -> int:
    """Worker cap from SFG_THREADS; 0 or unset means automatic."""
    raw = os.environ.get("SFG_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _load_normal_map(normals_path, mask_path) -> NormalMap:
    img = fileio.read_pfm(normals_path)
    if img.ndim != 3:
        raise DataError("normal map PFM must have three channels")
    mask = fileio.read_mask(mask_path) if mask_path else np.ones(img.shape[:2], bool)
    if mask.shape != img.shape[:2]:
        raise DataError("mask size does not match the normal map")
    n = img.astype(np.float64)
    norm = np.linalg.norm(n, axis=-1)
    mask = mask & (norm > 1e-6) & (n[..., 2] > 0)
    n = np.where(mask[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)
    return NormalMap(n, mask)


def _check_camera(cam: CameraModel, shape) -> CameraModel:
    if (cam.height, cam.width) != shape:
        raise DataError(f"camera says {cam.height}x{cam.width}, data is "
                        f"{shape[0]}x{shape[1]}")
    return cam


def _integrate_classical(method: str, n: NormalMap, cam: CameraModel) -> DepthMap:
    g = gradients_from_normals(n, cam)
    delta = cam.cell_size
    if method in ("dct", "fft"):
        # transform solvers need a full rectangle: multiply the gradient by
        # the mask (zero fill) and crop the result back to the object
        full = np.ones(g.shape, dtype=bool)
        g_fill = GradientField(np.where(g.mask, g.p, 0.0),
                               np.where(g.mask, g.q, 0.0), full, space=g.space)
        solver = classical.integrate_dct if method == "dct" else classical.integrate_fft
        z_full = solver(g_fill, du=delta, dv=delta)
        z = DepthMap(np.where(n.mask, z_full.values, 0.0), n.mask.copy(), space=g.space)
    else:
        z = classical.integrate_dense_lsq(g, du=delta, dv=delta)
    if z.space == "log":
        z = z.to_linear()
    return z


def cmd_integrate(args) -> int:
    n = _load_normal_map(args.normals, args.mask)
    cam = _check_camera(fileio.load_camera(args.camera), n.shape)
    omega = None
    if args.method in ("fnin", "fnin-s"):
        if not args.params:
            raise DataError("--params is required for the learned integrator")
        params = fileio.load_params(args.params)
        depth, omega = fnin_forward(n, cam, params)
        if not args.no_refine:
            if args.method == "fnin":
                depth = discontinuity.refine(n, cam, depth, attention=omega, lam=args.lam)
            else:
                depth = discontinuity.refine(n, cam, depth, sigmoid_k=args.sigmoid_k, lam=args.lam)
        elif depth.space == "log":
            depth = depth.to_linear()
    else:
        depth = _integrate_classical(args.method, n, cam)
    fileio.write_pfm(args.out_depth, np.where(depth.mask, depth.values, 0.0))
    if args.out_omega:
        if omega is None:
            raise DataError("--out-omega applies to the learned integrator only")
        fileio.write_pfm(args.out_omega, omega.weights)
    return EXIT_OK


def cmd_refine(args) -> int:
    n = _load_normal_map(args.normals, args.mask)
    cam = _check_camera(fileio.load_camera(args.camera), n.shape)
    z = DepthMap(fileio.read_pfm(args.depth).astype(np.float64), n.mask,
                 space="linear", relative=True)
    if args.weights == "attention":
        if not args.omega:
            raise DataError("--omega is required for attention weights")
        w_img = fileio.read_pfm(args.omega).astype(np.float64)
        from .geometry import AttentionWeightMap
        att = AttentionWeightMap(np.clip(w_img, 0.0, 1.0), n.mask)
        out = discontinuity.refine(n, cam, z, attention=att, lam=args.lam)
    else:
        out = discontinuity.refine(n, cam, z, sigmoid_k=args.sigmoid_k, lam=args.lam)
    fileio.write_pfm(args.out, np.where(out.mask, out.values, 0.0))
    return EXIT_OK


def _eval_one(est_path, gt_path, args) -> tuple[str, float, float]:
    t0 = time.perf_counter()
    est_img = fileio.read_pfm(est_path).astype(np.float64)
    gt_img = fileio.read_pfm(gt_path).astype(np.float64)
    if est_img.shape != gt_img.shape:
        raise DataError(f"{est_path}: estimate and ground truth sizes differ")
    mask = fileio.read_mask(args.mask) if args.mask else np.ones(est_img.shape, bool)
    if mask.shape != est_img.shape:
        raise DataError("mask size does not match the depth maps")
    est = DepthMap(est_img, mask)
    gt = DepthMap(gt_img, mask)
    err = evaluate.mae_mm(est, gt, mu=args.mu, align=args.align)
    if args.out_map:
        img = evaluate.error_map(est, gt, mu=args.mu, ceiling_mm=args.ceiling,
                                 align=args.align)
        fileio.write_png(args.out_map, img)
    return Path(est_path).stem, err, time.perf_counter() - t0


def cmd_eval(args) -> int:
    est, gt = Path(args.est), Path(args.gt)
    if est.is_dir() != gt.is_dir():
        raise DataError("est and gt must both be files or both directories")
    if est.is_dir():
        names = sorted(p.name for p in est.glob("*.pfm"))
        pairs = [(est / name, gt / name) for name in names if (gt / name).exists()]
        if not pairs:
            raise DataError("no matching PFM pairs between the directories")
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            results = list(pool.map(lambda pr: _eval_one(pr[0], pr[1], args), pairs))
    else:
        results = [_eval_one(est, gt, args)]
    for name, err, runtime in results:
        print(f"{name}: MAE {err:.6g} mm")
        if args.out_csv:
            fileio.append_metric_row(args.out_csv, name, args.method_label, err, runtime)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = training.DatasetSpec(count=args.count, height=args.size, width=args.size,
                                kinds=tuple(args.spec.split(",")),
                                projection=args.projection,
                                f=args.f, mu=args.mu)
    samples = training.synth_dataset(spec, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = out / f"sample_{i:04d}"
        stem.mkdir(exist_ok=True)
        fileio.write_pfm(stem / "normals.pfm", s.normals.normals.astype(np.float32))
        fileio.write_mask(stem / "mask.png", s.normals.mask)
        fileio.write_pfm(stem / "gt_depth.pfm", s.depth.values.astype(np.float32))
        fileio.save_camera(stem / "camera.json", s.cam)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    cfg_keys = {f.name for f in fields(training.TrainConfig)} - {"augment"}
    cfg = training.TrainConfig(**{k: v for k, v in doc.items() if k in cfg_keys})
    if "augment" in doc:
        cfg.augment = training.AugmentConfig(**doc["augment"])
    ds_doc = doc.get("dataset", {})
    spec = training.DatasetSpec(**ds_doc)
    spec.augment = cfg.augment
    dataset = training.synth_dataset(spec, seed=cfg.seed)
    params, history = training.train_toy(
        cfg, dataset,
        width=doc.get("width", 16),
        attention_width=doc.get("attention_width", 8),
        k_max=doc.get("k_max", 16),
    )
    fileio.save_params(args.out_params, params)
    training.write_loss_history(args.out_history, history)
    print(f"final val loss {history[-1].val_loss:.6g} "
          f"(from {history[0].val_loss:.6g})")
    return EXIT_OK


def cmd_mesh(args) -> int:
    img = fileio.read_pfm(args.depth).astype(np.float64)
    mask = fileio.read_mask(args.mask) if args.mask else np.ones(img.shape, bool)
    cam = _check_camera(fileio.load_camera(args.camera), img.shape)
    z = DepthMap(img, mask)
    fileio.export_obj(args.out, z, cam)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    params = fileio.load_params(args.params) if args.params else \
        init_params(seed=args.seed, width=8, attention_width=4, k_max=4)
    # base depth away from the network's initial estimate keeps the check
    # clear of the L1 kink band
    spec = training.DatasetSpec(count=1, height=16, width=16, kinds=("bump",),
                                base_depth=1.3)
    sample = training.synth_dataset(spec, seed=args.seed)[0]
    report = training.grad_check(params, sample, seed=args.seed)
    for name in sorted(report.per_tensor):
        print(f"{name}: {report.per_tensor[name]:.3e}")
    print(f"max relative error {report.max_rel_error:.3e} ({report.worst_tensor})")
    if not report.passed:
        for line in report.failures:
            print("FAIL", line, file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="sfgrad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("integrate", help="normals -> depth")
    p.add_argument("--normals", required=True)
    p.add_argument("--mask")
    p.add_argument("--camera", required=True)
    p.add_argument("--out-depth", required=True)
    p.add_argument("--out-omega")
    p.add_argument("--method", choices=["fnin", "fnin-s", "dct", "fft", "dense"],
                   default="fnin")
    p.add_argument("--params")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=discontinuity.LAMBDA_DEFAULT)
    p.add_argument("--sigmoid-k", type=float, default=discontinuity.SIGMOID_K_DEFAULT)
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("refine", help="stand-alone Stage II refinement")
    p.add_argument("--normals", required=True)
    p.add_argument("--mask")
    p.add_argument("--camera", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", choices=["sigmoid", "attention"], default="sigmoid")
    p.add_argument("--omega")
    p.add_argument("--sigmoid-k", type=float, default=discontinuity.SIGMOID_K_DEFAULT)
    p.add_argument("--lambda", dest="lam", type=float, default=discontinuity.LAMBDA_DEFAULT)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="MAE and error maps")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask")
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--align", choices=["offset", "scale"], default="offset")
    p.add_argument("--out-csv")
    p.add_argument("--out-map")
    p.add_argument("--ceiling", type=float, default=evaluate.ERROR_CEILING_MM)
    p.add_argument("--method-label", default="unknown")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic samples")
    p.add_argument("--spec", default="plane,bump,hemisphere,sinusoid,step")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--projection", choices=["orthographic", "perspective"],
                   default="orthographic")
    p.add_argument("--f", type=float)
    p.add_argument("--mu", type=float, default=500.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-toy", help="desk-scale training run")
    p.add_argument("--config", required=True)
    p.add_argument("--out-params", required=True)
    p.add_argument("--out-history", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("mesh", help="depth -> OBJ mesh")
    p.add_argument("--depth", required=True)
    p.add_argument("--mask")
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--params")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
