"""Command-line interface: ``lrpe <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` and repeated ``--set key=value``
overrides of the experiment keys.  On failure a single JSON object
``{"error": <type>, "message": <text>}`` is printed to stderr and the exit
status is 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import classical, io, metrics
from . import phantoms as ph
from .certify import certify, sample_inputs_along_path
from .equilibrium import load_checkpoint, lrpe_infer
from .experiment import (ExperimentConfig, make_phantom, run_experiment, save_model, train_model,
                         training_set)
from .tomo import build_system_matrix, forward_project, load_matrix, save_matrix


def _config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config, args.set or ())


def _system(cfg: ExperimentConfig, cache=None):
    geom = cfg.geometry()
    if cache:
        try:
            return geom, load_matrix(cache, geom)
        except FileNotFoundError:
            A = build_system_matrix(geom)
            save_matrix(cache, A)
            return geom, A
    return geom, build_system_matrix(geom)


def _save_image(path, img, pgm=False):
    io.write_image(path, img)
    if pgm:
        io.write_pgm(str(path) + ".pgm", img)


def cmd_phantom(args):
    cfg = _config(args)
    if args.spec:
        cfg = ExperimentConfig.from_mapping({**cfg.to_mapping(), "phantom": "file:" + args.spec})
    img = make_phantom(cfg, args.seed if args.seed is not None else cfg.phantom_seed)
    _save_image(args.out, img, args.pgm)


def cmd_project(args):
    cfg = _config(args)
    _, A = _system(cfg, args.matrix_cache)
    io.write_sinogram(args.out, forward_project(A, io.read_image(args.image)))


def cmd_noise(args):
    cfg = _config(args)
    spec = ph.NoiseSpec(args.kind or cfg.noise_kind,
                        args.level if args.level is not None else cfg.noise_level,
                        args.seed if args.seed is not None else cfg.seed)
    io.write_sinogram(args.out, ph.add_noise(io.read_sinogram(args.sino), spec))


def cmd_fbp(args):
    cfg = _config(args)
    img = classical.fbp(io.read_sinogram(args.sino), cfg.geometry(), window=args.window or cfg.fbp_window)
    _save_image(args.out, img, args.pgm)


def cmd_tv(args):
    cfg = _config(args)
    _, A = _system(cfg, args.matrix_cache)
    res = classical.tv_reconstruct(io.read_sinogram(args.sino), A, cfg.tv_params())
    _save_image(args.out, res.image, args.pgm)


def cmd_train(args):
    cfg = _config(args)
    ops = cfg.operators()
    use_prior = not args.no_prior
    w, trace = train_model(cfg, ops, use_prior, training_set(cfg, ops))
    save_model(args.out, w, cfg, use_prior)
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "loss"])
            wr.writerows((i, repr(v)) for i, v in enumerate(trace))
    print(f"final_loss = {trace[-1]!r}" if trace else "final_loss = nan")


def _model(args, cfg):
    w, meta = load_checkpoint(args.checkpoint)
    use_prior = not args.no_prior
    if "use_prior" in meta:
        use_prior = use_prior and meta["use_prior"] == "1"
    return w, cfg.lrpe_config(use_prior)


def cmd_reconstruct(args):
    cfg = _config(args)
    ops = cfg.operators()
    w, lcfg = _model(args, cfg)
    b = io.read_sinogram(args.sino)
    img, trace = lrpe_infer(b, w, ops, lcfg)
    _save_image(args.out, img, args.pgm)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["stage", "residual"])
            wr.writerows((k + 1, repr(r)) for k, r in enumerate(trace.residuals))


def cmd_certify(args):
    cfg = _config(args)
    ops = cfg.operators()
    w, lcfg = _model(args, cfg)
    b = io.read_sinogram(args.sino)
    prior = ops.prior_image(b) if lcfg.use_prior else np.zeros((ops.A.side,) * 2)
    samples = sample_inputs_along_path(b, prior, w, lcfg, ops.A, count=cfg.certify_samples,
                                       seed=cfg.seed)
    cert = certify(ops.A, w, lcfg, samples, seed=cfg.seed)
    cert.write(args.out, args.csv)
    print(f"gamma = {cert.gamma!r}\ncontractive = {cert.contractive}")


def cmd_experiment(args):
    cfg = _config(args)
    res = run_experiment(cfg)
    for name, why in res.skipped.items():
        print(f"skipped = {name}: {why}")
    with open(res.output_dir / "metrics.csv") as fh:
        sys.stdout.write(fh.read())


def cmd_metrics(args):
    x, ref = io.read_image(args.image), io.read_image(args.ref)
    p = metrics.psnr(x, ref, args.peak)
    print(f"psnr_db = {'inf' if p == float('inf') else repr(p)}")
    print(f"ssim = {metrics.ssim(x, ref)!r}")
    print(f"psnr_peak = {args.peak!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value experiment config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lrpe", description="Sparse-view and limited-angle CT reconstruction.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("phantom", cmd_phantom, "rasterise a phantom")
    sp.add_argument("--spec", help="ellipse spec file (overrides the phantom key)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pgm", action="store_true", help="also write <out>.pgm")

    sp = add("project", cmd_project, "forward-project an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--matrix-cache")

    sp = add("noise", cmd_noise, "corrupt a sinogram")
    sp.add_argument("--sino", required=True)
    sp.add_argument("--kind", choices=ph.NOISE_KINDS)
    sp.add_argument("--level", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("fbp", cmd_fbp, "filtered back-projection")
    sp.add_argument("--sino", required=True)
    sp.add_argument("--window", choices=("ramlak", "hann"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--pgm", action="store_true")

    sp = add("tv", cmd_tv, "total-variation reconstruction")
    sp.add_argument("--sino", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--matrix-cache")
    sp.add_argument("--pgm", action="store_true")

    sp = add("train", cmd_train, "train a model on synthetic phantoms")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--no-prior", action="store_true", help="train the GRAD ablation")
    sp.add_argument("--loss-csv")

    for name, fn, help_ in (("reconstruct", cmd_reconstruct, "reconstruct with a checkpoint"),
                            ("certify", cmd_certify, "contraction certificate for a checkpoint")):
        sp = add(name, fn, help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--sino", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--no-prior", action="store_true")
        if name == "reconstruct":
            sp.add_argument("--trace")
            sp.add_argument("--pgm", action="store_true")
        else:
            sp.add_argument("--csv", help="per-sample epsilon CSV")

    add("experiment", cmd_experiment, "run the full comparison")

    sp = add("metrics", cmd_metrics, "PSNR and SSIM of two images")
    sp.add_argument("--image", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--peak", type=float, default=1.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # reported, not raised
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
