"""Command-line front end: ``svddip <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import load_tensor, save_tensor
from .config import RunSpec
from .errors import InvalidArgumentError, NumericalFailureError
from .experiment import STANDARD_PLANS, RunPlan, run_experiment
from .model import load_checkpoint
from .report import aggregate_csv, compare, curves_csv, save_run
from .training import Sample, as_operator, make_sample, pretrain, run_dip, sample_seed, singular_values_csv, trace_singular_values

log = logging.getLogger("svddip")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
SPEC_ECHO = "spec.ini"
DATA_MANIFEST = "manifest.txt"
DATA_KINDS = ("phantom", "clean", "noisy", "fbp")


class UsageError(Exception):
    """Invalid combination of command-line options."""


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_spec(spec: RunSpec, out: Path) -> None:
    (out / SPEC_ECHO).write_text(spec.dumps())


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- gen-data -------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = RunSpec.load(args.spec)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    out = _out_dir(args.out)
    geometry = spec.operator()
    lines = [
        "format svddip-dataset 1",
        f"count {args.count}",
        f"seed {args.seed}",
        f"noise {spec['noise']['spec']}",
        f"image_shape {geometry.image_shape[0]} {geometry.image_shape[1]}",
        f"sino_shape {geometry.sino_shape[0]} {geometry.sino_shape[1]}",
        f"fbp_filter {spec['pretrain']['fbp_filter']}",
    ]
    for i in range(args.count):
        seed = sample_seed(args.seed, i)
        s = make_sample(geometry, spec["noise"]["spec"], seed, spec["pretrain"]["max_ellipses"],
                        spec["pretrain"]["fbp_filter"], spec["noise"]["mu_max"])
        for kind in DATA_KINDS:
            name = f"{kind}_{i:04d}.bin"
            save_tensor(out / name, np.asarray(getattr(s, kind), dtype=np.float64))
            lines.append(f"file {name} {_sha256(out / name)}")
    (out / DATA_MANIFEST).write_text("\n".join(lines) + "\n")
    _echo_spec(spec, out)
    log.info("wrote %d samples to %s", args.count, out)
    return EXIT_OK


def load_dataset(directory: Path) -> tuple[dict, list]:
    """Manifest fields and the samples of a ``gen-data`` directory."""
    manifest = directory / DATA_MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest}: dataset manifest not found")
    info: dict = {}
    files = []
    for line in manifest.read_text().splitlines():
        key, _, value = line.partition(" ")
        if key == "file":
            files.append(value.split()[0])
        else:
            info[key] = value
    count = int(info.get("count", 0))
    samples = []
    for i in range(count):
        arrays = {kind: load_tensor(directory / f"{kind}_{i:04d}.bin") for kind in DATA_KINDS}
        samples.append(Sample(**arrays))
    return info, samples


# -- pretrain -------------------------------------------------------------------------


def cmd_pretrain(args: argparse.Namespace) -> int:
    spec = RunSpec.load(args.spec)
    cfg = spec.pretrain_config()
    samples = None
    if args.data is not None:
        info, samples = load_dataset(Path(args.data))
        op = as_operator(cfg.geometry)
        expected = f"{op.image_shape[0]} {op.image_shape[1]}"
        if info.get("image_shape") != expected:
            raise InvalidArgumentError(f"dataset image shape {info.get('image_shape')} does not match spec ({expected})")
    out = _out_dir(args.out)
    _echo_spec(spec, out)
    result = pretrain(cfg, spec.model_config(), out_dir=out, samples=samples, log=log.info)
    log.info("checkpoint written to %s (final epoch loss %.6g)", out, result.epoch_losses[-1])
    return EXIT_OK


# -- reconstruct ----------------------------------------------------------------------


def cmd_reconstruct(args: argparse.Namespace) -> int:
    spec = RunSpec.load(args.spec)
    checkpoint = args.checkpoint
    if args.variant == "dip" and checkpoint is not None:
        print("warning: variant dip starts from a random network; --checkpoint is ignored", file=sys.stderr)
        checkpoint = None
    if args.variant != "dip" and checkpoint is None:
        raise UsageError(f"variant {args.variant} needs --checkpoint")
    operator = as_operator(spec.operator())
    y = load_tensor(args.sino)
    x_gt = load_tensor(args.gt) if args.gt is not None else None
    net = load_checkpoint(checkpoint, expected=spec.model_config()) if checkpoint is not None else None
    cfg = spec.dip_config(args.variant, checkpoint=net, seed=args.seed)
    out = _out_dir(args.out)
    _echo_spec(spec, out)
    label = args.label or args.variant

    def progress(iteration: int, record: tuple) -> None:
        if iteration % 500 == 0:
            log.info("iteration %d: objective %.6g, psnr %.3f", iteration, record[1], record[4])

    result = run_dip(cfg, y, operator, x_gt, metrics_path=out / "metrics.csv", progress=progress)
    save_run(out, label, args.variant, args.seed, result.metrics, result.reconstruction,
             pgm=spec["output"]["pgm"], extra={"trainable": result.initial_trainable})
    if args.variant == "svd-dip":
        (out / "singular_values.csv").write_text(singular_values_csv(trace_singular_values(result.net)))
    if x_gt is not None:
        s = result.metrics.summary()
        log.info("final %.3f dB, max %.3f dB at iteration %d", s["Final"], s["Max"], s["MaxIteration"])
    return EXIT_OK


# -- compare --------------------------------------------------------------------------


def cmd_compare(args: argparse.Namespace) -> int:
    curves, summaries = compare(args.runs)
    out = _out_dir(args.out)
    (out / "curves.csv").write_text(curves_csv(curves))
    (out / "summary.csv").write_text(aggregate_csv(summaries))
    log.info("compared %d runs in %d groups", len(args.runs), len(summaries))
    return EXIT_OK


# -- experiment -----------------------------------------------------------------------


def cmd_experiment(args: argparse.Namespace) -> int:
    spec = RunSpec.load(args.spec)
    out = _out_dir(args.out)
    _echo_spec(spec, out)
    plans = list(STANDARD_PLANS)
    if args.truncated:
        plans.append(RunPlan("svd-dip-rank50", "svd-dip", {"truncation": "rank 0.5"}))
    results = run_experiment(spec, args.seeds, plans, checkpoint=args.checkpoint, out_dir=out, log=log.info)
    run_dirs = [out / label / f"seed{seed}" for label in results for seed in args.seeds]
    curves, summaries = compare(run_dirs)
    (out / "curves.csv").write_text(curves_csv(curves))
    (out / "summary.csv").write_text(aggregate_csv(summaries))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svddip", description="Deep-image-prior CT reconstruction toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only report warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate ellipse phantoms, sinograms and FBPs")
    p.add_argument("--spec", help="run spec file (desk defaults when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the U-Net to post-process FBPs")
    p.add_argument("--spec")
    p.add_argument("--data", help="gen-data directory (samples are simulated on the fly when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("reconstruct", help="fit one sinogram with dip, edip or svd-dip")
    p.add_argument("--spec")
    p.add_argument("--variant", required=True, choices=("dip", "edip", "svd-dip"))
    p.add_argument("--sino", required=True, help="tensor file holding the measured sinogram")
    p.add_argument("--checkpoint", help="pretrained checkpoint directory (edip, svd-dip)")
    p.add_argument("--gt", help="tensor file with the ground-truth image, enables PSNR")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", help="group name used by compare (defaults to the variant)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("compare", help="mean and SD across reconstruct runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("experiment", help="pretrain, then run all variants over several seeds")
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--checkpoint", help="reuse a pretrained checkpoint instead of pretraining")
    p.add_argument("--truncated", action="store_true", help="also run svd-dip keeping half of each rank")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, InvalidArgumentError) as exc:
        print(f"svddip {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailureError as exc:
        print(f"svddip {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"svddip {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
