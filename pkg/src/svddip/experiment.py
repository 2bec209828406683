"""Multi-seed comparison of DIP, EDIP and SVD-DIP on synthetic test images.

Seed ``k`` fixes one test phantom, its noisy sinogram and the DIP
initialisation; all variants of that seed see the same measurement.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from .config import RunSpec
from .model import UNet, load_checkpoint
from .report import save_run
from .training import PretrainResult, RunMetrics, Sample, as_operator, make_sample, pretrain, run_dip

PathLike = Union[str, os.PathLike]

#: Test phantoms are drawn far away from the pretraining seeds.
TEST_SEED_OFFSET = 10**8


@dataclass(frozen=True)
class RunPlan:
    label: str
    variant: str
    overrides: dict = field(default_factory=dict)


STANDARD_PLANS = (RunPlan("dip", "dip"), RunPlan("edip", "edip"), RunPlan("svd-dip", "svd-dip"))


def held_out_sample(spec: RunSpec, seed: int, geometry=None) -> Sample:
    geometry = geometry if geometry is not None else spec.operator()
    return make_sample(
        geometry,
        spec["noise"]["spec"],
        TEST_SEED_OFFSET + 1000 * int(seed),
        spec["pretrain"]["max_ellipses"],
        spec["pretrain"]["fbp_filter"],
        spec["noise"]["mu_max"],
    )


def pretrained_network(
    spec: RunSpec,
    out_dir: Optional[PathLike] = None,
    log: Optional[Callable[[str], None]] = None,
) -> PretrainResult:
    return pretrain(spec.pretrain_config(), spec.model_config(), out_dir=out_dir, log=log)


def run_one(
    spec: RunSpec,
    plan: RunPlan,
    seed: int,
    checkpoint: Union[UNet, PathLike, None],
    out_dir: Optional[PathLike] = None,
    geometry=None,
) -> RunMetrics:
    """Run ``plan`` on the test image of ``seed``; write its run directory when ``out_dir`` is given."""
    geometry = geometry if geometry is not None else spec.operator()
    sample = held_out_sample(spec, seed, geometry)
    cfg = spec.dip_config(plan.variant, checkpoint=checkpoint, seed=seed, **plan.overrides)
    run_dir = Path(out_dir) / plan.label / f"seed{seed}" if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    result = run_dip(
        cfg,
        sample.noisy,
        as_operator(geometry),
        sample.phantom,
        metrics_path=run_dir / "metrics.csv" if run_dir is not None else None,
    )
    if run_dir is not None:
        save_run(run_dir, plan.label, plan.variant, seed, result.metrics, result.reconstruction,
                 pgm=spec["output"]["pgm"], extra={"trainable": result.initial_trainable})
    return result.metrics


def run_experiment(
    spec: RunSpec,
    seeds: Sequence[int] = (0, 1, 2),
    plans: Sequence[RunPlan] = STANDARD_PLANS,
    checkpoint: Union[UNet, PathLike, None] = None,
    out_dir: Optional[PathLike] = None,
    log: Optional[Callable[[str], None]] = None,
) -> dict:
    """``{label: [RunMetrics per seed]}``; pretrains first unless ``checkpoint`` is given."""
    geometry = spec.operator()
    if checkpoint is None and any(p.variant != "dip" for p in plans):
        ck_dir = Path(out_dir) / "pretrain" if out_dir is not None else None
        checkpoint = pretrained_network(spec, ck_dir, log).net
    elif checkpoint is not None and not isinstance(checkpoint, UNet):
        checkpoint = load_checkpoint(checkpoint, expected=spec.model_config())
    results: dict = {p.label: [] for p in plans}
    for seed in seeds:
        for plan in plans:
            metrics = run_one(spec, plan, seed, checkpoint, out_dir, geometry)
            results[plan.label].append(metrics)
            if log is not None:
                s = metrics.summary()
                log(f"{plan.label} seed {seed}: final {s['Final']:.3f} dB, max {s['Max']:.3f} dB at {s['MaxIteration']}")
    return results
