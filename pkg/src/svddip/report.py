"""Run directories, cross-run aggregation and image export."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .autodiff import save_tensor
from .errors import InvalidArgumentError
from .training import SUMMARY_COLUMNS, RunMetrics, aggregate, summary_csv

PathLike = Union[str, os.PathLike]

RUN_INFO = "run.txt"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"
CURVE_HEADER = ("variant", "iteration", "runs", "mean_psnr", "sd_psnr", "mean_tv", "sd_tv", "mean_objective", "sd_objective")


def write_pgm(path: PathLike, image: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> None:
    """16-bit binary PGM, linearly mapping ``[lo, hi]`` (default: image range) to ``[0, 65535]``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidArgumentError(f"PGM export needs a 2-d image, got shape {img.shape}")
    lo = float(img.min()) if lo is None else float(lo)
    hi = float(img.max()) if hi is None else float(hi)
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.rint((img - lo) * scale), 0, 65535).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise InvalidArgumentError(f"{path}: not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(parts[4], dtype=dtype, count=w * h).reshape(h, w)


@dataclass
class RunRecord:
    directory: Path
    label: str
    variant: str
    seed: int
    metrics: RunMetrics


def write_run_info(directory: PathLike, label: str, variant: str, seed: int, extra: Optional[dict] = None) -> None:
    lines = [f"label {label}", f"variant {variant}", f"seed {seed}"]
    lines += [f"{k} {v}" for k, v in sorted((extra or {}).items())]
    (Path(directory) / RUN_INFO).write_text("\n".join(lines) + "\n")


def read_run(directory: PathLike) -> RunRecord:
    d = Path(directory)
    metrics_path = d / METRICS_FILE
    if not metrics_path.is_file():
        raise FileNotFoundError(f"{metrics_path}: no metrics CSV in run directory")
    info = {}
    if (d / RUN_INFO).is_file():
        for line in (d / RUN_INFO).read_text().splitlines():
            key, _, value = line.partition(" ")
            info[key] = value.strip()
    label = info.get("label", d.name)
    return RunRecord(d, label, info.get("variant", label), int(info.get("seed", 0)), RunMetrics.read_csv(metrics_path))


def save_run(
    directory: PathLike,
    label: str,
    variant: str,
    seed: int,
    metrics: RunMetrics,
    reconstruction: Optional[np.ndarray] = None,
    pgm: bool = False,
    extra: Optional[dict] = None,
) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_run_info(d, label, variant, seed, extra)
    metrics.write_csv(d / METRICS_FILE)
    (d / SUMMARY_FILE).write_text(summary_csv([(label, metrics.summary())]))
    if reconstruction is not None:
        save_tensor(d / "reconstruction.bin", reconstruction)
        if pgm:
            write_pgm(d / "reconstruction.pgm", reconstruction, 0.0, max(1.0, float(np.max(reconstruction))))
    return d


def compare(run_dirs: Sequence[PathLike]) -> tuple[list, list]:
    """Mean and population SD per label, per iteration and per summary column.

    Returns ``(curve_rows, summary_rows)``; runs sharing a label must have
    identical iteration grids.
    """
    if not run_dirs:
        raise InvalidArgumentError("compare needs at least one run directory")
    groups: dict[str, list[RunRecord]] = {}
    for d in run_dirs:
        rec = read_run(d)
        groups.setdefault(rec.label, []).append(rec)
    curves, summaries = [], []
    for label in sorted(groups):
        runs = groups[label]
        grid = [r[0] for r in runs[0].metrics.records]
        for r in runs[1:]:
            if [x[0] for x in r.metrics.records] != grid:
                raise InvalidArgumentError(
                    f"runs for {label!r} have different iteration grids ({runs[0].directory} vs {r.directory})"
                )
        stacked = {
            name: np.array([r.metrics.column(name) for r in runs]) for name in ("psnr", "tv", "objective")
        }
        for i, it in enumerate(grid):
            row = [label, it, len(runs)]
            for name in ("psnr", "tv", "objective"):
                col = stacked[name][:, i]
                row += [float(col.mean()), float(col.std())]
            curves.append(tuple(row))
        agg = aggregate([r.metrics for r in runs])
        summaries.append((label, len(runs), agg))
    return curves, summaries


def curves_csv(rows: Sequence[tuple]) -> str:
    lines = [",".join(CURVE_HEADER)]
    for label, it, n, *vals in rows:
        lines.append(f"{label},{it},{n}," + ",".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def aggregate_csv(rows: Sequence[tuple]) -> str:
    header = ["variant", "runs"] + [f"{c}_{stat}" for c in SUMMARY_COLUMNS for stat in ("mean", "sd")]
    lines = [",".join(header)]
    for label, n, agg in rows:
        cells = [label, str(n)]
        for c in SUMMARY_COLUMNS:
            mean, sd = agg[c]
            cells += [repr(mean), repr(sd)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
