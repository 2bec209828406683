"""Supervised pretraining and the DIP / EDIP / SVD-DIP fine-tuning loop."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .autodiff import Tape, Tensor, adam_step, ops, zero_grad
from .ct.geometry import MatrixOperator, ParallelGeometry
from .ct.noise import DEFAULT_PHOTONS, MU_MAX, add_noise
from .ct.operators import _sino_array, initial_reconstruction
from .ct.phantoms import generate_ellipses
from .errors import InvalidArgumentError, NumericalFailureError
from .losses import DATA_LOSSES, Objective, psnr
from .model import (
    DESK_UNET,
    LayerAddress,
    SvdConv2d,
    UNet,
    UNetConfig,
    build_unet,
    default_svd_addresses,
    load_checkpoint,
    replace_with_svd,
    save_checkpoint,
)
from .svd import TruncationPolicy

VARIANTS = ("dip", "edip", "svd-dip")
METRICS_HEADER = ("iteration", "objective", "data_term", "tv", "psnr")
SUMMARY_COLUMNS = ("Final", "Max", "MaxIteration", "Init", "MaxMinusFinal", "FinalMinusInit")
DEFAULT_LR = {"dip": 1e-4, "edip": 1e-4, "svd-dip": 1e-3}

PathLike = Union[str, os.PathLike]


def _fmt(v: float) -> str:
    return repr(float(v))


def forward_padded(net: UNet, z: Tensor) -> Tensor:
    """Run ``net`` on ``z``, zero-padding the spatial size up to what the U-Net accepts and cropping back."""
    factor = 2 ** (net.cfg.num_scales - 1)
    h, w = z.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if not ph and not pw:
        return net(z)
    top, left = ph // 2, pw // 2
    pad = [(0, 0)] * (z.ndim - 2) + [(top, ph - top), (left, pw - left)]
    out = net(Tensor(np.pad(z.data, pad)))
    return out[(Ellipsis, slice(top, top + h), slice(left, left + w))]


# -- pretraining ---------------------------------------------------------------------


@dataclass
class PretrainConfig:
    dataset_size: int = 200
    geometry: Union[ParallelGeometry, MatrixOperator] = field(default_factory=lambda: ParallelGeometry(64, 20, 95, pixel_size=1.0 / 64))
    noise: str = "gaussian 0.05"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    max_ellipses: int = 12
    fbp_filter: str = "hann"
    mu_max: float = MU_MAX

    def __post_init__(self):
        if self.dataset_size < 1:
            raise InvalidArgumentError("dataset_size must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be >= 1")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise InvalidArgumentError(f"learning rate must be positive, got {self.lr}")


@dataclass
class Sample:
    phantom: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    fbp: np.ndarray


def as_operator(geom: Union[ParallelGeometry, MatrixOperator]) -> MatrixOperator:
    return geom.operator() if isinstance(geom, ParallelGeometry) else geom


def make_sample(
    geom: Union[ParallelGeometry, MatrixOperator],
    noise: str,
    seed: int,
    max_ellipses: int = 12,
    fbp_filter: str = "hann",
    mu_max: float = MU_MAX,
) -> Sample:
    """One (phantom, sinogram, noisy sinogram, FBP) tuple derived from ``seed``."""
    op = as_operator(geom)
    h, w = op.image_shape
    if h != w:
        raise InvalidArgumentError(f"ellipse phantoms need a square image, got {op.image_shape}")
    phantom = generate_ellipses(h, max_ellipses, rng_seed=seed)
    clean = op.forward(phantom)
    noisy = _sino_array(add_noise(clean, noise, rng_seed=seed + 1, mu_max=mu_max))
    return Sample(phantom, clean, noisy, initial_reconstruction(noisy, op, fbp_filter))


def sample_seed(base_seed: int, index: int) -> int:
    return int(base_seed) * 1_000_003 + 2 * int(index)


@dataclass
class PretrainResult:
    net: UNet
    step_losses: list
    epoch_losses: list
    checkpoint: Optional[Path] = None


def pretrain(
    cfg: PretrainConfig,
    model_cfg: UNetConfig = DESK_UNET,
    out_dir: Optional[PathLike] = None,
    samples: Optional[Sequence[Sample]] = None,
    dtype=np.float32,
    log: Optional[Callable[[str], None]] = None,
) -> PretrainResult:
    """Train the U-Net to map FBP reconstructions onto ground-truth phantoms.

    Loss is the pixel mean-squared error, optimised with Adam. When
    ``out_dir`` is given the checkpoint and ``loss.csv`` are written there
    after every epoch, so a divergence leaves the last good epoch on disk.
    """
    if samples is None:
        samples = [
            make_sample(cfg.geometry, cfg.noise, sample_seed(cfg.seed, i), cfg.max_ellipses, cfg.fbp_filter, cfg.mu_max)
            for i in range(cfg.dataset_size)
        ]
    if not samples:
        raise InvalidArgumentError("empty pretraining set")
    inputs = np.stack([s.fbp for s in samples])[:, None].astype(dtype)
    targets = np.stack([s.phantom for s in samples])[:, None].astype(dtype)
    net = build_unet(model_cfg, rng_seed=cfg.seed, dtype=dtype)
    params = net.parameters()
    for p in params:
        p.trainable = True
        p.requires_grad = True
        p.reset_optimizer_state()
    rng = np.random.default_rng(cfg.seed)
    step_losses: list = []
    epoch_losses: list = []
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            with Tape() as tape:
                pred = forward_padded(net, Tensor(inputs[idx]))
                loss = ops.mean(ops.square(ops.sub(pred, Tensor(targets[idx]))))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericalFailureError(
                        f"pretraining diverged at epoch {epoch}, step {len(step_losses)}"
                        + (f"; last good checkpoint kept in {out}" if out is not None and epoch_losses else "")
                    )
                zero_grad(params)
                tape.backward(loss)
            adam_step(params, lr=cfg.lr)
            step_losses.append((epoch, len(step_losses), value))
            batch_losses.append(value)
        epoch_losses.append(float(np.mean(batch_losses)))
        if log is not None:
            log(f"epoch {epoch}: mean loss {epoch_losses[-1]:.6g}")
        if out is not None:
            _write_pretrain_outputs(net, out, cfg, step_losses)
    return PretrainResult(net, step_losses, epoch_losses, out)


def _write_pretrain_outputs(net: UNet, out: Path, cfg: PretrainConfig, step_losses: list) -> None:
    save_checkpoint(net, out, {"pretrain_seed": cfg.seed, "epochs_done": step_losses[-1][0] + 1})
    buf = io.StringIO()
    buf.write("epoch,step,loss\n")
    for epoch, step, value in step_losses:
        buf.write(f"{epoch},{step},{_fmt(value)}\n")
    (out / "loss.csv").write_text(buf.getvalue())


# -- fine-tuning ---------------------------------------------------------------------


@dataclass
class DipRunConfig:
    """Settings for one reconstruction run.

    ``lr`` defaults per variant; ``input_source`` defaults to ``noise`` for
    DIP and ``fbp`` otherwise. ``svd_addresses`` of ``None`` selects every
    down/up conv, minus the first ``skip_first_down`` down blocks.
    """

    variant: str = "svd-dip"
    iterations: int = 5000
    lr: Optional[float] = None
    gamma: float = 0.0
    data_loss: str = "squared-l2"
    input_source: Optional[str] = None
    svd_addresses: Optional[Sequence[Union[str, LayerAddress]]] = None
    skip_first_down: int = 0
    truncation: TruncationPolicy = field(default_factory=TruncationPolicy)
    train_unreplaced: bool = False
    train_norms: bool = False
    checkpoint: Optional[Union[PathLike, UNet]] = None
    model: UNetConfig = DESK_UNET
    seed: int = 0
    noise_std: float = 0.1
    n0: float = DEFAULT_PHOTONS
    mu_max: float = MU_MAX
    fbp_filter: str = "hann"
    psnr_range: Optional[float] = None
    dtype: str = "float32"
    flush_every: int = 100

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.data_loss not in DATA_LOSSES:
            raise InvalidArgumentError(f"unknown data loss {self.data_loss!r}")
        if self.iterations < 0:
            raise InvalidArgumentError("iterations must be >= 0")
        if self.input_source is None:
            self.input_source = "noise" if self.variant == "dip" else "fbp"
        if self.input_source not in ("noise", "fbp"):
            raise InvalidArgumentError(f"unknown input source {self.input_source!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.variant]
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise InvalidArgumentError(f"learning rate must be positive, got {self.lr}")
        if isinstance(self.truncation, str):
            self.truncation = TruncationPolicy.parse(self.truncation)
        if self.variant != "dip" and self.checkpoint is None:
            raise InvalidArgumentError(f"variant {self.variant} needs a checkpoint")


@dataclass
class RunMetrics:
    """Per-iteration records ``(iteration, objective, data_term, tv, psnr)``."""

    records: list = field(default_factory=list)

    def append(self, iteration: int, objective: float, data_term: float, tv: float, psnr_value: float) -> None:
        if self.records and iteration <= self.records[-1][0]:
            raise InvalidArgumentError("iterations must be strictly increasing")
        self.records.append((int(iteration), float(objective), float(data_term), float(tv), float(psnr_value)))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[METRICS_HEADER.index(name)] for r in self.records])

    def to_csv(self, start: int = 0, header: bool = True) -> str:
        lines = [",".join(METRICS_HEADER)] if header else []
        for it, obj, data, tv, p in self.records[start:]:
            lines.append(f"{it},{_fmt(obj)},{_fmt(data)},{_fmt(tv)},{_fmt(p)}")
        return "\n".join(lines) + ("\n" if lines else "")

    def write_csv(self, path: PathLike) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path: PathLike) -> "RunMetrics":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != METRICS_HEADER:
                raise InvalidArgumentError(f"{path}: expected header {','.join(METRICS_HEADER)}")
            out = cls()
            for row in reader:
                if row:
                    out.append(int(row[0]), *(float(v) for v in row[1:]))
        return out

    def summary(self) -> dict:
        return summarize(self)


@dataclass
class RunResult:
    reconstruction: np.ndarray
    metrics: RunMetrics
    net: UNet
    initial_trainable: int


class _MetricsWriter:
    def __init__(self, path: Optional[PathLike], metrics: RunMetrics, every: int):
        self.path = Path(path) if path is not None else None
        self.metrics = metrics
        self.every = max(int(every), 1)
        self.written = 0
        if self.path is not None:
            self.path.write_text(",".join(METRICS_HEADER) + "\n")

    def maybe_flush(self, force: bool = False) -> None:
        if self.path is None:
            return
        pending = len(self.metrics.records) - self.written
        if pending and (force or pending >= self.every):
            with open(self.path, "a") as fh:
                fh.write(self.metrics.to_csv(start=self.written, header=False))
            self.written = len(self.metrics.records)


def _resolve_network(cfg: DipRunConfig, dtype) -> UNet:
    if cfg.variant == "dip":
        return build_unet(cfg.model, rng_seed=cfg.seed, dtype=dtype)
    src = cfg.checkpoint
    net = src.astype(dtype) if isinstance(src, UNet) else load_checkpoint(src, expected=cfg.model)._cast(dtype)
    if net.svd_layers():
        raise InvalidArgumentError("the checkpoint already contains factorised layers")
    return net


def network_input(cfg: DipRunConfig, y: np.ndarray, operator: MatrixOperator, dtype) -> np.ndarray:
    """Noise image for ``input_source = noise``; FBP of ``y`` otherwise, shaped ``[1, H, W]``."""
    shape = operator.image_shape
    if cfg.input_source == "noise":
        rng = np.random.default_rng([cfg.seed, 1])
        z = rng.normal(0.0, cfg.noise_std, size=(cfg.model.in_channels,) + tuple(shape))
    else:
        z = initial_reconstruction(y, operator, cfg.fbp_filter)[None]
    return z.astype(dtype)


def prepare_network(cfg: DipRunConfig, dtype) -> tuple[UNet, int]:
    """Build the variant's network and mark its trainable parameters.

    Returns the network and the expected trainable parameter count.
    """
    net = _resolve_network(cfg, dtype)
    if cfg.variant == "svd-dip":
        addresses = (
            default_svd_addresses(net, cfg.skip_first_down)
            if cfg.svd_addresses is None
            else [LayerAddress.parse(a) if isinstance(a, str) else a for a in cfg.svd_addresses]
        )
        replace_with_svd(net, addresses, cfg.truncation)
        net.set_trainable(False)
        expected = 0
        for layer in net.svd_layers().values():
            layer.s.trainable = True
            expected += layer.s.size
        if cfg.train_unreplaced:
            replaced = set(net.svd_layers())
            for addr, layer in net.convs.items():
                if addr not in replaced:
                    for p in layer.parameters().values():
                        p.trainable = True
                        expected += p.size
        if cfg.train_norms:
            for norm in net.norms.values():
                for p in norm.parameters().values():
                    p.trainable = True
                    expected += p.size
    else:
        net.set_trainable(True)
        expected = sum(p.size for p in net.parameters())
    for p in net.parameters():
        p.requires_grad = p.trainable
        p.reset_optimizer_state()
    if net.count_trainable() != expected:
        raise NumericalFailureError(f"trainable count {net.count_trainable()} differs from expected {expected}")
    return net, expected


def run_dip(
    cfg: DipRunConfig,
    y,
    operator: MatrixOperator,
    x_gt: Optional[np.ndarray] = None,
    metrics_path: Optional[PathLike] = None,
    progress: Optional[Callable[[int, tuple], None]] = None,
) -> RunResult:
    """Fit the network output to ``y`` under ``data_term + gamma * TV``.

    Record ``i`` holds the values before update ``i``; one extra record after
    the last update describes the returned reconstruction, which is always the
    final iterate. PSNR is NaN when ``x_gt`` is missing.
    """
    dtype = np.dtype(cfg.dtype)
    y = _sino_array(y)
    if y.shape != operator.sino_shape:
        raise InvalidArgumentError(f"sinogram shape {y.shape} does not match operator {operator.sino_shape}")
    if x_gt is not None and np.shape(x_gt) != tuple(operator.image_shape):
        raise InvalidArgumentError(f"ground truth shape {np.shape(x_gt)} does not match {operator.image_shape}")
    net, expected = prepare_network(cfg, dtype)
    z = Tensor(network_input(cfg, y, operator, dtype))
    objective = Objective(cfg.data_loss, cfg.gamma, operator, y, cfg.n0, cfg.mu_max)
    params = net.trainable_parameters()
    metrics = RunMetrics()
    writer = _MetricsWriter(metrics_path, metrics, cfg.flush_every)

    def record(iteration: int, out: np.ndarray, total, data, tv) -> None:
        values = (float(total.data), float(data.data), float(tv.data))
        if not all(math.isfinite(v) for v in values):
            writer.maybe_flush(force=True)
            raise NumericalFailureError(f"non-finite objective at iteration {iteration}")
        p = psnr(out, x_gt, cfg.psnr_range) if x_gt is not None else math.nan
        metrics.append(iteration, *values, p)
        if progress is not None:
            progress(iteration, metrics.records[-1])
        writer.maybe_flush()

    for it in range(cfg.iterations):
        with Tape() as tape:
            out = forward_padded(net, z)
            total, data, tv = objective.terms(ops.reshape(out, operator.image_shape))
            record(it, out.data, total, data, tv)
            zero_grad(params)
            tape.backward(total)
        adam_step(params, lr=cfg.lr)
    out = forward_padded(net, z)
    total, data, tv = objective.terms(ops.reshape(out, operator.image_shape))
    record(cfg.iterations, out.data, total, data, tv)
    writer.maybe_flush(force=True)
    recon = np.asarray(out.data, dtype=np.float64).reshape(operator.image_shape)
    return RunResult(recon, metrics, net, expected)


# -- summaries -----------------------------------------------------------------------


def summarize(metrics: Union[RunMetrics, Sequence[float]]) -> dict:
    """Final, Max, MaxIteration, Init, MaxMinusFinal and FinalMinusInit of a PSNR trace."""
    if isinstance(metrics, RunMetrics):
        iters = [r[0] for r in metrics.records]
        trace = [r[4] for r in metrics.records]
    else:
        trace = [float(v) for v in metrics]
        iters = list(range(len(trace)))
    if not trace:
        raise InvalidArgumentError("cannot summarise an empty trace")
    arr = np.asarray(trace, dtype=np.float64)
    best = int(np.nanargmax(arr)) if not np.all(np.isnan(arr)) else 0
    final, init, peak = float(arr[-1]), float(arr[0]), float(arr[best])
    return {
        "Final": final,
        "Max": peak,
        "MaxIteration": iters[best],
        "Init": init,
        "MaxMinusFinal": peak - final,
        "FinalMinusInit": final - init,
    }


def aggregate(summaries: Sequence[Union[RunMetrics, dict]]) -> dict:
    """Per-column ``(mean, population SD)`` over runs."""
    if not summaries:
        raise InvalidArgumentError("nothing to aggregate")
    rows = [s.summary() if isinstance(s, RunMetrics) else s for s in summaries]
    out = {}
    for col in SUMMARY_COLUMNS:
        vals = np.array([float(r[col]) for r in rows])
        out[col] = (float(vals.mean()), float(vals.std()))
    return out


def summary_csv(rows: Sequence[tuple[str, dict]]) -> str:
    lines = ["run," + ",".join(SUMMARY_COLUMNS)]
    for name, s in rows:
        cells = [str(s["MaxIteration"]) if c == "MaxIteration" else _fmt(s[c]) for c in SUMMARY_COLUMNS]
        lines.append(name + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def trace_singular_values(net: UNet, addresses: Optional[Sequence[Union[str, LayerAddress]]] = None) -> dict:
    """``{address: [(index, initial_s, current_s), ...]}`` for factorised layers."""
    layers = net.svd_layers()
    if addresses is None:
        addresses = sorted(layers)
    out = {}
    for a in addresses:
        addr = LayerAddress.parse(a) if isinstance(a, str) else a
        layer = net.convs.get(addr)
        if not isinstance(layer, SvdConv2d):
            raise InvalidArgumentError(f"layer {addr} is not SVD-factorised")
        out[str(addr)] = [(i, float(s0), float(s1)) for i, (s0, s1) in enumerate(zip(layer.initial_s, layer.s.data))]
    return out


def singular_values_csv(trace: dict) -> str:
    lines = ["layer,index,initial,current"]
    for addr, rows in trace.items():
        for i, s0, s1 in rows:
            lines.append(f"{addr},{i},{_fmt(s0)},{_fmt(s1)}")
    return "\n".join(lines) + "\n"
