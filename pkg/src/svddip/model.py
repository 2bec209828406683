"""U-Net builder with addressable conv layers and singular-value replacement.

Layout for ``num_scales = S``::

    down.0   conv(in -> c0)                              full resolution
    down.i   conv stride 2 (c{i-1} -> ci), conv(ci -> ci)   i = 1 .. S-1
    skip.i   1x1 conv(ci -> skip_i)                       i = 0 .. S-2, when skip_i > 0
    up.i     upsample, concat skip.i, conv(c{i+1}+skip_i -> ci), conv(ci -> ci)
    out.0    1x1 conv(c0 -> out), sigmoid or identity

Every conv except ``out`` is followed by group norm and a leaky ReLU.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .autodiff import Parameter, Tensor, load_tensor, ops, save_tensor
from .errors import InvalidArgumentError
from .svd import TruncationPolicy, apply_truncation, factor_kernels, fold, svd_decompose

BLOCK_KINDS = ("down", "up", "skip", "out")


@dataclass(frozen=True)
class UNetConfig:
    channels: tuple = (32, 32, 32)
    skip_channels: tuple = (4, 4, 4)
    kernel_size: int = 3
    in_channels: int = 1
    out_channels: int = 1
    leaky_slope: float = 0.2
    sigmoid_output: bool = True
    norm_groups: Optional[int] = None
    norm_eps: float = 1e-5
    zero_init_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "skip_channels", tuple(int(c) for c in self.skip_channels))
        if len(self.channels) < 1:
            raise InvalidArgumentError("need at least one scale")
        if any(c <= 0 for c in self.channels):
            raise InvalidArgumentError(f"channel counts must be positive: {self.channels}")
        if len(self.skip_channels) != len(self.channels) or any(c < 0 for c in self.skip_channels):
            raise InvalidArgumentError("skip_channels needs one non-negative width per scale")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgumentError(f"kernel size must be odd, got {self.kernel_size}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidArgumentError("in/out channel counts must be positive")
        for c in self.channels + tuple(s for s in self.skip_channels if s):
            if c % self.groups_for(c):
                raise InvalidArgumentError(f"{c} channels not divisible into {self.groups_for(c)} groups")

    @property
    def num_scales(self) -> int:
        return len(self.channels)

    def groups_for(self, c: int) -> int:
        return min(32, c) if self.norm_groups is None else min(self.norm_groups, c)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["skip_channels"] = list(self.skip_channels)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


DESK_UNET = UNetConfig()
PAPER_UNET = UNetConfig(channels=(128,) * 5, skip_channels=(4,) * 5)


@dataclass(frozen=True, order=True)
class LayerAddress:
    kind: str
    scale: int
    index: int = 0

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise InvalidArgumentError(f"unknown block kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "LayerAddress":
        parts = text.strip().split(".")
        if len(parts) not in (2, 3):
            raise InvalidArgumentError(f"bad layer address {text!r}; expected kind.scale[.index]")
        try:
            return cls(parts[0], int(parts[1]), int(parts[2]) if len(parts) == 3 else 0)
        except ValueError as exc:
            raise InvalidArgumentError(f"bad layer address {text!r}") from exc

    def __str__(self) -> str:
        return f"{self.kind}.{self.scale}.{self.index}"


# -- layers -------------------------------------------------------------------------


class Conv2d:
    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int = 1):
        self.weight = Parameter(weight)
        self.bias = Parameter(bias)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride)

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


class SvdConv2d:
    """K x K conv onto the right singular vectors, per-channel singular values, 1 x 1 conv with the left vectors.

    ``U``, ``V`` and ``bias`` are frozen buffers; only ``s`` trains.
    """

    def __init__(self, u_kernel, s, v_kernel, bias, stride: int = 1, full_rank: Optional[int] = None):
        self.U = Parameter(u_kernel, trainable=False, requires_grad=False)
        self.V = Parameter(v_kernel, trainable=False, requires_grad=False)
        self.s = Parameter(s)
        self.bias = Parameter(bias, trainable=False, requires_grad=False)
        self.stride = stride
        self.full_rank = s.size if full_rank is None else full_rank
        self.initial_s = np.array(s, copy=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.conv2d(x, self.V, None, stride=self.stride)
        h = ops.channel_scale(h, self.s)
        return ops.conv2d(h, self.U, self.bias)

    def parameters(self) -> dict:
        return {"U": self.U, "s": self.s, "V": self.V, "bias": self.bias}

    @property
    def rank(self) -> int:
        return self.s.size


class GroupNorm:
    def __init__(self, channels: int, groups: int, eps: float):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.groups = groups
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.weight, self.bias, self.eps)

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


ConvLayer = Union[Conv2d, SvdConv2d]


# -- network ------------------------------------------------------------------------


class UNet:
    """Callable network; ``convs`` maps every :class:`LayerAddress` to its conv layer."""

    def __init__(self, cfg: UNetConfig, convs: dict, norms: dict, dtype=np.float64):
        self.cfg = cfg
        self.convs: dict[LayerAddress, ConvLayer] = convs
        self.norms: dict[LayerAddress, GroupNorm] = norms
        self.dtype = np.dtype(dtype)

    # structure

    def _block(self, addr: LayerAddress, x: Tensor) -> Tensor:
        h = self.convs[addr](x)
        h = self.norms[addr](h)
        return ops.leaky_relu(h, self.cfg.leaky_slope)

    def __call__(self, z) -> Tensor:
        return self.forward(z)

    def forward(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z, dtype=self.dtype)
        if z.ndim not in (3, 4):
            raise InvalidArgumentError(f"network input must be [C,H,W] or [B,C,H,W], got {z.shape}")
        h, w = z.shape[-2:]
        factor = 2 ** (self.cfg.num_scales - 1)
        if h % factor or w % factor or h == 0 or w == 0:
            raise InvalidArgumentError(f"spatial size {h}x{w} not divisible by {factor} for {self.cfg.num_scales} scales")
        if z.shape[-3] != self.cfg.in_channels:
            raise InvalidArgumentError(f"expected {self.cfg.in_channels} input channels, got {z.shape[-3]}")
        S = self.cfg.num_scales
        feats = []
        x = self._block(LayerAddress("down", 0, 0), z)
        feats.append(x)
        for i in range(1, S):
            x = self._block(LayerAddress("down", i, 0), x)
            x = self._block(LayerAddress("down", i, 1), x)
            feats.append(x)
        axis = -3
        for i in range(S - 2, -1, -1):
            x = ops.upsample_bilinear2x(x)
            if self.cfg.skip_channels[i]:
                skip = self._block(LayerAddress("skip", i, 0), feats[i])
                x = ops.concat([x, skip], axis=axis)
            x = self._block(LayerAddress("up", i, 0), x)
            x = self._block(LayerAddress("up", i, 1), x)
        out = self.convs[LayerAddress("out", 0, 0)](x)
        return ops.sigmoid(out) if self.cfg.sigmoid_output else out

    # parameters

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for addr in sorted(self.convs):
            for name, p in self.convs[addr].parameters().items():
                yield f"{addr}.{name}", p
        for addr in sorted(self.norms):
            for name, p in self.norms[addr].parameters().items():
                yield f"{addr}.norm_{name}", p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def frozen_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.trainable]

    def count_trainable(self) -> int:
        return sum(p.size for p in self.trainable_parameters())

    def svd_layers(self) -> dict[LayerAddress, SvdConv2d]:
        return {a: l for a, l in self.convs.items() if isinstance(l, SvdConv2d)}

    def conv_addresses(self, kinds: Iterable[str] = BLOCK_KINDS) -> list[LayerAddress]:
        kinds = set(kinds)
        return sorted(a for a in self.convs if a.kind in kinds)

    def set_trainable(self, flag: bool, params: Optional[Iterable[Parameter]] = None) -> None:
        for p in self.parameters() if params is None else params:
            p.trainable = flag

    def astype(self, dtype) -> "UNet":
        """A copy of the network with every parameter cast to ``dtype``."""
        net = copy.deepcopy(self)
        net._cast(dtype)
        return net

    def _cast(self, dtype) -> "UNet":
        self.dtype = np.dtype(dtype)
        for p in self.parameters():
            p.astype(self.dtype)
        for layer in self.svd_layers().values():
            layer.initial_s = layer.initial_s.astype(self.dtype)
        return self


def _kaiming(rng: np.random.Generator, shape: tuple, slope: float) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    gain = math.sqrt(2.0 / (1.0 + slope**2))
    return rng.standard_normal(shape) * (gain / math.sqrt(fan_in))


def build_unet(cfg: UNetConfig = DESK_UNET, rng_seed: int = 0, dtype=np.float64) -> UNet:
    """Fresh network with fan-in scaled Gaussian weights and zero biases."""
    rng = np.random.default_rng(rng_seed)
    k = cfg.kernel_size
    convs: dict = {}
    norms: dict = {}

    def add(addr, cin, cout, ksize, stride=1, norm=True):
        convs[addr] = Conv2d(_kaiming(rng, (cout, cin, ksize, ksize), cfg.leaky_slope), np.zeros(cout), stride)
        if norm:
            norms[addr] = GroupNorm(cout, cfg.groups_for(cout), cfg.norm_eps)

    ch = cfg.channels
    add(LayerAddress("down", 0, 0), cfg.in_channels, ch[0], k)
    for i in range(1, cfg.num_scales):
        add(LayerAddress("down", i, 0), ch[i - 1], ch[i], k, stride=2)
        add(LayerAddress("down", i, 1), ch[i], ch[i], k)
    for i in range(cfg.num_scales - 2, -1, -1):
        sk = cfg.skip_channels[i]
        if sk:
            add(LayerAddress("skip", i, 0), ch[i], sk, 1)
        add(LayerAddress("up", i, 0), ch[i + 1] + sk, ch[i], k)
        add(LayerAddress("up", i, 1), ch[i], ch[i], k)
    add(LayerAddress("out", 0, 0), ch[0], cfg.out_channels, 1, norm=False)
    if cfg.zero_init_output:
        out = convs[LayerAddress("out", 0, 0)]
        out.weight.data[...] = 0.0
    return UNet(cfg, convs, norms)._cast(dtype)


# -- SVD replacement -----------------------------------------------------------------


def default_svd_addresses(net: UNet, skip_first_down: int = 0) -> list[LayerAddress]:
    """Every down/up conv; the first ``skip_first_down`` down blocks are left alone."""
    return [a for a in net.conv_addresses(("down", "up")) if not (a.kind == "down" and a.scale < skip_first_down)]


def replace_with_svd(
    net: UNet,
    addresses: Sequence[LayerAddress],
    policy: Union[TruncationPolicy, str] = TruncationPolicy(),
) -> UNet:
    """Swap each addressed conv for its singular-value factorisation, in place.

    The factorisation runs in float64 and is then cast to the network dtype.
    Without truncation the network computes the same function.
    """
    if isinstance(policy, str):
        policy = TruncationPolicy.parse(policy)
    addresses = [LayerAddress.parse(a) if isinstance(a, str) else a for a in addresses]
    if len(set(addresses)) != len(addresses):
        raise InvalidArgumentError("duplicate layer addresses")
    for addr in addresses:
        if addr not in net.convs:
            raise InvalidArgumentError(f"no conv layer at address {addr}")
        if isinstance(net.convs[addr], SvdConv2d):
            raise InvalidArgumentError(f"layer {addr} is already SVD-factorised")
    for addr in addresses:
        layer = net.convs[addr]
        factors = svd_decompose(fold(layer.weight.data.astype(np.float64)))
        factors = apply_truncation(factors, policy)
        u, s, v = factor_kernels(factors)
        dt = net.dtype
        net.convs[addr] = SvdConv2d(
            u.astype(dt), s.astype(dt), v.astype(dt), layer.bias.data.copy(), layer.stride, factors.full_rank
        )
    return net


# -- checkpoints ---------------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(net: UNet, directory: Union[str, os.PathLike], extra: Optional[dict] = None) -> Path:
    """Write every parameter as a tensor file plus a text manifest.

    Manifest lines: ``config <json>``, ``config_hash <hex>``, ``dtype <name>``,
    ``meta <key> <value>`` and, per parameter,
    ``param <name> <shape> <trainable 0|1> <file>``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [
        f"config {json.dumps(net.cfg.to_dict(), sort_keys=True)}",
        f"config_hash {net.cfg.digest()}",
        f"dtype {net.dtype.name}",
    ]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"meta {key} {value}")
    for name, p in net.named_parameters():
        fname = name.replace(".", "_") + ".bin"
        save_tensor(d / fname, p.data)
        shape = "x".join(str(s) for s in p.shape) or "scalar"
        lines.append(f"param {name} {shape} {int(p.trainable)} {fname}")
    for addr, layer in sorted(net.svd_layers().items()):
        fname = str(addr).replace(".", "_") + "_initial_s.bin"
        save_tensor(d / fname, layer.initial_s)
        lines.append(f"svd {addr} {layer.full_rank} {layer.stride} {fname}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def read_manifest(directory: Union[str, os.PathLike]) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"{path}: checkpoint manifest not found")
    info: dict = {"params": [], "svd": [], "meta": {}}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        tag, rest = line.split(" ", 1)
        if tag == "config":
            info["config"] = json.loads(rest)
        elif tag in ("config_hash", "dtype"):
            info[tag] = rest.strip()
        elif tag == "meta":
            key, _, value = rest.partition(" ")
            info["meta"][key] = value
        elif tag == "param":
            name, shape, trainable, fname = rest.split()
            info["params"].append((name, shape, trainable == "1", fname))
        elif tag == "svd":
            addr, full_rank, stride, fname = rest.split()
            info["svd"].append((addr, int(full_rank), int(stride), fname))
        else:
            raise InvalidArgumentError(f"{path}: unknown manifest entry {tag!r}")
    return info


def load_checkpoint(directory: Union[str, os.PathLike], expected: Optional[UNetConfig] = None) -> UNet:
    """Rebuild a network from :func:`save_checkpoint` output.

    Raises :class:`InvalidArgumentError` when ``expected`` differs from the
    stored config.
    """
    d = Path(directory)
    info = read_manifest(d)
    raw = info["config"]
    cfg = UNetConfig(**{**raw, "channels": tuple(raw["channels"]), "skip_channels": tuple(raw["skip_channels"])})
    if cfg.digest() != info["config_hash"]:
        raise InvalidArgumentError(f"{d}: config hash does not match stored config")
    if expected is not None and expected.digest() != cfg.digest():
        raise InvalidArgumentError(
            f"{d}: checkpoint model config {cfg.digest()} does not match requested config {expected.digest()}"
        )
    dtype = np.dtype(info.get("dtype", "float64"))
    net = build_unet(cfg, 0, dtype)
    arrays = {name: load_tensor(d / fname) for name, _, _, fname in info["params"]}
    for addr_text, full_rank, stride, fname in info["svd"]:
        addr = LayerAddress.parse(addr_text)
        layer = SvdConv2d(
            arrays[f"{addr}.U"], arrays[f"{addr}.s"], arrays[f"{addr}.V"], arrays[f"{addr}.bias"], stride, full_rank
        )
        layer.initial_s = load_tensor(d / fname)
        net.convs[addr] = layer
    params = dict(net.named_parameters())
    if set(params) != set(arrays):
        raise InvalidArgumentError(f"{d}: parameter set in manifest does not match the model")
    for name, _, trainable, _ in info["params"]:
        p = params[name]
        if p.shape != arrays[name].shape:
            raise InvalidArgumentError(f"{d}: shape mismatch for {name}")
        p.data = np.array(arrays[name], dtype=dtype)
        p.trainable = trainable
        p.grad = np.zeros_like(p.data)
        p.reset_optimizer_state()
    return net
