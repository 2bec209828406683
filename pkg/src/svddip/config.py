"""Run specifications: ``[section]`` headers with ``key = value`` lines.

Every key has a default taken from the preset named by ``preset`` in the
``[run]`` section (``desk`` when absent). Unknown sections or keys are
rejected so that typos never silently fall back to a default.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .ct.geometry import MatrixOperator, ParallelGeometry
from .ct.operators import load_matrix_operator
from .errors import InvalidArgumentError
from .model import UNetConfig
from .presets import PRESETS, preset
from .svd import TruncationPolicy
from .training import DipRunConfig, PretrainConfig

SECTIONS = ("geometry", "noise", "model", "pretrain", "dip", "output")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse: Callable[[str], object]) -> Callable[[str], object]:
    def inner(text: str):
        t = text.strip()
        return None if t in ("", "none", "auto") else parse(t)

    return inner


def _int_tuple(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _str_list(text: str) -> tuple:
    return tuple(v for v in text.replace(",", " ").split() if v)


def _positive_float(text: str) -> float:
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise ValueError(f"expected a positive number, got {text!r}")
    return v


SCHEMA: dict[str, dict[str, Callable[[str], object]]] = {
    "geometry": {
        "kind": str,
        "n_px": int,
        "num_angles": int,
        "num_detector_pixels": int,
        "detector_spacing": float,
        "pixel_size": float,
        "matrix_file": str,
    },
    "noise": {"spec": str, "mu_max": _positive_float},
    "model": {
        "channels": _int_tuple,
        "skip_channels": _int_tuple,
        "kernel_size": int,
        "leaky_slope": float,
        "sigmoid_output": _bool,
        "norm_groups": _optional(int),
    },
    "pretrain": {
        "dataset_size": int,
        "epochs": int,
        "batch_size": int,
        "lr": _positive_float,
        "seed": int,
        "max_ellipses": int,
        "fbp_filter": str,
    },
    "dip": {
        "iterations": int,
        "lr_dip": _positive_float,
        "lr_edip": _positive_float,
        "lr_svd_dip": _positive_float,
        "gamma": float,
        "data_loss": str,
        "svd_addresses": _optional(_str_list),
        "skip_first_down": int,
        "truncation": str,
        "train_unreplaced": _bool,
        "train_norms": _bool,
        "noise_std": float,
        "n0": _positive_float,
        "psnr_range": _optional(_positive_float),
        "dtype": str,
    },
    "output": {"flush_every": int, "pgm": _bool},
}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunSpec:
    """Resolved settings, one dict per section."""

    preset: str
    values: dict
    base_dir: Path = Path(".")

    # -- construction

    @classmethod
    def default(cls, name: str = "desk") -> "RunSpec":
        return cls(name, preset(name))

    @classmethod
    def parse(cls, text: str, base_dir: Union[str, os.PathLike] = ".", source: str = "<spec>") -> "RunSpec":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise InvalidArgumentError(f"{source}: {exc}") from exc
        name = "desk"
        if cp.has_section("run"):
            extra = set(cp["run"]) - {"preset"}
            if extra:
                raise InvalidArgumentError(f"{source}: unknown key(s) in [run]: {', '.join(sorted(extra))}")
            name = cp["run"].get("preset", "desk").strip()
        if name not in PRESETS:
            raise InvalidArgumentError(f"{source}: unknown preset {name!r}; choose from {sorted(PRESETS)}")
        values = preset(name)
        for section in cp.sections():
            if section == "run":
                continue
            if section not in SCHEMA:
                raise InvalidArgumentError(f"{source}: unknown section [{section}]")
            for key, raw in cp[section].items():
                if key not in SCHEMA[section]:
                    raise InvalidArgumentError(f"{source}: unknown key {key!r} in [{section}]")
                try:
                    values[section][key] = SCHEMA[section][key](raw)
                except ValueError as exc:
                    raise InvalidArgumentError(f"{source}: [{section}] {key}: {exc}") from exc
        spec = cls(name, values, Path(base_dir))
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: Optional[Union[str, os.PathLike]]) -> "RunSpec":
        if path is None:
            return cls.default()
        p = Path(path)
        return cls.parse(p.read_text(), base_dir=p.parent, source=str(p))

    def dumps(self) -> str:
        lines = ["[run]", f"preset = {self.preset}", ""]
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {_format(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def validate(self) -> None:
        self.model_config()
        self.truncation()
        kind = self.values["geometry"]["kind"]
        if kind not in ("parallel", "matrix"):
            raise InvalidArgumentError(f"geometry kind must be 'parallel' or 'matrix', got {kind!r}")
        if kind == "parallel":
            self.parallel_geometry()
        for variant in ("dip", "edip", "svd-dip"):
            self.dip_config(variant, checkpoint="<validate>")

    # -- typed views

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def model_config(self) -> UNetConfig:
        m = self.values["model"]
        return UNetConfig(
            channels=m["channels"],
            skip_channels=m["skip_channels"],
            kernel_size=m["kernel_size"],
            leaky_slope=m["leaky_slope"],
            sigmoid_output=m["sigmoid_output"],
            norm_groups=m["norm_groups"],
        )

    def truncation(self) -> TruncationPolicy:
        return TruncationPolicy.parse(self.values["dip"]["truncation"])

    def parallel_geometry(self) -> ParallelGeometry:
        g = self.values["geometry"]
        return ParallelGeometry(g["n_px"], g["num_angles"], g["num_detector_pixels"], g["detector_spacing"], g["pixel_size"])

    def operator(self) -> Union[ParallelGeometry, MatrixOperator]:
        """The parallel geometry, or the matrix operator loaded from ``matrix_file``."""
        g = self.values["geometry"]
        if g["kind"] == "parallel":
            return self.parallel_geometry()
        if not g["matrix_file"]:
            raise InvalidArgumentError("geometry kind 'matrix' needs matrix_file")
        path = Path(g["matrix_file"])
        if not path.is_absolute():
            path = self.base_dir / path
        return load_matrix_operator(path, (g["n_px"], g["n_px"]), (g["num_angles"], g["num_detector_pixels"]))

    def pretrain_config(self, geometry=None) -> PretrainConfig:
        p = self.values["pretrain"]
        return PretrainConfig(
            dataset_size=p["dataset_size"],
            geometry=geometry if geometry is not None else self.operator(),
            noise=self.values["noise"]["spec"],
            epochs=p["epochs"],
            batch_size=p["batch_size"],
            lr=p["lr"],
            seed=p["seed"],
            max_ellipses=p["max_ellipses"],
            fbp_filter=p["fbp_filter"],
            mu_max=self.values["noise"]["mu_max"],
        )

    def dip_config(self, variant: str, checkpoint=None, seed: int = 0, **overrides) -> DipRunConfig:
        d = self.values["dip"]
        lr_key = {"dip": "lr_dip", "edip": "lr_edip", "svd-dip": "lr_svd_dip"}.get(variant)
        if lr_key is None:
            raise InvalidArgumentError(f"unknown variant {variant!r}")
        kwargs = dict(
            variant=variant,
            iterations=d["iterations"],
            lr=d[lr_key],
            gamma=d["gamma"],
            data_loss=d["data_loss"],
            svd_addresses=d["svd_addresses"],
            skip_first_down=d["skip_first_down"],
            truncation=self.truncation(),
            train_unreplaced=d["train_unreplaced"],
            train_norms=d["train_norms"],
            checkpoint=None if variant == "dip" else checkpoint,
            model=self.model_config(),
            seed=seed,
            noise_std=d["noise_std"],
            n0=d["n0"],
            mu_max=self.values["noise"]["mu_max"],
            fbp_filter=self.values["pretrain"]["fbp_filter"],
            psnr_range=d["psnr_range"],
            dtype=d["dtype"],
            flush_every=self.values["output"]["flush_every"],
        )
        kwargs.update(overrides)
        try:
            dtype = np.dtype(kwargs["dtype"])
        except TypeError:
            dtype = None
        if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise InvalidArgumentError(f"dtype must be float32 or float64, got {kwargs['dtype']}")
        return DipRunConfig(**kwargs)
