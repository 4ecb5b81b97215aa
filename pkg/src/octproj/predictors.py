"""Coordinate-production strategies: small conv predictor, free per-pair
coordinates, and a direct map regressor.

The conv predictor stands in for a heavier segmentation backbone while
honoring the same output contract: a vertical-collapse convolution with one
output channel per layer boundary, horizontal linear upsampling back to the
full width, and a tanh squashing the coordinates into (-1, 1). The direct
regressor shares the encoder but collapses to a single raw-intensity channel
and skips the projection module entirely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dpm
from .autodiff import Node, Tape
from .errors import ConsistencyError, ContractError, ShapeError
from .tensorio import Rng, read_tsr, write_tsr


@dataclass(frozen=True)
class ColumnPredictorConfig:
    """Shape of the curve predictor: encoder stages plus the collapse head."""

    channels: tuple = (8, 16, 16)
    kernel: int = 3
    n_boundaries: int = 3
    input_downsample: int = 2  # area-mean factor applied to H and W up front

    def head_height(self, h: int) -> int:
        """Encoder output height for an input of H rows (each stage halves it)."""
        h2 = h // self.input_downsample
        for _ in self.channels:
            if h2 % 2:
                raise ShapeError(f"input height {h} not divisible through the encoder")
            h2 //= 2
        if h2 < 1:
            raise ShapeError(f"input height {h} collapses below 1 row")
        return h2

    def validate_input(self, h: int, w: int) -> None:
        if h % self.input_downsample or w % self.input_downsample:
            raise ShapeError(f"input {h}x{w} not divisible by {self.input_downsample}")
        self.head_height(h)


@dataclass(frozen=True)
class DirectRegressorConfig:
    """Same encoder, but the head emits a single raw projection row."""

    channels: tuple = (8, 16, 16)
    kernel: int = 3
    input_downsample: int = 2

    def as_column_config(self) -> ColumnPredictorConfig:
        return ColumnPredictorConfig(channels=self.channels, kernel=self.kernel,
                                     n_boundaries=1,
                                     input_downsample=self.input_downsample)


def init_conv_params(cfg: ColumnPredictorConfig, h: int, w: int, rng: Rng,
                     prefix: str = "") -> dict:
    """Kaiming-uniform (fan-in) weights, zero biases, for one predictor."""
    cfg.validate_input(h, w)
    params = {}
    gen = rng.gen
    c_in = 1
    for i, c_out in enumerate(cfg.channels):
        fan_in = c_in * cfg.kernel * cfg.kernel
        bound = math.sqrt(6.0 / fan_in)
        params[f"{prefix}stage{i}.kernel"] = gen.uniform(
            -bound, bound, size=(c_out, c_in, cfg.kernel, cfg.kernel)).astype(np.float32)
        params[f"{prefix}stage{i}.bias"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    hh = cfg.head_height(h)
    fan_in = c_in * hh
    bound = math.sqrt(6.0 / fan_in)
    params[f"{prefix}head.kernel"] = gen.uniform(
        -bound, bound, size=(cfg.n_boundaries, c_in, hh, 1)).astype(np.float32)
    # start the curves spread across the image (equispaced after tanh) rather
    # than stacked at 0: zero-thickness bands are a poor optimization basin
    # for a sampling-based projection
    k = cfg.n_boundaries
    levels = np.linspace(-0.5, 0.5, k) if k > 1 else np.zeros(1)
    params[f"{prefix}head.bias"] = np.arctanh(levels).astype(np.float32)
    return params


def count_params(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def _encode(weights: dict, slice_: Node, cfg, prefix: str) -> Node:
    """Shared trunk: downsample, conv/relu stages with vertical halving, collapse."""
    h, w = slice_.shape
    x = ad.avg_downsample2d(slice_, cfg.input_downsample, cfg.input_downsample)
    x = ad.reshape(x, (1,) + x.shape)
    p = cfg.kernel // 2
    for i in range(len(cfg.channels)):
        x = ad.conv2d(x, weights[f"{prefix}stage{i}.kernel"], stride=(1, 1), pad=(p, p))
        x = ad.bias_add(x, weights[f"{prefix}stage{i}.bias"])
        x = ad.relu(x)
        x = ad.avg_downsample2d(x, 2, 1)
    x = ad.conv2d(x, weights[f"{prefix}head.kernel"], stride=(1, 1), pad=(0, 0))
    x = ad.bias_add(x, weights[f"{prefix}head.bias"])
    k = x.shape[0]
    x = ad.reshape(x, (k, x.shape[2]))
    return ad.upsample_linear_1d(x, w // x.shape[1])


def predict_curves(weights: dict, slice_: Node, cfg: ColumnPredictorConfig,
                   prefix: str = "", monotone: bool = False) -> Node:
    """Predict [K, W] normalized layer coordinates for one B-scan slice.

    ``weights`` maps parameter names to tape nodes (leaves for training,
    constants for inference). With ``monotone`` the raw head output is run
    through the order-preserving reparameterization instead of plain tanh.
    """
    raw = _encode(weights, slice_, cfg, prefix)
    if raw.shape[0] != cfg.n_boundaries:
        raise ShapeError(f"head produced {raw.shape[0]} channels, expected {cfg.n_boundaries}")
    if monotone:
        return dpm.monotone_reparam(raw)
    return ad.tanh(raw)


def predict_pm_direct(weights: dict, slice_: Node, cfg: DirectRegressorConfig,
                      prefix: str = "") -> Node:
    """Directly regress one raw (pre-normalization) projection row [1, W]."""
    return _encode(weights, slice_, cfg.as_column_config(), prefix)


def wrap_leaves(tape: Tape, params: dict, requires_grad: bool) -> dict:
    return {k: tape.leaf(v, requires_grad=requires_grad) for k, v in params.items()}


# ---------------------------------------------------------------------------
# free per-pair coordinates
# ---------------------------------------------------------------------------

@dataclass
class FreeCoordParams:
    """Unconstrained [K, W] values, mapped by tanh (or the monotone reparam)."""

    raw: np.ndarray


def init_free_coords(k: int, w: int, mode: str = "equispaced", rng: Rng = None) -> FreeCoordParams:
    """Initialize free coordinates: ordered equispaced curves or small noise."""
    if k < 1 or w < 1:
        raise ContractError(f"K, W must be >= 1, got {k}, {w}")
    if mode == "equispaced":
        levels = np.linspace(-0.5, 0.5, k) if k > 1 else np.zeros(1)
        raw = np.arctanh(levels)[:, None] * np.ones((1, w))
    elif mode == "random":
        if rng is None:
            raise ContractError("random init requires an rng")
        raw = rng.gen.normal(0.0, 0.1, size=(k, w))
    else:
        raise ContractError(f"unknown init mode {mode!r}")
    return FreeCoordParams(raw=raw.astype(np.float32))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(dirpath, params: dict, manifest_extra: dict = None, step: int = 0) -> None:
    """Write every weight tensor as a named TSR file plus manifest.json."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, value in sorted(params.items()):
        fname = name.replace("/", "_") + ".tsr"
        write_tsr(value, d / fname)
        tensors[name] = {"file": fname, "dims": list(value.shape)}
    manifest = {"tensors": tensors, "step": int(step)}
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_checkpoint(dirpath):
    """Read back a checkpoint directory -> (params dict, manifest dict)."""
    d = Path(dirpath)
    with open(d / "manifest.json") as fh:
        manifest = json.load(fh)
    params = {}
    for name, entry in manifest["tensors"].items():
        t = read_tsr(d / entry["file"])
        if list(t.shape) != entry["dims"]:
            raise ConsistencyError(f"{name}: manifest dims {entry['dims']} vs file {list(t.shape)}")
        params[name] = t
    return params, manifest
