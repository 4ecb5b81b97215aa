"""Training objective (conditional min-max rescaling, L1 + feature loss) and
evaluation metrics (PSNR, SSIM).

The projection pipeline emits pre-normalized intensities while ground-truth
maps are min-max normalized per map, so training rescales predictions with a
learnable per-subject (min, max) pair before comparing. The structural term
of the loss compares activations of a frozen, seeded random convolution bank
instead of a pretrained network; the bank is pluggable via
``FeatureExtractorSpec``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractError, ShapeError, SubjectLookupError
from .tensorio import Rng, ensure_tensor, read_tsr, write_tsr

CMM_EPS = 1e-6


# ---------------------------------------------------------------------------
# Conditional min-max normalization
# ---------------------------------------------------------------------------

@dataclass
class CmmTable:
    """Learnable per-subject (min, max) intensity parameters.

    ``values`` is [S, 2] float32 with column 0 = min, column 1 = max,
    initialized to (0, 1) so the map starts as the identity.
    """

    subjects: list
    values: np.ndarray

    @classmethod
    def create(cls, subject_ids) -> "CmmTable":
        ids = list(subject_ids)
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate subject ids in CMM table")
        values = np.tile(np.array([0.0, 1.0], dtype=np.float32), (len(ids), 1))
        return cls(subjects=ids, values=values)

    def index(self, subject_id: str) -> int:
        try:
            return self.subjects.index(subject_id)
        except ValueError:
            raise SubjectLookupError(f"subject {subject_id!r} not in CMM table") from None

    def save(self, dirpath) -> None:
        d = Path(dirpath)
        d.mkdir(parents=True, exist_ok=True)
        write_tsr(self.values, d / "cmm.tsr")
        with open(d / "subjects.json", "w") as fh:
            json.dump(self.subjects, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, dirpath) -> "CmmTable":
        d = Path(dirpath)
        with open(d / "subjects.json") as fh:
            subjects = json.load(fh)
        values = read_tsr(d / "cmm.tsr")
        if values.shape != (len(subjects), 2):
            raise ShapeError(f"cmm.tsr {values.shape} does not match {len(subjects)} subjects")
        return cls(subjects=subjects, values=values)


def cmm_apply(pred: Node, table: CmmTable, subject_id: str, table_node: Node = None) -> Node:
    """Rescale a prediction by the subject's learnable (min, max) pair.

    Computes (pred - min_i) / max(eps, max_i - min_i). Gradients flow into
    the prediction and, when ``table_node`` (a leaf wrapping ``table.values``)
    is supplied, into that subject's two parameters only.
    """
    i = table.index(subject_id)
    if table_node is None:
        table_node = pred.tape.leaf(table.values)
    imin = ad.take_scalar(table_node, (i, 0))
    imax = ad.take_scalar(table_node, (i, 1))
    span = ad.sub(imax, imin)
    denom = ad.maximum_s(span, CMM_EPS)
    return ad.div(ad.sub(pred, imin), denom)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def l1_loss(a: Node, b) -> Node:
    """Mean absolute difference between a prediction and a constant target."""
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"dims differ: {a.shape} vs {b.shape}")
    return ad.mean_(ad.abs_(ad.sub(a, a.tape.leaf(b))))


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Frozen random convolution bank standing in for a pretrained network.

    One [channels, 1, kernel, kernel] bank per scale; the scale-s input is
    the area-mean downsample of the map by 2**s (iterated, odd edges
    cropped). Convolutions are un-padded so a constant offset between inputs
    cancels exactly under zero-mean kernels. The same seed always rebuilds
    the identical bank; nothing here is ever trained.
    """

    seed: int = 0
    scales: int = 2
    channels: int = 8
    kernel: int = 3
    zero_mean: bool = False

    def build_kernels(self):
        banks = []
        for s in range(self.scales):
            rng = Rng(self.seed, f"feature/scale{s}")
            bound = math.sqrt(6.0 / (self.kernel * self.kernel))
            k = rng.gen.uniform(-bound, bound,
                                size=(self.channels, 1, self.kernel, self.kernel))
            if self.zero_mean:
                k = k - k.mean(axis=(2, 3), keepdims=True)
            banks.append(k.astype(np.float32))
        return banks


def _feature_maps(x: Node, kernels) -> Node:
    h, w = x.shape
    m = ad.reshape(x, (1, h, w))
    k = x.tape.leaf(kernels)
    return ad.abs_(ad.conv2d(m, k, stride=(1, 1), pad=(0, 0)))


def feature_loss(a: Node, b, spec: FeatureExtractorSpec) -> Node:
    """Multi-scale mean absolute feature difference; only ``a`` gets gradients.

    Scales whose (downsampled) extents cannot fit the kernel are skipped;
    if no scale fits, the maps are too small and a ShapeError is raised.
    """
    b = np.asarray(b, dtype=np.float32)
    if a.value.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"feature_loss needs equal 2D maps, got {a.shape} vs {b.shape}")
    tape = a.tape
    banks = spec.build_kernels()
    xa, xb = a, tape.leaf(b)
    total = None
    for s, kernels in enumerate(banks):
        if s > 0:
            h, w = xa.shape
            if h < 2 or w < 2:
                break
            if h % 2 or w % 2:  # crop odd trailing row/column before halving
                xa = _crop2d(xa, h - h % 2, w - w % 2)
                xb = _crop2d(xb, h - h % 2, w - w % 2)
            xa = ad.avg_downsample2d(xa, 2, 2)
            xb = ad.avg_downsample2d(xb, 2, 2)
        if xa.shape[0] < spec.kernel or xa.shape[1] < spec.kernel:
            continue
        diff = ad.mean_(ad.abs_(ad.sub(_feature_maps(xa, kernels),
                                       _feature_maps(xb, kernels))))
        total = diff if total is None else ad.add(total, diff)
    if total is None:
        raise ShapeError(f"maps {a.shape} too small for any feature scale")
    return total


def _crop2d(x: Node, h: int, w: int) -> Node:
    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[:h, :w] = g
        return gx

    return x.tape.op(x.value[:h, :w].copy(), [(x, vjp)])


def pair_loss(pred: Node, gt, feature_spec: FeatureExtractorSpec = None) -> Node:
    """Single-band loss: L1 plus (optionally) the structural feature term."""
    loss = l1_loss(pred, gt)
    if feature_spec is not None:
        loss = ad.add(loss, feature_loss(pred, gt, feature_spec))
    return loss


def combined_loss(pred_b2: Node, gt_b2, pred_b3: Node, gt_b3,
                  lam: float = 0.2, feature_spec: FeatureExtractorSpec = None) -> Node:
    """Joint two-band loss: loss(B2) + lam * loss(B3).

    Predictions are expected to be already rescaled (CMM during training);
    targets are constants.
    """
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    l2 = pair_loss(pred_b2, gt_b2, feature_spec)
    l3 = pair_loss(pred_b3, gt_b3, feature_spec)
    return ad.add(l2, ad.smul(l3, lam))


# ---------------------------------------------------------------------------
# evaluation metrics (plain numpy, not differentiable)
# ---------------------------------------------------------------------------

def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dims differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with a Gaussian window, valid-region only.

    Standard constants; local statistics are window-weighted moments (no
    sample-covariance correction). Inputs must be at least win_size square.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dims differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < win_size:
        raise ContractError(f"ssim needs 2D inputs of at least {win_size}x{win_size}, got {a.shape}")
    w = _gaussian_window(win_size, sigma)
    mu_a = fftconvolve(a, w, mode="valid")
    mu_b = fftconvolve(b, w, mode="valid")
    s_aa = fftconvolve(a * a, w, mode="valid") - mu_a * mu_a
    s_bb = fftconvolve(b * b, w, mode="valid") - mu_b * mu_b
    s_ab = fftconvolve(a * b, w, mode="valid") - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def minmax_normalize(pm, eps: float = CMM_EPS) -> np.ndarray:
    """Min-max normalize a map by its own actual range; constant maps -> zeros."""
    pm = np.asarray(pm, dtype=np.float32)
    lo = float(pm.min())
    span = float(pm.max()) - lo
    if span < eps:
        return np.zeros_like(pm)
    return ensure_tensor((pm - lo) / span)
