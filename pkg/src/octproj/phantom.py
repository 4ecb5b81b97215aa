"""Synthetic retina phantoms: paired OCT/OCTA volumes with exactly known
layer curves, vessels, and reference projection maps.

The image model is built per slice from three smooth boundary surfaces
(ILM, OPL, BM) with banded base intensities, dark vessel tubes inside the
inner band (casting attenuation shadows onto the outer band), additive
Gaussian noise, and a clamp to [0, 1]. The paired OCTA volume shares the
geometry but shows bright vessels on a dark background.

Reference projection maps are integrated here with a trapezoidal rule over
each column's piecewise-linear vertical intensity profile (256 sub-samples
between the true continuous curves). This integrator shares no code with the
differentiable projection path, so it serves as an independent oracle; it
operates on the same voxel field the projection module sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, ContractError, ShapeError
from .tensorio import Rng, VolumeMeta, ensure_tensor, load_volume, read_tsr, save_volume, write_pgm, write_tsr

GT_SUBSAMPLES = 256
BASE_LEVELS = (-0.5, 0.0, 0.5)  # normalized resting positions of ILM/OPL/BM
STRESS_VARIANTS = ("lesion", "steep", "lowq")


@dataclass(frozen=True)
class PhantomSpec:
    """Generation parameters; fully determines a subject together with the seed."""

    D: int = 32
    H: int = 128
    W: int = 128
    seed: int = 0
    subject_id: str = "phantom_000"
    harmonics: int = 3
    amplitude: float = 0.08          # normalized curve deviation bound
    min_gap_px: float = 12.0
    vessel_count: int = 6            # superficial plexus, inside the inner band
    deep_vessel_count: int = 4       # deep plexus, inside the outer band
    vessel_radius: tuple = (1.5, 3.5)
    vessel_contrast: tuple = (0.3, 0.6)
    noise_sigma: float = 0.02
    intensity_inner: float = 0.55
    intensity_outer: float = 0.25
    intensity_background: float = 0.05
    edge_ramp_px: float = 3.0        # smooth band transition width
    variant: str = None              # None | "lesion" | "steep" | "lowq"

    def __post_init__(self):
        if min(self.D, self.H, self.W) < 8:
            raise ContractError("extents must be >= 8")
        if self.variant not in (None, *STRESS_VARIANTS):
            raise ContractError(f"unknown variant {self.variant!r}")
        for v in (self.intensity_inner, self.intensity_outer, self.intensity_background):
            if not 0.0 <= v <= 1.0:
                raise ContractError("base intensities must lie in [0, 1]")


@dataclass
class PhantomTruth:
    """Exact generation byproducts used as oracles downstream."""

    curves: np.ndarray            # [D, 3, W] normalized, ordered
    vessels: list                 # per vessel: [W, 3] centerline (slice, y_norm, column)
    gt_pm_b2: np.ndarray          # [D, W], min-max normalized per map
    gt_pm_b3: np.ndarray
    gt_pm_b2_raw: np.ndarray      # pre-normalization band means
    gt_pm_b3_raw: np.ndarray
    octa_gt_pm_b2: np.ndarray
    octa_gt_pm_b3: np.ndarray
    octa_gt_pm_b2_raw: np.ndarray
    octa_gt_pm_b3_raw: np.ndarray


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _cosine_field(gen, order: int, d: int, w: int) -> np.ndarray:
    """Smooth random field on a [D, W] grid, normalized to max |value| = 1."""
    dd = np.linspace(0.0, 1.0, d)[:, None]
    ww = np.linspace(0.0, 1.0, w)[None, :]
    f = np.zeros((d, w))
    for i in range(1, order + 1):
        a, b = gen.normal(size=2) / i
        pa, pb = gen.uniform(0, 2 * np.pi, size=2)
        f += a * np.cos(2 * np.pi * i * ww + pa)
        f += b * np.cos(2 * np.pi * i * dd + pb)
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _make_curves(spec: PhantomSpec, rng: Rng) -> np.ndarray:
    amp = spec.amplitude * (4.0 if spec.variant == "steep" else 1.0)
    gen = rng.gen
    # shared curvature dominates so adjacent boundaries move together and
    # gaps survive even at the steep-variant amplitude
    common = _cosine_field(gen, spec.harmonics, spec.D, spec.W) * (0.75 * amp)
    curves = np.empty((spec.D, 3, spec.W), dtype=np.float64)
    for k, base in enumerate(BASE_LEVELS):
        indep = _cosine_field(gen, spec.harmonics, spec.D, spec.W) * (0.25 * amp)
        curves[:, k, :] = base + common + indep
    px_per_norm = (spec.H - 1) / 2.0
    gaps_px = (curves[:, 1:, :] - curves[:, :-1, :]) * px_per_norm
    if gaps_px.min() < spec.min_gap_px:
        raise ContractError(
            f"layer gap {gaps_px.min():.1f}px below the {spec.min_gap_px}px floor; "
            "H too small for the requested amplitude")
    if np.abs(curves).max() > 0.9:
        raise ContractError("curves leave the safe [-0.9, 0.9] band; infeasible spec")
    return curves.astype(np.float32)


def _make_vessels(spec: PhantomSpec, curves: np.ndarray, rng: Rng) -> list:
    """Smooth tubes between the layer surfaces, one en-face path per vessel.

    Superficial vessels live in the inner band and cast shadows; deep ones
    live in the outer band and do not. Having structure in both bands makes
    the band identity observable from the projection targets. Depth fractions
    span almost the whole band so the boundaries stay pinned by content.
    Returns dicts with the slice path d(w), radius (px), contrast, band, and
    the [W, 3] centerline polyline.
    """
    gen = rng.gen
    vessels = []
    w_idx = np.arange(spec.W)
    plan = [("inner", 0, 1)] * spec.vessel_count + [("outer", 1, 2)] * spec.deep_vessel_count
    for band, k_up, k_lo in plan:
        radius = gen.uniform(*spec.vessel_radius)
        contrast = gen.uniform(*spec.vessel_contrast)
        frac = gen.uniform(0.15, 0.85)
        margin = radius + 1.5
        center = gen.uniform(margin, spec.D - 1 - margin)
        sway = gen.uniform(0.1, 0.4) * (spec.D - 1)
        freq = gen.uniform(0.5, 2.0)
        phase = gen.uniform(0, 2 * np.pi)
        path = center + sway * np.cos(2 * np.pi * freq * w_idx / spec.W + phase)
        path = np.clip(path, margin, spec.D - 1 - margin)
        # depth follows the band geometry at the (fractional) slice position
        d0 = np.clip(path.astype(np.int64), 0, spec.D - 2)
        fd = path - d0
        upper = curves[d0, k_up, w_idx] * (1 - fd) + curves[d0 + 1, k_up, w_idx] * fd
        lower = curves[d0, k_lo, w_idx] * (1 - fd) + curves[d0 + 1, k_lo, w_idx] * fd
        y_c = upper + frac * (lower - upper)
        centerline = np.stack([path, y_c, w_idx.astype(np.float64)], axis=1)
        vessels.append({"path": path, "y": y_c, "radius": radius, "band": band,
                        "contrast": contrast, "centerline": centerline.astype(np.float32)})
    return vessels


def _lesion_params(spec: PhantomSpec, rng: Rng):
    gen = rng.gen
    return {
        "d0": gen.uniform(spec.D * 0.25, spec.D * 0.75),
        "w0": gen.uniform(spec.W * 0.25, spec.W * 0.75),
        "sd": spec.D / 6.0,
        "sw": spec.W / 6.0,
        "sy_px": 6.0,
        "gain": 0.25,
    }


def generate(spec: PhantomSpec):
    """Generate one subject -> (oct_volume, octa_volume, PhantomTruth).

    Fully determined by (spec.seed, spec.subject_id, spec fields); identical
    specs reproduce byte-identical volumes.
    """
    rng = Rng(spec.seed, f"subject/{spec.subject_id}")
    curves = _make_curves(spec, rng.stream("curves"))
    vessels = _make_vessels(spec, curves, rng.stream("vessels"))
    lesion = _lesion_params(spec, rng.stream("lesion")) if spec.variant == "lesion" else None

    d_, h, w = spec.D, spec.H, spec.W
    y = np.linspace(-1.0, 1.0, h)[:, None]          # normalized row centers
    px = (h - 1) / 2.0
    wr = spec.edge_ramp_px * 2.0 / (h - 1)          # ramp width, normalized
    bg, inner, outer = (spec.intensity_background, spec.intensity_inner,
                        spec.intensity_outer)
    oct_vol = np.empty((d_, h, w), dtype=np.float64)
    octa_vol = np.empty((d_, h, w), dtype=np.float64)

    for d in range(d_):
        ilm, opl, bm = curves[d, 0][None, :], curves[d, 1][None, :], curves[d, 2][None, :]
        # the ILM/BM ramps sit outside the bands and the OPL ramp is centered
        # on it, so band-interior plateaus start right at the curves
        up = _smoothstep((y - (ilm - wr)) / wr)
        mix = _smoothstep((y - (opl - wr / 2)) / wr)
        down = _smoothstep((y - bm) / wr)
        struct = bg + (inner - bg) * up + (outer - inner) * mix + (bg - outer) * down

        dark = np.zeros((h, w))
        bright = np.zeros((h, w))
        shadow = np.zeros(w)
        for v in vessels:
            dd = d - v["path"]
            near = np.abs(dd) <= v["radius"]
            if not near.any():
                continue
            drow = (y - v["y"][None, :]) * px
            q = (dd[None, :] ** 2 + drow ** 2) / v["radius"] ** 2
            prof = np.where(near[None, :], np.maximum(0.0, 1.0 - q), 0.0)
            dark = np.maximum(dark, v["contrast"] * prof)
            bright = np.maximum(bright, prof)
            if v["band"] == "inner":  # only the superficial plexus shadows below
                shadow += v["contrast"] * np.where(
                    near, np.maximum(0.0, 1.0 - (dd / v["radius"]) ** 2), 0.0)
        shadow = np.clip(shadow, 0.0, 1.0)
        outer_band = mix * (1.0 - down)

        img = struct * (1.0 - dark)
        img = img * (1.0 - 0.5 * shadow[None, :] * outer_band)
        if lesion is not None:
            blob = (np.exp(-((d - lesion["d0"]) ** 2) / (2 * lesion["sd"] ** 2))
                    * np.exp(-((np.arange(w) - lesion["w0"]) ** 2) / (2 * lesion["sw"] ** 2)))
            depth = np.exp(-(((y - opl) * px) ** 2) / (2 * lesion["sy_px"] ** 2))
            img = img + lesion["gain"] * blob[None, :] * depth
        oct_vol[d] = img

        octa = 0.05 + 0.05 * up - 0.02 * mix - 0.03 * down
        octa_vol[d] = octa + 0.85 * bright

    sigma = np.full((d_, 1, w), spec.noise_sigma)
    if spec.variant == "lowq":
        sigma[d_ // 2:, :, w // 2:] *= 5.0
    oct_vol += rng.stream("noise_oct").gen.normal(size=(d_, h, w)) * sigma
    octa_vol += rng.stream("noise_octa").gen.normal(size=(d_, h, w)) * sigma
    oct_vol = np.clip(oct_vol, 0.0, 1.0).astype(np.float32)
    octa_vol = np.clip(octa_vol, 0.0, 1.0).astype(np.float32)

    truth = _build_truth(oct_vol, octa_vol, curves, vessels)
    return oct_vol, octa_vol, truth


def integrate_band(vol: np.ndarray, curves: np.ndarray, k_upper: int, k_lower: int,
                   n: int = GT_SUBSAMPLES) -> np.ndarray:
    """Trapezoidal band average of each column's vertical intensity profile.

    Samples n points between the two curves (endpoints included) through the
    per-column piecewise-linear profile of the voxel field. Independent of
    the differentiable projection implementation.
    """
    d_, h, w = vol.shape
    cols = np.arange(w)[None, :]
    t = np.linspace(0.0, 1.0, n)[:, None]
    pm = np.empty((d_, w), dtype=np.float64)
    for d in range(d_):
        upper = curves[d, k_upper][None, :]
        lower = curves[d, k_lower][None, :]
        yy = upper * (1 - t) + lower * t
        r = np.clip((yy + 1.0) / 2.0 * (h - 1), 0.0, h - 1)
        r0 = np.minimum(r.astype(np.int64), h - 2)
        f = r - r0
        img = vol[d]
        vals = img[r0, cols] * (1 - f) + img[r0 + 1, cols] * f
        pm[d] = np.trapz(vals, dx=1.0 / (n - 1), axis=0)
    return pm.astype(np.float32)


def _normalize_pm(pm: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    lo, hi = float(pm.min()), float(pm.max())
    if hi - lo < eps:
        return np.zeros_like(pm)
    return ((pm - lo) / (hi - lo)).astype(np.float32)


def _build_truth(oct_vol, octa_vol, curves, vessels) -> PhantomTruth:
    b2 = integrate_band(oct_vol, curves, 0, 1)
    b3 = integrate_band(oct_vol, curves, 1, 2)
    a2 = integrate_band(octa_vol, curves, 0, 1)
    a3 = integrate_band(octa_vol, curves, 1, 2)
    return PhantomTruth(
        curves=curves, vessels=[v["centerline"] for v in vessels],
        gt_pm_b2=_normalize_pm(b2), gt_pm_b3=_normalize_pm(b3),
        gt_pm_b2_raw=b2, gt_pm_b3_raw=b3,
        octa_gt_pm_b2=_normalize_pm(a2), octa_gt_pm_b3=_normalize_pm(a3),
        octa_gt_pm_b2_raw=a2, octa_gt_pm_b3_raw=a3)


def stress_cases(spec: PhantomSpec) -> dict:
    """The three robustness variants, each a full (oct, octa, truth) triple."""
    out = {}
    for variant in STRESS_VARIANTS:
        sub = replace(spec, variant=variant, subject_id=f"{spec.subject_id}_{variant}")
        out[variant] = generate(sub)
    return out


# ---------------------------------------------------------------------------
# dataset layout
# ---------------------------------------------------------------------------

@dataclass
class Subject:
    """One loaded subject directory."""

    subject_id: str
    oct: np.ndarray
    octa: np.ndarray
    gt_pm_b2: np.ndarray
    gt_pm_b3: np.ndarray
    gt_pm_b2_raw: np.ndarray = None
    gt_pm_b3_raw: np.ndarray = None
    octa_gt_pm_b2: np.ndarray = None
    octa_gt_pm_b3: np.ndarray = None
    truth_curves: np.ndarray = None
    path: str = ""


def split_counts(n_subjects: int):
    """60/20/20 by subject: floor for val/test (at least 1 each), rest to train."""
    n_val = max(1, int(n_subjects * 0.2))
    n_test = max(1, int(n_subjects * 0.2))
    return n_subjects - n_val - n_test, n_val, n_test


def write_subject(subj_dir, spec: PhantomSpec, oct_vol, octa_vol, truth: PhantomTruth) -> None:
    d = Path(subj_dir)
    d.mkdir(parents=True, exist_ok=True)
    dd, hh, ww = oct_vol.shape
    save_volume(d / "oct", VolumeMeta(spec.subject_id, "OCT", dd, hh, ww), oct_vol,
                maxval=65535)
    save_volume(d / "octa", VolumeMeta(spec.subject_id, "OCTA", dd, hh, ww), octa_vol,
                maxval=65535)
    write_tsr(truth.curves, d / "truth_curves.tsr")
    for stem, pm, raw in (("gt_pm_b2", truth.gt_pm_b2, truth.gt_pm_b2_raw),
                          ("gt_pm_b3", truth.gt_pm_b3, truth.gt_pm_b3_raw),
                          ("octa_gt_pm_b2", truth.octa_gt_pm_b2, truth.octa_gt_pm_b2_raw),
                          ("octa_gt_pm_b3", truth.octa_gt_pm_b3, truth.octa_gt_pm_b3_raw)):
        write_tsr(pm, d / f"{stem}.tsr")
        write_pgm(pm, d / f"{stem}.pgm")
        write_tsr(raw, d / f"{stem}_raw.tsr")


def export_dataset(out_dir, n_subjects: int, spec_base: PhantomSpec,
                   stress: bool = False) -> dict:
    """Generate and write a split dataset tree; returns {split: [subject dirs]}.

    Subject ids are phantom_%03d; the split assignment is a seeded
    permutation; every subject's RNG stream derives from (seed, subject_id),
    so subjects are reproducible independently of each other.
    """
    if n_subjects < 3:
        raise ContractError(f"need >= 3 subjects, got {n_subjects}")
    root = Path(out_dir)
    ids = [f"phantom_{i:03d}" for i in range(n_subjects)]
    order = Rng(spec_base.seed, "split").gen.permutation(n_subjects)
    n_train, n_val, n_test = split_counts(n_subjects)
    assignment = {}
    for pos, idx in enumerate(order):
        split = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")
        assignment[ids[idx]] = split
    written = {"train": [], "val": [], "test": []}
    for sid in ids:
        spec = replace(spec_base, subject_id=sid, variant=None)
        oct_vol, octa_vol, truth = generate(spec)
        subj_dir = root / assignment[sid] / sid
        write_subject(subj_dir, spec, oct_vol, octa_vol, truth)
        written[assignment[sid]].append(str(subj_dir))
    if stress:
        base = replace(spec_base, subject_id="stress")
        for variant, (oct_vol, octa_vol, truth) in stress_cases(base).items():
            spec = replace(spec_base, subject_id=f"stress_{variant}", variant=variant)
            subj_dir = root / "test" / spec.subject_id
            write_subject(subj_dir, spec, oct_vol, octa_vol, truth)
            written["test"].append(str(subj_dir))
    return written


def load_subject(subj_dir) -> Subject:
    d = Path(subj_dir)
    meta, oct_vol = load_volume(d / "oct")
    octa = None
    if (d / "octa").is_dir():
        _, octa = load_volume(d / "octa")

    def opt(stem):
        p = d / f"{stem}.tsr"
        return read_tsr(p) if p.is_file() else None

    gt2, gt3 = opt("gt_pm_b2"), opt("gt_pm_b3")
    if gt2 is None or gt3 is None:
        raise ConsistencyError(f"{d}: missing ground-truth projection maps")
    return Subject(subject_id=meta.subject_id, oct=oct_vol, octa=octa,
                   gt_pm_b2=gt2, gt_pm_b3=gt3,
                   gt_pm_b2_raw=opt("gt_pm_b2_raw"), gt_pm_b3_raw=opt("gt_pm_b3_raw"),
                   octa_gt_pm_b2=opt("octa_gt_pm_b2"), octa_gt_pm_b3=opt("octa_gt_pm_b3"),
                   truth_curves=opt("truth_curves"), path=str(d))


def load_dataset(root) -> dict:
    """Load {train, val, test} subject lists, sorted by id for determinism."""
    root = Path(root)
    out = {}
    for split in ("train", "val", "test"):
        subjects = []
        split_dir = root / split
        if split_dir.is_dir():
            for sub in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                subjects.append(load_subject(sub))
        out[split] = subjects
    if not any(out.values()):
        raise ConsistencyError(f"{root}: no train/val/test subjects found")
    return out
