"""Tensor container conventions, deterministic RNG, and file formats.

Conventions used across the package:

* A "tensor" is a C-contiguous ``numpy.ndarray`` of ``float32``. Values are
  intensities in [0, 1] for images; every reader normalizes on load.
* Volumes are indexed ``[slice, row, column]`` (D, H, W); projection maps are
  ``[slice, column]`` (D, W), one contiguous row per B-scan slice.
* Public constructors never return NaN/Inf values.

File formats owned by this module:

* ``.tsr``  -- raw little-endian float32 tensor with a small header
  (magic ``DTSR``, version u16, dtype u8 = 0, ndim u8, ndim x u32 extents).
* ``.pgm``  -- binary PGM (P5) with maxval 255 or 65535, scaled to [0, 1].
* volume directories -- ``meta.json`` plus ``slice_0000.pgm ...``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConsistencyError,
    ContractError,
    FileIoError,
    FormatError,
    ShapeError,
)

TSR_MAGIC = b"DTSR"
TSR_VERSION = 1
TSR_MAX_NDIM = 8


def ensure_tensor(data, dims=None) -> np.ndarray:
    """Coerce ``data`` to a float32 tensor and validate the invariants.

    Raises ShapeError on a dims mismatch and ContractError on NaN/Inf or
    non-positive extents.
    """
    t = np.ascontiguousarray(data, dtype=np.float32)
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if t.size != int(np.prod(dims)):
            raise ShapeError(f"cannot view {t.size} values as dims {dims}")
        t = t.reshape(dims)
    if t.ndim == 0:
        t = t.reshape(1)
    if any(d < 1 for d in t.shape):
        raise ContractError(f"all extents must be >= 1, got {t.shape}")
    if not np.isfinite(t).all():
        raise ContractError("tensor contains NaN or Inf")
    return t


@dataclass
class VolumeMeta:
    """Sidecar metadata for a volume directory."""

    subject_id: str
    modality: str  # "OCT" or "OCTA"
    D: int
    H: int
    W: int
    intensity_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.modality not in ("OCT", "OCTA"):
            raise ContractError(f"modality must be OCT or OCTA, got {self.modality!r}")
        if min(self.D, self.H, self.W) < 1:
            raise ContractError("extents must be >= 1")
        lo, hi = self.intensity_range
        if not lo < hi:
            raise ContractError("intensity_range must satisfy lo < hi")


class Rng:
    """Counter-based, splittable random source.

    Sub-streams are derived by hashing (seed, label path), so results are
    independent of thread scheduling and call interleaving across streams.
    Identical (seed, stream, call sequence) yields identical outputs on all
    platforms (Philox is platform-independent).
    """

    def __init__(self, seed: int, label: str = ""):
        self.seed = int(seed)
        self.label = label
        digest = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def stream(self, label: str) -> "Rng":
        """Derive an independent named sub-stream."""
        sub = f"{self.label}/{label}" if self.label else label
        return Rng(self.seed, sub)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.label!r})"


# ---------------------------------------------------------------------------
# TSR binary tensors
# ---------------------------------------------------------------------------

def write_tsr(t: np.ndarray, path) -> None:
    """Write a tensor as a DTSR file. Lossless for float32 payloads."""
    t = ensure_tensor(t)
    if t.ndim > TSR_MAX_NDIM:
        raise FormatError(f"ndim {t.ndim} exceeds the format limit {TSR_MAX_NDIM}")
    header = TSR_MAGIC + struct.pack("<HBB", TSR_VERSION, 0, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(t.astype("<f4").tobytes())


def read_tsr(path) -> np.ndarray:
    """Read a DTSR file back into a float32 tensor (bit-exact round-trip)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short for a DTSR header")
    if blob[:4] != TSR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, dtype_code, ndim = struct.unpack("<HBB", blob[4:8])
    if version != TSR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype_code != 0:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    if ndim < 1 or ndim > TSR_MAX_NDIM:
        raise FormatError(f"{path}: ndim {ndim} outside [1, {TSR_MAX_NDIM}]")
    off = 8 + 4 * ndim
    if len(blob) < off:
        raise FormatError(f"{path}: truncated extents block")
    dims = struct.unpack(f"<{ndim}I", blob[8:off])
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: non-positive extent in {dims}")
    count = int(np.prod(dims))
    payload = blob[off:]
    if len(payload) != 4 * count:
        raise FileIoError(
            f"{path}: payload holds {len(payload)} bytes, expected {4 * count}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return ensure_tensor(data)


# ---------------------------------------------------------------------------
# PGM images
# ---------------------------------------------------------------------------

def _pgm_tokens(blob: bytes):
    """Yield whitespace-delimited header tokens, skipping '#' comments.

    Returns (tokens, payload_offset); the offset points just past the single
    whitespace byte that terminates the maxval token.
    """
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(blob):
            raise FormatError("PGM header ended prematurely")
        c = blob[i:i + 1]
        if c == b"#":
            while i < len(blob) and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
            if len(tokens) == 4:
                i += 1  # exactly one whitespace byte before the payload
    return tokens, i


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) image, scaled to [0, 1] by 1/maxval.

    Only maxval 255 and 65535 are accepted; 16-bit payloads are big-endian
    per the format. ASCII (P2) files are rejected.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, off = _pgm_tokens(blob)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: expected P5, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field {tokens[1:]}") from None
    if maxval not in (255, 65535):
        raise FormatError(f"{path}: maxval must be 255 or 65535, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad extents {width}x{height}")
    dtype = np.dtype(np.uint8) if maxval == 255 else np.dtype(">u2")
    expected = width * height * dtype.itemsize
    payload = blob[off:off + expected]
    if len(payload) < expected:
        raise FileIoError(f"{path}: truncated payload ({len(payload)}/{expected} bytes)")
    raw = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return ensure_tensor(raw.astype(np.float32) / maxval)


def write_pgm(t: np.ndarray, path, maxval: int = 255) -> None:
    """Write a 2D tensor as binary PGM, clamped to [0, 1], round-half-up."""
    t = np.asarray(t)
    if t.ndim != 2:
        raise ShapeError(f"PGM output requires a 2D tensor, got ndim {t.ndim}")
    if maxval not in (255, 65535):
        raise ContractError(f"maxval must be 255 or 65535, got {maxval}")
    if not np.isfinite(t).all():
        raise ContractError("cannot write non-finite values")
    q = np.floor(np.clip(t, 0.0, 1.0).astype(np.float64) * maxval + 0.5)
    q = np.clip(q, 0, maxval)
    out = q.astype(np.uint8 if maxval == 255 else ">u2")
    header = f"P5\n{t.shape[1]} {t.shape[0]}\n{maxval}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(out.tobytes())


# ---------------------------------------------------------------------------
# Volume directories
# ---------------------------------------------------------------------------

def save_volume(dirpath, meta: VolumeMeta, vol: np.ndarray, maxval: int = 255) -> None:
    """Write a D x H x W volume as a directory of PGM slices plus meta.json."""
    vol = ensure_tensor(vol)
    if vol.ndim != 3:
        raise ShapeError(f"volume must be 3D, got {vol.shape}")
    if vol.shape != (meta.D, meta.H, meta.W):
        raise ConsistencyError(f"meta says {(meta.D, meta.H, meta.W)}, tensor is {vol.shape}")
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "meta.json", "w") as fh:
        json.dump(
            {"subject_id": meta.subject_id, "modality": meta.modality,
             "D": meta.D, "H": meta.H, "W": meta.W},
            fh, indent=2)
        fh.write("\n")
    for i in range(meta.D):
        write_pgm(vol[i], d / f"slice_{i:04d}.pgm", maxval=maxval)


def load_volume(dirpath):
    """Load a volume directory, cross-checking meta.json against the slices.

    Returns (VolumeMeta, tensor[D, H, W]).
    """
    d = Path(dirpath)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise ConsistencyError(f"{d}: missing meta.json")
    with open(meta_path) as fh:
        raw = json.load(fh)
    try:
        meta = VolumeMeta(subject_id=raw["subject_id"], modality=raw["modality"],
                          D=int(raw["D"]), H=int(raw["H"]), W=int(raw["W"]))
    except KeyError as e:
        raise ConsistencyError(f"{d}: meta.json missing key {e}") from None
    slices = []
    for i in range(meta.D):
        p = d / f"slice_{i:04d}.pgm"
        if not p.is_file():
            raise ConsistencyError(f"{d}: missing slice index {i}")
        img = read_pgm(p)
        if img.shape != (meta.H, meta.W):
            raise ConsistencyError(
                f"{p}: extents {img.shape} disagree with meta {(meta.H, meta.W)}")
        slices.append(img)
    return meta, np.stack(slices, axis=0)
