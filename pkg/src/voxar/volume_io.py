"""Binary volume files, synthetic phantom datasets and resampling.

The volume file format ("VVOL") stores little-endian float32 payloads in
row-major order, depth fastest, channel slowest; float64 is used for all
in-memory compute. Synthetic volumes stand in for clinical data: smooth
Gaussian blobs plus noise inside an ellipsoidal region of interest, with
optional bright spherical lesions whose exact voxel masks are returned
as ground truth.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    DegenerateDataError,
    ShapeError,
    TruncatedFileError,
    UsageError,
    VersionError,
)

__all__ = [
    "VOLUME_MAGIC",
    "write_volume",
    "read_volume",
    "read_volume3d",
    "SynthConfig",
    "DatasetItem",
    "synth_dataset",
    "save_dataset",
    "load_dataset",
    "resample_trilinear",
    "normalize",
    "denormalize",
]

VOLUME_MAGIC = b"VVOL"
VOLUME_VERSION = 1
_DTYPE_F32 = 1


def write_volume(path, data):
    """Write a (H, W, D) or (C, H, W, D) array as a float32 volume file."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"volume must be 3-d or 4-d, got shape {arr.shape}")
    c, h, w, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<HH", VOLUME_VERSION, c))
        fh.write(struct.pack("<III", h, w, d))
        fh.write(struct.pack("<B", _DTYPE_F32))
        fh.write(arr.astype("<f4").tobytes())


def read_volume(path) -> np.ndarray:
    """Read a volume file back as a float64 array of shape (C, H, W, D)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: not a volume file")
    header = struct.calcsize("<HHIIIB")
    if len(blob) < 4 + header:
        raise TruncatedFileError(f"{path}: header cut short")
    version, c, h, w, d, dtype_tag = struct.unpack_from("<HHIIIB", blob, 4)
    if version != VOLUME_VERSION:
        raise VersionError(f"{path}: volume format version {version} unsupported")
    if dtype_tag != _DTYPE_F32:
        raise VersionError(f"{path}: unknown dtype tag {dtype_tag}")
    expected = c * h * w * d * 4
    payload = blob[4 + header :]
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise DataError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(c, h, w, d)
    return arr.astype(np.float64)


def read_volume3d(path) -> np.ndarray:
    """Read a single-channel volume as (H, W, D)."""
    arr = read_volume(path)
    if arr.shape[0] != 1:
        raise DataError(f"{path}: expected 1 channel, found {arr.shape[0]}")
    return arr[0]


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class SynthConfig:
    n_volumes: int = 10
    dims: tuple = (8, 8, 8)
    blob_count: tuple = (2, 4)  # inclusive range
    blob_sigma: tuple = (1.0, 2.2)
    blob_amplitude: tuple = (0.35, 0.75)
    lesion_probability: float = 0.0
    lesion_radius: tuple = (1.2, 1.9)
    lesion_delta: float = 0.5
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        for name in ("blob_count", "blob_sigma", "blob_amplitude", "lesion_radius"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name} range ({lo}, {hi}) is empty")
        if not (0.0 <= self.lesion_probability <= 1.0):
            raise ConfigError(f"lesion_probability {self.lesion_probability} outside [0, 1]")
        if self.n_volumes < 1:
            raise ConfigError("n_volumes must be positive")


@dataclass
class DatasetItem:
    id: str
    volume: np.ndarray  # (H, W, D), float64 in [0, 1]
    roi: np.ndarray  # (H, W, D), bool
    lesion_mask: Optional[np.ndarray]  # (H, W, D) bool, None when lesion-free
    has_lesion: bool


def _ellipsoid_roi(dims) -> np.ndarray:
    h, w, d = dims
    center = ((h - 1) / 2.0, (w - 1) / 2.0, (d - 1) / 2.0)
    semi = (0.48 * (h - 1) + 0.5, 0.48 * (w - 1) + 0.5, 0.48 * (d - 1) + 0.5)
    rr, cc, zz = np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")
    val = (
        ((rr - center[0]) / semi[0]) ** 2
        + ((cc - center[1]) / semi[1]) ** 2
        + ((zz - center[2]) / semi[2]) ** 2
    )
    return val <= 1.0


def _gaussian_blob(dims, center, sigma, amplitude) -> np.ndarray:
    rr, cc, zz = np.meshgrid(
        np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij"
    )
    dist2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2 + (zz - center[2]) ** 2
    return amplitude * np.exp(-dist2 / (2.0 * sigma**2))


def _sphere(dims, center, radius) -> np.ndarray:
    rr, cc, zz = np.meshgrid(
        np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij"
    )
    dist2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2 + (zz - center[2]) ** 2
    return dist2 <= radius**2


def synth_dataset(cfg: SynthConfig) -> list:
    """Generate phantom volumes with ground-truth lesion and ROI masks.

    Each volume is clamp01(sum of Gaussian blobs + white noise) inside an
    ellipsoidal ROI, zero outside. With probability
    ``lesion_probability`` a bright sphere is added inside the ROI; its
    mask marks exactly the voxels the addition changed.
    """
    rng = np.random.default_rng(cfg.seed)
    dims = tuple(cfg.dims)
    roi = _ellipsoid_roi(dims)
    roi_idx = np.argwhere(roi)
    items = []
    for i in range(cfg.n_volumes):
        base = np.zeros(dims)
        n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
        for _ in range(n_blobs):
            center = roi_idx[rng.integers(len(roi_idx))] + rng.uniform(-0.5, 0.5, 3)
            sigma = rng.uniform(*cfg.blob_sigma)
            amp = rng.uniform(*cfg.blob_amplitude)
            base += _gaussian_blob(dims, center, sigma, amp)
        base += rng.normal(0.0, cfg.noise_sigma, size=dims)
        clean = np.clip(base, 0.0, 1.0) * roi

        lesion_mask = None
        volume = clean
        if rng.random() < cfg.lesion_probability:
            radius = rng.uniform(*cfg.lesion_radius)
            center = _place_sphere(rng, roi, radius)
            sphere = _sphere(dims, center, radius) & roi
            lesioned = np.clip(base + cfg.lesion_delta * sphere, 0.0, 1.0) * roi
            lesion_mask = lesioned != clean
            volume = lesioned
        items.append(
            DatasetItem(
                id=f"vol{i:04d}",
                volume=volume,
                roi=roi.copy(),
                lesion_mask=lesion_mask,
                has_lesion=lesion_mask is not None,
            )
        )
    return items


def _place_sphere(rng, roi, radius, max_tries: int = 1000):
    """Random integer center whose whole sphere stays inside the ROI."""
    dims = roi.shape
    candidates = np.argwhere(roi)
    for _ in range(max_tries):
        center = candidates[rng.integers(len(candidates))]
        if _sphere(dims, center, radius)[~roi].any():
            continue
        return center
    return np.array([s // 2 for s in dims])  # ROI center always qualifies


# ---------------------------------------------------------------------------
# dataset files: one volume/roi/mask file per item plus a manifest CSV
# with columns id, volume_path, lesion_mask_path (may be empty), roi_path,
# has_lesion {0,1}; paths are relative to the manifest's directory.


def save_dataset(items, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "volume_path", "lesion_mask_path", "roi_path", "has_lesion"])
        for item in items:
            vol_name = f"{item.id}.vvol"
            roi_name = f"{item.id}_roi.vvol"
            write_volume(out_dir / vol_name, item.volume)
            write_volume(out_dir / roi_name, item.roi.astype(np.float64))
            mask_name = ""
            if item.lesion_mask is not None:
                mask_name = f"{item.id}_lesion.vvol"
                write_volume(out_dir / mask_name, item.lesion_mask.astype(np.float64))
            writer.writerow([item.id, vol_name, mask_name, roi_name, int(item.has_lesion)])
    return manifest


def load_dataset(manifest_path) -> list:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: manifest not found")
    base = manifest_path.parent
    items = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "volume_path", "lesion_mask_path", "roi_path", "has_lesion"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{manifest_path}: manifest missing columns {required}")
        for row in reader:
            volume = read_volume3d(base / row["volume_path"])
            roi = read_volume3d(base / row["roi_path"]) > 0.5
            lesion = None
            if row["lesion_mask_path"]:
                lesion = read_volume3d(base / row["lesion_mask_path"]) > 0.5
            items.append(
                DatasetItem(
                    id=row["id"],
                    volume=volume,
                    roi=roi,
                    lesion_mask=lesion,
                    has_lesion=row["has_lesion"] == "1",
                )
            )
    return items


# ---------------------------------------------------------------------------
# resampling and intensity normalization


def resample_trilinear(v: np.ndarray, target_dims) -> np.ndarray:
    """Trilinear resampling with corner-aligned coordinates.

    Endpoints map to endpoints, so the identity size is the identity map
    and constant fields stay constant. Outputs are convex combinations of
    the eight surrounding samples and never leave [min(v), max(v)].
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3:
        raise ShapeError(f"expected a 3-d volume, got shape {v.shape}")
    target_dims = tuple(int(t) for t in target_dims)
    if any(t < 1 for t in target_dims):
        raise UsageError(f"target dims {target_dims} must all be >= 1")

    coords = []
    for src, tgt in zip(v.shape, target_dims):
        if tgt == 1:
            coords.append(np.zeros(1))
        else:
            coords.append(np.arange(tgt) * (src - 1) / (tgt - 1))
    out = np.zeros(target_dims)
    grids = np.meshgrid(*coords, indexing="ij")
    lo = [np.clip(np.floor(g).astype(int), 0, s - 1) for g, s in zip(grids, v.shape)]
    hi = [np.clip(l + 1, 0, s - 1) for l, s in zip(lo, v.shape)]
    frac = [g - l for g, l in zip(grids, lo)]
    for bits in range(8):
        sel = [(hi if bits >> ax & 1 else lo)[ax] for ax in range(3)]
        weight = np.ones(target_dims)
        for ax in range(3):
            weight = weight * (frac[ax] if bits >> ax & 1 else 1.0 - frac[ax])
        out += weight * v[sel[0], sel[1], sel[2]]
    return out


def normalize(v: np.ndarray, roi: np.ndarray):
    """Min-max map of ROI voxels to [0, 1]; zero outside; returns (v, (min, max))."""
    v = np.asarray(v, dtype=np.float64)
    roi = np.asarray(roi, dtype=bool)
    if v.shape != roi.shape:
        raise ShapeError(f"volume shape {v.shape} != roi shape {roi.shape}")
    if not roi.any():
        raise UsageError("normalize: empty roi")
    vmin = float(v[roi].min())
    vmax = float(v[roi].max())
    if vmax <= vmin:
        raise DegenerateDataError(f"normalize: constant roi (min == max == {vmin})")
    out = np.zeros_like(v)
    out[roi] = (v[roi] - vmin) / (vmax - vmin)
    return out, (vmin, vmax)


def denormalize(v: np.ndarray, params, roi: np.ndarray) -> np.ndarray:
    vmin, vmax = params
    out = np.zeros_like(np.asarray(v, dtype=np.float64))
    roi = np.asarray(roi, dtype=bool)
    out[roi] = v[roi] * (vmax - vmin) + vmin
    return out
