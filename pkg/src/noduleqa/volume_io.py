"""NIfTI-1 volume I/O and voxel/world geometry.

Volumes are held as float64 arrays indexed ``data[x, y, z]`` (x fastest on
disk, as in NIfTI).  Only axis-aligned volumes, i.e. identity direction
cosines, are accepted; anything else is rejected rather than reoriented.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np


IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
DIRECTION_TOL = 1e-6
DEFAULT_MIN_SLICES = 16

SUPPORTED_DTYPES = ("int16", "uint16", "float32", "float64")


class VolumeError(ValueError):
    """Raised for unreadable, malformed or unsupported volumes."""


def _fmt_matrix(m: Sequence[Sequence[float]]) -> str:
    return "(" + "; ".join(",".join(f"{v:g}" for v in row) for row in m) + ")"


@dataclass(frozen=True)
class Geometry:
    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    dims: tuple[int, int, int]
    direction: tuple[tuple[float, ...], ...] = IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(
            self, "direction", tuple(tuple(float(v) for v in row) for row in self.direction)
        )
        if len(self.origin) != 3 or len(self.spacing) != 3 or len(self.dims) != 3:
            raise VolumeError("origin, spacing and dims must be 3-vectors")
        if not all(math.isfinite(s) and s > 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive and finite, got {self.spacing}")
        if any(d < 1 for d in self.dims):
            raise VolumeError(f"dims must all be >= 1, got {self.dims}")
        if len(self.direction) != 3 or any(len(row) != 3 for row in self.direction):
            raise VolumeError("direction must be a 3x3 matrix")

    @property
    def is_identity(self) -> bool:
        return all(
            abs(self.direction[i][j] - IDENTITY[i][j]) <= DIRECTION_TOL
            for i in range(3)
            for j in range(3)
        )

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def affine(self) -> np.ndarray:
        a = np.eye(4)
        a[:3, :3] = np.asarray(self.direction) * np.asarray(self.spacing)[None, :]
        a[:3, 3] = self.origin
        return a


@dataclass(frozen=True, eq=False)
class Volume:
    """HU samples on a :class:`Geometry`.  ``data`` is a read-only float64 array."""

    geometry: Geometry
    data: np.ndarray
    source_dtype: str = "float32"
    affine_source: str = "sform"

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.shape != self.geometry.dims:
            raise VolumeError(f"data shape {data.shape} != dims {self.geometry.dims}")
        if self.source_dtype not in SUPPORTED_DTYPES:
            raise VolumeError(f"unsupported datatype {self.source_dtype!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def replace_data(self, data: np.ndarray, source_dtype: str | None = None) -> "Volume":
        return Volume(
            self.geometry,
            data,
            source_dtype=source_dtype or self.source_dtype,
            affine_source=self.affine_source,
        )


def voxel_to_world(g: Geometry, index) -> np.ndarray:
    """World position (mm) of a voxel index; fractional and out-of-range indices allowed.

    ``index`` may be a single triple or an ``(n, 3)`` array.
    """
    if not g.is_identity:
        raise VolumeError(f"non-identity direction {_fmt_matrix(g.direction)}")
    idx = np.asarray(index, dtype=np.float64)
    return np.asarray(g.origin) + idx * np.asarray(g.spacing)


def world_to_voxel(g: Geometry, point) -> np.ndarray:
    if not g.is_identity:
        raise VolumeError(f"non-identity direction {_fmt_matrix(g.direction)}")
    p = np.asarray(point, dtype=np.float64)
    return (p - np.asarray(g.origin)) / np.asarray(g.spacing)


def _from_header_float(v: float) -> float:
    # header fields are float32: recover the shortest decimal that maps to the
    # same float32, so e.g. 0.7 mm reads back as 0.7 rather than 0.69999998
    return float(np.format_float_positional(np.float32(v), unique=True, trim="0"))


def _pick_affine(header: nib.Nifti1Header) -> tuple[np.ndarray, str]:
    sform, scode = header.get_sform(coded=True)
    if scode and scode > 0:
        return sform, "sform"
    qform, qcode = header.get_qform(coded=True)
    if qcode and qcode > 0:
        return qform, "qform"
    # method 1: pixdim only, origin at zero
    zooms = header.get_zooms()[:3]
    return np.diag([*zooms, 1.0]), "pixdim"


def read_volume(path) -> Volume:
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"{path}: no such file")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise VolumeError(f"{path}: malformed header ({exc})") from exc
    if not isinstance(img, nib.Nifti1Image):
        raise VolumeError(f"{path}: not a single-file NIfTI-1 image")
    header = img.header
    if bytes(header["magic"]).rstrip(b"\x00") != b"n+1":
        raise VolumeError(f"{path}: NIfTI-1 magic 'n+1' missing")

    dtype = header.get_data_dtype()
    if dtype.name not in SUPPORTED_DTYPES:
        raise VolumeError(f"{path}: unsupported datatype {dtype.name}")

    shape = tuple(int(v) for v in img.shape)
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise VolumeError(f"{path}: expected a single 3D image, got shape {img.shape}")
    if any(d < 1 for d in shape):
        raise VolumeError(f"{path}: dims with an axis < 1: {shape}")

    affine, source = _pick_affine(header)
    linear = affine[:3, :3]
    spacing = np.linalg.norm(linear, axis=0)
    if np.any(spacing <= 0) or not np.all(np.isfinite(spacing)):
        raise VolumeError(f"{path}: degenerate affine {affine.tolist()}")
    direction = linear / spacing[None, :]
    geometry = Geometry(
        origin=tuple(_from_header_float(v) for v in affine[:3, 3]),
        spacing=tuple(_from_header_float(v) for v in spacing),
        dims=shape,
        direction=tuple(map(tuple, direction)),
    )
    if not geometry.is_identity:
        raise VolumeError(
            f"{path}: non-identity direction {_fmt_matrix(geometry.direction)} (from {source})"
        )
    geometry = Geometry(geometry.origin, geometry.spacing, geometry.dims, IDENTITY)

    data = np.asarray(img.dataobj, dtype=np.float64)
    data = data.reshape(shape)
    return Volume(geometry, data, source_dtype=dtype.name, affine_source=source)


def write_volume(v: Volume, path) -> int:
    """Write ``v`` as NIfTI-1 in its ``source_dtype``.

    Integer outputs are rounded half-to-even and clamped to the dtype range.
    Returns the number of clamped samples (a warning is emitted when > 0).
    """
    path = Path(path)
    if not path.parent.is_dir():
        raise VolumeError(f"{path.parent}: output directory does not exist")
    dtype = np.dtype(v.source_dtype)
    clamped = 0
    if dtype.kind in "iu":
        if not np.all(np.isfinite(v.data)):
            raise VolumeError(f"{path}: cannot store non-finite samples as {dtype.name}")
        info = np.iinfo(dtype)
        rounded = np.rint(v.data)
        over = (rounded < info.min) | (rounded > info.max)
        clamped = int(np.count_nonzero(over))
        out = np.clip(rounded, info.min, info.max).astype(dtype)
        if clamped:
            warnings.warn(
                f"{path}: {clamped} samples clamped to {dtype.name} range", RuntimeWarning,
                stacklevel=2,
            )
    else:
        out = v.data.astype(dtype)

    affine = v.geometry.affine()
    img = nib.Nifti1Image(out, affine)
    header = img.header
    header.set_data_dtype(dtype)
    header.set_qform(affine, code=1)
    header.set_sform(affine, code=1)
    header.set_xyzt_units(xyz="mm")
    header.set_slope_inter(1.0, 0.0)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise VolumeError(f"{path}: write failed ({exc})") from exc
    return clamped


@dataclass(frozen=True)
class ValidationReport:
    too_few_slices: bool = False
    non_identity_direction: bool = False
    non_finite: bool = False
    messages: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not (self.too_few_slices or self.non_identity_direction or self.non_finite)


def validate_volume(v: Volume, min_slices: int = DEFAULT_MIN_SLICES) -> ValidationReport:
    """Flag volumes unsuitable for inference.  Never raises."""
    g = v.geometry
    msgs = []
    few = g.dims[2] < min_slices
    if few:
        msgs.append(f"only {g.dims[2]} slices (< {min_slices})")
    skew = not g.is_identity
    if skew:
        msgs.append(f"non-identity direction {_fmt_matrix(g.direction)}")
    n_bad = int(np.count_nonzero(~np.isfinite(v.data)))
    if n_bad:
        msgs.append(f"{n_bad} non-finite samples")
    return ValidationReport(few, skew, n_bad > 0, tuple(msgs))
