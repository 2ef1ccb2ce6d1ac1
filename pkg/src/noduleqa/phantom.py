"""Synthetic CT phantoms with known nodules, and a blob detector for them.

Nodules are isotropic Gaussian blobs with standard deviation ``radius / 2``
on a uniform lung-like background.  Together with :func:`synthetic_detect`
this closes the loop generate -> degrade -> detect -> evaluate without any
patient data or neural network.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from .annotations import ConsensusNodule
from .detections import Detection
from .rng import derive_key, normal_field
from .volume_io import Geometry, Volume, voxel_to_world

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomNodule:
    center_world: tuple[float, float, float]
    radius_mm: float
    contrast_hu: float


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    background_hu: float = -850.0
    nodules: list[PhantomNodule] = field(default_factory=list)
    texture_sigma_hu: float = 0.0
    seed: int = 0

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.origin, self.spacing, self.dims)

    def validate(self) -> None:
        g = self.geometry
        lo = np.asarray(g.origin)
        hi = np.asarray(voxel_to_world(g, np.asarray(g.dims) - 1))
        for k, n in enumerate(self.nodules):
            c = np.asarray(n.center_world)
            if np.any(c < lo) or np.any(c > hi):
                raise PhantomError(f"nodule {k} centre {n.center_world} outside volume bounds")
            if not n.radius_mm > 0:
                raise PhantomError(f"nodule {k}: radius must be > 0")
            if not n.contrast_hu > 0:
                raise PhantomError(f"nodule {k}: contrast must be > 0")
        if self.texture_sigma_hu < 0:
            raise PhantomError("texture_sigma_hu must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["spacing"] = list(self.spacing)
        d["origin"] = list(self.origin)
        d["nodules"] = [
            {"center_world": list(n.center_world), "radius_mm": n.radius_mm, "contrast_hu": n.contrast_hu}
            for n in self.nodules
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        try:
            return cls(
                dims=tuple(int(v) for v in d["dims"]),
                spacing=tuple(float(v) for v in d["spacing"]),
                origin=tuple(float(v) for v in d.get("origin", (0, 0, 0))),
                background_hu=float(d.get("background_hu", -850.0)),
                nodules=[
                    PhantomNodule(
                        tuple(float(v) for v in n["center_world"]),
                        float(n["radius_mm"]),
                        float(n["contrast_hu"]),
                    )
                    for n in d.get("nodules", [])
                ],
                texture_sigma_hu=float(d.get("texture_sigma_hu", 0.0)),
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PhantomError(f"bad phantom spec: {exc}") from exc


def load_phantom_spec(path) -> PhantomSpec:
    """Load a phantom spec from YAML or JSON (YAML is a superset)."""
    with open(path, encoding="utf-8") as fh:
        return PhantomSpec.from_dict(yaml.safe_load(fh))


def save_phantom_spec(spec: PhantomSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def blob_signal(g: Geometry, nodule: PhantomNodule) -> np.ndarray:
    """Inserted signal of one nodule sampled at voxel centres."""
    s = nodule.radius_mm / 2.0
    axes = []
    for ax in range(3):
        coords = g.origin[ax] + np.arange(g.dims[ax]) * g.spacing[ax]
        axes.append(np.exp(-((coords - nodule.center_world[ax]) ** 2) / (2 * s * s)))
    # separable: the 3D Gaussian is the outer product of per-axis profiles
    return nodule.contrast_hu * axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def generate_phantom(spec: PhantomSpec, case_id: str = "phantom") -> tuple[Volume, list[ConsensusNodule]]:
    spec.validate()
    g = spec.geometry
    data = np.full(g.dims, spec.background_hu, dtype=np.float64)
    for n in spec.nodules:
        data += blob_signal(g, n)
    if spec.texture_sigma_hu > 0:
        data += spec.texture_sigma_hu * normal_field(derive_key(spec.seed, "texture"), g.dims)
    truth = [
        ConsensusNodule(
            case_id,
            tuple(float(v) for v in n.center_world),
            4,
            tuple((r, f"phantom-{k}") for r in range(4)),
        )
        for k, n in enumerate(spec.nodules)
    ]
    return Volume(g, data, source_dtype="float32"), truth


def synthetic_detect(
    v: Volume,
    min_peak_contrast_hu: float = 100.0,
    smoothing_fwhm_mm: float = 2.0,
    case_id: str = "",
    condition_id: str = "",
) -> list[Detection]:
    """Contrast-threshold blob detector.

    Smooths with an isotropic Gaussian, takes the median as background and
    reports every plateau of local maxima rising more than
    ``min_peak_contrast_hu`` above it.  Confidence is
    ``clamp((peak - background - min_peak) / min_peak, 0, 1)``.
    """
    if not (min_peak_contrast_hu > 0 and smoothing_fwhm_mm > 0):
        raise PhantomError("detector parameters must be positive")
    g = v.geometry
    sigma_vox = [smoothing_fwhm_mm * FWHM_TO_SIGMA / s for s in g.spacing]
    smooth = ndimage.gaussian_filter(v.data, sigma_vox, mode="nearest")
    background = float(np.median(smooth))
    floor = background + min_peak_contrast_hu
    peaks = (smooth == ndimage.maximum_filter(smooth, size=3, mode="nearest")) & (smooth > floor)
    labels, n = ndimage.label(peaks, structure=np.ones((3, 3, 3)))
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    centres = np.asarray(ndimage.center_of_mass(peaks, labels, index)).reshape(n, 3)
    heights = np.asarray(ndimage.maximum(smooth, labels, index)).reshape(n)
    world = voxel_to_world(g, centres)
    out = []
    for pos, peak in zip(world, heights):
        conf = (peak - background - min_peak_contrast_hu) / min_peak_contrast_hu
        conf = min(max(conf, 0.0), 1.0)
        out.append(Detection(case_id, condition_id, tuple(float(c) for c in pos), float(conf)))
    out.sort(key=Detection.sort_key)
    return out
