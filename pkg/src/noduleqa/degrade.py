"""Acquisition-condition simulation: dose noise and slice thickening.

Dose reduction is modelled in the image domain as additive zero-mean
Gaussian noise whose standard deviation scales as ``1/sqrt(dose)``.  Thicker
slices are modelled as an unweighted moving average along z on the native
grid (the grid itself is not resampled).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .rng import derive_key, normal_field
from .volume_io import Volume

DEFAULT_SEED = 20250116
DEFAULT_SIGMA_BASE_HU = 25.0

NOISE_MODES = ("literal", "variance-gap")


class DegradeError(ValueError):
    pass


class ConditionKind(str, enum.Enum):
    BASELINE = "baseline"
    DOSE = "dose"
    THICKNESS = "thickness"


@dataclass(frozen=True)
class Condition:
    id: str
    kind: ConditionKind
    dose_fraction: float | None = None
    thickness_mm: float | None = None

    def __post_init__(self):
        kind = ConditionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ConditionKind.DOSE:
            d = self.dose_fraction
            if d is None or not (0.0 < d <= 1.0):
                raise DegradeError(f"{self.id}: dose fraction must be in (0, 1], got {d}")
        elif kind is ConditionKind.THICKNESS:
            t = self.thickness_mm
            if t is None or not (math.isfinite(t) and t > 0):
                raise DegradeError(f"{self.id}: thickness must be > 0 mm, got {t}")

    @classmethod
    def baseline(cls) -> "Condition":
        return cls("baseline", ConditionKind.BASELINE)

    @classmethod
    def dose(cls, fraction: float, id: str | None = None) -> "Condition":
        return cls(id or f"dose_{round(fraction * 100):d}", ConditionKind.DOSE, dose_fraction=fraction)

    @classmethod
    def thickness(cls, mm: float, id: str | None = None) -> "Condition":
        return cls(id or f"thick_{mm:g}mm", ConditionKind.THICKNESS, thickness_mm=mm)

    @property
    def label(self) -> str:
        if self.kind is ConditionKind.BASELINE:
            return "Baseline"
        if self.kind is ConditionKind.DOSE:
            return f"{self.dose_fraction * 100:g}% Dose"
        return f"{self.thickness_mm:g}mm Thick"

    def to_dict(self) -> dict:
        out = {"id": self.id, "kind": self.kind.value}
        if self.dose_fraction is not None:
            out["dose_fraction"] = self.dose_fraction
        if self.thickness_mm is not None:
            out["thickness_mm"] = self.thickness_mm
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Condition":
        return cls(
            d["id"],
            ConditionKind(d["kind"]),
            dose_fraction=d.get("dose_fraction"),
            thickness_mm=d.get("thickness_mm"),
        )


def condition_suite() -> list[Condition]:
    """The five conditions in reporting order."""
    return [
        Condition.baseline(),
        Condition.dose(0.25, "dose_25"),
        Condition.dose(0.50, "dose_50"),
        Condition.thickness(3.0, "thick_3mm"),
        Condition.thickness(5.0, "thick_5mm"),
    ]


@dataclass(frozen=True)
class NoiseModel:
    """``sigma_base_hu`` is a calibration knob, not a scanner measurement.

    In ``literal`` mode it is the added-noise std at full dose and the added
    std is ``sigma_base / sqrt(d)``.  In ``variance-gap`` mode it is read as the
    native image noise, and only the missing variance is added:
    ``sigma_base * sqrt(1/d - 1)``.
    """

    sigma_base_hu: float = DEFAULT_SIGMA_BASE_HU
    seed: int = DEFAULT_SEED
    mode: str = "literal"

    def __post_init__(self):
        if not (math.isfinite(self.sigma_base_hu) and self.sigma_base_hu >= 0):
            raise DegradeError(f"sigma_base_hu must be finite and >= 0, got {self.sigma_base_hu}")
        if self.mode not in NOISE_MODES:
            raise DegradeError(f"unknown noise mode {self.mode!r}")


def dose_noise_sigma(m: NoiseModel, d: float) -> float:
    if not (0.0 < d <= 1.0):
        raise DegradeError(f"dose fraction must be in (0, 1], got {d}")
    if m.mode == "variance-gap":
        return m.sigma_base_hu * math.sqrt(1.0 / d - 1.0)
    return m.sigma_base_hu / math.sqrt(d)


def add_gaussian_noise(v: Volume, sigma: float, stream_seed: int) -> Volume:
    if sigma < 0:
        raise DegradeError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return v.replace_data(v.data)
    noise = normal_field(stream_seed, v.geometry.dims)
    noise *= sigma
    noise += v.data
    return v.replace_data(noise, source_dtype="float32")


def thickness_window(t_mm: float, spacing_z: float) -> int:
    # round() is half-to-even
    return max(1, round(t_mm / spacing_z))


def thicken_slices(v: Volume, t_mm: float) -> tuple[Volume, float]:
    """Moving average over ``w = round(t / dz)`` slices, replicating edge slices.

    Even windows put the extra slice after the centre.  Returns the smoothed
    volume and the effective thickness ``w * dz``.
    """
    dz = v.geometry.spacing[2]
    if t_mm < dz:
        raise DegradeError(f"target thickness {t_mm} mm is below native spacing {dz} mm")
    w = thickness_window(t_mm, dz)
    effective = w * dz
    if w == 1:
        return v.replace_data(v.data), effective

    before = (w - 1) // 2
    after = w - 1 - before
    nz = v.geometry.dims[2]
    src = v.data
    padded = np.pad(src, ((0, 0), (0, 0), (before, after)), mode="edge")
    # accumulate deviations from the centre slice so constant input is returned exactly
    acc = np.zeros_like(src)
    for j in range(w):
        acc += padded[:, :, j : j + nz] - src
    out = src + acc / w
    return v.replace_data(out, source_dtype="float32"), effective


def stream_seed_for(m: NoiseModel, case_id: str, condition_id: str) -> int:
    return derive_key(m.seed, case_id, condition_id)


def condition_parameters(c: Condition, v: Volume, m: NoiseModel, case_id: str) -> dict:
    """Derived parameters of ``c`` on ``v``, as recorded in run manifests."""
    params = c.to_dict()
    if c.kind is ConditionKind.DOSE:
        params["sigma_hu"] = dose_noise_sigma(m, c.dose_fraction)
        params["noise_mode"] = m.mode
        params["stream_seed"] = stream_seed_for(m, case_id, c.id)
    elif c.kind is ConditionKind.THICKNESS:
        dz = v.geometry.spacing[2]
        w = thickness_window(c.thickness_mm, dz)
        params["window_slices"] = w
        params["effective_thickness_mm"] = w * dz
    return params


def apply_condition(v: Volume, c: Condition, m: NoiseModel, case_id: str) -> Volume:
    if c.kind is ConditionKind.BASELINE:
        return v.replace_data(v.data)
    if c.kind is ConditionKind.DOSE:
        sigma = dose_noise_sigma(m, c.dose_fraction)
        return add_gaussian_noise(v, sigma, stream_seed_for(m, case_id, c.id))
    out, _ = thicken_slices(v, c.thickness_mm)
    return out
