"""Per-organ quantitative features from an aligned volume + mask pair.

Geometry is exact and orientation-free: volume is a voxel count times the
voxel size, surface area counts exposed faces under 6-connectivity. Texture
is represented by first-order intensity entropy over a fixed 25 HU histogram.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import RadAssistError
from .imaging import ImagingError, LabelMask, VoxelVolume, validate_alignment


class RadiomicsError(RadAssistError):
    pass


class LabelAbsent(RadiomicsError):
    pass


class MisalignedInputs(RadiomicsError):
    pass


class ZeroVolume(RadiomicsError):
    pass


# CT histogram: bins of 25 HU anchored at -1024, covering [-1024, 3071];
# out-of-range intensities clamp to the end bins.
HIST_ANCHOR_HU = -1024.0
HIST_BIN_WIDTH_HU = 25.0
HIST_N_BINS = 164


@dataclass(frozen=True)
class OrganFeatureSet:
    """Quantitative evidence for one labeled organ."""

    organ: str
    label_id: int
    voxel_count: int
    volume_cm3: float
    surface_area_mm2: float
    sphericity: float
    bbox_mm: tuple[float, float, float]
    intensity_mean: float
    intensity_std: float
    intensity_min: float
    intensity_max: float
    intensity_entropy: float

    def __post_init__(self):
        object.__setattr__(self, "bbox_mm", tuple(float(v) for v in self.bbox_mm))
        if self.voxel_count < 1:
            raise RadiomicsError("voxel_count must be >= 1")
        if not (self.intensity_min <= self.intensity_mean <= self.intensity_max):
            raise RadiomicsError("intensity stats out of order")
        if self.intensity_std < 0 or self.intensity_entropy < 0:
            raise RadiomicsError("intensity std/entropy must be non-negative")
        if self.surface_area_mm2 <= 0 or any(b <= 0 for b in self.bbox_mm):
            raise RadiomicsError("surface area and bbox extents must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox_mm"] = list(self.bbox_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OrganFeatureSet":
        return cls(
            organ=d["organ"],
            label_id=int(d["label_id"]),
            voxel_count=int(d["voxel_count"]),
            volume_cm3=float(d["volume_cm3"]),
            surface_area_mm2=float(d["surface_area_mm2"]),
            sphericity=float(d["sphericity"]),
            bbox_mm=tuple(float(v) for v in d["bbox_mm"]),
            intensity_mean=float(d["intensity_mean"]),
            intensity_std=float(d["intensity_std"]),
            intensity_min=float(d["intensity_min"]),
            intensity_max=float(d["intensity_max"]),
            intensity_entropy=float(d["intensity_entropy"]),
        )


@dataclass(frozen=True)
class LateralityRatio:
    """Left/right volume comparison for paired organs."""

    left_volume_cm3: float
    right_volume_cm3: float
    ratio: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LateralityRatio":
        return cls(float(d["left_volume_cm3"]), float(d["right_volume_cm3"]), float(d["ratio"]))


def sphericity_from(volume_mm3: float, area_mm2: float) -> float:
    return math.pi ** (1.0 / 3.0) * (6.0 * volume_mm3) ** (2.0 / 3.0) / area_mm2


def _exposed_face_counts(region: np.ndarray) -> tuple[int, int, int]:
    """Count region faces whose 6-neighbor across the face lies outside the
    region (other label, background, or out of bounds)."""
    counts = []
    for ax in range(3):
        n = 0
        for direction in (-1, 1):
            neighbor = np.zeros_like(region)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if direction == 1:
                src[ax], dst[ax] = slice(1, None), slice(None, -1)
            else:
                src[ax], dst[ax] = slice(None, -1), slice(1, None)
            neighbor[tuple(dst)] = region[tuple(src)]
            n += int((region & ~neighbor).sum())
        counts.append(n)
    return counts[0], counts[1], counts[2]


def compute_features(volume: VoxelVolume, mask: LabelMask, label_id: int) -> OrganFeatureSet:
    """Compute the full feature set for one label id."""
    try:
        validate_alignment(volume, mask)
    except ImagingError as exc:
        raise MisalignedInputs(str(exc)) from exc
    label_id = int(label_id)
    region = mask.labels == label_id
    voxel_count = int(region.sum())
    if voxel_count == 0:
        raise LabelAbsent(f"label {label_id} has no voxels in the mask")

    sx, sy, sz = volume.spacing
    volume_cm3 = voxel_count * sx * sy * sz / 1000.0

    cx, cy, cz = _exposed_face_counts(region)
    area_mm2 = cx * (sy * sz) + cy * (sx * sz) + cz * (sx * sy)

    xs, ys, zs = np.nonzero(region)
    bbox = (
        float(int(xs.max()) - int(xs.min()) + 1) * sx,
        float(int(ys.max()) - int(ys.min()) + 1) * sy,
        float(int(zs.max()) - int(zs.min()) + 1) * sz,
    )

    values = volume.data[region].astype(np.float64)
    mean = float(values.mean())
    std = float(values.std())  # population (N divisor): defined for single voxels
    vmin = float(values.min())
    vmax = float(values.max())

    bins = np.floor((values - HIST_ANCHOR_HU) / HIST_BIN_WIDTH_HU).astype(np.int64)
    np.clip(bins, 0, HIST_N_BINS - 1, out=bins)
    probs = np.bincount(bins, minlength=HIST_N_BINS) / voxel_count
    probs = probs[probs > 0]
    entropy = float(-(probs * np.log2(probs)).sum())

    organ = mask.label_table.get(label_id, f"label-{label_id}")
    return OrganFeatureSet(
        organ=organ,
        label_id=label_id,
        voxel_count=voxel_count,
        volume_cm3=volume_cm3,
        surface_area_mm2=area_mm2,
        sphericity=sphericity_from(voxel_count * sx * sy * sz, area_mm2),
        bbox_mm=bbox,
        intensity_mean=mean,
        intensity_std=std,
        intensity_min=vmin,
        intensity_max=vmax,
        intensity_entropy=max(entropy, 0.0),
    )


def paired_ratio(left: OrganFeatureSet, right: OrganFeatureSet) -> LateralityRatio:
    """Left/right volume ratio, unrounded; rounding is a presentation concern."""
    if left.volume_cm3 <= 0 or right.volume_cm3 <= 0:
        raise ZeroVolume(
            f"both volumes must be positive, got {left.volume_cm3} / {right.volume_cm3}"
        )
    return LateralityRatio(left.volume_cm3, right.volume_cm3, left.volume_cm3 / right.volume_cm3)
