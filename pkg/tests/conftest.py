import numpy as np
import pytest

from radassist.imaging import LabelMask, Modality, VoxelVolume
from radassist.radiomics import OrganFeatureSet


def make_volume(dims, spacing=(1.0, 1.0, 1.0), fill=30.0, modality=Modality.CT, data=None):
    if data is None:
        data = np.full(dims, fill, dtype=np.float32)
    return VoxelVolume(dims, spacing, modality, np.asarray(data, dtype=np.float32))


def make_mask(dims, spacing=(1.0, 1.0, 1.0), labels=None, table=None):
    if labels is None:
        labels = np.ones(dims, dtype=np.uint8)
    labels = np.asarray(labels)
    if table is None:
        present = sorted(int(v) for v in np.unique(labels) if v != 0)
        table = {v: f"organ-{v}" for v in present}
    return LabelMask(dims, spacing, labels, table)


def make_feature_set(organ, volume_cm3, **overrides):
    """A synthetic feature set with plausible defaults for prompt tests."""
    fields = dict(
        organ=organ,
        label_id=1,
        voxel_count=max(1, round(volume_cm3 * 1000)),
        volume_cm3=volume_cm3,
        surface_area_mm2=15000.0,
        sphericity=0.75,
        bbox_mm=(60.0, 60.0, 90.0),
        intensity_mean=32.0,
        intensity_std=11.0,
        intensity_min=-10.0,
        intensity_max=80.0,
        intensity_entropy=2.4,
    )
    fields.update(overrides)
    return OrganFeatureSet(**fields)


@pytest.fixture
def kidney_pair():
    left = make_feature_set("kidney_left", 170.0, label_id=1)
    right = make_feature_set("kidney_right", 179.0, label_id=2)
    return left, right


def phantom_study(dims=(12, 12, 5), spacing=(10.0, 10.0, 10.0)):
    """Kidney phantom whose voxel counts give exactly 170 / 179 cm3 (the top
    z-plane stays background so slice endpoints have an empty plane)."""
    labels = np.zeros(dims, dtype=np.uint8)
    left_coords = [
        (x, y, z) for z in range(dims[2] - 1) for y in range(dims[1]) for x in range(dims[0] // 2)
    ]
    right_coords = [
        (x, y, z)
        for z in range(dims[2] - 1)
        for y in range(dims[1])
        for x in range(dims[0] // 2, dims[0])
    ]
    for x, y, z in left_coords[:170]:
        labels[x, y, z] = 1
    for x, y, z in right_coords[:179]:
        labels[x, y, z] = 2
    mask = LabelMask(dims, spacing, labels, {1: "kidney_left", 2: "kidney_right"})
    volume = VoxelVolume(dims, spacing, Modality.CT, np.full(dims, 30.0, dtype=np.float32))
    return volume, mask
