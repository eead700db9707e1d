import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radassist.imaging import (
    Axis,
    BadMagic,
    DimsMismatch,
    IndexOutOfRange,
    InvalidMask,
    LabelMask,
    LengthMismatch,
    MalformedHeader,
    MaskDtypeNotInteger,
    Modality,
    NonPositiveSpacing,
    SpacingMismatch,
    TruncatedData,
    UnsupportedDatatype,
    VoxelVolume,
    extract_slice,
    looks_like_nifti,
    parse_nifti,
    parse_raw,
    serialize_raw,
    validate_alignment,
    write_nifti,
)
from tests.conftest import make_mask, make_volume

DT_UINT8, DT_INT16, DT_FLOAT32 = 2, 4, 16


def build_nifti(
    dims=(2, 2, 2),
    pixdim=(1.0, 1.0, 1.0),
    datatype=DT_FLOAT32,
    payload=None,
    magic=b"n+1\x00",
    ndim=3,
    vox_offset=352.0,
    scl=(0.0, 0.0),
):
    """Hand-assembled NIfTI-1 bytes; field offsets per the public standard."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    dim8 = [ndim, *dims] + [1] * (7 - len(dims))
    struct.pack_into("<8h", hdr, 40, *dim8)
    struct.pack_into("<h", hdr, 70, datatype)
    pix8 = [1.0, *pixdim] + [0.0] * (7 - len(pixdim))
    struct.pack_into("<8f", hdr, 76, *pix8)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<2f", hdr, 112, *scl)
    hdr[344:348] = magic
    if payload is None:
        n = dims[0] * dims[1] * dims[2]
        itemsize = {DT_UINT8: 1, DT_INT16: 2, DT_FLOAT32: 4}[datatype]
        payload = bytes(n * itemsize)
    return bytes(hdr) + b"\x00\x00\x00\x00" + payload


class TestParseNifti:
    def test_minimal_float32_volume(self):
        data = build_nifti(dims=(2, 2, 2), payload=struct.pack("<8f", *([0.0] * 8)))
        vol = parse_nifti(data)
        assert isinstance(vol, VoxelVolume)
        assert vol.dims == (2, 2, 2)
        assert vol.spacing == (1.0, 1.0, 1.0)
        assert not vol.data.any()

    def test_bad_magic(self):
        with pytest.raises(BadMagic):
            parse_nifti(build_nifti(magic=b"nix0"))

    def test_truncated_payload(self):
        data = build_nifti(dims=(4, 4, 4), datatype=DT_UINT8, payload=bytes(63))
        with pytest.raises(TruncatedData):
            parse_nifti(data)  # 64 voxels required

    def test_too_short_file(self):
        with pytest.raises(TruncatedData):
            parse_nifti(b"n+1\x00")

    def test_unsupported_datatype(self):
        with pytest.raises(UnsupportedDatatype):
            parse_nifti(build_nifti(datatype=64, payload=bytes(64)))  # float64

    def test_zero_spacing(self):
        with pytest.raises(NonPositiveSpacing):
            parse_nifti(build_nifti(pixdim=(1.0, 0.0, 1.0)))

    def test_negative_pixdim_takes_absolute_value(self):
        vol = parse_nifti(build_nifti(pixdim=(-1.5, 1.0, 1.0)))
        assert vol.spacing == (1.5, 1.0, 1.0)

    def test_scl_slope_and_inter_applied(self):
        payload = struct.pack("<8f", *range(8))
        vol = parse_nifti(build_nifti(payload=payload, scl=(2.0, 10.0)))
        flat = vol.data.reshape(-1, order="F")
        assert flat[3] == pytest.approx(16.0)

    def test_integer_file_as_mask(self):
        payload = bytes([1] * 8)
        mask = parse_nifti(
            build_nifti(datatype=DT_UINT8, payload=payload),
            as_mask=True,
            label_table={1: "kidney_left"},
        )
        assert isinstance(mask, LabelMask)
        assert mask.organ_for(1) == "kidney_left"

    def test_float_file_as_mask_rejected(self):
        with pytest.raises(MaskDtypeNotInteger):
            parse_nifti(build_nifti(), as_mask=True, label_table={})

    def test_mask_label_missing_from_table(self):
        with pytest.raises(InvalidMask):
            parse_nifti(build_nifti(datatype=DT_UINT8, payload=bytes([3] * 8)), as_mask=True)

    def test_garbage_not_nifti(self):
        assert not looks_like_nifti(b"\x00" * 400)
        with pytest.raises(BadMagic):
            parse_nifti(b"\x00" * 400)


class TestParseRaw:
    def test_single_voxel_mask(self):
        header = json.dumps(
            {
                "dims": [1, 1, 1],
                "spacing": [2, 2, 2],
                "dtype": "u8",
                "kind": "mask",
                "labels": {"1": "kidney_left"},
            }
        ).encode()
        mask = parse_raw(header, bytes([1]))
        assert isinstance(mask, LabelMask)
        assert mask.labels[0, 0, 0] == 1
        assert mask.organ_for(1) == "kidney_left"

    def test_length_mismatch(self):
        header = json.dumps(
            {"dims": [2, 2, 2], "spacing": [1, 1, 1], "dtype": "f32", "kind": "image"}
        ).encode()
        with pytest.raises(LengthMismatch):
            parse_raw(header, struct.pack("<7f", *([0.0] * 7)))

    def test_mask_requires_integer_dtype(self):
        header = json.dumps(
            {
                "dims": [1, 1, 1],
                "spacing": [1, 1, 1],
                "dtype": "f32",
                "kind": "mask",
                "labels": {"1": "x"},
            }
        ).encode()
        with pytest.raises(MaskDtypeNotInteger):
            parse_raw(header, struct.pack("<f", 1.0))

    def test_mask_requires_labels_map(self):
        header = json.dumps(
            {"dims": [1, 1, 1], "spacing": [1, 1, 1], "dtype": "u8", "kind": "mask"}
        ).encode()
        with pytest.raises(MalformedHeader):
            parse_raw(header, bytes([1]))

    @pytest.mark.parametrize(
        "header",
        [
            b"not json",
            b"[1, 2]",
            json.dumps({"dims": [1, 1, 1], "spacing": [1, 1, 1], "dtype": "f64", "kind": "image"}).encode(),
            json.dumps({"dims": [1, 1, 1], "dtype": "u8", "kind": "image"}).encode(),
            json.dumps({"dims": [1, 1, 1], "spacing": [1, 1, 1], "dtype": "u8", "kind": "thing"}).encode(),
        ],
    )
    def test_malformed_headers(self, header):
        with pytest.raises(MalformedHeader):
            parse_raw(header, bytes([0]))


class TestAlignment:
    def test_identical_ok(self):
        validate_alignment(make_volume((2, 2, 2)), make_mask((2, 2, 2)))

    def test_dims_mismatch(self):
        with pytest.raises(DimsMismatch):
            validate_alignment(make_volume((2, 2, 2)), make_mask((2, 2, 3)))

    def test_spacing_mismatch(self):
        with pytest.raises(SpacingMismatch):
            validate_alignment(
                make_volume((2, 2, 2), spacing=(1, 1, 1)),
                make_mask((2, 2, 2), spacing=(1, 1, 1.5)),
            )

    def test_spacing_within_tolerance(self):
        validate_alignment(
            make_volume((2, 2, 2), spacing=(1, 1, 1)),
            make_mask((2, 2, 2), spacing=(1, 1, 1 + 1e-9)),
        )


class TestExtractSlice:
    def test_single_voxel(self):
        raster = extract_slice(make_mask((1, 1, 1)), Axis.Z, 0)
        assert (raster.width, raster.height) == (1, 1)
        assert raster.labels.tolist() == [1]

    def test_labels_equal_z_coordinate(self):
        labels = np.zeros((2, 2, 2), dtype=np.uint8)
        labels[:, :, 1] = 1
        mask = make_mask((2, 2, 2), labels=labels, table={1: "organ-1"})
        raster = extract_slice(mask, Axis.Z, 1)
        assert (raster.width, raster.height) == (2, 2)
        assert raster.labels.tolist() == [1, 1, 1, 1]
        assert extract_slice(mask, Axis.Z, 0).labels.tolist() == [0, 0, 0, 0]

    def test_index_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            extract_slice(make_mask((2, 2, 2)), Axis.Z, 5)

    def test_axis_orientation(self):
        labels = np.arange(2 * 3 * 4, dtype=np.uint8).reshape((2, 3, 4))
        mask = make_mask((2, 3, 4), labels=labels)
        rx = extract_slice(mask, Axis.X, 1)
        assert (rx.width, rx.height) == (3, 4)  # (y, z)
        ry = extract_slice(mask, Axis.Y, 2)
        assert (ry.width, ry.height) == (2, 4)  # (x, z)
        rz = extract_slice(mask, Axis.Z, 3)
        assert (rz.width, rz.height) == (2, 3)  # (x, y)
        assert rx.labels.reshape((3, 4), order="F").tolist() == labels[1, :, :].tolist()


_dims = st.tuples(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16))
_spacing = st.tuples(
    st.floats(0.1, 10, allow_nan=False),
    st.floats(0.1, 10, allow_nan=False),
    st.floats(0.1, 10, allow_nan=False),
)
# spacings exactly representable in float32, for cross-format identity
_spacing32 = st.tuples(
    st.sampled_from([0.25, 0.5, 1.0, 1.5, 2.0, 3.0]),
    st.sampled_from([0.25, 0.5, 1.0, 1.5, 2.0, 3.0]),
    st.sampled_from([0.25, 0.5, 1.0, 1.5, 2.0, 3.0]),
)


@settings(max_examples=40, deadline=None)
@given(dims=_dims, spacing=_spacing, dtype=st.sampled_from(["u8", "i16", "f32"]), seed=st.integers(0, 2**31))
def test_raw_round_trip_bit_exact(dims, spacing, dtype, seed):
    rng = np.random.RandomState(seed)
    n = dims[0] * dims[1] * dims[2]
    if dtype == "u8":
        data = rng.randint(0, 256, size=n).astype(np.uint8)
    elif dtype == "i16":
        data = rng.randint(-32768, 32768, size=n).astype(np.int16)
    else:
        data = rng.randn(n).astype(np.float32)
    vol = VoxelVolume(dims, spacing, Modality.CT, data.astype(np.float32))
    header, blob = serialize_raw(vol, dtype)
    back = parse_raw(header, blob)
    assert back.dims == vol.dims
    assert back.spacing == vol.spacing
    assert np.array_equal(back.data, vol.data)


@settings(max_examples=25, deadline=None)
@given(dims=_dims, spacing=_spacing32, seed=st.integers(0, 2**31))
def test_nifti_raw_equivalence(dims, spacing, seed):
    rng = np.random.RandomState(seed)
    n = dims[0] * dims[1] * dims[2]
    data = rng.randn(n).astype(np.float32)
    vol = VoxelVolume(dims, spacing, Modality.CT, data)
    from_nifti = parse_nifti(write_nifti(vol, "f32"))
    from_raw = parse_raw(*serialize_raw(vol, "f32"))
    assert from_nifti.dims == from_raw.dims == vol.dims
    assert from_nifti.spacing == from_raw.spacing == vol.spacing
    assert np.array_equal(from_nifti.data, from_raw.data)
    assert np.array_equal(from_nifti.data, vol.data)


def test_mask_round_trip_both_formats():
    rng = np.random.RandomState(7)
    labels = rng.randint(0, 4, size=(5, 4, 3)).astype(np.int16)
    table = {1: "kidney_left", 2: "kidney_right", 3: "liver"}
    mask = LabelMask((5, 4, 3), (1.0, 1.5, 2.0), labels, table)
    from_raw = parse_raw(*serialize_raw(mask, "i16"))
    from_nifti = parse_nifti(write_nifti(mask, "i16"), as_mask=True, label_table=table)
    for back in (from_raw, from_nifti):
        assert isinstance(back, LabelMask)
        assert np.array_equal(back.labels, mask.labels)
        assert back.label_table == table


@settings(max_examples=30, deadline=None)
@given(
    dims=st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8)),
    axis=st.sampled_from([Axis.X, Axis.Y, Axis.Z]),
    seed=st.integers(0, 2**31),
)
def test_slice_restack_reproduces_mask(dims, axis, seed):
    rng = np.random.RandomState(seed)
    labels = rng.randint(0, 3, size=dims).astype(np.uint8)
    mask = make_mask(dims, labels=labels, table={1: "a", 2: "b"})
    ax = {"X": 0, "Y": 1, "Z": 2}[axis.value]
    planes = []
    for i in range(dims[ax]):
        r = extract_slice(mask, axis, i)
        planes.append(r.labels.reshape((r.width, r.height), order="F"))
    restacked = np.stack(planes, axis=ax)
    assert np.array_equal(restacked, mask.labels)
