"""Volumetric images and segmentation masks.

Two interchange formats are supported:

* a NIfTI-1 subset: single-file, uncompressed, datatypes uint8/int16/float32,
  no orientation handling (all downstream features are orientation-invariant);
* a "raw" format: a sidecar JSON header plus a little-endian binary blob,
  row-major with x fastest.

Scalar data is held as float32 internally, mask labels as uint32. All types
are immutable after construction and safe to share across threads.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .errors import RadAssistError


class ImagingError(RadAssistError):
    pass


class BadMagic(ImagingError):
    pass


class UnsupportedDatatype(ImagingError):
    pass


class UnsupportedDimensionality(ImagingError):
    pass


class TruncatedData(ImagingError):
    pass


class NonPositiveSpacing(ImagingError):
    pass


class MalformedHeader(ImagingError):
    pass


class LengthMismatch(ImagingError):
    pass


class MaskDtypeNotInteger(ImagingError):
    pass


class InvalidMask(ImagingError):
    pass


class DimsMismatch(ImagingError):
    pass


class SpacingMismatch(ImagingError):
    pass


class IndexOutOfRange(ImagingError):
    pass


class Modality(str, Enum):
    CT = "CT"
    XR = "XR"
    OTHER = "OTHER"


class Axis(str, Enum):
    X = "X"
    Y = "Y"
    Z = "Z"


def _check_geometry(dims, spacing) -> tuple[tuple[int, int, int], tuple[float, float, float]]:
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or len(spacing) != 3:
        raise MalformedHeader(f"dims/spacing must have 3 entries, got {dims}/{spacing}")
    if any(d < 1 for d in dims):
        raise MalformedHeader(f"dims must be >= 1, got {dims}")
    if not all(s > 0 for s in spacing):  # also rejects NaN
        raise NonPositiveSpacing(f"spacing must be > 0 per axis, got {spacing}")
    return dims, spacing


@dataclass(frozen=True)
class VoxelVolume:
    """A 3-D scalar image; intensities are Hounsfield units for CT."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    modality: Modality
    data: np.ndarray = field(repr=False)  # float32, shape dims

    def __post_init__(self):
        dims, spacing = _check_geometry(self.dims, self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "modality", Modality(self.modality))
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.size != dims[0] * dims[1] * dims[2]:
            raise LengthMismatch(
                f"data has {arr.size} values, dims {dims} imply {dims[0] * dims[1] * dims[2]}"
            )
        arr = arr.reshape(dims, order="F") if arr.ndim == 1 else arr.reshape(dims)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True)
class LabelMask:
    """Voxel-wise organ label map; 0 is background."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    labels: np.ndarray = field(repr=False)  # uint32, shape dims
    label_table: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        dims, spacing = _check_geometry(self.dims, self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        arr = np.asarray(self.labels)
        if not np.issubdtype(arr.dtype, np.integer):
            raise MaskDtypeNotInteger(f"mask labels must be integer, got {arr.dtype}")
        if arr.size != dims[0] * dims[1] * dims[2]:
            raise LengthMismatch(
                f"labels has {arr.size} values, dims {dims} imply {dims[0] * dims[1] * dims[2]}"
            )
        if arr.size and int(arr.min()) < 0:
            raise InvalidMask("mask labels must be non-negative")
        table = {int(k): str(v) for k, v in dict(self.label_table).items()}
        if any(k < 1 for k in table):
            raise InvalidMask("label table ids must be >= 1 (0 is background)")
        arr = arr.astype(np.uint32)
        arr = arr.reshape(dims, order="F") if arr.ndim == 1 else arr.reshape(dims)
        present = {int(v) for v in np.unique(arr)} - {0}
        missing = present - set(table)
        if missing:
            raise InvalidMask(f"labels {sorted(missing)} present in mask but absent from label table")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "label_table", table)

    def organ_for(self, label_id: int) -> str:
        return self.label_table[int(label_id)]


@dataclass(frozen=True)
class SliceRaster:
    """One 2-D plane of a label mask, for display overlays."""

    axis: Axis
    index: int
    width: int
    height: int
    labels: np.ndarray = field(repr=False)  # uint32, flat, row-major (width fastest)

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.uint32).reshape(-1)
        if arr.size != self.width * self.height:
            raise LengthMismatch(f"{arr.size} labels for {self.width}x{self.height} raster")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)


# --- NIfTI-1 subset ---------------------------------------------------------

_NIFTI_HDR_SIZE = 348
_NIFTI_MIN_FILE = 352  # header + 4 extension bytes
_NIFTI_MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes for the supported subset
_DT_UINT8, _DT_INT16, _DT_FLOAT32 = 2, 4, 16
_DTYPE_BY_CODE = {
    _DT_UINT8: np.dtype(np.uint8),
    _DT_INT16: np.dtype(np.int16),
    _DT_FLOAT32: np.dtype(np.float32),
}
_CODE_BY_NAME = {"u8": _DT_UINT8, "i16": _DT_INT16, "f32": _DT_FLOAT32}
_RAW_DTYPES = {"u8": np.dtype(np.uint8), "i16": np.dtype(np.int16), "f32": np.dtype(np.float32)}


def looks_like_nifti(data: bytes) -> bool:
    """Cheap format sniff: correct magic at offset 344 in either byte order."""
    if len(data) < _NIFTI_HDR_SIZE:
        return False
    return data[344:348] == _NIFTI_MAGIC


def parse_nifti(
    data: bytes,
    as_mask: bool = False,
    label_table: Mapping[int, str] | None = None,
    modality: Modality | str = Modality.CT,
) -> VoxelVolume | LabelMask:
    """Parse a single-file uncompressed NIfTI-1 byte string.

    With ``as_mask=True`` the file must be integer-typed and becomes a
    :class:`LabelMask` using the supplied ``label_table``.
    """
    if len(data) < _NIFTI_MIN_FILE:
        raise TruncatedData(f"file is {len(data)} bytes, NIfTI-1 needs at least {_NIFTI_MIN_FILE}")
    for order in ("<", ">"):
        (sizeof_hdr,) = struct.unpack_from(order + "i", data, 0)
        if sizeof_hdr == _NIFTI_HDR_SIZE:
            break
    else:
        raise BadMagic("sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")
    if data[344:348] != _NIFTI_MAGIC:
        raise BadMagic(f"magic is {data[344:348]!r}, expected {_NIFTI_MAGIC!r}")

    dim = struct.unpack_from(order + "8h", data, 40)
    (datatype,) = struct.unpack_from(order + "h", data, 70)
    pixdim = struct.unpack_from(order + "8f", data, 76)
    (vox_offset,) = struct.unpack_from(order + "f", data, 108)
    scl_slope, scl_inter = struct.unpack_from(order + "2f", data, 112)

    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise UnsupportedDimensionality(f"dim[0]={ndim} outside 1..7")
    shape = [max(1, dim[i]) for i in range(1, 4)]
    if any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise UnsupportedDimensionality("multi-frame (4-D+) series are not supported")

    if datatype not in _DTYPE_BY_CODE:
        raise UnsupportedDatatype(f"datatype code {datatype} not in supported subset (2, 4, 16)")
    dtype = _DTYPE_BY_CODE[datatype].newbyteorder(order)

    spacing = []
    for i in range(1, 4):
        s = abs(pixdim[i])
        if not s > 0:
            raise NonPositiveSpacing(f"pixdim[{i}] = {pixdim[i]}")
        spacing.append(s)

    offset = int(vox_offset) if vox_offset >= _NIFTI_MIN_FILE else _NIFTI_MIN_FILE
    nvox = shape[0] * shape[1] * shape[2]
    need = nvox * dtype.itemsize
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise TruncatedData(f"payload has {len(payload)} bytes, dims {tuple(shape)} need {need}")
    flat = np.frombuffer(payload, dtype=dtype)

    if as_mask:
        if datatype == _DT_FLOAT32:
            raise MaskDtypeNotInteger("mask files must be uint8 or int16")
        return LabelMask(tuple(shape), tuple(spacing), flat, label_table or {})
    values = flat.astype(np.float32)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        values = values * np.float32(scl_slope) + np.float32(scl_inter)
    return VoxelVolume(tuple(shape), tuple(spacing), Modality(modality), values)


def write_nifti(obj: VoxelVolume | LabelMask, dtype: str = "f32") -> bytes:
    """Serialize to the supported NIfTI-1 subset (little-endian, data at 352)."""
    if dtype not in _CODE_BY_NAME:
        raise UnsupportedDatatype(f"dtype must be one of {sorted(_CODE_BY_NAME)}")
    if isinstance(obj, LabelMask):
        if dtype == "f32":
            raise MaskDtypeNotInteger("masks serialize as u8 or i16")
        flat = obj.labels.reshape(-1, order="F")
    else:
        flat = obj.data.reshape(-1, order="F")
    np_dtype = _RAW_DTYPES[dtype].newbyteorder("<")
    payload = np.ascontiguousarray(flat.astype(np_dtype, casting="unsafe")).tobytes()

    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *obj.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODE_BY_NAME[dtype])
    struct.pack_into("<h", hdr, 72, np_dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *obj.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_NIFTI_MIN_FILE))  # vox_offset
    struct.pack_into("<2f", hdr, 112, 0.0, 0.0)  # scl_slope 0 = no scaling
    hdr[344:348] = _NIFTI_MAGIC
    return bytes(hdr) + b"\x00\x00\x00\x00" + payload


# --- raw sidecar format ------------------------------------------------------


def parse_raw(header_json: bytes, data: bytes) -> VoxelVolume | LabelMask:
    """Parse the sidecar-JSON raw format (little-endian, row-major, x fastest)."""
    try:
        header = json.loads(header_json)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")
    for key in ("dims", "spacing", "dtype", "kind"):
        if key not in header:
            raise MalformedHeader(f"header missing required key {key!r}")
    dtype_name = header["dtype"]
    if dtype_name not in _RAW_DTYPES:
        raise MalformedHeader(f"dtype must be one of {sorted(_RAW_DTYPES)}, got {dtype_name!r}")
    kind = header["kind"]
    if kind not in ("image", "mask"):
        raise MalformedHeader(f"kind must be 'image' or 'mask', got {kind!r}")
    dims, spacing = _check_geometry(header["dims"], header["spacing"])

    np_dtype = _RAW_DTYPES[dtype_name].newbyteorder("<")
    nvox = dims[0] * dims[1] * dims[2]
    if len(data) != nvox * np_dtype.itemsize:
        raise LengthMismatch(
            f"blob has {len(data)} bytes, dims {dims} with dtype {dtype_name} need {nvox * np_dtype.itemsize}"
        )
    flat = np.frombuffer(data, dtype=np_dtype)

    if kind == "mask":
        if dtype_name == "f32":
            raise MaskDtypeNotInteger("kind 'mask' requires integer dtype")
        labels = header.get("labels")
        if not isinstance(labels, dict):
            raise MalformedHeader("kind 'mask' requires a labels map")
        try:
            table = {int(k): str(v) for k, v in labels.items()}
        except (TypeError, ValueError) as exc:
            raise MalformedHeader(f"labels map keys must be integers: {exc}") from exc
        return LabelMask(dims, spacing, flat, table)
    modality = Modality(header.get("modality", "OTHER"))
    return VoxelVolume(dims, spacing, modality, flat.astype(np.float32))


def serialize_raw(obj: VoxelVolume | LabelMask, dtype: str = "f32") -> tuple[bytes, bytes]:
    """Inverse of :func:`parse_raw`; returns (header JSON bytes, blob bytes)."""
    if dtype not in _RAW_DTYPES:
        raise MalformedHeader(f"dtype must be one of {sorted(_RAW_DTYPES)}")
    header: dict = {"dims": list(obj.dims), "spacing": list(obj.spacing), "dtype": dtype}
    if isinstance(obj, LabelMask):
        if dtype == "f32":
            raise MaskDtypeNotInteger("masks serialize as u8 or i16")
        header["kind"] = "mask"
        header["labels"] = {str(k): v for k, v in sorted(obj.label_table.items())}
        flat = obj.labels.reshape(-1, order="F")
    else:
        header["kind"] = "image"
        header["modality"] = obj.modality.value
        flat = obj.data.reshape(-1, order="F")
    np_dtype = _RAW_DTYPES[dtype].newbyteorder("<")
    blob = np.ascontiguousarray(flat.astype(np_dtype, casting="unsafe")).tobytes()
    return json.dumps(header, sort_keys=True).encode(), blob


# --- alignment and slicing ---------------------------------------------------

_SPACING_RTOL = 1e-6


def validate_alignment(volume: VoxelVolume, mask: LabelMask) -> None:
    """Require equal dims and per-axis spacing within relative tolerance 1e-6."""
    if volume.dims != mask.dims:
        raise DimsMismatch(f"volume dims {volume.dims} != mask dims {mask.dims}")
    for axis, (a, b) in enumerate(zip(volume.spacing, mask.spacing)):
        if abs(a - b) > _SPACING_RTOL * max(abs(a), abs(b)):
            raise SpacingMismatch(f"axis {axis}: volume spacing {a} != mask spacing {b}")


def extract_slice(mask: LabelMask, axis: Axis | str, index: int) -> SliceRaster:
    """Extract one label plane; width/height follow the two remaining axes in
    (lower axis, higher axis) order, width varying fastest."""
    axis = axis if isinstance(axis, Axis) else Axis(axis.upper())
    ax = {"X": 0, "Y": 1, "Z": 2}[axis.value]
    extent = mask.dims[ax]
    if not 0 <= index < extent:
        raise IndexOutOfRange(f"index {index} outside [0, {extent}) along axis {axis.value}")
    plane = np.take(mask.labels, index, axis=ax)  # shape: remaining axes, low->high
    width, height = plane.shape
    return SliceRaster(axis, index, width, height, plane.reshape(-1, order="F"))
