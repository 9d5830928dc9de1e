"""NIfTI-1 subset reader/writer plus JSON placement sidecars.

Supported subset: single-file ``n+1`` images, 3 spatial dimensions, datatypes
uint8 (2), int16 (4) and float32 (16).  Files are written little-endian with
the 348-byte header and vox_offset 352; big-endian files are detected on read
(dim[0] outside 1..7 under a little-endian parse) and byte-swapped.  Gzip
containers are auto-detected by their 0x1F 0x8B prefix.  The qform/sform
block is carried through as opaque bytes and never interpreted.
"""
from __future__ import annotations

import gzip
import json
import os
import zlib
from typing import IO, Mapping

import numpy as np

from .core import LabelMap, NiftiFormatError, Placement, Volume

__all__ = [
    "read_volume",
    "write_volume",
    "read_labelmap",
    "read_nifti",
    "write_nifti",
    "read_placement",
    "write_placement",
]

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# datatype code -> numpy dtype (byte order applied at parse time)
DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in DTYPE_CODES.items()}

# Raw byte span of the qform/sform block (codes, quaternion, srows).
_ORIENT_SPAN = slice(252, 328)

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

_HDR_LE = np.dtype(_HEADER_FIELDS).newbyteorder("<")
_HDR_BE = np.dtype(_HEADER_FIELDS).newbyteorder(">")
assert _HDR_LE.itemsize == HEADER_SIZE


def _open_for_read(path) -> IO[bytes]:
    f = open(path, "rb")
    magic = f.read(2)
    f.seek(0)
    if magic == GZIP_MAGIC:
        return gzip.GzipFile(fileobj=f, mode="rb")
    return f


def _safe_read(f, n: int, path) -> bytes:
    try:
        return f.read(n)
    except (EOFError, zlib.error, gzip.BadGzipFile) as e:
        raise NiftiFormatError(f"{path}: corrupt or truncated stream: {e}") from e


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float], bytes]:
    """Decode a NIfTI file to (array in native dtype, spacing, orientation bytes).

    Header scaling (scl_slope/scl_inter) is NOT applied here; callers that
    want scaled float data use :func:`read_volume`.
    """
    arr, spacing, orient, _ = _read_raw(path)
    return arr, spacing, orient


def _read_raw(path):
    with _open_for_read(path) as f:
        raw = _safe_read(f, HEADER_SIZE, path)
        if len(raw) != HEADER_SIZE:
            raise NiftiFormatError(
                f"{path}: malformed header, expected {HEADER_SIZE} bytes, got {len(raw)}"
            )
        hdr = np.frombuffer(raw, dtype=_HDR_LE)[0]
        swapped = False
        if not 1 <= hdr["dim"][0] <= 7:
            hdr = np.frombuffer(raw, dtype=_HDR_BE)[0]
            swapped = True
            if not 1 <= hdr["dim"][0] <= 7:
                raise NiftiFormatError(f"{path}: malformed header, dim[0] invalid in both byte orders")
        if hdr["sizeof_hdr"] != HEADER_SIZE:
            raise NiftiFormatError(
                f"{path}: malformed header, sizeof_hdr={int(hdr['sizeof_hdr'])} != {HEADER_SIZE}"
            )
        if raw[344:348] != MAGIC:
            raise NiftiFormatError(f"{path}: malformed header, magic {raw[344:348]!r}")
        code = int(hdr["datatype"])
        if code not in DTYPE_CODES:
            raise NiftiFormatError(f"{path}: unsupported datatype code {code}")
        if hdr["dim"][0] != 3:
            raise NiftiFormatError(f"{path}: expected 3 spatial dims, header declares {int(hdr['dim'][0])}")
        shape = tuple(int(d) for d in hdr["dim"][1:4])
        if any(d < 1 for d in shape):
            raise NiftiFormatError(f"{path}: non-positive dimension in {shape}")
        spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
        if any(not (p > 0 and np.isfinite(p)) for p in spacing):
            raise NiftiFormatError(f"{path}: non-positive voxel spacing {spacing}")

        vox_offset = int(hdr["vox_offset"])
        if vox_offset < HEADER_SIZE:
            raise NiftiFormatError(f"{path}: vox_offset {vox_offset} precedes end of header")
        skip = vox_offset - HEADER_SIZE
        if skip:
            _safe_read(f, skip, path)

        dtype = np.dtype(DTYPE_CODES[code]).newbyteorder(">" if swapped else "<")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        payload = _safe_read(f, nbytes, path)
        if len(payload) != nbytes:
            raise NiftiFormatError(f"{path}: truncated payload, expected {nbytes} bytes, got {len(payload)}")
        # drain to EOF so a gzip container verifies its checksum
        while _safe_read(f, 1 << 16, path):
            pass
        # on-disk order is x-fastest
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
        if swapped:
            arr = arr.astype(arr.dtype.newbyteorder("="))
        orient = raw[_ORIENT_SPAN]
        scl = (float(hdr["scl_slope"]), float(hdr["scl_inter"]))
        return arr, spacing, orient, scl


def read_volume(path) -> Volume:
    """Read a volume, converting the payload to float32.

    scl_slope/scl_inter are honored when the slope is nonzero and not the
    identity; otherwise raw stored values are used.
    """
    arr, spacing, orient, (slope, inter) = _read_raw(path)
    data = arr.astype(np.float32)
    if slope != 0.0 and (slope, inter) != (1.0, 0.0):
        data = data * np.float32(slope) + np.float32(inter)
    return Volume(data=data, spacing=spacing, orientation=orient)


def read_labelmap(path, classes: Mapping[str, int] | None = None) -> LabelMap:
    """Read a label map.  Accepts any supported datatype whose values are
    integers in [0, 255]; scaling headers are ignored for labels."""
    arr, spacing, _orient, _scl = _read_raw(path)
    if arr.dtype != np.uint8:
        as_int = arr.astype(np.int64) if arr.dtype == np.int16 else np.rint(arr).astype(np.int64)
        if arr.dtype == np.float32 and not np.array_equal(as_int, arr):
            raise NiftiFormatError(f"{path}: label file contains non-integer values")
        if arr.size and (as_int.min() < 0 or as_int.max() > 255):
            raise NiftiFormatError(f"{path}: label values out of uint8 range")
        arr = as_int.astype(np.uint8)
    kwargs = {"classes": dict(classes)} if classes is not None else {}
    return LabelMap(data=arr, spacing=spacing, **kwargs)


def write_nifti(path, arr: np.ndarray, spacing, *, compress: bool | None = None,
                orientation: bytes | None = None) -> None:
    """Encode a 3D array (uint8, int16 or float32) as a NIfTI-1 file."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"expected 3D array, got {arr.ndim}D")
    if arr.dtype not in _CODE_FOR_DTYPE:
        raise ValueError(f"unsupported dtype {arr.dtype}; use uint8, int16 or float32")
    if compress is None:
        compress = str(path).endswith(".gz")

    hdr = np.zeros((), dtype=_HDR_LE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"][0] = 3
    hdr["dim"][1:4] = arr.shape
    hdr["dim"][4:] = 1
    hdr["datatype"] = _CODE_FOR_DTYPE[arr.dtype]
    hdr["bitpix"] = arr.dtype.itemsize * 8
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = spacing
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["magic"] = MAGIC
    raw = bytearray(hdr.tobytes())
    if orientation is not None:
        if len(orientation) != _ORIENT_SPAN.stop - _ORIENT_SPAN.start:
            raise ValueError("orientation block has wrong size")
        raw[_ORIENT_SPAN] = orientation

    def _emit(f):
        f.write(bytes(raw))
        f.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        f.write(arr.tobytes(order="F"))

    if compress:
        # filename and mtime pinned to keep output bytes reproducible
        with open(path, "wb") as fh, \
                gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
            _emit(gz)
    else:
        with open(path, "wb") as f:
            _emit(f)


def write_volume(v: Volume | LabelMap, path, compress: bool | None = None) -> None:
    """Write a Volume as float32 or a LabelMap as uint8.

    ``compress=None`` infers gzip from a ``.gz`` suffix.
    """
    orientation = v.orientation if isinstance(v, Volume) else None
    write_nifti(path, v.data, v.spacing, compress=compress, orientation=orientation)


_PLACEMENT_KEYS = ("parent_shape", "offset", "window_shape")


def write_placement(p: Placement, path) -> None:
    doc = {k: list(getattr(p, k)) for k in _PLACEMENT_KEYS}
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def read_placement(path) -> Placement:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    missing = [k for k in _PLACEMENT_KEYS if k not in doc]
    if missing:
        raise ValueError(f"{path}: placement sidecar missing keys {missing}")
    return Placement(
        parent_shape=doc["parent_shape"],
        offset=doc["offset"],
        window_shape=doc["window_shape"],
    )
