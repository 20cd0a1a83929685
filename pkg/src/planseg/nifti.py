"""Minimal NIfTI-1 reader/writer for .nii and .nii.gz volumes.

Supports exactly what this package produces: single-file NIfTI-1, axis-aligned
diagonal affine (spacing on the diagonal, origin in the translation), no
scaling, little-endian. Gzip members are written with mtime=0 so identical
volumes serialize to identical bytes.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import Volume

_DTYPE_CODES = {
    np.dtype(np.uint8): (2, 8),
    np.dtype(np.int16): (4, 16),
    np.dtype(np.int32): (8, 32),
    np.dtype(np.float32): (16, 32),
    np.dtype(np.float64): (64, 64),
    np.dtype(np.uint16): (512, 16),
}
_CODE_DTYPES = {code: dt for dt, (code, _) in _DTYPE_CODES.items()}

_HEADER_SIZE = 348
_VOX_OFFSET = 352.0  # header + 4-byte extension flag


def _build_header(shape, dtype: np.dtype, spacing, origin) -> bytes:
    code, bitpix = _DTYPE_CODES[dtype]
    hdr = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    dim = [3, shape[0], shape[1], shape[2], 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, _VOX_OFFSET)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    hdr[123] = 2  # xyzt_units: millimetres
    struct.pack_into("<h", hdr, 252, 0)  # qform_code
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner anatomical
    srow_x = [spacing[0], 0.0, 0.0, origin[0]]
    srow_y = [0.0, spacing[1], 0.0, origin[1]]
    srow_z = [0.0, 0.0, spacing[2], origin[2]]
    struct.pack_into("<12f", hdr, 280, *(srow_x + srow_y + srow_z))
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_volume(path, vol: Volume) -> None:
    """Write a Volume as NIfTI-1; gzip-compressed when the suffix is .nii.gz."""
    path = Path(path)
    data = np.ascontiguousarray(vol.data)
    if data.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype for NIfTI output: {data.dtype}")
    payload = (
        _build_header(data.shape, data.dtype, vol.spacing, vol.origin)
        + b"\x00\x00\x00\x00"
        + data.tobytes(order="F")
    )
    if path.name.endswith(".nii.gz"):
        with open(path, "wb") as fh:
            # filename="" and mtime=0 keep the gzip member byte-deterministic
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    elif path.suffix == ".nii":
        path.write_bytes(payload)
    else:
        raise ValueError(f"expected a .nii or .nii.gz path, got {path}")


def read_volume(path) -> Volume:
    """Read a NIfTI-1 file written by this package back into a Volume."""
    path = Path(path)
    if path.name.endswith(".nii.gz"):
        with gzip.open(path, "rb") as gz:
            raw = gz.read()
    else:
        raw = path.read_bytes()
    if len(raw) < _HEADER_SIZE or struct.unpack_from("<i", raw, 0)[0] != _HEADER_SIZE:
        raise ValueError(f"{path}: not a little-endian NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise ValueError(f"{path}: expected a 3D volume, got dim[0]={dim[0]}")
    shape = tuple(dim[1:4])
    code = struct.unpack_from("<h", raw, 70)[0]
    if code not in _CODE_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {code}")
    dtype = _CODE_DTYPES[code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    sform_code = struct.unpack_from("<h", raw, 254)[0]
    if sform_code > 0:
        srow = struct.unpack_from("<12f", raw, 280)
        spacing = (srow[0], srow[5], srow[10])
        origin = (srow[3], srow[7], srow[11])
    else:
        spacing = tuple(pixdim[1:4])
        origin = (
            struct.unpack_from("<f", raw, 268)[0],
            struct.unpack_from("<f", raw, 272)[0],
            struct.unpack_from("<f", raw, 276)[0],
        )
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    count = shape[0] * shape[1] * shape[2]
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").copy()
    return Volume(data, spacing, origin)
