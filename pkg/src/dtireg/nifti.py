"""Minimal single-file NIfTI-1 reader/writer.

Scope is deliberately narrow: 348-byte header + raw little-endian float32
payload, vox_offset 352, no extensions, no compression. Spatial axes are
x-fastest on disk; multi-channel payloads (tensors, vector fields) are
channel-fastest. Volume kind is carried in intent_code:

    1002  label volume
    1005  symmetric tensor, 6 components
    1007  displacement/vector field, 3 components
    other scalar volume

Tensor component order on disk is named in intent_name: ``DT_LT6`` is the
canonical (Dxx, Dxy, Dyy, Dxz, Dyz, Dzz) order; readers also accept
``DT_UR6`` (upper-triangular row order Dxx, Dxy, Dxz, Dyy, Dyz, Dzz) and
reorder it on load.
"""

import struct

import numpy as np

from .errors import FormatError, ValidationError
from .volgrid import GridMeta, LabelVolume, ScalarVolume, TensorVolume

_HDR_SIZE = 348
_VOX_OFFSET = 352
_DT_FLOAT32 = 16

INTENT_LABEL = 1002
INTENT_SYMMATRIX = 1005
INTENT_VECTOR = 1007

_ORDER_CANONICAL = "DT_LT6"
_ORDER_UPPER_ROW = "DT_UR6"
# DT_UR6 channel c holds canonical component _UR6_TO_LT6[c]
_UR6_TO_LT6 = (0, 1, 3, 2, 4, 5)


def _pack_header(meta, n_channels, intent_code, intent_name):
    dim = [3, meta.dims[0], meta.dims[1], meta.dims[2], 1, 1, 1, 1]
    if n_channels > 1:
        dim[0] = 5
        dim[5] = n_channels
    pixdim = [1.0, meta.spacing[0], meta.spacing[1], meta.spacing[2],
              0.0, 0.0, 0.0, 0.0]
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 68, intent_code)
    struct.pack_into("<h", hdr, 70, _DT_FLOAT32)
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    struct.pack_into("<4f", hdr, 280, meta.spacing[0], 0, 0, meta.origin[0])
    struct.pack_into("<4f", hdr, 296, 0, meta.spacing[1], 0, meta.origin[1])
    struct.pack_into("<4f", hdr, 312, 0, 0, meta.spacing[2], meta.origin[2])
    name = intent_name.encode("ascii")[:15]
    hdr[328:328 + len(name)] = name
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _payload_bytes(data):
    """Array (nx, ny, nz[, C]) -> bytes, x-fastest spatially, channel-fastest."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 3:
        return arr.transpose(2, 1, 0).tobytes()
    return arr.transpose(2, 1, 0, 3).tobytes()


def write_volume(vol, path):
    """Write a ScalarVolume, TensorVolume, or LabelVolume to ``path``.

    Round-trips bit-exactly for float32-representable data; the package keeps
    all written payloads in float32.
    """
    if isinstance(vol, TensorVolume):
        hdr = _pack_header(vol.meta, 6, INTENT_SYMMATRIX, _ORDER_CANONICAL)
        payload = _payload_bytes(vol.data)
    elif isinstance(vol, LabelVolume):
        hdr = _pack_header(vol.meta, 1, INTENT_LABEL, "")
        payload = _payload_bytes(vol.data.astype(np.float64))
    elif isinstance(vol, ScalarVolume):
        hdr = _pack_header(vol.meta, 1, 0, "")
        payload = _payload_bytes(vol.data)
    else:
        raise ValidationError(f"cannot write volume of type {type(vol)!r}")
    with open(path, "wb") as f:
        f.write(hdr)
        f.write(b"\x00" * (_VOX_OFFSET - _HDR_SIZE))
        f.write(payload)


def write_field_data(meta, data, path, intent_name="DISP_MM"):
    """Write a channel-last (nx, ny, nz, c) array as a vector-intent file."""
    data = np.asarray(data)
    if data.ndim != 4 or data.shape[:3] != tuple(meta.dims):
        raise ValidationError(
            f"field data must have shape dims + (channels,), got {data.shape}"
        )
    hdr = _pack_header(meta, data.shape[3], INTENT_VECTOR, intent_name)
    with open(path, "wb") as f:
        f.write(hdr)
        f.write(b"\x00" * (_VOX_OFFSET - _HDR_SIZE))
        f.write(_payload_bytes(data))


def _read_raw(path):
    with open(path, "rb") as f:
        hdr = f.read(_HDR_SIZE)
        if len(hdr) < _HDR_SIZE:
            raise FormatError(f"{path}: truncated header")
        sizeof_hdr = struct.unpack_from("<i", hdr, 0)[0]
        if sizeof_hdr != _HDR_SIZE or hdr[344:347] != b"n+1":
            raise FormatError(f"{path}: not a supported NIfTI-1 file")
        datatype = struct.unpack_from("<h", hdr, 70)[0]
        if datatype != _DT_FLOAT32:
            raise FormatError(f"{path}: unsupported datatype {datatype}")
        dim = struct.unpack_from("<8h", hdr, 40)
        pixdim = struct.unpack_from("<8f", hdr, 76)
        intent_code = struct.unpack_from("<h", hdr, 68)[0]
        intent_name = hdr[328:344].split(b"\x00", 1)[0].decode("ascii", "replace")
        vox_offset = int(struct.unpack_from("<f", hdr, 108)[0])
        origin = (
            struct.unpack_from("<f", hdr, 292)[0],
            struct.unpack_from("<f", hdr, 308)[0],
            struct.unpack_from("<f", hdr, 324)[0],
        )
        nx, ny, nz = dim[1], dim[2], dim[3]
        nch = dim[5] if dim[0] >= 5 else 1
        if nx <= 0 or ny <= 0 or nz <= 0 or nch <= 0:
            raise ValidationError(f"{path}: non-positive dimensions {dim[1:6]}")
        spacing = (pixdim[1], pixdim[2], pixdim[3])
        if any(s <= 0 for s in spacing):
            raise ValidationError(f"{path}: non-positive spacing {spacing}")
        f.seek(vox_offset)
        raw = f.read(4 * nx * ny * nz * nch)
        if len(raw) < 4 * nx * ny * nz * nch:
            raise FormatError(f"{path}: truncated payload")
    flat = np.frombuffer(raw, dtype="<f4")
    if nch > 1:
        data = flat.reshape(nz, ny, nx, nch).transpose(2, 1, 0, 3)
    else:
        data = flat.reshape(nz, ny, nx).transpose(2, 1, 0)
    meta = GridMeta((nx, ny, nz), spacing, origin)
    return meta, data.astype(np.float64), intent_code, intent_name


def read_volume(path):
    """Read a volume file; the kind is inferred from the intent code."""
    meta, data, intent_code, intent_name = _read_raw(path)
    nch = data.shape[3] if data.ndim == 4 else 1
    if intent_code == INTENT_SYMMATRIX or nch == 6:
        if nch != 6:
            raise FormatError(f"{path}: tensor file must have 6 channels")
        if intent_name == _ORDER_UPPER_ROW:
            data = data[..., list(_UR6_TO_LT6)]
        elif intent_name not in (_ORDER_CANONICAL, ""):
            raise FormatError(f"{path}: unknown tensor order tag {intent_name!r}")
        return TensorVolume(meta, data)
    if intent_code == INTENT_VECTOR:
        raise FormatError(
            f"{path}: vector field file; use dtireg.xform.read_field"
        )
    if nch != 1:
        raise FormatError(f"{path}: unsupported channel count {nch}")
    if intent_code == INTENT_LABEL:
        return LabelVolume(meta, data)
    return ScalarVolume(meta, data)


def read_field_data(path, channels=None):
    """Read a vector-intent file -> (GridMeta, (nx, ny, nz, c) array).

    When channels is given, any other channel count is a format error.
    """
    meta, data, intent_code, _ = _read_raw(path)
    if intent_code != INTENT_VECTOR or data.ndim != 4:
        raise FormatError(f"{path}: not a vector field file")
    if channels is not None and data.shape[3] != channels:
        raise FormatError(
            f"{path}: expected {channels} channels, got {data.shape[3]}"
        )
    return meta, data
