"""Minimal single-file NIfTI-1 reader and writer.

Scalar volumes are stored as 3D images. Displacement fields are stored as
4D images with ``dim[4] = 3`` (one frame per component, in voxel units).
Files are written little-endian and may be read in either byte order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Volume
from .warp import DisplacementField

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
INTENT_DISPVECT = 1006
XYZT_MM = 2

# NIfTI code -> (numpy type, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    16: ("f4", 32),
    64: ("f8", 64),
}
DATATYPE_NAMES = {"uint8": 2, "int16": 4, "float32": 16, "float64": 64}

HEADER_FIELDS = [
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


def header_dtype(byteorder="<") -> np.dtype:
    fields = [(f[0], byteorder + f[1] if f[1][0] in "iuf" else f[1]) + f[2:] for f in HEADER_FIELDS]
    return np.dtype(fields)


assert header_dtype().itemsize == HEADER_SIZE


class NiftiError(ValueError):
    pass


class NotNiftiError(NiftiError):
    """sizeof_hdr is not 348 in either byte order."""


class BadMagicError(NiftiError):
    pass


class UnsupportedFormError(NiftiError):
    """Two-file (.hdr/.img) NIfTI-1 pair."""


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class NiftiOverflowError(NiftiError):
    pass


@dataclass
class NiftiHeader:
    """The raw 348-byte header as a numpy record plus its byte order."""

    record: np.ndarray
    byteorder: str = "<"

    def __getitem__(self, name):
        return self.record[name][()] if self.record[name].ndim == 0 else self.record[name].copy()

    def to_bytes(self) -> bytes:
        return self.record.tobytes()

    @property
    def shape(self) -> tuple:
        dim = self.record["dim"]
        return tuple(int(n) for n in dim[1:1 + int(dim[0])])

    @property
    def spacing(self) -> tuple:
        return tuple(float(s) for s in self.record["pixdim"][1:4])

    @property
    def affine(self) -> np.ndarray:
        if int(self.record["sform_code"]) > 0:
            rows = [self.record[k].astype(np.float64) for k in ("srow_x", "srow_y", "srow_z")]
            return np.vstack(rows + [np.array([0.0, 0.0, 0.0, 1.0])])
        return np.diag(list(self.spacing) + [1.0])


def _datatype_code(datatype) -> int:
    if isinstance(datatype, str):
        if datatype not in DATATYPE_NAMES:
            raise UnsupportedDatatypeError(f"unsupported datatype {datatype!r}")
        return DATATYPE_NAMES[datatype]
    code = int(datatype)
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {code}")
    return code


def _to_storage(values: np.ndarray, code: int, byteorder: str) -> np.ndarray:
    kind, _ = DATATYPES[code]
    dtype = np.dtype(byteorder + kind)
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        rounded = np.rint(values)
        lo, hi = float(rounded.min()), float(rounded.max())
        if lo < info.min or hi > info.max:
            raise NiftiOverflowError(f"values in [{lo}, {hi}] do not fit {dtype.name} "
                                     f"[{info.min}, {info.max}]")
        return rounded.astype(dtype)
    if dtype.itemsize == 4:
        big = float(np.abs(values).max()) if values.size else 0.0
        if big > np.finfo(np.float32).max:
            raise NiftiOverflowError(f"magnitude {big} overflows float32")
    return values.astype(dtype)


def _encode(obj, datatype="float32", byteorder="<", description=b"") -> bytes:
    """Serialize a Volume or DisplacementField as a single-file NIfTI-1 image."""
    code = _datatype_code(datatype)
    if isinstance(obj, Volume):
        arr = obj.data
        shape = obj.dims
        affine = obj.affine
        intent = 0
    elif isinstance(obj, DisplacementField):
        arr = np.moveaxis(obj.data, 0, -1)
        shape = obj.dims + (3,)
        affine = None
        intent = INTENT_DISPVECT
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as NIfTI")
    spacing = obj.spacing
    if affine is None:
        affine = np.diag(list(spacing) + [1.0])

    hdr = np.zeros((), dtype=header_dtype(byteorder))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"][0] = len(shape)
    hdr["dim"][1:1 + len(shape)] = shape
    hdr["dim"][1 + len(shape):] = 1
    hdr["intent_code"] = intent
    hdr["datatype"] = code
    hdr["bitpix"] = DATATYPES[code][1]
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = spacing
    hdr["pixdim"][4:] = 1.0
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = XYZT_MM
    hdr["descrip"] = description[:80]
    hdr["sform_code"] = 1
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = affine[0], affine[1], affine[2]
    hdr["magic"] = MAGIC_SINGLE

    data = _to_storage(np.asarray(arr, dtype=np.float64), code, byteorder)
    payload = np.asfortranarray(data).tobytes(order="F")
    return hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def write_nifti(obj, path, datatype="float32"):
    """Write a Volume (3D) or DisplacementField (4D, ``dim[4] = 3``) little-endian."""
    blob = _encode(obj, datatype, "<")
    with open(path, "wb") as fh:
        fh.write(blob)


def parse_header(blob: bytes) -> NiftiHeader:
    if len(blob) < HEADER_SIZE:
        raise NotNiftiError(f"file is {len(blob)} bytes, shorter than a NIfTI-1 header")
    for order in "<>":
        if int(np.frombuffer(blob, dtype=order + "i4", count=1)[0]) == HEADER_SIZE:
            break
    else:
        raise NotNiftiError("sizeof_hdr is not 348 in either byte order")
    rec = np.frombuffer(blob, dtype=header_dtype(order), count=1)[0]
    hdr = NiftiHeader(np.array(rec, dtype=header_dtype(order)), order)
    magic = bytes(rec["magic"]).ljust(4, b"\x00")
    if magic == MAGIC_PAIR:
        raise UnsupportedFormError("two-file NIfTI ('ni1') is not supported; convert to .nii")
    if magic != MAGIC_SINGLE:
        raise BadMagicError(f"bad NIfTI magic {magic!r}")
    code = int(rec["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {code}")
    if int(rec["bitpix"]) != DATATYPES[code][1]:
        raise NiftiError(f"bitpix {int(rec['bitpix'])} inconsistent with datatype {code}")
    ndim = int(rec["dim"][0])
    if ndim not in (3, 4):
        raise NiftiError(f"only 3D and 4D images are supported, dim[0] = {ndim}")
    if ndim == 4 and int(rec["dim"][4]) != 3:
        raise NiftiError(f"4D images must hold 3 field components, dim[4] = {int(rec['dim'][4])}")
    if min(hdr.shape) < 1:
        raise NiftiError(f"non-positive dimension in {hdr.shape}")
    if float(rec["vox_offset"]) < VOX_OFFSET:
        raise NiftiError(f"vox_offset {float(rec['vox_offset'])} < {VOX_OFFSET}")
    return hdr


def read_nifti(path):
    """Return ``(Volume or DisplacementField, NiftiHeader)``; values as float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    hdr = parse_header(blob)
    kind, bitpix = DATATYPES[int(hdr["datatype"])]
    shape = hdr.shape
    count = int(np.prod(shape))
    offset = int(hdr["vox_offset"])
    need = offset + count * bitpix // 8
    if len(blob) < need:
        raise TruncatedDataError(f"data section truncated: file has {len(blob)} bytes, "
                                 f"header requires {need}")
    raw = np.frombuffer(blob, dtype=hdr.byteorder + kind, count=count, offset=offset)
    data = raw.reshape(shape, order="F").astype(np.float64)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = data * slope + inter
    spacing = hdr.spacing
    if len(shape) == 4:
        return DisplacementField(np.ascontiguousarray(np.moveaxis(data, -1, 0)), spacing), hdr
    return Volume(data, spacing, hdr.affine), hdr
