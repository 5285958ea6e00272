"""Minimal NIfTI-1 reader/writer and FSL gradient-table parsing.

Handles single-file little-endian .nii only. Reads float32, int16 and uint8
payloads (scl_slope/scl_inter applied, slope 0 meaning "no scaling"); writes
float32 with an identity qform. Anything else is rejected loudly rather than
guessed at.
"""

import os
import struct

import numpy as np

from .core import DwiVolume, GradientTable, Grid3, Volume3, from_stack
from .errors import CorruptError, FormatError, IoError, UnsupportedError

HDR_SIZE = 348
VOX_OFFSET = 352.0

_DTYPES = {16: np.dtype("<f4"), 4: np.dtype("<i2"), 2: np.dtype("<u1")}
_BITPIX = {16: 32, 4: 16, 2: 8}


def _read_bytes(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e


def read_nifti(path):
    """Load a .nii file. Returns Volume3 for 3D data, DwiVolume (gradients
    unset) for 4D data."""
    raw = _read_bytes(path)
    if len(raw) < HDR_SIZE + 4:
        raise CorruptError(f"{path}: shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HDR_SIZE:
        (swapped,) = struct.unpack_from(">i", raw, 0)
        if swapped == HDR_SIZE:
            raise UnsupportedError(f"{path}: big-endian NIfTI is not supported")
        raise FormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: bad magic {magic!r}, expected single-file n+1")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise UnsupportedError(f"{path}: {ndim}-dimensional image, only 3D/4D handled")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if any(d < 1 for d in shape):
        raise CorruptError(f"{path}: non-positive dimension in {shape}")

    (datatype, bitpix) = struct.unpack_from("<2h", raw, 70)
    if datatype not in _DTYPES:
        raise UnsupportedError(f"{path}: datatype code {datatype} not handled")
    if bitpix != _BITPIX[datatype]:
        raise CorruptError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(not (s > 0) for s in spacing):
        raise CorruptError(f"{path}: non-positive pixdim {spacing}")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    (scl_slope, scl_inter) = struct.unpack_from("<2f", raw, 112)
    qoffset = struct.unpack_from("<3f", raw, 268)
    origin = tuple(float(q) for q in qoffset)

    off = int(vox_offset)
    n = int(np.prod(shape))
    itemsize = _DTYPES[datatype].itemsize
    if len(raw) < off + n * itemsize:
        raise CorruptError(f"{path}: payload truncated")
    a = np.frombuffer(raw, dtype=_DTYPES[datatype], count=n, offset=off)
    a = a.reshape(shape, order="F").astype(np.float32)
    if scl_slope != 0.0 and (scl_slope != 1.0 or scl_inter != 0.0):
        a = a * np.float32(scl_slope) + np.float32(scl_inter)

    grid = Grid3(shape[:3], spacing, origin)
    if ndim == 3:
        return Volume3(grid, a)
    return from_stack(grid, a)


def _pack_header(grid, shape):
    hdr = bytearray(HDR_SIZE)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, 16, 32)  # float32
    pixdim = [1.0] + list(grid.spacing) + [1.0] * 4
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, VOX_OFFSET)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 1, 0)  # qform_code=1, sform_code=0
    struct.pack_into("<3f", hdr, 256, 0.0, 0.0, 0.0)  # identity quaternion
    struct.pack_into("<3f", hdr, 268, *grid.origin)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(path, image):
    """Write a Volume3 or DwiVolume as single-file float32 .nii."""
    if isinstance(image, DwiVolume):
        data = image.stack()
        grid = image.grid
    elif isinstance(image, Volume3):
        data = image.data
        grid = image.grid
    else:
        raise FormatError(f"cannot write object of type {type(image).__name__}")
    shape = data.shape
    hdr = _pack_header(grid, shape)
    payload = np.asfortranarray(data, dtype="<f4").tobytes(order="F")
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as f:
            f.write(hdr)
            f.write(b"\x00" * (int(VOX_OFFSET) - HDR_SIZE))
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoError(f"cannot write {path}: {e}") from e


def _load_table(path):
    try:
        rows = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append([float(tok) for tok in line.split()])
        return rows
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except ValueError as e:
        raise FormatError(f"{path}: non-numeric token ({e})") from e


def read_gradients(bval_path, bvec_path):
    """Read FSL-style bval (one row of N) and bvec (three rows of N) files."""
    brows = _load_table(bval_path)
    if len(brows) != 1:
        raise FormatError(f"{bval_path}: expected one row of b-values, got {len(brows)}")
    bvals = np.asarray(brows[0], dtype=np.float64)
    vrows = _load_table(bvec_path)
    if len(vrows) != 3 or any(len(r) != bvals.size for r in vrows):
        raise FormatError(
            f"{bvec_path}: expected 3 rows of {bvals.size} components"
        )
    bvecs = np.asarray(vrows, dtype=np.float64).T
    return GradientTable(bvals, np.ascontiguousarray(bvecs))


def write_gradients(bval_path, bvec_path, gtab):
    """Write a GradientTable back out in FSL text form."""
    try:
        with open(bval_path, "w") as f:
            f.write(" ".join(f"{b:.6g}" for b in gtab.bvals) + "\n")
        with open(bvec_path, "w") as f:
            for axis in range(3):
                f.write(" ".join(f"{v:.17g}" for v in gtab.bvecs[:, axis]) + "\n")
    except OSError as e:
        raise IoError(f"cannot write gradients: {e}") from e
