"""3D volume type, NIfTI-1 reader/writer, resampling and transform algebra.

Transform direction convention (used everywhere in this package):

    An ``AffineTransform`` maps *moving-world* coordinates to *fixed-world*
    coordinates.  ``resample(moving, t, target)`` therefore applies the
    *inverse* of ``t`` to pull samples: for every voxel of the target grid it
    computes the corresponding moving-world position and interpolates the
    moving image there.  Out-of-bounds samples are zero.

Volumes store their data as float32; interpolation and statistics accumulate
in float64.  Only the NIfTI-1 single-file form is supported (``.nii``, plus
the gzip-compressed ``.nii.gz`` variant detected by its two-byte prefix).
"""

from __future__ import annotations

import enum
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import NeurofuseError

__all__ = [
    "BadMagic",
    "UnsupportedDatatype",
    "TruncatedData",
    "NonPositiveDim",
    "SingularTransform",
    "GridMismatch",
    "Dof",
    "Interp",
    "GridSpec",
    "Volume3D",
    "AffineTransform",
    "read_nifti",
    "write_nifti",
    "load_volume",
    "save_volume",
    "resample",
    "compose",
    "invert",
]


class BadMagic(NeurofuseError):
    """Input bytes are not a single-file NIfTI-1 image."""


class UnsupportedDatatype(NeurofuseError):
    """NIfTI datatype code outside the supported set {2, 4, 8, 16, 64}."""


class TruncatedData(NeurofuseError):
    """Payload shorter than the header dimensions imply."""


class NonPositiveDim(NeurofuseError):
    """Header declares a zero or negative spatial dimension."""


class SingularTransform(NeurofuseError):
    """Linear part of a transform is not invertible."""


class GridMismatch(NeurofuseError):
    """Two volumes expected on the same grid are not."""


class Dof(enum.Enum):
    """Degrees of freedom of a linear spatial transform."""

    RIGID6 = 6
    AFFINE12 = 12


class Interp(enum.Enum):
    TRILINEAR = "trilinear"
    NEAREST = "nearest"


_LAST_ROW = np.array([0.0, 0.0, 0.0, 1.0])

# NIfTI-1 datatype code -> numpy dtype (little/big endian applied separately)
_NIFTI_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}


def _as_matrix4(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class GridSpec:
    """Sampling grid: dimensions, voxel spacing (mm) and voxel-to-world affine."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    vox2world: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise NonPositiveDim(f"grid dims must be 3 positive integers, got {dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        v2w = _as_matrix4(self.vox2world)
        if not np.array_equal(v2w[3], _LAST_ROW):
            raise ValueError("vox2world last row must be [0, 0, 0, 1]")
        if abs(np.linalg.det(v2w[:3, :3])) < 1e-12:
            raise SingularTransform("vox2world linear part is singular")
        v2w.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "vox2world", v2w)

    @classmethod
    def isotropic(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "GridSpec":
        """Axis-aligned grid with the given spacing and origin at voxel (0,0,0)."""
        v2w = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
        return cls(tuple(dims), tuple(spacing), v2w)

    def same_grid(self, other: "GridSpec", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.vox2world, other.vox2world, atol=tol)
        )

    def center_world(self) -> np.ndarray:
        """World coordinates of the grid's geometric center."""
        c = (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0
        return self.vox2world[:3, :3] @ c + self.vox2world[:3, 3]


@dataclass(frozen=True)
class Volume3D:
    """A 3D scalar grid with spacing and voxel-to-world affine.

    ``data`` has shape ``dims`` and is indexed ``data[i, j, k]``; on disk the
    first axis is the fastest varying one, matching NIfTI layout.  Instances
    are immutable after construction (arrays are marked read-only) and safe to
    share across threads.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    vox2world: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        grid = GridSpec(self.dims, self.spacing, self.vox2world)
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != grid.dims:
            if data.size == int(np.prod(grid.dims)):
                data = data.reshape(grid.dims)
            else:
                raise ValueError(
                    f"data size {data.size} does not match dims {grid.dims}"
                )
        data.setflags(write=False)
        object.__setattr__(self, "dims", grid.dims)
        object.__setattr__(self, "spacing", grid.spacing)
        object.__setattr__(self, "vox2world", grid.vox2world)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), vox2world=None) -> "Volume3D":
        data = np.asarray(data)
        if vox2world is None:
            vox2world = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
        return cls(tuple(data.shape), tuple(spacing), vox2world, data)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.vox2world)

    def with_data(self, data) -> "Volume3D":
        """Same grid, new voxel values."""
        return Volume3D(self.dims, self.spacing, self.vox2world, data)


@dataclass(frozen=True)
class AffineTransform:
    """4x4 homogeneous transform tagged with its degrees of freedom.

    Maps moving-world coordinates to fixed-world coordinates.  A RIGID6
    transform must have an orthonormal linear part (checked to 1e-6).
    """

    matrix: np.ndarray
    dof: Dof = Dof.AFFINE12

    def __post_init__(self):
        m = _as_matrix4(self.matrix)
        if not np.array_equal(m[3], _LAST_ROW):
            raise ValueError("transform last row must be exactly [0, 0, 0, 1]")
        if self.dof is Dof.RIGID6:
            r = m[:3, :3]
            if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
                raise ValueError("RIGID6 transform has non-orthonormal linear part")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, dof: Dof = Dof.RIGID6) -> "AffineTransform":
        return cls(np.eye(4), dof)

    @classmethod
    def translation(cls, offset, dof: Dof = Dof.RIGID6) -> "AffineTransform":
        m = np.eye(4)
        m[:3, 3] = np.asarray(offset, dtype=np.float64)
        return cls(m, dof)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        """Map an (n, 3) array of world points through the transform."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix[:3, :3].T + self.matrix[:3, 3]


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Concatenate transforms: the result applies ``inner`` first, then ``outer``.

    The result is AFFINE12 unless both inputs are RIGID6.
    """
    dof = Dof.RIGID6 if (outer.dof is Dof.RIGID6 and inner.dof is Dof.RIGID6) else Dof.AFFINE12
    return AffineTransform(outer.matrix @ inner.matrix, dof)


def invert(t: AffineTransform) -> AffineTransform:
    """Inverse transform (fixed-world back to moving-world), same DOF tag."""
    try:
        m = np.linalg.inv(t.matrix)
    except np.linalg.LinAlgError as exc:
        raise SingularTransform("transform is not invertible") from exc
    m[3] = _LAST_ROW  # clear round-off in the homogeneous row
    return AffineTransform(m, t.dof)


def _grid_of(target) -> GridSpec:
    if isinstance(target, Volume3D):
        return target.grid
    if isinstance(target, GridSpec):
        return target
    raise TypeError(f"target must be a Volume3D or GridSpec, not {type(target)!r}")


def resample(
    moving: Volume3D,
    transform: AffineTransform,
    target,
    interp: Interp = Interp.TRILINEAR,
) -> Volume3D:
    """Resample ``moving`` onto ``target``'s grid through ``transform``.

    ``transform`` maps moving-world to target-world; each target voxel is
    filled by interpolating ``moving`` at the inverse-mapped location.
    Samples falling outside ``moving`` are zero.

    Parameters
    ----------
    moving : Volume3D
    transform : AffineTransform
        Moving-world -> target-world mapping.
    target : Volume3D or GridSpec
        Output grid specification.
    interp : Interp
        TRILINEAR (default) or NEAREST.
    """
    grid = _grid_of(target)
    try:
        t_inv = np.linalg.inv(transform.matrix)
        mov_v2w_inv = np.linalg.inv(moving.vox2world)
    except np.linalg.LinAlgError as exc:
        raise SingularTransform("resample transform is singular") from exc
    # target voxel -> target world -> moving world -> moving voxel
    vox2vox = mov_v2w_inv @ t_inv @ grid.vox2world
    order = 1 if interp is Interp.TRILINEAR else 0
    out = ndimage.affine_transform(
        moving.data.astype(np.float64),
        vox2vox[:3, :3],
        offset=vox2vox[:3, 3],
        output_shape=grid.dims,
        order=order,
        mode="constant",
        cval=0.0,
        prefilter=False,
    )
    return Volume3D(grid.dims, grid.spacing, grid.vox2world, out)


def _resample_array(data: np.ndarray, vox2vox: np.ndarray, out_shape, order: int = 1) -> np.ndarray:
    """Raw-array resampling used by hot loops (registration); float64 in/out."""
    return ndimage.affine_transform(
        data,
        vox2vox[:3, :3],
        offset=vox2vox[:3, 3],
        output_shape=tuple(out_shape),
        order=order,
        mode="constant",
        cval=0.0,
        prefilter=False,
    )


# ---------------------------------------------------------------------------
# NIfTI-1 single-file reader/writer
# ---------------------------------------------------------------------------

_HDR_SIZE = 348
_VOX_OFFSET = 352


def read_nifti(raw: bytes) -> Volume3D:
    """Parse single-file NIfTI-1 bytes (optionally gzip-compressed).

    Supports datatypes uint8, int16, int32, float32 and float64; applies
    ``scl_slope``/``scl_inter`` when the slope is nonzero; takes the affine
    from the srow fields when the sform code is set, otherwise falls back to
    a spacing-scaled identity.  Header extension blocks are skipped.
    """
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < _HDR_SIZE + 4:
        raise BadMagic("input shorter than a NIfTI-1 header")

    magic = raw[344:348]
    sizeof_hdr = struct.unpack("<i", raw[0:4])[0]
    byte_order = "<"
    if sizeof_hdr != _HDR_SIZE:
        sizeof_hdr_be = struct.unpack(">i", raw[0:4])[0]
        if sizeof_hdr_be == _HDR_SIZE:
            byte_order = ">"
        elif sizeof_hdr in (540,) or sizeof_hdr_be in (540,):
            raise BadMagic("NIfTI-2 is not supported (single-file NIfTI-1 only)")
        else:
            raise BadMagic("not a NIfTI-1 file (bad sizeof_hdr)")
    if magic == b"ni1\x00":
        raise BadMagic("two-file NIfTI-1 (ni1) is not supported")
    if magic != b"n+1\x00":
        raise BadMagic(f"bad magic {magic!r}")

    dim = struct.unpack(byte_order + "8h", raw[40:56])
    if dim[0] < 3:
        raise NonPositiveDim(f"expected at least 3 spatial dims, header says {dim[0]}")
    dims = dim[1:4]
    if any(d <= 0 for d in dims):
        raise NonPositiveDim(f"non-positive spatial dimension in header: {dims}")

    datatype = struct.unpack(byte_order + "h", raw[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} not supported")
    dtype = np.dtype(byte_order + _NIFTI_DTYPES[datatype])

    pixdim = struct.unpack(byte_order + "8f", raw[76:108])
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    vox_offset = int(struct.unpack(byte_order + "f", raw[108:112])[0])
    scl_slope, scl_inter = struct.unpack(byte_order + "2f", raw[112:120])
    sform_code = struct.unpack(byte_order + "h", raw[254:256])[0]

    if sform_code > 0:
        srow = struct.unpack(byte_order + "12f", raw[280:328])
        v2w = np.eye(4)
        v2w[0, :] = srow[0:4]
        v2w[1, :] = srow[4:8]
        v2w[2, :] = srow[8:12]
    else:
        v2w = np.diag([spacing[0], spacing[1], spacing[2], 1.0])

    n_vox = int(dims[0]) * int(dims[1]) * int(dims[2])
    start = max(vox_offset, _HDR_SIZE + 4)
    end = start + n_vox * dtype.itemsize
    if len(raw) < end:
        raise TruncatedData(
            f"payload holds {len(raw) - start} bytes, {n_vox * dtype.itemsize} expected"
        )
    values = np.frombuffer(raw[start:end], dtype=dtype)
    # x-fastest on disk -> data[i, j, k]
    data = values.reshape(dims, order="F").astype(np.float32)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
    return Volume3D(tuple(int(d) for d in dims), spacing, v2w, data)


def write_nifti(vol: Volume3D) -> bytes:
    """Serialize as single-file NIfTI-1: float32 payload, sform code 1."""
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<b", hdr, 123, 10)  # xyzt_units: mm | sec
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<12f", hdr, 280, *vol.vox2world[0], *vol.vox2world[1], *vol.vox2world[2])
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    payload = np.asfortranarray(vol.data.astype("<f4")).tobytes(order="F")
    return bytes(hdr) + b"\x00" * 4 + payload


def load_volume(path) -> Volume3D:
    """Read a ``.nii`` or ``.nii.gz`` file."""
    return read_nifti(Path(path).read_bytes())


def save_volume(path, vol: Volume3D) -> None:
    """Write a ``.nii`` or ``.nii.gz`` file (gzip chosen by extension).

    Gzip output uses mtime=0 so identical volumes produce identical bytes.
    """
    path = Path(path)
    raw = write_nifti(vol)
    if path.name.endswith(".gz"):
        raw = gzip.compress(raw, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
