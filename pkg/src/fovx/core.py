"""Grid-aware volume containers.

All images live on a Grid3 in RAS orientation with axis 2 (k) pointing
superior; voxel (i,j,k) sits at world position origin + (i*sx, j*sy, k*sz).
Arrays are float32, Fortran-ordered, so the linear layout is
index = i + nx*(j + ny*k), with an optional channel axis slowest.
Volumes are immutable after construction and safe to share across threads.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, GridError, ValidationError

B0_THRESHOLD = 50.0  # s/mm^2; separates b0 from diffusion-weighted volumes


@dataclass(frozen=True)
class Grid3:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValidationError(f"grid dims must be three counts >= 1, got {self.dims}")
        if len(self.spacing) != 3 or any(not (s > 0) for s in self.spacing):
            raise ValidationError(f"grid spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def nvox(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def world(self, i, j, k):
        """World coordinates (mm) of voxel center (i,j,k)."""
        ox, oy, oz = self.origin
        sx, sy, sz = self.spacing
        return (ox + i * sx, oy + j * sy, oz + k * sz)

    def center(self):
        """World coordinates of the grid's geometric center."""
        nx, ny, nz = self.dims
        return self.world((nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asfortranarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume3:
    """Scalar or multi-channel image. data shape (nx,ny,nz) or (nx,ny,nz,c)."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        d = np.asfortranarray(self.data, dtype=np.float32)
        if d.shape[:3] != self.grid.dims or d.ndim not in (3, 4):
            raise ValidationError(f"data shape {d.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(d)):
            raise ValidationError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 3 else self.data.shape[3]

    def channel(self, c: int) -> np.ndarray:
        return self.data if self.data.ndim == 3 else self.data[..., c]

    def flat(self) -> np.ndarray:
        """Values in linear layout order: i fastest, channel slowest."""
        return self.data.ravel(order="F")

    def with_data(self, data: np.ndarray) -> "Volume3":
        return Volume3(self.grid, data)


@dataclass(frozen=True)
class Mask:
    grid: Grid3
    bits: np.ndarray

    def __post_init__(self):
        b = np.asfortranarray(self.bits, dtype=bool)
        if b.shape != self.grid.dims:
            raise ValidationError(f"mask shape {b.shape} does not match grid {self.grid.dims}")
        b.flags.writeable = False
        object.__setattr__(self, "bits", b)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def k_extent(self) -> tuple[int, int]:
        """(k_min, k_max) of occupied slices; raises on an empty mask."""
        ks = np.nonzero(self.bits.any(axis=(0, 1)))[0]
        if ks.size == 0:
            raise DegenerateInputError("mask is empty")
        return int(ks[0]), int(ks[-1])

    def __and__(self, other: "Mask") -> "Mask":
        if other.grid != self.grid:
            raise GridError("mask grids differ")
        return Mask(self.grid, self.bits & other.bits)


@dataclass(frozen=True)
class GradientTable:
    """Per-volume b-values (s/mm^2) and unit b-vectors, FSL convention."""

    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = B0_THRESHOLD

    def __post_init__(self):
        bvals = np.ascontiguousarray(self.bvals, dtype=np.float64)
        bvecs = np.ascontiguousarray(self.bvecs, dtype=np.float64)
        if bvals.ndim != 1 or bvecs.shape != (bvals.size, 3):
            raise ValidationError(
                f"need N bvals and Nx3 bvecs, got {bvals.shape} and {bvecs.shape}"
            )
        if not (np.all(np.isfinite(bvals)) and np.all(np.isfinite(bvecs))):
            raise ValidationError("non-finite b-value or b-vector")
        if np.any(bvals < 0):
            raise ValidationError("negative b-value")
        norms = np.linalg.norm(bvecs, axis=1)
        weighted = bvals >= self.b0_threshold
        bad = weighted & (np.abs(norms - 1.0) > 1e-3)
        if np.any(bad):
            i = int(np.nonzero(bad)[0][0])
            raise ValidationError(
                f"b-vector {i} has norm {norms[i]:.6f}, not unit within 1e-3"
            )
        bvals.flags.writeable = False
        bvecs.flags.writeable = False
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self) -> int:
        return self.bvals.size

    @property
    def is_b0(self) -> np.ndarray:
        return self.bvals < self.b0_threshold

    @property
    def n_weighted(self) -> int:
        return int((~self.is_b0).sum())


@dataclass(frozen=True)
class DwiVolume:
    """N diffusion-weighted volumes sharing one grid, plus their gradients.

    Gradients may be None right after reading a bare 4D file; attach() them
    before any diffusion modelling.
    """

    grid: Grid3
    volumes: tuple
    gradients: GradientTable | None = None
    _stack_cache: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        vols = tuple(self.volumes)
        if not vols:
            raise ValidationError("DwiVolume needs at least one volume")
        for v in vols:
            if v.grid != self.grid:
                raise GridError("volume grid differs from DwiVolume grid")
            if v.channels != 1:
                raise ValidationError("DwiVolume components must be single-channel")
        if self.gradients is not None:
            if len(self.gradients) != len(vols):
                raise ValidationError(
                    f"{len(vols)} volumes but {len(self.gradients)} gradient entries"
                )
            if not np.any(self.gradients.is_b0):
                raise ValidationError("gradient table has no b0 volume")
        object.__setattr__(self, "volumes", vols)

    def __len__(self) -> int:
        return len(self.volumes)

    def stack(self) -> np.ndarray:
        """Read-only (nx,ny,nz,N) view of all volumes."""
        if not self._stack_cache:
            s = np.stack([v.data for v in self.volumes], axis=3)
            self._stack_cache.append(_freeze(s))
        return self._stack_cache[0]

    def attach(self, gradients: GradientTable) -> "DwiVolume":
        return DwiVolume(self.grid, self.volumes, gradients)

    def with_stack(self, data4d: np.ndarray) -> "DwiVolume":
        """New DwiVolume from an (nx,ny,nz,N) array, keeping grid and gradients."""
        if data4d.shape[:3] != self.grid.dims or data4d.shape[3] != len(self):
            raise GridError(f"stack shape {data4d.shape} does not fit")
        vols = tuple(Volume3(self.grid, data4d[..., n]) for n in range(data4d.shape[3]))
        return DwiVolume(self.grid, vols, self.gradients)


def from_stack(grid: Grid3, data4d: np.ndarray, gradients: GradientTable | None = None) -> DwiVolume:
    vols = tuple(Volume3(grid, data4d[..., n]) for n in range(data4d.shape[3]))
    return DwiVolume(grid, vols, gradients)


def restrict(v: Volume3, m: Mask) -> np.ndarray:
    """Values of v where the mask is set, in linear layout order."""
    if v.grid != m.grid:
        raise GridError("volume and mask grids differ")
    if v.channels != 1:
        raise ValidationError("restrict expects a single-channel volume")
    return v.data.ravel(order="F")[m.bits.ravel(order="F")]
