"""Synthetic multi-modal DWI scans with analytically known tensor fields.

A phantom is an ellipsoidal brain filled with an isotropic background plus
labeled anisotropic bundles (vertical slabs, circular arcs). The diffusion
signal follows S = S0 exp(-b g^T D g) per voxel, optionally degraded by
Rician noise, so every downstream stage has a closed-form oracle.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .core import DwiVolume, GradientTable, Grid3, Mask, Volume3, from_stack
from .dti import TensorField, fa_from_evals
from .errors import ValidationError

log = logging.getLogger(__name__)

BACKGROUND_EVALS = (0.7e-3, 0.7e-3, 0.7e-3)
BUNDLE_EVALS = (1.7e-3, 0.2e-3, 0.2e-3)

SHAPE_SLAB = "slab"
SHAPE_ARC = "arc"


@dataclass(frozen=True)
class BundleSpec:
    """One fiber bundle. A slab is a cylinder segment around the line
    center + t*axis with t in extent_mm (clipped to the brain); an arc is
    a torus segment of circle radius arc_radius_mm in the x-z plane
    through the center, with fibers along the local tangent."""

    shape: str
    center_mm: tuple
    radius_mm: float
    evals: tuple = BUNDLE_EVALS
    axis: tuple = (0.0, 0.0, 1.0)
    extent_mm: tuple = (-np.inf, np.inf)
    arc_radius_mm: float = 0.0
    arc_span_deg: tuple = (30.0, 150.0)

    def __post_init__(self):
        if self.shape not in (SHAPE_SLAB, SHAPE_ARC):
            raise ValidationError(f"bundle shape must be slab or arc, got {self.shape!r}")
        if not self.radius_mm > 0:
            raise ValidationError("bundle radius must be positive")
        if any(not (e > 0) for e in self.evals) or len(self.evals) != 3:
            raise ValidationError(f"bundle eigenvalues must be three positive values, got {self.evals}")
        if len(self.extent_mm) != 2 or not self.extent_mm[0] < self.extent_mm[1]:
            raise ValidationError(f"extent_mm must be an increasing (lo, hi) pair, got {self.extent_mm}")
        if self.shape == SHAPE_ARC and not self.arc_radius_mm > 0:
            raise ValidationError("arc bundles need arc_radius_mm > 0")
        if self.shape == SHAPE_SLAB and not np.linalg.norm(self.axis) > 0:
            raise ValidationError("slab axis must be nonzero")


@dataclass(frozen=True)
class PhantomSpec:
    grid: Grid3
    brain_semiaxes_mm: tuple
    gradients: GradientTable
    bundles: tuple = ()
    background_evals: tuple = BACKGROUND_EVALS
    s0: float = 1000.0
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.brain_semiaxes_mm) != 3 or any(not (a > 0) for a in self.brain_semiaxes_mm):
            raise ValidationError(f"brain semi-axes must be three positive mm values, got {self.brain_semiaxes_mm}")
        if any(not (e > 0) for e in self.background_evals):
            raise ValidationError("background eigenvalues must be positive")
        if self.gradients.n_weighted < 6:
            raise ValidationError("phantom scheme needs at least 6 weighted directions")
        if not self.s0 > 0:
            raise ValidationError("S0 must be positive")
        if self.sigma < 0:
            raise ValidationError("noise sigma must be >= 0")


@dataclass(frozen=True)
class PhantomScan:
    dwi: DwiVolume
    structural: Volume3
    brain: Mask
    bundle_labels: np.ndarray  # uint8 (nx,ny,nz), 0 = background, i+1 = bundles[i]
    truth_tensors: TensorField


def _canonical_sign(vecs):
    """Flip each row so its largest-magnitude component is positive,
    matching the eigensolver's output convention."""
    flat = vecs.reshape(-1, 3)
    pick = np.abs(flat).argmax(axis=1)
    signs = np.sign(flat[np.arange(flat.shape[0]), pick])
    signs[signs == 0] = 1.0
    return (flat * signs[:, None]).reshape(vecs.shape)


def _voxel_coords(grid: Grid3):
    nx, ny, nz = grid.dims
    sx, sy, sz = grid.spacing
    ox, oy, oz = grid.origin
    x = (ox + np.arange(nx) * sx)[:, None, None]
    y = (oy + np.arange(ny) * sy)[None, :, None]
    z = (oz + np.arange(nz) * sz)[None, None, :]
    return x, y, z


def _slab_region(b: BundleSpec, x, y, z):
    ax = np.asarray(b.axis, dtype=np.float64)
    ax = ax / np.linalg.norm(ax)
    dx = x - b.center_mm[0]
    dy = y - b.center_mm[1]
    dz = z - b.center_mm[2]
    t = dx * ax[0] + dy * ax[1] + dz * ax[2]
    rx = dx - t * ax[0]
    ry = dy - t * ax[1]
    rz = dz - t * ax[2]
    inside = rx * rx + ry * ry + rz * rz <= b.radius_mm**2
    inside = inside & (t >= b.extent_mm[0]) & (t <= b.extent_mm[1])
    dirs = np.broadcast_to(ax, inside.shape + (3,)).copy()
    return inside, dirs


def _arc_region(b: BundleSpec, x, y, z):
    dx = np.broadcast_to(x - b.center_mm[0], np.broadcast_shapes(x.shape, y.shape, z.shape)).astype(np.float64)
    dy = np.broadcast_to(y - b.center_mm[1], dx.shape)
    dz = np.broadcast_to(z - b.center_mm[2], dx.shape)
    r_plane = np.hypot(dx, dz)
    tube = (r_plane - b.arc_radius_mm) ** 2 + dy * dy <= b.radius_mm**2
    theta = np.arctan2(dz, dx)
    lo, hi = np.deg2rad(b.arc_span_deg[0]), np.deg2rad(b.arc_span_deg[1])
    inside = tube & (theta >= lo) & (theta <= hi)
    dirs = np.stack([-np.sin(theta), np.zeros_like(theta), np.cos(theta)], axis=-1)
    return inside, dirs


def _tensors_from_axes(v1, evals):
    """Pack symmetric tensors (xx,yy,zz,xy,xz,yz) with principal axis v1.

    Axisymmetric triples need no secondary frame; a general triple gets a
    deterministic perpendicular pair built from the least-aligned unit axis.
    """
    l1 = evals[..., 0]
    l2 = evals[..., 1]
    l3 = evals[..., 2]
    out = np.zeros(v1.shape[:-1] + (6,), dtype=np.float64)
    if np.allclose(l2, l3):
        vx, vy, vz = v1[..., 0], v1[..., 1], v1[..., 2]
        d = l1 - l2
        out[..., 0] = l2 + d * vx * vx
        out[..., 1] = l2 + d * vy * vy
        out[..., 2] = l2 + d * vz * vz
        out[..., 3] = d * vx * vy
        out[..., 4] = d * vx * vz
        out[..., 5] = d * vy * vz
        return out
    ref = np.zeros_like(v1)
    pick = np.abs(v1).argmin(axis=-1)
    np.put_along_axis(ref, pick[..., None], 1.0, axis=-1)
    e2 = np.cross(v1, ref)
    e2 /= np.linalg.norm(e2, axis=-1, keepdims=True)
    e3 = np.cross(v1, e2)
    for lam, e in ((l1, v1), (l2, e2), (l3, e3)):
        out[..., 0] += lam * e[..., 0] * e[..., 0]
        out[..., 1] += lam * e[..., 1] * e[..., 1]
        out[..., 2] += lam * e[..., 2] * e[..., 2]
        out[..., 3] += lam * e[..., 0] * e[..., 1]
        out[..., 4] += lam * e[..., 0] * e[..., 2]
        out[..., 5] += lam * e[..., 1] * e[..., 2]
    return out


def generate(spec: PhantomSpec) -> PhantomScan:
    """Render the phantom: DWI stack, structural contrast, masks, labels and
    the ground-truth tensor field."""
    grid = spec.grid
    nx, ny, nz = grid.dims
    x, y, z = _voxel_coords(grid)
    cx, cy, cz = grid.center()
    a, b, c = spec.brain_semiaxes_mm
    brain = ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0
    brain = np.broadcast_to(brain, (nx, ny, nz))

    labels = np.zeros((nx, ny, nz), dtype=np.uint8)
    v1 = np.zeros((nx, ny, nz, 3), dtype=np.float64)
    v1[..., 0] = 1.0
    evals = np.empty((nx, ny, nz, 3), dtype=np.float64)
    evals[:] = np.sort(np.asarray(spec.background_evals, dtype=np.float64))[::-1]

    overlap_seen = False
    for bi, bun in enumerate(spec.bundles):
        region_fn = _slab_region if bun.shape == SHAPE_SLAB else _arc_region
        inside, dirs = region_fn(bun, x, y, z)
        inside = np.broadcast_to(inside, (nx, ny, nz)) & brain
        if inside.any() and (labels[inside] > 0).any():
            overlap_seen = True
        labels[inside] = bi + 1
        dirs = _canonical_sign(np.broadcast_to(dirs, (nx, ny, nz, 3)))
        v1[inside] = dirs[inside]
        evals[inside] = np.sort(np.asarray(bun.evals, dtype=np.float64))[::-1]
    if overlap_seen:
        log.info("overlapping bundles: later bundle in the list wins")

    tensors = _tensors_from_axes(v1, evals)
    tensors[~brain] = 0.0
    v1[~brain] = 0.0
    evals[~brain] = 0.0
    labels[~brain] = 0

    bvals = spec.gradients.bvals
    bvecs = spec.gradients.bvecs
    quad = (
        bvecs[:, 0] ** 2 * tensors[..., 0, None]
        + bvecs[:, 1] ** 2 * tensors[..., 1, None]
        + bvecs[:, 2] ** 2 * tensors[..., 2, None]
        + 2.0 * bvecs[:, 0] * bvecs[:, 1] * tensors[..., 3, None]
        + 2.0 * bvecs[:, 0] * bvecs[:, 2] * tensors[..., 4, None]
        + 2.0 * bvecs[:, 1] * bvecs[:, 2] * tensors[..., 5, None]
    )
    stack = spec.s0 * np.exp(-bvals * quad)
    stack[~brain, :] = 0.0
    if spec.sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 211)))
        n1 = rng.normal(0.0, spec.sigma, stack.shape)
        n2 = rng.normal(0.0, spec.sigma, stack.shape)
        stack = np.sqrt((stack + n1) ** 2 + n2**2)
    stack = stack.astype(np.float32)

    tissue = np.zeros((nx, ny, nz), dtype=np.float32)
    tissue[brain] = 0.5
    tissue[labels > 0] = 1.0
    structural = Volume3(grid, _smooth(_smooth(tissue)))

    brain_mask = Mask(grid, brain)
    ln_s0 = np.where(brain, np.log(spec.s0), 0.0)
    fa = np.where(brain, fa_from_evals(evals), 0.0).astype(np.float32)
    md = np.where(brain, evals.mean(axis=-1), 0.0).astype(np.float32)
    truth = TensorField(
        grid=grid,
        mask=brain_mask,
        tensors=tensors,
        ln_s0=ln_s0,
        fa=Volume3(grid, fa),
        md=Volume3(grid, md),
        v1=v1,
        evals=evals,
        fit_failed=np.zeros((nx, ny, nz), dtype=bool),
        clamped=np.zeros((nx, ny, nz), dtype=bool),
    )
    return PhantomScan(
        dwi=from_stack(grid, stack, spec.gradients),
        structural=structural,
        brain=brain_mask,
        bundle_labels=np.asfortranarray(labels),
        truth_tensors=truth,
    )


def _smooth(a: np.ndarray) -> np.ndarray:
    """Separable 1-2-1 smoothing with edge padding; stays within [min, max]."""
    out = np.asarray(a, dtype=np.float32)
    for ax in range(3):
        p = np.pad(out, [(1, 1) if i == ax else (0, 0) for i in range(3)], mode="edge")
        lo = [slice(0, -2) if i == ax else slice(None) for i in range(3)]
        mid = [slice(1, -1) if i == ax else slice(None) for i in range(3)]
        hi = [slice(2, None) if i == ax else slice(None) for i in range(3)]
        out = 0.25 * p[tuple(lo)] + 0.5 * p[tuple(mid)] + 0.25 * p[tuple(hi)]
    return out


def bundle_mask(scan: PhantomScan, index: int) -> Mask:
    """Binary mask of bundle `index` (0-based position in spec.bundles)."""
    return Mask(scan.brain.grid, scan.bundle_labels == index + 1)


def default_scheme(n_dirs: int = 32, n_b0: int = 2, b: float = 1300.0) -> GradientTable:
    """Electrostatic-repulsion direction scheme on the hemisphere with
    leading b=0 rows. Deterministic: the optimizer always starts from the
    same seeded configuration."""
    if n_dirs < 6:
        raise ValidationError(f"need at least 6 directions, got {n_dirs}")
    rng = np.random.default_rng(0)
    p = rng.normal(size=(n_dirs, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    p[p[:, 2] < 0] *= -1.0
    step = 0.05
    for _ in range(400):
        force = np.zeros_like(p)
        for q in (p, -p):
            d = p[:, None, :] - q[None, :, :]
            r2 = (d * d).sum(axis=2)
            np.fill_diagonal(r2, np.inf)
            r2[r2 < 1e-12] = 1e-12
            force += (d / (r2**1.5)[:, :, None]).sum(axis=1)
        force -= (force * p).sum(axis=1, keepdims=True) * p
        move = step * force
        # cap per-iteration travel: an uncapped near-contact force flings the
        # pair to antipodes, where the hemisphere fold fuses them for good
        norm = np.linalg.norm(move, axis=1, keepdims=True)
        move *= np.minimum(1.0, 0.2 / np.maximum(norm, 1e-30))
        p += move
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        p[p[:, 2] < 0] *= -1.0
        step *= 0.99
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dirs, float(b))])
    bvecs = np.concatenate([np.zeros((n_b0, 3)), p])
    return GradientTable(bvals, bvecs)


def preset_spec(preset: str, grid: Grid3, gradients: GradientTable | None = None,
                s0: float = 1000.0, sigma: float = 0.0, seed: int = 0) -> PhantomSpec:
    """Stock phantoms sized proportionally to the grid. "slab" is a single
    vertical bundle rising from the brain base to a seed-dependent height
    below the vertex; "arc+slab" adds a crossing-adjacent arch over it.

    The seed jitters the bundle's in-plane position, radius and top so
    scans drawn with different seeds form a population of distinct
    subjects rather than noisy copies of one anatomy. The bundle top is
    the one feature no caudal context can predict: past a truncation edge
    its location is only knowable from the structural channel."""
    if gradients is None:
        gradients = default_scheme()
    nx, ny, nz = grid.dims
    sx, sy, sz = grid.spacing
    lx, ly, lz = nx * sx, ny * sy, nz * sz
    semi = (0.35 * lx, 0.41 * ly, 0.525 * lz)
    cx, cy, cz = grid.center()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 97)))
    center = (cx + rng.uniform(-0.05, 0.05) * lx, cy + rng.uniform(-0.05, 0.05) * ly, cz)
    slab = BundleSpec(SHAPE_SLAB, center,
                      radius_mm=rng.uniform(0.10, 0.14) * min(lx, ly),
                      extent_mm=(-np.inf, rng.uniform(0.22, 0.37) * lz))
    if preset == "slab":
        bundles = (slab,)
    elif preset == "arc+slab":
        arc = BundleSpec(
            SHAPE_ARC,
            (cx, cy, cz),
            radius_mm=0.07 * min(lx, ly),
            arc_radius_mm=0.30 * lz,
            arc_span_deg=(25.0, 155.0),
        )
        bundles = (slab, arc)
    else:
        raise ValidationError(f"unknown preset {preset!r} (use 'slab' or 'arc+slab')")
    return PhantomSpec(grid=grid, brain_semiaxes_mm=semi, gradients=gradients,
                       bundles=bundles, s0=s0, sigma=sigma, seed=seed)
