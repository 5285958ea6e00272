"""Diffusion tensor estimation and the derived condition modalities.

Per-voxel log-linear least squares: y_v = ln(max(S_v, floor)) against design
row (-b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz, 1), solved
through one QR factorization of the shared design. Eigendecomposition runs
on the batched 3x3 Jacobi kernel.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DwiVolume, Grid3, Mask, Volume3
from .errors import DegenerateInputError, DesignRankError, ValidationError

SIGNAL_FLOOR = 1e-6


def design_matrix(gtab) -> np.ndarray:
    """(N,7) rows (-b gx^2, -b gy^2, -b gz^2, -2b gxgy, -2b gxgz, -2b gygz, 1)."""
    b = gtab.bvals
    g = gtab.bvecs
    a = np.empty((len(gtab), 7))
    a[:, 0] = -b * g[:, 0] ** 2
    a[:, 1] = -b * g[:, 1] ** 2
    a[:, 2] = -b * g[:, 2] ** 2
    a[:, 3] = -2 * b * g[:, 0] * g[:, 1]
    a[:, 4] = -2 * b * g[:, 0] * g[:, 2]
    a[:, 5] = -2 * b * g[:, 1] * g[:, 2]
    a[:, 6] = 1.0
    return a


@dataclass(frozen=True)
class TensorField:
    """Voxelwise tensor fit. tensors holds (Dxx,Dyy,Dzz,Dxy,Dxz,Dyz) and
    ln_s0 the log baseline; fa/md/v1 derive from the clamped eigenvalues.
    Voxels outside the mask are zero everywhere."""

    grid: Grid3
    mask: Mask
    tensors: np.ndarray  # (nx,ny,nz,6) float64
    ln_s0: np.ndarray  # (nx,ny,nz) float64
    fa: Volume3
    md: Volume3
    v1: np.ndarray  # (nx,ny,nz,3) float64 unit vectors (0 outside mask)
    evals: np.ndarray  # (nx,ny,nz,3) float64 descending, clamped at 0
    fit_failed: np.ndarray  # floored signals made this voxel unreliable
    clamped: np.ndarray  # negative eigenvalues were clamped for FA/MD


def fa_from_evals(evals: np.ndarray) -> np.ndarray:
    """FA = sqrt(3/2 * sum((l_i - mean)^2) / sum(l_i^2)), 0 where all zero."""
    evals = np.asarray(evals, dtype=np.float64)
    mean = evals.mean(axis=-1, keepdims=True)
    num = ((evals - mean) ** 2).sum(axis=-1)
    den = (evals**2).sum(axis=-1)
    fa = np.zeros_like(den)
    nz = den > 0
    fa[nz] = np.sqrt(1.5 * num[nz] / den[nz])
    return np.clip(fa, 0.0, 1.0)


def fit_dti(d: DwiVolume, mask: Mask, signal_floor: float = SIGNAL_FLOOR) -> TensorField:
    """Log-linear LS tensor fit over the masked voxels."""
    if d.gradients is None:
        raise ValidationError("scan has no gradient table attached")
    if d.grid != mask.grid:
        raise ValidationError("scan and mask grids differ")
    if mask.count == 0:
        raise DegenerateInputError("mask is empty")
    gtab = d.gradients
    if gtab.n_weighted < 6:
        raise DesignRankError(f"need >= 6 diffusion-weighted volumes, got {gtab.n_weighted}")

    a = design_matrix(gtab)
    q, r = np.linalg.qr(a)
    rd = np.abs(np.diag(r))
    if rd.min() < 1e-10 * max(rd.max(), 1.0):
        raise DesignRankError("gradient scheme gives a rank-deficient design")

    flat_mask = mask.bits.ravel(order="F")
    sig = d.stack().reshape(-1, len(d), order="F")[flat_mask].T.astype(np.float64)  # (N, M)
    failed = np.any(sig <= signal_floor, axis=0)
    y = np.log(np.maximum(sig, signal_floor))
    p = np.linalg.solve(r, q.T @ y)  # (7, M)

    evals_m, evecs_m = kernels.eig_sym3_batch(np.ascontiguousarray(p[:6].T))
    clamped_m = np.any(evals_m < 0, axis=1)
    evals_m = np.maximum(evals_m, 0.0)
    fa_m = fa_from_evals(evals_m)
    md_m = evals_m.mean(axis=1)
    v1_m = evecs_m[:, :, 0]

    dims = d.grid.dims

    def scatter(vals, ncomp=None):
        if ncomp is None:
            out = np.zeros(dims[0] * dims[1] * dims[2])
            out[flat_mask] = vals
            return out.reshape(dims, order="F")
        out = np.zeros((dims[0] * dims[1] * dims[2], ncomp))
        out[flat_mask] = vals
        return out.reshape(dims + (ncomp,), order="F")

    return TensorField(
        grid=d.grid,
        mask=mask,
        tensors=scatter(p[:6].T, 6),
        ln_s0=scatter(p[6]),
        fa=Volume3(d.grid, scatter(fa_m).astype(np.float32)),
        md=Volume3(d.grid, scatter(md_m).astype(np.float32)),
        v1=scatter(v1_m, 3),
        evals=scatter(evals_m, 3),
        fit_failed=scatter(failed.astype(np.float64)) > 0.5,
        clamped=scatter(clamped_m.astype(np.float64)) > 0.5,
    )


def eig_sym3(m: np.ndarray):
    """Eigendecompose one symmetric 3x3 matrix: (evals descending, evecs
    with evecs[:, i] the i-th unit eigenvector)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValidationError(f"expected a 3x3 matrix, got {m.shape}")
    if np.abs(m - m.T).max() > 1e-12 * max(1.0, np.abs(m).max()):
        raise ValidationError("matrix is not symmetric within 1e-12")
    packed = np.array([[m[0, 0], m[1, 1], m[2, 2], m[0, 1], m[0, 2], m[1, 2]]])
    evals, evecs = kernels.eig_sym3_batch(packed)
    return evals[0], evecs[0]


def orientation_map(tf: TensorField) -> Volume3:
    """Three channels: angle between v1 and each main axis, arccos|v1.e_a|
    rescaled to [0,1] by dividing by pi/2. Zero outside the fit mask."""
    dots = np.clip(np.abs(tf.v1), 0.0, 1.0)
    ang = np.arccos(dots) / (np.pi / 2.0)
    ang[~tf.mask.bits] = 0.0
    return Volume3(tf.grid, ang.astype(np.float32))


def bvec_polar(g) -> tuple[float, float]:
    """(theta/pi, (phi+pi)/(2pi)) for a unit gradient; (0, 0.5) for b0."""
    g = np.asarray(g, dtype=np.float64)
    n = np.linalg.norm(g)
    if n < 1e-12:
        return 0.0, 0.5
    if abs(n - 1.0) > 1e-3:
        raise ValidationError(f"gradient has norm {n:.6f}, expected 1 or 0")
    theta = float(np.arccos(np.clip(g[2], -1.0, 1.0)))
    phi = float(np.arctan2(g[1], g[0]))
    return theta / np.pi, (phi + np.pi) / (2.0 * np.pi)


def bvec_map(g, grid: Grid3) -> Volume3:
    """Two constant-valued channels holding the gradient's polar angles."""
    t, p = bvec_polar(g)
    data = np.empty(grid.dims + (2,), dtype=np.float32, order="F")
    data[..., 0] = t
    data[..., 1] = p
    return Volume3(grid, data)
