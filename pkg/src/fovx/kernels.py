"""Hot numeric kernels in paired variants: a numba @njit build and a pure
numpy build, selected at call time via the active backend (FOVX_BACKEND or
fovx.backend.set_backend). Both variants perform the same floating point
operations in the same order, so results agree bitwise for the data-movement
kernels and to machine precision elsewhere.

Kernels here are the profiled hot spots: im2col/col2im for convolution,
a batched cyclic Jacobi eigensolver for 3x3 symmetric tensors, trilinear
sampling, and streamline marching. Everything else in the package is plain
numpy.
"""

import numpy as np

from . import backend
from .errors import ShapeError

# ---------------------------------------------------------------------------
# pure numpy variants


def _conv_geometry(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} stride {stride} pad {pad} exceeds input {h}x{w}")
    return oh, ow


def _im2col_np(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, pad)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return np.ascontiguousarray(cols.reshape(n, c * kh * kw, oh * ow))


def _col2im_np(cols, h, w, kh, kw, stride, pad):
    n = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    oh, ow = _conv_geometry(h, w, kh, kw, stride, pad)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols6[:, :, ki, kj]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + w])
    return xp


_JACOBI_MAX_SWEEPS = 50
_JACOBI_TOL = 1e-13


def _jacobi3_np(packed):
    """Eigendecomposition of M symmetric 3x3 matrices.

    packed: (M,6) rows [a00,a11,a22,a01,a02,a12]. Returns (evals (M,3)
    descending, evecs (M,3,3) with evecs[m,:,i] the i-th unit eigenvector,
    largest-magnitude component made positive). Sweeps run per matrix until
    the off-diagonal Frobenius norm drops below 1e-13 of the full norm.
    """
    m = packed.shape[0]
    a00 = packed[:, 0].astype(np.float64).copy()
    a11 = packed[:, 1].astype(np.float64).copy()
    a22 = packed[:, 2].astype(np.float64).copy()
    a01 = packed[:, 3].astype(np.float64).copy()
    a02 = packed[:, 4].astype(np.float64).copy()
    a12 = packed[:, 5].astype(np.float64).copy()
    v = np.zeros((m, 3, 3))
    v[:, 0, 0] = 1.0
    v[:, 1, 1] = 1.0
    v[:, 2, 2] = 1.0

    def rotate(active, app, aqq, apq, apr, aqr, p, q):
        # one cyclic Jacobi rotation zeroing apq; apr/aqr couple to axis r
        nz = active & (apq != 0.0)
        tau = np.where(nz, (aqq - app) / np.where(nz, 2.0 * apq, 1.0), 0.0)
        t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
        t = np.where(nz, t, 0.0)
        c = 1.0 / np.sqrt(1.0 + t * t)
        s = t * c
        app_n = app - t * apq
        aqq_n = aqq + t * apq
        apr_n = c * apr - s * aqr
        aqr_n = s * apr + c * aqr
        vp = v[:, :, p].copy()
        vq = v[:, :, q]
        v[:, :, p] = c[:, None] * vp - s[:, None] * vq
        v[:, :, q] = s[:, None] * vp + c[:, None] * vq
        return app_n, aqq_n, np.where(nz, 0.0, apq), apr_n, aqr_n

    for _ in range(_JACOBI_MAX_SWEEPS):
        off2 = 2.0 * (a01 * a01 + a02 * a02 + a12 * a12)
        frob2 = a00 * a00 + a11 * a11 + a22 * a22 + off2
        active = off2 > (_JACOBI_TOL * _JACOBI_TOL) * frob2
        if not active.any():
            break
        a00, a11, a01, a02, a12 = rotate(active, a00, a11, a01, a02, a12, 0, 1)
        a00, a22, a02, a01, a12 = rotate(active, a00, a22, a02, a01, a12, 0, 2)
        a11, a22, a12, a01, a02 = rotate(active, a11, a22, a12, a01, a02, 1, 2)

    evals = np.stack([a00, a11, a22], axis=1)
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    evecs = np.take_along_axis(v, order[:, None, :], axis=2)
    # canonical sign: largest |component| of each eigenvector is positive
    comp = np.argmax(np.abs(evecs), axis=1)
    picked = np.take_along_axis(evecs, comp[:, None, :], axis=1)[:, 0, :]
    evecs = evecs * np.where(picked < 0.0, -1.0, 1.0)[:, None, :]
    return evals, evecs


def _tri_prep(n, u):
    i0 = np.floor(u)
    i0 = np.clip(i0, 0, max(n - 2, 0)).astype(np.int64)
    f = u - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, f


def _trilinear_np(vol, pts):
    nx, ny, nz = vol.shape[:3]
    x = np.clip(pts[:, 0], 0.0, nx - 1.0)
    y = np.clip(pts[:, 1], 0.0, ny - 1.0)
    z = np.clip(pts[:, 2], 0.0, nz - 1.0)
    i0, i1, fx = _tri_prep(nx, x)
    j0, j1, fy = _tri_prep(ny, y)
    k0, k1, fz = _tri_prep(nz, z)
    if vol.ndim == 4:
        fx, fy, fz = fx[:, None], fy[:, None], fz[:, None]
    c00 = vol[i0, j0, k0] * (1 - fx) + vol[i1, j0, k0] * fx
    c10 = vol[i0, j1, k0] * (1 - fx) + vol[i1, j1, k0] * fx
    c01 = vol[i0, j0, k1] * (1 - fx) + vol[i1, j0, k1] * fx
    c11 = vol[i0, j1, k1] * (1 - fx) + vol[i1, j1, k1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _march_py(fa, v1, spacing, origin, seed, d0, step, fa_stop, cos_stop, max_steps):
    """Euler streamline march in one direction. Returns (count, points)."""
    nx, ny, nz = fa.shape
    sx, sy, sz = spacing
    ox, oy, oz = origin
    pts = np.empty((max_steps + 1, 3))
    pts[0] = seed
    count = 1
    dx, dy, dz = d0
    px, py, pz = seed
    for _ in range(max_steps):
        u = np.array([[(px - ox) / sx, (py - oy) / sy, (pz - oz) / sz]])
        if (u[0, 0] < 0 or u[0, 0] > nx - 1 or u[0, 1] < 0 or u[0, 1] > ny - 1
                or u[0, 2] < 0 or u[0, 2] > nz - 1):
            break
        if _trilinear_np(fa, u)[0] < fa_stop:
            break
        vx, vy, vz = _aligned_dir_py(v1, u[0], dx, dy, dz)
        nrm = np.sqrt(vx * vx + vy * vy + vz * vz)
        if nrm < 1e-12:
            break
        vx, vy, vz = vx / nrm, vy / nrm, vz / nrm
        if vx * dx + vy * dy + vz * dz < cos_stop:
            break
        px, py, pz = px + step * vx, py + step * vy, pz + step * vz
        pts[count] = (px, py, pz)
        count += 1
        dx, dy, dz = vx, vy, vz
    return count, pts


def _aligned_dir_py(v1, u, rx, ry, rz):
    """Trilinear blend of the 8 corner eigenvectors around voxel-space point
    u, each corner sign-flipped to agree with reference direction (rx,ry,rz)."""
    nx, ny, nz = v1.shape[:3]
    i0, i1, fx = _tri_prep(nx, np.array([u[0]]))
    j0, j1, fy = _tri_prep(ny, np.array([u[1]]))
    k0, k1, fz = _tri_prep(nz, np.array([u[2]]))
    i0, i1, j0, j1, k0, k1 = int(i0[0]), int(i1[0]), int(j0[0]), int(j1[0]), int(k0[0]), int(k1[0])
    fx, fy, fz = float(fx[0]), float(fy[0]), float(fz[0])
    acc = np.zeros(3)
    for ci, wi in ((i0, 1 - fx), (i1, fx)):
        for cj, wj in ((j0, 1 - fy), (j1, fy)):
            for ck, wk in ((k0, 1 - fz), (k1, fz)):
                vec = v1[ci, cj, ck]
                if vec[0] * rx + vec[1] * ry + vec[2] * rz < 0.0:
                    acc -= wi * wj * wk * vec
                else:
                    acc += wi * wj * wk * vec
    return acc[0], acc[1], acc[2]


# ---------------------------------------------------------------------------
# numba variants

if backend.HAS_NUMBA:
    import numba

    @numba.njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad):
        n, c, h, w = x.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        cols = np.zeros((n, c * kh * kw, oh * ow), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for oi in range(oh):
                            hi = oi * stride - pad + ki
                            if hi < 0 or hi >= h:
                                continue
                            base = oi * ow
                            for oj in range(ow):
                                wi = oj * stride - pad + kj
                                if 0 <= wi < w:
                                    cols[b, row, base + oj] = x[b, ch, hi, wi]
        return cols

    @numba.njit(cache=True)
    def _col2im_nb(cols, h, w, kh, kw, stride, pad):
        n = cols.shape[0]
        c = cols.shape[1] // (kh * kw)
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for b in range(n):
            for ch in range(c):
                for hi in range(h):
                    for wi in range(w):
                        for ki in range(kh):
                            hp = hi + pad - ki
                            if hp < 0 or hp % stride != 0:
                                continue
                            oi = hp // stride
                            if oi >= oh:
                                continue
                            for kj in range(kw):
                                wp = wi + pad - kj
                                if wp < 0 or wp % stride != 0:
                                    continue
                                oj = wp // stride
                                if oj < ow:
                                    out[b, ch, hi, wi] += cols[b, (ch * kh + ki) * kw + kj, oi * ow + oj]
        return out

    @numba.njit(cache=True)
    def _jacobi3_nb(packed, max_sweeps, tol):
        m = packed.shape[0]
        evals = np.empty((m, 3))
        evecs = np.empty((m, 3, 3))
        a = np.empty((3, 3))
        v = np.empty((3, 3))
        for idx in range(m):
            a[0, 0] = packed[idx, 0]
            a[1, 1] = packed[idx, 1]
            a[2, 2] = packed[idx, 2]
            a[0, 1] = packed[idx, 3]
            a[0, 2] = packed[idx, 4]
            a[1, 2] = packed[idx, 5]
            for r in range(3):
                for cc in range(3):
                    v[r, cc] = 1.0 if r == cc else 0.0
            for _ in range(max_sweeps):
                off2 = 2.0 * (a[0, 1] * a[0, 1] + a[0, 2] * a[0, 2] + a[1, 2] * a[1, 2])
                frob2 = a[0, 0] * a[0, 0] + a[1, 1] * a[1, 1] + a[2, 2] * a[2, 2] + off2
                if not off2 > tol * tol * frob2:
                    break
                for pair in range(3):
                    if pair == 0:
                        p, q, r = 0, 1, 2
                    elif pair == 1:
                        p, q, r = 0, 2, 1
                    else:
                        p, q, r = 1, 2, 0
                    apq = a[p, q]
                    if apq != 0.0:
                        tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                        if tau >= 0.0:
                            t = 1.0 / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
                        else:
                            t = -1.0 / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
                    else:
                        t = 0.0
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = t * c
                    apr = a[min(p, r), max(p, r)]
                    aqr = a[min(q, r), max(q, r)]
                    a[p, p] = a[p, p] - t * apq
                    a[q, q] = a[q, q] + t * apq
                    a[p, q] = 0.0
                    a[min(p, r), max(p, r)] = c * apr - s * aqr
                    a[min(q, r), max(q, r)] = s * apr + c * aqr
                    for row in range(3):
                        vp = v[row, p]
                        vq = v[row, q]
                        v[row, p] = c * vp - s * vq
                        v[row, q] = s * vp + c * vq
            # descending stable sort of the three eigenvalues
            e0, e1, e2 = a[0, 0], a[1, 1], a[2, 2]
            o0, o1, o2 = 0, 1, 2
            if e1 > e0:
                e0, e1, o0, o1 = e1, e0, o1, o0
            if e2 > e1:
                e1, e2, o1, o2 = e2, e1, o2, o1
                if e1 > e0:
                    e0, e1, o0, o1 = e1, e0, o1, o0
            evals[idx, 0] = e0
            evals[idx, 1] = e1
            evals[idx, 2] = e2
            cols = (o0, o1, o2)
            for ci in range(3):
                src = cols[ci]
                big = 0
                for row in range(1, 3):
                    if np.abs(v[row, src]) > np.abs(v[big, src]):
                        big = row
                sign = -1.0 if v[big, src] < 0.0 else 1.0
                for row in range(3):
                    evecs[idx, row, ci] = sign * v[row, src]
        return evals, evecs

    @numba.njit(cache=True, inline="always")
    def _tri_cell(n, u):
        if u < 0.0:
            u = 0.0
        if u > n - 1.0:
            u = n - 1.0
        i0 = int(np.floor(u))
        if i0 > n - 2:
            i0 = n - 2
        if i0 < 0:
            i0 = 0
        i1 = i0 + 1
        if i1 > n - 1:
            i1 = n - 1
        return i0, i1, u - i0

    @numba.njit(cache=True)
    def _trilinear_scalar_nb(vol, pts):
        nx, ny, nz = vol.shape
        out = np.empty(pts.shape[0])
        for p in range(pts.shape[0]):
            i0, i1, fx = _tri_cell(nx, pts[p, 0])
            j0, j1, fy = _tri_cell(ny, pts[p, 1])
            k0, k1, fz = _tri_cell(nz, pts[p, 2])
            c00 = vol[i0, j0, k0] * (1 - fx) + vol[i1, j0, k0] * fx
            c10 = vol[i0, j1, k0] * (1 - fx) + vol[i1, j1, k0] * fx
            c01 = vol[i0, j0, k1] * (1 - fx) + vol[i1, j0, k1] * fx
            c11 = vol[i0, j1, k1] * (1 - fx) + vol[i1, j1, k1] * fx
            c0 = c00 * (1 - fy) + c10 * fy
            c1 = c01 * (1 - fy) + c11 * fy
            out[p] = c0 * (1 - fz) + c1 * fz
        return out

    @numba.njit(cache=True)
    def _trilinear_vec_nb(vol, pts):
        nx, ny, nz = vol.shape[:3]
        nc = vol.shape[3]
        out = np.empty((pts.shape[0], nc))
        for p in range(pts.shape[0]):
            i0, i1, fx = _tri_cell(nx, pts[p, 0])
            j0, j1, fy = _tri_cell(ny, pts[p, 1])
            k0, k1, fz = _tri_cell(nz, pts[p, 2])
            for c in range(nc):
                c00 = vol[i0, j0, k0, c] * (1 - fx) + vol[i1, j0, k0, c] * fx
                c10 = vol[i0, j1, k0, c] * (1 - fx) + vol[i1, j1, k0, c] * fx
                c01 = vol[i0, j0, k1, c] * (1 - fx) + vol[i1, j0, k1, c] * fx
                c11 = vol[i0, j1, k1, c] * (1 - fx) + vol[i1, j1, k1, c] * fx
                c0 = c00 * (1 - fy) + c10 * fy
                c1 = c01 * (1 - fy) + c11 * fy
                out[p, c] = c0 * (1 - fz) + c1 * fz
        return out

    @numba.njit(cache=True)
    def _march_nb(fa, v1, spacing, origin, seed, d0, step, fa_stop, cos_stop, max_steps):
        nx, ny, nz = fa.shape
        sx, sy, sz = spacing[0], spacing[1], spacing[2]
        ox, oy, oz = origin[0], origin[1], origin[2]
        pts = np.empty((max_steps + 1, 3))
        pts[0, 0] = seed[0]
        pts[0, 1] = seed[1]
        pts[0, 2] = seed[2]
        count = 1
        dx, dy, dz = d0[0], d0[1], d0[2]
        px, py, pz = seed[0], seed[1], seed[2]
        for _ in range(max_steps):
            ux = (px - ox) / sx
            uy = (py - oy) / sy
            uz = (pz - oz) / sz
            if ux < 0 or ux > nx - 1 or uy < 0 or uy > ny - 1 or uz < 0 or uz > nz - 1:
                break
            i0, i1, fx = _tri_cell(nx, ux)
            j0, j1, fy = _tri_cell(ny, uy)
            k0, k1, fz = _tri_cell(nz, uz)
            c00 = fa[i0, j0, k0] * (1 - fx) + fa[i1, j0, k0] * fx
            c10 = fa[i0, j1, k0] * (1 - fx) + fa[i1, j1, k0] * fx
            c01 = fa[i0, j0, k1] * (1 - fx) + fa[i1, j0, k1] * fx
            c11 = fa[i0, j1, k1] * (1 - fx) + fa[i1, j1, k1] * fx
            fa_here = (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz
            if fa_here < fa_stop:
                break
            ax = 0.0
            ay = 0.0
            az = 0.0
            for ii in range(2):
                ci = i0 if ii == 0 else i1
                wi = (1 - fx) if ii == 0 else fx
                for jj in range(2):
                    cj = j0 if jj == 0 else j1
                    wj = (1 - fy) if jj == 0 else fy
                    for kk in range(2):
                        ck = k0 if kk == 0 else k1
                        wk = (1 - fz) if kk == 0 else fz
                        vx = v1[ci, cj, ck, 0]
                        vy = v1[ci, cj, ck, 1]
                        vz = v1[ci, cj, ck, 2]
                        w = wi * wj * wk
                        if vx * dx + vy * dy + vz * dz < 0.0:
                            w = -w
                        ax += w * vx
                        ay += w * vy
                        az += w * vz
            nrm = np.sqrt(ax * ax + ay * ay + az * az)
            if nrm < 1e-12:
                break
            ax, ay, az = ax / nrm, ay / nrm, az / nrm
            if ax * dx + ay * dy + az * dz < cos_stop:
                break
            px, py, pz = px + step * ax, py + step * ay, pz + step * az
            pts[count, 0] = px
            pts[count, 1] = py
            pts[count, 2] = pz
            count += 1
            dx, dy, dz = ax, ay, az
        return count, pts


# ---------------------------------------------------------------------------
# dispatchers


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold (N,C,H,W) into patch columns (N, C*kh*kw, OH*OW)."""
    if x.ndim != 4:
        raise ShapeError(f"im2col expects NCHW, got shape {x.shape}")
    _conv_geometry(x.shape[2], x.shape[3], kh, kw, stride, pad)
    if backend.using_numba():
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad)
    return _im2col_np(x, kh, kw, stride, pad)


def col2im(cols, h, w, kh, kw, stride=1, pad=0):
    """Adjoint of im2col: fold patch columns back, summing overlaps."""
    if cols.ndim != 3 or cols.shape[1] % (kh * kw) != 0:
        raise ShapeError(f"col2im got shape {cols.shape} for kernel {kh}x{kw}")
    if backend.using_numba():
        return _col2im_nb(np.ascontiguousarray(cols), h, w, kh, kw, stride, pad)
    return _col2im_np(cols, h, w, kh, kw, stride, pad)


def eig_sym3_batch(packed):
    """Eigendecompose (M,6) packed symmetric tensors [xx,yy,zz,xy,xz,yz]."""
    packed = np.ascontiguousarray(packed, dtype=np.float64)
    if packed.ndim != 2 or packed.shape[1] != 6:
        raise ShapeError(f"expected (M,6) packed tensors, got {packed.shape}")
    if packed.shape[0] == 0:
        return np.empty((0, 3)), np.empty((0, 3, 3))
    if backend.using_numba():
        return _jacobi3_nb(packed, _JACOBI_MAX_SWEEPS, _JACOBI_TOL)
    return _jacobi3_np(packed)


def trilinear(vol, pts):
    """Sample a scalar (nx,ny,nz) or vector (nx,ny,nz,c) field at voxel-space
    points (P,3), clamped to the grid."""
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"points must be (P,3), got {pts.shape}")
    if vol.ndim not in (3, 4):
        raise ShapeError(f"field must be 3D or 4D, got {vol.shape}")
    if backend.using_numba():
        if vol.ndim == 3:
            return _trilinear_scalar_nb(vol, pts)
        return _trilinear_vec_nb(vol, pts)
    return _trilinear_np(vol, pts)


def march(fa, v1, spacing, origin, seed, d0, step, fa_stop, cos_stop, max_steps):
    """March one streamline direction with Euler steps of `step` mm.

    fa: (nx,ny,nz) float64, v1: (nx,ny,nz,3) float64 unit vectors, seed and
    d0 in world mm. Returns the visited points as an (n,3) array including
    the seed. Direction at each point is the sign-aligned trilinear blend of
    the surrounding eigenvectors; marching stops on grid exit, fa < fa_stop,
    turning sharper than cos_stop, or max_steps.
    """
    fa = np.ascontiguousarray(fa, dtype=np.float64)
    v1 = np.ascontiguousarray(v1, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    seed = np.asarray(seed, dtype=np.float64)
    d0 = np.asarray(d0, dtype=np.float64)
    if backend.using_numba():
        count, pts = _march_nb(fa, v1, spacing, origin, seed, d0,
                               float(step), float(fa_stop), float(cos_stop), int(max_steps))
    else:
        count, pts = _march_py(fa, v1, spacing, origin, seed, d0,
                               float(step), float(fa_stop), float(cos_stop), int(max_steps))
    return pts[:count].copy()
