"""3D scalar volumes on regular grids: trilinear sampling and exact interpolant derivatives.

Conventions used throughout the package:

* Voxel coordinates are continuous indices; voxel (i, j, k) sits at
  coordinate (i, j, k), the physical position is ``origin + spacing * index``.
* Intensities outside the grid are zero (zero-padding boundary), so the
  interpolant is defined on all of R^3.
* Normalized coordinates map index i on an axis of size n to
  ``u = 2 i / (n - 1) - 1``; grid centers span [-1, 1] per axis.
"""

import numpy as np

from .errors import GeometryError, ValidationError

__all__ = [
    "Volume3",
    "sample_trilinear",
    "derivative_along_axis",
    "voxel_to_normalized",
    "normalized_to_voxel",
    "gaussian_pyramid",
]


class Volume3:
    """An immutable 3D scalar image with grid geometry.

    Parameters
    ----------
    data : array-like
        Either a flat array of length nx*ny*nz in x-fastest order, or a
        3D array of shape (nx, ny, nz).
    dims : (int, int, int)
        Grid size per axis (nx, ny, nz); each must be >= 2.
    spacing : (float, float, float)
        Voxel size in mm per axis, strictly positive.
    origin : 3-vector
        Physical position (mm) of voxel (0, 0, 0).
    ped_axis : int
        Phase-encoding axis index in {0, 1, 2}; default 1.
    """

    __slots__ = ("data", "dims", "spacing", "origin", "ped_axis")

    def __init__(self, data, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), ped_axis=1):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise ValidationError(f"dims must be 3 integers >= 2, got {dims}")
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be 3 positive floats, got {spacing}")
        origin = np.asarray(origin, dtype=float)
        if origin.shape != (3,):
            raise ValidationError("origin must be a 3-vector")
        if ped_axis not in (0, 1, 2):
            raise ValidationError(f"ped_axis must be 0, 1 or 2, got {ped_axis}")

        arr = np.asarray(data, dtype=float)
        n = dims[0] * dims[1] * dims[2]
        if arr.ndim == 1:
            if arr.size != n:
                raise ValidationError(f"flat data length {arr.size} != nx*ny*nz = {n}")
            arr = arr.reshape(dims, order="F")
        elif arr.shape != dims:
            raise ValidationError(f"data shape {arr.shape} does not match dims {dims}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        origin.flags.writeable = False

        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "ped_axis", int(ped_axis))

    def __setattr__(self, name, value):
        raise AttributeError("Volume3 is immutable")

    @property
    def flat_data(self):
        """Flat copy of the data in x-fastest order."""
        return self.data.ravel(order="F").copy()

    def with_data(self, data):
        """New volume with the same geometry and different intensities."""
        return Volume3(data, self.dims, self.spacing, self.origin, self.ped_axis)

    def same_geometry(self, other):
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.origin, other.origin)
            and self.ped_axis == other.ped_axis
        )

    def center_voxel(self):
        """Continuous voxel coordinates of the grid center."""
        return (np.asarray(self.dims, dtype=float) - 1.0) / 2.0

    def center_mm(self):
        return self.origin + np.asarray(self.spacing) * self.center_voxel()

    def voxel_to_mm(self, p):
        return self.origin + np.asarray(p, dtype=float) * np.asarray(self.spacing)

    def mm_to_voxel(self, m):
        return (np.asarray(m, dtype=float) - self.origin) / np.asarray(self.spacing)

    def grid_points(self):
        """All voxel coordinates as an (nx*ny*nz, 3) array, x-fastest order."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        pts = np.stack(
            [ii.ravel(order="F"), jj.ravel(order="F"), kk.ravel(order="F")], axis=1
        )
        return pts.astype(float)

    def __repr__(self):
        return (
            f"Volume3(dims={self.dims}, spacing={self.spacing}, "
            f"origin={tuple(self.origin)}, ped_axis={self.ped_axis})"
        )


def _check_points(p):
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 3:
        raise ValidationError("invalid coordinate: points must have a trailing axis of size 3")
    if not np.all(np.isfinite(p)):
        raise ValidationError("invalid coordinate: non-finite voxel coordinates")
    return p


def _gather(vol, ix, iy, iz):
    """Voxel values at integer indices, zero outside the grid."""
    nx, ny, nz = vol.dims
    valid = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    ixc = np.clip(ix, 0, nx - 1)
    iyc = np.clip(iy, 0, ny - 1)
    izc = np.clip(iz, 0, nz - 1)
    vals = vol.data[ixc, iyc, izc]
    return np.where(valid, vals, 0.0)


def sample_trilinear(vol, p):
    """Trilinear interpolation of ``vol`` at continuous voxel coordinates ``p``.

    Parameters
    ----------
    vol : Volume3
    p : array-like, shape (..., 3)
        Continuous voxel coordinates; must be finite.

    Returns
    -------
    ndarray of shape (...)
        Interpolated intensities; zero outside the grid.
    """
    p = _check_points(p)
    i0 = np.floor(p).astype(np.int64)
    f = p - i0
    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]

    c000 = _gather(vol, ix, iy, iz)
    c100 = _gather(vol, ix + 1, iy, iz)
    c010 = _gather(vol, ix, iy + 1, iz)
    c110 = _gather(vol, ix + 1, iy + 1, iz)
    c001 = _gather(vol, ix, iy, iz + 1)
    c101 = _gather(vol, ix + 1, iy, iz + 1)
    c011 = _gather(vol, ix, iy + 1, iz + 1)
    c111 = _gather(vol, ix + 1, iy + 1, iz + 1)

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def derivative_along_axis(vol, p, axis):
    """Exact partial derivative of the trilinear interpolant along one axis.

    The derivative is piecewise constant per cell along ``axis``; at cell
    boundaries the lower cell wins (at integer coordinate k the cell
    [k-1, k] is used), which makes the result deterministic everywhere.

    Parameters
    ----------
    vol : Volume3
    p : array-like, shape (..., 3)
    axis : int
        Axis of differentiation, in {0, 1, 2}.

    Returns
    -------
    ndarray of shape (...)
        Derivative in intensity per voxel.
    """
    if axis not in (0, 1, 2):
        raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")
    p = _check_points(p)
    i0 = np.floor(p).astype(np.int64)
    # Lower cell wins on the differentiation axis: ceil(p)-1 maps integers
    # k to cell [k-1, k] and leaves non-integer points unchanged.
    i0_a = np.ceil(p[..., axis]).astype(np.int64) - 1
    i0 = i0.copy()
    i0[..., axis] = i0_a
    f = p - i0

    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]

    c000 = _gather(vol, ix, iy, iz)
    c100 = _gather(vol, ix + 1, iy, iz)
    c010 = _gather(vol, ix, iy + 1, iz)
    c110 = _gather(vol, ix + 1, iy + 1, iz)
    c001 = _gather(vol, ix, iy, iz + 1)
    c101 = _gather(vol, ix + 1, iy, iz + 1)
    c011 = _gather(vol, ix, iy + 1, iz + 1)
    c111 = _gather(vol, ix + 1, iy + 1, iz + 1)

    if axis == 0:
        d00 = c100 - c000
        d10 = c110 - c010
        d01 = c101 - c001
        d11 = c111 - c011
        d0 = d00 * (1 - fy) + d10 * fy
        d1 = d01 * (1 - fy) + d11 * fy
        return d0 * (1 - fz) + d1 * fz
    if axis == 1:
        d00 = c010 - c000
        d10 = c110 - c100
        d01 = c011 - c001
        d11 = c111 - c101
        d0 = d00 * (1 - fx) + d10 * fx
        d1 = d01 * (1 - fx) + d11 * fx
        return d0 * (1 - fz) + d1 * fz
    d00 = c001 - c000
    d10 = c101 - c100
    d01 = c011 - c010
    d11 = c111 - c110
    d0 = d00 * (1 - fx) + d10 * fx
    d1 = d01 * (1 - fx) + d11 * fx
    return d0 * (1 - fy) + d1 * fy


def image_gradient(vol, p):
    """All three interpolant partial derivatives at ``p``, shape (..., 3)."""
    return np.stack([derivative_along_axis(vol, p, a) for a in (0, 1, 2)], axis=-1)


def normalized_scale(dims):
    """Per-axis half-extent (n-1)/2 of the index range, as a float 3-vector."""
    return (np.asarray(dims, dtype=float) - 1.0) / 2.0


def voxel_to_normalized(vol, p):
    """Map continuous voxel coordinates to [-1, 1]^3 normalized coordinates."""
    p = np.asarray(p, dtype=float)
    s = normalized_scale(vol.dims)
    return p / s - 1.0


def normalized_to_voxel(vol, u):
    """Inverse of :func:`voxel_to_normalized`."""
    u = np.asarray(u, dtype=float)
    s = normalized_scale(vol.dims)
    return (u + 1.0) * s


def gaussian_pyramid(vol, levels, sigma_per_level=1.0):
    """Multi-resolution pyramid: level 0 is the input, each next level is
    Gaussian-smoothed then decimated by 2 per axis (spacing doubled).

    Levels that would shrink any axis below 4 voxels are not produced, so
    the returned list may be shorter than ``levels``.
    """
    from scipy.ndimage import gaussian_filter

    if levels < 1:
        raise ValidationError("levels must be >= 1")
    out = [vol]
    cur = vol
    for _ in range(1, levels):
        if any(d // 2 < 4 for d in cur.dims):
            break
        smoothed = gaussian_filter(cur.data, sigma=sigma_per_level, mode="nearest")
        nx, ny, nz = cur.dims
        dec = smoothed[: 2 * (nx // 2) : 2, : 2 * (ny // 2) : 2, : 2 * (nz // 2) : 2]
        new_dims = dec.shape
        new_spacing = tuple(2.0 * s for s in cur.spacing)
        # Decimated voxel i sits at original voxel 2i, so the origin is kept.
        nxt = Volume3(dec, new_dims, new_spacing, cur.origin, cur.ped_axis)
        out.append(nxt)
        cur = nxt
    return out


def check_same_geometry(a, b, what="volumes"):
    if not a.same_geometry(b):
        raise GeometryError(f"{what} have mismatched grid geometry: {a!r} vs {b!r}")
