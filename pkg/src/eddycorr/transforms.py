"""Unidirectional quadratic eddy distortion composed with rigid motion.

The distortion displaces points only along the phase-encoding axis (PED).
In volume-centered normalized coordinates u in [-1, 1]^3 the displacement is

    delta(u) = u^T Q u + L u + t

with symmetric Q (6 free entries), row L (3) and scalar t: 10 degrees of
freedom. Head motion is a 6-dof rigid transform R applied first; distortion
is anchored to the scanner frame, so the full map is

    y = apply_eddy(R(x))

where only the PED component of R(x) is shifted, by delta evaluated at the
normalized coordinates of R(x) and converted to voxels via (n_ped - 1) / 2.

All operations are pure, vectorized over (..., 3) point arrays, and exact
for zero parameters (the identity shortcut skips all arithmetic).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceError,
    GeometryError,
    NonInvertibleTransformError,
    ValidationError,
)
from .grid import normalized_scale

__all__ = [
    "QuadEddyParams",
    "RigidParams",
    "GridGeometry",
    "EddyMotionTransform",
    "PedAffine",
    "PedDeformationField",
    "eddy_displacement",
    "apply_transform",
    "displacement_field",
    "jacobian_wrt_params",
    "invert_along_ped",
    "is_invertible",
    "random_ped_affine",
    "random_ped_field",
    "N_PARAMS",
    "PARAM_NAMES",
]

N_PARAMS = 16
PARAM_NAMES = (
    "q11", "q12", "q13", "q22", "q23", "q33",
    "l1", "l2", "l3", "t",
    "rot_x", "rot_y", "rot_z",
    "trans_x", "trans_y", "trans_z",
)

INVERTIBILITY_MARGIN = 0.05


@dataclass(frozen=True)
class QuadEddyParams:
    """Quadratic 10-dof distortion coefficients in normalized coordinates.

    q holds the upper triangle (q11, q12, q13, q22, q23, q33) of the
    symmetric quadratic form; l the linear row; t the constant offset.
    Displacement values are in normalized units along the PED.
    """

    q: np.ndarray = field(default_factory=lambda: np.zeros(6))
    l: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        l = np.asarray(self.l, dtype=float)
        if q.shape != (6,):
            raise ValidationError("eddy q must have 6 entries (upper triangle)")
        if l.shape != (3,):
            raise ValidationError("eddy l must have 3 entries")
        q.flags.writeable = False
        l.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "t", float(self.t))

    @property
    def is_zero(self):
        return self.t == 0.0 and not self.q.any() and not self.l.any()

    def q_matrix(self):
        q11, q12, q13, q22, q23, q33 = self.q
        return np.array([[q11, q12, q13], [q12, q22, q23], [q13, q23, q33]])


@dataclass(frozen=True)
class RigidParams:
    """6-dof rigid motion: rotation about the volume center plus translation.

    euler[i] is the angle (radians) about axis i; the rotation matrix is
    R = Rx(euler[0]) @ Ry(euler[1]) @ Rz(euler[2]), i.e. the z rotation is
    applied first, then y, then x. Translations are in mm.
    """

    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        euler = np.asarray(self.euler, dtype=float)
        trans = np.asarray(self.trans, dtype=float)
        if euler.shape != (3,) or trans.shape != (3,):
            raise ValidationError("rigid euler and trans must each have 3 entries")
        euler.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "euler", euler)
        object.__setattr__(self, "trans", trans)

    @property
    def is_zero(self):
        return not self.euler.any() and not self.trans.any()

    def matrix(self):
        return rotation_matrix(self.euler)


def rotation_matrix(euler):
    """Rotation matrix Rx @ Ry @ Rz for angles about the x, y, z axes."""
    ax, ay, az = (float(a) for a in euler)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def rotation_matrix_derivatives(euler):
    """d(Rx@Ry@Rz)/d(angle) for each of the three angles."""
    ax, ay, az = (float(a) for a in euler)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    drz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return [drx @ ry @ rz, rx @ dry @ rz, rx @ ry @ drz]


class _GeometryOps:
    """Shared voxel/mm/normalized coordinate helpers (needs dims, spacing, origin)."""

    def center_voxel(self):
        return (np.asarray(self.dims, dtype=float) - 1.0) / 2.0

    def center_mm(self):
        return self.origin + np.asarray(self.spacing) * self.center_voxel()

    def voxel_to_mm(self, p):
        return self.origin + np.asarray(p, dtype=float) * np.asarray(self.spacing)

    def mm_to_voxel(self, m):
        return (np.asarray(m, dtype=float) - self.origin) / np.asarray(self.spacing)


@dataclass(frozen=True)
class GridGeometry(_GeometryOps):
    """Grid geometry of a Volume3 without the intensities."""

    dims: tuple
    spacing: tuple
    origin: np.ndarray
    ped_axis: int = 1

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = np.asarray(self.origin, dtype=float).copy()
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise ValidationError(f"dims must be 3 integers >= 2, got {dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be positive, got {spacing}")
        if origin.shape != (3,):
            raise ValidationError("origin must be a 3-vector")
        if self.ped_axis not in (0, 1, 2):
            raise ValidationError(f"ped_axis must be 0, 1 or 2, got {self.ped_axis}")
        origin.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "ped_axis", int(self.ped_axis))

    @classmethod
    def of(cls, vol):
        """Geometry of a Volume3 (or anything with the four attributes)."""
        if isinstance(vol, cls):
            return vol
        return cls(vol.dims, vol.spacing, np.asarray(vol.origin), vol.ped_axis)

    def matches(self, other):
        return (
            self.dims == tuple(other.dims)
            and self.spacing == tuple(other.spacing)
            and np.array_equal(self.origin, np.asarray(other.origin))
            and self.ped_axis == other.ped_axis
        )


@dataclass(frozen=True)
class EddyMotionTransform:
    """Quadratic eddy distortion composed after rigid motion, bound to a grid."""

    eddy: QuadEddyParams
    rigid: RigidParams
    grid: GridGeometry

    @classmethod
    def identity(cls, grid):
        return cls(QuadEddyParams(), RigidParams(), GridGeometry.of(grid))

    @classmethod
    def from_params(cls, params, grid):
        """Build from the canonical 16-vector (see PARAM_NAMES)."""
        params = np.asarray(params, dtype=float)
        if params.shape != (N_PARAMS,):
            raise ValidationError(f"expected {N_PARAMS} parameters, got {params.shape}")
        eddy = QuadEddyParams(q=params[0:6], l=params[6:9], t=params[9])
        rigid = RigidParams(euler=params[10:13], trans=params[13:16])
        return cls(eddy, rigid, GridGeometry.of(grid))

    @property
    def params(self):
        """The canonical 16-vector (see PARAM_NAMES)."""
        return np.concatenate(
            [self.eddy.q, self.eddy.l, [self.eddy.t], self.rigid.euler, self.rigid.trans]
        )

    @property
    def is_identity(self):
        return self.eddy.is_zero and self.rigid.is_zero


def _quad_basis(u):
    """Polynomial basis of d(delta)/d(q): (u1^2, 2 u1 u2, 2 u1 u3, u2^2, 2 u2 u3, u3^2)."""
    u0, u1, u2 = u[..., 0], u[..., 1], u[..., 2]
    return np.stack(
        [u0 * u0, 2 * u0 * u1, 2 * u0 * u2, u1 * u1, 2 * u1 * u2, u2 * u2], axis=-1
    )


def eddy_displacement(eddy, u):
    """delta(u) = u^T Q u + L u + t, in normalized units, vectorized over u."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValidationError("invalid coordinate: non-finite normalized coordinates")
    return _quad_basis(u) @ eddy.q + u @ eddy.l + eddy.t


def eddy_displacement_gradient(eddy, u):
    """d(delta)/du = 2 Q u + L, shape (..., 3)."""
    u = np.asarray(u, dtype=float)
    return 2.0 * (u @ eddy.q_matrix().T) + eddy.l


def _apply_rigid(grid, rigid, x):
    """Rigid motion in mm about the volume center, expressed in voxel coords."""
    if rigid.is_zero:
        return np.array(x, dtype=float, copy=True)
    spacing = np.asarray(grid.spacing)
    m = grid.origin + np.asarray(x, dtype=float) * spacing
    c = grid.center_mm()
    r_mm = (m - c) @ rigid.matrix().T + c + rigid.trans
    return (r_mm - grid.origin) / spacing


def _invert_rigid(grid, rigid, r):
    if rigid.is_zero:
        return np.array(r, dtype=float, copy=True)
    spacing = np.asarray(grid.spacing)
    m = grid.origin + np.asarray(r, dtype=float) * spacing
    c = grid.center_mm()
    x_mm = (m - c - rigid.trans) @ rigid.matrix() + c
    return (x_mm - grid.origin) / spacing


def apply_transform(transform, x):
    """Map voxel coordinates x through rigid motion then eddy distortion.

    Only the PED component differs from the rigid motion's output; the
    eddy displacement is evaluated at the normalized coordinates of the
    moved point and converted to voxels via (n_ped - 1) / 2.
    """
    grid = transform.grid
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("invalid coordinate: non-finite voxel coordinates")
    r = _apply_rigid(grid, transform.rigid, x)
    if transform.eddy.is_zero:
        return r
    scale = normalized_scale(grid.dims)
    u = r / scale - 1.0
    delta = eddy_displacement(transform.eddy, u)
    r[..., grid.ped_axis] += delta * scale[grid.ped_axis]
    return r


def displacement_field(transform, grid):
    """Per-voxel PED displacement apply(T, x) - x as a scalar Volume3 field (voxels)."""
    from .grid import Volume3

    geom = GridGeometry.of(grid)
    if not transform.grid.matches(geom):
        raise GeometryError("grid does not match the transform's reference geometry")
    nx, ny, nz = geom.dims
    ii, jj, kk = np.meshgrid(
        np.arange(nx, dtype=float),
        np.arange(ny, dtype=float),
        np.arange(nz, dtype=float),
        indexing="ij",
    )
    pts = np.stack([ii, jj, kk], axis=-1)
    moved = apply_transform(transform, pts)
    rigid_only = _apply_rigid(geom, transform.rigid, pts)
    off = [a for a in range(3) if a != geom.ped_axis]
    # The eddy shift must never leak off the PED.
    assert np.array_equal(moved[..., off], rigid_only[..., off])
    disp = moved[..., geom.ped_axis] - pts[..., geom.ped_axis]
    return Volume3(disp, geom.dims, geom.spacing, geom.origin, geom.ped_axis)


def jacobian_wrt_params(transform, x):
    """Derivatives of the output coordinates with respect to all 16 parameters.

    Returns an (..., 3, 16) array J with J[..., i, k] = d y_i / d theta_k in
    the PARAM_NAMES order. Eddy parameters only move the PED coordinate, so
    their off-PED rows are zero; rigid parameters move all three coordinates
    both directly and through the eddy term's dependence on the moved point.
    """
    grid = transform.grid
    x = np.asarray(x, dtype=float)
    ped = grid.ped_axis
    scale = normalized_scale(grid.dims)
    spacing = np.asarray(grid.spacing)

    r = _apply_rigid(grid, transform.rigid, x)
    u = r / scale - 1.0
    base = x.shape[:-1]
    jac = np.zeros(base + (3, N_PARAMS))

    # Eddy block: d y_ped / d(q, l, t) are the polynomial basis values.
    s_ped = scale[ped]
    jac[..., ped, 0:6] = s_ped * _quad_basis(u)
    jac[..., ped, 6:9] = s_ped * u
    jac[..., ped, 9] = s_ped

    # Rigid block: dy/drho = dr/drho + e_ped * s_ped * (grad_delta . du/drho).
    grad_delta = eddy_displacement_gradient(transform.eddy, u)  # (..., 3)
    m = grid.origin + x * spacing
    c = grid.center_mm()
    mc = m - c
    dr_list = []
    for d_rot in rotation_matrix_derivatives(transform.rigid.euler):
        dr_list.append((mc @ d_rot.T) / spacing)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0 / spacing[j]
        dr_list.append(np.broadcast_to(e, base + (3,)))
    for k, dr in enumerate(dr_list):
        du = dr / scale
        jac[..., :, 10 + k] = dr
        jac[..., ped, 10 + k] += s_ped * np.sum(grad_delta * du, axis=-1)
    return jac


def is_invertible(transform, grid=None, margin=INVERTIBILITY_MARGIN):
    """Whether 1 + d(delta_vox)/d(x_ped) > margin over the whole grid.

    The PED derivative of the voxel displacement equals d(delta)/d(u_ped),
    which is linear in u, so its minimum over the grid is attained at a
    corner; the 8 corners plus the center are checked.
    """
    geom = transform.grid if grid is None else GridGeometry.of(grid)
    eddy = transform.eddy
    if eddy.is_zero:
        return True
    corners = np.array(
        [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
        + [[0.0, 0.0, 0.0]]
    )
    d = eddy_displacement_gradient(eddy, corners)[:, geom.ped_axis]
    return bool(np.all(1.0 + d > margin))


def invert_along_ped(transform, y, tol=1e-8, max_iter=100):
    """Solve apply(T, x) = y for x, exactly inverting the PED-only distortion.

    The off-PED components of R(x) equal those of y, so the problem reduces
    to a scalar root find along each PED line: monotone when the transform
    is invertible, solved by bracketed Newton with bisection fallback.

    Raises NonInvertibleTransformError when a line is not monotone and
    ConvergenceError when the iteration budget is exhausted.
    """
    grid = transform.grid
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValidationError("invalid coordinate: non-finite voxel coordinates")
    if transform.eddy.is_zero:
        return _invert_rigid(grid, transform.rigid, y)

    ped = grid.ped_axis
    scale = normalized_scale(grid.dims)
    s_ped = scale[ped]
    eddy = transform.eddy

    flat = y.reshape(-1, 3)
    r = flat.copy()
    y_ped = flat[:, ped].copy()

    def g_and_dg(s):
        r[:, ped] = s
        u = r / scale - 1.0
        delta = eddy_displacement(eddy, u)
        ddelta = eddy_displacement_gradient(eddy, u)[:, ped]
        return s + delta * s_ped - y_ped, 1.0 + ddelta

    s = y_ped.copy()
    g, dg = g_and_dg(s)
    if np.any(dg <= 0):
        raise NonInvertibleTransformError(
            "non-invertible transform: PED line is not monotone"
        )

    # Bracket the root, expanding outward from the distorted position.
    step = np.maximum(1.0, 2.0 * np.abs(g))
    lo = s - step
    hi = s + step
    g_lo, _ = g_and_dg(lo)
    g_hi, _ = g_and_dg(hi)
    for _ in range(60):
        bad = (g_lo > 0) | (g_hi < 0)
        if not np.any(bad):
            break
        step = step * 2.0
        lo = np.where(bad, s - step, lo)
        hi = np.where(bad, s + step, hi)
        g_lo, _ = g_and_dg(lo)
        g_hi, _ = g_and_dg(hi)
    else:
        raise NonInvertibleTransformError(
            "non-invertible transform: failed to bracket the PED inverse"
        )

    s = 0.5 * (lo + hi)
    converged = False
    for _ in range(max_iter):
        g, dg = g_and_dg(s)
        if np.any(dg <= 0):
            raise NonInvertibleTransformError(
                "non-invertible transform: PED line is not monotone"
            )
        if np.all(np.abs(g) < tol):
            converged = True
            break
        lo = np.where(g < 0, s, lo)
        hi = np.where(g > 0, s, hi)
        newton = s - g / dg
        inside = (newton > lo) & (newton < hi)
        s = np.where(inside, newton, 0.5 * (lo + hi))
    else:
        g, _ = g_and_dg(s)
        converged = bool(np.all(np.abs(g) < tol))
    if not converged:
        raise ConvergenceError(
            f"PED inversion did not converge within {max_iter} iterations"
        )

    r[:, ped] = s
    x = _invert_rigid(grid, transform.rigid, r)
    return x.reshape(y.shape)


# ---------------------------------------------------------------------------
# PED-compatible augmentation transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PedAffine:
    """Voxel-space homogeneous affine whose off-PED outputs ignore the PED input.

    With the PED as column p, the constraint is A[i, p] = 0 for i != p:
    moving along the PED never changes the two non-PED output coordinates,
    so composing the affine with a PED-only distortion keeps the distortion
    PED-only.
    """

    matrix: np.ndarray
    ped_axis: int = 1

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise ValidationError("PedAffine matrix must be 4x4")
        for i in range(3):
            if i != self.ped_axis and m[i, self.ped_axis] != 0.0:
                raise ValidationError(
                    "PedAffine constraint violated: off-PED rows must have a "
                    "zero PED-column entry"
                )
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.matrix[:3, :3].T + self.matrix[:3, 3]


def random_ped_affine(rng, linear_range=0.05, trans_range=2.0, ped_axis=1):
    """Random affine with the PED-compatibility entries forced to zero.

    linear_range bounds the deviation of the 3x3 block from the identity;
    trans_range bounds the translation (voxels).
    """
    lin = np.eye(3) + rng.uniform(-linear_range, linear_range, size=(3, 3))
    trans = rng.uniform(-trans_range, trans_range, size=3)
    for i in range(3):
        if i != ped_axis:
            lin[i, ped_axis] = 0.0
    m = np.eye(4)
    m[:3, :3] = lin
    m[:3, 3] = trans
    return PedAffine(m, ped_axis)


@dataclass(frozen=True)
class PedDeformationField:
    """Smooth displacement field with a nonzero component only along the PED.

    values holds the per-voxel PED displacement in voxels on the bound grid;
    the off-PED components are identically zero by construction.
    """

    values: np.ndarray
    grid: GridGeometry
    control_spacing: float
    amplitude: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != tuple(self.grid.dims):
            raise ValidationError("deformation field shape must match the grid dims")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def apply(self, x):
        """Displace points by the field value at their (rounded) voxel."""
        from .grid import Volume3, sample_trilinear

        vol = Volume3(self.values, self.grid.dims, self.grid.spacing,
                      self.grid.origin, self.grid.ped_axis)
        disp = sample_trilinear(vol, x)
        out = np.array(x, dtype=float, copy=True)
        out[..., self.grid.ped_axis] += disp
        return out


def random_ped_field(rng, control_spacing, amplitude, grid):
    """Random smooth PED-only deformation: a coarse control grid of uniform
    draws in [-amplitude, amplitude], cubic-B-spline interpolated to the grid.
    """
    from scipy.ndimage import map_coordinates

    if amplitude < 0:
        raise ValidationError("amplitude must be >= 0")
    geom = GridGeometry.of(grid)
    if amplitude == 0:
        values = np.zeros(geom.dims)
        return PedDeformationField(values, geom, float(control_spacing), 0.0)
    n_ctrl = [int(np.ceil((d - 1) / control_spacing)) + 3 for d in geom.dims]
    coeffs = rng.uniform(-amplitude, amplitude, size=n_ctrl)
    coords = np.meshgrid(
        *[np.arange(d, dtype=float) / control_spacing + 1.0 for d in geom.dims],
        indexing="ij",
    )
    # Coefficients drawn directly (prefilter=False): the spline stays within
    # [-amplitude, amplitude] because the basis is a partition of unity.
    values = map_coordinates(coeffs, coords, order=3, prefilter=False, mode="nearest")
    return PedDeformationField(values, geom, float(control_spacing), float(amplitude))
