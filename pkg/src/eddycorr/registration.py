"""Parametric registration: recover the 16 distortion+motion parameters per
volume by minimizing the mean squared error between the warped translated
moving volume and the translated reference, then resample the original.

The estimator is coarse-to-fine Gauss-Newton with Levenberg-Marquardt
damping (Adam on the analytic gradient as a fallback), initialized at the
identity. Eddy parameters live in volume-centered normalized coordinates and
rigid parameters in mm, so the same parameter vector is meaningful at every
pyramid level; each level only changes the voxel grid the images are
sampled on.
"""

import collections
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import DwiDataset
from .errors import EddycorrError, ValidationError
from .grid import (
    Volume3,
    check_same_geometry,
    gaussian_pyramid,
    image_gradient,
    sample_trilinear,
)
from .io_formats import check_fields
from .transforms import (
    EddyMotionTransform,
    GridGeometry,
    N_PARAMS,
    apply_transform,
    jacobian_wrt_params,
)
from .translator import VolumeMeta, foreground_mask, translate

__all__ = [
    "RegistrationConfig",
    "RegistrationResult",
    "mse_objective",
    "gradient",
    "register",
    "correct",
    "correct_dataset",
    "gradient_check",
]

# L2 pin on the eddy constant when it is redundant with the rigid PED
# translation; keeps the solver from drifting along the gauge direction
# while moving displacement fields by well under 1e-4 voxels.
GAUGE_PIN_WEIGHT = 1e-6
EDDY_T_INDEX = 9
EDDY_INDICES = tuple(range(10))
RIGID_INDICES = tuple(range(10, 16))

# Smallest tolerated fraction of masked voxels whose warped position stays
# inside the moving volume. Zero padding otherwise offers a spurious global
# minimum: warp everything out of the field of view and match against zeros.
MIN_OVERLAP = 0.9

# The estimated distortion must stay invertible along the PED, like the
# physical one: 1 + d(delta_vox)/d(x_ped) within [margin, 1/margin] over the
# grid. Without this gate the optimizer can collapse tissue onto itself to
# hide unmatchable contrast (a degenerate but lower-MSE solution).
PED_SLOPE_MARGIN = 0.05


@dataclass(frozen=True)
class RegistrationConfig:
    """Optimizer settings; defaults follow the module contract."""

    optimizer: str = "gauss_newton"
    max_iters: int = 200
    lr: float = 1e-2
    damping: float = 1e-3
    tol: float = 1e-7
    tol_window: int = 5
    levels: int = 3
    fixed_params: tuple = (False,) * N_PARAMS
    l2_weight: float = 0.0
    mask_frac: float = 0.05
    # Erode the foreground loss mask: boundary voxels carry the largest
    # interpolation error and would otherwise bias the subvoxel fit.
    mask_erode: int = 2

    def __post_init__(self):
        if self.optimizer not in ("gauss_newton", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        fixed = tuple(bool(v) for v in self.fixed_params)
        if len(fixed) != N_PARAMS:
            raise ValidationError(f"fixed_params must have {N_PARAMS} entries")
        if all(fixed):
            raise ValidationError("at least one parameter must be free")
        if self.levels < 1:
            raise ValidationError("levels must be >= 1")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        object.__setattr__(self, "fixed_params", fixed)

    def with_fixed(self, indices):
        fixed = list(self.fixed_params)
        for i in indices:
            fixed[i] = True
        return replace(self, fixed_params=tuple(fixed))

    _FIELDS = ("optimizer", "max_iters", "lr", "damping", "tol", "tol_window",
               "levels", "fixed_params", "l2_weight", "mask_frac", "mask_erode")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self._FIELDS}
        d["fixed_params"] = list(self.fixed_params)
        return d

    @classmethod
    def from_dict(cls, doc, what="config"):
        check_fields(doc, [], cls._FIELDS, what)
        kwargs = dict(doc)
        if "fixed_params" in kwargs:
            kwargs["fixed_params"] = tuple(bool(v) for v in kwargs["fixed_params"])
        return cls(**kwargs)


@dataclass(frozen=True)
class RegistrationResult:
    """Recovered transform plus the optimization record."""

    transform: EddyMotionTransform
    final_loss: float
    loss_trace: list
    converged: bool
    level_dims: list

    @property
    def params(self):
        return self.transform.params


def _masked_points(vol, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != vol.dims:
        raise ValidationError(
            f"mask shape {mask.shape} does not match volume dims {vol.dims}"
        )
    if not mask.any():
        raise ValidationError("loss mask is empty")
    idx = np.argwhere(mask).astype(float)
    return idx, mask


def mse_objective(moving_t, reference_t, transform, mask):
    """(1/N) sum over the mask of (moving(apply(T, x)) - reference(x))^2."""
    check_same_geometry(moving_t, reference_t)
    pts, mask = _masked_points(reference_t, mask)
    y = apply_transform(transform, pts)
    res = sample_trilinear(moving_t, y) - reference_t.data[mask]
    return float(np.mean(res * res))


def gradient(moving_t, reference_t, transform, mask):
    """Analytic gradient of mse_objective with respect to all 16 parameters.

    Chain rule per masked voxel: residual times the image derivative of the
    moving volume at the warped point times the transform Jacobian.
    """
    check_same_geometry(moving_t, reference_t)
    pts, mask = _masked_points(reference_t, mask)
    y = apply_transform(transform, pts)
    res = sample_trilinear(moving_t, y) - reference_t.data[mask]
    g_img = image_gradient(moving_t, y)  # (N, 3)
    jac = jacobian_wrt_params(transform, pts)  # (N, 3, 16)
    j_res = np.einsum("ni,nik->nk", g_img, jac)  # (N, 16)
    return (2.0 / res.size) * (j_res.T @ res)


class _LevelProblem:
    """MSE objective of one pyramid level, parameters bound to the full grid.

    Level voxel coordinates map affinely to reference-grid voxel coordinates
    (per axis: x_full = x_lvl * scale + shift), so a single parameter vector
    is optimized across all levels.
    """

    def __init__(self, moving_lvl, ref_lvl, full_grid, mask, free, l2_weight):
        self.moving = moving_lvl
        self.full_grid = full_grid
        self.free = free
        self.l2_weight = l2_weight
        spacing_f = np.asarray(full_grid.spacing)
        self.scale = np.asarray(moving_lvl.spacing) / spacing_f
        self.shift = (np.asarray(moving_lvl.origin) - full_grid.origin) / spacing_f
        pts_lvl, mask = _masked_points(ref_lvl, mask)
        self.pts_full = pts_lvl * self.scale + self.shift
        self.ref_vals = ref_lvl.data[mask]
        self.n = self.ref_vals.size
        # Gauge pin only matters when both redundant directions are free.
        ped_trans = 13 + full_grid.ped_axis
        self.pin_t = bool(free[EDDY_T_INDEX] and free[ped_trans])

    def _reg_terms(self, params):
        loss = 0.0
        grad = np.zeros(N_PARAMS)
        hdiag = np.zeros(N_PARAMS)
        if self.l2_weight > 0.0:
            loss += self.l2_weight * float(np.sum(params[self.free] ** 2))
            grad[self.free] += 2.0 * self.l2_weight * params[self.free]
            hdiag[self.free] += 2.0 * self.l2_weight
        if self.pin_t:
            loss += GAUGE_PIN_WEIGHT * params[EDDY_T_INDEX] ** 2
            grad[EDDY_T_INDEX] += 2.0 * GAUGE_PIN_WEIGHT * params[EDDY_T_INDEX]
            hdiag[EDDY_T_INDEX] += 2.0 * GAUGE_PIN_WEIGHT
        return loss, grad, hdiag

    def _warp(self, params):
        transform = EddyMotionTransform.from_params(params, self.full_grid)
        y_full = apply_transform(transform, self.pts_full)
        return transform, (y_full - self.shift) / self.scale

    def _overlap(self, y_lvl):
        dims = np.asarray(self.moving.dims, dtype=float)
        inside = np.all((y_lvl >= 0.0) & (y_lvl <= dims - 1.0), axis=-1)
        return float(np.mean(inside))

    def admissible(self, params):
        """PED slope of the candidate within physical invertibility bounds."""
        from .transforms import eddy_displacement_gradient

        transform = EddyMotionTransform.from_params(params, self.full_grid)
        if transform.eddy.is_zero:
            return True
        corners = np.array(
            [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0)
             for sz in (-1.0, 1.0)] + [[0.0, 0.0, 0.0]]
        )
        d = eddy_displacement_gradient(transform.eddy, corners)
        slope = 1.0 + d[:, self.full_grid.ped_axis]
        return bool(np.all(slope > PED_SLOPE_MARGIN)
                    and np.all(slope < 1.0 / PED_SLOPE_MARGIN))

    def loss(self, params):
        """Objective value and the in-FOV fraction of the warped mask."""
        _, y_lvl = self._warp(params)
        res = sample_trilinear(self.moving, y_lvl) - self.ref_vals
        reg_loss, _, _ = self._reg_terms(params)
        return float(np.mean(res * res)) + reg_loss, self._overlap(y_lvl)

    def loss_grad_hess(self, params):
        """Loss, gradient, Gauss-Newton Hessian (free params) and overlap."""
        transform, y_lvl = self._warp(params)
        res = sample_trilinear(self.moving, y_lvl) - self.ref_vals
        g_img = image_gradient(self.moving, y_lvl) / self.scale  # d/d y_full
        jac = jacobian_wrt_params(transform, self.pts_full)
        j_res = np.einsum("ni,nik->nk", g_img, jac)[:, self.free]  # (N, F)
        reg_loss, reg_grad, reg_hdiag = self._reg_terms(params)
        loss = float(np.mean(res * res)) + reg_loss
        grad = (2.0 / self.n) * (j_res.T @ res) + reg_grad[self.free]
        hess = (2.0 / self.n) * (j_res.T @ j_res) + np.diag(reg_hdiag[self.free])
        return loss, grad, hess, self._overlap(y_lvl)


def _check_finite_loss(value):
    if not np.isfinite(value):
        raise EddycorrError("registration loss became non-finite")


def _gauss_newton_level(problem, params, config, trace):
    free = problem.free
    loss, base_overlap = problem.loss(params)
    _check_finite_loss(loss)
    trace.append(loss)
    min_overlap = min(MIN_OVERLAP, base_overlap)
    lam = config.damping
    window = collections.deque([loss], maxlen=config.tol_window + 1)
    converged = False
    increase_streak = 0
    for _ in range(config.max_iters):
        _, grad, hess, _ = problem.loss_grad_hess(params)
        hfloor = 1e-12 * max(float(np.max(np.diag(hess))), 1e-30)
        accepted = False
        for _attempt in range(16):
            damped = hess + lam * (np.diag(np.diag(hess)) + hfloor * np.eye(len(grad)))
            try:
                step = np.linalg.solve(damped, -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = params.copy()
            cand[free] = cand[free] + step
            cand_loss, cand_overlap = problem.loss(cand)
            _check_finite_loss(cand_loss)
            if (cand_loss < loss and cand_overlap >= min_overlap
                    and problem.admissible(cand)):
                params = cand
                loss = cand_loss
                lam = max(lam / 10.0, 1e-14)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True  # damping exhausted: stationary to machine noise
            break
        if loss > trace[-1]:
            increase_streak += 1
            if increase_streak >= 20:
                raise EddycorrError(
                    "registration diverged: loss increased on 20 consecutive "
                    "accepted steps"
                )
        else:
            increase_streak = 0
        trace.append(loss)
        window.append(loss)
        if len(window) == window.maxlen:
            drop = (window[0] - window[-1]) / max(window[0], 1e-300)
            if drop < config.tol:
                converged = True
                break
    return params, loss, converged


def _adam_level(problem, params, config, trace):
    free = problem.free
    theta = params.copy()
    best = theta.copy()
    best_loss, base_overlap = problem.loss(theta)
    _check_finite_loss(best_loss)
    trace.append(best_loss)
    min_overlap = min(MIN_OVERLAP, base_overlap)
    m = np.zeros(int(np.sum(free)))
    v = np.zeros_like(m)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    window = collections.deque([best_loss], maxlen=config.tol_window + 1)
    converged = False
    for it in range(1, config.max_iters + 1):
        loss, grad, _, overlap = problem.loss_grad_hess(theta)
        _check_finite_loss(loss)
        if loss < best_loss and overlap >= min_overlap and problem.admissible(theta):
            best_loss = loss
            best = theta.copy()
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        mh = m / (1 - beta1**it)
        vh = v / (1 - beta2**it)
        theta = theta.copy()
        theta[free] = theta[free] - config.lr * mh / (np.sqrt(vh) + eps)
        trace.append(best_loss)
        window.append(best_loss)
        if len(window) == window.maxlen:
            drop = (window[0] - window[-1]) / max(window[0], 1e-300)
            if drop < config.tol:
                converged = True
                break
    return best, best_loss, converged


_CROSS_3D = np.zeros((3, 3, 3), dtype=bool)
_CROSS_3D[1, 1, :] = True
_CROSS_3D[:, 1, 1] = True
_CROSS_3D[1, :, 1] = True


def _loss_mask(reference_lvl, config):
    """Foreground of the reference, eroded; falls back when over-aggressive."""
    from scipy.ndimage import binary_erosion

    mask = foreground_mask(reference_lvl, config.mask_frac)
    if config.mask_erode > 0 and mask.any():
        eroded = binary_erosion(mask, structure=_CROSS_3D,
                                iterations=config.mask_erode)
        if eroded.any():
            mask = eroded
    if not mask.any():
        mask = np.ones(reference_lvl.dims, dtype=bool)
    return mask


def register(moving_t, reference_t, config=None):
    """Coarse-to-fine estimation of the 16 transform parameters.

    Parameters start at the identity on the coarsest level and propagate
    unchanged between levels (their units are grid-independent). Returns the
    best-loss parameters of the finest level.
    """
    config = config or RegistrationConfig()
    check_same_geometry(moving_t, reference_t)
    full_grid = GridGeometry.of(reference_t)
    free = ~np.asarray(config.fixed_params, dtype=bool)

    mov_pyr = gaussian_pyramid(moving_t, config.levels)
    ref_pyr = gaussian_pyramid(reference_t, config.levels)

    params = np.zeros(N_PARAMS)
    trace = []
    level_dims = []
    loss = np.inf
    converged = False
    for mov_lvl, ref_lvl in zip(reversed(mov_pyr), reversed(ref_pyr)):
        mask = _loss_mask(ref_lvl, config)
        problem = _LevelProblem(mov_lvl, ref_lvl, full_grid, mask, free,
                                config.l2_weight)
        level_dims.append(ref_lvl.dims)
        if config.optimizer == "gauss_newton":
            params, loss, converged = _gauss_newton_level(problem, params, config, trace)
        else:
            params, loss, converged = _adam_level(problem, params, config, trace)

    transform = EddyMotionTransform.from_params(params, full_grid)
    return RegistrationResult(
        transform=transform,
        final_loss=float(loss),
        loss_trace=trace,
        converged=bool(converged),
        level_dims=level_dims,
    )


def correct(moving_original, result):
    """Resample the original moving volume once at the estimated transform."""
    transform = result.transform if isinstance(result, RegistrationResult) else result
    if not transform.grid.matches(GridGeometry.of(moving_original)):
        raise ValidationError(
            "corrected volume geometry does not match the transform's grid"
        )
    pts = moving_original.grid_points()
    warped = apply_transform(transform, pts)
    data = sample_trilinear(moving_original, warped)
    return moving_original.with_data(data.reshape(moving_original.dims, order="F"))


def _register_one(i, dataset, translator, reference_t, config):
    vol = dataset.volumes[i]
    meta = VolumeMeta(
        b=float(dataset.gradients.bvals[i]),
        g=dataset.gradients.bvecs[i],
        index=i,
    )
    moving_t = translate(translator, vol, meta)
    if meta.b <= 0:
        # b=0 carries no eddy distortion: rigid-only registration.
        cfg = config.with_fixed(EDDY_INDICES)
    else:
        cfg = config
    result = register(moving_t, reference_t, cfg)
    return result, correct(vol, result)


def correct_dataset(dataset, reference_b0_index=None, translator=None,
                    config=None, threads=1):
    """Translate, register and correct every volume against a b=0 reference.

    The reference b=0 keeps the identity transform; other b=0 volumes are
    registered rigid-only (their eddy parameters are frozen at zero). Per
    volume work is independent, so results do not depend on thread count.
    """
    from .translator import IdentityTranslator

    config = config or RegistrationConfig()
    translator = translator or IdentityTranslator()
    b0 = dataset.gradients.b0_indices
    if b0.size == 0:
        raise ValidationError("dataset has no b=0 volume to use as reference")
    ref_idx = int(b0[0]) if reference_b0_index is None else int(reference_b0_index)
    if ref_idx not in set(b0.tolist()):
        raise ValidationError(f"reference index {ref_idx} is not a b=0 volume")

    ref_meta = VolumeMeta(
        b=float(dataset.gradients.bvals[ref_idx]),
        g=dataset.gradients.bvecs[ref_idx],
        index=ref_idx,
    )
    reference_t = translate(translator, dataset.volumes[ref_idx], ref_meta)

    indices = [i for i in range(len(dataset)) if i != ref_idx]
    results = {}
    corrected = {}
    identity = EddyMotionTransform.identity(GridGeometry.of(dataset.grid))
    results[ref_idx] = RegistrationResult(
        transform=identity,
        final_loss=0.0,
        loss_trace=[],
        converged=True,
        level_dims=[],
    )
    corrected[ref_idx] = dataset.volumes[ref_idx]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {
                i: pool.submit(_register_one, i, dataset, translator, reference_t, config)
                for i in indices
            }
            for i, fut in futures.items():
                results[i], corrected[i] = fut.result()
    else:
        for i in indices:
            results[i], corrected[i] = _register_one(
                i, dataset, translator, reference_t, config
            )

    ordered = [corrected[i] for i in range(len(dataset))]
    out = DwiDataset(ordered, dataset.gradients)
    return out, [results[i] for i in range(len(dataset))]


def multilinear_volume(rng, dims):
    """Random intensity field of degree <= 1 per axis on centered coordinates.

    The trilinear interpolant reproduces such fields exactly, with a globally
    continuous derivative, so finite differences of the MSE objective carry no
    interpolation-kink noise and gradient checks are exact to truncation error.
    """
    w = [(np.arange(d) - (d - 1) / 2.0) / ((d - 1) / 2.0) for d in dims]
    wx, wy, wz = np.meshgrid(*w, indexing="ij")
    terms = (np.ones(dims), wx, wy, wz, wx * wy, wx * wz, wy * wz, wx * wy * wz)
    coefs = rng.normal(size=len(terms))
    return Volume3(sum(c * t for c, t in zip(coefs, terms)), dims)


def random_check_params(rng, scale=1.0):
    """Random transform parameters of realistic magnitude for checks."""
    return scale * np.concatenate([
        rng.uniform(-0.02, 0.02, 6),
        rng.uniform(-0.03, 0.03, 3),
        rng.uniform(-0.05, 0.05, 1),
        rng.uniform(-0.02, 0.02, 3),
        rng.uniform(-1.0, 1.0, 3),
    ])


def gradient_check(seed=0, n_cases=20, size=32, h=1e-5, margin=6):
    """Compare the analytic MSE gradient against central finite differences.

    Volume pairs are random kink-free multilinear fields and the mask keeps
    a margin so warped points stay inside the grid. Returns the maximum
    componentwise relative error over all cases, computed where the analytic
    component exceeds 1e-8 in magnitude.
    """
    rng = np.random.default_rng(seed)
    dims = (size, size, size)
    mask = np.zeros(dims, dtype=bool)
    mask[margin:-margin, margin:-margin, margin:-margin] = True
    worst = 0.0
    for _ in range(n_cases):
        mov = multilinear_volume(rng, dims)
        ref = multilinear_volume(rng, dims)
        params = random_check_params(rng)
        geom = GridGeometry.of(ref)
        transform = EddyMotionTransform.from_params(params, geom)
        analytic = gradient(mov, ref, transform, mask)
        fd = np.zeros(N_PARAMS)
        for k in range(N_PARAMS):
            up = params.copy()
            dn = params.copy()
            up[k] += h
            dn[k] -= h
            t_up = EddyMotionTransform.from_params(up, geom)
            t_dn = EddyMotionTransform.from_params(dn, geom)
            fd[k] = (
                mse_objective(mov, ref, t_up, mask)
                - mse_objective(mov, ref, t_dn, mask)
            ) / (2 * h)
        sel = np.abs(analytic) > 1e-8
        if sel.any():
            rel = np.abs(analytic[sel] - fd[sel]) / np.abs(analytic[sel])
            worst = max(worst, float(rel.max()))
    return worst
