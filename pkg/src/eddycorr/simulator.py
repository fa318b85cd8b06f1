"""Synthetic multi-shell DWI with known ground-truth distortion and motion.

A digital phantom (ellipsoidal brain with a bright outer CSF rim, a CSF
ventricle and anisotropic fiber slabs) is imaged with the monoexponential
tensor model S = S0 * exp(-b g^T D g), distorted by per-volume quadratic
eddy transforms whose coefficients are linear in the gradient vector and
scale with sqrt(b / b_max), moved by per-volume rigid transforms, and
corrupted by Rician noise. Volume 0 (the first b=0) is the reference frame
and is kept at the exact identity.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import DwiDataset, GradientTable
from .errors import NonInvertibleTransformError, ValidationError
from .grid import Volume3, sample_trilinear
from .transforms import (
    EddyMotionTransform,
    GridGeometry,
    QuadEddyParams,
    RigidParams,
    apply_transform,
    invert_along_ped,
    is_invertible,
)

__all__ = [
    "FiberSlab",
    "PhantomSpec",
    "TissueParams",
    "AcquisitionSpec",
    "DistortionSpec",
    "DistortionSampler",
    "Phantom",
    "SimulationOutput",
    "build_phantom",
    "simulate_signal",
    "uniform_directions",
    "sample_distortion",
    "apply_distortion",
    "add_noise",
    "generate_dataset",
]

LABEL_BACKGROUND = 0
LABEL_CSF_RIM = 1
LABEL_VENTRICLE = 2
LABEL_GRAY = 3
LABEL_FIBER_BASE = 4  # slab i gets label LABEL_FIBER_BASE + i


@dataclass(frozen=True)
class FiberSlab:
    """Axial slab of anisotropic tissue at a z offset from the volume center."""

    z_offset: float = 8.0
    half_thickness: float = 2.0
    orientation: tuple = (1.0, 0.0, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry of the synthetic head: sizes in voxels, spacing in mm."""

    dims: tuple = (64, 64, 40)
    spacing: tuple = (2.0, 2.0, 2.0)
    ped_axis: int = 1
    brain_semiaxes: tuple = (26.0, 26.0, 16.0)
    rim_thickness: float = 2.0
    ventricle_semiaxes: tuple = (7.0, 5.0, 4.0)
    fiber_slabs: tuple = (
        FiberSlab(8.0, 2.0, (1.0, 0.0, 0.0)),
        FiberSlab(-8.0, 2.0, (0.0, 1.0, 0.0)),
    )
    # Smooth multiplicative S0 modulation; real tissue is not piecewise
    # constant, and registration needs intensity gradients inside regions.
    texture_amplitude: float = 0.25
    texture_sigma: float = 3.0
    texture_seed: int = 20260101

    def geometry(self):
        return GridGeometry(self.dims, self.spacing, np.zeros(3), self.ped_axis)


@dataclass(frozen=True)
class TissueParams:
    """Signal model per tissue: S0 and diffusion tensor eigenvalues (mm^2/s)."""

    s0_csf: float = 1.0
    s0_gm: float = 0.8
    s0_wm: float = 0.7
    d_csf: float = 3.0e-3
    d_gm: float = 0.8e-3
    wm_eigs: tuple = (1.7e-3, 0.3e-3, 0.3e-3)

    def __post_init__(self):
        if any(e < 0 for e in self.wm_eigs) or self.d_csf < 0 or self.d_gm < 0:
            raise ValidationError("diffusivities must be >= 0")


@dataclass(frozen=True)
class AcquisitionSpec:
    """Multi-shell protocol: 13 b=0 plus (650, 15), (1000, 30), (2000, 60)."""

    shells: tuple = ((650.0, 15), (1000.0, 30), (2000.0, 60))
    n_b0: int = 13
    ped_axis: int = 1
    shell_directions: tuple = None  # optional preset unit directions per shell

    def __post_init__(self):
        for b, n in self.shells:
            if b < 0:
                raise ValidationError("shell b-values must be >= 0")
            if b > 0 and n < 1:
                raise ValidationError("shells with b > 0 need at least one direction")
        if self.n_b0 < 0:
            raise ValidationError("n_b0 must be >= 0")

    @property
    def b_max(self):
        return max(b for b, _ in self.shells) if self.shells else 0.0

    @property
    def n_volumes(self):
        return self.n_b0 + sum(n for _, n in self.shells)


@dataclass(frozen=True)
class DistortionSpec:
    """Ranges for the random ground-truth distortions.

    q/l/t ranges bound the per-unit-gradient base coefficients, drawn once
    per dataset; a volume with gradient g and b-value b receives eddy
    parameters (C @ g) * sqrt(b / b_max). b=0 volumes get zero eddy
    parameters; rigid motion is drawn independently per volume. Defaults
    give maximum displacements of roughly 1-4 voxels on a 64-voxel PED axis.
    """

    q_range: float = 0.009
    l_range: float = 0.022
    t_range: float = 0.05
    rot_range_deg: float = 1.0
    trans_range_mm: float = 1.0
    noise_sigma: float = 0.02

    def __post_init__(self):
        for name in ("q_range", "l_range", "t_range", "rot_range_deg",
                     "trans_range_mm", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Phantom:
    """Voxelwise diffusion tensor field and S0 map on a grid.

    labels holds the majority tissue per voxel; pure marks voxels whose
    volume lies entirely within one region (partial-volume voxels at region
    boundaries are excluded from tissue-contrast statistics).
    """

    tensors: np.ndarray  # (nx, ny, nz, 3, 3)
    s0: np.ndarray  # (nx, ny, nz)
    labels: np.ndarray  # (nx, ny, nz) int
    pure: np.ndarray  # (nx, ny, nz) bool
    grid: GridGeometry

    @property
    def s0_ref(self):
        return float(self.s0.max())

    def tissue_mask(self, label, pure_only=True):
        m = self.labels == label
        return m & self.pure if pure_only else m

    def white_matter_mask(self, pure_only=True):
        m = self.labels >= LABEL_FIBER_BASE
        return m & self.pure if pure_only else m


@dataclass(frozen=True)
class SimulationOutput:
    """Everything a ground-truth evaluation needs."""

    dataset: DwiDataset  # distorted + noisy
    clean: DwiDataset  # undistorted, noise-free
    transforms: list  # ground-truth EddyMotionTransform per volume
    powder_averages: dict  # shell b-value -> mean clean DW Volume3
    phantom: Phantom
    seed: int
    noise_sigma: float


# Subdivisions per voxel axis when rasterizing region fractions; edges become
# single-voxel partial-volume ramps instead of hard steps, which keeps the
# phantom approximately band-limited for trilinear resampling.
SUPERSAMPLE = 4


def _region_indicators(spec, pts):
    """Boolean indicator per region at continuous voxel coordinates.

    Returns an ordered dict-name list of (name, mask) with mutually disjoint
    regions: csf_rim, ventricle, fiber slabs, gray matter.
    """
    center = (np.asarray(spec.dims, dtype=float) - 1.0) / 2.0

    def ellipsoid(semiaxes):
        r2 = ((pts - center) / np.asarray(semiaxes, dtype=float)) ** 2
        return r2.sum(axis=-1) <= 1.0

    brain = ellipsoid(spec.brain_semiaxes)
    inner_axes = [max(a - spec.rim_thickness, 1.0) for a in spec.brain_semiaxes]
    interior = ellipsoid(inner_axes)
    rim = brain & ~interior
    ventricle = ellipsoid(spec.ventricle_semiaxes) & interior

    slabs = []
    for slab in spec.fiber_slabs:
        zc = center[2] + slab.z_offset
        slabs.append((np.abs(pts[..., 2] - zc) <= slab.half_thickness) & interior)

    named = [("ventricle", ventricle)] + [
        (f"fiber_slab[{i}]", m) for i, m in enumerate(slabs)
    ]
    for a in range(len(named)):
        for b in range(a + 1, len(named)):
            if np.any(named[a][1] & named[b][1]):
                raise ValidationError(
                    f"overlapping phantom regions: {named[a][0]} and {named[b][0]}"
                )

    gray = interior & ~ventricle
    for m in slabs:
        gray &= ~m
    out = [("csf_rim", rim), ("ventricle", ventricle)]
    out += [(f"fiber_slab[{i}]", m) for i, m in enumerate(slabs)]
    out.append(("gray", gray))
    return out


def build_phantom(spec=None, tissues=None):
    """Rasterize the phantom into label, tensor and S0 fields.

    Each voxel is subdivided SUPERSAMPLE^3 times; S0 and D are the
    volume-fraction mixtures of the region values, so region boundaries are
    one-voxel linear ramps rather than hard steps. Labels carry the majority
    region and Phantom.pure marks voxels entirely inside one region.

    Raises ValidationError if the ventricle or fiber slabs overlap.
    """
    spec = spec or PhantomSpec()
    tissues = tissues or TissueParams()
    dims = spec.dims
    k = SUPERSAMPLE

    offs = (np.arange(k) + 0.5) / k - 0.5
    axes = [
        (np.arange(d, dtype=float)[:, None] + offs[None, :]).ravel() for d in dims
    ]
    sx, sy, sz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([sx, sy, sz], axis=-1)

    regions = _region_indicators(spec, pts)

    def voxel_fraction(mask_fine):
        m = mask_fine.reshape(dims[0], k, dims[1], k, dims[2], k)
        return m.mean(axis=(1, 3, 5))

    fractions = [(name, voxel_fraction(m)) for name, m in regions]

    eye = np.eye(3)
    lam1, lam2, lam3 = tissues.wm_eigs
    tissue_values = {}
    tissue_values["csf_rim"] = (tissues.s0_csf, tissues.d_csf * eye, LABEL_CSF_RIM)
    tissue_values["ventricle"] = (tissues.s0_csf, tissues.d_csf * eye, LABEL_VENTRICLE)
    tissue_values["gray"] = (tissues.s0_gm, tissues.d_gm * eye, LABEL_GRAY)
    for i, slab in enumerate(spec.fiber_slabs):
        e1 = np.asarray(slab.orientation, dtype=float)
        norm = np.linalg.norm(e1)
        if norm == 0:
            raise ValidationError("fiber orientation must be nonzero")
        e1 = e1 / norm
        # Axially symmetric tensor: lam2 == lam3 assumed for the residual part.
        d = 0.5 * (lam2 + lam3) * eye + (lam1 - 0.5 * (lam2 + lam3)) * np.outer(e1, e1)
        tissue_values[f"fiber_slab[{i}]"] = (tissues.s0_wm, d, LABEL_FIBER_BASE + i)

    s0 = np.zeros(dims)
    tensors = np.zeros(dims + (3, 3))
    stack = np.zeros((len(fractions),) + dims)
    for idx, (name, frac) in enumerate(fractions):
        s0_t, d_t, _ = tissue_values[name]
        s0 += frac * s0_t
        tensors += frac[..., None, None] * d_t
        stack[idx] = frac

    bg = 1.0 - stack.sum(axis=0)
    winner = np.argmax(np.concatenate([bg[None], stack], axis=0), axis=0)
    label_codes = np.array(
        [LABEL_BACKGROUND] + [tissue_values[name][2] for name, _ in fractions],
        dtype=np.int16,
    )
    labels = label_codes[winner]
    pure = np.max(np.concatenate([bg[None], stack], axis=0), axis=0) >= 1.0

    if spec.texture_amplitude > 0:
        from scipy.ndimage import gaussian_filter

        rng = np.random.default_rng(spec.texture_seed)
        tex = gaussian_filter(rng.normal(size=dims), spec.texture_sigma)
        tex /= max(tex.std(), 1e-12)
        s0 *= np.clip(1.0 + spec.texture_amplitude * tex, 0.4, 1.6)

    return Phantom(tensors, s0, labels, pure, spec.geometry())


def simulate_signal(phantom, b, g):
    """Monoexponential signal S = S0 * exp(-b g^T D g) as a Volume3."""
    if b < 0:
        raise ValidationError("b must be >= 0")
    g = np.asarray(g, dtype=float)
    if b > 0:
        if abs(np.linalg.norm(g) - 1.0) > 1e-3:
            raise ValidationError(
                f"gradient direction must be unit length for b > 0, |g| = "
                f"{np.linalg.norm(g):.6f}"
            )
        gdg = np.einsum("...ij,i,j->...", phantom.tensors, g, g)
        data = phantom.s0 * np.exp(-b * gdg)
    else:
        data = phantom.s0.copy()
    geom = phantom.grid
    return Volume3(data, geom.dims, geom.spacing, geom.origin, geom.ped_axis)


def uniform_directions(n, seed):
    """n approximately-uniform unit vectors by electrostatic repulsion.

    Charges interact with both each other and each other's antipodes; 500
    fixed relaxation steps from a seeded random start keep the result
    deterministic.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    if n == 1:
        return p

    eye = np.eye(n, dtype=bool)
    step = 0.1
    for _ in range(500):
        diff = p[:, None, :] - p[None, :, :]
        dist3 = np.power(np.einsum("ijk,ijk->ij", diff, diff), 1.5)
        dist3[eye] = np.inf
        f_rep = np.einsum("ijk,ij->ik", diff, 1.0 / dist3)

        anti = p[:, None, :] + p[None, :, :]
        adist3 = np.power(np.einsum("ijk,ijk->ij", anti, anti), 1.5)
        f_anti = np.einsum("ijk,ij->ik", anti, 1.0 / adist3)

        force = f_rep + f_anti
        force -= np.einsum("ik,ik->i", force, p)[:, None] * p  # tangent part
        fmax = np.abs(force).max()
        if fmax > 0:
            p = p + step * force / fmax
            p /= np.linalg.norm(p, axis=1, keepdims=True)
        step *= 0.995
    return p


# Triangle indices of the Q entries in each row of the symmetric matrix.
_Q_ROW_INDICES = {0: (0, 1, 2), 1: (1, 3, 4), 2: (2, 4, 5)}


@dataclass(frozen=True)
class DistortionSampler:
    """A DistortionSpec with its per-dataset base coefficients drawn.

    base[k, m] is the contribution of gradient component m to eddy parameter
    k (order q11..q33, l1..l3, t); a volume's eddy parameters are
    (base @ g) * sqrt(b / b_max).
    """

    spec: DistortionSpec
    base: np.ndarray  # (10, 3)
    b_max: float
    ped_axis: int

    @classmethod
    def realize(cls, spec, rng, b_max, ped_axis=1, margin=0.05, max_draws=100):
        """Draw base coefficients, redrawing until the worst-case PED
        derivative bound over all unit gradients keeps every volume invertible.
        """
        if b_max <= 0:
            raise ValidationError("b_max must be > 0 to scale eddy coefficients")
        ranges = np.array([spec.q_range] * 6 + [spec.l_range] * 3 + [spec.t_range])
        for _ in range(max_draws):
            base = rng.uniform(-1.0, 1.0, size=(10, 3)) * ranges[:, None]
            qi = _Q_ROW_INDICES[ped_axis]
            # max over unit g of |row . g| is the row norm.
            worst = 2.0 * sum(np.linalg.norm(base[i]) for i in qi) + np.linalg.norm(
                base[6 + ped_axis]
            )
            if 1.0 - worst > margin:
                return cls(spec, base, float(b_max), ped_axis)
        raise NonInvertibleTransformError(
            "could not draw invertible distortion coefficients in "
            f"{max_draws} attempts; reduce the DistortionSpec ranges"
        )

    def eddy_for(self, b, g):
        if b <= 0:
            return QuadEddyParams()
        coeffs = (self.base @ np.asarray(g, dtype=float)) * math.sqrt(b / self.b_max)
        return QuadEddyParams(q=coeffs[0:6], l=coeffs[6:9], t=coeffs[9])


def sample_distortion(sampler, b, g, rng, grid):
    """Ground-truth transform for one volume: deterministic eddy parameters
    from the dataset's base coefficients plus freshly drawn rigid motion.
    """
    spec = sampler.spec
    eddy = sampler.eddy_for(b, g)
    rot = np.deg2rad(rng.uniform(-spec.rot_range_deg, spec.rot_range_deg, size=3))
    trans = rng.uniform(-spec.trans_range_mm, spec.trans_range_mm, size=3)
    transform = EddyMotionTransform(
        eddy, RigidParams(euler=rot, trans=trans), GridGeometry.of(grid)
    )
    if not is_invertible(transform):
        raise NonInvertibleTransformError(
            "sampled distortion failed the invertibility check; the "
            "DistortionSpec ranges are too aggressive"
        )
    return transform


def apply_distortion(vol, transform):
    """Forward-distort an image: distorted(y) = clean(x) where y = apply(T, x).

    Realized by pull-sampling through the exact PED-line inverse, so
    resampling the result at apply(T, x) recovers the input up to
    interpolation error.
    """
    if not is_invertible(transform):
        raise NonInvertibleTransformError(
            "cannot distort with a non-invertible transform"
        )
    pts = vol.grid_points()
    src = invert_along_ped(transform, pts)
    data = sample_trilinear(vol, src)
    return vol.with_data(data.reshape(vol.dims, order="F"))


def correct_with_transform(vol, transform):
    """Undo a distortion by resampling at the forward-mapped coordinates."""
    pts = vol.grid_points()
    dst = apply_transform(transform, pts)
    data = sample_trilinear(vol, dst)
    return vol.with_data(data.reshape(vol.dims, order="F"))


def add_noise(vol, sigma, rng, s0_ref=1.0):
    """Rician noise: out = sqrt((S + n1)^2 + n2^2), n1, n2 ~ N(0, (sigma*s0_ref)^2)."""
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    if sigma == 0:
        return vol.with_data(np.abs(vol.data))
    sd = sigma * s0_ref
    n1 = rng.normal(0.0, sd, size=vol.dims)
    n2 = rng.normal(0.0, sd, size=vol.dims)
    return vol.with_data(np.sqrt((vol.data + n1) ** 2 + n2**2))


def generate_dataset(phantom_spec=None, acq_spec=None, distortion_spec=None,
                     seed=0, tissues=None):
    """Simulate a full multi-shell acquisition with ground truth.

    Deterministic for a fixed seed: the dataset-level RNG stream draws the
    eddy base coefficients, a per-shell stream seeds the gradient scheme,
    and each volume gets its own (transform, noise) streams so results do
    not depend on generation order or thread count. Volume 0 is the
    reference b=0 and carries the exact identity transform.
    """
    phantom_spec = phantom_spec or PhantomSpec()
    acq_spec = acq_spec or AcquisitionSpec(ped_axis=phantom_spec.ped_axis)
    distortion_spec = distortion_spec or DistortionSpec()
    if acq_spec.n_b0 < 1:
        raise ValidationError("the acquisition needs at least one b=0 volume")

    phantom = build_phantom(phantom_spec, tissues)
    grid = phantom.grid
    s0_ref = phantom.s0_ref

    root = np.random.SeedSequence(seed)
    ds_ss, dirs_ss, vols_ss = root.spawn(3)
    sampler = DistortionSampler.realize(
        distortion_spec,
        np.random.default_rng(ds_ss),
        b_max=acq_spec.b_max,
        ped_axis=grid.ped_axis,
    )

    shell_dirs = []
    dir_children = dirs_ss.spawn(len(acq_spec.shells))
    for s, (b, n) in enumerate(acq_spec.shells):
        if acq_spec.shell_directions is not None:
            d = np.asarray(acq_spec.shell_directions[s], dtype=float)
            if d.shape != (n, 3):
                raise ValidationError(
                    f"preset directions for shell {b} must have shape ({n}, 3)"
                )
            shell_dirs.append(d / np.linalg.norm(d, axis=1, keepdims=True))
        else:
            shell_dirs.append(uniform_directions(n, dir_children[s]))

    bvals = [0.0] * acq_spec.n_b0
    bvecs = [np.zeros(3)] * acq_spec.n_b0
    for s, (b, n) in enumerate(acq_spec.shells):
        bvals.extend([b] * n)
        bvecs.extend(list(shell_dirs[s]))
    bvals = np.array(bvals)
    bvecs = np.array(bvecs)
    n_vol = len(bvals)

    vol_children = vols_ss.spawn(n_vol)
    clean_vols = []
    noisy_vols = []
    transforms = []
    for i in range(n_vol):
        t_ss, n_ss = vol_children[i].spawn(2)
        b, g = bvals[i], bvecs[i]
        clean = simulate_signal(phantom, b, g)
        if i == 0:
            # Reference frame: the first b=0 is unmoved by definition.
            transform = EddyMotionTransform.identity(grid)
            distorted = clean
        else:
            transform = sample_distortion(
                sampler, b, g, np.random.default_rng(t_ss), grid
            )
            distorted = apply_distortion(clean, transform)
        noisy = add_noise(
            distorted, distortion_spec.noise_sigma, np.random.default_rng(n_ss), s0_ref
        )
        clean_vols.append(clean)
        noisy_vols.append(noisy)
        transforms.append(transform)

    table = GradientTable(bvals, bvecs)
    powder = {}
    for b, n in acq_spec.shells:
        idx = table.shell_indices(b)
        mean = np.mean([clean_vols[i].data for i in idx], axis=0)
        powder[float(b)] = clean_vols[0].with_data(mean)

    return SimulationOutput(
        dataset=DwiDataset(noisy_vols, table),
        clean=DwiDataset(clean_vols, table),
        transforms=transforms,
        powder_averages=powder,
        phantom=phantom,
        seed=seed,
        noise_sigma=distortion_spec.noise_sigma,
    )
