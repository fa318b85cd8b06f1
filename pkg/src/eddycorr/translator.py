"""Contrast translation: map any volume to the reference-shell powder-average
contrast so MSE-driven registration sees comparable images.

Three interchangeable translators:

* identity - volumes pass through unchanged.
* histogram_match - monotone voxelwise intensity remap of the foreground so
  its quantiles match a target template's; never moves geometry.
* oracle - the ground-truth reference-shell powder average warped by the
  volume's ground-truth transform (perfectly translated, still distorted);
  requires simulation ground truth and isolates registration accuracy from
  translation quality.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .simulator import SimulationOutput, apply_distortion

__all__ = [
    "VolumeMeta",
    "IdentityTranslator",
    "HistogramMatchTranslator",
    "OracleTranslator",
    "translate",
    "build_template",
    "foreground_mask",
    "make_translator",
]

DEFAULT_B_REF = 2000.0
DEFAULT_N_QUANTILES = 256
FOREGROUND_FRAC = 0.05
ROBUST_MAX_PERCENTILE = 99.0


@dataclass(frozen=True)
class VolumeMeta:
    """What a translator may know about a volume: (b, g, index in the dataset)."""

    b: float
    g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    index: int = -1


def foreground_mask(vol, frac=FOREGROUND_FRAC):
    """Boolean mask of voxels a fraction of the robust range above the median.

    The threshold is median + frac * (p99 - median): in diffusion volumes the
    background majority pins the median near the Rician noise floor, so the
    cut stays above background even when tissue is strongly attenuated
    (a bare frac * p99 threshold dips under the noise floor at high b).
    """
    data = vol.data
    robust_max = np.percentile(data, ROBUST_MAX_PERCENTILE)
    floor = np.percentile(data, 50.0)
    return data > floor + frac * (robust_max - floor)


@dataclass(frozen=True)
class IdentityTranslator:
    def translate(self, vol, meta):
        return vol


@dataclass(frozen=True)
class HistogramMatchTranslator:
    """Quantile-matching intensity remap against a fixed template volume."""

    template: object
    n_quantiles: int = DEFAULT_N_QUANTILES

    def __post_init__(self):
        if self.n_quantiles < 2:
            raise ValidationError("n_quantiles must be >= 2")
        qs = np.linspace(0.0, 100.0, self.n_quantiles)
        tmpl_fg = self.template.data[foreground_mask(self.template)]
        if tmpl_fg.size == 0:
            raise ValidationError("template has an empty foreground")
        object.__setattr__(self, "_target_landmarks", np.percentile(tmpl_fg, qs))
        object.__setattr__(self, "_qs", qs)

    def translate(self, vol, meta):
        fg = foreground_mask(vol)
        if not fg.any():
            return vol
        src = np.percentile(vol.data[fg], self._qs)
        dst = self._target_landmarks
        # np.interp needs strictly increasing abscissae; constant runs in the
        # source quantiles collapse to their first landmark.
        src_u, first = np.unique(src, return_index=True)
        dst_u = dst[first]
        if src_u.size == 1:
            mapped = np.full(int(fg.sum()), dst_u[0])
        else:
            mapped = np.interp(vol.data[fg], src_u, dst_u)
        out = vol.data.copy()
        out[fg] = mapped
        return vol.with_data(out)


@dataclass(frozen=True)
class OracleTranslator:
    """Ground-truth translation from a simulation: the b_ref powder average
    warped by each volume's true transform."""

    sim: SimulationOutput
    b_ref: float = DEFAULT_B_REF

    def __post_init__(self):
        if float(self.b_ref) not in self.sim.powder_averages:
            raise ValidationError(
                f"simulation has no b={self.b_ref} shell for the oracle translator"
            )

    def translate(self, vol, meta):
        if meta.index < 0 or meta.index >= len(self.sim.transforms):
            raise ValidationError(
                "oracle translator needs the volume's dataset index in meta"
            )
        powder = self.sim.powder_averages[float(self.b_ref)]
        transform = self.sim.transforms[meta.index]
        if transform.is_identity:
            return powder
        return apply_distortion(powder, transform)


def translate(kind, vol, meta):
    """Apply a translator; kind is one of the translator instances above."""
    return kind.translate(vol, meta)


def build_template(dataset, b_ref=DEFAULT_B_REF):
    """Voxelwise mean of all volumes with b = b_ref."""
    idx = dataset.gradients.shell_indices(b_ref)
    if idx.size == 0:
        raise ValidationError(f"dataset has no shell at b = {b_ref}")
    mean = np.mean([dataset.volumes[i].data for i in idx], axis=0)
    return dataset.volumes[0].with_data(mean)


def make_translator(name, dataset=None, b_ref=DEFAULT_B_REF, sim=None,
                    n_quantiles=DEFAULT_N_QUANTILES):
    """Build a translator by name: identity, histogram or oracle."""
    if name == "identity":
        return IdentityTranslator()
    if name in ("histogram", "histogram_match"):
        if dataset is None:
            raise ValidationError("histogram translator needs a dataset for its template")
        return HistogramMatchTranslator(build_template(dataset, b_ref), n_quantiles)
    if name == "oracle":
        if sim is None:
            raise ValidationError(
                "oracle translator requested without simulation ground truth"
            )
        return OracleTranslator(sim, b_ref)
    raise ValidationError(f"unknown translator {name!r}")
