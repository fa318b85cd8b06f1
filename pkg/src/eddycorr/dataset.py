"""Gradient tables and 4D diffusion-weighted datasets."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .grid import Volume3

__all__ = ["GradientTable", "DwiDataset", "B0_THRESHOLD"]

# b-values at or below this are treated as b=0 acquisitions.
B0_THRESHOLD = 0.0

_UNIT_TOL = 1e-3


@dataclass(frozen=True)
class GradientTable:
    """Per-volume b-value (s/mm^2) and unit gradient direction.

    b=0 rows carry a zero vector; every other row must be unit length to
    within 1e-3 (renormalized exactly on construction).
    """

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=float).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=float)
        if bvecs.shape != (bvals.size, 3):
            raise ValidationError(
                f"bvecs shape {bvecs.shape} does not match {bvals.size} bvals"
            )
        if np.any(bvals < 0):
            raise ValidationError("b-values must be >= 0")
        bvecs = bvecs.copy()
        norms = np.linalg.norm(bvecs, axis=1)
        for i in range(bvals.size):
            if bvals[i] <= B0_THRESHOLD:
                bvecs[i] = 0.0
            else:
                if abs(norms[i] - 1.0) > _UNIT_TOL:
                    if norms[i] <= _UNIT_TOL:
                        raise ValidationError(
                            f"gradient row {i} has b>0 but a zero direction"
                        )
                bvecs[i] /= norms[i]
        bvals = bvals.copy()
        bvals.flags.writeable = False
        bvecs.flags.writeable = False
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self):
        return self.bvals.size

    @property
    def b0_indices(self):
        return np.flatnonzero(self.bvals <= B0_THRESHOLD)

    @property
    def dw_indices(self):
        return np.flatnonzero(self.bvals > B0_THRESHOLD)

    def shells(self):
        """Sorted unique nonzero b-values."""
        return sorted(set(self.bvals[self.dw_indices].tolist()))

    def shell_indices(self, b):
        return np.flatnonzero(np.isclose(self.bvals, b))


@dataclass(frozen=True)
class DwiDataset:
    """A list of Volume3 sharing one grid, paired with a gradient table."""

    volumes: list
    gradients: GradientTable

    def __post_init__(self):
        if len(self.volumes) != len(self.gradients):
            raise ValidationError(
                f"{len(self.volumes)} volumes but {len(self.gradients)} gradient rows"
            )
        if not self.volumes:
            raise ValidationError("dataset must contain at least one volume")
        first = self.volumes[0]
        for v in self.volumes[1:]:
            if not first.same_geometry(v):
                raise ValidationError("all volumes in a dataset must share geometry")
        object.__setattr__(self, "volumes", list(self.volumes))

    def __len__(self):
        return len(self.volumes)

    @property
    def grid(self):
        return self.volumes[0]

    def data4d(self):
        """Stacked (nx, ny, nz, N) array of all volumes."""
        return np.stack([v.data for v in self.volumes], axis=-1)

    @classmethod
    def from_4d(cls, data4d, gradients, spacing=(1.0, 1.0, 1.0),
                origin=(0.0, 0.0, 0.0), ped_axis=1):
        data4d = np.asarray(data4d, dtype=float)
        if data4d.ndim != 4:
            raise ValidationError("expected a 4D array")
        vols = [
            Volume3(data4d[..., i], data4d.shape[:3], spacing, origin, ped_axis)
            for i in range(data4d.shape[3])
        ]
        return cls(vols, gradients)
