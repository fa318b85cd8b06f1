"""Typed errors raised across the package.

Everything user-facing derives from :class:`EddycorrError`; the CLI maps
these to exit code 2 (data/validation errors) while genuine usage errors
exit with code 1.
"""


class EddycorrError(Exception):
    """Base class for all package errors."""


class ValidationError(EddycorrError):
    """Invalid argument values or inconsistent inputs."""


class GeometryError(EddycorrError):
    """Grid geometries that were required to match do not."""


class NonInvertibleTransformError(EddycorrError):
    """A transform is not monotone along the PED and cannot be inverted."""


class ConvergenceError(EddycorrError):
    """An iterative solver failed to converge within its iteration budget."""


class FormatError(EddycorrError):
    """Malformed or unsupported file content (NIfTI, bvals/bvecs, JSON schemas)."""
