"""File formats: single-file NIfTI-1 (.nii / .nii.gz), FSL-style bvals/bvecs,
and the package's JSON schemas.

All writers are deterministic (gzip mtime pinned to 0, JSON keys sorted) and
atomic (temp file in the destination directory, then rename), so identical
inputs produce byte-identical files and interrupted runs never leave
truncated output.
"""

import gzip
import json
import os
import tempfile

import numpy as np

from .dataset import GradientTable
from .errors import FormatError
from .grid import Volume3
from .transforms import EddyMotionTransform, GridGeometry, QuadEddyParams, RigidParams

__all__ = [
    "read_nifti",
    "write_nifti",
    "read_bvals_bvecs",
    "write_bvals_bvecs",
    "read_json",
    "write_json",
    "transform_to_dict",
    "transform_from_dict",
    "read_transform",
    "write_transform",
]

_HEADER_DTD = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
_HEADER_DTYPE = np.dtype(_HEADER_DTD)
_HEADER_SIZE = 348
_VOX_OFFSET = 352

# datatype code -> numpy dtype; deliberately restricted.
_SUPPORTED_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def _atomic_write_bytes(path, payload, gz):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            if gz:
                # mtime pinned for byte-identical reruns.
                with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gzf:
                    gzf.write(payload)
            else:
                f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _open_for_read(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_nifti(path, ped_axis=1):
    """Read a single-file NIfTI-1 image.

    Returns a Volume3 for 3D files and a list of Volume3 (volume-major) for
    4D files. scl_slope/scl_inter are applied; spacing/origin come from the
    sform when set, else the qform offset with pixdim spacing, else pixdim.

    Raises FormatError for bad magic, truncated data or unsupported dtypes.
    """
    with _open_for_read(path) as f:
        raw = f.read(_HEADER_SIZE)
        if len(raw) < _HEADER_SIZE:
            raise FormatError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")
        hdr = np.frombuffer(raw, dtype=_HEADER_DTYPE)[0]
        if int(hdr["sizeof_hdr"]) != _HEADER_SIZE:
            hdr = np.frombuffer(raw, dtype=_HEADER_DTYPE.newbyteorder())[0]
            if int(hdr["sizeof_hdr"]) != _HEADER_SIZE:
                raise FormatError(f"{path}: bad NIfTI magic / header size")
        magic = bytes(hdr["magic"])
        if magic[:3] == b"ni1":
            raise FormatError(
                f"{path}: two-file NIfTI (.hdr/.img pair) is not supported"
            )
        if magic[:3] != b"n+1":
            raise FormatError(f"{path}: bad NIfTI magic {magic!r}")

        dtcode = int(hdr["datatype"])
        if dtcode not in _SUPPORTED_DTYPES:
            raise FormatError(
                f"{path}: unsupported NIfTI datatype code {dtcode} "
                f"(supported: uint8=2, int16=4, float32=16)"
            )
        dtype = np.dtype(_SUPPORTED_DTYPES[dtcode])
        if hdr.dtype != _HEADER_DTYPE:  # byteswapped file
            dtype = dtype.newbyteorder()

        ndim = int(hdr["dim"][0])
        if ndim not in (3, 4):
            raise FormatError(f"{path}: only 3D/4D images supported, dim[0]={ndim}")
        shape = tuple(int(d) for d in hdr["dim"][1 : 1 + ndim])
        if any(d < 1 for d in shape):
            raise FormatError(f"{path}: invalid dims {shape}")

        offset = max(int(hdr["vox_offset"]), _HEADER_SIZE)
        f.seek(offset)
        count = int(np.prod(shape))
        payload = f.read(count * dtype.itemsize)
        if len(payload) < count * dtype.itemsize:
            raise FormatError(
                f"{path}: truncated NIfTI data "
                f"(expected {count * dtype.itemsize} bytes, got {len(payload)})"
            )
        data = np.frombuffer(payload, dtype=dtype, count=count)
        data = data.reshape(shape, order="F").astype(np.float64)

        slope = float(hdr["scl_slope"])
        inter = float(hdr["scl_inter"])
        if np.isfinite(slope) and slope != 0.0 and (slope, inter) != (1.0, 0.0):
            data = data * slope + inter

        if int(hdr["sform_code"]) > 0:
            srow = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]], dtype=float)
            spacing = np.linalg.norm(srow[:, :3], axis=0)
            origin = srow[:, 3]
        elif int(hdr["qform_code"]) > 0:
            spacing = np.abs(np.array(hdr["pixdim"][1:4], dtype=float))
            origin = np.array(
                [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]], dtype=float
            )
        else:
            spacing = np.abs(np.array(hdr["pixdim"][1:4], dtype=float))
            origin = np.zeros(3)
        spacing = np.where(spacing > 0, spacing, 1.0)

    dims = shape[:3]
    if ndim == 3:
        return Volume3(data, dims, spacing, origin, ped_axis)
    return [
        Volume3(data[..., i], dims, spacing, origin, ped_axis)
        for i in range(shape[3])
    ]


def write_nifti(path, data, spacing=None, origin=None):
    """Write a Volume3, a list of Volume3, or a raw 3D/4D array as float32.

    Data is written with scl_slope=1, scl_inter=0 and a diagonal sform; the
    file is gzipped when the name ends in .gz.
    """
    if isinstance(data, Volume3):
        arr = data.data
        spacing = data.spacing if spacing is None else spacing
        origin = data.origin if origin is None else origin
    elif isinstance(data, (list, tuple)) and data and isinstance(data[0], Volume3):
        arr = np.stack([v.data for v in data], axis=-1)
        spacing = data[0].spacing if spacing is None else spacing
        origin = data[0].origin if origin is None else origin
    else:
        arr = np.asarray(data, dtype=float)
    if arr.ndim not in (3, 4):
        raise FormatError(f"can only write 3D/4D data, got shape {arr.shape}")
    spacing = (1.0, 1.0, 1.0) if spacing is None else tuple(float(s) for s in spacing)
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)

    hdr = np.zeros((), dtype=_HEADER_DTYPE)
    hdr["sizeof_hdr"] = _HEADER_SIZE
    hdr["regular"] = b"r"
    dims = np.ones(8, dtype=np.int16)
    dims[0] = arr.ndim
    dims[1 : 1 + arr.ndim] = arr.shape
    hdr["dim"] = dims
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = spacing
    if arr.ndim == 4:
        pixdim[4] = 1.0
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = _VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2 | 8  # mm, sec
    hdr["descrip"] = b"eddycorr"
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    srow = np.zeros((3, 4), dtype=np.float32)
    for i in range(3):
        srow[i, i] = spacing[i]
        srow[i, 3] = origin[i]
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = srow
    hdr["magic"] = b"n+1"

    body = np.asarray(arr, dtype=np.float32).ravel(order="F").tobytes()
    payload = hdr.tobytes() + b"\x00" * (_VOX_OFFSET - _HEADER_SIZE) + body
    _atomic_write_bytes(path, payload, gz=str(path).endswith(".gz"))


def _parse_numeric_table(path, text):
    rows = []
    for r, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        vals = []
        for c, tok in enumerate(line.split()):
            try:
                vals.append(float(tok))
            except ValueError:
                raise FormatError(
                    f"{path}: non-numeric token {tok!r} at row {r + 1}, column {c + 1}"
                ) from None
        rows.append(vals)
    return rows


def read_bvals_bvecs(bvals_path, bvecs_path):
    """Read FSL-style whitespace-separated bvals (1xN) and bvecs (3xN)."""
    with open(bvals_path) as f:
        bval_rows = _parse_numeric_table(bvals_path, f.read())
    if len(bval_rows) != 1:
        raise FormatError(f"{bvals_path}: expected a single row of b-values")
    bvals = np.array(bval_rows[0])

    with open(bvecs_path) as f:
        bvec_rows = _parse_numeric_table(bvecs_path, f.read())
    if len(bvec_rows) != 3:
        raise FormatError(f"{bvecs_path}: expected 3 rows of gradient components")
    lens = {len(r) for r in bvec_rows}
    if len(lens) != 1:
        raise FormatError(f"{bvecs_path}: rows have inconsistent lengths {sorted(lens)}")
    n = lens.pop()
    if n != bvals.size:
        raise FormatError(
            f"gradient table mismatch: {bvals.size} b-values but {n} directions"
        )
    bvecs = np.array(bvec_rows).T
    return GradientTable(bvals, bvecs)


def write_bvals_bvecs(table, bvals_path, bvecs_path):
    bvals_text = " ".join(f"{v:.10g}" for v in table.bvals) + "\n"
    lines = []
    for axis in range(3):
        lines.append(" ".join(f"{v:.10g}" for v in table.bvecs[:, axis]))
    bvecs_text = "\n".join(lines) + "\n"
    _atomic_write_bytes(bvals_path, bvals_text.encode(), gz=False)
    _atomic_write_bytes(bvecs_path, bvecs_text.encode(), gz=False)


def write_json(path, obj):
    """Deterministic, atomic JSON write (sorted keys, 2-space indent)."""
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(path, text.encode(), gz=False)


def read_json(path):
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON: {e}") from None


def check_fields(obj, required, optional=(), what="document"):
    """Require a dict with exactly the given fields; name any offender."""
    if not isinstance(obj, dict):
        raise FormatError(f"{what}: expected a JSON object")
    for k in required:
        if k not in obj:
            raise FormatError(f"{what}: missing field \"{k}\"")
    for k in obj:
        if k not in required and k not in optional:
            raise FormatError(f"{what}: unknown field \"{k}\"")


_TRANSFORM_UNITS = {
    "eddy": "normalized displacement along ped_axis; polynomial over "
            "volume-centered [-1,1]^3 coordinates",
    "rigid.euler": "radians about the x, y, z axes; z applied first, "
                   "rotation about the volume center",
    "rigid.trans": "mm",
    "grid.spacing": "mm",
    "grid.origin": "mm",
}


def transform_to_dict(transform):
    g = transform.grid
    return {
        "ped_axis": g.ped_axis,
        "grid": {
            "dims": [int(d) for d in g.dims],
            "spacing": [float(s) for s in g.spacing],
            "origin": [float(o) for o in g.origin],
        },
        "eddy": {
            "q": [float(v) for v in transform.eddy.q],
            "l": [float(v) for v in transform.eddy.l],
            "t": float(transform.eddy.t),
        },
        "rigid": {
            "euler": [float(v) for v in transform.rigid.euler],
            "trans": [float(v) for v in transform.rigid.trans],
        },
        "units": _TRANSFORM_UNITS,
    }


def transform_from_dict(doc, what="transform"):
    check_fields(doc, ["ped_axis", "grid", "eddy", "rigid"], ["units"], what)
    check_fields(doc["grid"], ["dims", "spacing", "origin"], (), f"{what}.grid")
    check_fields(doc["eddy"], ["q", "l", "t"], (), f"{what}.eddy")
    check_fields(doc["rigid"], ["euler", "trans"], (), f"{what}.rigid")
    grid = GridGeometry(
        tuple(doc["grid"]["dims"]),
        tuple(doc["grid"]["spacing"]),
        np.array(doc["grid"]["origin"], dtype=float),
        int(doc["ped_axis"]),
    )
    eddy = QuadEddyParams(
        q=np.array(doc["eddy"]["q"], dtype=float),
        l=np.array(doc["eddy"]["l"], dtype=float),
        t=float(doc["eddy"]["t"]),
    )
    rigid = RigidParams(
        euler=np.array(doc["rigid"]["euler"], dtype=float),
        trans=np.array(doc["rigid"]["trans"], dtype=float),
    )
    return EddyMotionTransform(eddy, rigid, grid)


def write_transform(path, transform):
    write_json(path, transform_to_dict(transform))


def read_transform(path):
    return transform_from_dict(read_json(path), what=str(path))
