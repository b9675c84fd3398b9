"""File formats: NIfTI-1, the raw tensor interchange format, label codings and case manifests.

Raw tensor layout (all little-endian)::

    offset  0  8 bytes  magic b"VOLT0001"
    offset  8  4 x u32  C, nx, ny, nz
    offset 24  3 x f32  spacing (mm)
    offset 36  C*nx*ny*nz x f32, channel-major, x fastest within a channel

Manifest: an INI file with one section per case; the section name is the
case id and the keys ``t1``, ``t1ce``, ``t2``, ``flair`` (and optionally
``seg``) hold paths relative to the manifest's directory::

    [BraTS2021_00000]
    t1 = images/BraTS2021_00000_t1.nii.gz
    t1ce = images/BraTS2021_00000_t1ce.nii.gz
    t2 = images/BraTS2021_00000_t2.nii.gz
    flair = images/BraTS2021_00000_flair.nii.gz
    seg = gt/BraTS2021_00000.nii.gz
"""

from __future__ import annotations

import configparser
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import ChannelVolume, LabelVolume, ScalarVolume, SchemaError


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class HeaderError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class UnsupportedDatatypeError(FormatError):
    pass


class TruncatedDataError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class OrientationError(FormatError):
    pass


class LabelCodingError(SchemaError):
    pass


class ManifestError(ValueError):
    pass


# -- NIfTI-1 ---------------------------------------------------------------

NIFTI_DTYPES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32), 64: np.dtype(np.float64)}
NIFTI_CODES = {v: k for k, v in NIFTI_DTYPES.items()}
HEADER_SIZE = 348
VOX_OFFSET = 352


def _read_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _check_orientation(hdr: bytes, e: str) -> None:
    qform_code, sform_code = struct.unpack_from(e + "2h", hdr, 252)
    if sform_code > 0:
        rows = np.array(struct.unpack_from(e + "12f", hdr, 280), dtype=np.float64).reshape(3, 4)[:, :3]
    elif qform_code > 0:
        b, c, d = struct.unpack_from(e + "3f", hdr, 256)
        a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        rows = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ])
    else:
        return
    off = rows - np.diag(np.diag(rows))
    if np.abs(off).max() > 1e-4 * max(np.abs(rows).max(), 1e-12) or np.any(np.diag(rows) == 0):
        raise OrientationError("only axis-aligned orientations are supported", 252 if sform_code <= 0 else 280)


def read_nifti(path, labels: bool | None = None):
    """Read a single-file (``n+1``) or paired (``ni1``) NIfTI-1 volume.

    Returns a :class:`LabelVolume` for uint8 data (or when ``labels`` is
    True) and a :class:`ScalarVolume` otherwise. Arrays are indexed
    ``[x, y, z]``.
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"{path}: file shorter than the {HEADER_SIZE}-byte header", len(raw))
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        e = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        e = ">"
    else:
        raise HeaderError(f"{path}: sizeof_hdr is not {HEADER_SIZE}", 0)
    hdr = raw[:HEADER_SIZE]
    magic = hdr[344:348]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise BadMagicError(f"{path}: bad magic {magic!r}", 344)
    dim = struct.unpack_from(e + "8h", hdr, 40)
    if dim[0] != 3:
        raise HeaderError(f"{path}: expected a 3D volume, dim[0] = {dim[0]}", 40)
    dims = dim[1:4]
    if any(d <= 0 for d in dims):
        raise HeaderError(f"{path}: nonpositive dimensions {dims}", 42)
    code, bitpix = struct.unpack_from(e + "2h", hdr, 70)
    if code not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}", 70)
    dtype = NIFTI_DTYPES[code].newbyteorder(e)
    if bitpix != dtype.itemsize * 8:
        raise HeaderError(f"{path}: bitpix {bitpix} inconsistent with datatype {code}", 72)
    pixdim = struct.unpack_from(e + "8f", hdr, 76)
    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    vox_offset, slope, inter = struct.unpack_from(e + "3f", hdr, 108)
    _check_orientation(hdr, e)

    if magic == b"ni1\0":
        name = path.name
        img_name = name.replace(".hdr", ".img") if ".hdr" in name else name + ".img"
        data_bytes, start = _read_bytes(path.with_name(img_name)), int(vox_offset)
    else:
        data_bytes, start = raw, int(vox_offset)
        if start < HEADER_SIZE:
            raise HeaderError(f"{path}: vox_offset {vox_offset} inside the header", 108)
    n = int(np.prod(dims))
    need = n * dtype.itemsize
    if len(data_bytes) < start + need:
        raise TruncatedDataError(
            f"{path}: data section needs {need} bytes from offset {start}, file has {len(data_bytes) - start}",
            len(data_bytes),
        )
    data = np.frombuffer(data_bytes, dtype=dtype, count=n, offset=start).reshape(dims, order="F")
    data = data.astype(dtype.newbyteorder("="))
    if slope != 0 and not (slope == 1 and inter == 0):
        data = data * np.float64(slope) + np.float64(inter)
    if labels is None:
        labels = data.dtype == np.uint8
    if labels:
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.mod(data, 1) == 0):
                raise FormatError(f"{path}: non-integer values in a label volume")
            data = data.astype(np.int32)
        return LabelVolume(data, spacing)
    return ScalarVolume(data, spacing)


def write_nifti(vol, path, datatype=None) -> None:
    """Write a little-endian single-file NIfTI-1; gzip-compressed if the name ends in ``.gz``."""
    path = Path(path)
    data = vol.data
    if datatype is None:
        datatype = np.uint8 if isinstance(vol, LabelVolume) else (data.dtype if data.dtype in NIFTI_CODES else np.float32)
    dtype = np.dtype(datatype)
    if dtype not in NIFTI_CODES:
        raise UnsupportedDatatypeError(f"cannot write datatype {dtype}")
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise FormatError(f"values outside the {dtype} range")
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    nx, ny, nz = data.shape
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, NIFTI_CODES[dtype], dtype.itemsize * 8)
    sx, sy, sz = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 1)
    # quaternion (b, c, d) = 0 and zero offsets: identity orientation
    struct.pack_into("<4f", hdr, 280, sx, 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, sy, 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, sz, 0)
    hdr[344:348] = b"n+1\0"
    payload = bytes(hdr) + np.asarray(data).astype(dtype.newbyteorder("<")).tobytes(order="F")
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


# -- raw tensors -----------------------------------------------------------

RAW_MAGIC = b"VOLT0001"
RAW_HEADER = struct.Struct("<8s4I3f")


def write_raw_tensor(vol: ChannelVolume, path) -> None:
    c, nx, ny, nz = vol.data.shape
    head = RAW_HEADER.pack(RAW_MAGIC, c, nx, ny, nz, *vol.spacing)
    body = np.ascontiguousarray(vol.data.astype("<f4").transpose(0, 3, 2, 1)).tobytes()
    Path(path).write_bytes(head + body)


def read_raw_tensor(path) -> ChannelVolume:
    raw = Path(path).read_bytes()
    if len(raw) < RAW_HEADER.size:
        raise LengthMismatchError(f"{path}: {len(raw)} bytes is shorter than the header", len(raw))
    magic, c, nx, ny, nz, sx, sy, sz = RAW_HEADER.unpack_from(raw)
    if magic != RAW_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}", 0)
    n = c * nx * ny * nz
    if len(raw) != RAW_HEADER.size + 4 * n:
        raise LengthMismatchError(
            f"{path}: expected {RAW_HEADER.size + 4 * n} bytes for {c}x{nx}x{ny}x{nz}, got {len(raw)}", len(raw)
        )
    data = np.frombuffer(raw, dtype="<f4", offset=RAW_HEADER.size).reshape(c, nz, ny, nx).transpose(0, 3, 2, 1)
    return ChannelVolume(data.astype(np.float32), (sx, sy, sz))


# -- label codings ---------------------------------------------------------


@dataclass(frozen=True)
class LabelCoding:
    """Bijective map between on-disk label values and internal class indices."""

    disk_to_internal: dict[int, int] = field(default_factory=lambda: {0: 0, 1: 3, 2: 2, 4: 1})

    def __post_init__(self):
        internal = list(self.disk_to_internal.values())
        if len(set(internal)) != len(internal):
            raise LabelCodingError("label coding is not injective")
        if sorted(internal) != list(range(len(internal))):
            raise LabelCodingError(f"internal labels {sorted(internal)} must cover 0..{len(internal) - 1}")

    @property
    def internal_to_disk(self) -> dict[int, int]:
        return {v: k for k, v in self.disk_to_internal.items()}


def remap_labels(labels: LabelVolume, coding: LabelCoding | None = None, direction: str = "to_internal") -> LabelVolume:
    coding = coding or LabelCoding()
    if direction == "to_internal":
        table = coding.disk_to_internal
    elif direction == "to_disk":
        table = coding.internal_to_disk
    else:
        raise ValueError(f"direction must be 'to_internal' or 'to_disk', got {direction!r}")
    values = np.unique(labels.data)
    missing = [int(v) for v in values if int(v) not in table]
    if missing:
        raise LabelCodingError(f"label values {missing} are not in the coding domain {sorted(table)}")
    lut = np.zeros(int(max(values.max(initial=0), max(table))) + 1, dtype=np.uint8)
    for k, v in table.items():
        lut[k] = v
    return LabelVolume(lut[labels.data], labels.spacing)


# -- manifests -------------------------------------------------------------

MODALITIES = ("t1", "t1ce", "t2", "flair")


@dataclass
class CaseManifest:
    case_id: str
    t1: Path
    t1ce: Path
    t2: Path
    flair: Path
    seg: Path | None = None

    @property
    def modality_paths(self) -> list[Path]:
        return [self.t1, self.t1ce, self.t2, self.flair]


def read_manifest(path) -> list[CaseManifest]:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as e:
        raise ManifestError(f"{path}: {e}") from e
    cases = []
    for case_id in parser.sections():
        sec = parser[case_id]
        missing = [m for m in MODALITIES if m not in sec]
        if missing:
            raise ManifestError(f"{path}: case {case_id} lacks modality keys {missing}")
        paths = {m: path.parent / sec[m] for m in MODALITIES}
        seg = path.parent / sec["seg"] if "seg" in sec else None
        cases.append(CaseManifest(case_id, **paths, seg=seg))
    return cases


def write_manifest(cases: list[CaseManifest], path) -> None:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    for case in cases:
        entries = {m: getattr(case, m) for m in MODALITIES}
        if case.seg is not None:
            entries["seg"] = case.seg
        parser[case.case_id] = {k: _relative(v, path.parent) for k, v in entries.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def _relative(p, base: Path) -> str:
    p = Path(p)
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)


def check_manifest(case: CaseManifest) -> None:
    """Raise :class:`ManifestError` naming the first referenced file that does not exist."""
    for name, p in zip(MODALITIES, case.modality_paths):
        if not p.is_file():
            raise ManifestError(f"case {case.case_id}: {name} file not found: {p}")
    if case.seg is not None and not case.seg.is_file():
        raise ManifestError(f"case {case.case_id}: seg file not found: {case.seg}")


def load_case(case: CaseManifest, coding: LabelCoding | None = None):
    """Load the four modalities as a channel volume plus the remapped ground truth, if any."""
    check_manifest(case)
    vols = [read_nifti(p, labels=False) for p in case.modality_paths]
    first = vols[0]
    for name, v in zip(MODALITIES, vols):
        if v.dims != first.dims or not np.allclose(v.spacing, first.spacing):
            raise ManifestError(f"case {case.case_id}: {name} geometry {v.dims}/{v.spacing} "
                                f"differs from t1 {first.dims}/{first.spacing}")
    image = ChannelVolume(np.stack([v.data.astype(np.float32) for v in vols]), first.spacing)
    gt = None
    if case.seg is not None:
        gt = remap_labels(read_nifti(case.seg, labels=True), coding, "to_internal")
        if gt.dims != image.dims:
            raise ManifestError(f"case {case.case_id}: seg dims {gt.dims} differ from image dims {image.dims}")
    return image, gt
