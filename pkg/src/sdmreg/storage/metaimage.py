"""MetaImage (.mhd + .raw) reader and writer for volumes and displacement fields.

Only uncompressed, little-endian, axis-aligned 3D images are supported. The
payload is stored x fastest; vector fields interleave their 3 channels per
voxel.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..errors import (
    HeaderValueError,
    MissingHeaderKeyError,
    PayloadSizeError,
    UnknownHeaderKeyError,
    UnsupportedElementTypeError,
)
from ..volume import DisplacementField, Grid, Volume, VolumeKind

logger = logging.getLogger(__name__)

ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}

HEADER_ORDER = (
    "ObjectType",
    "NDims",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementSpacing",
    "Offset",
    "DimSize",
    "ElementNumberOfChannels",
    "ElementType",
    "ElementDataFile",
)
REQUIRED_KEYS = ("ObjectType", "NDims", "DimSize", "ElementType", "ElementDataFile")

# Keys written by common ITK/MITK tools that carry no information we need.
_ALIASES = {"ElementByteOrderMSB": "BinaryDataByteOrderMSB", "Origin": "Offset", "Position": "Offset"}
_BENIGN_KEYS = ("CompressedData", "TransformMatrix", "CenterOfRotation", "AnatomicalOrientation")

MetaObject = Union[Volume, DisplacementField]


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1"):
        return True
    if lowered in ("false", "0"):
        return False
    raise HeaderValueError(f"{key} must be True or False, got '{value}'")


def _parse_numbers(key: str, value: str, cast, count: int = 3) -> Tuple:
    try:
        numbers = tuple(cast(v) for v in value.split())
    except ValueError:
        raise HeaderValueError(f"{key} has non-numeric value '{value}'")
    if len(numbers) != count:
        raise HeaderValueError(f"{key} needs {count} values, got {len(numbers)}")
    return numbers


def _split_header(raw: bytes, path: Path) -> Tuple[Dict[str, str], bytes]:
    """Header fields up to ElementDataFile and any bytes that follow it."""
    fields: Dict[str, str] = {}
    offset = 0
    while offset < len(raw):
        end = raw.find(b"\n", offset)
        end = len(raw) if end < 0 else end
        try:
            line = raw[offset:end].decode("ascii").strip()
        except UnicodeDecodeError:
            raise HeaderValueError(f"{path}: header is not ASCII text")
        offset = end + 1
        if not line:
            continue
        if "=" not in line:
            raise HeaderValueError(f"{path}: malformed header line '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in HEADER_ORDER and key not in _BENIGN_KEYS:
            raise UnknownHeaderKeyError(f"{path}: unknown header key '{key}'")
        fields[key] = value
        if key == "ElementDataFile":
            return fields, raw[offset:]
    return fields, b""


def _check_benign(fields: Dict[str, str], path: Path) -> None:
    if "CompressedData" in fields and _parse_bool("CompressedData", fields["CompressedData"]):
        raise HeaderValueError(f"{path}: compressed payloads are not supported")
    if "TransformMatrix" in fields:
        matrix = np.asarray(_parse_numbers("TransformMatrix", fields["TransformMatrix"], float, 9))
        if not np.allclose(matrix, np.eye(3).ravel()):
            raise HeaderValueError(f"{path}: only axis-aligned images are supported")


def read_mhd(path: Union[str, Path], kind: Optional[Union[str, VolumeKind]] = None) -> MetaObject:
    """Load a 3D MetaImage as a Volume (1 channel) or DisplacementField (3 channels).

    Single-channel MET_UCHAR images holding only 0/1 load as binary masks unless
    ``kind`` says otherwise; everything else defaults to intensity.
    """
    path = Path(path)
    fields, trailing = _split_header(path.read_bytes(), path)
    for key in REQUIRED_KEYS:
        if key not in fields:
            raise MissingHeaderKeyError(f"{path}: missing header key '{key}'")
    _check_benign(fields, path)

    if fields["ObjectType"] != "Image":
        raise HeaderValueError(f"{path}: ObjectType must be Image, got '{fields['ObjectType']}'")
    if fields["NDims"] != "3":
        raise HeaderValueError(f"{path}: NDims must be 3, got '{fields['NDims']}'")
    if not _parse_bool("BinaryData", fields.get("BinaryData", "True")):
        raise HeaderValueError(f"{path}: ASCII payloads are not supported")
    if _parse_bool("BinaryDataByteOrderMSB", fields.get("BinaryDataByteOrderMSB", "False")):
        raise HeaderValueError(f"{path}: big-endian payloads are not supported")

    dims = _parse_numbers("DimSize", fields["DimSize"], int)
    spacing = _parse_numbers("ElementSpacing", fields.get("ElementSpacing", "1 1 1"), float)
    origin = _parse_numbers("Offset", fields.get("Offset", "0 0 0"), float)
    try:
        channels = int(fields.get("ElementNumberOfChannels", "1"))
    except ValueError:
        raise HeaderValueError(f"{path}: ElementNumberOfChannels must be an integer")
    if channels not in (1, 3):
        raise HeaderValueError(f"{path}: ElementNumberOfChannels must be 1 or 3, got {channels}")
    element_type = fields["ElementType"]
    if element_type not in ELEMENT_TYPES:
        raise UnsupportedElementTypeError(f"{path}: unsupported ElementType '{element_type}'")
    try:
        grid = Grid(dims, spacing, origin)
    except ValueError as e:
        raise HeaderValueError(f"{path}: {e}")

    data_file = fields["ElementDataFile"]
    payload = trailing if data_file == "LOCAL" else (path.parent / data_file).read_bytes()
    dtype = ELEMENT_TYPES[element_type]
    expected = grid.size * channels * dtype.itemsize
    if len(payload) != expected:
        raise PayloadSizeError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    logger.debug("Read %s: dims %s, %s, %d channel(s)", path, dims, element_type, channels)

    if channels == 3:
        return DisplacementField(grid, values.reshape(-1, 3))
    if kind is None:
        is_binary = element_type == "MET_UCHAR" and np.all(values <= 1.0)
        kind = VolumeKind.BINARY_MASK if is_binary else VolumeKind.INTENSITY
    return Volume(grid, values, VolumeKind(kind))


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _header_lines(grid: Grid, channels: int, element_type: str, data_file: str) -> List[str]:
    fields = {
        "ObjectType": "Image",
        "NDims": "3",
        "BinaryData": "True",
        "BinaryDataByteOrderMSB": "False",
        "ElementSpacing": _format_floats(grid.spacing),
        "Offset": _format_floats(grid.origin),
        "DimSize": " ".join(str(d) for d in grid.dims),
        "ElementNumberOfChannels": str(channels),
        "ElementType": element_type,
        "ElementDataFile": data_file,
    }
    return [f"{key} = {fields[key]}" for key in HEADER_ORDER]


def write_mhd(obj: MetaObject, path: Union[str, Path], element_type: Optional[str] = None) -> Path:
    """Write ``obj`` as ``path`` (.mhd header) plus a sibling .raw payload.

    Binary masks default to MET_UCHAR, everything else to MET_FLOAT.
    Returns the payload path.
    """
    path = Path(path)
    if isinstance(obj, DisplacementField):
        channels, flat = 3, obj.flat().ravel()
        default_type = "MET_FLOAT"
    else:
        channels, flat = 1, obj.flat()
        default_type = "MET_UCHAR" if obj.kind is VolumeKind.BINARY_MASK else "MET_FLOAT"
    element_type = element_type or default_type
    if element_type not in ELEMENT_TYPES:
        raise UnsupportedElementTypeError(f"unsupported ElementType '{element_type}'")
    if element_type == "MET_UCHAR" and not np.all((flat == np.round(flat)) & (flat >= 0) & (flat <= 255)):
        raise ValueError("MET_UCHAR payloads need integer values in [0, 255]")

    raw_path = path.with_suffix(".raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header_lines(obj.grid, channels, element_type, raw_path.name)
    path.write_text("\n".join(header) + "\n", encoding="ascii")
    raw_path.write_bytes(flat.astype(ELEMENT_TYPES[element_type]).tobytes())
    logger.debug("Wrote %s (%s)", path, element_type)
    return raw_path
