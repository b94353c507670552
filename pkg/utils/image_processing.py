import colorsys
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image as PILImage

from utils.errors import (
    MalformedHeaderError,
    TruncatedImageError,
    UnsupportedMaxvalError,
    ValidationError,
)

logger = logging.getLogger(__name__)

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
PROBE_KINDS = ("gray_ramp", "hue_spectrum")
SPECTRUM_END_DEGREES = 270.0


@dataclass(eq=False)
class Image:
    width: int
    height: int
    channels: int
    data: np.ndarray  # uint8, shape (height, width, channels)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "Image":
        values = np.asarray(array, dtype=np.uint8)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3 or values.shape[2] not in (1, 3) or min(values.shape[:2]) < 1:
            raise ValidationError(f"image array shape {values.shape} is not HxWx1 or HxWx3")
        return cls(width=values.shape[1], height=values.shape[0], channels=values.shape[2], data=values)


def _next_token(raw: bytes, pos: int) -> Tuple[bytes, int]:
    """Read one whitespace-delimited header token, skipping '#' comments"""
    while pos < len(raw):
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
        elif raw[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise MalformedHeaderError("header ended before width, height and maxval were read")
    return raw[start:pos], pos


def decode_netpbm(raw: bytes) -> Image:
    """
    Decode a binary PGM (P5) or PPM (P6) byte string with maxval 255.

    Raises:
        MalformedHeaderError: unknown magic or unparsable header fields
        UnsupportedMaxvalError: maxval other than 255
        TruncatedImageError: payload shorter than width * height * channels
    """
    magic = raw[:2]
    if magic not in (b"P5", b"P6") or (len(raw) > 2 and not raw[2:3].isspace() and raw[2:3] != b"#"):
        raise MalformedHeaderError(f"unsupported magic {magic!r}; expected P5 or P6")
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        token, pos = _next_token(raw, pos)
        if not token.isdigit() or int(token) < 1:
            raise MalformedHeaderError(f"{name} {token!r} is not a positive integer")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedMaxvalError(f"maxval {maxval} is not supported; only 255")

    expected = width * height * channels
    payload = raw[pos + 1:pos + 1 + expected]
    if len(payload) < expected:
        raise TruncatedImageError(f"payload has {len(payload)} bytes, header declares {expected}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).copy()
    return Image(width=width, height=height, channels=channels, data=data)


def load_image(path: Union[str, Path]) -> Image:
    """Load a binary PGM/PPM file"""
    image = decode_netpbm(Path(path).read_bytes())
    logger.debug("loaded %s: %dx%dx%d", path, image.width, image.height, image.channels)
    return image


def save_image(image: Image, path: Union[str, Path]):
    """Write a PGM (grayscale) or PPM (colour) file through Pillow"""
    array = image.data[:, :, 0] if image.channels == 1 else image.data
    PILImage.fromarray(np.ascontiguousarray(array)).save(str(path), format="PPM")


def to_gray(image: Image) -> Image:
    """ITU-R BT.601 luma, rounded half up; grayscale input is returned unchanged"""
    if image.channels == 1:
        return image
    luma = image.data.astype(np.float64) @ GRAY_WEIGHTS
    gray = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
    return Image.from_array(gray)


def gen_probe(kind: str, width: int, height: int) -> Image:
    """
    Build an RGB probe image whose content varies only across columns.

    Args:
        kind: gray_ramp (linear 0..255 luminance) or hue_spectrum (saturated
            hue sweep from 0 to 270 degrees)
        width: number of columns, at least 2
        height: number of rows

    Returns:
        Image with 3 channels
    """
    if kind not in PROBE_KINDS:
        raise ValidationError(f"probe kind must be one of {PROBE_KINDS}, got {kind!r}")
    if width < 2 or height < 1:
        raise ValidationError("probe needs width >= 2 and height >= 1")
    fraction = np.arange(width) / (width - 1)
    if kind == "gray_ramp":
        column = np.floor(255.0 * fraction + 0.5)[:, None].repeat(3, axis=1)
    else:
        rgb = [colorsys.hsv_to_rgb(SPECTRUM_END_DEGREES * f / 360.0, 1.0, 1.0) for f in fraction]
        column = np.floor(255.0 * np.array(rgb) + 0.5)
    row = column.astype(np.uint8)
    return Image.from_array(np.broadcast_to(row, (height, width, 3)).copy())
