"""Image decoding, sRGB to CIE Lab conversion and the 4-level pyramid."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from cxsearch.errors import DecodeError, TooSmall

MIN_SIDE = 32
PYRAMID_LEVELS = 4

# D65 reference white (CIE 1931 2 degree observer)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# fixed normalization ranges for L, a, b
LAB_LOW = np.array([0.0, -128.0, -128.0])
LAB_HIGH = np.array([100.0, 127.0, 127.0])

_SUPPORTED_FORMATS = {"PNG", "JPEG"}


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit sRGB raster stored as an ``(height, width, 3)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be a (height, width, 3) uint8 array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def content_hash(self) -> str:
        """Hex SHA-256 over the dimensions and raw pixel bytes."""
        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}:".encode())
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        return h.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RgbImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True)
class LabImage:
    """Normalized Lab raster, ``(height, width, 3)`` float64, every value in [0, 1]."""

    data: np.ndarray

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def L(self) -> np.ndarray:
        return self.data[..., 0]


@dataclass(frozen=True)
class LabPyramid:
    levels: tuple[LabImage, ...]


def decode_image(blob: bytes, min_side: int = MIN_SIDE) -> RgbImage:
    """Decode PNG or JPEG bytes to an :class:`RgbImage`.

    Raises:
        DecodeError: malformed, truncated or unsupported input.
        TooSmall: either side is shorter than ``min_side``.
    """
    try:
        with Image.open(io.BytesIO(blob)) as im:
            if im.format not in _SUPPORTED_FORMATS:
                raise DecodeError(f"unsupported image format: {im.format}")
            im.load()
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except DecodeError:
        raise
    except UnidentifiedImageError as exc:
        raise DecodeError("not a recognised PNG or JPEG image") from exc
    except (OSError, ValueError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc
    if rgb.shape[0] < min_side or rgb.shape[1] < min_side:
        raise TooSmall(f"image is {rgb.shape[1]}x{rgb.shape[0]}, need at least {min_side}x{min_side}")
    return RgbImage(np.ascontiguousarray(rgb))


def encode_png(img: RgbImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.pixels, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def srgb_to_lab_raw(rgb: np.ndarray) -> np.ndarray:
    """Un-normalized CIE Lab (D65) for an ``(..., 3)`` array of 8-bit sRGB values."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    linear = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _SRGB_TO_XYZ.T / D65_WHITE
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def normalize_lab(lab: np.ndarray) -> np.ndarray:
    return np.clip((lab - LAB_LOW) / (LAB_HIGH - LAB_LOW), 0.0, 1.0)


def rgb_to_lab(img: RgbImage) -> LabImage:
    return LabImage(normalize_lab(srgb_to_lab_raw(img.pixels)))


def downsample(data: np.ndarray) -> np.ndarray:
    """2x2 box filter and decimation; odd edges are replicated so sizes round up."""
    h, w = data.shape[:2]
    pad_h, pad_w = h % 2, w % 2
    if pad_h or pad_w:
        pad = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (data.ndim - 2)
        data = np.pad(data, pad, mode="edge")
    return 0.25 * (data[0::2, 0::2] + data[1::2, 0::2] + data[0::2, 1::2] + data[1::2, 1::2])


def build_pyramid(img: LabImage, levels: int = PYRAMID_LEVELS) -> LabPyramid:
    out = [img]
    for _ in range(levels - 1):
        out.append(LabImage(downsample(out[-1].data)))
    return LabPyramid(tuple(out))
