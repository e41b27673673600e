"""Image loading, saving and pixel-space conversions.

Supported inputs are binary PGM (P5, maxval 255) and 8-bit PNG in grayscale
or RGB without alpha.  Output always goes through the PNG encoder so that a
save/load/save cycle is byte-identical on the second save.  Pixels live in
[0, 1] as float32; the model side works on [-1, 1] fields.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFormatError(ValueError):
    """Raised for files we refuse to decode (bad header, depth, alpha...)."""


@dataclass
class ImageBuffer:
    """A decoded image: float32 pixels in [0, 1], shape (h, w) or (h, w, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise ImageFormatError(f"unsupported pixel shape {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]


def _read_pgm(raw: bytes, path: str) -> np.ndarray:
    # P5 header: magic, width, height, maxval, single whitespace, then payload.
    pos = 2  # past b"P5"
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            eol = raw.find(b"\n", pos)
            if eol < 0:
                raise ImageFormatError(f"{path}: corrupt PGM header")
            pos = eol + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise ImageFormatError(f"{path}: corrupt PGM header")
        fields.append(int(token))
    pos += 1  # the single whitespace byte before the payload
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: corrupt PGM header")
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    payload = raw[pos : pos + width * height]
    if len(payload) < width * height:
        raise ImageFormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def _read_png(raw: bytes, path: str) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"{path}: corrupt PNG ({exc})") from exc
    if img.mode in ("RGBA", "LA", "PA"):
        raise ImageFormatError(f"{path}: alpha channel not supported")
    if img.mode not in ("L", "RGB"):
        raise ImageFormatError(f"{path}: unsupported bit depth or mode ({img.mode})")
    return np.asarray(img, dtype=np.uint8)


def load_image(path: str) -> ImageBuffer:
    """Decode a PGM (P5) or PNG file into float32 pixels in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"P5":
        arr = _read_pgm(raw, path)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        arr = _read_png(raw, path)
    elif raw[:2] in (b"P2", b"P3", b"P6"):
        raise ImageFormatError(f"{path}: unsupported PNM variant (only binary P5)")
    else:
        raise ImageFormatError(f"{path}: unrecognized image format")
    return ImageBuffer(arr.astype(np.float32) / 255.0)


def save_image(buf: ImageBuffer, path: str) -> None:
    """Encode to PNG (always; the canonical output encoder), 8-bit."""
    px = np.clip(buf.pixels, 0.0, 1.0)
    arr = np.round(px * 255.0).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def normalize(buf: ImageBuffer) -> np.ndarray:
    """Map [0, 1] pixels to the [-1, 1] field the model consumes."""
    return (buf.pixels * 2.0 - 1.0).astype(np.float32)


def denormalize(field: np.ndarray) -> ImageBuffer:
    """Inverse of :func:`normalize`; clips to the displayable range."""
    px = (np.asarray(field, dtype=np.float32) + 1.0) / 2.0
    return ImageBuffer(np.clip(px, 0.0, 1.0))


# BT.601 luma weights and the matching chroma scales.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)
_CB_SCALE = 0.564  # 1 / 1.772
_CR_SCALE = 0.713  # 1 / 1.402


def to_luma_chroma(buf: ImageBuffer) -> tuple[np.ndarray, np.ndarray | None]:
    """Split into (luma, chroma).  Grayscale input has chroma None.

    Luma is float32 in [0, 1]; chroma is a (h, w, 2) float32 array holding
    the Cb/Cr offsets so a color source can be reattached after fusion.
    """
    if buf.channels == 1:
        return buf.pixels.copy(), None
    rgb = buf.pixels.astype(np.float64)
    y = rgb @ _LUMA
    cb = _CB_SCALE * (rgb[..., 2] - y)
    cr = _CR_SCALE * (rgb[..., 0] - y)
    return y.astype(np.float32), np.stack([cb, cr], axis=-1).astype(np.float32)


def from_luma_chroma(luma: np.ndarray, chroma: np.ndarray | None) -> ImageBuffer:
    """Rebuild an ImageBuffer from a luma plane and optional Cb/Cr offsets."""
    if chroma is None:
        return ImageBuffer(np.clip(luma, 0.0, 1.0))
    y = np.asarray(luma, dtype=np.float64)
    cb = chroma[..., 0].astype(np.float64)
    cr = chroma[..., 1].astype(np.float64)
    r = y + cr / _CR_SCALE
    b = y + cb / _CB_SCALE
    g = (y - _LUMA[0] * r - _LUMA[2] * b) / _LUMA[1]
    rgb = np.stack([r, g, b], axis=-1)
    return ImageBuffer(np.clip(rgb, 0.0, 1.0).astype(np.float32))


def pad_to_multiple(field: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the trailing rows/cols so both extents divide `multiple`.

    Returns the padded field and the original (h, w) so the result can be
    cropped back.  Reflection excludes the edge row, matching numpy's
    "reflect" mode; an already aligned field is returned unchanged.
    """
    h, w = field.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return field, (h, w)
    if ph >= h or pw >= w:
        raise ValueError(f"image {h}x{w} too small to reflect-pad to multiple {multiple}")
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (field.ndim - 2)
    return np.pad(field, pad, mode="reflect"), (h, w)


def crop_to(field: np.ndarray, extent: tuple[int, int]) -> np.ndarray:
    """Crop back to the pre-padding extent recorded by pad_to_multiple."""
    h, w = extent
    return field[:h, :w]
