"""Image input: PPM decoding, bilinear resize and conversion to a [0, 1] NCHW tensor."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ImageError


@dataclass(frozen=True, eq=False)
class ImageInput:
    """8-bit RGB image, pixels of shape (height, width, 3)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ImageError(f"image dimensions must be >= 1, got {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width, 3):
            raise ImageError(f"pixel array {self.pixels.shape} != ({self.height}, {self.width}, 3)")


def _tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i >= len(data):
            raise ImageError("truncated PPM header")
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        out.append(data[i:j])
        i = j
    return out, i


def decode_ppm(data: bytes) -> ImageInput:
    """Decode binary (P6) or ASCII (P3) PPM. 16-bit samples are scaled to 8 bits."""
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic not in (b"P6", b"P3"):
        raise ImageError(f"not a PPM file (magic {magic!r})")
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageError(f"malformed PPM header: {exc}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageError(f"invalid PPM header {width}x{height} maxval {maxval}")
    count = width * height * 3
    if magic == b"P6":
        body = data[pos + 1:]
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        need = count * np.dtype(dtype).itemsize
        if len(body) < need:
            raise ImageError(f"truncated PPM payload: {len(body)} < {need} bytes")
        samples = np.frombuffer(body[:need], dtype=dtype).astype(np.uint32)
    else:
        try:
            samples = np.array(data[pos:].split()[:count], dtype=np.uint32)
        except ValueError as exc:
            raise ImageError(f"malformed P3 sample: {exc}") from exc
        if samples.size < count:
            raise ImageError("truncated P3 payload")
    if samples.max(initial=0) > maxval:
        raise ImageError("sample exceeds maxval")
    if maxval != 255:
        samples = (samples * 255 + maxval // 2) // maxval
    return ImageInput(width, height, samples.astype(np.uint8).reshape(height, width, 3))


def encode_ppm(img: ImageInput) -> bytes:
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + np.ascontiguousarray(img.pixels, np.uint8).tobytes()


def load_image(path: Union[str, Path]) -> ImageInput:
    """Read a PPM; other formats go through Pillow when it is installed."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc}") from exc
    if data[:2] in (b"P6", b"P3"):
        return decode_ppm(data)
    try:
        from PIL import Image
    except ImportError:
        raise ImageError(f"{path}: unsupported format (only PPM without Pillow)") from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:  # Pillow raises a zoo of types
        raise ImageError(f"cannot decode {path}: {exc}") from exc
    return ImageInput(arr.shape[1], arr.shape[0], arr)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(np.float32)
    return i0, i1, frac


def resize_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float array, half-pixel centres, no antialiasing."""
    h, w = x.shape[:2]
    if (h, w) == (height, width):
        return x.copy()
    r0, r1, fr = _axis_weights(h, height)
    c0, c1, fc = _axis_weights(w, width)
    # a + f * (b - a) leaves constant regions exact
    rows = x[r0] + fr[:, None, None] * (x[r1] - x[r0])
    return rows[:, c0] + fc[None, :, None] * (rows[:, c1] - rows[:, c0])


def preprocess(img: ImageInput, resolution: int = 224) -> np.ndarray:
    """Resize to ``resolution`` square and scale to [0, 1]; returns (1, 3, R, R) float32.

    No mean/std normalisation.
    """
    x = img.pixels.astype(np.float32) / np.float32(255)
    x = resize_bilinear(x, resolution, resolution).astype(np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None])
