"""8-bit PNG rendering of images and deformation fields (Pillow)."""

from __future__ import annotations

import colorsys
import io

import numpy as np
from PIL import Image, ImageDraw

from hmlab.warp import DeformationField

KINDS = ("magnitude", "field_color", "field_quiver")
MID_GRAY = 128


def magnitude_image(img, window: float = 1.0) -> Image.Image:
    """Gray image of ``|img|`` windowed to ``[0, window * max]``."""
    if window <= 0:
        raise ValueError("window must be positive")
    mag = np.abs(np.asarray(img))
    top = window * mag.max()
    if top == 0:
        return Image.fromarray(np.zeros(mag.shape, dtype=np.uint8), "L")
    out = np.clip(mag / top, 0.0, 1.0)
    return Image.fromarray(np.round(255 * out).astype(np.uint8), "L")


def _hue_rgb(angle):
    """Fully saturated color per direction angle (radians)."""
    hue = (angle / (2 * np.pi)) % 1.0
    rgb = np.array([colorsys.hsv_to_rgb(h, 1.0, 1.0) for h in hue.ravel()])
    return rgb.reshape(angle.shape + (3,))


def field_color_image(u: DeformationField, window: float = 1.0) -> Image.Image:
    """Hue encodes direction, saturation the magnitude relative to
    ``window * max |u|``; zero displacement is mid-gray."""
    if window <= 0:
        raise ValueError("window must be positive")
    mag = u.magnitude()
    top = window * mag.max()
    if top == 0:
        return Image.fromarray(np.full(mag.shape + (3,), MID_GRAY, dtype=np.uint8), "RGB")
    strength = np.clip(mag / top, 0.0, 1.0)[..., None]
    rgb = MID_GRAY + strength * (255.0 * _hue_rgb(np.arctan2(u.dy, u.dx)) - MID_GRAY)
    return Image.fromarray(np.round(rgb).astype(np.uint8), "RGB")


def field_quiver_image(u: DeformationField, window: float = 1.0, step: int = 8, scale: int = 4,
                       background=None) -> Image.Image:
    """White arrows on a black (or magnitude) background, one per ``step``
    pixels; the longest arrow spans ``0.75 * step / window`` grid pixels so
    neighbouring arrows do not touch."""
    if window <= 0 or step < 1 or scale < 1:
        raise ValueError("window, step and scale must be positive")
    h, w = u.shape
    if background is None:
        canvas = Image.new("RGB", (w * scale, h * scale), (0, 0, 0))
    else:
        canvas = magnitude_image(background).resize((w * scale, h * scale), Image.NEAREST).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    peak = u.magnitude().max()
    if peak == 0:
        return canvas
    gain = 0.75 * step / (window * peak)
    for y in range(step // 2, h, step):
        for x in range(step // 2, w, step):
            dx, dy = u.dx[y, x] * gain, u.dy[y, x] * gain
            x0, y0 = (x + 0.5) * scale, (y + 0.5) * scale
            x1, y1 = x0 + dx * scale, y0 + dy * scale
            draw.line([(x0, y0), (x1, y1)], fill=(255, 255, 255), width=1)
            length = np.hypot(x1 - x0, y1 - y0)
            if length > 2:
                ang = np.arctan2(y1 - y0, x1 - x0)
                head = min(3.0, 0.4 * length)
                for side in (2.6, -2.6):
                    draw.line([(x1, y1), (x1 + head * np.cos(ang + side), y1 + head * np.sin(ang + side))],
                              fill=(255, 255, 255), width=1)
    return canvas


def render(obj, kind: str, window: float = 1.0, **kw) -> Image.Image:
    if kind not in KINDS:
        raise ValueError(f"unknown render kind {kind!r}; choose from {KINDS}")
    if kind == "magnitude":
        if isinstance(obj, DeformationField):
            raise ValueError("magnitude rendering needs an image, got a field")
        return magnitude_image(obj, window)
    if not isinstance(obj, DeformationField):
        raise ValueError(f"{kind} rendering needs a field, got an image")
    if kind == "field_color":
        return field_color_image(obj, window)
    return field_quiver_image(obj, window, **kw)


def png_bytes(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def load_png(path, shape=None) -> np.ndarray:
    """Gray PNG as a complex image scaled to ``[0, 1]``."""
    with Image.open(path) as im:
        gray = im.convert("L")
        if shape is not None and gray.size != (shape[1], shape[0]):
            raise ValueError(f"{path}: size {gray.size[::-1]} does not match grid {tuple(shape)}")
        arr = np.asarray(gray, dtype=np.float64) / 255.0
    return arr.astype(np.complex128)
