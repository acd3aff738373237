"""Images, label maps, and the spatial/photometric transforms with exact inverses.

Images are float64 arrays of shape (3, H, W) with values in [0, 1]; label maps
are integer arrays of shape (H, W) with class indices or IGNORE. Spatial
resampling is bilinear with corner-aligned sampling (nearest-neighbour for
labels), so constant inputs are reproduced bitwise and flips are involutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import IGNORE, RngStream

LUMA = np.array([0.299, 0.587, 0.114])

# MoCo-v2 photometric recipe: jitter factor ranges and application rates.
JITTER_PROB = 0.5
BLUR_PROB = 0.5
GREYSCALE_PROB = 0.2
FACTOR_RANGE = (0.6, 1.4)
HUE_RANGE = (0.9, 1.1)
BLUR_RADIUS_RANGE = (0.1, 2.0)


@dataclass(frozen=True)
class CropSpec:
    """Geometry of one random crop in source-image pixel coordinates."""

    scale: float
    flip: bool
    offset_x: int
    offset_y: int
    crop_w: int
    crop_h: int

    def validate(self, img_h: int, img_w: int) -> "CropSpec":
        if not (0.0 < self.scale <= 1.0):
            raise ValueError(f"crop scale {self.scale} outside (0, 1]")
        if self.crop_w < 1 or self.crop_h < 1:
            raise ValueError("crop extent must be positive")
        if self.offset_x < 0 or self.offset_y < 0 \
                or self.offset_x + self.crop_w > img_w or self.offset_y + self.crop_h > img_h:
            raise ValueError(
                f"crop rect ({self.offset_x},{self.offset_y},{self.crop_w},{self.crop_h}) "
                f"outside image {img_h}x{img_w}")
        return self


def identity_crop_spec(img_h: int, img_w: int) -> CropSpec:
    return CropSpec(scale=1.0, flip=False, offset_x=0, offset_y=0, crop_w=img_w, crop_h=img_h)


@dataclass(frozen=True)
class PhotoNoiseSpec:
    jitter_applied: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 1.0
    blur_applied: bool = False
    blur_radius: float = 1.0
    greyscale: bool = False


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"image must have shape (3, H, W), got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values outside [0, 1]")
    return img


def validate_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    valid = (labels == IGNORE) | ((labels >= 0) & (labels < num_classes))
    if not valid.all():
        raise ValueError("label map contains values outside {0..K-1, IGNORE}")
    return labels


# -- resampling -------------------------------------------------------------

def _grid(n_in: int, n_out: int) -> np.ndarray:
    # Corner-aligned sample positions; a single output row samples position 0.
    if n_out == 1:
        return np.zeros(1)
    return np.linspace(0.0, n_in - 1.0, n_out)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize over the trailing two axes.

    Uses the lerp form v0 + t*(v1-v0), which reproduces constant inputs
    bitwise and is the exact identity when the size is unchanged.
    """
    h, w = arr.shape[-2:]
    ys, xs = _grid(h, out_h), _grid(w, out_w)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    v00 = arr[..., y0[:, None], x0[None, :]]
    v01 = arr[..., y0[:, None], x1[None, :]]
    v10 = arr[..., y1[:, None], x0[None, :]]
    v11 = arr[..., y1[:, None], x1[None, :]]
    top = v00 + tx * (v01 - v00)
    bottom = v10 + tx * (v11 - v10)
    return top + ty * (bottom - top)


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned nearest-neighbour resize over the trailing two axes."""
    h, w = arr.shape[-2:]
    ys = np.floor(_grid(h, out_h) + 0.5).astype(np.intp)
    xs = np.floor(_grid(w, out_w) + 0.5).astype(np.intp)
    ys = np.minimum(ys, h - 1)
    xs = np.minimum(xs, w - 1)
    return arr[..., ys[:, None], xs[None, :]]


def hflip(arr: np.ndarray) -> np.ndarray:
    """Horizontal flip over the last (width) axis."""
    return arr[..., ::-1].copy()


# -- cropping ----------------------------------------------------------------

def sample_crop_spec(img_h: int, img_w: int, min_scale: float, stream: RngStream,
                     allow_flip: bool = True) -> CropSpec:
    if not (0.0 < min_scale <= 1.0):
        raise ValueError(f"min_scale {min_scale} outside (0, 1]")
    scale = stream.uniform(min_scale, 1.0)
    flip = stream.bernoulli(0.5) and allow_flip
    crop_h = max(1, int(np.floor(scale * img_h + 0.5)))
    crop_w = max(1, int(np.floor(scale * img_w + 0.5)))
    crop_h, crop_w = min(crop_h, img_h), min(crop_w, img_w)
    offset_y = stream.integers(0, img_h - crop_h + 1)
    offset_x = stream.integers(0, img_w - crop_w + 1)
    return CropSpec(scale, flip, offset_x, offset_y, crop_w, crop_h).validate(img_h, img_w)


def apply_crop(img: np.ndarray, spec: CropSpec, out_h: int, out_w: int) -> np.ndarray:
    """Extract the crop rect, flip if requested, resize bilinearly to (out_h, out_w)."""
    spec.validate(img.shape[-2], img.shape[-1])
    patch = img[..., spec.offset_y:spec.offset_y + spec.crop_h,
                spec.offset_x:spec.offset_x + spec.crop_w]
    if spec.flip:
        patch = patch[..., ::-1]
    return resize_bilinear(patch, out_h, out_w)


def apply_crop_labels(labels: np.ndarray, spec: CropSpec, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour variant for label maps; labels are never blended."""
    spec.validate(labels.shape[-2], labels.shape[-1])
    patch = labels[spec.offset_y:spec.offset_y + spec.crop_h,
                   spec.offset_x:spec.offset_x + spec.crop_w]
    if spec.flip:
        patch = patch[:, ::-1]
    return resize_nearest(patch, out_h, out_w)


def inverse_project(pred: np.ndarray, spec: CropSpec,
                    canvas_h: int, canvas_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Re-project a (K, h, w) prediction back onto the source canvas.

    Undoes the flip, resizes to the crop rect, and places it at the crop's
    offset. The returned mask is 1 exactly on the covered rect.
    """
    spec.validate(canvas_h, canvas_w)
    if spec.flip:
        pred = pred[..., ::-1]
    patch = resize_bilinear(pred, spec.crop_h, spec.crop_w)
    canvas = np.zeros(pred.shape[:-2] + (canvas_h, canvas_w))
    canvas[..., spec.offset_y:spec.offset_y + spec.crop_h,
           spec.offset_x:spec.offset_x + spec.crop_w] = patch
    mask = np.zeros((canvas_h, canvas_w), dtype=bool)
    mask[spec.offset_y:spec.offset_y + spec.crop_h,
         spec.offset_x:spec.offset_x + spec.crop_w] = True
    return canvas, mask


# -- photometric noise --------------------------------------------------------

def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.zeros_like(r)
    h = np.where((maxc == r) & (delta > 0), ((g - b) / safe) % 6.0, h)
    h = np.where((maxc == g) & (delta > 0), (b - r) / safe + 2.0, h)
    h = np.where((maxc == b) & (delta > 0), (r - g) / safe + 4.0, h)
    return np.stack([h / 6.0, s, v])


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def rotate_hue(img: np.ndarray, hue_factor: float) -> np.ndarray:
    """Rotate the HSV hue channel by (hue_factor - 1.0) * 360 degrees."""
    hsv = rgb_to_hsv(img)
    hsv[0] = (hsv[0] + (hue_factor - 1.0)) % 1.0
    return hsv_to_rgb(hsv)


def luma(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, img, axes=(0, 0))


def box_length(radius: float) -> int:
    """Odd box side for a Gaussian of the given radius; ties round upward."""
    raw = np.sqrt(3.0 * radius * radius + 1.0)
    return max(1, 2 * int(np.floor((raw - 1.0) / 2.0 + 0.5)) + 1)


def apply_photometric(img: np.ndarray, spec: PhotoNoiseSpec) -> np.ndarray:
    """Jitter, then greyscale, then blur; every stage clamps to [0, 1]."""
    out = img
    if spec.jitter_applied:
        out = out * spec.brightness
        mean_grey = luma(out).mean()
        out = (out - mean_grey) * spec.contrast + mean_grey
        grey = luma(out)[None]
        out = (out - grey) * spec.saturation + grey
        out = np.clip(out, 0.0, 1.0)
        out = rotate_hue(out, spec.hue)
        out = np.clip(out, 0.0, 1.0)
    if spec.greyscale:
        out = np.repeat(luma(out)[None], 3, axis=0)
    if spec.blur_applied:
        side = box_length(spec.blur_radius)
        if side > 1:
            out = ndimage.uniform_filter(out, size=(1, side, side), mode="nearest")
    return np.clip(out, 0.0, 1.0)


def sample_photo_noise(stream: RngStream) -> PhotoNoiseSpec:
    # All parameters are drawn regardless of the gates so the stream layout
    # is independent of the outcomes.
    jitter = stream.bernoulli(JITTER_PROB)
    brightness = stream.uniform(*FACTOR_RANGE)
    contrast = stream.uniform(*FACTOR_RANGE)
    saturation = stream.uniform(*FACTOR_RANGE)
    hue = stream.uniform(*HUE_RANGE)
    blur = stream.bernoulli(BLUR_PROB)
    radius = stream.uniform(*BLUR_RADIUS_RANGE)
    grey = stream.bernoulli(GREYSCALE_PROB)
    return PhotoNoiseSpec(jitter_applied=jitter, brightness=brightness, contrast=contrast,
                          saturation=saturation, hue=hue, blur_applied=blur,
                          blur_radius=radius, greyscale=grey)


# -- PPM / PGM ---------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, 8-bit; values scaled by 255 with round-half-up."""
    img = validate_image(img)
    h, w = img.shape[1:]
    raw = np.floor(img * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raw.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    magic, (w, h), _, data = _read_netpbm(path, b"P6")
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, labels: np.ndarray) -> None:
    """Binary P5, 8-bit; class index per pixel, 255 = IGNORE."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values outside 8-bit range")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    magic, (w, h), _, data = _read_netpbm(path, b"P5")
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.int64)


def _read_netpbm(path, expected_magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(blob):
            raise ValueError(f"{path}: truncated header")
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        if blob[pos:pos + 1].isspace():
            pos += 1
            continue
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    pos += 1  # single whitespace byte after maxval
    magic = fields[0]
    if magic != expected_magic:
        raise ValueError(f"{path}: expected {expected_magic.decode()}, got {magic.decode()}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit maxval supported")
    return magic, (w, h), maxval, blob[pos:]
