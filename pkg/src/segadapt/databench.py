"""ShiftShapes: a procedural two-domain segmentation benchmark.

Six classes: background(0), circle(1), square(2), triangle(3), stripe(4),
blob(5). Geometry is a pure function of the scene seed and identical across
domains; the target domain differs only in appearance (fixed hue rotation,
contrast compression, per-pixel texture noise). The stripe is pixel-rare but
image-frequent (1-2 px wide, ~80% of images); the blob is image-rare (~8% of
images, under 1% of pixels when present). Both long-tail regimes are present
by design.

Datasets are stored as binary PPM/PGM pairs plus a flat manifest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RngStream
from .imaging import hsv_to_rgb, luma, read_pgm, read_ppm, rotate_hue, write_pgm, write_ppm

CLASS_NAMES = ["background", "circle", "square", "triangle", "stripe", "blob"]
NUM_CLASSES = 6

DOMAINS = ("source", "target")

# Appearance-shift constants applied to target-domain images.
TARGET_HUE_SHIFT = 0.08
TARGET_CONTRAST = 0.8
TARGET_NOISE_AMPLITUDE = 0.05

STRIPE_PROB = 0.8
BLOB_PROB = 0.09
_WEYL = (np.sqrt(5.0) - 1.0) / 2.0


def _blob_scheduled(seed: int) -> bool:
    return ((seed + 0.5) * _WEYL) % 1.0 < BLOB_PROB


@dataclass(frozen=True)
class SceneSpec:
    domain: str
    seed: int

    def validate(self) -> "SceneSpec":
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        return self


def _hsv_color(stream: RngStream, hue_center: float, hue_jitter: float,
               sat_range: tuple, val_range: tuple) -> np.ndarray:
    h = (hue_center + stream.uniform(-hue_jitter, hue_jitter)) % 1.0
    s = stream.uniform(*sat_range)
    v = stream.uniform(*val_range)
    return hsv_to_rgb(np.array([h, s, v]).reshape(3, 1, 1))[:, 0, 0]


def _paint(img, labels, mask, color, class_id):
    img[:, mask] = color[:, None]
    labels[mask] = class_id


def generate_scene(spec: SceneSpec, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize one scene; returns (image (3,h,w) in [0,1], labels (h,w))."""
    spec.validate()
    if h < 32 or w < 32:
        raise ValueError("scene resolution must be at least 32x32")
    geom = RngStream(spec.seed, ("geometry",))
    paint = RngStream(spec.seed, ("appearance",))
    size = min(h, w)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int64)
    img = np.empty((3, h, w))

    # Background: tinted grey with a vertical brightness gradient.
    base = np.array([0.48, 0.52, 0.58]) + paint.uniform(-0.05, 0.05)
    gradient = np.linspace(0.88, 1.08, h)[None, :, None]
    img[:] = np.clip(base[:, None, None] * gradient, 0.0, 1.0)

    # Stripe: 1-2 px line spanning the image, below the other shapes.
    if geom.bernoulli(STRIPE_PROB):
        thickness = geom.integers(1, 3)
        horizontal = geom.bernoulli(0.5)
        if horizontal:
            pos = geom.integers(0, h - thickness + 1)
            mask = (yy >= pos) & (yy < pos + thickness)
        else:
            pos = geom.integers(0, w - thickness + 1)
            mask = (xx >= pos) & (xx < pos + thickness)
        color = _hsv_color(paint.derive("stripe"), paint.uniform(0.0, 1.0), 0.0,
                           (0.0, 0.06), (0.92, 1.0))
        _paint(img, labels, mask, color, 4)

    # Triangles (upright isoceles), then squares, then circles on top.
    for i in range(geom.integers(0, 3)):
        g = geom.derive(f"triangle={i}")
        s = g.uniform(0.08, 0.16) * size
        cx = g.uniform(s, w - 1 - s)
        cy = g.uniform(s, h - 1 - s)
        # Apex at (cx, cy-s), base from (cx-s, cy+s) to (cx+s, cy+s).
        inside = (np.abs(xx - cx) * 2.0 <= (yy - (cy - s))) & (yy <= cy + s)
        color = _hsv_color(paint.derive(f"triangle={i}"), 0.18, 0.02, (0.65, 0.85), (0.75, 0.95))
        _paint(img, labels, inside, color, 3)

    for i in range(geom.integers(0, 3)):
        g = geom.derive(f"square={i}")
        half = g.uniform(0.06, 0.14) * size
        cx = g.uniform(half, w - 1 - half)
        cy = g.uniform(half, h - 1 - half)
        inside = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
        color = _hsv_color(paint.derive(f"square={i}"), 0.40, 0.03, (0.6, 0.8), (0.7, 0.9))
        _paint(img, labels, inside, color, 2)

    for i in range(geom.integers(0, 3)):
        g = geom.derive(f"circle={i}")
        r = g.uniform(0.08, 0.16) * size
        cx = g.uniform(r, w - 1 - r)
        cy = g.uniform(r, h - 1 - r)
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        color = _hsv_color(paint.derive(f"circle={i}"), 0.0, 0.03, (0.6, 0.8), (0.7, 0.9))
        _paint(img, labels, inside, color, 1)

    # Blob: rare wobbly disc, always on top, capped below 1% of the pixels.
    # Presence follows a low-discrepancy rule in the seed so the class'
    # frequency is stable across any contiguous block of scene seeds.
    if _blob_scheduled(spec.seed):
        g = geom.derive("blob")
        r0 = g.uniform(0.040, 0.044) * size
        cx = g.uniform(2.0 * r0, w - 1 - 2.0 * r0)
        cy = g.uniform(2.0 * r0, h - 1 - 2.0 * r0)
        phase = g.uniform(0.0, 2.0 * np.pi)
        angle = np.arctan2(yy - cy, xx - cx)
        radius = r0 * (1.0 + 0.25 * np.sin(3.0 * angle + phase))
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
        color = _hsv_color(paint.derive("blob"), 0.83, 0.02, (0.6, 0.8), (0.7, 0.9))
        _paint(img, labels, inside, color, 5)

    if spec.domain == "target":
        img = _apply_target_shift(img, RngStream(spec.seed, ("target-noise",)))
    return np.clip(img, 0.0, 1.0), labels


def _apply_target_shift(img: np.ndarray, noise_stream: RngStream) -> np.ndarray:
    img = rotate_hue(np.clip(img, 0.0, 1.0), 1.0 + TARGET_HUE_SHIFT)
    mean_grey = luma(img).mean()
    img = (img - mean_grey) * TARGET_CONTRAST + mean_grey
    img = img + noise_stream.uniforms(-TARGET_NOISE_AMPLITUDE, TARGET_NOISE_AMPLITUDE, img.shape)
    return np.clip(img, 0.0, 1.0)


# -- dataset IO ----------------------------------------------------------------

@dataclass
class DatasetRecord:
    image: np.ndarray
    labels: np.ndarray
    domain: str
    seed: int
    name: str


def write_split(root: Path, subdir: str, domain: str, seeds: list, h: int, w: int) -> list:
    """Write one split as PPM/PGM pairs; returns its manifest lines."""
    root = Path(root)
    (root / subdir / "images").mkdir(parents=True, exist_ok=True)
    (root / subdir / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, seed in enumerate(seeds):
        img, labels = generate_scene(SceneSpec(domain=domain, seed=seed), h, w)
        name = f"{i:05d}"
        write_ppm(root / subdir / "images" / f"{name}.ppm", img)
        write_pgm(root / subdir / "labels" / f"{name}.pgm", labels)
        lines.append(f"{subdir}/images/{name}.ppm {domain} {seed}")
    return lines


def write_benchmark(root: Path, count_source: int, count_target: int, count_target_val: int,
                    h: int, w: int, seed: int) -> Path:
    """Standard three-split benchmark: source, target (train), target_val."""
    root = Path(root)
    lines = []
    lines += write_split(root, "source", "source", [seed + i for i in range(count_source)], h, w)
    lines += write_split(root, "target", "target",
                         [seed + 10_000 + i for i in range(count_target)], h, w)
    lines += write_split(root, "target_val", "target",
                         [seed + 20_000 + i for i in range(count_target_val)], h, w)
    manifest = root / "manifest.txt"
    tmp = manifest.with_suffix(".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(manifest)
    return manifest


def read_split(root: Path, subdir: str) -> list:
    """Load every record of one split listed in the manifest."""
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    records = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            rel, domain, seed = line.split()
        except ValueError as exc:
            raise ValueError(f"{manifest}: malformed line {line!r}") from exc
        if not rel.startswith(subdir + "/"):
            continue
        img_path = root / rel
        lbl_path = root / rel.replace("/images/", "/labels/").replace(".ppm", ".pgm")
        if not img_path.exists():
            raise FileNotFoundError(f"missing image file: {img_path}")
        if not lbl_path.exists():
            raise FileNotFoundError(f"missing label file: {lbl_path}")
        records.append(DatasetRecord(image=read_ppm(img_path), labels=read_pgm(lbl_path),
                                     domain=domain, seed=int(seed), name=rel))
    if not records:
        raise ValueError(f"no records for split {subdir!r} in {manifest}")
    return records
