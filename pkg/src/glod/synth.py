"""Synthetic aerial scenes with spatial priors, plus the image pipeline.

Scenes are textured rectangles over a noisy terrain: roads are gray bands
along random polylines, small vehicles cluster inside road bands, other
classes scatter uniformly. Class draws follow a long-tail frequency table.
Centers snap to a quarter-pixel grid and sizes to half pixels, so flips and
feature-grid arithmetic stay exact in floating point.

Pixel values are integral reals in [0, 255] end to end; images round-trip
bitwise through binary PPM (P6).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .targets import GroundTruthObject

__all__ = ["ClassSpec", "SceneSpec", "AugmentationConfig", "NormalizeConfig",
           "generate_scene", "augment", "normalize", "denormalize",
           "write_ppm", "read_ppm", "make_dataset", "read_annotations",
           "read_split", "load_image", "draw_boxes", "DEFAULT_CLASSES",
           "CLASS_COLORS"]


@dataclass(frozen=True)
class ClassSpec:
    name: str
    frequency: float
    size_range: tuple          # (lo, hi) longer-side pixels
    aspect_range: tuple        # (lo, hi) short/long ratio
    color: tuple               # base RGB
    on_road: bool = False


DEFAULT_CLASSES = (
    ClassSpec("small-vehicle", 0.70, (4.0, 9.0), (0.45, 0.7), (200, 200, 210), on_road=True),
    ClassSpec("large-vehicle", 0.15, (10.0, 18.0), (0.3, 0.45), (235, 235, 225)),
    ClassSpec("building", 0.10, (24.0, 56.0), (0.6, 1.0), (150, 110, 90)),
    ClassSpec("container", 0.04, (8.0, 16.0), (0.35, 0.55), (170, 60, 50)),
    ClassSpec("rare-class", 0.01, (10.0, 20.0), (0.7, 1.0), (190, 60, 190)),
)

CLASS_COLORS = ((255, 160, 40), (60, 220, 60), (160, 70, 255),
                (255, 60, 60), (60, 220, 220))


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    classes: tuple = DEFAULT_CLASSES
    objects_min: int = 8
    objects_max: int = 22
    roads_min: int = 1
    roads_max: int = 2
    road_width: float = 11.0
    min_separation: float = 6.0    # same-class center distance floor
    noise: float = 6.0
    max_place_tries: int = 60

    def __post_init__(self):
        total = sum(c.frequency for c in self.classes)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"class frequencies sum to {total}, expected 1")
        biggest = max(hi for c in self.classes for hi in (c.size_range[1],))
        if biggest >= self.image_size:
            raise ValueError(
                f"largest object ({biggest}px) does not fit a {self.image_size}px image")


@dataclass(frozen=True)
class AugmentationConfig:
    greyscale: float = 0.25
    solarize: float = 0.25
    equalize: float = 0.25
    hflip: float = 0.25
    vflip: float = 0.25
    solarize_threshold: int = 192

    def __post_init__(self):
        if not 0 <= self.solarize_threshold <= 255:
            raise ValueError("solarize threshold must be in [0, 255]")


@dataclass(frozen=True)
class NormalizeConfig:
    # standard published ImageNet statistics
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)


def _quantize(v: float, step: float) -> float:
    return round(v / step) * step


def _road_polylines(rng, spec: SceneSpec) -> list:
    n = int(rng.integers(spec.roads_min, spec.roads_max + 1))
    size = spec.image_size
    lines = []
    for _ in range(n):
        if rng.random() < 0.5:  # left-right with a bend
            p0 = (0.0, rng.uniform(0.15, 0.85) * size)
            p2 = (float(size), rng.uniform(0.15, 0.85) * size)
            p1 = (rng.uniform(0.3, 0.7) * size, rng.uniform(0.15, 0.85) * size)
        else:                    # top-bottom with a bend
            p0 = (rng.uniform(0.15, 0.85) * size, 0.0)
            p2 = (rng.uniform(0.15, 0.85) * size, float(size))
            p1 = (rng.uniform(0.15, 0.85) * size, rng.uniform(0.3, 0.7) * size)
        lines.append([p0, p1, p2])
    return lines


def _paint_band(canvas, polyline, width, color, rng, noise):
    size = canvas.shape[1]
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for (x0, y0), (x1, y1) in zip(polyline, polyline[1:]):
        dx, dy = x1 - x0, y1 - y0
        seg_len2 = dx * dx + dy * dy
        if seg_len2 == 0:
            continue
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / seg_len2, 0.0, 1.0)
        ddx = xx - (x0 + t * dx)
        ddy = yy - (y0 + t * dy)
        mask |= (ddx * ddx + ddy * ddy) <= (width / 2) ** 2
    for c in range(3):
        layer = canvas[c]
        layer[mask] = color[c] + rng.normal(0.0, noise, size=int(mask.sum()))
    return mask


def _sample_on_road(rng, roads, spec: SceneSpec):
    line = roads[int(rng.integers(len(roads)))]
    segs = list(zip(line, line[1:]))
    lengths = np.array([np.hypot(b[0] - a[0], b[1] - a[1]) for a, b in segs])
    seg = segs[int(rng.choice(len(segs), p=lengths / lengths.sum()))]
    (x0, y0), (x1, y1) = seg
    t = rng.uniform(0.05, 0.95)
    px, py = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
    # lateral offset inside the band
    nx, ny = -(y1 - y0), (x1 - x0)
    norm = np.hypot(nx, ny)
    lat = rng.uniform(-spec.road_width / 2 + 1.5, spec.road_width / 2 - 1.5)
    return px + nx / norm * lat, py + ny / norm * lat


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()):
    """Deterministic scene render; returns (image (3,H,W) in [0,255], objects)."""
    rng = np.random.default_rng(seed)
    size = spec.image_size
    image = np.empty((3, size, size), dtype=np.float64)
    base = (88, 104, 76)  # dry terrain
    for c in range(3):
        image[c] = base[c] + rng.normal(0.0, spec.noise, size=(size, size))
    roads = _road_polylines(rng, spec)
    for line in roads:
        _paint_band(image, line, spec.road_width, (105, 103, 100), rng, spec.noise * 0.6)

    n_objects = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    freqs = np.array([c.frequency for c in spec.classes])
    placed: list[GroundTruthObject] = []
    for _ in range(n_objects):
        cid = int(rng.choice(len(spec.classes), p=freqs))
        cs = spec.classes[cid]
        long_side = rng.uniform(*cs.size_range)
        short_side = long_side * rng.uniform(*cs.aspect_range)
        if rng.random() < 0.5:
            w, h = long_side, short_side
        else:
            w, h = short_side, long_side
        w = max(2.0, _quantize(w, 0.5))
        h = max(2.0, _quantize(h, 0.5))
        ok = False
        for _try in range(spec.max_place_tries):
            if cs.on_road and roads:
                cx, cy = _sample_on_road(rng, roads, spec)
            else:
                cx = rng.uniform(w / 2 + 1, size - w / 2 - 1)
                cy = rng.uniform(h / 2 + 1, size - h / 2 - 1)
            cx = _quantize(cx, 0.25)
            cy = _quantize(cy, 0.25)
            if not (w / 2 <= cx <= size - w / 2 and h / 2 <= cy <= size - h / 2):
                continue
            if all((o.class_id != cid
                    or np.hypot(o.cx - cx, o.cy - cy) >= spec.min_separation)
                   for o in placed):
                ok = True
                break
        if not ok:
            continue
        obj = GroundTruthObject(cid, cx, cy, w, h)
        placed.append(obj)
        x1 = int(np.floor(cx - w / 2))
        x2 = int(np.ceil(cx + w / 2))
        y1 = int(np.floor(cy - h / 2))
        y2 = int(np.ceil(cy + h / 2))
        jitter = rng.normal(0.0, 14.0, size=3)
        for c in range(3):
            patch = image[c, y1:y2, x1:x2]
            patch[:] = cs.color[c] + jitter[c] \
                + rng.normal(0.0, spec.noise * 0.7, size=patch.shape)
        # darker rim so objects have edges
        image[:, y1:y2, x1] *= 0.82
        image[:, y1:y2, x2 - 1] *= 0.82
        image[:, y1, x1:x2] *= 0.82
        image[:, y2 - 1, x1:x2] *= 0.82

    image = np.clip(np.rint(image), 0, 255).astype(np.float32)
    return image, placed


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _luma(image: np.ndarray) -> np.ndarray:
    grey = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return np.rint(grey).astype(image.dtype)


def _solarize(image: np.ndarray, threshold: int) -> np.ndarray:
    return np.where(image < threshold, image, 255.0 - image).astype(image.dtype)


def _equalize_channel(ch: np.ndarray) -> np.ndarray:
    values = ch.astype(np.uint8)
    hist = np.bincount(values.ravel(), minlength=256)
    cdf = hist.cumsum()
    nonzero = cdf[hist > 0]
    if nonzero.size == 0 or nonzero[0] == cdf[-1]:
        return ch
    cdf_min = nonzero[0]
    lut = np.rint((cdf - cdf_min) / (cdf[-1] - cdf_min) * 255.0)
    return lut[values].astype(ch.dtype)


def augment(image: np.ndarray, objects, cfg: AugmentationConfig, seed: int):
    """Photometric and flip augmentations; annotations follow flips exactly.

    Geometric mixing augments (MixUp, Mosaic) are excluded by design: they
    would destroy the spatial co-occurrence priors the detector leans on.
    """
    rng = np.random.default_rng(seed)
    img = image.copy()
    objs = list(objects)
    size_w = img.shape[2]
    size_h = img.shape[1]
    if rng.random() < cfg.greyscale:
        img = np.broadcast_to(_luma(img), img.shape).copy()
    if rng.random() < cfg.solarize:
        img = _solarize(img, cfg.solarize_threshold)
    if rng.random() < cfg.equalize:
        img = np.stack([_equalize_channel(img[c]) for c in range(3)])
    if rng.random() < cfg.hflip:
        img = img[:, :, ::-1].copy()
        objs = [GroundTruthObject(o.class_id, size_w - o.cx, o.cy, o.w, o.h)
                for o in objs]
    if rng.random() < cfg.vflip:
        img = img[:, ::-1, :].copy()
        objs = [GroundTruthObject(o.class_id, o.cx, size_h - o.cy, o.w, o.h)
                for o in objs]
    return img, objs


def normalize(image: np.ndarray, cfg: NormalizeConfig = NormalizeConfig()) -> np.ndarray:
    """[0,255] -> [0,1] -> per-channel standardization."""
    if image.shape[0] != 3:
        raise ValueError(f"expected a 3-channel image, got {image.shape[0]}")
    mean = np.asarray(cfg.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(cfg.std, dtype=np.float32)[:, None, None]
    return (image.astype(np.float32) / 255.0 - mean) / std


def denormalize(tensor: np.ndarray, cfg: NormalizeConfig = NormalizeConfig()) -> np.ndarray:
    mean = np.asarray(cfg.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(cfg.std, dtype=np.float32)[:, None, None]
    return (tensor * std + mean) * 255.0


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 with maxval 255; input is an integral [0,255] (3,H,W) map."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"PPM writer expects (3,H,W), got {arr.shape}")
    h, w = arr.shape[1], arr.shape[2]
    data = np.clip(arr, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM (P6)")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)


def make_dataset(root, n_images: int, seed: int, spec: SceneSpec = SceneSpec(),
                 train_fraction: float = 0.85):
    """Render scenes to {root}/images/*.ppm + annotations.tsv + split.tsv."""
    root = str(root)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    ids = [f"scene_{i:04d}" for i in range(n_images)]
    with open(os.path.join(root, "annotations.tsv"), "w", encoding="utf-8") as ann:
        for i, image_id in enumerate(ids):
            image, objects = generate_scene(seed ^ (i * 0x9E3779B1), spec)
            write_ppm(os.path.join(root, "images", image_id + ".ppm"), image)
            for o in objects:
                ann.write(f"{image_id}\t{o.class_id}\t{o.cx!r}\t{o.cy!r}"
                          f"\t{o.w!r}\t{o.h!r}\n")
    order = np.random.default_rng(seed).permutation(n_images)
    n_train = int(round(train_fraction * n_images))
    train_set = {ids[i] for i in order[:n_train]}
    with open(os.path.join(root, "split.tsv"), "w", encoding="utf-8") as sp:
        for image_id in ids:
            sp.write(f"{image_id}\t{'train' if image_id in train_set else 'val'}\n")
    return ids


def read_annotations(root) -> dict:
    """image_id -> list of GroundTruthObject; errors carry line numbers."""
    path = os.path.join(str(root), "annotations.tsv")
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                obj = GroundTruthObject(int(parts[1]), float(parts[2]),
                                        float(parts[3]), float(parts[4]), float(parts[5]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(parts[0], []).append(obj)
    return out


def read_split(root) -> dict:
    path = os.path.join(str(root), "split.tsv")
    out = {"train": [], "val": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in out:
                raise ValueError(f"{path}:{lineno}: malformed split record")
            out[parts[1]].append(parts[0])
    return out


def load_image(root, image_id) -> np.ndarray:
    return read_ppm(os.path.join(str(root), "images", image_id + ".ppm"))


def draw_boxes(image: np.ndarray, detections, thickness: int = 3) -> np.ndarray:
    """Render box outlines color-indexed by class onto a copy of the image."""
    out = image.copy()
    h, w = out.shape[1], out.shape[2]
    for d in detections:
        color = CLASS_COLORS[d.class_id % len(CLASS_COLORS)]
        x1 = max(0, int(round(d.box[0])))
        y1 = max(0, int(round(d.box[1])))
        x2 = min(w - 1, int(round(d.box[2])))
        y2 = min(h - 1, int(round(d.box[3])))
        if x2 <= x1 or y2 <= y1:
            continue
        t = thickness
        for c in range(3):
            out[c, y1:y2 + 1, x1:min(x1 + t, w)] = color[c]
            out[c, y1:y2 + 1, max(x2 - t + 1, 0):x2 + 1] = color[c]
            out[c, y1:min(y1 + t, h), x1:x2 + 1] = color[c]
            out[c, max(y2 - t + 1, 0):y2 + 1, x1:x2 + 1] = color[c]
    return out
