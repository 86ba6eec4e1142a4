"""Synthetic shapes-and-captions dataset.

Scenes of 1-4 colored geometric shapes on a plain background, rendered with
pixel-exact segmentation masks and captioned at three granularities (short /
medium / long). Everything is a pure function of the seed, so regenerating a
dataset yields byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

SHAPES = ("circle", "square", "triangle", "star")

# name -> RGB in [0,1]
PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.80, 0.80),
    "white": (0.95, 0.95, 0.95),
}
COLORS = tuple(PALETTE)

VALID_CANVAS = (32, 64, 128)
MIN_CENTER_SEP = 0.15
MIN_OBJECT_PIXELS = 16
SCALE_RANGE = (0.1, 0.4)

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    center: tuple[float, float]  # normalized (x, y), origin top-left
    scale: float                 # fraction of canvas side
    rotation: float              # degrees


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple[ObjectSpec, ...]
    background: str
    canvas: int

    def validate(self) -> None:
        if not 1 <= len(self.objects) <= 4:
            raise ValidationError(f"scene must have 1-4 objects, got {len(self.objects)}")
        if self.canvas not in VALID_CANVAS:
            raise ValidationError(f"canvas must be one of {VALID_CANVAS}, got {self.canvas}")
        if self.background not in PALETTE:
            raise ValidationError(f"unknown background color {self.background!r}")
        for obj in self.objects:
            if obj.shape not in SHAPES:
                raise ValidationError(f"unknown shape {obj.shape!r}")
            if obj.color not in PALETTE:
                raise ValidationError(f"unknown color {obj.color!r}")
            if not SCALE_RANGE[0] <= obj.scale <= SCALE_RANGE[1]:
                raise ValidationError(f"scale {obj.scale} outside {SCALE_RANGE}")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                d = np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
                if d < MIN_CENTER_SEP:
                    raise ValidationError(f"object centers too close ({d:.3f} < {MIN_CENTER_SEP})")


@dataclass(frozen=True)
class CaptionTriplet:
    short: str
    medium: str
    long: str


@dataclass
class SynthSample:
    image: np.ndarray  # H x W x 3 float32 in [0,1]
    mask: np.ndarray   # H x W int64 class indices, 0 = background
    captions: CaptionTriplet
    scene: SceneSpec


@dataclass
class DatasetManifest:
    version: int
    seed: int
    canvas: int
    count: int
    class_names: list[str]
    image_paths: list[str]
    mask_paths: list[str]
    captions_path: str = "captions.jsonl"

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "canvas": self.canvas,
            "count": self.count,
            "class_names": self.class_names,
            "image_paths": self.image_paths,
            "mask_paths": self.mask_paths,
            "captions_path": self.captions_path,
        }


def class_names() -> list[str]:
    """Index 0 is background, then one class per (color, shape) pair."""
    names = ["background"]
    for shape in SHAPES:
        for color in COLORS:
            names.append(f"{color} {shape}")
    return names


def class_index(shape: str, color: str) -> int:
    return 1 + SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


NUM_CLASSES = len(SHAPES) * len(COLORS) + 1


# ---------------------------------------------------------------------------
# geometry


def _rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return points @ np.array([[c, -s], [s, c]]).T


def _shape_vertices(shape: str, scale: float, rotation: float) -> np.ndarray:
    r = scale / 2.0
    if shape == "square":
        base = np.array([[-r, -r], [r, -r], [r, r], [-r, r]])
    elif shape == "triangle":
        angles = np.deg2rad([90.0, 210.0, 330.0])
        base = r * np.stack([np.cos(angles), -np.sin(angles)], axis=1)
    elif shape == "star":
        angles = np.deg2rad(90.0 + 36.0 * np.arange(10))
        radii = np.where(np.arange(10) % 2 == 0, r, 0.4 * r)
        base = radii[:, None] * np.stack([np.cos(angles), -np.sin(angles)], axis=1)
    else:
        raise ValidationError(f"no vertices for shape {shape!r}")
    return _rotate(base, rotation)


def _points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd rule, vectorized over points (..., 2)."""
    x, y = points[..., 0], points[..., 1]
    inside = np.zeros(x.shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xint)
    return inside


def _membership(obj: ObjectSpec, points: np.ndarray) -> np.ndarray:
    rel = points - np.asarray(obj.center)
    if obj.shape == "circle":
        return (rel ** 2).sum(axis=-1) <= (obj.scale / 2.0) ** 2
    return _points_in_polygon(rel, _shape_vertices(obj.shape, obj.scale, obj.rotation))


def _pixel_grid(canvas: int, supersample: int = 1) -> np.ndarray:
    n = canvas * supersample
    coords = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(coords, coords)
    return np.stack([xs, ys], axis=-1)  # (n, n, 2), [y][x] order


def render_scene(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render to (image, mask). Image is anti-aliased (3x supersampling);
    mask is hard membership at pixel centers. Later objects occlude earlier."""
    scene.validate()
    canvas = scene.canvas

    grid = _pixel_grid(canvas)
    mask = np.zeros((canvas, canvas), dtype=np.int64)
    for obj in scene.objects:
        mask[_membership(obj, grid)] = class_index(obj.shape, obj.color)

    ss = 3
    fine = _pixel_grid(canvas, ss)
    image = np.empty((canvas * ss, canvas * ss, 3), dtype=np.float32)
    image[:] = PALETTE[scene.background]
    for obj in scene.objects:
        image[_membership(obj, fine)] = PALETTE[obj.color]
    image = image.reshape(canvas, ss, canvas, ss, 3).mean(axis=(1, 3))
    return image, mask


# ---------------------------------------------------------------------------
# scene sampling


def _draw_scene(rng: np.random.Generator, seed: int, canvas: int) -> SceneSpec:
    n_objects = int(rng.integers(1, 5))
    background = COLORS[rng.integers(len(COLORS))]
    fg_colors = [c for c in COLORS if c != background]
    objects = []
    centers: list[tuple[float, float]] = []
    for _ in range(n_objects):
        for _attempt in range(100):
            cx, cy = rng.uniform(0.2, 0.8, size=2)
            if all(np.hypot(cx - px, cy - py) >= MIN_CENTER_SEP for px, py in centers):
                break
        else:
            break  # give up on this object, keep the scene smaller
        centers.append((cx, cy))
        objects.append(ObjectSpec(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=fg_colors[rng.integers(len(fg_colors))],
            center=(float(cx), float(cy)),
            scale=float(rng.uniform(0.15, 0.4)),
            rotation=float(rng.uniform(0.0, 360.0)),
        ))
    return SceneSpec(seed=seed, objects=tuple(objects), background=background, canvas=canvas)


def sample_scene(seed: int, canvas: int = 64) -> SceneSpec:
    """Deterministic scene from seed; resamples until every object covers
    at least MIN_OBJECT_PIXELS in the rendered mask."""
    if canvas not in VALID_CANVAS:
        raise ValidationError(f"canvas must be one of {VALID_CANVAS}, got {canvas}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, canvas]))
    grid = _pixel_grid(canvas)
    for _attempt in range(1000):
        scene = _draw_scene(rng, seed, canvas)
        if not scene.objects:
            continue
        mask = np.zeros((canvas, canvas), dtype=np.int64)
        for k, obj in enumerate(scene.objects):
            mask[_membership(obj, grid)] = k + 1
        counts = np.bincount(mask.ravel(), minlength=len(scene.objects) + 1)
        if all(counts[k + 1] >= MIN_OBJECT_PIXELS for k in range(len(scene.objects))):
            return scene
    raise RuntimeError(f"could not sample a valid scene for seed {seed}")


# ---------------------------------------------------------------------------
# captions


_POSITION_WORDS = ("left", "right", "above", "below")


def _object_phrase(obj: ObjectSpec) -> str:
    return f"a {obj.color} {obj.shape}"


def _relation(a: ObjectSpec, b: ObjectSpec) -> str:
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "above" if dy < 0 else "below"


def caption_scene(scene: SceneSpec, granularity: str) -> str:
    scene.validate()
    if granularity == "short":
        return _object_phrase(scene.objects[0])
    medium = " and ".join(_object_phrase(o) for o in scene.objects)
    if granularity == "medium":
        return medium
    if granularity == "long":
        parts = [medium]
        for a, b in zip(scene.objects, scene.objects[1:]):
            parts.append(
                f"the {a.color} {a.shape} is {_relation(a, b)} the {b.color} {b.shape}"
            )
        parts.append(f"on a {scene.background} background")
        return " ".join(parts)
    raise ValidationError(f"unknown granularity {granularity!r}")


def make_captions(scene: SceneSpec) -> CaptionTriplet:
    return CaptionTriplet(
        short=caption_scene(scene, "short"),
        medium=caption_scene(scene, "medium"),
        long=caption_scene(scene, "long"),
    )


def caption_vocabulary() -> list[str]:
    """Every word any caption template can emit. Closed by construction."""
    words = {"a", "and", "the", "is", "of", "on", "background"}
    words.update(_POSITION_WORDS)
    words.update(SHAPES)
    words.update(COLORS)
    return sorted(words)


# ---------------------------------------------------------------------------
# dataset IO


def make_sample(dataset_seed: int, index: int, canvas: int) -> SynthSample:
    """Per-sample RNG stream derives from (dataset_seed, index), so parallel
    and serial generation agree."""
    sample_seed = int(np.random.default_rng(
        np.random.SeedSequence([dataset_seed, index])).integers(2 ** 31))
    scene = sample_scene(sample_seed, canvas)
    image, mask = render_scene(scene)
    return SynthSample(image=image, mask=mask, captions=make_captions(scene), scene=scene)


def generate_dataset(count: int, canvas: int, seed: int, out_dir: str | Path) -> DatasetManifest:
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    if canvas not in VALID_CANVAS:
        raise ValidationError(f"canvas must be one of {VALID_CANVAS}, got {canvas}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    image_paths, mask_paths, caption_rows = [], [], []
    for i in range(count):
        sample = make_sample(seed, i, canvas)
        img_rel = f"images/{i:06d}.png"
        msk_rel = f"masks/{i:06d}.png"
        img8 = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(out / img_rel)
        Image.fromarray(sample.mask.astype(np.uint8), mode="L").save(out / msk_rel)
        image_paths.append(img_rel)
        mask_paths.append(msk_rel)
        c = sample.captions
        caption_rows.append({"id": i, "short": c.short, "medium": c.medium, "long": c.long})

    with open(out / "captions.jsonl", "w") as f:
        for row in caption_rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    manifest = DatasetManifest(
        version=MANIFEST_VERSION, seed=seed, canvas=canvas, count=count,
        class_names=class_names(), image_paths=image_paths, mask_paths=mask_paths)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest


class ShapesDataset:
    """Loads a generated dataset directory into memory."""

    def __init__(self, root: str | Path):
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise IOError(f"no manifest.json in {root}")
        with open(manifest_path) as f:
            m = json.load(f)
        if m.get("version") != MANIFEST_VERSION:
            raise ValidationError(f"unsupported manifest version {m.get('version')}")
        self.root = root
        self.seed = m["seed"]
        self.canvas = m["canvas"]
        self.class_names = m["class_names"]
        self.images = []
        self.masks = []
        for img_rel, msk_rel in zip(m["image_paths"], m["mask_paths"]):
            img = np.asarray(Image.open(root / img_rel), dtype=np.float32) / 255.0
            msk = np.asarray(Image.open(root / msk_rel), dtype=np.int64)
            self.images.append(img)
            self.masks.append(msk)
        self.captions: list[CaptionTriplet] = []
        with open(root / m["captions_path"]) as f:
            for line in f:
                row = json.loads(line)
                self.captions.append(
                    CaptionTriplet(short=row["short"], medium=row["medium"], long=row["long"]))
        if len(self.captions) != len(self.images):
            raise ValidationError("caption/image count mismatch")

    def __len__(self) -> int:
        return len(self.images)
