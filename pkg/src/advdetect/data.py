"""Dataset ingestion and synthesis.

Three sources feed the toolkit: a deterministic synthetic-shapes generator
(the desk-scale benchmark), VOC-style XML annotation trees, and directories
of pre-extracted video frames.
"""

from __future__ import annotations

import json
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from advdetect.boxes import BoundingBox, FrameSequence, GroundTruthObject, Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def load_image(path: str | Path, image_id: str | None = None) -> Image:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return Image(arr.transpose(2, 0, 1), id=image_id or Path(path).stem)


def save_image(image: Image, path: str | Path) -> None:
    arr = np.clip(image.pixels * 255.0 + 0.5, 0, 255).astype(np.uint8)
    PILImage.fromarray(arr.transpose(1, 2, 0)).save(path)


@dataclass
class ManifestEntry:
    image_id: str
    objects: tuple[GroundTruthObject, ...]
    path: Path | None = None
    image: Image | None = None  # populated for in-memory datasets

    def load(self) -> Image:
        if self.image is not None:
            return self.image
        assert self.path is not None
        return load_image(self.path, self.image_id)


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry]
    class_names: list[str]
    errors: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, start: int, stop: int, split: str | None = None) -> "DatasetManifest":
        return DatasetManifest(
            split or self.split, self.entries[start:stop], self.class_names
        )


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

SHAPE_NAMES = [
    "circle",
    "square",
    "triangle",
    "diamond",
    "ring",
    "cross",
    "bar",
    "ellipse",
]

# Per-class base colors (RGB in [0,1]); jittered per instance.
_BASE_COLORS = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.15, 0.25, 0.90],
        [0.90, 0.80, 0.10],
        [0.80, 0.15, 0.80],
        [0.10, 0.80, 0.80],
        [0.95, 0.55, 0.10],
        [0.55, 0.35, 0.75],
    ]
)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean mask of the shape on a size x size canvas."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = size / 2.0
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= r**2
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        # upward triangle: apex at top center
        return (np.abs(xx - c) <= (yy + 1) / 2.0) & (yy < size)
    if shape == "diamond":
        return np.abs(xx - c) + np.abs(yy - c) <= r
    if shape == "ring":
        d2 = (yy - c) ** 2 + (xx - c) ** 2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        w = max(2, size // 3)
        return (np.abs(xx - c) <= w / 2) | (np.abs(yy - c) <= w / 2)
    if shape == "bar":
        return np.abs(yy - c) <= max(1, size // 4)
    if shape == "ellipse":
        return ((xx - c) / r) ** 2 + ((yy - c) / (0.55 * r)) ** 2 <= 1.0
    raise ValueError(f"unknown shape {shape!r}")


def _textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-contrast smooth noise background, (3, h, w)."""
    base = rng.uniform(0.35, 0.6)
    coarse = rng.uniform(-0.08, 0.08, size=(3, h // 8 + 1, w // 8 + 1))
    coarse = np.kron(coarse, np.ones((1, 8, 8)))[:, :h, :w]
    fine = rng.uniform(-0.03, 0.03, size=(3, h, w))
    return np.clip(base + coarse + fine, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(
    num_images: int,
    num_classes: int = 3,
    seed: int = 0,
    image_size: int = 64,
    split: str = "train",
    max_objects: int = 3,
    class_colors: bool = True,
) -> DatasetManifest:
    """Render images of 1..max_objects non-overlapping shapes on textured
    backgrounds, with tight ground-truth boxes. Deterministic per seed.

    With class_colors=False every class draws from the same shared palette,
    so only shape (not color) identifies the class.
    """
    if not (2 <= num_classes <= len(SHAPE_NAMES)):
        raise ValueError(f"num_classes must be in [2, {len(SHAPE_NAMES)}]")
    rng = np.random.default_rng(seed)
    h = w = image_size
    entries = []
    for i in range(num_images):
        pixels = _textured_background(rng, h, w)
        n_obj = int(rng.integers(1, max_objects + 1))
        objects: list[GroundTruthObject] = []
        placed: list[tuple[int, int, int, int]] = []
        for _ in range(n_obj):
            label = int(rng.integers(0, num_classes))
            size = int(rng.integers(int(0.22 * h), int(0.42 * h)))
            for _attempt in range(20):
                x0 = int(rng.integers(0, w - size))
                y0 = int(rng.integers(0, h - size))
                box = (x0, y0, x0 + size, y0 + size)
                if all(
                    box[2] <= p[0] or p[2] <= box[0] or box[3] <= p[1] or p[3] <= box[1]
                    for p in placed
                ):
                    break
            else:
                continue  # crowded image: skip this object
            placed.append(box)
            mask = _shape_mask(SHAPE_NAMES[label], size)
            base = (
                _BASE_COLORS[label]
                if class_colors
                else _BASE_COLORS[int(rng.integers(0, len(_BASE_COLORS)))]
            )
            color = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
            region = pixels[:, y0 : y0 + size, x0 : x0 + size]
            region[:, mask] = color[:, None].astype(np.float32)
            ys, xs = np.nonzero(mask)
            objects.append(
                GroundTruthObject(
                    BoundingBox(
                        float(x0 + xs.min()),
                        float(y0 + ys.min()),
                        float(x0 + xs.max() + 1),
                        float(y0 + ys.max() + 1),
                    ),
                    label,
                )
            )
        image_id = f"{split}_{i:06d}"
        entries.append(
            ManifestEntry(image_id, tuple(objects), image=Image(pixels, id=image_id))
        )
    return DatasetManifest(split, entries, SHAPE_NAMES[:num_classes])


def save_dataset(manifest: DatasetManifest, root: str | Path) -> None:
    """Write images as PNGs plus a JSON annotation file per split."""
    root = Path(root)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for entry in manifest.entries:
        path = img_dir / f"{entry.image_id}.png"
        save_image(entry.load(), path)
        records.append(
            {
                "image": str(path.relative_to(root)),
                "id": entry.image_id,
                "objects": [
                    {"box": [float(v) for v in o.box.as_tuple()], "label": int(o.label)}
                    for o in entry.objects
                ],
            }
        )
    with open(root / f"{manifest.split}.json", "w") as f:
        json.dump(
            {"split": manifest.split, "classes": manifest.class_names, "images": records},
            f,
            indent=2,
        )


def load_dataset(root: str | Path, split: str) -> DatasetManifest:
    """Load a dataset previously written by save_dataset."""
    root = Path(root)
    with open(root / f"{split}.json") as f:
        data = json.load(f)
    entries = []
    for rec in data["images"]:
        objects = tuple(
            GroundTruthObject(BoundingBox(*o["box"]), o["label"]) for o in rec["objects"]
        )
        entries.append(ManifestEntry(rec["id"], objects, path=root / rec["image"]))
    return DatasetManifest(data["split"], entries, data["classes"])


# ---------------------------------------------------------------------------
# VOC-style annotation trees
# ---------------------------------------------------------------------------


def load_voc_style(root: str | Path, split: str) -> DatasetManifest:
    """Load a VOC-layout dataset: Annotations/*.xml, JPEGImages/, and
    ImageSets/Main/<split>.txt listing image ids.

    Malformed entries are reported in manifest.errors, not silently dropped.
    """
    root = Path(root)
    ann_dir = root / "Annotations"
    img_dir = root / "JPEGImages"
    if not ann_dir.is_dir():
        raise FileNotFoundError(f"missing annotation directory {ann_dir}")
    split_file = root / "ImageSets" / "Main" / f"{split}.txt"
    if not split_file.is_file():
        raise FileNotFoundError(f"missing split file {split_file}")
    ids = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]

    class_names: list[str] = []
    entries: list[ManifestEntry] = []
    errors: list[str] = []
    # first pass: collect class names for a dense, sorted index
    parsed: dict[str, list[tuple[str, BoundingBox]]] = {}
    for image_id in ids:
        xml_path = ann_dir / f"{image_id}.xml"
        try:
            tree = ET.parse(xml_path)
        except (ET.ParseError, OSError) as e:
            errors.append(f"{xml_path}: {e}")
            continue
        objs = []
        try:
            for obj in tree.getroot().iter("object"):
                name = obj.findtext("name")
                bb = obj.find("bndbox")
                box = BoundingBox(
                    float(bb.findtext("xmin")),
                    float(bb.findtext("ymin")),
                    float(bb.findtext("xmax")),
                    float(bb.findtext("ymax")),
                )
                objs.append((name, box))
        except (TypeError, ValueError, AttributeError) as e:
            errors.append(f"{xml_path}: malformed object entry: {e}")
            continue
        image_path = None
        for ext in IMAGE_EXTENSIONS:
            candidate = img_dir / f"{image_id}{ext}"
            if candidate.is_file():
                image_path = candidate
                break
        if image_path is None:
            errors.append(f"{image_id}: annotation references a missing image")
            continue
        parsed[image_id] = objs
        for name, _ in objs:
            if name not in class_names:
                class_names.append(name)
        entries.append(ManifestEntry(image_id, (), path=image_path))

    class_names.sort()
    index = {name: i for i, name in enumerate(class_names)}
    for entry in entries:
        entry.objects = tuple(
            GroundTruthObject(box, index[name]) for name, box in parsed[entry.image_id]
        )
    return DatasetManifest(split, entries, class_names, errors=errors)


# ---------------------------------------------------------------------------
# Video frame directories
# ---------------------------------------------------------------------------

DEFAULT_FPS = 25.0


def load_frames(directory: str | Path) -> FrameSequence:
    """Load a directory of sequentially named frames into a FrameSequence.

    An optional ``fps.txt`` file supplies the frame rate; absent, 25 fps is
    assumed with a warning.
    """
    directory = Path(directory)
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not paths:
        raise FileNotFoundError(f"no frames found in {directory}")
    frames = [load_image(p) for p in paths]
    h, w = frames[0].height, frames[0].width
    for p, f in zip(paths, frames):
        if (f.height, f.width) != (h, w):
            raise ValueError(
                f"frame {p.name} has size {f.height}x{f.width}, expected {h}x{w}"
            )
    fps_file = directory / "fps.txt"
    if fps_file.is_file():
        fps = float(fps_file.read_text().strip())
    else:
        log.warning("no fps.txt in %s, assuming %.0f fps", directory, DEFAULT_FPS)
        fps = DEFAULT_FPS
    return FrameSequence(tuple(frames), fps=fps)


def save_frames(sequence: FrameSequence, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(sequence.frames):
        save_image(frame, directory / f"{i + 1:06d}.png")
    (directory / "fps.txt").write_text(f"{sequence.fps}\n")
