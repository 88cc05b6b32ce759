"""YOLO-layout dataset reading and writing.

On-disk layout::

    <root>/data.yaml              # manifest
    <root>/<split>/images/*.png
    <root>/<split>/labels/*.txt   # one "class cx cy w h" line per object

Manifest schema (YAML)::

    names: [circle, square, triangle]   # class names, index = class id
    scene_name: shapes board
    splits: {train: train, val: val, test: test}   # split -> directory

Label coordinates are normalized to [0, 1] relative to the image size.
"""
from __future__ import annotations

import logging
import warnings
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .core import SPLITS, Annotation, BBox, DetectionDataset, LabeledImage, clip_bbox
from .exceptions import DegenerateBoxWarning, EmptyBox, MalformedLabel, MissingImage

logger = logging.getLogger(__name__)

MANIFEST_NAME = "data.yaml"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as fh:
        manifest = yaml.safe_load(fh) or {}
    if "names" not in manifest or "scene_name" not in manifest:
        raise MalformedLabel(f"{path}: manifest needs 'names' and 'scene_name'")
    manifest.setdefault("splits", {s: s for s in SPLITS})
    return manifest


def write_manifest(root, categories, scene_name, splits=None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "names": list(categories),
        "scene_name": scene_name,
        "splits": dict(splits or {s: s for s in SPLITS}),
    }
    path = root / MANIFEST_NAME
    with open(path, "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    return path


def parse_label_line(line: str, num_categories: int, width: int, height: int,
                     where: str = "") -> Annotation | None:
    """Parse one YOLO line into a pixel-space annotation.

    Returns None (with a warning) when the clipped box is under 1 px^2.
    """
    fields = line.split()
    if len(fields) != 5:
        raise MalformedLabel(f"{where}: expected 5 fields, got {len(fields)}: {line!r}")
    try:
        cls_f = float(fields[0])
        cx, cy, w, h = (float(v) for v in fields[1:])
    except ValueError:
        raise MalformedLabel(f"{where}: non-numeric field in {line!r}") from None
    if not np.isfinite(cls_f) or cls_f != int(cls_f) or not 0 <= cls_f < num_categories:
        raise MalformedLabel(f"{where}: class id {fields[0]} not in [0, {num_categories})")
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not np.isfinite(v) or v < 0 or v > 1:
            raise MalformedLabel(f"{where}: {name}={v} outside [0, 1]")
    if w <= 0 or h <= 0:
        raise MalformedLabel(f"{where}: zero-size box in {line!r}")
    x = (cx - w / 2) * width
    y = (cy - h / 2) * height
    try:
        box = clip_bbox(BBox(x, y, w * width, h * height), width, height)
    except EmptyBox:
        box = None
    if box is None or box.area < 1.0:
        warnings.warn(f"{where}: dropping degenerate box {line!r}", DegenerateBoxWarning, stacklevel=2)
        return None
    return Annotation(int(cls_f), box)


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def parse_yolo_dataset(root, split: str = "train") -> DetectionDataset:
    root = Path(root)
    manifest = read_manifest(root)
    categories = list(manifest["names"])
    split_dir = root / manifest["splits"].get(split, split)
    image_dir, label_dir = split_dir / "images", split_dir / "labels"

    images = {}
    if image_dir.is_dir():
        for p in sorted(image_dir.iterdir()):
            if p.suffix.lower() in IMAGE_SUFFIXES:
                images[p.stem] = p
    labels = {}
    if label_dir.is_dir():
        labels = {p.stem: p for p in sorted(label_dir.glob("*.txt"))}
    orphans = sorted(set(labels) - set(images))
    if orphans:
        raise MissingImage(f"labels without images in {split_dir}: {orphans[:5]}")

    items = []
    for stem, img_path in images.items():
        pixels = _load_image(img_path)
        height, width = pixels.shape[:2]
        anns = []
        if stem in labels:
            with open(labels[stem]) as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    ann = parse_label_line(line, len(categories), width, height,
                                           where=f"{labels[stem]}:{lineno}")
                    if ann is not None:
                        anns.append(ann)
        items.append(LabeledImage(pixels, tuple(anns), name=stem))
    logger.debug("parsed %d images from %s", len(items), split_dir)
    return DetectionDataset(tuple(categories), manifest["scene_name"], split, tuple(items))


def format_label_line(ann: Annotation, width: int, height: int) -> str:
    b = ann.bbox
    cx = (b.x + b.w / 2) / width
    cy = (b.y + b.h / 2) / height
    vals = [min(max(v, 0.0), 1.0) for v in (cx, cy, b.w / width, b.h / height)]
    return f"{ann.category_id} " + " ".join(f"{v:.10f}" for v in vals)


def write_split(dataset: DetectionDataset, split_dir) -> None:
    """Write images and labels of ``dataset`` under ``split_dir``."""
    split_dir = Path(split_dir)
    image_dir, label_dir = split_dir / "images", split_dir / "labels"
    image_dir.mkdir(parents=True, exist_ok=True)
    label_dir.mkdir(parents=True, exist_ok=True)
    width_digits = max(6, len(str(len(dataset.items))))
    for i, item in enumerate(dataset.items):
        stem = item.name or f"{i:0{width_digits}d}"
        height, width = item.size
        Image.fromarray(np.asarray(item.pixels)).save(image_dir / f"{stem}.png")
        lines = [format_label_line(a, width, height) for a in item.annotations]
        with open(label_dir / f"{stem}.txt", "w") as fh:
            fh.write("".join(line + "\n" for line in lines))


def export_yolo_dataset(dataset: DetectionDataset, root) -> Path:
    """Write ``dataset`` as a YOLO tree under ``root`` and return the root.

    Other splits already present under ``root`` are kept.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        splits = {s: s for s in SPLITS}
        if (root / MANIFEST_NAME).is_file():
            splits.update(read_manifest(root).get("splits", {}))
        write_manifest(root, dataset.categories, dataset.scene_name, splits)
        write_split(dataset, root / splits[dataset.split])
    except PermissionError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    return root


def list_label_files(root, split: str = "train") -> list[Path]:
    manifest = read_manifest(root)
    label_dir = Path(root) / manifest["splits"].get(split, split) / "labels"
    return sorted(label_dir.glob("*.txt")) if label_dir.is_dir() else []


__all__ = [
    "MANIFEST_NAME", "read_manifest", "write_manifest", "parse_label_line",
    "parse_yolo_dataset", "format_label_line", "export_yolo_dataset",
    "write_split", "list_label_files",
]
