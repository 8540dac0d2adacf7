"""Datasets, samples and the bundled desk-scale scene fixture."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage, ImageDraw

import storage
from detectors.base import DetectorAdapter, detect
from errors import ValidationError
from metrics import Annotation, Box, EvalResult, InvalidBox, evaluate, iou

log = logging.getLogger(__name__)

_DIR = os.path.dirname(__file__)
DESK_ANNOTATIONS = os.path.join(_DIR, "fixtures", "desk", "annotations.json")
DESK_IMAGE_DIR   = os.path.join(_DIR, "data", "desk")

FORMATS = ("coco_json", "folder_with_sidecars")
IMAGE_EXTS = (".png", ".jpg", ".jpeg")


class ParseError(ValidationError):
    def __init__(self, path: str, line: Optional[int], message: str):
        where = f"{path}:{line}" if line else path
        super().__init__(f"{where}: {message}")
        self.path, self.line = path, line


class UnknownClassName(ValidationError):
    def __init__(self, names: Sequence[str]):
        super().__init__(f"class names not in the detector vocabulary: {', '.join(sorted(names))}")
        self.names = sorted(names)


class EmptyDataset(ValidationError):
    pass


@dataclass(eq=False)
class Sample:
    image_path: str
    annotations: list[Annotation]
    sample_id: str = ""
    object_ids: dict[str, int] = field(default_factory=dict)
    _image: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = storage.read_image(self.image_path)
        return self._image


@dataclass(eq=False)
class Dataset:
    samples: list[Sample]
    source_id: str
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.samples)

    def find(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise ValidationError(f"no sample {sample_id!r} in {self.source_id}")


@dataclass(eq=False)
class SceneFixture:
    image: np.ndarray
    annotations: list[Annotation]
    baseline_eval: EvalResult
    object_ids: dict[str, int]
    detector_id: str

    def target(self, name: str) -> Annotation:
        if name not in self.object_ids:
            raise ValidationError(f"unknown object {name!r}; fixture has {sorted(self.object_ids)}")
        return self.annotations[self.object_ids[name]]


def _read_json(path: str) -> dict:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ParseError(path, None, str(e)) from e
    if not text.strip():
        raise ParseError(path, 1, "empty annotation file")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, e.msg) from e


def _vocabulary(names: Sequence[str], class_names: Optional[Sequence[str]]) -> list[str]:
    if class_names is None:
        return sorted(set(names))
    unknown = set(names) - set(class_names)
    if unknown:
        raise UnknownClassName(unknown)
    return list(class_names)


def _load_coco(path: str, class_names, image_root) -> Dataset:
    doc = _read_json(path)
    if not isinstance(doc, dict) or not doc.get("images"):
        raise ParseError(path, None, "no images listed")
    cats = {c["id"]: c["name"] for c in doc.get("categories", [])}
    anns = doc.get("annotations", [])
    missing = {a.get("category_id") for a in anns} - set(cats)
    if missing:
        raise ParseError(path, None, f"annotations reference undefined category ids {sorted(missing)}")
    vocab = _vocabulary([cats[a["category_id"]] for a in anns], class_names)

    root = image_root or os.path.dirname(path)
    by_image: dict[int, list[dict]] = {}
    for a in anns:
        by_image.setdefault(a["image_id"], []).append(a)

    samples = []
    for img in doc["images"]:
        annotations, object_ids = [], {}
        for a in by_image.get(img["id"], []):
            name = cats[a["category_id"]]
            try:
                box = Box.from_xywh(*a["bbox"])
            except (InvalidBox, TypeError) as e:
                raise ParseError(path, None, f"annotation {a.get('id')}: {e}") from e
            if "object_id" in a:
                object_ids[a["object_id"]] = len(annotations)
            annotations.append(Annotation(box, vocab.index(name), a.get("object_id", name)))
        samples.append(Sample(os.path.join(root, img["file_name"]), annotations,
                              sample_id=str(img.get("file_name", img["id"])), object_ids=object_ids))
    return Dataset(samples, source_id=os.path.abspath(path), class_names=vocab)


def _load_folder(path: str, class_names) -> Dataset:
    """Images with a same-stem JSON sidecar: {"objects": [{"label", "bbox": [x, y, w, h], "name"?}]}."""
    entries = []
    for fname in sorted(os.listdir(path)):
        stem, ext = os.path.splitext(fname)
        if ext.lower() not in IMAGE_EXTS:
            continue
        side = os.path.join(path, stem + ".json")
        if not os.path.exists(side):
            log.warning("skipping %s: no sidecar", fname)
            continue
        doc = _read_json(side)
        objects = doc.get("objects")
        if not isinstance(objects, list):
            raise ParseError(side, None, "missing 'objects' list")
        entries.append((fname, side, objects))
    if not entries:
        raise EmptyDataset(f"{path}: no annotated images")

    vocab = _vocabulary([o["label"] for _, _, objs in entries for o in objs], class_names)
    samples = []
    for fname, side, objects in entries:
        annotations, object_ids = [], {}
        for i, o in enumerate(objects):
            try:
                box = Box.from_xywh(*o["bbox"])
            except (InvalidBox, KeyError, TypeError) as e:
                raise ParseError(side, None, f"object {i}: {e}") from e
            name = o.get("name", o["label"])
            object_ids[name] = len(annotations)
            annotations.append(Annotation(box, vocab.index(o["label"]), name))
        samples.append(Sample(os.path.join(path, fname), annotations, sample_id=fname, object_ids=object_ids))
    return Dataset(samples, source_id=os.path.abspath(path), class_names=vocab)


def load_dataset(path: str, format: str = "coco_json", class_names: Optional[Sequence[str]] = None,
                 image_root: Optional[str] = None) -> Dataset:
    """Index annotations per image; images load lazily on first access.

    With class_names, annotation labels are aligned to that vocabulary by
    name and class ids become indices into it.
    """
    if not os.path.exists(path):
        raise ParseError(path, None, "does not exist")
    if format == "coco_json":
        ds = _load_coco(path, class_names, image_root)
    elif format == "folder_with_sidecars":
        ds = _load_folder(path, class_names)
    else:
        raise ValidationError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    log.info("loaded %d samples from %s", len(ds), path)
    return ds


def _self_consistent(sample: Sample, adapter: DetectorAdapter, conf_thresh: float):
    """Annotations equal to the adapter's own detections, named after the nearest layout object."""
    dets = detect(adapter, sample.image, conf_thresh)
    layout_classes = {a.class_id for a in sample.annotations}
    annotations, object_ids = [], {}
    for d in dets:
        if d.class_id not in layout_classes:
            continue
        name = f"{adapter.class_names[d.class_id]}_{len(annotations)}"
        best = max((a for a in sample.annotations if a.class_id == d.class_id),
                   key=lambda a: iou(a.box, d.box))
        if iou(best.box, d.box) > 0 and best.name not in object_ids:
            name = best.name
        object_ids[name] = len(annotations)
        annotations.append(Annotation(d.box, d.class_id, name))
    return dets, annotations, object_ids


def build_fixture(sample: Sample, adapter: DetectorAdapter, conf_thresh: float = 0.25,
                  iou_thresh: float = 0.5, relabel: bool = False) -> SceneFixture:
    """Evaluate the clean scene once and freeze it as the baseline.

    relabel replaces the layout annotations with the adapter's own
    detections, so the baseline mAP is 1.0 by construction. Stand-in
    imagery needs this; real photos do not. When the adapter detects
    nothing the layout annotations are kept.
    """
    annotations, object_ids = list(sample.annotations), dict(sample.object_ids)
    if relabel:
        dets, relabelled, ids = _self_consistent(sample, adapter, conf_thresh)
        if relabelled:
            annotations, object_ids = relabelled, ids
        else:
            log.warning("%s detects nothing on %s; keeping layout annotations",
                        adapter.detector_id, sample.sample_id)
    else:
        dets = detect(adapter, sample.image, conf_thresh)
    if not annotations:
        raise EmptyDataset(f"sample {sample.sample_id} has no annotations")
    baseline = evaluate(dets, annotations, iou_thresh, object_ids)
    log.info("baseline mAP %.4f on %s (%s)", baseline.map, sample.sample_id, adapter.detector_id)
    return SceneFixture(sample.image, annotations, baseline, object_ids, adapter.detector_id)


_PALETTE = {
    "bottle":        (46, 139, 87),
    "cup":           (230, 230, 235),
    "potted plant":  (34, 120, 40),
    "tennis racket": (200, 40, 40),
    "spoon":         (190, 190, 200),
    "person":        (225, 180, 150),
}


def render_desk_scene(annotations_path: Optional[str] = None, out_dir: Optional[str] = None) -> str:
    """Draw the stand-in desk image from the fixture layout and return its path.

    Each object is a flat shape filling its box; the scene is deterministic.
    """
    annotations_path = annotations_path or DESK_ANNOTATIONS
    out_dir = out_dir or DESK_IMAGE_DIR
    doc = _read_json(annotations_path)
    img = doc["images"][0]
    w, h = img["width"], img["height"]
    cats = {c["id"]: c["name"] for c in doc["categories"]}

    canvas = PILImage.new("RGB", (w, h), (180, 170, 150))
    draw = ImageDraw.Draw(canvas)
    desk_top = int(h * 0.62)
    draw.rectangle([0, desk_top, w, h], fill=(120, 85, 55))
    for i in range(0, w, 40):
        draw.line([(i, desk_top), (i + 20, h)], fill=(105, 72, 45), width=2)

    for a in doc["annotations"]:
        x, y, bw, bh = a["bbox"]
        name = cats[a["category_id"]]
        color = _PALETTE.get(name, (90, 90, 90))
        box = [x, y, x + bw - 1, y + bh - 1]
        if name == "bottle":
            draw.rectangle([x, y + bh * 0.3, x + bw - 1, y + bh - 1], fill=color)
            draw.rectangle([x + bw * 0.35, y, x + bw * 0.65, y + bh * 0.3], fill=color)
        elif name == "cup":
            draw.rectangle([x, y, x + bw * 0.8, y + bh - 1], fill=color, outline=(120, 120, 130))
            draw.arc([x + bw * 0.6, y + bh * 0.2, x + bw - 1, y + bh * 0.7], 270, 90, fill=color, width=6)
        elif name == "potted plant":
            draw.rectangle([x + bw * 0.2, y + bh * 0.6, x + bw * 0.8, y + bh - 1], fill=(160, 82, 45))
            draw.ellipse([x, y, x + bw - 1, y + bh * 0.7], fill=color)
        elif name == "tennis racket":
            draw.ellipse([x, y, x + bw - 1, y + bh * 0.6], outline=color, width=6)
            draw.rectangle([x + bw * 0.42, y + bh * 0.6, x + bw * 0.58, y + bh - 1], fill=(40, 40, 40))
        elif name == "spoon":
            draw.ellipse([x, y, x + bw * 0.35, y + bh - 1], fill=color)
            draw.rectangle([x + bw * 0.3, y + bh * 0.4, x + bw - 1, y + bh * 0.6], fill=color)
        elif name == "person":
            draw.rectangle(box, fill=(245, 245, 240), outline=(60, 60, 60), width=3)
            draw.ellipse([x + bw * 0.3, y + bh * 0.1, x + bw * 0.7, y + bh * 0.45], fill=color)
            draw.rectangle([x + bw * 0.2, y + bh * 0.5, x + bw * 0.8, y + bh * 0.95], fill=(50, 70, 140))
        else:
            draw.rectangle(box, fill=color)

    path = os.path.join(out_dir, img["file_name"])
    storage.write_image(path, np.asarray(canvas, dtype=np.float64) / 255.0)
    return path


def load_desk_dataset(class_names: Optional[Sequence[str]] = None) -> Dataset:
    """The bundled six-object desk scene, rendering its stand-in image on first use."""
    doc = _read_json(DESK_ANNOTATIONS)
    if not os.path.exists(os.path.join(DESK_IMAGE_DIR, doc["images"][0]["file_name"])):
        render_desk_scene()
    return load_dataset(DESK_ANNOTATIONS, "coco_json", class_names, image_root=DESK_IMAGE_DIR)
