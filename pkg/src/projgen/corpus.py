"""Canonical corpus of detection annotations plus readers for the supported source formats.

Boxes are stored as pixel ``(x1, y1, x2, y2)``; normalisation happens at prompt rendering.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)


class IngestError(ValueError):
    pass


class CorpusError(ValueError):
    pass


class CorpusCorruptError(CorpusError):
    pass


class Source(str, enum.Enum):
    VG_LIKE = "VG_LIKE"
    OPENIMAGES_LIKE = "OPENIMAGES_LIKE"
    SYNTHETIC = "SYNTHETIC"


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    uri: str = ""

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise CorpusError(f"image {self.image_id}: non-positive size {self.width}x{self.height}")


@dataclass(frozen=True)
class RegionAnnotation:
    annotation_id: str
    image_id: str
    box: tuple[float, float, float, float]
    raw_label: str
    source: Source

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        object.__setattr__(self, "source", Source(self.source))

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass(frozen=True)
class Provenance:
    source: str
    created_at: str = ""
    digest: str = ""
    counters: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Corpus:
    images: tuple[ImageRecord, ...]
    annotations: tuple[RegionAnnotation, ...]
    provenance: Provenance = Provenance(source="")

    def __post_init__(self):
        by_id = {}
        for im in self.images:
            if im.image_id in by_id:
                raise CorpusError(f"duplicate image_id {im.image_id!r}")
            by_id[im.image_id] = im
        for ann in self.annotations:
            im = by_id.get(ann.image_id)
            if im is None:
                raise CorpusError(f"annotation {ann.annotation_id} references missing image {ann.image_id!r}")
            x1, y1, x2, y2 = ann.box
            if not (0 <= x1 < x2 <= im.width and 0 <= y1 < y2 <= im.height):
                raise CorpusError(f"annotation {ann.annotation_id}: box {ann.box} outside {im.width}x{im.height}")
            if not ann.raw_label.strip():
                raise CorpusError(f"annotation {ann.annotation_id}: empty label")
        # the digest always describes the records actually held
        digest = _digest_lines(_record_lines(self))
        if self.provenance.digest != digest:
            object.__setattr__(self, "provenance", dataclasses.replace(self.provenance, digest=digest))

    def image_index(self) -> dict[str, ImageRecord]:
        return {im.image_id: im for im in self.images}

    def with_annotations(self, annotations: Iterable[RegionAnnotation], **counters) -> "Corpus":
        """Same images, new annotation list; extra counters are merged into provenance."""
        merged = dict(self.provenance.counters)
        merged.update(counters)
        prov = dataclasses.replace(self.provenance, counters=merged)
        return Corpus(self.images, tuple(annotations), prov)

    def content_digest(self) -> str:
        return self.provenance.digest


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _finish(source: Source, images, annotations, counters) -> Corpus:
    images = tuple(sorted(images, key=lambda im: im.image_id))
    annotations = tuple(sorted(annotations, key=lambda a: (a.image_id, a.annotation_id)))
    return Corpus(images, annotations, Provenance(source=source.value, created_at=_now(), counters=dict(counters)))


# ---------------------------------------------------------------------------
# image metadata

def read_image_meta(path: str | os.PathLike) -> dict[str, ImageRecord]:
    """Read image metadata from CSV (header with id/width/height[/uri]), JSON lines, or a JSON array."""
    path = Path(path)
    text = _read_text(path)
    rows: list[dict]
    stripped = text.lstrip()
    if path.suffix.lower() == ".csv":
        rows = list(csv.DictReader(text.splitlines()))
    elif stripped.startswith("["):
        rows = _loads(text, path)
    else:
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}: line {lineno} col {e.colno}: {e.msg}") from e
    out = {}
    for r in rows:
        image_id = str(r.get("image_id", r.get("id", r.get("ImageID", ""))))
        uri = r.get("uri") or r.get("url") or r.get("path") or ""
        try:
            out[image_id] = ImageRecord(image_id, int(float(r["width"])), int(float(r["height"])), str(uri))
        except (KeyError, ValueError) as e:
            raise IngestError(f"{path}: bad image metadata row {r!r}") from e
    return out


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as e:
        raise IngestError(f"cannot read {path}: {e}") from e


def _loads(text: str, path: Path):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise IngestError(f"{path}: line {e.lineno} col {e.colno} (offset {e.pos}): {e.msg}") from e


# ---------------------------------------------------------------------------
# Visual-Genome-like objects JSON

def ingest_vg_like(region_file: str | os.PathLike, image_meta_file: str | os.PathLike) -> Corpus:
    """Read a Visual-Genome style object file.

    The region file is a JSON array of ``{"image_id", "objects": [{"object_id", "x", "y", "w", "h",
    "synsets": [...], "names": [...]}]}``. Each synset of an object yields one annotation; objects
    without synsets fall back to their first name.
    """
    region_file = Path(region_file)
    images = read_image_meta(image_meta_file)
    data = _loads(_read_text(region_file), region_file)
    if isinstance(data, dict):
        data = [data]
    counters = Counter(degenerate_box=0, missing_image=0, clamped=0, no_label=0)
    anns: list[RegionAnnotation] = []
    used: dict[str, ImageRecord] = {}
    for entry in data:
        image_id = str(entry.get("image_id", entry.get("id")))
        objects = entry.get("objects", [])
        im = images.get(image_id)
        for j, obj in enumerate(objects):
            if im is None:
                counters["missing_image"] += 1
                continue
            try:
                x, y, w, h = (float(obj[k]) for k in ("x", "y", "w", "h"))
            except (KeyError, TypeError, ValueError) as e:
                raise IngestError(f"{region_file}: image {image_id} object {j} lacks a box") from e
            if w <= 0 or h <= 0:
                counters["degenerate_box"] += 1
                continue
            box = (x, y, x + w, y + h)
            clamped = (max(0.0, box[0]), max(0.0, box[1]), min(float(im.width), box[2]), min(float(im.height), box[3]))
            if clamped != box:
                counters["clamped"] += 1
                if clamped[0] >= clamped[2] or clamped[1] >= clamped[3]:
                    counters["degenerate_box"] += 1
                    continue
            labels = [s for s in obj.get("synsets") or [] if str(s).strip()]
            if not labels:
                labels = [n for n in (obj.get("names") or [obj.get("name", "")]) if str(n).strip()][:1]
            if not labels:
                counters["no_label"] += 1
                continue
            oid = str(obj.get("object_id", f"{image_id}_{j}"))
            for k, lab in enumerate(labels):
                aid = oid if len(labels) == 1 else f"{oid}:{k}"
                anns.append(RegionAnnotation(aid, image_id, clamped, str(lab).strip(), Source.VG_LIKE))
            used[image_id] = im
    if counters["missing_image"]:
        logger.warning("dropped %d objects on images without metadata", counters["missing_image"])
    return _finish(Source.VG_LIKE, used.values(), anns, counters)


# ---------------------------------------------------------------------------
# OpenImages-like CSVs

def read_class_descriptions(path: str | os.PathLike) -> dict[str, str]:
    rows = list(csv.reader(_read_text(Path(path)).splitlines()))
    if rows and [c.strip() for c in rows[0][:2]] == ["LabelName", "DisplayName"]:
        rows = rows[1:]
    return {r[0].strip(): r[1].strip() for r in rows if len(r) >= 2}


def ingest_openimages_like(box_csv: str | os.PathLike, class_desc_csv: str | os.PathLike,
                           image_meta: str | os.PathLike) -> Corpus:
    """Read OpenImages style normalised boxes (ImageID, LabelName, XMin, XMax, YMin, YMax)."""
    names = read_class_descriptions(class_desc_csv)
    images = read_image_meta(image_meta)
    counters = Counter(unknown_label=0, missing_image=0, clamped=0, degenerate_box=0)
    anns = []
    used = {}
    reader = csv.DictReader(_read_text(Path(box_csv)).splitlines())
    for lineno, row in enumerate(reader, 2):
        try:
            image_id = row["ImageID"]
            label_id = row["LabelName"]
            coords = [float(row[k]) for k in ("XMin", "YMin", "XMax", "YMax")]
        except (KeyError, ValueError, TypeError) as e:
            raise IngestError(f"{box_csv}: line {lineno}: malformed row") from e
        name = names.get(label_id)
        if not name:
            counters["unknown_label"] += 1
            continue
        im = images.get(image_id)
        if im is None:
            counters["missing_image"] += 1
            continue
        fixed = [min(1.0, max(0.0, c)) for c in coords]
        if fixed != coords:
            counters["clamped"] += 1
        x1, y1, x2, y2 = fixed
        box = (x1 * im.width, y1 * im.height, x2 * im.width, y2 * im.height)
        if box[0] >= box[2] or box[1] >= box[3]:
            counters["degenerate_box"] += 1
            continue
        anns.append(RegionAnnotation(f"{image_id}:{lineno}", image_id, box, name, Source.OPENIMAGES_LIKE))
        used[image_id] = im
    if counters["unknown_label"]:
        logger.warning("dropped %d boxes with no display name", counters["unknown_label"])
    return _finish(Source.OPENIMAGES_LIKE, used.values(), anns, counters)


def merge_corpora(parts: Iterable[Corpus]) -> Corpus:
    """Merge ingest shards. Image ids shared between shards must describe the same image."""
    parts = list(parts)
    images: dict[str, ImageRecord] = {}
    anns = []
    counters: Counter = Counter()
    for c in parts:
        for im in c.images:
            if images.setdefault(im.image_id, im) != im:
                raise CorpusError(f"conflicting metadata for image {im.image_id!r}")
        anns.extend(c.annotations)
        counters.update(c.provenance.counters)
    sources = sorted({c.provenance.source for c in parts})
    c = _finish(Source.SYNTHETIC, images.values(), anns, counters)
    return dataclasses.replace(c, provenance=dataclasses.replace(c.provenance, source="+".join(sources)))


# ---------------------------------------------------------------------------
# persistence

def _image_dict(im: ImageRecord) -> dict:
    return {"kind": "image", "image_id": im.image_id, "width": im.width, "height": im.height, "uri": im.uri}


def _ann_dict(a: RegionAnnotation) -> dict:
    return {"kind": "annotation", "annotation_id": a.annotation_id, "image_id": a.image_id,
            "box": list(a.box), "raw_label": a.raw_label, "source": a.source.value}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _record_lines(c: Corpus) -> list[str]:
    return [_dumps(_image_dict(im)) for im in c.images] + [_dumps(_ann_dict(a)) for a in c.annotations]


def _digest_lines(lines: Iterable[str]) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def persist_corpus(corpus: Corpus, path: str | os.PathLike) -> Path:
    """Write the corpus as JSON lines: one manifest header, then image and annotation records."""
    path = Path(path)
    lines = _record_lines(corpus)
    digest = _digest_lines(lines)
    manifest = {
        "kind": "manifest",
        "n_images": len(corpus.images),
        "n_annotations": len(corpus.annotations),
        "digest": digest,
        "source": corpus.provenance.source,
        "created_at": corpus.provenance.created_at,
        "counters": dict(corpus.provenance.counters),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(_dumps(manifest) + "\n")
        for line in lines:
            f.write(line + "\n")
    os.replace(tmp, path)
    return path


def load_corpus(path: str | os.PathLike) -> Corpus:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines:
        raise CorpusCorruptError(f"{path}: empty file")
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusCorruptError(f"{path}: unreadable manifest") from e
    if manifest.get("kind") != "manifest":
        raise CorpusCorruptError(f"{path}: missing manifest header")
    records = lines[1:]
    if _digest_lines(records) != manifest["digest"]:
        raise CorpusCorruptError(f"{path}: content digest mismatch")
    images, anns = [], []
    for line in records:
        r = json.loads(line)
        if r["kind"] == "image":
            images.append(ImageRecord(r["image_id"], r["width"], r["height"], r["uri"]))
        else:
            anns.append(RegionAnnotation(r["annotation_id"], r["image_id"], tuple(r["box"]),
                                         r["raw_label"], Source(r["source"])))
    prov = Provenance(manifest["source"], manifest.get("created_at", ""), manifest["digest"],
                      dict(manifest.get("counters", {})))
    return Corpus(tuple(images), tuple(anns), prov)
