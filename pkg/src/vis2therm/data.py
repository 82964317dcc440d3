"""Paired visible/thermal frame records, manifest I/O and dataset sampling."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

from .exceptions import ManifestError, ManifestParseError, ValidationError

DAY = "day"
NIGHT = "night"
REAL = "real"
SYNTHETIC = "synthetic"
TIMES_OF_DAY = (DAY, NIGHT)
ORIGINS = (REAL, SYNTHETIC)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel units, (x, y) is the top-left corner."""

    x: float
    y: float
    w: float
    h: float
    occluded: bool = False

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"box must have positive size, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def clamp(self, width: float, height: float) -> "BoundingBox":
        x1, y1 = max(self.x, 0.0), max(self.y, 0.0)
        x2, y2 = min(self.x2, float(width)), min(self.y2, float(height))
        if x2 <= x1 or y2 <= y1:
            raise ValidationError(f"box {self} lies outside the {width}x{height} image")
        if (x1, y1, x2, y2) == (self.x, self.y, self.x2, self.y2):
            return self
        return BoundingBox(x1, y1, x2 - x1, y2 - y1, self.occluded)

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(self.x * factor, self.y * factor, self.w * factor, self.h * factor, self.occluded)


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    visible_path: str
    thermal_path: str
    time_of_day: str
    boxes: tuple[BoundingBox, ...] = ()
    origin: str = REAL
    frame_index: int = 0

    def __post_init__(self):
        if self.time_of_day not in TIMES_OF_DAY:
            raise ValidationError(f"time_of_day must be one of {TIMES_OF_DAY}, got {self.time_of_day!r}")
        if self.origin not in ORIGINS:
            raise ValidationError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        if not isinstance(self.boxes, tuple):
            object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def key(self) -> tuple[str, str]:
        return (self.frame_id, self.origin)


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered, immutable collection of aligned frames sharing one image size.

    Frames are keyed by ``(frame_id, origin)`` so that a combined set may hold
    both the real and the synthetic rendering of the same source frame.
    """

    name: str
    frames: tuple[FrameRecord, ...]
    image_height: int
    image_width: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not isinstance(self.frames, tuple):
            object.__setattr__(self, "frames", tuple(self.frames))
        seen = set()
        for frame in self.frames:
            if frame.key in seen:
                raise ValidationError(f"duplicate frame {frame.frame_id!r} ({frame.origin}) in manifest {self.name!r}")
            seen.add(frame.key)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, index):
        return self.frames[index]

    @property
    def frame_ids(self) -> list[str]:
        return [f.frame_id for f in self.frames]

    def replace(self, **changes) -> "DatasetManifest":
        return dataclasses.replace(self, **changes)

    def subset(self, indices: Iterable[int], name: str | None = None) -> "DatasetManifest":
        frames = tuple(self.frames[i] for i in indices)
        return self.replace(frames=frames, name=name or self.name)


# -- image I/O -----------------------------------------------------------------


def read_image(path: str | os.PathLike, channels: int) -> np.ndarray:
    """Decode an image file to a float32 ``(channels, H, W)`` array in [0, 1]."""
    with PILImage.open(path) as img:
        if channels == 3:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            return np.ascontiguousarray(arr.transpose(2, 0, 1))
        if channels != 1:
            raise ValueError(f"channels must be 1 or 3, got {channels}")
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float32) / 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    return np.clip(arr, 0.0, 1.0)[None]


def write_thermal_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a single-channel [0, 1] image as a 16-bit grayscale PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
        arr = arr[0]
    quantized = np.round(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    PILImage.fromarray(quantized).save(path, format="PNG")


def write_visible_png(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {arr.shape}")
    quantized = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(quantized.transpose(1, 2, 0)).save(path, format="PNG")


def image_size(path: str | os.PathLike) -> tuple[int, int]:
    """Return ``(height, width)`` without decoding pixel data."""
    with PILImage.open(path) as img:
        width, height = img.size
    return height, width


# -- manifest I/O -------------------------------------------------------------------


def _fmt_number(value: float) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def _parse_box(text: str, line: int) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 5:
        raise ManifestParseError(f"box {text!r} must have 5 comma-separated fields x,y,w,h,occ", line)
    try:
        x, y, w, h = (float(p) for p in parts[:4])
    except ValueError:
        raise ManifestParseError(f"box {text!r} has a non-numeric coordinate", line) from None
    if parts[4] not in ("0", "1"):
        raise ManifestParseError(f"occlusion flag must be 0 or 1, got {parts[4]!r}", line)
    if not all(np.isfinite([x, y, w, h])):
        raise ManifestParseError(f"box {text!r} has a non-finite coordinate", line)
    try:
        return BoundingBox(x, y, w, h, parts[4] == "1")
    except ValidationError as exc:
        raise ManifestParseError(str(exc), line) from None


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read a tab-separated frame manifest.

    Paths are resolved against the manifest's directory, boxes are clamped to
    the image bounds, and every visible/thermal pair is checked to have the
    same size. Lines starting with ``#`` are comments; ``# key=value``
    comments become manifest metadata.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    meta: dict[str, str] = {}
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.rstrip("\n").rstrip("\r")
            if not text.strip():
                continue
            if text.startswith("#"):
                body = text[1:].strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    meta[key.strip()] = value.strip()
                continue
            rows.append((lineno, text))

    frames = []
    size = None
    for lineno, text in rows:
        cols = text.split("\t")
        if len(cols) not in (6, 7):
            raise ManifestParseError(f"expected 6 or 7 tab-separated columns, got {len(cols)}", lineno)
        frame_id, index_text, tod, vis_rel, th_rel, box_text = cols[:6]
        origin = cols[6] if len(cols) == 7 else REAL
        if not frame_id:
            raise ManifestParseError("empty frame_id", lineno)
        try:
            frame_index = int(index_text)
        except ValueError:
            raise ManifestParseError(f"frame_index {index_text!r} is not an integer", lineno) from None
        if tod not in TIMES_OF_DAY:
            raise ManifestParseError(f"time of day must be day or night, got {tod!r}", lineno)
        if origin not in ORIGINS:
            raise ManifestParseError(f"origin must be real or synthetic, got {origin!r}", lineno)
        boxes = [_parse_box(b, lineno) for b in box_text.split(";") if b]

        vis_path = os.path.normpath(base / vis_rel)
        th_path = os.path.normpath(base / th_rel)
        try:
            vis_size = image_size(vis_path)
            th_size = image_size(th_path)
        except FileNotFoundError as exc:
            raise ManifestError(f"line {lineno}: image not found: {exc.filename}") from None
        if vis_size != th_size:
            raise ValidationError(
                f"line {lineno}: frame {frame_id!r} visible {vis_size} and thermal {th_size} sizes differ"
            )
        if size is None:
            size = vis_size
        elif vis_size != size:
            raise ValidationError(f"line {lineno}: frame {frame_id!r} has size {vis_size}, manifest uses {size}")
        height, width = vis_size
        try:
            boxes = tuple(b.clamp(width, height) for b in boxes)
        except ValidationError as exc:
            raise ManifestParseError(str(exc), lineno) from None
        frames.append(FrameRecord(frame_id, vis_path, th_path, tod, boxes, origin, frame_index))

    if size is None:
        size = _parse_size(meta.get("image_size", "0x0"))
    name = meta.pop("name", path.stem)
    meta.pop("image_size", None)
    try:
        return DatasetManifest(name, tuple(frames), size[0], size[1], meta)
    except ValidationError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ManifestError(f"bad image_size {text!r}, expected HxW") from None


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike, meta: dict | None = None) -> Path:
    """Write ``manifest`` so that :func:`load_manifest` reproduces it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = os.path.abspath(path.parent)
    header = {"name": manifest.name, "image_size": f"{manifest.image_height}x{manifest.image_width}"}
    header.update(manifest.meta)
    header.update(meta or {})
    lines = [f"# {k}={v}" for k, v in header.items()]
    for f in manifest.frames:
        boxes = ";".join(
            ",".join([_fmt_number(b.x), _fmt_number(b.y), _fmt_number(b.w), _fmt_number(b.h), "1" if b.occluded else "0"])
            for b in f.boxes
        )
        cols = [
            f.frame_id,
            str(f.frame_index),
            f.time_of_day,
            os.path.relpath(os.path.abspath(f.visible_path), base),
            os.path.relpath(os.path.abspath(f.thermal_path), base),
            boxes,
        ]
        if f.origin != REAL:
            cols.append(f.origin)
        lines.append("\t".join(cols))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


# -- sampling & filtering --------------------------------------------------------


def sample_frames(manifest: DatasetManifest, stride: int) -> DatasetManifest:
    """Keep frames whose ``frame_index`` is a multiple of ``stride``."""
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    return manifest.replace(frames=tuple(f for f in manifest.frames if f.frame_index % stride == 0))


def filter_annotations(manifest: DatasetManifest, min_height: float = 50, drop_occluded: bool = True) -> DatasetManifest:
    """Remove small (``h < min_height``) and optionally occluded boxes.

    Frames left without boxes stay in the manifest as negatives.
    """
    if min_height < 0:
        raise ValueError(f"min_height must be >= 0, got {min_height}")
    frames = []
    for f in manifest.frames:
        kept = tuple(b for b in f.boxes if b.h >= min_height and not (drop_occluded and b.occluded))
        frames.append(f if kept == f.boxes else dataclasses.replace(f, boxes=kept))
    return manifest.replace(frames=tuple(frames))


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically partition ``range(n)`` into (train, validation) indices.

    The validation part has ``round(fraction * n)`` elements; both parts keep
    ascending order.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n_val = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return train, val


def split_validation(manifest: DatasetManifest, fraction: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    train, val = split_indices(len(manifest), fraction, seed)
    return (
        manifest.subset(train.tolist(), name=f"{manifest.name}-train"),
        manifest.subset(val.tolist(), name=f"{manifest.name}-val"),
    )


# -- lazy image access ------------------------------------------------------------


class FrameImages(Sequence):
    """Lazily decoded images of one modality for every frame of a manifest."""

    def __init__(self, manifest: DatasetManifest, modality: str = "thermal"):
        if modality not in ("thermal", "visible"):
            raise ValueError(f"modality must be 'thermal' or 'visible', got {modality!r}")
        self.manifest = manifest
        self.modality = modality
        self.channels = 1 if modality == "thermal" else 3

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, index):
        frame = self.manifest.frames[index]
        path = frame.thermal_path if self.modality == "thermal" else frame.visible_path
        return read_image(path, self.channels)


def frame_boxes(manifest: DatasetManifest) -> list[tuple[BoundingBox, ...]]:
    return [f.boxes for f in manifest.frames]
