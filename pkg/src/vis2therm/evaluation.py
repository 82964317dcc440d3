"""Pedestrian detection scoring: miss rate vs. false positives per image.

Ground truths outside the "reasonable" setting (too small or occluded)
become ignore regions: an unmatched detection overlapping one of them is
dropped instead of being counted as a false positive.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DAY, NIGHT, BoundingBox, DatasetManifest
from .detector import Detection
from .exceptions import EvaluationError, ManifestParseError, ValidationError

EPSILON = 1e-10


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class MatchResult:
    """Indices into the detection / ground-truth lists passed to :func:`match_frame`."""

    tp: list[tuple[int, int]] = field(default_factory=list)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)
    ignored: list[int] = field(default_factory=list)

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.tp), len(self.fp), len(self.fn)


def _confidence_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def match_frame(
    dets: Sequence[Detection],
    gts: Sequence[BoundingBox],
    iou_threshold: float = 0.5,
    ignore: Sequence[BoundingBox] = (),
) -> MatchResult:
    """Greedy one-to-one matching, highest confidence first.

    Each detection takes the still-unmatched ground truth with the highest
    IoU at or above ``iou_threshold``.
    """
    result = MatchResult()
    taken = [False] * len(gts)
    for d in _confidence_order(dets):
        box = dets[d].box
        best, best_iou = -1, iou_threshold
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            v = iou(box, gt)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            taken[best] = True
            result.tp.append((d, best))
        elif any(iou(box, ig) >= iou_threshold for ig in ignore):
            result.ignored.append(d)
        else:
            result.fp.append(d)
    result.fn = [g for g, t in enumerate(taken) if not t]
    return result


@dataclass(frozen=True)
class FrameEval:
    dets: tuple[Detection, ...]
    gts: tuple[BoundingBox, ...]
    ignore: tuple[BoundingBox, ...] = ()


@dataclass
class MrFppiCurve:
    points: list[tuple[float, float]]  # (fppi, miss_rate), ordered by fppi
    thresholds: list[float]  # confidence threshold per point; +inf for "no detections"

    @property
    def fppi(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def miss_rate(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def mr_fppi_curve(frames: Sequence[FrameEval], iou_threshold: float = 0.5) -> MrFppiCurve:
    """Sweep the confidence threshold over every distinct detection score.

    Greedy matching in confidence order makes the assignment at a threshold
    a prefix of the full assignment, so one matching pass per frame suffices.
    """
    if not frames:
        raise EvaluationError("cannot build a curve over zero images")
    n_gt = sum(len(f.gts) for f in frames)
    if n_gt == 0:
        raise EvaluationError("miss rate is undefined without ground-truth boxes")
    scored = []  # (confidence, is_tp, is_fp)
    for f in frames:
        m = match_frame(f.dets, f.gts, iou_threshold, f.ignore)
        scored += [(f.dets[d].confidence, True, False) for d, _ in m.tp]
        scored += [(f.dets[d].confidence, False, True) for d in m.fp]
        scored += [(f.dets[d].confidence, False, False) for d in m.ignored]
    scored.sort(key=lambda s: -s[0])
    n_img = len(frames)
    points = [(0.0, 1.0)]
    thresholds = [math.inf]
    tp = fp = 0
    i = 0
    while i < len(scored):
        conf = scored[i][0]
        while i < len(scored) and scored[i][0] == conf:
            tp += scored[i][1]
            fp += scored[i][2]
            i += 1
        points.append((fp / n_img, (n_gt - tp) / n_gt))
        thresholds.append(conf)
    return MrFppiCurve(points, thresholds)


def reference_points(fppi_min: float = 1e-2, fppi_max: float = 1.0, num_points: int = 9) -> np.ndarray:
    return np.logspace(math.log10(fppi_min), math.log10(fppi_max), num_points)


def sample_miss_rates(curve: MrFppiCurve, refs: np.ndarray) -> np.ndarray:
    """Miss rate of the last curve point with ``fppi <= ref``, or 1 when none exists."""
    fppi = curve.fppi
    mr = curve.miss_rate
    out = np.ones(len(refs))
    for k, ref in enumerate(refs):
        idx = np.flatnonzero(fppi <= ref)
        if idx.size:
            out[k] = mr[idx[-1]]
    return out


def log_average_miss_rate(
    curve: MrFppiCurve, fppi_min: float = 1e-2, fppi_max: float = 1.0, num_points: int = 9
) -> float:
    if not curve.points:
        raise ValueError("empty curve")
    if not 0 < fppi_min < fppi_max:
        raise ValueError(f"need 0 < fppi_min < fppi_max, got {fppi_min}, {fppi_max}")
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    mrs = sample_miss_rates(curve, reference_points(fppi_min, fppi_max, num_points))
    return float(np.exp(np.mean(np.log(np.maximum(mrs, EPSILON)))))


# -- full evaluation ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSettings:
    iou_threshold: float = 0.5
    min_height: float = 50.0
    drop_occluded: bool = True
    fppi_min: float = 1e-2
    fppi_max: float = 1.0
    num_points: int = 9


@dataclass
class EvalReport:
    lamr_all: float
    lamr_day: float
    lamr_night: float
    curves: dict[str, MrFppiCurve | None]
    counts: dict[str, dict[str, int]]
    meta: dict = field(default_factory=dict)

    @property
    def lamr(self) -> dict[str, float]:
        return {"all": self.lamr_all, "day": self.lamr_day, "night": self.lamr_night}

    def to_dict(self) -> dict:
        return {
            "lamr": {k: (None if math.isnan(v) else v) for k, v in self.lamr.items()},
            "counts": self.counts,
            "curves": {k: (c.points if c is not None else None) for k, c in self.curves.items()},
            "meta": self.meta,
        }

    def write(self, out_dir, prefix: str = "") -> dict[str, Path]:
        """Write ``{prefix}report.json`` and one ``{prefix}curve_<subset>.tsv`` per subset."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"report": out_dir / f"{prefix}report.json"}
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        for subset, curve in self.curves.items():
            if curve is None:
                continue
            p = out_dir / f"{prefix}curve_{subset}.tsv"
            p.write_text("".join(f"{f!r}\t{m!r}\n" for f, m in curve.points), encoding="utf-8")
            paths[f"curve_{subset}"] = p
        return paths


def reasonable_split(boxes: Sequence[BoundingBox], settings: EvalSettings) -> tuple[tuple, tuple]:
    """Split ground truths into (evaluated, ignored) under the reasonable setting."""
    keep, ignore = [], []
    for b in boxes:
        if b.h >= settings.min_height and not (settings.drop_occluded and b.occluded):
            keep.append(b)
        else:
            ignore.append(b)
    return tuple(keep), tuple(ignore)


def evaluate(
    detections: Mapping[str, Sequence[Detection]] | str | os.PathLike,
    manifest: DatasetManifest,
    settings: EvalSettings = EvalSettings(),
) -> EvalReport:
    """Score detections against ``manifest`` for the all/day/night subsets.

    A subset without images reports ``nan``.
    """
    if not isinstance(detections, Mapping):
        detections = read_detections(detections)
    known = set(manifest.frame_ids)
    unknown = sorted(set(detections) - known)
    if unknown:
        raise ValidationError(f"detections reference unknown frame ids: {unknown[:20]}")
    per_subset: dict[str, list[FrameEval]] = {"all": [], DAY: [], NIGHT: []}
    counts = {k: {"images": 0, "ground_truths": 0, "ignored": 0, "detections": 0} for k in per_subset}
    for frame in manifest.frames:
        gts, ignore = reasonable_split(frame.boxes, settings)
        dets = tuple(detections.get(frame.frame_id, ()))
        fe = FrameEval(dets, gts, ignore)
        for subset in ("all", frame.time_of_day):
            per_subset[subset].append(fe)
            c = counts[subset]
            c["images"] += 1
            c["ground_truths"] += len(gts)
            c["ignored"] += len(ignore)
            c["detections"] += len(dets)
    lamrs, curves = {}, {}
    for subset, frames in per_subset.items():
        if not frames:
            lamrs[subset], curves[subset] = math.nan, None
            continue
        try:
            curve = mr_fppi_curve(frames, settings.iou_threshold)
        except EvaluationError as exc:
            raise EvaluationError(f"subset {subset!r}: {exc}") from None
        curves[subset] = curve
        lamrs[subset] = log_average_miss_rate(curve, settings.fppi_min, settings.fppi_max, settings.num_points)
    return EvalReport(lamrs["all"], lamrs[DAY], lamrs[NIGHT], curves, counts)


# -- detection files ------------------------------------------------------------------


def write_detections(path, detections: Mapping[str, Sequence[Detection]]) -> Path:
    """One line per detection: ``frame_id TAB x TAB y TAB w TAB h TAB confidence``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for frame_id, dets in detections.items():
            for d in dets:
                b = d.box
                fh.write(f"{frame_id}\t{b.x!r}\t{b.y!r}\t{b.w!r}\t{b.h!r}\t{d.confidence!r}\n")
    return path


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise ManifestParseError(f"expected 6 tab-separated columns, got {len(cols)}", lineno)
            try:
                x, y, w, h, conf = (float(c) for c in cols[1:])
                det = Detection(BoundingBox(x, y, w, h), conf)
            except ValueError as exc:
                raise ManifestParseError(str(exc), lineno) from None
            out.setdefault(cols[0], []).append(det)
    return out
