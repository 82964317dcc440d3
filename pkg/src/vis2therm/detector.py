"""Desk-scale single-class YOLO-style detector.

A reduced Darknet-like backbone (five stride-2 stages) feeds an FPN-style
head with three detection scales at strides 8, 16 and 32. Each anchor
predicts ``(tx, ty, tw, th, objectness)``; there are no class outputs.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import BoundingBox
from .exceptions import ShapeError
from .validation import check_probability

NUM_STAGES = 5
VALUES_PER_ANCHOR = 5  # tx, ty, tw, th, objectness

# tall pedestrian-shaped priors for a 640x512 frame; replaced by k-means on real data
DEFAULT_ANCHORS = (
    (10.0, 24.0), (14.0, 36.0), (20.0, 50.0),
    (28.0, 68.0), (38.0, 92.0), (52.0, 124.0),
    (70.0, 168.0), (96.0, 230.0), (130.0, 320.0),
)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class DetectorConfig:
    in_channels: int = 1
    input_size: tuple[int, int] = (512, 640)  # (height, width)
    width: int = 16
    backbone_depth: tuple[int, ...] = (1, 1, 2, 2, 1)
    num_scales: int = 3
    anchors_per_scale: int = 3
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    num_classes: int = 1

    def __post_init__(self):
        if self.num_classes != 1:
            raise ValueError("only single-class (pedestrian) detection is supported")
        if not 1 <= self.num_scales <= 3:
            raise ValueError(f"num_scales must be 1, 2 or 3, got {self.num_scales}")
        if len(self.backbone_depth) != NUM_STAGES:
            raise ValueError(f"backbone_depth needs {NUM_STAGES} entries, got {len(self.backbone_depth)}")
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "backbone_depth", tuple(int(v) for v in self.backbone_depth))
        object.__setattr__(self, "anchors", tuple((float(w), float(h)) for w, h in self.anchors))
        if len(self.anchors) != self.num_scales * self.anchors_per_scale:
            raise ValueError(
                f"expected {self.num_scales * self.anchors_per_scale} anchors, got {len(self.anchors)}"
            )
        if any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ValueError("anchors must be strictly positive")

    @property
    def strides(self) -> tuple[int, ...]:
        first = NUM_STAGES - self.num_scales + 1
        return tuple(2**s for s in range(first, NUM_STAGES + 1))

    @property
    def max_stride(self) -> int:
        return 2**NUM_STAGES

    def scale_anchors(self, scale: int) -> tuple[tuple[float, float], ...]:
        a = self.anchors_per_scale
        return self.anchors[scale * a : (scale + 1) * a]

    def stage_channels(self, stage: int) -> int:
        return self.width * 2**stage

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["backbone_depth"] = list(self.backbone_depth)
        d["anchors"] = [list(a) for a in self.anchors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        d["backbone_depth"] = tuple(d["backbone_depth"])
        d["anchors"] = tuple(tuple(a) for a in d["anchors"])
        return cls(**d)


# -- network -------------------------------------------------------------------


class ConvAct(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride, kernel // 2)
        self.act = nn.LeakyReLU(0.1)


class ResidualUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.reduce = ConvAct(channels, channels // 2, 1)
        self.expand = ConvAct(channels // 2, channels, 3)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.expand(self.reduce(x))


class Backbone(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.stem = ConvAct(config.in_channels, config.width, 3)
        stages = {}
        cin = config.width
        for i, depth in enumerate(config.backbone_depth, start=1):
            cout = config.stage_channels(i)
            stages[f"stage{i}"] = nn.Sequential(ConvAct(cin, cout, 3, 2), *(ResidualUnit(cout) for _ in range(depth)))
            cin = cout
        self.stages = nn.ModuleDict(stages)

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        out = {}
        x = self.stem(x)
        for name, stage in self.stages.items():
            x = stage(x)
            out[name] = x
        return out


class YoloDetector(nn.Module):
    """Backbone plus multi-scale head; ``forward`` returns raw predictions.

    Output ``i`` has shape ``(N, anchors_per_scale, H / stride_i, W / stride_i, 5)``
    with scales ordered fine to coarse.
    """

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        stages = list(range(NUM_STAGES - config.num_scales + 1, NUM_STAGES + 1))
        self.used_stages = [f"stage{s}" for s in stages]
        chans = [config.stage_channels(s) for s in stages]
        n_out = config.anchors_per_scale * VALUES_PER_ANCHOR
        self.fuse = nn.ModuleList()
        self.lateral = nn.ModuleList()
        for i, c in enumerate(chans):
            coarsest = i == len(chans) - 1
            self.fuse.append(ConvAct(c if coarsest else 2 * c, c, 3))
            if not coarsest:
                self.lateral.append(ConvAct(chans[i + 1], c, 1))
        self.predict = nn.ModuleList(nn.Conv2d(c, n_out, 1) for c in chans)
        for head in self.predict:
            with torch.no_grad():
                head.bias.view(config.anchors_per_scale, VALUES_PER_ANCHOR)[:, 4].fill_(-4.0)

    def check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"detector expects (N, {cfg.in_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % cfg.max_stride or w % cfg.max_stride:
            raise ShapeError(f"input size {h}x{w} must be divisible by {cfg.max_stride}")

    def forward(self, x: Tensor) -> list[Tensor]:
        self.check_input(x)
        feats = self.backbone(x)
        feats = [feats[name] for name in self.used_stages]
        n_scales = len(feats)
        preds: list[Tensor] = [None] * n_scales
        h = self.fuse[-1](feats[-1])
        preds[-1] = self.predict[-1](h)
        for i in range(n_scales - 2, -1, -1):
            up = F.interpolate(self.lateral[i](h), scale_factor=2, mode="nearest")
            h = self.fuse[i](torch.cat([up, feats[i]], 1))
            preds[i] = self.predict[i](h)
        a = self.config.anchors_per_scale
        return [p.view(p.shape[0], a, VALUES_PER_ANCHOR, p.shape[2], p.shape[3]).permute(0, 1, 3, 4, 2) for p in preds]


def adapt_input_channels(state: dict[str, Tensor], in_channels: int) -> dict[str, Tensor]:
    """Re-shape the stem convolution of a detector state dict for a new input depth.

    Going from 3 to 1 channel sums the RGB filters, which makes a grayscale
    input replicated to RGB give the same response.
    """
    key = "backbone.stem.conv.weight"
    weight = state[key]
    current = weight.shape[1]
    if current == in_channels:
        return state
    state = dict(state)
    if in_channels == 1:
        state[key] = weight.sum(dim=1, keepdim=True)
    elif current == 1:
        state[key] = weight.repeat(1, in_channels, 1, 1) / in_channels
    else:
        raise ShapeError(f"cannot adapt stem from {current} to {in_channels} channels")
    return state


# -- box geometry --------------------------------------------------------------------


def box_iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` corner-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _wh_iou(wh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    inter = np.minimum(wh[:, None, 0], anchors[None, :, 0]) * np.minimum(wh[:, None, 1], anchors[None, :, 1])
    union = wh[:, None, 0] * wh[:, None, 1] + anchors[None, :, 0] * anchors[None, :, 1] - inter
    return inter / union


def non_max_suppression(boxes_xyxy: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes_xyxy = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = box_iou_xyxy(boxes_xyxy[i], boxes_xyxy[order[1:]])[0]
        order = order[1:][ious <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def kmeans_anchors(wh, k: int = 9, seed: int = 0, iterations: int = 100) -> tuple[tuple[float, float], ...]:
    """Cluster box sizes with ``1 - IoU`` distance; returns ``k`` anchors sorted by area."""
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    if len(wh) == 0:
        raise ValueError("no boxes to cluster")
    rng = np.random.default_rng(seed)
    unique = np.unique(wh, axis=0)
    if len(unique) >= k:
        centers = unique[rng.choice(len(unique), k, replace=False)]
    else:
        # too few distinct sizes: spread geometric multiples around the data
        base = unique[rng.integers(len(unique), size=k)]
        centers = base * np.geomspace(0.7, 1.4, k)[:, None]
    for _ in range(iterations):
        assign = np.argmax(_wh_iou(wh, centers), axis=1)
        updated = centers.copy()
        for j in range(k):
            members = wh[assign == j]
            if len(members):
                updated[j] = np.median(members, axis=0)
        if np.allclose(updated, centers):
            break
        centers = updated
    centers = centers[np.argsort(centers[:, 0] * centers[:, 1], kind="stable")]
    return tuple((float(w), float(h)) for w, h in centers)


# -- encoding / decoding ----------------------------------------------------------


def _grid(h: int, w: int, dtype=torch.float32) -> tuple[Tensor, Tensor]:
    gy, gx = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    return gx, gy


def _decode_scale(t: Tensor, stride: int, anchors) -> tuple[Tensor, Tensor]:
    n, a, h, w, _ = t.shape
    gx, gy = _grid(h, w, t.dtype)
    anchors = torch.tensor(anchors, dtype=t.dtype).view(1, a, 1, 1, 2)
    cx = (torch.sigmoid(t[..., 0]) + gx) * stride
    cy = (torch.sigmoid(t[..., 1]) + gy) * stride
    wh = anchors * torch.exp(torch.clamp(t[..., 2:4], max=10.0))
    x1 = cx - wh[..., 0] / 2
    y1 = cy - wh[..., 1] / 2
    corners = torch.stack([x1, y1, x1 + wh[..., 0], y1 + wh[..., 1]], -1)
    return corners.reshape(n, -1, 4), torch.sigmoid(t[..., 4]).reshape(n, -1)


def decode_raw(raw: Sequence[Tensor], config: DetectorConfig) -> tuple[Tensor, Tensor]:
    """Map raw outputs ``[(N, A, H, W, 5)]`` to corner boxes ``(N, M, 4)`` and scores ``(N, M)``."""
    decoded = [_decode_scale(t, stride, config.scale_anchors(i)) for i, (t, stride) in enumerate(zip(raw, config.strides))]
    return torch.cat([d[0] for d in decoded], 1), torch.cat([d[1] for d in decoded], 1)


def decode_detections(
    raw: Sequence[Tensor],
    config: DetectorConfig,
    conf_threshold: float = 0.5,
    nms_iou: float = 0.45,
    image_size: tuple[int, int] | None = None,
) -> list[Detection]:
    """Decode one image's raw predictions ``[(A, H, W, 5)]`` into detections.

    Keeps boxes with confidence strictly above ``conf_threshold``, clips them
    to the image, applies greedy NMS and sorts by descending confidence.
    """
    return decode_batch([t.unsqueeze(0) for t in raw], config, conf_threshold, nms_iou, image_size)[0]


def decode_batch(
    raw: Sequence[Tensor],
    config: DetectorConfig,
    conf_threshold: float = 0.5,
    nms_iou: float = 0.45,
    image_size: tuple[int, int] | None = None,
) -> list[list[Detection]]:
    check_probability(conf_threshold, "conf_threshold")
    check_probability(nms_iou, "nms_iou")
    if image_size is None:
        image_size = (raw[0].shape[2] * config.strides[0], raw[0].shape[3] * config.strides[0])
    height, width = image_size
    with torch.no_grad():
        boxes, scores = decode_raw(raw, config)
    boxes = boxes.double().numpy()
    scores = scores.double().numpy()
    results = []
    for b, s in zip(boxes, scores):
        keep = s > conf_threshold
        b, s = b[keep], s[keep]
        b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
        b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
        valid = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
        b, s = b[valid], s[valid]
        idx = non_max_suppression(b, s, nms_iou)
        results.append(
            [
                Detection(BoundingBox(b[i, 0], b[i, 1], b[i, 2] - b[i, 0], b[i, 3] - b[i, 1]), float(s[i]))
                for i in idx
            ]
        )
    return results


@dataclass
class ScaleTargets:
    obj: Tensor  # (N, A, H, W) 1 where an anchor is responsible for a box
    txy: Tensor  # (N, A, H, W, 2) in-cell offsets in [0, 1)
    twh: Tensor  # (N, A, H, W, 2) log size ratios to the anchor
    weight: Tensor  # (N, A, H, W) coordinate loss weight, 2 - relative box area
    gt_boxes: list[np.ndarray] = field(default_factory=list)  # per image (k, 4) corners


def build_targets(
    boxes: Sequence[Sequence[BoundingBox]], config: DetectorConfig, image_size: tuple[int, int]
) -> list[ScaleTargets]:
    """Assign every box to the best-matching anchor (by shape IoU) over all scales."""
    height, width = image_size
    n = len(boxes)
    a = config.anchors_per_scale
    anchors = np.asarray(config.anchors)
    targets = []
    for stride in config.strides:
        gh, gw = height // stride, width // stride
        targets.append(
            ScaleTargets(
                torch.zeros(n, a, gh, gw),
                torch.zeros(n, a, gh, gw, 2),
                torch.zeros(n, a, gh, gw, 2),
                torch.zeros(n, a, gh, gw),
            )
        )
    for i, image_boxes in enumerate(boxes):
        corners = np.array([[b.x, b.y, b.x2, b.y2] for b in image_boxes], dtype=np.float64).reshape(-1, 4)
        for t in targets:
            t.gt_boxes.append(corners)
        if not len(image_boxes):
            continue
        wh = np.array([[b.w, b.h] for b in image_boxes])
        best = np.argmax(_wh_iou(wh, anchors), axis=1)
        for b, k in zip(image_boxes, best):
            scale, j = divmod(int(k), a)
            stride = config.strides[scale]
            t = targets[scale]
            cx, cy = b.x + b.w / 2, b.y + b.h / 2
            gx = min(int(cx // stride), t.obj.shape[3] - 1)
            gy = min(int(cy // stride), t.obj.shape[2] - 1)
            aw, ah = config.anchors[k]
            t.obj[i, j, gy, gx] = 1.0
            t.txy[i, j, gy, gx, 0] = cx / stride - gx
            t.txy[i, j, gy, gx, 1] = cy / stride - gy
            t.twh[i, j, gy, gx, 0] = math.log(b.w / aw)
            t.twh[i, j, gy, gx, 1] = math.log(b.h / ah)
            t.weight[i, j, gy, gx] = 2.0 - (b.w * b.h) / (width * height)
    return targets


def targets_to_raw(targets: Sequence[ScaleTargets], confidence_logit: float = 20.0) -> list[Tensor]:
    """The ideal raw prediction for given targets (inverse of the decode transform)."""
    raw = []
    eps = 1e-6
    for t in targets:
        out = torch.zeros(*t.obj.shape, VALUES_PER_ANCHOR, dtype=torch.float64)
        out[..., 0:2] = torch.logit(t.txy.double().clamp(eps, 1 - eps))
        out[..., 2:4] = t.twh.double()
        out[..., 4] = torch.where(t.obj > 0, confidence_logit, -confidence_logit).double()
        raw.append(out)
    return raw


def detection_loss(
    raw: Sequence[Tensor], targets: Sequence[ScaleTargets], config: DetectorConfig, ignore_iou: float = 0.5
) -> tuple[Tensor, dict[str, float]]:
    """YOLOv3-style loss: BCE on cell offsets, squared error on log sizes, BCE on objectness.

    Non-responsible anchors whose decoded box already overlaps a ground truth
    by more than ``ignore_iou`` are excluded from the objectness term. The
    sum is divided by the batch size.
    """
    n = raw[0].shape[0]
    xy_loss = raw[0].new_zeros(())
    wh_loss = raw[0].new_zeros(())
    obj_loss = raw[0].new_zeros(())
    for scale, (p, t) in enumerate(zip(raw, targets)):
        mask = t.obj > 0
        if mask.any():
            w = t.weight[mask].unsqueeze(-1)
            xy_loss = xy_loss + (
                F.binary_cross_entropy_with_logits(p[..., 0:2][mask], t.txy[mask], reduction="none") * w
            ).sum()
            wh_loss = wh_loss + (0.5 * (p[..., 2:4][mask] - t.twh[mask]) ** 2 * w).sum()

        ignore = torch.zeros_like(mask)
        with torch.no_grad():
            boxes, _ = _decode_scale(p.detach(), config.strides[scale], config.scale_anchors(scale))
            for i, gt in enumerate(t.gt_boxes):
                if len(gt):
                    ious = box_iou_xyxy(boxes[i].double().numpy(), gt).max(axis=1)
                    ignore[i] = torch.from_numpy(ious > ignore_iou).view(ignore[i].shape)
        keep = mask | ~ignore
        obj_loss = obj_loss + F.binary_cross_entropy_with_logits(p[..., 4][keep], t.obj[keep], reduction="sum")
    total = (xy_loss + wh_loss + obj_loss) / n
    parts = {k: float(v.detach()) / n for k, v in (("xy", xy_loss), ("wh", wh_loss), ("obj", obj_loss))}
    return total, parts
