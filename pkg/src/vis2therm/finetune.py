"""Detector fine-tuning with the step learning-rate schedule, and the estimator wrapper."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data import REAL, DatasetManifest, FrameImages, split_indices
from .detector import (
    Detection,
    DetectorConfig,
    YoloDetector,
    adapt_input_channels,
    build_targets,
    decode_batch,
    detection_loss,
    kmeans_anchors,
)
from .exceptions import NumericError
from .mixture import MixtureSpec
from .validation import check_box_lists, check_divisible, check_images

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FineTuneSchedule:
    batch_size: int = 4
    input_size: tuple[int, int] = (512, 640)  # (height, width)
    init_lr_high: float = 1e-3
    init_lr_low: float = 1e-4
    real_fraction_threshold: float = 0.5
    decay_factor: float = 10.0
    decay_every_epochs: int = 3
    max_epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 5e-4
    val_fraction: float = 0.1
    grad_clip: float | None = 10.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FineTuneSchedule":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def learning_rate(epoch: int, mixture: MixtureSpec | float, schedule: FineTuneSchedule = FineTuneSchedule()) -> float:
    """Step schedule: high/low initial rate by real share, divided by ``decay_factor`` every ``decay_every_epochs``."""
    if not 0 <= epoch < schedule.max_epochs:
        raise ValueError(f"epoch must lie in [0, {schedule.max_epochs}), got {epoch}")
    real_share = mixture.real_fraction if isinstance(mixture, MixtureSpec) else float(mixture)
    base = schedule.init_lr_high if real_share >= schedule.real_fraction_threshold else schedule.init_lr_low
    return base / schedule.decay_factor ** (epoch // schedule.decay_every_epochs)


def real_share(manifest: DatasetManifest) -> float:
    return sum(f.origin == REAL for f in manifest.frames) / max(len(manifest), 1)


def _batch(images: Sequence, idx) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(images[int(i)], dtype=np.float32) for i in idx]))


def _epoch_loss(model, images, boxes, idx, config, batch_size, image_size) -> float:
    if len(idx) == 0:
        return float("nan")
    total = 0.0
    model.eval()
    with torch.no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            raw = model(_batch(images, chunk))
            loss, _ = detection_loss(raw, build_targets([boxes[i] for i in chunk], config, image_size), config)
            total += float(loss) * len(chunk)
    return total / len(idx)


def train_detector(
    model: YoloDetector,
    images: Sequence,
    boxes: Sequence,
    schedule: FineTuneSchedule,
    real_fraction: float,
    seed: int = 0,
) -> list[dict]:
    """Fine-tune ``model`` in place; returns per-epoch records (lr, train/val loss).

    Each epoch holds out ``schedule.val_fraction`` of the images, re-drawn
    with seed ``seed + epoch``.
    """
    n = len(images)
    if n == 0:
        raise ValueError("cannot fine-tune on an empty training set")
    config = model.config
    first = np.asarray(images[0])
    image_size = first.shape[-2:]
    check_divisible(*image_size, config.max_stride)
    torch.manual_seed(seed)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=schedule.init_lr_high, momentum=schedule.momentum, weight_decay=schedule.weight_decay
    )
    history = []
    step = 0
    for epoch in range(schedule.max_epochs):
        lr = learning_rate(epoch, real_fraction, schedule)
        for group in optimizer.param_groups:
            group["lr"] = lr
        if schedule.val_fraction > 0 and n > 1:
            train_idx, val_idx = split_indices(n, schedule.val_fraction, seed + epoch)
        else:
            train_idx, val_idx = np.arange(n), np.arange(0)
        order = np.random.default_rng([seed, epoch]).permutation(train_idx)
        model.train()
        running, seen = 0.0, 0
        for start in range(0, len(order), schedule.batch_size):
            chunk = order[start : start + schedule.batch_size]
            raw = model(_batch(images, chunk))
            targets = build_targets([boxes[i] for i in chunk], config, image_size)
            loss, parts = detection_loss(raw, targets, config)
            if not torch.isfinite(loss):
                raise NumericError(f"epoch {epoch} step {step}: non-finite detection loss {parts}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if schedule.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
            optimizer.step()
            running += float(loss.detach()) * len(chunk)
            seen += len(chunk)
            step += 1
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": running / max(seen, 1),
            "val_loss": _epoch_loss(model, images, boxes, val_idx, config, schedule.batch_size, image_size),
            "steps": step,
        }
        log.info("epoch %(epoch)d lr %(lr).2g train %(train_loss).4f val %(val_loss).4f", record)
        history.append(record)
    model.eval()
    return history


class PedestrianDetector(BaseEstimator):
    """Single-class detector with ``fit``/``predict``.

    ``fit(X, y)`` takes images ``(N, C, H, W)`` in [0, 1] and, per image, a
    list of :class:`BoundingBox` (or ``(x, y, w, h[, occluded])`` tuples).
    ``predict(X)`` returns one list of :class:`Detection` per image.

    ``init_params`` may be a detector checkpoint path or a fitted
    ``PedestrianDetector`` to warm-start from; anchors and architecture are
    then inherited and the stem is adapted to the input channel count.
    Without it, anchors are fitted by k-means on the training boxes.
    """

    def __init__(
        self,
        width=16,
        backbone_depth=(1, 1, 2, 2, 1),
        schedule=None,
        init_params=None,
        real_fraction=1.0,
        seed=0,
        conf_threshold=0.01,
        nms_iou=0.45,
    ):
        self.width = width
        self.backbone_depth = backbone_depth
        self.schedule = schedule
        self.init_params = init_params
        self.real_fraction = real_fraction
        self.seed = seed
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou

    def _initial_model(self, X, y) -> YoloDetector:
        channels, height, width = X.shape[1:]
        init = self.init_params
        if isinstance(init, PedestrianDetector):
            check_is_fitted(init, "model_")
            config, state = init.config_, init.model_.state_dict()
        elif init is not None:
            payload = load_checkpoint(init, kind="detector")
            config = DetectorConfig.from_dict(payload["config"]["detector"])
            state = payload["params"]["detector"]
        else:
            wh = [(b.w, b.h) for boxes in y for b in boxes]
            config = DetectorConfig(
                in_channels=channels, input_size=(height, width), width=self.width,
                backbone_depth=tuple(self.backbone_depth),
                anchors=kmeans_anchors(wh, 9, self.seed) if len(wh) else DetectorConfig().anchors,
            )
            torch.manual_seed(self.seed)
            return YoloDetector(config)
        config = dataclasses.replace(config, in_channels=channels, input_size=(height, width))
        model = YoloDetector(config)
        model.load_state_dict(adapt_input_channels(state, channels))
        return model

    def fit(self, X, y):
        X = check_images(X)
        y = check_box_lists(y, len(X))
        check_divisible(X.shape[2], X.shape[3], DetectorConfig().max_stride)
        return self._fit(X, y, self.real_fraction)

    def fit_manifest(self, manifest: DatasetManifest, modality: str = "thermal"):
        """Fit on the images of ``manifest``; the learning rate follows its real-frame share."""
        images = FrameImages(manifest, modality)
        if len(images) == 0:
            raise ValueError("train manifest is empty")
        check_divisible(manifest.image_height, manifest.image_width, DetectorConfig().max_stride)
        boxes = [f.boxes for f in manifest.frames]
        share = real_share(manifest) if modality == "thermal" else 1.0
        return self._fit(images, boxes, share)

    def _fit(self, images, boxes, share):
        schedule = self.schedule or FineTuneSchedule()
        first = np.asarray(images[0])[None]
        model = self._initial_model(first, boxes)
        self.history_ = train_detector(model, images, boxes, schedule, share, self.seed)
        self.model_ = model
        self.config_ = model.config
        self.schedule_ = schedule
        self.real_fraction_ = share
        self.n_features_in_ = first.shape[1]
        return self

    def raw_predict(self, X) -> list[torch.Tensor]:
        check_is_fitted(self, "model_")
        X = check_images(X, channels=self.config_.in_channels)
        self.model_.eval()
        with torch.no_grad():
            return self.model_(torch.from_numpy(X))

    def predict(self, X, batch_size: int = 8) -> list[list[Detection]]:
        check_is_fitted(self, "model_")
        X = check_images(X, channels=self.config_.in_channels)
        out = []
        for start in range(0, len(X), batch_size):
            raw = self.raw_predict(X[start : start + batch_size])
            out.extend(decode_batch(raw, self.config_, self.conf_threshold, self.nms_iou, X.shape[2:]))
        return out

    def predict_manifest(self, manifest: DatasetManifest, modality: str = "thermal", batch_size: int = 8) -> dict[str, list[Detection]]:
        images = FrameImages(manifest, modality)
        result = {}
        for start in range(0, len(images), batch_size):
            idx = range(start, min(start + batch_size, len(images)))
            dets = self.predict(np.stack([images[i] for i in idx]), batch_size)
            for i, d in zip(idx, dets):
                result[manifest.frames[i].frame_id] = d
        return result

    def save(self, path, meta: dict | None = None) -> Path:
        check_is_fitted(self, "model_")
        return save_checkpoint(
            path,
            kind="detector",
            config={"detector": self.config_.to_dict(), "schedule": self.schedule_.to_dict()},
            params={"detector": self.model_.state_dict()},
            epoch=len(self.history_),
            step=self.history_[-1]["steps"] if self.history_ else 0,
            history=self.history_,
            meta={"seed": self.seed, "real_fraction": self.real_fraction_, **(meta or {})},
        )

    @classmethod
    def load(cls, path) -> "PedestrianDetector":
        payload = load_checkpoint(path, kind="detector")
        config = DetectorConfig.from_dict(payload["config"]["detector"])
        schedule = FineTuneSchedule.from_dict(payload["config"]["schedule"])
        det = cls(width=config.width, backbone_depth=config.backbone_depth, schedule=schedule,
                  seed=payload["meta"].get("seed", 0))
        det.model_ = YoloDetector(config)
        det.model_.load_state_dict(payload["params"]["detector"])
        det.model_.eval()
        det.config_ = config
        det.schedule_ = schedule
        det.history_ = list(payload["history"])
        det.real_fraction_ = payload["meta"].get("real_fraction", 1.0)
        det.n_features_in_ = config.in_channels
        return det


def fine_tune(
    init_params,
    train: DatasetManifest,
    schedule: FineTuneSchedule = FineTuneSchedule(),
    seed: int = 0,
    modality: str = "thermal",
    **detector_kwargs,
) -> PedestrianDetector:
    """Fine-tune from ``init_params`` (checkpoint path, fitted detector, or ``None``) on ``train``."""
    if len(train) == 0:
        raise ValueError("train manifest is empty")
    det = PedestrianDetector(schedule=schedule, init_params=init_params, seed=seed, **detector_kwargs)
    return det.fit_manifest(train, modality)
