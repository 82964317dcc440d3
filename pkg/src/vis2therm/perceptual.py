"""Frozen detector backbone used as the perceptual-loss feature space."""

from __future__ import annotations

import copy
import re
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import load_checkpoint, state_digest
from .detector import Backbone, DetectorConfig, YoloDetector
from .exceptions import NumericError, ShapeError

DEFAULT_TAP = "stages.stage5"


class _Tapped(Exception):
    pass


class FeatureExtractor(nn.Module):
    """Returns the activation of one backbone layer; parameters never train.

    Gradients flow to the input images but not to the backbone weights.
    """

    def __init__(self, backbone: Backbone, tap_layer: str = DEFAULT_TAP):
        super().__init__()
        self.backbone = copy.deepcopy(backbone).eval()
        self.backbone.requires_grad_(False)
        modules = dict(self.backbone.named_modules())
        if tap_layer not in modules or tap_layer == "":
            raise KeyError(f"unknown tap layer {tap_layer!r}; choose one of {sorted(k for k in modules if k)}")
        self.tap_layer = tap_layer
        self._tap_module = modules[tap_layer]
        self.in_channels = self.backbone.stem.conv.in_channels
        m = re.match(r"stages\.stage(\d+)", tap_layer)
        self.stride = 2 ** int(m.group(1)) if m else 1

    @classmethod
    def from_detector(cls, detector: YoloDetector, tap_layer: str = DEFAULT_TAP) -> "FeatureExtractor":
        return cls(detector.backbone, tap_layer)

    @classmethod
    def from_checkpoint(cls, path, tap_layer: str = DEFAULT_TAP) -> "FeatureExtractor":
        payload = load_checkpoint(path, kind="detector")
        model = YoloDetector(DetectorConfig.from_dict(payload["config"]["detector"]))
        model.load_state_dict(payload["params"]["detector"])
        return cls(model.backbone, tap_layer)

    def train(self, mode: bool = True):
        # stays in inference mode regardless of the parent module
        return super().train(False)

    def forward(self, img: Tensor) -> Tensor:
        if img.ndim == 3:
            img = img.unsqueeze(0)
        if img.ndim != 4 or img.shape[1] != self.in_channels:
            raise ShapeError(f"feature extractor expects (N, {self.in_channels}, H, W), got {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"input size {h}x{w} must be divisible by {self.stride} for tap {self.tap_layer!r}")
        captured = {}

        def hook(_module, _inputs, output):
            captured["out"] = output
            raise _Tapped

        handle = self._tap_module.register_forward_hook(hook)
        try:
            self.backbone(img)
        except _Tapped:
            pass
        finally:
            handle.remove()
        return captured["out"]

    def distance(self, real: Tensor, fake: Tensor) -> Tensor:
        return perceptual_distance(real, fake, self)

    def digest(self) -> str:
        return state_digest(self.backbone.state_dict())


def extract_features(img, extractor: FeatureExtractor) -> Tensor:
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(img)
    return extractor(img)


def perceptual_distance(real: Tensor, fake: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Mean squared difference between the tap-layer features of two images."""
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} shapes differ")
    fr = extractor(real)
    ff = extractor(fake)
    if not (torch.isfinite(fr).all() and torch.isfinite(ff).all()):
        raise NumericError(f"non-finite features at tap {extractor.tap_layer!r}")
    return torch.mean((fr - ff) ** 2)


# -- feature dumps -------------------------------------------------------------------


def write_feature_dump(path, features, layer: str) -> Path:
    """Write features as a text header (``key=value`` lines, blank line) plus raw little-endian float32."""
    arr = features.detach().cpu().numpy() if isinstance(features, Tensor) else np.asarray(features)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = f"layer={layer}\nshape={','.join(map(str, arr.shape))}\ndtype=float32\n\n"
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(arr.tobytes())
    return path


def read_feature_dump(path) -> tuple[np.ndarray, str]:
    data = Path(path).read_bytes()
    head, sep, body = data.partition(b"\n\n")
    if not sep:
        raise ValueError(f"{path}: missing feature dump header")
    fields = dict(line.split("=", 1) for line in head.decode("utf-8").splitlines())
    shape = tuple(int(s) for s in fields["shape"].split(",") if s)
    arr = np.frombuffer(body, dtype="<f4").reshape(shape)
    return arr, fields["layer"]
