"""Procedurally rendered paired visible/thermal scenes with pedestrians.

Each scene is a sky/ground backdrop with buildings, optional cars, and
pedestrians (a coloured body under a skin-toned head). The thermal frame is
a fixed function of the scene: the backdrop's temperature follows its
daylight luminance, cars are warm and pedestrians hot. At night the visible
frame is dimmed while the thermal frame only cools its backdrop.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DAY, NIGHT, BoundingBox, DatasetManifest, FrameRecord, write_manifest, write_thermal_png, write_visible_png

BODY_TEMP = 0.78
HEAD_TEMP = 0.95
CAR_TEMP = 0.55
SKIN = np.array([0.92, 0.72, 0.58])
NIGHT_GAIN = 0.3
VIDEO_LENGTH = 16


def _luminance(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]


def _fill(img: np.ndarray, x0, y0, x1, y1, value) -> None:
    h, w = img.shape[-2:]
    x0, x1 = max(int(round(x0)), 0), min(int(round(x1)), w)
    y0, y1 = max(int(round(y0)), 0), min(int(round(y1)), h)
    if x1 > x0 and y1 > y0:
        img[..., y0:y1, x0:x1] = np.asarray(value).reshape(-1, 1, 1) if img.ndim == 3 else value


def render_scene(rng: np.random.Generator, height: int, width: int, night: bool):
    """Return ``(visible (3,H,W), thermal (1,H,W), boxes)`` for one random scene."""
    rgb = np.empty((3, height, width))
    heat = np.zeros((height, width))  # >0 marks objects with their own temperature
    horizon = int(rng.uniform(0.3, 0.45) * height)
    sky = rng.uniform(0.55, 0.85, 3) * np.array([0.8, 0.9, 1.0])
    ground = rng.uniform(0.25, 0.5, 3)
    ramp = np.linspace(1.0, 0.8, horizon)[None, :, None]
    rgb[:, :horizon] = sky[:, None, None] * ramp
    rgb[:, horizon:] = ground[:, None, None]
    # road stripes give the ground some structure
    for y in range(horizon + 6, height, 14):
        _fill(rgb, 0, y, width, y + 2, ground * 1.4)

    for _ in range(rng.integers(1, 4)):
        bw = rng.uniform(0.15, 0.35) * width
        bh = rng.uniform(0.15, 0.35) * height
        bx = rng.uniform(-0.1, 1.0) * width
        color = rng.uniform(0.2, 0.7, 3)
        _fill(rgb, bx, horizon - bh, bx + bw, horizon, color)
        for wy in np.arange(horizon - bh + 4, horizon - 4, 8):
            _fill(rgb, bx + 3, wy, bx + bw - 3, wy + 3, color * 0.5)

    for _ in range(rng.integers(0, 2)):
        cw = rng.uniform(0.25, 0.4) * width
        ch = cw * rng.uniform(0.35, 0.5)
        cx = rng.uniform(0, width - cw)
        cy = rng.uniform(horizon + 0.2 * (height - horizon), height - ch)
        _fill(rgb, cx, cy, cx + cw, cy + ch, rng.uniform(0.1, 0.9, 3))
        _fill(heat, cx, cy, cx + cw, cy + ch, CAR_TEMP)

    boxes: list[BoundingBox] = []
    placed: list[tuple[float, float, float, float]] = []
    for _ in range(rng.integers(1, 4)):
        for _attempt in range(10):
            if rng.random() < 0.8:
                h = rng.uniform(min(52.0, 0.5 * height), 0.75 * height)
            else:
                h = rng.uniform(min(22.0, 0.2 * height), min(45.0, 0.45 * height))
            w = 0.4 * h
            x = rng.uniform(-0.15 * w, width - 0.85 * w)
            y = rng.uniform(horizon - 0.6 * h, height - h)
            y = min(max(y, 0.0), height - h)
            if all(x + w < px or px + pw < x for px, _, pw, _ in placed):
                break
        else:
            continue
        placed.append((x, y, w, h))
        head = 0.2 * h
        _fill(rgb, x, y + head, x + w, y + h, rng.uniform(0.0, 1.0, 3) * np.array([1.0, 0.6, 1.0]))
        _fill(rgb, x + 0.2 * w, y, x + 0.8 * w, y + head, SKIN)
        _fill(heat, x, y + head, x + w, y + h, BODY_TEMP)
        _fill(heat, x + 0.2 * w, y, x + 0.8 * w, y + head, HEAD_TEMP)
        occluded = bool(rng.random() < 0.15)
        if occluded:
            # a cold post in front of most of the body
            _fill(rgb, x - 2, y + 0.3 * h, x + w + 2, y + h, np.array([0.35, 0.35, 0.38]))
            _fill(heat, x - 2, y + 0.3 * h, x + w + 2, y + h, 0.0)
        boxes.append(BoundingBox(x, y, w, h, occluded).clamp(width, height))

    backdrop = (0.15 + 0.35 * _luminance(rgb)) if not night else (0.08 + 0.2 * _luminance(rgb))
    thermal = np.where(heat > 0, heat, backdrop)
    visible = rgb * (NIGHT_GAIN if night else 1.0)
    visible = visible + rng.normal(0.0, 0.01, visible.shape)
    thermal = thermal + rng.normal(0.0, 0.01, thermal.shape)
    return np.clip(visible, 0, 1), np.clip(thermal, 0, 1)[None], boxes


def generate_toy_dataset(
    out_dir,
    n_frames: int = 64,
    seed: int = 0,
    height: int = 128,
    width: int = 128,
    name: str = "toy",
) -> DatasetManifest:
    """Render ``n_frames`` frames into ``out_dir`` and write ``out_dir/<name>.tsv``.

    Frames come in videos of 16 consecutive frames alternating day and night.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / name
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(n_frames):
        video, index = divmod(i, VIDEO_LENGTH)
        night = video % 2 == 1
        visible, thermal, boxes = render_scene(rng, height, width, night)
        frame_id = f"{name}_v{video:02d}_f{index:03d}"
        vis_path = img_dir / f"{frame_id}_visible.png"
        th_path = img_dir / f"{frame_id}_thermal.png"
        write_visible_png(vis_path, visible)
        write_thermal_png(th_path, thermal)
        frames.append(
            FrameRecord(frame_id, str(vis_path.resolve()), str(th_path.resolve()), NIGHT if night else DAY, tuple(boxes), frame_index=index)
        )
    manifest = DatasetManifest(name, tuple(frames), height, width)
    write_manifest(manifest, out_dir / f"{name}.tsv")
    return manifest


def render_arrays(n: int, seed: int = 0, height: int = 128, width: int = 128):
    """In-memory variant: ``(visible (N,3,H,W), thermal (N,1,H,W), boxes, times)``."""
    rng = np.random.default_rng(seed)
    vis, th, boxes, times = [], [], [], []
    for i in range(n):
        night = (i // VIDEO_LENGTH) % 2 == 1
        v, t, b = render_scene(rng, height, width, night)
        vis.append(v)
        th.append(t)
        boxes.append(b)
        times.append(NIGHT if night else DAY)
    return np.stack(vis).astype(np.float32), np.stack(th).astype(np.float32), boxes, times
