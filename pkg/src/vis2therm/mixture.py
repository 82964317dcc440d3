"""Synthetic thermal set generation and real/synthetic training mixtures."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import REAL, SYNTHETIC, DatasetManifest, FrameRecord, read_image, write_thermal_png
from .exceptions import ShapeError, ValidationError
from .gan import Generator
from .translator import load_generator

KINDS = ("real", "synthesized", "combined", "mixed")
MIXED_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class MixtureSpec:
    """A training regime.

    ``real_fraction`` only matters for ``mixed``; it is forced to 1.0 for
    ``real`` and 0.0 for ``synthesized``. ``independent`` draws the
    synthetic part independently of the real part instead of using the
    synthetic counterparts of the unselected frames.
    """

    kind: str = "real"
    real_fraction: float = 1.0
    seed: int = 0
    independent: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "real":
            object.__setattr__(self, "real_fraction", 1.0)
        elif self.kind == "synthesized":
            object.__setattr__(self, "real_fraction", 0.0)
        elif self.kind == "combined":
            object.__setattr__(self, "real_fraction", 0.5)
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ValueError(f"real_fraction must lie in [0, 1], got {self.real_fraction}")

    @property
    def name(self) -> str:
        if self.kind == "mixed":
            return f"mixed-{round(self.real_fraction * 100):d}"
        return self.kind


def table_regimes(seed: int = 0) -> list[MixtureSpec]:
    """The twelve ablation regimes: synthesized, mixed 10..90 % real, real, combined."""
    return (
        [MixtureSpec("synthesized", seed=seed)]
        + [MixtureSpec("mixed", f, seed=seed) for f in MIXED_GRID]
        + [MixtureSpec("real", seed=seed), MixtureSpec("combined", seed=seed)]
    )


def parse_regime(name: str, seed: int = 0, independent: bool = False) -> MixtureSpec:
    """Parse ``real``, ``synthesized``, ``combined`` or ``mixed-<percent real>``."""
    name = name.strip().lower()
    if name in ("real", "synthesized", "combined"):
        return MixtureSpec(name, seed=seed)
    m = re.fullmatch(r"mixed-(\d+(?:\.\d+)?)", name)
    if not m:
        raise ValueError(f"unknown regime {name!r}; use real, synthesized, combined or mixed-<percent>")
    pct = float(m.group(1))
    if not 0 <= pct <= 100:
        raise ValueError(f"mixed percentage must lie in [0, 100], got {pct}")
    return MixtureSpec("mixed", pct / 100.0, seed=seed, independent=independent)


def build_mixture(real: DatasetManifest, synthetic: DatasetManifest, spec: MixtureSpec) -> DatasetManifest:
    """Assemble the training manifest for one regime.

    ``mixed`` keeps the size ``N`` of the real set: ``round(f * N)`` frames
    chosen uniformly by seed contribute their real thermal image, every
    other frame contributes its synthetic one.
    """
    n = len(real)
    if len(synthetic) != n:
        raise ValueError(f"real ({n}) and synthetic ({len(synthetic)}) manifests differ in size")
    if any(f.origin != REAL for f in real.frames) or any(f.origin != SYNTHETIC for f in synthetic.frames):
        raise ValueError("expected an all-real and an all-synthetic manifest")
    synth_by_id = {f.frame_id: f for f in synthetic.frames}
    if set(synth_by_id) != set(real.frame_ids):
        missing = sorted(set(real.frame_ids) ^ set(synth_by_id))[:5]
        raise ValueError(f"real and synthetic frame ids do not match (e.g. {missing})")

    if spec.kind == "real":
        return real
    if spec.kind == "synthesized":
        return synthetic
    if spec.kind == "combined":
        return real.replace(name=f"{real.name}-combined", frames=real.frames + synthetic.frames)

    n_real = int(round(spec.real_fraction * n))
    if n_real == n and not spec.independent:
        return real
    if n_real == 0 and not spec.independent:
        return synthetic
    rng = np.random.default_rng(spec.seed)
    chosen = np.zeros(n, dtype=bool)
    chosen[rng.choice(n, n_real, replace=False)] = True
    if spec.independent:
        synth_pick = np.zeros(n, dtype=bool)
        synth_pick[rng.choice(n, n - n_real, replace=False)] = True
        frames = [f for f, c in zip(real.frames, chosen) if c]
        frames += [synth_by_id[f.frame_id] for f, s in zip(real.frames, synth_pick) if s]
    else:
        frames = [f if c else synth_by_id[f.frame_id] for f, c in zip(real.frames, chosen)]
    return real.replace(name=f"{real.name}-{spec.name}", frames=tuple(frames))


def _safe_name(frame_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", frame_id)


def synthesize_dataset(
    generator: Generator | str | Path,
    rgb_source: DatasetManifest,
    output_dir,
    batch_size: int = 4,
) -> DatasetManifest:
    """Render a synthetic thermal image for every source frame.

    Images are written to ``output_dir`` as 16-bit PNGs; boxes and
    day/night tags are copied from the source frames.
    """
    if not isinstance(generator, Generator):
        generator = load_generator(generator)
    generator.eval()
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    factor = generator.config.downsample_factor
    frames = []
    for start in range(0, len(rgb_source), batch_size):
        batch = rgb_source.frames[start : start + batch_size]
        images = []
        for f in batch:
            img = read_image(f.visible_path, 3)
            if img.shape[1] % factor or img.shape[2] % factor:
                raise ShapeError(
                    f"frame {f.frame_id!r}: size {img.shape[1]}x{img.shape[2]} is not divisible by {factor}"
                )
            images.append(img)
        with torch.no_grad():
            fake = generator(torch.from_numpy(np.stack(images))).numpy()
        for f, thermal in zip(batch, fake):
            path = output_dir / f"{_safe_name(f.frame_id)}.png"
            write_thermal_png(path, thermal)
            frames.append(dataclasses.replace(f, thermal_path=str(path.resolve()), origin=SYNTHETIC))
    if len({Path(f.thermal_path).name for f in frames}) != len(frames):
        raise ValidationError("frame ids collide after filename sanitizing")
    return DatasetManifest(f"{rgb_source.name}-synthetic", tuple(frames), rgb_source.image_height, rgb_source.image_width)
