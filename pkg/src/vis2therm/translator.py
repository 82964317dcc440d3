"""LSGAN training for the visible-to-thermal generator.

``train_gan`` drives training from manifests; :class:`ThermalTranslator`
wraps the same loop behind a scikit-learn style ``fit``/``transform``
interface for in-memory arrays.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, FrameImages, REAL
from .exceptions import NumericError, ValidationError
from .gan import (
    FAKE_LABEL,
    REAL_LABEL,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    MultiScaleDiscriminator,
    discriminator_loss,
    generator_loss,
    mae_loss,
)
from .perceptual import FeatureExtractor
from .validation import check_images, check_paired

log = logging.getLogger(__name__)

LOSS_KEYS = ("adversarial", "mae", "perceptual", "total", "discriminator")


@dataclass(frozen=True)
class GanHyperParams:
    epochs: int = 10
    max_steps: int | None = None
    batch_size: int = 4
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints
    checkpoint_dir: str | None = None
    real_label: float = REAL_LABEL
    fake_label: float = FAKE_LABEL

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanHyperParams":
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class GanTrainState:
    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig
    hyper: GanHyperParams
    generator: Generator
    discriminator: MultiScaleDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    loss_history: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)

    @property
    def real_label(self) -> float:
        return self.hyper.real_label

    @property
    def fake_label(self) -> float:
        return self.hyper.fake_label


def init_state(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, hyper: GanHyperParams) -> GanTrainState:
    torch.manual_seed(hyper.seed)
    gen = Generator(gen_cfg)
    disc = MultiScaleDiscriminator(disc_cfg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=hyper.lr_generator, betas=hyper.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=hyper.lr_discriminator, betas=hyper.betas)
    return GanTrainState(gen_cfg, disc_cfg, hyper, gen, disc, opt_g, opt_d)


def _check_finite(values: dict[str, float], step: int) -> None:
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NumericError(f"step {step}: non-finite loss term(s) {', '.join(bad)}: {values}")


def train_step(
    state: GanTrainState, visible: torch.Tensor, thermal: torch.Tensor, phi: Callable | None = None
) -> dict[str, float]:
    """One discriminator update followed by one generator update."""
    gen, disc = state.generator, state.discriminator
    gen.train()
    disc.train()
    fake = gen(visible)

    state.opt_d.zero_grad(set_to_none=True)
    d_loss = discriminator_loss(disc(thermal), disc(fake.detach()), state.real_label, state.fake_label)
    if not torch.isfinite(d_loss):
        raise NumericError(f"step {state.step}: non-finite discriminator loss")
    d_loss.backward()
    state.opt_d.step()

    state.opt_g.zero_grad(set_to_none=True)
    disc.requires_grad_(False)
    try:
        terms = generator_loss(disc(fake), thermal, fake, phi, target_label=state.real_label)
    finally:
        disc.requires_grad_(True)
    record = terms.as_floats()
    record["discriminator"] = float(d_loss.detach())
    _check_finite(record, state.step)
    terms.total.backward()
    state.opt_g.step()

    state.step += 1
    record = {"step": state.step, **record}
    state.loss_history.append(record)
    return record


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the batch consumed at global ``step``; order depends only on (seed, epoch)."""
    per_epoch = math.ceil(n / batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[pos * batch_size : (pos + 1) * batch_size]


def _stack(images: Sequence, idx) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(images[int(i)], dtype=np.float32) for i in idx]))


def validation_mae(generator: Generator, visible: Sequence, thermal: Sequence, batch_size: int = 4) -> float:
    generator.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(visible), batch_size):
            idx = range(start, min(start + batch_size, len(visible)))
            fake = generator(_stack(visible, idx))
            total += float(mae_loss(_stack(thermal, idx), fake)) * len(idx)
            count += len(idx)
    return total / max(count, 1)


def fit_pairs(
    state: GanTrainState,
    visible: Sequence,
    thermal: Sequence,
    phi: Callable | None = None,
    val: tuple[Sequence, Sequence] | None = None,
    meta: dict | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> GanTrainState:
    """Run (or resume) training on paired image sequences until the step budget is spent."""
    n = len(visible)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(thermal) != n:
        raise ValueError(f"visible ({n}) and thermal ({len(thermal)}) counts differ")
    if isinstance(phi, FeatureExtractor):
        phi = phi.distance
    hyper = state.hyper
    per_epoch = math.ceil(n / hyper.batch_size)
    budget = hyper.epochs * per_epoch
    if hyper.max_steps is not None:
        budget = min(budget, hyper.max_steps)
    while state.step < budget:
        idx = batch_indices(n, hyper.batch_size, hyper.seed, state.step)
        record = train_step(state, _stack(visible, idx), _stack(thermal, idx), phi)
        if on_step is not None:
            on_step(record)
        if state.step % per_epoch == 0:
            state.epoch = state.step // per_epoch
            if val is not None and len(val[0]):
                mae = validation_mae(state.generator, *val, batch_size=hyper.batch_size)
                state.val_history.append({"epoch": state.epoch, "mae": mae})
                log.info("epoch %d: val mae %.4f", state.epoch, mae)
            if hyper.checkpoint_every and hyper.checkpoint_dir and state.epoch % hyper.checkpoint_every == 0:
                save_gan_checkpoint(state, Path(hyper.checkpoint_dir) / f"gan_epoch{state.epoch:03d}.ckpt", meta)
    state.generator.eval()
    return state


def train_gan(
    train: DatasetManifest,
    val: DatasetManifest | None,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    hyper: GanHyperParams,
    phi: FeatureExtractor | None,
    state: GanTrainState | None = None,
    meta: dict | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> GanTrainState:
    """Train the translator on the aligned real pairs of ``train``.

    Pass a previously saved ``state`` to resume; the data order and all
    updates then continue exactly as an uninterrupted run would.
    """
    if len(train) == 0:
        raise ValueError("train manifest is empty")
    if any(f.origin != REAL for f in train.frames):
        raise ValidationError("GAN training requires real visible/thermal pairs only")
    if state is None:
        state = init_state(gen_cfg, disc_cfg, hyper)
    val_pairs = (FrameImages(val, "visible"), FrameImages(val, "thermal")) if val is not None and len(val) else None
    return fit_pairs(
        state, FrameImages(train, "visible"), FrameImages(train, "thermal"), phi, val_pairs, meta, on_step
    )


# -- persistence ---------------------------------------------------------------------


def save_gan_checkpoint(state: GanTrainState, path, meta: dict | None = None) -> Path:
    return save_checkpoint(
        path,
        kind="gan",
        config={"generator": state.gen_cfg.to_dict(), "discriminator": state.disc_cfg.to_dict(), "hyper": state.hyper.to_dict()},
        params={"generator": state.generator.state_dict(), "discriminator": state.discriminator.state_dict()},
        optimizer={"generator": state.opt_g.state_dict(), "discriminator": state.opt_d.state_dict()},
        epoch=state.epoch,
        step=state.step,
        history=state.loss_history,
        meta={**(meta or {}), "val_history": state.val_history},
    )


def load_gan_state(path, hyper: GanHyperParams | None = None) -> GanTrainState:
    """Restore a full training state; ``hyper`` overrides the stored hyperparameters (e.g. a longer budget)."""
    payload = load_checkpoint(path, kind="gan")
    cfg = payload["config"]
    state = init_state(
        GeneratorConfig(**cfg["generator"]),
        DiscriminatorConfig(**cfg["discriminator"]),
        hyper or GanHyperParams.from_dict(cfg["hyper"]),
    )
    state.generator.load_state_dict(payload["params"]["generator"])
    state.discriminator.load_state_dict(payload["params"]["discriminator"])
    state.opt_g.load_state_dict(payload["optimizer"]["generator"])
    state.opt_d.load_state_dict(payload["optimizer"]["discriminator"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.loss_history = list(payload["history"])
    state.val_history = list(payload["meta"].get("val_history", []))
    state.generator.eval()
    return state


def load_generator(path) -> Generator:
    payload = load_checkpoint(path, kind="gan")
    gen = Generator(GeneratorConfig(**payload["config"]["generator"]))
    gen.load_state_dict(payload["params"]["generator"])
    return gen.eval()


def translate(generator: Generator, visible: np.ndarray, batch_size: int = 4) -> np.ndarray:
    generator.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(visible), batch_size):
            out.append(generator(torch.from_numpy(np.asarray(visible[start : start + batch_size]))).numpy())
    return np.concatenate(out) if out else np.empty((0, generator.config.out_channels) + tuple(np.shape(visible)[2:]), np.float32)


# -- estimator ---------------------------------------------------------------------------


class ThermalTranslator(TransformerMixin, BaseEstimator):
    """Visible-to-thermal LSGAN translator with a scikit-learn interface.

    ``fit(X, y)`` trains on visible images ``X`` of shape ``(N, 3, H, W)``
    paired with thermal images ``y`` of shape ``(N, 1, H, W)``, all in
    [0, 1]. ``transform(X)`` returns synthesized thermal images.

    ``feature_extractor`` is the frozen perceptual network; ``None``
    drops the perceptual term.
    """

    def __init__(
        self,
        base_channels=64,
        num_rrdb=5,
        dense_blocks_per_rrdb=4,
        convs_per_dense_block=5,
        growth_rate=32,
        residual_scale=0.2,
        downsample_factor=4,
        disc_layers=5,
        disc_kernel_size=4,
        disc_stride=2,
        disc_base_features=64,
        disc_scales=3,
        epochs=10,
        max_steps=None,
        batch_size=4,
        lr_generator=1e-4,
        lr_discriminator=1e-4,
        seed=0,
        feature_extractor=None,
    ):
        self.base_channels = base_channels
        self.num_rrdb = num_rrdb
        self.dense_blocks_per_rrdb = dense_blocks_per_rrdb
        self.convs_per_dense_block = convs_per_dense_block
        self.growth_rate = growth_rate
        self.residual_scale = residual_scale
        self.downsample_factor = downsample_factor
        self.disc_layers = disc_layers
        self.disc_kernel_size = disc_kernel_size
        self.disc_stride = disc_stride
        self.disc_base_features = disc_base_features
        self.disc_scales = disc_scales
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr_generator = lr_generator
        self.lr_discriminator = lr_discriminator
        self.seed = seed
        self.feature_extractor = feature_extractor

    def _configs(self):
        gen_cfg = GeneratorConfig(
            self.base_channels, self.num_rrdb, self.dense_blocks_per_rrdb, self.convs_per_dense_block,
            self.growth_rate, self.residual_scale, self.downsample_factor,
        )
        disc_cfg = DiscriminatorConfig(
            self.disc_layers, self.disc_kernel_size, self.disc_stride, self.disc_base_features, self.disc_scales
        )
        hyper = GanHyperParams(
            epochs=self.epochs, max_steps=self.max_steps, batch_size=self.batch_size,
            lr_generator=self.lr_generator, lr_discriminator=self.lr_discriminator, seed=self.seed,
        )
        return gen_cfg, disc_cfg, hyper

    def fit(self, X, y):
        X = check_images(X, channels=3)
        y = check_images(y, channels=1, name="y")
        check_paired(X, y)
        state = init_state(*self._configs())
        state.generator.check_input(torch.from_numpy(X[:1]))
        self.state_ = fit_pairs(state, X, y, self.feature_extractor)
        self.generator_ = self.state_.generator
        self.loss_history_ = self.state_.loss_history
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "generator_")
        X = check_images(X, channels=3)
        return translate(self.generator_, X, self.batch_size)

    def save(self, path, meta: dict | None = None) -> Path:
        check_is_fitted(self, "state_")
        return save_gan_checkpoint(self.state_, path, meta)
