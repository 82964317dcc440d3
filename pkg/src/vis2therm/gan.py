"""Visible-to-thermal LSGAN networks and losses.

The generator is an RRDB network (dense blocks inside residual-in-residual
blocks, no normalization layers) wrapped between strided down-sampling
convolutions and upscale-conv-ReLU blocks. The discriminator is a plain
multi-scale CNN returning raw (un-squashed) score maps, one per scale.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import NumericError, ShapeError

REAL_LABEL = 1.0
FAKE_LABEL = 0.0
LRELU_SLOPE = 0.2


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 64
    num_rrdb: int = 5
    dense_blocks_per_rrdb: int = 4
    convs_per_dense_block: int = 5
    growth_rate: int = 32
    residual_scale: float = 0.2
    downsample_factor: int = 4
    in_channels: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if not 0.0 <= self.residual_scale <= 1.0:
            raise ValueError(f"residual_scale must lie in [0, 1], got {self.residual_scale}")
        if not _is_power_of_two(self.downsample_factor):
            raise ValueError(f"downsample_factor must be a power of 2, got {self.downsample_factor}")
        if self.convs_per_dense_block < 1:
            raise ValueError("convs_per_dense_block must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    num_layers: int = 5
    kernel_size: int = 4
    stride: int = 2
    base_features: int = 64
    num_scales: int = 3
    in_channels: int = 1

    def features_at(self, depth: int) -> int:
        """Feature maps produced by layer ``depth`` (1-based)."""
        return self.base_features * 2 ** (depth - 1)

    @property
    def min_input_size(self) -> int:
        return 2 ** (self.num_scales - 1) * self.stride**self.num_layers

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class DenseBlock(nn.Module):
    """Densely connected conv stack ending in a fusion conv back to ``channels``.

    Layer ``i`` (1-based) sees the block input plus the ``i - 1`` previous
    layer outputs, i.e. ``channels + (i - 1) * growth_rate`` input channels.
    """

    def __init__(self, channels: int, growth_rate: int = 32, num_convs: int = 5):
        super().__init__()
        self.channels = channels
        self.growth_rate = growth_rate
        self.layers = nn.ModuleList(
            nn.Conv2d(channels + i * growth_rate, growth_rate, 3, 1, 1) for i in range(num_convs - 1)
        )
        self.fusion = nn.Conv2d(channels + (num_convs - 1) * growth_rate, channels, 3, 1, 1)

    @property
    def layer_input_channels(self) -> list[int]:
        return [layer.in_channels for layer in self.layers] + [self.fusion.in_channels]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"dense block expects {self.channels} channels, got {x.shape[1]}")
        features = [x]
        for layer in self.layers:
            features.append(F.leaky_relu(layer(torch.cat(features, 1)), LRELU_SLOPE))
        return self.fusion(torch.cat(features, 1))


class RRDB(nn.Module):
    """Residual-in-residual dense block.

    Each dense block's output is scaled by ``beta`` and added to its own
    input; the chain's result is scaled by ``beta`` again and added to the
    block input, so ``beta = 0`` is exactly the identity.
    """

    def __init__(self, channels: int, growth_rate: int = 32, num_dense: int = 4, num_convs: int = 5, beta: float = 0.2):
        super().__init__()
        self.beta = beta
        self.blocks = nn.ModuleList(DenseBlock(channels, growth_rate, num_convs) for _ in range(num_dense))

    def forward(self, x: Tensor) -> Tensor:
        out = x
        for block in self.blocks:
            out = out + self.beta * block(out)
        return x + self.beta * out


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        c = config.base_channels
        n_scale = int(math.log2(config.downsample_factor))
        self.conv_first = nn.Conv2d(config.in_channels, c, 3, 1, 1)
        self.down = nn.ModuleList(nn.Conv2d(c, c, 3, 2, 1) for _ in range(n_scale))
        self.trunk = nn.Sequential(
            *(
                RRDB(c, config.growth_rate, config.dense_blocks_per_rrdb, config.convs_per_dense_block, config.residual_scale)
                for _ in range(config.num_rrdb)
            )
        )
        self.trunk_conv = nn.Conv2d(c, c, 3, 1, 1)
        # upscale-conv-ReLU
        self.up = nn.ModuleList(nn.Conv2d(c, c, 3, 1, 1) for _ in range(n_scale))
        self.conv_hr = nn.Conv2d(c, c, 3, 1, 1)
        self.conv_last = nn.Conv2d(c, config.out_channels, 3, 1, 1)

    def check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"generator expects (N, {cfg.in_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % cfg.downsample_factor or w % cfg.downsample_factor:
            raise ShapeError(f"input size {h}x{w} must be divisible by {cfg.downsample_factor}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        feat = F.leaky_relu(self.conv_first(x), LRELU_SLOPE)
        for conv in self.down:
            feat = F.leaky_relu(conv(feat), LRELU_SLOPE)
        feat = feat + self.trunk_conv(self.trunk(feat))
        for conv in self.up:
            feat = F.relu(conv(F.interpolate(feat, scale_factor=2, mode="nearest")))
        feat = F.leaky_relu(self.conv_hr(feat), LRELU_SLOPE)
        return torch.sigmoid(self.conv_last(feat))


class _ScaleDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        pad = (config.kernel_size - config.stride) // 2
        layers = []
        in_ch = config.in_channels
        for depth in range(1, config.num_layers + 1):
            out_ch = config.features_at(depth)
            layers += [nn.Conv2d(in_ch, out_ch, config.kernel_size, config.stride, pad), nn.LeakyReLU(LRELU_SLOPE)]
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.score = nn.Conv2d(in_ch, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.score(self.features(x))


class MultiScaleDiscriminator(nn.Module):
    """One patch discriminator per scale; scale ``s`` sees the input average-pooled by ``2**s``."""

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        self.scales = nn.ModuleList(_ScaleDiscriminator(config) for _ in range(config.num_scales))

    def forward(self, x: Tensor) -> list[Tensor]:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"discriminator expects (N, {cfg.in_channels}, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < cfg.min_input_size:
            raise ShapeError(
                f"input {x.shape[-2]}x{x.shape[-1]} too small: {cfg.num_scales} scale(s) of "
                f"{cfg.num_layers} stride-{cfg.stride} layers need at least {cfg.min_input_size} px per side"
            )
        outputs = []
        for i, net in enumerate(self.scales):
            if i:
                x = F.avg_pool2d(x, 2)
            outputs.append(net(x))
        return outputs


# -- losses ------------------------------------------------------------------------


@dataclass
class GanLossTerms:
    adversarial: Tensor
    mae: Tensor
    perceptual: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("adversarial", "mae", "perceptual", "total")}


def _check_structure(a: Sequence[Tensor], b: Sequence[Tensor]) -> None:
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise ShapeError(
            f"score map structures differ: {[tuple(x.shape) for x in a]} vs {[tuple(y.shape) for y in b]}"
        )


def _half_mse(scores: Sequence[Tensor], label: float) -> Tensor:
    per_scale = [0.5 * torch.mean((s - label) ** 2) for s in scores]
    return torch.stack(per_scale).mean()


def discriminator_loss(
    real_scores: Sequence[Tensor],
    fake_scores: Sequence[Tensor],
    real_label: float = REAL_LABEL,
    fake_label: float = FAKE_LABEL,
) -> Tensor:
    """Least-squares discriminator objective averaged over scales."""
    _check_structure(real_scores, fake_scores)
    if not real_scores:
        raise ShapeError("no score maps given")
    return _half_mse(real_scores, real_label) + _half_mse(fake_scores, fake_label)


def adversarial_loss(fake_scores: Sequence[Tensor], target_label: float = REAL_LABEL) -> Tensor:
    if not fake_scores:
        raise ShapeError("no score maps given")
    return _half_mse(fake_scores, target_label)


def mae_loss(real: Tensor, fake: Tensor) -> Tensor:
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} shapes differ")
    return torch.mean(torch.abs(real - fake))


def generator_loss(
    fake_scores: Sequence[Tensor],
    real_thermal: Tensor,
    fake_thermal: Tensor,
    phi: Callable[[Tensor, Tensor], Tensor] | None = None,
    target_label: float = REAL_LABEL,
) -> GanLossTerms:
    """Adversarial + MAE + perceptual generator objective (unweighted sum).

    ``phi`` is a callable ``(real, fake) -> scalar`` distance in a frozen
    feature space, typically :meth:`FeatureExtractor.distance`; ``None``
    disables the perceptual term.
    """
    adv = adversarial_loss(fake_scores, target_label)
    mae = mae_loss(real_thermal, fake_thermal)
    if phi is None:
        perc = torch.zeros((), dtype=mae.dtype, device=mae.device)
    else:
        perc = phi(real_thermal, fake_thermal)
        if not torch.isfinite(perc):
            raise NumericError("perceptual term is non-finite")
    total = adv + mae + perc
    return GanLossTerms(adv, mae, perc, total)


_NORM_TYPES = (nn.modules.batchnorm._NormBase, nn.GroupNorm, nn.LayerNorm, nn.LocalResponseNorm)


def normalization_layers(module: nn.Module) -> list[str]:
    """Names of normalization submodules or running-statistics buffers."""
    found = [name for name, m in module.named_modules() if isinstance(m, _NORM_TYPES)]
    found += [name for name, _ in module.named_buffers() if "running_" in name]
    return found
