"""Encoder-decoder units, the cascaded reconstruction network and SegNetMRI.

Images travel through the networks as (B, C, H, W) real tensors; complex
images use two channels (real, imag).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ParameterError, ShapeError
from .kspace import KSpaceMeasurement, data_fidelity, from_channels, to_channels, zero_filled
from .phantom import NUM_CLASSES

# torch momentum is (1 - TF-style decay); decay 0.99
BN_MOMENTUM = 0.01


@dataclass(frozen=True)
class EncoderDecoderConfig:
    depth: int = 3
    base_channels: int = 32
    channel_growth: int = 2
    in_channels: int = 2
    out_channels: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.channel_growth < 1:
            raise ConfigurationError("channel counts must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_growth**level

    def trunk(self) -> tuple[int, int, int]:
        """The part of the config that must match for encoders to be shared."""
        return (self.depth, self.base_channels, self.channel_growth)

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock(nn.Sequential):
    """Two 3x3 convolutions, each followed by batch norm and ReLU."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    """Returns one feature map per level; level l has spatial size (H/2^l, W/2^l)."""

    def __init__(self, config: EncoderDecoderConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.levels = nn.ModuleList(
            [ConvBlock(config.in_channels, c(0))]
            + [ConvBlock(c(l - 1), c(l)) for l in range(1, config.depth + 1)]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        factor = 2**self.config.depth
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}")
        if x.shape[-3] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[-3]}")
        pyramid = []
        for i, block in enumerate(self.levels):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            pyramid.append(x)
        return pyramid


class Decoder(nn.Module):
    """Transposed-conv upsampling with concatenated same-scale encoder features."""

    def __init__(self, config: EncoderDecoderConfig, out_channels: int | None = None):
        super().__init__()
        self.config = config
        self.out_channels = config.out_channels if out_channels is None else out_channels
        c = config.channels
        depth = config.depth
        self.up = nn.ModuleList(
            [nn.ConvTranspose2d(c(l + 1), c(l), 2, stride=2) for l in reversed(range(depth))]
        )
        self.blocks = nn.ModuleList([ConvBlock(2 * c(l), c(l)) for l in reversed(range(depth))])
        self.head = nn.Conv2d(c(0), self.out_channels, 1)

    def forward(self, pyramid: list[torch.Tensor], skip_mask: list[bool] | None = None) -> torch.Tensor:
        depth = self.config.depth
        if len(pyramid) != depth + 1:
            raise ShapeError(f"decoder expects {depth + 1} pyramid levels, got {len(pyramid)}")
        for l, feat in enumerate(pyramid):
            if feat.shape[-3] != self.config.channels(l):
                raise ShapeError(
                    f"level {l} has {feat.shape[-3]} channels, decoder expects {self.config.channels(l)}"
                )
        x = pyramid[-1]
        for i, (up, block) in enumerate(zip(self.up, self.blocks)):
            level = depth - 1 - i
            x = up(x)
            skip = pyramid[level]
            if skip_mask is not None and not skip_mask[level]:
                skip = torch.zeros_like(skip)
            x = block(torch.cat([x, skip], dim=-3))
        return self.head(x)


class MRNBlock(nn.Module):
    """Encoder-decoder with a global residual shortcut followed by hard data fidelity."""

    def __init__(self, config: EncoderDecoderConfig):
        super().__init__()
        self.encoder = Encoder(config)
        self.decoder = Decoder(config, out_channels=2)

    def forward(self, x: torch.Tensor, y: KSpaceMeasurement) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """``x`` is complex (B, H, W); returns the corrected image and the encoder pyramid."""
        pyramid = self.encoder(to_channels(x))
        x_res = x + from_channels(self.decoder(pyramid))
        return data_fidelity(x_res, y), pyramid


class MRN(nn.Module):
    """Cascade of ``n_blocks`` MRN blocks fed by the zero-filled image."""

    def __init__(self, config: EncoderDecoderConfig, n_blocks: int):
        super().__init__()
        if n_blocks < 1:
            raise ParameterError(f"need at least one block, got {n_blocks}")
        if config.in_channels != 2 or config.out_channels != 2:
            config = EncoderDecoderConfig(config.depth, config.base_channels, config.channel_growth, 2, 2)
        self.config = config
        self.n_blocks = n_blocks
        self.blocks = nn.ModuleList([MRNBlock(config) for _ in range(n_blocks)])

    def forward(self, y: KSpaceMeasurement):
        """Returns (final reconstruction, per-block reconstructions, per-block pyramids)."""
        x = zero_filled(y)
        recons, pyramids = [], []
        for block in self.blocks:
            x, pyramid = block(x, y)
            recons.append(x)
            pyramids.append(pyramid)
        return x, recons, pyramids

    def zero_residual_heads(self) -> None:
        """Start every block as the identity plus data fidelity."""
        with torch.no_grad():
            for block in self.blocks:
                block.decoder.head.weight.zero_()
                block.decoder.head.bias.zero_()


class MSN(nn.Module):
    """U-Net style segmentation network on single-channel magnitude images."""

    def __init__(self, config: EncoderDecoderConfig, n_classes: int = NUM_CLASSES):
        super().__init__()
        config = EncoderDecoderConfig(config.depth, config.base_channels, config.channel_growth, 1, n_classes)
        self.config = config
        self.n_classes = n_classes
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(-3)
        return self.decoder(self.encoder(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Magnitude images (B, H, W) or (B, 1, H, W) -> class probabilities (B, C, H, W)."""
        return torch.softmax(self.logits(x), dim=-3)


@dataclass
class SegNetMRIOutputs:
    reconstruction: torch.Tensor
    per_block_reconstructions: list[torch.Tensor]
    per_block_segmentations: list[torch.Tensor]
    merged_segmentation: torch.Tensor


class SegNetMRI(nn.Module):
    """MRN whose block encoders also feed one shared segmentation decoder.

    The N decoder outputs are concatenated and merged by a 1x1 convolution,
    initialized to a plain average of the N probability maps.
    """

    def __init__(self, config: EncoderDecoderConfig, n_blocks: int, n_classes: int = NUM_CLASSES):
        super().__init__()
        self.mrn = MRN(config, n_blocks)
        self.config = self.mrn.config
        self.n_blocks = n_blocks
        self.n_classes = n_classes
        seg_config = EncoderDecoderConfig(config.depth, config.base_channels, config.channel_growth, 2, n_classes)
        self.seg_decoder = Decoder(seg_config)
        self.merge = nn.Conv2d(n_blocks * n_classes, n_classes, 1)
        self.reset_merge()

    def reset_merge(self) -> None:
        with torch.no_grad():
            self.merge.weight.zero_()
            self.merge.bias.zero_()
            for n in range(self.n_blocks):
                for c in range(self.n_classes):
                    self.merge.weight[c, n * self.n_classes + c] = 1.0 / self.n_blocks

    @classmethod
    def from_pretrained(cls, mrn: MRN, msn: MSN) -> SegNetMRI:
        """Block encoders/decoders from ``mrn``, segmentation decoder from ``msn``.

        The MSN encoder is dropped and the merge layer starts as an average.
        """
        if mrn.config.trunk() != msn.config.trunk():
            raise ConfigurationError(
                f"MRN trunk {mrn.config.trunk()} and MSN trunk {msn.config.trunk()} differ"
            )
        model = cls(mrn.config, mrn.n_blocks, msn.n_classes)
        model.mrn.load_state_dict(mrn.state_dict())
        model.seg_decoder.load_state_dict(msn.decoder.state_dict())
        return model

    def forward(self, y: KSpaceMeasurement) -> SegNetMRIOutputs:
        final, recons, pyramids = self.mrn(y)
        probs = [torch.softmax(self.seg_decoder(p), dim=-3) for p in pyramids]
        merged = torch.softmax(self.merge(torch.cat(probs, dim=-3)), dim=-3)
        return SegNetMRIOutputs(final, recons, probs, merged)


def xavier_init(module: nn.Module) -> None:
    """Xavier-uniform conv weights, zero biases; batch norm left at identity."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
