"""Coarse-to-fine frame synthesis generator.

A frame pair ``(x1, x2)`` and a time ratio ``r`` are mapped to the frame at
relative position ``r`` (``0 < r < 1`` interpolates, anything else
extrapolates).  The generator runs one sub-network at the coarsest pyramid
level and a single *shared* sub-network (plus shared pixel-shuffle upsampler)
at every finer level, so the parameter count does not depend on the number of
pyramid levels.

Frames are ``torch`` tensors laid out ``(N, 3, H, W)`` (a bare ``(3, H, W)``
is accepted and returned unbatched), values in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidRatioError, ShapeError

HEAD_MODES = ("direct", "residual")
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    pyramid_levels: int = 4
    blocks_per_subnet: int = 9
    filters: int = 64
    kernel: int = 5
    head_mode: str = "direct"

    def __post_init__(self):
        if self.pyramid_levels < 2:
            raise ValueError(f"pyramid_levels must be >= 2, got {self.pyramid_levels}")
        if self.blocks_per_subnet < 1:
            raise ValueError(f"blocks_per_subnet must be >= 1, got {self.blocks_per_subnet}")
        if self.filters < 1:
            raise ValueError(f"filters must be >= 1, got {self.filters}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd number, got {self.kernel}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# building blocks


def reflect_indices(n: int, pad: int, device=None) -> torch.Tensor:
    """Indices that reflect-extend a length-``n`` axis by ``pad`` on each side.

    Unlike ``F.pad(mode="reflect")`` this works for any ``pad`` (the reflection
    is periodic), which the coarsest levels of deep pyramids need.
    """
    idx = torch.arange(-pad, n + pad, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx.remainder(period)
    return torch.where(idx >= n, period - idx, idx)


def reflect_pad2d(x: torch.Tensor, pad: int) -> torch.Tensor:
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    x = x.index_select(-2, reflect_indices(h, pad, x.device))
    return x.index_select(-1, reflect_indices(w, pad, x.device))


class ReflectConv2d(nn.Conv2d):
    """Stride-1 'same' convolution with reflection padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        super().__init__(in_channels, out_channels, kernel, padding=0)

    def forward(self, x):
        return F.conv2d(reflect_pad2d(x, self.kernel_size[0] // 2), self.weight, self.bias)


def _clamp01(x: torch.Tensor) -> torch.Tensor:
    # forward is a hard clamp; gradient passes straight through so saturated
    # pixels keep receiving a training signal
    return x + (x.clamp(0.0, 1.0) - x).detach()


class ResidualBlock(nn.Module):
    """conv -> LeakyReLU -> conv, added to the input. No normalization."""

    def __init__(self, filters: int, kernel: int):
        super().__init__()
        self.conv1 = ReflectConv2d(filters, filters, kernel)
        self.conv2 = ReflectConv2d(filters, filters, kernel)

    def forward(self, x):
        if x.shape[-3] != self.conv1.in_channels:
            raise ShapeError(f"residual block expects {self.conv1.in_channels} channels, got {x.shape[-3]}")
        return x + self.conv2(F.leaky_relu(self.conv1(x), LEAKY_SLOPE))


class SubNetwork(nn.Module):
    """Input conv, ``D`` residual blocks and a 3-channel head conv."""

    def __init__(self, in_channels: int, cfg: GeneratorConfig):
        super().__init__()
        self.inp = ReflectConv2d(in_channels, cfg.filters, cfg.kernel)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.filters, cfg.kernel)
                                    for _ in range(cfg.blocks_per_subnet))
        self.head = ReflectConv2d(cfg.filters, 3, cfg.kernel)

    def forward(self, x):
        h = F.leaky_relu(self.inp(x), LEAKY_SLOPE)
        for block in self.blocks:
            h = block(h)
        return self.head(h)


class Upsampler(nn.Module):
    """3 -> 12 channel conv followed by a factor-2 pixel shuffle."""

    def __init__(self, kernel: int):
        super().__init__()
        self.conv = ReflectConv2d(3, 12, kernel)

    def forward(self, y):
        if y.shape[-3] != 3:
            raise ShapeError(f"upsampler expects a 3-channel frame, got {y.shape[-3]} channels")
        return F.pixel_shuffle(self.conv(y), 2)


# ---------------------------------------------------------------------------
# functional pieces


def make_ratio_plane(r, h: int, w: int) -> torch.Tensor:
    """Constant ``h x w`` plane filled with ``r``.

    ``r`` may also be a 1-D tensor of per-sample ratios, giving ``(N, 1, h, w)``.
    """
    if h < 1 or w < 1:
        raise ShapeError(f"ratio plane needs positive size, got {h}x{w}")
    if isinstance(r, torch.Tensor) and r.dim() > 0:
        if not torch.isfinite(r).all():
            raise InvalidRatioError(f"non-finite ratio in {r}")
        return r.reshape(-1, 1, 1, 1).expand(-1, 1, h, w)
    r = float(r)
    if not math.isfinite(r):
        raise InvalidRatioError(f"ratio must be finite, got {r}")
    return torch.full((h, w), r)


def _ratio_channel(r, like: torch.Tensor) -> torch.Tensor:
    n, _, h, w = like.shape
    if isinstance(r, torch.Tensor) and r.dim() > 0:
        if r.numel() != n:
            raise ShapeError(f"{r.numel()} ratios for a batch of {n}")
        plane = make_ratio_plane(r.to(like), h, w)
    else:
        plane = make_ratio_plane(r, h, w).to(like).expand(n, 1, h, w)
    return plane


def downsample_pyramid(x: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Coarse-to-fine list of ``levels`` frames built by 2x2 mean pooling.

    The last entry is ``x`` itself.
    """
    if levels < 1:
        raise ValueError(f"need at least one pyramid level, got {levels}")
    factor = 2 ** (levels - 1)
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(
            f"frame size {h}x{w} is not a multiple of {factor} (2^(S-1) for S={levels}); "
            "mirror_pad the input first")
    pyramid = [x]
    for _ in range(levels - 1):
        pyramid.append(F.avg_pool2d(pyramid[-1], 2))
    return pyramid[::-1]


def _same_size(*frames):
    sizes = {tuple(f.shape) for f in frames}
    if len(sizes) != 1:
        raise ShapeError(f"input frames differ in shape: {sorted(sizes)}")


def coarsest_forward(x1, x2, r, subnet: SubNetwork) -> torch.Tensor:
    _same_size(x1, x2)
    inp = torch.cat([x1, x2, _ratio_channel(r, x1)], dim=1)
    return _clamp01(subnet(inp))


def subnet_forward(x1, x2, y_prev_up, r, subnet: SubNetwork, head_mode: str = "direct") -> torch.Tensor:
    _same_size(x1, x2, y_prev_up)
    inp = torch.cat([x1, x2, y_prev_up, _ratio_channel(r, x1)], dim=1)
    out = subnet(inp)
    if head_mode == "residual":
        out = y_prev_up + out
    return _clamp01(out)


def upsample2x(y: torch.Tensor, upsampler: Upsampler) -> torch.Tensor:
    return upsampler(y)


# ---------------------------------------------------------------------------
# the generator


class Generator(nn.Module):
    """Pyramid generator: one coarsest sub-network + one shared refinement stage.

    ``forward(x1, x2, r, levels=None)`` returns the full-resolution prediction;
    ``levels`` overrides the configured pyramid depth at inference time.
    """

    def __init__(self, cfg: GeneratorConfig | None = None, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        self.seed = seed
        self.coarsest = SubNetwork(2 * 3 + 1, self.cfg)
        self.shared = SubNetwork(3 * 3 + 1, self.cfg)
        self.upsampler = Upsampler(self.cfg.kernel)
        if seed is not None:
            xavier_init(self, seed)

    def forward(self, x1, x2, r, levels: int | None = None, return_levels: bool = False):
        levels = levels or self.cfg.pyramid_levels
        if levels < 2:
            raise ValueError(f"synthesis needs at least 2 pyramid levels, got {levels}")
        unbatched = x1.dim() == 3
        if unbatched:
            x1, x2 = x1.unsqueeze(0), x2.unsqueeze(0)
        _same_size(x1, x2)
        if x1.shape[1] != 3:
            raise ShapeError(f"frames must have 3 channels, got {x1.shape[1]}")
        p1 = downsample_pyramid(x1, levels)
        p2 = downsample_pyramid(x2, levels)
        y = coarsest_forward(p1[0], p2[0], r, self.coarsest)
        outputs = [y]
        for s in range(1, levels):
            y = subnet_forward(p1[s], p2[s], upsample2x(y, self.upsampler), r,
                               self.shared, self.cfg.head_mode)
            outputs.append(y)
        if unbatched:
            outputs = [o.squeeze(0) for o in outputs]
        return outputs if return_levels else outputs[-1]


def synthesize(x1, x2, r, model: Generator, levels: int | None = None) -> torch.Tensor:
    return model(x1, x2, r, levels=levels)


def xavier_init(module: nn.Module, seed: int) -> None:
    """Xavier-uniform conv weights, zero biases, drawn from a private RNG."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.xavier_uniform_(m.weight, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def zero_params(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


# ---------------------------------------------------------------------------
# parameter counting


def conv_params(cin: int, cout: int, kernel: int) -> int:
    return kernel * kernel * cin * cout + cout


def residual_block_params(filters: int, kernel: int) -> int:
    return 2 * conv_params(filters, filters, kernel)


def subnet_params(in_channels: int, cfg: GeneratorConfig) -> int:
    return (conv_params(in_channels, cfg.filters, cfg.kernel)
            + cfg.blocks_per_subnet * residual_block_params(cfg.filters, cfg.kernel)
            + conv_params(cfg.filters, 3, cfg.kernel))


def parameter_breakdown(cfg: GeneratorConfig, disc_cfg=None) -> dict[str, int]:
    """Closed-form parameter counts per component (pyramid depth never enters)."""
    out = {
        "coarsest_subnet": subnet_params(7, cfg),
        "shared_subnet": subnet_params(10, cfg),
        "shared_upsampler": conv_params(3, 12, cfg.kernel),
    }
    if disc_cfg is not None:
        from .losses import discriminator_param_count
        out["discriminator"] = discriminator_param_count(disc_cfg)
    return out


def count_parameters(cfg: GeneratorConfig, include_discriminator: bool = False, disc_cfg=None) -> int:
    if include_discriminator and disc_cfg is None:
        from .losses import DiscriminatorConfig
        disc_cfg = DiscriminatorConfig()
    return sum(parameter_breakdown(cfg, disc_cfg if include_discriminator else None).values())


def enumerate_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def level_sizes(h: int, w: int, levels: int) -> Sequence[tuple[int, int]]:
    return [(h >> (levels - 1 - s), w >> (levels - 1 - s)) for s in range(levels)]
