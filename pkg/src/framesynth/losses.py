"""Training objectives: pixel, feature, adversarial, transitive and temporal-TV terms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import archive
from .data import compute_ratio
from .errors import InvalidTripletError, ShapeError
from .model import LEAKY_SLOPE, xavier_init

TRANSITIVE_VARIANTS = ("predicted", "observed")


@dataclass(frozen=True)
class LossWeights:
    lambda_feat: float = 2e-5
    lambda_gan: float = 5e-2
    lambda_tran: float = 0.2

    def __post_init__(self):
        for name in ("lambda_feat", "lambda_gan", "lambda_tran"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean |a-b| per batch item (``(N,)``), or a 0-d tensor for unbatched frames."""
    _check_same(a, b)
    d = (a - b).abs()
    if d.dim() == 4:
        return d.flatten(1).mean(1)
    return d.mean()


def pixel_loss(y: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(y, target)
    return (y - target).abs().mean()


# ---------------------------------------------------------------------------
# feature network

VGG16_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """How to build the frozen feature network.

    ``fixed_random`` builds a VGG16-shaped stack, narrowed by ``width_divisor``,
    with seeded Xavier weights.  ``pretrained_file`` loads full-width weights
    from an MSFS1 archive whose tensors are named ``conv1_1.weight`` etc.
    """
    mode: str = "fixed_random"
    layer_tap: str = "relu2_2"
    seed: int = 0
    path: str | None = None
    width_divisor: int = 8


def _vgg_layer_names():
    names = []
    block, idx = 1, 1
    for item in VGG16_LAYOUT:
        if item == "M":
            names.append((f"pool{block}", None))
            block, idx = block + 1, 1
        else:
            names.append((f"conv{block}_{idx}", item))
            names.append((f"relu{block}_{idx}", None))
            idx += 1
    return names


class FeatureExtractor(nn.Module):
    def __init__(self, layer_tap: str = "relu2_2", width_divisor: int = 1):
        super().__init__()
        names = [n for n, _ in _vgg_layer_names()]
        if layer_tap not in names:
            raise ValueError(f"unknown layer_tap {layer_tap!r}; choose from {names}")
        self.layer_tap = layer_tap
        self.layers = nn.ModuleDict()
        cin = 3
        for name, width in _vgg_layer_names():
            if name.startswith("conv"):
                cout = max(1, width // width_divisor)
                self.layers[name] = nn.Conv2d(cin, cout, 3, padding=1)
                cin = cout
            elif name.startswith("relu"):
                self.layers[name] = nn.ReLU()
            else:
                self.layers[name] = nn.MaxPool2d(2)
            if name == layer_tap:
                break
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        unbatched = x.dim() == 3
        if unbatched:
            x = x.unsqueeze(0)
        h = (x - self.mean.to(x)) / self.std.to(x)
        for layer in self.layers.values():
            h = layer(h)
        return h.squeeze(0) if unbatched else h

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def build_feature_extractor(spec: FeatureExtractorSpec) -> FeatureExtractor:
    if spec.mode == "fixed_random":
        net = FeatureExtractor(spec.layer_tap, spec.width_divisor)
        xavier_init(net, spec.seed)
        return net.freeze()
    if spec.mode == "pretrained_file":
        if not spec.path or not Path(spec.path).is_file():
            raise FileNotFoundError(f"pretrained feature weights not found: {spec.path!r}")
        tensors, _ = archive.load(spec.path)
        divisor = 64 // tensors["conv1_1.weight"].shape[0]
        net = FeatureExtractor(spec.layer_tap, divisor)
        state = {f"layers.{k}": v for k, v in tensors.items()
                 if k.split(".")[0] in net.layers}
        missing = [k for k in net.state_dict() if k.startswith("layers.") and k not in state]
        if missing:
            raise ValueError(f"pretrained file lacks tensors {missing}")
        net.load_state_dict({**net.state_dict(), **state})
        return net.freeze()
    raise ValueError(f"unknown feature extractor mode {spec.mode!r}")


def feature_loss(y: torch.Tensor, target: torch.Tensor, phi: nn.Module) -> torch.Tensor:
    """Root-mean-square feature difference (Euclidean norm / sqrt(#elements)), batch-averaged."""
    _check_same(y, target)
    d = phi(y) - phi(target)
    if d.dim() == 3:
        d = d.unsqueeze(0)
    d = d.flatten(1)
    return (torch.linalg.vector_norm(d, dim=1) / math.sqrt(d.shape[1])).mean()


# ---------------------------------------------------------------------------
# adversarial


@dataclass(frozen=True)
class DiscriminatorConfig:
    layers: int = 5
    base_filters: int = 64
    slope: float = LEAKY_SLOPE
    patch_grid: bool = False

    def channels(self) -> list[int]:
        chans = [3] + [self.base_filters * 2 ** min(i, 3) for i in range(self.layers - 1)] + [1]
        return chans


def discriminator_param_count(cfg: DiscriminatorConfig) -> int:
    c = cfg.channels()
    return sum(16 * a * b + b for a, b in zip(c[:-1], c[1:]))


class Discriminator(nn.Module):
    """Stack of 4x4 stride-2 convs; the final 1-channel map is mean-reduced to a logit."""

    def __init__(self, cfg: DiscriminatorConfig | None = None, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        c = self.cfg.channels()
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 4, stride=2, padding=1) for a, b in zip(c[:-1], c[1:]))
        if seed is not None:
            xavier_init(self, seed)

    @property
    def min_size(self) -> int:
        return 2 ** self.cfg.layers

    def grid(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() == 3:
            img = img.unsqueeze(0)
        if min(img.shape[-2:]) < self.min_size:
            raise ShapeError(f"discriminator needs frames of at least {self.min_size}px, got {tuple(img.shape[-2:])}")
        h = img
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, self.cfg.slope)
        return h

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.grid(img).flatten(1).mean(1)


def discriminator_forward(img, disc: Discriminator) -> torch.Tensor:
    return disc(img)


def gan_losses(d_real: torch.Tensor, d_fake: torch.Tensor, saturating: bool = False):
    """Return ``(loss_D, loss_G)`` from discriminator logits (batch-averaged).

    ``loss_G`` is the non-saturating ``-log D(fake)`` unless ``saturating`` is
    set, which gives the literal minimax term ``log(1 - D(fake))``.
    """
    d_real = torch.as_tensor(d_real, dtype=torch.float64) if not torch.is_tensor(d_real) else d_real
    d_fake = torch.as_tensor(d_fake, dtype=torch.float64) if not torch.is_tensor(d_fake) else d_fake
    loss_d = -(F.logsigmoid(d_real) + F.logsigmoid(-d_fake)).mean()
    if saturating:
        loss_g = F.logsigmoid(-d_fake).mean()
    else:
        loss_g = -F.logsigmoid(d_fake).mean()
    return loss_d, loss_g


# ---------------------------------------------------------------------------
# temporal terms


def _as_time(t, like: torch.Tensor):
    if torch.is_tensor(t):
        return t.to(dtype=like.dtype, device=like.device)
    if isinstance(t, (list, tuple)):
        return torch.tensor(t, dtype=like.dtype, device=like.device)
    return float(t)


def _check_triplet(t1, t2, tp):
    t1, t2, tp = (torch.as_tensor(t, dtype=torch.float64) for t in (t1, t2, tp))
    if not bool((t1 < t2).all()):
        raise InvalidTripletError("need t1 < t2")
    if bool((tp == t1).any()) or bool((tp == t2).any()):
        raise InvalidTripletError("target timestamp coincides with an anchor")


def transitive_loss(G: Callable, x1, x2, xp, t1, t2, tp, variant: str = "observed",
                    y: torch.Tensor | None = None, detach: bool = False) -> torch.Tensor:
    """Transitive consistency: frames regenerated from (x1, mid) and (mid, x2) must match x2 and x1.

    ``mid`` is the prediction ``G(x1, x2, r)`` for ``variant="predicted"``
    (pass ``y`` to reuse an already computed one) or the observed frame ``xp``.
    Timestamps may be scalars or per-sample sequences/tensors.
    """
    if variant not in TRANSITIVE_VARIANTS:
        raise ValueError(f"variant must be one of {TRANSITIVE_VARIANTS}, got {variant!r}")
    _check_same(x1, x2)
    _check_same(x1, xp)
    _check_triplet(t1, t2, tp)
    t1, t2, tp = (_as_time(t, x1) for t in (t1, t2, tp))
    if variant == "predicted":
        mid = y if y is not None else G(x1, x2, compute_ratio(t1, t2, tp))
        if detach:
            mid = mid.detach()
    else:
        mid = xp
    to_x2 = G(x1, mid, compute_ratio(t1, tp, t2))
    to_x1 = G(mid, x2, compute_ratio(tp, t2, t1))
    return _per_sample_l1(to_x2, x2).mean() + _per_sample_l1(to_x1, x1).mean()


def tv_weights(t1, t2, tp):
    d1 = abs(t1 - tp) if not torch.is_tensor(t1) else (t1 - tp).abs()
    d2 = abs(t2 - tp) if not torch.is_tensor(t2) else (t2 - tp).abs()
    return 2 * d2 / (d1 + d2), 2 * d1 / (d1 + d2)


def temporal_tv_loss(y, x1, x2, t1, t2, tp, weighted: bool = False) -> torch.Tensor:
    _check_same(y, x1)
    _check_same(y, x2)
    _check_triplet(t1, t2, tp)
    l1 = _per_sample_l1(y, x1)
    l2 = _per_sample_l1(y, x2)
    if weighted:
        t1, t2, tp = (_as_time(t, y) for t in (t1, t2, tp))
        w1, w2 = tv_weights(t1, t2, tp)
        return (w1 * l1 + w2 * l2).mean()
    return (l1 + l2).mean()


def total_objective(l_pix, l_feat, l_gan_g, l_tran, w: LossWeights, pixel_weight: float = 1.0):
    return pixel_weight * l_pix + w.lambda_feat * l_feat + w.lambda_gan * l_gan_g + w.lambda_tran * l_tran
