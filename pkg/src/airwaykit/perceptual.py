"""Fixed feature extractor and the perceptual losses that train the refiner.

The extractor follows the VGG-16 convolutional layout up to its fourth block,
with activations tapped at the canonical layer names relu1_2, relu2_2,
relu3_3 and relu4_3. Two builds are provided: `pretrained_extractor` loads
published VGG-16 weights from a local file, and `hermetic_extractor` builds a
narrow fixed-seed random-weight clone so tests and desk-scale runs need no
download. Extractor weights are always frozen.

Loss terms, each normalized by the layer's element count C*H*W:
  feature: sum_j ||phi_j(y_hat) - phi_j(x)||_1 / (C_j*H_j*W_j)
  style:   sum_j ||G_j(y_hat) - G_j(style)||_1 / (C_j*H_j*W_j),
           G[c,c'] = sum_hw phi[c]*phi[c'] / (C*H*W)
  reg:     mean |y_hat - x|
"""
from __future__ import annotations

import math
import os
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError

CANONICAL_LAYERS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
PRODUCTION_WIDTHS = (64, 128, 256, 512)
HERMETIC_WIDTHS = (8, 16, 32, 64)
WEIGHTS_ENV_VAR = "AIRWAYKIT_VGG16_WEIGHTS"

# channel statistics the published weights were trained with
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)

# per block: (block index, conv count); pools sit between blocks
_BLOCKS = ((1, 2), (2, 2), (3, 3), (4, 3))


class FeatureExtractor(nn.Module):
    """Frozen convolutional feature extractor with named activation taps."""

    layer_names = CANONICAL_LAYERS

    def __init__(self, widths: tuple[int, ...] = PRODUCTION_WIDTHS,
                 in_channels: int = 3, input_size: int = 32):
        super().__init__()
        if len(widths) != len(_BLOCKS):
            raise ConfigError(f"expected {len(_BLOCKS)} block widths, got {len(widths)}")
        self.in_channels = in_channels
        self.input_size = input_size
        layers: OrderedDict[str, nn.Module] = OrderedDict()
        prev = in_channels
        for (block, n_convs), width in zip(_BLOCKS, widths):
            if block > 1:
                layers[f"pool{block - 1}"] = nn.MaxPool2d(2)
            for i in range(1, n_convs + 1):
                layers[f"conv{block}_{i}"] = nn.Conv2d(prev, width, 3, padding=1)
                layers[f"relu{block}_{i}"] = nn.ReLU()
                prev = width
        self.stack = nn.Sequential(layers)
        self.register_buffer("input_mean", torch.zeros(1, in_channels, 1, 1))
        self.register_buffer("input_std", torch.ones(1, in_channels, 1, 1))
        self.freeze()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def set_normalization(self, mean, std) -> None:
        self.input_mean.copy_(torch.as_tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.input_std.copy_(torch.as_tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def features(self, patches: torch.Tensor) -> dict[str, torch.Tensor]:
        """Activations at every canonical tap for a (B, 1|C, H, W) patch batch."""
        x = patches
        if x.shape[1] == 1 and self.in_channels > 1:
            x = x.expand(-1, self.in_channels, -1, -1)
        elif x.shape[1] != self.in_channels:
            raise DataError(f"expected 1 or {self.in_channels} channels, got {x.shape[1]}")
        x = (x - self.input_mean.to(x.dtype)) / self.input_std.to(x.dtype)
        taps: dict[str, torch.Tensor] = {}
        for name, module in self.stack.named_children():
            x = module(x)
            if name in CANONICAL_LAYERS:
                taps[name] = x
                if name == CANONICAL_LAYERS[-1]:
                    break
        return taps


def hermetic_extractor(seed: int = 0, widths: tuple[int, ...] = HERMETIC_WIDTHS) -> FeatureExtractor:
    """Narrow extractor with fixed-seed random weights and zero biases."""
    ext = FeatureExtractor(widths=widths)
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for module in ext.stack.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * 9
                w = torch.randn(module.weight.shape, generator=gen)
                module.weight.copy_(w * math.sqrt(2.0 / fan_in))
                module.bias.zero_()
    ext.freeze()
    return ext


def pretrained_extractor(weights_path: str | None = None) -> FeatureExtractor:
    """Load published VGG-16 weights from `weights_path` or $AIRWAYKIT_VGG16_WEIGHTS."""
    path = weights_path or os.environ.get(WEIGHTS_ENV_VAR)
    if not path:
        raise ConfigError(
            f"pretrained extractor needs a weights file: set {WEIGHTS_ENV_VAR} "
            "or pass weights_path")
    if not os.path.isfile(path):
        raise ConfigError(f"weights file not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if any(k.startswith("features.") for k in state):
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
    # torchvision's sequential indices for the convs we keep, in order
    src_indices = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21)
    ext = FeatureExtractor(widths=PRODUCTION_WIDTHS)
    convs = [m for m in ext.stack if isinstance(m, nn.Conv2d)]
    with torch.no_grad():
        for conv, idx in zip(convs, src_indices):
            try:
                w, b = state[f"{idx}.weight"], state[f"{idx}.bias"]
            except KeyError as exc:
                raise DataError(f"{path}: missing weight tensor {exc}") from None
            if tuple(w.shape) != tuple(conv.weight.shape):
                raise DataError(f"{path}: tensor {idx}.weight has shape {tuple(w.shape)}, "
                                f"expected {tuple(conv.weight.shape)}")
            conv.weight.copy_(w)
            conv.bias.copy_(b)
    ext.set_normalization(_IMAGENET_MEAN, _IMAGENET_STD)
    ext.freeze()
    return ext


def build_extractor(variant: str, weights_path: str | None = None,
                    seed: int = 0) -> FeatureExtractor:
    if variant == "hermetic":
        return hermetic_extractor(seed=seed)
    if variant == "pretrained":
        return pretrained_extractor(weights_path)
    raise ConfigError(f"unknown extractor variant {variant!r} (hermetic|pretrained)")


def as_patch_batch(patches) -> torch.Tensor:
    """Coerce (H,W) / (B,H,W) / (B,1,H,W) arrays or tensors to (B,1,H,W)."""
    t = torch.as_tensor(np.asarray(patches) if not torch.is_tensor(patches) else patches)
    if not t.is_floating_point():
        t = t.float()
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    elif t.dim() != 4:
        raise DataError(f"expected 2-4 dims, got shape {tuple(t.shape)}")
    return t


def extract_features(extractor, patch) -> dict[str, torch.Tensor]:
    """Named activations for one patch or batch; checks the input size."""
    batch = as_patch_batch(patch.pixels if hasattr(patch, "pixels") else patch)
    expected = getattr(extractor, "input_size", None)
    if expected is not None and batch.shape[-2:] != (expected, expected):
        raise DataError(f"extractor expects {expected}x{expected} input, "
                        f"got {tuple(batch.shape[-2:])}")
    return extractor.features(batch)


def _validate_layers(extractor, layers) -> tuple[str, ...]:
    known = tuple(getattr(extractor, "layer_names", ()))
    for name in layers:
        if name not in known:
            raise ConfigError(f"unknown extractor layer {name!r}; available: {list(known)}")
    if not layers:
        raise ConfigError("at least one layer required")
    return tuple(layers)


def _per_layer_norm(diff: torch.Tensor, norm: str) -> torch.Tensor:
    # normalize by the per-example element count, then average over the batch
    per_example = math.prod(diff.shape[1:])
    flat = diff.reshape(diff.shape[0], -1)
    if norm == "l1":
        return flat.abs().sum(dim=1).mean() / per_example
    if norm == "l2":
        return flat.pow(2).sum(dim=1).mean() / per_example
    raise ConfigError(f"unknown norm {norm!r} (l1|l2)")


def feature_loss(extractor, layers, y_hat, x, norm: str = "l1") -> torch.Tensor:
    """Activation-difference loss between refined output and refiner input."""
    layers = _validate_layers(extractor, layers)
    acts_a = extractor.features(as_patch_batch(y_hat))
    acts_b = extractor.features(as_patch_batch(x))
    total = None
    for name in layers:
        term = _per_layer_norm(acts_a[name] - acts_b[name], norm)
        total = term if total is None else total + term
    return total


def gram(activations: torch.Tensor) -> torch.Tensor:
    """Channel co-activation matrix, normalized by the activation element count."""
    if activations.dim() == 3:
        return gram(activations[None])[0]
    if activations.dim() != 4:
        raise DataError(f"expected (B,C,H,W) or (C,H,W), got {tuple(activations.shape)}")
    b, c, h, w = activations.shape
    flat = activations.reshape(b, c, h * w)
    return torch.bmm(flat, flat.transpose(1, 2)) / (c * h * w)


def style_loss(extractor, layers, y_hat, y_style) -> torch.Tensor:
    """Gram-difference loss pulling y_hat toward the style target's statistics."""
    layers = _validate_layers(extractor, layers)
    acts_a = extractor.features(as_patch_batch(y_hat))
    acts_b = extractor.features(as_patch_batch(y_style))
    total = None
    for name in layers:
        c, h, w = acts_a[name].shape[1:]
        diff = gram(acts_a[name]) - gram(acts_b[name])
        term = diff.abs().reshape(diff.shape[0], -1).sum(dim=1).mean() / (c * h * w)
        total = term if total is None else total + term
    return total


@dataclass
class PerceptualLossConfig:
    feature_layers: tuple[str, ...] = ("relu3_3",)
    style_layers: tuple[str, ...] = ("relu1_2", "relu2_2")
    style_cumulative: bool = False  # expand style_layers to all taps up to its highest
    reg_lambda: float = 0.01
    feature_weight: float = 1.0
    style_weight: float = 1.0
    feature_norm: str = "l1"

    def validate(self) -> None:
        if self.reg_lambda < 0:
            raise ConfigError("reg_lambda must be >= 0")
        if self.feature_weight < 0 or self.style_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.feature_norm not in ("l1", "l2"):
            raise ConfigError(f"feature_norm must be l1 or l2, got {self.feature_norm!r}")
        for name in tuple(self.feature_layers) + tuple(self.style_layers):
            if name not in CANONICAL_LAYERS:
                raise ConfigError(f"unknown layer {name!r}; available: {list(CANONICAL_LAYERS)}")

    def resolved_style_layers(self) -> tuple[str, ...]:
        if not self.style_cumulative:
            return tuple(self.style_layers)
        highest = max(CANONICAL_LAYERS.index(n) for n in self.style_layers)
        return CANONICAL_LAYERS[:highest + 1]


def ablation_layer_sets() -> list[tuple[str, ...]]:
    """Cumulative style-layer sets, one per successively higher tap."""
    return [CANONICAL_LAYERS[:i + 1] for i in range(len(CANONICAL_LAYERS))]


@dataclass
class LossBreakdown:
    """`total` keeps the autograd graph; the terms are reported unweighted."""
    total: torch.Tensor
    feature: float
    style: float
    reg: float


def refinement_loss(extractor, config: PerceptualLossConfig,
                    x, y_hat, y_style) -> LossBreakdown:
    """Composite objective: weighted feature + style terms plus pixel identity."""
    config.validate()
    x_b = as_patch_batch(x)
    y_b = as_patch_batch(y_hat)
    feat = feature_loss(extractor, config.feature_layers, y_b, x_b, norm=config.feature_norm)
    sty = style_loss(extractor, config.resolved_style_layers(), y_b, y_style)
    reg = (y_b - x_b).abs().mean()
    # combine in float64 so the total equals the weighted sum of reported terms
    total = (config.feature_weight * feat.double()
             + config.style_weight * sty.double()
             + config.reg_lambda * reg.double())
    return LossBreakdown(total=total, feature=feat.detach().item(),
                         style=sty.detach().item(), reg=reg.detach().item())
