"""Refiner and ellipse-regressor architectures plus their forward-pass ops.

The refiner is all-convolutional (3x3 head, four 64-channel residual blocks,
1x1 projection back to one channel) so it preserves spatial dims. The
regressor is a small stride-2 conv trunk feeding two fully connected layers
that emit the 8-vector label encoding (radii and center in mm, orientation as
a double-angle pair).
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import DataError
from .labels import AirwayLabel, decode_label
from .perceptual import as_patch_batch
from .util import derive_int_seed


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv1(x))
        h = self.conv2(h)
        return torch.relu(x + h)


class Refiner(nn.Module):
    architecture = "refiner"

    def __init__(self, channels: int = 64, n_blocks: int = 4):
        super().__init__()
        self.channels = channels
        self.n_blocks = n_blocks
        self.head = nn.Conv2d(1, channels, 3, padding=1)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(n_blocks)])
        self.tail = nn.Conv2d(channels, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.head(x))
        h = self.blocks(h)
        return self.tail(h)

    def config_dict(self) -> dict:
        return {"channels": self.channels, "n_blocks": self.n_blocks}


class EllipseRegressor(nn.Module):
    """Stride-2 conv trunk, then two fully connected layers to 8 outputs."""

    architecture = "ellipse-regressor"

    def __init__(self, widths: tuple[int, ...] = (32, 64, 128, 128),
                 fc_dim: int = 256, input_size: int = 32):
        super().__init__()
        self.widths = tuple(widths)
        self.fc_dim = fc_dim
        self.input_size = input_size
        convs = []
        prev = 1
        for w in widths:
            convs += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.ReLU()]
            prev = w
        self.trunk = nn.Sequential(*convs)
        side = input_size
        for _ in widths:
            side = (side + 1) // 2
        self.fc1 = nn.Linear(prev * side * side, fc_dim)
        self.fc2 = nn.Linear(fc_dim, 8)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.input_size, self.input_size):
            raise DataError(f"regressor expects {self.input_size}x{self.input_size} input, "
                            f"got {tuple(x.shape[-2:])}")
        h = self.trunk(x)
        h = torch.relu(self.fc1(h.flatten(1)))
        return self.fc2(h)

    def config_dict(self) -> dict:
        return {"widths": list(self.widths), "fc_dim": self.fc_dim,
                "input_size": self.input_size}


def build_refiner(seed: int = 0, channels: int = 64, n_blocks: int = 4) -> Refiner:
    torch.manual_seed(derive_int_seed(seed, 101))
    return Refiner(channels=channels, n_blocks=n_blocks)


def build_regressor(seed: int = 0, widths=(32, 64, 128, 128), fc_dim: int = 256,
                    input_size: int = 32) -> EllipseRegressor:
    torch.manual_seed(derive_int_seed(seed, 102))
    return EllipseRegressor(widths=tuple(widths), fc_dim=fc_dim, input_size=input_size)


def model_from_config(architecture: str, config: dict) -> nn.Module:
    if architecture == Refiner.architecture:
        return Refiner(channels=int(config["channels"]), n_blocks=int(config["n_blocks"]))
    if architecture == EllipseRegressor.architecture:
        return EllipseRegressor(widths=tuple(config["widths"]), fc_dim=int(config["fc_dim"]),
                                input_size=int(config["input_size"]))
    raise DataError(f"unknown architecture tag {architecture!r}")


def refine(model: Refiner, patches) -> np.ndarray:
    """Forward pass on standardized patches; output shape equals input shape."""
    batch = as_patch_batch(patches)
    with torch.no_grad():
        out = model(batch)
    out = out.squeeze(1).numpy()
    arr = np.asarray(patches)
    return out[0] if arr.ndim == 2 else out


def measure_batch(model: EllipseRegressor, patches) -> list[AirwayLabel]:
    """Predict one label per standardized 32x32 patch, order-preserving."""
    batch = as_patch_batch(patches)
    with torch.no_grad():
        vecs = model(batch).numpy()
    return [decode_label(v).label for v in vecs]


def measure(model: EllipseRegressor, patch) -> AirwayLabel:
    pixels = patch.pixels if hasattr(patch, "pixels") else patch
    return measure_batch(model, np.asarray(pixels))[0]
