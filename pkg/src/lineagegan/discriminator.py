"""Multi-scale PatchGAN discriminator over the channel-concatenated family.

Each scale sees the previous scale's input downsampled by exact 2x2 average
pooling. Scales carry no normalization layers: every patch score must depend
only on pixels inside its receptive field.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .lineage import FAMILY_SIZE

ScaleOutput = tuple[torch.Tensor, list[torch.Tensor]]


class PatchDiscriminator(nn.Module):
    """Single-scale stack: stride-2 convs with leaky rectifier, then a
    1-channel patch score map. Exposes every intermediate feature map."""

    def __init__(self, in_channels: int, base_channels: int = 32, n_layers: int = 4):
        super().__init__()
        layers = []
        c_in = in_channels
        c_out = base_channels
        for _ in range(n_layers):
            layers.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, kernel_size=4, stride=2, padding=1),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
            c_in = c_out
            c_out = min(2 * c_out, 256)
        self.layers = nn.ModuleList(layers)
        self.score = nn.Conv2d(c_in, 1, kernel_size=3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> ScaleOutput:
        features = []
        for layer in self.layers:
            x = layer(x)
            features.append(x)
        return self.score(x), features


class MultiScaleDiscriminator(nn.Module):
    """PatchGAN stacks over 2x-downsampled copies of the concatenated input.

    Input is the channel-wise concatenation of all N family images (with the
    noised target slot exactly as the generator saw it) and one candidate
    image, real or generated: 3 * (N + 1) channels total.
    """

    def __init__(
        self,
        family_size: int = FAMILY_SIZE,
        n_scales: int = 2,
        base_channels: int = 32,
        n_layers: int = 4,
    ):
        super().__init__()
        if n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        self.family_size = family_size
        self.scales = nn.ModuleList(
            PatchDiscriminator(3 * (family_size + 1), base_channels, n_layers)
            for _ in range(n_scales)
        )

    def forward(
        self, family_images: torch.Tensor, candidate: torch.Tensor
    ) -> list[ScaleOutput]:
        squeeze = family_images.dim() == 4
        if squeeze:
            family_images = family_images.unsqueeze(0)
            candidate = candidate.unsqueeze(0)
        if family_images.dim() != 5:
            raise ValueError(f"expected (B, N, 3, S, S) family images, got {tuple(family_images.shape)}")
        b, n = family_images.shape[:2]
        if n != self.family_size:
            raise ValueError(f"expected {self.family_size} family nodes, got {n}")
        if candidate.shape != family_images[:, 0].shape:
            raise ValueError(
                f"candidate shape {tuple(candidate.shape)} does not match family images"
            )
        x = torch.cat([family_images.reshape(b, 3 * n, *family_images.shape[3:]), candidate], dim=1)
        outputs: list[ScaleOutput] = []
        for scale in self.scales:
            patch, features = scale(x)
            if squeeze:
                patch = patch.squeeze(0)
                features = [f.squeeze(0) for f in features]
            outputs.append((patch, features))
            x = F.avg_pool2d(x, kernel_size=2, stride=2)
        return outputs


def discriminate(
    d: MultiScaleDiscriminator, family_images: torch.Tensor, candidate: torch.Tensor
) -> list[ScaleOutput]:
    """Per-scale (patch_map, intermediate_features) for one family or a batch."""
    return d(family_images, candidate)
