"""Global generator: shared conv front-end per node, graph mixing, residual
blocks and a transposed-conv back-end on the target node's features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .graph_conv import GraphConvBlock, adjacency_tensor
from .lineage import FAMILY_SIZE, NormalizedAdjacency


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    base_channels: int = 32
    n_downsample: int = 3
    n_resblocks: int = 4
    family_size: int = FAMILY_SIZE

    def __post_init__(self) -> None:
        for name in ("image_size", "base_channels", "n_downsample", "n_resblocks", "family_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.image_size % (2**self.n_downsample) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.n_downsample}"
            )

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.n_downsample


class ResidualBlock(nn.Module):
    """conv-norm-relu-conv-norm with an identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Reconstruct one noised family member from the whole family.

    The front-end is weight-shared across nodes; the graph block mixes node
    features with the normalized adjacency; only the target node's mixed
    features continue through the residual blocks and the upsampling path.
    Output is tanh-bounded to [-1, 1].
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        c = self.config.base_channels
        front = [
            nn.Conv2d(3, c, 7, 1, 3, padding_mode="reflect"),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
        ]
        for _ in range(self.config.n_downsample):
            front += [
                nn.Conv2d(c, 2 * c, 3, 2, 1),
                nn.InstanceNorm2d(2 * c),
                nn.ReLU(inplace=True),
            ]
            c *= 2
        self.front_end = nn.Sequential(*front)
        self.graph_mixer = GraphConvBlock(c)
        self.res_blocks = nn.Sequential(
            *(ResidualBlock(c) for _ in range(self.config.n_resblocks))
        )
        back = []
        for _ in range(self.config.n_downsample):
            back += [
                nn.ConvTranspose2d(c, c // 2, 3, 2, 1, output_padding=1),
                nn.InstanceNorm2d(c // 2),
                nn.ReLU(inplace=True),
            ]
            c //= 2
        back += [nn.Conv2d(c, 3, 7, 1, 3, padding_mode="reflect"), nn.Tanh()]
        self.back_end = nn.Sequential(*back)

    def encode_nodes(self, family_images: torch.Tensor) -> torch.Tensor:
        """Weight-shared front-end over every node: (B, N, 3, S, S) -> (B, N, C, h, w)."""
        b, n = family_images.shape[:2]
        feats = self.front_end(family_images.reshape(b * n, *family_images.shape[2:]))
        return feats.reshape(b, n, *feats.shape[1:])

    def forward(
        self,
        family_images: torch.Tensor,
        a_hat: torch.Tensor,
        target_index: torch.Tensor,
    ) -> torch.Tensor:
        """Batched generation: (B, N, 3, S, S), (B, N, N), (B,) -> (B, 3, S, S)."""
        if family_images.dim() != 5 or family_images.shape[2] != 3:
            raise ValueError(f"expected (B, N, 3, S, S) family images, got {tuple(family_images.shape)}")
        b, n = family_images.shape[:2]
        if a_hat.shape != (b, n, n):
            raise ValueError(f"adjacency shape {tuple(a_hat.shape)} does not match families ({b}, {n}, {n})")
        target_index = torch.as_tensor(target_index, dtype=torch.long, device=family_images.device)
        if target_index.shape != (b,):
            raise ValueError(f"target_index must have shape ({b},)")
        if target_index.min() < 0 or target_index.max() >= n:
            raise ValueError("target_index out of range")
        feats = self.encode_nodes(family_images)
        mixed = self.graph_mixer(feats, a_hat)
        target_feats = mixed[torch.arange(b, device=mixed.device), target_index]
        return self.back_end(self.res_blocks(target_feats))

    @torch.no_grad()
    def generate(
        self,
        family_images: torch.Tensor | np.ndarray,
        adj: NormalizedAdjacency,
        target_index: int,
    ) -> torch.Tensor:
        """Single-family inference: (N, 3, S, S) -> (3, S, S) in [-1, 1].

        The caller is responsible for having replaced the target slot with
        noise; this routine just runs the network.
        """
        images = torch.as_tensor(family_images, dtype=torch.float32)
        if images.dim() != 4:
            raise ValueError(f"expected (N, 3, S, S) family images, got {tuple(images.shape)}")
        n = images.shape[0]
        if adj.size != n:
            raise ValueError(f"adjacency size {adj.size} does not match {n} nodes")
        if not 0 <= target_index < n:
            raise ValueError(f"target_index {target_index} out of range for {n} nodes")
        a_hat = adjacency_tensor(adj, device=images.device).unsqueeze(0)
        index = torch.tensor([target_index], device=images.device)
        return self.forward(images.unsqueeze(0), a_hat, index)[0]
