"""Graph convolution over per-node spatial feature maps.

Each layer runs a 3x3 channel-preserving convolution on every node's feature
map, mixes the results across the node axis with the normalized adjacency,
and applies a rectifier. Node mixing is a dense N x N matrix product; family
graphs are tiny so sparsity would buy nothing.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn
from torch.nn import functional as F

from .lineage import NormalizedAdjacency


def adjacency_tensor(
    adj: NormalizedAdjacency,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str | None = None,
) -> torch.Tensor:
    """Normalized adjacency as a torch tensor (copied; the source is read-only)."""
    return torch.tensor(adj.a_hat, dtype=dtype, device=device)


def mix_nodes(a_hat: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Mix features over the node axis: out_i = sum_j a_hat[i, j] * h_j.

    `h` is (N, C, H, W) with `a_hat` (N, N), or batched (B, N, C, H, W) with
    (B, N, N). The mix is elementwise over channels and spatial positions.
    """
    if h.dim() == 4:
        if a_hat.dim() != 2 or a_hat.shape[0] != a_hat.shape[1] or a_hat.shape[0] != h.shape[0]:
            raise ValueError(
                f"node count mismatch: features N={h.shape[0]}, adjacency {tuple(a_hat.shape)}"
            )
        return torch.einsum("ij,jchw->ichw", a_hat, h)
    if h.dim() == 5:
        if a_hat.dim() != 3 or a_hat.shape[1] != a_hat.shape[2] or a_hat.shape[:2] != h.shape[:2]:
            raise ValueError(
                f"node count mismatch: features {tuple(h.shape[:2])}, adjacency {tuple(a_hat.shape)}"
            )
        return torch.einsum("bij,bjchw->bichw", a_hat, h)
    raise ValueError(f"expected 4-d or 5-d node features, got {h.dim()}-d")


class GraphConvBlock(nn.Module):
    """Stack of graph conv layers (two by default) preserving (C, H, W).

    `activation` defaults to ReLU; tests may pass an identity hook to expose
    the raw adjacency-times-convolution product.
    """

    def __init__(self, channels: int, n_layers: int = 2):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1)
            for _ in range(n_layers)
        )
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    def layer_forward(
        self,
        h: torch.Tensor,
        a_hat: torch.Tensor,
        index: int,
        activation: Callable[[torch.Tensor], torch.Tensor] = F.relu,
    ) -> torch.Tensor:
        """One layer: activation(a_hat . conv(h)), node-mixing after the conv."""
        if not 0 <= index < len(self.convs):
            raise ValueError(f"layer index {index} out of range")
        conv = self.convs[index]
        if h.dim() == 4:
            y = conv(h)
        elif h.dim() == 5:
            b, n = h.shape[:2]
            y = conv(h.reshape(b * n, *h.shape[2:])).reshape(b, n, *h.shape[2:])
        else:
            raise ValueError(f"expected 4-d or 5-d node features, got {h.dim()}-d")
        return activation(mix_nodes(a_hat, y))

    def forward(
        self,
        h: torch.Tensor,
        a_hat: torch.Tensor,
        activation: Callable[[torch.Tensor], torch.Tensor] = F.relu,
    ) -> torch.Tensor:
        for index in range(len(self.convs)):
            h = self.layer_forward(h, a_hat, index, activation)
        return h
