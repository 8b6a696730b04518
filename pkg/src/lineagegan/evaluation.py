"""Paired perceptual distance, FID and KID over a pluggable feature extractor.

The default extractor is a fixed random conv pyramid whose weights come from
a named seed, so scores are comparable only between reports carrying the same
extractor hash. Anything honoring the same `stages`/`pooled` interface (e.g.
a pretrained network adapter) can be plugged in instead.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .lineage import build_adjacency, eligible_families, ingest_manifest
from .training import load_generator, load_image, random_adjacency

DEFAULT_EXTRACTOR_SEED = 271828
STAGE_WIDTHS = (16, 32, 64, 128)
MIN_FID_SAMPLES = 8
_COV_RIDGE = 1e-6
_KID_BLOCK = 256


class FeatureExtractor(nn.Module):
    """Fixed 4-stage conv pyramid (stride-2, widths 16/32/64/128).

    Weights are drawn once from `seed` via a platform-independent RNG and are
    never trained. `stages` returns the per-stage feature maps; `pooled`
    returns the globally averaged final stage.
    """

    def __init__(self, seed: int = DEFAULT_EXTRACTOR_SEED):
        super().__init__()
        self.seed = seed
        rng = np.random.default_rng(seed)
        convs = []
        c_in = 3
        for c_out in STAGE_WIDTHS:
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)
            fan_in = c_in * 9
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=conv.weight.shape)
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(weight.astype(np.float32)))
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def stages(self, images: torch.Tensor | np.ndarray) -> list[torch.Tensor]:
        x = torch.as_tensor(images, dtype=torch.float32)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, S, S) images, got {tuple(x.shape)}")
        out = []
        for conv in self.convs:
            x = F.relu(conv(x))
            out.append(x)
        return out

    @torch.no_grad()
    def pooled(self, images: torch.Tensor | np.ndarray) -> np.ndarray:
        """Final-stage features averaged over space: (B, 128) float64."""
        return self.stages(images)[-1].mean(dim=(2, 3)).double().numpy()

    @property
    def weights_hash(self) -> str:
        digest = hashlib.sha256()
        for conv in self.convs:
            digest.update(conv.weight.numpy().tobytes())
            digest.update(conv.bias.numpy().tobytes())
        return digest.hexdigest()


def save_extractor(extractor: FeatureExtractor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"seed": np.int64(extractor.seed)}
    for i, conv in enumerate(extractor.convs):
        arrays[f"w{i}"] = conv.weight.numpy()
        arrays[f"b{i}"] = conv.bias.numpy()
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_extractor(path: str | Path) -> FeatureExtractor:
    with np.load(Path(path)) as data:
        extractor = FeatureExtractor(seed=int(data["seed"]))
        with torch.no_grad():
            for i, conv in enumerate(extractor.convs):
                conv.weight.copy_(torch.from_numpy(data[f"w{i}"]))
                conv.bias.copy_(torch.from_numpy(data[f"b{i}"]))
    return extractor


def paired_perceptual_distance(
    a: torch.Tensor | np.ndarray,
    b: torch.Tensor | np.ndarray,
    extractor: FeatureExtractor,
) -> float:
    """Mean over stages of the mean absolute feature difference; >= 0."""
    ta = torch.as_tensor(a, dtype=torch.float32)
    tb = torch.as_tensor(b, dtype=torch.float32)
    if ta.shape != tb.shape:
        raise ValueError(f"resolution mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    stages_a = extractor.stages(ta)
    stages_b = extractor.stages(tb)
    diffs = [float((sa - sb).abs().mean()) for sa, sb in zip(stages_a, stages_b)]
    return float(np.mean(diffs))


def _check_features(features: np.ndarray, minimum: int, name: str) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} features must be 2-d (samples x dims), got {x.shape}")
    if x.shape[0] < minimum:
        raise ValueError(f"need at least {minimum} {name} samples, got {x.shape[0]}")
    return x


def fid(real_features: np.ndarray, fake_features: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    Covariances get a 1e-6 ridge; the matrix square root comes from the
    eigen-decomposition of the symmetrized covariance product with negative
    eigenvalues clipped at zero.
    """
    x = _check_features(real_features, MIN_FID_SAMPLES, "real")
    y = _check_features(fake_features, MIN_FID_SAMPLES, "fake")
    if x.shape[1] != y.shape[1]:
        raise ValueError("real and fake features must share dimensionality")
    d = x.shape[1]
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cov_x = np.cov(x, rowvar=False).reshape(d, d) + _COV_RIDGE * np.eye(d)
    cov_y = np.cov(y, rowvar=False).reshape(d, d) + _COV_RIDGE * np.eye(d)
    product = cov_x @ cov_y
    sym = (product + product.T) / 2.0
    eigvals = np.clip(np.linalg.eigvalsh(sym), 0.0, None)
    mean_term = float(np.sum((mu_x - mu_y) ** 2))
    trace_term = float(np.trace(cov_x) + np.trace(cov_y) - 2.0 * np.sum(np.sqrt(eigvals)))
    return mean_term + trace_term


def _poly_mmd2(x: np.ndarray, y: np.ndarray) -> float:
    # Unbiased MMD^2 with kernel k(a, b) = (a.b / d + 1)^3.
    d = x.shape[1]
    kxx = (x @ x.T / d + 1.0) ** 3
    kyy = (y @ y.T / d + 1.0) ** 3
    kxy = (x @ y.T / d + 1.0) ** 3
    m, n = x.shape[0], y.shape[0]
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def kid(real_features: np.ndarray, fake_features: np.ndarray) -> float:
    """Unbiased polynomial-kernel MMD^2; may be slightly negative.

    Sets larger than 256 are split into blocks (after a lexicographic sort,
    which keeps the statistic independent of sample order) and the per-block
    estimates are averaged.
    """
    x = _check_features(real_features, 2, "real")
    y = _check_features(fake_features, 2, "fake")
    if x.shape[1] != y.shape[1]:
        raise ValueError("real and fake features must share dimensionality")
    n_blocks = math.ceil(max(x.shape[0], y.shape[0]) / _KID_BLOCK)
    if n_blocks == 1:
        return _poly_mmd2(x, y)
    x = x[np.lexsort(x.T[::-1])]
    y = y[np.lexsort(y.T[::-1])]
    x_blocks = np.array_split(x, n_blocks)
    y_blocks = np.array_split(y, n_blocks)
    estimates = [
        _poly_mmd2(xb, yb)
        for xb, yb in zip(x_blocks, y_blocks)
        if xb.shape[0] >= 2 and yb.shape[0] >= 2
    ]
    if not estimates:
        raise ValueError("blocks too small for the unbiased estimator")
    return float(np.mean(estimates))


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated metrics for one checkpoint/corpus pair."""

    ppd: float
    fid: float
    kid: float
    n_pairs: int
    extractor_hash: str
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def evaluate_checkpoint(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    extractor: FeatureExtractor,
    eval_seed: int = 0,
) -> MetricsReport:
    """Noise each eligible child, regenerate it, score against the original.

    Families are processed in child-id order with per-family RNG streams
    derived from (eval_seed, index), so repeated calls produce identical
    reports. Checkpoints trained with the random-adjacency ablation are
    evaluated with random adjacencies as well (they never saw lineage).
    """
    generator, train_cfg = load_generator(checkpoint_path)
    graph = ingest_manifest(manifest_path)
    templates = eligible_families(graph)
    if not templates:
        raise ValueError("no eligible families in evaluation corpus")
    size = train_cfg.image_size
    distances = []
    generated_images = []
    real_images = []
    for i, template in enumerate(templates):
        rng = np.random.default_rng((eval_seed, i))
        images = np.stack([load_image(p, size) for p in template.slot_image_paths])
        real_child = images[0].copy()
        images[0] = rng.uniform(-1.0, 1.0, size=images[0].shape)
        if train_cfg.ablation_random_adjacency:
            adjacency = random_adjacency(template.node_count, rng)
        else:
            adjacency = build_adjacency(template)
        fake_child = generator.generate(images.astype(np.float32), adjacency, 0)
        distances.append(paired_perceptual_distance(fake_child, real_child, extractor))
        generated_images.append(fake_child.numpy())
        real_images.append(real_child)
    real_feats = extractor.pooled(np.stack(real_images))
    fake_feats = extractor.pooled(np.stack(generated_images))
    return MetricsReport(
        ppd=float(np.mean(distances)),
        fid=fid(real_feats, fake_feats),
        kid=kid(real_feats, fake_feats),
        n_pairs=len(templates),
        extractor_hash=extractor.weights_hash,
        config={
            "checkpoint": str(checkpoint_path),
            "manifest": str(manifest_path),
            "eval_seed": eval_seed,
            "train_config": train_cfg.to_dict(),
        },
    )
