"""Deterministic synthetic lineage corpora.

Each family is a 7-node tree: four grandparent images rendered from seeded
parameters (background color plus 1-3 geometric shapes), two parents blended
from their grandparent pair, and a child blended from the parents. Blend
ratios are drawn per family but never written to the manifest; the model has
to learn the mixing implicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .lineage import write_manifest, LineageGraph, LineageNode

BLEND_MODES = ("alpha", "per-channel-alpha")
VALID_SIZES = (32, 64, 128, 256)
_CREATED_AT = "2026-01-01T00:00:00Z"


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of a synthetic corpus; same config -> bit-identical output."""

    n_families: int = 8
    image_size: int = 64
    seed: int = 0
    blend_mode: str = "alpha"

    def __post_init__(self) -> None:
        if self.n_families < 1:
            raise ValueError("n_families must be >= 1")
        if self.image_size not in VALID_SIZES:
            raise ValueError(f"image_size must be one of {VALID_SIZES}")
        if self.blend_mode not in BLEND_MODES:
            raise ValueError(f"blend_mode must be one of {BLEND_MODES}")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")


def blend_images(a: np.ndarray, b: np.ndarray, ratio: float | np.ndarray) -> np.ndarray:
    """Alpha-blend two uint8 images: ratio * a + (1 - ratio) * b, rounded.

    `ratio` is a scalar, or a 3-vector for per-channel blending.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    r = np.asarray(ratio, dtype=np.float64)
    if r.ndim == 1:
        r = r.reshape(1, 1, -1)
    mixed = r * a.astype(np.float64) + (1.0 - r) * b.astype(np.float64)
    return np.clip(np.round(mixed), 0, 255).astype(np.uint8)


def render_base_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Render one (size, size, 3) uint8 image: flat background + 1-3 shapes."""
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = rng.integers(0, 256, size=3, dtype=np.int64).astype(np.uint8)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_shapes = int(rng.integers(1, 4))
    for _ in range(n_shapes):
        kind = int(rng.integers(0, 3))
        color = rng.integers(0, 256, size=3, dtype=np.int64).astype(np.uint8)
        cx, cy = rng.uniform(0.2, 0.8, size=2) * size
        scale = rng.uniform(0.15, 0.35) * size
        if kind == 0:  # disc
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= scale**2
        elif kind == 1:  # axis-aligned rectangle
            w, h = scale, rng.uniform(0.5, 1.5) * scale
            mask = (np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= h)
        else:  # triangle around the center
            angles = rng.uniform(0.0, 2.0 * np.pi) + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
            vx = cx + scale * np.cos(angles)
            vy = cy + scale * np.sin(angles)
            mask = np.ones_like(xx, dtype=bool)
            for k in range(3):
                x0, y0 = vx[k], vy[k]
                x1, y1 = vx[(k + 1) % 3], vy[(k + 1) % 3]
                cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
                mask &= cross >= 0
        canvas[mask] = color
    return canvas


def _family_nodes(family: int, cfg: SynthConfig, images_dir: Path) -> list[LineageNode]:
    rng = np.random.default_rng((cfg.seed, family))
    grandparents = [render_base_image(rng, cfg.image_size) for _ in range(4)]

    def ratio() -> float | np.ndarray:
        if cfg.blend_mode == "per-channel-alpha":
            return rng.uniform(0.25, 0.75, size=3)
        return float(rng.uniform(0.25, 0.75))

    p1 = blend_images(grandparents[0], grandparents[1], ratio())
    p2 = blend_images(grandparents[2], grandparents[3], ratio())
    child = blend_images(p1, p2, ratio())

    prefix = f"f{family:04d}"
    roles = [
        (f"{prefix}-gp11", grandparents[0], ()),
        (f"{prefix}-gp12", grandparents[1], ()),
        (f"{prefix}-gp21", grandparents[2], ()),
        (f"{prefix}-gp22", grandparents[3], ()),
        (f"{prefix}-p1", p1, (f"{prefix}-gp11", f"{prefix}-gp12")),
        (f"{prefix}-p2", p2, (f"{prefix}-gp21", f"{prefix}-gp22")),
        (f"{prefix}-child", child, (f"{prefix}-p1", f"{prefix}-p2")),
    ]
    nodes = []
    for node_id, pixels, parent_ids in roles:
        image_path = images_dir / f"{node_id}.png"
        Image.fromarray(pixels, mode="RGB").save(image_path)
        nodes.append(
            LineageNode(
                id=node_id,
                image_path=image_path.resolve(),
                parent_ids=parent_ids,
                creator="synth",
                created_at=_CREATED_AT,
            )
        )
    return nodes


def generate_corpus(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write images plus manifest.json under `out_dir`; returns the manifest path."""
    out = Path(out_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    nodes: list[LineageNode] = []
    for family in range(cfg.n_families):
        nodes.extend(_family_nodes(family, cfg, images_dir))
    graph = LineageGraph.from_nodes(nodes)
    return write_manifest(graph, out / "manifest.json")
