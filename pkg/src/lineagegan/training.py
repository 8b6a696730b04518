"""Node-noising sample assembly, adversarial objective and training loop.

One node per family is replaced with uniform noise and the generator learns
to reconstruct its original from the rest of the family through the graph.
Everything downstream of (seed, data order) is deterministic: epoch order and
per-sample noise derive from (seed, epoch, index), so runs and checkpoint
resumes reproduce losses bit-for-bit.
"""

from __future__ import annotations

import copy
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch.nn import functional as F
from PIL import Image

from .discriminator import MultiScaleDiscriminator, ScaleOutput
from .generator import Generator, GeneratorConfig
from .lineage import (
    FAMILY_SIZE,
    FamilyTemplate,
    NormalizedAdjacency,
    build_adjacency,
    eligible_families,
    ingest_manifest,
    normalize_adjacency,
)

CHECKPOINT_FORMAT = "G2P-CKPT-1"
WORKERS_ENV = "G2P_NUM_WORKERS"


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; a diagnostic snapshot is saved first."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; `image_size` overrides the nested generator size."""

    epochs: int = 50
    batch_size: int = 8
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_fm: float = 10.0
    lambda_l1: float = 0.0
    p_random_target: float = 0.3
    seed: int = 0
    ablation_random_adjacency: bool = False
    image_size: int = 64
    max_steps: int | None = None
    checkpoint_every: int = 200
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    disc_scales: int = 2
    disc_channels: int = 32

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.p_random_target <= 1.0:
            raise ValueError("p_random_target must lie in [0, 1]")
        if self.lambda_fm < 0 or self.lambda_l1 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when set")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def resolved_generator_config(self) -> GeneratorConfig:
        return replace(self.generator, image_size=self.image_size, family_size=FAMILY_SIZE)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "generator" in kwargs and isinstance(kwargs["generator"], dict):
            kwargs["generator"] = GeneratorConfig(**kwargs["generator"])
        return cls(**kwargs)


@dataclass(frozen=True)
class FamilySample:
    """One training unit: noised family stack, the clean target, the graph."""

    images: np.ndarray  # (N, 3, S, S) float32 in [-1, 1]; target slot is noise
    target_index: int
    target_original: np.ndarray  # (3, S, S) float32 in [-1, 1]
    adjacency: NormalizedAdjacency


@lru_cache(maxsize=4096)
def _load_image_cached(path_str: str, size: int, mtime_ns: int) -> np.ndarray:
    with Image.open(path_str) as img:
        img = img.convert("RGB")
        if img.width != img.height:
            raise ValueError(f"image {path_str} is {img.width}x{img.height}, expected square")
        if img.width != size:
            img = img.resize((size, size), Image.Resampling.BILINEAR)
        pixels = np.asarray(img, dtype=np.float32)
    out = (pixels / 127.5 - 1.0).transpose(2, 0, 1)
    out.setflags(write=False)
    return out


def load_image(path: str | Path, size: int) -> np.ndarray:
    """Load an RGB PNG as (3, size, size) float32 in [-1, 1]; square inputs only."""
    path = Path(path)
    return _load_image_cached(str(path), size, path.stat().st_mtime_ns)


def random_adjacency(n: int, rng: np.random.Generator) -> NormalizedAdjacency:
    """Random symmetric self-looped adjacency, normalized like the lineage one."""
    coins = rng.random((n, n)) < 0.5
    a = np.triu(coins, k=1)
    a = (a | a.T).astype(np.int64)
    np.fill_diagonal(a, 1)
    return normalize_adjacency(a)


def make_sample(
    template: FamilyTemplate, rng: np.random.Generator, cfg: TrainConfig
) -> FamilySample:
    """Assemble one sample: pick the node to noise, noise it, attach the graph.

    The child slot is the target with probability 1 - p_random_target;
    otherwise a uniformly random non-child slot is noised instead.
    """
    n = template.node_count
    images = np.stack([load_image(p, cfg.image_size) for p in template.slot_image_paths])
    if rng.random() < cfg.p_random_target and n > 1:
        target_index = int(rng.integers(1, n))
    else:
        target_index = 0
    target_original = images[target_index].copy()
    images[target_index] = rng.uniform(-1.0, 1.0, size=images[target_index].shape)
    if cfg.ablation_random_adjacency:
        adjacency = random_adjacency(n, rng)
    else:
        adjacency = build_adjacency(template)
    return FamilySample(
        images=images.astype(np.float32),
        target_index=target_index,
        target_original=target_original,
        adjacency=adjacency,
    )


def gan_losses(
    d_out_real: list[ScaleOutput],
    d_out_fake: list[ScaleOutput],
    lambda_fm: float = 10.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Least-squares GAN terms plus the feature-matching term, summed over scales.

    loss_D drives real patches to 1 and fake patches to 0; loss_G_adv drives
    fake patches to 1; loss_G_fm is the L1 gap between real (detached) and
    fake discriminator features across every layer of every scale.
    """
    if len(d_out_real) != len(d_out_fake):
        raise ValueError("real/fake outputs must cover the same scales")
    if not d_out_real:
        raise ValueError("need at least one discriminator scale")
    zero = d_out_real[0][0].new_zeros(())
    loss_d = zero
    loss_g_adv = zero
    fm = zero
    for (patch_real, feats_real), (patch_fake, feats_fake) in zip(d_out_real, d_out_fake):
        loss_d = loss_d + 0.5 * (((patch_real - 1.0) ** 2).mean() + (patch_fake**2).mean())
        loss_g_adv = loss_g_adv + ((patch_fake - 1.0) ** 2).mean()
        for fr, ff in zip(feats_real, feats_fake):
            fm = fm + (fr.detach() - ff).abs().mean()
    return loss_d, loss_g_adv, lambda_fm * fm


@dataclass
class Batch:
    images: torch.Tensor  # (B, N, 3, S, S)
    a_hat: torch.Tensor  # (B, N, N)
    target_index: torch.Tensor  # (B,)
    target_original: torch.Tensor  # (B, 3, S, S)


def _collate(samples: list[FamilySample]) -> Batch:
    return Batch(
        images=torch.from_numpy(np.stack([s.images for s in samples])),
        a_hat=torch.from_numpy(
            np.stack([s.adjacency.a_hat for s in samples]).astype(np.float32)
        ),
        target_index=torch.tensor([s.target_index for s in samples], dtype=torch.long),
        target_original=torch.from_numpy(np.stack([s.target_original for s in samples])),
    )


@dataclass
class TrainState:
    """Serializable training snapshot; enough to resume bit-for-bit."""

    config: TrainConfig
    step: int
    epoch: int
    index_in_epoch: int
    generator_state: dict
    discriminator_state: dict
    opt_g_state: dict
    opt_d_state: dict
    torch_rng_state: torch.Tensor


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "index_in_epoch": state.index_in_epoch,
        "generator": state.generator_state,
        "discriminator": state.discriminator_state,
        "opt_g": state.opt_g_state,
        "opt_d": state.opt_d_state,
        "torch_rng": state.torch_rng_state,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    return TrainState(
        config=TrainConfig.from_dict(payload["config"]),
        step=payload["step"],
        epoch=payload["epoch"],
        index_in_epoch=payload["index_in_epoch"],
        generator_state=payload["generator"],
        discriminator_state=payload["discriminator"],
        opt_g_state=payload["opt_g"],
        opt_d_state=payload["opt_d"],
        torch_rng_state=payload["torch_rng"],
    )


def load_generator(path: str | Path) -> tuple[Generator, TrainConfig]:
    """Rebuild the generator (eval mode) from a checkpoint."""
    state = load_checkpoint(path)
    generator = Generator(state.config.resolved_generator_config())
    generator.load_state_dict(state.generator_state)
    generator.eval()
    return generator, state.config


class Trainer:
    """Owns the networks, optimizers and the deterministic data stream.

    The trainer is the sole mutator of its state; `train_step` alternates one
    discriminator update and one generator update on each batch.
    """

    def __init__(
        self,
        config: TrainConfig,
        templates: list[FamilyTemplate],
        state: TrainState | None = None,
    ):
        if not templates:
            raise ValueError("no eligible families to train on")
        sizes = {t.node_count for t in templates}
        if len(sizes) != 1:
            raise ValueError(f"templates disagree on node count: {sorted(sizes)}")
        self.config = config
        self.templates = templates
        self.family_size = sizes.pop()

        torch.manual_seed(config.seed)
        self.generator = Generator(config.resolved_generator_config())
        self.discriminator = MultiScaleDiscriminator(
            family_size=self.family_size,
            n_scales=config.disc_scales,
            base_channels=config.disc_channels,
        )
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.lr, betas=betas)
        self.step = 0
        self.epoch = 0
        self.index_in_epoch = 0
        self._order_cache: tuple[int, np.ndarray] | None = None

        workers = int(os.environ.get(WORKERS_ENV, "0") or 0)
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

        if state is not None:
            self.generator.load_state_dict(state.generator_state)
            self.discriminator.load_state_dict(state.discriminator_state)
            self.opt_g.load_state_dict(copy.deepcopy(state.opt_g_state))
            self.opt_d.load_state_dict(copy.deepcopy(state.opt_d_state))
            self.step = state.step
            self.epoch = state.epoch
            self.index_in_epoch = state.index_in_epoch
            torch.set_rng_state(state.torch_rng_state)

    @classmethod
    def from_checkpoint(cls, path: str | Path, templates: list[FamilyTemplate]) -> "Trainer":
        state = load_checkpoint(path)
        return cls(state.config, templates, state=state)

    # -- deterministic data stream -------------------------------------------------

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if self._order_cache is None or self._order_cache[0] != epoch:
            rng = np.random.default_rng((self.config.seed, epoch))
            self._order_cache = (epoch, rng.permutation(len(self.templates)))
        return self._order_cache[1]

    def _build_sample(self, epoch: int, position: int) -> FamilySample:
        order = self._epoch_order(epoch)
        rng = np.random.default_rng((self.config.seed, epoch, position))
        return make_sample(self.templates[order[position]], rng, self.config)

    def next_batch(self) -> Batch:
        n = len(self.templates)
        end = min(self.index_in_epoch + self.config.batch_size, n)
        positions = range(self.index_in_epoch, end)
        epoch = self.epoch
        if self._pool is not None:
            samples = list(self._pool.map(lambda p: self._build_sample(epoch, p), positions))
        else:
            samples = [self._build_sample(epoch, p) for p in positions]
        if end >= n:
            self.epoch += 1
            self.index_in_epoch = 0
        else:
            self.index_in_epoch = end
        return _collate(samples)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.templates) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        if self.config.max_steps is not None:
            return self.config.max_steps
        return self.config.epochs * self.steps_per_epoch

    # -- optimization --------------------------------------------------------------

    def discriminator_step(self, batch: Batch, fake_detached: torch.Tensor) -> tuple[float, list[ScaleOutput]]:
        """One D update; returns the loss and the real-pass outputs for reuse."""
        d_real = self.discriminator(batch.images, batch.target_original)
        d_fake = self.discriminator(batch.images, fake_detached)
        loss_d, _, _ = gan_losses(d_real, d_fake, self.config.lambda_fm)
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()
        detached = [(p.detach(), [f.detach() for f in feats]) for p, feats in d_real]
        return float(loss_d.detach()), detached

    def generator_step(
        self, batch: Batch, fake: torch.Tensor, d_real: list[ScaleOutput]
    ) -> tuple[float, float]:
        """One G update against the current discriminator."""
        d_fake = self.discriminator(batch.images, fake)
        _, loss_g_adv, loss_g_fm = gan_losses(d_real, d_fake, self.config.lambda_fm)
        loss_g = loss_g_adv + loss_g_fm
        if self.config.lambda_l1 > 0:
            loss_g = loss_g + self.config.lambda_l1 * F.l1_loss(fake, batch.target_original)
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()
        return float(loss_g_adv.detach()), float(loss_g_fm.detach())

    def train_step(self) -> dict:
        batch = self.next_batch()
        fake = self.generator(batch.images, batch.a_hat, batch.target_index)
        loss_d, d_real = self.discriminator_step(batch, fake.detach())
        loss_g_adv, loss_g_fm = self.generator_step(batch, fake, d_real)
        self.step += 1
        return {
            "step": self.step,
            "loss_d": loss_d,
            "loss_g_adv": loss_g_adv,
            "loss_g_fm": loss_g_fm,
        }

    def run(
        self,
        metrics_path: str | Path,
        checkpoint_path: str | Path,
        log: bool = False,
    ) -> None:
        """Train to the step budget, streaming one JSON metrics line per step."""
        metrics_path = Path(metrics_path)
        checkpoint_path = Path(checkpoint_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        every = self.config.checkpoint_every
        with metrics_path.open("w", encoding="utf-8") as metrics:
            while self.step < self.total_steps:
                stats = self.train_step()
                metrics.write(json.dumps(stats) + "\n")
                if not all(math.isfinite(v) for v in stats.values()):
                    snapshot = checkpoint_path.with_name(checkpoint_path.name + ".diverged")
                    save_checkpoint(self.state(), snapshot)
                    raise TrainingDiverged(
                        f"non-finite loss at step {stats['step']}: {stats}; snapshot at {snapshot}"
                    )
                if log:
                    print(
                        f"step {stats['step']}/{self.total_steps} "
                        f"loss_d={stats['loss_d']:.4f} loss_g_adv={stats['loss_g_adv']:.4f} "
                        f"loss_g_fm={stats['loss_g_fm']:.4f}"
                    )
                if every and self.step % every == 0:
                    save_checkpoint(self.state(), checkpoint_path)
        save_checkpoint(self.state(), checkpoint_path)

    def state(self) -> TrainState:
        return TrainState(
            config=self.config,
            step=self.step,
            epoch=self.epoch,
            index_in_epoch=self.index_in_epoch,
            generator_state={k: v.detach().clone() for k, v in self.generator.state_dict().items()},
            discriminator_state={
                k: v.detach().clone() for k, v in self.discriminator.state_dict().items()
            },
            opt_g_state=copy.deepcopy(self.opt_g.state_dict()),
            opt_d_state=copy.deepcopy(self.opt_d.state_dict()),
            torch_rng_state=torch.get_rng_state(),
        )


def train(
    config: TrainConfig,
    manifest_path: str | Path,
    checkpoint_path: str | Path,
    metrics_path: str | Path | None = None,
    log: bool = False,
) -> TrainState:
    """Train on a corpus manifest; writes the checkpoint and a JSONL metrics log."""
    graph = ingest_manifest(manifest_path)
    templates = eligible_families(graph)
    checkpoint_path = Path(checkpoint_path)
    if metrics_path is None:
        metrics_path = checkpoint_path.with_name("metrics.jsonl")
    trainer = Trainer(config, templates)
    trainer.run(metrics_path=metrics_path, checkpoint_path=checkpoint_path, log=log)
    return trainer.state()
