"""Command-line entry point wiring the modules into reproducible runs.

Subcommands: dataset, validate, train, infer, eval. Every command that writes
files echoes its fully resolved configuration into the output directory as
config.lock.json; errors come out as one machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np
from PIL import Image

from .evaluation import (
    DEFAULT_EXTRACTOR_SEED,
    FeatureExtractor,
    evaluate_checkpoint,
)
from .lineage import ManifestError, build_adjacency, eligible_families, ingest_manifest
from .synthetic import SynthConfig, generate_corpus
from .training import (
    TrainConfig,
    TrainingDiverged,
    load_generator,
    load_image,
    random_adjacency,
    train,
)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return data


def _write_lock(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / "config.lock.json"
    lock.write_text(json.dumps(config, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_dataset(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    resolved = {
        "n_families": args.families if args.families is not None else file_cfg.get("n_families", 8),
        "image_size": args.image_size if args.image_size is not None else file_cfg.get("image_size", 64),
        "seed": args.seed if args.seed is not None else file_cfg.get("seed", 0),
        "blend_mode": args.blend_mode if args.blend_mode is not None else file_cfg.get("blend_mode", "alpha"),
    }
    cfg = SynthConfig(**resolved)
    out_dir = Path(args.out)
    manifest = generate_corpus(cfg, out_dir)
    _write_lock(resolved, out_dir)
    print(manifest)
    return 0


def _histogram(counts: Counter, label: str) -> list[str]:
    lines = [f"{label} distribution:"]
    total = sum(counts.values())
    for value in sorted(counts):
        n = counts[value]
        bar = "#" * max(1, round(40 * n / total))
        lines.append(f"  {label}={value:<4d} nodes={n:<6d} {bar}")
    return lines


def cmd_validate(args: argparse.Namespace) -> int:
    graph = ingest_manifest(args.manifest)
    templates = eligible_families(graph)
    parent_counts = Counter(len(node.parent_ids) for node in graph.nodes.values())
    ancestor_counts = Counter(len(graph.ancestors_of(nid)) for nid in graph.nodes)
    print(f"nodes: {len(graph)}  edges: {len(graph.edges)}  eligible families: {len(templates)}")
    for line in _histogram(parent_counts, "parents"):
        print(line)
    for line in _histogram(ancestor_counts, "ancestors"):
        print(line)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "lineage_histograms.csv"
        with csv_path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value", "n_nodes"])
            for value in sorted(parent_counts):
                writer.writerow(["parents", value, parent_counts[value]])
            for value in sorted(ancestor_counts):
                writer.writerow(["ancestors", value, ancestor_counts[value]])
        print(f"wrote {csv_path}")
    return 0


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    file_cfg = _load_config_file(args.config)
    cfg = TrainConfig.from_dict(file_cfg)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if args.image_size is not None:
        overrides["image_size"] = args.image_size
    if args.ablation:
        overrides["ablation_random_adjacency"] = True
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_train_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_lock(cfg.to_dict(), out_dir)
    state = train(
        cfg,
        args.manifest,
        checkpoint_path=out_dir / "checkpoint.ckpt",
        metrics_path=out_dir / "metrics.jsonl",
        log=not args.quiet,
    )
    print(f"trained {state.step} steps -> {out_dir / 'checkpoint.ckpt'}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    generator, train_cfg = load_generator(args.checkpoint)
    graph = ingest_manifest(args.manifest)
    templates = {t.child_id: t for t in eligible_families(graph)}
    if args.family_id not in templates:
        raise ValueError(f"family '{args.family_id}' not found among eligible families")
    template = templates[args.family_id]
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    size = train_cfg.image_size
    images = np.stack([load_image(p, size) for p in template.slot_image_paths])
    images[0] = rng.uniform(-1.0, 1.0, size=images[0].shape)
    if train_cfg.ablation_random_adjacency:
        adjacency = random_adjacency(template.node_count, rng)
    else:
        adjacency = build_adjacency(template)
    fake = generator.generate(images.astype(np.float32), adjacency, 0).numpy()
    pixels = np.clip(np.round((fake.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    out_path = Path(args.out_png)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="RGB").save(out_path)
    _write_lock(
        {"checkpoint": str(args.checkpoint), "family_id": args.family_id, "seed": seed},
        out_path.parent,
    )
    print(out_path)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    extractor = FeatureExtractor(seed=args.extractor_seed)
    report = evaluate_checkpoint(
        args.checkpoint, args.manifest, extractor, eval_seed=args.seed if args.seed is not None else 0
    )
    print(report.to_json(), end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
        _write_lock(report.config, out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lineagegan",
        description="Graph-conditioned image-to-image translation over lineage corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="generate a synthetic lineage corpus")
    p_dataset.add_argument("--out", required=True, help="output corpus directory")
    p_dataset.add_argument("--config", help="JSON config file")
    p_dataset.add_argument("--families", type=int, help="number of families")
    p_dataset.add_argument("--image-size", type=int, dest="image_size")
    p_dataset.add_argument("--seed", type=int)
    p_dataset.add_argument("--blend-mode", dest="blend_mode", choices=["alpha", "per-channel-alpha"])
    p_dataset.set_defaults(func=cmd_dataset)

    p_validate = sub.add_parser("validate", help="validate a manifest and print ancestry histograms")
    p_validate.add_argument("manifest")
    p_validate.add_argument("--out", help="directory for the CSV histogram dump")
    p_validate.set_defaults(func=cmd_validate)

    p_train = sub.add_parser("train", help="train on a corpus manifest")
    p_train.add_argument("manifest")
    p_train.add_argument("--out", required=True, help="run directory (checkpoint, metrics, lock)")
    p_train.add_argument("--config", help="JSON config file mirroring the train config")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p_train.add_argument("--image-size", type=int, dest="image_size")
    p_train.add_argument("--ablation", action="store_true", help="train with random adjacencies")
    p_train.add_argument("--quiet", action="store_true", help="suppress per-step progress lines")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="reconstruct one family's child image")
    p_infer.add_argument("checkpoint")
    p_infer.add_argument("manifest")
    p_infer.add_argument("family_id", help="child node id of an eligible family")
    p_infer.add_argument("out_png")
    p_infer.add_argument("--seed", type=int)
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("manifest")
    p_eval.add_argument("--out", help="directory for metrics.json")
    p_eval.add_argument("--seed", type=int, help="evaluation noise seed")
    p_eval.add_argument(
        "--extractor-seed", type=int, dest="extractor_seed", default=DEFAULT_EXTRACTOR_SEED
    )
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ManifestError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
