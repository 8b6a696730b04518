import tempfile, time, json
import numpy as np
import torch
from lineagegan import (SynthConfig, generate_corpus, ingest_manifest, eligible_families,
                        build_adjacency, TrainConfig, GeneratorConfig, Trainer)
from lineagegan.training import load_image

def corpus_l1(trainer, templates, size, eval_seed=123):
    total = 0.0
    for i, t in enumerate(templates):
        rng = np.random.default_rng((eval_seed, i))
        imgs = np.stack([load_image(p, size) for p in t.slot_image_paths])
        real = imgs[0].copy()
        imgs[0] = rng.uniform(-1, 1, imgs[0].shape)
        fake = trainer.generator.generate(imgs.astype(np.float32), build_adjacency(t), 0).numpy()
        total += np.abs(fake - real).mean()
    return total / len(templates)

t0 = time.time()
with tempfile.TemporaryDirectory() as td:
    manifest = generate_corpus(SynthConfig(n_families=8, image_size=64, seed=3), td)
    templates = eligible_families(ingest_manifest(manifest))
    cfg = TrainConfig(image_size=64, batch_size=8, max_steps=300, seed=5,
                      generator=GeneratorConfig(image_size=64, base_channels=16),
                      disc_channels=16, checkpoint_every=0)
    tr = Trainer(cfg, templates)
    base = corpus_l1(tr, templates, 64)
    print("baseline L1:", base, flush=True)
    for step in range(300):
        stats = tr.train_step()
        if (step+1) % 50 == 0:
            cur = corpus_l1(tr, templates, 64)
            print(f"step {step+1}: L1={cur:.4f} ratio={cur/base:.3f} loss_d={stats['loss_d']:.3f} fm={stats['loss_g_fm']:.3f}", flush=True)
print("elapsed", round(time.time()-t0,1), "s")
