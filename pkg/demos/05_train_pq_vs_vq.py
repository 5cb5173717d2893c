"""
Index collapse in a short run
=============================

Train the same autoencoder with a 1024-code VQ and with a [16, 8, 8]
product quantizer (also 1024 composed codes) and compare how much of each
codebook the held-out stream touches. A few hundred steps is enough to
see the gap open.
"""

import tempfile
from pathlib import Path

from pqvae.data import Manifest, SynthConfig, gen_synthetic_corpus
from pqvae.model import ModelConfig
from pqvae.train import OptimConfig, QuantizerConfig, TrainConfig, Trainer, batch_iterator

STEPS = 400

tmp = tempfile.TemporaryDirectory()
gen_synthetic_corpus(SynthConfig(feature_dim=8, frames_per_state=2.0, noise_std=2.0, n_sequences=300,
                                 eval_fraction=0.3), tmp.name)
manifest = Manifest.read(Path(tmp.name) / "manifest.tsv")
held_out = manifest.load("eval")

for kind, sizes, bottleneck in (("vq", (1024,), None), ("pq", (16, 8, 8), 2)):
    cfg = TrainConfig(model=ModelConfig(feature_dim=8, bottleneck_dim=bottleneck),
                      quantizer=QuantizerConfig(kind=kind, sizes=sizes),
                      optim=OptimConfig(lr=1e-3), total_steps=STEPS)
    trainer = Trainer(cfg)
    batches = batch_iterator(manifest, cfg.batch_frames, cfg.seed, cfg.window())
    for _ in range(STEPS):
        trainer.train_step(next(batches))
    r = trainer.evaluate(held_out)
    print(f"{kind} {list(sizes)}: usage {r.usage}/1024 ({r.usage / 1024:.0%})  "
          f"perplexity {r.perplexity:.1f}  rmse {r.rmse:.3f}")
    if r.per_subbook_usage and len(r.per_subbook_usage) > 1:
        print("   per book usage", r.per_subbook_usage,
              "perplexity", [round(p, 1) for p in r.per_subbook_perplexity])
