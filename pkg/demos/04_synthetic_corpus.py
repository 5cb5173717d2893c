"""
The synthetic corpus
====================

Frames come from a Markov chain over hidden states with geometric dwell
times. Each state emits a fixed smooth envelope plus Gaussian noise.
"""

import tempfile
from pathlib import Path

import numpy as np

from pqvae.data import Manifest, SynthConfig, batch_iterator, gen_synthetic_corpus, synth_sequences

cfg = SynthConfig(n_states=8, feature_dim=6, n_sequences=4, seq_len_min=30, seq_len_max=40, noise_std=0.0)
frames, paths = synth_sequences(cfg)
print("state path of the first sequence:")
print(paths[0])
# with noise_std=0 a state always emits exactly its envelope
x, s = frames[0], paths[0]
print("one distinct frame per state:", all(len(np.unique(x[s == k], axis=0)) == 1 for k in np.unique(s)))

with tempfile.TemporaryDirectory() as tmp:
    manifest = gen_synthetic_corpus(SynthConfig(n_sequences=20, seed=4), tmp)
    print((Path(tmp) / "manifest.tsv").read_text().splitlines()[:3])
    batches = batch_iterator(Manifest.read(Path(tmp) / "manifest.tsv"), batch_frames=256, seed=0)
    b = next(batches)
    print("batch frames", b.frames.shape, "from sequences", b.sequences)
