"""
Reading codebook health
=======================

Usage counts distinct codes; perplexity is 2**entropy of the code
histogram. A collapsed codebook has both small.
"""

import numpy as np

from pqvae.quantize import codebook_perplexity, codebook_usage, compose_index

rng = np.random.default_rng(2)
N = 256

streams = {
    "uniform": rng.integers(0, N, 50000),
    "zipf": np.minimum(rng.zipf(1.5, 50000) - 1, N - 1),
    "collapsed": rng.choice([7, 11, 200], 50000, p=[0.8, 0.15, 0.05]),
}
for name, s in streams.items():
    print(f"{name:10s} usage {codebook_usage(s, N):4d}  perplexity {codebook_perplexity(s, N):8.2f}")

# Two independent sub-streams compose to the product of their perplexities;
# correlated ones fall short of it.
a = rng.integers(0, 16, 50000)
b = rng.integers(0, 16, 50000)
for label, second in (("independent", b), ("correlated", (a + rng.integers(0, 3, 50000)) % 16)):
    comp = compose_index(np.stack([a, second], 1), [16, 16])
    prod = codebook_perplexity(a, 16) * codebook_perplexity(second, 16)
    print(f"{label:11s} composed ppl {codebook_perplexity(comp, 256):7.2f}  product of parts {prod:7.2f}")
