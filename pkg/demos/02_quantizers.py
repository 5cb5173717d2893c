"""
Four ways to discretise a vector
================================

VQ, product quantization, residual quantization and FSQ on the same random
embeddings, all with 4096 possible codes.
"""

import numpy as np

from pqvae.quantize import (FiniteScalarQuantizer, ProductQuantizer, ResidualQuantizer, VectorQuantizer,
                            compose_codebook, compose_index, decompose_index)
from pqvae.tensorcore import Tensor

rng = np.random.default_rng(1)
E = rng.standard_normal((20000, 3))

quantizers = {
    "vq  [4096]": VectorQuantizer(4096, 3),
    "pq  [16,16,16]": ProductQuantizer((16, 16, 16), (1, 1, 1)),
    "rvq [16,16,16]": ResidualQuantizer((16, 16, 16), 3),
    "fsq [16,16,16]": FiniteScalarQuantizer((16, 16, 16)),
}
for name, q in quantizers.items():
    q.initialize(E[:5000], rng)
    res = q(Tensor(E))
    err = np.sqrt(np.mean((res.quantized.data - E) ** 2))
    print(f"{name}: distinct codes {len(np.unique(res.composed_index)):5d}  rmse {err:.4f}")

# PQ never needs the 4096-row table, but it is the same thing as VQ over it.
pq = quantizers["pq  [16,16,16]"]
table = compose_codebook(pq.books)
res = pq(Tensor(E[:5]))
print("composed table", table.shape)
print("pq rows equal table rows:", np.array_equal(res.quantized.data, table[res.composed_index]))

# Mixed radix: the first book is the least significant digit.
print(compose_index([3, 5], [16, 16]), decompose_index(83, [16, 16]))
