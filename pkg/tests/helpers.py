"""Finite-difference oracles shared by the test modules."""

import numpy as np

# "criterion N: PASS|FAIL  detail" lines, printed at the end of the run
ACCEPTANCE_LINES = []


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))



class FrozenOffset:
    """Quantizer stand-in returning ``E + D`` with ``D`` fixed.

    With ``D = Z0 - E0`` taken at the base point this is the straight-through
    linearisation, so finite differences of it are the oracle for the
    straight-through gradient (the true derivative through argmin is zero).
    """

    def __init__(self, result, E0):
        from pqvae.tensorcore import Tensor

        self.result = result
        self.offset = result.quantized.data - E0
        self.raw = Tensor(result.raw.data.copy())

    def __call__(self, E, mask=None):
        import dataclasses

        from pqvae.tensorcore import Tensor, add

        return dataclasses.replace(self.result, quantized=add(E, Tensor(self.offset)), raw=self.raw)


def full_gradcheck(seed):
    """Relative error of the dual-decoding loss gradient for one random tiny config.

    Codebooks are EMA-managed (not parameters), so the check covers every
    network weight through both decoder branches and the commitment term.
    """
    from pqvae.model import Autoencoder, ModelConfig
    from pqvae.quantize import ProductQuantizer
    from pqvae.tensorcore import backward, no_grad
    from pqvae.train import LossWeights, loss_dual

    rng = np.random.default_rng(seed)
    n_sub = int(rng.integers(1, 3))
    cfg = ModelConfig(feature_dim=int(rng.integers(2, 5)), hidden_dim=int(rng.integers(4, 9)),
                      embed_dim=2 * n_sub + int(rng.integers(0, 3)), downsample=int(rng.choice([1, 2, 4])),
                      n_residual_units=int(rng.integers(0, 3)), n_subspaces=n_sub,
                      bottleneck_dim=[None, 1, 2][int(rng.integers(0, 3))])
    model = Autoencoder(cfg, seed=seed)
    for p in model.parameters():  # nonzero biases so every path is exercised
        p.data += rng.uniform(-0.3, 0.3, p.data.shape)
    q = ProductQuantizer([4] * n_sub, cfg.code_sub_dims)
    X = rng.standard_normal((cfg.downsample * 3, cfg.feature_dim))
    E0 = model.encode(X).data
    q.initialize(E0 + rng.normal(0, 0.5, E0.shape), rng)
    weights = LossWeights(alpha=float(rng.uniform(0.1, 2)), dual_decoding=True)
    lam = float(rng.uniform(0.1, 1))

    def loss(quantizer):
        out = model.forward_dual(X, quantizer)
        total, _ = loss_dual(X, out.x_hat, out.x_tilde, out.E, out.result.raw, weights, lam)
        return total

    params = model.parameters()
    assert sum(p.data.size for p in params) < 5000
    for p in params:
        p.zero_grad()
    backward(loss(q))
    analytic = [p.grad.copy() for p in params]
    with no_grad():
        frozen = FrozenOffset(q(model.encode(X)), E0)
    numeric = numeric_grad(lambda: loss(frozen).item(), [p.data for p in params])
    return rel_error(analytic, numeric)
