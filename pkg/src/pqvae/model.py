"""
Frame-stacked MLP autoencoder with an optional per-subspace bottleneck.

Every token is built from ``downsample`` consecutive frames, so the network
is token-local: inputs are flat ``[T, feature_dim]`` frame matrices with
``T`` a multiple of ``downsample``, and any batch of windows can simply be
concatenated along time.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .quantize import IdentityQuantizer, QuantizeResult, Quantizer, near_equal_split
from .tensorcore import ShapeError, Tensor, add, affine, as_tensor, concat, elu, reshape


@dataclass
class ModelConfig:
    feature_dim: int = 16
    hidden_dim: int = 64
    embed_dim: int = 24
    downsample: int = 4
    n_residual_units: int = 2
    bottleneck_dim: int | None = None
    n_subspaces: int = 1

    def __post_init__(self):
        for name in ("feature_dim", "hidden_dim", "embed_dim", "downsample", "n_residual_units",
                     "n_subspaces"):
            if getattr(self, name) < (0 if name == "n_residual_units" else 1):
                raise ValueError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.bottleneck_dim is not None and self.bottleneck_dim < 1:
            raise ValueError(f"model.bottleneck_dim must be >= 1 or none, got {self.bottleneck_dim}")
        if self.embed_dim < self.n_subspaces:
            raise ValueError(f"embed_dim {self.embed_dim} cannot be split into {self.n_subspaces} subspaces")

    @property
    def sub_dims(self) -> list[int]:
        return near_equal_split(self.embed_dim, self.n_subspaces)

    @property
    def code_sub_dims(self) -> list[int]:
        """Chunk widths seen by the quantizer."""
        if self.bottleneck_dim is None:
            return self.sub_dims
        return [self.bottleneck_dim] * self.n_subspaces

    @property
    def code_dim(self) -> int:
        return sum(self.code_sub_dims)


@dataclass
class DualOutput:
    x_hat: Tensor
    x_tilde: Tensor | None
    E: Tensor
    Z: Tensor
    result: QuantizeResult
    token_mask: np.ndarray | None = None


def pad_frames(X: np.ndarray, downsample: int):
    """Right-pad with the last frame to a multiple of ``downsample``; mask marks real frames."""
    X = np.asarray(X, dtype=np.float64)
    T = X.shape[0]
    if T == 0:
        return X.reshape(0, X.shape[1] if X.ndim == 2 else 0), np.zeros(0, dtype=bool)
    pad = (-T) % downsample
    mask = np.ones(T + pad, dtype=bool)
    if pad:
        X = np.concatenate([X, np.repeat(X[-1:], pad, axis=0)], axis=0)
        mask[T:] = False
    return X, mask


def token_mask_from_frames(frame_mask, downsample: int) -> np.ndarray | None:
    if frame_mask is None:
        return None
    # a token counts if it holds at least one real frame
    return np.asarray(frame_mask, dtype=bool).reshape(-1, downsample).any(axis=1)


class Autoencoder:
    """Encoder, per-subspace bottleneck and a decoder shared by both branches."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        rng = np.random.default_rng(seed)
        c = cfg
        stacked = c.feature_dim * c.downsample
        self._linear(rng, "enc.in", stacked, c.hidden_dim)
        for u in range(c.n_residual_units):
            self._unit(rng, f"enc.unit{u}", c.hidden_dim)
        self._linear(rng, "enc.out", c.hidden_dim, c.embed_dim)
        if c.bottleneck_dim is not None:
            for j, d in enumerate(c.sub_dims):
                self._linear(rng, f"enc.bottleneck{j}", d, c.bottleneck_dim)
                self._linear(rng, f"dec.expand{j}", c.bottleneck_dim, d)
        self._linear(rng, "dec.in", c.embed_dim, c.hidden_dim)
        for u in range(c.n_residual_units):
            self._unit(rng, f"dec.unit{u}", c.hidden_dim)
        self._linear(rng, "dec.out", c.hidden_dim, stacked)

    def _linear(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        self.params[f"{name}.W"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    def _unit(self, rng, name: str, width: int) -> None:
        for part in ("conv", "res1", "res2"):
            self._linear(rng, f"{name}.{part}", width, width)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- building blocks --------------------------------------------------------
    def _aff(self, x: Tensor, name: str) -> Tensor:
        return affine(x, self.params[f"{name}.W"], self.params[f"{name}.b"])

    def _apply_unit(self, h: Tensor, name: str) -> Tensor:
        a = self._aff(h, f"{name}.conv")
        r = self._aff(elu(self._aff(a, f"{name}.res1")), f"{name}.res2")
        return elu(add(a, r))

    def _stack(self, h: Tensor, prefix: str) -> Tensor:
        h = elu(self._aff(h, f"{prefix}.in"))
        for u in range(self.cfg.n_residual_units):
            h = self._apply_unit(h, f"{prefix}.unit{u}")
        return h

    # -- public API -------------------------------------------------------------
    def encode(self, X) -> Tensor:
        """[T, feature_dim] frames -> [T / downsample, code_dim] embeddings."""
        X = as_tensor(X)
        c = self.cfg
        if X.ndim != 2 or X.shape[1] != c.feature_dim:
            raise ShapeError(f"encode expects [T, {c.feature_dim}] frames, got {X.shape}")
        if X.shape[0] % c.downsample:
            raise ShapeError(f"T={X.shape[0]} is not a multiple of downsample={c.downsample}; pad first")
        h = reshape(X, (X.shape[0] // c.downsample, c.feature_dim * c.downsample))
        E = self._aff(self._stack(h, "enc"), "enc.out")
        if c.bottleneck_dim is not None:
            bounds = np.cumsum([0] + c.sub_dims)
            E = concat([self._aff(E[:, bounds[j]:bounds[j + 1]], f"enc.bottleneck{j}")
                        for j in range(c.n_subspaces)], axis=1)
        return E

    def decode(self, Z) -> Tensor:
        """[T', code_dim] -> [T' * downsample, feature_dim] frames."""
        Z = as_tensor(Z)
        c = self.cfg
        if Z.ndim != 2 or Z.shape[1] != c.code_dim:
            raise ShapeError(f"decode expects [T', {c.code_dim}] input, got {Z.shape}")
        if c.bottleneck_dim is not None:
            bounds = np.cumsum([0] + c.code_sub_dims)
            Z = concat([self._aff(Z[:, bounds[j]:bounds[j + 1]], f"dec.expand{j}")
                        for j in range(c.n_subspaces)], axis=1)
        y = self._aff(self._stack(Z, "dec"), "dec.out")
        return reshape(y, (Z.shape[0] * c.downsample, c.feature_dim))

    def forward_dual(self, X, quantizer: Quantizer | None = None, frame_mask=None,
                     dual: bool = True) -> DualOutput:
        """Encode, quantize and decode both the quantized and the continuous sequence."""
        quantizer = quantizer or IdentityQuantizer()
        E = self.encode(X)
        tmask = token_mask_from_frames(frame_mask, self.cfg.downsample)
        result = quantizer(E, tmask)
        Z = result.quantized
        x_hat = self.decode(Z)
        x_tilde = self.decode(E) if dual else None
        return DualOutput(x_hat, x_tilde, E, Z, result, tmask)
