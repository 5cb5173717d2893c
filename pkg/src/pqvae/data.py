"""
Synthetic feature corpus, binary feature/checkpoint containers and batching.

The corpus stands in for mel spectrograms: a first-order Markov chain over
latent states with geometric dwell times emits a smooth spectral envelope
per state plus Gaussian noise.

File layouts (all little-endian):

* feature file: ``b"PQVF"``, version u32, dim u32, frames u32, then
  ``frames * dim`` float32 values row-major.
* checkpoint: ``b"PQCK"``, version u32, count u32, then per tensor
  name length u32, utf-8 name, rank u32, dims u32 * rank, float32 payload.
* manifest: text lines ``<relative-path>\\t<train|eval>\\t<frames>``.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

FEATURE_MAGIC = b"PQVF"
CHECKPOINT_MAGIC = b"PQCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    """Corrupt or mismatched binary container."""


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------
def write_features(path, frames) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ValueError(f"feature payload must be [frames, dim], got shape {frames.shape}")
    n, dim = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, dim, n))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_features(path) -> np.ndarray:
    """Return the payload as a float32 ``[frames, dim]`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a feature header ({len(raw)} bytes)")
    magic, version, dim, n = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    expected = n * dim * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header promises {expected} "
                          f"({n} frames x {dim} dims)")
    return np.frombuffer(payload, dtype="<f4").reshape(n, dim).astype(np.float32)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
def write_checkpoint(path, tensors) -> None:
    """Write an ordered mapping of name -> array; values are stored as float32."""
    parts = [struct.pack("<4sII", CHECKPOINT_MAGIC, FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    magic, version, count = struct.unpack_from("<4sII", raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = _U32.unpack_from(raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = _U32.unpack_from(raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(raw):
                raise FormatError(f"{path}: tensor {name!r} runs past end of file")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after last tensor")
    return out


def text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str
    frames: int


class Manifest:
    def __init__(self, entries, root="."):
        self.entries = list(entries)
        self.root = Path(root)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load(self, split: str | None = None) -> list[np.ndarray]:
        entries = self.entries if split is None else self.split(split)
        return [read_features(self.root / e.path) for e in entries]

    def write(self, path) -> None:
        lines = [f"{e.path}\t{e.split}\t{e.frames}\n" for e in self.entries]
        Path(path).write_text("".join(lines))

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3 or fields[1] not in ("train", "eval"):
                raise FormatError(f"{path}:{lineno}: expected '<path>\\t<train|eval>\\t<frames>'")
            entries.append(ManifestEntry(fields[0], fields[1], int(fields[2])))
        return cls(entries, root=path.parent)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------
@dataclass
class SynthConfig:
    n_states: int = 64
    feature_dim: int = 16
    frames_per_state: float = 6.0
    n_sequences: int = 400
    seq_len_min: int = 200
    seq_len_max: int = 600
    noise_std: float = 0.3
    eval_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 2:
            raise ValueError(f"synth.n_states must be >= 2, got {self.n_states}")
        if self.seq_len_min < 1 or self.seq_len_max < self.seq_len_min:
            raise ValueError(f"bad sequence length range [{self.seq_len_min}, {self.seq_len_max}]")
        if self.frames_per_state < 1:
            raise ValueError("synth.frames_per_state must be >= 1")
        if self.n_sequences < 1 or self.feature_dim < 1:
            raise ValueError("synth.n_sequences and synth.feature_dim must be positive")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValueError("synth.eval_fraction must lie in [0, 1)")


def state_envelopes(n_states: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random vectors: a few low-frequency cosines per state."""
    n_basis = min(6, dim)
    freq = np.arange(n_basis)[:, None]
    grid = (np.arange(dim)[None, :] + 0.5) / dim
    basis = np.cos(np.pi * freq * grid)
    coef = rng.standard_normal((n_states, n_basis)) / (1.0 + np.arange(n_basis))
    env = coef @ basis
    return env / env.std(axis=1, keepdims=True).clip(1e-8)


def synth_sequences(cfg: SynthConfig):
    """In-memory corpus: (list of [T, dim] float64 frames, list of state paths)."""
    rng = np.random.default_rng(cfg.seed)
    env = state_envelopes(cfg.n_states, cfg.feature_dim, rng)
    trans = rng.dirichlet(np.full(cfg.n_states, 0.3), size=cfg.n_states)
    np.fill_diagonal(trans, 0.0)
    trans /= trans.sum(axis=1, keepdims=True)
    cum = np.cumsum(trans, axis=1)
    p_leave = 1.0 / cfg.frames_per_state
    frames, paths = [], []
    for _ in range(cfg.n_sequences):
        T = int(rng.integers(cfg.seq_len_min, cfg.seq_len_max + 1))
        states = np.empty(T, dtype=np.int64)
        s = int(rng.integers(cfg.n_states))
        t = 0
        while t < T:
            dwell = int(rng.geometric(p_leave))
            states[t:t + dwell] = s
            t += dwell
            s = int(min(np.searchsorted(cum[s], rng.random(), side="right"), cfg.n_states - 1))
        x = env[states] + cfg.noise_std * rng.standard_normal((T, cfg.feature_dim))
        frames.append(x)
        paths.append(states)
    return frames, paths


def split_assignment(n: int, eval_fraction: float, seed: int) -> list[str]:
    n_eval = int(round(n * eval_fraction))
    if eval_fraction > 0 and n >= 2:
        n_eval = max(1, n_eval)
    n_eval = min(n_eval, n - 1)
    order = np.random.default_rng([seed, 1]).permutation(n)
    split = ["train"] * n
    for i in order[:n_eval]:
        split[i] = "eval"
    return split


def gen_synthetic_corpus(cfg: SynthConfig, out_dir) -> Manifest:
    """Write one feature file per sequence plus ``manifest.tsv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    frames, _ = synth_sequences(cfg)
    split = split_assignment(len(frames), cfg.eval_fraction, cfg.seed)
    entries = []
    for i, (x, sp) in enumerate(zip(frames, split)):
        rel = f"seq_{i:05d}.pqvf"
        write_features(out / rel, x)
        entries.append(ManifestEntry(rel, sp, x.shape[0]))
    manifest = Manifest(entries, root=out)
    manifest.write(out / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------
@dataclass
class Batch:
    frames: np.ndarray   # [n_windows * window, dim] float64
    mask: np.ndarray     # [n_windows * window] bool, False on padding
    sequences: np.ndarray


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def window_of(seq: np.ndarray, window: int, rng: np.random.Generator):
    T = seq.shape[0]
    if T >= window:
        off = int(rng.integers(0, T - window + 1))
        return seq[off:off + window], np.ones(window, dtype=bool)
    pad = window - T
    frames = np.concatenate([seq, np.repeat(seq[-1:], pad, axis=0)], axis=0)
    mask = np.zeros(window, dtype=bool)
    mask[:T] = True
    return frames, mask


def batch_iterator(manifest: Manifest | list, batch_frames: int, seed: int, window_frames: int = 64,
                   split: str = "train") -> Iterator[Batch]:
    """Endless seed-deterministic stream of fixed-size batches.

    Each epoch visits every sequence once in a seeded permutation and cuts
    one window at a seeded offset from it; windows are grouped
    ``batch_frames // window_frames`` at a time (carrying across epochs).
    """
    seqs = manifest.load(split) if isinstance(manifest, Manifest) else list(manifest)
    if not seqs:
        raise ValueError(f"no '{split}' sequences to iterate over")
    per_batch = max(1, batch_frames // window_frames)
    frames, masks, ids = [], [], []
    epoch = 0
    while True:
        rng = np.random.default_rng([seed, epoch, 7])
        for i in epoch_order(len(seqs), seed, epoch):
            f, m = window_of(seqs[i], window_frames, rng)
            frames.append(f)
            masks.append(m)
            ids.append(i)
            if len(frames) == per_batch:
                yield Batch(np.concatenate(frames).astype(np.float64), np.concatenate(masks),
                            np.array(ids))
                frames, masks, ids = [], [], []
        epoch += 1
