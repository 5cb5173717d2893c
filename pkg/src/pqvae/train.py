"""
Dual-decoding loss, lambda schedule, training loop, evaluation and checkpoints.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    Manifest,
    batch_iterator,
    read_checkpoint,
    tensor_to_text,
    text_to_tensor,
    write_checkpoint,
)
from .model import Autoencoder, ModelConfig, pad_frames, token_mask_from_frames
from .quantize import (
    Codebook,
    FiniteScalarQuantizer,
    IdentityQuantizer,
    MetricsReport,
    ProductQuantizer,
    Quantizer,
    ResidualQuantizer,
    VectorQuantizer,
    codebook_usage,
    evaluate_indices,
    masked_mse,
)
from .tensorcore import (
    AdamW,
    AdamWHyper,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    backward,
    mul,
    no_grad,
    stop_gradient,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "loss_total", "recon_q_mse", "recon_e_mse", "commit", "codebook_term",
               "lambda", "batch_usage", "eval_usage", "eval_perplexity", "eval_rmse"]
CHECKPOINT_NAME = "checkpoint.pqck"
LOG_NAME = "train_log.csv"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
@dataclass
class ScheduleConfig:
    start_value: float = 1.0
    end_value: float = 0.1
    start_step: int | None = 20000
    end_step: int | None = 80000

    def __post_init__(self):
        if self.start_value < 0 or self.end_value < 0:
            raise ValueError("lambda schedule values must be >= 0")
        if self.start_step is not None and self.end_step is not None and self.start_step > self.end_step:
            raise ValueError(f"schedule start_step {self.start_step} > end_step {self.end_step}")


def lambda_schedule(step: int, cfg: ScheduleConfig | None = None) -> float:
    """Constant, then linear ramp between the two breakpoints, then constant."""
    cfg = cfg or ScheduleConfig()
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.start_step is None or cfg.end_step is None:
        raise ValueError("schedule breakpoints are unresolved; use TrainConfig.schedule()")
    if step <= cfg.start_step:
        return float(cfg.start_value)
    if step >= cfg.end_step:
        return float(cfg.end_value)
    frac = (step - cfg.start_step) / (cfg.end_step - cfg.start_step)
    return float(cfg.start_value + frac * (cfg.end_value - cfg.start_value))


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    dual_decoding: bool = False
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(start_step=None, end_step=None))

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights alpha and beta must be >= 0")


@dataclass
class QuantizerConfig:
    kind: str = "pq"
    sizes: tuple[int, ...] = (16, 16, 16)
    decay: float | None = None
    ema: bool = True
    dead_restart: float = 0.0

    def __post_init__(self):
        self.kind = self.kind.lower()
        self.sizes = tuple(int(n) for n in self.sizes)
        if self.kind not in QUANTIZER_KINDS:
            raise ValueError(f"quantizer.kind must be one of {sorted(QUANTIZER_KINDS)}, got {self.kind!r}")
        if self.kind != "none" and (not self.sizes or min(self.sizes) < 2):
            raise ValueError(f"quantizer.sizes must be a non-empty list of values >= 2, got {self.sizes}")
        if self.kind == "vq" and len(self.sizes) != 1:
            raise ValueError(f"vq takes a single codebook size, got {self.sizes}")
        if self.decay is not None and not 0.0 < self.decay < 1.0:
            raise ValueError(f"quantizer.decay must lie in (0, 1), got {self.decay}")

    @property
    def n_subspaces(self) -> int:
        return len(self.sizes) if self.kind in ("pq", "fsq") else 1

    @property
    def resolved_decay(self) -> float:
        if self.decay is not None:
            return self.decay
        return 0.999 if self.kind == "vq" else 0.9


QUANTIZER_KINDS = {"none", "vq", "pq", "rvq", "fsq"}


@dataclass
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    total_steps: int = 500
    batch_frames: int = 1024
    window_frames: int = 64
    seed: int = 0
    eval_every: int = 100
    checkpoint_every: int = 0
    manifest: str = ""

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("train.total_steps must be >= 0")
        if self.window_frames < 1 or self.batch_frames < 1:
            raise ValueError("train.window_frames and train.batch_frames must be positive")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("train.eval_every and train.checkpoint_every must be >= 0")

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(m.feature_dim, m.hidden_dim, m.embed_dim, m.downsample, m.n_residual_units,
                           m.bottleneck_dim, self.quantizer.n_subspaces)

    def schedule(self) -> ScheduleConfig:
        """Lambda breakpoints; unset steps default to 20% / 80% of the run."""
        s = self.loss.schedule
        start = s.start_step if s.start_step is not None else int(round(0.2 * self.total_steps))
        end = s.end_step if s.end_step is not None else int(round(0.8 * self.total_steps))
        return ScheduleConfig(s.start_value, s.end_value, start, max(start, end))

    def window(self) -> int:
        ds = self.model.downsample
        return ((self.window_frames + ds - 1) // ds) * ds


def build_quantizer(qcfg: QuantizerConfig, mcfg: ModelConfig) -> Quantizer:
    kind = qcfg.kind
    if kind == "none":
        return IdentityQuantizer()
    decay = qcfg.resolved_decay
    if kind == "vq":
        return VectorQuantizer(qcfg.sizes[0], mcfg.code_dim, decay=decay, ema=qcfg.ema)
    if kind == "pq":
        return ProductQuantizer(qcfg.sizes, mcfg.code_sub_dims, decay=decay, ema=qcfg.ema)
    if kind == "rvq":
        return ResidualQuantizer(qcfg.sizes, mcfg.code_dim, decay=decay, ema=qcfg.ema)
    if mcfg.code_dim != len(qcfg.sizes):
        raise ValueError(f"fsq with {len(qcfg.sizes)} levels needs a {len(qcfg.sizes)}-dim code; "
                         f"model gives {mcfg.code_dim} (set embed_dim or bottleneck_dim = 1)")
    return FiniteScalarQuantizer(qcfg.sizes)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------
def _frame_mse(a: Tensor, b: Tensor, mask) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"reconstruction shape {b.shape} does not match target {a.shape}")
    return masked_mse(a, b, mask)


def loss_dual(X, x_hat: Tensor, x_tilde: Tensor | None, E: Tensor, Z: Tensor | None,
              weights: LossWeights, lam: float, frame_mask=None, token_mask=None, ema: bool = True):
    """Reconstruction from Z, lambda-weighted reconstruction from E, and the
    commitment / codebook terms, all as per-element means.

    ``Z`` is the selected codewords before straight-through (``None`` for
    quantizers without learnable codebooks). With ``ema`` the codebook term
    is reported but left out of the total.
    Returns ``(total, terms)`` where ``terms`` holds plain floats.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    recon_q = _frame_mse(X, x_hat, frame_mask)
    total = recon_q
    recon_e = None
    if x_tilde is not None:
        recon_e = _frame_mse(X, x_tilde, frame_mask)
        if lam:
            total = add(total, mul(recon_e, lam))
    commit = codebook = None
    if Z is not None:
        if E.shape != Z.shape:
            raise ShapeError(f"E {E.shape} and Z {Z.shape} differ")
        commit = masked_mse(E, stop_gradient(Z), token_mask)
        codebook = masked_mse(stop_gradient(E), Z, token_mask)
        if weights.alpha:
            total = add(total, mul(commit, weights.alpha))
        if not ema and weights.beta:
            total = add(total, mul(codebook, weights.beta))
    terms = {
        "loss_total": total.item(),
        "recon_q_mse": recon_q.item(),
        "recon_e_mse": recon_e.item() if recon_e is not None else 0.0,
        "commit": commit.item() if commit is not None else 0.0,
        "codebook_term": codebook.item() if codebook is not None else 0.0,
        "lambda": float(lam),
    }
    return total, terms


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def evaluate(model: Autoencoder, quantizer: Quantizer, sequences, chunk_tokens: int = 4096) -> MetricsReport:
    """Usage, perplexity and RMSE over every frame of ``sequences``."""
    ds = model.cfg.downsample
    padded, masks = zip(*(pad_frames(s, ds) for s in sequences)) if len(sequences) else ((), ())
    if not padded or sum(m.sum() for m in masks) == 0:
        raise ValueError("evaluation set has no frames")
    X = np.concatenate(padded)
    mask = np.concatenate(masks)
    if X.shape[1] != model.cfg.feature_dim:
        raise ShapeError(f"evaluation features have {X.shape[1]} dims, model expects {model.cfg.feature_dim}")
    sse = 0.0
    indices = []
    step = chunk_tokens * ds
    with no_grad():
        for start in range(0, X.shape[0], step):
            xb, mb = X[start:start + step], mask[start:start + step]
            E = model.encode(xb)
            res = quantizer(E)
            x_hat = model.decode(res.quantized).data
            sse += float((((x_hat - xb) ** 2) * mb[:, None]).sum())
            indices.append(res.sub_indices[token_mask_from_frames(mb, ds)])
    rmse = math.sqrt(sse / (mask.sum() * X.shape[1]))
    sub_idx = np.concatenate(indices)
    usage, ppl, sub_u, sub_p = evaluate_indices(sub_idx, quantizer.sub_sizes)
    return MetricsReport(usage, ppl, rmse, int(sub_idx.shape[0]), sub_u, sub_p)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------
class Trainer:
    """Owns the model, quantizer and optimizer for one run."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.mcfg = cfg.model_config()
        self.model = Autoencoder(self.mcfg, seed=cfg.seed)
        self.quantizer = build_quantizer(cfg.quantizer, self.mcfg)
        self.rng = np.random.default_rng([cfg.seed, 99])
        self.step = 0
        self.sched = cfg.schedule()
        self._make_optimizer()

    def _make_optimizer(self):
        o = self.cfg.optim
        self.optimizer = AdamW(self.model.parameters() + self.quantizer.parameters(),
                               AdamWHyper(o.lr, o.beta1, o.beta2, o.eps, o.weight_decay))

    @property
    def ema(self) -> bool:
        return self.quantizer.ema

    def lam(self, step: int) -> float:
        return lambda_schedule(step, self.sched) if self.cfg.loss.dual_decoding else 0.0

    def train_step(self, batch) -> dict:
        """Forward both branches, AdamW on the network, EMA on the codebooks."""
        X = np.asarray(batch.frames, dtype=np.float64)
        fmask = getattr(batch, "mask", None)
        tmask = token_mask_from_frames(fmask, self.mcfg.downsample)
        if not self.quantizer.initialized:
            with no_grad():
                E0 = self.model.encode(X).data
            self.quantizer.initialize(E0 if tmask is None else E0[tmask], self.rng)
            if not self.ema:
                self._make_optimizer()
        lam = self.lam(self.step)
        out = self.model.forward_dual(X, self.quantizer, frame_mask=fmask,
                                      dual=self.cfg.loss.dual_decoding)
        total, terms = loss_dual(X, out.x_hat, out.x_tilde, out.E, out.result.raw, self.cfg.loss, lam,
                                 frame_mask=fmask, token_mask=tmask, ema=self.ema)
        if not np.isfinite(total.data):
            raise NonFiniteError(f"non-finite loss at step {self.step}: {terms}")
        self.optimizer.zero_grad()
        backward(total)
        self.optimizer.step()
        self.quantizer.update(out.result)
        if self.cfg.quantizer.dead_restart > 0 and self.quantizer.books:
            E = out.E.data if tmask is None else out.E.data[tmask]
            self.quantizer.restart_dead(E, self.rng, self.cfg.quantizer.dead_restart)
        self.step += 1
        terms["step"] = self.step
        if self.quantizer.sub_sizes:
            comp = out.result.composed_index if tmask is None else out.result.composed_index[tmask]
            terms["batch_usage"] = codebook_usage(comp, self.quantizer.total_size)
        else:
            terms["batch_usage"] = None
        return terms

    def evaluate(self, sequences) -> MetricsReport:
        return evaluate(self.model, self.quantizer, sequences)

    # -- checkpoints --------------------------------------------------------
    def state_dict(self) -> dict:
        from .config import dump_config

        state = {"config": text_to_tensor(dump_config(train=self.cfg)),
                 "step": np.array([self.step])}
        for name, p in self.model.params.items():
            state[f"model.{name}"] = p.data
        state["quant.initialized"] = np.array([1.0 if self.quantizer.initialized else 0.0])
        for j, book in enumerate(self.quantizer.books):
            state[f"quant.{j}.codewords"] = book.codewords
            state[f"quant.{j}.ema_count"] = book.ema_count
            state[f"quant.{j}.ema_sum"] = book.ema_sum
        st = self.optimizer.state
        state["optim.step"] = np.array([st.step])
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            state[f"optim.m.{i}"] = m
            state[f"optim.v.{i}"] = v
        return state

    def save(self, path) -> None:
        write_checkpoint(path, self.state_dict())

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        from .config import parse_config

        state = read_checkpoint(path)
        if "config" not in state:
            raise ValueError(f"{path}: checkpoint has no embedded config")
        _, cfg = parse_config(tensor_to_text(state["config"]))
        trainer = cls(cfg)
        trainer.load_state_dict(state)
        return trainer

    def load_state_dict(self, state) -> None:
        self.step = int(state["step"][0])
        for name, p in self.model.params.items():
            value = np.asarray(state[f"model.{name}"], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ShapeError(f"checkpoint tensor model.{name} has shape {value.shape}, expected {p.data.shape}")
            p.data[...] = value
        q = self.quantizer
        q.initialized = bool(state["quant.initialized"][0])
        for j, book in enumerate(q.books):
            q.books[j] = Codebook(np.asarray(state[f"quant.{j}.codewords"], dtype=np.float64),
                                  np.asarray(state[f"quant.{j}.ema_count"], dtype=np.float64),
                                  np.asarray(state[f"quant.{j}.ema_sum"], dtype=np.float64),
                                  decay=book.decay)
        q._tables = None
        self._make_optimizer()
        st = self.optimizer.state
        st.step = int(state["optim.step"][0])
        for i in range(len(st.m)):
            st.m[i][...] = state[f"optim.m.{i}"]
            st.v[i][...] = state[f"optim.v.{i}"]


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------
def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _truncate_log(path: Path, last_step: int) -> None:
    rows = path.read_text().splitlines(keepends=True)
    kept = rows[:1] + [r for r in rows[1:] if r.strip() and int(r.split(",", 1)[0]) <= last_step]
    path.write_text("".join(kept))


def run_training(cfg: TrainConfig, out_dir, resume: bool = False, manifest: Manifest | None = None,
                 progress=None) -> Path:
    """Train for ``cfg.total_steps`` steps, logging to CSV and checkpointing under ``out_dir``.

    Returns the checkpoint path. With ``resume`` an existing checkpoint in
    ``out_dir`` is continued; a finished run returns immediately.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    log_path = out / LOG_NAME
    if manifest is None:
        if not cfg.manifest:
            raise ValueError("train.manifest is not set")
        manifest = Manifest.read(cfg.manifest)

    if resume and ckpt.exists():
        trainer = Trainer.from_checkpoint(ckpt)
        trainer.cfg.manifest = cfg.manifest
        if trainer.step >= cfg.total_steps:
            log.info("checkpoint already at step %d of %d; nothing to do", trainer.step, cfg.total_steps)
            return ckpt
        if cfg.total_steps != trainer.cfg.total_steps:
            trainer.cfg.total_steps = cfg.total_steps
        if log_path.exists():
            _truncate_log(log_path, trainer.step)
        else:
            log_path.write_text(",".join(LOG_COLUMNS) + "\n")
    else:
        trainer = Trainer(cfg)
        log_path.write_text(",".join(LOG_COLUMNS) + "\n")

    eval_seqs = manifest.load("eval")
    if cfg.total_steps == 0:
        trainer.save(ckpt)
        return ckpt

    batches = batch_iterator(manifest, cfg.batch_frames, cfg.seed, cfg.window())
    for _ in range(trainer.step):
        next(batches)

    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        while trainer.step < cfg.total_steps:
            terms = trainer.train_step(next(batches))
            step = trainer.step
            report = None
            if eval_seqs and (step == cfg.total_steps or (cfg.eval_every and step % cfg.eval_every == 0)):
                report = trainer.evaluate(eval_seqs)
            row = [terms["step"], terms["loss_total"], terms["recon_q_mse"], terms["recon_e_mse"],
                   terms["commit"], terms["codebook_term"], terms["lambda"], terms["batch_usage"],
                   report.usage if report else None, report.perplexity if report else None,
                   report.rmse if report else None]
            writer.writerow([_fmt(v) for v in row])
            if progress is not None:
                progress(terms, report)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.total_steps:
                fh.flush()
                trainer.save(ckpt)
    trainer.save(ckpt)
    return ckpt
