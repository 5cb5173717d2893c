import csv

import numpy as np
import pytest

from pqvae.data import Manifest, batch_iterator, read_checkpoint
from pqvae.model import ModelConfig
from pqvae.quantize import IdentityQuantizer
from pqvae.tensorcore import NonFiniteError, ShapeError, Tensor, backward
from pqvae.train import (
    LOG_COLUMNS,
    LossWeights,
    OptimConfig,
    QuantizerConfig,
    ScheduleConfig,
    Trainer,
    TrainConfig,
    lambda_schedule,
    loss_dual,
    run_training,
)


def small_cfg(manifest="", **kw):
    base = dict(model=ModelConfig(feature_dim=4, hidden_dim=8, embed_dim=6, downsample=2, n_residual_units=1),
                quantizer=QuantizerConfig(kind="pq", sizes=(4, 4)), optim=OptimConfig(lr=1e-3),
                total_steps=20, batch_frames=64, window_frames=16, eval_every=5, manifest=str(manifest))
    base.update(kw)
    return TrainConfig(**base)


def T(v):
    return Tensor(np.array(v, dtype=float), requires_grad=True)


class TestLoss:
    def test_perfect_reconstruction_is_zero(self):
        X = np.ones((4, 2))
        total, _ = loss_dual(X, T(X), T(X), T(np.ones((1, 3))), T(np.ones((1, 3))), LossWeights(), 1.0)
        assert total.item() == 0.0

    def test_scalar_case(self):
        total, terms = loss_dual(np.array([[1.0]]), T([[0.0]]), T([[0.5]]), T([[2.0]]), T([[2.0]]),
                                 LossWeights(alpha=3.7), 1.0)
        assert total.item() == pytest.approx(1.25, abs=1e-15)
        assert terms["recon_q_mse"] == 1.0 and terms["recon_e_mse"] == 0.25

    def test_lambda_zero_drops_dual_term(self):
        total, _ = loss_dual(np.array([[1.0]]), T([[0.0]]), T([[0.5]]), T([[2.0]]), T([[2.0]]), LossWeights(), 0.0)
        assert total.item() == 1.0

    def test_commit_nonnegative_zero_iff_equal(self):
        X = np.zeros((2, 1))
        _, t = loss_dual(X, T(X), None, T([[1.0, 2.0]]), T([[1.0, 2.0]]), LossWeights(), 0.0)
        assert t["commit"] == 0.0
        _, t = loss_dual(X, T(X), None, T([[1.0, 2.0]]), T([[1.0, 2.5]]), LossWeights(), 0.0)
        assert t["commit"] > 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss_dual(np.zeros((2, 1)), T(np.zeros((3, 1))), None, T([[0.0]]), T([[0.0]]), LossWeights(), 0.0)

    def test_codebook_term_carries_no_gradient_under_ema(self):
        E, Z = T([[1.0, -1.0]]), T([[0.0, 0.0]])
        X = np.zeros((1, 1))
        total, terms = loss_dual(X, T(X), None, E, Z, LossWeights(alpha=0.0, beta=5.0), 0.0, ema=True)
        assert terms["codebook_term"] == 1.0
        backward(total)
        assert Z.grad is None or not Z.grad.any()
        E2, Z2 = T([[1.0, -1.0]]), T([[0.0, 0.0]])
        total, _ = loss_dual(X, T(X), None, E2, Z2, LossWeights(alpha=0.0, beta=5.0), 0.0, ema=False)
        backward(total)
        np.testing.assert_allclose(Z2.grad, [[-5.0, 5.0]])


class TestSchedule:
    @pytest.mark.parametrize("step,lam", [(0, 1.0), (20000, 1.0), (50000, 0.55), (80000, 0.1), (100000, 0.1)])
    def test_defaults(self, step, lam):
        assert lambda_schedule(step, ScheduleConfig()) == pytest.approx(lam, abs=1e-12)

    def test_non_increasing(self):
        vals = [lambda_schedule(s, ScheduleConfig()) for s in range(0, 100001, 500)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_desk_breakpoints_follow_run_length(self):
        s = TrainConfig(total_steps=1000).schedule()
        assert (s.start_step, s.end_step) == (200, 800)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ScheduleConfig(start_step=10, end_step=5)
        with pytest.raises(ValueError):
            lambda_schedule(-1, ScheduleConfig())


class TestTrainStep:
    def test_overfit_one_batch(self, tiny_corpus):
        cfg = small_cfg(tiny_corpus, quantizer=QuantizerConfig(kind="none", sizes=()),
                        loss=LossWeights(alpha=0.0), optim=OptimConfig(lr=3e-3))
        tr = Trainer(cfg)
        assert isinstance(tr.quantizer, IdentityQuantizer)
        batch = next(batch_iterator(Manifest.read(tiny_corpus), 64, 0, 16))
        losses = [tr.train_step(batch)["loss_total"] for _ in range(100)]
        assert losses[-1] < 0.5 * losses[0]

    def test_bitwise_repeatable(self, tiny_corpus):
        def trajectory():
            tr = Trainer(small_cfg(tiny_corpus))
            it = batch_iterator(Manifest.read(tiny_corpus), 64, 0, 16)
            return [tr.train_step(next(it))["loss_total"] for _ in range(15)]

        assert trajectory() == trajectory()

    def test_ema_mode_ignores_beta(self, tiny_corpus):
        batch = next(batch_iterator(Manifest.read(tiny_corpus), 64, 0, 16))
        grads = []
        for beta in (0.0, 10.0):
            tr = Trainer(small_cfg(tiny_corpus, loss=LossWeights(beta=beta)))
            tr.train_step(batch)
            grads.append([p.grad.copy() for p in tr.model.parameters()])
        assert all(np.array_equal(a, b) for a, b in zip(*grads))

    def test_codebooks_move_and_usage_reported(self, tiny_corpus):
        tr = Trainer(small_cfg(tiny_corpus))
        it = batch_iterator(Manifest.read(tiny_corpus), 64, 0, 16)
        tr.train_step(next(it))
        before = [b.codewords.copy() for b in tr.quantizer.books]
        terms = tr.train_step(next(it))
        assert 1 <= terms["batch_usage"] <= 16
        assert any(not np.array_equal(a, b.codewords) for a, b in zip(before, tr.quantizer.books))

    def test_non_finite_loss_aborts(self, tiny_corpus):
        tr = Trainer(small_cfg(tiny_corpus))
        batch = next(batch_iterator(Manifest.read(tiny_corpus), 64, 0, 16))
        tr.train_step(batch)
        tr.model.params["dec.out.b"].data[:] = np.inf
        with pytest.raises(NonFiniteError, match="recon_q_mse"):
            tr.train_step(batch)


def read_log(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestRunTraining:
    def test_log_and_checkpoint(self, tiny_corpus, tmp_path):
        ckpt = run_training(small_cfg(tiny_corpus), tmp_path)
        rows = read_log(tmp_path / "train_log.csv")
        assert rows[0] == LOG_COLUMNS
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 21))
        evals = [r for r in rows[1:] if r[8]]
        assert [int(r[0]) for r in evals] == [5, 10, 15, 20]
        state = read_checkpoint(ckpt)
        assert int(state["step"][0]) == 20 and "config" in state

    def test_zero_steps(self, tiny_corpus, tmp_path):
        ckpt = run_training(small_cfg(tiny_corpus, total_steps=0), tmp_path)
        assert read_log(tmp_path / "train_log.csv") == [LOG_COLUMNS]
        assert int(read_checkpoint(ckpt)["step"][0]) == 0

    def test_resume_continues_numbering(self, tiny_corpus, tmp_path):
        run_training(small_cfg(tiny_corpus, total_steps=10), tmp_path)
        run_training(small_cfg(tiny_corpus, total_steps=20), tmp_path, resume=True)
        steps = [int(r[0]) for r in read_log(tmp_path / "train_log.csv")[1:]]
        assert steps == list(range(1, 21))
        assert int(read_checkpoint(tmp_path / "checkpoint.pqck")["step"][0]) == 20

    def test_checkpoint_roundtrip(self, tiny_corpus, tmp_path):
        ckpt = run_training(small_cfg(tiny_corpus, total_steps=5), tmp_path)
        tr = Trainer.from_checkpoint(ckpt)
        assert tr.step == 5 and tr.cfg.quantizer.sizes == (4, 4)
        for name, value in read_checkpoint(ckpt).items():
            if name.startswith("model."):
                assert np.array_equal(tr.model.params[name[6:]].data, value)

    def test_repeat_runs_identical_bytes(self, tiny_corpus, tmp_path):
        for d in ("a", "b"):
            run_training(small_cfg(tiny_corpus), tmp_path / d)
        for name in ("train_log.csv", "checkpoint.pqck"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.parametrize("kind,sizes,extra", [("vq", (8,), {}), ("rvq", (4, 4), {}),
                                                   ("fsq", (3, 5), {"bottleneck_dim": 1})])
    def test_other_quantizers_run(self, tiny_corpus, tmp_path, kind, sizes, extra):
        model = ModelConfig(feature_dim=4, hidden_dim=8, embed_dim=6, downsample=2, n_residual_units=1, **extra)
        run_training(small_cfg(tiny_corpus, model=model, quantizer=QuantizerConfig(kind=kind, sizes=sizes),
                               total_steps=6), tmp_path)
        assert len(read_log(tmp_path / "train_log.csv")) == 7
