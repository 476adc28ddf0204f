import shutil
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from django.test import SimpleTestCase

from ..exceptions import CheckpointError, ConfigError, CropError, NonFiniteError
from ..trainer import (
    CHECKPOINT_PATTERN, METRICS_COLUMNS, METRICS_FILE, EvaluationMetrics, TrainConfig, evaluate,
    fit, init_state, load_checkpoint, make_batch, save_checkpoint, train_step, truncate_after,
)
from .helpers import TEST_GRID, slow, tiny_config, toy_pieces


class TrainConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual((config.batch_size, config.learning_rate, config.grad_clip), (8, 1e-3, 5.0))
        self.assertEqual(config.crop_seconds, 20.0)

    def test_validation(self):
        with self.assertRaises(ConfigError):
            TrainConfig(batch_size=0)
        with self.assertRaises(ConfigError):
            TrainConfig(kl_warmup_fraction=1.5)
        with self.assertRaises(ConfigError):
            TrainConfig(seed=2 ** 32)
        with self.assertRaises(ConfigError):
            TrainConfig(seed=-1)
        with self.assertRaises(ConfigError):
            TrainConfig.from_dict({"batch_size": 4, "momentum": 0.9})

    def test_dict_round_trip(self):
        config = tiny_config(seed=3)
        self.assertEqual(TrainConfig.from_dict(config.to_dict()), config)


class BatchTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.pieces = toy_pieces(8)

    def test_shapes(self):
        batch = make_batch(self.pieces, tiny_config(), TEST_GRID, 0)
        self.assertEqual(batch["X"].shape, (4, 100, 80))
        self.assertEqual(batch["Y_onset"].shape, (4, 100, 88))
        self.assertEqual(batch["c_art"].shape, (4, 100))
        self.assertEqual(batch["c_art"].dtype, torch.long)

    def test_same_step_same_batch(self):
        config = tiny_config()
        first = make_batch(self.pieces, config, TEST_GRID, 7)
        second = make_batch(self.pieces, config, TEST_GRID, 7)
        for key in first:
            self.assertTrue(torch.equal(first[key], second[key]))

    def test_epochs_redraw_crops(self):
        config = tiny_config()
        # two batches per epoch: steps 0 and 2 start different epochs
        epoch0 = make_batch(self.pieces, config, TEST_GRID, 0)
        epoch1 = make_batch(self.pieces, config, TEST_GRID, 2)
        self.assertFalse(torch.equal(epoch0["X"], epoch1["X"]))

    def test_epoch_covers_every_piece(self):
        config = tiny_config()
        seen = torch.cat([make_batch(self.pieces, config, TEST_GRID, s)["X"] for s in (0, 1)])
        self.assertEqual(seen.shape[0], 8)

    def test_short_pieces_are_skipped(self):
        with tempfile.TemporaryDirectory() as out_dir, self.assertRaises(CropError):
            fit(init_state(tiny_config(crop_seconds=10.0)), self.pieces, TEST_GRID, out_dir)


class TrainStepTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.pieces = toy_pieces(4)

    def test_step_updates_parameters(self):
        state = init_state(tiny_config())
        before = [p.detach().clone() for p in state.model.parameters()]
        batch = make_batch(self.pieces, state.config, TEST_GRID, 0)
        state, losses = train_step(batch, state)
        self.assertEqual(state.step, 1)
        self.assertTrue(torch.isfinite(losses.total))
        self.assertEqual(losses.beta, 0.0)
        self.assertGreaterEqual(float(losses.kl_art), 0.0)
        self.assertFalse(losses.total.requires_grad)
        changed = [not torch.equal(a, b) for a, b in zip(before, state.model.parameters())]
        self.assertTrue(any(changed))

    def test_non_finite_batch_aborts_before_update(self):
        state = init_state(tiny_config())
        before = [p.detach().clone() for p in state.model.parameters()]
        batch = make_batch(self.pieces, state.config, TEST_GRID, 0)
        batch["X"][0, 3, 5] = float("inf")
        with self.assertRaises(NonFiniteError):
            train_step(batch, state)
        self.assertEqual(state.step, 0)
        for a, b in zip(before, state.model.parameters()):
            self.assertTrue(torch.equal(a, b))


class EvaluationTests(SimpleTestCase):
    def test_metrics_cover_whole_pieces(self):
        pieces = toy_pieces(4)
        metrics = evaluate(pieces, init_state(tiny_config()))
        self.assertEqual(metrics.n_frames, sum(p.n_frames for p in pieces))
        for value in (metrics.condition_accuracy_art, metrics.condition_accuracy_dyn):
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 1.0)
        self.assertGreaterEqual(metrics.kl_art, 0.0)

    def test_untrained_model_is_at_chance_on_balanced_labels(self):
        pieces = []
        for piece in toy_pieces(8):
            alternating = np.arange(piece.n_frames) % 2
            pieces.append(replace(piece, c_art=alternating, c_dyn=1 - alternating))
        metrics = evaluate(pieces, init_state(tiny_config()))
        self.assertAlmostEqual(metrics.condition_accuracy_art, 0.5, delta=0.1)
        self.assertAlmostEqual(metrics.condition_accuracy_dyn, 0.5, delta=0.1)

    def test_combine_is_frame_weighted(self):
        a = EvaluationMetrics(1.0, 0.0, 0.0, 1.0, 0.0, n_frames=30)
        b = EvaluationMetrics(3.0, 0.0, 0.0, 0.0, 1.0, n_frames=10)
        combined = EvaluationMetrics.combine([a, b])
        self.assertEqual(combined.n_frames, 40)
        self.assertAlmostEqual(combined.recon, 1.5)
        self.assertAlmostEqual(combined.condition_accuracy_art, 0.75)

    def test_empty_split(self):
        with self.assertRaises(ValueError):
            evaluate([], init_state(tiny_config()))


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_round_trip(self):
        state = init_state(tiny_config())
        state, _ = train_step(make_batch(toy_pieces(4), state.config, TEST_GRID, 0), state)
        path = save_checkpoint(state, self.dir / "checkpoint.pt")
        self.assertTrue(path.with_suffix(".json").exists())

        loaded = load_checkpoint(path)
        self.assertEqual(loaded.step, 1)
        self.assertEqual(loaded.config, state.config)
        for a, b in zip(state.model.parameters(), loaded.model.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_corrupted_file(self):
        path = self.dir / "broken.pt"
        path.write_bytes(b"not a checkpoint at all")
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch(self):
        path = self.dir / "old.pt"
        torch.save({"format_version": 99}, path)
        with self.assertRaisesMessage(CheckpointError, "format version 99"):
            load_checkpoint(path)

    def test_truncate_after(self):
        path = self.dir / METRICS_FILE
        pd.DataFrame({"step": [1, 2, 3, 4], "recon": [4.0, 3.0, 2.0, 1.0]}).to_csv(path, index=False)
        truncate_after(path, 2)
        self.assertEqual(pd.read_csv(path)["step"].tolist(), [1, 2])


class FitTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.pieces = toy_pieces(8)

    def setUp(self):
        self.dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_metrics_and_checkpoints(self):
        fit(init_state(tiny_config()), self.pieces, TEST_GRID, self.dir,
            eval_pieces=self.pieces[:2])
        metrics = pd.read_csv(self.dir / METRICS_FILE)
        self.assertEqual(list(metrics.columns), METRICS_COLUMNS)
        self.assertEqual(metrics["step"].tolist(), list(range(1, 11)))
        self.assertTrue(np.isfinite(metrics.drop(columns="step").to_numpy()).all())
        self.assertTrue((metrics[["kl_art", "kl_dyn"]] >= 0).all().all())
        self.assertTrue((self.dir / CHECKPOINT_PATTERN.format(step=5)).exists())
        self.assertTrue((self.dir / CHECKPOINT_PATTERN.format(step=10)).exists())
        self.assertEqual(len(pd.read_csv(self.dir / "eval.csv")), 2)

    def test_same_seed_same_metrics(self):
        fit(init_state(tiny_config()), self.pieces, TEST_GRID, self.dir / "a")
        fit(init_state(tiny_config()), self.pieces, TEST_GRID, self.dir / "b")
        self.assertEqual((self.dir / "a" / METRICS_FILE).read_bytes(),
                         (self.dir / "b" / METRICS_FILE).read_bytes())

    def test_different_seed_different_metrics(self):
        fit(init_state(tiny_config()), self.pieces, TEST_GRID, self.dir / "a")
        fit(init_state(tiny_config(seed=1)), self.pieces, TEST_GRID, self.dir / "b")
        self.assertNotEqual((self.dir / "a" / METRICS_FILE).read_bytes(),
                            (self.dir / "b" / METRICS_FILE).read_bytes())

    def test_resume_matches_uninterrupted_run(self):
        config = tiny_config(max_steps=20, checkpoint_every=10)
        straight = fit(init_state(config), self.pieces, TEST_GRID, self.dir / "straight")

        resumed_dir = self.dir / "resumed"
        resumed_dir.mkdir()
        # an interrupted run leaves rows past its last checkpoint behind
        shutil.copy(self.dir / "straight" / METRICS_FILE, resumed_dir / METRICS_FILE)
        state = load_checkpoint(self.dir / "straight" / CHECKPOINT_PATTERN.format(step=10))
        self.assertEqual(state.step, 10)
        resumed = fit(state, self.pieces, TEST_GRID, resumed_dir)

        self.assertEqual(resumed.step, 20)
        self.assertEqual((self.dir / "straight" / METRICS_FILE).read_bytes(),
                         (resumed_dir / METRICS_FILE).read_bytes())
        for a, b in zip(straight.model.parameters(), resumed.model.parameters()):
            self.assertTrue(torch.equal(a, b))


class OverfitTests(SimpleTestCase):
    @slow
    def test_reconstruction_collapses_on_fixed_crops(self):
        pieces = toy_pieces(4, seconds=5.0)
        config = TrainConfig(batch_size=4, max_steps=2000, crop_seconds=4.0, latent_dim=8,
                             hidden_size=64, num_layers=2)
        state = init_state(config)
        batch = make_batch(pieces, config, TEST_GRID, 0)
        state, first = train_step(batch, state)
        for _ in range(config.max_steps - 1):
            state, last = train_step(batch, state)
        self.assertLess(float(last.recon), 0.1 * float(first.recon))
