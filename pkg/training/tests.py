import os
import tempfile
from unittest import skipUnless

import numpy as np
import pandas as pd
from django.conf import settings
from django.test import SimpleTestCase, tag

from dataset.augmentation import augment_shift
from dataset.generator import GeneratorConfig, generate_dataset
from dataset.storage import save_dataset
from dataset.types import AlignmentTrack, Dataset, Event, ScorePage, Staff
from network.config import ModelConfig
from network.encoders import RecurrentState, condition_step, encode
from network.params import init_params
from network.services import AudioConditionedUNet
from network.unet import prepare_page, unet_apply, unet_forward
from tensorcore import ops
from tensorcore.exceptions import ConfigurationError, ContractViolation
from tensorcore.gradcheck import grad_check
from tensorcore.tensor import Graph, precision

from .exceptions import TrainingAborted
from .losses import dice_loss
from .optim import AdamState, PlateauSchedule, adam_step
from .services import TrainConfig, TrainingSample, TrainingService, train, window_gradients
from .tasks import train_model_task


def tiny_pieces(n_pieces=3, seed=1):
    config = GeneratorConfig(height=64, width=96, staves=1, notes_per_staff=4, notes_per_bar=4)
    return generate_dataset(n_pieces, seed=seed, config=config, val_fraction=1 / n_pieces)


def quick_config(**overrides):
    values = dict(max_epochs=2, seq_len=4, windows_per_piece=1, batch_size=2, shift_aug_max=2, lr=1e-3, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


class DiceLossTests(SimpleTestCase):
    def test_perfect_overlap(self):
        target = np.zeros((8, 8))
        target[2:5, 3:6] = 1
        self.assertAlmostEqual(dice_loss(target, target).item(), 0.0, places=6)

    def test_empty_prediction(self):
        target = np.zeros((20, 20))
        target[:10, :10] = 1
        self.assertAlmostEqual(dice_loss(np.zeros((20, 20)), target).item(), 1 - 1 / 101, places=6)

    def test_empty_target_and_prediction(self):
        self.assertEqual(dice_loss(np.zeros((4, 4)), np.zeros((4, 4))).item(), 0.0)

    def test_channel_axis_is_accepted(self):
        target = np.eye(6)
        pred = np.full((1, 6, 6), 0.5)
        self.assertAlmostEqual(dice_loss(pred, target).item(), dice_loss(pred[0], target).item(), places=6)

    def test_shape_mismatch(self):
        with self.assertRaises(ContractViolation):
            dice_loss(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(0.1, 0.9, (1, 5, 5))
        target = rng.random((5, 5)) > 0.5
        report = grad_check(lambda p: dice_loss(p, target), [pred], name="dice")
        self.assertLess(report.max_rel_error, 1e-4)


class AdamTests(SimpleTestCase):
    def setUp(self):
        self.params = init_params(ModelConfig.tiny(), seed=0)

    def test_zero_gradients_change_nothing(self):
        state = AdamState.zeros(self.params)
        updated, state = adam_step(self.params, {}, state, lr=1e-4, weight_decay=0.0)
        for name, tensor in self.params.items():
            np.testing.assert_array_equal(updated[name].data, tensor.data)
        self.assertEqual(state.step, 1)

    def test_first_step_moves_by_learning_rate(self):
        name = "unet.out.bias"
        state = AdamState.zeros(self.params)
        updated, _ = adam_step(self.params, {name: np.ones(1)}, state, lr=1e-4)
        delta = float(updated[name].data[0] - self.params[name].data[0])
        self.assertAlmostEqual(delta, -1e-4, delta=1e-9)

    def test_update_is_bounded_by_learning_rate(self):
        rng = np.random.default_rng(1)
        grads = {name: rng.standard_normal(t.shape) * 10 for name, t in self.params.items()}
        updated, _ = adam_step(self.params, grads, AdamState.zeros(self.params), lr=1e-3)
        for name, tensor in self.params.items():
            step = np.abs(updated[name].data.astype(np.float64) - tensor.data)
            self.assertTrue(np.all(step <= 1e-3 * (1 + 1e-3)), name)

    def test_weight_decay_pulls_towards_zero(self):
        name = "unet.out.weight"
        updated, _ = adam_step(self.params, {}, AdamState.zeros(self.params), lr=1e-3, weight_decay=0.1)
        before, after = self.params[name].data, updated[name].data
        moved = np.abs(before) > 1e-2
        self.assertTrue(np.all(np.abs(after[moved]) < np.abs(before[moved])))


class PlateauScheduleTests(SimpleTestCase):
    def test_learning_rate_halves_twice(self):
        schedule = PlateauSchedule(1e-4, lr_patience=5, stop_patience=100)
        schedule.step(1, 1.0)
        for epoch in range(2, 12):
            schedule.step(epoch, 1.0)
        self.assertAlmostEqual(schedule.lr, 2.5e-5)
        self.assertFalse(schedule.should_stop)

    def test_stops_after_patience(self):
        schedule = PlateauSchedule(1e-4, lr_patience=5, stop_patience=10)
        schedule.step(1, 0.5)
        for epoch in range(2, 11):
            schedule.step(epoch, 0.6)
            self.assertFalse(schedule.should_stop)
        schedule.step(11, 0.6)
        self.assertTrue(schedule.should_stop)
        self.assertEqual(schedule.best_epoch, 1)

    def test_tiny_improvements_do_not_count(self):
        schedule = PlateauSchedule(1e-4, lr_patience=5, stop_patience=10, min_improvement=1e-5)
        self.assertTrue(schedule.step(1, 0.5))
        self.assertFalse(schedule.step(2, 0.5 - 1e-6))
        self.assertTrue(schedule.step(3, 0.4))
        self.assertEqual(schedule.bad_epochs, 0)


class TrainConfigTests(SimpleTestCase):
    def test_batch_size_depends_on_encoder(self):
        config = TrainConfig()
        self.assertEqual(config.resolved_batch_size(ModelConfig.tiny()), 4)
        self.assertEqual(config.resolved_batch_size(ModelConfig.tiny(encoder_kind="ntc")), 64)
        self.assertEqual(TrainConfig(batch_size=8).resolved_batch_size(ModelConfig.tiny(encoder_kind="ntc")), 8)

    def test_invalid_values(self):
        for overrides in ({"lr": 0}, {"seq_len": -1}, {"max_epochs": 0}, {"shift_aug_max": -2}):
            with self.assertRaises(ConfigurationError):
                TrainConfig(**overrides)

    def test_dict_round_trip(self):
        config = quick_config(tempo_aug=True)
        self.assertEqual(TrainConfig.from_dict(config.to_dict()), config)


class WindowGradientTests(SimpleTestCase):
    def make_sample(self):
        staff = Staff(y_center=16.0, y_top=12.0, y_bottom=20.0, x_start=4.0, x_end=44.0)
        page = ScorePage(np.full((32, 48), 255, dtype=np.uint8), [staff])
        track = AlignmentTrack([Event(0.0, 10.0, 16.0, 0), Event(0.25, 30.0, 16.0, 0)])
        rng = np.random.default_rng(4)
        return TrainingSample("window", page, track, rng.random((32, 48)), rng.standard_normal((6, 78)))

    def test_two_stage_gradient_equals_single_graph(self):
        config = ModelConfig.tiny()
        with precision(np.float64):
            params = init_params(config, seed=1).astype(np.float64)
            rng = np.random.default_rng(2)
            params = params.replace({
                name: rng.standard_normal(t.shape) * 0.1 for name, t in params.items() if ".film." in name
            })
            sample = self.make_sample()
            loss, grads = window_gradients(params, config, sample, range(3))

            masks = sample.targets(range(3))
            prepared = prepare_page(sample.ink, config)
            with Graph() as graph:
                state = RecurrentState.zeros(config.hidden_size)
                summed = None
                for t, mask in zip(range(3), masks):
                    z, state = condition_step(encode(sample.frames, t, params, config), state, params, config)
                    step = dice_loss(unet_apply(prepared, z, params, config), mask)
                    summed = step if summed is None else ops.add(summed, step)
            reference = graph.backward(summed, params.tensors()).by_name()

        self.assertAlmostEqual(loss, summed.item(), places=10)
        for name in params:
            np.testing.assert_allclose(grads[name], reference[name], rtol=1e-7, atol=1e-12, err_msg=name)
        self.assertGreater(np.abs(grads["conditioner.w_ih"]).sum(), 0.0)


class JointShiftTests(SimpleTestCase):
    def test_loss_is_unchanged_when_page_and_target_move_together(self):
        config = ModelConfig.tiny(depth=3, film_blocks="BCDE")
        rng = np.random.default_rng(8)
        with precision(np.float64):
            params = init_params(config, seed=2).astype(np.float64)
            params = params.replace({
                name: rng.standard_normal(t.shape) * 0.1 for name, t in params.items() if ".film." in name
            })
            z = rng.standard_normal(config.hidden_size)
            page = np.zeros((256, 256))
            page[120:136, 112:144] = rng.random((16, 32))
            target = np.zeros((256, 256), dtype=bool)
            target[124:132, 120:136] = True
            reference = dice_loss(unet_forward(page, z, params, config), target).item()
            for dx, dy in [(4, 0), (0, -8), (8, 4), (-4, -4)]:
                self.assertEqual((dx % config.pad_multiple, dy % config.pad_multiple), (0, 0))
                moved_page, moved_target = augment_shift(page, target, dx, dy)
                loss = dice_loss(unet_forward(moved_page, z, params, config), moved_target).item()
                self.assertAlmostEqual(loss, reference, places=9, msg=f"shift ({dx}, {dy})")


class TrainingServiceTests(SimpleTestCase):
    def setUp(self):
        self.dataset = tiny_pieces()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_run_writes_history_and_best_model(self):
        result = train(self.dataset, ModelConfig.tiny(), quick_config(), self.tmp.name)
        self.assertEqual([row["epoch"] for row in result.history], [1, 2])
        history = pd.read_csv(os.path.join(self.tmp.name, "history.csv"))
        self.assertEqual(list(history.columns), ["epoch", "lr", "train_loss", "val_loss"])
        self.assertEqual(len(history), 2)
        self.assertTrue(np.all(np.isfinite(history["val_loss"])))
        best = AudioConditionedUNet.from_file(os.path.join(self.tmp.name, "best.model"))
        for name, tensor in result.model.params.items():
            np.testing.assert_array_equal(best.params[name].data, tensor.data)
        self.assertTrue(os.path.exists(os.path.join(self.tmp.name, "checkpoint.model")))
        self.assertEqual(result.best_val_loss, min(row["val_loss"] for row in result.history))

    def test_same_seed_same_history(self):
        first = train(self.dataset, ModelConfig.tiny(), quick_config(max_epochs=1))
        second = train(self.dataset, ModelConfig.tiny(), quick_config(max_epochs=1))
        self.assertEqual(first.history, second.history)

    def test_ntc_trains_on_single_frames(self):
        service = TrainingService(self.dataset, ModelConfig.tiny(encoder_kind="ntc"), quick_config(batch_size=0))
        self.assertEqual(service.batch_size, 64)
        self.assertEqual(service.step_length, 1)
        windows = service.plan_epoch()
        self.assertEqual(len(windows), 2 * 4)

    def test_tempo_augmentation_draws_known_factors(self):
        service = TrainingService(self.dataset, ModelConfig.tiny(), quick_config(tempo_aug=True, windows_per_piece=6))
        factors = {w.factor for w in service.plan_epoch()}
        self.assertTrue(factors <= set(settings.PAGETRACK["TEMPO_FACTORS"]))

    def test_windows_stay_inside_the_piece(self):
        service = TrainingService(self.dataset, ModelConfig.tiny(), quick_config(windows_per_piece=5))
        for window in service.plan_epoch():
            sample = service.sample(window.sample, window.factor, window.wet)
            self.assertLessEqual(window.start, max(len(sample) - service.step_length, 0))
            self.assertLessEqual(max(abs(window.dx), abs(window.dy)), 2)

    def test_nan_aborts_with_diagnostics(self):
        service = TrainingService(self.dataset, ModelConfig.tiny(), quick_config())
        broken = service.model.params.replace({"unet.out.bias": np.array([np.nan])})
        service.model = AudioConditionedUNet(broken, service.model_config, service.model.stats)
        with self.assertRaises(TrainingAborted) as ctx:
            service.run()
        self.assertEqual(ctx.exception.epoch, 1)
        self.assertTrue(ctx.exception.pieces)

    def test_empty_validation_split(self):
        ids = [p.id for p in self.dataset]
        dataset = Dataset(self.dataset.pieces, {"train": ids, "val": []})
        with self.assertRaises(ConfigurationError):
            TrainingService(dataset, ModelConfig.tiny(), quick_config())

    def test_validation_must_not_overlap_training(self):
        with self.assertRaises(ConfigurationError):
            TrainingService(Dataset(self.dataset.pieces), ModelConfig.tiny(), quick_config())

    def test_celery_task_runs_eagerly(self):
        data_dir = os.path.join(self.tmp.name, "data")
        save_dataset(self.dataset, data_dir)
        out = os.path.join(self.tmp.name, "run")
        result = train_model_task.apply(
            args=(data_dir, out, ModelConfig.tiny().to_dict(), quick_config(max_epochs=1).to_dict())
        ).get()
        self.assertEqual(result["epochs"], 1)
        self.assertTrue(os.path.exists(os.path.join(out, "best.model")))


@tag("slow")
@skipUnless(settings.PAGETRACK["RUN_SLOW_TESTS"], "set PGTK_SLOW_TESTS=1")
class OverfitTests(SimpleTestCase):
    def test_training_loss_decreases_over_first_epochs(self):
        dataset = generate_dataset(5, seed=7, val_fraction=0.2)
        decreasing = 0
        for seed in range(3):
            result = train(dataset, ModelConfig(), quick_config(max_epochs=5, seq_len=16, windows_per_piece=0,
                                                                 batch_size=4, lr=1e-3, seed=seed))
            losses = [row["train_loss"] for row in result.history]
            decreasing += all(b < a for a, b in zip(losses, losses[1:]))
        self.assertGreaterEqual(decreasing, 2)
