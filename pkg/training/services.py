"""
Sequence training of the audio-conditioned U-Net.

Every window of ``seq_len`` target frames starts from a zero recurrent state.
The conditioner graph of a window is recorded once; each step's U-Net graph
is differentiated on its own with z as a leaf, and the collected dL/dz are
then pushed back through the conditioner graph.
"""

import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from django.conf import settings
from tqdm import tqdm

from dataset.augmentation import augment_reverb, augment_shift, augment_tempo, tempo_factors
from dataset.positions import targets_at
from dsp.processing import NormStats, build_semilog_filterbank, spectrogram
from network.config import ModelConfig
from network.encoders import RecurrentState, condition_step, encode
from network.services import AudioConditionedUNet
from network.unet import prepare_page, unet_apply
from tensorcore.exceptions import ConfigurationError
from tensorcore.tensor import Graph, Tensor

from .exceptions import TrainingAborted
from .losses import dice_loss
from .optim import AdamState, PlateauSchedule, adam_step

logger = logging.getLogger(__name__)


def _setting(key):
    return settings.PAGETRACK[key]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = field(default_factory=lambda: _setting("LEARNING_RATE"))
    weight_decay: float = field(default_factory=lambda: _setting("WEIGHT_DECAY"))
    batch_size: int = 0  # 0 picks BATCH_SIZE, or NTC_BATCH_SIZE for the NTC encoder
    seq_len: int = field(default_factory=lambda: _setting("SEQ_LEN"))
    lr_patience: int = field(default_factory=lambda: _setting("LR_PATIENCE"))
    stop_patience: int = field(default_factory=lambda: _setting("STOP_PATIENCE"))
    max_epochs: int = field(default_factory=lambda: _setting("MAX_EPOCHS"))
    min_improvement: float = field(default_factory=lambda: _setting("MIN_IMPROVEMENT"))
    tempo_aug: bool = False
    shift_aug_max: int = field(default_factory=lambda: _setting("SHIFT_AUG_MAX"))
    reverb_aug: float = 0.0  # RT60 of the wet copies, 0 disables
    windows_per_piece: int = 0  # 0 covers every piece about once per epoch
    seed: int = field(default_factory=lambda: _setting("SEED"))

    def __post_init__(self):
        positive = ("lr", "seq_len", "lr_patience", "stop_patience", "max_epochs")
        bad = [name for name in positive if getattr(self, name) <= 0]
        bad += [
            name for name in ("weight_decay", "batch_size", "shift_aug_max", "reverb_aug", "windows_per_piece",
                              "min_improvement")
            if getattr(self, name) < 0
        ]
        if bad:
            raise ConfigurationError(f"invalid training settings: {', '.join(bad)}")

    def resolved_batch_size(self, model_config):
        if self.batch_size:
            return self.batch_size
        return _setting("BATCH_SIZE") if model_config.kind.recurrent else _setting("NTC_BATCH_SIZE")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class TrainingSample:
    """One piece (possibly tempo or reverb augmented) ready for the network."""

    piece_id: str
    page: object  # ScorePage at model resolution
    track: object  # AlignmentTrack at model resolution
    ink: np.ndarray
    frames: np.ndarray  # standardized [T, bins]

    def __len__(self):
        return len(self.frames)

    def targets(self, indices, fps=None):
        return targets_at(self.page, self.track, list(indices), fps)[0]


@dataclass(frozen=True)
class Window:
    sample: int  # index into the training pieces
    start: int
    factor: float = 1.0
    wet: bool = False
    dx: int = 0
    dy: int = 0


@dataclass
class TrainingResult:
    model: AudioConditionedUNet
    history: list
    best_epoch: int
    best_val_loss: float
    stopped_early: bool

    def summary(self):
        return {
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "epochs": len(self.history),
            "stopped_early": self.stopped_early,
        }


def _conditioning(params, config, sample, indices):
    """Conditioning vector of every step of a window, from a zero state."""
    state = RecurrentState.zeros(config.hidden_size)
    zs = []
    for t in indices:
        z, state = condition_step(encode(sample.frames, t, params, config), state, params, config)
        zs.append(z)
    return zs


def window_gradients(params, config, sample, indices, dx=0, dy=0):
    """
    Summed Dice loss of a window and its gradient for every parameter, by
    two-stage truncated backpropagation.
    """
    indices = list(indices)
    masks = sample.targets(indices)
    ink, masks = augment_shift(sample.ink, masks, dx, dy)
    prepared = prepare_page(ink, config)
    tensors = params.tensors()

    with Graph() as conditioner:
        zs = _conditioning(params, config, sample, indices)

    grads = {name: np.zeros(t.shape, dtype=np.float64) for name, t in params.items()}
    seeds = []
    loss_sum = 0.0
    for z, mask in zip(zs, masks):
        leaf = Tensor.wrap(z.data, requires_grad=True)
        with Graph() as segmenter:
            loss = dice_loss(unet_apply(prepared, leaf, params, config), mask)
        step = segmenter.backward(loss, tensors)
        for name, grad in step.by_name().items():
            grads[name] += grad
        seeds.append((z, step[leaf]))
        loss_sum += loss.item()

    for name, grad in conditioner.backward_from(seeds, tensors).by_name().items():
        grads[name] += grad
    return loss_sum, grads


def window_loss(params, config, sample, indices):
    """Summed Dice loss of a window without recording anything."""
    indices = list(indices)
    masks = sample.targets(indices)
    prepared = prepare_page(sample.ink, config)
    zs = _conditioning(params, config, sample, indices)
    return sum(dice_loss(unet_apply(prepared, z, params, config), mask).item() for z, mask in zip(zs, masks))


class TrainingService:
    """
    Epoch loop: sampled windows, Adam updates, validation after every epoch,
    plateau schedule and early stopping. Keeps the parameters with the
    lowest validation loss.
    """

    def __init__(self, dataset, model_config=None, train_config=None, output_dir=None, progress=False, model=None):
        self.model_config = model_config or (model.config if model is not None else ModelConfig())
        self.config = train_config or TrainConfig()
        self.output_dir = output_dir
        self.progress = progress
        self.train_pieces = dataset.split("train")
        self.val_pieces = dataset.split("val")
        if not self.train_pieces:
            raise ConfigurationError("training split is empty")
        if not self.val_pieces:
            raise ConfigurationError("validation split is empty")
        overlap = {p.id for p in self.train_pieces} & {p.id for p in self.val_pieces}
        if overlap:
            raise ConfigurationError(f"validation split overlaps training: {sorted(overlap)}")

        init_seed, sampling, augmentation = np.random.SeedSequence(self.config.seed).spawn(3)
        self._sampling = np.random.default_rng(sampling)
        self._augmentation = np.random.default_rng(augmentation)
        self.filterbank = build_semilog_filterbank(bins=self.model_config.n_bins)
        self._samples = {}

        if model is None:
            stats = NormStats.fit([self._raw_frames(p) for p in self.train_pieces])
            model = AudioConditionedUNet.initialize(
                self.model_config, seed=int(init_seed.generate_state(1)[0]), stats=stats
            )
        self.model = model
        self.step_length = self.config.seq_len if self.model_config.kind.recurrent else 1
        self.batch_size = self.config.resolved_batch_size(self.model_config)

    def _raw_frames(self, piece, rng=None):
        if piece.features is not None:
            return piece.features.frames
        audio = piece.audio
        if rng is not None:
            audio = augment_reverb(audio, self.config.reverb_aug, rng)
        return spectrogram(audio, self.filterbank).frames

    def sample(self, index, factor=1.0, wet=False, split="train"):
        """Training (or validation) piece ``index`` at a tempo factor, cached."""
        key = (split, index, factor, wet)
        if key not in self._samples:
            piece = (self.train_pieces if split == "train" else self.val_pieces)[index]
            if factor != 1.0:
                piece = augment_tempo(piece, factor, self.filterbank)
            rng = None
            if wet and piece.audio is not None:
                rng = np.random.default_rng([self.config.seed, index, int(factor * 1000)])
            frames = self._raw_frames(piece, rng)
            if piece.features is None or not piece.features.standardized:
                frames = self.model.stats.apply(frames)
            page, track = piece.model_view
            self._samples[key] = TrainingSample(piece.id, page, track, page.ink(), frames)
        return self._samples[key]

    def plan_epoch(self):
        """Windows of one epoch in a seed-determined order."""
        rng, aug = self._sampling, self._augmentation
        factors = tempo_factors() if self.config.tempo_aug else [1.0]
        shift = self.config.shift_aug_max
        windows = []
        for index in range(len(self.train_pieces)):
            n_frames = len(self.sample(index))
            count = self.config.windows_per_piece or max(1, n_frames // self.config.seq_len)
            if not self.model_config.kind.recurrent:
                count *= self.config.seq_len
            for _ in range(count):
                factor = float(factors[aug.integers(len(factors))])
                wet = self.config.reverb_aug > 0 and bool(aug.random() < 0.5)
                length = len(self.sample(index, factor, wet))
                start = int(rng.integers(0, max(length - self.step_length, 0) + 1))
                dx, dy = (int(v) for v in aug.integers(-shift, shift + 1, size=2)) if shift else (0, 0)
                windows.append(Window(index, start, factor, wet, dx, dy))
        order = rng.permutation(len(windows))
        return [windows[i] for i in order]

    def _indices(self, sample, start):
        return range(start, min(start + self.step_length, len(sample)))

    def train_batch(self, params, batch):
        """Mean gradient over the windows of a batch; returns (loss sum, steps, grads)."""
        grads = None
        loss_sum, steps = 0.0, 0
        for window in batch:
            sample = self.sample(window.sample, window.factor, window.wet)
            indices = self._indices(sample, window.start)
            loss, window_grads = window_gradients(
                params, self.model_config, sample, indices, window.dx, window.dy
            )
            loss_sum += loss
            steps += len(indices)
            if grads is None:
                grads = window_grads
            else:
                for name, grad in window_grads.items():
                    grads[name] += grad
        for grad in grads.values():
            grad /= len(batch)
        return loss_sum, steps, grads

    def validate(self, params):
        """Mean per-step Dice loss over the validation pieces, unaugmented."""
        loss_sum, steps = 0.0, 0
        for index in range(len(self.val_pieces)):
            sample = self.sample(index, split="val")
            for start in range(0, len(sample), self.step_length):
                indices = self._indices(sample, start)
                loss_sum += window_loss(params, self.model_config, sample, indices)
                steps += len(indices)
        return loss_sum / max(steps, 1)

    def run(self):
        config = self.config
        params = self.model.params
        adam = AdamState.zeros(params)
        schedule = PlateauSchedule(config.lr, config.lr_patience, config.stop_patience, config.min_improvement)
        best_params, history = params, []
        if self.output_dir:
            os.makedirs(self.output_dir, exist_ok=True)
        logger.info(
            f"Training {self.model_config.encoder_kind} on {len(self.train_pieces)} pieces "
            f"({len(self.val_pieces)} for validation), batch {self.batch_size}, {params.count()} parameters"
        )

        for epoch in range(1, config.max_epochs + 1):
            lr = schedule.lr
            windows = self.plan_epoch()
            batches = [windows[i:i + self.batch_size] for i in range(0, len(windows), self.batch_size)]
            loss_sum, steps = 0.0, 0
            for b, batch in enumerate(tqdm(batches, desc=f"epoch {epoch}", disable=not self.progress, leave=False)):
                batch_loss, batch_steps, grads = self.train_batch(params, batch)
                if not np.isfinite(batch_loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    pieces = sorted({self.train_pieces[w.sample].id for w in batch})
                    raise TrainingAborted("non-finite loss or gradient", epoch, b, pieces, lr)
                params, adam = adam_step(params, grads, adam, lr, config.weight_decay)
                loss_sum += batch_loss
                steps += batch_steps

            train_loss = loss_sum / max(steps, 1)
            val_loss = self.validate(params)
            if not np.isfinite(val_loss):
                raise TrainingAborted("non-finite validation loss", epoch, None, [p.id for p in self.val_pieces], lr)
            improved = schedule.step(epoch, val_loss)
            history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss})
            logger.info(
                f"epoch {epoch}: lr {lr:.3g}, train loss {train_loss:.5f}, val loss {val_loss:.5f}"
                + (" (best)" if improved else "")
            )
            if improved:
                best_params = params
            self._write(epoch, params, best_params, history, improved)
            if schedule.should_stop:
                logger.info(f"Stopping after {schedule.bad_epochs} epochs without improvement")
                break

        model = AudioConditionedUNet(best_params, self.model_config, self.model.stats)
        return TrainingResult(model, history, schedule.best_epoch, float(schedule.best), schedule.should_stop)

    def _write(self, epoch, params, best_params, history, improved):
        if not self.output_dir:
            return
        stats = self.model.stats
        AudioConditionedUNet(params, self.model_config, stats).save(os.path.join(self.output_dir, "checkpoint.model"))
        if improved:
            AudioConditionedUNet(best_params, self.model_config, stats).save(os.path.join(self.output_dir, "best.model"))
        pd.DataFrame(history, columns=["epoch", "lr", "train_loss", "val_loss"]).to_csv(
            os.path.join(self.output_dir, "history.csv"), index=False
        )


def train(dataset, model_config=None, train_config=None, output_dir=None, progress=False):
    return TrainingService(dataset, model_config, train_config, output_dir, progress).run()
