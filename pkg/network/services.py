import logging

import numpy as np

from dsp.processing import NormStats

from .config import ModelConfig
from .encoders import RecurrentState, condition_step, encode
from .params import init_params
from .storage import load_model, save_model
from .unet import prepare_page, unet_apply

logger = logging.getLogger(__name__)


class AudioConditionedUNet:
    """
    Parameters, architecture and normalization stats of one trained model.
    Read-only once built, so several tracker streams may share an instance.
    """

    def __init__(self, params, config, stats=None):
        self.params = params
        self.config = config
        self.stats = stats if stats is not None else NormStats.identity(config.n_bins)

    @classmethod
    def initialize(cls, config=None, seed=0, stats=None):
        config = config or ModelConfig()
        return cls(init_params(config, seed), config, stats)

    @classmethod
    def from_file(cls, path):
        params, config, stats = load_model(path)
        return cls(params, config, stats)

    def save(self, path):
        save_model(self.params, self.config, self.stats, path)

    def initial_state(self):
        return RecurrentState.zeros(self.config.hidden_size)

    def prepare(self, page):
        return prepare_page(page, self.config)

    def embed(self, frames, t):
        return encode(frames, t, self.params, self.config)

    def condition(self, embedding, state):
        return condition_step(embedding, state, self.params, self.config)

    def segment(self, prepared, z):
        return unet_apply(prepared, z, self.params, self.config)

    def predict_sequence(self, page, frames):
        """
        Probability masks for every step of a standardized [T, bins]
        spectrogram with one continuous recurrent state.
        """
        prepared = self.prepare(page)
        state = self.initial_state()
        masks = []
        for t in range(len(frames)):
            z, state = self.condition(self.embed(frames, t), state)
            masks.append(self.segment(prepared, z).data[0])
        return np.stack(masks) if masks else np.zeros((0, prepared.height, prepared.width), dtype=np.float32)
