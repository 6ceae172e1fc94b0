from dataclasses import asdict, dataclass, field

from django.conf import settings

from tensorcore.exceptions import ConfigurationError

from .choices import EncoderKind

BLOCK_NAMES = "ABCDEFGHIJKLMNOPQ"


def _setting(key):
    return settings.PAGETRACK[key]


@dataclass(frozen=True)
class ModelConfig:
    encoder_kind: str = field(default_factory=lambda: _setting("ENCODER"))
    base_filters: int = field(default_factory=lambda: _setting("BASE_FILTERS"))
    depth: int = field(default_factory=lambda: _setting("DEPTH"))
    film_blocks: str = field(default_factory=lambda: _setting("FILM_BLOCKS"))
    input_downscale: int = field(default_factory=lambda: _setting("DOWNSCALE"))
    n_bins: int = field(default_factory=lambda: _setting("N_BINS"))
    context_frames: int = field(default_factory=lambda: _setting("CONTEXT_FRAMES"))
    encoder_channels: tuple = (24, 48, 96, 96)
    embedding_size: int = field(default_factory=lambda: _setting("EMBEDDING_SIZE"))
    hidden_size: int = field(default_factory=lambda: _setting("HIDDEN_SIZE"))
    max_filters: int = 128

    def __post_init__(self):
        object.__setattr__(self, "encoder_kind", EncoderKind(self.encoder_kind).value)
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "film_blocks", "".join(sorted(set(self.film_blocks))))
        if self.depth < 2 or 2 * self.depth - 1 > len(BLOCK_NAMES):
            raise ConfigurationError(f"U-Net depth must be between 2 and {len(BLOCK_NAMES) // 2 + 1}")
        unknown = set(self.film_blocks) - set(self.block_names)
        if unknown:
            raise ConfigurationError(f"FiLM blocks {sorted(unknown)} are not part of a depth-{self.depth} U-Net")
        if min(self.base_filters, self.embedding_size, self.hidden_size, self.n_bins) < 1:
            raise ConfigurationError("filter, embedding, hidden and bin counts must be positive")
        if self.kind.uses_window:
            frames, bins = self.context_frames, self.n_bins
            for _ in self.encoder_channels:
                frames, bins = frames // 2, bins // 2
            if frames < 1 or bins < 1:
                raise ConfigurationError(
                    f"{len(self.encoder_channels)} pooling stages do not fit a "
                    f"{self.n_bins}x{self.context_frames} window"
                )

    @property
    def kind(self):
        return EncoderKind(self.encoder_kind)

    @property
    def block_names(self):
        return BLOCK_NAMES[: 2 * self.depth - 1]

    @property
    def encoder_blocks(self):
        return self.block_names[: self.depth]

    @property
    def decoder_blocks(self):
        return self.block_names[self.depth:]

    @property
    def pad_multiple(self):
        return 2 ** (self.depth - 1)

    def block_width(self, name):
        """Filters double per level and mirror around the bottleneck."""
        level = self.block_names.index(name)
        if level >= self.depth:
            level = 2 * (self.depth - 1) - level
        return min(self.base_filters * 2**level, self.max_filters)

    @property
    def window_frames(self):
        return self.context_frames if self.kind.uses_window else 1

    def encoder_output_shape(self):
        """Spatial size of the last pooling stage of the window encoder."""
        bins, frames = self.n_bins, self.context_frames
        for _ in self.encoder_channels:
            bins, frames = bins // 2, frames // 2
        return bins, frames

    def to_dict(self):
        data = asdict(self)
        data["encoder_channels"] = list(self.encoder_channels)
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def tiny(cls, **overrides):
        """Configuration small enough for end-to-end gradient checks."""
        values = dict(
            base_filters=2,
            context_frames=8,
            encoder_channels=(2, 4, 4),
            embedding_size=4,
            hidden_size=6,
        )
        values.update(overrides)
        return cls(**values)
