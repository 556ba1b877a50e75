"""Run configuration: one serializable object that pins every knob.

Configs live in YAML files with one section per subsystem; command-line
flags override individual file values. A run is reproducible from the
config plus the dataset manifest alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError
from .losses import LossConfig
from .model import ArchDescriptor
from .noise import NOISE_KINDS, NoiseParams
from .optim import LrSchedule
from .patching import PatchGridSpec
from .training import TrainConfig


@dataclass
class PatchSection:
    size: int = 16
    overlap: int = 4


@dataclass
class ModelSection:
    mixture_components: int = 4
    decoders: int = None  # None tracks mixture_components
    latent_dim: int = 64
    conv_channels: tuple = (16, 32, 32, 64, 64)
    conv_strides: tuple = (1, 2, 1, 2, 1)
    fc_dims: tuple = (256, 128)
    precision: str = "f32"

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.conv_strides = tuple(self.conv_strides)
        self.fc_dims = tuple(self.fc_dims)


@dataclass
class TrainSection:
    batch_size: int = 128
    epochs_stage1: int = 50
    epochs_stage2: int = 50
    reuse_dummy_decoder: bool = False
    checkpoint_every: int = 0


@dataclass
class NoiseSection:
    kinds: tuple = NOISE_KINDS
    gaussian_sigma: float = 0.12
    poisson_lam: float = 30.0
    salt_pepper_density: float = 0.08
    target_psnr: float = 16.64  # None disables calibration
    probe_count: int = 24
    full_frame: bool = False

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        for kind in self.kinds:
            if kind not in NOISE_KINDS:
                raise ConfigError(f"unknown noise kind {kind!r}")


@dataclass
class MetricsSection:
    max_val: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    patch: PatchSection = field(default_factory=PatchSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    noise: NoiseSection = field(default_factory=NoiseSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    # -- serialization --------------------------------------------------------

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        sections = {
            "patch": PatchSection,
            "model": ModelSection,
            "loss": LossConfig,
            "train": TrainSection,
            "schedule": LrSchedule,
            "noise": NoiseSection,
            "metrics": MetricsSection,
        }
        kwargs = {}
        if "seed" in data:
            kwargs["seed"] = int(data.pop("seed"))
        for name, section_cls in sections.items():
            raw = data.pop(name, None)
            if raw is None:
                continue
            allowed = {f.name for f in fields(section_cls)}
            unknown = set(raw) - allowed
            if unknown:
                raise ConfigError(
                    f"unknown key(s) {sorted(unknown)} in config section {name!r}"
                )
            kwargs[name] = section_cls(**raw)
        if data:
            raise ConfigError(f"unknown top-level config key(s) {sorted(data)}")
        return cls(**kwargs)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_yaml())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_yaml(fh.read())

    # -- bridges to the module-level configs ----------------------------------

    def grid_spec(self, height, width, channels):
        return PatchGridSpec(self.patch.size, self.patch.overlap, height, width, channels)

    def arch(self, channels):
        return ArchDescriptor(
            patch_size=self.patch.size,
            channels=channels,
            conv_channels=self.model.conv_channels,
            conv_strides=self.model.conv_strides,
            fc_dims=self.model.fc_dims,
        )

    def noise_params(self):
        return NoiseParams(
            gaussian_sigma=self.noise.gaussian_sigma,
            poisson_lam=self.noise.poisson_lam,
            salt_pepper_density=self.noise.salt_pepper_density,
        )

    def train_config(self, channels):
        return TrainConfig(
            batch_size=self.train.batch_size,
            epochs_stage1=self.train.epochs_stage1,
            epochs_stage2=self.train.epochs_stage2,
            seed=self.seed,
            loss=self.loss,
            schedule=self.schedule,
            mixture_components=self.model.mixture_components,
            latent_dim=self.model.latent_dim,
            num_decoders=self.model.decoders,
            precision=self.model.precision,
            arch=self.arch(channels),
            reuse_dummy_decoder=self.train.reuse_dummy_decoder,
            checkpoint_every=self.train.checkpoint_every,
        )
