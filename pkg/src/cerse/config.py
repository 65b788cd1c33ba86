"""Declarative run configuration: one YAML file wires every component together."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .nets import CerEstimatorConfig, SeModelConfig
from .recognizer import MockRecognizerConfig
from .spectral import StftConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    """Configuration file is malformed or violates the schema."""


@dataclass(frozen=True)
class FeatureConfig:
    log_compress: bool = False


@dataclass(frozen=True)
class RecognizerChoice:
    kind: str = "mock"  # "mock" or "external"
    command: str | None = None
    timeout_s: float = 300.0
    max_concurrency: int = 1

    def __post_init__(self):
        if self.kind not in ("mock", "external"):
            raise ValueError(f"recognizer kind must be mock or external, got {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise ValueError("external recognizer requires a command template")


@dataclass(frozen=True)
class SimConfig:
    kind: str = "synthetic"  # "synthetic" or "files"
    num_utterances: int = 200
    text_length: int = 8
    num_noise_files: int = 8
    noise_amplitude: float = 0.1
    snr_mean_db: float = 12.0
    snr_spread_db: float = 8.0
    repetitions: int = 1
    speech_manifest: str | None = None
    noise_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "files"):
            raise ValueError(f"sim kind must be synthetic or files, got {self.kind!r}")
        if self.kind == "files" and not (self.speech_manifest and self.noise_dir):
            raise ValueError("file-based simulation needs speech_manifest and noise_dir")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    train_corpus: str | None = None
    eval_corpus: str | None = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    se_model: SeModelConfig = field(default_factory=SeModelConfig)
    cer_estimator: CerEstimatorConfig = field(default_factory=CerEstimatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mock_recognizer: MockRecognizerConfig = field(default_factory=MockRecognizerConfig)
    recognizer: RecognizerChoice = field(default_factory=RecognizerChoice)
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sample_rate: int = 16000
    scorer_command: str | None = None

    def __post_init__(self):
        if self.se_model.out_units != self.stft.num_bins:
            raise ValueError(
                f"se_model.out_units ({self.se_model.out_units}) must equal the "
                f"frequency bin count ({self.stft.num_bins})"
            )


_SECTION_TYPES = {
    "stft": StftConfig,
    "features": FeatureConfig,
    "augment": AugmentConfig,
    "se_model": SeModelConfig,
    "cer_estimator": CerEstimatorConfig,
    "train": TrainConfig,
    "mock_recognizer": MockRecognizerConfig,
    "recognizer": RecognizerChoice,
    "sim": SimConfig,
    "data": DataConfig,
}
_SCALAR_KEYS = {"sample_rate", "scorer_command"}


def _coerce(value, target_type):
    # YAML gives lists; frozen dataclasses want hashable tuples.
    if isinstance(value, list):
        return tuple(_coerce(v, target_type) for v in value)
    return value


def _build_section(section_cls, mapping: dict, section_name: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {section_name!r} must be a mapping")
    known = {f.name for f in fields(section_cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {section_name!r}: {sorted(unknown)}")
    try:
        return section_cls(**{k: _coerce(v, None) for k, v in mapping.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section_name!r}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = set(raw) - set(_SECTION_TYPES) - _SCALAR_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            kwargs[name] = _build_section(cls, raw[name], name)
    for name in _SCALAR_KEYS:
        if name in raw:
            kwargs[name] = raw[name]
    try:
        return RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a YAML run configuration. Unknown keys are rejected."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(raw or {})


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def write_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(config_to_dict(config), sort_keys=False), encoding="utf-8"
    )


def synthetic_config(seed: int = 0) -> RunConfig:
    """Desk-scale preset: tone-codec corpus, small nets, closed loop in minutes on CPU.

    The small STFT (65 bins) and reduced layer sizes keep a full train/evaluate
    cycle tractable without changing any code path.
    """
    return RunConfig(
        stft=StftConfig(fft_size=128, hop=64),
        augment=AugmentConfig(num_freq_masks=1, max_freq_width=8,
                              num_time_masks=1, max_time_width=8),
        se_model=SeModelConfig(blstm_layers=1, blstm_hidden=32, fc1_units=48,
                               out_units=65),
        cer_estimator=CerEstimatorConfig(conv_specs=((8, 5), (8, 7)), fc_units=(16, 8)),
        train=TrainConfig(epochs=12, batch_size=8, lr_cer=5e-4, lr_se=5e-4,
                          augment_copies=1, seed=seed),
        mock_recognizer=MockRecognizerConfig(alphabet="abcd", symbol_frames=6,
                                             detection_threshold=0.8),
        recognizer=RecognizerChoice(kind="mock"),
        sim=SimConfig(kind="synthetic", num_utterances=200, text_length=8,
                      num_noise_files=8, snr_mean_db=6.0, snr_spread_db=3.0),
        data=DataConfig(val_fraction=0.1),
    )
