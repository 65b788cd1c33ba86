"""Recognition-centric speech enhancement.

Trains a time-frequency mask network to minimize the character error rate of
an arbitrary black-box recognizer by alternating it with a differentiable
surrogate that learns to mimic the recognizer's scores.
"""

from .audio import Waveform, read_wav, write_wav
from .augment import AugmentConfig, apply_specaugment
from .config import RunConfig, load_config, synthetic_config
from .metrics import CerScore, cer, edit_alignment, normalize_text, seg_snr, vad
from .nets import CerEstimator, CerEstimatorConfig, MaskNet, SeModelConfig
from .recognizer import (
    ExternalRecognizer,
    MockRecognizer,
    MockRecognizerConfig,
    QScorer,
    Recognizer,
)
from .spectral import (
    NormStats,
    Spectrogram,
    StftConfig,
    apply_mask,
    center_rows,
    istft,
    normalize_full,
    normalize_std,
    row_std,
    stft,
    synthesize_enhanced,
)
from .trainer import TrainConfig, Trainer, TrainSample, evaluate, prepare_sample

__version__ = "0.1.0"
