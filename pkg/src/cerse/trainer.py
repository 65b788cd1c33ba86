"""Alternating optimization: the CER estimator learns to mimic the recognizer's
scores, then the mask network is trained against the frozen estimator."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import math
import time
import zlib
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .audio import Waveform
from .augment import AugmentConfig, apply_specaugment
from .datasim import CorpusItem
from .metrics import seg_snr
from .nets import CerEstimator, MaskNet, estimate_cer, save_checkpoint, se_forward
from .recognizer import QScorer, RecognizerError
from .spectral import (
    NormStats,
    Spectrogram,
    StftConfig,
    normalize_full,
    normalize_std,
    stft,
    synthesize_enhanced,
    waveform_from_magnitude,
)

CURVE_COLUMNS = ("epoch", "L_CER", "L_SE", "val_estimator_mae",
                 "val_cer_noisy", "val_cer_enhanced")


class NumericalInstabilityError(Exception):
    """A training loss went non-finite; a diagnostic snapshot may be attached."""

    def __init__(self, message: str, snapshot_path: Path | None = None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    lr_cer: float = 1e-4
    lr_se: float = 1e-4
    alternation: tuple[int, int] = (1, 1)
    augment_copies: int = 1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    replay_buffer: bool = False
    replay_capacity: int = 256

    def __post_init__(self):
        object.__setattr__(self, "alternation", tuple(int(s) for s in self.alternation))
        if min(self.epochs, self.batch_size) < 1 or min(self.lr_cer, self.lr_se) <= 0:
            raise ValueError("epochs, batch_size and learning rates must be positive")
        if len(self.alternation) != 2 or min(self.alternation) < 1:
            raise ValueError("alternation must be two counts >= 1")
        if self.augment_copies < 0:
            raise ValueError("augment_copies must be >= 0")


@dataclass
class TrainSample:
    """One (noisy, clean, transcript) triplet with its cached spectral forms."""

    sample_id: str
    noisy: Waveform
    clean: Waveform
    text: str
    noisy_spec: Spectrogram  # complex; phase source for synthesis
    noisy_mag: np.ndarray  # linear magnitude, what masks are applied to
    feat: np.ndarray  # fully normalized rows; the mask net's input
    noisy_std: np.ndarray  # scale-only normalized noisy magnitude
    clean_std: np.ndarray  # clean magnitude on the noisy rows' scale
    sigma: NormStats


def prepare_sample(sample_id: str, noisy: Waveform, clean: Waveform, text: str,
                   stft_config: StftConfig, log_compress: bool = False) -> TrainSample:
    """Compute and cache every spectral form a training step needs.

    Row scales come from the noisy spectrogram only and are shared with the
    clean reference. With ``log_compress`` the normalized forms are built from
    log1p magnitudes; synthesis always stays in the linear domain.
    """
    if len(noisy) != len(clean):
        raise ValueError(f"{sample_id}: noisy and clean lengths differ")
    noisy_spec = stft(noisy, stft_config)
    noisy_mag = np.abs(noisy_spec.values)
    clean_mag = np.abs(stft(clean, stft_config).values)
    rep = np.log1p if log_compress else np.asarray
    feat, sigma = normalize_full(rep(noisy_mag))
    return TrainSample(
        sample_id=sample_id,
        noisy=noisy,
        clean=clean,
        text=text,
        noisy_spec=noisy_spec,
        noisy_mag=noisy_mag,
        feat=feat,
        noisy_std=normalize_std(rep(noisy_mag), sigma),
        clean_std=normalize_std(rep(clean_mag), sigma),
        sigma=sigma,
    )


def prepare_corpus(items: Sequence[CorpusItem], stft_config: StftConfig,
                   log_compress: bool = False) -> list[TrainSample]:
    samples = []
    for item in items:
        noisy, clean = item.load()
        samples.append(
            prepare_sample(item.utt_id, noisy, clean, item.text, stft_config, log_compress)
        )
    return samples


@dataclass
class EpochReport:
    epoch: int
    loss_cer: float
    loss_se: float
    val_estimator_mae: float | None
    val_cer_noisy: float | None
    val_cer_enhanced: float | None
    wall_time_s: float

    def to_dict(self) -> dict:
        return asdict(self)


@contextlib.contextmanager
def freeze_params(module: torch.nn.Module):
    """Mark a network's parameters non-trainable for the duration."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def _state_digest(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _augment_seed(base_seed: int, epoch: int, sample_id: str, copy: int, stream: int) -> int:
    entropy = (base_seed, epoch, zlib.crc32(sample_id.encode()), copy, stream)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


class Trainer:
    """Two-phase loop with strict freezing.

    Phase one updates only the estimator toward the recognizer's true scores on
    noisy, clean, enhanced, and augmented signals; phase two updates only the
    mask network to drive the frozen estimator's score toward zero, with no
    recognizer involvement at all.
    """

    def __init__(self, masknet: MaskNet, estimator: CerEstimator, qscorer: QScorer,
                 config: TrainConfig, stft_config: StftConfig,
                 augment_config: AugmentConfig | None = None,
                 log_compress: bool = False, dtype: torch.dtype = torch.float32):
        self.masknet = masknet
        self.estimator = estimator
        self.qscorer = qscorer
        self.config = config
        self.stft_config = stft_config
        self.augment_config = augment_config or AugmentConfig()
        self.log_compress = log_compress
        self.dtype = dtype
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_se = torch.optim.Adam(masknet.parameters(), lr=config.lr_se, betas=betas)
        self.opt_est = torch.optim.Adam(estimator.parameters(), lr=config.lr_cer, betas=betas)
        self.epoch = 0
        self._shuffle_rng = np.random.default_rng(config.seed)
        self._tensor_cache: dict[str, tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}
        self._epoch_enhanced_q: dict[str, float] = {}
        self._replay: deque[tuple[torch.Tensor, float]] = deque(maxlen=config.replay_capacity)

    # -- tensors and signal plumbing -------------------------------------------------

    def _tensors(self, sample: TrainSample):
        cached = self._tensor_cache.get(sample.sample_id)
        if cached is None:
            to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(self.dtype)
            cached = (to_t(sample.feat.T)[None], to_t(sample.noisy_std), to_t(sample.clean_std))
            self._tensor_cache[sample.sample_id] = cached
        return cached

    def _mask(self, sample: TrainSample, grad: bool) -> torch.Tensor:
        """(bins, frames) mask from the current mask net."""
        feat_t, _, _ = self._tensors(sample)
        if grad:
            return self.masknet(feat_t)[0].T
        with torch.no_grad():
            return self.masknet(feat_t)[0].T

    def _rep(self, mag: np.ndarray) -> np.ndarray:
        return np.log1p(mag) if self.log_compress else mag

    def _enhanced_q(self, sample: TrainSample) -> float:
        """True recognizer score of the enhanced signal, recomputed once per epoch."""
        value = self._epoch_enhanced_q.get(sample.sample_id)
        if value is None:
            mask = self._mask(sample, grad=False).double().numpy()
            wave = synthesize_enhanced(sample.noisy_spec, mask)
            value = self.qscorer.score(wave, sample.text).value
            self._epoch_enhanced_q[sample.sample_id] = value
        return value

    # -- losses ----------------------------------------------------------------------

    def _estimator_pairs(self, sample: TrainSample) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack the (evaluated, reference) inputs and true-score targets for one sample."""
        _, noisy_std_t, clean_std_t = self._tensors(sample)
        mask_t = self._mask(sample, grad=False)
        inputs = [noisy_std_t, clean_std_t, mask_t * noisy_std_t]
        targets = [
            self.qscorer.score(sample.noisy, sample.text).value,
            self.qscorer.score(sample.clean, sample.text).value,
            self._enhanced_q(sample),
        ]
        if self.config.augment_copies:
            enhanced_mag = mask_t.double().numpy() * sample.noisy_mag
            sources = ((sample.noisy_mag, 0), (enhanced_mag, 1))
            for copy in range(self.config.augment_copies):
                for mag, stream in sources:
                    seed = _augment_seed(
                        self.config.seed, self.epoch, sample.sample_id, copy, stream
                    )
                    aug = apply_specaugment(mag, self.augment_config, seed)
                    wave = waveform_from_magnitude(aug, sample.noisy_spec)
                    targets.append(self.qscorer.score(wave, sample.text).value)
                    scaled = normalize_std(self._rep(aug), sample.sigma)
                    inputs.append(torch.from_numpy(scaled).to(self.dtype))
        pairs = torch.stack([torch.stack([x, clean_std_t]) for x in inputs])
        return pairs, torch.tensor(targets, dtype=self.dtype)

    def cer_estimator_loss(self, batch: Sequence[TrainSample]) -> torch.Tensor:
        """Mean over the batch of the summed squared estimator-vs-recognizer gaps."""
        if not batch:
            raise ValueError("empty batch")
        losses = []
        for sample in batch:
            pairs, targets = self._estimator_pairs(sample)
            preds = self.estimator(pairs)
            losses.append(((preds - targets) ** 2).sum())
            if self.config.replay_buffer:
                self._replay.append((pairs[2].detach().clone(), float(targets[2])))
        loss = torch.stack(losses).mean()
        if self.config.replay_buffer and len(self._replay) > len(batch):
            picks = self._shuffle_rng.choice(len(self._replay), size=len(batch), replace=False)
            replayed = []
            for i in picks:
                pair, target = self._replay[int(i)]
                replayed.append((self.estimator(pair[None])[0] - target) ** 2)
            loss = loss + torch.stack(replayed).mean()
        return loss

    def se_loss(self, batch: Sequence[TrainSample]) -> torch.Tensor:
        """Mean squared estimator score on (enhanced, clean) pairs; no recognizer calls."""
        if not batch:
            raise ValueError("empty batch")
        was_training = self.estimator.training
        self.estimator.eval()  # frozen phase: power-iteration state must not move
        try:
            scores = []
            for sample in batch:
                _, noisy_std_t, clean_std_t = self._tensors(sample)
                mask_t = self._mask(sample, grad=True)
                pair = torch.stack([mask_t * noisy_std_t, clean_std_t])[None]
                scores.append(self.estimator(pair)[0])
            return torch.stack(scores).pow(2).mean()
        finally:
            self.estimator.train(was_training)

    # -- steps -----------------------------------------------------------------------

    def _check_finite(self, loss: torch.Tensor, phase: str) -> None:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericalInstabilityError(f"non-finite {phase} loss: {value}")

    def estimator_step(self, batch: Sequence[TrainSample]) -> float:
        if __debug__:
            se_before = _state_digest(self.masknet)
        self.estimator.train()
        self.opt_est.zero_grad()
        with freeze_params(self.masknet):
            loss = self.cer_estimator_loss(batch)
            self._check_finite(loss, "estimator")
            loss.backward()
        self.opt_est.step()
        if __debug__:
            assert _state_digest(self.masknet) == se_before, "SE params moved in estimator phase"
        return float(loss.detach())

    def se_step(self, batch: Sequence[TrainSample]) -> float:
        if __debug__:
            est_before = _state_digest(self.estimator)
        invocations_before = self.qscorer.invocations
        self.opt_se.zero_grad()
        with freeze_params(self.estimator):
            loss = self.se_loss(batch)
            self._check_finite(loss, "enhancement")
            loss.backward()
        self.opt_se.step()
        assert self.qscorer.invocations == invocations_before, "recognizer used in SE phase"
        if __debug__:
            assert _state_digest(self.estimator) == est_before, "estimator moved in SE phase"
        return float(loss.detach())

    # -- epochs ----------------------------------------------------------------------

    def train_epoch(self, samples: Sequence[TrainSample],
                    val_samples: Sequence[TrainSample] = ()) -> EpochReport:
        if not samples:
            raise ValueError("no training samples")
        started = time.monotonic()
        self._epoch_enhanced_q.clear()
        order = self._shuffle_rng.permutation(len(samples))
        batches = [
            [samples[int(i)] for i in order[pos : pos + self.config.batch_size]]
            for pos in range(0, len(samples), self.config.batch_size)
        ]
        cer_steps, se_steps = self.config.alternation
        est_losses, se_losses = [], []
        for batch in batches:
            for _ in range(cer_steps):
                est_losses.append(self.estimator_step(batch))
            for _ in range(se_steps):
                se_losses.append(self.se_step(batch))
        self.epoch += 1
        val = self.validate(val_samples) if val_samples else {}
        return EpochReport(
            epoch=self.epoch,
            loss_cer=float(np.mean(est_losses)),
            loss_se=float(np.mean(se_losses)),
            val_estimator_mae=val.get("estimator_mae"),
            val_cer_noisy=val.get("cer_noisy"),
            val_cer_enhanced=val.get("cer_enhanced"),
            wall_time_s=time.monotonic() - started,
        )

    def validate(self, val_samples: Sequence[TrainSample]) -> dict:
        """Estimator-vs-recognizer error and true CERs on held-out samples."""
        abs_errors, noisy_cers, enhanced_cers = [], [], []
        for sample in val_samples:
            true_noisy = self.qscorer.score(sample.noisy, sample.text).value
            predicted = estimate_cer(self.estimator, sample.noisy_std, sample.clean_std)
            abs_errors.append(abs(predicted - true_noisy))
            noisy_cers.append(true_noisy)
            mask = self._mask(sample, grad=False).double().numpy()
            enhanced = synthesize_enhanced(sample.noisy_spec, mask)
            enhanced_cers.append(self.qscorer.score(enhanced, sample.text).value)
        return {
            "estimator_mae": float(np.mean(abs_errors)),
            "cer_noisy": float(np.mean(noisy_cers)),
            "cer_enhanced": float(np.mean(enhanced_cers)),
        }

    # -- persistence -----------------------------------------------------------------

    def state(self) -> dict:
        return {
            "epoch": self.epoch,
            "masknet": self.masknet.state_dict(),
            "estimator": self.estimator.state_dict(),
            "opt_se": self.opt_se.state_dict(),
            "opt_est": self.opt_est.state_dict(),
            "shuffle_rng": self._shuffle_rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    def load_state(self, state: dict) -> None:
        self.epoch = state["epoch"]
        self.masknet.load_state_dict(state["masknet"])
        self.estimator.load_state_dict(state["estimator"])
        self.opt_se.load_state_dict(state["opt_se"])
        self.opt_est.load_state_dict(state["opt_est"])
        self._shuffle_rng.bit_generator.state = state["shuffle_rng"]
        torch.set_rng_state(state["torch_rng"])
        self._tensor_cache.clear()
        self._epoch_enhanced_q.clear()

    def fit(self, samples: Sequence[TrainSample], val_samples: Sequence[TrainSample] = (),
            out_dir: str | Path | None = None, config_dict: dict | None = None
            ) -> list[EpochReport]:
        """Run the remaining epochs, checkpointing and logging to ``out_dir`` if given."""
        out_dir = Path(out_dir) if out_dir else None
        config_dict = config_dict or {}
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        reports: list[EpochReport] = []
        best_val = math.inf
        while self.epoch < self.config.epochs:
            try:
                report = self.train_epoch(samples, val_samples)
            except NumericalInstabilityError as exc:
                if out_dir:
                    snapshot = out_dir / "diagnostic_snapshot.pt"
                    save_checkpoint(snapshot, self.state(), config_dict)
                    raise NumericalInstabilityError(str(exc), snapshot) from exc
                raise
            reports.append(report)
            if out_dir:
                with open(out_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(report.to_dict()) + "\n")
                write_curves(reports, out_dir / "curves.csv", append_from=len(reports) - 1)
                save_checkpoint(out_dir / f"epoch{report.epoch:03d}.pt",
                                self.state(), config_dict)
                save_checkpoint(out_dir / "last.pt", self.state(), config_dict)
                val = report.val_cer_enhanced
                if val is not None and val < best_val:
                    best_val = val
                    save_checkpoint(out_dir / "best.pt", self.state(), config_dict)
        return reports


def write_curves(reports: Sequence[EpochReport], path: str | Path, append_from: int = 0) -> None:
    """Training-curve CSV, one row per epoch."""
    path = Path(path)
    new_file = append_from == 0 or not path.exists()
    with open(path, "w" if new_file else "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(CURVE_COLUMNS)
            rows = reports
        else:
            rows = reports[append_from:]
        for r in rows:
            writer.writerow([r.epoch, r.loss_cer, r.loss_se, r.val_estimator_mae,
                             r.val_cer_noisy, r.val_cer_enhanced])


def run_external_scorer(command: str, reference: Waveform, estimate: Waveform,
                        tmp_root: str | None = None, timeout_s: float = 300.0) -> dict:
    """Shell out to a configured metric tool; it must print one JSON object."""
    import shlex
    import subprocess
    import tempfile

    from .audio import write_wav

    if "{ref}" not in command or "{est}" not in command:
        raise ValueError("scorer command must contain {ref} and {est}")
    with tempfile.TemporaryDirectory(dir=tmp_root) as tmp:
        ref_path = Path(tmp) / "ref.wav"
        est_path = Path(tmp) / "est.wav"
        write_wav(ref_path, reference)
        write_wav(est_path, estimate)
        argv = shlex.split(command.format(ref=ref_path, est=est_path))
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise RecognizerError(f"external scorer timed out after {timeout_s:.0f} s") from exc
        if proc.returncode != 0:
            raise RecognizerError(f"external scorer exited {proc.returncode}: "
                                  f"{proc.stderr.strip()[:500]}")
        try:
            return json.loads(proc.stdout)
        except json.JSONDecodeError as exc:
            raise RecognizerError(f"external scorer printed invalid JSON: {exc}") from exc


def evaluate(masknet: MaskNet, samples: Sequence[TrainSample], qscorer: QScorer,
             scorer_command: str | None = None, tmp_root: str | None = None
             ) -> tuple[list[dict], dict]:
    """Score every utterance before and after enhancement.

    Returns per-utterance rows and an aggregate carrying both corpus-CER
    conventions (mean of per-utterance values and pooled error counts).
    """
    rows = []
    pooled = {"noisy": [0, 0], "enhanced": [0, 0]}  # [errors, ref chars]
    for sample in samples:
        q_noisy = qscorer.score(sample.noisy, sample.text)
        mask = se_forward(masknet, sample.feat)
        enhanced = synthesize_enhanced(sample.noisy_spec, mask)
        q_enhanced = qscorer.score(enhanced, sample.text)
        ref_chars = len(sample.text)
        pooled["noisy"][0] += q_noisy.total_errors
        pooled["noisy"][1] += ref_chars
        pooled["enhanced"][0] += q_enhanced.total_errors
        pooled["enhanced"][1] += ref_chars
        row = {
            "id": sample.sample_id,
            "cer_noisy": q_noisy.value,
            "cer_enhanced": q_enhanced.value,
            "segsnr_noisy": seg_snr(sample.clean, sample.noisy),
            "segsnr_enhanced": seg_snr(sample.clean, enhanced),
            "external": "n/a",
        }
        if scorer_command:
            row["external"] = run_external_scorer(
                scorer_command, sample.clean, enhanced, tmp_root
            )
        rows.append(row)
    aggregate = {
        "type": "aggregate",
        "num_utterances": len(rows),
        "cer_noisy_mean": float(np.mean([r["cer_noisy"] for r in rows])),
        "cer_enhanced_mean": float(np.mean([r["cer_enhanced"] for r in rows])),
        "cer_noisy_pooled": min(pooled["noisy"][0] / max(pooled["noisy"][1], 1), 1.0),
        "cer_enhanced_pooled": min(pooled["enhanced"][0] / max(pooled["enhanced"][1], 1), 1.0),
        "segsnr_noisy_mean": float(np.mean([r["segsnr_noisy"] for r in rows])),
        "segsnr_enhanced_mean": float(np.mean([r["segsnr_enhanced"] for r in rows])),
    }
    return rows, aggregate
