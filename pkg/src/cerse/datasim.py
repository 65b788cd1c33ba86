"""Noisy-speech simulation: noise selection, VAD-gated SNR mixing, corpus builds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .audio import Waveform, read_wav, write_wav
from .metrics import frame_powers, vad
from .recognizer import MockRecognizer

MANIFEST_COLUMNS = ("id", "noisy", "clean", "text", "snr_db", "noise_ids")


@dataclass(frozen=True)
class MixSpec:
    speech_id: str
    noise_ids: tuple[str, ...]
    target_snr_db: float
    seed: int

    def __post_init__(self):
        if len(self.noise_ids) not in (1, 2):
            raise ValueError("a mix uses one or two noise sources")
        if not math.isfinite(self.target_snr_db):
            raise ValueError("target SNR must be finite")


def sample_mixspec(speech_ids: Sequence[str], noise_ids: Sequence[str],
                   snr_mean_db: float, snr_spread_db: float,
                   rng: np.random.Generator) -> MixSpec:
    """Draw one mixing recipe: 1 or 2 noises with equal probability, Gaussian SNR."""
    if not speech_ids or not noise_ids:
        raise ValueError("speech and noise pools must be non-empty")
    speech = speech_ids[int(rng.integers(len(speech_ids)))]
    count = min(1 if rng.random() < 0.5 else 2, len(noise_ids))
    chosen = rng.choice(len(noise_ids), size=count, replace=False)
    snr = float(rng.normal(snr_mean_db, snr_spread_db))
    return MixSpec(speech, tuple(noise_ids[int(i)] for i in chosen), snr,
                   int(rng.integers(2**31)))


def _fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Crop from a random offset; loop first when the noise is shorter than the speech."""
    if len(noise) < length:
        noise = np.tile(noise, math.ceil(length / len(noise)))
    offset = int(rng.integers(len(noise) - length + 1))
    return noise[offset : offset + length]


def mix(speech: Waveform, noises: Sequence[Waveform], target_snr_db: float,
        rng: np.random.Generator | None = None) -> tuple[Waveform, Waveform]:
    """Add scaled noise to speech at the target SNR; returns (noisy, clean).

    One or two noises are summed first and the sum is scaled as a whole. SNR is
    the power ratio over the speech's voice-active frames (within 15 dB of its
    loudest frame), with noise power measured over those same frames. The clean
    output is the input speech untouched.
    """
    if rng is None:
        rng = np.random.default_rng()
    if not 1 <= len(noises) <= 2:
        raise ValueError("mix takes one or two noise waveforms")
    noise_sum = np.zeros(len(speech))
    for noise in noises:
        if noise.sample_rate != speech.sample_rate:
            raise ValueError("sample-rate mismatch between speech and noise")
        noise_sum += _fit_noise(noise.samples, len(speech), rng)
    mask = vad(speech)
    speech_power = float(frame_powers(speech.samples, mask)[mask.active].mean())
    noise_power = float(frame_powers(noise_sum, mask)[mask.active].mean())
    if speech_power == 0.0:
        raise ValueError("speech is silent; VAD-gated SNR is undefined")
    if noise_power == 0.0:
        raise ValueError("noise is silent over the speech's active frames")
    gain = math.sqrt(speech_power / (noise_power * 10.0 ** (target_snr_db / 10.0)))
    noisy = Waveform(speech.samples + gain * noise_sum, speech.sample_rate)
    return noisy, speech


def measured_snr_db(clean: Waveform, noisy: Waveform) -> float:
    """Re-measure the VAD-gated SNR of a (clean, noisy) pair."""
    noise = noisy.samples - clean.samples
    mask = vad(clean)
    speech_power = float(frame_powers(clean.samples, mask)[mask.active].mean())
    noise_power = float(frame_powers(noise, mask)[mask.active].mean())
    return 10.0 * math.log10(speech_power / noise_power)


@dataclass(frozen=True)
class CorpusItem:
    utt_id: str
    noisy_path: Path
    clean_path: Path
    text: str
    snr_db: float
    noise_ids: tuple[str, ...]

    def load(self) -> tuple[Waveform, Waveform]:
        return read_wav(self.noisy_path), read_wav(self.clean_path)


def build_corpus(speech: Mapping[str, Waveform], texts: Mapping[str, str],
                 noises: Mapping[str, Waveform], out_dir: str | Path, *,
                 snr_mean_db: float, snr_spread_db: float,
                 repetitions: int = 1, seed: int = 0) -> Path:
    """Mix every speech utterance ``repetitions`` times with fresh noise draws.

    Writes noisy/clean WAV pairs plus a TSV manifest; fully determined by the
    seed. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    (out_dir / "noisy").mkdir(parents=True, exist_ok=True)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    noise_ids = sorted(noises)
    rng = np.random.default_rng(seed)
    rows = []
    failures = []
    for rep in range(repetitions):
        for speech_id in sorted(speech):
            spec = sample_mixspec([speech_id], noise_ids, snr_mean_db, snr_spread_db, rng)
            utt_id = f"{speech_id}_r{rep}"
            noisy, clean = mix(
                speech[speech_id], [noises[n] for n in spec.noise_ids],
                spec.target_snr_db, np.random.default_rng(spec.seed),
            )
            noisy_path = out_dir / "noisy" / f"{utt_id}.wav"
            clean_path = out_dir / "clean" / f"{utt_id}.wav"
            try:
                write_wav(noisy_path, noisy)
                write_wav(clean_path, clean)
            except OSError as exc:
                failures.append(f"{utt_id}: {exc}")
                continue
            rows.append((utt_id, noisy_path.name, clean_path.name, texts[speech_id],
                         f"{spec.target_snr_db:.4f}", ",".join(spec.noise_ids)))
    if failures:
        raise OSError("failed to write corpus files:\n" + "\n".join(failures))
    manifest = out_dir / "manifest.tsv"
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest


def load_manifest(manifest_path: str | Path) -> list[CorpusItem]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    items = []
    with open(manifest_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = tuple(next(reader))
        if header != MANIFEST_COLUMNS:
            raise ValueError(f"{manifest_path}: unexpected columns {header}")
        for row in reader:
            utt_id, noisy, clean, text, snr_db, noise_ids = row
            items.append(CorpusItem(
                utt_id, base / "noisy" / noisy, base / "clean" / clean,
                text, float(snr_db), tuple(noise_ids.split(",")),
            ))
    return items


def read_speech_manifest(path: str | Path) -> tuple[dict[str, Waveform], dict[str, str]]:
    """Read a 3-column TSV (id, wav path, transcript) of clean speech sources."""
    path = Path(path)
    speech: dict[str, Waveform] = {}
    texts: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'id<TAB>wav<TAB>text'")
            utt_id, wav, text = parts
            speech[utt_id] = read_wav(path.parent / wav)
            texts[utt_id] = text
    return speech, texts


def synthetic_noise(rng: np.random.Generator, length: int, sample_rate: int = 16000,
                    amplitude: float = 0.1) -> Waveform:
    """Colored, slowly amplitude-modulated noise.

    White noise shaped by a few random spectral bumps plus a random slow
    envelope. The spectral and temporal structure varies across files and
    within a file, so corruption hits utterances unevenly and their error
    rates spread smoothly instead of flipping between 0 and 1.
    """
    white = rng.standard_normal(length)
    spec = np.fft.rfft(white)
    freqs = np.linspace(0.0, 1.0, len(spec))
    shape = 0.15 * np.ones_like(freqs)
    for _ in range(int(rng.integers(2, 5))):
        center = rng.random()
        width = 0.05 + 0.15 * rng.random()
        height = 0.5 + rng.random()
        shape += height * np.exp(-0.5 * ((freqs - center) / width) ** 2)
    samples = np.fft.irfft(spec * shape, n=length)
    knots = 0.25 + rng.random(max(4, length // 2000))
    envelope = np.interp(
        np.linspace(0.0, 1.0, length), np.linspace(0.0, 1.0, len(knots)), knots
    )
    samples *= envelope
    samples *= amplitude / np.sqrt(np.mean(samples**2))
    return Waveform(samples, sample_rate)


def synthetic_sources(mock: MockRecognizer, num_utterances: int, text_length: int,
                      num_noise_files: int, seed: int,
                      noise_amplitude: float = 0.1
                      ) -> tuple[dict[str, Waveform], dict[str, str], dict[str, Waveform]]:
    """Generate mock-encoded utterances and colored-noise files for a synthetic corpus."""
    rng = np.random.default_rng(seed)
    alphabet = list(mock.config.alphabet)
    speech: dict[str, Waveform] = {}
    texts: dict[str, str] = {}
    max_len = 0
    for i in range(num_utterances):
        text = "".join(rng.choice(alphabet, size=text_length))
        utt_id = f"syn{i:04d}"
        wave = mock.encode(text)
        speech[utt_id] = wave
        texts[utt_id] = text
        max_len = max(max_len, len(wave))
    noises = {
        f"noise{i:03d}": synthetic_noise(rng, 2 * max_len, mock.sample_rate, noise_amplitude)
        for i in range(num_noise_files)
    }
    return speech, texts, noises
