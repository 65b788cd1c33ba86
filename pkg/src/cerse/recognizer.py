"""The black-box recognizer boundary.

Training only ever sees transcripts coming back from a ``Recognizer``; nothing
else crosses this interface and no gradients flow through it. Two
implementations are provided: an external-process adapter for real systems and
a deterministic tone-template mock that closes the loop at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import Waveform, write_wav
from .metrics import CerScore, cer, normalize_text, read_tsv
from .spectral import StftConfig, stft

TMPDIR_ENV_VAR = "CERSE_TMPDIR"


class RecognizerError(Exception):
    """External or mock recognition failed."""


class Recognizer:
    """Batch speech-to-text interface. Implementations must be deterministic in the audio."""

    descriptor: str = "recognizer"
    max_concurrency: int = 1

    def recognize(self, waves: Sequence[Waveform]) -> list[str]:
        raise NotImplementedError


@dataclass(frozen=True)
class MockRecognizerConfig:
    """Tone-template codec: each character owns a contiguous frequency band."""

    alphabet: str = "abcd"
    symbol_frames: int = 6
    band_map: dict[str, int] = field(default_factory=dict)
    detection_threshold: float = 0.8
    amplitude: float = 0.25

    def __post_init__(self):
        if len(set(self.alphabet)) < 2:
            raise ValueError("alphabet needs at least 2 distinct characters")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet characters must be unique")
        if self.symbol_frames < 3:
            raise ValueError("symbol_frames must be >= 3 (block edges are discarded)")
        if not 0.0 < self.detection_threshold < 1.0:
            raise ValueError("detection_threshold must lie in (0, 1)")
        if not self.band_map:
            object.__setattr__(
                self, "band_map", {ch: i for i, ch in enumerate(self.alphabet)}
            )
        if set(self.band_map) != set(self.alphabet):
            raise ValueError("band_map must cover exactly the alphabet")
        if len(set(self.band_map.values())) != len(self.band_map):
            raise ValueError("band indices must be disjoint")


class MockRecognizer(Recognizer):
    """Decodes tone bursts by per-band energy, one symbol per block of frames.

    A block emits the character of its highest-energy band only when that band
    holds more than ``detection_threshold`` of the block's total spectral
    energy, so broadband noise causes dropped or wrong symbols while clean
    tones decode exactly.
    """

    def __init__(self, config: MockRecognizerConfig, stft_config: StftConfig,
                 sample_rate: int = 16000):
        self.config = config
        self.stft_config = stft_config
        self.sample_rate = sample_rate
        num_bands = max(config.band_map.values()) + 1
        usable = stft_config.num_bins - 1  # DC row carries no tone
        self.band_rows = usable // num_bands
        if self.band_rows < 3:
            raise ValueError(
                f"{stft_config.num_bins} bins cannot host {num_bands} bands of >= 3 rows"
            )
        self.num_bands = num_bands
        cfg_tag = hashlib.sha256(
            repr((config, stft_config, sample_rate)).encode()
        ).hexdigest()[:12]
        self.descriptor = f"mock:{cfg_tag}"

    def _band_rows(self, band: int) -> slice:
        start = 1 + band * self.band_rows
        return slice(start, start + self.band_rows)

    def _tone_freq(self, band: int) -> float:
        center_bin = 1 + band * self.band_rows + self.band_rows // 2
        return center_bin * self.sample_rate / self.stft_config.fft_size

    def encode(self, text: str) -> Waveform:
        """Render text as back-to-back tone bursts; decodes exactly when noiseless."""
        bad = set(text) - set(self.config.alphabet)
        if bad:
            raise ValueError(f"characters not in alphabet: {sorted(bad)}")
        sym_len = self.config.symbol_frames * self.stft_config.hop
        if not text:
            return Waveform(np.zeros(self.stft_config.fft_size), self.sample_rate)
        out = np.zeros(len(text) * sym_len)
        ramp_len = min(32, sym_len // 8)
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_len) / ramp_len)
        for pos, ch in enumerate(text):
            freq = self._tone_freq(self.config.band_map[ch])
            n = np.arange(sym_len)
            tone = self.config.amplitude * np.sin(2.0 * np.pi * freq * n / self.sample_rate)
            tone[:ramp_len] *= ramp
            tone[-ramp_len:] *= ramp[::-1]
            out[pos * sym_len : (pos + 1) * sym_len] = tone
        if len(out) < self.stft_config.fft_size:
            out = np.pad(out, (0, self.stft_config.fft_size - len(out)))
        return Waveform(out, self.sample_rate)

    def _decode(self, wave: Waveform) -> str:
        power = np.abs(stft(wave, self.stft_config).values) ** 2
        num_frames = power.shape[1]
        sf = self.config.symbol_frames
        num_blocks = (num_frames - 1) // sf
        chars_by_band = {band: ch for ch, band in self.config.band_map.items()}
        out = []
        for block in range(num_blocks):
            # Frames overlapping a block boundary mix two symbols; skip them.
            frames = slice(block * sf + 1, (block + 1) * sf)
            band_energy = np.array(
                [power[self._band_rows(k), frames].sum() for k in range(self.num_bands)]
            )
            total = power[1:, frames].sum()
            best = int(band_energy.argmax())
            if band_energy[best] > self.config.detection_threshold * total:
                out.append(chars_by_band[best])
        return "".join(out)

    def recognize(self, waves: Sequence[Waveform]) -> list[str]:
        return [self._decode(w) for w in waves]


def recognize_external(command: str, waves: Sequence[Waveform], *,
                       timeout_s: float = 300.0,
                       tmp_root: str | None = None) -> list[str]:
    """Run an external recognizer command over a batch of waveforms.

    The command template must contain ``{in_dir}`` and ``{out_tsv}``; it
    receives a directory of WAV files and must write a UTF-8 TSV of
    ``id<TAB>text`` covering every input id.
    """
    if "{in_dir}" not in command or "{out_tsv}" not in command:
        raise ValueError("command template must contain {in_dir} and {out_tsv}")
    tmp_root = tmp_root or os.environ.get(TMPDIR_ENV_VAR)
    with tempfile.TemporaryDirectory(dir=tmp_root) as tmp:
        in_dir = Path(tmp) / "wavs"
        in_dir.mkdir()
        ids = [f"utt{i:05d}" for i in range(len(waves))]
        for utt_id, wave in zip(ids, waves):
            write_wav(in_dir / f"{utt_id}.wav", wave)
        out_tsv = Path(tmp) / "hyps.tsv"
        argv = shlex.split(command.format(in_dir=in_dir, out_tsv=out_tsv))
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise RecognizerError(f"recognizer timed out after {timeout_s:.0f} s") from exc
        if proc.returncode != 0:
            raise RecognizerError(
                f"recognizer exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        try:
            table = read_tsv(out_tsv)
        except (OSError, ValueError) as exc:
            raise RecognizerError(f"malformed recognizer output: {exc}") from exc
        missing = [utt_id for utt_id in ids if utt_id not in table]
        if missing:
            raise RecognizerError(f"recognizer output missing ids: {missing[:5]}")
        return [table[utt_id] for utt_id in ids]


class ExternalRecognizer(Recognizer):
    def __init__(self, command: str, timeout_s: float = 300.0,
                 max_concurrency: int = 1, tmp_root: str | None = None):
        self.command = command
        self.timeout_s = timeout_s
        self.max_concurrency = max_concurrency
        self.tmp_root = tmp_root
        cmd_tag = hashlib.sha256(command.encode()).hexdigest()[:12]
        self.descriptor = f"external:{cmd_tag}"

    def recognize(self, waves: Sequence[Waveform]) -> list[str]:
        return recognize_external(
            self.command, waves, timeout_s=self.timeout_s, tmp_root=self.tmp_root
        )


def hash_waveform(wave: Waveform) -> str:
    digest = hashlib.sha256(wave.samples.tobytes())
    digest.update(str(wave.sample_rate).encode())
    return digest.hexdigest()


class QScorer:
    """Recognize-and-score with content-addressed caching.

    Recognition dominates training cost and the clean/noisy signals never
    change across epochs, so scores are memoized by (recognizer, audio hash,
    reference hash) and optionally persisted as append-only JSON lines.
    ``invocations`` counts actual recognizer calls, which lets tests assert
    that cached paths and frozen phases never touch the recognizer.
    """

    def __init__(self, recognizer: Recognizer, cache_path: str | Path | None = None):
        self.recognizer = recognizer
        self.invocations = 0
        self._cache: dict[tuple[str, str, str], CerScore] = {}
        self._lock = threading.Lock()
        self._cache_path = Path(cache_path) if cache_path else None
        if self._cache_path and self._cache_path.exists():
            self._load_cache()

    def _load_cache(self):
        with open(self._cache_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                key = (rec["recognizer"], rec["audio"], rec["ref"])
                self._cache[key] = CerScore(
                    rec["value"], rec["insertions"], rec["deletions"], rec["substitutions"]
                )

    def _persist(self, key: tuple[str, str, str], score: CerScore):
        if not self._cache_path:
            return
        rec = {
            "recognizer": key[0], "audio": key[1], "ref": key[2],
            "value": score.value, "insertions": score.insertions,
            "deletions": score.deletions, "substitutions": score.substitutions,
        }
        with open(self._cache_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")

    def _key(self, wave: Waveform, ref: str) -> tuple[str, str, str]:
        ref_hash = hashlib.sha256(normalize_text(ref).encode()).hexdigest()
        return (self.recognizer.descriptor, hash_waveform(wave), ref_hash)

    def score(self, wave: Waveform, ref: str) -> CerScore:
        return self.score_batch([wave], [ref])[0]

    def score_batch(self, waves: Sequence[Waveform], refs: Sequence[str]) -> list[CerScore]:
        if len(waves) != len(refs):
            raise ValueError("waves and refs must have equal length")
        keys = [self._key(w, r) for w, r in zip(waves, refs)]
        with self._lock:
            miss_idx = [i for i, k in enumerate(keys) if k not in self._cache]
        if miss_idx:
            # Recognize each distinct missing waveform once.
            first_by_key: dict[tuple[str, str, str], int] = {}
            for i in miss_idx:
                first_by_key.setdefault(keys[i], i)
            order = list(first_by_key.values())
            self.invocations += 1
            texts = self.recognizer.recognize([waves[i] for i in order])
            with self._lock:
                for i, text in zip(order, texts):
                    score = cer(text, refs[i])
                    self._cache[keys[i]] = score
                    self._persist(keys[i], score)
        with self._lock:
            return [self._cache[k] for k in keys]
