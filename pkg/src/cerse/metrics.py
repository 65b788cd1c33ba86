"""Character error rate via edit alignment, frame-power VAD, and segmental SNR."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform

VAD_THRESHOLD_DB = 15.0
SNR_FRAME_LEN = 512
SNR_FRAME_HOP = 256
SEGSNR_MIN_DB = -10.0
SEGSNR_MAX_DB = 35.0
_EPS = 1e-12


def normalize_text(text: str) -> str:
    """Lowercase, collapse runs of whitespace to single spaces, trim. Idempotent."""
    return re.sub(r"\s+", " ", text.lower()).strip()


@dataclass(frozen=True)
class CerScore:
    value: float
    insertions: int
    deletions: int
    substitutions: int

    @property
    def total_errors(self) -> int:
        return self.insertions + self.deletions + self.substitutions


def edit_alignment(hyp: str, ref: str) -> tuple[int, int, int]:
    """Minimal-cost character alignment counts (insertions, deletions, substitutions).

    Unit costs. Among minimal alignments, substitutions are preferred over
    insertion/deletion pairs, which pins the counts uniquely: given the total
    distance and maximal substitution count, I - D = len(hyp) - len(ref).
    """
    m, n = len(hyp), len(ref)
    # dp holds (cost, -substitutions), minimized lexicographically.
    prev = [(j, 0) for j in range(n + 1)]
    for i in range(1, m + 1):
        cur = [(i, 0)]
        hc = hyp[i - 1]
        for j in range(1, n + 1):
            dc, ds = prev[j - 1]
            if hc == ref[j - 1]:
                best = (dc, ds)
            else:
                best = (dc + 1, ds - 1)
            ic, isub = prev[j]
            cand = (ic + 1, isub)
            if cand < best:
                best = cand
            ec, es = cur[j - 1]
            cand = (ec + 1, es)
            if cand < best:
                best = cand
            cur.append(best)
        prev = cur
    cost, neg_subs = prev[n]
    subs = -neg_subs
    ins = (cost - subs + (m - n)) // 2
    dels = (cost - subs - (m - n)) // 2
    return ins, dels, subs


def cer(hyp: str, ref: str) -> CerScore:
    """Fraction of character edits against the reference length, capped at 1.0.

    Raw (I+D+S)/|ref| can exceed 1 when the hypothesis carries many insertions;
    the cap keeps extreme outputs from dominating averages and training targets.
    """
    hyp = normalize_text(hyp)
    ref = normalize_text(ref)
    if not ref:
        raise ValueError("reference transcript is empty; CER is undefined")
    ins, dels, subs = edit_alignment(hyp, ref)
    return CerScore(min((ins + dels + subs) / len(ref), 1.0), ins, dels, subs)


def frame_signal(samples: np.ndarray, frame_len: int = SNR_FRAME_LEN, hop: int = SNR_FRAME_HOP) -> np.ndarray:
    """(num_frames, frame_len) view; a signal shorter than one frame is one short frame."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < frame_len:
        return samples[None, :]
    return np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::hop]


@dataclass(frozen=True)
class VadMask:
    """Per-frame activity decisions; frame i covers samples [i*hop, i*hop + frame_len)."""

    active: np.ndarray
    frame_len: int
    hop: int

    def sample_mask(self, num_samples: int) -> np.ndarray:
        """Boolean per-sample mask covering every sample of an active frame."""
        mask = np.zeros(num_samples, dtype=bool)
        for i in np.flatnonzero(self.active):
            mask[i * self.hop : i * self.hop + self.frame_len] = True
        return mask


def vad(wave: Waveform, threshold_db: float = VAD_THRESHOLD_DB,
        frame_len: int = SNR_FRAME_LEN, hop: int = SNR_FRAME_HOP) -> VadMask:
    """Mark frames within threshold_db of the loudest frame as voice-active."""
    if len(wave) == 0:
        raise ValueError("cannot run VAD on an empty waveform")
    frames = frame_signal(wave.samples, frame_len, hop)
    power = np.mean(frames**2, axis=1)
    active = power >= power.max() * 10.0 ** (-threshold_db / 10.0)
    return VadMask(active, frame_len, hop)


def frame_powers(samples: np.ndarray, mask: VadMask) -> np.ndarray:
    """Mean-square power of the signal over each of the mask's frames."""
    frames = frame_signal(samples, mask.frame_len, mask.hop)
    if frames.shape[0] < len(mask.active):
        raise ValueError("signal too short for the VAD mask's framing")
    return np.mean(frames[: len(mask.active)] ** 2, axis=1)


def seg_snr(ref: Waveform, est: Waveform,
            frame_len: int = SNR_FRAME_LEN, hop: int = SNR_FRAME_HOP) -> float:
    """Mean per-frame SNR in dB, each frame clipped to [-10, 35]."""
    if len(ref) != len(est):
        raise ValueError(f"length mismatch: ref {len(ref)} vs est {len(est)}")
    ref_frames = frame_signal(ref.samples, frame_len, hop)
    err_frames = frame_signal(ref.samples - est.samples, frame_len, hop)
    num = np.sum(ref_frames**2, axis=1) + _EPS
    den = np.sum(err_frames**2, axis=1) + _EPS
    per_frame = np.clip(10.0 * np.log10(num / den), SEGSNR_MIN_DB, SEGSNR_MAX_DB)
    return float(per_frame.mean())


def read_tsv(path: str | Path) -> dict[str, str]:
    """Read a 2-column UTF-8 TSV of (utterance id, text)."""
    table: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'id<TAB>text', got {line!r}")
            table[parts[0]] = parts[1]
    return table


def batch_cer(refs: dict[str, str], hyps: dict[str, str]) -> tuple[list[dict], dict]:
    """Score every reference utterance; returns per-utterance rows plus an aggregate.

    The aggregate reports both conventions: errors pooled over the corpus and
    the mean of per-utterance capped CERs.
    """
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise ValueError(f"hypotheses missing for ids: {', '.join(missing[:5])}")
    rows = []
    total_errors = 0
    total_ref_chars = 0
    for utt_id in refs:
        score = cer(hyps[utt_id], refs[utt_id])
        ref_len = len(normalize_text(refs[utt_id]))
        total_errors += score.total_errors
        total_ref_chars += ref_len
        rows.append({
            "id": utt_id,
            "cer": score.value,
            "insertions": score.insertions,
            "deletions": score.deletions,
            "substitutions": score.substitutions,
            "ref_chars": ref_len,
        })
    aggregate = {
        "type": "aggregate",
        "num_utterances": len(rows),
        "cer_mean": float(np.mean([r["cer"] for r in rows])) if rows else 0.0,
        "cer_pooled": min(total_errors / total_ref_chars, 1.0) if total_ref_chars else 0.0,
        "total_errors": total_errors,
        "total_ref_chars": total_ref_chars,
    }
    return rows, aggregate


def score_transcript_files(ref_path: str | Path, hyp_path: str | Path, out_path: str | Path) -> dict:
    """Batch-score hypothesis vs reference TSVs, writing JSON lines. Returns the aggregate."""
    rows, aggregate = batch_cer(read_tsv(ref_path), read_tsv(hyp_path))
    with open(out_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
        fh.write(json.dumps(aggregate) + "\n")
    return aggregate
