"""Operator entry points: simulate | train | enhance | evaluate.

Exit codes are a stable scripting contract: 0 success, 2 configuration or
input error, 3 numeric abort (diagnostic snapshot written), 4 recognizer
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .audio import read_wav, write_wav
from .config import (
    ConfigError,
    RunConfig,
    config_to_dict,
    load_config,
    synthetic_config,
)
from .datasim import build_corpus, load_manifest, read_speech_manifest, synthetic_sources
from .nets import (
    CerEstimator,
    CheckpointError,
    MaskNet,
    SeModelConfig,
    load_checkpoint,
    se_forward,
)
from .recognizer import ExternalRecognizer, MockRecognizer, QScorer, RecognizerError
from .spectral import StftConfig, normalize_full, stft, synthesize_enhanced
from .trainer import (
    NumericalInstabilityError,
    Trainer,
    evaluate,
    prepare_corpus,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_RECOGNIZER = 4


def _resolve_config(args) -> RunConfig:
    if getattr(args, "preset", None):
        if args.preset != "synthetic":
            raise ConfigError(f"unknown preset {args.preset!r}")
        cfg = synthetic_config()
    elif getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        raise ConfigError("either --config or --preset is required")
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=args.seed)
        )
    return cfg


def _build_recognizer(cfg: RunConfig):
    if cfg.recognizer.kind == "mock":
        return MockRecognizer(cfg.mock_recognizer, cfg.stft, cfg.sample_rate)
    return ExternalRecognizer(
        cfg.recognizer.command,
        timeout_s=cfg.recognizer.timeout_s,
        max_concurrency=cfg.recognizer.max_concurrency,
    )


def _seed_everything(seed: int) -> None:
    np.random.seed(seed)
    torch.manual_seed(seed)


def _split_validation(samples, val_fraction: float, seed: int):
    n_val = int(round(len(samples) * val_fraction))
    order = np.random.default_rng((seed, 0x5EED)).permutation(len(samples))
    val_idx = set(int(i) for i in order[:n_val])
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [samples[i] for i in sorted(val_idx)]
    return train, val


def cmd_simulate(args) -> None:
    cfg = _resolve_config(args)
    seed = cfg.train.seed
    out = Path(args.out)
    if cfg.sim.kind == "synthetic":
        mock = MockRecognizer(cfg.mock_recognizer, cfg.stft, cfg.sample_rate)
        speech, texts, noises = synthetic_sources(
            mock, cfg.sim.num_utterances, cfg.sim.text_length,
            cfg.sim.num_noise_files, seed, cfg.sim.noise_amplitude,
        )
    else:
        speech, texts = read_speech_manifest(cfg.sim.speech_manifest)
        noise_dir = Path(cfg.sim.noise_dir)
        if not noise_dir.is_dir():
            raise ConfigError(f"noise directory not found: {noise_dir}")
        noises = {p.stem: read_wav(p) for p in sorted(noise_dir.glob("*.wav"))}
        if not noises:
            raise ConfigError(f"no WAV files in noise directory: {noise_dir}")
    manifest = build_corpus(
        speech, texts, noises, out,
        snr_mean_db=cfg.sim.snr_mean_db, snr_spread_db=cfg.sim.snr_spread_db,
        repetitions=cfg.sim.repetitions, seed=seed,
    )
    items = load_manifest(manifest)
    print(f"simulated {len(items)} noisy/clean pairs "
          f"({len(speech)} utterances x {cfg.sim.repetitions} repetitions) -> {manifest}")


def cmd_train(args) -> None:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = load_manifest(Path(args.corpus) / "manifest.tsv")
    samples = prepare_corpus(items, cfg.stft, cfg.features.log_compress)
    train_samples, val_samples = _split_validation(
        samples, cfg.data.val_fraction, cfg.train.seed
    )
    _seed_everything(cfg.train.seed)
    masknet = MaskNet(cfg.se_model)
    estimator = CerEstimator(cfg.cer_estimator)
    qscorer = QScorer(_build_recognizer(cfg), cache_path=out / "qcache.jsonl")
    trainer = Trainer(
        masknet, estimator, qscorer, cfg.train, cfg.stft,
        augment_config=cfg.augment, log_compress=cfg.features.log_compress,
    )
    config_dict = config_to_dict(cfg)
    if args.resume:
        payload = load_checkpoint(out / "last.pt", expected_config=config_dict)
        trainer.load_state(payload["state"])
        print(f"resumed at epoch {trainer.epoch}")
    reports = trainer.fit(train_samples, val_samples, out_dir=out, config_dict=config_dict)
    if reports:
        last = reports[-1]
        print(f"trained to epoch {last.epoch}: L_CER={last.loss_cer:.4f} "
              f"L_SE={last.loss_se:.4f} val_cer_enhanced={last.val_cer_enhanced}")
    else:
        print("nothing to do: checkpoint already at the configured epoch count")


def _masknet_from_checkpoint(payload: dict) -> tuple[MaskNet, StftConfig, bool]:
    embedded = payload["config"]
    stft_config = StftConfig(**embedded["stft"])
    se_config = SeModelConfig(**embedded["se_model"])
    log_compress = bool(embedded["features"]["log_compress"])
    masknet = MaskNet(se_config)
    masknet.load_state_dict(payload["state"]["masknet"])
    masknet.eval()
    return masknet, stft_config, log_compress


def cmd_enhance(args) -> None:
    payload = load_checkpoint(args.checkpoint)
    masknet, stft_config, log_compress = _masknet_from_checkpoint(payload)
    sample_rate = payload["config"].get("sample_rate", 16000)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for wav_path in args.wavs:
        wave = read_wav(wav_path, expected_rate=sample_rate)
        spec = stft(wave, stft_config)
        mag = np.abs(spec.values)
        feat, _ = normalize_full(np.log1p(mag) if log_compress else mag)
        mask = se_forward(masknet, feat)
        enhanced = synthesize_enhanced(spec, mask)
        write_wav(out / Path(wav_path).name, enhanced)
    print(f"enhanced {len(args.wavs)} file(s) -> {out}")


def _plot_cer_histogram(rows, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0.0, 1.0, 21)
    ax.hist([r["cer_noisy"] for r in rows], bins=bins, alpha=0.6, label="noisy")
    ax.hist([r["cer_enhanced"] for r in rows], bins=bins, alpha=0.6, label="enhanced")
    ax.set_xlabel("CER")
    ax.set_ylabel("utterances")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_segsnr_scatter(rows, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    x = [r["segsnr_noisy"] for r in rows]
    y = [r["segsnr_enhanced"] for r in rows]
    ax.scatter(x, y, s=12, alpha=0.7)
    lo = min(x + y) - 1
    hi = max(x + y) + 1
    ax.plot([lo, hi], [lo, hi], "k--", linewidth=1)
    ax.set_xlabel("SegSNR noisy (dB)")
    ax.set_ylabel("SegSNR enhanced (dB)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_training_curves(curves_csv: Path, path: Path) -> None:
    data = np.genfromtxt(curves_csv, delimiter=",", names=True)
    data = np.atleast_1d(data)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(data["epoch"], data["L_CER"], label="estimator loss")
    ax.plot(data["epoch"], data["L_SE"], label="enhancement loss")
    if not np.all(np.isnan(data["val_cer_enhanced"])):
        ax.plot(data["epoch"], data["val_cer_noisy"], label="val CER noisy")
        ax.plot(data["epoch"], data["val_cer_enhanced"], label="val CER enhanced")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _dump_spectrograms(samples, masknet, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        mask = se_forward(masknet, sample.feat)
        panels = [
            ("noisy", sample.noisy_mag),
            ("enhanced", mask * sample.noisy_mag),
            ("clean", np.abs(stft(sample.clean, sample.noisy_spec.config).values)),
        ]
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.2), sharey=True)
        for ax, (title, mag) in zip(axes, panels):
            ax.imshow(np.log1p(mag), origin="lower", aspect="auto", cmap="magma")
            ax.set_title(title)
        fig.suptitle(sample.sample_id)
        fig.tight_layout()
        fig.savefig(out_dir / f"{sample.sample_id}.png")
        plt.close(fig)


def cmd_evaluate(args) -> None:
    cfg = _resolve_config(args)
    payload = load_checkpoint(args.checkpoint)
    masknet, stft_config, log_compress = _masknet_from_checkpoint(payload)
    items = load_manifest(Path(args.corpus) / "manifest.tsv")
    samples = prepare_corpus(items, stft_config, log_compress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    qscorer = QScorer(_build_recognizer(cfg), cache_path=out / "qcache.jsonl")
    rows, aggregate = evaluate(masknet, samples, qscorer,
                               scorer_command=cfg.scorer_command)
    with open(out / "eval.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
        fh.write(json.dumps(aggregate) + "\n")
    with open(out / "eval.csv", "w", encoding="utf-8") as fh:
        fh.write("id,cer_noisy,cer_enhanced,segsnr_noisy,segsnr_enhanced\n")
        for r in rows:
            fh.write(f"{r['id']},{r['cer_noisy']},{r['cer_enhanced']},"
                     f"{r['segsnr_noisy']},{r['segsnr_enhanced']}\n")
    if rows:
        _plot_cer_histogram(rows, out / "cer_histogram.png")
        _plot_segsnr_scatter(rows, out / "segsnr_scatter.png")
    curves_csv = Path(args.checkpoint).parent / "curves.csv"
    if curves_csv.exists():
        _plot_training_curves(curves_csv, out / "training_curves.png")
    if args.dump_spectrograms:
        _dump_spectrograms(samples, masknet, out / "spectrograms")
    print(json.dumps(aggregate))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cerse",
        description="Recognition-centric speech enhancement: simulate corpora, "
                    "train the mask net against a surrogate CER scorer, enhance "
                    "audio, and evaluate against the black-box recognizer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--preset", choices=["synthetic"],
                       help="built-in configuration preset")
        p.add_argument("--seed", type=int, help="override the configured seed")

    p_sim = sub.add_parser("simulate", help="build a noisy/clean corpus")
    add_config_args(p_sim)
    p_sim.add_argument("--out", required=True, help="corpus output directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_train = sub.add_parser("train", help="run alternating training")
    add_config_args(p_train)
    p_train.add_argument("--corpus", required=True, help="corpus directory (with manifest.tsv)")
    p_train.add_argument("--out", required=True, help="checkpoints/logs directory")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from <out>/last.pt")
    p_train.set_defaults(func=cmd_train)

    p_enh = sub.add_parser("enhance", help="enhance WAV files with a trained checkpoint")
    p_enh.add_argument("--checkpoint", required=True)
    p_enh.add_argument("--out", required=True, help="output directory for enhanced WAVs")
    p_enh.add_argument("wavs", nargs="+", help="input WAV files (16-bit PCM)")
    p_enh.set_defaults(func=cmd_enhance)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--corpus", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--dump-spectrograms", action="store_true",
                        help="write per-utterance spectrogram images")
    p_eval.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalInstabilityError as exc:
        location = f" (snapshot: {exc.snapshot_path})" if exc.snapshot_path else ""
        print(f"numeric abort: {exc}{location}", file=sys.stderr)
        return EXIT_NUMERIC
    except RecognizerError as exc:
        print(f"recognizer failure: {exc}", file=sys.stderr)
        return EXIT_RECOGNIZER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
