"""Trainable networks: the BLSTM mask estimator and a Lipschitz-constrained CNN scorer."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parametrize

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file is corrupt, wrong version, or built from another config."""


@dataclass(frozen=True)
class SeModelConfig:
    blstm_layers: int = 2
    blstm_hidden: int = 200
    fc1_units: int = 300
    out_units: int = 257
    leaky_slope: float = 0.3

    def __post_init__(self):
        if min(self.blstm_layers, self.blstm_hidden, self.fc1_units, self.out_units) < 1:
            raise ValueError("all layer sizes must be positive")


@dataclass(frozen=True)
class CerEstimatorConfig:
    conv_specs: tuple[tuple[int, int], ...] = ((75, 5), (75, 7), (75, 9), (75, 11))
    fc_units: tuple[int, ...] = (50, 10)
    spectral_norm: bool = True
    power_iterations: int = 1
    leaky_slope: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "conv_specs",
                           tuple((int(f), int(k)) for f, k in self.conv_specs))
        object.__setattr__(self, "fc_units", tuple(int(u) for u in self.fc_units))
        if not self.conv_specs:
            raise ValueError("at least one conv layer is required")
        if self.power_iterations < 1:
            raise ValueError("power_iterations must be >= 1")


def _l2_normalize(vec: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return vec / (vec.norm() + eps)


class SpectralNormScale(nn.Module):
    """Weight parametrization dividing by the leading singular value.

    The singular value is estimated by power iteration on the weight unfolded
    to (out_features, rest); the left/right vectors persist as buffers and
    advance ``power_iterations`` steps per use in training mode. A zero weight
    stays zero (the division is floored), and gradients flow through the
    estimated scale.
    """

    def __init__(self, weight: torch.Tensor, power_iterations: int = 1, eps: float = 1e-12):
        super().__init__()
        self.power_iterations = power_iterations
        self.eps = eps
        mat = weight.detach().reshape(weight.shape[0], -1)
        self.register_buffer("u", _l2_normalize(torch.randn(mat.shape[0], dtype=weight.dtype)))
        self.register_buffer("v", _l2_normalize(torch.randn(mat.shape[1], dtype=weight.dtype)))

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        mat = weight.reshape(weight.shape[0], -1)
        if self.training:
            with torch.no_grad():
                for _ in range(self.power_iterations):
                    self.v.copy_(_l2_normalize(mat.t() @ self.u))
                    self.u.copy_(_l2_normalize(mat @ self.v))
        # Snapshot the vectors: later in-place iterations must not disturb
        # autograd state saved by earlier forwards in the same graph.
        u, v = self.u.clone(), self.v.clone()
        sigma = torch.dot(u, mat @ v)
        return weight / sigma.clamp(min=self.eps)


def apply_spectral_norm(module: nn.Module, power_iterations: int = 1) -> nn.Module:
    """Constrain a layer's weight to (approximately) unit spectral norm."""
    parametrize.register_parametrization(
        module, "weight", SpectralNormScale(module.weight, power_iterations)
    )
    return module


def constrained_modules(model: nn.Module):
    """Yield every submodule carrying a spectral-norm parametrization."""
    for module in model.modules():
        if parametrize.is_parametrized(module, "weight"):
            yield module


def power_iterate(model: nn.Module, steps: int) -> None:
    """Advance the power iteration of every constrained layer without training."""
    was_training = model.training
    model.train()
    with torch.no_grad():
        for module in constrained_modules(model):
            for _ in range(steps):
                module.weight  # noqa: B018 - access runs the parametrization
    model.train(was_training)


def effective_weight(module: nn.Module) -> torch.Tensor:
    """The constrained weight as used by a forward pass, without advancing state."""
    was_training = module.training
    module.eval()
    with torch.no_grad():
        weight = module.weight.detach().clone()
    module.train(was_training)
    return weight


class MaskNet(nn.Module):
    """BLSTM mask estimator: normalized magnitude frames in, per-bin gains out."""

    def __init__(self, config: SeModelConfig):
        super().__init__()
        self.config = config
        self.blstm = nn.LSTM(
            input_size=config.out_units,
            hidden_size=config.blstm_hidden,
            num_layers=config.blstm_layers,
            bidirectional=True,
            batch_first=True,
        )
        self.fc1 = nn.Linear(2 * config.blstm_hidden, config.fc1_units)
        self.fc2 = nn.Linear(config.fc1_units, config.out_units)
        self.act = nn.LeakyReLU(config.leaky_slope)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """(batch, frames, bins) -> mask of the same shape, entries in (0, 1)."""
        if feats.shape[-1] != self.config.out_units:
            raise ValueError(
                f"{feats.shape[-1]} input bins, model expects {self.config.out_units}"
            )
        hidden, _ = self.blstm(feats)
        return torch.sigmoid(self.fc2(self.act(self.fc1(hidden))))


class CerEstimator(nn.Module):
    """CNN scorer mapping an (evaluated, reference) spectrogram pair to one scalar.

    Global average pooling after the conv stack absorbs variable utterance
    lengths; spectral normalization keeps each layer near 1-Lipschitz so the
    score varies smoothly with its input.
    """

    def __init__(self, config: CerEstimatorConfig):
        super().__init__()
        self.config = config
        convs = []
        in_channels = 2
        for filters, kernel in config.conv_specs:
            conv = nn.Conv2d(in_channels, filters, kernel, padding=kernel // 2)
            convs.append(self._constrain(conv))
            in_channels = filters
        self.convs = nn.ModuleList(convs)
        fcs = []
        width = in_channels
        for units in config.fc_units:
            fcs.append(self._constrain(nn.Linear(width, units)))
            width = units
        self.fcs = nn.ModuleList(fcs)
        self.out = self._constrain(nn.Linear(width, 1))
        self.act = nn.LeakyReLU(config.leaky_slope)

    def _constrain(self, module: nn.Module) -> nn.Module:
        if self.config.spectral_norm:
            apply_spectral_norm(module, self.config.power_iterations)
        return module

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        """(batch, 2, bins, frames) -> (batch,) scores."""
        if pairs.ndim != 4 or pairs.shape[1] != 2:
            raise ValueError(f"expected (batch, 2, bins, frames), got {tuple(pairs.shape)}")
        h = pairs
        for conv in self.convs:
            h = self.act(conv(h))
        h = h.mean(dim=(2, 3))
        for fc in self.fcs:
            h = self.act(fc(h))
        return self.out(h).squeeze(-1)


def _module_dtype(net: nn.Module) -> torch.dtype:
    return next(net.parameters()).dtype


def se_forward(net: MaskNet, feat: np.ndarray) -> np.ndarray:
    """Inference-only mask for a (bins, frames) feature matrix."""
    x = torch.from_numpy(np.ascontiguousarray(feat.T)[None]).to(_module_dtype(net))
    was_training = net.training
    net.eval()
    with torch.no_grad():
        mask = net(x)
    net.train(was_training)
    return mask[0].T.numpy().astype(np.float64)


def estimate_cer(net: CerEstimator, evaluated: np.ndarray, reference: np.ndarray) -> float:
    """Inference-only score for one normalized (evaluated, reference) pair."""
    pair = torch.from_numpy(np.stack([evaluated, reference])[None]).to(_module_dtype(net))
    was_training = net.training
    net.eval()
    with torch.no_grad():
        score = net(pair)
    net.train(was_training)
    return float(score[0])


def config_fingerprint(config_dict: dict) -> str:
    return hashlib.sha256(
        json.dumps(config_dict, sort_keys=True).encode()
    ).hexdigest()


def save_checkpoint(path, state: dict, config_dict: dict) -> None:
    """Write a versioned checkpoint tied to a configuration fingerprint."""
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config_hash": config_fingerprint(config_dict),
            "config": config_dict,
            "state": state,
        },
        path,
    )


def load_checkpoint(path, expected_config: dict | None = None) -> dict:
    """Load a checkpoint payload, verifying version and (optionally) config hash."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']}, expected {CHECKPOINT_VERSION}"
        )
    if expected_config is not None:
        expected_hash = config_fingerprint(expected_config)
        if payload["config_hash"] != expected_hash:
            raise CheckpointError(f"{path}: checkpoint was built from a different config")
    return payload
