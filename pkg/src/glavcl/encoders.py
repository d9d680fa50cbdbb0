"""Tiny differentiable encoders: two visual pathways at different frame
rates plus a single shared audio encoder.

The global visual pathway subsamples frames (slow), keeps the spatial grid
and average-pools over time; the local pathway consumes every frame (fast)
and keeps the temporal axis. Audio is treated as an n_mel_bands-channel 1-D
signal; one encoder instance serves both objectives (weight sharing).
All embeddings are projected to a common dimension D so audio-visual dot
products are well defined.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    embed_dim: int = 16
    slow_stride: int = 4
    grid_hw: tuple[int, int] = (4, 4)
    normalize: bool = True
    temperature: float = 0.1
    n_mel_bands: int = 80
    slices_per_frame: int = 3  # M, audio-visual alignment
    hidden_channels: int = 16
    init_seed: int = 0

    def validate(self, n_frames: int | None = None,
                 pixel_hw: tuple[int, int] | None = None) -> None:
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.slow_stride < 1:
            raise ConfigError("slow_stride must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.slices_per_frame < 1:
            raise ConfigError("slices_per_frame must be >= 1")
        if n_frames is not None and n_frames % self.slow_stride != 0:
            raise ConfigError(
                f"slow_stride {self.slow_stride} must divide n_frames {n_frames}"
            )
        if pixel_hw is not None:
            gh, gw = self.grid_hw
            if pixel_hw[0] % gh != 0 or pixel_hw[1] % gw != 0:
                raise ConfigError(
                    f"grid_hw {self.grid_hw} must divide pixel dims {pixel_hw}"
                )


@dataclass
class GlobalVisualEmbedding:
    grid: torch.Tensor  # [H, W, D]


@dataclass
class LocalVisualFeatureMap:
    grid_seq: torch.Tensor  # [T_v, H, W, D]


@dataclass
class LocalVisualEmbedding:
    seq: torch.Tensor  # [T_v, D]


@dataclass
class AudioEmbedding:
    slices: torch.Tensor  # [T_a, D]
    pooled: torch.Tensor  # [D]


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(1e-12)


def _init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in-scaled uniform weights, zero biases; deterministic given seed."""
    gen = torch.Generator().manual_seed(seed)
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if name.endswith("bias"):
            with torch.no_grad():
                p.zero_()
        else:
            fan_in = p.numel() // p.shape[0]
            bound = 1.0 / math.sqrt(max(1, fan_in))
            with torch.no_grad():
                p.uniform_(-bound, bound, generator=gen)


class _VisualStack(nn.Module):
    """3 spatio-temporal conv layers; spatial reduction finished by an
    average pool onto the configured grid."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float32):
        super().__init__()
        c = cfg.hidden_channels
        d = cfg.embed_dim
        self.grid_hw = cfg.grid_hw
        self.conv1 = nn.Conv3d(1, c, (3, 3, 3), stride=(1, 2, 2),
                               padding=(1, 1, 1), dtype=dtype)
        self.conv2 = nn.Conv3d(c, c, (3, 3, 3), stride=(1, 1, 1),
                               padding=(1, 1, 1), dtype=dtype)
        self.conv3 = nn.Conv3d(c, d, (1, 3, 3), stride=(1, 1, 1),
                               padding=(0, 1, 1), dtype=dtype)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: [T, H_px, W_px, 1] -> [1, 1, T, H_px, W_px]
        x = frames.permute(3, 0, 1, 2).unsqueeze(0)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = self.conv3(x)
        gh, gw = self.grid_hw
        x = F.adaptive_avg_pool3d(x, (x.shape[2], gh, gw))
        return x.squeeze(0)  # [D, T', gh, gw]


class GlobalVisualEncoder(nn.Module):
    """Slow pathway: subsample frames, convolve, temporally average."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float32, seed_offset=0):
        super().__init__()
        self.cfg = cfg
        self.stack = _VisualStack(cfg, dtype=dtype)
        _init_parameters(self, cfg.init_seed + seed_offset)

    def forward(self, frames: torch.Tensor) -> GlobalVisualEmbedding:
        _check_frames(frames, self.cfg)
        x = self.stack(frames[:: self.cfg.slow_stride])
        grid = x.mean(dim=1).permute(1, 2, 0)  # [H, W, D]
        if self.cfg.normalize:
            grid = l2_normalize(grid)
        return GlobalVisualEmbedding(grid=grid)


class LocalVisualEncoder(nn.Module):
    """Fast pathway: all frames, temporal axis preserved, no pooling."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float32, seed_offset=1):
        super().__init__()
        self.cfg = cfg
        self.stack = _VisualStack(cfg, dtype=dtype)
        _init_parameters(self, cfg.init_seed + seed_offset)

    def forward(self, frames: torch.Tensor) -> LocalVisualFeatureMap:
        _check_frames(frames, self.cfg)
        x = self.stack(frames)  # [D, T, H, W]
        return LocalVisualFeatureMap(grid_seq=x.permute(1, 2, 3, 0))


class AudioEncoder(nn.Module):
    """Stride-1 temporal conv stack over mel bands; emits per-slice
    embeddings and their (renormalized) temporal mean."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float32, seed_offset=2):
        super().__init__()
        self.cfg = cfg
        c = cfg.hidden_channels
        self.conv1 = nn.Conv1d(cfg.n_mel_bands, c, 3, padding=1, dtype=dtype)
        self.conv2 = nn.Conv1d(c, c, 3, padding=1, dtype=dtype)
        self.proj = nn.Conv1d(c, cfg.embed_dim, 1, dtype=dtype)
        _init_parameters(self, cfg.init_seed + seed_offset)

    def forward(self, mel: torch.Tensor) -> AudioEmbedding:
        if mel.ndim != 2 or mel.shape[0] != self.cfg.n_mel_bands:
            raise ShapeError(
                f"mel must be [{self.cfg.n_mel_bands}, T_a], got {tuple(mel.shape)}"
            )
        x = mel.unsqueeze(0)  # [1, bands, T_a]
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = self.proj(x).squeeze(0).transpose(0, 1)  # [T_a, D]
        pooled = x.mean(dim=0)
        if self.cfg.normalize:
            x = l2_normalize(x)
            pooled = l2_normalize(pooled, dim=0)
        return AudioEmbedding(slices=x, pooled=pooled)


def _check_frames(frames: torch.Tensor, cfg: EncoderConfig) -> None:
    if frames.ndim != 4 or frames.shape[3] != 1:
        raise ShapeError(
            f"frames must be [T, H_px, W_px, 1], got {tuple(frames.shape)}"
        )
    cfg.validate(n_frames=frames.shape[0],
                 pixel_hw=(frames.shape[1], frames.shape[2]))


class GlavModel(nn.Module):
    """The full encoder set. The audio encoder instance is shared between
    the two objectives by construction."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.visual_global = GlobalVisualEncoder(cfg, dtype=dtype)
        self.visual_local = LocalVisualEncoder(cfg, dtype=dtype)
        self.audio = AudioEncoder(cfg, dtype=dtype)
        self._dtype = dtype

    def encode_clip(self, frames: np.ndarray | torch.Tensor,
                    mel: np.ndarray | torch.Tensor):
        frames_t = torch.as_tensor(np.asarray(frames), dtype=self._dtype)
        mel_t = torch.as_tensor(np.asarray(mel), dtype=self._dtype)
        t_v = frames_t.shape[0]
        if mel_t.shape[1] != self.cfg.slices_per_frame * t_v:
            raise ConfigError(
                f"audio-visual misalignment: T_a={mel_t.shape[1]} but "
                f"M*T_v={self.cfg.slices_per_frame * t_v}"
            )
        return (
            self.visual_global(frames_t),
            self.visual_local(frames_t),
            self.audio(mel_t),
        )

    def save(self, path) -> None:
        arrays = {
            name: p.detach().cpu().numpy().astype(np.float32)
            for name, p in self.named_parameters()
        }
        container.write_arrays(path, arrays)
        sidecar = {"encoder_config": _config_to_json(self.cfg)}
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2)

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "GlavModel":
        with open(str(path) + ".json", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        cfg = config_from_json(sidecar["encoder_config"])
        model = cls(cfg, dtype=dtype)
        arrays = container.read_arrays(path)
        model.load_weight_arrays(arrays)
        return model

    def load_weight_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise container.DimensionMismatchError(
                    f"checkpoint missing parameter {name!r}"
                )
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise container.DimensionMismatchError(
                    f"checkpoint parameter {name!r} has shape {arr.shape}, "
                    f"expected {tuple(p.shape)}"
                )
            with torch.no_grad():
                p.copy_(torch.as_tensor(arr, dtype=p.dtype))


def _config_to_json(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    d["grid_hw"] = list(cfg.grid_hw)
    return d


def config_from_json(d: dict) -> EncoderConfig:
    cfg = EncoderConfig(**d)
    cfg.grid_hw = tuple(cfg.grid_hw)
    return cfg


def local_embedding_from_pooled(pooled_seq: torch.Tensor,
                                cfg: EncoderConfig) -> LocalVisualEmbedding:
    """Wrap an attention-pooled sequence as z_v^l, normalizing if configured."""
    seq = l2_normalize(pooled_seq) if cfg.normalize else pooled_seq
    return LocalVisualEmbedding(seq=seq)
