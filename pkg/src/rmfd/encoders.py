"""Modality encoders: frame-group visual, spectrogram-patch audio, token text.

Each encoder maps one shot's modality tensor to a single d_model feature
vector.  They are small trainable transformer stacks: a strided-conv frame
embedder feeding a per-group transformer for video, a patch-embedding
transformer for audio, and a token-embedding transformer for text.  Audio
and text read out through a prepended learnable token; visual groups read
out at position 0 and are mean-pooled into the clip feature.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .layers import transformer_stack


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions shared by the encoders, fusion, and heads."""

    d_model: int = 32
    heads: int = 4
    ffn_mult: int = 4
    # visual
    channels: int = 3
    height: int = 32
    width: int = 32
    n_groups: int = 4
    group_size: int = 4
    conv_channels: tuple[int, int] = (8, 16)
    visual_layers: int = 1
    # audio
    mel_bins: int = 32
    time_steps: int = 48
    patch: tuple[int, int] = (16, 16)
    audio_layers: int = 1
    # text
    vocab_size: int = 192
    max_seq_len: int = 32
    text_layers: int = 1

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")


def sample_frame_groups(frames: torch.Tensor, n_groups: int, group_size: int):
    """Split T frames into n_groups equal segments; take each segment's head.

    The time axis is divided into ``n_groups`` contiguous segments of length
    floor(T / n_groups) (tail frames beyond n_groups * seg are ignored); each
    group is the first ``group_size`` successive frames of its segment.
    Works on [T, ...] or [B, T, ...]; returns [(B,) n_groups, group_size, ...].
    """
    if n_groups < 1 or group_size < 1:
        raise ValueError("n_groups and group_size must be positive")
    batched = frames.dim() == 5
    t_axis = 1 if batched else 0
    t = frames.shape[t_axis]
    if t < n_groups * group_size:
        raise ValueError(
            f"need at least n_groups*group_size = {n_groups * group_size} "
            f"frames, got {t}"
        )
    seg = t // n_groups
    starts = [i * seg for i in range(n_groups)]
    slices = [
        frames.narrow(t_axis, start, group_size) for start in starts
    ]
    return torch.stack(slices, dim=t_axis)


def patchify_spectrogram(spec: torch.Tensor, patch: tuple[int, int]):
    """Zero-pad to patch multiples and cut into flattened row-major patches.

    [.., M, F] -> [.., num_patches, p_m * p_f]; patch order runs over time
    blocks fastest, mel blocks slowest.
    """
    p_m, p_f = patch
    if p_m <= 0 or p_f <= 0:
        raise ValueError(f"patch dims must be positive, got {patch}")
    m, f = spec.shape[-2], spec.shape[-1]
    pad_m = (-m) % p_m
    pad_f = (-f) % p_f
    spec = F.pad(spec, (0, pad_f, 0, pad_m))
    m2, f2 = m + pad_m, f + pad_f
    lead = spec.shape[:-2]
    spec = spec.reshape(*lead, m2 // p_m, p_m, f2 // p_f, p_f)
    spec = spec.movedim(-3, -2)  # [.., mb, fb, p_m, p_f]
    return spec.reshape(*lead, (m2 // p_m) * (f2 // p_f), p_m * p_f)


class FrameEmbedder(nn.Module):
    """Two strided convolutions then a linear map to d_model."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c1, c2 = cfg.conv_channels
        self.conv1 = nn.Conv2d(cfg.channels, c1, 4, stride=4)
        self.conv2 = nn.Conv2d(c1, c2, 2, stride=2)
        h, w = cfg.height // 8, cfg.width // 8
        if h < 1 or w < 1 or cfg.height % 8 or cfg.width % 8:
            raise ValueError(
                f"frame size must be a multiple of 8, got {cfg.height}x{cfg.width}"
            )
        self.proj = nn.Linear(c2 * h * w, cfg.d_model)

    def forward(self, x):  # [N, C, H, W] -> [N, d_model]
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return self.proj(x.flatten(1))


class VisualEncoder(nn.Module):
    """Frame groups -> per-frame conv features -> group transformer -> mean."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.frame_model = FrameEmbedder(cfg)
        self.pos = nn.Parameter(torch.zeros(cfg.group_size, cfg.d_model))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = transformer_stack(
            cfg.d_model, cfg.heads, cfg.visual_layers, cfg.ffn_mult
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[B, T, C, H, W] -> [B, d_model]."""
        if frames.dim() != 5:
            raise ValueError(f"frames must be [B, T, C, H, W], got {frames.shape}")
        cfg = self.cfg
        if frames.shape[2:] != (cfg.channels, cfg.height, cfg.width):
            raise ValueError(
                f"frame shape {tuple(frames.shape[2:])} does not match config "
                f"({cfg.channels}, {cfg.height}, {cfg.width})"
            )
        groups = sample_frame_groups(frames, cfg.n_groups, cfg.group_size)
        b = groups.shape[0]
        flat = groups.reshape(-1, cfg.channels, cfg.height, cfg.width)
        feats = self.frame_model(flat).view(
            b * cfg.n_groups, cfg.group_size, cfg.d_model
        )
        x = feats + self.pos
        for block in self.blocks:
            x = block(x)
        group_feats = x[:, 0, :].view(b, cfg.n_groups, cfg.d_model)
        return group_feats.mean(dim=1)


class AudioEncoder(nn.Module):
    """Spectrogram patches + readout token through a transformer."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        p_m, p_f = cfg.patch
        n_patches = -(-cfg.mel_bins // p_m) * -(-cfg.time_steps // p_f)
        self.n_patches = n_patches
        self.embed = nn.Linear(p_m * p_f, cfg.d_model)
        self.cls = nn.Parameter(torch.zeros(cfg.d_model))
        self.pos = nn.Parameter(torch.zeros(n_patches + 1, cfg.d_model))
        nn.init.normal_(self.cls, std=0.02)
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = transformer_stack(
            cfg.d_model, cfg.heads, cfg.audio_layers, cfg.ffn_mult
        )

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        """[B, M, F] -> [B, d_model]."""
        if spec.dim() != 3:
            raise ValueError(f"spectrogram must be [B, M, F], got {spec.shape}")
        cfg = self.cfg
        if spec.shape[1:] != (cfg.mel_bins, cfg.time_steps):
            raise ValueError(
                f"spectrogram shape {tuple(spec.shape[1:])} does not match "
                f"config ({cfg.mel_bins}, {cfg.time_steps})"
            )
        patches = patchify_spectrogram(spec, cfg.patch)
        x = self.embed(patches)
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos
        for block in self.blocks:
            x = block(x)
        return x[:, 0, :]


class TextEncoder(nn.Module):
    """Token + position embeddings with a readout token through a transformer."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.cls = nn.Parameter(torch.zeros(cfg.d_model))
        self.pos = nn.Parameter(torch.zeros(cfg.max_seq_len + 1, cfg.d_model))
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.cls, std=0.02)
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = transformer_stack(
            cfg.d_model, cfg.heads, cfg.text_layers, cfg.ffn_mult
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """[B, L] int tokens -> [B, d_model]."""
        if tokens.dim() != 2:
            raise ValueError(f"tokens must be [B, L], got {tokens.shape}")
        cfg = self.cfg
        if tokens.shape[1] > cfg.max_seq_len:
            raise ValueError(
                f"sequence length {tokens.shape[1]} exceeds max {cfg.max_seq_len}"
            )
        if tokens.numel() and (
            int(tokens.min()) < 0 or int(tokens.max()) >= cfg.vocab_size
        ):
            raise ValueError(
                f"token ids must be in [0, {cfg.vocab_size}), got range "
                f"[{int(tokens.min())}, {int(tokens.max())}]"
            )
        x = self.tok_emb(tokens) + self.pos[1 : tokens.shape[1] + 1]
        cls = (self.cls + self.pos[0]).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1)
        for block in self.blocks:
            x = block(x)
        return x[:, 0, :]
