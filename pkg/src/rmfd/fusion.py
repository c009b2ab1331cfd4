"""Progressive multimodal feature fusion.

Audio and text features first pass through self-attention residuals, then a
cross-attention layer fuses them with text as query and audio as key/value;
the result runs through a feed-forward network and a second cross-attention
with the visual feature as key/value.  Encoder outputs are vectors, treated
here as length-1 sequences so the attention primitives stay well-defined.

Two additions keep the fused feature informative when the inputs are
single-token sequences.  First, each cross-attention output is added to its
query (a residual), so the fused feature genuinely depends on every
modality; without it, softmax over one key is constant and the output would
collapse to a projection of the key-side feature alone.  Second, each
cross-attention key/value sequence is prefixed with a learned null token:
softmax only exposes compatibility *relative* to other keys, so attending
over {null, content} converts the absolute query-content match into a
readable signal, which is what lets downstream linear heads see cross-modal
inconsistency.

With a reduced modality subset the stages that would consume a missing
modality are skipped: a single modality passes through unchanged, an
audio+text pair stops after the first cross-attention, and a pair including
visual runs the self-attention residual on the one remaining non-visual
modality before the visual cross-attention.
"""
from __future__ import annotations

import torch
from torch import nn

from .layers import FeedForward, MultiheadAttention


def sa_residual(attn: MultiheadAttention, x: torch.Tensor) -> torch.Tensor:
    """Bare self-attention residual: x + SA(x), no normalization."""
    return x + attn(x, x, x)


class FusionModule(nn.Module):
    """Self-attention residuals, text-queries-audio MHA, FFN, visual MHA."""

    def __init__(self, d_model: int, heads: int, ffn_mult: int = 4,
                 use_layer_norm: bool = False):
        super().__init__()
        self.d_model = d_model
        self.sa_audio = MultiheadAttention(d_model, heads)
        self.sa_text = MultiheadAttention(d_model, heads)
        self.cross_audio_text = MultiheadAttention(d_model, heads)
        self.cross_visual = MultiheadAttention(d_model, heads)
        self.ffn = FeedForward(d_model, ffn_mult)
        self.null_audio = nn.Parameter(torch.zeros(d_model))
        self.null_visual = nn.Parameter(torch.zeros(d_model))
        nn.init.normal_(self.null_audio, std=0.02)
        nn.init.normal_(self.null_visual, std=0.02)
        # Cross-attention q/k start at identity so raw feature compatibility
        # (which the contrastive losses shape) drives attention immediately.
        for attn in (self.cross_audio_text, self.cross_visual):
            with torch.no_grad():
                attn.q_proj.weight.copy_(torch.eye(d_model))
                attn.k_proj.weight.copy_(torch.eye(d_model))
                attn.q_proj.bias.zero_()
                attn.k_proj.bias.zero_()
        # Off by default: the fusion equations use bare residuals.
        self.use_layer_norm = use_layer_norm
        self.norm_audio = nn.LayerNorm(d_model)
        self.norm_text = nn.LayerNorm(d_model)

    @staticmethod
    def _as_seq(x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 1:
            return x[None, None, :]
        if x.dim() == 2:  # [B, d] vectors
            return x[:, None, :]
        return x

    def _with_null(self, null: torch.Tensor, seq: torch.Tensor) -> torch.Tensor:
        anchor = null.expand(seq.shape[0], 1, -1)
        return torch.cat([anchor, seq], dim=1)

    def fuse_all(
        self,
        f_v: torch.Tensor | None,
        f_a: torch.Tensor | None,
        f_t: torch.Tensor | None,
        subset: tuple[str, ...] = ("v", "a", "t"),
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Fuse available modality features; returns (f_at, f_atv) vectors.

        Inputs may be [d], [B, d], or [B, S, d]; outputs are readout vectors
        ([d] or [B, d] matching the input batching).
        """
        subset = tuple(m for m in ("v", "a", "t") if m in subset)
        if not subset:
            raise ValueError("modality subset must not be empty")
        present = {"v": f_v, "a": f_a, "t": f_t}
        for m in subset:
            if present[m] is None:
                raise ValueError(f"modality {m!r} in subset but feature missing")
        unbatched = any(present[m].dim() == 1 for m in subset)
        seqs = {m: self._as_seq(present[m]) for m in subset}
        dims = {m: seqs[m].shape[-1] for m in subset}
        if any(d != self.d_model for d in dims.values()):
            raise ValueError(f"feature dims {dims} do not match d_model {self.d_model}")

        if len(subset) == 1:
            fused = seqs[subset[0]]
            f_at = f_atv = fused
        else:
            if "a" in subset:
                a = sa_residual(self.sa_audio, seqs["a"])
                if self.use_layer_norm:
                    a = self.norm_audio(a)
            if "t" in subset:
                t = sa_residual(self.sa_text, seqs["t"])
                if self.use_layer_norm:
                    t = self.norm_text(t)
            if "a" in subset and "t" in subset:
                ka = self._with_null(self.null_audio, a)
                f_at = t + self.cross_audio_text(t, ka, ka)
            elif "a" in subset:
                f_at = a
            else:
                f_at = t
            if "v" in subset:
                h = self.ffn(f_at)
                kv = self._with_null(self.null_visual, seqs["v"])
                f_atv = h + self.cross_visual(h, kv, kv)
            else:
                f_atv = f_at

        f_at_vec = f_at[:, 0, :]
        f_atv_vec = f_atv[:, 0, :]
        if unbatched:
            return f_at_vec[0], f_atv_vec[0]
        return f_at_vec, f_atv_vec

    forward = fuse_all
