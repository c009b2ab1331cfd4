"""Shared attention/transformer building blocks.

Kept deliberately small: multihead scaled dot-product attention with
separate q/k/v/out projections, an MLP feed-forward, and a pre-norm
transformer block.  No dropout anywhere (runs must be bit-reproducible).
"""
from __future__ import annotations

import math

import torch
from torch import nn


class MultiheadAttention(nn.Module):
    """Standard multihead attention; rows of each attention matrix sum to 1."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query, key, value, return_weights: bool = False):
        """query [.., Q, d], key/value [.., K, d] -> [.., Q, d].

        Accepts unbatched [S, d] or batched [B, S, d] inputs.
        """
        unbatched = query.dim() == 2
        if unbatched:
            query, key, value = query[None], key[None], value[None]
        if query.dim() != 3 or key.dim() != 3 or value.dim() != 3:
            raise ValueError("attention inputs must be [S, d] or [B, S, d]")
        if query.shape[-1] != self.d_model or key.shape[-1] != self.d_model:
            raise ValueError(
                f"feature dim must be {self.d_model}, got "
                f"{query.shape[-1]}/{key.shape[-1]}"
            )
        if key.shape[:-1] != value.shape[:-1]:
            raise ValueError("key and value must share sequence shape")

        b, q_len, _ = query.shape
        k_len = key.shape[1]

        if k_len == 1 and not return_weights:
            # Softmax over a single key is exactly 1, so attention reduces to
            # the projected value broadcast across queries (and the q/k
            # projections receive exactly zero gradient, as in the full path).
            out = self.out_proj(self.v_proj(value)).expand(b, q_len, self.d_model)
            if unbatched:
                out = out[0]
            return out

        def split(x, length):
            return x.view(b, length, self.heads, self.d_head).transpose(1, 2)

        q = split(self.q_proj(query), q_len)
        k = split(self.k_proj(key), k_len)
        v = split(self.v_proj(value), k_len)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        weights = torch.softmax(scores, dim=-1)
        out = weights @ v
        out = out.transpose(1, 2).reshape(b, q_len, self.d_model)
        out = self.out_proj(out)
        if unbatched:
            out = out[0]
            weights = weights[0]
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    """Two linear layers with exact-erf GELU in between."""

    def __init__(self, d_model: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, mult * d_model),
            nn.GELU(),
            nn.Linear(mult * d_model, d_model),
        )

    def forward(self, x):
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d_model: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiheadAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_mult)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        x = x + self.ffn(self.norm2(x))
        return x


def transformer_stack(d_model: int, heads: int, layers: int, ffn_mult: int = 4):
    return nn.ModuleList(
        TransformerBlock(d_model, heads, ffn_mult) for _ in range(layers)
    )
