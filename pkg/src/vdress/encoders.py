"""Frozen toy text/image encoders and the trainable query-transformer projector."""

from __future__ import annotations

import math
import re
import zlib

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError

VOCAB_SIZE = 4096
MAX_PROMPT_CHARS = 1024
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(prompt: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(prompt.lower())


def token_id(token: str) -> int:
    return zlib.crc32(token.encode("utf-8")) % VOCAB_SIZE


def _seeded(seed: int, *shape) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen)


class TextEncoder(nn.Module):
    """Hashed-vocabulary embedding table, padded/truncated to ``length`` rows."""

    def __init__(self, dim: int = 64, length: int = 16, vocab_seed: int = 0):
        super().__init__()
        self.dim = dim
        self.length = length
        self.table = nn.Parameter(_seeded(vocab_seed, VOCAB_SIZE, dim) / math.sqrt(dim), requires_grad=False)
        self.pad = nn.Parameter(_seeded(vocab_seed + 1, dim) / math.sqrt(dim), requires_grad=False)

    def ids(self, prompt: str) -> list[int]:
        if len(prompt) > MAX_PROMPT_CHARS:
            raise ValueError(f"prompt longer than {MAX_PROMPT_CHARS} characters")
        return [token_id(t) for t in tokenize(prompt)][: self.length]

    def forward(self, prompt: str) -> torch.Tensor:
        ids = self.ids(prompt)
        out = self.pad.expand(self.length, self.dim).clone()
        if ids:
            out[: len(ids)] = self.table[torch.tensor(ids)]
        return out

    def null(self) -> torch.Tensor:
        return torch.zeros(self.length, self.dim, dtype=self.table.dtype)


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe


class ImageEncoder(nn.Module):
    """Non-overlapping 8x8 patch embedding plus a fixed sinusoidal position code."""

    patch = 8

    def __init__(self, dim: int = 64, seed: int = 1):
        super().__init__()
        self.dim = dim
        depth = 3 * self.patch * self.patch
        self.weight = nn.Parameter(_seeded(seed, dim, depth) / math.sqrt(depth), requires_grad=False)

    def patches(self, img: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` -> ``(B, P, 192)`` in row-major patch order."""
        b, c, h, w = img.shape
        p = self.patch
        if c != 3 or h % p or w % p:
            raise DimensionError(f"image {tuple(img.shape[1:])} needs 3 channels and sides divisible by {p}")
        x = img.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def forward(self, img: torch.Tensor, positional: bool = True) -> torch.Tensor:
        single = img.ndim == 3
        if single:
            img = img[None]
        tok = self.patches(img.to(self.weight.dtype)) @ self.weight.T
        if positional:
            tok = tok + sinusoidal_positions(tok.shape[1], self.dim).to(tok.dtype)
        return tok[0] if single else tok


def multihead_attention(q, k, v, heads: int, key_mask=None):
    """Scaled dot-product attention over pre-projected ``(B, N, C)`` tensors.

    ``key_mask`` is ``(B, Nk)`` boolean, True where a key may be attended.
    """
    b, nq, c = q.shape
    nk = k.shape[1]
    d = c // heads
    qh = q.reshape(b, nq, heads, d).transpose(1, 2)
    kh = k.reshape(b, nk, heads, d).transpose(1, 2)
    vh = v.reshape(b, nk, heads, d).transpose(1, 2)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(d)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    out = scores.softmax(dim=-1) @ vh
    return out.transpose(1, 2).reshape(b, nq, c)


class Projector(nn.Module):
    """One query-transformer block: learnable queries cross-attend to patch tokens.

    ``out = h + ff(h)`` with ``h = queries + attn(queries, tokens)``.
    """

    def __init__(self, dim: int = 64, queries: int = 8, heads: int = 4, seed: int = 2):
        super().__init__()
        if dim % heads:
            raise DimensionError("projector width must be divisible by heads")
        self.dim, self.heads = dim, heads
        gen = torch.Generator().manual_seed(seed)
        self.queries = nn.Parameter(torch.randn(queries, dim, generator=gen) / math.sqrt(dim))
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim, bias=False)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def feed_forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.ff(h)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        single = tokens.ndim == 2
        if single:
            tokens = tokens[None]
        if tokens.shape[-1] != self.dim:
            raise DimensionError(f"patch width {tokens.shape[-1]} != projector width {self.dim}")
        q0 = self.queries.expand(tokens.shape[0], -1, -1)
        attn = multihead_attention(self.to_q(q0), self.to_k(tokens), self.to_v(tokens), self.heads)
        out = self.feed_forward(q0 + self.to_out(attn))
        return out[0] if single else out
