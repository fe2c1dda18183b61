"""Desk-scale UNet shared by the denoising and the garment (reference) branch.

Every attention site is a transformer unit: (hybrid) self-attention, then
cross-attention over a token context (text for the denoiser, projected
garment tokens for the reference branch), then a feed-forward layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import multihead_attention
from .errors import ConfigError, DimensionError

LAMBDA_RANGE = (0.0, 1.5)
VARIANTS = ("A0", "A1", "A2")


@dataclass(frozen=True)
class ModelConfig:
    """Topology and widths.

    ``variant`` selects the ablation arm: A0 injects reference features by
    concatenating them into the frozen self-attention keys/values and feeds
    the reference branch no image tokens; A1 adds the image-encoder branch;
    A2 (default) uses hybrid attention with trainable garment key/value maps.
    ``single_block`` collapses the UNet into conv-in, one unit, conv-out.
    """

    levels: tuple = (32, 64)
    heads: int = 4
    dim: int = 64
    latent_shape: tuple = (4, 8, 10)
    text_length: int = 16
    garment_queries: int = 8
    temb_dim: int = 128
    groups: int = 8
    variant: str = "A2"
    single_block: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(c) for c in self.levels))
        object.__setattr__(self, "latent_shape", tuple(int(c) for c in self.latent_shape))
        if not self.levels:
            raise ConfigError("levels must be non-empty")
        for c in self.levels:
            if c % self.heads:
                raise ConfigError(f"channel width {c} not divisible by {self.heads} heads")
            if c % self.groups:
                raise ConfigError(f"channel width {c} not divisible by {self.groups} groups")
        if self.dim % self.heads:
            raise ConfigError("token width must be divisible by heads")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.latent_shape) != 3:
            raise ConfigError("latent_shape is (channels, height, width)")
        if self.single_block and len(self.levels) != 1:
            raise ConfigError("single_block needs exactly one level")
        _, h, w = self.latent_shape
        scale = 2 ** (len(self.levels) - 1)
        if h % scale or w % scale:
            raise ConfigError(f"latent {h}x{w} cannot be halved {len(self.levels) - 1} times")

    @property
    def injection(self) -> str:
        return "hybrid" if self.variant == "A2" else "concat"

    @property
    def uses_image_branch(self) -> bool:
        return self.variant != "A0"

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "heads": self.heads,
            "dim": self.dim,
            "latent_shape": list(self.latent_shape),
            "text_length": self.text_length,
            "garment_queries": self.garment_queries,
            "temb_dim": self.temb_dim,
            "groups": self.groups,
            "variant": self.variant,
            "single_block": self.single_block,
            "seed": self.seed,
        }


def hybrid_site_signature(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """Ordered ``(site_id, positions, width)`` for every attention site."""
    _, h, w = cfg.latent_shape
    if cfg.single_block:
        return [("down.0", h * w, cfg.levels[0])]
    sites = []
    for i, ch in enumerate(cfg.levels):
        sites.append((f"down.{i}", (h >> i) * (w >> i), ch))
    last = len(cfg.levels) - 1
    sites.append(("mid", (h >> last) * (w >> last), cfg.levels[-1]))
    for i in reversed(range(len(cfg.levels))):
        sites.append((f"up.{i}", (h >> i) * (w >> i), cfg.levels[i]))
    return sites


def check_lambda(lam: float) -> float:
    lam = float(lam)
    lo, hi = LAMBDA_RANGE
    if not lo <= lam <= hi:
        raise ConfigError(f"garment strength must lie in [{lo}, {hi}], got {lam}")
    return lam


@dataclass
class HybridAttentionWeights:
    """Right-multiplied projection matrices (``Q = Z_d @ w_q``) and strength ``lam``."""

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_k_garment: torch.Tensor
    w_v_garment: torch.Tensor
    lam: float = 1.0
    heads: int = 1


def hybrid_attention(z_d: torch.Tensor, c_g: torch.Tensor, weights: HybridAttentionWeights,
                     lam=None) -> torch.Tensor:
    """Frozen self-attention plus ``lam`` times garment cross-attention sharing one query.

    ``z_d`` is ``(N, D)`` or ``(B, N, D)``; ``c_g`` likewise with its own length.
    ``lam`` overrides ``weights.lam`` and may be a per-batch tensor.
    """
    single = z_d.ndim == 2
    if single:
        z_d, c_g = z_d[None], c_g[None]
    d = z_d.shape[-1]
    if c_g.shape[-1] != d or weights.w_q.shape[0] != d or weights.w_k_garment.shape[0] != d:
        raise DimensionError(f"width mismatch: Z_d {z_d.shape[-1]}, C_g {c_g.shape[-1]}, W {tuple(weights.w_q.shape)}")
    if lam is None:
        lam = weights.lam
    if not isinstance(lam, torch.Tensor):
        lam = torch.tensor(check_lambda(lam), dtype=z_d.dtype)
    q = z_d @ weights.w_q
    self_term = multihead_attention(q, z_d @ weights.w_k, z_d @ weights.w_v, weights.heads)
    cross_term = multihead_attention(q, c_g @ weights.w_k_garment, c_g @ weights.w_v_garment, weights.heads)
    lam = lam.to(z_d.dtype).reshape(-1, 1, 1) if lam.ndim else lam.to(z_d.dtype)
    out = self_term + lam * cross_term
    return out[0] if single else out


@dataclass
class PluginResiduals:
    """Extension hooks in the style of pose/face adapters.

    ``residuals`` has one optional tensor per down block and for the mid block
    (in forward order), added to that block's output. ``extra_tokens`` are
    appended to the text keys/values of every text cross-attention.
    """

    residuals: Sequence[Optional[torch.Tensor]] = field(default_factory=list)
    extra_tokens: Optional[torch.Tensor] = None


def apply_plugin_residuals(hooks: Optional[PluginResiduals], block_outputs: list) -> list:
    if hooks is None or not hooks.residuals:
        return list(block_outputs)
    if len(hooks.residuals) != len(block_outputs):
        raise DimensionError(f"{len(hooks.residuals)} residuals for {len(block_outputs)} blocks")
    out = []
    for x, r in zip(block_outputs, hooks.residuals):
        if r is None:
            out.append(x)
            continue
        try:
            fits = torch.broadcast_shapes(x.shape, r.shape) == x.shape
        except RuntimeError:
            fits = False
        if not fits:
            raise DimensionError(f"residual {tuple(r.shape)} does not fit block output {tuple(x.shape)}")
        out.append(x + r)
    return out


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionSite(nn.Module):
    """One transformer unit; ``injection`` is ``hybrid``, ``concat`` or ``none``."""

    def __init__(self, channels: int, context_dim: int, heads: int, injection: str):
        super().__init__()
        self.heads = heads
        self.injection = injection
        self.norm1 = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        if injection == "hybrid":
            self.garment_k = nn.Linear(channels, channels, bias=False)
            self.garment_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.ctx_q = nn.Linear(channels, channels, bias=False)
        self.ctx_k = nn.Linear(context_dim, channels, bias=False)
        self.ctx_v = nn.Linear(context_dim, channels, bias=False)
        self.ctx_out = nn.Linear(channels, channels)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))

    def hybrid_weights(self, lam: float = 1.0) -> HybridAttentionWeights:
        return HybridAttentionWeights(
            self.to_q.weight.T, self.to_k.weight.T, self.to_v.weight.T,
            self.garment_k.weight.T, self.garment_v.weight.T, lam, self.heads,
        )

    def forward(self, x, context, garment=None, garment_scale=None, record=None):
        b, c, hh, ww = x.shape
        h = x.flatten(2).transpose(1, 2)
        z = self.norm1(h)
        if record is not None:
            record.append(z)
        q, k, v = self.to_q(z), self.to_k(z), self.to_v(z)
        if garment is None or self.injection == "none":
            attn = multihead_attention(q, k, v, self.heads)
        elif self.injection == "hybrid":
            attn = multihead_attention(q, k, v, self.heads)
            cross = multihead_attention(q, self.garment_k(garment), self.garment_v(garment), self.heads)
            attn = attn + garment_scale.reshape(-1, 1, 1) * cross
        else:
            keep = torch.cat([
                torch.ones(b, z.shape[1], dtype=torch.bool),
                (garment_scale > 0)[:, None].expand(b, garment.shape[1]),
            ], dim=1)
            kv = torch.cat([z, garment], dim=1)
            attn = multihead_attention(q, self.to_k(kv), self.to_v(kv), self.heads, key_mask=keep)
        h = h + self.to_out(attn)
        hn = self.norm2(h)
        h = h + self.ctx_out(multihead_attention(self.ctx_q(hn), self.ctx_k(context), self.ctx_v(context), self.heads))
        h = h + self.ff(self.norm3(h))
        return h.transpose(1, 2).reshape(b, c, hh, ww)


class UNet(nn.Module):
    """Resolution pyramid over ``cfg.levels`` with one (res, attention) unit per level and side.

    ``reference=True`` builds the garment branch: plain self-attention and no
    output head, since only the site inputs are consumed.
    """

    def __init__(self, cfg: ModelConfig, reference: bool = False):
        super().__init__()
        self.cfg = cfg
        self.reference = reference
        injection = "none" if reference else cfg.injection
        cin, _, _ = cfg.latent_shape
        g, td = cfg.groups, cfg.temb_dim
        ch0 = cfg.levels[0]
        self.time_mlp = nn.Sequential(nn.Linear(ch0, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cin, ch0, 3, padding=1)

        def site(ch):
            return AttentionSite(ch, cfg.dim, cfg.heads, injection)

        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        self.up_res, self.up_attn, self.upsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        prev = ch0
        for i, ch in enumerate(cfg.levels):
            self.down_res.append(ResBlock(prev, ch, td, g))
            self.down_attn.append(site(ch))
            if i < len(cfg.levels) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        if not cfg.single_block:
            self.mid_res = ResBlock(prev, prev, td, g)
            self.mid_attn = site(prev)
            for i in reversed(range(len(cfg.levels))):
                ch = cfg.levels[i]
                self.up_res.append(ResBlock(prev + ch, ch, td, g))
                self.up_attn.append(site(ch))
                if i > 0:
                    self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
                prev = ch
        if not reference:
            self.norm_out = nn.GroupNorm(g, prev)
            self.conv_out = nn.Conv2d(prev, cin, 3, padding=1)

    def sites(self) -> list[AttentionSite]:
        out = list(self.down_attn)
        if not self.cfg.single_block:
            out.append(self.mid_attn)
            out.extend(self.up_attn)
        return out

    def forward(self, z, t, context, garment=None, garment_scale=None, hooks=None,
                record=None, trace=None):
        """Run the pyramid.

        ``garment`` is a list of per-site reference states (same order as
        :func:`hybrid_site_signature`) or None. ``record`` collects the
        normalised input of every site's self-attention; ``trace`` collects
        the down/mid block outputs after plugin residuals.
        """
        b = z.shape[0]
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(b)
        temb = self.time_mlp(timestep_features(t, self.cfg.levels[0]).to(z.dtype))
        if hooks is not None and hooks.extra_tokens is not None:
            context = torch.cat([context, hooks.extra_tokens.to(context.dtype).expand(b, -1, -1)], dim=1)
        gs = iter(garment) if garment is not None else None
        if garment is not None and garment_scale is None:
            garment_scale = torch.ones(b, dtype=z.dtype)

        def site(mod, h):
            return mod(h, context, next(gs) if gs is not None else None, garment_scale, record)

        h = self.conv_in(z)
        skips = []
        for i in range(len(self.cfg.levels)):
            h = site(self.down_attn[i], self.down_res[i](h, temb))
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        if self.cfg.single_block:
            (h,) = apply_plugin_residuals(hooks, [h])
            if trace is not None:
                trace.append(h)
        else:
            h = site(self.mid_attn, self.mid_res(h, temb))
            outs = apply_plugin_residuals(hooks, skips + [h])
            skips, h = outs[:-1], outs[-1]
            if trace is not None:
                trace.extend(outs)
            for j, i in enumerate(reversed(range(len(self.cfg.levels)))):
                h = self.up_res[j](torch.cat([h, skips[i]], dim=1), temb)
                h = site(self.up_attn[j], h)
                if i > 0:
                    h = self.upsample[j](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        if self.reference:
            return h
        return self.conv_out(F.silu(self.norm_out(h)))
