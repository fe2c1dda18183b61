"""Reference pass of the garment UNet: one noiseless forward, per-site features."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError
from .unet import UNet, hybrid_site_signature


@dataclass(frozen=True)
class GarmentFeatureBundle:
    """Per-site reference states, each ``(B, N_i, D_i)``, in denoiser site order."""

    sites: tuple

    def signature(self) -> list[tuple[str, int, int]]:
        return [(sid, int(x.shape[1]), int(x.shape[2])) for sid, x in self.sites]

    def tensors(self) -> list[torch.Tensor]:
        return [x for _, x in self.sites]

    def detach(self) -> "GarmentFeatureBundle":
        return GarmentFeatureBundle(tuple((sid, x.detach()) for sid, x in self.sites))


def _topology(cfg):
    return (cfg.levels, cfg.heads, cfg.dim, cfg.latent_shape, cfg.temb_dim, cfg.groups, cfg.single_block)


def extract_features(z_g: torch.Tensor, tokens: torch.Tensor, garment_unet: UNet,
                     denoiser_cfg=None) -> GarmentFeatureBundle:
    """Run the reference UNet once at timestep 0 and keep every site's self-attention input.

    ``z_g`` is the clean garment latent ``(B, C, h, w)``; ``tokens`` the
    projected garment tokens ``(B, M, D)`` used as the cross-attention context.
    """
    cfg = garment_unet.cfg
    if denoiser_cfg is not None and _topology(cfg) != _topology(denoiser_cfg):
        raise ConfigError("garment UNet and denoising UNet topologies differ")
    if tuple(z_g.shape[1:]) != cfg.latent_shape:
        raise ConfigError(f"garment latent {tuple(z_g.shape[1:])} != configured {cfg.latent_shape}")
    record: list[torch.Tensor] = []
    t0 = torch.zeros(z_g.shape[0], dtype=torch.long)
    garment_unet(z_g, t0, tokens, record=record)
    ids = [sid for sid, _, _ in hybrid_site_signature(cfg)]
    return GarmentFeatureBundle(tuple(zip(ids, record)))
