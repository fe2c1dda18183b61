"""The assembled dressing model: encoders, projector, reference UNet and denoiser."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import codec
from .codec import CodecConfig
from .diffusion import NoiseSchedule, sample
from .encoders import ImageEncoder, Projector, TextEncoder
from .errors import ConfigError
from .garment import GarmentFeatureBundle, extract_features
from .unet import ModelConfig, PluginResiduals, UNet, check_lambda, hybrid_site_signature

LATENT_SCALE = 0.25


class DressingModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), codec_cfg: CodecConfig = CodecConfig()):
        super().__init__()
        if codec_cfg.latent_channels != cfg.latent_shape[0]:
            raise ConfigError("codec latent channels must match the UNet latent channels")
        self.cfg = cfg
        self.codec_cfg = codec_cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.denoiser = UNet(cfg)
            self.garment_unet = UNet(cfg, reference=True)
            self.projector = (
                Projector(cfg.dim, cfg.garment_queries, cfg.heads, seed=cfg.seed + 2)
                if cfg.uses_image_branch else None
            )
        self.text_encoder = TextEncoder(cfg.dim, cfg.text_length, vocab_seed=cfg.seed)
        self.image_encoder = ImageEncoder(cfg.dim, seed=cfg.seed + 1)
        self.codec_projection = nn.Parameter(
            torch.tensor(np.array(codec.projection_matrix(codec_cfg)), dtype=torch.float32), requires_grad=False
        )
        self.init_garment_from_denoiser()

    @torch.no_grad()
    def init_garment_from_denoiser(self):
        """Copy the denoiser weights into the reference UNet and the garment key/value maps."""
        src = self.denoiser.state_dict()
        dst = self.garment_unet.state_dict()
        self.garment_unet.load_state_dict({k: src[k].clone() for k in dst})
        if self.cfg.injection == "hybrid":
            for site in self.denoiser.sites():
                site.garment_k.weight.copy_(site.to_k.weight)
                site.garment_v.weight.copy_(site.to_v.weight)

    # image <-> latent

    def image_to_latent(self, imgs) -> torch.Tensor:
        """``(B, 3, H, W)`` images in [0, 1] -> normalised model latents."""
        z = codec.encode(np.asarray(imgs, dtype=np.float64) - 0.5, self.codec_cfg)
        return torch.as_tensor(z * LATENT_SCALE, dtype=self.dtype)

    def latent_to_image(self, z: torch.Tensor) -> np.ndarray:
        z = z.detach().to(torch.float64).numpy() / LATENT_SCALE
        return np.clip(codec.decode(z, self.codec_cfg, clamp=False) + 0.5, 0.0, 1.0)

    def latent_bound(self) -> torch.Tensor:
        """Per-channel bound on latents of images in [0, 1], shaped ``(C, 1, 1)``.

        A row ``r`` applied to a centred patch with entries in [-0.5, 0.5]
        is at most ``0.5 * |r|_1`` in magnitude.
        """
        rows = self.codec_projection.detach().to(torch.float64).abs().sum(dim=1)
        return (0.5 * LATENT_SCALE * rows).to(self.dtype)[:, None, None]

    @property
    def dtype(self):
        return self.text_encoder.table.dtype

    # conditions

    def encode_prompts(self, prompts: Sequence[str]) -> torch.Tensor:
        return torch.stack([self.text_encoder(p) for p in prompts])

    def null_text(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.cfg.text_length, self.cfg.dim, dtype=self.dtype)

    def patch_tokens(self, garment_imgs) -> torch.Tensor:
        return self.image_encoder(torch.as_tensor(np.asarray(garment_imgs), dtype=self.dtype))

    def garment_tokens(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        if self.projector is None:
            b = patch_tokens.shape[0]
            return torch.zeros(b, self.cfg.garment_queries, self.cfg.dim, dtype=self.dtype)
        return self.projector(patch_tokens)

    def extract_features(self, z_g: torch.Tensor, patch_tokens: torch.Tensor) -> GarmentFeatureBundle:
        return extract_features(z_g, self.garment_tokens(patch_tokens), self.garment_unet, self.cfg)

    def site_signature(self):
        return hybrid_site_signature(self.cfg)

    def predict_noise(self, z_t, t, text, bundle: Optional[GarmentFeatureBundle] = None, lam=1.0,
                      hooks: Optional[PluginResiduals] = None, trace=None) -> torch.Tensor:
        """Noise prediction; ``bundle=None`` is the unconditional garment branch.

        ``lam`` is a float in [0, 1.5] or a per-item tensor of strengths.
        """
        garment = None
        scale = None
        if bundle is not None:
            if bundle.signature() != self.site_signature():
                raise ConfigError(f"bundle signature {bundle.signature()} != {self.site_signature()}")
            garment = bundle.tensors()
            if isinstance(lam, torch.Tensor):
                scale = lam.to(z_t.dtype)
            else:
                scale = torch.full((z_t.shape[0],), check_lambda(lam), dtype=z_t.dtype)
        return self.denoiser(z_t, t, text, garment, scale, hooks=hooks, trace=trace)

    @torch.no_grad()
    def generate(self, garment_img: np.ndarray, prompt: str, *, schedule: NoiseSchedule,
                 lam: float = 1.0, w: float = 7.0, steps: int = 50, seed: int = 0,
                 hooks: Optional[PluginResiduals] = None) -> torch.Tensor:
        """Sample one latent for a ``3 x H x W`` garment image and a prompt."""
        lam = check_lambda(lam)
        z_g = self.image_to_latent(garment_img[None])
        bundle = self.extract_features(z_g, self.patch_tokens(garment_img[None]))
        text = self.encode_prompts([prompt])
        null_text = self.null_text(1)

        def predict(z, t, cond):
            if cond is None:
                return self.predict_noise(z, t, null_text, None, hooks=hooks)
            return self.predict_noise(z, t, text, bundle, lam, hooks=hooks)

        return sample(predict, True, shape=(1, *self.cfg.latent_shape), steps=steps,
                      schedule=schedule, w=w, seed=seed, dtype=self.dtype, clip=self.latent_bound())
