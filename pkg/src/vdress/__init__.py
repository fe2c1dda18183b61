"""Garment-conditioned latent diffusion at desk scale.

A frozen text-to-image denoising UNet receives garment features from a
trainable reference UNet through hybrid attention, plus the CAMI affinity
metrics and a synthetic paired-data pipeline used to train and score it.
"""

__version__ = "0.1.0"
