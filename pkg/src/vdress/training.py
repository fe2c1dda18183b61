"""Frozen/trainable partition, the garment-adapter training loop and base pretraining."""

from __future__ import annotations

import json
import logging
import math
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .diffusion import NoiseSchedule, denoising_loss, forward_noise, make_schedule
from .errors import ConfigError, IntegrityError, NumericError
from .model import DressingModel
from .unet import VARIANTS, check_lambda

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 4
    steps: int = 1000
    p_drop: float = 0.1
    seed: int = 0
    variant: str = "A2"
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    train_lambda: float = 1.0
    dump_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.p_drop < 1:
            raise ConfigError("p_drop must lie in [0, 1)")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError("batch_size must be a positive integer")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ConfigError("steps must be a non-negative integer")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        check_lambda(self.train_lambda)
        make_schedule(self.T, self.beta_start, self.beta_end)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# partition

_FROZEN_PREFIXES = ("denoiser.", "text_encoder.", "image_encoder.", "codec_projection")
_TRAINABLE_PREFIXES = ("garment_unet.", "projector.")


def is_trainable_name(name: str) -> bool:
    if name.startswith(_TRAINABLE_PREFIXES):
        return True
    if name.startswith("denoiser."):
        leaf = name.split(".")[-2]
        return leaf in ("garment_k", "garment_v")
    if name.startswith(_FROZEN_PREFIXES):
        return False
    raise IntegrityError(f"parameter {name!r} belongs to no known module")


@dataclass
class ParameterPartition:
    frozen: dict = field(default_factory=dict)
    trainable: dict = field(default_factory=dict)

    def counts(self) -> dict:
        return {
            "frozen_tensors": len(self.frozen),
            "trainable_tensors": len(self.trainable),
            "frozen_values": sum(p.numel() for p in self.frozen.values()),
            "trainable_values": sum(p.numel() for p in self.trainable.values()),
        }


def partition_parameters(model: DressingModel, variant: Optional[str] = None) -> ParameterPartition:
    """Split every parameter into frozen or trainable and set ``requires_grad`` to match."""
    if variant is not None and variant != model.cfg.variant:
        raise ConfigError(f"model was built as {model.cfg.variant}, asked for {variant}")
    named = dict(model.named_parameters())
    if len({id(p) for p in named.values()}) != len(list(model.parameters())):
        raise IntegrityError("some parameters are unnamed or shared")
    part = ParameterPartition()
    for name, p in named.items():
        if is_trainable_name(name):
            part.trainable[name] = p
            p.requires_grad_(True)
        else:
            part.frozen[name] = p
            p.requires_grad_(False)
    return part


def parameter_hashes(params: dict) -> dict:
    import hashlib

    return {n: hashlib.sha256(p.detach().cpu().contiguous().numpy().tobytes()).hexdigest() for n, p in params.items()}


# data


@dataclass
class PreparedData:
    """Frozen-encoder outputs for a list of pairs, computed once."""

    z0: torch.Tensor
    z_garment: torch.Tensor
    patches: torch.Tensor
    text: torch.Tensor
    ids: list

    def __len__(self):
        return self.z0.shape[0]

    def batch(self, idx) -> "PreparedData":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return PreparedData(self.z0[idx], self.z_garment[idx], self.patches[idx], self.text[idx],
                            [self.ids[i] for i in idx.tolist()])


@torch.no_grad()
def prepare_data(model: DressingModel, pairs: Sequence) -> PreparedData:
    if not pairs:
        raise ValueError("no training pairs")
    garments = np.stack([p.garment for p in pairs])
    return PreparedData(
        z0=model.image_to_latent(np.stack([p.model for p in pairs])),
        z_garment=model.image_to_latent(garments),
        patches=model.patch_tokens(garments),
        text=model.encode_prompts([p.caption for p in pairs]),
        ids=[p.pair_id for p in pairs],
    )


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> list[int]:
    """Deterministic data order: a fresh permutation per epoch, consumed in order."""
    out = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(int(i) for i in perm[offset:offset + take])
        pos += take
    return out


# training


def _generators(seed: int) -> dict:
    # independent streams so that changing one does not shift the others
    seqs = np.random.SeedSequence(seed).spawn(3)
    return {name: torch.Generator().manual_seed(int(s.generate_state(1)[0]))
            for name, s in zip(("noise", "timestep", "dropout"), seqs)}


@dataclass
class TrainState:
    model: DressingModel
    optimizer: torch.optim.Optimizer
    partition: ParameterPartition
    cfg: TrainConfig
    generators: dict
    step: int = 0
    losses: list = field(default_factory=list)


def init_state(model: DressingModel, cfg: TrainConfig) -> TrainState:
    part = partition_parameters(model, cfg.variant)
    opt = torch.optim.AdamW(list(part.trainable.values()), lr=cfg.learning_rate, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
    return TrainState(model, opt, part, cfg, _generators(cfg.seed))


def compute_loss(model, batch: PreparedData, t, eps, keep, schedule: NoiseSchedule, lam: float = 1.0):
    """Noise-prediction loss with garment and text conditions; ``keep`` False drops both."""
    z_t = forward_noise(batch.z0, eps, t, schedule)
    bundle = model.extract_features(batch.z_garment, batch.patches)
    text = batch.text * keep.to(batch.text.dtype)[:, None, None]
    pred = model.predict_noise(z_t, t, text, bundle, keep.to(z_t.dtype) * lam)
    return denoising_loss(pred, eps)


def _dump(state: TrainState, batch, t, keep, loss) -> str:
    root = Path(state.cfg.dump_dir) if state.cfg.dump_dir else Path(tempfile.mkdtemp(prefix="vdress-nan-"))
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"nonfinite_step{state.step}.json"
    path.write_text(json.dumps({
        "step": state.step, "loss": repr(float(loss)), "pair_ids": list(batch.ids),
        "timesteps": t.tolist(), "keep": keep.tolist(),
        "nonfinite_params": [n for n, p in state.partition.trainable.items() if not torch.isfinite(p).all()],
    }, indent=2))
    return str(path)


def train_step(batch: PreparedData, state: TrainState, loss_fn: Callable = compute_loss):
    """One optimisation step; returns ``(state, loss)``.

    Per item: ``t ~ U{1..T}``, ``eps ~ N(0, I)`` and, with probability
    ``p_drop``, text and garment are dropped together.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    cfg = state.cfg
    schedule = cfg.schedule()
    g = state.generators
    t = torch.randint(1, cfg.T + 1, (n,), generator=g["timestep"])
    eps = torch.randn(batch.z0.shape, generator=g["noise"], dtype=batch.z0.dtype)
    keep = torch.rand(n, generator=g["dropout"]) >= cfg.p_drop
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss = loss_fn(state.model, batch, t, eps, keep, schedule, cfg.train_lambda)
    if not torch.isfinite(loss):
        path = _dump(state, batch, t, keep, loss)
        raise NumericError(f"non-finite loss {float(loss)} at step {state.step}; diagnostics in {path}", path)
    if loss.requires_grad:
        loss.backward()
        state.optimizer.step()
    state.step += 1
    value = float(loss.detach())
    state.losses.append(value)
    return state, value


def train(state: TrainState, data: PreparedData, steps: Optional[int] = None,
          callback: Optional[Callable[[TrainState, float], None]] = None) -> TrainState:
    steps = state.cfg.steps if steps is None else steps
    for _ in range(steps):
        idx = batch_indices(len(data), state.cfg.batch_size, state.step, state.cfg.seed)
        state, loss = train_step(data.batch(idx), state)
        if callback is not None:
            callback(state, loss)
    return state


def moving_average(xs: Sequence[float], window: int = 50) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], xs]))
    lo = np.maximum(np.arange(1, len(xs) + 1) - window, 0)
    return (c[1:] - c[lo]) / (np.arange(1, len(xs) + 1) - lo)


# base pretraining


@dataclass(frozen=True)
class BaseConfig:
    """Pretraining of the text-to-image denoiser before it is frozen."""

    steps: int = 3000
    learning_rate: float = 1e-3
    batch_size: int = 8
    p_drop: float = 0.1
    seed: int = 0
    pairs: int = 64
    data_seed: int = 1000

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_base(model: DressingModel, data: PreparedData, cfg: BaseConfig, schedule: NoiseSchedule,
                  callback: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Train the plain text-conditioned denoiser, then seed the garment branch from it.

    Stands in for inheriting a pretrained text-to-image model: garment
    key/value maps are excluded and no garment features are injected.
    """
    params = [p for n, p in model.denoiser.named_parameters() if n.split(".")[-2] not in ("garment_k", "garment_v")]
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=0.0)
    gens = _generators(cfg.seed + 7919)
    losses = []
    model.train()
    for step in range(cfg.steps):
        idx = batch_indices(len(data), cfg.batch_size, step, cfg.seed + 7919)
        b = data.batch(idx)
        n = len(b)
        t = torch.randint(1, schedule.T + 1, (n,), generator=gens["timestep"])
        eps = torch.randn(b.z0.shape, generator=gens["noise"], dtype=b.z0.dtype)
        keep = (torch.rand(n, generator=gens["dropout"]) >= cfg.p_drop).to(b.text.dtype)
        z_t = forward_noise(b.z0, eps, t, schedule)
        pred = model.predict_noise(z_t, t, b.text * keep[:, None, None], None)
        loss = denoising_loss(pred, eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if callback is not None:
            callback(step, losses[-1])
    for p in params:
        p.requires_grad_(False)
    model.init_garment_from_denoiser()
    return losses
