"""End-to-end workflows shared by the command line, the experiment scripts and the tests.

Base pretraining, adapter training, sampling, scoring and the ablation
harness live here so that every entry point runs the same code path.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint
from .cami import CAMIScorer, EvalPair, evaluate_corpus
from .codec import CodecConfig
from .config import RunConfig
from .data import TrainingPair, load_pairs, synth_pairs
from .diffusion import NoiseSchedule
from .model import DressingModel
from .training import BaseConfig, TrainConfig, init_state, prepare_data, pretrain_base, train
from .unet import ModelConfig

log = logging.getLogger(__name__)

FACE_HALF = (6, 7)  # half width/height of the face box around the nose joint


# base model


def transfer_base(src: DressingModel, dst: DressingModel) -> DressingModel:
    """Copy the pretrained denoiser into ``dst`` (any variant) and reseed its garment branch."""
    own = dst.denoiser.state_dict()
    shared = {k: v for k, v in src.denoiser.state_dict().items() if k in own}
    missing = [k for k in own if k not in shared and k.split(".")[-2] not in ("garment_k", "garment_v")]
    if missing:
        raise ValueError(f"source denoiser lacks {missing[:3]}")
    with torch.no_grad():
        for k, v in shared.items():
            own[k].copy_(v)
    dst.init_garment_from_denoiser()
    return dst


def base_model(cfg: RunConfig, workdir, log_every: int = 0) -> DressingModel:
    """Pretrained text-to-image denoiser, cached as a weight-only checkpoint under ``workdir``.

    The cache key is the model/codec/base/schedule configuration; the
    variant is normalised to A2 so all ablation arms share one base.
    """
    workdir = Path(workdir)
    mcfg = replace(cfg.model, variant="A2")
    tcfg = cfg.train
    key = f"base_s{cfg.base.seed}_d{cfg.base.data_seed}_n{cfg.base.pairs}_k{cfg.base.steps}" \
          f"_T{tcfg.T}_{tcfg.beta_start:g}_{tcfg.beta_end:g}"
    ckpt = workdir / key
    if (ckpt / "meta.json").exists():
        model, _ = checkpoint.load_checkpoint(ckpt, expect_config=mcfg)
        return model
    model = DressingModel(mcfg, cfg.codec)
    manifest = synth_pairs(cfg.base.pairs, cfg.base.data_seed, workdir / f"base_data_{cfg.base.data_seed}")
    data = prepare_data(model, load_pairs(manifest, per_garment=None))
    t0 = time.time()

    def report(step, loss):
        if log_every and (step + 1) % log_every == 0:
            log.info("base step %d loss %.5f (%.0fs)", step + 1, loss, time.time() - t0)

    pretrain_base(model, data, cfg.base, tcfg.schedule(), callback=report)
    checkpoint.save_checkpoint(model, None, ckpt)
    return model


def variant_model(cfg: RunConfig, base: DressingModel) -> DressingModel:
    return transfer_base(base, DressingModel(cfg.model, cfg.codec))


# training


def train_adapter(model: DressingModel, pairs: Sequence[TrainingPair], tcfg: TrainConfig,
                  state=None, steps: Optional[int] = None, log_every: int = 0,
                  on_step: Optional[Callable] = None):
    """Train the garment branch; returns the final training state."""
    data = prepare_data(model, pairs)
    state = state or init_state(model, tcfg)
    total = tcfg.steps if steps is None else steps
    t0 = time.time()

    def cb(s, loss):
        if log_every and s.step % log_every == 0:
            log.info("step %d loss %.5f (%.0fs)", s.step, loss, time.time() - t0)
        if on_step is not None:
            on_step(s, loss)

    return train(state, data, max(total - state.step, 0), callback=cb)


@torch.no_grad()
def step0_loss(model: DressingModel, pairs: Sequence[TrainingPair], tcfg: TrainConfig, window: int = 50) -> float:
    """Mean loss of the untouched parameters over the first ``window`` training batches.

    Uses the same data order and random streams as training but takes no
    optimiser step, so it measures where training starts from.
    """
    from .training import batch_indices, compute_loss, _generators

    data = prepare_data(model, pairs)
    g = _generators(tcfg.seed)
    schedule = tcfg.schedule()
    model.train()
    out = []
    for k in range(window):
        b = data.batch(batch_indices(len(data), tcfg.batch_size, k, tcfg.seed))
        n = len(b)
        t = torch.randint(1, tcfg.T + 1, (n,), generator=g["timestep"])
        eps = torch.randn(b.z0.shape, generator=g["noise"], dtype=b.z0.dtype)
        keep = torch.rand(n, generator=g["dropout"]) >= tcfg.p_drop
        out.append(float(compute_loss(model, b, t, eps, keep, schedule, tcfg.train_lambda)))
    return float(np.mean(out))


# sampling and scoring


def sample_image(model: DressingModel, garment: np.ndarray, prompt: str, *, schedule: NoiseSchedule,
                 lam: float, w: float, steps: int, seed: int) -> np.ndarray:
    z = model.generate(garment, prompt, schedule=schedule, lam=lam, w=w, steps=steps, seed=seed)
    return model.latent_to_image(z)[0]


def face_box(keypoints) -> Optional[tuple]:
    if keypoints is None or keypoints[0][2] <= 0:
        return None
    x, y = float(keypoints[0][0]), float(keypoints[0][1])
    return (x - FACE_HALF[0], y - FACE_HALF[1], x + FACE_HALF[0] + 1, y + FACE_HALF[1] + 1)


def eval_pair(pair: TrainingPair, generated: np.ndarray, keypoints_gen=None, prompt: Optional[str] = "") -> EvalPair:
    """Comparison of ``generated`` with the pair's garment, using the pair's mask and annotations.

    The face reference is the head region of the pair's own model image;
    ``prompt=""`` means "use the pair caption", ``None`` disables the text term.
    """
    box = face_box(pair.keypoints)
    face_ref = None
    if box is not None:
        x0, y0, x1, y1 = (int(round(v)) for v in box)
        face_ref = pair.model[:, max(y0, 0):y1, max(x0, 0):x1]
        if face_ref.size == 0:
            face_ref, box = None, None
    return EvalPair(
        reference_garment=pair.garment, generated=generated, garment_mask=pair.mask,
        keypoints_ref=pair.keypoints, keypoints_gen=keypoints_gen, face_reference=face_ref, face_box=box,
        prompt=pair.caption if prompt == "" else prompt, pair_id=pair.pair_id,
    )


def sample_and_score(model: DressingModel, pairs: Sequence[TrainingPair], schedule: NoiseSchedule, *,
                     lam: float, w: float, steps: int, seeds: Sequence[int], metric: str = "cami-u",
                     scorer: Optional[CAMIScorer] = None) -> dict:
    """Sample every pair under every seed and score against its own garment."""
    evals = []
    for seed in seeds:
        for i, p in enumerate(pairs):
            img = sample_image(model, p.garment, p.caption, schedule=schedule, lam=lam, w=w, steps=steps,
                               seed=int(seed) * 1000 + i)
            ep = eval_pair(p, img)
            ep.pair_id = f"{p.pair_id}@{seed}"
            evals.append(ep)
    return evaluate_corpus(evals, metric, scorer)


# ablation


@dataclass
class AblationRow:
    variant: str
    seed: int
    final_loss: float
    trainable: int
    means: dict = field(default_factory=dict)


def ablate(cfg: RunConfig, workdir, variants: Sequence[str] = ("A0", "A1", "A2"),
           seeds: Sequence[int] = (0,), log_every: int = 0) -> dict:
    """Train and score each variant from one shared base.

    Scoring samples each training garment under the held-out sampling
    seeds of ``cfg.eval`` and reports mean CAMI sub-scores per variant.
    """
    workdir = Path(workdir)
    base = base_model(cfg, workdir, log_every)
    manifest = synth_pairs(cfg.data.pairs, cfg.data.seed, workdir / f"train_data_{cfg.data.seed}")
    pairs = load_pairs(manifest, per_garment=cfg.data.per_garment)
    rows = []
    for v in variants:
        for seed in seeds:
            rc = cfg.override({"model.variant": v, "train.variant": v, "train.seed": int(seed)})
            model = variant_model(rc, base)
            state = train_adapter(model, pairs, rc.train, log_every=log_every)
            rep = sample_and_score(model, pairs, rc.train.schedule(), lam=rc.sampler.lam, w=rc.sampler.w,
                                   steps=rc.sampler.steps, seeds=rc.eval.seeds, metric=rc.eval.metric)
            rows.append(AblationRow(v, int(seed), float(np.mean(state.losses[-50:])) if state.losses else float("nan"),
                                    state.partition.counts()["trainable_values"], rep["means"]))
            log.info("%s seed %d cami_u %.4f", v, seed, rep["means"]["cami_u"] or float("nan"))
    table = []
    for v in variants:
        rs = [r for r in rows if r.variant == v]
        keys = [k for k in rs[0].means if not k.startswith("n_")]
        means = {}
        for k in keys:
            vals = [r.means[k] for r in rs if r.means[k] is not None]
            means[k] = float(np.mean(vals)) if vals else None
        table.append({"variant": v, "seeds": [r.seed for r in rs], "trainable_values": rs[0].trainable,
                      "final_loss": float(np.mean([r.final_loss for r in rs])),
                      "per_seed_cami_u": [r.means["cami_u"] for r in rs], **means})
    return {"config": cfg.to_dict(), "rows": table}


def format_table(report: dict) -> str:
    cols = ("variant", "cami_u", "s_structure", "s_texture", "s_keypoint", "final_loss")
    lines = ["  ".join(f"{c:>11}" for c in cols)]
    for r in report["rows"]:
        lines.append("  ".join(f"{r[c]:>11}" if isinstance(r[c], str) else
                               (f"{r[c]:>11.4f}" if r[c] is not None else f"{'null':>11}") for c in cols))
    return "\n".join(lines)
