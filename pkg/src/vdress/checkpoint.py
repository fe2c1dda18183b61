"""Checkpoint directories: ``meta.json`` plus one raw array file per tensor.

Array files start with a text header line ``<dtype> <dim0> <dim1> ...`` and
continue with little-endian row-major values. Parameters are 32-bit floats;
AdamW moments are stored the same way under ``optim/``.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .codec import CodecConfig
from .errors import CheckpointError, ConfigError
from .model import DressingModel
from .training import TrainConfig, TrainState, init_state
from .unet import ModelConfig, hybrid_site_signature

FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}


def write_array(arr: np.ndarray, path: Path, kind: str = "f32") -> None:
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[kind])
    header = " ".join([kind, *map(str, arr.shape)]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes(order="C"))


def read_array(path: Path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii").split()
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path.name}: cannot read ({exc})") from exc
    if not header or header[0] not in _DTYPES:
        raise CheckpointError(f"{path.name}: bad header")
    dtype = np.dtype(_DTYPES[header[0]])
    shape = tuple(int(s) for s in header[1:])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise CheckpointError(f"{path.name}: truncated payload ({len(payload)} of {expected} bytes)")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def _gen_state(g: torch.Generator) -> str:
    return base64.b64encode(g.get_state().numpy().tobytes()).decode("ascii")


def _set_gen_state(g: torch.Generator, s: str) -> None:
    g.set_state(torch.frombuffer(bytearray(base64.b64decode(s)), dtype=torch.uint8))


def save_checkpoint(model: DressingModel, state: Optional[TrainState], path) -> Path:
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, p in model.named_parameters():
        write_array(p.detach().cpu().numpy(), root / "params" / f"{name}.bin")
        names.append(name)
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "codec_config": {"factor": model.codec_cfg.factor, "latent_channels": model.codec_cfg.latent_channels,
                         "seed": model.codec_cfg.seed},
        "parameters": names,
        "step": 0,
        "train_config": None,
    }
    if state is not None:
        (root / "optim").mkdir(exist_ok=True)
        opt_state = {}
        for name, p in state.partition.trainable.items():
            st = state.optimizer.state.get(p)
            if not st:
                continue
            write_array(st["exp_avg"].numpy(), root / "optim" / f"{name}.exp_avg.bin")
            write_array(st["exp_avg_sq"].numpy(), root / "optim" / f"{name}.exp_avg_sq.bin")
            opt_state[name] = float(st["step"])
        meta.update({
            "step": state.step,
            "train_config": state.cfg.to_dict(),
            "partition": {
                "trainable": sorted(state.partition.trainable),
                "frozen": sorted(state.partition.frozen),
                "counts": state.partition.counts(),
                "sites": [list(s) for s in hybrid_site_signature(model.cfg)],
            },
            "optimizer_steps": opt_state,
            "generators": {k: _gen_state(g) for k, g in state.generators.items()},
            "losses": state.losses,
        })
    else:
        meta["partition"] = {"sites": [list(s) for s in hybrid_site_signature(model.cfg)]}
    (root / "meta.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return root


def read_meta(path) -> dict:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"meta.json: unreadable ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"meta.json: format version {meta.get('format_version')} != {FORMAT_VERSION}")
    return meta


def load_checkpoint(path, expect_config: Optional[ModelConfig] = None):
    """Return ``(model, state)``; ``state`` is None for weight-only checkpoints.

    Every array is read and checked before the model is touched, so a
    failure never leaves a partially loaded model behind.
    """
    root = Path(path)
    meta = read_meta(root)
    mc = meta["model_config"]
    cfg = ModelConfig(**mc)
    if expect_config is not None and expect_config != cfg:
        raise ConfigError(f"checkpoint model config {mc} does not match the expected {expect_config.to_dict()}")
    model = DressingModel(cfg, CodecConfig(**meta["codec_config"]))
    named = dict(model.named_parameters())
    if set(meta["parameters"]) != set(named):
        raise CheckpointError("params: parameter set differs from the configured model")
    arrays = {}
    for name in meta["parameters"]:
        arr = read_array(root / "params" / f"{name}.bin")
        if arr.shape != tuple(named[name].shape):
            raise CheckpointError(f"params/{name}: shape {arr.shape} != {tuple(named[name].shape)}")
        arrays[name] = arr
    moments = {}
    if meta.get("train_config") is not None:
        for name in meta.get("optimizer_steps", {}):
            moments[name] = (read_array(root / "optim" / f"{name}.exp_avg.bin"),
                             read_array(root / "optim" / f"{name}.exp_avg_sq.bin"))
    with torch.no_grad():
        for name, arr in arrays.items():
            named[name].copy_(torch.from_numpy(arr))
    if meta.get("train_config") is None:
        return model, None
    tc = dict(meta["train_config"])
    state = init_state(model, TrainConfig(**tc))
    for name, (m1, m2) in moments.items():
        p = state.partition.trainable[name]
        state.optimizer.state[p] = {
            "step": torch.tensor(meta["optimizer_steps"][name]),
            "exp_avg": torch.from_numpy(m1),
            "exp_avg_sq": torch.from_numpy(m2),
        }
    for k, s in meta.get("generators", {}).items():
        _set_gen_state(state.generators[k], s)
    state.step = int(meta["step"])
    state.losses = list(meta.get("losses", []))
    return model, state
