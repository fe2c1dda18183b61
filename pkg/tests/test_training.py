import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from vdress import checkpoint, workflow
from vdress.config import RunConfig
from vdress.data import load_pairs, synth_pairs
from vdress.errors import CheckpointError, ConfigError, IntegrityError, NumericError
from vdress.model import DressingModel
from vdress.training import (TrainConfig, batch_indices, init_state, moving_average, parameter_hashes,
                             partition_parameters, prepare_data, train, train_step)
from vdress.unet import hybrid_site_signature


@pytest.fixture(scope="module")
def tiny_pairs(tmp_path_factory):
    return load_pairs(synth_pairs(4, 0, tmp_path_factory.mktemp("tiny"), size=(32, 32)), per_garment=1)


def _oracle_trainable(model):
    """Enumerate trainable tensors module by module, independently of the name rule."""
    names = {f"garment_unet.{n}" for n, _ in model.garment_unet.named_parameters()}
    if model.projector is not None:
        names |= {f"projector.{n}" for n, _ in model.projector.named_parameters()}
    for mod_name, mod in model.denoiser.named_modules():
        for leaf in ("garment_k", "garment_v"):
            if hasattr(mod, leaf):
                names.add(f"denoiser.{mod_name}.{leaf}.weight")
    return names


def _oracle_count(model):
    n = sum(p.numel() for p in model.garment_unet.parameters())
    if model.projector is not None:
        n += sum(p.numel() for p in model.projector.parameters())
    return n + sum(2 * width * width for _, _, width in hybrid_site_signature(model.cfg))


def test_desk_partition_matches_oracle(desk_model):
    part = partition_parameters(desk_model)
    assert set(part.trainable) == _oracle_trainable(desk_model)
    assert part.counts()["trainable_values"] == _oracle_count(desk_model)
    everything = dict(desk_model.named_parameters())
    assert set(part.trainable).isdisjoint(part.frozen)
    assert set(part.trainable) | set(part.frozen) == set(everything)
    assert all(n in part.frozen for n in everything if n.startswith("denoiser.") and ".to_q." in n)
    assert all(p.requires_grad for p in part.trainable.values())
    assert not any(p.requires_grad for p in part.frozen.values())


@pytest.mark.parametrize("variant", ["A0", "A1", "A2"])
def test_variant_partitions(tiny_cfg, variant):
    model = DressingModel(replace(tiny_cfg, variant=variant))
    part = partition_parameters(model, variant)
    assert set(part.trainable) == _oracle_trainable(model)
    has_projector = any(n.startswith("projector.") for n in part.trainable)
    assert has_projector == (variant != "A0")


def test_partition_rejects_wrong_variant_and_unknown_modules(tiny_cfg):
    model = DressingModel(tiny_cfg)
    with pytest.raises(ConfigError):
        partition_parameters(model, "A0")
    model.stray = torch.nn.Linear(2, 2)
    with pytest.raises(IntegrityError):
        partition_parameters(model)


def test_frozen_hashes_survive_training(tiny_cfg, tiny_pairs):
    model = DressingModel(tiny_cfg)
    state = init_state(model, TrainConfig(steps=30, learning_rate=1e-3))
    before_frozen = parameter_hashes(state.partition.frozen)
    before_train = parameter_hashes(state.partition.trainable)
    train(state, prepare_data(model, tiny_pairs))
    assert parameter_hashes(state.partition.frozen) == before_frozen
    after = parameter_hashes(state.partition.trainable)
    assert sum(after[n] != before_train[n] for n in after) > len(after) // 2


def _run(tiny_cfg, pairs, steps=12, seed=3):
    model = DressingModel(tiny_cfg)
    state = init_state(model, TrainConfig(steps=steps, seed=seed, learning_rate=1e-3))
    return train(state, prepare_data(model, pairs))


def test_training_is_deterministic(tiny_cfg, tiny_pairs):
    a = _run(tiny_cfg, tiny_pairs)
    b = _run(tiny_cfg, tiny_pairs)
    assert np.max(np.abs(np.array(a.losses) - np.array(b.losses))) <= 1e-10
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n
    c = _run(tiny_cfg, tiny_pairs, seed=4)
    assert c.losses != a.losses


def test_perfect_predictor_gives_zero_loss_and_no_update(tiny_cfg, tiny_pairs, monkeypatch):
    model = DressingModel(tiny_cfg)
    state = init_state(model, TrainConfig(learning_rate=1e-2))
    data = prepare_data(model, tiny_pairs)
    captured = {}

    def exact(z_t, t, text, bundle=None, lam=1.0, **kw):
        return captured["eps"]

    real_randn = torch.randn

    def spy(*args, **kw):
        captured["eps"] = real_randn(*args, **kw)
        return captured["eps"]

    monkeypatch.setattr(model, "predict_noise", exact)
    monkeypatch.setattr(torch, "randn", spy)
    before = {n: p.clone() for n, p in model.named_parameters()}
    _, loss = train_step(data.batch([0, 1]), state)
    assert loss == 0.0
    assert all(torch.equal(before[n], p) for n, p in model.named_parameters())


def test_nonfinite_loss_raises_with_dump(tiny_cfg, tiny_pairs, tmp_path, monkeypatch):
    model = DressingModel(tiny_cfg)
    state = init_state(model, TrainConfig(dump_dir=str(tmp_path)))
    data = prepare_data(model, tiny_pairs)
    monkeypatch.setattr(model, "predict_noise", lambda z_t, *a, **k: z_t * float("nan"))
    with pytest.raises(NumericError) as err:
        train_step(data.batch([0]), state)
    dumps = list(tmp_path.glob("nonfinite_step*.json"))
    assert len(dumps) == 1 and str(dumps[0]) in str(err.value)
    assert json.loads(dumps[0].read_text())["pair_ids"] == [tiny_pairs[0].pair_id]


def test_empty_batch_and_no_pairs(tiny_cfg, tiny_pairs):
    model = DressingModel(tiny_cfg)
    state = init_state(model, TrainConfig())
    data = prepare_data(model, tiny_pairs)
    with pytest.raises(ValueError):
        train_step(data.batch([]), state)
    with pytest.raises(ValueError):
        prepare_data(model, [])


@pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"p_drop": 1.0}, {"p_drop": -0.1}, {"variant": "A3"},
                                {"batch_size": 0}])
def test_train_config_rejects(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_batch_order_is_a_permutation_per_epoch():
    order = [i for k in range(6) for i in batch_indices(8, 4, k, seed=5)]
    for e in range(3):
        assert sorted(order[8 * e:8 * e + 8]) == list(range(8))
    assert order == [i for k in range(6) for i in batch_indices(8, 4, k, seed=5)]


def test_moving_average():
    xs = np.arange(1.0, 101.0)
    ma = moving_average(xs, 50)
    assert ma[0] == 1.0 and ma[49] == 25.5 and ma[-1] == np.mean(xs[-50:])


# checkpoints


def test_checkpoint_roundtrip_is_bitwise(tiny_cfg, tiny_pairs, tmp_path):
    state = _run(tiny_cfg, tiny_pairs, steps=4)
    checkpoint.save_checkpoint(state.model, state, tmp_path / "ck")
    model2, state2 = checkpoint.load_checkpoint(tmp_path / "ck", expect_config=tiny_cfg)
    for (n, p), (_, q) in zip(state.model.named_parameters(), model2.named_parameters()):
        assert torch.equal(p, q), n
    for n, p in state.partition.trainable.items():
        a, b = state.optimizer.state.get(p), state2.optimizer.state.get(state2.partition.trainable[n])
        if not a:
            assert not b
            continue
        assert torch.equal(a["exp_avg"], b["exp_avg"]) and torch.equal(a["exp_avg_sq"], b["exp_avg_sq"])
    assert state2.step == 4 and state2.losses == state.losses and state2.cfg == state.cfg
    meta = checkpoint.read_meta(tmp_path / "ck")
    assert meta["partition"]["counts"] == state.partition.counts()


def test_resume_continues_the_same_curve(tiny_cfg, tiny_pairs, tmp_path):
    full = _run(tiny_cfg, tiny_pairs, steps=10)
    half = _run(tiny_cfg, tiny_pairs, steps=5)
    checkpoint.save_checkpoint(half.model, half, tmp_path / "half")
    model, state = checkpoint.load_checkpoint(tmp_path / "half")
    train(state, prepare_data(model, tiny_pairs), 5)
    assert state.losses == full.losses
    for (n, p), (_, q) in zip(full.model.named_parameters(), model.named_parameters()):
        assert torch.equal(p, q), n


def test_checkpoint_rejects_mismatched_config(tiny_cfg, tmp_path):
    model = DressingModel(tiny_cfg)
    checkpoint.save_checkpoint(model, None, tmp_path / "w")
    with pytest.raises(ConfigError):
        checkpoint.load_checkpoint(tmp_path / "w", expect_config=replace(tiny_cfg, dim=32))
    loaded, state = checkpoint.load_checkpoint(tmp_path / "w")
    assert state is None and loaded.cfg == tiny_cfg


def test_checkpoint_truncated_file_named(tiny_cfg, tmp_path):
    model = DressingModel(tiny_cfg)
    root = checkpoint.save_checkpoint(model, None, tmp_path / "t")
    victim = sorted((root / "params").glob("*.bin"))[3]
    victim.write_bytes(victim.read_bytes()[:-6])
    with pytest.raises(CheckpointError, match=victim.name.replace(".", r"\.")):
        checkpoint.load_checkpoint(root)


def test_checkpoint_version_mismatch(tiny_cfg, tmp_path):
    root = checkpoint.save_checkpoint(DressingModel(tiny_cfg), None, tmp_path / "v")
    meta = json.loads((root / "meta.json").read_text())
    meta["format_version"] = 99
    (root / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="meta.json"):
        checkpoint.load_checkpoint(root)


def test_desk_checkpoint_lists_five_sites(desk_model, tmp_path):
    root = checkpoint.save_checkpoint(desk_model, None, tmp_path / "desk")
    sites = checkpoint.read_meta(root)["partition"]["sites"]
    assert [tuple(s) for s in sites] == [tuple(s) for s in hybrid_site_signature(desk_model.cfg)]
    assert len(sites) == 5


def test_transfer_base_copies_denoiser(tiny_cfg):
    base = DressingModel(replace(tiny_cfg, seed=9))
    for variant in ("A0", "A1", "A2"):
        dst = workflow.transfer_base(base, DressingModel(replace(tiny_cfg, variant=variant)))
        src = base.denoiser.state_dict()
        for k, v in dst.denoiser.state_dict().items():
            if k in src:
                assert torch.equal(v, src[k]), k
        for k, v in dst.garment_unet.state_dict().items():
            assert torch.equal(v, src[k]), k


def test_run_config_overrides_and_rejects(tmp_path):
    cfg = RunConfig().override({"train.steps": 7, "model.variant": "A1"})
    assert cfg.train.steps == 7 and cfg.train.variant == "A1"
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"steps": 1, "bogus": 2}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"extra": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"variant": "A0"}})
