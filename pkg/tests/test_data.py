import filecmp
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vdress.data import (CATEGORIES, GateChain, ImageItem, PairRecord, TORSO_JOINTS, load_mask, load_pairs, load_rgb,
                         parse_manifest, pose_gate, role_gate, synth_pairs, write_manifest)
from vdress.errors import ParseError, PipelineError, ValidationError


def _record(i=0, **kw):
    d = dict(pair_id=f"p{i}", garment_image=f"g/{i}.png", model_images=[f"m/{i}_0.png", f"m/{i}_1.png"],
             category=i % 18, captions=[["template", f"caption {i} ünïcode"]],
             keypoints=[[[1.5, 2.0, 0.9]] * 18] * 2, garment_mask=["k/0.png", "k/1.png"])
    d.update(kw)
    return PairRecord(**d)


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert parse_manifest(tmp_path / "m.jsonl") == []


def test_roundtrip_byte_identical(tmp_path):
    recs = [_record(i) for i in range(100)]
    a = write_manifest(recs, tmp_path / "a.jsonl")
    back = parse_manifest(a)
    assert back == recs
    b = write_manifest(back, tmp_path / "b.jsonl")
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text(encoding="utf-8").splitlines()) == 100


def test_validation_names_field(tmp_path):
    with pytest.raises(ValidationError) as e:
        _record(category=18).validate()
    assert e.value.field == "category"
    with pytest.raises(ValidationError) as e:
        _record(model_images=["x"]).validate()
    assert e.value.field == "model_images"
    _record(model_images=["x"], keypoints=None, garment_mask=None, partial=True).validate()
    with pytest.raises(ValidationError) as e:
        _record(keypoints=[[[0, 0, 1]] * 17] * 2).validate()
    assert e.value.field == "keypoints"


def test_parse_errors_carry_line(tmp_path):
    good = _record().to_json()
    p = tmp_path / "m.jsonl"
    p.write_text(good + "\n{not json\n")
    with pytest.raises(ParseError) as e:
        parse_manifest(p)
    assert e.value.line == 2
    bad = json.loads(good)
    bad["category"] = 99
    p.write_text(good + "\n" + good + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(ValidationError) as e:
        parse_manifest(p)
    assert e.value.line == 3 and e.value.field == "category"
    bad = json.loads(good)
    bad["extra"] = 1
    p.write_text(json.dumps(bad) + "\n")
    with pytest.raises(ValidationError):
        parse_manifest(p)


def _pose(conf):
    return [[10.0, 10.0, c] for c in conf]


def test_pose_gate_basic():
    assert pose_gate(_pose([1.0] * 18))
    assert not pose_gate(_pose([0.0] * 18))
    with pytest.raises(ValidationError):
        pose_gate(_pose([1.0] * 17))


def test_pose_gate_13_vs_14():
    others = [i for i in range(18) if i not in TORSO_JOINTS]
    for n in (13, 14):
        conf = [0.0] * 18
        for i in list(TORSO_JOINTS) + others[: n - len(TORSO_JOINTS)]:
            conf[i] = 0.31
        assert pose_gate(_pose(conf)) is (n == 14)
    conf = [1.0] * 18
    conf[1] = 0.3  # neck exactly at threshold is not confident
    assert not pose_gate(_pose(conf))


@given(st.lists(st.floats(0, 1), min_size=18, max_size=18))
@settings(max_examples=200, deadline=None)
def test_pose_gate_counting_oracle(conf):
    ok = [c > 0.3 for c in conf]
    expected = sum(ok) >= 14 and all(ok[i] for i in (1, 2, 5, 8, 11))
    assert pose_gate(_pose(conf)) is expected


def test_role_gate():
    assert role_gate(ImageItem("g.png")) == "garment"
    assert role_gate(ImageItem("m.png", _pose([1.0] * 18))) == "person"
    assert role_gate(ImageItem("m.png", _pose([0.1] * 18))) == "reject"

    def broken(item):
        raise RuntimeError("boom")

    with pytest.raises(PipelineError):
        role_gate(ImageItem("x.png"), broken)


def test_gate_chain_skips_and_logs(caplog):
    rec = _record(keypoints=[_pose([1.0] * 18), _pose([0.0] * 18)])
    out = GateChain().run([rec])
    assert len(out) == 1 and out[0].model_images == [rec.model_images[0]] and out[0].partial

    def broken(item):
        raise RuntimeError("boom")

    with caplog.at_level(logging.WARNING):
        assert GateChain(classifier=broken).run([rec]) == []
    assert "boom" in caplog.text


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    return synth_pairs(8, 0, tmp_path_factory.mktemp("s") / "d")


def test_synth_deterministic(synth, tmp_path):
    other = synth_pairs(8, 0, tmp_path / "d")
    cmp = filecmp.dircmp(synth.parent, other.parent)
    files = [f for d in ("", "garments", "models", "masks") for f in sorted((synth.parent / d).iterdir()) if f.is_file()]
    assert files
    for f in files:
        assert f.read_bytes() == (other.parent / f.relative_to(synth.parent)).read_bytes()
    assert not cmp.diff_files


def test_synth_records_survive_gates(synth):
    recs = parse_manifest(synth)
    assert len(recs) == 8
    for r in recs:
        assert 2 <= len(r.model_images) <= 3
        assert all(pose_gate(kp) for kp in r.keypoints)
        assert r.captions[0][1].startswith("a person wearing")
        assert CATEGORIES[r.category][0] in r.captions[0][1]
    assert GateChain().run(recs) == recs


def test_masks_cover_garment_pixels(synth):
    root = synth.parent
    for r in parse_manifest(synth):
        for m_path, k_path in zip(r.model_images, r.garment_mask):
            img, mask = load_rgb(root / m_path), load_mask(root / k_path)
            assert mask.any() and mask.shape == img.shape[1:]


def test_load_pairs(synth):
    pairs = load_pairs(synth, per_garment=1)
    assert len(pairs) == 8
    assert pairs[0].garment.shape == (3, 64, 80) and pairs[0].keypoints.shape == (18, 3)
    assert len(load_pairs(synth, per_garment=None)) == sum(len(r.model_images) for r in parse_manifest(synth))


def test_synth_rejects_zero(tmp_path):
    with pytest.raises(ValueError):
        synth_pairs(0, 0, tmp_path)
