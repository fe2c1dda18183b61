import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vdress import cami
from vdress.cami import (CAMIReport, CAMIScorer, EvalPair, evaluate_corpus, face_score, foreground,
                         orientation_histogram, pose_score, structure_score, texture_terms, keypoint_score,
                         write_report)
from vdress.data import canonical_pose, load_pairs, synth_pairs
from vdress.errors import MetricError


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return load_pairs(synth_pairs(60, 7, tmp_path_factory.mktemp("c") / "d"), per_garment=1)


def identity_pair(garment, prompt="a person wearing a red shirt"):
    kp = canonical_pose(*garment.shape[1:])
    return EvalPair(garment, garment.copy(), foreground(garment), kp, kp.copy(),
                    face_reference=garment[:, 0:14, 34:46].copy(), face_box=(34, 0, 46, 14), prompt=prompt)


def _has_corners(garment):
    r = cami.align(EvalPair(garment, garment, foreground(garment)))
    return len(cami.detect_keypoints(cami.gray(r.ref), r.ref_mask)) >= 4


def test_identity_scores(corpus):
    # plain garments with < 4 corners fall under the keypoint fallback (score 0, warned)
    featured = [p for p in corpus if _has_corners(p.garment)][:10]
    assert len(featured) == 10
    for p in featured:
        pair = identity_pair(p.garment)
        u = cami.cami_u(pair)
        s = cami.cami_s(pair)
        assert u.cami_u == 3.0 and s.cami_s == 6.0
        for k in ("s_structure", "s_texture", "s_keypoint", "s_pose", "s_face", "s_text"):
            assert abs(getattr(s, k) - 1.0) < 1e-9


def test_sums_are_exact(corpus):
    scorer = CAMIScorer()
    for a, b in zip(corpus[:8], corpus[8:16]):
        pair = EvalPair(a.garment, b.model, b.mask, a.keypoints, b.keypoints,
                        face_reference=a.model[:, :14, :12], face_box=(0, 0, 12, 14), prompt=b.caption)
        r = scorer.cami_s(pair)
        assert r.cami_u == r.s_structure + r.s_texture + r.s_keypoint
        assert r.cami_s == r.cami_u + r.s_pose + r.s_face + r.s_text
        assert r.cami_s - r.cami_u == pytest.approx(r.s_pose + r.s_face + r.s_text, abs=1e-12)


def test_structure_noise_bound(corpus):
    ref = corpus[0].garment
    mask = foreground(ref)
    worst = 0.0
    for seed in range(100):
        noise = np.random.default_rng(seed).random(ref.shape)
        worst = max(worst, structure_score(EvalPair(ref, noise, mask)))
    assert worst < 0.2


def test_structure_symmetric(corpus):
    a, b = corpus[1].garment, corpus[2].garment
    assert cami.ssim_score(a, b) == pytest.approx(cami.ssim_score(b, a), abs=1e-12)


def test_empty_mask():
    img = np.random.default_rng(0).random((3, 16, 16))
    with pytest.raises(MetricError, match="no garment region"):
        structure_score(EvalPair(img, img, np.zeros((16, 16), bool)))
    with pytest.raises(MetricError):
        texture_terms(EvalPair(img, img, np.zeros((16, 16), bool)))


def test_channel_permutation(corpus):
    for p in corpus[:10]:
        g = p.garment
        if np.ptp(g.reshape(3, -1).mean(1)) < 0.1:
            continue  # nearly grey garments barely move under permutation
        perm = g[[2, 0, 1]]
        c0, o0 = texture_terms(EvalPair(g, g, foreground(g)))
        c1, o1 = texture_terms(EvalPair(g, perm, foreground(g)))
        assert c1 < c0
        assert o1 == pytest.approx(o0, abs=1e-12)


def test_rotation_shifts_orientation_histogram():
    img = np.random.default_rng(3).random((3, 40, 40)) * 0.9
    full = np.ones((40, 40), bool)
    h = orientation_histogram(img, full)
    rot = np.ascontiguousarray(np.rot90(img, axes=(1, 2)))
    # a quarter turn maps gradient (gx, gy) to (gy, -gx): every angle moves back 90 degrees (9 bins)
    assert np.allclose(orientation_histogram(rot, full), np.roll(h, -9), atol=1e-9)
    oracle = float(h @ np.roll(h, -9) / (np.linalg.norm(h) ** 2))
    _, orient = texture_terms(EvalPair(img, rot, full))
    assert orient == pytest.approx(oracle, abs=1e-9)


def test_keypoint_cases(corpus):
    g = next(p.garment for p in corpus if len(cami.detect_keypoints(cami.gray(p.garment), foreground(p.garment))) >= 4)
    m = foreground(g)
    assert keypoint_score(EvalPair(g, g, m)) == 1.0
    flat = np.where(m[None], 0.5, np.ones_like(g))
    assert keypoint_score(EvalPair(g, flat, m)) == 0.0


def test_identity_featureless_garment_scores_two(corpus):
    p = next(p for p in corpus if not _has_corners(p.garment))
    with pytest.warns(RuntimeWarning):
        assert cami.cami_u(identity_pair(p.garment)).cami_u == 2.0


def test_keypoint_warns_when_featureless():
    img = np.full((3, 32, 32), 0.3)
    with pytest.warns(RuntimeWarning):
        assert keypoint_score(EvalPair(img, img, foreground(img))) == 0.0


def test_degradation_monotone(corpus):
    fails = []
    for p in corpus[:10]:
        g = p.garment
        m = foreground(g)
        noise = np.random.default_rng(11).random(g.shape)
        scores = []
        for a in (0.0, 0.25, 0.5, 0.75, 1.0):
            gen = np.where(m[None], (1 - a) * g + a * noise, g)
            pair = EvalPair(g, gen, m)
            scores.append((structure_score(pair), cami.texture_score(pair), keypoint_score(pair)))
        for k in range(3):
            col = [s[k] for s in scores]
            if any(y > x + 1e-12 for x, y in zip(col, col[1:])):
                fails.append((p.pair_id, k, col))
    assert not fails


def _kp(offset=0.0):
    kp = canonical_pose(64, 80)
    kp[:, 0] += offset
    return kp


def test_pose_cases():
    base = _kp()
    s = float(np.hypot(*(base[:, :2].max(0) - base[:, :2].min(0))))
    img = np.ones((3, 64, 80))
    m = np.ones((64, 80), bool)
    assert pose_score(EvalPair(img, img, m, base, base.copy())) == 1.0
    shifted = base.copy()
    shifted[:, 0] += s * 0.1 * math.sqrt(2)
    assert pose_score(EvalPair(img, img, m, base, shifted)) == pytest.approx(math.exp(-1), abs=1e-12)
    prev = 1.0
    for d in (1, 2, 4, 8, 16):
        moved = base.copy()
        moved[4, 0] += d
        cur = pose_score(EvalPair(img, img, m, base, moved))
        assert cur < prev
        prev = cur
    with pytest.raises(MetricError, match="pose unavailable"):
        pose_score(EvalPair(img, img, m))


def test_face_cases():
    rng = np.random.default_rng(0)
    crop = rng.random((3, 32, 32))
    img = np.ones((3, 40, 40))
    img[:, :32, :32] = crop
    m = np.ones((40, 40), bool)
    assert face_score(EvalPair(img, img, m, face_reference=crop, face_box=(0, 0, 32, 32))) == pytest.approx(1.0)
    neg = img.copy()
    neg[:, :32, :32] = 1 - crop
    assert face_score(EvalPair(img, neg, m, face_reference=crop, face_box=(0, 0, 32, 32))) == pytest.approx(0.0, abs=1e-12)
    # two orthogonal whitened crops: a horizontal and a vertical square wave
    a = np.tile(np.repeat([0.0, 1.0], 16)[None, :], (32, 1))
    b = a.T
    ga, gb = np.stack([a] * 3), np.stack([b] * 3)
    img2 = np.ones((3, 32, 32))
    img2[:] = gb
    assert face_score(EvalPair(img2, img2, np.ones((32, 32), bool), face_reference=ga,
                               face_box=(0, 0, 32, 32))) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(MetricError):
        face_score(EvalPair(img, img, m))


def test_text_self_pairing():
    img = np.random.default_rng(0).random((3, 32, 40))
    assert cami.TextImageMatcher()(EvalPair(img, img, np.ones((32, 40), bool), prompt="a red coat")) == 1.0
    with pytest.raises(MetricError):
        cami.TextImageMatcher()(EvalPair(img, img, np.ones((32, 40), bool)))


def test_component_named_on_failure(corpus):
    p = corpus[0]
    with pytest.raises(MetricError, match="pose"):
        cami.cami_s(EvalPair(p.garment, p.model, p.mask, prompt="x"))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_bounded_on_random_inputs(seed):
    rng = np.random.default_rng(seed)
    ref, gen = rng.random((3, 32, 40)), rng.random((3, 32, 40))
    mask = rng.random((32, 40)) > 0.5
    mask[10, 10] = True
    kp = np.concatenate([rng.random((18, 2)) * 30 + 1, np.ones((18, 1))], 1)
    r = cami.cami_s(EvalPair(ref, gen, mask, kp, kp + rng.normal(0, 2, (18, 3)) * [1, 1, 0],
                             face_reference=ref[:, :10, :10], face_box=(0, 0, 10, 10), prompt="noise"))
    for k in ("s_structure", "s_texture", "s_keypoint", "s_pose", "s_face", "s_text"):
        assert 0.0 <= getattr(r, k) <= 1.0
    assert 0 <= r.cami_u <= 3 and 0 <= r.cami_s <= 6


def test_separation_oracle(corpus):
    wins = 0
    for i in range(50):
        own = corpus[i]
        other = corpus[(i + 1) % 50]
        s_own = cami.cami_u(EvalPair(own.garment, own.model, own.mask)).cami_u
        s_other = cami.cami_u(EvalPair(own.garment, other.model, other.mask)).cami_u
        wins += s_own > s_other
    assert wins >= 45


def test_lenient_evaluate_and_corpus(corpus, tmp_path, monkeypatch):
    pairs = [EvalPair(p.garment, p.model, p.mask, prompt=None, pair_id=p.pair_id) for p in corpus[:6]]
    rep = evaluate_corpus(pairs, "cami-s")
    assert all(r["cami_s"] is None and r["s_text"] is None and r["warnings"] for r in rep["pairs"])
    assert rep["means"]["cami_s"] is None and rep["means"]["n_cami_u"] == 6
    monkeypatch.setenv("DRESS_NUM_THREADS", "3")
    par = evaluate_corpus(pairs, "cami-s")
    assert par == rep
    path = write_report(rep, tmp_path / "r.json")
    loaded = json.loads(path.read_text())
    assert loaded["backends"]["structure"] and len(loaded["pairs"]) == 6
    for r in loaded["pairs"]:
        assert r["cami_u"] == r["s_structure"] + r["s_texture"] + r["s_keypoint"]


def test_report_finalize_partial():
    r = CAMIReport(s_structure=0.5, s_texture=0.25, s_keypoint=0.125).finalize()
    assert r.cami_u == 0.875 and r.cami_s is None
