"""Paired garment/model-image records, JSON Lines manifests, filtering gates
and a procedural generator of garments dressed onto stick-figure models.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import ParseError, PipelineError, ValidationError

log = logging.getLogger(__name__)

NUM_KEYPOINTS = 18
# OpenPose 18-point order
KEYPOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)
TORSO_JOINTS = (1, 2, 5, 8, 11)
POSE_CONF_THRESHOLD = 0.3
POSE_MIN_JOINTS = 14

# (name, silhouette)
CATEGORIES = (
    ("t-shirt", "top"), ("shirt", "top"), ("blouse", "top"), ("sweater", "top"),
    ("hoodie", "top"), ("tank top", "top"), ("polo", "top"), ("vest", "top"),
    ("jacket", "long"), ("coat", "long"), ("dress", "long"), ("gown", "long"),
    ("jumpsuit", "long"), ("pants", "bottom"), ("jeans", "bottom"), ("shorts", "bottom"),
    ("skirt", "bottom"), ("leggings", "bottom"),
)
NUM_CATEGORIES = len(CATEGORIES)

COLORS = {
    "red": (0.85, 0.15, 0.15), "blue": (0.15, 0.25, 0.85), "green": (0.15, 0.6, 0.2),
    "yellow": (0.95, 0.8, 0.1), "purple": (0.55, 0.2, 0.7), "orange": (0.95, 0.5, 0.1),
    "black": (0.08, 0.08, 0.08), "pink": (0.95, 0.45, 0.65), "teal": (0.1, 0.55, 0.55),
    "brown": (0.45, 0.28, 0.12),
}
PATTERNS = ("solid", "striped", "checked", "dotted")
SCENES = {
    "in a park": (0.72, 0.86, 0.68), "on the street": (0.78, 0.78, 0.8),
    "in a studio": (0.93, 0.88, 0.78), "on a beach": (0.96, 0.92, 0.66),
}
SKIN = (0.87, 0.7, 0.56)


@dataclass
class PairRecord:
    pair_id: str
    garment_image: str
    model_images: list
    category: int
    captions: list = field(default_factory=list)
    keypoints: Optional[list] = None
    garment_mask: Optional[list] = None
    dense_pose: Optional[list] = None
    partial: bool = False

    def validate(self) -> "PairRecord":
        if not isinstance(self.pair_id, str) or not self.pair_id:
            raise ValidationError("pair_id must be a non-empty string", "pair_id")
        if not isinstance(self.garment_image, str):
            raise ValidationError("garment_image must be a path string", "garment_image")
        if isinstance(self.category, bool) or not isinstance(self.category, int) \
                or not 0 <= self.category < NUM_CATEGORIES:
            raise ValidationError(f"category must be an integer in [0, {NUM_CATEGORIES})", "category")
        n = len(self.model_images) if isinstance(self.model_images, list) else -1
        low = 1 if self.partial else 2
        if not low <= n <= 5:
            raise ValidationError(f"need {low}..5 model images, got {n}", "model_images")
        for cap in self.captions:
            if not (isinstance(cap, list) and len(cap) == 2 and all(isinstance(c, str) for c in cap)):
                raise ValidationError("captions are [captioner_id, text] pairs", "captions")
        if self.keypoints is not None:
            if len(self.keypoints) != n:
                raise ValidationError("one keypoint set per model image", "keypoints")
            for kp in self.keypoints:
                if len(kp) != NUM_KEYPOINTS or any(len(p) != 3 for p in kp):
                    raise ValidationError(f"keypoint sets hold exactly {NUM_KEYPOINTS} (x, y, c) triples", "keypoints")
        if self.garment_mask is not None and len(self.garment_mask) != n:
            raise ValidationError("one garment mask per model image", "garment_mask")
        if self.dense_pose is not None and len(self.dense_pose) != n:
            raise ValidationError("one dense pose per model image", "dense_pose")
        if not isinstance(self.partial, bool):
            raise ValidationError("partial must be a boolean", "partial")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "PairRecord":
        names = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown fields {sorted(unknown)}", sorted(unknown)[0])
        for req in ("pair_id", "garment_image", "model_images", "category"):
            if req not in d:
                raise ValidationError(f"missing field {req}", req)
        return cls(**d).validate()


def parse_manifest(path) -> list[PairRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc.msg}", lineno) from exc
            if not isinstance(d, dict):
                raise ParseError(f"line {lineno}: expected a JSON object", lineno)
            try:
                records.append(PairRecord.from_dict(d))
            except ValidationError as exc:
                exc.line = lineno
                raise ValidationError(f"line {lineno}: {exc}", exc.field, lineno) from exc
    return records


def write_manifest(records: Iterable[PairRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.validate().to_json() + "\n")
    return path


# gates


def pose_gate(keypoints) -> bool:
    """True iff enough joints are confident and the whole torso is visible."""
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.shape != (NUM_KEYPOINTS, 3):
        raise ValidationError(f"pose gate needs {NUM_KEYPOINTS} (x, y, c) triples, got shape {kp.shape}", "keypoints")
    ok = kp[:, 2] > POSE_CONF_THRESHOLD
    return bool(ok.sum() >= POSE_MIN_JOINTS and ok[list(TORSO_JOINTS)].all())


@dataclass
class ImageItem:
    """One image entering the gate chain, with whatever annotations it carries."""

    path: str
    keypoints: Optional[list] = None
    pair_id: str = ""


def heuristic_role(item: ImageItem) -> str:
    if item.keypoints is None:
        return "garment"
    return "person" if pose_gate(item.keypoints) else "reject"


def role_gate(item: ImageItem, classifier: Callable[[ImageItem], str] = heuristic_role) -> str:
    try:
        label = classifier(item)
    except Exception as exc:
        raise PipelineError(f"role classifier failed on {item.path}: {exc}") from exc
    if label not in ("garment", "person", "reject"):
        raise PipelineError(f"role classifier returned {label!r} for {item.path}")
    return label


def pass_through(record: PairRecord) -> PairRecord:
    return record


@dataclass
class GateChain:
    """Role classification, pose filtering, then manual-verification and captioning stages.

    The last two default to pass-through; swap in real stages as needed.
    """

    classifier: Callable[[ImageItem], str] = heuristic_role
    verify: Callable[[PairRecord], Optional[PairRecord]] = pass_through
    caption: Callable[[PairRecord], PairRecord] = pass_through

    def filter_record(self, record: PairRecord) -> Optional[PairRecord]:
        try:
            if role_gate(ImageItem(record.garment_image, None, record.pair_id), self.classifier) != "garment":
                return None
            keep = []
            for i, img in enumerate(record.model_images):
                kp = record.keypoints[i] if record.keypoints is not None else None
                if role_gate(ImageItem(img, kp, record.pair_id), self.classifier) == "person":
                    keep.append(i)
        except PipelineError as exc:
            log.warning("skipping %s: %s", record.pair_id, exc)
            return None
        if not keep:
            return None
        if len(keep) != len(record.model_images):
            record = _subset(record, keep)
        record = self.verify(record)
        if record is None:
            return None
        return self.caption(record).validate()

    def run(self, records: Sequence[PairRecord]) -> list[PairRecord]:
        out = []
        for r in records:
            kept = self.filter_record(r)
            if kept is not None:
                out.append(kept)
        return out


def _subset(record: PairRecord, keep: list[int]) -> PairRecord:
    pick = lambda xs: None if xs is None else [xs[i] for i in keep]  # noqa: E731
    return PairRecord(
        pair_id=record.pair_id, garment_image=record.garment_image,
        model_images=pick(record.model_images), category=record.category,
        captions=record.captions, keypoints=pick(record.keypoints),
        garment_mask=pick(record.garment_mask), dense_pose=pick(record.dense_pose),
        partial=record.partial or len(keep) < 2,
    )


# procedural generator


@dataclass(frozen=True)
class GarmentSpec:
    category: int
    color: str
    pattern: str
    period: float
    angle: float
    logo: Optional[str]

    @property
    def silhouette(self) -> str:
        return CATEGORIES[self.category][1]

    def caption(self, scene: str) -> str:
        return f"a person wearing a {self.pattern} {self.color} {CATEGORIES[self.category][0]} {scene}"


def _secondary(rgb):
    r = np.asarray(rgb)
    return tuple(np.clip(r * 0.45 + 0.05, 0, 1)) if r.mean() > 0.35 else tuple(np.clip(r + 0.45, 0, 1))


def pattern_fill(spec: GarmentSpec, h: int, w: int, scale: float = 1.0, origin=(0.0, 0.0)) -> np.ndarray:
    """``(h, w, 3)`` texture; ``scale`` stretches the pattern about ``origin``."""
    base = np.asarray(COLORS[spec.color])
    second = np.asarray(_secondary(COLORS[spec.color]))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx - origin[0]) / scale
    v = (yy - origin[1]) / scale
    p = spec.period
    if spec.pattern == "solid":
        sel = np.zeros((h, w), bool)
    elif spec.pattern == "striped":
        c, s = math.cos(spec.angle), math.sin(spec.angle)
        sel = np.floor((u * s + v * c) / (p / 2)) % 2 == 1
    elif spec.pattern == "checked":
        sel = (np.floor(u / (p / 2)) + np.floor(v / (p / 2))) % 2 == 1
    else:
        cu = (u % p) - p / 2
        cv = (v % p) - p / 2
        sel = cu * cu + cv * cv <= (p / 3.2) ** 2
    return np.where(sel[..., None], second, base)


def _garment_polygons(sil: str, kp: np.ndarray) -> list[list[tuple]]:
    """Polygons covering the garment for the given 18 keypoints."""
    P = lambda i: kp[i, :2]  # noqa: E731
    rs, ls, rh, lh = P(2), P(5), P(8), P(11)
    re, le, rk, lk = P(3), P(6), P(9), P(12)
    out = []
    if sil in ("top", "long"):
        # the model faces the camera: right shoulder on the image left
        pad = 2.0
        torso = [rs + (-pad, 0), ls + (pad, 0), lh + (pad, 0), rh + (-pad, 0)]
        if sil == "long":
            flare = 0.35 * (lh[0] - rh[0])
            torso = [rs + (-pad, 0), ls + (pad, 0), lh + (pad, 0), lk + (pad + flare, 0),
                     rk + (-pad - flare, 0), rh + (-pad, 0)]
        out.append(torso)
        for sh, el in ((rs, re), (ls, le)):
            mid = sh + 0.55 * (el - sh)
            d = mid - sh
            n = np.array([-d[1], d[0]]) / (np.hypot(*d) + 1e-9) * 3.5
            out.append([sh + n, mid + n, mid - n, sh - n])
    else:
        waist = [rh + (-2, -3), lh + (2, -3)]
        out.append([waist[0], waist[1], lk + (3, 0), (lk + rk) / 2 + (2, 0), (lk + rk) / 2 + (-2, 0), rk + (-3, 0)])
    return [[(float(x), float(y)) for x, y in poly] for poly in out]


def _raster(polys, h, w) -> np.ndarray:
    im = Image.new("L", (w, h), 0)
    d = ImageDraw.Draw(im)
    for poly in polys:
        d.polygon(poly, fill=255)
    return np.asarray(im) > 127


def canonical_pose(h: int, w: int) -> np.ndarray:
    """Upright model filling the frame, used for garment product shots."""
    cx = w / 2
    s = h / 64.0
    pts = {
        0: (cx, 8), 1: (cx, 15), 2: (cx - 13, 16), 3: (cx - 18, 28), 4: (cx - 20, 39),
        5: (cx + 13, 16), 6: (cx + 18, 28), 7: (cx + 20, 39), 8: (cx - 10, 42), 9: (cx - 11, 55),
        10: (cx - 11, 68), 11: (cx + 10, 42), 12: (cx + 11, 55), 13: (cx + 11, 68),
        14: (cx - 2, 6), 15: (cx + 2, 6), 16: (cx - 4, 7), 17: (cx + 4, 7),
    }
    kp = np.array([[pts[i][0], pts[i][1] * s, 1.0] for i in range(NUM_KEYPOINTS)])
    return kp


def random_pose(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kp = canonical_pose(h, w)
    dx = rng.uniform(-14, 14)
    dy = rng.uniform(-2, 2)
    kp[:, 0] += dx
    kp[:, 1] += dy
    widen = rng.uniform(-2, 2)
    for i in (2, 3, 4, 8, 9, 10):
        kp[i, 0] -= widen
    for i in (5, 6, 7, 11, 12, 13):
        kp[i, 0] += widen
    for elbow, wrist, sign in ((3, 4, -1), (6, 7, 1)):
        kp[elbow, :2] += rng.uniform(-3, 3, 2) + (sign * rng.uniform(0, 3), 0)
        kp[wrist, :2] += rng.uniform(-5, 5, 2) + (sign * rng.uniform(0, 4), 0)
    spread = rng.uniform(0, 4)
    kp[[9, 10], 0] -= spread
    kp[[12, 13], 0] += spread
    conf = rng.uniform(0.7, 1.0, NUM_KEYPOINTS)
    inside = (kp[:, 0] >= 0) & (kp[:, 0] < w) & (kp[:, 1] >= 0) & (kp[:, 1] < h)
    kp[:, 2] = np.where(inside, conf, 0.0)
    return kp


def _draw_logo(img: np.ndarray, text: str, center, rgb) -> None:
    glyph = Image.new("L", (img.shape[1], img.shape[0]), 0)
    d = ImageDraw.Draw(glyph)
    tw = 6 * len(text)
    d.text((center[0] - tw / 2, center[1] - 5), text, fill=255)
    sel = np.asarray(glyph) > 127
    img[sel] = rgb


def _canonical_box(sil: str, h: int, w: int):
    pts = np.concatenate([np.asarray(p) for p in _garment_polygons(sil, canonical_pose(h, w))])
    return pts.min(0), pts.max(0)


def render_garment(spec: GarmentSpec, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Product shot on a white background; returns ``(h, w, 3)`` image and mask."""
    kp = canonical_pose(h, w)
    center = np.array([w / 2, h / 2])
    polys = _garment_polygons(spec.silhouette, kp)
    lo, hi = _canonical_box(spec.silhouette, h, w)
    scale = 0.9 * min(w / (hi[0] - lo[0]), h / (hi[1] - lo[1]))
    mid = (lo + hi) / 2
    polys = [[tuple((np.asarray(p) - mid) * scale + center) for p in poly] for poly in polys]
    mask = _raster(polys, h, w)
    # pattern coordinates are relative to the garment box, so crops line up across shots
    tex = pattern_fill(spec, h, w, scale=scale, origin=tuple(center + (lo - mid) * scale))
    img = np.ones((h, w, 3))
    img[mask] = tex[mask]
    if spec.logo:
        logo = np.zeros_like(img)
        _draw_logo(logo, spec.logo, center, (1.0, 1.0, 1.0))
        sel = mask & (logo[..., 0] > 0)
        img[sel] = _secondary(COLORS[spec.color])
    return img, mask


def render_model(spec: GarmentSpec, kp: np.ndarray, scene: str, h: int, w: int,
                 body_shade: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Stick-figure model wearing the garment; returns image and exact garment mask."""
    bg = np.clip(np.asarray(SCENES[scene]) + body_shade * 0.05, 0, 1)
    skin = tuple(int(255 * c) for c in np.clip(np.asarray(SKIN) - body_shade * 0.1, 0, 1))
    im = Image.new("RGB", (w, h), tuple(int(255 * c) for c in bg))
    d = ImageDraw.Draw(im)
    P = lambda i: tuple(float(v) for v in kp[i, :2])  # noqa: E731
    for a, b, width in ((2, 3, 4), (3, 4, 3), (5, 6, 4), (6, 7, 3), (8, 9, 5), (9, 10, 4), (11, 12, 5), (12, 13, 4)):
        d.line([P(a), P(b)], fill=skin, width=width)
    d.polygon([P(2), P(5), P(11), P(8)], fill=skin)
    hx, hy = P(0)
    d.ellipse([hx - 5, hy - 6, hx + 5, hy + 6], fill=skin)
    d.line([P(1), P(0)], fill=skin, width=4)
    img = np.asarray(im, dtype=np.float64) / 255.0
    polys = _garment_polygons(spec.silhouette, kp)
    mask = _raster(polys, h, w)
    lo, hi = _canonical_box(spec.silhouette, h, w)
    pts = np.concatenate([np.asarray(p) for p in polys])
    scale = (pts.max(0)[0] - pts.min(0)[0]) / (hi[0] - lo[0])
    tex = pattern_fill(spec, h, w, scale=scale, origin=tuple(pts.min(0)))
    img = img.copy()
    img[mask] = tex[mask]
    if spec.logo and spec.silhouette != "bottom":
        logo = np.zeros_like(img)
        _draw_logo(logo, spec.logo, ((kp[2, 0] + kp[5, 0]) / 2, (kp[1, 1] + kp[8, 1]) / 2), (1.0, 1.0, 1.0))
        sel = mask & (logo[..., 0] > 0)
        img[sel] = _secondary(COLORS[spec.color])
    return img, mask


def random_garment(rng: np.random.Generator) -> GarmentSpec:
    category = int(rng.integers(NUM_CATEGORIES))
    color = list(COLORS)[int(rng.integers(len(COLORS)))]
    pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    period = float(rng.uniform(10.0, 16.0))
    angle = float(rng.choice([0.0, math.pi / 2]))
    logo = None
    if rng.random() < 0.3:
        logo = "".join(chr(ord("A") + int(i)) for i in rng.integers(0, 26, 3))
    return GarmentSpec(category, color, pattern, period, angle, logo)


def _save_rgb(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def _save_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), "L").save(path)


def synth_pairs(n: int, seed: int, out_dir, size=(64, 80), models=(2, 3)) -> Path:
    """Write ``n`` garments, each dressed onto 2-3 posed models, plus ``manifest.jsonl``.

    ``size`` is (height, width). Deterministic per ``seed``.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"need n >= 1 pairs, got {n!r}")
    h, w = size
    out = Path(out_dir)
    (out / "garments").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(int(n)):
        spec = random_garment(rng)
        pid = f"{seed:04d}-{i:05d}"
        gimg, _ = render_garment(spec, h, w)
        gpath = f"garments/{pid}.png"
        _save_rgb(gimg, out / gpath)
        k = int(rng.integers(models[0], models[1] + 1))
        model_paths, mask_paths, kps, caps = [], [], [], []
        for j in range(k):
            kp = random_pose(rng, h, w)
            scene = list(SCENES)[int(rng.integers(len(SCENES)))]
            img, mask = render_model(spec, kp, scene, h, w, body_shade=float(rng.uniform(-1, 1)))
            mpath, kpath = f"models/{pid}_{j}.png", f"masks/{pid}_{j}.png"
            _save_rgb(img, out / mpath)
            _save_mask(mask, out / kpath)
            model_paths.append(mpath)
            mask_paths.append(kpath)
            kps.append([[round(float(x), 3), round(float(y), 3), round(float(c), 3)] for x, y, c in kp])
            caps.append(["template", spec.caption(scene)])
        records.append(PairRecord(
            pair_id=pid, garment_image=gpath, model_images=model_paths, category=spec.category,
            captions=caps, keypoints=kps, garment_mask=mask_paths, dense_pose=None, partial=False,
        ))
    return write_manifest(records, out / "manifest.jsonl")


def load_rgb(path) -> np.ndarray:
    """PNG -> ``(3, H, W)`` floats in [0, 1]."""
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0).transpose(2, 0, 1)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


@dataclass
class TrainingPair:
    """One (garment, dressed model, caption) example with its annotations, loaded in memory."""

    pair_id: str
    garment: np.ndarray
    model: np.ndarray
    caption: str
    mask: np.ndarray
    keypoints: Optional[np.ndarray]
    category: int


def load_pairs(manifest, per_garment: Optional[int] = 1) -> list[TrainingPair]:
    """Flatten a manifest into training pairs, keeping ``per_garment`` model images each."""
    manifest = Path(manifest)
    root = manifest.parent
    pairs = []
    for r in parse_manifest(manifest):
        g = load_rgb(root / r.garment_image)
        n = len(r.model_images) if per_garment is None else min(per_garment, len(r.model_images))
        for j in range(n):
            cap = r.captions[j][1] if j < len(r.captions) else (r.captions[0][1] if r.captions else "")
            pairs.append(TrainingPair(
                pair_id=f"{r.pair_id}/{j}", garment=g, model=load_rgb(root / r.model_images[j]),
                caption=cap,
                mask=load_mask(root / r.garment_mask[j]) if r.garment_mask else np.ones(g.shape[1:], bool),
                keypoints=np.asarray(r.keypoints[j]) if r.keypoints else None,
                category=r.category,
            ))
    return pairs
