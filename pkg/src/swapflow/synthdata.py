"""Procedural face-like renderer with fully known identity/attribute factors.

Identity is carried by 6 shape/chroma factors sampled once per identity;
attributes are 8 appearance factors sampled per image. Rendering is a pure
function of the spec, drawn analytically on a 4x supersampled grid so that
sub-pixel factors (gaze, pose) survive at small resolutions. Every render
comes with an exact face mask, accessory mask and keypoint set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, InputError, SwapflowError

RESOLUTIONS = (32, 64, 128)
GLASSES_PROB = 0.3
_SS = 4  # supersampling factor for anti-aliased analytic drawing

# seed-stream tags so identity / attribute / occlusion draws never collide
_TAG_IDENTITY = 11
_TAG_ATTRIBUTES = 23
_TAG_OCCLUSION = 37

IDENTITY_RANGES = {
    "face_hue_base": (0.0, 1.0),
    "face_aspect": (0.7, 1.3),
    "eye_spacing": (0.2, 0.45),
    "nose_length": (0.05, 0.25),
    "mouth_width": (0.2, 0.5),
    "brow_angle": (-0.4, 0.4),
}

ATTRIBUTE_RANGES = {
    "pose_angle": (-0.6, 0.6),
    "expression": (-1.0, 1.0),
    "gaze_x": (-1.0, 1.0),
    "gaze_y": (-1.0, 1.0),
    "lighting_dir": (0.0, 2.0 * np.pi),
    "lighting_strength": (0.0, 0.5),
    "skin_tone_shift": (-0.15, 0.15),
    "makeup": (0.0, 1.0),
}


def _check_range(name, value, lo, hi):
    if not (lo <= value <= hi):
        raise InputError(f"{name}={value!r} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class IdentityFactors:
    face_hue_base: float
    face_aspect: float
    eye_spacing: float
    nose_length: float
    mouth_width: float
    brow_angle: float
    identity_id: int

    def __post_init__(self):
        for name, (lo, hi) in IDENTITY_RANGES.items():
            _check_range(name, getattr(self, name), lo, hi)
        if self.identity_id < 0:
            raise InputError("identity_id must be >= 0")

    def to_dict(self):
        return {
            "face_hue_base": self.face_hue_base,
            "face_aspect": self.face_aspect,
            "eye_spacing": self.eye_spacing,
            "nose_length": self.nose_length,
            "mouth_width": self.mouth_width,
            "brow_angle": self.brow_angle,
            "identity_id": self.identity_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class AttributeFactors:
    pose_angle: float
    expression: float
    gaze: tuple[float, float]
    lighting_dir: float
    lighting_strength: float
    skin_tone_shift: float
    makeup: float
    has_glasses: bool
    background_color: tuple[float, float, float]

    def __post_init__(self):
        _check_range("pose_angle", self.pose_angle, *ATTRIBUTE_RANGES["pose_angle"])
        _check_range("expression", self.expression, *ATTRIBUTE_RANGES["expression"])
        _check_range("gaze_x", self.gaze[0], -1.0, 1.0)
        _check_range("gaze_y", self.gaze[1], -1.0, 1.0)
        if not (0.0 <= self.lighting_dir < 2.0 * np.pi):
            raise InputError(f"lighting_dir={self.lighting_dir!r} outside [0, 2pi)")
        _check_range("lighting_strength", self.lighting_strength, 0.0, 0.5)
        _check_range("skin_tone_shift", self.skin_tone_shift, -0.15, 0.15)
        _check_range("makeup", self.makeup, 0.0, 1.0)
        for c in self.background_color:
            _check_range("background_color", c, 0.0, 1.0)

    def to_dict(self):
        return {
            "pose_angle": self.pose_angle,
            "expression": self.expression,
            "gaze": list(self.gaze),
            "lighting_dir": self.lighting_dir,
            "lighting_strength": self.lighting_strength,
            "skin_tone_shift": self.skin_tone_shift,
            "makeup": self.makeup,
            "has_glasses": self.has_glasses,
            "background_color": list(self.background_color),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["gaze"] = tuple(d["gaze"])
        d["background_color"] = tuple(d["background_color"])
        return cls(**d)


@dataclass(frozen=True)
class FaceSpec:
    identity: IdentityFactors
    attributes: AttributeFactors

    def to_dict(self):
        return {"identity": self.identity.to_dict(), "attributes": self.attributes.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(
            identity=IdentityFactors.from_dict(d["identity"]),
            attributes=AttributeFactors.from_dict(d["attributes"]),
        )

    @property
    def total_hue(self) -> float:
        """Observable face hue: identity base plus attribute shift."""
        return self.identity.face_hue_base + self.attributes.skin_tone_shift


@dataclass
class RenderOutput:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    face_mask: np.ndarray      # (H, W) uint8 {0, 1}
    keypoints: list            # [(name, x, y)], output-pixel coordinates
    accessory_mask: np.ndarray # (H, W) uint8 {0, 1}


def sample_identity(seed: int, identity_id: int) -> IdentityFactors:
    """Deterministic identity factors for (seed, identity_id), uniform in range."""
    if identity_id < 0:
        raise InputError("identity_id must be >= 0")
    rng = np.random.default_rng([int(seed), _TAG_IDENTITY, int(identity_id)])
    vals = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in IDENTITY_RANGES.items()}
    return IdentityFactors(identity_id=int(identity_id), **vals)


def sample_attributes(rng: np.random.Generator) -> AttributeFactors:
    """Draw attribute factors uniform in range; glasses are Bernoulli(0.3)."""
    r = ATTRIBUTE_RANGES
    return AttributeFactors(
        pose_angle=float(rng.uniform(*r["pose_angle"])),
        expression=float(rng.uniform(*r["expression"])),
        gaze=(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))),
        lighting_dir=float(rng.uniform(0.0, 2.0 * np.pi)),
        lighting_strength=float(rng.uniform(*r["lighting_strength"])),
        skin_tone_shift=float(rng.uniform(*r["skin_tone_shift"])),
        makeup=float(rng.uniform(0.0, 1.0)),
        has_glasses=bool(rng.uniform() < GLASSES_PROB),
        background_color=tuple(float(v) for v in rng.uniform(0.0, 1.0, size=3)),
    )


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB for arrays broadcastable to a common shape."""
    h = np.asarray(h, dtype=np.float64) % 1.0
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    shape = np.broadcast_shapes(h.shape, s.shape, v.shape)
    out = np.zeros(shape + (3,), dtype=np.float64)
    v, p, q, t = (np.broadcast_to(x, shape) for x in (v, p, q, t))
    for idx, (r_, g_, b_) in enumerate([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]):
        sel = i == idx
        out[sel, 0] = r_[sel]
        out[sel, 1] = g_[sel]
        out[sel, 2] = b_[sel]
    return out


def _segment_mask(u, v, p0, p1, half_thickness):
    """Boolean mask of points within half_thickness of segment p0-p1."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    L2 = dx * dx + dy * dy
    if L2 <= 1e-12:
        return (u - p0[0]) ** 2 + (v - p0[1]) ** 2 <= half_thickness ** 2
    tproj = ((u - p0[0]) * dx + (v - p0[1]) * dy) / L2
    tproj = np.clip(tproj, 0.0, 1.0)
    px = p0[0] + tproj * dx
    py = p0[1] + tproj * dy
    return (u - px) ** 2 + (v - py) ** 2 <= half_thickness ** 2


def _downsample_area(plane_ss: np.ndarray, res: int) -> np.ndarray:
    """Area-average a supersampled plane (res*_SS, res*_SS[, C]) to (res, res[, C])."""
    if plane_ss.ndim == 2:
        return plane_ss.reshape(res, _SS, res, _SS).mean(axis=(1, 3))
    return plane_ss.reshape(res, _SS, res, _SS, plane_ss.shape[-1]).mean(axis=(1, 3))


def render(spec: FaceSpec, resolution: int) -> RenderOutput:
    """Render a FaceSpec to an anti-aliased image plus analytic masks/keypoints.

    All geometry is defined in face-local coordinates and rotated by the pose
    angle about the face center; lighting is a world-frame luminance gradient
    so pose and lighting stay independently recoverable.
    """
    if resolution not in RESOLUTIONS:
        raise ConfigError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    ident, att = spec.identity, spec.attributes
    res = resolution
    S = res * _SS

    # sub-pixel sample centers in output-pixel units
    coords = (np.arange(S, dtype=np.float64) + 0.5) / _SS
    x, y = np.meshgrid(coords, coords)  # x: column, y: row

    cx, cy = 0.5 * res, 0.52 * res
    r0 = 0.34 * res
    a = r0 * np.sqrt(ident.face_aspect)
    b = r0 / np.sqrt(ident.face_aspect)

    # face-local frame (u right, v down before rotation)
    ct, st = np.cos(att.pose_angle), np.sin(att.pose_angle)
    u = ct * (x - cx) + st * (y - cy)
    v = -st * (x - cx) + ct * (y - cy)

    img = np.empty((S, S, 3), dtype=np.float64)
    img[:] = np.asarray(att.background_color, dtype=np.float64)

    face = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    # skin: hue from identity+shift compressed into [0, 0.75] to avoid the
    # circular wrap at hue 1.0; luminance gradient in world coordinates
    hue = 0.75 * (spec.total_hue + 0.15) / 1.3
    val = 0.62 + att.lighting_strength * (
        (x - cx) * np.cos(att.lighting_dir) + (y - cy) * np.sin(att.lighting_dir)
    ) / r0
    val = np.clip(val, 0.05, 1.0)
    skin = _hsv_to_rgb(np.full_like(val, hue), np.full_like(val, 0.5), val)
    img[face] = skin[face]

    def paint(mask, color):
        img[mask] = np.asarray(color, dtype=np.float64)

    def blend(mask, color, alpha):
        img[mask] = (1.0 - alpha) * img[mask] + alpha * np.asarray(color, dtype=np.float64)

    # eyes / pupils / brows, symmetric about the local vertical axis
    ex = ident.eye_spacing * a
    ey = -0.18 * b
    re = 0.19 * r0
    rp = 0.45 * re
    gaze_off = 0.8 * (re - rp)
    brow_y = ey - 1.8 * re
    brow_half = 1.4 * re
    brow_t = 0.06 * r0

    for side in (-1.0, 1.0):
        exs = side * ex
        ang = side * ident.brow_angle
        p0 = (exs - brow_half * np.cos(ang), brow_y - brow_half * np.sin(ang))
        p1 = (exs + brow_half * np.cos(ang), brow_y + brow_half * np.sin(ang))
        paint(_segment_mask(u, v, p0, p1, brow_t / 2.0) & face, (0.12, 0.08, 0.06))

    if att.makeup > 0.0:
        lid_color = _hsv_to_rgb(0.85, 0.5, 0.6)
        for side in (-1.0, 1.0):
            d2 = (u - side * ex) ** 2 + (v - ey) ** 2
            lid = (d2 >= (0.95 * re) ** 2) & (d2 <= (1.35 * re) ** 2) & (v < ey) & face
            blend(lid, lid_color, 0.75 * att.makeup)

    for side, g in ((-1.0, att.gaze), (1.0, att.gaze)):
        exs = side * ex
        eye = (u - exs) ** 2 + (v - ey) ** 2 <= re ** 2
        paint(eye, (0.97, 0.97, 0.97))
        px = exs + g[0] * gaze_off
        py = ey + g[1] * gaze_off
        pupil = (u - px) ** 2 + (v - py) ** 2 <= rp ** 2
        paint(pupil, (0.05, 0.05, 0.08))

    # nose: narrow wedge ending at the tip keypoint
    nose_top = -0.10 * b
    nose_len = ident.nose_length * 2.0 * b
    nose_tip_v = nose_top + nose_len
    frac = np.clip((v - nose_top) / max(nose_len, 1e-9), 0.0, 1.0)
    nose = (np.abs(u) <= 0.5 * 0.09 * r0 * frac) & (v >= nose_top) & (v <= nose_tip_v)
    nose_color = _hsv_to_rgb(hue, 0.55, 0.62 * 0.55)
    paint(nose & face, nose_color)

    # mouth: corners pinned at the baseline, curvature carries expression
    mouth_y = 0.48 * b
    halfw = ident.mouth_width * a
    curve = mouth_y + 0.14 * b * att.expression * (1.0 - (np.clip(u / halfw, -1, 1)) ** 2)
    mouth = (np.abs(v - curve) <= 0.05 * r0) & (np.abs(u) <= halfw)
    lip_color = _hsv_to_rgb(0.99, 0.35 + 0.55 * att.makeup, 0.55)
    paint(mouth & face, lip_color)

    accessory = np.zeros((S, S), dtype=bool)
    if att.has_glasses:
        rg = 1.55 * re
        tg = 0.10 * r0
        for side in (-1.0, 1.0):
            d = np.sqrt((u - side * ex) ** 2 + (v - ey) ** 2)
            accessory |= np.abs(d - rg) <= tg / 2.0
        bridge = (np.abs(v - ey) <= tg / 2.0) & (np.abs(u) <= ex - rg)
        accessory |= bridge
        accessory &= face
        paint(accessory, (0.15, 0.15, 0.17))

    out_img = _downsample_area(img, res).astype(np.float32)
    np.clip(out_img, 0.0, 1.0, out=out_img)
    face_mask = (_downsample_area(face.astype(np.float64), res) >= 0.5).astype(np.uint8)
    acc_mask = (_downsample_area(accessory.astype(np.float64), res) >= 0.5).astype(np.uint8)

    def to_world(ul, vl):
        return (cx + ct * ul - st * vl, cy + st * ul + ct * vl)

    kp = []
    for side, name in ((-1.0, "left"), (1.0, "right")):
        kp.append((f"eye_{name}",) + to_world(side * ex, ey))
    for side, name in ((-1.0, "left"), (1.0, "right")):
        kp.append((f"pupil_{name}",) + to_world(side * ex + att.gaze[0] * gaze_off, ey + att.gaze[1] * gaze_off))
    kp.append(("nose_tip",) + to_world(0.0, nose_tip_v))
    kp.append(("mouth_left",) + to_world(-halfw, mouth_y))
    kp.append(("mouth_right",) + to_world(halfw, mouth_y))
    for k in range(8):
        ang = 2.0 * np.pi * k / 8.0
        kp.append((f"outline_{k}",) + to_world(a * np.cos(ang), b * np.sin(ang)))
    keypoints = [(name, float(px), float(py)) for name, px, py in kp]

    return RenderOutput(image=out_img, face_mask=face_mask, keypoints=keypoints, accessory_mask=acc_mask)


# ---------------------------------------------------------------------------
# occlusion augmentation


def sample_occluder(face_mask: np.ndarray, rng: np.random.Generator):
    """Sample an opaque occluder covering 5-30% of the face mask.

    Returns (occlusion_mask uint8, color). The mask is hard (no AA) so that
    compositing marks exactly the overwritten pixels.
    """
    h, w = face_mask.shape
    ys, xs = np.nonzero(face_mask)
    if len(ys) == 0:
        raise InputError("face_mask is empty")
    face_area = float(len(ys))
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    kind = ["rect", "ellipse", "bar"][int(rng.integers(0, 3))]
    pick = int(rng.integers(0, len(ys)))
    cy0, cx0 = float(ys[pick]), float(xs[pick])
    target = float(rng.uniform(0.08, 0.27))
    angle = float(rng.uniform(0.0, np.pi))
    aspect = float(rng.uniform(0.5, 1.0)) if kind != "bar" else float(rng.uniform(0.15, 0.3))
    color = rng.uniform(0.0, 1.0, size=3)

    ca, sa = np.cos(angle), np.sin(angle)
    ur = ca * (xx - cx0) + sa * (yy - cy0)
    vr = -sa * (xx - cx0) + ca * (yy - cy0)

    def shape_mask(s):
        hx, hy = s, s * aspect
        if kind == "ellipse":
            return (ur / hx) ** 2 + (vr / hy) ** 2 <= 1.0
        return (np.abs(ur) <= hx) & (np.abs(vr) <= hy)

    def coverage(s):
        m = shape_mask(s)
        return float((m & (face_mask > 0)).sum()) / face_area

    # coverage is monotone in scale around a point inside the face: bisect
    s_lo, s_hi = 0.5, float(max(h, w))
    s = np.sqrt(target * face_area / (np.pi if kind == "ellipse" else 4.0) / aspect)
    for _ in range(60):
        c = coverage(s)
        if 0.05 <= c <= 0.30:
            break
        if c < 0.05:
            s_lo = s
        else:
            s_hi = s
        s = 0.5 * (s_lo + s_hi)
    mask = shape_mask(s).astype(np.uint8)
    return mask, color.astype(np.float64)


def apply_occlusion(render: RenderOutput, rng: np.random.Generator):
    """Composite a random opaque occluder over the render's face region."""
    mask, color = sample_occluder(render.face_mask, rng)
    out = render.image.copy()
    out[mask > 0] = color.astype(np.float32)
    return out, mask


# ---------------------------------------------------------------------------
# image / mask persistence (lossless 8-bit PNG)


def save_image_png(path, image01: np.ndarray):
    arr = np.clip(np.asarray(image01, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float32)
    return data / 255.0


def save_masks_png(path, face_mask, accessory_mask, occlusion_mask=None):
    h, w = face_mask.shape
    stack = np.zeros((h, w, 3), dtype=np.uint8)
    stack[:, :, 0] = np.asarray(face_mask, dtype=np.uint8) * 255
    stack[:, :, 1] = np.asarray(accessory_mask, dtype=np.uint8) * 255
    if occlusion_mask is not None:
        stack[:, :, 2] = np.asarray(occlusion_mask, dtype=np.uint8) * 255
    Image.fromarray(stack, mode="RGB").save(path, format="PNG")


def load_masks_png(path):
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"))
    face = (data[:, :, 0] > 127).astype(np.uint8)
    accessory = (data[:, :, 1] > 127).astype(np.uint8)
    occlusion = (data[:, :, 2] > 127).astype(np.uint8)
    return face, accessory, occlusion


# ---------------------------------------------------------------------------
# dataset building


@dataclass
class DatasetConfig:
    identity_count: int
    images_per_identity: int
    resolution: int = 64
    seed: int = 0
    output_dir: str = ""


@dataclass
class DatasetRecord:
    index: int
    image_path: str   # relative to dataset root
    mask_path: str
    spec: FaceSpec
    keypoints: list


@dataclass
class DatasetManifest:
    root: Path
    records: list
    resolution: int
    seed: int
    identity_count: int
    images_per_identity: int

    def __len__(self):
        return len(self.records)

    def record_render(self, index: int) -> RenderOutput:
        """Load a persisted record back into a RenderOutput."""
        rec = self.records[index]
        image = load_image_png(self.root / rec.image_path)
        face, accessory, _ = load_masks_png(self.root / rec.mask_path)
        return RenderOutput(image=image, face_mask=face, keypoints=list(rec.keypoints), accessory_mask=accessory)

    def identity_groups(self):
        groups = {}
        for rec in self.records:
            groups.setdefault(rec.spec.identity.identity_id, []).append(rec.index)
        return groups


def _record_to_json(rec: DatasetRecord) -> str:
    obj = {
        "index": rec.index,
        "image_path": rec.image_path,
        "mask_path": rec.mask_path,
        "identity": rec.spec.identity.to_dict(),
        "attributes": rec.spec.attributes.to_dict(),
        "keypoints": [[n, x, y] for n, x, y in rec.keypoints],
    }
    return json.dumps(obj, sort_keys=True)


def _record_from_json(line: str) -> DatasetRecord:
    obj = json.loads(line)
    spec = FaceSpec(
        identity=IdentityFactors.from_dict(obj["identity"]),
        attributes=AttributeFactors.from_dict(obj["attributes"]),
    )
    kps = [(n, float(x), float(y)) for n, x, y in obj["keypoints"]]
    return DatasetRecord(index=obj["index"], image_path=obj["image_path"],
                         mask_path=obj["mask_path"], spec=spec, keypoints=kps)


def build_dataset(config: DatasetConfig) -> DatasetManifest:
    """Render and persist identity_count x images_per_identity faces.

    Each record derives its generators from (seed, tag, indices) only, so the
    build is order-independent and two builds with one config are byte-equal.
    """
    root = Path(config.output_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    records = []
    for ident_id in range(config.identity_count):
        identity = sample_identity(config.seed, ident_id)
        for j in range(config.images_per_identity):
            idx = ident_id * config.images_per_identity + j
            rng = np.random.default_rng([config.seed, _TAG_ATTRIBUTES, idx])
            spec = FaceSpec(identity=identity, attributes=sample_attributes(rng))
            out = render(spec, config.resolution)
            image_path = f"images/{idx:06d}.png"
            mask_path = f"masks/{idx:06d}.png"
            try:
                save_image_png(root / image_path, out.image)
                save_masks_png(root / mask_path, out.face_mask, out.accessory_mask)
            except OSError as exc:
                raise SwapflowError(f"dataset I/O failure writing {root / image_path}: {exc}") from exc
            records.append(DatasetRecord(index=idx, image_path=image_path,
                                         mask_path=mask_path, spec=spec, keypoints=out.keypoints))

    manifest = DatasetManifest(root=root, records=records, resolution=config.resolution,
                               seed=config.seed, identity_count=config.identity_count,
                               images_per_identity=config.images_per_identity)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest):
    lines = [json.dumps({
        "type": "meta",
        "resolution": manifest.resolution,
        "seed": manifest.seed,
        "identity_count": manifest.identity_count,
        "images_per_identity": manifest.images_per_identity,
    }, sort_keys=True)]
    lines += [_record_to_json(rec) for rec in manifest.records]
    (manifest.root / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise InputError(f"no manifest.jsonl under {root}")
    lines = path.read_text().splitlines()
    meta = json.loads(lines[0])
    if meta.get("type") != "meta":
        raise InputError(f"manifest {path} missing meta header")
    records = [_record_from_json(line) for line in lines[1:] if line.strip()]
    manifest = DatasetManifest(root=root, records=records, resolution=meta["resolution"],
                               seed=meta["seed"], identity_count=meta["identity_count"],
                               images_per_identity=meta["images_per_identity"])
    for rec in manifest.records:
        img = root / rec.image_path
        if not img.exists():
            raise InputError(f"dataset record file missing: {img}")
    return manifest
