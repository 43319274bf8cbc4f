"""Identity and attribute conditioning pathways.

The identity side is a small convolutional encoder trained from scratch with
an identity-classification objective and a unit-norm embedding head. The
attribute side is an image: the degraded target with structural cues burned
in (white keypoint dots, a green tint over the accessory mask).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .degradation import DegradationSpec, degrade
from .errors import ConfigError, InputError, TrainingQualityError
from .synthdata import (DatasetManifest, FaceSpec, RenderOutput, render,
                        sample_attributes)


class ConditioningMode(str, Enum):
    FULL = "full"
    ATTRIBUTE_ONLY = "attribute_only"
    IDENTITY_ONLY = "identity_only"
    NONE = "none"


@dataclass
class AttributeCondition:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]


@dataclass
class ConditioningBundle:
    """Condition pair for the velocity model.

    A None slot means "use the model's learned null token". Tensors may be
    single ((d,), (3,H,W)) or batched ((B,d), (B,3,H,W)).
    """
    id_embedding: torch.Tensor | None
    att_image: torch.Tensor | None
    mode: ConditioningMode
    id_null_mask: torch.Tensor | None = None   # (B,) bool, per-sample dropout
    att_null_mask: torch.Tensor | None = None


def make_bundle(id_embedding=None, att=None, mode=ConditioningMode.FULL) -> ConditioningBundle:
    """Assemble a bundle, nulling out the slots the mode does not use."""
    mode = ConditioningMode(mode)
    need_id = mode in (ConditioningMode.FULL, ConditioningMode.IDENTITY_ONLY)
    need_att = mode in (ConditioningMode.FULL, ConditioningMode.ATTRIBUTE_ONLY)
    if need_id and id_embedding is None:
        raise InputError(f"mode {mode.value} requires an identity embedding")
    if need_att and att is None:
        raise InputError(f"mode {mode.value} requires an attribute condition")
    att_tensor = None
    if need_att:
        att_tensor = att if isinstance(att, torch.Tensor) else image_to_tensor(att.image)
    return ConditioningBundle(
        id_embedding=id_embedding if need_id else None,
        att_image=att_tensor,
        mode=mode,
    )


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float [0,1] numpy -> (3, H, W) float32 torch."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    return np.ascontiguousarray(arr.transpose(1, 2, 0)).astype(np.float32)


# ---------------------------------------------------------------------------
# attribute condition


def build_attribute_condition(render_out: RenderOutput, spec: DegradationSpec,
                              keypoints: bool = True, accessory: bool = True) -> AttributeCondition:
    """Degrade the target inside its face mask, then overlay structural cues.

    Keypoints become 3x3 white dots (eye/pupil dots carry the gaze signal);
    the accessory mask is tinted green at 50% opacity. With both overlays off
    the result equals the bare degrade() output.
    """
    img = degrade(render_out.image, render_out.face_mask, spec).astype(np.float32)
    h, w = img.shape[:2]
    if keypoints:
        for _, x, y in render_out.keypoints:
            cx, cy = int(round(x)), int(round(y))
            y0, y1 = max(0, cy - 1), min(h, cy + 2)
            x0, x1 = max(0, cx - 1), min(w, cx + 2)
            img[y0:y1, x0:x1, :] = 1.0
    if accessory:
        sel = render_out.accessory_mask > 0
        green = np.array([0.0, 1.0, 0.0], dtype=np.float32)
        img[sel] = 0.5 * img[sel] + 0.5 * green
    np.clip(img, 0.0, 1.0, out=img)
    return AttributeCondition(image=img)


# ---------------------------------------------------------------------------
# identity encoder


@dataclass
class EncoderConfig:
    embed_dim: int = 32
    channels: tuple = (24, 48, 96, 128)
    n_identities: int = 0          # filled from the dataset when 0
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    train_per_identity: int = 24   # fresh renders per identity for training
    val_per_identity: int = 6


def encoder_arch_hash(cfg: EncoderConfig) -> str:
    payload = json.dumps({"embed_dim": cfg.embed_dim, "channels": list(cfg.channels)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class IdentityEncoder(nn.Module):
    """Small conv encoder with a unit-norm embedding head.

    feature_map() exposes the next-to-last conv activations (used as the
    perceptual-loss space); penultimate() the pooled pre-embedding vector
    (used as the feature space for distribution distances).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        blocks = []
        prev = 3
        for c in chans:
            blocks.append(nn.Sequential(
                nn.Conv2d(prev, c, 3, stride=2, padding=1),
                nn.GroupNorm(min(8, c), c),
                nn.SiLU(),
            ))
            prev = c
        self.blocks = nn.ModuleList(blocks)
        self.embed = nn.Linear(chans[-1], cfg.embed_dim)
        # cosine classifier, only used while training
        self.class_weight = nn.Parameter(torch.randn(max(cfg.n_identities, 1), cfg.embed_dim) * 0.05)
        self.logit_scale = nn.Parameter(torch.tensor(10.0))

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for blk in self.blocks[:-1]:
            h = blk(h)
        return h

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks[-1](self.feature_map(x))
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        emb = self.embed(self.penultimate(x))
        return F.normalize(emb, dim=-1, eps=1e-8)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        emb = self.forward(x)
        w = F.normalize(self.class_weight, dim=-1, eps=1e-8)
        return self.logit_scale * emb @ w.t()


def embed_identity(encoder: IdentityEncoder, image: np.ndarray,
                   source_mask: np.ndarray | None = None) -> torch.Tensor:
    """Embed one image; when a mask is given the background is zeroed first."""
    img = np.asarray(image, dtype=np.float32)
    if source_mask is not None:
        img = img * (source_mask[:, :, None] > 0)
    with torch.inference_mode():
        encoder.eval()
        emb = encoder(image_to_tensor(img)[None])[0]
    return emb.clone()


def embed_batch(encoder: IdentityEncoder, images: torch.Tensor,
                masks: torch.Tensor | None = None) -> torch.Tensor:
    """Batched embedding of (B,3,H,W) tensors; masks are (B,1,H,W) or (B,H,W)."""
    if masks is not None:
        if masks.dim() == 3:
            masks = masks[:, None]
        images = images * masks
    with torch.inference_mode():
        encoder.eval()
        out = encoder(images)
    return out.clone()


def _render_identity_bank(manifest: DatasetManifest, per_identity: int, seed: int, salt: int):
    """Fresh attribute draws for each dataset identity, as training fodder."""
    images, labels = [], []
    ids = sorted(manifest.identity_groups().keys())
    for label, ident_id in enumerate(ids):
        identity = None
        for rec in manifest.records:
            if rec.spec.identity.identity_id == ident_id:
                identity = rec.spec.identity
                break
        for j in range(per_identity):
            rng = np.random.default_rng([seed, salt, ident_id, j])
            spec = FaceSpec(identity=identity, attributes=sample_attributes(rng))
            images.append(render(spec, manifest.resolution).image)
            labels.append(label)
    x = torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2)).float()
    y = torch.tensor(labels, dtype=torch.long)
    return x, y, ids


def train_identity_encoder(manifest: DatasetManifest, config: EncoderConfig | None = None,
                           out_path=None):
    """Train the identity encoder by identity classification on renders.

    Validation uses held-out renders of the same identities. Raises
    TrainingQualityError below 80% top-1; logs a warning under the 95% target.
    Returns (encoder, metrics dict).
    """
    cfg = config or EncoderConfig()
    groups = manifest.identity_groups()
    if any(len(v) < 2 for v in groups.values()):
        raise InputError("every identity needs >= 2 images to train the encoder")
    if cfg.n_identities == 0:
        cfg.n_identities = len(groups)

    torch.manual_seed(cfg.seed)
    encoder = IdentityEncoder(cfg)
    opt = torch.optim.AdamW(encoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    x_ds = torch.from_numpy(np.stack([manifest.record_render(r.index).image
                                      for r in manifest.records]).transpose(0, 3, 1, 2)).float()
    y_ds = torch.tensor([sorted(groups).index(r.spec.identity.identity_id)
                         for r in manifest.records], dtype=torch.long)
    x_aug, y_aug, _ = _render_identity_bank(manifest, cfg.train_per_identity, cfg.seed, salt=101)
    x_val, y_val, _ = _render_identity_bank(manifest, cfg.val_per_identity, cfg.seed, salt=202)
    x_train = torch.cat([x_ds, x_aug])
    y_train = torch.cat([y_ds, y_aug])

    rng = np.random.default_rng([cfg.seed, 7])
    encoder.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.integers(0, len(x_train), size=cfg.batch_size))
        loss = F.cross_entropy(encoder.logits(x_train[idx]), y_train[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    encoder.eval()
    with torch.inference_mode():
        preds = []
        for i in range(0, len(x_val), 64):
            preds.append(encoder.logits(x_val[i:i + 64]).argmax(dim=1))
        val_top1 = float((torch.cat(preds) == y_val).float().mean())
    metrics = {"val_top1": val_top1, "n_identities": cfg.n_identities,
               "train_images": int(len(x_train)), "val_images": int(len(x_val))}
    if val_top1 < 0.80:
        raise TrainingQualityError(
            f"identity encoder validation top-1 {val_top1:.3f} < 0.80 "
            f"(ids={cfg.n_identities}, steps={cfg.steps}); increase steps or data")
    if val_top1 < 0.95:
        print(f"[swapflow] warning: encoder val top-1 {val_top1:.3f} below the 0.95 target")
    for p in encoder.parameters():
        p.requires_grad_(False)
    if out_path is not None:
        save_encoder(out_path, encoder, metrics)
    return encoder, metrics


def save_encoder(path, encoder: IdentityEncoder, metrics=None):
    payload = {
        "state_dict": encoder.state_dict(),
        "config": asdict(encoder.cfg),
        "arch_hash": encoder_arch_hash(encoder.cfg),
        "metrics": metrics or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_encoder(path) -> IdentityEncoder:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg_d = dict(payload["config"])
    cfg_d["channels"] = tuple(cfg_d["channels"])
    cfg = EncoderConfig(**cfg_d)
    if payload["arch_hash"] != encoder_arch_hash(cfg):
        raise ConfigError(f"encoder checkpoint {path} arch hash mismatch")
    encoder = IdentityEncoder(cfg)
    encoder.load_state_dict(payload["state_dict"])
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder
