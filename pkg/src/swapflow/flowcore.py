"""Rectified-flow core: interpolation algebra, the conditional velocity
network, Euler sampling and Euler inversion.

Time convention: t=0 is clean data, t=1 is pure Gaussian noise. The latent
path is the straight line z_t = (1-t) x0 + t eps and the regression target
for the velocity network is the constant eps - x0, so the one-shot clean
estimate is z_t - t * v.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import (ConditioningBundle, ConditioningMode,
                           build_attribute_condition, image_to_tensor, make_bundle)
from .degradation import DegradationSpec
from .errors import ConfigError, InputError, NumericError
from .synthdata import RenderOutput


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, 1] with `steps` Euler intervals."""
    steps: int = 28

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"grid needs >= 1 step, got {self.steps}")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def t_values(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.steps + 1)


def _expand_t(t, ref: torch.Tensor) -> torch.Tensor:
    if not isinstance(t, torch.Tensor):
        t = torch.as_tensor(t, dtype=ref.dtype, device=ref.device)
    while t.dim() < ref.dim():
        t = t.unsqueeze(-1)
    return t.to(ref.dtype)


def interpolate(x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Straight-line latent between data (t=0) and noise (t=1)."""
    if x0.shape != eps.shape:
        raise InputError(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    tt = _expand_t(t, x0)
    return (1.0 - tt) * x0 + tt * eps


def flow_target(x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Constant velocity carrying x0 to eps along the straight path."""
    if x0.shape != eps.shape:
        raise InputError(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    return eps - x0


def predict_x0(z_t: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
    """One-shot clean estimate from a latent and a velocity."""
    return z_t - _expand_t(t, z_t) * v


# ---------------------------------------------------------------------------
# velocity network


@dataclass
class ModelConfig:
    in_channels: int = 3
    cond_channels: int = 3
    channels: tuple = (24, 48, 96)
    d_id: int = 32
    time_dim: int = 64
    cond_dim: int = 128
    patch_size: int = 2
    null_att_size: int = 8


def model_arch_hash(cfg: ModelConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos features of a scalar time in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, np.log(1000.0), half, dtype=t.dtype, device=t.device))
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _FiLMResBlock(nn.Module):
    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.film = nn.Linear(cond_dim, 2 * channels)

    def forward(self, x, cond):
        scale, shift = self.film(cond).chunk(2, dim=1)
        h = self.conv1(F.silu(self.norm1(x)))
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class VelocityModel(nn.Module):
    """U-shaped conditional velocity field.

    The latent and the attribute-condition image are concatenated, patchified
    (space-to-depth) and run through a 3-scale conv U-Net; time and identity
    embeddings modulate every residual block. Missing condition slots fall
    back to learned null tokens, which is what gives the "empty" entries of
    the four inversion configurations a trained meaning.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        p = c.patch_size
        ch = c.channels
        in_ch = (c.in_channels + c.cond_channels) * p * p
        out_ch = c.in_channels * p * p

        self.time_mlp = nn.Sequential(
            nn.Linear(c.time_dim, c.cond_dim), nn.SiLU(), nn.Linear(c.cond_dim, c.cond_dim))
        self.id_mlp = nn.Sequential(
            nn.Linear(c.d_id, c.cond_dim), nn.SiLU(), nn.Linear(c.cond_dim, c.cond_dim))

        self.null_id = nn.Parameter(torch.zeros(c.d_id))
        self.null_att = nn.Parameter(torch.zeros(c.cond_channels, c.null_att_size, c.null_att_size))

        self.stem = nn.Conv2d(in_ch, ch[0], 3, padding=1)
        self.enc0 = _FiLMResBlock(ch[0], c.cond_dim)
        self.down01 = nn.Conv2d(ch[0], ch[1], 3, stride=2, padding=1)
        self.enc1 = _FiLMResBlock(ch[1], c.cond_dim)
        self.down12 = nn.Conv2d(ch[1], ch[2], 3, stride=2, padding=1)
        self.enc2 = _FiLMResBlock(ch[2], c.cond_dim)
        self.mid = _FiLMResBlock(ch[2], c.cond_dim)
        self.up21 = nn.Conv2d(ch[2], ch[1], 3, padding=1)
        self.merge1 = nn.Conv2d(2 * ch[1], ch[1], 3, padding=1)
        self.dec1 = _FiLMResBlock(ch[1], c.cond_dim)
        self.up10 = nn.Conv2d(ch[1], ch[0], 3, padding=1)
        self.merge0 = nn.Conv2d(2 * ch[0], ch[0], 3, padding=1)
        self.dec0 = _FiLMResBlock(ch[0], c.cond_dim)
        self.head_norm = nn.GroupNorm(min(8, ch[0]), ch[0])
        self.head = nn.Conv2d(ch[0], out_ch, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _resolve_conditions(self, z: torch.Tensor, bundle: ConditioningBundle):
        b, _, h, w = z.shape
        dt, dev = z.dtype, z.device
        if bundle.id_embedding is None:
            id_vec = self.null_id.to(dt)[None].expand(b, -1)
        else:
            id_vec = bundle.id_embedding.to(dt)
            if id_vec.dim() == 1:
                id_vec = id_vec[None].expand(b, -1)
            if bundle.id_null_mask is not None:
                id_vec = torch.where(bundle.id_null_mask[:, None], self.null_id.to(dt)[None], id_vec)
        null_att = F.interpolate(self.null_att.to(dt)[None], size=(h, w), mode="nearest")
        if bundle.att_image is None:
            att = null_att.expand(b, -1, -1, -1)
        else:
            att = bundle.att_image.to(dt)
            if att.dim() == 3:
                att = att[None].expand(b, -1, -1, -1)
            if bundle.att_null_mask is not None:
                att = torch.where(bundle.att_null_mask[:, None, None, None], null_att, att)
        return id_vec.to(dev), att.to(dev)

    def forward(self, z: torch.Tensor, t: torch.Tensor, bundle: ConditioningBundle) -> torch.Tensor:
        if z.dim() != 4:
            raise InputError("latent must be (B, C, H, W)")
        b = z.shape[0]
        if not isinstance(t, torch.Tensor):
            t = torch.full((b,), float(t), dtype=z.dtype, device=z.device)
        if t.dim() == 0:
            t = t.expand(b)
        id_vec, att = self._resolve_conditions(z, bundle)
        cond = self.time_mlp(sinusoidal_embedding(t.to(z.dtype), self.cfg.time_dim)) + self.id_mlp(id_vec)

        x = torch.cat([z, att], dim=1)
        x = F.pixel_unshuffle(x, self.cfg.patch_size)
        h0 = self.enc0(self.stem(x), cond)
        h1 = self.enc1(self.down01(h0), cond)
        h2 = self.enc2(self.down12(h1), cond)
        h2 = self.mid(h2, cond)
        u1 = self.up21(F.interpolate(h2, scale_factor=2, mode="nearest"))
        u1 = self.dec1(self.merge1(torch.cat([u1, h1], dim=1)), cond)
        u0 = self.up10(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.dec0(self.merge0(torch.cat([u0, h0], dim=1)), cond)
        out = self.head(F.silu(self.head_norm(u0)))
        return F.pixel_shuffle(out, self.cfg.patch_size)


def velocity(model: nn.Module, z_t: torch.Tensor, t, bundle: ConditioningBundle) -> torch.Tensor:
    """Model forward with a finiteness guard."""
    v = model(z_t, t, bundle)
    if not torch.isfinite(v).all():
        tval = float(t if not isinstance(t, torch.Tensor) else t.flatten()[0])
        raise NumericError(f"velocity produced non-finite values at t={tval:.4f}")
    return v


@dataclass
class SampleResult:
    image: torch.Tensor  # clamped to [0, 1]
    raw: torch.Tensor    # untouched integrator output


def sample(model: nn.Module, eps_init: torch.Tensor, bundle: ConditioningBundle,
           grid: TimeGrid) -> SampleResult:
    """Integrate the flow from noise (t=1) down to data (t=0) with Euler steps."""
    squeeze = eps_init.dim() == 3
    z = eps_init[None] if squeeze else eps_init
    z = z.clone()
    dt = grid.dt
    with torch.inference_mode():
        for k in range(grid.steps, 0, -1):
            t = k * dt
            z = z - dt * velocity(model, z, t, bundle)
    raw = (z[0] if squeeze else z).clone()
    return SampleResult(image=raw.clamp(0.0, 1.0), raw=raw)


def invert(model: nn.Module, image: torch.Tensor, bundle: ConditioningBundle,
           grid: TimeGrid) -> torch.Tensor:
    """Integrate the flow forward from data (t=0) to a noise latent (t=1)."""
    squeeze = image.dim() == 3
    z = image[None] if squeeze else image
    z = z.clone()
    dt = grid.dt
    with torch.inference_mode():
        for k in range(grid.steps):
            t = k * dt
            z = z + dt * velocity(model, z, t, bundle)
    return (z[0] if squeeze else z).clone()


def attribute_aware_invert(model: nn.Module, target_render: RenderOutput,
                           spec: DegradationSpec, grid: TimeGrid,
                           keypoints: bool = True, accessory: bool = True) -> torch.Tensor:
    """Invert a target under attribute-only conditioning.

    The returned noise keeps the target's appearance cues but no identity
    embedding was involved, which is what makes it a good sampling
    initializer for swapping.
    """
    att = build_attribute_condition(target_render, spec, keypoints=keypoints, accessory=accessory)
    bundle = make_bundle(att=att, mode=ConditioningMode.ATTRIBUTE_ONLY)
    return invert(model, image_to_tensor(target_render.image), bundle, grid)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: VelocityModel, metadata: dict, optimizer=None):
    payload = {
        "state_dict": model.state_dict(),
        "model_config": asdict(model.cfg),
        "arch_hash": model_arch_hash(model.cfg),
        "metadata": dict(metadata),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, with_optimizer_state: bool = False):
    """Load a velocity-model checkpoint; refuses on architecture-hash mismatch.

    Returns (model, metadata) or (model, metadata, optimizer_state).
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg_d = dict(payload["model_config"])
    cfg_d["channels"] = tuple(cfg_d["channels"])
    cfg = ModelConfig(**cfg_d)
    if payload["arch_hash"] != model_arch_hash(cfg):
        raise ConfigError(f"checkpoint {path} architecture hash mismatch")
    model = VelocityModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    if with_optimizer_state:
        return model, payload["metadata"], payload.get("optimizer")
    return model, payload["metadata"]


def checkpoint_file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
