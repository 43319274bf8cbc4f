"""Teacher and student training.

Teacher: two phases on same-identity pairs with a degraded-target condition.
Phase 1 is flow matching only; phase 2 adds the identity loss, gated to the
low-noise fraction of timesteps where the one-shot clean estimate is usable.
Student: single phase on pseudo-triplets with a clean conditioning image,
optionally with a perceptual term on occlusion-augmented triplets.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .conditioning import (ConditioningBundle, ConditioningMode, IdentityEncoder,
                           build_attribute_condition, image_to_tensor)
from .degradation import DegradationSpec
from .errors import ConfigError, InputError, NumericError
from .flowcore import (ModelConfig, TimeGrid, VelocityModel, flow_target,
                       interpolate, load_checkpoint, model_arch_hash,
                       predict_x0, save_checkpoint)
from .synthdata import DatasetManifest


@dataclass
class TeacherConfig:
    degradation: DegradationSpec = field(default_factory=lambda: DegradationSpec("downsample", 8))
    phase1_steps: int = 5000
    phase2_steps: int = 2000
    id_gate_fraction: float = 0.35
    lambda_id: float = 0.5
    condition_dropout: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    overlay_keypoints: bool = True
    overlay_accessory: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    log_every: int = 1

    def __post_init__(self):
        if not 0.0 <= self.id_gate_fraction <= 1.0:
            raise ConfigError(f"id_gate_fraction must be in [0,1], got {self.id_gate_fraction}")
        if not 0.0 <= self.condition_dropout <= 1.0:
            raise ConfigError(f"condition_dropout must be in [0,1], got {self.condition_dropout}")
        if self.lambda_id <= 0:
            raise ConfigError(f"lambda_id must be > 0, got {self.lambda_id}")


@dataclass
class StudentConfig:
    init_from: str = ""
    steps: int = 2000
    id_gate_fraction: float = 0.50
    lambda_id: float = 0.5
    perceptual_loss_enabled: bool = False
    lambda_perceptual: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not 0.0 <= self.id_gate_fraction <= 1.0:
            raise ConfigError(f"id_gate_fraction must be in [0,1], got {self.id_gate_fraction}")


@dataclass
class LossReport:
    flow_loss: float
    id_loss: float
    perceptual_loss: float
    total: float
    t_mean: float
    t_min: float
    t_max: float


def flow_loss(v_pred: torch.Tensor, x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error against the straight-path velocity target."""
    if v_pred.shape != x0.shape or x0.shape != eps.shape:
        raise InputError("flow_loss operands must share one shape")
    return F.mse_loss(v_pred, flow_target(x0, eps))


def id_loss(encoder: IdentityEncoder, x0_hat: torch.Tensor, source_embedding: torch.Tensor,
            t: torch.Tensor, gate_fraction: float) -> torch.Tensor:
    """Gated embedding-cosine loss toward the source identity.

    Samples with t above the gate contribute exactly zero: at high noise the
    clean estimate is too unreliable to embed. The mean is taken over the
    whole batch so the expected magnitude scales with the active fraction.
    """
    if x0_hat.dim() == 3:
        x0_hat = x0_hat[None]
    b = x0_hat.shape[0]
    if source_embedding.dim() == 1:
        source_embedding = source_embedding[None].expand(b, -1)
    if not isinstance(t, torch.Tensor):
        t = torch.full((b,), float(t), dtype=x0_hat.dtype)
    active = t <= gate_fraction
    if not bool(active.any()):
        return x0_hat.sum() * 0.0
    emb = encoder(x0_hat[active])
    cos = (emb * source_embedding[active].to(emb.dtype)).sum(dim=1)
    return (1.0 - cos).sum() / b


# ---------------------------------------------------------------------------
# teacher data: precomputed per-record conditions and embeddings


class TeacherData:
    """Dataset tensors plus precomputed attribute conditions and embeddings.

    Conditions and source embeddings are deterministic per record, so they
    are built once up front; a training step then only pairs indices.
    """

    def __init__(self, manifest: DatasetManifest, encoder: IdentityEncoder, cfg: TeacherConfig):
        renders = [manifest.record_render(rec.index) for rec in manifest.records]
        self.images = torch.from_numpy(
            np.stack([r.image for r in renders]).transpose(0, 3, 1, 2)).float()
        conds = [build_attribute_condition(r, cfg.degradation,
                                           keypoints=cfg.overlay_keypoints,
                                           accessory=cfg.overlay_accessory).image
                 for r in renders]
        self.conditions = torch.from_numpy(np.stack(conds).transpose(0, 3, 1, 2)).float()
        with torch.inference_mode():
            encoder.eval()
            masked = self.images * torch.from_numpy(
                np.stack([r.face_mask for r in renders])).float()[:, None]
            embs = [encoder(masked[i:i + 64]) for i in range(0, len(renders), 64)]
        self.embeddings = torch.cat(embs).clone()
        self.identity_ids = np.array([rec.spec.identity.identity_id for rec in manifest.records])
        self.groups = {}
        for i, ident in enumerate(self.identity_ids):
            self.groups.setdefault(int(ident), []).append(i)
        if any(len(v) < 2 for v in self.groups.values()):
            raise InputError("teacher training needs >= 2 images per identity")

    def sample_pairs(self, rng: np.random.Generator, batch_size: int):
        """Same-identity (source, target) index pairs, source != target image."""
        tgt = rng.integers(0, len(self.images), size=batch_size)
        src = np.empty(batch_size, dtype=np.int64)
        for i, ti in enumerate(tgt):
            peers = self.groups[int(self.identity_ids[ti])]
            choice = int(peers[rng.integers(0, len(peers))])
            if len(peers) > 1:
                while choice == ti:
                    choice = int(peers[rng.integers(0, len(peers))])
            src[i] = choice
        return src, tgt


def teacher_step(model: VelocityModel, encoder: IdentityEncoder, data: TeacherData,
                 batch_idx, cfg: TeacherConfig, phase: int, optimizer,
                 torch_gen: torch.Generator) -> LossReport:
    """One optimizer update on a batch of same-identity pairs."""
    src_idx, tgt_idx = batch_idx
    x0 = data.images[tgt_idx]
    att = data.conditions[tgt_idx]
    src_emb = data.embeddings[src_idx]
    b = x0.shape[0]

    t = torch.rand(b, generator=torch_gen)
    eps = torch.randn(x0.shape, generator=torch_gen)
    z_t = interpolate(x0, eps, t)

    drop_id = torch.rand(b, generator=torch_gen) < cfg.condition_dropout
    drop_att = torch.rand(b, generator=torch_gen) < cfg.condition_dropout
    bundle = ConditioningBundle(id_embedding=src_emb, att_image=att,
                                mode=ConditioningMode.FULL,
                                id_null_mask=drop_id, att_null_mask=drop_att)

    v_pred = model(z_t, t, bundle)
    l_flow = flow_loss(v_pred, x0, eps)
    if phase >= 2:
        x0_hat = predict_x0(z_t, v_pred, t)
        l_id = id_loss(encoder, x0_hat, src_emb, t, cfg.id_gate_fraction)
    else:
        l_id = torch.zeros((), dtype=l_flow.dtype)
    total = l_flow + cfg.lambda_id * l_id

    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss (flow={float(l_flow):.4g}, id={float(l_id):.4g}); aborting")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return LossReport(flow_loss=float(l_flow), id_loss=float(l_id), perceptual_loss=0.0,
                      total=float(total), t_mean=float(t.mean()), t_min=float(t.min()),
                      t_max=float(t.max()))


def _append_log(log_path, step, report: LossReport, phase):
    rec = {"step": step, "phase": phase, "flow_loss": report.flow_loss,
           "id_loss": report.id_loss, "perceptual_loss": report.perceptual_loss,
           "total": report.total, "t_mean": report.t_mean, "time": time.time()}
    with open(log_path, "a") as fh:
        fh.write(json.dumps(rec) + "\n")


def _teacher_metadata(cfg: TeacherConfig, phase: int, step: int, encoder_hash: str) -> dict:
    return {
        "kind": "teacher",
        "phase": phase,
        "step": step,
        "degradation": cfg.degradation.to_string(),
        "overlay_keypoints": cfg.overlay_keypoints,
        "overlay_accessory": cfg.overlay_accessory,
        "id_gate_fraction": cfg.id_gate_fraction,
        "lambda_id": cfg.lambda_id,
        "seed": cfg.seed,
        "encoder_hash": encoder_hash,
    }


def train_teacher(manifest: DatasetManifest, encoder: IdentityEncoder, cfg: TeacherConfig,
                  out_dir, resume_from=None, encoder_hash: str = "") -> Path:
    """Run the two-phase teacher schedule; returns the final checkpoint path.

    Writes checkpoints/teacher_phase1.pt at the phase boundary,
    checkpoints/teacher.pt at completion, and logs/train_teacher.jsonl.
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "logs").mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "logs" / "train_teacher.jsonl"

    torch.manual_seed(cfg.seed)
    start_step = 0
    if resume_from is not None:
        model, meta, opt_state = load_checkpoint(resume_from, with_optimizer_state=True)
        if meta.get("kind") != "teacher":
            raise ConfigError(f"cannot resume teacher from a {meta.get('kind')!r} checkpoint")
        start_step = int(meta["step"])
        model.train()
    else:
        model = VelocityModel(cfg.model)
        opt_state = None
        model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)

    data = TeacherData(manifest, encoder, cfg)
    total_steps = cfg.phase1_steps + cfg.phase2_steps
    final_path = out_dir / "checkpoints" / "teacher.pt"
    phase1_path = out_dir / "checkpoints" / "teacher_phase1.pt"

    for step in range(start_step, total_steps):
        phase = 1 if step < cfg.phase1_steps else 2
        # per-step generators keep resumed runs on the original trajectory
        step_rng = np.random.default_rng([cfg.seed, 3, step])
        torch_gen = torch.Generator().manual_seed(int(step_rng.integers(0, 2 ** 62)))
        batch_idx = data.sample_pairs(step_rng, cfg.batch_size)
        try:
            report = teacher_step(model, encoder, data, batch_idx, cfg, phase, optimizer, torch_gen)
        except NumericError:
            save_checkpoint(out_dir / "checkpoints" / "teacher_aborted.pt", model,
                            _teacher_metadata(cfg, phase, step, encoder_hash), optimizer)
            raise
        if (step + 1) % cfg.log_every == 0:
            _append_log(log_path, step, report, phase)
        if step + 1 == cfg.phase1_steps:
            save_checkpoint(phase1_path, model, _teacher_metadata(cfg, 1, step + 1, encoder_hash),
                            optimizer)
    save_checkpoint(final_path, model, _teacher_metadata(cfg, 2, total_steps, encoder_hash),
                    optimizer)
    return final_path


# ---------------------------------------------------------------------------
# student


class TripletData:
    """Tensorized pseudo-triplet store for student training."""

    def __init__(self, triplets, encoder: IdentityEncoder):
        if len(triplets) == 0:
            raise InputError("triplet store is empty")
        self.sources = torch.from_numpy(
            np.stack([t.source_image for t in triplets]).transpose(0, 3, 1, 2)).float()
        self.swapped = torch.from_numpy(
            np.stack([t.swapped_image for t in triplets]).transpose(0, 3, 1, 2)).float()
        self.targets = torch.from_numpy(
            np.stack([t.target_image for t in triplets]).transpose(0, 3, 1, 2)).float()
        masks = np.stack([t.source_face_mask for t in triplets])
        with torch.inference_mode():
            encoder.eval()
            masked = self.sources * torch.from_numpy(masks).float()[:, None]
            embs = [encoder(masked[i:i + 64]) for i in range(0, len(triplets), 64)]
        self.embeddings = torch.cat(embs).clone()
        occ = []
        for t in triplets:
            if t.occlusion_mask is None:
                occ.append(np.zeros(self.targets.shape[-2:], dtype=np.float32))
            else:
                occ.append(t.occlusion_mask.astype(np.float32))
        self.occlusion = torch.from_numpy(np.stack(occ))
        self.has_occlusion = torch.tensor(
            [t.occlusion_mask is not None for t in triplets], dtype=torch.bool)

    def __len__(self):
        return self.targets.shape[0]


def student_step(model: VelocityModel, encoder: IdentityEncoder, data: TripletData,
                 batch_idx: np.ndarray, cfg: StudentConfig, optimizer,
                 torch_gen: torch.Generator) -> LossReport:
    """One update on pseudo-triplets: clean-image conditioning, editing target.

    The conditioning image is the teacher-swapped target (donor identity in
    pixels), the reconstruction target the original, and the identity
    embedding the source's, so the model learns to override the identity it
    sees in its condition.
    """
    x0 = data.targets[batch_idx]
    att = data.swapped[batch_idx]
    src_emb = data.embeddings[batch_idx]
    b = x0.shape[0]

    t = torch.rand(b, generator=torch_gen)
    eps = torch.randn(x0.shape, generator=torch_gen)
    z_t = interpolate(x0, eps, t)
    bundle = ConditioningBundle(id_embedding=src_emb, att_image=att, mode=ConditioningMode.FULL)

    v_pred = model(z_t, t, bundle)
    l_flow = flow_loss(v_pred, x0, eps)
    x0_hat = predict_x0(z_t, v_pred, t)
    l_id = id_loss(encoder, x0_hat, src_emb, t, cfg.id_gate_fraction)

    l_perc = torch.zeros((), dtype=l_flow.dtype)
    if cfg.perceptual_loss_enabled:
        occ_rows = data.has_occlusion[batch_idx]
        if bool(occ_rows.any()):
            feat_hat = encoder.feature_map(x0_hat[occ_rows])
            with torch.no_grad():
                feat_ref = encoder.feature_map(x0[occ_rows])
            l_perc = F.mse_loss(feat_hat, feat_ref)

    total = l_flow + cfg.lambda_id * l_id + cfg.lambda_perceptual * l_perc
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss (flow={float(l_flow):.4g}, id={float(l_id):.4g}, "
            f"perc={float(l_perc):.4g}); aborting")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return LossReport(flow_loss=float(l_flow), id_loss=float(l_id),
                      perceptual_loss=float(l_perc), total=float(total),
                      t_mean=float(t.mean()), t_min=float(t.min()), t_max=float(t.max()))


def train_student(triplet_data: TripletData, encoder: IdentityEncoder, cfg: StudentConfig,
                  out_dir, encoder_hash: str = "") -> Path:
    """Single-phase student run resumed from the teacher checkpoint."""
    if not cfg.init_from:
        raise ConfigError("student config needs init_from (teacher checkpoint path)")
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "logs").mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "logs" / "train_student.jsonl"

    torch.manual_seed(cfg.seed)
    model, teacher_meta = load_checkpoint(cfg.init_from)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    metadata = {
        "kind": "student",
        "step": 0,
        "degradation": "none",          # students condition on clean images
        "overlay_keypoints": False,
        "overlay_accessory": False,
        "id_gate_fraction": cfg.id_gate_fraction,
        "lambda_id": cfg.lambda_id,
        "perceptual_loss_enabled": cfg.perceptual_loss_enabled,
        "seed": cfg.seed,
        "teacher_meta": {k: v for k, v in teacher_meta.items() if not isinstance(v, dict)},
        "encoder_hash": encoder_hash,
    }
    final_path = out_dir / "checkpoints" / "student.pt"
    for step in range(cfg.steps):
        step_rng = np.random.default_rng([cfg.seed, 5, step])
        torch_gen = torch.Generator().manual_seed(int(step_rng.integers(0, 2 ** 62)))
        batch_idx = step_rng.integers(0, len(triplet_data), size=cfg.batch_size)
        try:
            report = student_step(model, encoder, triplet_data, batch_idx, cfg, optimizer, torch_gen)
        except NumericError:
            metadata["step"] = step
            save_checkpoint(out_dir / "checkpoints" / "student_aborted.pt", model, metadata, optimizer)
            raise
        if (step + 1) % cfg.log_every == 0:
            _append_log(log_path, step, report, phase=1)
    metadata["step"] = cfg.steps
    save_checkpoint(final_path, model, metadata, optimizer)
    return final_path


# ---------------------------------------------------------------------------
# flat key=value config files


def save_config_txt(path, cfg):
    lines = []
    for f_ in dataclasses.fields(cfg):
        v = getattr(cfg, f_.name)
        if isinstance(v, DegradationSpec):
            v = v.to_string()
        elif isinstance(v, ModelConfig):
            continue  # architecture is fixed by the code default
        lines.append(f"{f_.name}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_value(field_type, raw: str):
    if field_type is bool:
        return raw.strip().lower() in ("1", "true", "yes")
    if field_type is int:
        return int(raw)
    if field_type is float:
        return float(raw)
    return raw.strip()


def _load_config_txt(path, cls):
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line {line!r} in {path}")
        key, raw = line.split("=", 1)
        values[key.strip()] = raw
    kwargs = {}
    for f_ in dataclasses.fields(cls):
        if f_.name not in values:
            continue
        raw = values.pop(f_.name)
        if f_.name == "degradation":
            kwargs[f_.name] = DegradationSpec.from_string(raw.strip())
        elif f_.type in ("bool", "int", "float", "str"):
            kwargs[f_.name] = _parse_value({"bool": bool, "int": int, "float": float,
                                            "str": str}[f_.type], raw)
        else:
            kwargs[f_.name] = raw.strip()
    if values:
        raise ConfigError(f"unknown config keys in {path}: {sorted(values)}")
    return cls(**kwargs)


def load_teacher_config(path) -> TeacherConfig:
    return _load_config_txt(path, TeacherConfig)


def load_student_config(path) -> StudentConfig:
    return _load_config_txt(path, StudentConfig)
