"""Evaluation protocol on the synthetic benchmark.

Attribute preservation is measured in ground-truth factor space through small
frozen regressors (pose, expression, gaze, lighting vector, observable skin
hue); identity transfer through embedding cosine and retrieval; image
fidelity through a Frechet distance between feature-space Gaussian fits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import IdentityEncoder, embed_identity, image_to_tensor
from .degradation import DegradationSpec, degrade
from .errors import ConfigError, InputError, TrainingQualityError
from .flowcore import TimeGrid, VelocityModel
from .pseudotriplet import swap_images_batched
from .synthdata import (AttributeFactors, DatasetManifest, FaceSpec, RenderOutput,
                        render, sample_attributes, sample_identity)

# probe output layout: columns of the regression target
PROBE_COLUMNS = ("pose", "expression", "gaze_x", "gaze_y", "light_x", "light_y", "skin_tone")
# fixed normalizers (midpoint, half-range) so training is seed-stable
_PROBE_NORM = {
    "pose": (0.0, 0.6), "expression": (0.0, 1.0),
    "gaze_x": (0.0, 1.0), "gaze_y": (0.0, 1.0),
    "light_x": (0.0, 0.5), "light_y": (0.0, 0.5),
    "skin_tone": (0.5, 0.65),
}
# per-factor scales used to aggregate errors of different units
_FACTOR_SCALE = {"pose": 1.2, "expression": 2.0, "gaze": 2.0 * np.sqrt(2.0),
                 "lighting": 1.0, "skin_tone": 1.3}


def spec_probe_targets(spec: FaceSpec) -> np.ndarray:
    """Ground-truth probe vector for a spec (the observable quantities)."""
    att = spec.attributes
    return np.array([
        att.pose_angle,
        att.expression,
        att.gaze[0],
        att.gaze[1],
        att.lighting_strength * np.cos(att.lighting_dir),
        att.lighting_strength * np.sin(att.lighting_dir),
        spec.total_hue,
    ], dtype=np.float64)


@dataclass
class ProbeConfig:
    channels: tuple = (24, 48, 96)
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    n_train: int = 3072
    n_val: int = 384
    resolution: int = 64
    min_r2: float = 0.9


class AttributeProbes(nn.Module):
    """Shared conv trunk with a linear head regressing all probed factors."""

    def __init__(self, cfg: ProbeConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        prev = 3
        for c in cfg.channels:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1),
                       nn.GroupNorm(min(8, c), c), nn.SiLU(),
                       nn.Conv2d(c, c, 3, padding=1),
                       nn.GroupNorm(min(8, c), c), nn.SiLU()]
            prev = c
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(prev, len(PROBE_COLUMNS))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.trunk(x).mean(dim=(2, 3))
        return self.head(h)

    def predict(self, images: torch.Tensor) -> np.ndarray:
        """De-normalized probe predictions, (B, len(PROBE_COLUMNS))."""
        with torch.inference_mode():
            self.eval()
            out = self.forward(images).numpy().astype(np.float64)
        for j, col in enumerate(PROBE_COLUMNS):
            mid, half = _PROBE_NORM[col]
            out[:, j] = out[:, j] * half + mid
        return out


def _render_probe_bank(n: int, resolution: int, seed: int, salt: int):
    images = np.empty((n, resolution, resolution, 3), dtype=np.float32)
    targets = np.empty((n, len(PROBE_COLUMNS)), dtype=np.float64)
    for i in range(n):
        rng = np.random.default_rng([seed, salt, i])
        identity = sample_identity(int(rng.integers(0, 2 ** 31)), int(rng.integers(0, 10 ** 6)))
        spec = FaceSpec(identity=identity, attributes=sample_attributes(rng))
        images[i] = render(spec, resolution).image
        targets[i] = spec_probe_targets(spec)
    return images, targets


def train_attribute_probes(config: ProbeConfig | None = None, out_path=None):
    """Train and gate the factor regressors on freshly rendered data.

    Raises TrainingQualityError when any probed factor misses the held-out
    R-squared floor. Returns (probes, r2 dict).
    """
    cfg = config or ProbeConfig()
    x_train, y_train = _render_probe_bank(cfg.n_train, cfg.resolution, cfg.seed, salt=301)
    x_val, y_val = _render_probe_bank(cfg.n_val, cfg.resolution, cfg.seed, salt=302)

    y_norm = y_train.copy()
    for j, col in enumerate(PROBE_COLUMNS):
        mid, half = _PROBE_NORM[col]
        y_norm[:, j] = (y_norm[:, j] - mid) / half

    xt = torch.from_numpy(x_train.transpose(0, 3, 1, 2))
    yt = torch.from_numpy(y_norm).float()
    torch.manual_seed(cfg.seed)
    probes = AttributeProbes(cfg)
    opt = torch.optim.AdamW(probes.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 19])
    probes.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.integers(0, len(xt), size=cfg.batch_size))
        loss = F.mse_loss(probes(xt[idx]), yt[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    preds = []
    xv = torch.from_numpy(x_val.transpose(0, 3, 1, 2))
    for i in range(0, len(xv), 128):
        preds.append(probes.predict(xv[i:i + 128]))
    pred = np.concatenate(preds)

    r2 = {}
    factor_cols = {"pose": [0], "expression": [1], "gaze": [2, 3],
                   "lighting": [4, 5], "skin_tone": [6]}
    for name, cols in factor_cols.items():
        sse = float(((pred[:, cols] - y_val[:, cols]) ** 2).sum())
        sst = float(((y_val[:, cols] - y_val[:, cols].mean(axis=0)) ** 2).sum())
        r2[name] = 1.0 - sse / sst
    low = {k: v for k, v in r2.items() if v < cfg.min_r2}
    if low:
        raise TrainingQualityError(
            f"attribute probes below R2 {cfg.min_r2}: "
            + ", ".join(f"{k}={v:.3f}" for k, v in low.items()))
    for p in probes.parameters():
        p.requires_grad_(False)
    probes.eval()
    if out_path is not None:
        save_probes(out_path, probes, r2)
    return probes, r2


def save_probes(path, probes: AttributeProbes, r2=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": probes.state_dict(), "config": asdict(probes.cfg),
                "r2": r2 or {}}, path)


def load_probes(path) -> AttributeProbes:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg_d = dict(payload["config"])
    cfg_d["channels"] = tuple(cfg_d["channels"])
    probes = AttributeProbes(ProbeConfig(**cfg_d))
    probes.load_state_dict(payload["state_dict"])
    probes.eval()
    for p in probes.parameters():
        p.requires_grad_(False)
    return probes


# ---------------------------------------------------------------------------
# scalar metrics


def identity_similarity(encoder: IdentityEncoder, swapped: np.ndarray,
                        source: np.ndarray, source_mask=None) -> float:
    """Cosine between the swapped image's embedding and the source's."""
    e_swap = embed_identity(encoder, swapped)
    e_src = embed_identity(encoder, source, source_mask)
    return float((e_swap * e_src).sum())


def id_retrieval(encoder: IdentityEncoder, swapped_set, source_set, source_masks=None):
    """Top-1/top-5 retrieval of the driving source by embedding cosine.

    swapped_set[i] must have been driven by source_set[i]; ties break toward
    the lower index. Returns percentages.
    """
    if len(swapped_set) != len(source_set):
        raise InputError("swapped and source sets must align by index")
    n = len(swapped_set)
    with torch.inference_mode():
        encoder.eval()
        sw = torch.from_numpy(np.stack(swapped_set).transpose(0, 3, 1, 2)).float()
        src = torch.from_numpy(np.stack(source_set).transpose(0, 3, 1, 2)).float()
        if source_masks is not None:
            src = src * torch.from_numpy(np.stack(source_masks)).float()[:, None]
        e_sw = torch.cat([encoder(sw[i:i + 64]) for i in range(0, n, 64)])
        e_src = torch.cat([encoder(src[i:i + 64]) for i in range(0, n, 64)])
    sims = (e_sw @ e_src.t()).numpy().astype(np.float64)
    # stable argsort on (-sim, index) implements the low-index tie break
    order = np.argsort(-sims, axis=1, kind="stable")
    ranks = np.array([int(np.where(order[i] == i)[0][0]) for i in range(n)])
    top1 = 100.0 * float((ranks < 1).mean())
    top5 = 100.0 * float((ranks < 5).mean())
    return top1, top5


def attribute_error(probes: AttributeProbes, swapped: np.ndarray,
                    target_spec: FaceSpec) -> dict:
    """Per-factor absolute errors of the swapped image against target truth."""
    pred = probes.predict(image_to_tensor(swapped)[None])[0]
    return _attribute_errors_from_pred(pred, target_spec)


def _attribute_errors_from_pred(pred: np.ndarray, target_spec: FaceSpec) -> dict:
    truth = spec_probe_targets(target_spec)
    errs = {
        "pose_error": float(abs(pred[0] - truth[0])),
        "expression_error": float(abs(pred[1] - truth[1])),
        "gaze_error": float(np.hypot(pred[2] - truth[2], pred[3] - truth[3])),
        "lighting_error": float(np.hypot(pred[4] - truth[4], pred[5] - truth[5])),
        "skin_tone_error": float(abs(pred[6] - truth[6])),
    }
    errs["mean_attribute_error"] = float(np.mean([
        errs["pose_error"] / _FACTOR_SCALE["pose"],
        errs["expression_error"] / _FACTOR_SCALE["expression"],
        errs["gaze_error"] / _FACTOR_SCALE["gaze"],
        errs["lighting_error"] / _FACTOR_SCALE["lighting"],
        errs["skin_tone_error"] / _FACTOR_SCALE["skin_tone"],
    ]))
    return errs


# ---------------------------------------------------------------------------
# feature-space Frechet distance


def fit_feature_gaussian(features: np.ndarray):
    feats = np.asarray(features, dtype=np.float64)
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False)
    return mu, np.atleast_2d(sigma)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_stats(mu1, sigma1, mu2, sigma2) -> float:
    """Frechet distance between two Gaussians from their moments."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    s1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    root2 = _psd_sqrt(s2)
    inner = _psd_sqrt(root2 @ s1 @ root2)
    val = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(inner))
    return max(val, 0.0)


def encode_feature_set(encoder: IdentityEncoder, images) -> np.ndarray:
    with torch.inference_mode():
        encoder.eval()
        x = torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2)).float()
        feats = [encoder.penultimate(x[i:i + 64]) for i in range(0, len(x), 64)]
    return torch.cat(feats).numpy().astype(np.float64)


def feature_fid(encoder: IdentityEncoder, generated_set, real_set) -> float:
    """Frechet distance between feature Gaussians of two image sets.

    Computed in both argument orders and averaged, which makes the result
    exactly symmetric despite the asymmetric square-root factorization.
    """
    if len(generated_set) < 64 or len(real_set) < 64:
        raise InputError("feature_fid needs >= 64 images per set")
    f_gen = encode_feature_set(encoder, generated_set)
    f_real = encode_feature_set(encoder, real_set)
    mu_g, s_g = fit_feature_gaussian(f_gen)
    mu_r, s_r = fit_feature_gaussian(f_real)
    d_ab = frechet_from_stats(mu_g, s_g, mu_r, s_r)
    d_ba = frechet_from_stats(mu_r, s_r, mu_g, s_g)
    return 0.5 * (d_ab + d_ba)


# ---------------------------------------------------------------------------
# swapping and the full protocol


def swap(model: VelocityModel, encoder: IdentityEncoder, src: RenderOutput, tgt: RenderOutput,
         spec: DegradationSpec, inversion_mode, grid: TimeGrid,
         keypoints: bool = True, accessory: bool = True,
         use_inversion: bool = True, fresh_noise_seed: int = 0) -> np.ndarray:
    """Swap the source identity onto the target; returns (H, W, 3) in [0, 1]."""
    src_emb = embed_identity(encoder, src.image, src.face_mask)
    return swap_images_batched(
        model, encoder, [tgt], src_emb[None], spec, inversion_mode, grid,
        keypoints=keypoints, accessory=accessory,
        fresh_noise_seed=None if use_inversion else fresh_noise_seed)[0]


@dataclass
class EvalConfig:
    n_pairs: int = 200
    seed: int = 0
    grid_steps: int = 28
    inversion_mode: str = "attribute_only"
    use_inversion: bool = True
    batch_size: int = 32


@dataclass
class EvalReport:
    n_pairs: int
    id_similarity_mean: float
    retrieval_top1: float
    retrieval_top5: float
    pose_error: float
    expression_error: float
    gaze_error: float
    lighting_error: float
    skin_tone_error: float
    mean_attribute_error: float
    feature_fid: float
    inversion_mode: str
    seed: int
    per_pair: list = field(default_factory=list)

    SCALAR_KEYS = ("n_pairs", "id_similarity_mean", "retrieval_top1", "retrieval_top5",
                   "pose_error", "expression_error", "gaze_error", "lighting_error",
                   "skin_tone_error", "mean_attribute_error", "feature_fid",
                   "inversion_mode", "seed")

    def write(self, path):
        lines = []
        for key in self.SCALAR_KEYS:
            v = getattr(self, key)
            lines.append(f"{key}={v:.6f}" if isinstance(v, float) else f"{key}={v}")
        lines.append("")
        cols = ["pair", "src_index", "tgt_index", "id_similarity", "pose_error",
                "expression_error", "gaze_error", "lighting_error", "skin_tone_error",
                "mean_attribute_error"]
        lines.append("\t".join(cols))
        for row in self.per_pair:
            lines.append("\t".join(
                str(row[c]) if isinstance(row[c], int) else f"{row[c]:.6f}" for c in cols))
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")


def parse_report(path) -> EvalReport:
    scalars = {}
    lines = Path(path).read_text().splitlines()
    i = 0
    for i, line in enumerate(lines):
        if not line.strip():
            break
        key, val = line.split("=", 1)
        scalars[key] = val
    kwargs = {}
    for key in EvalReport.SCALAR_KEYS:
        raw = scalars[key]
        if key in ("n_pairs", "seed"):
            kwargs[key] = int(float(raw))
        elif key == "inversion_mode":
            kwargs[key] = raw
        else:
            kwargs[key] = float(raw)
    per_pair = []
    header = lines[i + 1].split("\t")
    for line in lines[i + 2:]:
        if not line.strip():
            continue
        vals = line.split("\t")
        row = {}
        for c, v in zip(header, vals):
            row[c] = int(v) if c in ("pair", "src_index", "tgt_index") else float(v)
        per_pair.append(row)
    return EvalReport(per_pair=per_pair, **kwargs)


def evaluate_protocol(model: VelocityModel, encoder: IdentityEncoder, probes: AttributeProbes,
                      manifest: DatasetManifest, config: EvalConfig,
                      degradation: DegradationSpec, keypoints: bool = True,
                      accessory: bool = True, report_path=None, grid_image_path=None) -> EvalReport:
    """Swap seeded cross-identity pairs and compute every protocol metric.

    Deterministic given (config, checkpoints): the same seed picks the same
    pairs, so reruns produce byte-identical reports.
    """
    if config.n_pairs < 1:
        raise InputError("n_pairs must be >= 1")
    rng = np.random.default_rng([config.seed, 17])
    n_rec = len(manifest.records)
    pairs = []
    for _ in range(config.n_pairs):
        tgt = int(rng.integers(0, n_rec))
        tgt_ident = manifest.records[tgt].spec.identity.identity_id
        src = int(rng.integers(0, n_rec))
        while manifest.records[src].spec.identity.identity_id == tgt_ident:
            src = int(rng.integers(0, n_rec))
        pairs.append((src, tgt))

    grid = TimeGrid(config.grid_steps)
    render_cache = {}

    def rec_render(idx):
        if idx not in render_cache:
            render_cache[idx] = manifest.record_render(idx)
        return render_cache[idx]

    swapped_all = []
    for start in range(0, config.n_pairs, config.batch_size):
        chunk = pairs[start:start + config.batch_size]
        tgt_renders = [rec_render(t) for _, t in chunk]
        src_embs = torch.stack([
            embed_identity(encoder, rec_render(s).image, rec_render(s).face_mask)
            for s, _ in chunk])
        swapped = swap_images_batched(
            model, encoder, tgt_renders, src_embs, degradation, config.inversion_mode,
            grid, keypoints=keypoints, accessory=accessory,
            fresh_noise_seed=None if config.use_inversion else config.seed + start)
        swapped_all.append(swapped)
    swapped_all = np.concatenate(swapped_all)

    src_imgs = [rec_render(s).image for s, _ in pairs]
    src_masks = [rec_render(s).face_mask for s, _ in pairs]
    with torch.inference_mode():
        encoder.eval()
        sw_t = torch.from_numpy(swapped_all.transpose(0, 3, 1, 2)).float()
        e_sw = torch.cat([encoder(sw_t[i:i + 64]) for i in range(0, len(sw_t), 64)])
        src_t = torch.from_numpy(np.stack(src_imgs).transpose(0, 3, 1, 2)).float()
        src_t = src_t * torch.from_numpy(np.stack(src_masks)).float()[:, None]
        e_src = torch.cat([encoder(src_t[i:i + 64]) for i in range(0, len(src_t), 64)])
    id_sims = (e_sw * e_src).sum(dim=1).numpy().astype(np.float64)
    sims = (e_sw @ e_src.t()).numpy().astype(np.float64)
    order = np.argsort(-sims, axis=1, kind="stable")
    ranks = np.array([int(np.where(order[i] == i)[0][0]) for i in range(len(pairs))])
    top1 = 100.0 * float((ranks < 1).mean())
    top5 = 100.0 * float((ranks < 5).mean())

    preds = []
    for i in range(0, len(sw_t), 128):
        preds.append(probes.predict(sw_t[i:i + 128]))
    preds = np.concatenate(preds)

    per_pair = []
    for i, (s, t) in enumerate(pairs):
        errs = _attribute_errors_from_pred(preds[i], manifest.records[t].spec)
        row = {"pair": i, "src_index": s, "tgt_index": t, "id_similarity": float(id_sims[i])}
        row.update(errs)
        per_pair.append(row)

    real_imgs = [rec_render(t).image for _, t in pairs]
    fid = feature_fid(encoder, list(swapped_all), real_imgs)

    def mean_of(key):
        return float(np.mean([row[key] for row in per_pair]))

    report = EvalReport(
        n_pairs=config.n_pairs,
        id_similarity_mean=float(id_sims.mean()),
        retrieval_top1=top1, retrieval_top5=top5,
        pose_error=mean_of("pose_error"), expression_error=mean_of("expression_error"),
        gaze_error=mean_of("gaze_error"), lighting_error=mean_of("lighting_error"),
        skin_tone_error=mean_of("skin_tone_error"),
        mean_attribute_error=mean_of("mean_attribute_error"),
        feature_fid=fid, inversion_mode=str(config.inversion_mode), seed=config.seed,
        per_pair=per_pair)
    if report_path is not None:
        report.write(report_path)
    if grid_image_path is not None:
        _write_swap_grid(grid_image_path, src_imgs, [r.image for r in
                                                     (rec_render(t) for _, t in pairs)],
                         swapped_all, limit=8)
    return report


def _write_swap_grid(path, sources, targets, swapped, limit=8):
    from PIL import Image
    n = min(limit, len(swapped))
    h, w = swapped[0].shape[:2]
    canvas = np.ones((3 * h + 8, n * (w + 2), 3), dtype=np.float32)
    for i in range(n):
        x0 = i * (w + 2)
        canvas[0:h, x0:x0 + w] = sources[i]
        canvas[h + 4:2 * h + 4, x0:x0 + w] = targets[i]
        canvas[2 * h + 8:3 * h + 8, x0:x0 + w] = swapped[i]
    data = np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# identity-suppression instrument: how much identity survives a degradation


@dataclass
class SuppressionProbeConfig:
    n_identities: int = 64
    train_per_identity: int = 10
    val_per_identity: int = 4
    resolution: int = 64
    steps: int = 900
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0


def identity_probe_accuracy(spec: DegradationSpec, config: SuppressionProbeConfig | None = None) -> float:
    """Train a small classifier to name identities from degraded faces.

    Returns held-out accuracy: high accuracy means the degradation leaks
    identity, chance-level means it suppressed it.
    """
    cfg = config or SuppressionProbeConfig()

    def bank(per_identity, salt):
        xs, ys = [], []
        for ident in range(cfg.n_identities):
            identity = sample_identity(cfg.seed + 1000, ident)
            for j in range(per_identity):
                rng = np.random.default_rng([cfg.seed, salt, ident, j])
                fs = FaceSpec(identity=identity, attributes=sample_attributes(rng))
                out = render(fs, cfg.resolution)
                xs.append(degrade(out.image, out.face_mask, spec))
                ys.append(ident)
        x = torch.from_numpy(np.stack(xs).transpose(0, 3, 1, 2)).float()
        return x, torch.tensor(ys, dtype=torch.long)

    x_train, y_train = bank(cfg.train_per_identity, salt=501)
    x_val, y_val = bank(cfg.val_per_identity, salt=502)

    torch.manual_seed(cfg.seed)
    net = nn.Sequential(
        nn.Conv2d(3, 24, 3, stride=2, padding=1), nn.GroupNorm(8, 24), nn.SiLU(),
        nn.Conv2d(24, 48, 3, stride=2, padding=1), nn.GroupNorm(8, 48), nn.SiLU(),
        nn.Conv2d(48, 96, 3, stride=2, padding=1), nn.GroupNorm(8, 96), nn.SiLU(),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(96, cfg.n_identities))
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 29])
    for _ in range(cfg.steps):
        idx = torch.from_numpy(rng.integers(0, len(x_train), size=cfg.batch_size))
        loss = F.cross_entropy(net(x_train[idx]), y_train[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.inference_mode():
        net.eval()
        preds = torch.cat([net(x_val[i:i + 128]).argmax(dim=1)
                           for i in range(0, len(x_val), 128)])
    return float((preds == y_val).float().mean())
