"""Inverted-noise diagnostics.

Inversion under different conditioning configurations leaves different
amounts of image structure in the resulting noise. We quantify "structure"
as the explained-variance share of the top five principal components across
a batch of noises; for an i.i.d. Gaussian batch with dimension far above the
batch size this concentrates near 5/(n-1).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .conditioning import (ConditioningBundle, ConditioningMode, IdentityEncoder,
                           build_attribute_condition, image_to_tensor)
from .degradation import DegradationSpec
from .errors import InputError
from .flowcore import TimeGrid, VelocityModel, invert
from .synthdata import DatasetManifest, save_image_png

STRUCTURE_COMPONENTS = 5


@dataclass
class NoiseStats:
    explained_variance_ratios: np.ndarray
    leading_component_image: np.ndarray
    structure_score: float
    marginal_kurtosis: float
    marginal_mean: float
    marginal_std: float


def noise_pca(noise_batch: np.ndarray) -> NoiseStats:
    """PCA over a batch of noise tensors (N, ...), flattened per item."""
    arr = np.asarray(noise_batch, dtype=np.float64)
    n = arr.shape[0]
    if n < 8:
        raise InputError(f"noise_pca needs a batch of >= 8 tensors, got {n}")
    item_shape = arr.shape[1:]
    flat = arr.reshape(n, -1)
    centered = flat - flat.mean(axis=0, keepdims=True)

    # economy SVD: at most n-1 informative components
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    variances = svals ** 2
    total = float(variances.sum())
    k = min(n, flat.shape[1])
    ratios = np.zeros(k, dtype=np.float64)
    if total > 1e-30:
        ratios[:len(variances)] = variances / total
    else:
        print("[swapflow] warning: rank-deficient noise batch, ratios padded with zeros")
    leading = vt[0].reshape(item_shape) if total > 1e-30 else np.zeros(item_shape)

    vals = flat.ravel()
    mean = float(vals.mean())
    std = float(vals.std())
    kurt = float(((vals - mean) ** 4).mean() / max(std ** 4, 1e-30) - 3.0)
    return NoiseStats(
        explained_variance_ratios=ratios,
        leading_component_image=leading,
        structure_score=float(ratios[:STRUCTURE_COMPONENTS].sum()),
        marginal_kurtosis=kurt, marginal_mean=mean, marginal_std=std)


def gaussian_structure_reference(n: int, item_shape, batches: int = 24, seed: int = 0):
    """Monte Carlo mean/std of the structure score for i.i.d. Gaussian batches."""
    rng = np.random.default_rng([seed, 43])
    scores = []
    for _ in range(batches):
        scores.append(noise_pca(rng.standard_normal((n, *item_shape))).structure_score)
    scores = np.asarray(scores)
    return float(scores.mean()), float(scores.std(ddof=1))


def compare_inversion_modes(model: VelocityModel, encoder: IdentityEncoder,
                            manifest: DatasetManifest, grid: TimeGrid, n: int,
                            spec: DegradationSpec, seed: int = 0,
                            keypoints: bool = True, accessory: bool = True,
                            out_dir=None) -> dict:
    """Invert n targets under all four configurations plus a Gaussian baseline.

    Returns {mode_name: NoiseStats} with an extra "gaussian" row. When out_dir
    is given, writes a text report and a leading-component image per row.
    """
    rng = np.random.default_rng([seed, 31])
    indices = rng.choice(len(manifest.records), size=min(n, len(manifest.records)), replace=False)
    renders = [manifest.record_render(int(i)) for i in indices]
    imgs = torch.stack([image_to_tensor(r.image) for r in renders])

    results = {}
    for mode in (ConditioningMode.FULL, ConditioningMode.ATTRIBUTE_ONLY,
                 ConditioningMode.IDENTITY_ONLY, ConditioningMode.NONE):
        id_emb = None
        att = None
        if mode in (ConditioningMode.FULL, ConditioningMode.IDENTITY_ONLY):
            masks = torch.from_numpy(np.stack([r.face_mask for r in renders])).float()[:, None]
            with torch.inference_mode():
                id_emb = encoder(imgs * masks).clone()
        if mode in (ConditioningMode.FULL, ConditioningMode.ATTRIBUTE_ONLY):
            att = torch.stack([image_to_tensor(build_attribute_condition(
                r, spec, keypoints=keypoints, accessory=accessory).image) for r in renders])
        bundle = ConditioningBundle(id_embedding=id_emb, att_image=att, mode=mode)
        noise = invert(model, imgs, bundle, grid).numpy()
        results[mode.value] = noise_pca(noise)

    g = np.random.default_rng([seed, 47]).standard_normal(tuple(imgs.shape))
    results["gaussian"] = noise_pca(g)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["mode\tstructure_score\tmarginal_mean\tmarginal_std\tmarginal_kurtosis"]
        for name, stats in results.items():
            lines.append(f"{name}\t{stats.structure_score:.6f}\t{stats.marginal_mean:.6f}"
                         f"\t{stats.marginal_std:.6f}\t{stats.marginal_kurtosis:.6f}")
            comp = stats.leading_component_image
            lo, hi = comp.min(), comp.max()
            vis = (comp - lo) / (hi - lo) if hi > lo else np.zeros_like(comp)
            if vis.ndim == 3 and vis.shape[0] in (1, 3):  # channel-first noise
                vis = np.transpose(vis, (1, 2, 0))
            if vis.ndim == 2:
                vis = np.repeat(vis[:, :, None], 3, axis=2)
            save_image_png(out_dir / f"component_{name}.png", vis.astype(np.float32))
        (out_dir / "noise_report.txt").write_text("\n".join(lines) + "\n")
    return results
