"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure. Relative
experiment/output paths resolve under $SWAPFLOW_EXP_ROOT when it is set.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import analysis, conditioning, evaluation, flowcore, pseudotriplet, synthdata, training
from .degradation import DegradationSpec
from .errors import ConfigError, InputError, SwapflowError

MODES = ("full", "attribute_only", "identity_only", "none")


def _resolve(path_str: str) -> Path:
    p = Path(path_str)
    root = os.environ.get("SWAPFLOW_EXP_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_model(path):
    model, meta = flowcore.load_checkpoint(_resolve(path))
    spec = DegradationSpec.from_string(meta.get("degradation", "downsample:8"))
    return model, meta, spec


def _meta_overlays(meta):
    return bool(meta.get("overlay_keypoints", False)), bool(meta.get("overlay_accessory", False))


@click.group()
def cli():
    """Identity-swapping flow editor: data, training, swapping, evaluation."""


@cli.command("gen-data")
@click.option("--identities", type=int, required=True)
@click.option("--per-identity", type=int, required=True)
@click.option("--res", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True)
@click.option("--force", is_flag=True, help="overwrite an existing dataset")
def cmd_gen_data(identities, per_identity, res, seed, out_dir, force):
    """Render and persist a synthetic face dataset."""
    out = _resolve(out_dir)
    if (out / "manifest.jsonl").exists() and not force:
        raise ConfigError(f"dataset already exists at {out}; pass --force to overwrite")
    manifest = synthdata.build_dataset(synthdata.DatasetConfig(
        identity_count=identities, images_per_identity=per_identity,
        resolution=res, seed=seed, output_dir=str(out)))
    click.echo(f"wrote {len(manifest)} records to {out}")


@cli.command("train-id-encoder")
@click.option("--data", "data_dir", required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--steps", type=int, default=1500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_train_id_encoder(data_dir, out_dir, steps, seed):
    """Train the identity encoder on a dataset."""
    manifest = synthdata.load_manifest(_resolve(data_dir))
    out = _resolve(out_dir)
    cfg = conditioning.EncoderConfig(steps=steps, seed=seed)
    _, metrics = conditioning.train_identity_encoder(
        manifest, cfg, out_path=out / "checkpoints" / "id_encoder.pt")
    click.echo(f"encoder val top-1: {metrics['val_top1']:.3f}")


def _snapshot_config(exp_dir: Path, cfg, resume: bool):
    snap = exp_dir / "config.txt"
    if snap.exists() and not resume:
        raise ConfigError(f"experiment {exp_dir} already has a config snapshot; "
                          "use --resume or a fresh directory")
    if not snap.exists():
        exp_dir.mkdir(parents=True, exist_ok=True)
        training.save_config_txt(snap, cfg)


def _plot_loss_curve(log_path: Path, out_path: Path):
    if not log_path.exists():
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    steps, flow, idl = [], [], []
    for line in log_path.read_text().splitlines():
        rec = json.loads(line)
        steps.append(rec["step"])
        flow.append(rec["flow_loss"])
        idl.append(rec["id_loss"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, flow, label="flow", lw=0.8)
    ax.plot(steps, idl, label="identity", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


@cli.command("train-teacher")
@click.option("--data", "data_dir", required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--id-encoder", "encoder_path", required=True)
@click.option("--config", "config_path", default=None, help="key=value TeacherConfig file")
@click.option("--degradation", "degradation_str", default=None,
              help="kind[:strength], e.g. downsample:8")
@click.option("--phase1-steps", type=int, default=None)
@click.option("--phase2-steps", type=int, default=None)
@click.option("--id-gate", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--resume", is_flag=True, help="continue from the latest checkpoint")
def cmd_train_teacher(data_dir, out_dir, encoder_path, config_path, degradation_str,
                      phase1_steps, phase2_steps, id_gate, batch_size, lr, seed, resume):
    """Two-phase teacher training on the conditional-deblurring task."""
    manifest = synthdata.load_manifest(_resolve(data_dir))
    cfg = training.load_teacher_config(_resolve(config_path)) if config_path else training.TeacherConfig()
    overrides = {"degradation": DegradationSpec.from_string(degradation_str) if degradation_str else None,
                 "phase1_steps": phase1_steps, "phase2_steps": phase2_steps,
                 "id_gate_fraction": id_gate, "batch_size": batch_size, "lr": lr, "seed": seed}
    for k, v in overrides.items():
        if v is not None:
            cfg = training.TeacherConfig(**{**cfg.__dict__, k: v})
    exp = _resolve(out_dir)
    _snapshot_config(exp, cfg, resume)
    resume_from = None
    if resume:
        for name in ("teacher.pt", "teacher_phase1.pt"):
            cand = exp / "checkpoints" / name
            if cand.exists():
                resume_from = cand
                break
    encoder = conditioning.load_encoder(_resolve(encoder_path))
    enc_hash = flowcore.checkpoint_file_hash(_resolve(encoder_path))
    final = training.train_teacher(manifest, encoder, cfg, exp, resume_from=resume_from,
                                   encoder_hash=enc_hash)
    _plot_loss_curve(exp / "logs" / "train_teacher.jsonl", exp / "loss_curve.png")
    click.echo(f"teacher checkpoint: {final}")


@cli.command("train-student")
@click.option("--teacher", "teacher_path", required=True)
@click.option("--triplets", "triplet_dir", required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--id-encoder", "encoder_path", required=True)
@click.option("--config", "config_path", default=None, help="key=value StudentConfig file")
@click.option("--steps", type=int, default=None)
@click.option("--id-gate", type=float, default=None)
@click.option("--perceptual/--no-perceptual", default=None)
@click.option("--seed", type=int, default=None)
def cmd_train_student(teacher_path, triplet_dir, out_dir, encoder_path, config_path,
                      steps, id_gate, perceptual, seed):
    """Student training on a pseudo-triplet store."""
    cfg = training.load_student_config(_resolve(config_path)) if config_path else training.StudentConfig()
    overrides = {"steps": steps, "id_gate_fraction": id_gate,
                 "perceptual_loss_enabled": perceptual, "seed": seed}
    for k, v in overrides.items():
        if v is not None:
            cfg = training.StudentConfig(**{**cfg.__dict__, k: v})
    cfg = training.StudentConfig(**{**cfg.__dict__, "init_from": str(_resolve(teacher_path))})
    teacher_hash = flowcore.checkpoint_file_hash(_resolve(teacher_path))
    store = pseudotriplet.load_triplet_store(_resolve(triplet_dir), teacher_hash=teacher_hash)
    encoder = conditioning.load_encoder(_resolve(encoder_path))
    enc_hash = flowcore.checkpoint_file_hash(_resolve(encoder_path))
    data = training.TripletData(store.triplets, encoder)
    exp = _resolve(out_dir)
    _snapshot_config(exp, cfg, resume=False)
    final = training.train_student(data, encoder, cfg, exp, encoder_hash=enc_hash)
    _plot_loss_curve(exp / "logs" / "train_student.jsonl", exp / "loss_curve.png")
    click.echo(f"student checkpoint: {final}")


@cli.command("build-triplets")
@click.option("--teacher", "teacher_path", required=True)
@click.option("--data", "data_dir", required=True)
@click.option("--id-encoder", "encoder_path", required=True)
@click.option("--n", "n_triplets", type=int, required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--inversion", type=click.Choice(MODES), default="attribute_only", show_default=True)
@click.option("--steps", type=int, default=28, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--occlusion-fraction", type=float, default=0.0, show_default=True,
              help="write an additional occlusion-augmented copy when > 0")
def cmd_build_triplets(teacher_path, data_dir, encoder_path, n_triplets, out_dir,
                       inversion, steps, seed, occlusion_fraction):
    """Generate pseudo-triplets with the teacher."""
    model, meta, spec = _load_model(teacher_path)
    kp, acc = _meta_overlays(meta)
    encoder = conditioning.load_encoder(_resolve(encoder_path))
    manifest = synthdata.load_manifest(_resolve(data_dir))
    out = _resolve(out_dir)
    store = pseudotriplet.build_triplet_set(
        model, encoder, manifest, n_triplets, out, spec,
        inversion_mode=inversion, grid=flowcore.TimeGrid(steps), seed=seed,
        teacher_hash=flowcore.checkpoint_file_hash(_resolve(teacher_path)),
        keypoints=kp, accessory=acc)
    click.echo(f"wrote {len(store)} triplets to {out}")
    if occlusion_fraction > 0:
        occ_out = Path(str(out) + "_occluded")
        pseudotriplet.augment_with_occlusion(store, occlusion_fraction, seed, occ_out)
        click.echo(f"wrote occlusion-augmented copy to {occ_out}")


def _render_from_path(img_path: Path):
    """Rebuild a RenderOutput for an image file, using dataset context if present."""
    ds_root = img_path.parent.parent
    if (ds_root / "manifest.jsonl").exists():
        manifest = synthdata.load_manifest(ds_root)
        for rec in manifest.records:
            if (ds_root / rec.image_path) == img_path:
                return manifest.record_render(rec.index), rec.spec
    image = synthdata.load_image_png(img_path)
    ones = np.ones(image.shape[:2], dtype=np.uint8)
    return synthdata.RenderOutput(image=image, face_mask=ones, keypoints=[],
                                  accessory_mask=np.zeros_like(ones)), None


@cli.command("swap")
@click.option("--model", "model_path", required=True)
@click.option("--id-encoder", "encoder_path", required=True)
@click.option("--src", "src_path", required=True)
@click.option("--tgt", "tgt_path", required=True)
@click.option("--out", "out_path", required=True)
@click.option("--inversion", type=click.Choice(MODES), default="attribute_only", show_default=True)
@click.option("--steps", type=int, default=28, show_default=True)
@click.option("--fresh-noise", is_flag=True, help="skip inversion, start from seeded Gaussian noise")
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_swap(model_path, encoder_path, src_path, tgt_path, out_path, inversion, steps,
             fresh_noise, seed):
    """Swap the source identity onto the target image."""
    model, meta, spec = _load_model(model_path)
    kp, acc = _meta_overlays(meta)
    encoder = conditioning.load_encoder(_resolve(encoder_path))
    src_render, _ = _render_from_path(_resolve(src_path))
    tgt_render, _ = _render_from_path(_resolve(tgt_path))
    out_img = evaluation.swap(model, encoder, src_render, tgt_render, spec, inversion,
                              flowcore.TimeGrid(steps), keypoints=kp, accessory=acc,
                              use_inversion=not fresh_noise, fresh_noise_seed=seed)
    out = _resolve(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    synthdata.save_image_png(out, out_img)
    click.echo(f"wrote {out}")


@cli.command("invert")
@click.option("--model", "model_path", required=True)
@click.option("--id-encoder", "encoder_path", required=True)
@click.option("--image", "image_path", required=True)
@click.option("--out", "out_path", required=True, help="noise tensor (.npy)")
@click.option("--mode", type=click.Choice(MODES), default="attribute_only", show_default=True)
@click.option("--steps", type=int, default=28, show_default=True)
@click.option("--preview", default=None, help="optional normalized noise PNG")
def cmd_invert(model_path, encoder_path, image_path, out_path, mode, steps, preview):
    """Invert an image to its initial-noise latent."""
    model, meta, spec = _load_model(model_path)
    kp, acc = _meta_overlays(meta)
    encoder = conditioning.load_encoder(_resolve(encoder_path))
    render_out, _ = _render_from_path(_resolve(image_path))
    bundle = pseudotriplet._condition_bundle_for_inversion(
        render_out, encoder, spec, mode, keypoints=kp, accessory=acc)
    noise = flowcore.invert(model, conditioning.image_to_tensor(render_out.image),
                            bundle, flowcore.TimeGrid(steps)).numpy()
    out = _resolve(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, noise)
    if preview:
        lo, hi = noise.min(), noise.max()
        vis = (noise - lo) / (hi - lo) if hi > lo else np.zeros_like(noise)
        synthdata.save_image_png(_resolve(preview), vis.transpose(1, 2, 0).astype(np.float32))
    click.echo(f"wrote {out}")


@cli.command("eval")
@click.option("--model", "model_path", required=True)
@click.option("--id-encoder", "encoder_path", required=True)
@click.option("--probes", "probes_path", required=True)
@click.option("--data", "data_dir", required=True)
@click.option("--pairs", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--inversion", type=click.Choice(MODES), default="attribute_only", show_default=True)
@click.option("--steps", type=int, default=28, show_default=True)
@click.option("--out", "report_path", required=True)
@click.option("--grid-image", "grid_image", default=None)
def cmd_eval(model_path, encoder_path, probes_path, data_dir, pairs, seed, inversion,
             steps, report_path, grid_image):
    """Run the full swap-evaluation protocol and write a report."""
    model, meta, spec = _load_model(model_path)
    kp, acc = _meta_overlays(meta)
    encoder = conditioning.load_encoder(_resolve(encoder_path))
    probes = evaluation.load_probes(_resolve(probes_path))
    manifest = synthdata.load_manifest(_resolve(data_dir))
    cfg = evaluation.EvalConfig(n_pairs=pairs, seed=seed, grid_steps=steps,
                                inversion_mode=inversion)
    report = evaluation.evaluate_protocol(
        model, encoder, probes, manifest, cfg, spec, keypoints=kp, accessory=acc,
        report_path=_resolve(report_path),
        grid_image_path=_resolve(grid_image) if grid_image else None)
    click.echo(f"id_sim={report.id_similarity_mean:.3f} top1={report.retrieval_top1:.1f} "
               f"attr={report.mean_attribute_error:.4f} fid={report.feature_fid:.3f}")


DEFAULT_ABLATION_GRID = ("masking", "downsample:8", "downsample:16", "downsample:32",
                         "gaussian_blur:8", "gaussian_blur:16", "gaussian_blur:32", "none")


@cli.command("ablate-degradation")
@click.option("--out", "out_dir", required=True)
@click.option("--cells", default=",".join(DEFAULT_ABLATION_GRID), show_default=True,
              help="comma-separated kind[:strength] list")
@click.option("--mode", type=click.Choice(["probe", "full"]), default="probe", show_default=True,
              help="probe: identity-leak classifier per cell; full: train+eval a teacher per cell")
@click.option("--identities", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--data", "data_dir", default=None, help="dataset (full mode only)")
@click.option("--id-encoder", "encoder_path", default=None, help="full mode only")
@click.option("--probes", "probes_path", default=None, help="full mode only")
@click.option("--pairs", type=int, default=200, show_default=True, help="full mode only")
@click.option("--phase1-steps", type=int, default=5000, show_default=True, help="full mode only")
@click.option("--phase2-steps", type=int, default=2000, show_default=True, help="full mode only")
def cmd_ablate_degradation(out_dir, cells, mode, identities, seed, data_dir, encoder_path,
                           probes_path, pairs, phase1_steps, phase2_steps):
    """Sweep the degradation grid and emit one comparative table.

    probe mode measures how much identity each degradation leaks (held-out
    accuracy of a classifier on degraded faces). full mode trains a teacher
    per cell and runs the evaluation protocol; expect a long runtime.
    """
    specs = [DegradationSpec.from_string(s) for s in cells.split(",") if s.strip()]
    out = _resolve(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if mode == "probe":
        for spec in specs:
            acc = evaluation.identity_probe_accuracy(
                spec, evaluation.SuppressionProbeConfig(n_identities=identities, seed=seed))
            rows.append((spec.to_string(), {"identity_probe_accuracy": acc}))
    else:
        if not (data_dir and encoder_path and probes_path):
            raise ConfigError("full mode requires --data, --id-encoder and --probes")
        manifest = synthdata.load_manifest(_resolve(data_dir))
        encoder = conditioning.load_encoder(_resolve(encoder_path))
        enc_hash = flowcore.checkpoint_file_hash(_resolve(encoder_path))
        probes = evaluation.load_probes(_resolve(probes_path))
        for spec in specs:
            cell_dir = out / spec.to_string().replace(":", "-")
            cfg = training.TeacherConfig(degradation=spec, phase1_steps=phase1_steps,
                                         phase2_steps=phase2_steps, seed=seed)
            ckpt = training.train_teacher(manifest, encoder, cfg, cell_dir, encoder_hash=enc_hash)
            model, meta = flowcore.load_checkpoint(ckpt)
            report = evaluation.evaluate_protocol(
                model, encoder, probes, manifest,
                evaluation.EvalConfig(n_pairs=pairs, seed=seed), spec,
                report_path=cell_dir / "report.txt")
            rows.append((spec.to_string(), {
                "id_similarity": report.id_similarity_mean,
                "retrieval_top1": report.retrieval_top1,
                "mean_attribute_error": report.mean_attribute_error,
                "feature_fid": report.feature_fid,
            }))

    metric_names = sorted(rows[0][1].keys())
    lines = ["degradation\t" + "\t".join(metric_names)]
    for name, metrics in rows:
        lines.append(name + "\t" + "\t".join(f"{metrics[m]:.6f}" for m in metric_names))
    table_path = out / "ablation_table.txt"
    table_path.write_text("\n".join(lines) + "\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(8, 4))
    names = [name for name, _ in rows]
    first_metric = metric_names[0]
    ax.bar(range(len(rows)), [m[first_metric] for _, m in rows])
    ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
    ax.set_ylabel(first_metric)
    fig.tight_layout()
    fig.savefig(out / "ablation_bars.png", dpi=110)
    plt.close(fig)
    click.echo(table_path.read_text().rstrip())


@cli.command("analyze-noise")
@click.option("--model", "model_path", required=True)
@click.option("--id-encoder", "encoder_path", required=True)
@click.option("--data", "data_dir", required=True)
@click.option("--modes", default="all", show_default=True)
@click.option("--n", "n_images", type=int, default=64, show_default=True)
@click.option("--steps", type=int, default=28, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True)
def cmd_analyze_noise(model_path, encoder_path, data_dir, modes, n_images, steps, seed, out_dir):
    """PCA diagnostics of inverted noise under the four conditioning configs."""
    model, meta, spec = _load_model(model_path)
    kp, acc = _meta_overlays(meta)
    encoder = conditioning.load_encoder(_resolve(encoder_path))
    manifest = synthdata.load_manifest(_resolve(data_dir))
    results = analysis.compare_inversion_modes(
        model, encoder, manifest, flowcore.TimeGrid(steps), n_images, spec,
        seed=seed, keypoints=kp, accessory=acc, out_dir=_resolve(out_dir))
    for name, stats in results.items():
        click.echo(f"{name}: structure_score={stats.structure_score:.4f}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        sys.exit(2)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)
    except SwapflowError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        sys.exit(3)
    except click.exceptions.Abort:
        sys.exit(130)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        sys.exit(3)
    sys.exit(0)


if __name__ == "__main__":
    main()
