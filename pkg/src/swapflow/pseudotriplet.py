"""Pseudo-triplet construction: (source of identity A, teacher-swapped A->B
target, original target of A), the supervision tuples the student trains on.

Swapping inverts the target under the chosen conditioning configuration and
re-samples with the donor identity; a quality gate resamples donors whose
swaps still embed closer to the original identity than to the donor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import (ConditioningBundle, ConditioningMode, IdentityEncoder,
                           build_attribute_condition, embed_identity, image_to_tensor,
                           make_bundle, tensor_to_image)
from .degradation import DegradationSpec
from .errors import ConfigError, InputError
from .flowcore import TimeGrid, VelocityModel, invert, sample
from .synthdata import (FaceSpec, RenderOutput, load_image_png, render,
                        sample_occluder, save_image_png, save_masks_png, load_masks_png)


@dataclass
class PseudoTriplet:
    source_image: np.ndarray
    swapped_image: np.ndarray
    target_image: np.ndarray
    source_spec: FaceSpec
    target_spec: FaceSpec
    donor_identity_id: int
    source_face_mask: np.ndarray
    target_face_mask: np.ndarray
    occlusion_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.source_spec.identity.identity_id != self.target_spec.identity.identity_id:
            raise InputError("source and target must share an identity")
        if self.donor_identity_id == self.source_spec.identity.identity_id:
            raise InputError("donor identity must differ from the source identity")
        if not (self.source_image.shape == self.swapped_image.shape == self.target_image.shape):
            raise InputError("triplet images must share one shape")


@dataclass
class TripletStore:
    root: Path
    triplets: list
    teacher_hash: str
    inversion_mode: str
    grid_steps: int

    def __len__(self):
        return len(self.triplets)


def _condition_bundle_for_inversion(render_out: RenderOutput, encoder: IdentityEncoder,
                                    spec: DegradationSpec, mode: ConditioningMode,
                                    keypoints: bool, accessory: bool) -> ConditioningBundle:
    """Bundle built from the target's own identity/attribute conditions."""
    mode = ConditioningMode(mode)
    id_emb = None
    att = None
    if mode in (ConditioningMode.FULL, ConditioningMode.IDENTITY_ONLY):
        id_emb = embed_identity(encoder, render_out.image, render_out.face_mask)
    if mode in (ConditioningMode.FULL, ConditioningMode.ATTRIBUTE_ONLY):
        att = build_attribute_condition(render_out, spec, keypoints=keypoints, accessory=accessory)
    return make_bundle(id_embedding=id_emb, att=att, mode=mode)


def swap_images_batched(teacher: VelocityModel, encoder: IdentityEncoder,
                        tgt_renders: list, donor_embeddings: torch.Tensor,
                        spec: DegradationSpec, inversion_mode, grid: TimeGrid,
                        keypoints: bool = True, accessory: bool = True,
                        fresh_noise_seed: int | None = None) -> np.ndarray:
    """Swap a batch of targets toward donor embeddings; returns (B,H,W,3).

    When fresh_noise_seed is given the inversion stage is skipped and
    sampling starts from seeded Gaussian noise instead.
    """
    mode = ConditioningMode(inversion_mode)
    imgs = torch.stack([image_to_tensor(r.image) for r in tgt_renders])
    atts = torch.stack([image_to_tensor(
        build_attribute_condition(r, spec, keypoints=keypoints, accessory=accessory).image)
        for r in tgt_renders])

    if fresh_noise_seed is not None:
        gen = torch.Generator().manual_seed(fresh_noise_seed)
        noise = torch.randn(imgs.shape, generator=gen)
    else:
        inv_id = None
        inv_att = None
        if mode in (ConditioningMode.FULL, ConditioningMode.IDENTITY_ONLY):
            masks = torch.from_numpy(np.stack([r.face_mask for r in tgt_renders])).float()[:, None]
            with torch.inference_mode():
                inv_id = encoder(imgs * masks).clone()
        if mode in (ConditioningMode.FULL, ConditioningMode.ATTRIBUTE_ONLY):
            inv_att = atts
        inv_bundle = ConditioningBundle(id_embedding=inv_id, att_image=inv_att, mode=mode)
        noise = invert(teacher, imgs, inv_bundle, grid)

    swap_bundle = ConditioningBundle(id_embedding=donor_embeddings, att_image=atts,
                                     mode=ConditioningMode.FULL)
    out = sample(teacher, noise, swap_bundle, grid)
    return out.image.permute(0, 2, 3, 1).numpy().astype(np.float32)


def build_triplet(teacher: VelocityModel, encoder: IdentityEncoder,
                  src_render: RenderOutput, tgt_render: RenderOutput, donor_render: RenderOutput,
                  src_spec: FaceSpec, tgt_spec: FaceSpec, donor_spec: FaceSpec,
                  spec: DegradationSpec, inversion_mode, grid: TimeGrid,
                  keypoints: bool = True, accessory: bool = True) -> PseudoTriplet:
    """Build one pseudo-triplet via inversion + donor-conditioned sampling."""
    if src_spec.identity.identity_id != tgt_spec.identity.identity_id:
        raise InputError("source/target renders must share an identity")
    if donor_spec.identity.identity_id == tgt_spec.identity.identity_id:
        raise InputError("donor must be a different identity")
    donor_emb = embed_identity(encoder, donor_render.image, donor_render.face_mask)
    swapped = swap_images_batched(teacher, encoder, [tgt_render], donor_emb[None],
                                  spec, inversion_mode, grid,
                                  keypoints=keypoints, accessory=accessory)[0]
    return PseudoTriplet(
        source_image=src_render.image, swapped_image=swapped, target_image=tgt_render.image,
        source_spec=src_spec, target_spec=tgt_spec,
        donor_identity_id=donor_spec.identity.identity_id,
        source_face_mask=src_render.face_mask, target_face_mask=tgt_render.face_mask)


def build_triplet_set(teacher: VelocityModel, encoder: IdentityEncoder, manifest,
                      n_triplets: int, out_dir, spec: DegradationSpec,
                      inversion_mode=ConditioningMode.ATTRIBUTE_ONLY,
                      grid: TimeGrid | None = None, seed: int = 0,
                      teacher_hash: str = "", keypoints: bool = True, accessory: bool = True,
                      batch_size: int = 32, max_attempts: int = 3) -> TripletStore:
    """Generate n pseudo-triplets with donor resampling on gate failures.

    Gate: the swapped image must embed closer to the donor than to the
    original identity. Failing triplets get a fresh donor up to max_attempts;
    the last attempt is kept either way and the reject rate is reported.
    """
    grid = grid or TimeGrid()
    groups = manifest.identity_groups()
    ids = sorted(groups)
    if len(ids) < 2:
        raise InputError("triplet generation needs >= 2 identities")
    rng = np.random.default_rng([seed, 13])

    renders = {}

    def rec_render(idx):
        if idx not in renders:
            renders[idx] = manifest.record_render(idx)
        return renders[idx]

    plans = []
    for _ in range(n_triplets):
        ident = ids[rng.integers(0, len(ids))]
        peers = groups[ident]
        tgt_i = int(peers[rng.integers(0, len(peers))])
        src_i = int(peers[rng.integers(0, len(peers))])
        if len(peers) > 1:
            while src_i == tgt_i:
                src_i = int(peers[rng.integers(0, len(peers))])
        donor_choices = [i for i in ids if i != ident]
        donor_ident = donor_choices[rng.integers(0, len(donor_choices))]
        donor_i = int(groups[donor_ident][rng.integers(0, len(groups[donor_ident]))])
        plans.append({"src": src_i, "tgt": tgt_i, "donor": donor_i, "attempt": 0})

    triplets: list[PseudoTriplet | None] = [None] * n_triplets
    pending = list(range(n_triplets))
    rejected = 0
    while pending:
        chunk = pending[:batch_size]
        pending = pending[len(chunk):]
        tgt_rs = [rec_render(plans[i]["tgt"]) for i in chunk]
        donor_rs = [rec_render(plans[i]["donor"]) for i in chunk]
        donor_embs = torch.stack([
            embed_identity(encoder, r.image, r.face_mask) for r in donor_rs])
        own_embs = torch.stack([
            embed_identity(encoder, r.image, r.face_mask) for r in tgt_rs])
        swapped = swap_images_batched(teacher, encoder, tgt_rs, donor_embs, spec,
                                      inversion_mode, grid, keypoints=keypoints,
                                      accessory=accessory)
        with torch.inference_mode():
            sw_embs = encoder(torch.from_numpy(swapped.transpose(0, 3, 1, 2)).float()).clone()
        cos_donor = (sw_embs * donor_embs).sum(dim=1)
        cos_own = (sw_embs * own_embs).sum(dim=1)

        for k, i in enumerate(chunk):
            plan = plans[i]
            ok = bool(cos_donor[k] > cos_own[k])
            if not ok and plan["attempt"] + 1 < max_attempts:
                rejected += 1
                plan["attempt"] += 1
                tgt_ident = manifest.records[plan["tgt"]].spec.identity.identity_id
                donor_choices = [j for j in ids if j != tgt_ident]
                donor_ident = donor_choices[rng.integers(0, len(donor_choices))]
                plan["donor"] = int(groups[donor_ident][rng.integers(0, len(groups[donor_ident]))])
                pending.append(i)
                continue
            src_rec = manifest.records[plan["src"]]
            tgt_rec = manifest.records[plan["tgt"]]
            donor_rec = manifest.records[plan["donor"]]
            src_r = rec_render(plan["src"])
            tgt_r = tgt_rs[k]
            triplets[i] = PseudoTriplet(
                source_image=src_r.image, swapped_image=swapped[k], target_image=tgt_r.image,
                source_spec=src_rec.spec, target_spec=tgt_rec.spec,
                donor_identity_id=donor_rec.spec.identity.identity_id,
                source_face_mask=src_r.face_mask, target_face_mask=tgt_r.face_mask)

    if rejected:
        print(f"[swapflow] triplet gate resampled {rejected} donor assignments")
    store = TripletStore(root=Path(out_dir), triplets=[t for t in triplets if t is not None],
                         teacher_hash=teacher_hash,
                         inversion_mode=ConditioningMode(inversion_mode).value,
                         grid_steps=grid.steps)
    write_triplet_store(store)
    return store


def augment_with_occlusion(store: TripletStore, fraction: float, seed: int,
                           out_dir) -> TripletStore:
    """Copy the store, occluding a deterministic `fraction` of its triplets.

    The same opaque shape is composited over both the swapped and the target
    image so the student's editing supervision stays consistent through the
    occluder. round(fraction * n) records carry masks, exactly.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InputError(f"fraction must be in [0,1], got {fraction}")
    rng = np.random.default_rng([seed, _OCCLUSION_SALT])
    n = len(store.triplets)
    k = int(round(fraction * n))
    chosen = set(rng.permutation(n)[:k].tolist())
    new_triplets = []
    for i, t in enumerate(store.triplets):
        if i in chosen:
            occ_mask, color = sample_occluder(t.target_face_mask, rng)
            sw = t.swapped_image.copy()
            tg = t.target_image.copy()
            sw[occ_mask > 0] = color.astype(np.float32)
            tg[occ_mask > 0] = color.astype(np.float32)
            new_triplets.append(PseudoTriplet(
                source_image=t.source_image, swapped_image=sw, target_image=tg,
                source_spec=t.source_spec, target_spec=t.target_spec,
                donor_identity_id=t.donor_identity_id,
                source_face_mask=t.source_face_mask, target_face_mask=t.target_face_mask,
                occlusion_mask=occ_mask))
        else:
            new_triplets.append(t)
    new_store = TripletStore(root=Path(out_dir), triplets=new_triplets,
                             teacher_hash=store.teacher_hash,
                             inversion_mode=store.inversion_mode, grid_steps=store.grid_steps)
    write_triplet_store(new_store)
    return new_store


_OCCLUSION_SALT = 41


def write_triplet_store(store: TripletStore):
    root = store.root
    lines = [json.dumps({
        "type": "meta",
        "teacher_hash": store.teacher_hash,
        "inversion_mode": store.inversion_mode,
        "grid_steps": store.grid_steps,
        "count": len(store.triplets),
    }, sort_keys=True)]
    for i, t in enumerate(store.triplets):
        d = root / "triplets" / f"{i:06d}"
        d.mkdir(parents=True, exist_ok=True)
        save_image_png(d / "source.png", t.source_image)
        save_image_png(d / "swapped.png", t.swapped_image)
        save_image_png(d / "target.png", t.target_image)
        if t.occlusion_mask is not None:
            save_masks_png(d / "occlusion.png", np.zeros_like(t.occlusion_mask),
                           np.zeros_like(t.occlusion_mask), t.occlusion_mask)
        lines.append(json.dumps({
            "index": i,
            "dir": f"triplets/{i:06d}",
            "source_spec": t.source_spec.to_dict(),
            "target_spec": t.target_spec.to_dict(),
            "donor_identity_id": t.donor_identity_id,
            "occluded": t.occlusion_mask is not None,
        }, sort_keys=True))
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def load_triplet_store(root, teacher_hash: str | None = None) -> TripletStore:
    """Load a store; fails loudly when the expected teacher hash differs."""
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise InputError(f"no triplet manifest under {root}")
    lines = path.read_text().splitlines()
    meta = json.loads(lines[0])
    if teacher_hash is not None and meta["teacher_hash"] != teacher_hash:
        raise ConfigError(
            f"triplet store {root} was generated by teacher {meta['teacher_hash']}, "
            f"expected {teacher_hash}")
    triplets = []
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        d = root / obj["dir"]
        src_spec = FaceSpec.from_dict(obj["source_spec"])
        tgt_spec = FaceSpec.from_dict(obj["target_spec"])
        occ = None
        if obj["occluded"]:
            _, _, occ = load_masks_png(d / "occlusion.png")
        res = load_image_png(d / "target.png").shape[0]
        src_mask = render(src_spec, res).face_mask
        tgt_mask = render(tgt_spec, res).face_mask
        triplets.append(PseudoTriplet(
            source_image=load_image_png(d / "source.png"),
            swapped_image=load_image_png(d / "swapped.png"),
            target_image=load_image_png(d / "target.png"),
            source_spec=src_spec, target_spec=tgt_spec,
            donor_identity_id=obj["donor_identity_id"],
            source_face_mask=src_mask, target_face_mask=tgt_mask,
            occlusion_mask=occ))
    return TripletStore(root=root, triplets=triplets, teacher_hash=meta["teacher_hash"],
                        inversion_mode=meta["inversion_mode"], grid_steps=meta["grid_steps"])
