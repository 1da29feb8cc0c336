"""Training phases: base pretraining, two-stage visual-pathway training,
and per-identity finetuning.

All randomness is drawn from streams named after (seed, purpose), so runs
are reproducible bit-for-bit. Parameter freezing is structural: frozen
groups carry no tape and the optimizer refuses them outright.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import (RandomMaskParams, build_semantic_mask, load_manifest,
                      load_mask_png, load_png, merge_masks, sample_random_mask)
from .diffusion import assemble_inpaint_input, diffuse_to, dsm_loss
from .identity import ReferenceSet, hflip, pad_references
from .seeding import rng_for
from .tensor import Tensor, TensorError, concat
from .vocab import NEUTRAL_PROMPT, encode_prompt
from . import tensor as tc

PHASES = ("pretrain_base", "pva_stage1", "pva_stage2", "finetune")

# which parameter groups each phase updates
PHASE_GROUPS = {
    "pretrain_base": {"base"},
    "pva_stage1": {"pva_matrices", "id_encoder_transformer", "special_token"},
    "pva_stage2": {"pva_matrices", "id_encoder_transformer", "special_token",
                   "id_encoder_facenet"},
    "finetune": {"pva_matrices"},
}

PAPER_LR = 1.6e-5
PAPER_SPECIAL_LR = 1e-3
PAPER_WEIGHT_DECAY = 1e-2
PAPER_BATCH = 16
PAPER_COND_DROP = 0.10
FINETUNE_STEPS = 40


@dataclass
class TrainConfig:
    phase: str
    steps: int
    batch_size: int = 8
    lr: float = PAPER_LR
    special_lr: float = PAPER_SPECIAL_LR
    weight_decay: float = PAPER_WEIGHT_DECAY
    cond_drop: float = 0.0
    m_stratified: int = 1
    seed: int = 0
    include_text_attention: bool = False
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase != "pretrain_base" and self.cond_drop != 0.0:
            raise ValueError("condition dropping is a pretraining-only knob")
        if self.m_stratified < 1:
            raise ValueError("stratified group count must be >= 1")


def paper_config(phase):
    """Hyperparameters as published; step budgets target the full-scale run."""
    steps = {"pretrain_base": 200_000, "pva_stage1": 100_000,
             "pva_stage2": 100_000, "finetune": FINETUNE_STEPS}[phase]
    return TrainConfig(phase=phase, steps=steps, batch_size=PAPER_BATCH,
                       cond_drop=PAPER_COND_DROP if phase == "pretrain_base" else 0.0,
                       m_stratified=4 if phase == "finetune" else 1)


def toy_config(phase, seed=0):
    """Desk-scale budgets and learning rates sized for the 16-px corpus."""
    steps = {"pretrain_base": 3000, "pva_stage1": 2000,
             "pva_stage2": 2000, "finetune": FINETUNE_STEPS}[phase]
    return TrainConfig(
        phase=phase, steps=steps, batch_size=8,
        lr=2e-3 if phase != "finetune" else 1e-3,
        special_lr=1e-2,
        cond_drop=PAPER_COND_DROP if phase == "pretrain_base" else 0.0,
        m_stratified=4 if phase == "finetune" else 1,
        seed=seed)


class AdamW:
    """Adam with decoupled weight decay over named parameter groups."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        self.groups = []
        for spec in groups:
            params = spec["params"]
            for name, t in params.items():
                if not t.requires_grad:
                    raise TensorError(f"refusing frozen parameter {name!r}")
            self.groups.append({
                "params": dict(params),
                "lr": spec["lr"],
                "weight_decay": spec.get("weight_decay", 0.0),
            })
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def zero_grad(self):
        for g in self.groups:
            for t in g["params"].values():
                t.grad = None

    def step(self):
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for name, t in g["params"].items():
                if t.grad is None:
                    continue
                if not t.requires_grad:
                    raise TensorError(f"attempted write to frozen parameter {name!r}")
                m = self.m.get(name)
                if m is None:
                    m = np.zeros_like(t.data)
                    self.v[name] = np.zeros_like(t.data)
                v = self.v[name]
                m[...] = b1 * m + (1 - b1) * t.grad
                v[...] = b2 * v + (1 - b2) * t.grad ** 2
                self.m[name] = m
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                t.data = t.data - lr * (update + wd * t.data)


class DatasetView:
    """Read access to a built dataset: images, masks, captions, references."""

    def __init__(self, dataset_dir):
        self.dir = dataset_dir
        self.manifest = load_manifest(dataset_dir)
        self.extent = self.manifest["extent"]
        self._by_id = {e["id"]: e for e in self.manifest["identities"]}
        self._cache = {}

    def identities(self, split=None):
        return [e["id"] for e in self.manifest["identities"]
                if split is None or e["split"] == split]

    def entry(self, ident):
        return self._by_id[ident]

    def image(self, rel_path):
        if rel_path not in self._cache:
            self._cache[rel_path] = load_png(os.path.join(self.dir, rel_path))
        return self._cache[rel_path]

    def mask(self, rel_path):
        key = ("mask", rel_path)
        if key not in self._cache:
            self._cache[key] = load_mask_png(os.path.join(self.dir, rel_path))
        return self._cache[key]

    def references(self, ident):
        return [self.image(p) for p in self._by_id[ident]["reference"]]

    def reference_set(self, ident):
        return ReferenceSet(ident, self.references(ident))

    def inference_items(self, ident):
        e = self._by_id[ident]
        out = []
        for item in e["inference"]:
            out.append({
                "identity": ident,
                "image": self.image(item["image"]),
                "path": item["image"],
                "masks": {k: self.mask(p) for k, p in item["masks"].items()},
                "boxes": item.get("boxes", {}),
                "caption": e["attributes"][item["image"]]["caption"],
                "attrs": e["attributes"][item["image"]],
            })
        return out

    def all_inference_items(self, split):
        items = []
        for ident in self.identities(split):
            items.extend(self.inference_items(ident))
        return items


class StepLogger:
    def __init__(self, path, phase):
        self.path = path
        self.phase = phase
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "phase", "loss", "time_ms"])

    def log(self, step, loss, dt):
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([step, self.phase, f"{loss:.6f}",
                                         f"{dt * 1000:.1f}"])


def sample_reference_subset(ref_images, rng):
    """Draw n ~ U{1..5} distinct references; with probability 0.5 one entry
    is replaced by the horizontal flip of another (of itself when n = 1).

    Returns (images, info) where info records the draw for testing."""
    if len(ref_images) < 5:
        raise ValueError("need at least 5 references in training")
    n = int(rng.integers(1, 6))
    idx = rng.choice(len(ref_images), size=n, replace=False)
    images = [np.asarray(ref_images[i]) for i in idx]
    flipped = bool(rng.random() < 0.5)
    if flipped:
        if n >= 2:
            pos = rng.choice(n, size=2, replace=False)
            images[int(pos[0])] = hflip(images[int(pos[1])])
        else:
            images[0] = hflip(images[0])
    return images, {"n": n, "flipped": flipped, "indices": [int(i) for i in idx]}


def stratified_times(m, batch, rng, T):
    """[m, batch] integer steps; group i's draws lie in the i-th of m equal
    sub-intervals of [0, T]. Stratum membership is hard-asserted."""
    if m < 1:
        raise ValueError("m must be >= 1")
    out = np.empty((m, batch), dtype=np.int64)
    for i in range(m):
        u = rng.uniform((i) / m, (i + 1) / m, size=batch)
        t = np.minimum(T, np.floor(u * T).astype(np.int64) + 1)
        frac = (t - 1) / T
        assert np.all((frac >= i / m) & (frac < (i + 1) / m)), "stratum violation"
        out[i] = t
    return out


def _batch_loss(pipeline, images, masks, prompts, visuals, ts, rng):
    """Assemble a diffused, condition-augmented batch and return the
    denoising loss tensor."""
    sched = pipeline.schedule
    z_list, eps_list = [], []
    for img, mask, t in zip(images, masks, ts):
        eps = rng.standard_normal(img.shape)
        z_t = diffuse_to(img, int(t), eps, sched)
        cond_mask = mask[..., None]
        z_list.append(np.concatenate([z_t, mask[..., None], cond_mask * img], axis=-1))
        eps_list.append(eps)
    z = np.stack(z_list)
    eps = np.stack(eps_list)
    if visuals is None or isinstance(visuals, Tensor):
        vis = visuals
    elif any(v is not None for v in visuals):
        vis = concat([v.reshape(1, *v.shape) for v in visuals], axis=0)
    else:
        vis = None
    ids = np.stack(prompts)
    out = pipeline.denoiser.forward(z, ids, vis, np.asarray(ts))
    return dsm_loss(eps, out)


def pretrain_base(pipeline, data, config, ckpt_dir=None):
    """Train the base denoiser on masked-image reconstruction with text
    conditioning dropped `cond_drop` of the time."""
    if config.phase != "pretrain_base":
        raise ValueError("config phase mismatch")
    pipeline.set_trainable(PHASE_GROUPS["pretrain_base"])
    groups = pipeline.param_groups()
    opt = AdamW([{"params": groups["base"], "lr": config.lr,
                  "weight_decay": config.weight_decay}])
    rng = rng_for(config.seed, "pretrain_base")
    items = data.all_inference_items("train")
    if not items:
        raise ValueError("dataset has no training items")
    L = pipeline.denoiser.config.prompt_len
    T = pipeline.schedule.T
    logger = StepLogger(config.log_path, "pretrain_base")
    kinds = ("eye_brow", "lower_face", "whole_face", "random")
    for step in range(config.steps):
        t0 = time.time()
        picks = rng.choice(len(items), size=config.batch_size, replace=True)
        images, masks, prompts = [], [], []
        for i in picks:
            item = items[int(i)]
            images.append(item["image"])
            masks.append(item["masks"][kinds[int(rng.integers(4))]])
            prompt = None if rng.random() < config.cond_drop else item["caption"]
            prompts.append(np.array(encode_prompt(prompt, L)))
        ts = rng.integers(1, T + 1, size=config.batch_size)
        loss = _batch_loss(pipeline, images, masks, prompts, None, ts, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        logger.log(step, loss.item(), time.time() - t0)
    if ckpt_dir:
        pipeline.save(ckpt_dir)
    return pipeline


def train_pva(pipeline, data, config, ckpt_dir=None):
    """One stage of visual-pathway training over the frozen base model."""
    if config.phase not in ("pva_stage1", "pva_stage2"):
        raise ValueError("config phase mismatch")
    stage1 = config.phase == "pva_stage1"
    if stage1:
        pipeline.denoiser.init_pva_from_text()
    pipeline.set_trainable(PHASE_GROUPS[config.phase])
    groups = pipeline.param_groups()
    main_params = dict(groups["pva_matrices"])
    main_params.update(groups["id_encoder_transformer"])
    if not stage1:
        main_params.update(groups["id_encoder_facenet"])
    opt = AdamW([
        {"params": main_params, "lr": config.lr, "weight_decay": config.weight_decay},
        {"params": groups["special_token"], "lr": config.special_lr},
    ])
    rng = rng_for(config.seed, config.phase)
    idents = data.identities("train")
    L = pipeline.denoiser.config.prompt_len
    T = pipeline.schedule.T
    extent = data.extent
    logger = StepLogger(config.log_path, config.phase)
    sem_kinds = ("eye_brow", "lower_face", "whole_face")
    for step in range(config.steps):
        t0 = time.time()
        images, masks, prompts, ref_lists = [], [], [], []
        for _ in range(config.batch_size):
            ident = idents[int(rng.integers(len(idents)))]
            items = data.inference_items(ident)
            item = items[int(rng.integers(len(items)))]
            refs, _ = sample_reference_subset(data.references(ident), rng)
            ref_lists.append(refs)
            box = item["boxes"][sem_kinds[int(rng.integers(3))]]
            mask = merge_masks(sample_random_mask(extent, rng),
                               build_semantic_mask(tuple(box), extent))
            caption = NEUTRAL_PROMPT if rng.random() < 0.5 else item["caption"]
            prompts.append(np.array(encode_prompt(caption, L, append_s_star=True)))
            images.append(item["image"])
            masks.append(mask)
        ts = rng.integers(1, T + 1, size=config.batch_size)
        vis = pipeline.visual_features_batch(ref_lists)
        loss = _batch_loss(pipeline, images, masks, prompts, vis, ts, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        logger.log(step, loss.item(), time.time() - t0)
    if ckpt_dir:
        pipeline.save(ckpt_dir)
    return pipeline


def finetune_identity(pipeline, refs, config, mask_params=None):
    """40-step adaptation to one unseen identity, updating only the visual
    attention matrices (optionally also the text cross-attention ones).

    Each step holds one reference out as the inpainting target, pads the
    rest back to full length, and replicates the target over stratified
    timesteps."""
    if config.phase != "finetune":
        raise ValueError("config phase mismatch")
    if not refs.images:
        raise ValueError("empty reference set")
    pipeline.set_trainable(PHASE_GROUPS["finetune"])
    groups = pipeline.param_groups()
    params = dict(groups["pva_matrices"])
    if config.include_text_attention:
        for name in pipeline.denoiser.text_attention_param_names():
            t = pipeline.denoiser.params[name]
            t.requires_grad = True
            params["denoiser." + name] = t
    opt = AdamW([{"params": params, "lr": config.lr,
                  "weight_decay": config.weight_decay}])
    rng = rng_for(config.seed, f"finetune_{refs.identity}")
    n_ref = len(refs.images)
    L = pipeline.denoiser.config.prompt_len
    T = pipeline.schedule.T
    m = config.m_stratified
    extent = refs.images[0].shape[0]
    logger = StepLogger(config.log_path, "finetune")
    prompt = np.array(encode_prompt(NEUTRAL_PROMPT, L, append_s_star=True))
    for step in range(config.steps):
        t0 = time.time()
        hold = int(rng.integers(n_ref))
        target = refs.images[hold]
        rest = ReferenceSet(refs.identity,
                            [im for i, im in enumerate(refs.images) if i != hold])
        padded = pad_references(rest, n_ref, rng, inference_image=target)
        with tc.no_grad():
            visual = pipeline.visual_features(padded.images)
        visual = Tensor(visual.data)
        ts = stratified_times(m, 1, rng, T)[:, 0]
        mask = sample_random_mask(extent, rng, mask_params)
        loss = _batch_loss(pipeline, [target] * m, [mask] * m, [prompt] * m,
                           [visual] * m, ts, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        logger.log(step, loss.item(), time.time() - t0)
    return pipeline
