"""Evaluation stack: recognizer and attribute-classifier training, identity
similarity, feature-distribution distances, prompt alignment, per-region
reports and ablation sweeps.

The feature extractor behind fid_like/kid_like is the eval-role
recognizer's embedding, so the magnitudes are not comparable to published
FID/KID numbers; the column names say so.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as tc
from .dataset import save_png
from .diffusion import InpaintCondition, build_guidance_conditions, sample_inpaint
from .recognizer import Recognizer, RecognizerConfig, cross_entropy
from .seeding import rng_for, stream_seed
from .tensor import Tensor, gelu, matmul, sigmoid
from .trainer import AdamW, FINETUNE_STEPS, finetune_identity
from .vocab import NEUTRAL_PROMPT

REGIONS = ("eye_brow", "lower_face", "whole_face", "random")
ATTRIBUTES = ("smiling", "glasses")

ACCURACY_GATE = 0.9


def _train_images_and_labels(data):
    idents = data.identities("train")
    label_of = {ident: i for i, ident in enumerate(idents)}
    train_x, train_y, held_x, held_y = [], [], [], []
    for ident in idents:
        entry = data.entry(ident)
        paths = list(entry["reference"]) + [i["image"] for i in entry["inference"]]
        for j, p in enumerate(paths):
            img = data.image(p)
            if j == 0:
                held_x.append(img)
                held_y.append(label_of[ident])
            else:
                train_x.append(img)
                train_y.append(label_of[ident])
    return (np.stack(train_x), np.array(train_y),
            np.stack(held_x), np.array(held_y), idents)


def train_recognizer(role, data, seed, max_epochs=60, batch_size=64, lr=2e-3):
    """Train one recognizer role on the training split.

    Raises if held-out render accuracy stays below the gate: that signals a
    corpus or configuration problem, not something to paper over."""
    train_x, train_y, held_x, held_y, idents = _train_images_and_labels(data)
    cfg = RecognizerConfig(role=role, n_classes=len(idents),
                           image_size=data.extent, seed=seed)
    rec = Recognizer(cfg)
    opt = AdamW([{"params": rec.params, "lr": lr, "weight_decay": 1e-4}])
    rng = rng_for(seed, f"train_recognizer_{role}")
    n = train_x.shape[0]
    accuracy = 0.0
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, logits = rec.forward(train_x[idx])
            loss = cross_entropy(logits, train_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        with tc.no_grad():
            _, logits = rec.forward(held_x)
        accuracy = float((np.argmax(logits.data, axis=-1) == held_y).mean())
        if accuracy >= ACCURACY_GATE:
            break
    if accuracy < ACCURACY_GATE:
        raise RuntimeError(
            f"recognizer {role} failed the accuracy gate: {accuracy:.3f} < {ACCURACY_GATE}")
    return rec


def identity_similarity(img_a, img_b, recognizer):
    """Cosine similarity of the two recognizer embeddings, in [-1, 1]."""
    emb = recognizer.embed(np.stack([np.asarray(img_a), np.asarray(img_b)]))
    return float(np.dot(emb[0], emb[1]))


def _sqrtm_psd(mat):
    """Symmetric PSD square root via eigendecomposition; negative
    eigenvalues from numerical noise are clamped to zero."""
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(feats_a, feats_b, shrinkage=1e-6):
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)).

    Covariances get `shrinkage`-scaled identity added when either sample is
    too small for a full-rank estimate."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature matrices must be 2-d with equal widths")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two feature rows per side")
    d = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sa = np.cov(a, rowvar=False)
    sb = np.cov(b, rowvar=False)
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        sa = sa + shrinkage * np.eye(d)
        sb = sb + shrinkage * np.eye(d)
    root_a = _sqrtm_psd(sa)
    cross = _sqrtm_psd(root_a @ sb @ root_a)
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa + sb - 2.0 * cross))


def kid_mmd(feats_a, feats_b):
    """Unbiased squared MMD with the cubic polynomial kernel
    k(x, y) = (x.y / d + 1)^3."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two feature rows per side")
    d = a.shape[1]
    kaa = (a @ a.T / d + 1.0) ** 3
    kbb = (b @ b.T / d + 1.0) ** 3
    kab = (a @ b.T / d + 1.0) ** 3
    m, n = a.shape[0], b.shape[0]
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


# -- attribute classifier ----------------------------------------------------


class AttributeClassifier:
    """Tiny MLP predicting per-attribute probabilities; stands in for the
    text-image alignment scorer."""

    def __init__(self, image_size=16, channels=3, hidden=64, seed=0):
        self.attributes = ATTRIBUTES
        self.image_size = image_size
        rng = rng_for(seed, "attribute_classifier")
        in_dim = image_size * image_size * channels
        self.params = {
            "W1": Tensor(rng.normal(0, 0.05, (in_dim, hidden)), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "W2": Tensor(rng.normal(0, 0.05, (hidden, len(ATTRIBUTES))),
                         requires_grad=True),
            "b2": Tensor(np.zeros(len(ATTRIBUTES)), requires_grad=True),
        }

    def forward(self, images):
        imgs = np.asarray(images, dtype=np.float64)
        flat = Tensor(imgs.reshape(imgs.shape[0], -1) - 0.5)
        h = gelu(matmul(flat, self.params["W1"]) + self.params["b1"])
        return sigmoid(matmul(h, self.params["W2"]) + self.params["b2"])

    def probabilities(self, image):
        with tc.no_grad():
            p = self.forward(np.asarray(image)[None])
        return {attr: float(p.data[0, i]) for i, attr in enumerate(self.attributes)}


def train_attribute_classifier(data, seed, epochs=40, batch_size=64, lr=2e-3):
    images, labels = [], []
    for ident in data.identities("train"):
        entry = data.entry(ident)
        for path, attrs in entry["attributes"].items():
            images.append(data.image(path))
            labels.append([float(attrs[a]) for a in ATTRIBUTES])
    x = np.stack(images)
    y = np.array(labels)
    clf = AttributeClassifier(image_size=data.extent, seed=seed)
    opt = AdamW([{"params": clf.params, "lr": lr, "weight_decay": 1e-4}])
    rng = rng_for(seed, "train_attribute_classifier")
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], batch_size):
            idx = order[start:start + batch_size]
            p = clf.forward(x[idx])
            target = Tensor(y[idx])
            # binary cross-entropy, clamped away from the exact endpoints
            eps = 1e-9
            loss = -(target * tc.log(p * (1 - 2 * eps) + eps)
                     + (1.0 - target) * tc.log((1.0 - p) * (1 - 2 * eps) + eps)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    return clf


def prompt_alignment(image, attribute, classifier):
    """Classifier probability that `image` shows `attribute`."""
    if attribute not in classifier.attributes:
        raise ValueError(f"unknown attribute {attribute!r}")
    return classifier.probabilities(image)[attribute]


def attribute_agreement(image, attrs, classifier):
    """Mean probability mass the classifier places on the image's true
    attribute values."""
    probs = classifier.probabilities(image)
    scores = [probs[a] if attrs[a] else 1.0 - probs[a]
              for a in classifier.attributes]
    return float(np.mean(scores))


# -- reports -----------------------------------------------------------------


@dataclass
class MetricReport:
    rows: List[Dict] = field(default_factory=list)

    COLUMNS = ("id_sim_mean", "id_sim_sd", "fid_like", "kid_like",
               "prompt_alignment")

    def add(self, region, **values):
        self.rows.append({"region": region, **values})

    def with_mean_row(self):
        cols = [c for c in self.COLUMNS if all(c in r for r in self.rows)]
        mean = {"region": "mean"}
        for c in cols:
            mean[c] = float(np.mean([r[c] for r in self.rows]))
        return MetricReport(self.rows + [mean])

    def row(self, region):
        for r in self.rows:
            if r["region"] == region:
                return r
        raise KeyError(region)

    def to_csv(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        header = ["region"] + list(self.COLUMNS)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.rows:
                w.writerow([r["region"]] + [f"{r[c]:.6f}" if c in r else ""
                                            for c in self.COLUMNS])


def mean_of_region_values(values):
    """Arithmetic mean across the four region rows (the aggregation used in
    the per-region tables)."""
    return float(np.mean(np.asarray(values, dtype=np.float64)))


@dataclass
class EvalConfig:
    regions: tuple = REGIONS
    max_identities: Optional[int] = None
    steps: int = 50
    eta: float = 0.7
    guidance_scale: float = 2.0
    task: str = "inpaint_only"
    seed: int = 0
    split: str = "test"


def inpaint_item(pipeline, item, mask, visual, config, edit_prompt=None,
                 scale=None, seed=None):
    """Inpaint one evaluation item under `mask` and return the image."""
    cond = InpaintCondition.from_image(item["image"], mask)
    task = config.task if edit_prompt is None else "controlled"
    if visual is None:
        guidance = build_guidance_conditions(
            "default", NEUTRAL_PROMPT, edit_prompt,
            scale=scale if scale is not None else config.guidance_scale)
    else:
        guidance = build_guidance_conditions(
            task, NEUTRAL_PROMPT, edit_prompt, visual=visual,
            scale=scale if scale is not None else config.guidance_scale)
    return sample_inpaint(pipeline, cond, guidance, pipeline.schedule,
                          steps=config.steps, eta=config.eta,
                          seed=seed if seed is not None else config.seed)


def evaluate_per_region(pipeline, data, eval_rec, config, out_dir=None,
                        classifier=None):
    """Inpaint every evaluation item under each region mask and aggregate
    metrics per region plus their arithmetic mean."""
    idents = data.identities(config.split)
    if config.max_identities:
        idents = idents[: config.max_identities]
    report = MetricReport()
    index = []
    for region in config.regions:
        sims, real_feats, fake_feats, aligns = [], [], [], []
        for ident in idents:
            refs = data.references(ident)
            with tc.no_grad():
                visual = pipeline.visual_features(refs).detach()
            item = data.inference_items(ident)[0]
            seed = stream_seed(config.seed, f"eval_{region}_{ident}")
            out = inpaint_item(pipeline, item, item["masks"][region], visual,
                               config, seed=seed)
            sims.append(identity_similarity(out, item["image"], eval_rec))
            real_feats.append(eval_rec.embed(item["image"][None])[0])
            fake_feats.append(eval_rec.embed(out[None])[0])
            if classifier is not None:
                aligns.append(attribute_agreement(out, item["attrs"], classifier))
            if out_dir:
                path = os.path.join(out_dir, f"{ident}_{region}.png")
                save_png(path, out)
                index.append({"image": path, "region": region, "seed": seed,
                              "guidance_scale": config.guidance_scale})
        values = {
            "id_sim_mean": float(np.mean(sims)),
            "id_sim_sd": float(np.std(sims)),
            "fid_like": frechet_distance(np.stack(real_feats), np.stack(fake_feats)),
            "kid_like": kid_mmd(np.stack(real_feats), np.stack(fake_feats)),
        }
        if classifier is not None:
            values["prompt_alignment"] = float(np.mean(aligns))
        report.add(region, **values)
    if out_dir:
        with open(os.path.join(out_dir, "index.json"), "w") as fh:
            json.dump(index, fh, indent=2)
    return report.with_mean_row()


def ablation_sweep(kind, pipeline, data, eval_rec, config, grid=None,
                   region="whole_face"):
    """Evaluate mean identity similarity along one ablation axis.

    kinds: guidance (scale grid), ref_count (reference count grid),
    finetune (off/on). Returns rows of {kind, value, id_sim_mean}."""
    if kind not in ("guidance", "ref_count", "finetune"):
        raise ValueError(f"unknown ablation kind {kind!r}")
    if grid is None:
        grid = {"guidance": [1, 2, 4, 6], "ref_count": [1, 2, 3, 4, 5],
                "finetune": [False, True]}[kind]
    idents = data.identities(config.split)
    if config.max_identities:
        idents = idents[: config.max_identities]
    rows = []
    for value in grid:
        sims = []
        for ident in idents:
            refs = data.references(ident)
            item = data.inference_items(ident)[0]
            seed = stream_seed(config.seed, f"ablate_{kind}_{value}_{ident}")
            scale = config.guidance_scale
            pipe = pipeline
            if kind == "guidance":
                scale = float(value)
            elif kind == "ref_count":
                refs = refs[: int(value)]
            elif kind == "finetune" and value:
                pipe = _finetuned_copy(pipeline, ident, refs, config)
            with tc.no_grad():
                visual = pipe.visual_features(refs).detach()
            out = inpaint_item(pipe, item, item["masks"][region], visual,
                               config, scale=scale, seed=seed)
            sims.append(identity_similarity(out, item["image"], eval_rec))
        rows.append({"kind": kind, "value": value,
                     "id_sim_mean": float(np.mean(sims))})
    return rows


def _finetuned_copy(pipeline, ident, refs, config, steps=FINETUNE_STEPS):
    import copy
    from .identity import ReferenceSet
    from .trainer import toy_config
    pipe = copy.deepcopy(pipeline)
    cfg = toy_config("finetune", seed=stream_seed(config.seed, f"ft_{ident}"))
    cfg.steps = steps
    finetune_identity(pipe, ReferenceSet(ident, list(refs)), cfg)
    return pipe


def ablation_rows_to_csv(rows, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "value", "id_sim_mean"])
        for r in rows:
            w.writerow([r["kind"], r["value"], f"{r['id_sim_mean']:.6f}"])
