"""Synthetic-identity corpus builder.

Renders procedural face glyphs (an identity is a stable parameter vector,
a render adds expression/pose/accessory variation), then runs the dataset
construction pipeline: dedup, semantic + random masks, reference/inference
reorganization, and identity splits. Everything is seeded and rebuilds
byte-identically.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

from .seeding import rng_for

REGION_KINDS = ("eye_brow", "lower_face", "whole_face", "random")


@dataclass
class IdentitySpec:
    id: str
    face_hue: float
    eye_spacing: float
    eye_size: int
    mouth_curve: float
    nose_index: int
    band_hue: float

    @classmethod
    def sample(cls, ident, rng):
        return cls(
            id=ident,
            face_hue=float(rng.uniform(0.0, 1.0)),
            eye_spacing=float(rng.uniform(0.15, 0.26)),
            eye_size=int(rng.integers(1, 3)),
            mouth_curve=float(rng.uniform(-0.5, 0.5)),
            nose_index=int(rng.integers(0, 3)),
            band_hue=float(rng.uniform(0.0, 1.0)),
        )


@dataclass
class RenderParams:
    expression: float
    shear: float
    glasses: bool
    background: float

    @classmethod
    def sample(cls, rng):
        return cls(
            expression=float(rng.uniform(-0.5, 0.5)),
            shear=float(rng.uniform(-0.10, 0.10)),
            glasses=bool(rng.random() < 0.5),
            background=float(rng.uniform(0.08, 0.35)),
        )


@dataclass
class RegionBoxes:
    """Half-open (row0, col0, row1, col1) boxes for the three semantic regions."""

    eye_brow: Tuple[int, int, int, int]
    lower_face: Tuple[int, int, int, int]
    whole_face: Tuple[int, int, int, int]

    def as_dict(self):
        return {"eye_brow": list(self.eye_brow),
                "lower_face": list(self.lower_face),
                "whole_face": list(self.whole_face)}


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _union_box(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def _clamp_box(box, extent):
    r0, c0, r1, c1 = box
    return (max(0, r0), max(0, c0), min(extent, r1), min(extent, c1))


def render_identity_image(spec, params, extent=16):
    """Deterministic procedural face; returns (image [S,S,3] in [0,1], boxes)."""
    S = extent
    if S < 8:
        raise ValueError("extent must be at least 8 px")
    img = np.full((S, S, 3), params.background, dtype=np.float64)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    cy, cx = 0.55 * S, 0.5 * S
    rx, ry = 0.34 * S, 0.42 * S
    xs = xx + params.shear * (yy - cy)

    head = ((xs - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[head] = _hsv(spec.face_hue, 0.55, 0.85)

    band = head & (yy < cy - 0.24 * S)
    img[band] = _hsv(spec.band_hue, 0.85, 0.7)

    ey = int(round(cy - 0.10 * S))
    sp = spec.eye_spacing * S
    re = max(1, int(round(spec.eye_size * S / 16.0)))
    eshift = params.shear * (ey - cy)
    exl = int(round(cx - sp - eshift))
    exr = int(round(cx + sp - eshift))
    eye_color = np.array([0.05, 0.05, 0.12])
    for ex in (exl, exr):
        rr = (yy - ey) ** 2 + (xx - ex) ** 2 <= re ** 2
        img[rr] = eye_color

    if params.glasses:
        gc = np.array([0.15, 0.15, 0.18])
        for ex in (exl, exr):
            r0, c0 = ey - re - 1, ex - re - 1
            r1, c1 = ey + re + 2, ex + re + 2
            frame = ((yy >= r0) & (yy < r1) & (xx >= c0) & (xx < c1)
                     & ~((yy > r0) & (yy < r1 - 1) & (xx > c0) & (xx < c1 - 1)))
            img[frame] = gc
        bridge = (yy == ey) & (xx > exl) & (xx < exr)
        img[bridge] = gc

    ny = int(round(cy + 0.05 * S))
    nx = int(round(cx - params.shear * (ny - cy) * 0))
    nose_color = np.array([0.45, 0.25, 0.15])
    if spec.nose_index == 0:
        img[ny, nx] = nose_color
    elif spec.nose_index == 1:
        img[max(0, ny - 1): ny + 1, nx] = nose_color
    else:
        img[ny, max(0, nx - 1): nx + 2] = nose_color

    my = cy + 0.22 * S
    half = 0.18 * S
    curve = spec.mouth_curve + params.expression
    mouth_color = np.array([0.55, 0.1, 0.12])
    mouth_rows = []
    for col in range(int(math.floor(cx - half)), int(math.ceil(cx + half)) + 1):
        rel = (col - cx) / half
        if abs(rel) > 1.0:
            continue
        row = int(round(my + curve * 0.12 * S * (1.0 - 2.0 * rel * rel)))
        if 0 <= row < S and 0 <= col < S:
            img[row, col] = mouth_color
            mouth_rows.append(row)

    eye_box = (ey - re - 2, exl - re - 2, ey + re + 3, exr + re + 3)
    low0 = min(ny - 1, min(mouth_rows) - 1) if mouth_rows else ny - 1
    low1 = (max(mouth_rows) + 2) if mouth_rows else ny + 2
    lower_box = (low0, int(math.floor(cx - half)) - 1, low1, int(math.ceil(cx + half)) + 2)
    pad = abs(params.shear) * ry
    whole_box = (int(math.floor(cy - ry)), int(math.floor(cx - rx - pad)),
                 int(math.ceil(cy + ry)) + 1, int(math.ceil(cx + rx + pad)) + 1)
    whole_box = _union_box(whole_box, _union_box(eye_box, lower_box))
    boxes = RegionBoxes(
        eye_brow=_clamp_box(eye_box, S),
        lower_face=_clamp_box(lower_box, S),
        whole_face=_clamp_box(whole_box, S),
    )
    return np.clip(img, 0.0, 1.0), boxes


def expression_word(spec, params):
    curve = spec.mouth_curve + params.expression
    if curve > 0.12:
        return "smiling"
    if curve < -0.12:
        return "frowning"
    return "neutral"


def caption_for(spec, params):
    return " ".join(["person", expression_word(spec, params),
                     "glasses" if params.glasses else "plain"])


# -- masks -------------------------------------------------------------------


def build_semantic_mask(box, extent, dilation=0.20):
    """Binary mask (1 = known) occluding the box dilated by `dilation` in
    each dimension, symmetric about its center, rounded outward, clamped."""
    r0, c0, r1, c1 = box
    h, w = r1 - r0, c1 - c0
    if h <= 0 or w <= 0:
        raise ValueError("degenerate box")
    nh = math.ceil(h * (1.0 + dilation))
    nw = math.ceil(w * (1.0 + dilation))
    top = (nh - h) // 2
    left = (nw - w) // 2
    rr0, cc0 = r0 - top, c0 - left
    rr1, cc1 = rr0 + nh, cc0 + nw
    rr0, cc0 = max(0, rr0), max(0, cc0)
    rr1, cc1 = min(extent, rr1), min(extent, cc1)
    mask = np.ones((extent, extent), dtype=np.float64)
    mask[rr0:rr1, cc0:cc1] = 0.0
    return mask


def dilated_extents(box, dilation=0.20):
    """Pre-clamp extents of the dilated box: (ceil(h*(1+d)), ceil(w*(1+d)))."""
    r0, c0, r1, c1 = box
    return (math.ceil((r1 - r0) * (1.0 + dilation)),
            math.ceil((c1 - c0) * (1.0 + dilation)))


@dataclass
class RandomMaskParams:
    max_strokes: int = 4
    min_width: int = 1
    max_width: int = 3
    max_vertices: int = 5
    min_fraction: float = 0.05
    max_fraction: float = 0.5
    max_retries: int = 100


def sample_random_mask(extent, rng, params=None):
    """Thick polyline brush strokes; resampled until the occluded fraction
    lands in [min_fraction, max_fraction]."""
    p = params or RandomMaskParams()
    S = extent
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    for _ in range(p.max_retries):
        occ = np.zeros((S, S), dtype=bool)
        for _ in range(int(rng.integers(1, p.max_strokes + 1))):
            width = float(rng.integers(p.min_width, p.max_width + 1))
            y = float(rng.uniform(0, S))
            x = float(rng.uniform(0, S))
            angle = float(rng.uniform(0, 2 * math.pi))
            for _ in range(int(rng.integers(2, p.max_vertices + 1))):
                length = float(rng.uniform(S / 6.0, S / 2.5))
                ny_, nx_ = y + length * math.sin(angle), x + length * math.cos(angle)
                steps = max(2, int(length * 2))
                for s in range(steps + 1):
                    py = y + (ny_ - y) * s / steps
                    px = x + (nx_ - x) * s / steps
                    occ |= (yy - py) ** 2 + (xx - px) ** 2 <= (width / 2.0 + 0.5) ** 2
                y, x = ny_, nx_
                angle += float(rng.uniform(-1.2, 1.2))
        frac = occ.mean()
        if p.min_fraction <= frac <= p.max_fraction:
            return (~occ).astype(np.float64)
    raise RuntimeError("random mask retry budget exhausted")


def merge_masks(a, b):
    """Union of occlusion: a pixel is known only if known in both."""
    return a * b


class MaskPool:
    """Pre-generated random masks sampled by index, mirroring a fixed pool."""

    def __init__(self, extent, size, seed, params=None):
        rng = rng_for(seed, "mask_pool")
        self.masks = [sample_random_mask(extent, rng, params) for _ in range(size)]

    def draw(self, rng):
        return self.masks[int(rng.integers(len(self.masks)))]


# -- corpus pipeline ---------------------------------------------------------


def canonical_bytes(image_u8):
    """Byte key invariant to horizontal reflection."""
    a = np.ascontiguousarray(image_u8).tobytes()
    b = np.ascontiguousarray(image_u8[:, ::-1]).tobytes()
    return min(a, b)


def dedup_scan(images: Dict[str, np.ndarray]):
    """Group images identical up to horizontal reflection; returns groups of
    keys with size >= 2 (sorted for determinism)."""
    buckets: Dict[bytes, List[str]] = {}
    for key in sorted(images):
        buckets.setdefault(canonical_bytes(images[key]), []).append(key)
    return [sorted(v) for _, v in sorted(buckets.items()) if len(v) >= 2]


def reorganize_by_reference_count(corpus: Dict[str, List[str]], k, rng):
    """Drop identities with <= k images; pick k references uniformly for the
    rest, the remainder becoming inference images."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = {}
    for ident in sorted(corpus):
        items = sorted(corpus[ident])
        if len(items) <= k:
            continue
        ref_idx = set(rng.choice(len(items), size=k, replace=False).tolist())
        refs = [items[i] for i in sorted(ref_idx)]
        infer = [items[i] for i in range(len(items)) if i not in ref_idx]
        out[ident] = (refs, infer)
    return out


def reference_statistics(partition, k):
    """Rows shaped like the dataset statistics table."""
    n_ids = len(partition)
    n_inf = sum(len(v[1]) for v in partition.values())
    n_total = n_inf + sum(len(v[0]) for v in partition.values())
    return [{"ref_count": k, "n_inference": n_inf, "n_total": n_total, "n_ids": n_ids}]


def split_identities(ids, rng):
    """Seeded shuffle then 0.6 / 0.1 / rest split by identity."""
    ids = list(ids)
    if len(ids) < 10:
        raise ValueError("need at least 10 identities to split")
    order = list(rng.permutation(len(ids)))
    n = len(ids)
    n_train = round(0.6 * n)
    n_val = round(0.1 * n)
    assign = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            split = "train"
        elif pos < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assign[ids[idx]] = split
    return assign


# -- builder -----------------------------------------------------------------


@dataclass
class BuilderConfig:
    n_identities: int = 200
    n_renders: int = 8
    extent: int = 16
    k: int = 5
    seed: int = 0
    mask_pool_size: int = 2000
    mask: RandomMaskParams = field(default_factory=RandomMaskParams)

    def to_dict(self):
        return asdict(self)


def save_png(path, image01):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    arr = np.clip(np.round(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_mask_png(path, mask):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    arr = (np.asarray(mask) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_png(path):
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 255.0


def load_mask_png(path):
    arr = np.asarray(Image.open(path))
    if not np.all((arr == 0) | (arr == 255)):
        raise ValueError(f"{path}: mask not binary")
    return (arr == 255).astype(np.float64)


def build_dataset(config: BuilderConfig, out_dir):
    """Run the full pipeline; returns the manifest dict (also written to
    manifest.json, with statistics.csv beside it)."""
    S = config.extent
    id_rng = rng_for(config.seed, "identities")
    render_rng = rng_for(config.seed, "renders")
    mask_rng = rng_for(config.seed, "region_masks")
    reorg_rng = rng_for(config.seed, "reorganize")
    split_rng = rng_for(config.seed, "split")

    specs = [IdentitySpec.sample(f"id{i:04d}", id_rng)
             for i in range(config.n_identities)]
    images = {}
    boxes = {}
    meta = {}
    corpus: Dict[str, List[str]] = {}
    for spec in specs:
        for r in range(config.n_renders):
            params = RenderParams.sample(render_rng)
            img, rb = render_identity_image(spec, params, S)
            key = f"images/{spec.id}/{spec.id}_r{r:02d}.png"
            u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            images[key] = u8
            boxes[key] = rb
            meta[key] = {
                "caption": caption_for(spec, params),
                "smiling": expression_word(spec, params) == "smiling",
                "glasses": params.glasses,
            }
            corpus.setdefault(spec.id, []).append(key)

    # drop duplicates (keep the first member of each group)
    for group in dedup_scan(images):
        for key in group[1:]:
            ident = key.split("/")[1]
            corpus[ident].remove(key)
            del images[key]

    partition = reorganize_by_reference_count(corpus, config.k, reorg_rng)
    assign = split_identities(sorted(partition), split_rng)

    pool = MaskPool(S, config.mask_pool_size, config.seed, config.mask)
    manifest = {"seed": config.seed, "k": config.k, "extent": S, "identities": []}
    for ident in sorted(partition):
        refs, infer = partition[ident]
        entry = {"id": ident, "split": assign[ident], "reference": refs,
                 "inference": [], "attributes": {}}
        for key in refs + infer:
            entry["attributes"][key] = meta[key]
        for key in infer:
            stem = os.path.splitext(os.path.basename(key))[0]
            rb = boxes[key]
            masks = {}
            for kind in ("eye_brow", "lower_face", "whole_face"):
                masks[kind] = build_semantic_mask(getattr(rb, kind), S)
            sem_kind = ("eye_brow", "lower_face", "whole_face")[int(mask_rng.integers(3))]
            masks["random"] = merge_masks(pool.draw(mask_rng),
                                          build_semantic_mask(getattr(rb, sem_kind), S))
            mask_paths = {}
            for kind, m in masks.items():
                mpath = f"masks/{ident}/{stem}_{kind}.png"
                save_mask_png(os.path.join(out_dir, mpath), m)
                mask_paths[kind] = mpath
            entry["inference"].append({"image": key, "masks": mask_paths,
                                       "boxes": rb.as_dict()})
        manifest["identities"].append(entry)

    for key, u8 in images.items():
        used = any(key in e["reference"] or key in [i["image"] for i in e["inference"]]
                   for e in manifest["identities"])
        if used:
            path = os.path.join(out_dir, key)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            Image.fromarray(u8).save(path)

    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    rows = reference_statistics(partition, config.k)
    with open(os.path.join(out_dir, "statistics.csv"), "w") as fh:
        fh.write("ref_count,n_inference,n_total,n_ids\n")
        for row in rows:
            fh.write(f"{row['ref_count']},{row['n_inference']},"
                     f"{row['n_total']},{row['n_ids']}\n")
    return manifest


def load_manifest(dataset_dir):
    with open(os.path.join(dataset_dir, "manifest.json")) as fh:
        return json.load(fh)
