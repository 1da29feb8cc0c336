"""Identity encoder: maps a variable-size set of reference images to a
fixed number of visual feature tokens.

Recognizer features for each reference are projected to model width and
run through a small transformer together with trainable query tokens.
There is no positional encoding, so the output is invariant to reference
ordering by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, field
from typing import List

import numpy as np

from . import tensor as tc
from .tensor import Tensor, concat, gelu, layer_norm, matmul
from .model import self_attention
from .seeding import rng_for


@dataclass
class ReferenceSet:
    """An identity's reference images plus provenance flags."""

    identity: str
    images: List[np.ndarray]
    flags: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.flags:
            self.flags = ["original"] * len(self.images)
        if len(self.flags) != len(self.images):
            raise ValueError("flags/images length mismatch")
        shapes = {img.shape for img in self.images}
        if len(shapes) > 1:
            raise ValueError("reference images must share extents")


def hflip(image):
    return np.ascontiguousarray(np.asarray(image)[:, ::-1, :])


def pad_references(refs, target, rng, inference_image=None):
    """Grow a reference set to `target` by appending horizontal reflections
    of uniformly chosen members. An empty set (the single-image finetuning
    case) is seeded with the reflected inference image."""
    images = list(refs.images)
    flags = list(refs.flags)
    if not images:
        if inference_image is None:
            raise ValueError("empty reference set and no inference image")
        images.append(hflip(inference_image))
        flags.append("flip")
    if target < len(images):
        raise ValueError("target below current reference count")
    while len(images) < target:
        pick = int(rng.integers(len(images)))
        images.append(hflip(images[pick]))
        flags.append("flip")
    return ReferenceSet(refs.identity, images, flags)


@dataclass
class EncoderConfig:
    feature_dim: int = 32
    width: int = 64
    n_query: int = 4
    n_blocks: int = 2
    n_heads: int = 4

    def to_dict(self):
        return asdict(self)


class IdentityEncoder:
    def __init__(self, config: EncoderConfig, seed=0):
        self.config = config
        c = config
        rng = rng_for(seed, "id_encoder_init")
        def normal(shape, scale=0.02):
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)
        self.params = {
            "proj.W": normal((c.feature_dim, c.width)),
            "proj.b": Tensor(np.zeros(c.width), requires_grad=True),
            "query": normal((c.n_query, c.width)),
        }
        self.blocks = []
        for i in range(c.n_blocks):
            blk = {}
            for ln in ("ln1", "ln2"):
                blk[f"{ln}.g"] = self.params.setdefault(
                    f"block{i}.{ln}.g", Tensor(np.ones(c.width), requires_grad=True))
                blk[f"{ln}.b"] = self.params.setdefault(
                    f"block{i}.{ln}.b", Tensor(np.zeros(c.width), requires_grad=True))
            blk["self"] = {}
            for w in ("Wq", "Wk", "Wv", "Wo"):
                blk["self"][w] = self.params.setdefault(f"block{i}.self.{w}",
                                                        normal((c.width, c.width)))
            blk["mlp.W1"] = self.params.setdefault(f"block{i}.mlp.W1",
                                                   normal((c.width, 2 * c.width)))
            blk["mlp.b1"] = self.params.setdefault(
                f"block{i}.mlp.b1", Tensor(np.zeros(2 * c.width), requires_grad=True))
            blk["mlp.W2"] = self.params.setdefault(f"block{i}.mlp.W2",
                                                   normal((2 * c.width, c.width)))
            blk["mlp.b2"] = self.params.setdefault(
                f"block{i}.mlp.b2", Tensor(np.zeros(c.width), requires_grad=True))
            self.blocks.append(blk)

    def encode(self, features):
        """Tensor [M, D_f] -> query tokens [n_query, D]; also accepts a
        batch [B, M, D_f] -> [B, n_query, D]."""
        if features.ndim not in (2, 3) or features.shape[-2] < 1:
            raise tc.TensorError("need at least one feature row")
        c = self.config
        proj = matmul(features, self.params["proj.W"]) + self.params["proj.b"]
        if features.ndim == 2:
            query = self.params["query"]
        else:
            query = tc.broadcast_to(
                self.params["query"].reshape(1, c.n_query, c.width),
                (features.shape[0], c.n_query, c.width))
        x = concat([query, proj], axis=-2)
        for blk in self.blocks:
            h = layer_norm(x, blk["ln1.g"], blk["ln1.b"])
            x = x + self_attention(h, blk["self"], c.n_heads)
            h = layer_norm(x, blk["ln2.g"], blk["ln2.b"])
            h = gelu(matmul(h, blk["mlp.W1"]) + blk["mlp.b1"])
            x = x + (matmul(h, blk["mlp.W2"]) + blk["mlp.b2"])
        if features.ndim == 2:
            return x[: c.n_query]
        return x[:, : c.n_query, :]

    def save(self, ckpt_dir):
        os.makedirs(ckpt_dir, exist_ok=True)
        with open(os.path.join(ckpt_dir, "config.json"), "w") as fh:
            json.dump(self.config.to_dict(), fh, indent=2, sort_keys=True)
        for name, t in self.params.items():
            tc.save_tensor(os.path.join(ckpt_dir, name + ".pvat"), t)

    @classmethod
    def load(cls, ckpt_dir, seed=0):
        with open(os.path.join(ckpt_dir, "config.json")) as fh:
            config = EncoderConfig(**json.load(fh))
        enc = cls(config, seed=seed)
        for name, t in enc.params.items():
            t.data = tc.load_tensor(os.path.join(ckpt_dir, name + ".pvat")).data
        return enc


def extract_face_features(images, recognizer):
    """One normalized feature row per image; keeps the tape so gradients can
    reach the recognizer when it is unfrozen."""
    if len(images) == 0:
        raise ValueError("empty image sequence")
    embed, _ = recognizer.forward(np.stack([np.asarray(im) for im in images]))
    return embed


def encode_identity(images, recognizer, encoder):
    """Reference images -> visual feature tokens [n_query, width]."""
    return encoder.encode(extract_face_features(images, recognizer))
