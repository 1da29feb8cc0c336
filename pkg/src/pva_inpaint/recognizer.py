"""Toy face recognizer: an MLP classifier over training identities whose
normalized penultimate activations serve as identity embeddings.

Two independently seeded instances play different roles: `encoder_A`
feeds the identity encoder, `eval_B` is reserved for evaluation metrics
and must never appear in a training loss.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tc
from .tensor import Tensor, gelu, matmul, sqrt
from .seeding import rng_for

ROLES = ("encoder_A", "eval_B")


@dataclass
class RecognizerConfig:
    role: str
    n_classes: int
    image_size: int = 16
    channels: int = 3
    hidden: int = 64
    embed_dim: int = 32
    seed: int = 0

    def to_dict(self):
        return asdict(self)


class Recognizer:
    def __init__(self, config: RecognizerConfig):
        if config.role not in ROLES:
            raise ValueError(f"unknown recognizer role {config.role!r}")
        self.config = config
        c = config
        rng = rng_for(c.seed, f"recognizer_{c.role}")
        in_dim = c.image_size * c.image_size * c.channels
        def normal(shape, scale=0.05):
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)
        self.params = {
            "W1": normal((in_dim, c.hidden)),
            "b1": Tensor(np.zeros(c.hidden), requires_grad=True),
            "W2": normal((c.hidden, c.embed_dim)),
            "b2": Tensor(np.zeros(c.embed_dim), requires_grad=True),
            "head.W": normal((c.embed_dim, c.n_classes)),
            "head.b": Tensor(np.zeros(c.n_classes), requires_grad=True),
        }

    def feature_params(self):
        """The feature-extractor weights (everything below the class head)."""
        return {k: self.params[k] for k in ("W1", "b1", "W2", "b2")}

    def forward(self, images):
        """images [B, H, W, C] -> (normalized embeddings [B, D_f], logits)."""
        c = self.config
        imgs = np.asarray(images, dtype=np.float64)
        flat = Tensor(imgs.reshape(imgs.shape[0], -1) - 0.5)
        h = gelu(matmul(flat, self.params["W1"]) + self.params["b1"])
        e = matmul(h, self.params["W2"]) + self.params["b2"]
        norm = sqrt((e * e).sum(axis=-1, keepdims=True) + 1e-12)
        embed = e / norm
        logits = matmul(embed, self.params["head.W"]) + self.params["head.b"]
        return embed, logits

    def embed(self, images):
        """Embeddings as a plain array, no tape."""
        with tc.no_grad():
            e, _ = self.forward(np.asarray(images))
        return e.data

    def save(self, ckpt_dir):
        os.makedirs(ckpt_dir, exist_ok=True)
        with open(os.path.join(ckpt_dir, "config.json"), "w") as fh:
            json.dump(self.config.to_dict(), fh, indent=2, sort_keys=True)
        for name, t in self.params.items():
            tc.save_tensor(os.path.join(ckpt_dir, name + ".pvat"), t)

    @classmethod
    def load(cls, ckpt_dir):
        with open(os.path.join(ckpt_dir, "config.json")) as fh:
            config = RecognizerConfig(**json.load(fh))
        model = cls(config)
        for name, t in model.params.items():
            t.data = tc.load_tensor(os.path.join(ckpt_dir, name + ".pvat")).data
        return model


def cross_entropy(logits, labels):
    """Mean negative log-likelihood with a detached max shift for stability."""
    labels = np.asarray(labels, dtype=np.int64)
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    z = logits - shift
    lse = tc.log(tc.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = logp[(np.arange(labels.size), labels)]
    return -picked.mean()
