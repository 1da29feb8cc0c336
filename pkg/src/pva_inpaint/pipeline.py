"""Bundles the denoiser, identity encoder, feature extractor and noise
schedule into one object with named parameter groups and a checkpoint
directory layout."""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as tc
from .diffusion import make_linear_schedule
from .identity import EncoderConfig, IdentityEncoder, encode_identity
from .model import Denoiser, DenoiserConfig
from .recognizer import Recognizer

GROUPS = ("base", "pva_matrices", "special_token",
          "id_encoder_transformer", "id_encoder_facenet")


class PVAPipeline:
    def __init__(self, denoiser, id_encoder, facenet, schedule=None):
        if facenet.config.role != "encoder_A":
            raise ValueError("the pipeline's feature extractor must be the "
                             "encoder-role recognizer, never the evaluation one")
        if id_encoder.config.width != denoiser.config.width:
            raise ValueError("encoder/denoiser width mismatch")
        self.denoiser = denoiser
        self.id_encoder = id_encoder
        self.facenet = facenet
        self.schedule = schedule if schedule is not None else make_linear_schedule()

    @classmethod
    def fresh(cls, denoiser_config=None, encoder_config=None, facenet=None, seed=0):
        dcfg = denoiser_config or DenoiserConfig()
        ecfg = encoder_config or EncoderConfig(width=dcfg.width, n_query=dcfg.n_query)
        if facenet is None:
            raise ValueError("a trained encoder_A recognizer is required")
        denoiser = Denoiser(dcfg, seed=seed)
        encoder = IdentityEncoder(ecfg, seed=seed)
        return cls(denoiser, encoder, facenet)

    # -- parameter groups ----------------------------------------------------

    def param_groups(self):
        groups = {g: {} for g in GROUPS}
        for g in ("base", "pva_matrices", "special_token"):
            for name in self.denoiser.groups[g]:
                groups[g]["denoiser." + name] = self.denoiser.params[name]
        for name, t in self.id_encoder.params.items():
            groups["id_encoder_transformer"]["id_encoder." + name] = t
        for name, t in self.facenet.feature_params().items():
            groups["id_encoder_facenet"]["facenet." + name] = t
        return groups

    def set_trainable(self, trainable_groups):
        """Enable gradients only for the named groups; frozen parameters
        carry no tape at all."""
        unknown = set(trainable_groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        for g, params in self.param_groups().items():
            flag = g in trainable_groups
            for t in params.values():
                t.requires_grad = flag
                t.grad = None
        # the recognizer's class head never trains inside the pipeline
        self.facenet.params["head.W"].requires_grad = False
        self.facenet.params["head.b"].requires_grad = False

    def snapshot(self, group):
        return {name: t.data.copy() for name, t in self.param_groups()[group].items()}

    # -- conditioning --------------------------------------------------------

    def visual_features(self, ref_images):
        """Reference images -> Tensor [n_query, width] for PVA conditioning."""
        return encode_identity(ref_images, self.facenet, self.id_encoder)

    def visual_features_batch(self, ref_lists):
        """Per-item visual features for a batch of reference lists, encoded
        in groups of equal reference count; returns Tensor [B, n_query, D]."""
        from .identity import extract_face_features
        from .tensor import concat
        counts = [len(r) for r in ref_lists]
        flat = [img for refs in ref_lists for img in refs]
        embed = extract_face_features(flat, self.facenet)
        nq, d = self.id_encoder.config.n_query, self.id_encoder.config.width
        starts = np.cumsum([0] + counts[:-1])
        by_count = {}
        for i, (m, s) in enumerate(zip(counts, starts)):
            by_count.setdefault(m, []).append((i, int(s)))
        slots = [None] * len(ref_lists)
        for m, members in by_count.items():
            feats = concat([embed[s: s + m].reshape(1, m, embed.shape[-1])
                            for _, s in members], axis=0)
            enc = self.id_encoder.encode(feats)
            for j, (i, _) in enumerate(members):
                slots[i] = enc[j].reshape(1, nq, d)
        return concat(slots, axis=0)

    def predict_noise(self, z_tilde, prompt, visual, t):
        return self.denoiser.predict_noise(z_tilde, prompt, visual, t)

    # -- persistence ---------------------------------------------------------

    def save(self, ckpt_dir):
        os.makedirs(ckpt_dir, exist_ok=True)
        self.denoiser.save(os.path.join(ckpt_dir, "denoiser"))
        self.id_encoder.save(os.path.join(ckpt_dir, "id_encoder"))
        self.facenet.save(os.path.join(ckpt_dir, "facenet"))
        with open(os.path.join(ckpt_dir, "schedule.json"), "w") as fh:
            json.dump({"betas": self.schedule.betas.tolist()}, fh)

    @classmethod
    def load(cls, ckpt_dir):
        from .diffusion import NoiseSchedule
        denoiser = Denoiser.load(os.path.join(ckpt_dir, "denoiser"))
        encoder = IdentityEncoder.load(os.path.join(ckpt_dir, "id_encoder"))
        facenet = Recognizer.load(os.path.join(ckpt_dir, "facenet"))
        with open(os.path.join(ckpt_dir, "schedule.json")) as fh:
            sched = NoiseSchedule(np.array(json.load(fh)["betas"]))
        return cls(denoiser, encoder, facenet, sched)
