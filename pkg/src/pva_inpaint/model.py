"""The denoising network: an attention-only transformer over patch tokens.

Each block runs self-attention, then a conditioning attention that is
either plain cross-attention on text features or the parallel-visual
variant when identity features are present, then an MLP. The visual
pathway has its own query/key/value matrices; with no visual features the
block executes the plain cross-attention path, so a model whose visual
matrices were never trained is bit-identical to the base model.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tc
from .tensor import Tensor, concat, embedding, layer_norm, matmul, softmax_lastdim, gelu
from .seeding import rng_for
from .vocab import DEFAULT_PROMPT_LEN, PAD_ID, S_STAR_ID, WORDS, encode_prompt


def _split_heads(x, n_heads):
    """[..., N, D] -> [..., n_heads, N, D/n_heads]"""
    *lead, n, d = x.shape
    return x.reshape(*lead, n, n_heads, d // n_heads).swapaxes(-2, -3)


def _merge_heads(x):
    """[..., n_heads, N, Dh] -> [..., N, D]"""
    x = x.swapaxes(-2, -3)
    *lead, n, n_heads, dh = x.shape
    return x.reshape(*lead, n, n_heads * dh)


class PVABlock:
    """One conditioning attention unit: text matrices {Q, K, V} plus
    parallel visual matrices {Qp, Kp, Vp} and a shared output projection."""

    def __init__(self, width, n_heads, rng=None, init_scale=0.02):
        if width % n_heads != 0:
            raise ValueError("width must be divisible by n_heads")
        self.width = width
        self.n_heads = n_heads
        if rng is None:
            rng = np.random.default_rng(0)
        def p(shape):
            return Tensor(rng.normal(0.0, init_scale, shape), requires_grad=True)
        self.Q, self.K, self.V = p((width, width)), p((width, width)), p((width, width))
        self.Qp, self.Kp, self.Vp = p((width, width)), p((width, width)), p((width, width))
        self.Wo = p((width, width))

    def init_from_text(self):
        """Copy the text matrices into the visual ones, bit-exactly."""
        self.Qp.data = self.Q.data.copy()
        self.Kp.data = self.K.data.copy()
        self.Vp.data = self.V.data.copy()
        return self

    def text_params(self):
        return {"Q": self.Q, "K": self.K, "V": self.V, "Wo": self.Wo}

    def visual_params(self):
        return {"Qp": self.Qp, "Kp": self.Kp, "Vp": self.Vp}


def cross_attention(F, G_T, block):
    """Multi-head cross-attention of spatial tokens F over text tokens G_T."""
    if F.shape[-1] != block.width or G_T.shape[-1] != block.width:
        raise tc.TensorError("feature width does not match block width")
    nh = block.n_heads
    scale = 1.0 / math.sqrt(block.width // nh)
    q = _split_heads(matmul(F, block.Q), nh)
    k = _split_heads(matmul(G_T, block.K), nh)
    v = _split_heads(matmul(G_T, block.V), nh)
    mix = softmax_lastdim(matmul(q, k.swapaxes(-1, -2)) * scale)
    return matmul(_merge_heads(matmul(mix, v)), block.Wo)


def pva_attention(F, G_T, G_V, block):
    """Conditioning attention with a parallel visual pathway.

    Text and visual scores are computed with separate matrices and mixed
    by a single softmax over the concatenated score rows. With no visual
    features this is exactly the plain cross-attention code path.
    """
    if G_V is None or G_V.shape[-2] == 0:
        return cross_attention(F, G_T, block)
    if G_V.shape[-1] != block.width:
        raise tc.TensorError("visual feature width does not match block width")
    nh = block.n_heads
    scale = 1.0 / math.sqrt(block.width // nh)
    q_t = _split_heads(matmul(F, block.Q), nh)
    k_t = _split_heads(matmul(G_T, block.K), nh)
    v_t = _split_heads(matmul(G_T, block.V), nh)
    q_v = _split_heads(matmul(F, block.Qp), nh)
    k_v = _split_heads(matmul(G_V, block.Kp), nh)
    v_v = _split_heads(matmul(G_V, block.Vp), nh)
    s_t = matmul(q_t, k_t.swapaxes(-1, -2)) * scale
    s_v = matmul(q_v, k_v.swapaxes(-1, -2)) * scale
    mix = softmax_lastdim(concat([s_t, s_v], axis=-1))
    values = concat([v_t, v_v], axis=-2)
    return matmul(_merge_heads(matmul(mix, values)), block.Wo)


def self_attention(F, params, n_heads):
    nh = n_heads
    scale = 1.0 / math.sqrt(F.shape[-1] // nh)
    q = _split_heads(matmul(F, params["Wq"]), nh)
    k = _split_heads(matmul(F, params["Wk"]), nh)
    v = _split_heads(matmul(F, params["Wv"]), nh)
    mix = softmax_lastdim(matmul(q, k.swapaxes(-1, -2)) * scale)
    return matmul(_merge_heads(matmul(mix, v)), params["Wo"])


@dataclass
class DenoiserConfig:
    image_size: int = 16
    patch: int = 2
    width: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    prompt_len: int = DEFAULT_PROMPT_LEN
    n_query: int = 4
    vocab_size: int = len(WORDS)
    channels: int = 3
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.width % self.n_heads != 0:
            raise ValueError("width must be divisible by n_heads")
        if self.image_size % self.patch != 0:
            raise ValueError("image_size must be divisible by patch")

    @property
    def in_channels(self):
        return 2 * self.channels + 1

    @property
    def n_tokens(self):
        return (self.image_size // self.patch) ** 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Denoiser:
    """Patch transformer predicting the noise in a diffused, condition-
    augmented image.

    Parameters are held in named groups: `base` (everything the pretraining
    phase owns), `pva_matrices` (the parallel visual matrices), and
    `special_token` (the shared identity token embedding).
    """

    def __init__(self, config: DenoiserConfig, seed=0):
        self.config = config
        self.params = {}
        self.groups = {"base": [], "pva_matrices": [], "special_token": []}
        c = config
        rng = rng_for(seed, "denoiser_init")
        def add(name, tensor, group):
            self.params[name] = tensor
            self.groups[group].append(name)
            return tensor
        def normal(shape, scale=0.02):
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)
        patch_dim = c.patch * c.patch * c.in_channels
        add("patch_embed.W", normal((patch_dim, c.width)), "base")
        add("patch_embed.b", Tensor(np.zeros(c.width), requires_grad=True), "base")
        add("pos_embed", normal((c.n_tokens, c.width)), "base")
        add("text_embed", normal((c.vocab_size, c.width)), "base")
        add("s_star", normal((c.width,)), "special_token")
        self.blocks = []
        for i in range(c.n_blocks):
            blk = {}
            for ln in ("ln1", "ln2", "ln3"):
                blk[f"{ln}.g"] = add(f"block{i}.{ln}.g",
                                     Tensor(np.ones(c.width), requires_grad=True), "base")
                blk[f"{ln}.b"] = add(f"block{i}.{ln}.b",
                                     Tensor(np.zeros(c.width), requires_grad=True), "base")
            blk["self"] = {}
            for w in ("Wq", "Wk", "Wv", "Wo"):
                blk["self"][w] = add(f"block{i}.self.{w}", normal((c.width, c.width)), "base")
            pva = PVABlock(c.width, c.n_heads, rng)
            for name, t in pva.text_params().items():
                add(f"block{i}.cond.{name}", t, "base")
            for name, t in pva.visual_params().items():
                add(f"block{i}.cond.{name}", t, "pva_matrices")
            blk["cond"] = pva
            hidden = c.width * c.mlp_ratio
            blk["mlp.W1"] = add(f"block{i}.mlp.W1", normal((c.width, hidden)), "base")
            blk["mlp.b1"] = add(f"block{i}.mlp.b1",
                                Tensor(np.zeros(hidden), requires_grad=True), "base")
            blk["mlp.W2"] = add(f"block{i}.mlp.W2", normal((hidden, c.width)), "base")
            blk["mlp.b2"] = add(f"block{i}.mlp.b2",
                                Tensor(np.zeros(c.width), requires_grad=True), "base")
            self.blocks.append(blk)
        add("ln_f.g", Tensor(np.ones(c.width), requires_grad=True), "base")
        add("ln_f.b", Tensor(np.zeros(c.width), requires_grad=True), "base")
        out_dim = c.patch * c.patch * c.channels
        add("out.W", normal((c.width, out_dim)), "base")
        add("out.b", Tensor(np.zeros(out_dim), requires_grad=True), "base")

    # -- conditioning --------------------------------------------------------

    def init_pva_from_text(self):
        for blk in self.blocks:
            blk["cond"].init_from_text()
        return self

    def text_attention_param_names(self):
        """The text-pathway matrices of every conditioning block (the wider
        finetuning variant unfreezes these alongside the visual matrices)."""
        names = []
        for i in range(self.config.n_blocks):
            names += [f"block{i}.cond.{w}" for w in ("Q", "K", "V", "Wo")]
        return names

    def embed_prompt(self, ids):
        """[B, L] token ids -> [B, L, D] features; the shared identity token
        resolves to its own parameter, not the embedding table."""
        ids = np.asarray(ids, dtype=np.int64)
        emb = embedding(self.params["text_embed"], ids)
        star = (ids == S_STAR_ID)
        if star.any():
            m = Tensor(star[..., None].astype(np.float64))
            s = self.params["s_star"].reshape(1, 1, self.config.width)
            emb = emb * (1.0 - m) + s * m
        return emb

    # -- forward -------------------------------------------------------------

    def _patchify(self, z):
        c = self.config
        B = z.shape[0]
        g = c.image_size // c.patch
        z = z.reshape(B, g, c.patch, g, c.patch, c.in_channels)
        z = z.transpose(0, 1, 3, 2, 4, 5)
        return z.reshape(B, c.n_tokens, c.patch * c.patch * c.in_channels)

    def _unpatchify(self, x):
        c = self.config
        B = x.shape[0]
        g = c.image_size // c.patch
        x = x.reshape(B, g, g, c.patch, c.patch, c.channels)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, c.image_size, c.image_size, c.channels)

    def forward(self, z, prompt_ids, visual, ts):
        """Predict noise for a batch.

        z: [B, H, W, 2C+1] array; prompt_ids: [B, L] int array;
        visual: Tensor [B, n_query, D] or None; ts: [B] int array.
        Returns a Tensor [B, H, W, C].
        """
        c = self.config
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 4 or z.shape[1:] != (c.image_size, c.image_size, c.in_channels):
            raise tc.TensorError(f"bad denoiser input shape {z.shape}")
        B = z.shape[0]
        x = matmul(Tensor(self._patchify(z)), self.params["patch_embed.W"])
        x = x + self.params["patch_embed.b"]
        x = x + self.params["pos_embed"]
        te = np.stack([tc.sinusoidal_encoding(int(t), c.width).data for t in ts])
        x = x + Tensor(te[:, None, :])
        g_t = self.embed_prompt(prompt_ids)
        for blk in self.blocks:
            h = layer_norm(x, blk["ln1.g"], blk["ln1.b"])
            x = x + self_attention(h, blk["self"], c.n_heads)
            h = layer_norm(x, blk["ln2.g"], blk["ln2.b"])
            x = x + pva_attention(h, g_t, visual, blk["cond"])
            h = layer_norm(x, blk["ln3.g"], blk["ln3.b"])
            h = gelu(matmul(h, blk["mlp.W1"]) + blk["mlp.b1"])
            x = x + (matmul(h, blk["mlp.W2"]) + blk["mlp.b2"])
        x = layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        x = matmul(x, self.params["out.W"]) + self.params["out.b"]
        return self._unpatchify(x)

    def predict_noise(self, z_tilde, prompt, visual, t):
        """Single-image convenience wrapper used by the sampler; no tape."""
        ids = np.array([encode_prompt(prompt, self.config.prompt_len,
                                      append_s_star=visual is not None)])
        if visual is not None and visual.ndim == 2:
            visual = visual.reshape(1, *visual.shape)
        with tc.no_grad():
            out = self.forward(z_tilde[None], ids, visual, np.array([t]))
        return out.data[0]

    # -- persistence ---------------------------------------------------------

    def group_of(self, name):
        for g, names in self.groups.items():
            if name in names:
                return g
        raise KeyError(name)

    def save(self, ckpt_dir):
        os.makedirs(ckpt_dir, exist_ok=True)
        with open(os.path.join(ckpt_dir, "config.json"), "w") as fh:
            json.dump(self.config.to_dict(), fh, indent=2, sort_keys=True)
        for name, t in self.params.items():
            tc.save_tensor(os.path.join(ckpt_dir, name + ".pvat"), t)

    @classmethod
    def load(cls, ckpt_dir):
        with open(os.path.join(ckpt_dir, "config.json")) as fh:
            config = DenoiserConfig.from_dict(json.load(fh))
        model = cls(config)
        for name, t in model.params.items():
            path = os.path.join(ckpt_dir, name + ".pvat")
            loaded = tc.load_tensor(path)
            if loaded.shape != t.shape:
                raise tc.TensorError(f"{path}: shape {loaded.shape} != {t.shape}")
            t.data = loaded.data
        return model
