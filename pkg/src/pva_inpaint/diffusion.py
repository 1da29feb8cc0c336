"""Forward diffusion, training losses, inpainting condition assembly,
DDIM sampling and classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .seeding import rng_for
from .tensor import Tensor, TensorError

# Defaults sized for the toy resolution: with T=200 and a linear ramp up to
# 0.08 the terminal signal level alpha_bar_T drops below 1e-3, so the
# pure-noise endpoint actually is pure noise.
DEFAULT_T = 200
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.08


class NoiseSchedule:
    """beta/alpha/alpha_bar tables for a T-step forward process.

    betas[i] is the variance of step i+1; alpha_bar(0) == 1 by definition.
    """

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-d array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def T(self):
        return self.betas.size

    def alpha_bar(self, t):
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return float(self.betas[t - 1])


def make_linear_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START,
                         beta_end=DEFAULT_BETA_END):
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(betas)


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def diffuse_to(x0, t, eps, sched):
    """Jump straight to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = _as_array(x0)
    eps = _as_array(eps)
    if x0.shape != eps.shape:
        raise TensorError("x0/eps shape mismatch")
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def diffuse_step(x_t, t, eps, sched):
    """One forward corruption step with variance beta_t."""
    x_t = _as_array(x_t)
    eps = _as_array(eps)
    if x_t.shape != eps.shape:
        raise TensorError("x_t/eps shape mismatch")
    b = sched.beta(t)
    return np.sqrt(1.0 - b) * x_t + np.sqrt(b) * eps


def dsm_loss(eps, eps_hat):
    """Mean squared error between true and predicted noise."""
    if not isinstance(eps_hat, Tensor):
        eps_hat = Tensor(eps_hat)
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=np.float64))
    if eps.shape != eps_hat.shape:
        raise TensorError("dsm_loss shape mismatch")
    diff = eps - eps_hat
    return (diff * diff).mean()


@dataclass
class InpaintCondition:
    """Mask (1 = known), masked image, prompt token ids, optional visual
    features from the identity encoder."""

    mask: np.ndarray
    masked_image: np.ndarray
    prompt: Optional[Sequence[int]] = None
    visual: Optional[Tensor] = None

    @classmethod
    def from_image(cls, image, mask, prompt=None, visual=None):
        image = _as_array(image)
        mask = _as_array(mask)
        cond = cls(mask=mask, masked_image=mask[..., None] * image,
                   prompt=prompt, visual=visual)
        cond.validate()
        return cond

    def validate(self):
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask must be strictly binary")
        if self.mask.shape != self.masked_image.shape[:2]:
            raise ValueError("mask/image extent mismatch")


def assemble_inpaint_input(z_t, cond):
    """Channel concat [z_t | mask | masked image]; C=3 gives 7 channels."""
    z_t = _as_array(z_t)
    if z_t.shape[:2] != cond.mask.shape:
        raise TensorError("z_t/mask extent mismatch")
    return np.concatenate(
        [z_t, cond.mask[..., None], cond.masked_image], axis=-1)


def ddim_step(x_t, t, t_prev, eps_hat, eta, noise, sched, x0_range=None):
    """One DDIM update from step t down to t_prev; eta interpolates between
    deterministic (0) and stochastic (1) sampling.

    x0_range, when given, statically thresholds the predicted clean sample
    to that interval and re-derives the noise direction from the clipped
    estimate, which tames overshoot under strong guidance."""
    if not (0 <= t_prev < t <= sched.T):
        raise ValueError(f"bad step order t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must be in [0, 1]")
    x_t = _as_array(x_t)
    eps_hat = _as_array(eps_hat)
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if x0_range is not None:
        x0_hat = np.clip(x0_hat, x0_range[0], x0_range[1])
        eps_hat = (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    if t_prev == 0:
        return x0_hat
    sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
    out = np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p - sigma ** 2) * eps_hat
    if sigma > 0.0:
        out = out + sigma * _as_array(noise)
    return out


TASKS = ("inpaint_only", "controlled", "default")


@dataclass
class GuidanceSpec:
    """Positive/negative condition pairs plus the guidance scale.

    Prompt None means the empty condition; visual None means no identity
    features (the model falls back to the frozen base)."""

    task: str
    positive: tuple
    negative: tuple
    scale: float = 1.0


def build_guidance_conditions(task, neutral_prompt, edit_prompt=None,
                              visual=None, scale=1.0):
    if task not in TASKS:
        raise ValueError(f"unknown guidance task {task!r}")
    if scale < 0.0:
        raise ValueError("guidance scale must be >= 0")
    if task == "inpaint_only":
        if visual is None:
            raise ValueError("inpaint_only requires visual features")
        return GuidanceSpec(task, (neutral_prompt, visual), (neutral_prompt, None), scale)
    if task == "controlled":
        if visual is None:
            raise ValueError("controlled requires visual features")
        if edit_prompt is None:
            raise ValueError("controlled requires an edit prompt")
        return GuidanceSpec(task, (edit_prompt, visual), (neutral_prompt, visual), scale)
    prompt = edit_prompt if edit_prompt is not None else neutral_prompt
    return GuidanceSpec(task, (prompt, None), (None, None), scale)


def guidance_combine(eps_pos, eps_neg, scale):
    eps_pos = _as_array(eps_pos)
    eps_neg = _as_array(eps_neg)
    if eps_pos.shape != eps_neg.shape:
        raise TensorError("guidance shape mismatch")
    if scale == 1.0:
        return eps_pos
    return eps_neg + scale * (eps_pos - eps_neg)


def sampling_timesteps(T, steps):
    """Evenly spaced step indices over [0, T], descending (t, t_prev) pairs."""
    ts = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))
    ts = ts[::-1]
    return [(int(ts[i]), int(ts[i + 1])) for i in range(len(ts) - 1)]


def sample_inpaint(model, cond, guidance, sched, steps=50, eta=0.7, seed=0):
    """Full DDIM inpainting loop from seeded noise.

    At every step the known region is re-imposed from the diffused masked
    image, and the final output carries the known pixels verbatim.
    """
    cond.validate()
    H, W = cond.mask.shape
    C = cond.masked_image.shape[-1]
    rng = rng_for(seed, "sample_inpaint")
    mask3 = cond.mask[..., None]
    x = rng.standard_normal((H, W, C))
    pos_prompt, pos_visual = guidance.positive
    neg_prompt, neg_visual = guidance.negative
    for t, t_prev in sampling_timesteps(sched.T, steps):
        known = diffuse_to(cond.masked_image, t, rng.standard_normal((H, W, C)), sched)
        x = mask3 * known + (1.0 - mask3) * x
        z_tilde = assemble_inpaint_input(x, cond)
        eps_pos = model.predict_noise(z_tilde, pos_prompt, pos_visual, t)
        if guidance.scale == 1.0:
            eps = eps_pos
        else:
            eps_neg = model.predict_noise(z_tilde, neg_prompt, neg_visual, t)
            eps = guidance_combine(eps_pos, eps_neg, guidance.scale)
        noise = rng.standard_normal((H, W, C)) if eta > 0.0 else None
        x = ddim_step(x, t, t_prev, eps, eta, noise, sched, x0_range=(0.0, 1.0))
    x = np.clip(x, 0.0, 1.0)
    return mask3 * cond.masked_image + (1.0 - mask3) * x
