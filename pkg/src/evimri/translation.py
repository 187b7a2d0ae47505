"""Loss suite for unpaired two-domain slice translation.

The objective couples four terms: per-domain adversarial losses, an
adversarial consistency loss enforced by a pair discriminator on
(source, back-translated) versus (source, same-domain-translated) pairs,
an identity loss, and a bounded-mask loss that confines edits to a
fraction of the image and pushes the mask toward binary values.

The runtime instantiation of the adversarial terms is least-squares
(``form="ls"``); the raw log form is kept behind ``form="log"`` for unit
comparison only.  Every function is a pure map from score/image batches
to a scalar tensor; parameter updates belong to the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

_FORMS = ("ls", "log")
_SIDES = ("discriminator", "generator")
_LOG_EPS = 1e-7


@dataclass(frozen=True)
class MaskConfig:
    """Hyperparameters of the bounded-mask loss.

    ``delta`` scales the mask-size hinge terms; ``delta_max``/``delta_min``
    bound the foreground proportion; ``epsilon`` stabilizes the
    binarization term's division.
    """

    delta: float = 1.0
    delta_max: float = 0.1
    delta_min: float = 0.005
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not (0.0 <= self.delta_min < self.delta_max <= 1.0):
            raise ValueError("need 0 <= delta_min < delta_max <= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


# Mask thresholds from the two modality presets: anatomical scans tolerate
# larger edited regions than diffusion-derived maps.
T2_MASK_CONFIG = MaskConfig(delta_min=0.005, delta_max=0.1)
ADC_MASK_CONFIG = MaskConfig(delta_min=0.001, delta_max=0.005)


@dataclass(frozen=True)
class TranslationLossWeights:
    lambda_acl: float = 0.2
    lambda_idt: float = 1.0
    lambda_mask: float = 0.0025

    def __post_init__(self) -> None:
        if min(self.lambda_acl, self.lambda_idt, self.lambda_mask) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class GeneratorOutput:
    """Two-channel generator product: translated image plus bounded mask."""

    image: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self) -> None:
        if self.image.shape != self.mask.shape:
            raise ValueError("image and mask must share spatial dims")
        if self.mask.numel() and (self.mask.min() < 0 or self.mask.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")
        if self.image.numel() and (self.image.min() < -1 - 1e-6 or self.image.max() > 1 + 1e-6):
            raise ValueError("image values must lie in [-1, 1]")


def _check_scores(t: torch.Tensor, name: str) -> torch.Tensor:
    t = torch.as_tensor(t) if not isinstance(t, torch.Tensor) else t
    if not t.is_floating_point():
        t = t.to(torch.float64)
    if t.numel() == 0:
        raise ValueError(f"{name} score batch is empty")
    return t


def _check_form_side(form: str, side: str) -> None:
    if form not in _FORMS:
        raise ValueError(f"unknown gan form {form!r}")
    if side not in _SIDES:
        raise ValueError(f"unknown side {side!r}")


def _term_real(scores: torch.Tensor, form: str) -> torch.Tensor:
    if form == "ls":
        return ((scores - 1.0) ** 2).mean()
    return -torch.log(scores.clamp(_LOG_EPS, 1.0 - _LOG_EPS)).mean()


def _term_fake(scores: torch.Tensor, form: str) -> torch.Tensor:
    if form == "ls":
        return (scores**2).mean()
    return -torch.log1p(-scores.clamp(_LOG_EPS, 1.0 - _LOG_EPS)).mean()


def adv_loss_target(d_real, d_fake, side: str = "discriminator", form: str = "ls") -> torch.Tensor:
    """Target-domain adversarial loss.

    Discriminator side scores real target slices against translated ones;
    the generator side only needs the fake scores (``d_real`` may be None).
    """
    _check_form_side(form, side)
    fake = _check_scores(d_fake, "d_fake")
    if side == "generator":
        return _term_real(fake, form)
    real = _check_scores(d_real, "d_real")
    return _term_real(real, form) + _term_fake(fake, form)


def adv_loss_source(d_real, d_hat, d_tilde, side: str = "discriminator", form: str = "ls") -> torch.Tensor:
    """Source-domain adversarial loss with its two fake branches averaged.

    The fakes are the back-translated slice (hat) and the same-domain
    translation of the source slice (tilde).
    """
    _check_form_side(form, side)
    hat = _check_scores(d_hat, "d_hat")
    tilde = _check_scores(d_tilde, "d_tilde")
    if side == "generator":
        return (_term_real(hat, form) + _term_real(tilde, form)) / 2.0
    real = _check_scores(d_real, "d_real")
    return _term_real(real, form) + (_term_fake(hat, form) + _term_fake(tilde, form)) / 2.0


def acl_loss(d_pair_hat, d_pair_tilde, side: str = "discriminator", form: str = "ls") -> torch.Tensor:
    """Adversarial consistency loss over the pair discriminator's scores.

    The (source, back-translated) pair is the positive class; the roles are
    symmetric in effect, this convention just fixes the labels.  The
    generator side swaps the labels to fool the pair discriminator.
    """
    _check_form_side(form, side)
    hat = _check_scores(d_pair_hat, "d_pair_hat")
    tilde = _check_scores(d_pair_tilde, "d_pair_tilde")
    if side == "generator":
        return _term_fake(hat, form) + _term_real(tilde, form)
    return _term_real(hat, form) + _term_fake(tilde, form)


def identity_loss(x_s, x_s_idt, x_t, x_t_idt) -> torch.Tensor:
    """Mean L1 reconstruction penalty of the two identity-mapping paths."""
    pairs = []
    for a, b, name in ((x_s, x_s_idt, "source"), (x_t, x_t_idt, "target")):
        a = torch.as_tensor(a) if not isinstance(a, torch.Tensor) else a
        b = torch.as_tensor(b) if not isinstance(b, torch.Tensor) else b
        if a.shape != b.shape:
            raise ValueError(f"{name} identity pair shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        pairs.append((a, b))
    return sum((a - b).abs().mean() for a, b in pairs)


def mask_loss(mask, cfg: MaskConfig) -> torch.Tensor:
    """Bounded-mask penalty: foreground-size hinges plus a binarization term.

    ``mask`` is a single (H, W) map or a batch (B, H, W); batches are
    averaged.  Per image with P pixels and foreground sum M:

        delta * (max(M - delta_max*P, 0)^2 + max(delta_min*P - M, 0)^2)
        + sum_k 1 / (|m_k - 0.5| + epsilon)
    """
    m = torch.as_tensor(mask) if not isinstance(mask, torch.Tensor) else mask
    if not m.is_floating_point():
        m = m.to(torch.float64)
    if m.ndim == 2:
        m = m.unsqueeze(0)
    if m.ndim != 3 or m.numel() == 0:
        raise ValueError("mask must be a non-empty (H, W) or (B, H, W) array")
    if m.min() < 0 or m.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    n_pix = m.shape[-2] * m.shape[-1]
    fg = m.sum(dim=(-2, -1))
    over = torch.clamp(fg - cfg.delta_max * n_pix, min=0.0)
    under = torch.clamp(cfg.delta_min * n_pix - fg, min=0.0)
    size_term = cfg.delta * (over**2 + under**2)
    binarize = (1.0 / ((m - 0.5).abs() + cfg.epsilon)).sum(dim=(-2, -1))
    return (size_term + binarize).mean()


def apply_mask(source_slice, gen_out: GeneratorOutput) -> torch.Tensor:
    """Composite the translation onto the source: mask*image + (1-mask)*source."""
    src = torch.as_tensor(source_slice) if not isinstance(source_slice, torch.Tensor) else source_slice
    if src.shape != gen_out.image.shape:
        raise ValueError(f"source shape {tuple(src.shape)} does not match generator output {tuple(gen_out.image.shape)}")
    return gen_out.mask * gen_out.image + (1.0 - gen_out.mask) * src


def total_translation_loss(adv, acl, idt, mask, weights: TranslationLossWeights) -> torch.Tensor:
    """Weighted sum of the four terms; the adversarial term carries weight 1."""
    terms = [torch.as_tensor(t, dtype=torch.float64) if not isinstance(t, torch.Tensor) else t for t in (adv, acl, idt, mask)]
    adv_t, acl_t, idt_t, mask_t = terms
    return adv_t + weights.lambda_acl * acl_t + weights.lambda_idt * idt_t + weights.lambda_mask * mask_t
