"""Closed-form subjective-logic math for Dirichlet-based binary classifiers.

Evidence ``e_k >= 0`` collected for each of ``K`` classes parameterizes a
Dirichlet prior with ``alpha_k = e_k + 1`` and strength ``S = sum(alpha)``.
Belief mass is ``b_k = e_k / S``, the scalar predictive uncertainty is
``u = K / S`` and the expected class probability is ``p_k = alpha_k / S``.

All operations are pure, differentiable tensor functions, so they can be
dropped into a training loop (autograd provides the exact gradients that
the finite-difference tests check against) or called with plain floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

# Keeps digamma arguments away from the pole at 0 when alpha == 1 exactly.
_ALPHA_FLOOR = 1.0 + 1e-12


def _as_tensor(x, name: str) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(x, dtype=torch.float64)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    if t.ndim == 0:
        raise ValueError(f"{name} must have at least one class axis")
    return t


@dataclass(frozen=True)
class DirichletOpinion:
    """A subjective opinion: Dirichlet parameters plus derived quantities.

    All fields share leading batch dimensions; ``alpha``, ``belief`` and
    ``expected_prob`` have a trailing class axis of length K, while
    ``strength`` and ``uncertainty`` are per-sample scalars.
    """

    alpha: torch.Tensor
    strength: torch.Tensor
    belief: torch.Tensor
    uncertainty: torch.Tensor
    expected_prob: torch.Tensor

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[-1]


@dataclass(frozen=True)
class ClassWeights:
    """Per-class multiplicative loss weights, all strictly positive."""

    beta: torch.Tensor

    def __init__(self, beta) -> None:
        t = _as_tensor(beta, "beta")
        if (t <= 0).any():
            raise ValueError("class weights must be strictly positive")
        object.__setattr__(self, "beta", t)


@dataclass(frozen=True)
class AnnealingSchedule:
    """Linear 0 -> 1 ramp for the KL regularizer weight.

    ``lambda_t = min(1, epoch / ramp_epochs)``; the default ramp length of
    10 epochs reaches full strength at epoch 10 and stays there.
    """

    epoch: int
    ramp_epochs: int = 10

    def __post_init__(self) -> None:
        if self.epoch < 0:
            raise ValueError("epoch must be non-negative")
        if self.ramp_epochs <= 0:
            raise ValueError("ramp_epochs must be positive")

    @property
    def lambda_t(self) -> float:
        return min(1.0, self.epoch / self.ramp_epochs)


def evidence_to_opinion(evidence) -> DirichletOpinion:
    """Map non-negative per-class evidence to a Dirichlet opinion.

    ``evidence`` is a tensor (or nested sequence) whose last axis indexes
    the K >= 2 classes; leading axes are treated as batch dimensions.
    Raises ValueError on negative components.
    """
    e = _as_tensor(evidence, "evidence")
    if e.shape[-1] < 2:
        raise ValueError("evidence needs at least two classes")
    if (e < 0).any():
        raise ValueError("evidence components must be non-negative")
    k = e.shape[-1]
    strength = e.sum(dim=-1) + k
    s = strength.unsqueeze(-1)
    alpha = e + 1.0
    return DirichletOpinion(
        alpha=alpha,
        strength=strength,
        belief=e / s,
        uncertainty=k / strength,
        expected_prob=alpha / s,
    )


def digamma(x: float) -> float:
    """Digamma psi(x) for scalar x > 0, via torch's special-function kernel."""
    if x <= 0:
        raise ValueError("digamma is only defined here for x > 0")
    return float(torch.special.digamma(torch.tensor(x, dtype=torch.float64)))


def _check_one_hot(y: torch.Tensor, k: int) -> None:
    if y.shape[-1] != k:
        raise ValueError(f"label width {y.shape[-1]} does not match {k} classes")
    is_binary = ((y == 0) | (y == 1)).all()
    if not is_binary or not (y.sum(dim=-1) == 1).all():
        raise ValueError("labels must be one-hot vectors")


def _beta_tensor(beta, k: int, like: torch.Tensor) -> torch.Tensor:
    t = beta.beta if isinstance(beta, ClassWeights) else ClassWeights(beta).beta
    if t.shape[-1] != k:
        raise ValueError(f"class-weight width {t.shape[-1]} does not match {k} classes")
    return t.to(like.dtype)


def evidential_focal_loss(opinion: DirichletOpinion, y, beta, gamma: float = 2.0) -> torch.Tensor:
    """Per-sample evidential focal loss.

    Computes ``sum_j beta_j * (y_j - alpha_j/S)^2 * (psi(S) - psi(alpha_j))``,
    the closed form of the Dirichlet expectation of the focal modulator with
    the one-hot target replacing the constant inside the modulator.  The
    squared modulator is hard-coded, so only ``gamma == 2`` is accepted.

    Returns a tensor with the opinion's batch shape (a 0-dim tensor for a
    single sample); always >= 0 since S >= alpha_j and psi is increasing.
    """
    if gamma != 2.0:
        raise ValueError("the closed form fixes the focusing exponent at 2; got gamma=%r" % (gamma,))
    alpha = opinion.alpha
    y_t = _as_tensor(y, "y").to(alpha.dtype)
    _check_one_hot(y_t, alpha.shape[-1])
    if y_t.shape != alpha.shape:
        raise ValueError(f"label shape {tuple(y_t.shape)} does not match alpha shape {tuple(alpha.shape)}")
    b = _beta_tensor(beta, alpha.shape[-1], alpha)
    s = opinion.strength.unsqueeze(-1)
    p_hat = alpha / s
    gap = torch.digamma(s.clamp_min(_ALPHA_FLOOR)) - torch.digamma(alpha.clamp_min(_ALPHA_FLOOR))
    return (b * (y_t - p_hat) ** 2 * gap).sum(dim=-1)


def _kl_alpha_to_uniform(alpha: torch.Tensor) -> torch.Tensor:
    k = alpha.shape[-1]
    alpha = alpha.clamp_min(_ALPHA_FLOOR)
    s = alpha.sum(dim=-1)
    log_norm = (
        torch.lgamma(s)
        - torch.lgamma(alpha).sum(dim=-1)
        - torch.lgamma(torch.tensor(float(k), dtype=alpha.dtype))
    )
    dig = (alpha - 1.0) * (torch.digamma(alpha) - torch.digamma(s.unsqueeze(-1)))
    return log_norm + dig.sum(dim=-1)


def kl_to_uniform_dirichlet(opinion) -> torch.Tensor:
    """KL divergence from Dirichlet(alpha) to the uniform Dirichlet(1, ..., 1).

    Accepts a DirichletOpinion or a raw alpha tensor (last axis = classes,
    each component >= 1).  Zero iff alpha is the all-ones vector.
    """
    alpha = opinion.alpha if isinstance(opinion, DirichletOpinion) else _as_tensor(opinion, "alpha")
    if (alpha < 1.0 - 1e-9).any():
        raise ValueError("alpha components must be >= 1")
    return _kl_alpha_to_uniform(alpha)


def total_evidential_loss(
    opinion: DirichletOpinion,
    y,
    beta,
    schedule: AnnealingSchedule,
    kl_on_full_alpha: bool = False,
) -> torch.Tensor:
    """Batch training loss: summed focal terms plus the annealed KL regularizer.

    By default the KL term sees evidence with the correct class removed,
    ``alpha~ = y + (1 - y) * alpha``, so confident correct predictions are
    not pulled back toward the uniform prior.  ``kl_on_full_alpha=True``
    switches to penalizing the full alpha instead.
    """
    alpha = opinion.alpha
    if alpha.numel() == 0 or (alpha.ndim > 1 and alpha.shape[0] == 0):
        raise ValueError("batch must be non-empty")
    y_t = _as_tensor(y, "y").to(alpha.dtype)
    cls = evidential_focal_loss(opinion, y_t, beta)
    kl_alpha = alpha if kl_on_full_alpha else y_t + (1.0 - y_t) * alpha
    kl = _kl_alpha_to_uniform(kl_alpha)
    return cls.sum() + schedule.lambda_t * kl.sum()
