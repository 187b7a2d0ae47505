"""Dual-network small-loss co-teaching for implicit noisy-label robustness.

Two peer networks are trained in lockstep: in every batch each network
ranks the per-sample losses, and each network updates only on the samples
its *peer* ranked smallest (cross-update).  The kept fraction follows
R(t) = 1 - forget_rate * min(t / ramp_epochs, 1), so training starts on
full batches and settles at 1 - forget_rate after the ramp.

Ranking and updates both use the classical focal loss (gamma = 2) over
softmax probabilities, matching how the wrapped classifiers are trained.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class CoTeachingConfig:
    forget_rate: float = 0.1
    noise_rate: float = 0.1  # recorded for the run manifest; the update path only uses the forget schedule
    ramp_epochs: int = 10
    epochs: int = 300
    batch_size: int = 10
    learning_rate: float = 1e-5

    def __post_init__(self) -> None:
        if not 0.0 <= self.forget_rate < 1.0:
            raise ValueError("forget_rate must be in [0, 1)")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be non-negative")
        if self.ramp_epochs <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("ramp_epochs, epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def remember_rate(self, epoch: int) -> float:
        """Linear drop from 1.0 to 1 - forget_rate over ramp_epochs."""
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        return 1.0 - self.forget_rate * min(epoch / self.ramp_epochs, 1.0)


def focal_loss_per_sample(probs: torch.Tensor, labels: torch.Tensor, class_weights, gamma: float = 2.0) -> torch.Tensor:
    """Classical focal loss -w_y (1 - p_y)^gamma log(p_y), one value per sample."""
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError("probs must be (B, K) matching labels (B,)")
    w = torch.as_tensor(class_weights, dtype=probs.dtype)
    p_y = probs.gather(1, labels.view(-1, 1)).squeeze(1).clamp(1e-7, 1.0)
    w_y = w[labels]
    return -w_y * (1.0 - p_y) ** gamma * torch.log(p_y)


def select_small_loss(peer_losses: torch.Tensor, remember: float) -> list[int]:
    """Indices of the ceil(R * B) smallest peer losses, stable order."""
    if peer_losses.numel() == 0:
        raise ValueError("batch must be non-empty")
    if not 0.0 < remember <= 1.0:
        raise ValueError("remember rate must be in (0, 1]")
    batch = peer_losses.numel()
    keep = math.ceil(remember * batch)
    order = torch.argsort(peer_losses.detach(), stable=True)
    return sorted(int(i) for i in order[:keep])


@dataclass
class CoTeachEpochStats:
    epoch: int
    remember_rate: float
    mean_loss_a: float
    mean_loss_b: float
    selected_for_a: list[str]
    selected_for_b: list[str]
    discarded_ids: set[str]


def warn_if_identical(net_a: torch.nn.Module, net_b: torch.nn.Module) -> None:
    """Identical initializations defeat the two-view premise; warn once."""
    sd_a, sd_b = net_a.state_dict(), net_b.state_dict()
    if sd_a.keys() == sd_b.keys() and all(torch.equal(sd_a[k], sd_b[k]) for k in sd_a):
        warnings.warn("co-teaching networks start from identical parameters", RuntimeWarning)


def coteach_epoch(net_a, net_b, batches, cfg: CoTeachingConfig, epoch: int, opt_a, opt_b, class_weights=(1.0, 1.0)) -> CoTeachEpochStats:
    """One cross-selection epoch over (inputs, labels, sample_ids) batches.

    Each network's optimizer steps on the subset picked from its peer's
    loss ranking; a network never updates on samples it selected itself.
    Returns per-epoch stats including every sample id that at least one
    selection discarded.
    """
    remember = cfg.remember_rate(epoch)
    net_a.train()
    net_b.train()
    losses_a, losses_b = [], []
    sel_a_ids: list[str] = []
    sel_b_ids: list[str] = []
    discarded: set[str] = set()
    for x, y, ids in batches:
        probs_a = net_a(x)
        probs_b = net_b(x)
        per_a = focal_loss_per_sample(probs_a, y, class_weights)
        per_b = focal_loss_per_sample(probs_b, y, class_weights)
        idx_for_a = select_small_loss(per_b, remember)  # peer B picks for A
        idx_for_b = select_small_loss(per_a, remember)  # peer A picks for B

        loss_a = per_a[idx_for_a].mean()
        opt_a.zero_grad()
        loss_a.backward()
        opt_a.step()

        loss_b = per_b[idx_for_b].mean()
        opt_b.zero_grad()
        loss_b.backward()
        opt_b.step()

        losses_a.append(float(loss_a.detach()))
        losses_b.append(float(loss_b.detach()))
        sel_a_ids.extend(ids[i] for i in idx_for_a)
        sel_b_ids.extend(ids[i] for i in idx_for_b)
        kept = set(idx_for_a) & set(idx_for_b)
        discarded.update(ids[i] for i in range(len(ids)) if i not in kept)
    return CoTeachEpochStats(
        epoch=epoch,
        remember_rate=remember,
        mean_loss_a=float(sum(losses_a) / max(1, len(losses_a))),
        mean_loss_b=float(sum(losses_b) / max(1, len(losses_b))),
        selected_for_a=sel_a_ids,
        selected_for_b=sel_b_ids,
        discarded_ids=discarded,
    )
