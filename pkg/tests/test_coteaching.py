"""Co-teaching schedule, selection, and noisy-label behavior."""

import copy

import numpy as np
import pytest
import torch
from torch import nn

from evimri.coteaching import (
    CoTeachingConfig,
    coteach_epoch,
    focal_loss_per_sample,
    select_small_loss,
    warn_if_identical,
)


class TinyNet(nn.Module):
    """Small softmax classifier over flattened 8x8 inputs, for fast trainer tests."""

    def __init__(self, seed):
        super().__init__()
        torch.manual_seed(seed)
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(64, 16), nn.ReLU(), nn.Linear(16, 2))

    def forward(self, x):
        return torch.softmax(self.fc(x), dim=-1)


def blob_dataset(n, seed, flip_cluster_fraction=0.0):
    """Separable 8x8 blobs; optionally a visually distinct cluster with random labels."""
    rng = np.random.default_rng(seed)
    xs, ys, ids, flipped = [], [], [], set()
    n_cluster = int(round(2 * flip_cluster_fraction * n))
    cluster = set(rng.choice(n, size=n_cluster, replace=False).tolist())
    flip = set(list(sorted(cluster))[: n_cluster // 2])
    for i in range(n):
        label = i % 2
        img = rng.normal(0, 0.15, (8, 8))
        if i in cluster:
            img[0:2, :] += 1.0  # the cluster marker; no class signal
            true = label
            label = 1 - true if i in flip else true
            if i in flip:
                flipped.add(f"s{i:04d}")
        else:
            img[3:5, 3:5] += 1.0 if label == 1 else -1.0
        xs.append(img)
        ys.append(label)
        ids.append(f"s{i:04d}")
    x = torch.tensor(np.stack(xs), dtype=torch.float32)
    y = torch.tensor(ys)
    return x, y, ids, flipped


def make_batches(x, y, ids, batch_size):
    out = []
    for s in range(0, len(ids), batch_size):
        out.append((x[s : s + batch_size], y[s : s + batch_size], ids[s : s + batch_size]))
    return out


class TestSchedule:
    def test_reference_ramp_values(self):
        cfg = CoTeachingConfig(forget_rate=0.1, ramp_epochs=10)
        assert cfg.remember_rate(0) == 1.0
        assert cfg.remember_rate(5) == pytest.approx(0.95)
        assert cfg.remember_rate(10) == pytest.approx(0.9)
        assert cfg.remember_rate(25) == pytest.approx(0.9)

    def test_non_increasing_and_floor(self):
        cfg = CoTeachingConfig(forget_rate=0.2, ramp_epochs=10)
        vals = [cfg.remember_rate(t) for t in range(30)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
        assert vals[10] == pytest.approx(0.8)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            CoTeachingConfig(forget_rate=1.0)
        with pytest.raises(ValueError):
            CoTeachingConfig(ramp_epochs=0)
        with pytest.raises(ValueError):
            CoTeachingConfig(learning_rate=0.0)


class TestSelectSmallLoss:
    def test_full_batch_at_r_one(self):
        losses = torch.tensor([0.5, 0.1, 0.9, 0.3])
        assert select_small_loss(losses, 1.0) == [0, 1, 2, 3]

    def test_outlier_dropped_against_sort_oracle(self):
        rng = np.random.default_rng(0)
        losses = rng.uniform(0.1, 0.5, 10)
        losses[4] = 9.0
        picked = select_small_loss(torch.tensor(losses), 0.9)
        oracle = sorted(np.argsort(losses, kind="stable")[:9].tolist())
        assert picked == oracle
        assert 4 not in picked

    def test_depends_only_on_peer_losses(self):
        own = torch.tensor([9.0, 9.0, 0.1, 0.1])
        peer = torch.tensor([0.1, 0.2, 8.0, 9.0])
        assert select_small_loss(peer, 0.5) == [0, 1]
        assert select_small_loss(own, 0.5) == [2, 3]

    def test_invalid_inputs_rejected(self):
        with pytest.raises(ValueError):
            select_small_loss(torch.tensor([]), 0.9)
        with pytest.raises(ValueError):
            select_small_loss(torch.tensor([0.1]), 0.0)


class TestFocalLoss:
    def test_confident_correct_is_near_zero(self):
        probs = torch.tensor([[0.99, 0.01], [0.01, 0.99]])
        loss = focal_loss_per_sample(probs, torch.tensor([0, 1]), (1.0, 1.0))
        assert (loss < 1e-3).all()

    def test_class_weights_scale(self):
        probs = torch.tensor([[0.3, 0.7]])
        base = focal_loss_per_sample(probs, torch.tensor([0]), (1.0, 1.0))
        heavy = focal_loss_per_sample(probs, torch.tensor([0]), (2.0, 1.0))
        assert float(heavy) == pytest.approx(2 * float(base), rel=1e-6)

    def test_hand_value(self):
        # -w (1-p)^2 log p with p=0.5, w=1: 0.25 * log 2
        probs = torch.tensor([[0.5, 0.5]])
        loss = focal_loss_per_sample(probs, torch.tensor([1]), (1.0, 1.0))
        assert float(loss) == pytest.approx(0.25 * np.log(2.0), rel=1e-5)


class TestCoteachEpoch:
    def _setup(self, n=80, seed=1, flip=0.0):
        x, y, ids, flipped = blob_dataset(n, seed, flip)
        net_a, net_b = TinyNet(seed), TinyNet(seed + 1)
        cfg = CoTeachingConfig(forget_rate=0.2, ramp_epochs=4, epochs=10, batch_size=10, learning_rate=0.05)
        opt_a = torch.optim.Adam(net_a.parameters(), lr=cfg.learning_rate)
        opt_b = torch.optim.Adam(net_b.parameters(), lr=cfg.learning_rate)
        return x, y, ids, flipped, net_a, net_b, cfg, opt_a, opt_b

    def test_cross_update_selection_matches_peer_ranking(self):
        x, y, ids, _, net_a, net_b, cfg, opt_a, opt_b = self._setup()
        batch = make_batches(x, y, ids, 10)[0]
        with torch.no_grad():
            peer_b_losses = focal_loss_per_sample(net_b(batch[0]), batch[1], (1.0, 1.0))
        expected_for_a = [batch[2][i] for i in select_small_loss(peer_b_losses, cfg.remember_rate(5))]
        stats = coteach_epoch(net_a, net_b, [batch], cfg, 5, opt_a, opt_b)
        assert stats.selected_for_a == expected_for_a

    def test_per_network_discard_fraction_bounded(self):
        x, y, ids, _, net_a, net_b, cfg, opt_a, opt_b = self._setup()
        batches = make_batches(x, y, ids, 10)
        stats = coteach_epoch(net_a, net_b, batches, cfg, 20, opt_a, opt_b)
        assert len(stats.selected_for_a) >= (1 - cfg.forget_rate) * len(ids)
        assert len(stats.selected_for_b) >= (1 - cfg.forget_rate) * len(ids)

    def test_identical_initialization_warns(self):
        net_a = TinyNet(2)
        net_b = copy.deepcopy(net_a)
        with pytest.warns(RuntimeWarning):
            warn_if_identical(net_a, net_b)

    def test_different_initialization_silent(self):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("error")
            warn_if_identical(TinyNet(3), TinyNet(4))

    def test_matches_standard_training_on_clean_data(self):
        # paired-run oracle: same seeds, co-teaching vs plain training
        x, y, ids, _, net_a, net_b, cfg, opt_a, opt_b = self._setup(n=120, seed=5)
        batches = make_batches(x, y, ids, 10)
        for epoch in range(12):
            coteach_epoch(net_a, net_b, batches, cfg, epoch, opt_a, opt_b)

        plain = TinyNet(5)
        opt = torch.optim.Adam(plain.parameters(), lr=cfg.learning_rate)
        for epoch in range(12):
            for bx, by, _ in batches:
                loss = focal_loss_per_sample(plain(bx), by, (1.0, 1.0)).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()

        with torch.no_grad():
            acc_ct = float((net_a(x).argmax(-1) == y).float().mean())
            acc_plain = float((plain(x).argmax(-1) == y).float().mean())
        assert abs(acc_ct - acc_plain) <= 0.02

    def test_flipped_labels_over_represented_in_discards(self):
        x, y, ids, flipped, net_a, net_b, cfg, opt_a, opt_b = self._setup(n=200, seed=6, flip=0.1)
        assert len(flipped) == 20
        batches = make_batches(x, y, ids, 10)
        last = None
        for epoch in range(12):
            last = coteach_epoch(net_a, net_b, batches, cfg, epoch, opt_a, opt_b)
        base_rate = len(flipped) / len(ids)
        discard_rate = len(last.discarded_ids & flipped) / max(1, len(last.discarded_ids))
        assert discard_rate > 2 * base_rate
