"""Per-patch uncertainty tables and the three filtering policies.

Train-time policies remove a fixed fraction of the data: ``filter_patches``
drops the ceil(x% * N) patches with the highest uncertainty, and
``filter_patients`` drops whole patients ranked by mean patch uncertainty
(never splitting a patient's patches).  ``deployment_filter`` is the
test-time policy: keep rows with u < tau, abstain on the rest.

All removal counts use ceiling so at least the requested fraction goes;
ties break on the row id so every policy is deterministic.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import torch

from .evidential import evidence_to_opinion


@dataclass(frozen=True)
class UncertaintyRow:
    patch_id: str
    patient_id: str
    uncertainty: float
    predicted_prob: float
    label: int

    def __post_init__(self) -> None:
        if not 0.0 < self.uncertainty <= 1.0:
            raise ValueError(f"uncertainty must be in (0, 1], got {self.uncertainty}")
        if not 0.0 <= self.predicted_prob <= 1.0:
            raise ValueError("predicted_prob must be in [0, 1]")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


class UncertaintyTable:
    """Immutable collection of per-patch uncertainty rows, one per patch."""

    def __init__(self, rows) -> None:
        self.rows = tuple(rows)
        ids = [r.patch_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patch ids in uncertainty table")

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.rows})

    def subset(self, patch_ids) -> "UncertaintyTable":
        keep = set(patch_ids)
        return UncertaintyTable([r for r in self.rows if r.patch_id in keep])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["patch_id", "patient_id", "uncertainty", "predicted_prob", "label"])
            for r in self.rows:
                writer.writerow([r.patch_id, r.patient_id, repr(r.uncertainty), repr(r.predicted_prob), r.label])

    @classmethod
    def from_csv(cls, path) -> "UncertaintyTable":
        rows = []
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                rows.append(
                    UncertaintyRow(
                        patch_id=rec["patch_id"],
                        patient_id=rec["patient_id"],
                        uncertainty=float(rec["uncertainty"]),
                        predicted_prob=float(rec["predicted_prob"]),
                        label=int(rec["label"]),
                    )
                )
        return cls(rows)


def compute_uncertainties(model, patches, batch_size: int = 64) -> UncertaintyTable:
    """Run an evidence-head model over patches and tabulate u = K/S per patch.

    ``predicted_prob`` is the expected probability of the positive class.
    Softmax-head models have no evidence semantics and are rejected.
    """
    if getattr(model.spec, "head", None) != "evidence":
        raise ValueError("uncertainty is only defined for evidence-head models")
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start : start + batch_size]
            x = torch.stack(
                [torch.as_tensor(p.pixels, dtype=torch.float32).permute(2, 0, 1) for p in chunk]
            )
            opinion = evidence_to_opinion(model(x))
            u = opinion.uncertainty.numpy()
            prob_pos = opinion.expected_prob[:, 1].numpy()
            for patch, ui, pi in zip(chunk, u, prob_pos):
                if patch.label is None:
                    raise ValueError(f"patch {patch.patch_id} has no label")
                rows.append(
                    UncertaintyRow(
                        patch_id=patch.patch_id,
                        patient_id=patch.patient_id,
                        uncertainty=float(ui),
                        predicted_prob=float(pi),
                        label=int(patch.label),
                    )
                )
    return UncertaintyTable(rows)


def _check_percent(x_percent: float) -> None:
    if not 0.0 <= x_percent < 100.0:
        raise ValueError(f"filter percentage must be in [0, 100), got {x_percent}")


def filter_patches(table: UncertaintyTable, x_percent: float) -> frozenset[str]:
    """Retained patch ids after dropping the ceil(x% * N) most uncertain."""
    _check_percent(x_percent)
    if len(table) == 0:
        raise ValueError("cannot filter an empty table")
    n_remove = math.ceil(x_percent / 100.0 * len(table))
    ranked = sorted(table, key=lambda r: (-r.uncertainty, r.patch_id))
    return frozenset(r.patch_id for r in ranked[n_remove:])


def filter_patients(table: UncertaintyTable, x_percent: float) -> frozenset[str]:
    """Retained patient ids after dropping the most uncertain patients.

    Patients are ranked by mean patch uncertainty; removing a patient
    removes all of their patches (use ``table.subset`` with the retained
    ids' patches to materialize that).
    """
    _check_percent(x_percent)
    if len(table) == 0:
        raise ValueError("cannot filter an empty table")
    sums: dict[str, list[float]] = {}
    for r in table:
        sums.setdefault(r.patient_id, []).append(r.uncertainty)
    means = {pid: sum(v) / len(v) for pid, v in sums.items()}
    n_remove = math.ceil(x_percent / 100.0 * len(means))
    ranked = sorted(means, key=lambda pid: (-means[pid], pid))
    return frozenset(ranked[n_remove:])


def deployment_filter(table: UncertaintyTable, tau: float) -> tuple[frozenset[str], frozenset[str]]:
    """Split row ids into (retained, abstained) by the strict u < tau rule.

    Rows at u == tau abstain; in particular tau == 1.0 abstains on
    zero-evidence rows (u == 1 exactly), which is the documented boundary.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {tau}")
    retained = frozenset(r.patch_id for r in table if r.uncertainty < tau)
    abstained = frozenset(r.patch_id for r in table) - retained
    return retained, abstained


def log_filter_decision(path, policy: str, parameter: float, removed_ids) -> None:
    """Record a filtering decision as JSON: policy, its parameter, removed ids."""
    payload = {
        "policy": policy,
        "parameter": parameter,
        "removed_ids": sorted(removed_ids),
        "n_removed": len(removed_ids),
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
