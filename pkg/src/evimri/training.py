"""Training loops, domain conversion, filter/retrain, evaluation, manifests.

Every loop is deterministic given (config, seed): weights come from
``torch.manual_seed``, batch order from a seeded numpy generator, and all
noise vectors from an explicit torch.Generator, so a replayed run
reproduces its loss trace bit-for-bit on the same machine.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig
from .coteaching import CoTeachingConfig, coteach_epoch, warn_if_identical
from .data import (
    PatchRecord,
    SplitManifest,
    VolumeRecord,
    make_splits,
    patches_from_volumes,
    slices_to_volume,
    volume_metadata,
    volume_to_slices,
)
from .evidential import (
    AnnealingSchedule,
    evidence_to_opinion,
    evidential_focal_loss,
    kl_to_uniform_dirichlet,
)
from .filtering import (
    UncertaintyRow,
    UncertaintyTable,
    compute_uncertainties,
    filter_patches,
    filter_patients,
    log_filter_decision,
)
from .metrics import (
    MetricsReport,
    aggregate_patient,
    classification_metrics,
    sweep_to_csv,
    threshold_sweep,
)
from .models import (
    ClassifierSpec,
    TranslationNetConfig,
    build_classifier,
    build_translation_bundle,
    save_classifier,
    save_translation_bundle,
)
from .translation import (
    GeneratorOutput,
    MaskConfig,
    TranslationLossWeights,
    acl_loss,
    adv_loss_source,
    adv_loss_target,
    apply_mask,
    identity_loss,
    mask_loss,
    total_translation_loss,
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the rescue checkpoint path."""

    def __init__(self, message: str, checkpoint: str | None = None) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint


# --------------------------------------------------------------------------
# shared plumbing


def patches_to_tensors(patches) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    x = torch.stack([torch.as_tensor(p.pixels, dtype=torch.float32).permute(2, 0, 1) for p in patches])
    labels = [p.label for p in patches]
    if any(l is None for l in labels):
        raise ValueError("every training patch needs a label")
    y = torch.tensor(labels, dtype=torch.long)
    return x, y, [p.patch_id for p in patches]


def partition_patches(patches, manifest: SplitManifest) -> dict[str, list[PatchRecord]]:
    parts = {"train": [], "val": [], "test": []}
    for p in patches:
        part = manifest.partition_of(p.patient_id)
        if part is not None:
            parts[part].append(p)
    return parts


def slice_features(slices, stride: int = 4) -> np.ndarray:
    """Cheap slice embedding for MMD: strided downsample, flattened."""
    return np.stack([np.asarray(s, dtype=np.float64)[::stride, ::stride].reshape(-1) for s in slices])


def write_loss_trace(path, rows, header) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def data_fingerprint(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(run_dir, cfg: ExperimentConfig, split: SplitManifest | None = None, extra: dict | None = None) -> Path:
    """Record everything needed to replay the run bit-identically."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "data_fingerprints": {p: data_fingerprint(p) for p in cfg.data.paths if Path(p).exists()},
    }
    if split is not None:
        payload["split"] = split.to_dict()
    if extra:
        payload.update(extra)
    path = run_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def audit_manifest(run_dir) -> None:
    """Assert stage 2 never touched standalone-test patients during training."""
    with open(Path(run_dir) / "manifest.json") as f:
        payload = json.load(f)
    split = payload.get("split")
    if split is None:
        return
    test_patients = set(split["test"])
    for key in ("trained_patch_ids", "filter_removed_ids"):
        for patch_id in payload.get(key, []):
            patient = patch_id.split("/")[0]
            if patient in test_patients:
                raise AssertionError(f"{key} references test patient {patient}")


# --------------------------------------------------------------------------
# stage 1: translation training


@dataclass
class TranslationRunResult:
    bundle: object
    checkpoint_path: Path | None
    loss_trace: list[tuple]
    val_curve: list[tuple[int, float]]
    stopped_early: bool


def _translation_slices(records, modality: str, manifest: SplitManifest, image_size: int):
    out = {"train": {"source_3T": [], "target_1p5T": []}, "val": {"source_3T": [], "target_1p5T": []}}
    for rec in records:
        if rec.modality != modality:
            continue
        part = manifest.partition_of(rec.patient_id)
        if part not in ("train", "val"):
            continue
        for sl in volume_to_slices(rec):
            if sl.shape != (image_size, image_size):
                raise ValueError(f"slice shape {sl.shape} does not match configured image size {image_size}")
            out[part][rec.domain].append(sl)
    for part, by_domain in out.items():
        for domain, slices in by_domain.items():
            if not slices:
                raise ValueError(f"no {domain} slices in the {part} partition")
    return out


def _stack_slices(slices) -> torch.Tensor:
    return torch.tensor(np.stack(slices), dtype=torch.float32).unsqueeze(1)


def _generator_objective(bundle, x_s, x_t, z, weights, mask_cfg, form):
    """Generator-side total loss plus the composited translation of x_s."""
    out_bar = bundle.gen_s_to_t(x_s, z[0])
    x_bar = apply_mask(x_s, out_bar)
    out_hat = bundle.gen_t_to_s(x_bar, z[1])
    x_hat = apply_mask(x_bar, out_hat)
    out_tilde = bundle.gen_t_to_s(x_s, z[2])
    x_tilde = apply_mask(x_s, out_tilde)

    g_adv = adv_loss_target(None, bundle.disc_t(x_bar), side="generator", form=form) + adv_loss_source(
        None, bundle.disc_s(x_hat), bundle.disc_s(x_tilde), side="generator", form=form
    )
    g_acl = acl_loss(
        bundle.disc_pair(x_s, x_hat), bundle.disc_pair(x_s, x_tilde), side="generator", form=form
    )
    # identity paths supervise the raw image channel; compositing here would
    # let "mask -> 0 everywhere" trivially satisfy the reconstruction
    idt_s = bundle.gen_t_to_s(x_s, bundle.enc_z_s(x_s)).image
    idt_t = bundle.gen_s_to_t(x_t, bundle.enc_z_t(x_t)).image
    g_idt = identity_loss(x_s, idt_s, x_t, idt_t)
    g_mask = (
        mask_loss(out_bar.mask.squeeze(1), mask_cfg)
        + mask_loss(out_hat.mask.squeeze(1), mask_cfg)
        + mask_loss(out_tilde.mask.squeeze(1), mask_cfg)
    ) / 3.0
    total = total_translation_loss(g_adv, g_acl, g_idt, g_mask, weights)
    return total, (x_bar, x_hat, x_tilde)


def translation_validation_loss(bundle, val_s, val_t, cfg: ExperimentConfig, seed: int) -> float:
    """Deterministic generator objective on the validation slices."""
    tcfg = cfg.translation
    weights = TranslationLossWeights(tcfg.lambda_acl, tcfg.lambda_idt, tcfg.lambda_mask)
    dmin, dmax = tcfg.mask_thresholds()
    mask_cfg = MaskConfig(delta_min=dmin, delta_max=dmax, epsilon=tcfg.epsilon)
    gen = torch.Generator().manual_seed(seed)
    n = min(val_s.shape[0], val_t.shape[0])
    x_s, x_t = val_s[:n], val_t[:n]
    z = [torch.randn(n, tcfg.noise_dim, generator=gen) for _ in range(3)]
    bundle.eval()
    with torch.no_grad():
        total, _ = _generator_objective(bundle, x_s, x_t, z, weights, mask_cfg, tcfg.gan_form)
    bundle.train()
    return float(total)


def run_translation_training(cfg: ExperimentConfig, records, out_dir=None) -> TranslationRunResult:
    """Desk-scale adversarial training of the translation bundle.

    Alternates one discriminator and one generator update per step, logs
    the per-step losses, evaluates a deterministic validation objective
    every ``eval_every`` steps with early stopping, and aborts on a
    non-finite loss after saving the last finite snapshot.
    """
    tcfg = cfg.translation
    torch.manual_seed(cfg.seed)
    manifest = make_splits([r for r in records if r.modality == tcfg.modality], "translation", cfg.seed)
    slices = _translation_slices(records, tcfg.modality, manifest, tcfg.image_size)
    train_s = _stack_slices(slices["train"]["source_3T"])
    train_t = _stack_slices(slices["train"]["target_1p5T"])
    val_s = _stack_slices(slices["val"]["source_3T"])
    val_t = _stack_slices(slices["val"]["target_1p5T"])

    dmin, dmax = tcfg.mask_thresholds()
    bundle = build_translation_bundle(
        TranslationNetConfig(
            image_size=tcfg.image_size,
            base_width=tcfg.base_width,
            noise_dim=tcfg.noise_dim,
            mask_init=min(max(0.9 * dmax, 0.05), 0.95),
        )
    )
    bundle.train()
    weights = TranslationLossWeights(tcfg.lambda_acl, tcfg.lambda_idt, tcfg.lambda_mask)
    mask_cfg = MaskConfig(delta_min=dmin, delta_max=dmax, epsilon=tcfg.epsilon)
    # (0.5, 0.999) moment defaults from the adversarial-translation lineage
    opt_g = torch.optim.Adam(
        bundle.generator_parameters(), lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay, betas=(0.5, 0.999)
    )
    opt_d = torch.optim.Adam(
        bundle.discriminator_parameters(),
        lr=tcfg.learning_rate * tcfg.d_lr_factor,
        weight_decay=tcfg.weight_decay,
        betas=(0.5, 0.999),
    )

    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    form = tcfg.gan_form
    trace: list[tuple] = []
    val_curve: list[tuple[int, float]] = []
    best_val = math.inf
    since_best = 0
    stopped_early = False
    snapshot = {name: copy.deepcopy(m.state_dict()) for name, m in bundle.modules().items()}

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / f"translation_{tcfg.modality}.pt" if out_dir else None

    def save_snapshot(path):
        current = {name: m.state_dict() for name, m in bundle.modules().items()}
        for name, m in bundle.modules().items():
            m.load_state_dict(snapshot[name])
        save_translation_bundle(path, bundle)
        for name, m in bundle.modules().items():
            m.load_state_dict(current[name])

    for step in range(tcfg.steps):
        idx_s = rng.integers(0, train_s.shape[0], tcfg.batch_size)
        idx_t = rng.integers(0, train_t.shape[0], tcfg.batch_size)
        x_s, x_t = train_s[idx_s], train_t[idx_t]
        z = [torch.randn(tcfg.batch_size, tcfg.noise_dim, generator=noise_gen) for _ in range(3)]

        # discriminator step on detached fakes
        with torch.no_grad():
            x_bar = apply_mask(x_s, bundle.gen_s_to_t(x_s, z[0]))
            x_hat = apply_mask(x_bar, bundle.gen_t_to_s(x_bar, z[1]))
            x_tilde = apply_mask(x_s, bundle.gen_t_to_s(x_s, z[2]))
        d_loss = (
            adv_loss_target(bundle.disc_t(x_t), bundle.disc_t(x_bar), form=form)
            + adv_loss_source(bundle.disc_s(x_s), bundle.disc_s(x_hat), bundle.disc_s(x_tilde), form=form)
            + tcfg.lambda_acl
            * acl_loss(bundle.disc_pair(x_s, x_hat), bundle.disc_pair(x_s, x_tilde), form=form)
        )
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        g_loss, _ = _generator_objective(bundle, x_s, x_t, z, weights, mask_cfg, form)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        d_val, g_val = float(d_loss.detach()), float(g_loss.detach())
        if not (math.isfinite(d_val) and math.isfinite(g_val)):
            rescue = None
            if ckpt_path is not None:
                save_snapshot(ckpt_path)
                rescue = str(ckpt_path)
            raise TrainingDiverged(f"non-finite loss at step {step}", checkpoint=rescue)
        trace.append((step, d_val, g_val))

        if (step + 1) % tcfg.eval_every == 0 or step + 1 == tcfg.steps:
            val_loss = translation_validation_loss(bundle, val_s, val_t, cfg, cfg.seed + 17)
            val_curve.append((step + 1, val_loss))
            snapshot = {name: copy.deepcopy(m.state_dict()) for name, m in bundle.modules().items()}
            if val_loss < best_val - 1e-9:
                best_val = val_loss
                since_best = 0
            else:
                since_best += 1
                if since_best >= tcfg.patience:
                    stopped_early = True
                    break

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_translation_bundle(ckpt_path, bundle)
        write_loss_trace(out_dir / "losses.csv", trace, ["step", "d_loss", "g_loss"])
        write_loss_trace(out_dir / "val_curve.csv", val_curve, ["step", "val_loss"])
        write_run_manifest(
            out_dir,
            cfg,
            split=manifest,
            extra={"stage": "translation", "modality": tcfg.modality, "steps_run": len(trace)},
        )
    return TranslationRunResult(
        bundle=bundle,
        checkpoint_path=ckpt_path,
        loss_trace=trace,
        val_curve=val_curve,
        stopped_early=stopped_early,
    )


def convert_domain(volumes, bundle, seed: int, modality: str | None = None, direction: str = "s_to_t") -> list[VolumeRecord]:
    """Translate volumes slice-by-slice with a fresh noise draw per slice.

    Spacing and all metadata are preserved; only the domain tag flips.
    """
    if direction not in ("s_to_t", "t_to_s"):
        raise ValueError(f"unknown direction {direction!r}")
    gen_net = bundle.gen_s_to_t if direction == "s_to_t" else bundle.gen_t_to_s
    src_domain = "source_3T" if direction == "s_to_t" else "target_1p5T"
    dst_domain = "target_1p5T" if direction == "s_to_t" else "source_3T"
    noise_gen = torch.Generator().manual_seed(seed)
    bundle.eval()
    out = []
    for vol in volumes:
        if modality is not None and vol.modality != modality:
            raise ValueError(f"checkpoint was trained for {modality}, volume {vol.patient_id} is {vol.modality}")
        if vol.domain != src_domain:
            raise ValueError(f"volume {vol.patient_id} is not in the {src_domain} domain")
        translated = []
        with torch.no_grad():
            for sl in volume_to_slices(vol):
                x = torch.tensor(sl, dtype=torch.float32).reshape(1, 1, *sl.shape)
                z = torch.randn(1, bundle.config.noise_dim, generator=noise_gen)
                y = apply_mask(x, gen_net(x, z))
                translated.append(y[0, 0].numpy().astype(np.float64))
        meta = volume_metadata(vol)
        meta["domain"] = dst_domain
        out.append(slices_to_volume(translated, meta))
    return out


# --------------------------------------------------------------------------
# stage 2: classifier training


@dataclass
class ClassifierRunResult:
    model: object
    loss_trace: list[tuple]
    epoch_log: list[dict]
    uncertainty_table: UncertaintyTable | None


def _classifier_spec(cfg: ExperimentConfig) -> ClassifierSpec:
    c = cfg.classifier
    return ClassifierSpec(variant=c.variant, head=c.head, evidence_activation=c.evidence_activation)


def train_classifier(
    cfg: ExperimentConfig,
    patches_train,
    patches_val=None,
    seed_offset: int = 0,
    init_model=None,
) -> ClassifierRunResult:
    """Train one classifier on pre-built patches.

    Evidence heads use the evidential focal loss with the annealed KL term
    (decomposition logged per epoch); softmax heads use the classical
    focal loss.  Emits the full training-set uncertainty table for
    evidence heads.
    """
    ccfg = cfg.classifier
    if ccfg.gamma != 2.0:
        raise ValueError("the focusing exponent is fixed at 2")
    if not patches_train:
        raise ValueError("no training patches")
    seed = cfg.seed + seed_offset
    torch.manual_seed(seed)
    model = init_model if init_model is not None else build_classifier(_classifier_spec(cfg))
    opt = torch.optim.Adam(model.parameters(), lr=ccfg.learning_rate, weight_decay=ccfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.StepLR(opt, step_size=ccfg.lr_decay_every, gamma=ccfg.lr_decay_factor)
    x_all, y_all, _ = patches_to_tensors(patches_train)
    beta = torch.tensor(ccfg.class_weights, dtype=torch.float32)
    rng = np.random.default_rng(seed)
    trace: list[tuple] = []
    epoch_log: list[dict] = []
    step = 0

    from .coteaching import focal_loss_per_sample  # classical focal loss for softmax heads

    for epoch in range(ccfg.epochs):
        model.train()
        schedule = AnnealingSchedule(epoch, ccfg.kl_ramp_epochs)
        perm = rng.permutation(len(patches_train))
        sums = {"cls": 0.0, "kl": 0.0, "loss": 0.0}
        n_batches = 0
        for start in range(0, len(perm), ccfg.batch_size):
            idx = perm[start : start + ccfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if ccfg.head == "evidence":
                opinion = evidence_to_opinion(model(xb))
                onehot = torch.nn.functional.one_hot(yb, 2).to(xb.dtype)
                cls = evidential_focal_loss(opinion, onehot, beta).sum()
                kl_alpha = opinion.alpha if ccfg.kl_on_full_alpha else onehot + (1 - onehot) * opinion.alpha
                kl = kl_to_uniform_dirichlet(kl_alpha).sum()
                loss = (cls + schedule.lambda_t * kl) / len(idx)
                sums["cls"] += float(cls.detach())
                sums["kl"] += float(kl.detach())
            else:
                loss = focal_loss_per_sample(model(xb), yb, ccfg.class_weights).mean()
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite classifier loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append((step, loss_val))
            sums["loss"] += loss_val
            n_batches += 1
            step += 1
        scheduler.step()
        entry = {
            "epoch": epoch,
            "lambda_t": schedule.lambda_t,
            "mean_loss": sums["loss"] / n_batches,
            "cls_sum": sums["cls"],
            "kl_sum": sums["kl"],
        }
        if patches_val:
            entry["val_accuracy"] = _quick_accuracy(model, patches_val)
        epoch_log.append(entry)

    table = compute_uncertainties(model, patches_train) if ccfg.head == "evidence" else None
    return ClassifierRunResult(model=model, loss_trace=trace, epoch_log=epoch_log, uncertainty_table=table)


def _quick_accuracy(model, patches) -> float:
    x, y, _ = patches_to_tensors(patches)
    model.eval()
    with torch.no_grad():
        probs = model.predicted_probabilities(model(x))
    return float((probs.argmax(dim=-1) == y).float().mean())


@dataclass
class CoTeachRunResult:
    model: object
    model_b: object
    epoch_stats: list
    loss_trace: list[tuple]


def train_coteaching(cfg: ExperimentConfig, patches_train) -> CoTeachRunResult:
    """Co-teaching wrapper: two softmax-head peers, cross small-loss updates."""
    ct = cfg.coteaching
    torch.manual_seed(cfg.seed)
    spec = ClassifierSpec(variant=cfg.classifier.variant, head="softmax_prob")
    net_a = build_classifier(spec)
    net_b = build_classifier(spec)
    warn_if_identical(net_a, net_b)
    opt_a = torch.optim.Adam(net_a.parameters(), lr=ct.learning_rate, weight_decay=cfg.classifier.weight_decay)
    opt_b = torch.optim.Adam(net_b.parameters(), lr=ct.learning_rate, weight_decay=cfg.classifier.weight_decay)
    x_all, y_all, ids = patches_to_tensors(patches_train)
    rng = np.random.default_rng(cfg.seed)
    stats = []
    trace: list[tuple] = []
    for epoch in range(ct.epochs):
        perm = rng.permutation(len(ids))
        batches = []
        for start in range(0, len(perm), ct.batch_size):
            idx = perm[start : start + ct.batch_size]
            batches.append((x_all[idx], y_all[idx], [ids[i] for i in idx]))
        st = coteach_epoch(net_a, net_b, batches, ct, epoch, opt_a, opt_b, cfg.classifier.class_weights)
        stats.append(st)
        trace.append((epoch, st.mean_loss_a, st.mean_loss_b))
    inference = getattr(ct, "inference", "net_a")
    model = net_a if inference == "net_a" else _AveragedPair(net_a, net_b)
    return CoTeachRunResult(model=model, model_b=net_b, epoch_stats=stats, loss_trace=trace)


class _AveragedPair(torch.nn.Module):
    """Config-switchable co-teaching inference: average the peers' probabilities."""

    def __init__(self, net_a, net_b) -> None:
        super().__init__()
        self.net_a = net_a
        self.net_b = net_b
        self.spec = net_a.spec

    def forward(self, x):
        return (self.net_a(x) + self.net_b(x)) / 2.0

    def predicted_probabilities(self, outputs):
        return outputs


def run_filter_retrain(
    cfg: ExperimentConfig,
    table: UncertaintyTable,
    patches_train,
    patches_val=None,
    prior_model=None,
    out_dir=None,
) -> tuple[ClassifierRunResult, frozenset[str]]:
    """Apply the configured filtering policy, then retrain on the survivors.

    Returns the retrain result plus the removed ids.  Fresh initialization
    is the default; ``retrain_from_scratch: false`` fine-tunes
    ``prior_model`` instead.
    """
    policy = cfg.filtering
    if policy.method == "none":
        raise ValueError("filtering method is 'none'; nothing to retrain")
    all_ids = {r.patch_id for r in table}
    if policy.method == "patch":
        retained_ids = filter_patches(table, policy.rate)
        kept = [p for p in patches_train if p.patch_id in retained_ids]
        removed = frozenset(all_ids - retained_ids)
    else:
        retained_patients = filter_patients(table, policy.rate)
        kept = [p for p in patches_train if p.patient_id in retained_patients]
        removed = frozenset(r.patch_id for r in table if r.patient_id not in retained_patients)
    if not kept:
        raise ValueError("filtering removed every training patch")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_filter_decision(out_dir / "filter_decision.json", policy.method, policy.rate, removed)
    init_model = None
    if not policy.retrain_from_scratch:
        if prior_model is None:
            raise ValueError("fine-tune retraining needs the prior model")
        init_model = prior_model
    result = train_classifier(cfg, kept, patches_val, seed_offset=1000, init_model=init_model)
    return result, removed


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationResult:
    patch_report: MetricsReport
    patient_report: MetricsReport | None
    patch_table: UncertaintyTable
    patient_predictions: list
    sweep_entries: list | None

    def to_dict(self, filter_info: dict | None = None) -> dict:
        payload = {
            "patch": self.patch_report.to_dict(),
            "patient": None if self.patient_report is None else self.patient_report.to_dict(),
            "filter_rate": None,
            "filter_method": None,
        }
        if filter_info:
            payload.update(filter_info)
        return payload


def _model_patch_table(model, patches) -> UncertaintyTable:
    """Patch-level table for either head; softmax rows carry u = 1 placeholder."""
    if getattr(model.spec, "head", None) == "evidence":
        return compute_uncertainties(model, patches)
    x, y, ids = patches_to_tensors(patches)
    model.eval()
    with torch.no_grad():
        probs = model.predicted_probabilities(model(x))
    rows = [
        UncertaintyRow(patch_id=pid, patient_id=pid.split("/")[0], uncertainty=1.0, predicted_prob=float(pr), label=int(lab))
        for pid, pr, lab in zip(ids, probs[:, 1].numpy(), y.numpy())
    ]
    return UncertaintyTable(rows)


def evaluate_model(
    model,
    patches_test,
    n_bootstrap: int = 3000,
    seed: int = 0,
    ladder=None,
    out_dir=None,
    filter_info: dict | None = None,
) -> EvaluationResult:
    """Patch- and patient-level reports from one predictions pass.

    Patient labels derive from the same patch table the patch report uses.
    Evidence-head models additionally get a deployment threshold sweep
    when a ladder is supplied.  Metric-level failures (single-class test
    sets) surface as undefined report fields, never as a crash.
    """
    table = _model_patch_table(model, patches_test)
    y = [r.label for r in table]
    score = [r.predicted_prob for r in table]
    pred = [int(s > 0.5) for s in score]
    patch_report = classification_metrics(y, pred, score, n_bootstrap=n_bootstrap, seed=seed)
    try:
        preds = aggregate_patient(table)
        patient_report = classification_metrics(
            [p.label for p in preds],
            [p.label_pred for p in preds],
            [p.median_prob for p in preds],
            n_bootstrap=n_bootstrap,
            seed=seed,
        )
    except ValueError:
        preds = []
        patient_report = None
    sweep_entries = None
    if ladder is not None and getattr(model.spec, "head", None) == "evidence":
        sweep_entries = threshold_sweep(table, ladder, n_bootstrap=n_bootstrap, seed=seed)
    result = EvaluationResult(
        patch_report=patch_report,
        patient_report=patient_report,
        patch_table=table,
        patient_predictions=preds,
        sweep_entries=sweep_entries,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.json", "w") as f:
            json.dump(result.to_dict(filter_info), f, indent=2, sort_keys=True)
            f.write("\n")
        table.to_csv(out_dir / "patch_predictions.csv")
        with open(out_dir / "patient_predictions.csv", "w") as f:
            f.write("patient_id,median_prob,label_pred,mean_uncertainty,label\n")
            for p in preds:
                f.write(f"{p.patient_id},{p.median_prob!r},{p.label_pred},{p.mean_uncertainty!r},{p.label}\n")
        if sweep_entries is not None:
            sweep_to_csv(sweep_entries, out_dir / "sweep.csv")
        _write_plots(out_dir, result)
    return result


def _write_plots(out_dir: Path, result: EvaluationResult) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    y = np.array([r.label for r in result.patch_table])
    s = np.array([r.predicted_prob for r in result.patch_table])

    # ROC over patch scores
    fig, ax = plt.subplots(figsize=(4, 4))
    if y.min() != y.max():
        order = np.argsort(-s)
        tpr = np.concatenate([[0.0], np.cumsum(y[order] == 1) / max(1, (y == 1).sum())])
        fpr = np.concatenate([[0.0], np.cumsum(y[order] == 0) / max(1, (y == 0).sum())])
        ax.plot(fpr, tpr)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.7)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    fig.tight_layout()
    fig.savefig(out_dir / "roc.png", dpi=110)
    plt.close(fig)

    # reliability diagram
    conf = np.maximum(s, 1 - s)
    correct = ((s > 0.5).astype(int) == y).astype(float)
    bins = np.clip((conf * 10).astype(int), 0, 9)
    xs, accs = [], []
    for b in range(10):
        m = bins == b
        if m.any():
            xs.append(conf[m].mean())
            accs.append(correct[m].mean())
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.7)
    ax.plot(xs, accs, marker="o")
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    fig.savefig(out_dir / "reliability.png", dpi=110)
    plt.close(fig)
