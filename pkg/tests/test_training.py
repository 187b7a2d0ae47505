"""Trainer-level tests: classifier runs, filter/retrain, conversion, evaluation."""

import json

import numpy as np
import pytest
import torch

from evimri.config import (
    ClassifierTrainConfig,
    DataConfig,
    ExperimentConfig,
    FilterPolicyConfig,
    TranslationTrainConfig,
    config_from_dict,
    load_config,
)
from evimri.data import synth_two_domain_dataset, patches_from_volumes, make_splits, volume_to_slices
from evimri.filtering import UncertaintyRow, UncertaintyTable
from evimri.models import build_translation_bundle, TranslationNetConfig
from evimri.training import (
    TrainingDiverged,
    audit_manifest,
    convert_domain,
    evaluate_model,
    partition_patches,
    run_filter_retrain,
    train_classifier,
    write_run_manifest,
)


def small_cfg(tmp_path=None, **classifier_kw):
    classifier = ClassifierTrainConfig(
        variant=classifier_kw.pop("variant", "mpmri"),
        head=classifier_kw.pop("head", "evidence"),
        epochs=classifier_kw.pop("epochs", 3),
        batch_size=10,
        learning_rate=1e-3,
        lr_decay_every=50,
        **classifier_kw,
    )
    return ExperimentConfig(
        workdir=str(tmp_path) if tmp_path else "runs",
        seed=5,
        data=DataConfig(paths=(), variant=classifier.variant),
        classifier=classifier,
    )


@pytest.fixture(scope="module")
def separable_patches():
    ds = synth_two_domain_dataset(16, seed=21, domains=("target_1p5T",), lesion_margin=1.2)
    return patches_from_volumes(ds.records, "mpmri")


class TestConfig:
    def test_yaml_round_trip(self, tmp_path):
        cfg = small_cfg()
        path = tmp_path / "cfg.yaml"
        cfg.to_yaml(path)
        again = load_config(path)
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            config_from_dict({"classifier": {"variant": "mpmri", "bogus": 1}})
        with pytest.raises(ValueError, match="unknown"):
            config_from_dict({"not_a_section": {}})

    def test_seed_override(self):
        cfg = small_cfg()
        assert cfg.with_seed(99).seed == 99
        assert cfg.with_seed(99).classifier == cfg.classifier

    def test_workdir_env_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EVIMRI_WORKDIR", str(tmp_path))
        cfg = small_cfg()
        assert cfg.resolved_workdir() == tmp_path / "runs"

    def test_missing_data_path_rejected(self):
        cfg = ExperimentConfig(data=DataConfig(paths=("/nonexistent/volumes.h5",)))
        with pytest.raises(FileNotFoundError):
            cfg.validate_paths()

    def test_mask_threshold_presets(self):
        assert TranslationTrainConfig(modality="T2").mask_thresholds() == (0.005, 0.1)
        assert TranslationTrainConfig(modality="ADC").mask_thresholds() == (0.001, 0.005)
        custom = TranslationTrainConfig(modality="T2", delta_min=0.1, delta_max=0.9)
        assert custom.mask_thresholds() == (0.1, 0.9)


class TestClassifierTraining:
    def test_reaches_high_accuracy_on_separable_patches(self, separable_patches):
        cfg = small_cfg(epochs=6)
        result = train_classifier(cfg, separable_patches)
        x = torch.stack(
            [torch.as_tensor(p.pixels, dtype=torch.float32).permute(2, 0, 1) for p in separable_patches]
        )
        y = torch.tensor([p.label for p in separable_patches])
        result.model.eval()
        with torch.no_grad():
            probs = result.model.predicted_probabilities(result.model(x))
        acc = float((probs.argmax(-1) == y).float().mean())
        assert acc > 0.95

    def test_emits_training_set_uncertainty_table(self, separable_patches):
        cfg = small_cfg(epochs=2)
        result = train_classifier(cfg, separable_patches)
        assert result.uncertainty_table is not None
        assert len(result.uncertainty_table) == len(separable_patches)
        ids = {r.patch_id for r in result.uncertainty_table}
        assert ids == {p.patch_id for p in separable_patches}

    def test_softmax_head_has_no_table(self, separable_patches):
        cfg = small_cfg(epochs=1, head="softmax_prob")
        result = train_classifier(cfg, separable_patches[:100])
        assert result.uncertainty_table is None

    def test_kl_share_ramps_up(self, separable_patches):
        cfg = small_cfg(epochs=3, kl_ramp_epochs=2)
        result = train_classifier(cfg, separable_patches[:200])
        lambdas = [e["lambda_t"] for e in result.epoch_log]
        assert lambdas == [0.0, 0.5, 1.0]
        assert all("kl_sum" in e and "cls_sum" in e for e in result.epoch_log)

    def test_deterministic_loss_trace(self, separable_patches):
        cfg = small_cfg(epochs=1)
        a = train_classifier(cfg, separable_patches[:120])
        b = train_classifier(cfg, separable_patches[:120])
        assert a.loss_trace[:10] == b.loss_trace[:10]

    def test_gamma_locked(self, separable_patches):
        cfg = small_cfg(gamma=1.5)
        with pytest.raises(ValueError):
            train_classifier(cfg, separable_patches[:20])


class TestFilterRetrain:
    def _table_for(self, patches, high_u_patients=()):
        rows = []
        for p in patches:
            u = 0.9 if p.patient_id in high_u_patients else 0.1
            rows.append(UncertaintyRow(p.patch_id, p.patient_id, u, 0.5, p.label))
        return UncertaintyTable(rows)

    def test_patch_policy_removal_count(self, separable_patches, tmp_path):
        cfg = small_cfg(tmp_path, epochs=1)
        cfg = ExperimentConfig(
            workdir=cfg.workdir, seed=cfg.seed, data=cfg.data, classifier=cfg.classifier,
            filtering=FilterPolicyConfig(method="patch", rate=20.0),
        )
        table = self._table_for(separable_patches)
        result, removed = run_filter_retrain(cfg, table, separable_patches, out_dir=tmp_path)
        assert len(removed) == int(np.ceil(0.2 * len(separable_patches)))
        decision = json.loads((tmp_path / "filter_decision.json").read_text())
        assert decision["policy"] == "patch"
        assert decision["n_removed"] == len(removed)

    def test_patch_vs_patient_policies_differ(self, separable_patches):
        # one high-u patch per patient: patch policy removes exactly those,
        # patient policy removes whole patients
        rows = []
        for p in separable_patches:
            u = 0.95 if p.rotation_deg == 0 else 0.1
            rows.append(UncertaintyRow(p.patch_id, p.patient_id, u, 0.5, p.label))
        table = UncertaintyTable(rows)
        base = small_cfg(epochs=1)
        patch_cfg = ExperimentConfig(
            seed=base.seed, classifier=base.classifier, filtering=FilterPolicyConfig(method="patch", rate=5.0)
        )
        patient_cfg = ExperimentConfig(
            seed=base.seed, classifier=base.classifier, filtering=FilterPolicyConfig(method="patient", rate=5.0)
        )
        _, removed_patch = run_filter_retrain(patch_cfg, table, separable_patches)
        _, removed_patient = run_filter_retrain(patient_cfg, table, separable_patches)
        assert removed_patch != removed_patient
        patients_hit = {pid.split("/")[0] for pid in removed_patient}
        assert all(sum(1 for r in removed_patient if r.startswith(p)) == 20 for p in patients_hit)

    def test_empty_retained_aborts(self, separable_patches):
        base = small_cfg(epochs=1)
        cfg = ExperimentConfig(
            seed=base.seed, classifier=base.classifier, filtering=FilterPolicyConfig(method="patient", rate=99.0)
        )
        subset = [p for p in separable_patches if p.patient_id == separable_patches[0].patient_id]
        table = self._table_for(subset)
        with pytest.raises(ValueError):
            run_filter_retrain(cfg, table, subset)

    def test_none_policy_rejected(self, separable_patches):
        base = small_cfg(epochs=1)
        cfg = ExperimentConfig(
            seed=base.seed, classifier=base.classifier, filtering=FilterPolicyConfig(method="none")
        )
        with pytest.raises(ValueError):
            run_filter_retrain(cfg, self._table_for(separable_patches), separable_patches)


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(31)
    return build_translation_bundle(TranslationNetConfig(base_width=8))


class TestConvertDomain:

    def test_shape_and_spacing_preserved(self, bundle):
        ds = synth_two_domain_dataset(10, seed=22, domains=("source_3T",), size=(64, 64, 4))
        vols = [r for r in ds.records if r.modality == "T2"][:3]
        out = convert_domain(vols, bundle, seed=1, modality="T2")
        for before, after in zip(vols, out):
            assert after.voxels.shape == before.voxels.shape
            assert after.spacing == before.spacing
            assert after.domain == "target_1p5T"
            assert after.patient_id == before.patient_id
            assert after.biopsy_location == before.biopsy_location

    def test_modality_mismatch_rejected(self, bundle):
        ds = synth_two_domain_dataset(10, seed=23, domains=("source_3T",), size=(64, 64, 4))
        adc = [r for r in ds.records if r.modality == "ADC"][:1]
        with pytest.raises(ValueError):
            convert_domain(adc, bundle, seed=1, modality="T2")

    def test_wrong_domain_rejected(self, bundle):
        ds = synth_two_domain_dataset(10, seed=24, domains=("target_1p5T",), size=(64, 64, 4))
        vols = [r for r in ds.records if r.modality == "T2"][:1]
        with pytest.raises(ValueError):
            convert_domain(vols, bundle, seed=1, modality="T2", direction="s_to_t")

    def test_deterministic_given_seed(self, bundle):
        ds = synth_two_domain_dataset(10, seed=25, domains=("source_3T",), size=(64, 64, 4))
        vols = [r for r in ds.records if r.modality == "T2"][:2]
        a = convert_domain(vols, bundle, seed=7, modality="T2")
        b = convert_domain(vols, bundle, seed=7, modality="T2")
        assert all(np.array_equal(x.voxels, y.voxels) for x, y in zip(a, b))


class TestEvaluation:
    def test_report_schema_and_consistency(self, separable_patches, tmp_path):
        cfg = small_cfg(epochs=3)
        result = train_classifier(cfg, separable_patches)
        ev = evaluate_model(
            result.model,
            separable_patches,
            n_bootstrap=100,
            ladder=(1.0, 0.68, 0.63, 0.58, 0.53),
            out_dir=tmp_path,
            filter_info={"filter_method": "patch", "filter_rate": 20.0},
        )
        payload = json.loads((tmp_path / "report.json").read_text())
        for section in ("patch", "patient"):
            for key in ("accuracy", "sensitivity", "specificity", "auc", "ece", "counts"):
                assert key in payload[section]
        assert payload["filter_rate"] == 20.0
        assert payload["filter_method"] == "patch"
        # patient labels derive from the same patch predictions
        med = {p.patient_id: p.median_prob for p in ev.patient_predictions}
        for pid, m in med.items():
            probs = sorted(r.predicted_prob for r in ev.patch_table if r.patient_id == pid)
            assert m == pytest.approx((probs[9] + probs[10]) / 2)
        assert (tmp_path / "roc.png").exists()
        assert (tmp_path / "reliability.png").exists()
        assert len((tmp_path / "sweep.csv").read_text().strip().splitlines()) == 6

    def test_single_class_test_set_does_not_crash(self, separable_patches):
        cfg = small_cfg(epochs=1)
        result = train_classifier(cfg, separable_patches[:100])
        only_pos = [p for p in separable_patches if p.label == 1][:40]
        ev = evaluate_model(result.model, only_pos, n_bootstrap=50)
        assert ev.patch_report.auc is None
        assert ev.patch_report.accuracy is not None


class TestManifest:
    def test_audit_passes_on_disjoint_sets(self, tmp_path):
        ds = synth_two_domain_dataset(12, seed=26, domains=("target_1p5T",))
        patches = patches_from_volumes(ds.records, "mpmri", augment=False)
        manifest = make_splits(ds.records, "classification", seed=0)
        parts = partition_patches(patches, manifest)
        cfg = small_cfg(tmp_path)
        write_run_manifest(
            tmp_path, cfg, split=manifest,
            extra={"trained_patch_ids": [p.patch_id for p in parts["train"]]},
        )
        audit_manifest(tmp_path)

    def test_audit_catches_test_leakage(self, tmp_path):
        ds = synth_two_domain_dataset(12, seed=27, domains=("target_1p5T",))
        patches = patches_from_volumes(ds.records, "mpmri", augment=False)
        manifest = make_splits(ds.records, "classification", seed=0)
        leaked = [p.patch_id for p in patches]  # includes test patients
        cfg = small_cfg(tmp_path)
        write_run_manifest(tmp_path, cfg, split=manifest, extra={"trained_patch_ids": leaked})
        with pytest.raises(AssertionError):
            audit_manifest(tmp_path)

    def test_manifest_contents(self, tmp_path):
        cfg = small_cfg(tmp_path)
        path = write_run_manifest(tmp_path, cfg, extra={"stage": "unit"})
        payload = json.loads(path.read_text())
        assert payload["config_hash"] == cfg.config_hash()
        assert payload["seed"] == cfg.seed
        assert payload["stage"] == "unit"
