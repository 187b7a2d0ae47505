"""Construction and contract tests for the network zoo."""

import numpy as np
import pytest
import torch

from evimri.models import (
    ClassifierSpec,
    TranslationNetConfig,
    build_classifier,
    build_translation_bundle,
    load_classifier,
    load_translation_bundle,
    save_classifier,
    save_translation_bundle,
)


def _count_params(module):
    return sum(p.numel() for p in module.parameters())


class TestClassifierSpec:
    def test_channel_contract_per_variant(self):
        assert ClassifierSpec("mpmri").input_shape == (64, 64, 2)
        assert ClassifierSpec("vol_mpmri").input_shape == (64, 64, 6)
        assert ClassifierSpec("t2_only").input_shape == (64, 64, 3)
        assert ClassifierSpec("ms_mpmri").input_shape == (64, 64, 6)
        assert ClassifierSpec("mpmri_coteaching").input_shape == (64, 64, 2)

    def test_conflicting_shape_rejected(self):
        with pytest.raises(ValueError):
            ClassifierSpec("mpmri", input_shape=(64, 64, 6))
        with pytest.raises(ValueError):
            ClassifierSpec("mpmri", input_shape=(32, 32, 2))

    def test_unknown_variant_and_head_rejected(self):
        with pytest.raises(ValueError):
            ClassifierSpec("resnet")
        with pytest.raises(ValueError):
            ClassifierSpec("mpmri", head="sigmoid")
        with pytest.raises(ValueError):
            ClassifierSpec("mpmri", num_classes=3)


class TestClassifierForward:
    def test_softmax_head_normalizes(self):
        torch.manual_seed(0)
        model = build_classifier(ClassifierSpec("mpmri", head="softmax_prob")).eval()
        out = model(torch.randn(10, 2, 64, 64))
        assert out.shape == (10, 2)
        assert torch.allclose(out.sum(dim=-1), torch.ones(10), atol=1e-6)

    @pytest.mark.parametrize("activation", ["softplus", "relu", "exp"])
    def test_evidence_head_non_negative(self, activation):
        torch.manual_seed(1)
        model = build_classifier(ClassifierSpec("mpmri", head="evidence", evidence_activation=activation)).eval()
        out = model(torch.randn(64, 2, 64, 64))
        assert torch.isfinite(out).all()
        assert (out >= 0).all()

    def test_evidence_head_finite_over_many_trials(self):
        torch.manual_seed(2)
        model = build_classifier(ClassifierSpec("mpmri", head="evidence")).eval()
        with torch.no_grad():
            for _ in range(10):
                out = model(torch.randn(100, 2, 64, 64) * 3)
                assert torch.isfinite(out).all() and (out >= 0).all()

    def test_multi_stream_weight_sharing_witness(self):
        torch.manual_seed(3)
        model = build_classifier(ClassifierSpec("ms_mpmri")).eval()
        x3 = torch.randn(4, 3, 64, 64)
        with torch.no_grad():
            f_t2 = model.extract_features(x3)
            f_adc = model.extract_features(x3)
        assert torch.equal(f_t2, f_adc)
        # identical stacks through the full forward also agree stream-wise
        x6 = torch.cat([x3, x3], dim=1)
        with torch.no_grad():
            out = model(x6)
        assert out.shape == (4, 2)

    def test_shared_extractor_param_count_matches_single_stream(self):
        ms = build_classifier(ClassifierSpec("ms_mpmri"))
        single = build_classifier(ClassifierSpec("t2_only"))
        assert _count_params(ms.extractor) == _count_params(single.extractor)

    def test_wrong_channel_count_rejected(self):
        model = build_classifier(ClassifierSpec("mpmri"))
        with pytest.raises(ValueError):
            model(torch.randn(2, 6, 64, 64))

    def test_forward_deterministic(self):
        torch.manual_seed(4)
        model = build_classifier(ClassifierSpec("vol_mpmri")).eval()
        x = torch.randn(3, 6, 64, 64)
        with torch.no_grad():
            assert torch.equal(model(x), model(x))

    def test_predicted_probabilities_for_both_heads(self):
        torch.manual_seed(5)
        soft = build_classifier(ClassifierSpec("mpmri", head="softmax_prob")).eval()
        evid = build_classifier(ClassifierSpec("mpmri", head="evidence")).eval()
        x = torch.randn(6, 2, 64, 64)
        with torch.no_grad():
            p_soft = soft.predicted_probabilities(soft(x))
            p_evid = evid.predicted_probabilities(evid(x))
        for p in (p_soft, p_evid):
            assert torch.allclose(p.sum(dim=-1), torch.ones(6), atol=1e-6)
            assert (p >= 0).all()


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(6)
    b = build_translation_bundle(TranslationNetConfig(image_size=64, base_width=8, noise_dim=16))
    b.eval()
    return b


class TestTranslationBundle:

    def test_generator_output_ranges(self, bundle):
        x = torch.rand(2, 1, 64, 64) * 2 - 1
        z = torch.randn(2, 16)
        with torch.no_grad():
            out = bundle.gen_s_to_t(x, z)
        assert out.image.shape == (2, 1, 64, 64)
        assert out.mask.shape == (2, 1, 64, 64)
        assert out.image.min() >= -1 and out.image.max() <= 1
        assert out.mask.min() >= 0 and out.mask.max() <= 1

    def test_identity_path_wiring(self, bundle):
        x = torch.rand(2, 1, 64, 64) * 2 - 1
        with torch.no_grad():
            z = bundle.enc_z_s(x)
            out = bundle.gen_t_to_s(x, z)
        assert z.shape == (2, 16)
        assert out.image.shape == x.shape

    def test_pair_discriminator_scores(self, bundle):
        a = torch.rand(2, 1, 64, 64) * 2 - 1
        b = torch.rand(2, 1, 64, 64) * 2 - 1
        with torch.no_grad():
            scores = bundle.disc_pair(a, b)
        assert scores.ndim == 4 and torch.isfinite(scores).all()
        with pytest.raises(ValueError):
            bundle.disc_pair(a, b[:, :, :32, :])

    def test_noise_dim_mismatch_rejected(self, bundle):
        x = torch.rand(2, 1, 64, 64)
        with pytest.raises(ValueError):
            bundle.gen_s_to_t(x, torch.randn(2, 8))
        with pytest.raises(ValueError):
            bundle.gen_s_to_t(x, torch.randn(3, 16))

    def test_forward_deterministic_given_explicit_noise(self, bundle):
        x = torch.rand(2, 1, 64, 64) * 2 - 1
        z = torch.randn(2, 16)
        with torch.no_grad():
            a = bundle.gen_s_to_t(x, z)
            b = bundle.gen_s_to_t(x, z)
        assert torch.equal(a.image, b.image) and torch.equal(a.mask, b.mask)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            TranslationNetConfig(image_size=48)
        with pytest.raises(ValueError):
            TranslationNetConfig(noise_dim=0)


class TestCheckpoints:
    def test_classifier_round_trip(self, tmp_path):
        torch.manual_seed(7)
        model = build_classifier(ClassifierSpec("mpmri", head="evidence")).eval()
        x = torch.randn(3, 2, 64, 64)
        with torch.no_grad():
            before = model(x)
        path = tmp_path / "clf.pt"
        save_classifier(path, model)
        reloaded = load_classifier(path)
        assert reloaded.spec == model.spec
        with torch.no_grad():
            after = reloaded(x)
        assert torch.equal(before, after)

    def test_bundle_round_trip(self, tmp_path):
        torch.manual_seed(8)
        bundle = build_translation_bundle(TranslationNetConfig(base_width=8))
        bundle.eval()
        x = torch.rand(2, 1, 64, 64) * 2 - 1
        z = torch.randn(2, 16)
        with torch.no_grad():
            before = bundle.gen_t_to_s(x, z)
        path = tmp_path / "bundle.pt"
        save_translation_bundle(path, bundle)
        reloaded = load_translation_bundle(path)
        assert reloaded.config == bundle.config
        with torch.no_grad():
            after = reloaded.gen_t_to_s(x, z)
        assert torch.equal(before.image, after.image)

    def test_kind_mismatch_rejected(self, tmp_path):
        torch.manual_seed(9)
        model = build_classifier(ClassifierSpec("mpmri"))
        path = tmp_path / "clf.pt"
        save_classifier(path, model)
        with pytest.raises(ValueError):
            load_translation_bundle(path)
