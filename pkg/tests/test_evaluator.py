import csv

import numpy as np
import pytest

from pva_inpaint.evaluator import (ACCURACY_GATE, AttributeClassifier,
                                   MetricReport, attribute_agreement,
                                   frechet_distance, identity_similarity,
                                   kid_mmd, mean_of_region_values,
                                   prompt_alignment,
                                   train_attribute_classifier,
                                   train_recognizer)
from pva_inpaint.pipeline import PVAPipeline


class TestFrechet:
    def test_self_distance_zero(self):
        a = np.random.default_rng(0).normal(size=(50, 6))
        assert frechet_distance(a, a) <= 1e-8

    def test_mean_shift_closed_form(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4000, 6))
        d = np.array([1.0, -2.0, 0.5, 0.0, 0.0, 0.0])
        got = frechet_distance(a, a + d)
        np.testing.assert_allclose(got, d @ d, atol=1e-8)

    def test_covariance_scaling_case(self):
        # diag(1) vs diag(4) covariances, equal means, D_f = 2:
        # trace(1 + 4 - 2*2) per dimension -> 2 total
        rng = np.random.default_rng(2)
        base = rng.normal(size=(400_000, 2))
        got = frechet_distance(base, 2.0 * base)
        np.testing.assert_allclose(got, 2.0, atol=0.05)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(60, 4)), rng.normal(1.0, 2.0, size=(50, 4))
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-10

    def test_nonnegative_small_samples(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b = rng.normal(size=(5, 8)), rng.normal(size=(6, 8))
            assert frechet_distance(a, b) >= 0.0

    def test_minimum_count(self):
        with pytest.raises(ValueError):
            frechet_distance(np.zeros((1, 3)), np.zeros((5, 3)))


class TestKID:
    def test_hand_case(self):
        a = np.array([[0.0], [0.0]])
        b = np.array([[1.0], [1.0]])
        assert abs(kid_mmd(a, b) - 7.0) <= 1e-10

    def test_kernel_at_origin(self):
        # k(0, 0) = (0 + 1)^3 = 1; two zero sets give MMD 1 + 1 - 2 = 0
        z = np.zeros((3, 4))
        assert abs(kid_mmd(z, z)) <= 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(9, 3)), rng.normal(size=(7, 3))
        assert abs(kid_mmd(a, b) - kid_mmd(b, a)) <= 1e-12

    def test_unbiased_near_zero_on_split_halves(self):
        rng = np.random.default_rng(6)
        pool = rng.normal(size=(200, 8))
        values = []
        for _ in range(100):
            idx = rng.permutation(200)
            values.append(kid_mmd(pool[idx[:100]], pool[idx[100:]]))
        values = np.array(values)
        assert abs(values.mean()) <= 3.0 * values.std()

    def test_minimum_count(self):
        with pytest.raises(ValueError):
            kid_mmd(np.zeros((2, 3)), np.zeros((1, 3)))


class TestRecognizerTraining:
    def test_accuracy_gate_constant(self):
        assert ACCURACY_GATE == 0.9

    def test_roles_differ(self, rec_a, rec_b):
        assert (rec_a.params["W1"].data != rec_b.params["W1"].data).any()

    def test_identity_separation(self, data, rec_b):
        same, cross = [], []
        idents = data.identities("test")
        for i, ident in enumerate(idents):
            refs = data.references(ident)
            same.append(identity_similarity(refs[0], refs[1], rec_b))
            other = data.references(idents[(i + 1) % len(idents)])
            cross.append(identity_similarity(refs[0], other[0], rec_b))
        assert np.mean(same) - np.mean(cross) >= 0.2

    def test_eval_recognizer_never_enters_pipeline(self, rec_b):
        from pva_inpaint.identity import EncoderConfig, IdentityEncoder
        from pva_inpaint.model import Denoiser, DenoiserConfig
        cfg = DenoiserConfig(image_size=16, width=32, n_blocks=1, n_heads=2)
        with pytest.raises(ValueError):
            PVAPipeline(Denoiser(cfg), IdentityEncoder(
                EncoderConfig(width=32, n_heads=2)), rec_b)


class TestIdentitySimilarity:
    def test_identical_images(self, data, rec_b):
        img = data.references(data.identities()[0])[0]
        assert identity_similarity(img, img, rec_b) == pytest.approx(1.0)

    def test_range(self, data, rec_b):
        idents = data.identities()
        for a in idents[:4]:
            for b in idents[:4]:
                s = identity_similarity(data.references(a)[0],
                                        data.references(b)[0], rec_b)
                assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9

    def test_cosine_of_embeddings(self, data, rec_b):
        a = data.references(data.identities()[0])[0]
        b = data.references(data.identities()[1])[0]
        ea, eb = rec_b.embed(a[None])[0], rec_b.embed(b[None])[0]
        assert identity_similarity(a, b, rec_b) == pytest.approx(float(ea @ eb))


class TestAttributeClassifier:
    def test_alignment_tracks_truth(self, data):
        clf = train_attribute_classifier(data, seed=33)
        hits, total = 0, 0
        for ident in data.identities():
            entry = data.entry(ident)
            for path, attrs in entry["attributes"].items():
                p = prompt_alignment(data.image(path), "glasses", clf)
                hits += (p > 0.5) == bool(attrs["glasses"])
                total += 1
        assert total >= 90
        assert hits / total >= 0.9

    def test_agreement_in_unit_interval(self, data):
        clf = AttributeClassifier(seed=0)
        item = data.inference_items(data.identities()[0])[0]
        score = attribute_agreement(item["image"], item["attrs"], clf)
        assert 0.0 <= score <= 1.0

    def test_unknown_attribute_rejected(self, data):
        clf = AttributeClassifier(seed=0)
        with pytest.raises(ValueError):
            prompt_alignment(np.zeros((16, 16, 3)), "hat", clf)


class TestMetricReport:
    def _report(self):
        r = MetricReport()
        r.add("eye_brow", id_sim_mean=0.444, id_sim_sd=0.02, fid_like=7.039,
              kid_like=0.1, prompt_alignment=0.9)
        r.add("lower_face", id_sim_mean=0.613, id_sim_sd=0.02, fid_like=4.244,
              kid_like=0.2, prompt_alignment=0.8)
        r.add("whole_face", id_sim_mean=0.094, id_sim_sd=0.02, fid_like=12.301,
              kid_like=0.3, prompt_alignment=0.7)
        r.add("random", id_sim_mean=0.283, id_sim_sd=0.02, fid_like=9.383,
              kid_like=0.4, prompt_alignment=0.6)
        return r

    def test_mean_row_is_arithmetic_mean(self):
        full = self._report().with_mean_row()
        mean = full.row("mean")
        np.testing.assert_allclose(mean["id_sim_mean"], 0.3585, atol=5e-4)
        np.testing.assert_allclose(mean["fid_like"], 8.242, atol=5e-4)
        for col in MetricReport.COLUMNS:
            expect = np.mean([full.row(reg)[col] for reg in
                              ("eye_brow", "lower_face", "whole_face", "random")])
            assert mean[col] == expect

    def test_region_mean_helper(self):
        assert abs(mean_of_region_values([0.444, 0.613, 0.094, 0.283])
                   - 0.3585) <= 5e-4
        assert abs(mean_of_region_values([7.039, 4.244, 12.301, 9.383])
                   - 8.242) <= 5e-4

    def test_csv_schema(self, tmp_path):
        path = str(tmp_path / "report.csv")
        self._report().with_mean_row().to_csv(path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["region", "id_sim_mean", "id_sim_sd", "fid_like",
                           "kid_like", "prompt_alignment"]
        assert [r[0] for r in rows[1:]] == ["eye_brow", "lower_face",
                                            "whole_face", "random", "mean"]
