from collections import Counter

import numpy as np
import pytest

from tieredquad.cohort import (CohortError, GeneratorConfig, LesionSample,
                               generate_cohort, inspect_cohort, load_cohort,
                               oversample_minority, save_cohort,
                               split_by_patient)


def small_config(seed=0, **kwargs):
    defaults = dict(n_patients=8, lesions_per_patient=(20, 40),
                    feature_dim=4, center_spread=2.0, noise=0.3,
                    ud_offset=(1.0, 1.9), seed=seed)
    defaults.update(kwargs)
    return GeneratorConfig(**defaults)


class TestGenerateCohort:
    def test_default_counts_and_imbalance(self):
        for seed in (0, 1, 2):
            cohort = generate_cohort(GeneratorConfig(seed=seed))
            report = inspect_cohort(cohort)
            assert report["n_patients"] == 37
            assert 29.0 <= report["normal_to_ud_ratio"] <= 36.0
            achieved = report["n_ud"] / report["n_samples"]
            target = 1.0 / 33.0
            assert abs(achieved - target) <= 0.1 * target

    def test_every_patient_has_a_ud(self):
        cohort = generate_cohort(small_config(seed=5))
        report = inspect_cohort(cohort)
        assert all(c["ud"] >= 1 for c in report["per_patient"].values())

    def test_zero_noise_limit_collapses_normals(self):
        cohort = generate_cohort(small_config(seed=3, noise=1e-12))
        by_patient = {}
        for s in cohort:
            if s.label == "normal":
                by_patient.setdefault(s.patient_id, []).append(s.features)
        for feats in by_patient.values():
            arr = np.array(feats)
            assert np.max(np.abs(arr - arr[0])) < 1e-9

    def test_cross_patient_overlap_property(self):
        # with offsets below twice the center spread, some patient's ud
        # should land nearer a different patient's phenotype center
        hits = 0
        seeds = range(20)
        for seed in seeds:
            cfg = GeneratorConfig(n_patients=37,
                                  lesions_per_patient=(30, 60),
                                  feature_dim=2, center_spread=1.0,
                                  noise=0.1, ud_offset=(0.8, 1.9), seed=seed)
            cohort, centers = generate_cohort(cfg, return_centers=True)
            ids = sorted(centers)
            matrix = np.array([centers[p] for p in ids])
            overlap = False
            for s in cohort:
                if s.label != "ud":
                    continue
                dists = np.linalg.norm(matrix - s.features, axis=1)
                if ids[int(np.argmin(dists))] != s.patient_id:
                    overlap = True
                    break
            hits += int(overlap)
        assert hits / len(seeds) >= 0.5

    def test_deterministic_per_seed(self, tmp_path):
        cfg = small_config(seed=11)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_cohort(generate_cohort(cfg), a)
        save_cohort(generate_cohort(cfg), b)
        assert a.read_bytes() == b.read_bytes()

    @pytest.mark.parametrize("kwargs", [
        dict(ud_fraction=0.0),
        dict(ud_fraction=0.6),
        dict(noise=0.0),
        dict(ud_offset=(2.0, 1.0)),
        dict(lesions_per_patient=(0, 5)),
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(CohortError):
            small_config(**kwargs)


class TestSplitByPatient:
    def test_ten_patients_round_free(self):
        cohort = generate_cohort(small_config(n_patients=10, seed=1))
        split = split_by_patient(cohort, (0.6, 0.2, 0.2), seed=0)
        assert (len(split.train), len(split.validation), len(split.test)) == \
            (6, 2, 2)

    def test_partition_no_leakage(self):
        cohort = generate_cohort(small_config(seed=2))
        split = split_by_patient(cohort, seed=3)
        groups = [set(split.train), set(split.validation), set(split.test)]
        assert groups[0] | groups[1] | groups[2] == \
            {s.patient_id for s in cohort}
        assert not (groups[0] & groups[1] or groups[0] & groups[2]
                    or groups[1] & groups[2])
        train_samples = {id(s) for s in split.subset(cohort, "train")}
        test_samples = {id(s) for s in split.subset(cohort, "test")}
        assert not train_samples & test_samples

    def test_every_split_has_a_ud_patient(self):
        cohort = generate_cohort(small_config(seed=4))
        split = split_by_patient(cohort, seed=1)
        for part in ("train", "validation", "test"):
            assert any(s.label == "ud" for s in split.subset(cohort, part))

    def test_deterministic(self):
        cohort = generate_cohort(small_config(seed=6))
        s1 = split_by_patient(cohort, seed=9)
        s2 = split_by_patient(cohort, seed=9)
        assert (s1.train, s1.validation, s1.test) == \
            (s2.train, s2.validation, s2.test)

    def test_impossible_ud_coverage_errors(self):
        # only one patient carries ud samples: three splits cannot all
        # contain one
        cohort = []
        for ix in range(5):
            label = "ud" if ix == 0 else "normal"
            cohort.append(LesionSample(f"P{ix}", f"P{ix}-L0", label, [0.0]))
            cohort.append(LesionSample(f"P{ix}", f"P{ix}-L1", "normal", [1.0]))
        with pytest.raises(CohortError):
            split_by_patient(cohort, (0.4, 0.3, 0.3), seed=0)

    def test_too_few_patients(self):
        cohort = [LesionSample("P0", "L0", "ud", [0.0]),
                  LesionSample("P1", "L0", "normal", [0.0])]
        with pytest.raises(CohortError):
            split_by_patient(cohort, seed=0)


class TestOversampleMinority:
    def build(self, n_ud=5, n_normal=100):
        samples = [LesionSample("P1", f"U{i}", "ud", [float(i)])
                   for i in range(n_ud)]
        samples += [LesionSample("P1", f"N{i}", "normal", [float(i)])
                    for i in range(n_normal)]
        return samples

    def test_counts(self):
        out = oversample_minority(self.build(), factor=10)
        labels = Counter(s.label for s in out)
        assert labels == {"ud": 50, "normal": 100}

    def test_factor_one_is_identity(self):
        samples = self.build()
        out = oversample_minority(samples, factor=1)
        assert [(s.patient_id, s.lesion_id, s.label, s.replica)
                for s in out] == \
            [(s.patient_id, s.lesion_id, s.label, s.replica) for s in samples]

    def test_replica_multiset_matches_ten_copies(self):
        samples = self.build(n_ud=4, n_normal=3)
        out = oversample_minority(samples, factor=10)
        replica_feats = Counter(tuple(s.features) for s in out
                                if s.label == "ud")
        original_feats = Counter(tuple(s.features) for s in samples
                                 if s.label == "ud")
        assert replica_feats == {k: 10 * v for k, v in original_feats.items()}
        # duplicates share lesion_id and carry distinct replica indices
        by_lesion = {}
        for s in out:
            if s.label == "ud":
                by_lesion.setdefault(s.lesion_id, []).append(s.replica)
        assert all(sorted(v) == list(range(10)) for v in by_lesion.values())

    def test_features_shared_not_copied(self):
        samples = self.build(n_ud=1, n_normal=0)
        out = oversample_minority(samples, factor=3)
        assert all(o.features is samples[0].features for o in out)


class TestCohortIO:
    def test_round_trip(self, tmp_path):
        cohort = generate_cohort(small_config(seed=8))
        path = tmp_path / "c.jsonl"
        save_cohort(cohort, path)
        loaded = load_cohort(path)
        assert len(loaded) == len(cohort)
        for a, b in zip(cohort, loaded):
            assert (a.patient_id, a.lesion_id, a.label) == \
                (b.patient_id, b.lesion_id, b.label)
            assert np.array_equal(a.features, b.features)

    def test_missing_label_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            '{"patient_id": "P1", "lesion_id": "L0", "label": "normal", '
            '"features": [1.0]}\n'
            '{"patient_id": "P1", "lesion_id": "L1", "features": [1.0]}\n')
        with pytest.raises(CohortError, match="line 2"):
            load_cohort(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        line = ('{"patient_id": "P1", "lesion_id": "L0", "label": "normal", '
                '"features": [1.0]}\n')
        path.write_text(line + line)
        with pytest.raises(CohortError, match="duplicate"):
            load_cohort(path)

    def test_empty_file_is_empty_cohort(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_cohort(path) == []
