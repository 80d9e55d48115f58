import math

import numpy as np
import pytest

from tieredquad.cohort import LesionSample, generate_cohort, GeneratorConfig
from tieredquad.embedder import EmbedderConfig, EmbedderParams, NumericError
from tieredquad.mining import SamplerConfig
from tieredquad.pipeline import (ClassifierHead, ExperimentConfig,
                                 Stage1Config, Stage2Config, cross_entropy,
                                 predict, run_experiment, run_single,
                                 train_baseline, train_stage1, train_stage2)


def toy_cohort(seed, n_normal=16, n_ud=4):
    """Two patients, locally separable classes, patient-specific ud
    directions."""
    rng = np.random.default_rng(seed)
    cohort = []
    layout = (("P1", np.array([0.0, 0.0]), np.array([1.0, 0.0])),
              ("P2", np.array([1.0, 1.0]), np.array([0.0, 1.0])))
    for pid, center, ud_dir in layout:
        for i in range(n_normal):
            cohort.append(LesionSample(
                pid, f"{pid}-N{i}", "normal", center + 0.3 * rng.normal(size=2)))
        for i in range(n_ud):
            cohort.append(LesionSample(
                pid, f"{pid}-U{i}", "ud",
                center + 2.0 * ud_dir + 0.3 * rng.normal(size=2)))
    return cohort


def stage1_config(mode, seed, **kwargs):
    defaults = dict(
        mode=mode,
        embedder=EmbedderConfig(2, (16, 16), 8, seed=seed),
        epochs=4, batches_per_epoch=25,
        sampler=SamplerConfig(2, 10, seed), lr=0.001, seed=seed)
    defaults.update(kwargs)
    return Stage1Config(**defaults)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros(2), 0)
        assert loss == pytest.approx(math.log(2), rel=1e-12)

    def test_confident_correct(self):
        loss, _ = cross_entropy(np.array([10.0, -10.0]), 0)
        # -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
        assert loss == pytest.approx(2.0611536181902037e-09, rel=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = rng.normal(size=2) * 3
            label = int(rng.integers(2))
            _, grad = cross_entropy(logits, label)
            for j in range(2):
                h = 1e-6
                up, down = logits.copy(), logits.copy()
                up[j] += h
                down[j] -= h
                fd = (cross_entropy(up, label)[0] -
                      cross_entropy(down, label)[0]) / (2 * h)
                assert grad[j] == pytest.approx(fd, abs=1e-6)


class TestPredict:
    def identity_params(self):
        return EmbedderParams([np.eye(2), np.eye(2)],
                              [np.zeros(2), np.zeros(2)])

    def sample(self, feats, label="normal"):
        return LesionSample("P1", "L0", label, feats)

    def test_tie_predicts_normal(self):
        head = ClassifierHead(np.zeros((2, 2)), np.array([3.0, 3.0]))
        preds = predict(self.identity_params(), head,
                        [self.sample([0.5, 0.5])])
        assert preds[0][1] == "normal"

    def test_huge_ud_bias_saturates(self):
        head = ClassifierHead(np.zeros((2, 2)), np.array([0.0, 50.0]))
        preds = predict(self.identity_params(), head,
                        [self.sample([0.1, 0.9]), self.sample([5.0, 1.0])])
        assert all(label == "ud" for _, label in preds)
        assert all(p == pytest.approx(1.0, abs=1e-12) for p, _ in preds)

    def test_probabilities_normalized(self):
        rng = np.random.default_rng(1)
        head = ClassifierHead(rng.normal(size=(2, 2)), rng.normal(size=2))
        samples = [self.sample(rng.uniform(0.1, 2.0, size=2))
                   for _ in range(40)]
        emb = self.identity_params()
        for (p_ud, _), logits in zip(
                predict(emb, head, samples),
                head.logits(np.array([s.features for s in samples]))):
            z = logits - logits.max()
            p_norm = float(np.exp(z[0]) / np.exp(z).sum())
            assert p_ud + p_norm == pytest.approx(1.0, abs=1e-12)


class TestTrainStage2:
    def separable_samples(self, n=20):
        # classes separated by the sign of e_1 - e_0 (boundary through
        # the origin, so the zero-initialized head can reach it quickly)
        rng = np.random.default_rng(2)
        samples = []
        for i in range(n):
            samples.append(LesionSample(
                "P1", f"N{i}", "normal",
                np.array([2.0, 1.0]) + 0.1 * rng.uniform(size=2)))
            samples.append(LesionSample(
                "P1", f"U{i}", "ud",
                np.array([1.0, 2.0]) + 0.1 * rng.uniform(size=2)))
        return samples

    def identity_params(self):
        return EmbedderParams([np.eye(2), np.eye(2)],
                              [np.zeros(2), np.zeros(2)])

    def test_freeze_contract(self):
        params = self.identity_params()
        before = params.copy()
        train_stage2(params, self.separable_samples(),
                     Stage2Config(epochs=5, seed=0))
        assert params.allclose_bitwise(before)

    def test_initial_loss_is_ln2_on_balanced_data(self):
        result = train_stage2(self.identity_params(),
                              self.separable_samples(),
                              Stage2Config(epochs=1, seed=0))
        assert result.initial_loss == pytest.approx(math.log(2), rel=1e-12)

    def test_separable_embeddings_reach_full_train_accuracy(self):
        samples = self.separable_samples()
        params = self.identity_params()
        result = train_stage2(params, samples,
                              Stage2Config(epochs=200, seed=0))
        preds = predict(params, result.head, samples)
        accuracy = np.mean([label == s.label
                            for (_, label), s in zip(preds, samples)])
        assert accuracy == 1.0

    def test_validation_selection_records_scores(self):
        samples = self.separable_samples()
        result = train_stage2(self.identity_params(), samples,
                              Stage2Config(epochs=5, seed=0),
                              val_samples=samples)
        assert 0 <= result.best_epoch < 5
        assert all("val_balanced_accuracy" in rec for rec in result.logs)


class TestTrainStage1:
    def test_mode_degeneracy_pinned_dynamic_equals_fixed(self):
        cohort = toy_cohort(7)
        fixed_cfg = stage1_config("t_quad", seed=3)
        pinned_cfg = stage1_config("dmt_quad", seed=3, pin_dynamic_margin=True)
        p_fixed, logs_fixed, _ = train_stage1(cohort, fixed_cfg)
        p_pinned, logs_pinned, _ = train_stage1(cohort, pinned_cfg)
        assert p_fixed.allclose_bitwise(p_pinned)
        assert [r.mean_loss for r in logs_fixed] == \
            [r.mean_loss for r in logs_pinned]

    def test_single_patient_dmt_quad_skips_everything(self):
        rng = np.random.default_rng(0)
        cohort = [LesionSample("P1", f"L{i}",
                               "ud" if i % 4 == 0 else "normal",
                               rng.normal(size=2))
                  for i in range(12)]
        cfg = stage1_config("dmt_quad", seed=0,
                            sampler=SamplerConfig(1, 8, 0), epochs=2,
                            batches_per_epoch=5)
        from tieredquad.embedder import init_params
        initial = init_params(cfg.embedder)
        params, logs, _ = train_stage1(cohort, cfg)
        assert params.allclose_bitwise(initial)
        assert all(r.n_skipped_batches == cfg.batches_per_epoch for r in logs)
        assert all(r.n_instances == 0 for r in logs)
        assert all(r.counters["batches_without_cross_patient"] ==
                   cfg.batches_per_epoch for r in logs)

    def test_descent_on_planted_toy(self):
        wins = 0
        for seed in range(5):
            cohort = toy_cohort(100 + seed)
            params, logs, _ = train_stage1(cohort,
                                           stage1_config("t_quad", seed))
            wins += int(logs[-1].mean_loss < logs[0].mean_loss)
        assert wins == 5

    def test_dynamic_margin_keeps_mining_alive(self):
        # fixed margins satisfy and starve the miner as separation
        # grows; per-patient dynamic margins keep the candidate pool
        # full by scaling with the separation itself
        for seed in range(3):
            cohort = toy_cohort(200 + seed)
            _, logs_fixed, _ = train_stage1(cohort,
                                            stage1_config("t_quad", seed))
            _, logs_dyn, _ = train_stage1(cohort,
                                          stage1_config("dmt_quad", seed))
            assert logs_dyn[-1].n_instances > logs_fixed[-1].n_instances
            assert logs_dyn[-1].alpha_by_patient

    def test_deterministic_trajectories(self):
        cohort = toy_cohort(9)
        cfg = stage1_config("dmt_quad", seed=5, epochs=2)
        p1, l1, _ = train_stage1(cohort, cfg)
        p2, l2, _ = train_stage1(cohort, cfg)
        assert p1.allclose_bitwise(p2)
        assert [r.as_dict() for r in l1] == [r.as_dict() for r in l2]

    def test_resume_matches_uninterrupted_run(self):
        cohort = toy_cohort(13)
        full_cfg = stage1_config("t_quad", seed=1, epochs=4)
        p_full, logs_full, _ = train_stage1(cohort, full_cfg)

        short_cfg = stage1_config("t_quad", seed=1, epochs=2)
        p_half, logs_half, state_half = train_stage1(cohort, short_cfg)
        p_resumed, logs_rest, _ = train_stage1(
            cohort, full_cfg, init=(p_half, state_half, 2))
        assert p_resumed.allclose_bitwise(p_full)
        assert [r.epoch for r in logs_rest] == [2, 3]
        assert [r.mean_loss for r in logs_half + logs_rest] == \
            [r.mean_loss for r in logs_full]

    def test_epoch_loss_consistent_with_counters(self):
        cohort = toy_cohort(21)
        _, logs, _ = train_stage1(cohort, stage1_config("ps_triplet", seed=2))
        for rec in logs:
            assert rec.n_instances == rec.counters["selected"]
            assert np.isfinite(rec.mean_loss)

    def test_nonfinite_params_abort(self):
        cohort = toy_cohort(3)
        cfg = stage1_config("t_quad", seed=0, epochs=1)
        from tieredquad.embedder import AdamState, init_params
        params = init_params(cfg.embedder)
        params.weights[0][0, 0] = np.nan
        state = AdamState.zeros_like(params)
        with pytest.raises((NumericError, ValueError)):
            train_stage1(cohort, cfg, init=(params, state, 0))

    def test_too_few_patients_for_sampler(self):
        cohort = toy_cohort(1)
        with pytest.raises(ValueError):
            train_stage1(cohort, stage1_config(
                "t_quad", 0, sampler=SamplerConfig(4, 8, 0)))


class TestBaseline:
    def test_trains_and_predicts(self):
        cohort = toy_cohort(31)
        params, result = train_baseline(
            cohort, EmbedderConfig(2, (8, 8), 4, seed=0),
            Stage2Config(epochs=30, seed=0))
        preds = predict(params, result.head, cohort)
        assert len(preds) == len(cohort)
        assert result.initial_loss == pytest.approx(math.log(2), rel=1e-9)


def tiny_experiment_config(**kwargs):
    defaults = dict(
        modes=("baseline", "naive_triplet", "dmt_quad"),
        seeds=(0, 1, 2),
        fractions=(0.5, 0.25, 0.25),
        oversample_factor=5,
        hidden_dims=(8, 8),
        embedding_dim=4,
        stage1_epochs=2,
        batches_per_epoch=5,
        patients_per_batch=2,
        samples_per_patient=6,
        stage2_epochs=5,
    )
    defaults.update(kwargs)
    return ExperimentConfig(**defaults)


def tiny_cohort(seed=0):
    return generate_cohort(GeneratorConfig(
        n_patients=8, lesions_per_patient=(12, 20), ud_fraction=0.2,
        feature_dim=3, center_spread=2.0, noise=0.3, ud_offset=(1.0, 1.9),
        seed=seed))


class TestRunExperiment:
    def test_report_shape(self):
        reports = run_experiment(tiny_cohort(), tiny_experiment_config())
        assert set(reports) == {"baseline", "naive_triplet", "dmt_quad"}
        for report in reports.values():
            assert report.seeds == [0, 1, 2]
            for name in ("specificity", "sensitivity", "recall", "precision",
                         "f1", "auc", "accuracy"):
                entry = report.metrics[name]
                assert set(entry) == {"mean", "std", "values"}
                assert len(entry["values"]) == 3
                assert 0.0 <= entry["mean"] <= 1.0

    def test_deterministic_reports(self):
        cohort = tiny_cohort()
        cfg = tiny_experiment_config(modes=("dmt_quad",), seeds=(0, 1))
        r1 = run_experiment(cohort, cfg)
        r2 = run_experiment(cohort, cfg)
        assert r1["dmt_quad"].as_dict() == r2["dmt_quad"].as_dict()

    def test_split_shared_across_modes(self):
        cohort = tiny_cohort()
        cfg = tiny_experiment_config()
        _, art_a = run_single(cohort, cfg, "baseline", seed=1)
        _, art_b = run_single(cohort, cfg, "dmt_quad", seed=1)
        assert art_a["split"].train == art_b["split"].train
        assert art_a["split"].test == art_b["split"].test
