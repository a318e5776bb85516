import numpy as np
import pytest

from epidg.bank import ArchSpec, build_bank
from epidg.data import DomainData, MultiDomainDataset, gen_synthetic_heterogeneous, gen_synthetic_homogeneous
from epidg.errors import ConfigError, DataError, ShapeError
from epidg.evaluate import (
    ProbeResult,
    evaluate_accuracy,
    ensemble_baseline,
    fit_linear_probe,
    hetero_probe,
    probe_predict,
    routing_analysis,
    sharpness_analysis,
)
from epidg.nn import IDENTITY, DenseLayer, Mlp, seeded_rng
from epidg.train import TrainConfig, run_training

ARCH = ArchSpec(input_dim=5, hidden_dims=(8, 4), split_point=2)


def constant_class_model(dim, k, winner=0):
    """feature = identity, classifier always argmaxes to `winner`."""
    feature = Mlp([DenseLayer(np.eye(dim), np.zeros(dim), IDENTITY)])
    w = np.zeros((dim, k))
    b = np.zeros(k)
    b[winner] = 1.0
    classifier = Mlp([DenseLayer(w, b, IDENTITY)])
    return feature, classifier


def balanced_domain(n=40, dim=3, k=4, split="test"):
    rng = seeded_rng(0)
    return DomainData(
        "d",
        rng.standard_normal((n, dim)),
        np.arange(n) % k,
        k,
        np.array([split] * n),
    )


class TestEvaluateAccuracy:
    def test_constant_predictor_on_balanced_data_hits_one_over_k(self):
        feature, classifier = constant_class_model(3, 4)
        acc = evaluate_accuracy(feature, classifier, balanced_domain())
        assert acc == 0.25

    def test_empty_split_raises(self):
        feature, classifier = constant_class_model(3, 4)
        with pytest.raises(DataError):
            evaluate_accuracy(feature, classifier, balanced_domain(split="train"), "test")

    def test_ties_break_to_lowest_class_index(self):
        # logits identical across classes: argmax must pick class 0
        feature, classifier = constant_class_model(3, 4)
        classifier.layers[0].bias[:] = 0.0
        d = balanced_domain()
        acc = evaluate_accuracy(feature, classifier, d)
        assert acc == float((d.split_arrays("test")[1] == 0).mean())

    def test_trained_model_separates_easy_data(self):
        ds = gen_synthetic_homogeneous(2, 3, 5, 200, 0.05, seeded_rng(1))
        config = TrainConfig(arch=ARCH, total_iters=300, seed=0, variant="",
                             batch_size=16, alpha=0.05, warmup_iters=0)
        bank, _ = run_training(ds, config)
        acc = evaluate_accuracy(bank.agnostic.feature, bank.agnostic.classifier,
                                ds.sources[0], "test")
        assert acc >= 0.99


class TestRoutingAnalysis:
    def trained_fixture(self, variant="FCR", iters=150):
        ds = gen_synthetic_homogeneous(3, 3, 5, 120, 0.2, seeded_rng(2))
        config = TrainConfig(arch=ARCH, total_iters=iters, seed=1, variant=variant,
                             batch_size=16, alpha=0.05, lambda1=1.0, lambda2=1.0,
                             lambda3=0.5)
        bank, _ = run_training(ds, config)
        return bank, ds

    def test_untrained_bank_near_chance(self):
        # noise drowns the class structure, so any fixed predictor sits at
        # chance on the balanced labels
        ds = gen_synthetic_homogeneous(3, 4, 5, 600, 0.2, seeded_rng(3), noise_std=10.0)
        bank = build_bank(ARCH, 3, ds.label_spaces, seeded_rng(0), homogeneous=True)
        sf, sc = routing_analysis(bank, ds)
        for m in (sf, sc):
            assert m.entries.shape == (3, 3)
            assert np.all((m.entries >= 0) & (m.entries <= 1))
            assert abs(m.entries.mean() - 0.25) < 0.12

    def test_diagonal_matches_direct_evaluation(self):
        bank, ds = self.trained_fixture()
        sf, sc = routing_analysis(bank, ds)
        for i, d in enumerate(ds.sources):
            direct = evaluate_accuracy(bank.agnostic.feature,
                                       bank.specific[i].classifier, d, "test")
            assert sf.entries[i, i] == direct

    def test_identical_branches_make_rows_constant(self):
        ds = gen_synthetic_homogeneous(3, 3, 5, 120, 0.2, seeded_rng(4))
        bank = build_bank(ARCH, 3, ds.label_spaces, seeded_rng(0), homogeneous=True)
        agn_f = bank.agnostic.feature.param_copy()
        agn_c = bank.agnostic.classifier.param_copy()
        for br in bank.specific:
            br.feature.load_param_copy(agn_f)
            br.classifier.load_param_copy(agn_c)
        sf, sc = routing_analysis(bank, ds)
        for m in (sf, sc):
            for i in range(3):
                assert len(set(m.entries[i])) == 1

    def test_heterogeneous_rejected(self):
        ds = gen_synthetic_heterogeneous(2, [3, 4], 5, 60, 0.2, seeded_rng(0), 3)
        bank = build_bank(ARCH, 2, [3, 4], seeded_rng(0))
        with pytest.raises(ConfigError):
            routing_analysis(bank, ds)

    def test_csv_shape(self):
        bank, ds = self.trained_fixture(variant="", iters=20)
        sf, _ = routing_analysis(bank, ds)
        lines = sf.to_csv().strip().split("\n")
        assert len(lines) == 4
        assert lines[0].startswith("data_domain,via_")


class TestSharpness:
    def trained(self):
        ds = gen_synthetic_homogeneous(2, 3, 5, 150, 0.1, seeded_rng(5))
        config = TrainConfig(arch=ARCH, total_iters=200, seed=2, variant="",
                             batch_size=16, alpha=0.05)
        bank, _ = run_training(ds, config)
        return bank, ds

    def test_sigma_zero_row_is_exact_and_spread_free(self):
        bank, ds = self.trained()
        curve = sharpness_analysis(
            bank.agnostic.feature, bank.agnostic.classifier, ds.target,
            sigmas=[0.0, 0.5], m_draws=5, rng=seeded_rng(0),
        )
        base = evaluate_accuracy(bank.agnostic.feature, bank.agnostic.classifier,
                                 ds.target, "test")
        assert curve.mean_acc[0] == base
        assert curve.std_acc[0] == 0.0

    def test_parameters_restored_bit_exactly(self):
        bank, ds = self.trained()
        before = [p.tobytes() for p in bank.agnostic.feature.params()
                  + bank.agnostic.classifier.params()]
        sharpness_analysis(
            bank.agnostic.feature, bank.agnostic.classifier, ds.target,
            sigmas=[0.3, 1.0], m_draws=4, rng=seeded_rng(1),
        )
        after = [p.tobytes() for p in bank.agnostic.feature.params()
                 + bank.agnostic.classifier.params()]
        assert before == after

    def test_huge_noise_drives_accuracy_to_chance(self):
        bank, ds = self.trained()
        curve = sharpness_analysis(
            bank.agnostic.feature, bank.agnostic.classifier, ds.target,
            sigmas=[0.0, 10.0], m_draws=30, rng=seeded_rng(2),
        )
        assert curve.mean_acc[0] > 0.9          # trained model
        assert abs(curve.mean_acc[1] - 1 / 3) < 0.15  # destroyed model

    def test_plot_csv_two_columns(self):
        bank, ds = self.trained()
        curve = sharpness_analysis(
            bank.agnostic.feature, bank.agnostic.classifier, ds.target,
            sigmas=[0.0, 0.1], m_draws=2, rng=seeded_rng(0),
        )
        lines = curve.to_plot_csv().strip().split("\n")
        assert lines[0] == "sigma,accuracy"
        assert all(len(l.split(",")) == 2 for l in lines[1:])
        assert "±" in lines[2]


class TestEnsemble:
    def setup_data(self):
        ds = gen_synthetic_homogeneous(2, 3, 5, 120, 0.25, seeded_rng(6))
        config = TrainConfig(arch=ARCH, total_iters=120, seed=4, variant="",
                             batch_size=16, alpha=0.05)
        return ds, config

    def test_single_model_equals_plain_agg_accuracy(self):
        ds, config = self.setup_data()
        ens = ensemble_baseline(ds, config, n_models=1)
        bank, _ = run_training(ds, config)
        direct = evaluate_accuracy(bank.agnostic.feature, bank.agnostic.classifier,
                                   ds.target, "test")
        assert ens == direct

    def test_ensemble_at_least_worst_member(self):
        ds, config = self.setup_data()
        members = []
        for k in range(3):
            from dataclasses import replace
            bank, _ = run_training(ds, replace(config, seed=config.seed + k))
            members.append(
                evaluate_accuracy(bank.agnostic.feature, bank.agnostic.classifier,
                                  ds.target, "test")
            )
        ens = ensemble_baseline(ds, config, n_models=3)
        assert ens >= min(members)

    def test_heterogeneous_rejected(self):
        ds = gen_synthetic_heterogeneous(2, [3, 4], 5, 60, 0.2, seeded_rng(0), 3)
        config = TrainConfig(arch=ARCH, total_iters=5, seed=0)
        with pytest.raises(ConfigError):
            ensemble_baseline(ds, config, 2)


class TestLinearProbe:
    def separable_data(self, n=120, d=6, k=3, seed=0):
        rng = seeded_rng(seed)
        protos = 3.0 * rng.standard_normal((k, d))
        y = np.arange(n) % k
        x = protos[y] + 0.1 * rng.standard_normal((n, d))
        return x, y

    def test_separable_data_fits_cleanly(self):
        x, y = self.separable_data()
        w = fit_linear_probe(x, y, 3)
        assert (probe_predict(w, x) == y).mean() == 1.0

    def test_deterministic(self):
        x, y = self.separable_data(seed=3)
        w1 = fit_linear_probe(x, y, 3)
        w2 = fit_linear_probe(x, y, 3)
        assert w1.tobytes() == w2.tobytes()

    def test_converges_to_tolerance(self):
        x, y = self.separable_data(seed=6)
        w = fit_linear_probe(x, y, 3, l2=1e-2, tol=1e-6)
        onehot = np.zeros((len(y), 3))
        onehot[np.arange(len(y)), y] = 1.0
        e = np.exp(x @ w - (x @ w).max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        grad = x.T @ ((p - onehot) / len(y)) + 1e-2 * w
        assert np.abs(grad).max() <= 1e-6

    def test_predictions_invariant_to_feature_scaling_with_matched_ridge(self):
        # scaling features by c corresponds to scaling the ridge weight by c^2
        x, y = self.separable_data(seed=4)
        c = 3.0
        w1 = fit_linear_probe(x, y, 3, l2=1e-2)
        w2 = fit_linear_probe(c * x, y, 3, l2=1e-2 * c**2)
        p1 = probe_predict(w1, x)
        p2 = probe_predict(w2, c * x)
        assert np.array_equal(p1, p2)
        np.testing.assert_allclose(w2 * c, w1, rtol=1e-4, atol=1e-7)


class TestHeteroProbe:
    def trained_hetero(self, variant="R"):
        ds = gen_synthetic_heterogeneous(2, [3, 4], 6, 150, 0.2, seeded_rng(7), 3)
        arch = ArchSpec(input_dim=6, hidden_dims=(10, 6), split_point=2)
        config = TrainConfig(arch=arch, total_iters=200, seed=3, variant=variant,
                             batch_size=16, alpha=0.05, lambda3=0.5)
        bank, _ = run_training(ds, config)
        return bank, ds

    def test_linear_image_target_probes_above_95(self):
        bank, ds = self.trained_hetero()
        # target whose classes are a mild linear image of source-0's data
        src = ds.sources[0]
        target = DomainData(
            "probe_target",
            0.9 * src.features + 0.05,
            src.labels,
            src.label_space,
            src.splits,
        )
        result = hetero_probe(bank, target)
        assert result.mode == "trained_only"
        assert result.accuracy >= 0.95

    def test_concat_widens_features(self):
        bank, ds = self.trained_hetero()
        baseline = bank.agnostic.feature.copy()
        x = ds.target.split_arrays("train")[0]
        feats = bank.feature_forward(bank.agnostic.feature, x)
        result = hetero_probe(bank, ds.target, mode="concat", baseline_feature=baseline)
        assert isinstance(result, ProbeResult)
        # concat dims checked implicitly: mean mode with unequal dims raises
        narrow = Mlp([DenseLayer(np.zeros((6, 3)), np.zeros(3), IDENTITY)])
        with pytest.raises(ShapeError):
            hetero_probe(bank, ds.target, mode="mean", baseline_feature=narrow)

    def test_mode_validation(self):
        bank, ds = self.trained_hetero()
        with pytest.raises(ConfigError):
            hetero_probe(bank, ds.target, mode="zzz")
        with pytest.raises(ConfigError):
            hetero_probe(bank, ds.target, mode="concat")
