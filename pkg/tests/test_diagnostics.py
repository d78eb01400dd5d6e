"""Collapse metrics: spectra, isotropy, KL, probe, export."""

import math

import numpy as np
import pytest

from adrec.diagnostics import (
    DiagnosticsReport,
    ProbeConfig,
    covariance_entropy,
    diagnose_embeddings,
    export_embeddings,
    format_comparison,
    import_embeddings,
    isotropy_score,
    kl_to_gaussian,
    linear_probe,
    load_labels,
    micro_prf,
    singular_spectrum,
    spectrum_stats,
)
from adrec.errors import DataError


def random_init_matrix(n=10_000, d=128, std=0.02, seed=0):
    return np.random.default_rng(seed).normal(0.0, std, size=(n, d))


def constructed_matrix(singulars, n_rows, seed=0):
    """Matrix with an exact, known singular spectrum."""
    rng = np.random.default_rng(seed)
    d = len(singulars)
    q_left, _ = np.linalg.qr(rng.normal(size=(n_rows, d)))
    q_right, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q_left @ np.diag(singulars) @ q_right.T


class TestSingularSpectrum:
    def test_isotropic_gram_gives_equal_singulars(self):
        e = np.vstack([2.0 * np.eye(2), np.zeros((1, 2))])  # E^T E = 4I
        np.testing.assert_allclose(singular_spectrum(e), [2.0, 2.0], atol=1e-12)

    def test_constructed_spectrum_recovered(self):
        target = np.array([3.0, 2.0, 1.0, 0.5])
        e = constructed_matrix(target, n_rows=50)
        got = singular_spectrum(e)
        np.testing.assert_allclose(got, target, rtol=1e-8)

    def test_matches_svd_oracle(self, rng):
        e = rng.normal(size=(40, 12))
        np.testing.assert_allclose(singular_spectrum(e), np.linalg.svd(e, compute_uv=False),
                                   rtol=1e-8)

    def test_rank_deficient_allows_zero_singulars(self):
        e = np.zeros((10, 3))
        e[:, 0] = np.arange(10)
        sv = singular_spectrum(e)
        assert sv[0] > 0 and sv[1] == pytest.approx(0.0, abs=1e-9) and sv[2] == pytest.approx(0.0, abs=1e-9)

    def test_needs_nrows_at_least_d(self):
        with pytest.raises(DataError, match="rows"):
            singular_spectrum(np.zeros((3, 5)))


class TestSpectrumStats:
    def test_uniform_spectrum_maximizes_entropy(self):
        sv = np.full(128, 3.3)
        variance, entropy = spectrum_stats(sv)
        assert variance == 0.0
        assert entropy == pytest.approx(math.log(128), abs=1e-12)
        assert entropy == pytest.approx(4.852, abs=1e-3)

    def test_single_nonzero_entropy_zero(self):
        variance, entropy = spectrum_stats(np.array([5.0, 0.0, 0.0]))
        assert entropy == 0.0

    def test_hand_computed_case(self):
        variance, entropy = spectrum_stats(np.array([2.0, 1.0, 1.0]))
        assert entropy == pytest.approx(1.5 * math.log(2.0), rel=1e-12)
        assert variance == pytest.approx(2.0 / 9.0, rel=1e-12)

    def test_all_zero_spectrum_warns_and_returns_zero(self, caplog):
        with caplog.at_level("WARNING"):
            variance, entropy = spectrum_stats(np.zeros(4))
        assert entropy == 0.0 and "all-zero" in caplog.text

    def test_entropy_bounded_by_log_count(self, rng):
        for _ in range(10):
            sv = np.abs(rng.normal(size=rng.integers(2, 40)))
            _, entropy = spectrum_stats(sv)
            assert entropy <= math.log(len(sv)) + 1e-12


class TestCovarianceEntropy:
    def test_isotropic_sample_near_log_d(self):
        e = random_init_matrix(n=10_000, d=128, std=1.0, seed=3)
        assert abs(covariance_entropy(e) - math.log(128)) < 0.02

    def test_rank_one_data_near_zero(self, rng):
        direction = rng.normal(size=16)
        coeffs = rng.normal(size=(500, 1))
        e = coeffs * direction
        assert covariance_entropy(e) < 1e-8


class TestIsotropyScore:
    def test_isotropic_rows_score_near_one(self):
        rng = np.random.default_rng(5)
        e = rng.normal(size=(10_000, 16))
        e /= np.linalg.norm(e, axis=1, keepdims=True)  # uniform on the sphere
        assert isotropy_score(e) >= 0.9

    def test_dominant_direction_collapses_score(self):
        rng = np.random.default_rng(6)
        e = rng.normal(size=(2_000, 16))
        e[:, 0] *= 100.0
        assert isotropy_score(e) < 0.05

    def test_overflow_guarded(self):
        rng = np.random.default_rng(7)
        e = rng.normal(size=(64, 8)) * 500.0  # exp would overflow without the shift
        score = isotropy_score(e)
        assert 0.0 < score <= 1.0 and np.isfinite(score)


class TestKlToGaussian:
    def test_exactly_isotropic_covariance_gives_zero(self):
        # 2D points with sample covariance exactly s^2 I
        a = math.sqrt(1.5)
        e = np.array([[a, 0.0], [-a, 0.0], [0.0, a], [0.0, -a], [0.0, 0.0]])
        kl, floored = kl_to_gaussian(e)
        assert kl == pytest.approx(0.0, abs=1e-12)
        assert not floored

    def test_diag_4_1_closed_form(self):
        # sample covariance exactly diag(4, 1) with N-1 = 3 denominator ->
        # need sum of squares 12 and 3 over 4 symmetric points
        ax = math.sqrt(6.0)
        ay = math.sqrt(1.5)
        e = np.array([[ax, 0.0], [-ax, 0.0], [0.0, ay], [0.0, -ay]])
        cov = (e - e.mean(0)).T @ (e - e.mean(0)) / 3
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0]), atol=1e-12)
        kl, _ = kl_to_gaussian(e)
        expected = 0.5 * (2 * math.log(2.5) - math.log(4.0))
        assert kl == pytest.approx(expected, rel=1e-12)
        assert kl == pytest.approx(0.2231, abs=1e-4)

    def test_rank_deficiency_flagged(self):
        e = np.zeros((40, 4))
        e[:, 0] = np.arange(40.0)
        kl, floored = kl_to_gaussian(e)
        assert floored and kl > 0


class TestBatteryInvariants:
    def test_random_init_signature(self):
        e = random_init_matrix(seed=11)
        report = diagnose_embeddings(e, source="random-init")
        assert abs(report.sv_entropy - math.log(128)) < 0.02
        assert report.isotropy > 0.5
        assert report.kl_to_gaussian < 1.0

    def test_monotone_sensitivity_to_directional_scaling(self):
        e = random_init_matrix(n=3_000, d=16, std=1.0, seed=12)
        variances, isotropies = [], []
        for s in (1.0, 2.0, 10.0, 100.0):
            scaled = e.copy()
            scaled[:, 0] *= s
            variances.append(spectrum_stats(singular_spectrum(scaled))[0])
            isotropies.append(isotropy_score(scaled))
        assert variances[0] < variances[1] < variances[2] < variances[3]
        assert isotropies[0] > isotropies[1] > isotropies[2] > isotropies[3]

    def test_row_permutation_invariance(self, rng):
        e = rng.normal(size=(300, 8))
        perm = rng.permutation(300)
        a = diagnose_embeddings(e)
        b = diagnose_embeddings(e[perm])
        assert a.top5_singular == pytest.approx(b.top5_singular, rel=1e-10)
        assert a.sv_variance == pytest.approx(b.sv_variance, rel=1e-10)
        assert a.cov_entropy == pytest.approx(b.cov_entropy, rel=1e-10)
        assert a.isotropy == pytest.approx(b.isotropy, rel=1e-10)
        assert a.kl_to_gaussian == pytest.approx(b.kl_to_gaussian, rel=1e-10)

    def test_report_serialization(self, tmp_path):
        report = diagnose_embeddings(random_init_matrix(n=500, d=16), source="x")
        report.save(tmp_path / "d.json")
        import json

        loaded = json.loads((tmp_path / "d.json").read_text())
        assert loaded["source"] == "x"
        assert len(loaded["top5_singular"]) == 5

    def test_comparison_table(self):
        a = diagnose_embeddings(random_init_matrix(n=500, d=16, seed=1), source="stage1")
        b = diagnose_embeddings(random_init_matrix(n=500, d=16, seed=2), source="stage3")
        table = format_comparison([a, b])
        assert "stage1" in table and "stage3" in table and "isotropy" in table


class TestLinearProbe:
    def test_separable_sign_pattern_reaches_high_f1(self):
        rng = np.random.default_rng(20)
        n, d, c = 1200, 32, 26
        e = rng.normal(size=(n, d))
        labels = (e[:, :c] > 0).astype(float)
        p, r, f1 = linear_probe(e, labels, ProbeConfig(epochs=20, lr=0.01, seed=1))
        assert f1 > 0.95

    def test_identical_embeddings_bounded_by_prior_predictor(self):
        rng = np.random.default_rng(21)
        n, c = 800, 6
        e = np.ones((n, 16))
        labels = (rng.random(size=(n, c)) < np.array([0.9, 0.7, 0.5, 0.3, 0.1, 0.05])).astype(float)
        p, r, f1 = linear_probe(e, labels, ProbeConfig(epochs=20, lr=0.01, seed=2))

        # best micro-F1 any constant predictor can reach: predict 1 for the
        # j densest classes, 0 elsewhere
        counts = labels.sum(axis=0)
        order = np.argsort(-counts)
        best = 0.0
        total_pos = counts.sum()
        for j in range(c + 1):
            tp = counts[order[:j]].sum()
            fp = j * n - tp
            fn = total_pos - tp
            if tp > 0:
                prec, rec = tp / (tp + fp), tp / (tp + fn)
                best = max(best, 2 * prec * rec / (prec + rec))
        assert f1 <= best + 1e-9

    def test_micro_prf_hand_case(self):
        pred = np.array([[1, 0], [1, 1]])
        truth = np.array([[1, 1], [0, 1]])
        p, r, f1 = micro_prf(pred, truth)
        assert p == pytest.approx(2 / 3)
        assert r == pytest.approx(2 / 3)
        assert f1 == pytest.approx(2 / 3)

    def test_label_file_loading(self, tmp_path):
        path = tmp_path / "labels.tsv"
        path.write_text("itemA\tJazz|Folk\nitemB\tJazz\nitemX\tMetal\n")
        vocab = {"itemA": 1, "itemB": 2, "itemC": 3}
        y, classes, n_unlabeled, mask = load_labels(path, vocab)
        assert classes == ["Folk", "Jazz", "Metal"]
        assert n_unlabeled == 1  # itemC
        assert mask.tolist() == [True, True, False]
        np.testing.assert_array_equal(y, [[1, 1, 0], [0, 1, 0]])

    def test_missing_label_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_labels(tmp_path / "none.tsv", {"a": 1})


class TestExport:
    def test_round_trip_full_precision(self, tmp_path, rng):
        e = rng.normal(size=(20, 8))
        export_embeddings(e, tmp_path / "e.csv")
        back = import_embeddings(tmp_path / "e.csv")
        np.testing.assert_array_equal(back, e)
        assert len((tmp_path / "e.csv").read_text().splitlines()) == 21  # header + N

    def test_normalized_rows_unit_norm(self, tmp_path, rng):
        e = rng.normal(size=(15, 6))
        export_embeddings(e, tmp_path / "e.csv", normalize=True)
        back = import_embeddings(tmp_path / "e.csv")
        np.testing.assert_allclose(np.linalg.norm(back, axis=1), 1.0, atol=1e-12)
