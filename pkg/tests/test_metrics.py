import csv
import math

import numpy as np
import pytest
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
from sklearn.metrics import silhouette_score

from modinfuser.data import PhantomSpec, generate_phantom
from modinfuser.metrics import (
    MS_SSIM_WEIGHTS,
    DegenerateCloudError,
    conditioned_features,
    evaluate_pack,
    identity_translate,
    l1,
    linear_probe_accuracy,
    ms_ssim,
    pca_project,
    psnr,
    read_per_slice_csv,
    silhouette,
    ssim,
    top_eigenpairs,
)
from modinfuser.model import Translator

from helpers import C1, ms_ssim_loop, ssim_terms_loop

def correlated_pairs(n=20, size=64, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        a = np.clip(rng.normal(0, 0.5, (size, size)), -1, 1)
        yield a, np.clip(a + rng.normal(0, 0.3, (size, size)), -1, 1)


@pytest.fixture(scope="module")
def oracle_pairs():
    pairs = list(correlated_pairs())
    return [(a, b, ssim_terms_loop(a, b)[0]) for a, b in pairs]


class TestPSNR:
    def test_cap(self):
        x = np.random.default_rng(0).normal(size=(8, 8))
        assert psnr(x, x) == 99.0

    def test_uniform_offset_is_exactly_20db(self):
        assert psnr(np.zeros((64, 64)), np.full((64, 64), 0.2)) == 20.0
        for a, _ in correlated_pairs(5):
            a = np.clip(a, -1, 0.8)
            assert psnr(a, a + 0.2) == 20.0

    def test_formula_and_symmetry(self):
        for a, b in correlated_pairs(20):
            mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
            assert psnr(a, b) == pytest.approx(10 * math.log10(4 / mse), abs=1e-9)
            assert psnr(a, b) == psnr(b, a)

    def test_shape_error(self):
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.zeros(4))


class TestSSIM:
    def test_loop_oracle(self, oracle_pairs):
        for a, b, ref in oracle_pairs:
            assert abs(ssim(a, b) - ref) < 1e-9

    def test_self_is_one(self):
        for a, _ in correlated_pairs(5):
            assert ssim(a, a) == pytest.approx(1.0, abs=1e-15)

    def test_constant_images(self):
        assert ssim(np.ones((16, 16)), np.zeros((16, 16))) == pytest.approx(C1 / (1 + C1), rel=1e-12)
        assert ssim(np.ones((16, 16)), np.zeros((16, 16))) == pytest.approx(3.998e-4, rel=1e-3)

    def test_symmetric_and_below_one(self, oracle_pairs):
        for a, b, _ in oracle_pairs[:5]:
            assert ssim(a, b) == ssim(b, a)
            assert ssim(a, b) < 1 - 1e-6

    def test_too_small(self):
        with pytest.raises(ValueError, match="11x11"):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))


class TestMSSSIM:
    @pytest.mark.slow
    def test_loop_oracle(self):
        for a, b in correlated_pairs(20):
            assert abs(ms_ssim(a, b) - ms_ssim_loop(a, b, 3)) < 1e-9

    def test_loop_oracle_quick(self):
        for a, b in correlated_pairs(3, seed=9):
            assert abs(ms_ssim(a, b) - ms_ssim_loop(a, b, 3)) < 1e-9

    def test_self_is_one(self):
        a = next(correlated_pairs(1))[0]
        assert ms_ssim(a, a) == pytest.approx(1.0, abs=1e-14)

    def test_weight_prefix_renormalised(self):
        a, b = next(correlated_pairs(1, seed=4))
        w = np.array(MS_SSIM_WEIGHTS[:3])
        np.testing.assert_allclose(w / w.sum(), np.array([0.0448, 0.2856, 0.3001]) / 0.6305, rtol=1e-15)
        # the three-scale result must not depend on trailing weights
        assert ms_ssim(a, b, 3) == ms_ssim(a, b, 3, weights=(*MS_SSIM_WEIGHTS[:3], 9.0, 9.0))

    def test_too_small_reports_minimum(self):
        with pytest.raises(ValueError, match="44x44"):
            ms_ssim(np.zeros((32, 32)), np.zeros((32, 32)), scales=3)


@pytest.fixture(scope="module")
def small_pack():
    return generate_phantom(PhantomSpec(seed=1), n_subjects=2, slices_per_subject=2)


class TestEvaluatePack:
    def test_pair_count(self, small_pack):
        assert len(evaluate_pack(identity_translate, small_pack).pairs()) == 12
        two = small_pack.select(np.arange(len(small_pack)))
        two.modalities, two.images = two.modalities[:2], two.images[:, :2]
        assert len(evaluate_pack(identity_translate, two).pairs()) == 2

    def test_identity_matches_data_stats(self, small_pack):
        report = evaluate_pack(identity_translate, small_pack)
        for a, b in report.pairs():
            direct = np.mean([l1(x[a], x[b]) for x in small_pack.images]) * 1000
            assert report.summary((a, b))["l1x1000"][0] == pytest.approx(direct, rel=1e-12)

    def test_rows_and_per_slice_recompute(self, small_pack, tmp_path):
        report = evaluate_pack(identity_translate, small_pack)
        report.write_csv(tmp_path / "r.csv")
        report.write_per_slice_csv(tmp_path / "s.csv")
        with open(tmp_path / "r.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 13 and rows[-1]["source"] == "all"
        per = read_per_slice_csv(tmp_path / "s.csv")
        for row in rows[:-1]:
            vals = per[(row["source"], row["target"])]
            for k, v in vals.items():
                assert float(row[f"{k}_mean"]) == float(np.mean(v))
                assert float(row[f"{k}_std"]) == float(np.std(v))

    def test_deterministic_with_model(self, small_pack):
        gen = Translator(seed=0, width=16, layers=1, heads=2)
        a = evaluate_pack(gen, small_pack).rows()
        b = evaluate_pack(gen, small_pack).rows()
        assert a == b

    def test_empty(self, small_pack):
        with pytest.raises(ValueError, match="empty"):
            evaluate_pack(identity_translate, small_pack.select([]))


class TestPCA:
    def test_line_in_5d(self):
        t = np.random.default_rng(0).normal(size=60)
        rows = np.outer(t, [1.0, 2.0, -1.0, 0.5, 3.0]) + 4.0
        cloud = pca_project(rows, out_dims=2)
        assert cloud.explained_ratio[0] == pytest.approx(1.0, abs=1e-9)

    def test_identical_rows(self):
        with pytest.raises(DegenerateCloudError):
            pca_project(np.ones((10, 3)), out_dims=2)

    def test_too_few_rows(self):
        with pytest.raises(ValueError, match="at least 50"):
            pca_project(np.random.default_rng(0).normal(size=(20, 60)))

    def test_full_rank_reconstruction(self):
        x = np.random.default_rng(1).normal(size=(100, 20))
        cloud = pca_project(x, out_dims=20)
        back = cloud.projected @ cloud.components.T + cloud.mean
        assert np.max(np.abs(back - x)) < 1e-8
        np.testing.assert_allclose(cloud.components.T @ cloud.components, np.eye(20), atol=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_eigh(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(200, 30)) * np.linspace(5, 0.1, 30)
        cov = np.cov(x.T, bias=True)
        vals, vecs, resid = top_eigenpairs(cov, 5)
        ref_vals, ref_vecs = np.linalg.eigh(cov)
        np.testing.assert_allclose(vals, ref_vals[::-1][:5], rtol=1e-9)
        overlap = np.abs(np.sum(vecs * ref_vecs[:, ::-1][:, :5], axis=0))
        np.testing.assert_allclose(overlap, 1.0, atol=1e-8)
        assert resid <= 1e-10

    def test_csv_schema(self, tmp_path):
        x = np.random.default_rng(2).normal(size=(12, 4))
        cloud = pca_project(x, [f"l{i % 3}" for i in range(12)], out_dims=2)
        cloud.write_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "label,x,y" and len(lines) == 13


class TestSeparability:
    @pytest.mark.parametrize("seed", range(3))
    def test_silhouette_matches_sklearn(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.concatenate([rng.normal(c, 1.0, size=(15, 2)) for c in (0, 3, 6)])
        labels = np.repeat(["a", "b", "c"], 15)
        assert silhouette(pts, labels) == pytest.approx(silhouette_score(pts, labels), abs=1e-12)

    def test_silhouette_needs_two_clusters(self):
        with pytest.raises(ValueError):
            silhouette(np.zeros((3, 2)), ["a"] * 3)

    def test_probe_separable(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(c, 0.2, size=(40, 5)) for c in (0, 1, 2)])
        y = np.repeat([0, 1, 2], 40)
        idx = rng.permutation(120)
        tr, te = idx[:80], idx[80:]
        assert linear_probe_accuracy(x[tr], y[tr], x[te], y[te]) == 1.0

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("dims", [4, 60])
    def test_probe_matches_sklearn_lda(self, seed, dims):
        rng = np.random.default_rng(seed)
        x = np.concatenate([rng.normal(c, 1.5, size=(20, dims)) for c in (0.0, 0.4, 0.8, 1.2)])
        y = np.repeat(["a", "b", "c", "d"], 20)
        idx = rng.permutation(80)
        tr, te = idx[:50], idx[50:]
        lda = LinearDiscriminantAnalysis(solver="lsqr", shrinkage=0.1).fit(x[tr], y[tr])
        expected = float(np.mean(lda.predict(x[te]) == y[te]))
        assert linear_probe_accuracy(x[tr], y[tr], x[te], y[te], shrinkage=0.1) == expected

    def test_conditioned_feature_rows(self, small_pack):
        gen = Translator(seed=0, width=16, layers=1, heads=2)
        rows, labels = conditioned_features(gen, small_pack)
        m = small_pack.n_modalities
        assert rows.shape == (len(small_pack) * (m + 1), 16 * 4 * 4)
        assert labels[: m + 1] == ["agnostic", *small_pack.modalities]
