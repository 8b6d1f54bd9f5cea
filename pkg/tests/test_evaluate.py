"""Verification metrics, probes, retrieval, sweep bookkeeping, and reports."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from dagfaces.evaluate import (
    EvalReport,
    InsufficientPairsError,
    attribute_probe,
    attribute_probe_baseline,
    disentanglement_probe,
    evaluate_model,
    gallery_probe_split,
    lambda_sweep,
    make_verification_pairs,
    nearest_neighbor_gallery,
    pair_scores,
    rank1_identification,
    retrieval_sheet,
    triplet_similarities,
    verification_accuracy,
    verification_roc,
    write_report_csv,
    write_roc_csv,
    write_sweep_csv,
)
from dagfaces.net import NetConfig, init_params
from dagfaces.seeding import STREAM_FOLDS, keyed_rng
from dagfaces.train import TrainConfig, build_triplets

from _oracles import (
    cos_oracle,
    rank1_oracle,
    roc_exhaustive,
    tar_at_far_oracle,
    verification_accuracy_oracle,
)

SMALL_NET = NetConfig(
    input_size=(32, 32, 1),
    trunk=("conv:4:2", "conv:8:2"),
    d=4,
    d_prime=8,
    n_classes=8,
)


class TestVerificationPairs:
    def test_pair_structure(self):
        labels = [0, 0, 0, 1, 1, 2]
        pairs = make_verification_pairs(labels, seed=0)
        # 3 same-id pairs within identity 0, 1 within identity 1.
        assert pairs.genuine.shape == (4, 2)
        assert pairs.impostor.shape == (4, 2)
        arr = np.asarray(labels)
        assert np.all(arr[pairs.genuine[:, 0]] == arr[pairs.genuine[:, 1]])
        assert np.all(arr[pairs.impostor[:, 0]] != arr[pairs.impostor[:, 1]])

    def test_deterministic(self):
        labels = [0, 0, 1, 1, 2, 2, 3, 3]
        a = make_verification_pairs(labels, seed=5)
        b = make_verification_pairs(labels, seed=5)
        assert np.array_equal(a.impostor, b.impostor)

    def test_uses_all_impostors_when_scarce(self):
        pairs = make_verification_pairs([0, 0, 0, 1], seed=0)
        assert pairs.genuine.shape[0] == 3
        assert pairs.impostor.shape[0] == 3

    def test_degenerate_labels_rejected(self):
        with pytest.raises(InsufficientPairsError):
            make_verification_pairs([0, 0, 0], seed=0)
        with pytest.raises(InsufficientPairsError):
            make_verification_pairs([0, 1], seed=0)  # no genuine pair
        with pytest.raises(InsufficientPairsError):
            make_verification_pairs([0], seed=0)


class TestRoc:
    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            gen = rng.normal(0.5, 0.3, size=30)
            imp = rng.normal(-0.1, 0.3, size=40)
            curve = verification_roc(gen, imp)
            scores = np.concatenate([gen, imp])
            genuine = np.concatenate([np.ones(30, bool), np.zeros(40, bool)])
            t_o, far_o, tar_o = roc_exhaustive(scores, genuine)
            np.testing.assert_allclose(curve.thresholds, t_o)
            np.testing.assert_allclose(curve.far, far_o, atol=1e-12)
            np.testing.assert_allclose(curve.tar, tar_o, atol=1e-12)

    def test_endpoints_and_monotonicity(self):
        curve = verification_roc([0.9, 0.8], [0.1, 0.2, 0.3])
        assert curve.far[0] == 0.0
        assert curve.far[-1] == 1.0 and curve.tar[-1] == 1.0
        assert np.all(np.diff(curve.far) >= 0)
        assert np.all(np.diff(curve.tar) >= 0)

    def test_tied_scores(self):
        curve = verification_roc([0.5, 0.5], [0.5, 0.5])
        # One finite threshold (0.5) rejecting everything, then -inf.
        assert curve.thresholds.size == 2
        assert curve.tar[0] == 0.0 and curve.far[0] == 0.0

    def test_tar_at_far_matches_oracle(self):
        rng = np.random.default_rng(1)
        gen = rng.normal(0.4, 0.4, size=25)
        imp = rng.normal(0.0, 0.4, size=50)
        curve = verification_roc(gen, imp)
        scores = np.concatenate([gen, imp])
        genuine = np.concatenate([np.ones(25, bool), np.zeros(50, bool)])
        for target in (1e-2, 1e-1, 0.5):
            assert curve.tar_at_far(target) == pytest.approx(
                tar_at_far_oracle(scores, genuine, target)
            )

    def test_separated_scores_give_perfect_tar(self):
        curve = verification_roc([0.9, 0.8, 0.7], [0.1, 0.0])
        assert curve.tar_at_far(1e-3) == 1.0

    def test_validation(self):
        with pytest.raises(InsufficientPairsError):
            verification_roc([], [0.1])
        with pytest.raises(ValueError):
            verification_roc([np.nan], [0.1])


class TestVerificationAccuracy:
    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            n = 40
            scores = rng.normal(size=n)
            genuine = rng.random(n) > 0.5
            if genuine.all() or not genuine.any():
                continue
            folds = 5
            got = verification_accuracy(scores, genuine, folds=folds, seed=trial)
            order = keyed_rng(STREAM_FOLDS, trial, 0).permutation(n)
            fold_of = np.empty(n, dtype=np.int64)
            fold_of[order] = np.arange(n) % folds
            want = verification_accuracy_oracle(scores, genuine, fold_of)
            assert got == pytest.approx(want, abs=1e-12)

    def test_separable_scores_score_one(self):
        # Repeated score values keep every held-out point on the same side of
        # the threshold its training folds pick.
        scores = np.array([0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.9, 0.1])
        genuine = scores > 0.5
        assert verification_accuracy(scores, genuine, folds=4, seed=0) == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            verification_accuracy([0.5] * 4, [True] * 3, folds=2)
        with pytest.raises(ValueError):
            verification_accuracy([0.5] * 4, [True, False, True, False], folds=5)


class TestRank1:
    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        gallery = rng.normal(size=(8, 5))
        g_labels = np.arange(8) % 4
        probes = gallery[g_labels] + rng.normal(scale=0.4, size=(8, 5))
        got = rank1_identification(gallery, g_labels, probes, g_labels)
        want = rank1_oracle(gallery, g_labels, probes, g_labels)
        assert got == pytest.approx(want)

    def test_ties_pick_lowest_gallery_index(self):
        gallery = np.array([[1.0, 0.0], [1.0, 0.0]])
        probes = np.array([[2.0, 0.0]])
        acc = rank1_identification(gallery, [7, 8], probes, [8])
        assert acc == 0.0  # the tie goes to index 0 with label 7

    def test_exclude_self(self):
        emb = np.array([[1.0, 0.0], [0.99, 0.01], [0.0, 1.0], [0.01, 0.99]])
        labels = [0, 0, 1, 1]
        assert rank1_identification(emb, labels, emb, labels, exclude_self=True) == 1.0
        with pytest.raises(ValueError):
            rank1_identification(emb, labels, emb[:2], labels[:2], exclude_self=True)

    def test_missing_probe_identity_rejected(self):
        with pytest.raises(ValueError):
            rank1_identification(np.eye(2), [0, 1], np.eye(2), [0, 5])


class TestGalleryProbeSplit:
    def test_first_record_per_identity(self, small_dataset_reloaded):
        records = small_dataset_reloaded.load_records("train")
        gallery, probes = gallery_probe_split(records)
        assert len(gallery) == len({r.identity for r in records})
        seen = {records[i].identity for i in gallery}
        assert seen == {r.identity for r in records}
        firsts = {}
        for i, rec in enumerate(records):
            firsts.setdefault(rec.identity, i)
        assert sorted(gallery) == sorted(firsts.values())
        assert len(gallery) + len(probes) == len(records)

    def test_no_probes_left(self, small_dataset_reloaded):
        records = small_dataset_reloaded.load_records("train")
        one_each = [records[i] for i in gallery_probe_split(records)[0]]
        with pytest.raises(ValueError):
            gallery_probe_split(one_each)


class TestDisentanglementProbe:
    def test_recovers_linear_factors(self):
        rng = np.random.default_rng(4)
        latents = rng.uniform(size=(40, 3))
        mix = rng.normal(size=(3, 6))
        # Tiny isotropic noise keeps the design full rank (a pure rank-3
        # embedding would route through the ridge fallback).
        emb = latents @ mix + 0.5 + rng.normal(scale=1e-3, size=(40, 6))
        probes = disentanglement_probe(
            {"geometry": emb}, latents, ("a", "b", "c"), folds=4, seed=0
        )
        assert probes.mean_heldout("geometry") > 0.999
        assert not any(probes.ridge_used["geometry"].values())

    def test_unrelated_embedding_scores_low(self):
        rng = np.random.default_rng(5)
        latents = rng.uniform(size=(40, 2))
        emb = rng.normal(size=(40, 4))
        probes = disentanglement_probe(
            {"appearance": emb}, latents, ("a", "b"), folds=4, seed=0
        )
        assert probes.mean_heldout("appearance") < 0.3

    def test_rank_deficient_falls_back_to_ridge(self):
        rng = np.random.default_rng(6)
        latents = rng.uniform(size=(20, 1))
        base = rng.normal(size=(20, 2))
        emb = np.concatenate([base, base[:, :1]], axis=1)  # duplicated column
        probes = disentanglement_probe({"geometry": emb}, latents, ("a",), folds=2)
        assert probes.ridge_used["geometry"]["a"]

    def test_group_folds_prevent_cluster_lookup(self):
        # A factor constant within groups is solvable from record-level folds
        # by any group-discriminating embedding, but not from group folds.
        rng = np.random.default_rng(7)
        groups = np.repeat(np.arange(8), 5)
        latents = rng.uniform(size=(8, 1))[groups]
        emb = np.eye(8)[groups] + rng.normal(scale=0.01, size=(40, 8))
        leaky = disentanglement_probe({"e": emb}, latents, ("f",), folds=4, seed=0)
        grouped = disentanglement_probe(
            {"e": emb}, latents, ("f",), folds=4, seed=0, groups=groups
        )
        assert leaky.heldout_r2["e"]["f"] > 0.9
        assert grouped.heldout_r2["e"]["f"] < 0.5

    def test_validation(self):
        latents = np.zeros((10, 1))
        emb = np.zeros((10, 2))
        with pytest.raises(ValueError):
            disentanglement_probe({"e": emb}, latents, ("a", "b"), folds=2)
        with pytest.raises(ValueError):
            disentanglement_probe({"e": emb}, latents, ("a",), folds=8)
        with pytest.raises(ValueError):
            disentanglement_probe(
                {"e": emb}, latents, ("a",), folds=2, groups=np.zeros(10, dtype=int)
            )
        with pytest.raises(ValueError):
            disentanglement_probe({"e": emb[:5]}, latents, ("a",), folds=2)


class TestRetrieval:
    def test_self_is_first_and_ties_break_low(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        rows = nearest_neighbor_gallery(emb, [1], k=3)
        # Cosine ties between rows 0 and 1; the lower index leads.
        assert rows == [[0, 1, 2]]

    def test_k_truncated_with_warning(self, caplog):
        emb = np.eye(3)
        with caplog.at_level("WARNING"):
            rows = nearest_neighbor_gallery(emb, [0], k=10)
        assert len(rows[0]) == 3
        assert any("truncating" in r.message for r in caplog.records)

    def test_k_validation(self):
        with pytest.raises(ValueError):
            nearest_neighbor_gallery(np.eye(2), [0], k=0)

    def test_sheet_layout(self, small_dataset_reloaded):
        records = small_dataset_reloaded.load_records("train")[:4]
        sheet = retrieval_sheet(records, [[0, 1], [2, 3]])
        assert sheet.height == 2 * 32 + 3
        assert sheet.width == 2 * 32 + 3


class TestAttributeProbe:
    def test_separable_features(self):
        rng = np.random.default_rng(8)
        y_tr = (rng.random((60, 2)) > 0.5).astype(np.int64)
        y_te = (rng.random((30, 2)) > 0.5).astype(np.int64)
        x_tr = np.concatenate([y_tr * 2.0 - 1.0, rng.normal(size=(60, 2))], axis=1)
        x_te = np.concatenate([y_te * 2.0 - 1.0, rng.normal(size=(30, 2))], axis=1)
        result = attribute_probe(x_tr, y_tr, x_te, y_te, epochs=30)
        assert result.mean_accuracy > 0.95
        assert not result.skipped.any()

    def test_uninformative_features_stay_near_chance(self):
        rng = np.random.default_rng(9)
        y_tr = (rng.random((80, 2)) > 0.5).astype(np.int64)
        y_te = (rng.random((80, 2)) > 0.5).astype(np.int64)
        x_tr = rng.normal(size=(80, 4))
        x_te = rng.normal(size=(80, 4))
        result = attribute_probe(x_tr, y_tr, x_te, y_te, epochs=20)
        assert 0.3 < result.mean_accuracy < 0.7

    def test_single_class_attribute_skipped(self):
        y_tr = np.column_stack([np.zeros(20, np.int64), np.arange(20) % 2])
        y_te = np.column_stack([np.ones(10, np.int64), np.arange(10) % 2])
        x_tr = np.column_stack([np.zeros(20), y_tr[:, 1] * 2.0 - 1.0])
        x_te = np.column_stack([np.zeros(10), y_te[:, 1] * 2.0 - 1.0])
        result = attribute_probe(x_tr, y_tr, x_te, y_te, names=("flat", "live"))
        assert result.skipped.tolist() == [True, False]
        assert np.isnan(result.accuracy[0])
        assert result.mean_accuracy == result.accuracy[1]

    def test_all_skipped_mean_raises(self):
        y = np.zeros((10, 1), np.int64)
        result = attribute_probe(np.zeros((10, 2)), y, np.zeros((4, 2)), y[:4])
        with pytest.raises(ValueError):
            _ = result.mean_accuracy

    def test_label_shape_validation(self):
        with pytest.raises(ValueError):
            attribute_probe(
                np.zeros((4, 2)),
                np.zeros(4, np.int64),
                np.zeros((4, 2)),
                np.zeros((4, 1), np.int64),
            )

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        y_tr = (rng.random((40, 2)) > 0.5).astype(np.int64)
        y_te = (rng.random((20, 2)) > 0.5).astype(np.int64)
        x_tr = rng.normal(size=(40, 3))
        x_te = rng.normal(size=(20, 3))
        a = attribute_probe(x_tr, y_tr, x_te, y_te, epochs=10)
        b = attribute_probe(x_tr, y_tr, x_te, y_te, epochs=10)
        assert np.array_equal(a.accuracy, b.accuracy)

    def test_permutation_baseline_hovers_at_chance(self):
        rng = np.random.default_rng(11)
        y_tr = (rng.random((60, 2)) > 0.5).astype(np.int64)
        y_te = (rng.random((40, 2)) > 0.5).astype(np.int64)
        x_tr = np.concatenate([y_tr * 2.0 - 1.0], axis=1).astype(float)
        x_te = np.concatenate([y_te * 2.0 - 1.0], axis=1).astype(float)
        baseline = attribute_probe_baseline(
            x_tr, y_tr, x_te, y_te, n_permutations=8, epochs=10
        )
        assert baseline.shape == (8,)
        assert 0.3 < baseline.mean() < 0.7
        again = attribute_probe_baseline(
            x_tr, y_tr, x_te, y_te, n_permutations=8, epochs=10
        )
        assert np.array_equal(baseline, again)


class TestPairScores:
    def test_cosine_per_pair(self):
        rng = np.random.default_rng(12)
        emb = rng.normal(size=(6, 4))
        pairs = np.array([[0, 1], [2, 5]])
        got = pair_scores(emb, pairs)
        assert got[0] == pytest.approx(cos_oracle(emb[0], emb[1]))
        assert got[1] == pytest.approx(cos_oracle(emb[2], emb[5]))


class TestLambdaSweep:
    def test_smoke_and_grid(self, small_dataset):
        base = TrainConfig(epochs=1, pool_size=50, net=SMALL_NET)
        result = lambda_sweep(small_dataset, base, [0.0, 1.3], [0.75], seeds=[0])
        assert result.lambda_a_values == (0.0, 1.3)
        assert len(result.cells) == 2
        assert all(c.status == "ok" for c in result.cells)
        grid = result.mean_grid()
        assert grid.shape == (2, 1)
        assert np.isfinite(grid).all()
        assert np.all((grid >= 0) & (grid <= 1))
        # Distinct weight settings get distinct config fingerprints.
        assert result.cells[0].config_hash != result.cells[1].config_hash

    def test_failed_cells_are_isolated(self, small_dataset):
        bad_net = dataclasses.replace(SMALL_NET, input_size=(16, 16, 1))
        base = TrainConfig(epochs=1, pool_size=50, net=bad_net)
        result = lambda_sweep(small_dataset, base, [0.0], [0.0], seeds=[0])
        assert result.cells[0].status == "failed"
        assert result.cells[0].message
        assert np.isnan(result.mean_grid()).all()

    def test_negative_weights_rejected(self, small_dataset):
        with pytest.raises(ValueError):
            lambda_sweep(small_dataset, TrainConfig(), [-1.0], [0.0], seeds=[0])

    def test_sweep_csv(self, small_dataset, tmp_path):
        base = TrainConfig(epochs=1, pool_size=50, net=SMALL_NET)
        result = lambda_sweep(small_dataset, base, [0.0], [0.0], seeds=[0])
        write_sweep_csv(result, tmp_path / "sweep.csv")
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "lambda_a,lambda_g,seed,accuracy,status,config,message"
        assert len(lines) == 2


@pytest.fixture(scope="module")
def report(small_dataset):
    triplets = build_triplets(small_dataset, pool_size=2000, seed=0)
    params = init_params(SMALL_NET, 0)
    return evaluate_model(
        params,
        small_dataset,
        triplets.frame,
        seed=0,
        config_hash="cafe",
        pool_size=50,
        probe_folds=2,
        verification_folds=2,
        attribute_epochs=5,
    )


class TestEvaluateModel:
    def test_report_structure(self, report):
        assert report.config_hash == "cafe"
        assert report.n_test_records == 10
        assert set(report.rank1) == {"appearance", "geometry", "combined"}
        assert set(report.verification) == {"appearance", "geometry", "combined"}
        for table in report.tar_at_far.values():
            assert set(table) == {"1e-02", "1e-03"}
        assert np.isfinite(report.triplet_geometry_cos)
        assert np.isfinite(report.triplet_appearance_cos)
        report.validate()

    def test_validate_catches_bad_values(self, report):
        broken = dataclasses.replace(report, rank1={"combined": 1.5})
        with pytest.raises(ValueError):
            broken.validate()

    def test_report_csv(self, report, tmp_path):
        write_report_csv(report, tmp_path / "a.csv")
        write_report_csv(report, tmp_path / "b.csv")
        text = (tmp_path / "a.csv").read_text()
        assert text.splitlines()[0] == "metric,representation,detail,value"
        assert "rank1,combined" in text
        assert "attribute_accuracy_mean" in text
        assert text == (tmp_path / "b.csv").read_text()

    def test_roc_csv(self, report, tmp_path):
        write_roc_csv(report, tmp_path / "roc.csv")
        lines = (tmp_path / "roc.csv").read_text().splitlines()
        assert lines[0] == "representation,threshold,far,tar"
        assert any(line.startswith("geometry,") for line in lines[1:])

    def test_triplet_similarities_bounds(self, small_dataset):
        triplets = build_triplets(small_dataset, pool_size=50, seed=0)
        params = init_params(SMALL_NET, 0)
        geo, app = triplet_similarities(params, triplets)
        assert -1.0 <= geo <= 1.0
        assert -1.0 <= app <= 1.0
