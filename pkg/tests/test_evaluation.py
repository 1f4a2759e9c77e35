"""Embedding extraction, trial scoring, and detection metrics vs brute force."""

import numpy as np
import pytest

from pcf_ecapa.errors import ConfigError, ContractError, LoadError, ShapeError
from pcf_ecapa.evaluation import (
    FeatureStore,
    Trial,
    compute_eer,
    compute_min_dcf,
    extract_embeddings,
    load_features,
    parse_trials,
    run_eval,
    save_features,
    score_trial,
    write_trials,
)
from pcf_ecapa.models import ModelConfig, build_model

from helpers import eer_oracle, min_dcf_oracle


def _tiny_net(seed=0):
    cfg = ModelConfig.from_variant(
        "pcf-ecapa", 16, mfa_out=32, attn_bottleneck=8, se_bottleneck=8, seed=seed
    )
    return build_model(cfg)


class TestExtraction:
    def test_exact_fit_single_chunk(self):
        net = _tiny_net()
        feat = np.random.default_rng(0).normal(size=(80, 300))
        emb = extract_embeddings(net, feat, chunk_len=300, stride=150)
        assert emb.shape == (1, 192)

    def test_window_arithmetic(self):
        net = _tiny_net()
        feat = np.random.default_rng(1).normal(size=(80, 600))
        emb = extract_embeddings(net, feat, chunk_len=300, stride=150)
        assert emb.shape == (3, 192)

    def test_rows_unit_norm(self):
        net = _tiny_net()
        feat = np.random.default_rng(2).normal(size=(80, 450))
        emb = extract_embeddings(net, feat, chunk_len=200, stride=100)
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)

    def test_short_utterance_padded_with_warning(self):
        net = _tiny_net()
        feat = np.random.default_rng(3).normal(size=(80, 4))
        with pytest.warns(UserWarning, match="zero-padded"):
            emb = extract_embeddings(net, feat, chunk_len=300, stride=150, min_frames=16)
        assert emb.shape == (1, 192)

    def test_wrong_feat_dim_rejected(self):
        net = _tiny_net()
        with pytest.raises(ShapeError, match=r"\[80, T\]"):
            extract_embeddings(net, np.zeros((40, 100)))


class TestScoreTrial:
    def test_identical_embeddings(self):
        e = np.random.default_rng(4).normal(size=(1, 192))
        assert abs(score_trial(e, e) - 1.0) < 1e-12

    def test_orthogonal_embeddings(self):
        a = np.zeros((1, 4))
        b = np.zeros((1, 4))
        a[0, 0] = 1.0
        b[0, 1] = 1.0
        assert abs(score_trial(a, b)) < 1e-15

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(5)
        A = rng.normal(size=(3, 192))
        B = rng.normal(size=(2, 192))
        got = score_trial(A, B)
        total = 0.0
        for i in range(3):
            for j in range(2):
                total += A[i] @ B[j] / (np.linalg.norm(A[i]) * np.linalg.norm(B[j]))
        assert abs(got - total / 6.0) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        A = rng.normal(size=(4, 16))
        B = rng.normal(size=(3, 16))
        assert abs(score_trial(A, B) - score_trial(B, A)) < 1e-12

    def test_empty_matrix_rejected(self):
        with pytest.raises(ShapeError, match="nonempty"):
            score_trial(np.zeros((0, 4)), np.zeros((1, 4)))

    def test_zero_norm_row_rejected(self):
        with pytest.raises(ContractError, match="zero-norm"):
            score_trial(np.zeros((1, 4)), np.ones((1, 4)))


class TestEER:
    def test_perfect_separation(self):
        eer, _ = compute_eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert eer == 0.0

    def test_one_third_hand_case(self):
        scores = [0.9, 0.8, 0.4, 0.5, 0.2, 0.1]
        labels = [1, 1, 1, 0, 0, 0]
        eer, thr = compute_eer(scores, labels)
        assert eer == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert thr == pytest.approx(0.5)

    def test_inverted_labels_give_one(self):
        eer, _ = compute_eer([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])
        assert eer == 1.0

    def test_single_class_rejected(self):
        with pytest.raises(ContractError, match="at least one"):
            compute_eer([0.5, 0.6], [1, 1])

    def test_matches_oracle_on_random_sets(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(4, 200))
            scores = np.round(rng.normal(size=n), 2)  # duplicates likely
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            got = compute_eer(scores, labels)
            want = eer_oracle(scores, labels)
            assert got == want

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(8)
        scores = rng.normal(size=60)
        labels = rng.integers(0, 2, size=60)
        labels[0], labels[1] = 0, 1
        base, _ = compute_eer(scores, labels)
        warped, _ = compute_eer(np.exp(2.0 * scores) + 5.0, labels)
        assert base == pytest.approx(warped, abs=1e-12)

    def test_duplication_invariance(self):
        rng = np.random.default_rng(9)
        scores = rng.normal(size=30)
        labels = rng.integers(0, 2, size=30)
        labels[0], labels[1] = 0, 1
        a, _ = compute_eer(scores, labels)
        b, _ = compute_eer(np.tile(scores, 2), np.tile(labels, 2))
        assert a == pytest.approx(b, abs=1e-12)


class TestMinDCF:
    def test_perfect_separation(self):
        dcf, _ = compute_min_dcf([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert dcf == 0.0

    def test_all_equal_scores_hit_reject_all_bound(self):
        dcf, thr = compute_min_dcf([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert dcf == 1.0
        assert thr > 0.5  # reject-all operating point

    def test_never_exceeds_one(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            n = int(rng.integers(4, 60))
            scores = rng.normal(size=n)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            dcf, _ = compute_min_dcf(scores, labels)
            assert 0.0 <= dcf <= 1.0

    def test_matches_oracle_on_random_sets(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(4, 200))
            scores = np.round(rng.normal(size=n), 2)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            got = compute_min_dcf(scores, labels)
            want = min_dcf_oracle(scores, labels)
            assert got == want


class TestFeatureIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        feat = rng.normal(size=(80, 37))
        path = tmp_path / "u.feat"
        save_features(feat, path)
        np.testing.assert_array_equal(load_features(path), feat)

    def test_magic_layout(self, tmp_path):
        path = tmp_path / "u.feat"
        save_features(np.zeros((80, 3)), path)
        raw = path.read_bytes()
        assert raw[:4] == b"FEAT"
        assert int.from_bytes(raw[4:8], "little") == 80
        assert int.from_bytes(raw[8:12], "little") == 3

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "u.feat"
        save_features(np.zeros((80, 5)), path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(LoadError, match="truncated"):
            load_features(path)

    def test_store_dir_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        store = FeatureStore()
        store.add("spk0_a", rng.normal(size=(80, 20)))
        store.add("spk1_b", rng.normal(size=(80, 31)))
        store.save_dir(tmp_path / "feats")
        back = FeatureStore.load_dir(tmp_path / "feats")
        assert sorted(back.ids()) == ["spk0_a", "spk1_b"]
        np.testing.assert_array_equal(back.get("spk1_b"), store.get("spk1_b"))


class TestTrials:
    def test_parse_and_write_round_trip(self, tmp_path):
        text = "1 a b\n0 a c\n\n1 b c\n"
        trials = parse_trials(text)
        assert trials[0] == Trial(True, "a", "b")
        assert len(trials) == 3
        path = tmp_path / "trials.txt"
        write_trials(trials, path)
        assert parse_trials(path.read_text()) == trials

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigError, match="bad trial line"):
            parse_trials("2 a b\n")


class TestRunEval:
    def _store_and_trials(self, rng):
        store = FeatureStore()
        for spk in range(3):
            for u in range(2):
                base = rng.normal(size=(80, 1))
                store.add(f"s{spk}u{u}", np.tile(base, (1, 40)) + 0.1 * rng.normal(size=(80, 40)))
        trials = [
            Trial(True, "s0u0", "s0u1"),
            Trial(True, "s1u0", "s1u1"),
            Trial(False, "s0u0", "s1u0"),
            Trial(False, "s2u0", "s1u1"),
        ]
        return store, trials

    def test_pipeline_produces_metrics_and_ordered_scores(self):
        rng = np.random.default_rng(14)
        store, trials = self._store_and_trials(rng)
        net = _tiny_net()
        metrics, rows = run_eval(net, store, trials, chunk_len=40, stride=20)
        assert len(rows) == 4
        assert [r[:2] for r in rows] == [(t.enroll, t.test) for t in trials]
        assert 0.0 <= metrics.eer <= 1.0
        assert 0.0 <= metrics.min_dcf <= 1.0

    def test_missing_ids_all_reported(self):
        rng = np.random.default_rng(15)
        store, trials = self._store_and_trials(rng)
        trials.append(Trial(True, "ghost1", "s0u0"))
        trials.append(Trial(False, "ghost2", "s0u1"))
        with pytest.raises(ConfigError, match="ghost1, ghost2"):
            run_eval(_tiny_net(), store, trials)

    def test_empty_trials_rejected(self):
        with pytest.raises(ContractError, match="empty trial list"):
            run_eval(_tiny_net(), FeatureStore(), [])

    def test_metrics_text_keys(self):
        rng = np.random.default_rng(16)
        store, trials = self._store_and_trials(rng)
        metrics, _ = run_eval(_tiny_net(), store, trials, chunk_len=40, stride=20)
        text = metrics.to_text()
        for key in ("eer=", "eer_threshold=", "min_dcf=", "dcf_threshold="):
            assert key in text
