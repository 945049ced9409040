import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_eer
from uttlid.errors import AlignmentError, FormatError, UndefinedMetricError
from uttlid.scoring import (
    TrialScoreSet,
    cavg_from_rates,
    compute_cavg,
    compute_eer,
    detection_rates,
    eer_from_trials,
    fuse_scores,
    log_odds_from_log_posteriors,
    read_scores,
    report,
    write_scores,
)


def score_set(scores, labels, languages=None, durations=None):
    scores = np.asarray(scores, dtype=float)
    languages = languages or [f"l{i}" for i in range(scores.shape[1])]
    return TrialScoreSet([f"u{i}" for i in range(len(labels))], labels, scores, languages, durations)


class TestEer:
    def test_perfect_separation(self):
        assert eer_from_trials([2.0, 3.0, 4.0], [-1.0, 0.5]) == 0.0

    def test_hand_example(self):
        assert eer_from_trials([0.9, 0.8], [0.95, 0.7]) == 0.5

    def test_fully_inverted(self):
        assert eer_from_trials([0.0, 0.1], [1.0, 2.0]) == 1.0

    def test_interpolated_crossing(self):
        # sweep: miss 0, 0, 1/3, 2/3, 1 and fa 1, 1/2, 1/2, 0, 0 -> crossing between 1/3 and 2/3
        target, non = [0.2, 0.5, 0.9], [0.1, 0.6]
        assert eer_from_trials(target, non) == pytest.approx(brute_force_eer(target, non), abs=0)
        assert 1 / 3 < eer_from_trials(target, non) < 2 / 3

    @pytest.mark.parametrize("seed", range(20))
    def test_random_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n_target = int(rng.integers(50, 300))
        target = np.round(rng.normal(1.0, 1.0, n_target), 2)  # rounding forces ties
        nontarget = np.round(rng.normal(0.0, 1.0, 1000 - n_target), 2)
        assert eer_from_trials(target, nontarget) == brute_force_eer(target, nontarget)

    def test_undefined(self):
        with pytest.raises(UndefinedMetricError):
            eer_from_trials([], [1.0])
        with pytest.raises(UndefinedMetricError):
            eer_from_trials([1.0], [])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_monotonic_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = score_set(rng.standard_normal((30, 3)), rng.integers(0, 3, 30))
        warped = score_set(np.exp(2 * s.scores) + 5, s.labels)
        assert compute_eer(s) == compute_eer(warped)

    def test_pooled_trials(self):
        s = score_set([[1.0, -1.0], [-2.0, 3.0]], [0, 1])
        target, non = s.target_nontarget()
        assert sorted(target.tolist()) == [1.0, 3.0] and sorted(non.tolist()) == [-2.0, -1.0]
        assert compute_eer(s) == 0.0


class TestCavg:
    def test_perfect(self):
        s = score_set([[2.0, -2.0, -1.0], [-3.0, 1.0, -1.0], [-1.0, -1.0, 0.0]], [0, 1, 2])
        assert compute_cavg(s) == 0.0

    def test_hand_two_language(self):
        # language A: one of two A utterances missed; one of two B utterances falsely accepted as A
        s = score_set([[1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]], [0, 0, 1, 1])
        p_miss, p_fa = detection_rates(s)
        assert p_miss.tolist() == [0.5, 0.0]
        assert p_fa[0, 1] == 0.5 and p_fa[1, 0] == 0.0
        assert compute_cavg(s) == 0.25

    def test_from_rates_formula(self):
        assert cavg_from_rates(np.array([0.5, 0.0]), np.array([[0.0, 0.5], [0.0, 0.0]])) == 0.25

    def test_everything_wrong(self):
        s = score_set([[-1.0, 1.0], [1.0, -1.0]], [0, 1])
        assert compute_cavg(s) == 1.0

    def test_threshold_ties_accept(self):
        s = score_set([[0.0, -1.0], [-1.0, 0.0]], [0, 1])
        assert compute_cavg(s) == 0.0

    def test_scaling_scores_and_threshold(self):
        rng = np.random.default_rng(3)
        s = score_set(rng.standard_normal((40, 4)), np.arange(40) % 4)
        doubled = score_set(2 * s.scores, s.labels)
        assert compute_cavg(s, 0.3) == compute_cavg(doubled, 0.6)

    def test_missing_language_named(self):
        s = score_set([[1.0, -1.0, -1.0]], [0], languages=["eng", "fra", "deu"])
        with pytest.raises(UndefinedMetricError, match="fra, deu"):
            compute_cavg(s)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        s = score_set(rng.standard_normal((20, 3)) * 3, np.arange(20) % 3)
        assert 0.0 <= compute_cavg(s) <= 1.0 and 0.0 <= compute_eer(s) <= 1.0


class TestLogOdds:
    def test_matches_direct_formula(self):
        p = np.array([0.1, 0.3, 0.6])
        np.testing.assert_allclose(log_odds_from_log_posteriors(np.log(p)), np.log(p / (1 - p)), rtol=1e-12)

    def test_extremes_are_finite(self):
        with np.errstate(all="raise"):
            out = log_odds_from_log_posteriors(np.array([0.0, -1e-20, -800.0]))
        assert np.all(np.isfinite(out)) and out[0] > 0 and out[2] < -700


class TestFusion:
    def test_label_permuted_copy_is_mean(self):
        rng = np.random.default_rng(0)
        s = score_set(rng.standard_normal((10, 4)), np.arange(10) % 4)
        perm = [2, 0, 3, 1]
        permuted = score_set(s.scores[:, perm], s.labels)
        fused = fuse_scores([s, permuted])
        np.testing.assert_array_equal(fused.scores, 0.5 * s.scores + 0.5 * s.scores[:, perm])

    def test_equal_weight_permutation_invariance(self):
        rng = np.random.default_rng(1)
        sets = [score_set(rng.standard_normal((6, 3)), [0, 1, 2, 0, 1, 2]) for _ in range(3)]
        a = fuse_scores(sets).scores
        b = fuse_scores(sets[::-1]).scores
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_weights(self):
        a = score_set([[1.0, 2.0]], [0])
        b = score_set([[3.0, -2.0]], [0])
        np.testing.assert_array_equal(fuse_scores([a, b], [0.25, 0.75]).scores, [[2.5, -1.0]])
        with pytest.raises(ValueError):
            fuse_scores([a, b], [0.5, 0.6])

    def test_misaligned(self):
        a = score_set([[1.0, 2.0]], [0])
        b = TrialScoreSet(["other"], [0], np.array([[1.0, 2.0]]), ["l0", "l1"])
        with pytest.raises(AlignmentError):
            fuse_scores([a, b])
        with pytest.raises(AlignmentError):
            fuse_scores([a, score_set([[1.0, 2.0]], [0], languages=["x", "y"])])


class TestFilesAndReports:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        s = score_set(rng.standard_normal((5, 3)) * 1e3, [0, 1, 2, 1, 0], ["eng", "fra", "deu"],
                      ["3s", "10s", "30s", "3s", "10s"])
        write_scores(tmp_path / "s.tsv", s)
        back = read_scores(tmp_path / "s.tsv")
        assert back.utterance_ids == s.utterance_ids and back.durations == s.durations
        assert back.languages == s.languages and back.labels.tolist() == s.labels.tolist()
        assert back.scores.tobytes() == s.scores.tobytes()
        header = (tmp_path / "s.tsv").read_text().splitlines()[0]
        assert header == "utterance\tduration\tlabel\teng\tfra\tdeu"

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.tsv").write_text("utterance\tduration\tlabel\ta\tb\nu1\t3s\ta\t1.0\n")
        with pytest.raises(FormatError, match=":2:"):
            read_scores(tmp_path / "bad.tsv")

    def test_report_per_duration(self):
        s = score_set([[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, 1.0]], [0, 1, 0, 1],
                      durations=["10s", "10s", "3s", "3s"])
        r = report(s, system="toy")
        assert r.per_duration["10s"] == (0.0, 0.0)
        assert list(r.per_duration) == ["3s", "10s"]
        lines = r.table().splitlines()
        assert lines[0].split() == ["System", "Cavg", "3s", "Cavg", "10s", "Cavg", "all",
                                    "EER", "3s", "EER", "10s", "EER", "all"]
        assert lines[1].split()[0] == "toy"
        kv = dict(line.split("=") for line in r.key_values().splitlines())
        assert float(kv["cavg_percent.10s"]) == 0.0 and "eer_percent" in kv
        assert float(kv["cavg"]) == pytest.approx(r.cavg)

    def test_report_duration_missing_language(self):
        # the 3s subset has no utterance of language 0: that cell is n/a, pooled metrics stay defined
        s = score_set([[1.0, -1.0], [-1.0, 1.0], [-1.0, 1.0]], [0, 1, 1], durations=["10s", "10s", "3s"])
        r = report(s)
        assert r.per_duration["3s"][0] is None and r.cavg == 0.0
        assert "n/a" in r.table().splitlines()[1]
        assert "cavg_percent.3s=n/a" in r.key_values().splitlines()
