import numpy as np
import pytest

from pamoe.metrics import (MetricsRecord, PhaseSegment, count_switches,
                           expert_activation_frequency, extract_phases, gradient_conflict_score,
                           majority_mapping, mean_std, parameter_occupancy, phase_alignment_overlap,
                           phase_entropy_stats, read_csv, write_metrics_csv, write_switches_csv)


def test_switch_count_fixture():
    assert count_switches([1, 1, 2, 2, 2, 0, 0, 1]) == 3


def test_phase_extraction_fixture():
    segs = extract_phases([1, 1, 2, 2, 2, 0])
    assert segs == [PhaseSegment(1, 0, 1), PhaseSegment(2, 2, 4), PhaseSegment(0, 5, 5)]
    assert [len(s) for s in segs] == [2, 3, 1]
    with pytest.raises(ValueError):
        extract_phases([])


def test_occupancy_thresholding_fixture():
    ledger = [{"simple": 3.0, "complex": 1.0},     # simple wins
              {"simple": 1.0, "complex": 1.0},     # tie at exactly 0.5: nobody
              {"simple": 0.0, "complex": 2.0},     # complex wins
              {"simple": 0.0, "complex": 0.0}]     # skipped
    occ = parameter_occupancy(ledger, categories=("simple", "complex"))
    assert occ == {"simple": 1 / 3, "complex": 1 / 3}
    with pytest.raises(ValueError):
        parameter_occupancy([{"a": -1.0}])


def test_occupancy_three_way_sums_to_at_most_one():
    rng = np.random.default_rng(0)
    ledger = [dict(zip("abc", rng.uniform(0, 1, 3))) for _ in range(200)]
    assert sum(parameter_occupancy(ledger).values()) <= 1.0


def test_conflict_score_fixtures():
    g = np.array([1.0, 2.0])
    assert gradient_conflict_score([g, -g]) == pytest.approx(1.0)
    assert gradient_conflict_score([g, 2 * g]) == 0.0
    assert gradient_conflict_score([np.array([1.0, 0]), np.array([0, 1.0])]) == 0.0
    assert gradient_conflict_score([g, np.zeros(2)]) == 0.0
    with pytest.raises(ValueError):
        gradient_conflict_score([g])


def test_phase_entropy_stats():
    uniform4, peaked = np.full(4, 0.25), np.array([1.0, 0, 0, 0])
    probs = np.stack([uniform4, uniform4, peaked, peaked])
    stats = phase_entropy_stats([(probs, [0, 0, 1, 1])])
    assert stats[0].mean == pytest.approx(2.0) and stats[0].variance == 0.0
    assert stats[1].mean == 0.0 and stats[1].n_steps == 2


def test_activation_frequency_and_alignment():
    z = [0, 0, 1, 1, 1, 0]
    oracle = [2, 2, 3, 3, 2, 2]
    freq = expert_activation_frequency(z, oracle, K=2, n_phases=4)
    np.testing.assert_allclose(freq[2], [0.75, 0.25])
    np.testing.assert_allclose(freq[3], [0.0, 1.0])
    assert np.all(np.isnan(freq[0]))
    assert majority_mapping(z, oracle) == {0: 2, 1: 3}
    assert phase_alignment_overlap(z, oracle) == pytest.approx(5 / 6)


def test_mean_std_population():
    assert mean_std([2.0]) == (2.0, 0.0)
    m, s = mean_std([1.0, 2.0, 3.0])
    assert m == 2.0 and s == pytest.approx(np.sqrt(2 / 3))


def test_csv_round_trip(tmp_path):
    recs = [MetricsRecord("r", 0, 5, "train/success", 0.25, tag_category="simple")]
    write_metrics_csv(tmp_path / "m.csv", recs)
    rows = read_csv(tmp_path / "m.csv")
    assert rows[0]["name"] == "train/success" and float(rows[0]["value"]) == 0.25
    write_switches_csv(tmp_path / "s.csv", [{"run_id": "r", "episode": 0, "routing_mode": "phase",
                                            "step_switches": 3, "token_switches": ""}])
    assert read_csv(tmp_path / "s.csv")[0]["step_switches"] == "3"
