import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slac_time import synth as sy
from slac_time.analysis import sample_means
from slac_time.kmeans import kmeans
from slac_time.triplets import make_samples


def ari_by_pairs(a, b):
    """Pair-counting ARI via explicit loops over every pair."""
    n = len(a)
    both = same_a = same_b = 0
    for i, j in itertools.combinations(range(n), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        both += sa and sb
        same_a += sa
        same_b += sb
    pairs = n * (n - 1) / 2
    expected = same_a * same_b / pairs
    top = (same_a + same_b) / 2
    return 1.0 if top == expected else (both - expected) / (top - expected)


class TestAri:
    def test_identical(self):
        assert sy.adjusted_rand_index([0, 1, 1, 2], [0, 1, 1, 2]) == 1.0

    def test_permuted_ids(self):
        assert sy.adjusted_rand_index([0, 0, 1, 2], [5, 5, 3, 9]) == 1.0

    def test_crossed_pairs(self):
        assert sy.adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sy.adjusted_rand_index([0, 1], [0])

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=40))
    def test_matches_pair_loop(self, pairs):
        a, b = zip(*pairs)
        got = sy.adjusted_rand_index(a, b)
        assert got == pytest.approx(ari_by_pairs(a, b), abs=1e-12)
        assert got <= 1.0 + 1e-12


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"missing_rate": 1.0}, {"missing_rate": -0.1}, {"plan": "cyclic"}, {"missing_mode": "burst"},
         {"n_records": 0}, {"jitter": 6.0}, {"switch_prob": 1.5}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            sy.GenConfig(**kw)

    @pytest.mark.parametrize(
        "kw", [{"means": [[1.0, 2.0]], "stds": 1.0}, {"means": [[1.0], [2.0]], "stds": 0.0},
               {"means": [[1.0], [2.0]], "stds": 1.0, "phi": 1.0}],
    )
    def test_invalid_regimes(self, kw):
        with pytest.raises(ValueError):
            sy.RegimeSpec(**kw)

    def test_default_regimes(self):
        regimes = sy.RegimeSpec.default()
        assert (regimes.n_regimes, regimes.n_variables) == (3, 8)
        assert sy.default_catalog().names[0] == "DBP"


class TestGenerate:
    def test_same_seed_bit_identical(self):
        config = sy.GenConfig(n_records=2, windows_per_record=3, seed=4)
        (ra, ta), (rb, tb) = sy.generate(config), sy.generate(config)
        for a, b in zip(ra, rb):
            np.testing.assert_array_equal(a.times, b.times)
            np.testing.assert_array_equal(a.values, b.values)
        assert ta.regimes == tb.regimes

    def test_different_seed_differs(self):
        a = sy.generate(sy.GenConfig(n_records=1, windows_per_record=2, seed=0))[0][0]
        b = sy.generate(sy.GenConfig(n_records=1, windows_per_record=2, seed=1))[0][0]
        assert not np.array_equal(a.values[:10], b.values[:10])

    def test_missing_rate_concentration(self):
        # 8 variables x 180 slots per window, 70 windows: 100800 slots
        config = sy.GenConfig(n_records=7, windows_per_record=10, missing_rate=0.3, seed=0)
        _, truth = sy.generate(config)
        assert truth.total_slots == 100_800
        assert truth.observed_slots / truth.total_slots == pytest.approx(0.70, abs=0.01)

    def test_block_missingness_drops_whole_variables(self):
        config = sy.GenConfig(n_records=1, windows_per_record=6, missing_rate=0.5, missing_mode="block", seed=2)
        [rec], _ = sy.generate(config)
        for s in make_samples([rec]):
            counts = np.bincount(s.variable, minlength=8)
            # the closing reading lands past the last window, so every count is 0 or full
            assert set(counts.tolist()) <= {0, 180}

    def test_window_means_within_clt_bound(self):
        regimes = sy.RegimeSpec.default(phi=0.0)
        config = sy.GenConfig(n_records=3, windows_per_record=4, missing_rate=0.0, seed=3)
        records, truth = sy.generate(config, regimes)
        for s in make_samples(records):
            means, counts = sample_means(s, 8)
            r = truth.regimes[(s.parent_record, s.window_index)]
            bound = 4 * regimes.stds[r] / np.sqrt(counts)
            assert np.all(np.abs(means - regimes.means[r]) <= bound)

    def test_observations_inside_their_window(self):
        records, truth = sy.generate(sy.GenConfig(n_records=2, windows_per_record=5, seed=0))
        for rec in records:
            assert rec.duration == 5 * 1800.0
            assert len(make_samples([rec])) == 5
        assert len(truth.regimes) == 10

    @pytest.mark.parametrize("seed", range(5))
    def test_events_at_regime_changes(self, seed):
        config = sy.GenConfig(n_records=3, windows_per_record=15, switch_prob=0.4, seed=seed)
        _, truth = sy.generate(config)
        for rid, events in truth.events.items():
            plan = [truth.regimes[(rid, w)] for w in range(15)]
            changes = [w * 1800.0 for w in range(1, 15) if plan[w] != plan[w - 1]]
            assert [e.time for e in events] == changes

    def test_fixed_plan_has_no_events(self):
        _, truth = sy.generate(sy.GenConfig(n_records=2, windows_per_record=6, plan="fixed"))
        assert all(not e for e in truth.events.values())
        assert len({truth.regimes[("R000", w)] for w in range(6)}) == 1

    def test_plain_kmeans_recovers_separated_regimes(self):
        means = np.array([[0.0, 0.0, 0.0], [6.0, 0.0, 6.0], [0.0, 6.0, -6.0]])
        regimes = sy.RegimeSpec(means, 1.0, phi=0.9)
        config = sy.GenConfig(n_records=6, windows_per_record=10, plan="random", missing_rate=0.0, seed=5)
        records, truth = sy.generate(config, regimes)
        samples = make_samples(records)
        points = np.stack([sample_means(s, 3)[0] for s in samples])
        labels = kmeans(points, 3, restarts=10, seed=0).assignments
        truth_labels = truth.labels_for([(s.parent_record, s.window_index) for s in samples])
        assert sy.adjusted_rand_index(truth_labels, labels) >= 0.99

    def test_truth_files(self, tmp_path):
        _, truth = sy.generate(sy.GenConfig(n_records=1, windows_per_record=4, switch_prob=1.0, seed=0))
        truth.write(tmp_path / "gt.csv")
        truth.write_annotations(tmp_path / "ev.csv")
        gt = (tmp_path / "gt.csv").read_text().splitlines()
        assert gt[0] == "record_id,window_index,regime" and len(gt) == 5
        ev = (tmp_path / "ev.csv").read_text().splitlines()
        assert ev[0] == "record_id,t_seconds,description" and len(ev) == 4
        assert ev[1].startswith("R000,1800.0,regime change ")
