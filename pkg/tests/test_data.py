import io
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loglearn import data as D
from loglearn.synthetic import make_formation


def table(n_wells=2, rows=200, seed=0, sep=","):
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(n_wells):
        df = pd.DataFrame(rng.standard_normal((rows, 4)), columns=list(D.CHANNELS))
        df.insert(0, "depth", 500.0 + np.arange(rows))
        df.insert(0, "well_id", f"w{i}")
        df["formation"] = "F"
        frames.append(df)
    return pd.concat(frames).to_csv(index=False, sep=sep)


def well(n=300, well_id="A", start=1000.0, seed=0):
    rng = np.random.default_rng(seed)
    return D.WellRecord(well_id, start + np.arange(n, dtype=float), rng.standard_normal((n, 4)))


class TestLoadWells:
    @pytest.mark.parametrize("sep", [",", "\t"])
    def test_clean_rows(self, sep):
        wells = D.load_wells(io.StringIO(table(sep=sep)))
        assert [len(w) for w in wells] == [200, 200]
        assert [w.formation for w in wells] == ["F", "F"]

    def test_missing_channel_row_dropped(self):
        df = pd.read_csv(io.StringIO(table()))
        df.loc[5, "GR"] = np.nan
        wells = D.load_wells(io.StringIO(df.to_csv(index=False)))
        assert sorted(len(w) for w in wells) == [199, 200]

    def test_missing_column_named(self):
        df = pd.read_csv(io.StringIO(table())).drop(columns=["DTC"])
        with pytest.raises(D.DataError, match="DTC"):
            D.load_wells(io.StringIO(df.to_csv(index=False)))

    def test_depth_resorted(self):
        df = pd.read_csv(io.StringIO(table(n_wells=1)))
        shuffled = df.sample(frac=1.0, random_state=1)
        (w,) = D.load_wells(io.StringIO(shuffled.to_csv(index=False)))
        assert np.all(np.diff(w.depth) > 0)
        np.testing.assert_array_equal(w.channels, df[list(D.CHANNELS)].to_numpy())

    def test_empty_well_skipped_with_warning(self):
        df = pd.read_csv(io.StringIO(table()))
        df.loc[df.well_id == "w1", "DENS"] = np.nan
        with pytest.warns(UserWarning, match="w1"):
            wells = D.load_wells(io.StringIO(df.to_csv(index=False)))
        assert [w.well_id for w in wells] == ["w0"]

    def test_schema_mapping(self):
        text = table(n_wells=1).replace("well_id", "WELL")
        (w,) = D.load_wells(io.StringIO(text), schema={"well_id": "WELL"})
        assert w.well_id == "w0"

    def test_frame_round_trip(self):
        wells = make_formation(3, 120, seed=4)
        back = D.load_wells(io.StringIO(D.wells_to_frame(wells).to_csv(index=False)))
        for a, b in zip(wells, back):
            np.testing.assert_allclose(a.channels, b.channels, rtol=1e-15)
            assert (a.class_label, a.formation) == (b.class_label, b.formation)
            assert a.latitude == pytest.approx(b.latitude)

    def test_non_increasing_depth_rejected(self):
        with pytest.raises(D.DataError):
            D.WellRecord("x", [1.0, 1.0], np.zeros((2, 4)))


class TestStandardize:
    def test_constant_channel_centered_with_warning(self):
        ch = np.column_stack([np.full(4, 5.0), np.arange(4.0), np.arange(4.0), np.arange(4.0)])
        with pytest.warns(UserWarning, match="DRHO"):
            (out,), stats = D.standardize([D.WellRecord("a", np.arange(4.0), ch)])
        np.testing.assert_array_equal(out.channels[:, 0], 0.0)
        assert stats.std[0] == 1.0

    def test_two_point(self):
        ch = np.array([[1.0, 1.0, 1.0, 1.0], [3.0, 3.0, 3.0, 3.0]])
        (out,), _ = D.standardize([D.WellRecord("a", [0.0, 1.0], ch)])
        np.testing.assert_array_equal(out.channels[:, 0], [-1.0, 1.0])

    def test_train_stats_reused(self):
        train = make_formation(4, 200, seed=0)
        target = make_formation(4, 200, seed=1, offset_shift=2.0)
        std_train, stats = D.standardize(train)
        std_target, _ = D.standardize(target, stats)
        allv = np.concatenate([w.channels for w in std_train])
        np.testing.assert_allclose(allv.mean(0), 0.0, atol=1e-12)
        np.testing.assert_allclose(allv.std(0), 1.0, atol=1e-12)
        assert np.all(np.abs(np.concatenate([w.channels for w in std_target]).mean(0)) > 0.5)

    def test_needs_two_samples(self):
        with pytest.raises(D.DataError):
            D.standardize([D.WellRecord("a", [0.0], np.zeros((1, 4)))])


class TestPairingRule:
    @pytest.mark.parametrize("wa,wb,sa,sb,mode,close,expected", [
        ("A", "A", 0.0, 300.0, "well_linking", None, 1),
        ("A", "B", 0.0, 0.0, "well_linking", None, 0),
        ("A", "A", 0.0, 800.0, "close_well_linking", 500.0, 0),
        ("A", "A", 0.0, 400.0, "close_well_linking", 500.0, 1),
        ("A", "B", 0.0, 10.0, "close_well_linking", 500.0, 0),
    ])
    def test_label(self, wa, wb, sa, sb, mode, close, expected):
        rule = D.PairingRule(mode, close)
        assert rule.label(wa, wb, sa, sb) == expected
        assert rule.labels([wa], [wb], [sa], [sb])[0] == expected

    @pytest.mark.parametrize("rule", [
        D.PairingRule("close_well_linking", None),
        D.PairingRule("close_well_linking", 100.0),
        D.PairingRule("nearby", None),
    ])
    def test_invalid(self, rule):
        with pytest.raises(ValueError):
            rule.validate(100)


class TestSamplePairs:
    wells = [well(400, "A", seed=1), well(300, "B", seed=2), well(350, "C", seed=3)]

    @pytest.mark.parametrize("rule", [D.PairingRule(), D.PairingRule("close_well_linking", 150.0)])
    @pytest.mark.parametrize("n", [1, 2, 7, 64])
    def test_count_balance_and_labels(self, rule, n):
        pairs = D.sample_pairs(self.wells, 100, rule, n, seed=5)
        assert len(pairs) == n
        assert abs(sum(p.label for p in pairs) - n / 2) <= 1
        for p in pairs:
            assert p.label == rule.label(p.a.well_id, p.b.well_id, p.a.start_depth, p.b.start_depth)

    def test_values_lie_in_source(self):
        by_id = {w.well_id: w for w in self.wells}
        for p in D.sample_pairs(self.wells, 100, D.PairingRule(), 40, seed=0):
            for s in (p.a, p.b):
                w = by_id[s.well_id]
                np.testing.assert_array_equal(s.values, w.window(w.offset_of(s.start_depth), 100))

    def test_reproducible_and_seed_sensitive(self):
        key = lambda ps: [(p.a.well_id, p.a.start_depth, p.b.well_id, p.b.start_depth, p.label) for p in ps]
        a = D.sample_pairs(self.wells, 100, D.PairingRule(), 30, seed=9)
        b = D.sample_pairs(self.wells, 100, D.PairingRule(), 30, seed=9)
        c = D.sample_pairs(self.wells, 100, D.PairingRule(), 30, seed=10)
        assert key(a) == key(b)
        assert sorted(key(a)) != sorted(key(c))

    def test_no_long_well(self):
        with pytest.raises(D.DataError):
            D.sample_pairs([well(50)], 100, D.PairingRule(), 4, seed=0)

    def test_single_well_cannot_supply_negatives(self):
        with pytest.raises(D.DataError, match="class 0"):
            D.sample_pairs([well(300)], 100, D.PairingRule(), 4, seed=0)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            D.sample_pairs(self.wells, 100, D.PairingRule(), 0, seed=0)

    def test_close_linking_coincides_for_covering_param(self):
        wells = make_formation(6, 400, seed=2)
        wide = D.PairingRule("close_well_linking", 1000.0)
        a = D.sample_pairs(wells, 100, D.PairingRule(), 50, seed=4)
        b = D.sample_pairs(wells, 100, wide, 50, seed=4)
        assert [(p.a.well_id, p.a.start_depth, p.b.start_depth, p.label) for p in a] == \
               [(p.a.well_id, p.a.start_depth, p.b.start_depth, p.label) for p in b]


class TestSampleTriplets:
    wells = [well(400, "A", seed=1), well(300, "B", seed=2)]

    def test_well_linking_constraints(self):
        for t in D.sample_triplets(self.wells, 100, D.PairingRule(), 50, seed=1):
            assert t.anchor.well_id == t.positive.well_id
            assert t.negative.well_id != t.anchor.well_id

    def test_close_linking_constraints(self):
        rule = D.PairingRule("close_well_linking", 120.0)
        for t in D.sample_triplets(self.wells, 100, rule, 50, seed=1):
            a, p, n = t.anchor, t.positive, t.negative
            assert rule.label(a.well_id, p.well_id, a.start_depth, p.start_depth) == 1
            assert rule.label(a.well_id, n.well_id, a.start_depth, n.start_depth) == 0

    def test_zero_is_empty(self):
        assert D.sample_triplets(self.wells, 100, D.PairingRule(), 0, seed=0) == []


class TestAugment:
    sample = D.IntervalSample("A", 0.0, np.random.default_rng(0).standard_normal((100, 4)))

    def test_zero_noise_identity(self):
        out = D.augment_noise(self.sample, 0.0, seed=1)
        np.testing.assert_array_equal(out.values, self.sample.values)

    def test_noise_deterministic(self):
        a = D.augment_noise(self.sample, 0.1, seed=3)
        b = D.augment_noise(self.sample, 0.1, seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.values.shape == self.sample.values.shape

    def test_noise_scale(self):
        std = np.array([1.0, 2.0, 0.5, 3.0])
        big = D.IntervalSample("A", 0.0, np.zeros((10_000, 4)))
        diff = D.augment_noise(big, 0.1, seed=2, channel_std=std).values
        np.testing.assert_allclose(diff.std(0), 0.1 * std, rtol=0.05)

    @pytest.mark.parametrize("p,expected", [(0.0, 0), (1.0, 100)])
    def test_mask_extremes(self, p, expected):
        out, mask = D.augment_mask(self.sample, p, seed=0)
        assert mask.sum() == expected
        assert not out.values[mask].any()

    def test_mask_rate(self):
        big = D.IntervalSample("A", 0.0, np.ones((10_000, 4)))
        _, mask = D.augment_mask(big, 0.15, seed=5)
        assert abs(mask.mean() - 0.15) <= 0.01

    def test_mask_probability_range(self):
        with pytest.raises(ValueError):
            D.augment_mask(self.sample, 1.5, seed=0)


class TestGeographicLabels:
    def coords(self, pts):
        return [D.WellRecord(f"w{i}", [0.0, 1.0], np.zeros((2, 4)), latitude=a, longitude=b)
                for i, (a, b) in enumerate(pts)]

    def test_single_cluster(self):
        labels = D.geographic_labels(self.coords([(0, 0), (1, 1), (5, 3)]), 1)
        assert set(labels.values()) == {0}

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_two_blobs_pure(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.concatenate([rng.normal(0, 0.5, (6, 2)), rng.normal(10, 0.5, (6, 2))])
        labels = D.geographic_labels(self.coords(pts), 2, seed=seed)
        vals = [labels[f"w{i}"] for i in range(12)]
        assert len(set(vals[:6])) == 1 and len(set(vals[6:])) == 1 and vals[0] != vals[6]

    def test_k_equals_wells(self):
        labels = D.geographic_labels(self.coords([(0, 0), (1, 1), (5, 3), (9, 9)]), 4)
        assert len(set(labels.values())) == 4

    def test_missing_coordinates_listed(self):
        wells = self.coords([(0, 0)]) + [D.WellRecord("bare", [0.0, 1.0], np.zeros((2, 4)))]
        with pytest.raises(D.DataError, match="bare"):
            D.geographic_labels(wells, 1)

    def test_agrees_with_synthetic_regimes(self):
        wells = make_formation(10, 120, seed=3)
        labels = D.geographic_labels(wells, 2)
        from loglearn.eval import ari
        assert ari([labels[w.well_id] for w in wells], [w.class_label for w in wells]) == 1.0


class TestTiling:
    def test_stride_and_order(self):
        tiles = D.tile_intervals([well(250, "B"), well(300, "A")], 100, stride=50)
        assert [(t.well_id, t.start_depth) for t in tiles][:4] == [("A", 1000.0), ("A", 1050.0), ("A", 1100.0), ("A", 1150.0)]
        assert len(tiles) == 5 + 4

    def test_gap_skipped(self):
        depth = np.concatenate([np.arange(50.0), 100 + np.arange(120.0)])
        w = D.WellRecord("g", depth, np.zeros((170, 4)))
        tiles = D.tile_intervals([w], 100)
        assert [t.start_depth for t in tiles] == [100.0]

    @pytest.mark.parametrize("target,expected", [
        ("well", "W000"), ("formation", "synthetic"), ("class", "A"), ("formation_class", "synthetic|A"),
    ])
    def test_interval_labels(self, target, expected):
        w = make_formation(1, 200, seed=0)[0]
        (s,) = D.tile_intervals([w], 200)
        assert D.interval_label(s, w, target) == expected

    def test_rock_type_majority(self):
        w = make_formation(1, 200, seed=0)[0]
        s = D.tile_intervals([w], 60, stride=60)[0]
        assert D.interval_label(s, w, "rock_type") == "sand"


class TestDatasetCache:
    wells = [well(300, "A", seed=1), well(300, "Bé", seed=2)]

    def test_pairs_round_trip(self, tmp_path):
        pairs = D.sample_pairs(self.wells, 100, D.PairingRule(), 9, seed=0)
        D.save_dataset(pairs, tmp_path / "p.llds")
        back = D.load_dataset(tmp_path / "p.llds")
        assert (tmp_path / "p.llds").read_bytes()[:4] == b"LLDS"
        for p, q in zip(pairs, back):
            assert (p.label, p.a.well_id, p.b.start_depth) == (q.label, q.a.well_id, q.b.start_depth)
            np.testing.assert_array_equal(p.a.values, q.a.values)
        assert len(back) == 9

    def test_triplets_round_trip_and_bytes_stable(self, tmp_path):
        trips = D.sample_triplets(self.wells, 100, D.PairingRule(), 5, seed=0)
        D.save_dataset(trips, tmp_path / "a")
        D.save_dataset(D.load_dataset(tmp_path / "a"), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_bad_magic(self):
        with pytest.raises(D.DataError):
            D.read_dataset(io.BytesIO(b"NOPE" + bytes(24)))
