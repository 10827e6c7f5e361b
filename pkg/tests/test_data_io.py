import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import daily_dates, ecad_text
from seasonal_hmm.data_io import (
    DailySeries,
    DataFormatError,
    StationMeta,
    apply_dryness_threshold,
    calendar_dates,
    merge_and_normalize,
    parse_ecad,
    parse_stations,
    read_ecad,
    read_series,
    summary_stats,
    write_series,
)


class TestParse:
    def test_temperature_scaling(self):
        text = ecad_text("TG", ["1954-01-01"], [123])
        rec = parse_ecad(text, "TG")
        assert rec.values[0] == 12.3
        assert rec.dates[0] == np.datetime64("1954-01-01")
        assert rec.staid == "42" and rec.station_name == "TESTVILLE"

    def test_missing_flag(self):
        rec = parse_ecad(ecad_text("RR", ["1954-01-01", "1954-01-02"], [55, 12], [9, 0]), "RR")
        assert np.isnan(rec.values[0]) and rec.values[1] == 1.2

    def test_missing_code(self):
        rec = parse_ecad(ecad_text("RR", ["1954-01-01"], [-9999], [0]), "RR")
        assert np.isnan(rec.values[0]) and rec.diagnostics == []

    def test_suspect_flag_configurable(self):
        text = ecad_text("TG", ["1954-01-01"], [50], [1])
        assert np.isnan(parse_ecad(text, "TG").values[0])
        assert parse_ecad(text, "TG", suspect_as_missing=False).values[0] == 5.0

    def test_negative_precip_to_diagnostics(self):
        rec = parse_ecad(ecad_text("RR", ["1954-01-01", "1954-01-02"], [-1, 3]), "RR")
        assert np.isnan(rec.values[0]) and rec.values[1] == pytest.approx(0.3)
        assert len(rec.diagnostics) == 1 and "negative" in rec.diagnostics[0][2]

    def test_negative_temperature_allowed(self):
        assert parse_ecad(ecad_text("TG", ["1954-01-01"], [-57]), "TG").values[0] == -5.7

    def test_malformed_rows_collected(self):
        text = ecad_text("TG", ["1954-01-01"], [10]) + "    42, 101,19540102\n    42,101,1954xx03, 5, 0\n"
        rec = parse_ecad(text, "TG")
        assert rec.values.size == 1 and len(rec.diagnostics) == 2

    def test_no_header(self):
        with pytest.raises(DataFormatError):
            parse_ecad("just some text\n1,2,3\n", "TG")

    def test_no_rows(self):
        with pytest.raises(DataFormatError):
            parse_ecad(ecad_text("TG", [], []), "TG")

    def test_wrong_variable(self):
        with pytest.raises(DataFormatError):
            parse_ecad(ecad_text("TG", ["1954-01-01"], [1]), "RR")

    def test_read_file(self, tmp_path):
        p = tmp_path / "TG_STAID000042.txt"
        p.write_text(ecad_text("TG", ["2000-05-05"], [7]), encoding="latin-1")
        assert read_ecad(p, "TG").values[0] == pytest.approx(0.7)

    def test_stations(self):
        text = ("header\n\nSTAID,STANAME                                 ,CN,      LAT,       LON,HGHT\n"
                "   1,VAEXJOE                                 ,SE,+56:52:00,+014:48:00, 166\n"
                "   2,SOUTH                                   ,AR,-34:30:00,-058:30:00,  20\n")
        st_ = parse_stations(text)
        assert st_["1"].latitude == pytest.approx(56 + 52 / 60)
        assert st_["2"].longitude == pytest.approx(-58.5)
        with pytest.raises(ValueError):
            StationMeta("x", "bad", 91.0, 0.0)


class TestMerge:
    def test_sixty_one_years(self):
        dates = daily_dates(1954, 2014)
        rec = parse_ecad(ecad_text("TG", dates, np.zeros(dates.size, int)), "TG")
        series, summary = merge_and_normalize(None, rec, (1954, 2014))
        assert series.n == 61 * 365 == 22265
        assert summary["temp_missing_fraction"] == 0.0

    def test_feb29_dropped(self):
        dates = daily_dates(1956, 1956)
        raw = np.arange(dates.size)
        rec = parse_ecad(ecad_text("TG", dates, raw), "TG")
        s, _ = merge_and_normalize(None, rec)
        assert s.n == 365
        assert np.datetime64("1956-02-29") not in s.dates
        # March 1st keeps its own value
        assert s.temp[59] == pytest.approx(raw[60] / 10)

    def test_precip_only(self):
        dates = daily_dates(2000, 2001)
        rec = parse_ecad(ecad_text("RR", dates, np.ones(dates.size, int)), "RR")
        s, summary = merge_and_normalize(rec, None)
        assert np.all(np.isnan(s.temp)) and s.n == 730
        assert summary["temp_missing_fraction"] == 1.0

    def test_outer_join_keeps_gaps(self):
        d1, d2 = daily_dates(2000, 2001), daily_dates(2000, 2001)
        p = parse_ecad(ecad_text("RR", d1[:100], np.ones(100, int)), "RR")
        t = parse_ecad(ecad_text("TG", d2, np.ones(d2.size, int)), "TG")
        s, summary = merge_and_normalize(p, t, (2000, 2001))
        # 29 February 2000 is among the first 100 dates, so 99 precipitation days remain
        assert s.n == 730 and np.isnan(s.precip[99:]).all() and not np.isnan(s.temp).any()
        assert summary["precip_missing_fraction"] == pytest.approx(631 / 730)

    def test_default_range_is_overlap(self):
        p = parse_ecad(ecad_text("RR", daily_dates(1990, 1999), np.zeros(3652, int)), "RR")
        t = parse_ecad(ecad_text("TG", daily_dates(1995, 2004), np.zeros(3653, int)), "TG")
        s, summary = merge_and_normalize(p, t)
        assert (summary["first_year"], summary["last_year"]) == (1995, 1999)
        assert s.n == 5 * 365

    def test_no_overlap(self):
        p = parse_ecad(ecad_text("RR", daily_dates(1990, 1991), np.zeros(730, int)), "RR")
        t = parse_ecad(ecad_text("TG", daily_dates(1995, 1996), np.zeros(731, int)), "TG")
        with pytest.raises(DataFormatError):
            merge_and_normalize(p, t)

    @settings(max_examples=20, deadline=None)
    @given(first=st.integers(1900, 2050), n_years=st.integers(1, 12))
    def test_length_always_365_per_year(self, first, n_years):
        assert calendar_dates(first, n_years).size == 365 * n_years


class TestSummary:
    def test_constant_two_mm(self):
        s = DailySeries(np.full(730, 2.0), np.zeros(730), 2000)
        out = summary_stats(s)
        assert out["precip_frequency"] == 1.0 and out["mean_positive_precip"] == 2.0
        assert out["mean_yearly_precip"] == pytest.approx(730.0)
        assert out["max_daily_precip"] == 2.0

    def test_threshold_idempotent(self, rng):
        p = rng.exponential(0.3, 1000)
        s = DailySeries(p, np.zeros(1000), 2000)
        once = apply_dryness_threshold(s)
        twice = apply_dryness_threshold(once)
        np.testing.assert_array_equal(once.precip, twice.precip)
        assert np.all((once.precip == 0) | (once.precip >= 0.1))

    def test_seasonal_temperature(self):
        x = np.tile(np.arange(365.0), 2)
        out = summary_stats(DailySeries(np.zeros(730), x, 2000))
        jja = np.arange(151, 243, dtype=float)
        assert out["temp_mean_JJA"] == pytest.approx(jja.mean())
        assert out["temp_sd_JJA"] == pytest.approx(np.tile(jja, 2).std(ddof=1))

    def test_round_trip_reproduces_generating_values(self, rng, tmp_path):
        dates = daily_dates(2001, 2003)  # no leap day
        raw_p = np.where(rng.random(dates.size) < 0.6, 0, rng.integers(1, 400, dates.size))
        raw_t = rng.integers(-150, 300, dates.size)
        p = parse_ecad(ecad_text("RR", dates, raw_p), "RR")
        t = parse_ecad(ecad_text("TG", dates, raw_t), "TG")
        s, _ = merge_and_normalize(p, t)
        np.testing.assert_array_equal(s.precip, raw_p / 10)
        np.testing.assert_array_equal(s.temp, raw_t / 10)
        out = summary_stats(s)
        assert out["max_daily_precip"] == raw_p.max() / 10
        assert out["precip_frequency"] == pytest.approx(np.mean(raw_p > 0))
        path = tmp_path / "series.csv"
        write_series(path, s)
        back = read_series(path)
        np.testing.assert_array_equal(back.precip, s.precip)
        np.testing.assert_array_equal(back.temp, s.temp)
        assert back.first_year == 2001 and back.station_id == "42"


class TestSeriesFile:
    def test_missing_and_header(self, tmp_path):
        s = DailySeries(np.array([0.0, np.nan, 1.5]), np.array([np.nan, 2.0, -1.25]), 1999, "X")
        path = tmp_path / "s.csv"
        write_series(path, s, {"seed": 4})
        text = path.read_text().splitlines()
        assert text[0] == "# seasonal-hmm series v1"
        assert "# seed: 4" in text
        assert text[-2] == "1999-01-02,NA,2.0,P"
        back = read_series(path)
        np.testing.assert_array_equal(np.isnan(back.precip), [False, True, False])
        assert back.temp[2] == -1.25

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("date,precip\n")
        with pytest.raises(DataFormatError):
            read_series(path)

    def test_series_invariants(self):
        with pytest.raises(ValueError):
            DailySeries(np.array([-1.0]), np.array([0.0]), 2000)
        s = DailySeries(np.zeros(800), np.zeros(800), 2000)
        assert s.day_of_year.max() == 365 and s.day_of_year[365] == 1
        assert s.year[-1] == 2002 and np.all(np.diff(s.dates) > np.timedelta64(0, "D"))
