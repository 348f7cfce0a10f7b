import numpy as np
import pandas as pd
import pydantic
import pytest

from pynexus.analysis import monthly_means, pearson_correlation
from pynexus.data import POLLUTANTS, RAW_MET, align
from pynexus.metrics import r2
from pynexus.synth import (
    SynthConfig,
    SynthResult,
    bayes_r2,
    days_since_epoch,
    generate,
    ground_truth_r2_bound,
    site_layout,
)

# Signal without the stochastic episode, temperature and wind terms.
DETERMINISTIC = dict(episode_rate=0.0, temperature_coupling=0.0, wind_coupling=0.0)


def peak_hour(values: np.ndarray, hours: np.ndarray) -> float:
    """Phase of the daily harmonic of a least-squares fit, in hours."""
    angle = 2 * np.pi * hours / 24
    design = np.column_stack([np.ones_like(angle), np.cos(angle), np.sin(angle)])
    (_, a, b), *_ = np.linalg.lstsq(design, values, rcond=None)
    return float(np.degrees(np.arctan2(b, a)) / 15.0 % 24)


class TestLayout:
    def test_sites(self) -> None:
        sites = site_layout(SynthConfig())
        assert len(sites) == 20
        assert (sites["role"] == "met").sum() == 16
        assert list(sites["site_id"].iloc[-4:]) == ["P0", "P1", "P2", "P3"]

    def test_monitors_on_corners(self) -> None:
        sites = site_layout(SynthConfig()).set_index("site_id")
        corners = [("P0", "M00"), ("P1", "M03"), ("P2", "M12"), ("P3", "M15")]
        for monitor, grid in corners:
            assert sites.loc[monitor, "lat"] == sites.loc[grid, "lat"]
            assert sites.loc[monitor, "lon"] == sites.loc[grid, "lon"]
        assert sites.loc["P0", "lat"] == 28.95
        assert sites.loc["P0", "lon"] == 76.85


class TestGenerate:
    def test_row_count(self, synth_result: SynthResult) -> None:
        assert len(synth_result.raw) == 20 * 60 * 24

    def test_deterministic(self) -> None:
        a = generate(SynthConfig(n_days=30, seed=7)).raw
        b = generate(SynthConfig(n_days=30, seed=7)).raw
        pd.testing.assert_frame_equal(a, b)

    def test_seed_changes_data(self) -> None:
        a = generate(SynthConfig(n_days=30, seed=7)).raw
        b = generate(SynthConfig(n_days=30, seed=8)).raw
        assert not np.allclose(a["skt"], b["skt"])

    def test_minimum_days(self) -> None:
        with pytest.raises(pydantic.ValidationError):
            SynthConfig(n_days=10)

    def test_reporting_pattern(self, synth_result: SynthResult) -> None:
        raw = synth_result.raw
        monitors = raw["site_id"].str.startswith("P")
        reported = raw["co"].notna()
        assert not (reported & ~monitors).any()
        assert (raw.loc[reported, "timestamp"].dt.hour % 3 == 0).all()
        assert reported.sum() == 4 * 60 * 8
        assert raw.loc[~monitors, list(RAW_MET)].notna().all().all()
        assert raw.loc[monitors, list(RAW_MET)].isna().all().all()

    def test_realistic_units(self, synth_result: SynthResult) -> None:
        raw = synth_result.raw
        assert 1e-7 < raw["co"].median() < 1e-6
        assert raw["skt"].between(260, 330).all()
        assert (raw["tp"].dropna() >= 0).all()

    def test_noise(self, synth_result: SynthResult) -> None:
        np.testing.assert_allclose(
            synth_result.noise_std, 0.105 * np.array([3e-7, 4e-9, 8e-9])
        )
        assert synth_result.signal.shape == (4, 60 * 8, 3)
        assert (synth_result.signal > 0).all()

    def test_site_gradient(self, synth_result: SynthResult) -> None:
        means = synth_result.signal[..., 0].mean(axis=1)
        assert means[0] > means[3]
        assert 1.2 < means[0] / means[3] < 1.6

    def test_r2_bound(self, synth_result: SynthResult) -> None:
        bound = synth_result.r2_bound()
        assert 0.5 < bound < 1.0
        assert ground_truth_r2_bound(SynthConfig(n_days=60, seed=3)) == bound

    def test_aligns_without_gaps(self, synth_result: SynthResult) -> None:
        dataset = align(synth_result.raw)
        assert not np.isnan(dataset.features).any()


class TestCycles:
    def test_temperature_peak_hour(self, synth_result: SynthResult) -> None:
        raw = synth_result.raw
        site = raw[raw["site_id"] == "M05"]
        hours = site["timestamp"].dt.hour.to_numpy(dtype=float)
        assert peak_hour(site["skt"].to_numpy(), hours) == pytest.approx(9.5, abs=0.25)

    def test_pollution_peak_stamp(self) -> None:
        result = generate(SynthConfig(n_days=30, **DETERMINISTIC))
        hours = result.stamps.hour.to_numpy()
        for k, _ in enumerate(POLLUTANTS):
            by_hour = pd.Series(result.signal[..., k].mean(axis=0)).groupby(hours)
            assert by_hour.mean().idxmax() == 3

    @pytest.mark.slow
    def test_seasonal_peak_and_monsoon(self) -> None:
        result = generate(SynthConfig(n_days=365, seed=1, **DETERMINISTIC))
        co = pd.Series(result.signal[..., 0].mean(axis=0))
        assert monthly_means(co, result.stamps).idxmax() == 12
        raw = result.raw.dropna(subset=["tp"])
        wet = raw["timestamp"].dt.month.isin([7, 8, 9])
        assert raw.loc[wet, "tp"].mean() > 3 * raw.loc[~wet, "tp"].mean()


class TestHelpers:
    def test_bayes_r2(self) -> None:
        assert bayes_r2(3.0, 1.0) == 0.75
        assert bayes_r2(0.0, 0.0) == 1.0

    def test_days_since_epoch(self) -> None:
        stamps = pd.DatetimeIndex(["2000-01-02T12:00Z"])
        np.testing.assert_allclose(days_since_epoch(stamps), [1.5])


@pytest.fixture(scope="module")
def two_years() -> SynthResult:
    return generate(SynthConfig())


def observed_pollutants(result: SynthResult) -> np.ndarray:
    """Noisy monitor values shaped like ``result.signal``."""
    raw = result.raw.dropna(subset=list(POLLUTANTS))
    raw = raw.sort_values(["timestamp", "site_id"])
    values = raw[list(POLLUTANTS)].to_numpy()
    n_sites = len(result.pollutant_sites)
    return values.reshape(-1, n_sites, len(POLLUTANTS)).swapaxes(0, 1)


@pytest.mark.slow
class TestDefaultConfig:
    def test_r2_bound(self, two_years: SynthResult) -> None:
        assert two_years.r2_bound() == pytest.approx(0.95, abs=0.01)

    def test_bound_matches_simulation(self, two_years: SynthResult) -> None:
        observed = observed_pollutants(two_years)
        assert observed.shape == two_years.signal.shape
        empirical = np.mean(
            [
                r2(observed[..., k].ravel(), two_years.signal[..., k].ravel())
                for k in range(len(POLLUTANTS))
            ]
        )
        assert empirical == pytest.approx(two_years.r2_bound(), abs=0.02)

    def test_temperature_coupling(self, two_years: SynthResult) -> None:
        dataset = align(two_years.raw)
        r = pearson_correlation(
            dataset.feature("skt").mean(axis=0), dataset.feature("co").mean(axis=0)
        )
        assert r < 0
        assert abs(r) >= 0.3
