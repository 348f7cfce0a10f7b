import numpy as np
import pandas as pd
import pytest

from pynexus.analysis import (
    DIURNAL_BINS,
    QUARTILES,
    assign_quartile,
    composite_pollution,
    composite_series,
    correlation_table,
    diurnal_profile,
    hotspot_ranking,
    monthly_means,
    pearson_correlation,
    qq_slope,
    quartile_bounds,
    regime_stratify,
    regime_table,
    residual_diagnostics,
    spatial_gradient,
)
from pynexus.data import AlignedDataset, align, fit_normalization
from pynexus.metrics import UndefinedVarianceError
from pynexus.synth import SynthConfig, generate
from pynexus.tensor import ConfigurationError
from tests.conftest import make_dataset

MAXIMA = {"co": 2.0, "no": 4.0, "so2": 8.0}


class TestComposite:
    def test_sum_of_ratios(self) -> None:
        out = composite_pollution([1.0, 2.0], [2.0, 4.0], [4.0, 0.0], MAXIMA)
        np.testing.assert_allclose(out, [1.5, 2.0])

    def test_non_positive_maximum(self) -> None:
        with pytest.raises(ConfigurationError):
            composite_pollution([1.0], [1.0], [1.0], {**MAXIMA, "no": 0.0})

    def test_dataset(self, dataset: AlignedDataset) -> None:
        out = composite_series(dataset, MAXIMA)
        assert out.shape == (dataset.n_sites, dataset.n_timestamps)
        expected = dataset.feature("co")[1, 4] / 2 + dataset.feature("no")[1, 4] / 4
        expected += dataset.feature("so2")[1, 4] / 8
        assert out[1, 4] == pytest.approx(expected)


class TestCycles:
    def test_diurnal_bins(self) -> None:
        stamps = pd.date_range("2020-01-01", periods=16, freq="3H", tz="UTC")
        profile = diurnal_profile(stamps.hour.to_numpy(dtype=float), stamps)
        assert list(profile.index) == list(DIURNAL_BINS)
        assert profile["21-24"] == 21.0
        assert profile.idxmax() == "21-24"

    def test_monthly_absent(self) -> None:
        stamps = pd.date_range("2020-03-01", periods=10, freq="D", tz="UTC")
        means = monthly_means(np.ones(10), stamps)
        assert len(means) == 12
        assert means[3] == 1.0
        assert means.isna().sum() == 11

    def test_synthetic_peaks_recovered(self) -> None:
        config = SynthConfig(
            n_days=30,
            noise_scale=0.0,
            episode_rate=0.0,
            temperature_coupling=0.0,
            wind_coupling=0.0,
        )
        dataset = align(generate(config).raw)
        profile = diurnal_profile(dataset.feature("co"), dataset.stacked_timestamps())
        assert profile.idxmax() == "03-06"


class TestRegimes:
    def test_quartiles(self) -> None:
        bounds = quartile_bounds(np.arange(1.0, 10.0))
        np.testing.assert_allclose(bounds, [3.0, 5.0, 7.0])
        np.testing.assert_array_equal(
            assign_quartile([1.0, 3.0, 4.0, 5.0, 9.0], bounds), [0, 1, 1, 2, 3]
        )

    def test_monotone_in_temperature(self, rng: np.random.Generator) -> None:
        temperature = rng.uniform(280, 310, 4000)
        wind = rng.gamma(2.0, 1.5, 4000)
        table = regime_stratify({"co": -temperature}, temperature, wind)
        means = table.means["co"].to_numpy()
        assert (np.diff(means, axis=0) < 0).all()
        assert table.counts.to_numpy().sum() == 4000
        assert list(table.counts.index) == list(QUARTILES)

    def test_frame(self, rng: np.random.Generator) -> None:
        temperature, wind = rng.normal(size=400), rng.normal(size=400)
        frame = regime_stratify({"co": wind}, temperature, wind).to_frame()
        assert len(frame) == 16
        first = frame.iloc[0]
        assert first["temp_low"] == -np.inf
        assert frame["count"].sum() == 400
        # co equals wind, so the top wind quartile is the most polluted.
        top = frame[frame["wind_quartile"] == "Q4"]["co"]
        bottom = frame[frame["wind_quartile"] == "Q1"]["co"]
        assert top.min() > bottom.max()

    def test_dataset_with_sites(self, dataset: AlignedDataset) -> None:
        table = regime_table(dataset)
        assert set(table.means) == {"co", "no", "so2"}
        assert table.site_means is not None
        assert set(table.site_means["site_id"]) == set(dataset.site_ids)
        assert set(table.site_means["temp_quartile"]) <= set(QUARTILES)


class TestCorrelation:
    def test_linear(self) -> None:
        x = np.arange(10.0)
        assert pearson_correlation(x, 3 * x + 1) == pytest.approx(1.0)
        assert pearson_correlation(x, -x) == pytest.approx(-1.0)

    def test_constant(self) -> None:
        with pytest.raises(UndefinedVarianceError):
            pearson_correlation(np.ones(5), np.arange(5.0))

    def test_table(self, dataset: AlignedDataset) -> None:
        dataset.features[..., 3] = 0.0
        table = correlation_table(dataset)
        assert list(table.columns) == ["pollutant", "driver", "r"]
        assert len(table) == 18
        assert table.loc[table["driver"] == "tp", "r"].isna().all()
        assert table["r"].dropna().between(-1, 1).all()


class TestResiduals:
    def test_columns(self, rng: np.random.Generator) -> None:
        y = rng.normal(size=1000)
        diag = residual_diagnostics(y, y + rng.normal(size=1000))
        assert list(diag.columns) == [
            "observed",
            "fitted",
            "residual",
            "standardized",
            "theoretical_quantile",
            "sample_quantile",
            "sqrt_abs_standardized",
        ]
        assert diag["standardized"].mean() == pytest.approx(0.0, abs=1e-12)
        assert diag["standardized"].std(ddof=0) == pytest.approx(1.0)
        assert diag["sample_quantile"].is_monotonic_increasing

    def test_normal_residuals_follow_the_line(self, rng: np.random.Generator) -> None:
        y_hat = rng.normal(size=2000)
        diag = residual_diagnostics(y_hat + rng.normal(size=2000), y_hat)
        assert qq_slope(diag) == pytest.approx(1.0, abs=0.05)

    def test_perfect_fit(self) -> None:
        diag = residual_diagnostics([1.0, 2.0], [1.0, 2.0])
        assert (diag["standardized"] == 0.0).all()


class TestSpatial:
    def test_ratio_to_cleanest(self, dataset: AlignedDataset) -> None:
        maxima = fit_normalization(dataset).maxima
        frame = spatial_gradient(dataset, maxima)
        assert list(frame["site_id"]) == dataset.site_ids
        assert frame["ratio_to_cleanest"].min() == 1.0
        assert (frame["mean_composite"] > 0).all()

    def test_non_positive_means(self, dataset: AlignedDataset) -> None:
        dataset.features[..., :3] = -np.abs(dataset.features[..., :3])
        frame = spatial_gradient(dataset, MAXIMA)
        assert (frame["mean_composite"] < 0).all()
        assert frame["ratio_to_cleanest"].isna().all()


class TestHotspots:
    def test_dirtiest_site_leads_every_regime(self) -> None:
        dataset = make_dataset(n_steps=400, seed=6)
        dataset.features[2, :, :3] += 10.0
        table = hotspot_ranking(dataset, MAXIMA)
        assert list(table.columns) == [
            "temp_quartile",
            "wind_quartile",
            "site_id",
            "mean_composite",
            "rank",
            "threshold",
            "hotspot",
        ]
        leaders = table[table["rank"] == 1]
        assert set(leaders["site_id"]) == {"S2"}
        assert (table["hotspot"] == (table["site_id"] == "S2")).all()
        assert set(table["temp_quartile"]) <= set(QUARTILES)

    def test_invalid_quantile(self, dataset: AlignedDataset) -> None:
        with pytest.raises(ConfigurationError):
            hotspot_ranking(dataset, MAXIMA, quantile=1.0)

