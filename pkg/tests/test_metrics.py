import numpy as np
import pytest

from pynexus.metrics import (
    METRIC_NAMES,
    UndefinedVarianceError,
    improvement_pct,
    ioa,
    mae,
    metrics_report,
    nse,
    r2,
    rmse,
    smape,
)


class TestMetrics:
    def test_perfect(self) -> None:
        y = np.array([1.0, 2.0, 4.0])
        assert r2(y, y) == 1.0
        assert rmse(y, y) == 0.0
        assert smape(y, y) == 0.0
        assert ioa(y, y) == 1.0

    def test_mean_predictor(self) -> None:
        y = np.array([1.0, 2.0, 3.0])
        assert r2(y, np.full(3, 2.0)) == pytest.approx(0.0)

    def test_known_values(self) -> None:
        y, y_hat = np.array([1.0, 2.0, 3.0, 4.0]), np.array([1.5, 2.0, 2.0, 5.0])
        assert rmse(y, y_hat) == pytest.approx(np.sqrt(2.25 / 4))
        assert mae(y, y_hat) == pytest.approx(0.625)
        assert r2(y, y_hat) == pytest.approx(1 - 2.25 / 5)
        assert nse(y, y_hat) == r2(y, y_hat)

    def test_smape_zero_pairs(self) -> None:
        assert smape([0.0, 1.0], [0.0, 3.0]) == pytest.approx(50.0)

    def test_smape_bounded(self) -> None:
        assert smape([1.0], [-1.0]) == pytest.approx(200.0)

    def test_ioa_range(self, rng: np.random.Generator) -> None:
        y, y_hat = rng.normal(size=50), rng.normal(size=50)
        assert 0.0 <= ioa(y, y_hat) <= 1.0

    def test_ioa_constant(self) -> None:
        assert ioa([2.0, 2.0], [2.0, 2.0]) == 1.0

    def test_constant_observations(self) -> None:
        with pytest.raises(UndefinedVarianceError):
            r2([1.0, 1.0], [1.0, 2.0])

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ValueError):
            rmse([1.0, 2.0], [1.0])

    def test_empty(self) -> None:
        with pytest.raises(ValueError):
            mae([], [])

    def test_hand_computed(self) -> None:
        assert r2([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]) == pytest.approx(0.5, abs=1e-9)
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5), abs=1e-9)
        assert mae([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.5, abs=1e-9)
        assert smape([2.0], [1.0]) == pytest.approx(200.0 / 3, abs=1e-9)
        assert smape([1.0], [0.0]) == pytest.approx(200.0, abs=1e-9)
        assert ioa([0.0, 2.0], [2.0, 0.0]) == pytest.approx(0.0, abs=1e-9)


class TestProperties:
    def test_r2_equals_nse(self, rng: np.random.Generator) -> None:
        for _ in range(10**4):
            n = int(rng.integers(2, 12))
            y, y_hat = rng.normal(size=n), rng.normal(size=n)
            assert r2(y, y_hat) == nse(y, y_hat)

    @pytest.mark.parametrize("seed", range(5))
    def test_bounds(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for _ in range(2000):
            n = int(rng.integers(1, 12))
            scale = rng.uniform(0.01, 100.0)
            y, y_hat = rng.normal(size=n) * scale, rng.normal(size=n) * scale
            assert -1e-12 <= ioa(y, y_hat) <= 1.0
            assert 0.0 <= smape(y, y_hat) <= 200.0 + 1e-9
            assert smape(y, y_hat) == pytest.approx(smape(y_hat, y))
            assert rmse(y, y_hat) >= mae(y, y_hat) - 1e-12

    @pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
    def test_scale(self, rng: np.random.Generator, c: float) -> None:
        y = rng.normal(size=40)
        y_hat = y + rng.normal(scale=0.5, size=40)
        for metric in (r2, nse, ioa, smape):
            assert metric(c * y, c * y_hat) == pytest.approx(metric(y, y_hat))
        for metric in (rmse, mae):
            assert metric(c * y, c * y_hat) == pytest.approx(c * metric(y, y_hat))

    def test_sample_order(self, rng: np.random.Generator) -> None:
        y, y_hat = rng.normal(size=30), rng.normal(size=30)
        order = rng.permutation(30)
        for metric in (r2, nse, rmse, mae, smape, ioa):
            assert metric(y[order], y_hat[order]) == pytest.approx(metric(y, y_hat))


class TestReport:
    def test_per_species(self, rng: np.random.Generator) -> None:
        y = rng.normal(size=(20, 4, 3))
        y_hat = y + rng.normal(scale=0.1, size=y.shape)
        report = metrics_report(y, y_hat)
        assert report.n_samples == 80
        expected = rmse(y[..., 1], y_hat[..., 1])
        assert report.species["no"]["rmse"] == pytest.approx(expected)
        assert report.averages["r2"] == pytest.approx(
            np.mean([report.species[s]["r2"] for s in ("co", "no", "so2")])
        )

    def test_frame(self, rng: np.random.Generator) -> None:
        y = rng.normal(size=(10, 3))
        frame = metrics_report(y, y).to_frame()
        assert list(frame.columns) == ["species", *METRIC_NAMES, "n_samples"]
        assert list(frame["species"]) == ["co", "no", "so2", "mean"]
        assert (frame["r2"] == 1.0).all()

    def test_constant_species_is_nan(self, rng: np.random.Generator) -> None:
        y = rng.normal(size=(10, 3))
        y[:, 2] = 1.0
        report = metrics_report(y, y)
        assert np.isnan(report.species["so2"]["r2"])
        assert report.species["so2"]["rmse"] == 0.0

    def test_species_count(self) -> None:
        with pytest.raises(ValueError):
            metrics_report(np.zeros((4, 2)), np.zeros((4, 2)))


class TestImprovement:
    def test_lower_is_better(self) -> None:
        assert improvement_pct(0.8, 1.0, higher_is_better=False) == pytest.approx(20.0)

    def test_higher_is_better(self) -> None:
        assert improvement_pct(0.9, 0.6, higher_is_better=True) == pytest.approx(50.0)

    def test_zero_baseline(self) -> None:
        assert np.isnan(improvement_pct(1.0, 0.0, higher_is_better=True))
