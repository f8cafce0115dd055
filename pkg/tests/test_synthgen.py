"""Tests for the synthetic study generator and its calibration."""

import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from pytest_mock import MockerFixture

from causalbench import synthgen
from causalbench.balance import standardized_difference
from causalbench.data_model import Arm, CovariateKind
from causalbench.errors import MissingColumn, Unachievable
from causalbench.synthgen import (
    CovariateMoment,
    DgpConfig,
    OutcomeSpec,
    calibrate_to_targets,
    generate,
    reflux_like,
    truth_json,
)


def small_config(seed: int = 0, interactions: dict[str, float] | None = None) -> DgpConfig:
    """Two covariates, a three-level category and one outcome with effect 1.5."""
    return DgpConfig(
        covariates=(
            CovariateMoment("a", mean=10.0, sd=2.0),
            CovariateMoment("b", p=0.3),
            CovariateMoment("site", levels=("x", "y", "z"), probs=(0.5, 0.3, 0.2)),
        ),
        outcomes=(
            OutcomeSpec(
                "y",
                intercept=1.0,
                baseline={"a": 2.0, "b": -1.0},
                treatment_effect=1.5,
                interactions=interactions or {},
            ),
        ),
        selection_coefs={"a": 0.8},
        treated_share=0.4,
        n_rct=120,
        n_nrs=150,
        seed=seed,
        truth_draws=200_000,
    )


class TestDgpConfig:
    """Tests for configuration checks."""

    def test_design_columns(self) -> None:
        """Test categorical covariates expand to non-reference indicators."""
        assert small_config().column_names == ["a", "b", "site_y", "site_z"]
        assert small_config().schema[2].kind is CovariateKind.CATEGORICAL

    def test_unknown_coefficient(self) -> None:
        """Test coefficients on unknown columns are refused."""
        with pytest.raises(MissingColumn):
            DgpConfig(
                covariates=(CovariateMoment("a"),),
                outcomes=(OutcomeSpec("y", baseline={"nope": 1.0}),),
            )

    def test_bad_moments(self) -> None:
        """Test level probabilities must sum to 1."""
        with pytest.raises(ValueError):
            CovariateMoment("site", levels=("x", "y"), probs=(0.5, 0.6))

    def test_negative_confounding(self) -> None:
        """Test u_strength cannot be negative."""
        with pytest.raises(ValueError):
            DgpConfig(covariates=(CovariateMoment("a"),), outcomes=(OutcomeSpec("y"),), u_strength=-1)

    def test_tiny_arms(self) -> None:
        """Test each arm needs at least 20 units."""
        with pytest.raises(ValueError):
            DgpConfig(covariates=(CovariateMoment("a"),), outcomes=(OutcomeSpec("y"),), n_rct=5)


class TestGenerate:
    """Tests for ``generate``."""

    def test_sizes_and_ids(self) -> None:
        """Test arm sizes, labels and contiguous ids."""
        study = generate(small_config())
        assert study.rct.n == 120
        assert study.nrs.n == 150
        assert set(study.rct.arms) == {Arm.RCT.value}
        assert set(study.nrs.arms) == {Arm.NRS.value}
        np.testing.assert_array_equal(study.rct.ids, np.arange(120))
        np.testing.assert_array_equal(study.nrs.ids, np.arange(120, 270))
        assert study.rct.x.shape == (120, 4)

    def test_observed_outcome_is_potential(self) -> None:
        """Test each outcome equals z*y1 + (1-z)*y0."""
        study = generate(small_config())
        for arm, d in ((Arm.RCT, study.rct), (Arm.NRS, study.nrs)):
            y1, y0 = study.potential[arm.value]["y"]
            np.testing.assert_allclose(d.outcome("y"), np.where(d.z == 1, y1, y0))
            np.testing.assert_allclose(y1 - y0, 1.5)

    def test_reproducible(self) -> None:
        """Test the same seed gives identical data."""
        first = generate(small_config(seed=3))
        second = generate(small_config(seed=3))
        np.testing.assert_array_equal(first.nrs.x, second.nrs.x)
        np.testing.assert_array_equal(first.nrs.z, second.nrs.z)
        np.testing.assert_array_equal(first.rct.outcome("y"), second.rct.outcome("y"))

    def test_seed_matters(self) -> None:
        """Test another seed gives other data."""
        assert not np.array_equal(generate(small_config(1)).nrs.x, generate(small_config(2)).nrs.x)

    def test_selection_imbalances_nrs(self) -> None:
        """Test selection on ``a`` makes NRS treated units larger in ``a``."""
        nrs = generate(replace(small_config(), n_nrs=2000)).nrs
        a = nrs.column("a")
        assert standardized_difference(a[nrs.treated], a[~nrs.treated]) > 0.3

    def test_constant_effect_truth(self) -> None:
        """Test without interactions ATE and ATT both equal the effect."""
        study = generate(small_config())
        assert truth_json(study) == {"y": {"ate": 1.5, "att": 1.5}}

    def test_heterogeneous_truth(self) -> None:
        """Test an effect growing in ``a`` puts the ATT above the ATE."""
        study = generate(small_config(interactions={"a": 1.0}))
        truth = study.truth["y"]
        assert truth["ate"] == 1.5
        assert truth["att"] > 1.7

    def test_synth_units(self) -> None:
        """Test units carry both potential outcomes."""
        study = generate(small_config())
        units = list(study.synth_units(Arm.RCT))
        assert len(units) == 120
        first = units[0]
        observed = first.y1["y"] if first.unit.z == 1 else first.y0["y"]
        assert first.unit.y["y"] == pytest.approx(observed)


class TestCalibration:
    """Tests for ``calibrate_to_targets``."""

    def test_hits_targets(self) -> None:
        """Test calibrated coefficients reproduce the target std. diffs."""
        base = small_config()
        coefs = calibrate_to_targets({"a": -0.4, "b": 0.2}, base, n=4000, seed=1)
        s, u = synthgen._population(base, 4000, 1)
        diffs = synthgen.expected_std_diffs(replace(base, selection_coefs=coefs), s, u)
        assert diffs[0] == pytest.approx(-0.4, abs=0.02)
        assert diffs[1] == pytest.approx(0.2, abs=0.02)

    def test_cached(self, mocker: MockerFixture) -> None:
        """Test a second identical calibration reads the cache."""
        base = small_config()
        first = calibrate_to_targets({"a": 0.3}, base, n=3000)
        spy = mocker.spy(synthgen, "_population")
        second = calibrate_to_targets({"a": 0.3}, base, n=3000)
        assert second == pytest.approx(first)
        assert spy.call_count == 0
        cached = list((Path(os.environ["CAUSAL_BENCH_CACHE"]) / "calibration").glob("*.json"))
        assert len(cached) == 1

    def test_seed_ignored_by_cache_key(self) -> None:
        """Test the study seed does not force recalibration."""
        calibrate_to_targets({"a": 0.3}, small_config(seed=1), n=3000)
        calibrate_to_targets({"a": 0.3}, small_config(seed=2), n=3000)
        cached = list((Path(os.environ["CAUSAL_BENCH_CACHE"]) / "calibration").glob("*.json"))
        assert len(cached) == 1

    def test_unknown_target(self) -> None:
        """Test targets must name design columns."""
        with pytest.raises(MissingColumn):
            calibrate_to_targets({"site": 0.1}, small_config(), n=1000)

    def test_unreachable_target(self) -> None:
        """Test a std. diff. of 10 lies outside the bracket."""
        with pytest.raises(Unachievable) as excinfo:
            calibrate_to_targets({"a": 10.0}, small_config(), n=1000, use_cache=False)
        assert excinfo.value.covariate == "a"

    def test_reflux_preset(self) -> None:
        """Test the preset calibrates and generates both arms."""
        cfg = reflux_like(seed=5, n_rct=60, n_nrs=80, calibration_n=3000)
        assert set(cfg.selection_coefs) >= {"heartburn", "age"}
        study = generate(cfg)
        assert study.nrs.n == 80
        assert study.nrs.outcome_names == ("health_status", "quality_of_life")
        assert truth_json(study)["health_status"]["ate"] == 8.0
