"""Pytest configuration and fixtures for causalbench tests."""

import os
from collections.abc import Generator
from pathlib import Path

import numpy as np
import pytest

from causalbench.config import atomic_write_json
from causalbench.data_model import (
    Arm,
    CovariateKind,
    CovariateRole,
    CovariateSchema,
    Dataset,
    dataset_csv_text,
    schema_to_list,
)

TOY_SCHEMA = (
    CovariateSchema("age"),
    CovariateSchema("female", CovariateKind.BINARY),
    CovariateSchema("center", CovariateKind.CATEGORICAL, CovariateRole.CENTER_INDICATOR, ("c1", "c2")),
)


def confounded(n: int, seed: int, tau: float = 2.0, arm: Arm = Arm.NRS) -> Dataset:
    """Toy study where older units are treated more often and do better."""
    rng = np.random.default_rng(seed)
    age = rng.normal(0.0, 1.0, n)
    female = rng.binomial(1, 0.5, n).astype(float)
    center = rng.binomial(1, 0.5, n).astype(float)
    if arm is Arm.RCT:
        z = rng.permutation(np.arange(n) % 2)
    else:
        z = rng.binomial(1, 1 / (1 + np.exp(-(0.8 * age - 0.3 * female))))
    noise = rng.normal(0.0, 1.0, n)
    y = 1.0 + 1.5 * age + 0.5 * female + tau * z + noise
    quality = 0.1 * age + 0.05 * z + 0.1 * noise
    return Dataset(
        schema=TOY_SCHEMA,
        ids=np.arange(n) + (0 if arm is Arm.RCT else 10_000),
        arms=np.full(n, arm.value, dtype=object),
        z=z,
        x=np.column_stack([age, female, center]),
        y={"health": y, "quality": quality},
    )


@pytest.fixture
def toy_nrs() -> Dataset:
    """Confounded observational sample (true effect 2 on ``health``)."""
    return confounded(400, seed=11)


@pytest.fixture
def toy_rct() -> Dataset:
    """Randomized sample with the same outcome model as ``toy_nrs``."""
    return confounded(300, seed=12, arm=Arm.RCT)


@pytest.fixture
def study_files(tmp_path: Path, toy_rct: Dataset, toy_nrs: Dataset) -> dict[str, Path]:
    """RCT and NRS CSV files plus a schema.json in a temp directory."""
    rct = tmp_path / "rct.csv"
    nrs = tmp_path / "nrs.csv"
    schema = tmp_path / "schema.json"
    rct.write_text(dataset_csv_text(toy_rct), encoding="utf-8")
    nrs.write_text(dataset_csv_text(toy_nrs), encoding="utf-8")
    atomic_write_json(schema, schema_to_list(TOY_SCHEMA))
    return {"rct": rct, "nrs": nrs, "schema": schema}


@pytest.fixture(autouse=True)
def env_setup(tmp_path_factory: pytest.TempPathFactory) -> Generator[None, None, None]:
    """Point the cache at a temp dir and restore CAUSAL_BENCH_* afterwards."""
    original_env = {}

    # Store original values
    for key in ["CAUSAL_BENCH_LOG", "CAUSAL_BENCH_CACHE"]:
        original_env[key] = os.environ.get(key)
    os.environ["CAUSAL_BENCH_CACHE"] = str(tmp_path_factory.mktemp("cache"))
    os.environ.pop("CAUSAL_BENCH_LOG", None)

    yield

    # Restore original values
    for key, value in original_env.items():
        if value is None:
            os.environ.pop(key, None)
        else:
            os.environ[key] = value
