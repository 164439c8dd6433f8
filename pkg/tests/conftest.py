"""Session-scoped experiment fixtures shared by the statistical tests and the
acceptance gate, so the expensive training runs happen once."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from otda.data_gen import GeneratorConfig, generate, swap_val_test
from otda.da_train import TrainConfig, alpha_sweep, train_with_model

ACCEPTANCE_SEEDS = (0, 1, 2, 3)
ALPHA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
DEFAULT_ALPHA = 0.1


@pytest.fixture(scope="session")
def benchmark_dataset():
    return generate(GeneratorConfig())


@pytest.fixture(scope="session")
def small_dataset():
    return generate(GeneratorConfig(samples_per_domain=150, seed=3))


@pytest.fixture(scope="session")
def method_runs(benchmark_dataset):
    """(report, params) per seed for each method at the default alpha."""
    runs = {}
    for method in ("erm", "ot", "dann"):
        runs[method] = [
            train_with_model(
                benchmark_dataset, TrainConfig(method=method, alpha=DEFAULT_ALPHA, seed=seed)
            )
            for seed in ACCEPTANCE_SEEDS
        ]
    return runs


@pytest.fixture(scope="session")
def sweep_result(benchmark_dataset):
    import time

    start = time.perf_counter()
    sweep = alpha_sweep(
        benchmark_dataset,
        TrainConfig(method="ot", alpha=DEFAULT_ALPHA, seed=0),
        list(ALPHA_GRID),
        seeds=list(ACCEPTANCE_SEEDS),
    )
    sweep.elapsed_seconds = time.perf_counter() - start
    return sweep


@pytest.fixture(scope="session")
def swap_runs(benchmark_dataset):
    swapped = swap_val_test(benchmark_dataset)
    runs = {}
    for method in ("erm", "ot"):
        runs[method] = [
            train_with_model(swapped, TrainConfig(method=method, alpha=DEFAULT_ALPHA, seed=seed))
            for seed in ACCEPTANCE_SEEDS
        ]
    return runs


def mean_test_accuracy(runs):
    return float(np.mean([rep.final["test"]["accuracy"] for rep, _ in runs]))


def mean_val_accuracy(runs):
    return float(np.mean([rep.final["val"]["accuracy"] for rep, _ in runs]))
