import functools

import numpy as np
import pytest

from mixopt import TABLE1_PARAMS
from mixopt.planner import make_plan
from mixopt.scaling_model import DomainParams
from mixopt.simulator import GroundTruth, recovery_experiment

UNIT_N = 660_000
BUDGETS = (5_000_000, 20_000_000, 200_000_000)


@pytest.fixture
def table1():
    return list(TABLE1_PARAMS)


def plan_config(names=("IF", "Math", "Code"), unit=UNIT_N, ratios=("1/3", "1/2", 2, 3), budget=20_000_000,
                available=10**9):
    return {
        "domains": [{"name": n, "source_uri": f"hf://datasets/{n.lower()}", "available_tokens": available}
                    for n in names],
        "unit_sample_n": unit * len(names),
        "perturbation_ratios": list(ratios),
        "budget_n0": budget,
        "seed": 7,
    }


@pytest.fixture
def plan3():
    return make_plan(plan_config())


def random_params(rng, K, k_min=0.0):
    """Valid parameter sets spanning a few orders of magnitude around the fitted regime."""
    out = []
    for i in range(K):
        out.append(DomainParams(
            C=float(rng.uniform(0.3, 3.0)),
            k=float(rng.uniform(k_min, 2.0)),
            alpha=float(rng.uniform(0.1, 0.9)),
            beta=float(rng.uniform(0.01, 0.3)),
            E=float(rng.uniform(0.0, 2.0)),
            name=f"d{i}",
        ))
    return out


def random_simplex(rng, K):
    return rng.dirichlet(np.ones(K))


@functools.lru_cache(maxsize=None)
def recovery_regrets(sigma: float, n_seeds: int = 20) -> tuple[float, ...]:
    """Worst regret over the three budgets for each seed (shared across test files; slow)."""
    plan = make_plan(plan_config())
    out = []
    for seed in range(n_seeds if sigma > 0 else 1):
        rep = recovery_experiment(GroundTruth(TABLE1_PARAMS, sigma, seed), plan, BUDGETS)
        out.append(max(rep.regret))
    return tuple(out)


# criterion number -> (verdict, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{verdict} criterion {num}: {detail}")
