"""Synthetic trainer: loss readings generated from known model parameters.

Stands in for the training runs of a plan so the whole pipeline can be
exercised without training anything. Noise is multiplicative log-normal,
drawn from a Philox stream keyed by ``(seed, run_id, domain)`` so a reading
does not depend on the order runs are generated in.
"""

from __future__ import annotations

import csv
import hashlib
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .optimizer import OptimizerOptions, optimize_weights
from .planner import LOSSES_HEADER, MixPlan, SamplingSpec, emit_run_manifests, run_pipeline
from .scaling_model import DomainParams, ModelDomainError, domain_loss, stack_params, _terms

__all__ = ["GroundTruth", "RecoveryReport", "noise_stream", "simulate_losses", "write_losses_csv",
           "recovery_experiment"]


@dataclass(frozen=True)
class GroundTruth:
    params: tuple[DomainParams, ...]
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if not self.noise_sigma >= 0:
            raise ModelDomainError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return {"params": [p.to_dict() for p in self.params], "noise_sigma": self.noise_sigma, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        return cls(tuple(DomainParams.from_dict(p) for p in data["params"]),
                   float(data.get("noise_sigma", 0.0)), int(data.get("seed", 0)))


def noise_stream(seed: int, run_id: str, domain: str) -> np.random.Generator:
    """Independent standard-normal stream for one (run, domain) reading."""
    digest = hashlib.blake2b(f"{run_id}\x1f{domain}".encode("utf-8"), digest_size=16).digest()
    key = [int.from_bytes(digest[:8], "little") ^ (int(seed) & (2**64 - 1)), int.from_bytes(digest[8:], "little")]
    # an explicit uint64 array: plain ints above 2**63 would be rounded through float64
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


def simulate_losses(truth: GroundTruth, manifests: Sequence[SamplingSpec]) -> list[tuple[str, str, float]]:
    """One ``(run_id, domain, loss)`` row per run and validation domain.

    Domain ``i`` in a run is scored with its own tokens as ``n_self`` and
    the rest of the run as ``n_other``.
    """
    rows = []
    for spec in manifests:
        if len(spec.domains) != len(truth.params):
            raise ModelDomainError(
                f"run {spec.run_id} has {len(spec.domains)} domains, ground truth has {len(truth.params)}")
        for p, name, n_self in zip(truth.params, spec.domains, spec.targets):
            loss = domain_loss(p, n_self, spec.total - n_self)
            if truth.noise_sigma > 0:
                z = noise_stream(truth.seed, spec.run_id, name).standard_normal()
                loss *= float(np.exp(truth.noise_sigma * z))
            rows.append((spec.run_id, name, loss))
    return rows


def write_losses_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSSES_HEADER)
        for run_id, domain, loss in rows:
            w.writerow([run_id, domain, repr(float(loss))])


@dataclass
class RecoveryReport:
    budgets: list[int]
    true_weights: list[np.ndarray]
    recovered_weights: list[np.ndarray]
    weight_error: list[float]
    regret: list[float]
    fitted: list[DomainParams] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "budgets": self.budgets,
            "true_weights": [w.tolist() for w in self.true_weights],
            "recovered_weights": [w.tolist() for w in self.recovered_weights],
            "weight_linf_error": self.weight_error,
            "relative_regret": self.regret,
            "fitted_params": [p.to_dict() for p in self.fitted],
        }


def recovery_experiment(truth: GroundTruth, plan: MixPlan, budgets: Sequence[int], gamma=None,
                        options: OptimizerOptions | None = None) -> RecoveryReport:
    """Simulate the plan's runs, refit, and score the recovered weights on the truth.

    ``regret`` is ``(F(w_rec) - F(w_true)) / F(w_true)`` with ``F`` the
    true objective.
    """
    if len(truth.params) != plan.K:
        raise ModelDomainError(f"ground truth has {len(truth.params)} domains, plan has {plan.K}")
    truth_named = tuple(p.replace(name=n) for p, n in zip(truth.params, plan.names))
    truth = GroundTruth(truth_named, truth.noise_sigma, truth.seed)
    rows = simulate_losses(truth, emit_run_manifests(plan))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "losses.csv"
        write_losses_csv(path, rows)
        report = run_pipeline(plan, path, budgets, gamma, optimizer_options=options)
    cols = stack_params(truth.params)
    g = np.ones(plan.K) if gamma is None else np.asarray(gamma, dtype=float)
    out = RecoveryReport(list(budgets), [], [], [], [], report.params)
    for b, rec in report.sweep:
        ref = optimize_weights(truth.params, b, gamma, options)
        f_true = float(np.sum(g * _terms(cols, ref.weights, float(b))))
        f_rec = float(np.sum(g * _terms(cols, rec.weights, float(b))))
        out.true_weights.append(ref.weights)
        out.recovered_weights.append(rec.weights)
        out.weight_error.append(float(np.max(np.abs(rec.weights - ref.weights))))
        out.regret.append((f_rec - f_true) / f_true)
    return out
