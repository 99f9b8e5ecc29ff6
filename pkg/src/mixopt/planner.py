"""Perturbation-experiment planning, loss ingestion and the end-to-end pipeline.

A plan trains one base run with ``unit_sample_n / K`` tokens per domain and,
for every ratio ``r`` and domain ``j``, one run identical to the base except
that domain ``j`` gets ``r * unit_sample_n / K`` tokens: ``len(ratios) * K + 1``
runs in total.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .fitting import FitOptions, FitResult, LossObservation, fit_all_domains
from .optimizer import OptimizationReport, OptimizerOptions, budget_sweep, optimize_weights, sweep_differences
from .scaling_model import DomainParams, as_gamma, stack_params, _terms

logger = logging.getLogger(__name__)

__all__ = [
    "PlanError",
    "PipelineError",
    "Domain",
    "MixPlan",
    "SamplingSpec",
    "LossRecordSet",
    "PipelineReport",
    "DEFAULT_RATIOS",
    "make_plan",
    "emit_run_manifests",
    "ingest_losses",
    "baseline_weights",
    "largest_remainder",
    "repeat_sample_indices",
    "sampling_spec_for_weights",
    "run_pipeline",
    "run_id_for",
    "LOSSES_HEADER",
]

DEFAULT_RATIOS = (0.5, 1 / 3, 2.0, 3.0)
LOSSES_HEADER = ("run_id", "domain", "loss")
BASE_RUN = "base"


class PlanError(ValueError):
    """Invalid plan configuration or loss file."""


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Domain:
    name: str
    source_uri: str
    available_tokens: int
    items: int | None = None


@dataclass(frozen=True)
class MixPlan:
    domains: tuple[Domain, ...]
    unit_sample_n: int
    perturbation_ratios: tuple[float, ...]
    budget_n0: int
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.domains)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.domains]

    def to_dict(self) -> dict:
        return {
            "domains": [
                {k: v for k, v in (("name", d.name), ("source_uri", d.source_uri),
                                   ("available_tokens", d.available_tokens), ("items", d.items))
                 if v is not None}
                for d in self.domains
            ],
            "unit_sample_n": self.unit_sample_n,
            "perturbation_ratios": list(self.perturbation_ratios),
            "budget_n0": self.budget_n0,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SamplingSpec:
    run_id: str
    domains: tuple[str, ...]
    targets: tuple[int, ...]
    repeat_factors: tuple[float, ...]
    perturbed: str | None = None
    ratio: float | None = None

    @property
    def total(self) -> int:
        return sum(self.targets)

    def tokens_for(self, domain: str) -> int:
        return self.targets[self.domains.index(domain)]

    def to_dict(self, plan: MixPlan | None = None) -> dict:
        uris = {d.name: d.source_uri for d in plan.domains} if plan else {}
        rows = []
        for name, t, rf in zip(self.domains, self.targets, self.repeat_factors):
            row = {"name": name}
            if name in uris:
                row["source_uri"] = uris[name]
            row["target_tokens"] = t
            row["repeat_factor"] = rf
            rows.append(row)
        return {"run_id": self.run_id, "perturbed_domain": self.perturbed, "ratio": self.ratio,
                "total_tokens": self.total, "domains": rows}

    @classmethod
    def from_dict(cls, data: dict) -> "SamplingSpec":
        rows = data["domains"]
        return cls(run_id=data["run_id"], domains=tuple(r["name"] for r in rows),
                   targets=tuple(int(r["target_tokens"]) for r in rows),
                   repeat_factors=tuple(float(r["repeat_factor"]) for r in rows),
                   perturbed=data.get("perturbed_domain"), ratio=data.get("ratio"))


@dataclass
class LossRecordSet:
    records: dict[str, dict[str, float]]
    groups: dict[str, list[LossObservation]]
    n_ignored: int = 0


def _as_ratio(x) -> float:
    """Accept numbers or strings such as ``"1/3"``."""
    if isinstance(x, str):
        return float(Fraction(x.strip()))
    return float(x)


def make_plan(config: dict) -> MixPlan:
    """Validate a plan configuration.

    ``config`` keys: ``domains`` (list of ``{name, source_uri,
    available_tokens[, items]}``), ``unit_sample_n``, ``budget_n0`` and the
    optional ``perturbation_ratios`` and ``seed``.
    """
    raw = config.get("domains") or []
    if len(raw) < 2:
        raise PlanError(f"a plan needs at least 2 domains, got {len(raw)}")
    domains, seen = [], set()
    for i, d in enumerate(raw):
        name = d.get("name")
        if not name:
            raise PlanError(f"domain #{i} has no name")
        if name in seen:
            raise PlanError(f"duplicate domain name {name!r}")
        seen.add(name)
        if not d.get("source_uri"):
            raise PlanError(f"domain {name!r} is missing source_uri")
        avail = d.get("available_tokens")
        if avail is None or int(avail) <= 0:
            raise PlanError(f"domain {name!r} needs available_tokens > 0, got {avail!r}")
        items = d.get("items")
        domains.append(Domain(name, str(d["source_uri"]), int(avail), None if items is None else int(items)))

    try:
        n = int(config["unit_sample_n"])
        n0 = int(config["budget_n0"])
    except KeyError as exc:
        raise PlanError(f"plan config is missing {exc.args[0]!r}") from None
    if n <= 0 or n0 <= 0:
        raise PlanError("unit_sample_n and budget_n0 must be positive")
    if n > n0 / 2:
        logger.warning("unit_sample_n=%d is not much smaller than budget_n0=%d", n, n0)

    ratios = tuple(_as_ratio(r) for r in config.get("perturbation_ratios", DEFAULT_RATIOS))
    if not ratios:
        raise PlanError("need at least one perturbation ratio")
    for r in ratios:
        if not (r > 0 and math.isfinite(r)):
            raise PlanError(f"perturbation ratio must be > 0, got {r}")
        if math.isclose(r, 1.0):
            raise PlanError("perturbation ratio 1 duplicates the base run")
    if len({run_id_for("x", r) for r in ratios}) != len(ratios):
        raise PlanError(f"duplicate perturbation ratios {list(ratios)}")
    return MixPlan(tuple(domains), n, ratios, n0, int(config.get("seed", 0)))


def run_id_for(domain: str, ratio: float) -> str:
    return f"perturb_{domain}_{ratio:.6g}"


def largest_remainder(shares: Sequence[float], total: int) -> list[int]:
    """Round non-negative ``shares`` to integers summing to ``total``.

    Floors every share, then hands the leftover units to the largest
    fractional parts (ties to the lower index).
    """
    shares = np.asarray(shares, dtype=float)
    if np.any(shares < 0):
        raise ValueError("shares must be non-negative")
    s = shares.sum()
    if s <= 0:
        raise ValueError("shares must not all be zero")
    exact = shares * (total / s)
    base = np.floor(exact).astype(np.int64)
    left = int(total - base.sum())
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return [int(x) for x in base]


def _spec(plan: MixPlan, run_id: str, shares, perturbed=None, ratio=None) -> SamplingSpec:
    total = int(round(sum(shares)))
    targets = largest_remainder(shares, total)
    factors = tuple(max(1.0, t / d.available_tokens) for t, d in zip(targets, plan.domains))
    return SamplingSpec(run_id, tuple(plan.names), tuple(targets), factors, perturbed, ratio)


def emit_run_manifests(plan: MixPlan) -> list[SamplingSpec]:
    """Base run followed by one run per (ratio, domain), ratio-major."""
    share = plan.unit_sample_n / plan.K
    specs = [_spec(plan, BASE_RUN, [share] * plan.K)]
    for r in plan.perturbation_ratios:
        for j, d in enumerate(plan.domains):
            shares = [share] * plan.K
            shares[j] = r * share
            specs.append(_spec(plan, run_id_for(d.name, r), shares, d.name, r))
    return specs


def repeat_sample_indices(n_items: int, repeat_factor: float, seed: int, key: str = "") -> np.ndarray:
    """Item indices for sampling a source ``repeat_factor`` times over.

    The whole source is repeated ``floor(repeat_factor)`` times and a
    seeded uniform subsample without replacement supplies the fraction.
    Factors below one give just the subsample.
    """
    if n_items < 0 or repeat_factor < 0:
        raise ValueError("n_items and repeat_factor must be non-negative")
    whole = int(math.floor(repeat_factor))
    extra = int(round((repeat_factor - whole) * n_items))
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    key = np.array([int(seed) & (2**64 - 1), int.from_bytes(digest, "little")], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    parts = [np.arange(n_items)] * whole
    if extra:
        parts.append(np.sort(rng.choice(n_items, size=extra, replace=False)))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def ingest_losses(plan: MixPlan, csv_path, specs: Sequence[SamplingSpec] | None = None) -> LossRecordSet:
    """Read ``run_id,domain,loss`` rows and group them into fitting observations.

    Domain ``i`` gets five (or ``len(ratios) + 1``) observations: its base-run
    loss and its losses in the runs perturbing ``i`` itself.
    """
    specs = list(specs) if specs is not None else emit_run_manifests(plan)
    by_id = {s.run_id: s for s in specs}
    names = set(plan.names)
    records: dict[str, dict[str, float]] = {}
    ignored = 0
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(LOSSES_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise PlanError(f"{csv_path}: missing columns {sorted(missing)}")
        for row in reader:
            run_id, domain = row["run_id"], row["domain"]
            if run_id not in by_id or domain not in names:
                ignored += 1
                continue
            try:
                loss = float(row["loss"])
            except ValueError:
                raise PlanError(f"{csv_path}: loss {row['loss']!r} for ({run_id}, {domain}) is not a number") from None
            if not (loss > 0 and math.isfinite(loss)):
                raise PlanError(f"{csv_path}: non-positive loss {loss} for ({run_id}, {domain})")
            slot = records.setdefault(run_id, {})
            if domain in slot:
                raise PlanError(f"{csv_path}: duplicate loss for ({run_id}, {domain})")
            slot[domain] = loss
    if ignored:
        logger.warning("ignored %d loss rows with unknown run_id or domain", ignored)
    for s in specs:
        if s.run_id not in records:
            raise PlanError(f"{csv_path}: missing run {s.run_id!r}")

    base = by_id[BASE_RUN]
    groups: dict[str, list[LossObservation]] = {}
    for d in plan.names:
        n_other = base.total - base.tokens_for(d)
        runs = [base] + [s for s in specs if s.perturbed == d]
        obs = []
        for s in runs:
            if d not in records[s.run_id]:
                raise PlanError(f"{csv_path}: missing loss for ({s.run_id}, {d})")
            ratio = 1.0 if s.run_id == BASE_RUN else float(s.ratio)
            obs.append(LossObservation(d, s.tokens_for(d), n_other, records[s.run_id][d], ratio))
        groups[d] = obs
    return LossRecordSet(records, groups, ignored)


def baseline_weights(plan: MixPlan, mode: str, item_stats: dict | None = None) -> np.ndarray:
    """Reference mixtures: ``original``, ``equal_tokens`` or ``equal_items``.

    ``item_stats`` maps domain name to ``{"items": int, "tokens": int}``; it
    defaults to the plan's ``items``/``available_tokens`` when those exist.
    """
    K = plan.K
    if mode == "equal_tokens":
        return np.full(K, 1.0 / K)
    if mode == "original":
        t = np.array([d.available_tokens for d in plan.domains], dtype=float)
        return t / t.sum()
    if mode == "equal_items":
        if item_stats is None:
            if any(d.items is None for d in plan.domains):
                raise PlanError("equal_items baseline needs item counts per domain")
            item_stats = {d.name: {"items": d.items, "tokens": d.available_tokens} for d in plan.domains}
        try:
            per_item = np.array([item_stats[n]["tokens"] / item_stats[n]["items"] for n in plan.names], dtype=float)
        except KeyError as exc:
            raise PlanError(f"item_stats has no entry {exc.args[0]!r}") from None
        # the same number of items from every domain: token share follows tokens/item
        return per_item / per_item.sum()
    raise PlanError(f"unknown baseline mode {mode!r}")


def sampling_spec_for_weights(plan: MixPlan, weights, budget: int, run_id: str = "final") -> SamplingSpec:
    """Token targets for a weight vector at ``budget`` tokens."""
    if budget <= 0:
        raise PlanError(f"budget must be positive, got {budget}")
    return _spec(plan, run_id, [float(w) * budget for w in weights])


@dataclass
class PipelineReport:
    plan: MixPlan
    fits: list[FitResult]
    params: list[DomainParams]
    gamma: list[float]
    sweep: list[tuple[int, OptimizationReport]] = field(default_factory=list)
    final: OptimizationReport | None = None
    final_spec: SamplingSpec | None = None
    n_ignored_rows: int = 0

    def predicted_losses(self, weights, budget) -> list[float]:
        cols = stack_params(self.params)
        return [float(x) for x in _terms(cols, np.asarray(weights, dtype=float), float(budget))]

    def to_dict(self) -> dict:
        out = {
            "loss_units": "as ingested",
            "domains": self.plan.names,
            "gamma": self.gamma,
            "params": [f.to_dict() for f in self.fits],
            "ignored_loss_rows": self.n_ignored_rows,
            "sweep": [],
        }
        for b, rep in self.sweep:
            entry = rep.to_dict(self.params, b, self.gamma)
            per = self.predicted_losses(rep.weights, b)
            entry["predicted_losses"] = dict(zip(self.plan.names, per))
            entry["overall_predicted_loss"] = sum(per)
            out["sweep"].append(entry)
        out["sweep_linf_differences"] = sweep_differences(self.sweep)
        if self.final is not None:
            out["final"] = self.final.to_dict(self.params, self.plan.budget_n0, self.gamma)
            out["final_sampling"] = self.final_spec.to_dict(self.plan)
        return out


def run_pipeline(plan: MixPlan, losses_csv, budgets: Sequence[int], gamma=None,
                 fit_options: FitOptions | None = None,
                 optimizer_options: OptimizerOptions | None = None) -> PipelineReport:
    """Ingest losses, fit every domain, optimise weights per budget and at ``budget_n0``."""
    try:
        records = ingest_losses(plan, losses_csv)
    except (PlanError, ValueError, OSError) as exc:
        raise PipelineError("ingest", exc) from exc
    fits, errors = fit_all_domains(records.groups, fit_options)
    if errors:
        name, exc = next(iter(errors.items()))
        raise PipelineError("fit", ValueError(f"{name}: {exc}"))
    params = [f.params for f in fits]
    try:
        g = as_gamma(gamma, plan.K)
    except ValueError as exc:
        raise PipelineError("optimize", exc) from exc
    report = PipelineReport(plan, fits, params, [float(x) for x in g], n_ignored_rows=records.n_ignored)
    if budgets:
        try:
            report.sweep = budget_sweep(params, budgets, g, optimizer_options)
            report.final = optimize_weights(params, plan.budget_n0, g, optimizer_options)
        except ValueError as exc:
            raise PipelineError("optimize", exc) from exc
        report.final_spec = sampling_spec_for_weights(plan, report.final.weights, plan.budget_n0)
    return report


def write_json(path, obj) -> None:
    """UTF-8 JSON with stable key order and a trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
