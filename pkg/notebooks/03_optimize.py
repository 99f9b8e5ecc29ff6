"""
Optimal mixtures across budgets
===============================

The summed predicted loss is convex on the simplex, so the optimizer's answer
can be checked against the coarse grid and its first-order conditions.
"""

from pathlib import Path

import numpy as np

from mixopt import TABLE1_PARAMS
from mixopt.optimizer import PAPER_GRID_LEVELS, budget_sweep, grid_search, optimize_weights
from mixopt.scaling_model import objective_gradient
from mixopt.svg import line_plot

out = Path("notebook_output")
out.mkdir(exist_ok=True)
names = [p.name for p in TABLE1_PARAMS]

rep = optimize_weights(TABLE1_PARAMS, 20_000_000)
print("20M weights:", {n: round(float(w), 4) for n, w in zip(names, rep.weights)}, "iterations", rep.iterations)

# at the optimum every domain's marginal loss reduction is the same
print("partials:", objective_gradient(TABLE1_PARAMS, rep.weights, 20_000_000))

rows = grid_search(TABLE1_PARAMS, 20_000_000, levels=PAPER_GRID_LEVELS)
print(f"{len(rows)} grid mixtures, best {rows[0][0]} at {rows[0][1]:.6f}; optimizer {rep.objective:.6f}")

budgets = np.geomspace(1e6, 1e10, 13).astype(int)
sweep = budget_sweep(TABLE1_PARAMS, budgets)
for b, r in sweep[::3]:
    print(f"{b:>12,d}  " + "  ".join(f"{w:.4f}" for w in r.weights))

series = {n: [float(r.weights[i]) for _, r in sweep] for i, n in enumerate(names)}
(out / "weights_vs_budget.svg").write_text(
    line_plot(list(budgets), series, title="Optimal weights", xlabel="tokens", ylabel="weight", xlog=True))
print("wrote", out / "weights_vs_budget.svg")

# a domain whose loss does not count only keeps what its transfer earns
g = optimize_weights(TABLE1_PARAMS, 20_000_000, gamma=[1, 0, 1])
print("Math loss ignored:", {n: round(float(w), 4) for n, w in zip(names, g.weights)})
