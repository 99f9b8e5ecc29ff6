"""Transfer-augmented power-law loss model.

For a domain with parameters ``(C, k, alpha, beta, E)`` the predicted
validation loss after training on ``n_self`` in-domain tokens and
``n_other`` tokens from every other domain is::

    L = C * (n_self + k * n_other**alpha) ** (-beta) + E

The mixture objective sums (optionally gamma-weighted) per-domain losses
when a budget of ``n0`` tokens is split according to a weight vector ``w``,
so that domain ``i`` sees ``w_i * n0`` own tokens and ``n0 - w_i * n0``
tokens from the rest.

All functions here are pure. Vectorised helpers prefixed with ``_`` are used
by the optimizer and do not raise on degenerate inputs; the public functions
validate and raise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "DomainParams",
    "ModelDomainError",
    "DegenerateInputError",
    "power",
    "effective_transfer",
    "domain_loss",
    "total_objective",
    "objective_gradient",
    "objective_hessian_diag",
    "as_gamma",
    "stack_params",
]


class ModelDomainError(ValueError):
    """A parameter or input lies outside the model's domain of validity."""


class DegenerateInputError(ModelDomainError):
    """The power-law base is zero (or the result is non-finite) for some domain.

    ``domain_index`` names the offending domain when known.
    """

    def __init__(self, message: str, domain_index: int | None = None):
        super().__init__(message)
        self.domain_index = domain_index


@dataclass(frozen=True)
class DomainParams:
    """Fitted constants for one domain."""

    C: float
    k: float
    alpha: float
    beta: float
    E: float
    name: str = ""

    def __post_init__(self):
        for field in ("C", "k", "alpha", "beta", "E"):
            value = float(getattr(self, field))
            if not math.isfinite(value):
                raise ModelDomainError(f"{self.name or 'domain'}: {field} must be finite, got {value!r}")
            object.__setattr__(self, field, value)
        if self.C <= 0:
            raise ModelDomainError(f"{self.name or 'domain'}: C must be > 0, got {self.C}")
        if self.k < 0:
            raise ModelDomainError(f"{self.name or 'domain'}: k must be >= 0, got {self.k}")
        if not 0.0 < self.alpha < 1.0:
            raise ModelDomainError(f"{self.name or 'domain'}: alpha must lie in (0, 1), got {self.alpha}")
        if self.beta <= 0:
            raise ModelDomainError(f"{self.name or 'domain'}: beta must be > 0, got {self.beta}")
        if self.E < 0:
            raise ModelDomainError(f"{self.name or 'domain'}: E must be >= 0, got {self.E}")

    def to_dict(self) -> dict:
        return {"name": self.name, "C": self.C, "k": self.k, "alpha": self.alpha,
                "beta": self.beta, "E": self.E}

    @classmethod
    def from_dict(cls, data: dict) -> "DomainParams":
        try:
            return cls(C=data["C"], k=data["k"], alpha=data["alpha"], beta=data["beta"],
                       E=data["E"], name=str(data.get("name", "")))
        except KeyError as exc:
            raise ModelDomainError(f"missing parameter {exc.args[0]!r} in {data!r}") from None

    def replace(self, **changes) -> "DomainParams":
        values = asdict(self)
        values.update(changes)
        return DomainParams(**values)


def _tokens(value, what: str) -> float:
    """Convert a token count to float, rejecting negatives and fractional noise."""
    if isinstance(value, (bool, np.bool_)):
        raise TypeError(f"{what} must be a token count, got {value!r}")
    if isinstance(value, (int, np.integer)):
        if value < 0:
            raise ModelDomainError(f"{what} must be >= 0, got {value}")
        return float(value)
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise ModelDomainError(f"{what} must be a finite non-negative count, got {value}")
    return value


def power(x, y):
    """``x**y`` as ``exp(y*ln x)``, with ``0**y = 0`` for ``y > 0``.

    Works on scalars and arrays; negative bases give ``nan``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.all(x > 0):
        out = np.exp(y * np.log(x))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.exp(y * np.log(x))
        out = np.where((x == 0) & (y > 0), 0.0, out)
    return out[()] if out.ndim == 0 else out


def effective_transfer(k: float, alpha: float, n_other) -> float:
    """Effective in-domain tokens contributed by ``n_other`` out-of-domain tokens."""
    if not (k >= 0 and math.isfinite(k)):
        raise ModelDomainError(f"k must be >= 0, got {k}")
    if not 0.0 < alpha < 1.0:
        raise ModelDomainError(f"alpha must lie in (0, 1), got {alpha}")
    n = _tokens(n_other, "n_other")
    if k == 0.0 or n == 0.0:
        return 0.0
    return k * float(power(n, alpha))


def domain_loss(p: DomainParams, n_self, n_other) -> float:
    """Predicted validation loss of one domain.

    Raises:
        DegenerateInputError: ``n_self`` is zero and no transfer reaches the
            domain, so the power-law base is zero.
    """
    s = _tokens(n_self, "n_self")
    base = s + effective_transfer(p.k, p.alpha, n_other)
    if base <= 0.0:
        raise DegenerateInputError(
            f"{p.name or 'domain'}: zero effective data (n_self=0 and no transfer); loss undefined")
    return p.C * float(power(base, -p.beta)) + p.E


def stack_params(params: Sequence[DomainParams]) -> tuple[np.ndarray, ...]:
    """Columns ``(C, k, alpha, beta, E)`` as float arrays."""
    arr = np.array([[p.C, p.k, p.alpha, p.beta, p.E] for p in params], dtype=float).reshape(-1, 5)
    return tuple(arr.T)


def as_gamma(gamma, K: int) -> np.ndarray:
    """Validate a per-domain objective multiplier vector (``None`` means all ones)."""
    if gamma is None:
        return np.ones(K)
    g = np.asarray(gamma, dtype=float).reshape(-1)
    if g.shape[0] != K:
        raise ModelDomainError(f"gamma has length {g.shape[0]}, expected {K}")
    if not np.all((g >= 0) & (g < np.inf)):
        raise ModelDomainError(f"gamma entries must be finite and >= 0, got {g.tolist()}")
    if not g.max() > 0:
        raise ModelDomainError("gamma must have at least one positive entry")
    return g


def _check_inputs(params, w, n0, gamma):
    K = len(params)
    if K == 0:
        raise ModelDomainError("need at least one domain")
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != K:
        raise ModelDomainError(f"weight vector has length {w.shape[0]}, expected {K}")
    if not np.all((w >= 0) & (w <= 1)):  # also rejects nan
        raise ModelDomainError(f"weights must lie in [0, 1], got {w.tolist()}")
    n0 = _tokens(n0, "n0")
    if n0 <= 0:
        raise ModelDomainError("n0 must be > 0")
    return w, n0, as_gamma(gamma, K)


# --- vectorised internals -------------------------------------------------
#
# Per-domain term: f_i(w) = C_i * x_i(w)**(-beta_i) + E_i with
#   x_i(w)  = w*n0 + k_i * (n0 - w*n0)**alpha_i
#   x_i'    = n0 * (1 - k_i*alpha_i * (n0*(1-w))**(alpha_i-1))
#   x_i''   = n0**2 * k_i*alpha_i*(alpha_i-1) * (n0*(1-w))**(alpha_i-2)
# Derivatives at w_i = 1 with k_i > 0 are +inf (transfer base hits zero).

def _others(w):
    """``1 - w_i`` taken as the sum of the other weights.

    Equal to ``1 - w`` on the simplex, but keeps full relative precision when
    one weight is within rounding of 1 and the others are tiny.
    """
    rest = w.sum() - w
    if w.size > 1:
        i = int(np.argmax(w))
        rest[i] = np.delete(w, i).sum()
    return rest


def _base(cols, w, n0, rest=None):
    C, k, a, b, E = cols
    rest = np.maximum((1.0 - w if rest is None else rest) * n0, 0.0)
    return w * n0 + k * power(rest, a), rest


def _terms(cols, w, n0, rest=None):
    C, k, a, b, E = cols
    x, _ = _base(cols, w, n0, rest)
    with np.errstate(divide="ignore", invalid="ignore"):
        return C * power(x, -b) + E


def _grad_terms(cols, w, n0, rest=None):
    C, k, a, b, E = cols
    x, rest = _base(cols, w, n0, rest)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tr = np.where(k > 0, k * a * power(rest, a - 1.0), 0.0)
        dx = n0 * (1.0 - tr)
        return -C * b * power(x, -b - 1.0) * dx


def _hess_terms(cols, w, n0, rest=None):
    C, k, a, b, E = cols
    x, rest = _base(cols, w, n0, rest)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tr = np.where(k > 0, k * a * power(rest, a - 1.0), 0.0)
        dx = n0 * (1.0 - tr)
        d2x = np.where(k > 0, n0 * n0 * k * a * (a - 1.0) * power(rest, a - 2.0), 0.0)
        return C * b * (b + 1.0) * power(x, -b - 2.0) * dx * dx - C * b * power(x, -b - 1.0) * d2x


def total_objective(params: Sequence[DomainParams], w, n0, gamma=None) -> float:
    """Gamma-weighted sum of predicted per-domain losses at budget ``n0``."""
    w, n0, g = _check_inputs(params, w, n0, gamma)
    cols = stack_params(params)
    x, _ = _base(cols, w, n0)
    bad = np.flatnonzero(~(x > 0))
    if bad.size:
        i = int(bad[0])
        raise DegenerateInputError(
            f"domain {i} ({params[i].name or 'unnamed'}) has zero effective data at w={w[i]!r}", i)
    return float(np.sum(g * _terms(cols, w, n0)))


def objective_gradient(params: Sequence[DomainParams], w, n0, gamma=None) -> np.ndarray:
    """Partial derivatives of :func:`total_objective` with respect to each weight.

    Term ``i`` only depends on ``w_i``, so the gradient is a vector of
    univariate derivatives. At ``w_i = 1`` with ``k_i > 0`` (and at
    ``w_i = 0`` with ``k_i = 0``) the derivative is unbounded and a
    :class:`DegenerateInputError` names the domain.
    """
    w, n0, g = _check_inputs(params, w, n0, gamma)
    grad = g * _grad_terms(stack_params(params), w, n0)
    # gamma_i = 0 zeroes the term even where its derivative blows up
    grad = np.where(g == 0, 0.0, grad)
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        i = int(bad[0])
        raise DegenerateInputError(
            f"non-finite gradient for domain {i} ({params[i].name or 'unnamed'}) at w={w[i]!r}", i)
    return grad


def objective_hessian_diag(params: Sequence[DomainParams], w, n0, gamma=None) -> np.ndarray:
    """Diagonal of the (exactly diagonal) Hessian of the mixture objective."""
    w, n0, g = _check_inputs(params, w, n0, gamma)
    h = g * _hess_terms(stack_params(params), w, n0)
    return np.where(g == 0, 0.0, h)
