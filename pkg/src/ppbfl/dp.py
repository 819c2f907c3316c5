"""Adaptive local differential privacy for model weights.

Every weight is pushed away from (or pulled toward) its layer's center by one
of two multiplicative factors chosen by a biased coin. Three mechanisms share
that shape:

``local``
    Applied by a trainer before upload. Geometry comes from the previous
    round's global model so all trainers perturb against the same interval.
``global``
    Applied once by the aggregator to the averaged model, with geometry from
    that aggregate. Its factors sit on the opposite side of 1 from the local
    ones, hence "reverse" noise.
``cafl``
    Baseline with geometry from the model being perturbed and much wider
    factors.

All three are unbiased: ``E[output] = weight`` for a fixed geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import (
    EmptyComposition,
    EmptyLayer,
    InvalidBudget,
    InvalidCount,
    NonFiniteWeight,
    ShapeMismatch,
)
from .tensornet import ModelParams

Mechanism = Literal["local", "global", "cafl"]
Reference = Literal["previous-global", "self"]

CAFL_EPSILON_FLOOR = 1e-6


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float

    def __post_init__(self):
        eps = float(self.epsilon)
        if not math.isfinite(eps) or eps <= 0:
            raise InvalidBudget(f"epsilon must be positive and finite, got {self.epsilon!r}")
        object.__setattr__(self, "epsilon", eps)


@dataclass(frozen=True)
class LayerGeometry:
    center: float
    radius: float
    reference: Reference = "self"

    def contains(self, weight: float) -> bool:
        return abs(weight - self.center) <= self.radius


@dataclass(frozen=True)
class BernoulliSplit:
    p_one: float
    p_zero: float


@dataclass(frozen=True)
class PerturbationReport:
    original: float
    delta: float
    branch: int
    output: float
    in_range: bool


def layer_geometry(weights, reference: Reference = "self") -> LayerGeometry:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise EmptyLayer("cannot take the geometry of an empty layer")
    if not np.isfinite(w).all():
        raise NonFiniteWeight("layer contains non-finite weights")
    hi, lo = float(w.max()), float(w.min())
    center = (hi + lo) / 2
    # every weight must fall inside [center - radius, center + radius]
    radius = max(abs(hi - center), abs(center - lo))
    return LayerGeometry(center, radius, reference)


def bernoulli_split(budget: PrivacyBudget) -> BernoulliSplit:
    e = math.exp(budget.epsilon)
    p_one = e / (2 * e + 1)
    return BernoulliSplit(p_one, 1 - p_one)


def cafl_p_one(budget: PrivacyBudget) -> float:
    e = math.exp(budget.epsilon)
    return (e - 1) / (2 * e)


def branch_factors(budget: PrivacyBudget, mechanism: Mechanism) -> tuple[float, float]:
    """Multipliers applied to ``weight - center`` for coin 1 and coin 0."""
    e = math.exp(budget.epsilon)
    if mechanism == "local":
        return (e + 1) / e, e / (e + 1)
    if mechanism == "global":
        return (e - 1) / e, (e + 2) / (e + 1)
    if mechanism == "cafl":
        if budget.epsilon < CAFL_EPSILON_FLOOR:
            raise InvalidBudget(f"cafl needs epsilon >= {CAFL_EPSILON_FLOOR}")
        return (e + 1) / (e - 1), (e - 1) / (e + 1)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def coin_probability(budget: PrivacyBudget, mechanism: Mechanism) -> float:
    """Probability that the coin lands on 1."""
    if mechanism == "cafl":
        return cafl_p_one(budget)
    return bernoulli_split(budget).p_one


def _perturb(weight: float, geom: LayerGeometry, budget: PrivacyBudget, coin: int, mechanism: Mechanism):
    if coin not in (0, 1):
        raise ValueError(f"coin must be 0 or 1, got {coin!r}")
    f1, f0 = branch_factors(budget, mechanism)
    delta = weight - geom.center
    out = geom.center + delta * (f1 if coin == 1 else f0)
    return PerturbationReport(weight, delta, coin, out, geom.contains(weight))


def perturb_local(weight: float, geom: LayerGeometry, budget: PrivacyBudget, coin: int) -> PerturbationReport:
    return _perturb(weight, geom, budget, coin, "local")


def perturb_global(weight: float, geom: LayerGeometry, budget: PrivacyBudget, coin: int) -> PerturbationReport:
    return _perturb(weight, geom, budget, coin, "global")


def perturb_cafl(weight: float, geom: LayerGeometry, budget: PrivacyBudget, coin: int) -> PerturbationReport:
    return _perturb(weight, geom, budget, coin, "cafl")


def perturb_array(
    values: np.ndarray,
    geom: LayerGeometry,
    budget: PrivacyBudget,
    mechanism: Mechanism,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorised scalar mechanism; bit-identical to calling it per weight with the same coins."""
    f1, f0 = branch_factors(budget, mechanism)
    coins = rng.random(values.shape) < coin_probability(budget, mechanism)
    delta = values - geom.center
    return geom.center + delta * np.where(coins, f1, f0)


def perturb_model(
    model: ModelParams,
    reference: ModelParams | None,
    budget: PrivacyBudget,
    mechanism: Mechanism,
    rng: np.random.Generator,
) -> ModelParams:
    """Perturb every weight and bias of ``model`` with its own coin.

    Geometry is computed per layer from ``reference`` (``None`` means the model
    itself). Each layer draws from its own child stream seeded off ``rng``, so
    layers can be processed in any order with identical results.
    """
    ref = model if reference is None else reference
    if not model.compatible(ref):
        raise ShapeMismatch(f"model {model.schema_id} vs reference {ref.schema_id}")
    tag: Reference = "self" if reference is None or reference is model else "previous-global"
    seeds = rng.integers(0, 2**63, size=len(model.layers))
    pools = []
    for layer, ref_layer, seed in zip(model.layers, ref.layers, seeds):
        geom = layer_geometry(ref_layer.pool, tag)
        pools.append(perturb_array(layer.pool, geom, budget, mechanism, np.random.default_rng(int(seed))))
    return model.with_pools(pools)


def expected_output(weight: float, geom: LayerGeometry, budget: PrivacyBudget, mechanism: Mechanism) -> float:
    """Exact two-branch expectation of the mechanism output."""
    p1 = coin_probability(budget, mechanism)
    p0 = bernoulli_split(budget).p_zero if mechanism != "cafl" else 1 - p1
    f1, f0 = branch_factors(budget, mechanism)
    delta = weight - geom.center
    return math.fsum([p1 * geom.center, p1 * delta * f1, p0 * geom.center, p0 * delta * f0])


def closed_form_variance(delta: float, budget: PrivacyBudget) -> float:
    e = math.exp(budget.epsilon)
    return delta * delta / (e * (e + 1))


def avg_variance_bound(radius: float, budget: PrivacyBudget, n: int) -> float:
    """Upper bound on the variance of the mean of ``n`` perturbed weights."""
    if n < 1:
        raise InvalidCount(f"n must be >= 1, got {n}")
    return closed_form_variance(radius, budget) / n


def compose_budgets(budgets: Sequence[PrivacyBudget]) -> PrivacyBudget:
    """Sequential composition: epsilons add."""
    if not budgets:
        raise EmptyComposition("no budgets to compose")
    return PrivacyBudget(math.fsum(b.epsilon for b in budgets))


def probability_ratio(budget: PrivacyBudget) -> float:
    """``p_one / p_zero``, which simplifies to ``e^eps / (e^eps + 1)``."""
    s = bernoulli_split(budget)
    return s.p_one / s.p_zero
