"""f-divergence generators, convex conjugates, and conjugate derivatives.

Each divergence is defined by a convex generator f with f(1) = 0. We work
with the *shifted* generators, normalized so that f(1) = 0 and f'(1) = 0
(e.g. KL uses x*log(x) - x + 1 rather than x*log(x)). The shift changes
neither the divergence value nor the induced weighting, but it makes the
generator/conjugate pair self-consistent: the conjugates below are exactly
the Legendre-Fenchel conjugates of the shifted generators, so the identity

    conjugate_prime(generator_prime(x)) == x

holds on the whole generator domain. conjugate_prime is the occupancy-ratio
map: evaluated at a scaled TD error it returns the priority multiplier, and
conjugate_prime(0) == 1 for every non-degenerate kind (zero TD error keeps
the sampling distribution unchanged).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class Kind(enum.Enum):
    KL = "kl"
    REVERSE_KL = "reverse_kl"
    PEARSON_CHI2 = "pearson_chi2"
    NEYMAN_CHI2 = "neyman_chi2"
    TOTAL_VARIATION = "total_variation"
    SQUARED_HELLINGER = "squared_hellinger"


class DomainError(ValueError):
    """Argument outside the valid domain of a generator or conjugate."""


class NondifferentiableError(ValueError):
    """Derivative requested at a kink; carries the subgradient interval."""

    def __init__(self, message: str, subgradient: tuple[float, float]):
        super().__init__(message)
        self.subgradient = subgradient


@dataclass(frozen=True)
class DivergenceSpec:
    """A named f-divergence with its generator/conjugate domains.

    domain_f is an open interval of valid generator arguments (positive
    reals for every kind here). domain_conj is the conjugate's domain;
    closed-at-the-right kinds (total variation) include the endpoint.
    """

    kind: Kind
    domain_f: tuple[float, float]
    domain_conj: tuple[float, float]
    conj_upper_open: bool

    @property
    def name(self) -> str:
        return self.kind.value

    def check_x(self, x: float) -> None:
        lo, hi = self.domain_f
        if not (lo < x < hi) or not math.isfinite(x):
            raise DomainError(
                f"{self.name}: generator argument {x!r} outside open interval "
                f"({lo}, {hi})"
            )

    def check_y(self, y: float) -> None:
        lo, hi = self.domain_conj
        if not math.isfinite(y):
            raise DomainError(f"{self.name}: conjugate argument {y!r} is not finite")
        if y < lo or (y >= hi if self.conj_upper_open else y > hi):
            bound = f"y < {hi}" if self.conj_upper_open else f"y <= {hi}"
            raise DomainError(
                f"{self.name}: conjugate argument {y!r} violates {bound}"
                + (f" and y >= {lo}" if lo > -math.inf else "")
            )


_INF = math.inf

SPECS: dict[Kind, DivergenceSpec] = {
    Kind.KL: DivergenceSpec(Kind.KL, (0.0, _INF), (-_INF, _INF), False),
    Kind.REVERSE_KL: DivergenceSpec(Kind.REVERSE_KL, (0.0, _INF), (-_INF, 1.0), True),
    Kind.PEARSON_CHI2: DivergenceSpec(
        Kind.PEARSON_CHI2, (0.0, _INF), (-_INF, _INF), False
    ),
    Kind.NEYMAN_CHI2: DivergenceSpec(
        Kind.NEYMAN_CHI2, (0.0, _INF), (-_INF, 0.5), True
    ),
    Kind.TOTAL_VARIATION: DivergenceSpec(
        Kind.TOTAL_VARIATION, (0.0, _INF), (-0.5, 0.5), False
    ),
    Kind.SQUARED_HELLINGER: DivergenceSpec(
        Kind.SQUARED_HELLINGER, (0.0, _INF), (-_INF, 2.0), True
    ),
}

# Kinds with a differentiable generator on all of domain_f. Total variation
# is tabulated for completeness but excluded here (f*' == 1 gives uniform
# priorities, a degenerate scheme) and from the priority registry.
DIFFERENTIABLE_KINDS = (
    Kind.KL,
    Kind.REVERSE_KL,
    Kind.PEARSON_CHI2,
    Kind.NEYMAN_CHI2,
    Kind.SQUARED_HELLINGER,
)


def spec(kind: Kind | str) -> DivergenceSpec:
    """Look up a DivergenceSpec by Kind or by its stable string name."""
    if isinstance(kind, str):
        try:
            kind = Kind(kind)
        except ValueError:
            names = ", ".join(k.value for k in Kind)
            raise DomainError(f"unknown divergence {kind!r}; expected one of {names}")
    return SPECS[kind]


def generator(sp: DivergenceSpec, x: float) -> float:
    """Shifted generator f(x), normalized so f(1) = 0 and f'(1) = 0."""
    sp.check_x(x)
    k = sp.kind
    if k is Kind.KL:
        return x * math.log(x) - x + 1.0
    if k is Kind.REVERSE_KL:
        return -math.log(x) + x - 1.0
    if k is Kind.PEARSON_CHI2:
        return 0.5 * (x - 1.0) ** 2
    if k is Kind.NEYMAN_CHI2:
        return (x - 1.0) ** 2 / (2.0 * x)
    if k is Kind.TOTAL_VARIATION:
        return 0.5 * abs(x - 1.0)
    if k is Kind.SQUARED_HELLINGER:
        return 2.0 * (math.sqrt(x) - 1.0) ** 2
    raise AssertionError(k)


def generator_prime(sp: DivergenceSpec, x: float) -> float:
    """Derivative of the shifted generator; f'(1) = 0 for every smooth kind.

    Total variation has a kink at x = 1: there the full subgradient interval
    is reported via NondifferentiableError rather than any single number.
    """
    sp.check_x(x)
    k = sp.kind
    if k is Kind.KL:
        return math.log(x)
    if k is Kind.REVERSE_KL:
        return 1.0 - 1.0 / x
    if k is Kind.PEARSON_CHI2:
        return x - 1.0
    if k is Kind.NEYMAN_CHI2:
        return 0.5 * (1.0 - 1.0 / (x * x))
    if k is Kind.TOTAL_VARIATION:
        if x == 1.0:
            raise NondifferentiableError(
                "total_variation generator is not differentiable at x=1; "
                "subgradient is [-0.5, 0.5]",
                subgradient=(-0.5, 0.5),
            )
        return 0.5 if x > 1.0 else -0.5
    if k is Kind.SQUARED_HELLINGER:
        return 2.0 * (1.0 - 1.0 / math.sqrt(x))
    raise AssertionError(k)


def conjugate(sp: DivergenceSpec, y: float) -> float:
    """Convex conjugate f*(y) of the shifted generator."""
    sp.check_y(y)
    k = sp.kind
    if k is Kind.KL:
        return math.exp(y) - 1.0
    if k is Kind.REVERSE_KL:
        return -math.log(1.0 - y)
    if k is Kind.PEARSON_CHI2:
        return 0.5 * y * y + y
    if k is Kind.NEYMAN_CHI2:
        return 1.0 - math.sqrt(1.0 - 2.0 * y)
    if k is Kind.TOTAL_VARIATION:
        return y
    if k is Kind.SQUARED_HELLINGER:
        return 2.0 * y / (2.0 - y)
    raise AssertionError(k)


def conjugate_prime(sp: DivergenceSpec, y: float) -> float:
    """Derivative f*'(y): the occupancy ratio at scaled TD error y.

    Inverse of generator_prime, so conjugate_prime(0) = 1 for all kinds
    except total variation (whose conjugate is linear).
    """
    sp.check_y(y)
    k = sp.kind
    if k is Kind.KL:
        return math.exp(y)
    if k is Kind.REVERSE_KL:
        return 1.0 / (1.0 - y)
    if k is Kind.PEARSON_CHI2:
        return y + 1.0
    if k is Kind.NEYMAN_CHI2:
        return 1.0 / math.sqrt(1.0 - 2.0 * y)
    if k is Kind.TOTAL_VARIATION:
        return 1.0
    if k is Kind.SQUARED_HELLINGER:
        return 4.0 / (2.0 - y) ** 2
    raise AssertionError(k)
