"""Convergence-bound calculators.

Descriptive evaluators for the analytic bounds on federated training
with a central vertical model: the non-convex rate in terms of averaged
gradient norms and the convex-case (PL condition) loss gap, plus the
lossy-network variants where the collected-model count K is deflated to
K*gamma. No constants are estimated from runs; callers supply them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class BoundParams:
    """Constants entering the bounds.

    ``l_smooth``: smoothness constant L; ``mu_pl``: PL constant;
    ``sigma2``/``sigma0_2``: local and central stochastic-gradient
    variances; ``g2``: gradient-norm bound; ``lambda_niid``: gradient
    divergence ratio (>= 1); ``f_init``/``f_star``: initial and optimal
    loss; ``f0``: initial-gradient factor in the convex bound.
    """

    l_smooth: float
    mu_pl: float
    sigma2: float
    sigma0_2: float
    g2: float
    lambda_niid: float
    f_init: float
    f_star: float
    f0: float
    local_epochs: int
    k: int
    global_epochs: int
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if self.l_smooth <= 0.0 or self.mu_pl <= 0.0:
            raise ValueError("smoothness and PL constants must be positive")
        if min(self.sigma2, self.sigma0_2, self.g2, self.f0) < 0.0:
            raise ValueError("variances, gradient bound and f0 must be non-negative")
        if self.lambda_niid < 1.0:
            raise ValueError(f"divergence ratio must be >= 1, got {self.lambda_niid}")
        if self.f_init < self.f_star:
            raise ValueError("initial loss cannot be below the optimal loss")
        if self.local_epochs < 1 or self.k < 1 or self.global_epochs < 1:
            raise ValueError("epoch and client counts must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")


def _noise_term(p: BoundParams, k_eff: float) -> float:
    el, l = p.local_epochs, p.l_smooth
    return (
        el * p.sigma0_2
        + (p.sigma2 / k_eff) * (1.0 / el + (p.lambda_niid - 1.0) * l)
        + (p.lambda_niid - 1.0) * l * el * p.g2
    )


def _nonconvex(p: BoundParams, k_eff: float) -> float:
    el, tg = p.local_epochs, p.global_epochs
    head = 2.0 * (p.f_init - p.f_star) / (math.sqrt(tg) * math.sqrt(el))
    return head + (p.l_smooth * math.sqrt(el) / math.sqrt(tg)) * _noise_term(p, k_eff)


def _convex(p: BoundParams, k_eff: float) -> float:
    el, tg = p.local_epochs, p.global_epochs
    bracket = _noise_term(p, k_eff) + p.f0 * p.g2 / (4.0 * el)
    return (1.0 / tg) * (2.0 * p.l_smooth / p.mu_pl**2) * bracket


def nonconvex_bound(p: BoundParams) -> float:
    """Bound on the averaged gradient norm over the global epochs (lossless)."""
    return _nonconvex(p, float(p.k))


def convex_bound(p: BoundParams) -> float:
    """Bound on the expected loss gap under the PL condition (lossless)."""
    return _convex(p, float(p.k))


def lossy_bounds(p: BoundParams) -> tuple[float, float]:
    """Both bounds with the collected-model count deflated to K*gamma."""
    if p.gamma <= 0.0:
        raise ValueError("gamma must be positive")
    k_eff = p.k * p.gamma
    return _nonconvex(p, k_eff), _convex(p, k_eff)


def sweep(
    p: BoundParams,
    param: str,
    values: Sequence[float],
) -> list[tuple[float, float, float]]:
    """Evaluate (value, nonconvex, convex) along a one-parameter sweep.

    Integer fields are swept with rounded values; the lossy variants are
    used throughout so a gamma sweep is just another column.
    """
    import dataclasses

    if param not in {f.name for f in dataclasses.fields(BoundParams)}:
        raise ValueError(f"unknown bound parameter {param!r}")
    rows = []
    for value in values:
        field_type = BoundParams.__dataclass_fields__[param].type
        cast = int(round(value)) if field_type == "int" else float(value)
        q = dataclasses.replace(p, **{param: cast})
        nc, cv = lossy_bounds(q)
        rows.append((float(value), nc, cv))
    return rows
