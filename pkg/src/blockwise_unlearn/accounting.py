"""Closed-form privacy accounting for noisy fine-tuning.

Everything here is exact scalar arithmetic: conversion between Renyi and
(eps, delta) budgets, the minimal Gaussian noise variance that certifies an
unlearning run, the step count T(sigma^2) obtained from the largest root of a
quadratic in x = (1 - gamma*lambda)^T, the inverse map sigma^2(T), and the
per-block composition used by the block-wise schedule.

All logarithms are natural.  All functions are pure: the same inputs always
produce bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError, InfeasibleBudget, InfeasibleNoise, NumericalError

CLIP_DOMINANT = "ClipDominant"
DECAY_DOMINANT = "DecayDominant"

# Dimensionless tolerance under which the normalized discriminant of the
# step-count quadratic is treated as exactly zero (double root).  Floating
# point puts its magnitude near 1e-13 at the minimal feasible noise; genuinely
# infeasible inputs (e.g. 0.999 * sigma2_min) land at -1e-3 and below.
_DISC_TOL = 1e-11

# Relative slack when rounding the real-valued step count up to an integer,
# so that inverting sigma^2(T) back to T survives floating-point jitter.
_STEP_SNAP = 1e-6


@dataclass(frozen=True)
class BudgetSpec:
    """Unlearning budget and update-dynamics constants.

    epsilon/delta are the total indistinguishability budget.  gamma is the
    unlearning learning rate, lam the weight-decay coefficient, c1 the
    gradient clipping radius, and c0 the initial-distance radius: half the
    high-probability distance bound between the trained and coupled retrained
    models in the proximity formulation, or the model clipping radius in the
    worst-case formulation.  q is the Renyi order; None means "optimize".
    """

    epsilon: float
    delta: float
    gamma: float
    lam: float
    c1: float
    c0: float
    q: float | None = None

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must be in (0,1), got {self.delta}")
        if not self.gamma > 0:
            raise DomainError(f"gamma must be > 0, got {self.gamma}")
        if self.lam < 0:
            raise DomainError(f"lam must be >= 0, got {self.lam}")
        if self.gamma * self.lam >= 1:
            raise DomainError(
                f"gamma*lam must be < 1, got {self.gamma * self.lam}"
            )
        if not self.c1 > 0:
            raise DomainError(f"c1 must be > 0, got {self.c1}")
        if not self.c0 > 0:
            raise DomainError(f"c0 must be > 0, got {self.c0}")
        if self.q is not None and not self.q > 1:
            raise DomainError(f"q must be > 1, got {self.q}")


@dataclass(frozen=True)
class BlockBudget:
    """Update-dynamics constants plus the Renyi allowance for one block.

    With k = 1 this describes the plain (non-block) schedule.
    """

    gamma: float
    lam: float
    c0: float
    c1: float
    q: float
    eps_renyi: float

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise DomainError(f"gamma must be > 0, got {self.gamma}")
        if self.lam < 0:
            raise DomainError(f"lam must be >= 0, got {self.lam}")
        if self.gamma * self.lam >= 1:
            raise DomainError(
                f"gamma*lam must be < 1, got {self.gamma * self.lam}"
            )
        if not self.c0 > 0 or not self.c1 > 0:
            raise DomainError("c0 and c1 must be > 0")
        if not self.q > 1:
            raise DomainError(f"q must be > 1, got {self.q}")
        if not self.eps_renyi > 0:
            raise DomainError(f"eps_renyi must be > 0, got {self.eps_renyi}")

    @property
    def ratio(self) -> float:
        """lam * c0 / c1, the quantity that selects the regime."""
        return self.lam * self.c0 / self.c1


@dataclass(frozen=True)
class QuadraticAux:
    """Intermediate scalars of the step-count quadratic, kept for debugging.

    zeta = 1/(1-(1-gamma*lam)^2); cb = sqrt(2*eps_renyi*sigma2/q);
    beta0 = 2*c1/(lam*cb); beta1 = beta0*(lam*c0/c1 - 1); z = 1 - lam*c0/c1;
    x is the root the caller worked with ((1-gamma*lam)^T or the largest
    feasible root, depending on direction).
    """

    zeta: float
    beta0: float
    beta1: float
    cb: float
    z: float
    x: float


@dataclass(frozen=True)
class NoisePlan:
    """Accounting output for a k-block unlearning run.

    sigma2 and steps_per_block apply to every block (equal-size splitting
    makes them identical across blocks).  The budget invariant is
    sum(eps_renyi_per_block) + ln(1/delta)/(q_used-1) == epsilon.
    """

    sigma2: float
    steps_per_block: int
    q_used: float
    eps_renyi_per_block: tuple[float, ...]
    c0_per_block: float
    c1_per_block: float
    regime: str
    epsilon: float
    delta: float
    gamma: float
    lam: float
    aux: QuadraticAux | None = field(default=None, compare=False)

    @property
    def k(self) -> int:
        return len(self.eps_renyi_per_block)

    @property
    def total_steps(self) -> int:
        return self.k * self.steps_per_block

    def to_dict(self) -> dict:
        d = {
            "sigma2": self.sigma2,
            "steps_per_block": self.steps_per_block,
            "total_steps": self.total_steps,
            "q_used": self.q_used,
            "eps_renyi_per_block": list(self.eps_renyi_per_block),
            "c0_per_block": self.c0_per_block,
            "c1_per_block": self.c1_per_block,
            "regime": self.regime,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "gamma": self.gamma,
            "lam": self.lam,
        }
        if self.aux is not None:
            d["aux"] = {
                "zeta": self.aux.zeta,
                "beta0": self.aux.beta0,
                "beta1": self.aux.beta1,
                "cb": self.aux.cb,
                "z": self.aux.z,
                "x": self.aux.x,
            }
        return d


def rdp_to_dp(eps_renyi: float, q: float, delta: float) -> float:
    """Convert a Renyi budget at order q into a total (eps, delta) epsilon."""
    if not q > 1:
        raise DomainError(f"Renyi order q must be > 1, got {q}")
    if not 0 < delta <= 1:
        raise DomainError(f"delta must be in (0,1], got {delta}")
    if eps_renyi < 0:
        raise DomainError(f"eps_renyi must be >= 0, got {eps_renyi}")
    return eps_renyi + math.log(1.0 / delta) / (q - 1.0)


def dp_to_rdp(epsilon: float, q: float, delta: float) -> float:
    """Renyi budget that remains at order q after the (eps, delta) conversion.

    Raises InfeasibleBudget when ln(1/delta)/(q-1) already exceeds epsilon,
    i.e. the chosen order is too small for the target budget.
    """
    if not q > 1:
        raise DomainError(f"Renyi order q must be > 1, got {q}")
    if not 0 < delta <= 1:
        raise DomainError(f"delta must be in (0,1], got {delta}")
    eps_renyi = epsilon - math.log(1.0 / delta) / (q - 1.0)
    if eps_renyi <= 0:
        raise InfeasibleBudget(
            f"order q={q} leaves no Renyi budget for epsilon={epsilon}, delta={delta}"
        )
    return eps_renyi


def optimize_q(epsilon: float, delta: float) -> float:
    """Renyi order minimizing q / eps_renyi(q), the noise-variance prefactor.

    Closed form: with L = ln(1/delta), the stationarity condition
    epsilon*(q-1)^2 = L*(2q-1) gives q* = ((eps+L) + sqrt(L*(eps+L))) / eps,
    which always satisfies the feasibility constraint q* > 1 + L/eps.
    """
    if not epsilon > 0:
        raise DomainError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise DomainError(f"delta must be in (0,1), got {delta}")
    big_l = math.log(1.0 / delta)
    return ((epsilon + big_l) + math.sqrt(big_l * (epsilon + big_l))) / epsilon


def min_noise(budget: BlockBudget) -> tuple[float, str]:
    """Smallest certified per-coordinate noise variance and its regime.

    In the clip-dominant regime (lam*c0/c1 < 1) the value is attained at a
    finite step count.  In the decay-dominant regime (>= 1) it is a strict
    infimum: a finite run needs strictly more noise.
    """
    prefactor = budget.gamma * (2.0 - budget.gamma * budget.lam) * (
        2.0 * budget.q / budget.eps_renyi
    )
    r = budget.ratio
    if r < 1.0:
        return prefactor * (2.0 - r) * budget.c0 * budget.c1, CLIP_DOMINANT
    if budget.lam == 0:
        raise DomainError("decay-dominant bound undefined for lam == 0")
    return prefactor * budget.c1**2 / budget.lam, DECAY_DOMINANT


def _aux(sigma2: float, budget: BlockBudget, x: float) -> QuadraticAux:
    cb = math.sqrt(2.0 * budget.eps_renyi * sigma2 / budget.q)
    zeta = 1.0 / (1.0 - (1.0 - budget.gamma * budget.lam) ** 2)
    beta0 = 2.0 * budget.c1 / (budget.lam * cb)
    beta1 = beta0 * (budget.ratio - 1.0)
    return QuadraticAux(
        zeta=zeta, beta0=beta0, beta1=beta1, cb=cb, z=1.0 - budget.ratio, x=x
    )


def _require_contraction(budget: BlockBudget) -> None:
    if budget.lam == 0:
        raise DomainError(
            "step-count accounting needs lam > 0 (no contraction at lam == 0)"
        )


def largest_feasible_x(sigma2: float, budget: BlockBudget) -> float:
    """Largest root in (0, 1] of the certification quadratic.

    The quadratic is (beta1^2+zeta) x^2 + 2 beta0 beta1 x + (beta0^2-zeta)=0;
    its largest root is the contraction level x = (1-gamma*lam)^T reached by
    the fewest certified steps.  Raises InfeasibleNoise when no root lies in
    (0, 1] (noise below the certified threshold, or exactly at the strict
    decay-dominant bound where the root degenerates to x = 0).
    """
    _require_contraction(budget)
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be > 0, got {sigma2}")
    aux = _aux(sigma2, budget, x=float("nan"))
    zeta, beta0, beta1 = aux.zeta, aux.beta0, aux.beta1
    # Normalized discriminant: disc / (4 zeta^2).  Dimensionless, so a single
    # absolute tolerance separates the double root from true infeasibility.
    disc_n = 1.0 + (beta1 * beta1 - beta0 * beta0) / zeta
    if disc_n < -_DISC_TOL:
        raise InfeasibleNoise(
            f"sigma2={sigma2} is below the certified threshold (disc={disc_n:.3e})"
        )
    if disc_n <= _DISC_TOL:
        disc_n = 0.0
    x = (-beta0 * beta1 + zeta * math.sqrt(disc_n)) / (beta1 * beta1 + zeta)
    if x <= 1e-12:
        raise InfeasibleNoise(
            f"sigma2={sigma2} admits no finite step count (root at x={x:.3e})"
        )
    return min(x, 1.0)


def steps_real(sigma2: float, budget: BlockBudget) -> float:
    """Real-valued step count ln(x_max)/ln(1-gamma*lam) for the given noise."""
    x = largest_feasible_x(sigma2, budget)
    return math.log(x) / math.log(1.0 - budget.gamma * budget.lam)


def steps_for_noise(sigma2: float, budget: BlockBudget) -> int:
    """Certified step count for a noise variance: ceil of the real count, >= 1.

    Near-integer real counts (within 1e-6 relative) are snapped rather than
    ceiled so that steps_for_noise(noise_for_steps(T)) == T holds under
    floating point.
    """
    t = steps_real(sigma2, budget)
    nearest = round(t)
    if abs(t - nearest) <= _STEP_SNAP * max(1.0, abs(nearest)):
        t_int = int(nearest)
    else:
        t_int = math.ceil(t)
    return max(t_int, 1)


def noise_for_steps(steps: int, budget: BlockBudget) -> float:
    """Smallest noise variance certifying exactly `steps` update steps.

    Solves the quadratic a s^2 + b s + c = 0 in s = 1/sigma^2 obtained by
    requiring x = (1-gamma*lam)^steps to be a root of the certification
    quadratic, taking the stable branch of the root formula.
    """
    _require_contraction(budget)
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    x = (1.0 - budget.gamma * budget.lam) ** steps
    if not 0.0 < x < 1.0:
        raise DomainError(f"contraction level x={x} outside (0,1)")
    z = 1.0 - budget.ratio
    big_k = 2.0 * budget.q * budget.c1**2 / (budget.eps_renyi * budget.lam**2)
    g = budget.gamma * budget.lam * (2.0 - budget.gamma * budget.lam)
    a = big_k**2 * z**2 * (1.0 - x * z) ** 2
    b = big_k / g * (1.0 - 2.0 * x * z + (2.0 * x * x - 1.0) * z * z)
    c = (x * x - 1.0) / (g * g)
    if a == 0.0:
        sigma2 = -b / c
    else:
        disc = b * b - 4.0 * a * c
        if disc < 0.0:
            raise NumericalError(
                f"negative discriminant {disc} inverting noise for steps={steps}"
            )
        root = math.sqrt(disc)
        # One positive root (a > 0, c < 0); pick the cancellation-free form.
        if b <= 0.0:
            sigma2 = 2.0 * a / (-b + root)
        else:
            sigma2 = (-b - root) / (2.0 * c)
    if not sigma2 > 0.0 or not math.isfinite(sigma2):
        raise NumericalError(f"non-positive noise {sigma2} for steps={steps}")
    return sigma2


def split_budget(
    eps_renyi_total: float,
    q: float,
    delta: float,
    k: int,
    c0: float,
    c1: float,
    scale_c0: bool = True,
) -> tuple[tuple[float, ...], float, float]:
    """Equal per-block Renyi budgets and sqrt(k)-scaled clipping radii.

    Returns (eps_renyi_per_block, c0_per_block, c1_per_block).  scale_c0=False
    keeps the initial-distance radius global (the block schedule is silent on
    it; scaling both radii is the default).
    """
    if k <= 0:
        raise DomainError(f"k must be >= 1, got {k}")
    if not q > 1:
        raise DomainError(f"Renyi order q must be > 1, got {q}")
    if not 0 < delta < 1:
        raise DomainError(f"delta must be in (0,1), got {delta}")
    per_block = tuple([eps_renyi_total / k] * k)
    root_k = math.sqrt(k)
    return per_block, (c0 / root_k if scale_c0 else c0), c1 / root_k


def make_plan(
    spec: BudgetSpec,
    k: int,
    steps: int | None = None,
    scale_c0: bool = True,
) -> NoisePlan:
    """Complete accounting plan for a k-block run.

    steps=None selects the minimal-noise point (noise = min_noise, step count
    from the largest feasible root); an integer fixes the per-block step
    count and solves for the matching noise.  Either way the composition
    invariant  sum(eps_renyi_per_block) + ln(1/delta)/(q-1) == epsilon  holds.
    """
    q = spec.q if spec.q is not None else optimize_q(spec.epsilon, spec.delta)
    eps_renyi_total = dp_to_rdp(spec.epsilon, q, spec.delta)
    per_block, c0_b, c1_b = split_budget(
        eps_renyi_total, q, spec.delta, k, spec.c0, spec.c1, scale_c0=scale_c0
    )
    budget = BlockBudget(
        gamma=spec.gamma, lam=spec.lam, c0=c0_b, c1=c1_b, q=q,
        eps_renyi=per_block[0],
    )
    _, regime = min_noise(budget)
    if steps is None:
        sigma2, _ = min_noise(budget)
        t = steps_for_noise(sigma2, budget)
        x = largest_feasible_x(sigma2, budget)
    else:
        t = int(steps)
        sigma2 = noise_for_steps(t, budget)
        x = (1.0 - spec.gamma * spec.lam) ** t
    return NoisePlan(
        sigma2=sigma2,
        steps_per_block=t,
        q_used=q,
        eps_renyi_per_block=per_block,
        c0_per_block=c0_b,
        c1_per_block=c1_b,
        regime=regime,
        epsilon=spec.epsilon,
        delta=spec.delta,
        gamma=spec.gamma,
        lam=spec.lam,
        aux=_aux(sigma2, budget, x=x),
    )


def plan_block_budget(plan: NoisePlan) -> BlockBudget:
    """Per-block dynamics constants implied by a plan (all blocks identical)."""
    return BlockBudget(
        gamma=plan.gamma,
        lam=plan.lam,
        c0=plan.c0_per_block,
        c1=plan.c1_per_block,
        q=plan.q_used,
        eps_renyi=plan.eps_renyi_per_block[0],
    )
