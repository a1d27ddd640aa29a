import math

import numpy as np
import pytest

from blockwise_unlearn import accounting as acc
from blockwise_unlearn.errors import DomainError, InfeasibleBudget, InfeasibleNoise


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def scan_feasible(sigma2, budget, n=200_001):
    """Dense x-grid feasibility oracle built from the raw certification
    inequality, independent of the quadratic machinery:

        (2 c0 x + 2 c1 (1-x)/lam)^2 <= (2 er sigma2 / q) (1-x^2) zeta

    for some x in (0, 1].  The grid includes z = 1 - lam*c0/c1, where the
    inequality is tightest in the clip-dominant regime.
    """
    cb2 = 2.0 * budget.eps_renyi * sigma2 / budget.q
    zeta = 1.0 / (1.0 - (1.0 - budget.gamma * budget.lam) ** 2)
    x = np.linspace(1e-9, 1.0, n)
    z = 1.0 - budget.lam * budget.c0 / budget.c1
    if 0.0 < z < 1.0:
        x = np.append(x, z)
    lhs = (2 * budget.c0 * x + 2 * budget.c1 * (1 - x) / budget.lam) ** 2
    rhs = cb2 * (1 - x * x) * zeta
    return bool(np.any(lhs <= rhs))


def disc_sign(sigma2, budget):
    """Sign of the step-count quadratic's discriminant, recomputed from
    scratch (not via the accounting module)."""
    cb2 = 2.0 * budget.eps_renyi * sigma2 / budget.q
    zeta = 1.0 / (1.0 - (1.0 - budget.gamma * budget.lam) ** 2)
    b0sq = 4.0 * budget.c1**2 / (budget.lam**2 * cb2)
    b1sq = b0sq * (budget.lam * budget.c0 / budget.c1 - 1.0) ** 2
    return zeta + b1sq - b0sq


def min_noise_by_bisection(budget, iters=200):
    lo, hi = 1e-12, 1e12
    assert disc_sign(lo, budget) < 0 and disc_sign(hi, budget) > 0
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if disc_sign(mid, budget) >= 0:
            hi = mid
        else:
            lo = mid
    return hi


def grid_search_q(epsilon, delta, step=1e-3, hi=500.0):
    qs = np.arange(1.0 + step, hi + step, step)
    big_l = math.log(1.0 / delta)
    er = epsilon - big_l / (qs - 1.0)
    obj = np.where(er > 0, qs / np.maximum(er, 1e-300), np.inf)
    return float(qs[int(np.argmin(obj))])


def random_clip_budgets(rng, n):
    out = []
    while len(out) < n:
        gamma = 10.0 ** rng.uniform(-4, -0.5)
        gl = rng.uniform(1e-3, 0.9)
        lam = gl / gamma
        c1 = 10.0 ** rng.uniform(-1, 2)
        ratio = rng.uniform(0.02, 0.95)
        c0 = ratio * c1 / lam
        q = rng.uniform(1.5, 50.0)
        er = 10.0 ** rng.uniform(-1.5, 0.8)
        out.append(acc.BlockBudget(gamma=gamma, lam=lam, c0=c0, c1=c1, q=q, eps_renyi=er))
    return out


CANON = acc.BlockBudget(gamma=0.1, lam=1.0, c0=1.0, c1=2.0, q=2.0, eps_renyi=1.0)


# ---------------------------------------------------------------------------
# conversions
# ---------------------------------------------------------------------------

class TestConversions:
    @pytest.mark.parametrize(
        "er,q,delta,expected,tol",
        [
            (0.510, 24.50, 1e-5, 1.000, 1e-3),
            (2.725, 6.06, 1e-5, 5.000, 2e-3),
        ],
    )
    def test_rdp_to_dp_reference_values(self, er, q, delta, expected, tol):
        assert acc.rdp_to_dp(er, q, delta) == pytest.approx(expected, abs=tol)

    def test_rdp_to_dp_delta_one(self):
        assert acc.rdp_to_dp(0.7, 3.3, 1.0) == 0.7

    def test_rdp_to_dp_domain(self):
        with pytest.raises(DomainError):
            acc.rdp_to_dp(0.5, 1.0, 1e-5)
        with pytest.raises(DomainError):
            acc.rdp_to_dp(0.5, 2.0, 0.0)
        with pytest.raises(DomainError):
            acc.rdp_to_dp(0.5, 2.0, 1.5)

    @pytest.mark.parametrize(
        "eps,q,delta,expected,tol",
        [
            (3.0, 9.10, 1e-5, 1.579, 2e-3),
            (10.0, 2.77, 1e-3, 6.101, 5e-3),
        ],
    )
    def test_dp_to_rdp_reference_values(self, eps, q, delta, expected, tol):
        assert acc.dp_to_rdp(eps, q, delta) == pytest.approx(expected, abs=tol)

    def test_dp_to_rdp_delta_one(self):
        assert acc.dp_to_rdp(1.0, 2.0, 1.0) == 1.0

    def test_dp_to_rdp_infeasible(self):
        # ln(1e5) / (2 - 1) > 3, leaving no Renyi budget
        with pytest.raises(InfeasibleBudget):
            acc.dp_to_rdp(3.0, 2.0, 1e-5)

    def test_round_trip(self):
        er = acc.dp_to_rdp(2.5, 8.0, 1e-4)
        assert acc.rdp_to_dp(er, 8.0, 1e-4) == pytest.approx(2.5, rel=1e-15)


class TestOptimizeQ:
    @pytest.mark.parametrize(
        "eps,delta,expected",
        [(1.0, 1e-5, 24.50), (5.0, 1e-5, 6.06), (3.0, 1e-5, 9.10), (10.0, 1e-3, 2.77)],
    )
    def test_reference_orders(self, eps, delta, expected):
        assert acc.optimize_q(eps, delta) == pytest.approx(expected, abs=0.1)

    def test_matches_grid_search(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            eps = 10.0 ** rng.uniform(-1, 1.3)
            delta = 10.0 ** rng.uniform(-8, -1)
            q_closed = acc.optimize_q(eps, delta)
            q_grid = grid_search_q(eps, delta)
            assert abs(q_closed - q_grid) <= 0.05, (eps, delta)

    def test_leaves_positive_budget(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            eps = 10.0 ** rng.uniform(-1, 1.3)
            delta = 10.0 ** rng.uniform(-8, -1)
            q = acc.optimize_q(eps, delta)
            assert acc.dp_to_rdp(eps, q, delta) > 0

    def test_domain(self):
        with pytest.raises(DomainError):
            acc.optimize_q(1.0, 1.0)
        with pytest.raises(DomainError):
            acc.optimize_q(0.0, 1e-5)


# ---------------------------------------------------------------------------
# minimal noise
# ---------------------------------------------------------------------------

class TestMinNoise:
    def test_clip_dominant_example(self):
        sigma2, regime = acc.min_noise(CANON)
        assert regime == acc.CLIP_DOMINANT
        assert sigma2 == pytest.approx(0.1 * 1.9 * 4 * 1.5 * 2, rel=1e-12)
        assert sigma2 == pytest.approx(min_noise_by_bisection(CANON), rel=1e-9)

    def test_decay_dominant_example(self):
        b = acc.BlockBudget(gamma=0.1, lam=2.0, c0=2.0, c1=2.0, q=2.0, eps_renyi=1.0)
        sigma2, regime = acc.min_noise(b)
        assert regime == acc.DECAY_DOMINANT
        assert sigma2 == pytest.approx(0.1 * 1.8 * 4 * 2, rel=1e-12)
        # the bound is strict: no finite step count exists at the bound itself
        assert not scan_feasible(sigma2, b)
        assert scan_feasible(sigma2 * 1.01, b)

    def test_regime_boundary_continuity(self):
        # as lam*c0/c1 -> 1 both branch formulas coincide (lam*c0 == c1)
        b_clip = acc.BlockBudget(gamma=0.05, lam=2.0, c0=0.9999999 / 2.0, c1=1.0,
                                 q=3.0, eps_renyi=0.7)
        b_decay = acc.BlockBudget(gamma=0.05, lam=2.0, c0=1.0000001 / 2.0, c1=1.0,
                                  q=3.0, eps_renyi=0.7)
        s_clip, _ = acc.min_noise(b_clip)
        s_decay, _ = acc.min_noise(b_decay)
        assert s_clip == pytest.approx(s_decay, rel=1e-5)

    def test_matches_bisection_on_random_specs(self):
        rng = np.random.default_rng(11)
        for b in random_clip_budgets(rng, 100):
            sigma2, regime = acc.min_noise(b)
            assert regime == acc.CLIP_DOMINANT
            assert sigma2 == pytest.approx(min_noise_by_bisection(b), rel=1e-9)

    def test_scan_shows_root_above_not_below(self):
        rng = np.random.default_rng(12)
        for b in random_clip_budgets(rng, 100):
            sigma2, _ = acc.min_noise(b)
            assert scan_feasible(sigma2 * 1.000001, b)
            assert not scan_feasible(sigma2 * 0.999, b)


# ---------------------------------------------------------------------------
# step counts and noise inversion
# ---------------------------------------------------------------------------

class TestSteps:
    def test_steps_at_minimal_noise(self):
        sigma2, _ = acc.min_noise(CANON)
        assert acc.largest_feasible_x(sigma2, CANON) == pytest.approx(0.5, rel=1e-12)
        t_real = acc.steps_real(sigma2, CANON)
        assert t_real == pytest.approx(math.log(0.5) / math.log(0.9), rel=1e-9)
        assert acc.steps_for_noise(sigma2, CANON) == 7

    def test_huge_noise_needs_one_step(self):
        sigma2, _ = acc.min_noise(CANON)
        assert acc.steps_for_noise(1e9 * sigma2, CANON) == 1

    def test_below_threshold_infeasible(self):
        sigma2, _ = acc.min_noise(CANON)
        with pytest.raises(InfeasibleNoise):
            acc.steps_for_noise(0.999 * sigma2, CANON)

    def test_decay_bound_is_strict(self):
        b = acc.BlockBudget(gamma=0.1, lam=2.0, c0=2.0, c1=2.0, q=2.0, eps_renyi=1.0)
        bound, _ = acc.min_noise(b)
        with pytest.raises(InfeasibleNoise):
            acc.steps_for_noise(bound, b)
        assert acc.steps_for_noise(bound * 1.05, b) >= 1

    def test_real_step_formula_on_random_specs(self):
        rng = np.random.default_rng(13)
        for b in random_clip_budgets(rng, 100):
            sigma2, _ = acc.min_noise(b)
            expected = math.log(1.0 - b.ratio) / math.log(1.0 - b.gamma * b.lam)
            assert acc.steps_real(sigma2, b) == pytest.approx(expected, rel=1e-6)


class TestNoiseForSteps:
    def test_recovers_minimal_noise(self):
        sigma2_min, _ = acc.min_noise(CANON)
        # T* = ln(0.5)/ln(0.9) is not an integer; at the exact contraction
        # level x = 0.5 the inversion must return sigma2_min
        x = 1.0 - CANON.ratio
        t_star = math.log(x) / math.log(1.0 - CANON.gamma * CANON.lam)
        # integer steps bracket the optimum and both need more noise
        below = acc.noise_for_steps(math.floor(t_star), CANON)
        above = acc.noise_for_steps(math.ceil(t_star), CANON)
        assert below >= sigma2_min and above >= sigma2_min

    def test_round_trip_at_canonical_instance(self):
        for t in range(1, 25):
            sigma2 = acc.noise_for_steps(t, CANON)
            assert acc.steps_for_noise(sigma2, CANON) <= t

    def test_round_trip_random_specs(self):
        rng = np.random.default_rng(14)
        for b in random_clip_budgets(rng, 100):
            t = int(rng.integers(1, 30))
            sigma2 = acc.noise_for_steps(t, b)
            assert acc.steps_for_noise(sigma2, b) <= t

    def test_monotone_on_feasible_branch(self):
        # the branch where extra steps never cost extra noise is
        # T <= T* = steps_real(sigma2_min); beyond it the per-step drift
        # charge dominates and the required noise grows again
        rng = np.random.default_rng(15)
        checked = 0
        for b in random_clip_budgets(rng, 1500):
            sigma2_min, _ = acc.min_noise(b)
            t_star = acc.steps_real(sigma2_min, b)
            if t_star < 2:
                continue
            ts = range(1, math.floor(t_star) + 1)
            noises = [acc.noise_for_steps(t, b) for t in ts]
            assert all(hi >= lo - 1e-12 * hi for hi, lo in zip(noises, noises[1:]))
            checked += 1
            if checked >= 100:
                break
        assert checked >= 100

    def test_large_step_limit_is_decay_bound(self):
        # as T grows the required noise approaches c1^2/lam scaling from below
        limit = (
            CANON.gamma * (2 - CANON.gamma * CANON.lam)
            * (2 * CANON.q / CANON.eps_renyi) * CANON.c1**2 / CANON.lam
        )
        s2 = acc.noise_for_steps(50, CANON)
        assert s2 < limit
        assert s2 == pytest.approx(limit, rel=2e-2)
        assert acc.noise_for_steps(200, CANON) == pytest.approx(limit, rel=1e-8)

    def test_lam_zero_rejected(self):
        b = acc.BlockBudget(gamma=0.1, lam=0.0, c0=1.0, c1=2.0, q=2.0, eps_renyi=1.0)
        with pytest.raises(DomainError):
            acc.noise_for_steps(2, b)
        with pytest.raises(DomainError):
            acc.steps_for_noise(1.0, b)

    def test_min_noise_allows_lam_zero(self):
        b = acc.BlockBudget(gamma=0.1, lam=0.0, c0=1.0, c1=2.0, q=2.0, eps_renyi=1.0)
        sigma2, regime = acc.min_noise(b)
        assert regime == acc.CLIP_DOMINANT
        assert sigma2 == pytest.approx(0.1 * 2.0 * 4.0 * 2.0 * 2.0, rel=1e-12)


# ---------------------------------------------------------------------------
# budget splitting and plans
# ---------------------------------------------------------------------------

class TestSplitBudget:
    def test_two_block_reference(self):
        per_block, _, c1_b = acc.split_budget(0.510, 24.5, 1e-5, 2, 0.005, 100.0)
        assert per_block == (0.255, 0.255)
        assert c1_b == pytest.approx(70.71, abs=0.01)

    def test_four_block_reference(self):
        per_block, _, c1_b = acc.split_budget(2.725, 6.06, 1e-5, 4, 0.005, 55.0)
        assert per_block[0] == pytest.approx(0.681, abs=1e-3)
        assert c1_b == pytest.approx(27.500, abs=1e-3)

    def test_identity_at_k1(self):
        per_block, c0_b, c1_b = acc.split_budget(0.7, 5.0, 1e-5, 1, 0.3, 2.0)
        assert per_block == (0.7,)
        assert c0_b == 0.3 and c1_b == 2.0

    def test_recomposition_exact(self):
        rng = np.random.default_rng(16)
        for _ in range(200):
            eps = 10.0 ** rng.uniform(-1, 1)
            delta = 10.0 ** rng.uniform(-8, -1)
            q = rng.uniform(1.5, 60)
            k = int(rng.integers(1, 14))
            try:
                er = acc.dp_to_rdp(eps, q, delta)
            except InfeasibleBudget:
                continue
            per_block, _, _ = acc.split_budget(er, q, delta, k, 1.0, 1.0)
            total = acc.rdp_to_dp(math.fsum(per_block), q, delta)
            assert total == pytest.approx(eps, abs=1e-12)

    def test_c0_scaling_switch(self):
        _, c0_scaled, _ = acc.split_budget(1.0, 3.0, 1e-5, 4, 0.8, 2.0)
        _, c0_kept, _ = acc.split_budget(1.0, 3.0, 1e-5, 4, 0.8, 2.0, scale_c0=False)
        assert c0_scaled == pytest.approx(0.4)
        assert c0_kept == 0.8

    def test_bad_k(self):
        with pytest.raises(DomainError):
            acc.split_budget(1.0, 3.0, 1e-5, 0, 1.0, 1.0)


class TestMakePlan:
    MNIST_LIKE = acc.BudgetSpec(
        epsilon=1.0, delta=1e-5, gamma=1e-4, lam=10.0, c1=100.0, c0=0.005
    )

    def test_reference_fixed_steps_plan(self):
        plan = acc.make_plan(self.MNIST_LIKE, k=2, steps=2)
        assert plan.q_used == pytest.approx(24.5, abs=0.1)
        assert plan.eps_renyi_per_block[0] == pytest.approx(0.255, abs=1e-3)
        assert plan.steps_per_block == 2
        assert plan.total_steps == 4
        assert plan.regime == acc.CLIP_DOMINANT

    def test_classwise_reference_budget(self):
        spec = acc.BudgetSpec(
            epsilon=10.0, delta=1e-3, gamma=1e-3, lam=3.0, c1=55.0, c0=0.025
        )
        plan = acc.make_plan(spec, k=4, steps=2)
        assert plan.q_used == pytest.approx(2.77, abs=0.05)
        assert math.fsum(plan.eps_renyi_per_block) == pytest.approx(6.101, abs=5e-3)

    def test_k1_min_noise_reduces_to_baseline(self):
        spec = acc.BudgetSpec(
            epsilon=2.0, delta=1e-4, gamma=0.1, lam=1.0, c1=2.0, c0=1.0, q=8.0
        )
        plan = acc.make_plan(spec, k=1)
        b = acc.BlockBudget(gamma=0.1, lam=1.0, c0=1.0, c1=2.0, q=8.0,
                            eps_renyi=acc.dp_to_rdp(2.0, 8.0, 1e-4))
        sigma2, regime = acc.min_noise(b)
        assert plan.sigma2 == sigma2
        assert plan.regime == regime
        assert plan.steps_per_block == acc.steps_for_noise(sigma2, b)

    def test_budget_invariant(self):
        for k in (1, 2, 5, 13):
            plan = acc.make_plan(self.MNIST_LIKE, k=k, steps=2)
            total = acc.rdp_to_dp(
                math.fsum(plan.eps_renyi_per_block), plan.q_used, plan.delta
            )
            assert total == pytest.approx(plan.epsilon, abs=1e-9)
            floor, _ = acc.min_noise(acc.plan_block_budget(plan))
            assert plan.sigma2 >= floor * (1 - 1e-12)

    def test_sigma2_independent_of_k(self):
        # sqrt(k) radius scaling and 1/k budget splitting cancel exactly
        plans = [acc.make_plan(self.MNIST_LIKE, k=k, steps=2) for k in (1, 2, 4, 10)]
        for p in plans[1:]:
            assert p.sigma2 == pytest.approx(plans[0].sigma2, rel=1e-12)

    def test_deterministic(self):
        a = acc.make_plan(self.MNIST_LIKE, k=3, steps=2)
        b = acc.make_plan(self.MNIST_LIKE, k=3, steps=2)
        assert a == b
        assert a.to_dict() == b.to_dict()

    def test_min_noise_mode_decay_dominant_propagates(self):
        spec = acc.BudgetSpec(
            epsilon=2.0, delta=1e-4, gamma=0.1, lam=2.0, c1=2.0, c0=2.0, q=8.0
        )
        with pytest.raises(InfeasibleNoise):
            acc.make_plan(spec, k=1)

    def test_plan_sigma2_documented_against_published_tables(self):
        # The published runs report sigma2 = 0.0980 for this configuration,
        # but the tables do not pin down the radius convention or whether the
        # value was derived per block; both conventions computed here land
        # elsewhere (~0.030 with c0 = half the proximity bound, ~0.043 with
        # the full bound), so this records the reproduction gap instead of
        # asserting the published number.
        half = acc.make_plan(self.MNIST_LIKE, k=2, steps=2)
        full = acc.make_plan(
            acc.BudgetSpec(epsilon=1.0, delta=1e-5, gamma=1e-4, lam=10.0,
                           c1=100.0, c0=0.01),
            k=2, steps=2,
        )
        assert half.sigma2 == pytest.approx(0.0300, abs=2e-4)
        assert full.sigma2 == pytest.approx(0.0432, abs=2e-4)
        assert 0.0 < half.sigma2 < full.sigma2 < 0.0980


class TestDomainGuards:
    def test_contraction_violation_rejected(self):
        with pytest.raises(DomainError):
            acc.BlockBudget(gamma=0.5, lam=2.5, c0=1.0, c1=2.0, q=2.0, eps_renyi=1.0)
        with pytest.raises(DomainError):
            acc.BudgetSpec(epsilon=1.0, delta=1e-5, gamma=0.5, lam=2.5, c1=2.0, c0=1.0)

    def test_aux_identities(self):
        spec = acc.BudgetSpec(
            epsilon=1.0, delta=1e-5, gamma=1e-4, lam=10.0, c1=100.0, c0=0.005
        )
        plan = acc.make_plan(spec, k=2, steps=2)
        aux = plan.aux
        gl = spec.gamma * spec.lam
        assert aux.zeta == pytest.approx(1.0 / (1.0 - (1.0 - gl) ** 2), rel=1e-12)
        assert aux.zeta > 0
        assert aux.cb == pytest.approx(
            math.sqrt(2.0 * plan.eps_renyi_per_block[0] * plan.sigma2 / plan.q_used),
            rel=1e-12,
        )
        ratio = spec.lam * plan.c0_per_block / plan.c1_per_block
        assert aux.beta1 == pytest.approx(aux.beta0 * (ratio - 1.0), rel=1e-12)
        assert aux.z == pytest.approx(1.0 - ratio, rel=1e-12)
        assert 0.0 < aux.x <= 1.0


class TestPurity:
    def test_bit_identical_outputs(self):
        rng = np.random.default_rng(17)
        for b in random_clip_budgets(rng, 20):
            assert acc.min_noise(b) == acc.min_noise(b)
            s2 = acc.noise_for_steps(3, b)
            assert s2 == acc.noise_for_steps(3, b)
            assert acc.steps_for_noise(s2 * 1.5, b) == acc.steps_for_noise(s2 * 1.5, b)
