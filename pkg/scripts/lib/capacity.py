"""
Capacity planning for the compressed paged KV cache.

Given a memory budget, picks the maximum concurrency M (number of query slots)
and the total block count N_total subject to

    m_kv * N_total + M * m_q <= m_available
    M <= N_total / N_max
    M > 0, N_total > 0

Memory is measured in abstract integer units; callers map bytes to units.
"""

from dataclasses import dataclass
from fractions import Fraction

from lib.errors import ConfigError, InfeasibleBudget

# Enumeration guard for the brute-force oracle
MAX_ENUMERABLE_UNITS = 10**6


@dataclass(frozen=True)
class MemoryBudget:
    m_available: int
    m_kv: int
    m_q: int
    n_max: int
    d: int = 1

    def __post_init__(self):
        for name in ("m_available", "m_kv", "m_q", "n_max", "d"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"budget.{name} must be positive, got {getattr(self, name)}")
        # One block must stay reservable for decoding after compressing into N_max - 1 blocks
        if self.n_max < 2:
            raise ConfigError(f"budget.n_max must be >= 2, got {self.n_max}")


@dataclass(frozen=True)
class CapacityPlan:
    max_concurrency: int
    total_blocks: int

    def satisfies(self, budget, with_global=False):
        """True when the plan meets every constraint of the budget verbatim."""
        m_kv = _effective_m_kv(budget, with_global)
        return (
            m_kv * self.total_blocks + self.max_concurrency * budget.m_q <= budget.m_available
            and self.max_concurrency * budget.n_max <= self.total_blocks
            and self.max_concurrency > 0
            and self.total_blocks > 0
        )


def _effective_m_kv(budget, with_global):
    # The global-score cache F adds 1/(2d) of the K/V footprint to every block
    if with_global:
        return Fraction(budget.m_kv) * (1 + Fraction(1, 2 * budget.d))
    return Fraction(budget.m_kv)


def _closed_form(budget, with_global):
    m_kv = _effective_m_kv(budget, with_global)
    m_available = Fraction(budget.m_available)

    max_concurrency = int(m_available // (m_kv * budget.n_max + budget.m_q))
    total_blocks = int(m_available // (m_kv + Fraction(budget.m_q, budget.n_max)))

    if max_concurrency == 0 or total_blocks == 0:
        raise InfeasibleBudget(
            f"budget of {budget.m_available} units cannot hold one request "
            f"({budget.n_max} blocks of {m_kv} units plus {budget.m_q} units of queries)"
        )
    return CapacityPlan(max_concurrency=max_concurrency, total_blocks=total_blocks)


def solve_capacity(budget):
    """Closed-form optimum: M = floor(m / (m_kv*N_max + m_q)), N_total = floor(m / (m_kv + m_q/N_max))."""
    return _closed_form(budget, with_global=False)


def solve_capacity_with_global(budget):
    """Same closed form with m_kv scaled by (1 + 1/(2d)) for the global-score cache."""
    return _closed_form(budget, with_global=True)


def enumerate_feasible(budget, with_global=False):
    """
    Brute-force oracle over integer (M, N_total).
    Returns the feasible pair with the largest M, ties broken by the largest N_total.

    For a fixed M the feasible N_total form the interval [M*N_max, (m - M*m_q) / m_kv],
    so every M is visited and its interval checked instead of walking each N.
    """
    if budget.m_available > MAX_ENUMERABLE_UNITS:
        raise ConfigError(f"m_available={budget.m_available} is too large to enumerate (max {MAX_ENUMERABLE_UNITS})")

    m_kv = _effective_m_kv(budget, with_global)
    num, den = m_kv.numerator, m_kv.denominator
    best = None
    for concurrency in range(1, budget.m_available // budget.m_q + 1):
        remaining = budget.m_available - concurrency * budget.m_q
        blocks = remaining * den // num
        if blocks <= 0 or blocks < concurrency * budget.n_max:
            continue
        candidate = CapacityPlan(max_concurrency=concurrency, total_blocks=blocks)
        if best is None or (candidate.max_concurrency, candidate.total_blocks) > (
            best.max_concurrency,
            best.total_blocks,
        ):
            best = candidate

    if best is None:
        raise InfeasibleBudget(f"no feasible (M, N_total) for a budget of {budget.m_available} units")
    return best


def plan_capacity(budget, use_global=False, method="closed_form"):
    """Engine-facing entry: 'closed_form' reproduces the formula, 'tight' uses the oracle."""
    if method == "closed_form":
        return solve_capacity_with_global(budget) if use_global else solve_capacity(budget)
    if method == "tight":
        return enumerate_feasible(budget, with_global=use_global)
    raise ConfigError(f"budget.capacity must be 'closed_form' or 'tight', got '{method}'")
