"""Monte-Carlo checks of the shrinkage solution and its interference bounds."""

from dataclasses import dataclass, field

import numpy as np

from .regularizer import (
    ShrinkageProblem,
    energy,
    interference,
    interference_bound,
    penalty_energy_bound,
    percoord_oracle_batch,
    shrinkage_gain,
    shrinkage_solve,
)

# floating-point slack when comparing a computed value against its bound
BOUND_RTOL = 1e-12


@dataclass
class CheckResult:
    name: str
    trials: int
    violations: int
    worst: float
    detail: str = ""
    counterexamples: list = field(default_factory=list)

    @property
    def passed(self):
        return self.violations == 0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.violations}/{self.trials} violations, worst {self.worst:.3e} {self.detail}".rstrip()


def check_closed_form(n, rng, atol=1e-6):
    """Closed form against the golden-section oracle on random coordinates."""
    g = rng.uniform(-10.0, 10.0, n)
    e = 5.0 * (1.0 - rng.uniform(0.0, 1.0, n))  # (0, 5]
    lam = rng.uniform(0.0, 100.0, n)
    closed = g / (1.0 + lam * e**2)
    oracle = percoord_oracle_batch(g, e, lam)
    err = np.abs(closed - oracle)
    bad = np.flatnonzero(err > atol)
    examples = [
        {"g": g[i], "e": e[i], "lambda": lam[i], "closed": closed[i], "oracle": oracle[i]}
        for i in bad[:10]
    ]
    return CheckResult(
        "closed form vs oracle", n, len(bad), float(err.max()), f"(atol {atol:g})", examples
    )


def random_instance(rng, max_dim=16):
    d, k = rng.integers(1, max_dim + 1, size=2)
    G = rng.normal(size=(d, k)) * 10.0 ** rng.uniform(-2, 2)
    W = rng.normal(size=(d, k)) * 10.0 ** rng.uniform(-3, 1)
    W[rng.uniform(size=W.shape) < 0.2] = 0.0
    eps = 10.0 ** rng.uniform(-10, 0)
    lam = 10.0 ** rng.uniform(-3, 3)
    return ShrinkageProblem(G, energy(W, eps), lam), W


def check_bounds(n, rng, max_dim=16):
    """Interference bound and penalty-energy bound on the same random instances."""
    inter = CheckResult("interference bound", n, 0, 0.0)
    pen = CheckResult("penalty-energy bound", n, 0, 0.0)
    for _ in range(n):
        p, W = random_instance(rng, max_dim)
        lhs = abs(interference(shrinkage_solve(p), W))
        rhs = interference_bound(p, W)
        ratio = lhs / rhs if rhs > 0 else 0.0
        inter.worst = max(inter.worst, ratio)
        if lhs > rhs * (1 + BOUND_RTOL):
            inter.violations += 1
            inter.counterexamples.append({"G": p.G.tolist(), "W_past": W.tolist(), "lambda": p.lam, "epsilon": p.E.epsilon})
        achieved, bound = penalty_energy_bound(p)
        pen.worst = max(pen.worst, achieved / bound if bound > 0 else 0.0)
        if achieved > bound * (1 + BOUND_RTOL):
            pen.violations += 1
            pen.counterexamples.append({"G": p.G.tolist(), "W_past": W.tolist(), "lambda": p.lam, "epsilon": p.E.epsilon})
    inter.detail = "(worst = max LHS/RHS)"
    pen.detail = "(worst = max achieved/bound)"
    return inter, pen


def equality_instance(lam, shape=(4, 4), seed=0, epsilon=1e-12):
    """Instance where every ``E_ij^2 = 1/lam`` and ``G`` is parallel to ``W_past``.

    Both inequalities in the interference chain are then tight.
    """
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=shape)
    W = signs * (1.0 / np.sqrt(lam) - epsilon)
    G = 3.0 * W
    return ShrinkageProblem(G, energy(W, epsilon), lam), W


def check_equality(lams=(0.01, 0.5, 1.0, 2.0, 100.0)):
    worst = 0.0
    violations = 0
    for lam in lams:
        p, W = equality_instance(lam)
        ratio = abs(interference(shrinkage_solve(p), W)) / interference_bound(p, W)
        gap = abs(1.0 - ratio)
        worst = max(worst, gap)
        if ratio < 1.0 - 1e-12:
            violations += 1
    return CheckResult("bound tightness", len(lams), violations, worst, "(worst = |1 - LHS/RHS|)")


def check_supremum(lams=(1e-3, 0.1, 1.0, 7.0, 1e3)):
    """``x / (1 + lam x)^2`` peaks at ``x = 1/lam`` with value ``1/(4 lam)``."""
    grid = np.logspace(-6, 6, 20001)
    violations = 0
    worst = 0.0
    for lam in lams:
        peak = float(shrinkage_gain(1.0 / lam, lam))
        target = 1.0 / (4.0 * lam)
        rel = abs(peak - target) / target
        worst = max(worst, rel)
        if rel > 4 * np.finfo(float).eps:
            violations += 1
        if np.any(shrinkage_gain(grid, lam) > target * (1 + BOUND_RTOL)):
            violations += 1
    return CheckResult("supremum identity", 2 * len(lams), violations, worst, "(worst rel. error at 1/lambda)")


def run_suite(trials=10000, seed=0, coords=100000):
    rng = np.random.default_rng(seed)
    results = [check_closed_form(coords, rng)]
    results.extend(check_bounds(trials, rng))
    results.append(check_equality())
    results.append(check_supremum())
    return results
