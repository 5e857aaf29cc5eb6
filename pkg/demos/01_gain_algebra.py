#!/usr/bin/env python3
"""The per-step gain algebra: parabola, optimum, and the exact bound replay.

An auxiliary gradient added with coefficient lam shifts the one-step
improvement lower bound by a downward-opening parabola in lam. On a concave
quadratic objective the bound is an equality, so every identity here can be
checked directly.
"""

import numpy as np

from occ_lab.gain import (
    GainInputs,
    concave_quadratic,
    delta_mtp,
    delta_terms,
    gain_at_optimum,
    lambda_star,
    positivity_threshold,
    smoothness_bound_check,
)

eta, L = 0.1, 1.0
c, v2 = 1.0, 1.0

print("=== the gain parabola ===")
print(f"eta={eta} L={L} c={c} v2={v2}")
for lam in (0.0, 3.0, 9.0, 15.0, 18.0, 21.0):
    first, second = delta_terms(c, v2, eta, L, lam)
    print(f"  lam={lam:5.1f}  first={first:+.4f}  second={second:+.4f}  "
          f"gain={first + second:+.4f}")

star = lambda_star(c, v2, eta, L)
print(f"\noptimum lam* = {star}  (gain there: {gain_at_optimum(c, v2, eta, L)})")
print(f"positive-gain window: 0 < lam < {positivity_threshold(c, v2, eta, L)}")

print("\n=== sign symmetry ===")
for cc in (1.0, -1.0):
    d = delta_mtp(GainInputs(c=cc, v2=v2, eta=eta, L=L, lam=lambda_star(cc, v2, eta, L)))
    print(f"  c={cc:+.0f}: lam*={d.lambda_star:+.2f} gain at optimum={d.gain_at_optimum:.4f}")
print("clipping a negative-c coefficient to zero forfeits that whole gain.")

print("\n=== exact replay on a concave quadratic ===")
rng = np.random.default_rng(0)
value, grad = concave_quadratic(L)
worst = 0.0
for _ in range(1000):
    theta = rng.normal(size=8)
    g_mtp = rng.normal(size=8)
    lam = rng.uniform(-3, 3)
    step_eta = rng.uniform(0.01, 0.9 / L)
    g_rl = grad(theta)
    theta_next = theta + step_eta * (g_rl + lam * g_mtp)
    lhs = value(theta_next) - value(theta)
    gain = sum(delta_terms(float(g_rl @ g_mtp), float(g_mtp @ g_mtp), step_eta, L, lam))
    rhs = step_eta * (1 - L * step_eta / 2) * float(g_rl @ g_rl) + gain
    worst = max(worst, abs(lhs - rhs))
print(f"1000 random steps: max |J(theta') - J(theta) - bound terms| = {worst:.3e}")

_, _, holds = smoothness_bound_check(value, grad, rng.normal(size=8),
                                     rng.normal(size=8), L)
print(f"smoothness lower bound holds: {holds}")
