"""
Why multi-trigger poisoning survives 75% masking
================================================

Pre-training hides three quarters of the patches from the encoder, so a
poisoned image only teaches the backdoor when some trigger pixels are
among the visible quarter. This demo computes that survival probability
exactly, confirms it by simulation, and shows why nine small triggers
beat one.
"""
import numpy as np

from mimbd import (CoverageSpec, PlacementSpec, expected_visible_covered,
                   patches_covered, survival_probability_exact,
                   survival_probability_mc, trigger_positions)

# The desk geometry: 32x32 images cut into 4x4 patches -> an 8x8 grid of
# 64 patches, 48 of them masked (75%), 16 visible.
N, M = 64, 48
IMG, PATCH, TRIG = 32, 4, 7

# --- one trigger ------------------------------------------------------
# A single 7x7 trigger intersects either 4 or 9 patches depending on how
# it straddles the 4-pixel grid. Take the grid-centered position (13, 13):
covered = patches_covered(IMG, PATCH, TRIG, (13, 13))
print(f"a 7x7 trigger at (13,13) touches {len(covered)} of {N} patches")

p1 = survival_probability_exact(N, M, len(covered))
print(f"P(at least one of those patches is visible) = {p1:.4f}")
print(f"expected visible trigger patches            = "
      f"{expected_visible_covered(N, M, len(covered)):.3f}")

# --- nine triggers ----------------------------------------------------
# The 3x3 grid placement spreads nine triggers over the whole image.
grid9 = PlacementSpec("multiple_grid", count=9)
positions = trigger_positions(grid9, TRIG, (IMG, IMG), np.random.default_rng(0))
union = frozenset().union(*(patches_covered(IMG, PATCH, TRIG, p)
                            for p in positions))
p9 = survival_probability_exact(N, M, len(union))
print(f"\nnine 7x7 triggers at {sorted(positions)}")
print(f"touch {len(union)} of {N} patches; survival = {p9:.4f}")

# --- Monte Carlo cross-check ------------------------------------------
# Sample actual masks and count how often a trigger patch stays visible.
spec = CoverageSpec(N, M, (covered,))
est, err = survival_probability_mc(spec, trials=200_000, seed=1)
print(f"\nMonte Carlo for the single trigger: {est:.4f} +- {err:.4f} "
      f"(exact {p1:.4f})")

# --- the moral ---------------------------------------------------------
# One trigger is hidden from the encoder entirely in ~31% of the mask
# draws; nine triggers are never fully hidden. The k-vs-survival curve is
# what `mimbd masksim` tabulates for a whole sweep of trigger counts.
for k in (1, 2, 4, 8, 16, 32):
    print(f"  k={k:>2} covered patches -> survival "
          f"{survival_probability_exact(N, M, k):.4f}")
