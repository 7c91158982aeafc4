"""Exact and Monte-Carlo math for trigger survival under random masking.

A trigger occupying patches "survives" a masking draw when at least one of
its patches stays visible. Masking hides a uniform random M-subset of the N
patches, so with K = |union of covered patches| the survival probability has
the closed form 1 - C(M,K)/C(N,K), evaluated with arbitrary-precision
integers. Multiple trigger placements contribute one covered set each; only
the union matters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError

__all__ = [
    "CoverageSpec",
    "patches_covered",
    "survival_probability_exact",
    "expected_visible_covered",
    "survival_probability_mc",
]


@dataclass(frozen=True)
class CoverageSpec:
    """N patches, M masked, and one covered patch set per trigger placement."""

    n_patches: int
    n_masked: int
    covered: tuple[frozenset, ...]

    def __post_init__(self):
        if self.n_patches <= 0:
            raise ConfigError(f"n_patches must be positive, got {self.n_patches}")
        if not 0 <= self.n_masked <= self.n_patches:
            raise ConfigError(
                f"n_masked must lie in [0, {self.n_patches}], got {self.n_masked}")
        sets = tuple(frozenset(s) for s in self.covered)
        for s in sets:
            if any(not 0 <= i < self.n_patches for i in s):
                raise ConfigError("covered patch ids must lie in [0, n_patches)")
        object.__setattr__(self, "covered", sets)

    @property
    def union(self) -> frozenset:
        u = frozenset()
        for s in self.covered:
            u |= s
        return u

    @property
    def k(self) -> int:
        return len(self.union)


def patches_covered(image_size: int, patch_size: int, trigger_size: int,
                    top_left: tuple[int, int]) -> frozenset:
    """Row-major ids of the patches a trigger rectangle intersects.

    top_left is (x, y) in pixel coordinates; the trigger spans
    [x, x+trigger_size) x [y, y+trigger_size) and must lie inside the image.
    """
    if image_size % patch_size != 0:
        raise ConfigError("patch_size must divide image_size")
    x, y = top_left
    if x < 0 or y < 0 or x + trigger_size > image_size or y + trigger_size > image_size:
        raise ConfigError(f"trigger at {top_left} size {trigger_size} leaves the image")
    grid = image_size // patch_size
    c0, c1 = x // patch_size, (x + trigger_size - 1) // patch_size
    r0, r1 = y // patch_size, (y + trigger_size - 1) // patch_size
    return frozenset(r * grid + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))


def survival_probability_exact(n: int, m: int, k: int) -> float:
    """P(at least one of K covered patches visible), exact via big integers."""
    if not (0 <= k <= n and 0 <= m <= n):
        raise ConfigError(f"need 0 <= K,M <= N, got N={n} M={m} K={k}")
    if k == 0:
        return 0.0
    if k > m:
        return 1.0
    return float(1 - Fraction(math.comb(m, k), math.comb(n, k)))


def expected_visible_covered(n: int, m: int, k: int) -> float:
    """Expected number of covered patches left visible: K * (N - M) / N."""
    if not (0 <= k <= n and 0 <= m <= n):
        raise ConfigError(f"need 0 <= K,M <= N, got N={n} M={m} K={k}")
    return k * (n - m) / n


def survival_probability_mc(spec: CoverageSpec, trials: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate of survival; returns (estimate, stderr).

    Each trial masks a uniform random M-subset (first M entries of a random
    permutation) and checks whether any covered patch stays visible.
    """
    if trials < 100:
        raise ConfigError("trials must be >= 100")
    n, m = spec.n_patches, spec.n_masked
    union = spec.union
    if not union:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    covered = np.zeros(n, dtype=bool)
    covered[sorted(union)] = True
    hits = 0
    chunk = 20000
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        order = np.argsort(rng.random((b, n)), axis=1)
        visible = np.zeros((b, n), dtype=bool)
        np.put_along_axis(visible, order[:, m:], True, axis=1)
        hits += int((visible & covered).any(axis=1).sum())
        done += b
    p = hits / trials
    stderr = math.sqrt(p * (1.0 - p) / trials)
    return p, stderr
