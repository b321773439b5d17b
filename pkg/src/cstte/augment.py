"""Positive-pair samplers for contrastive pretraining.

The default 2-hop split puts odd positions (1st, 3rd, ...) in the query and
even positions in the positive, so the two views interleave and cover the
whole trajectory. The alternative samplers (random / adjacent / overlap /
subsume) exist for ablation runs. Samplers return None when a trajectory is
too short, and the caller skips it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from math import comb
from typing import Callable, Optional

import numpy as np

from cstte.errors import ConfigError, DataError
from cstte.trajdata import Trajectory

Sampler = Callable[[Trajectory, np.random.Generator], Optional["SamplePair"]]

QUERY_SIDE = 0
POSITIVE_SIDE = 1


@dataclass
class SamplePair:
    """Two views of one source trajectory that should embed nearby."""

    traj_id: str
    query: Trajectory
    positive: Trajectory


@dataclass
class ContrastiveBatch:
    """Pairs plus, per pair, the (pair index, side) refs used as negatives."""

    pairs: list[SamplePair]
    negatives: list[list[tuple[int, int]]]


def two_hop_split(traj: Trajectory) -> SamplePair:
    """Deterministic odd/even interleave; needs at least 4 records."""
    if traj.n < 4:
        raise DataError(f"two_hop_split: trajectory {traj.traj_id!r} has {traj.n} < 4 records")
    return SamplePair(
        traj.traj_id,
        query=traj.take(np.arange(0, traj.n, 2)),
        positive=traj.take(np.arange(1, traj.n, 2)),
    )


def _two_hop_sampler(traj: Trajectory, rng: np.random.Generator) -> Optional[SamplePair]:
    del rng
    if traj.n < 4:
        return None
    return two_hop_split(traj)


def sample_random(
    traj: Trajectory,
    rng: np.random.Generator,
    keep_prob: float = 0.5,
    max_retries: int = 100,
) -> Optional[SamplePair]:
    """Two independent Bernoulli(keep_prob) subsets, each at least 2 records."""
    if not 0.0 < keep_prob < 1.0:
        raise ConfigError(f"keep_prob must be in (0, 1), got {keep_prob}")
    if traj.n < 2:
        return None
    for _ in range(max_retries):
        mask_q = rng.random(traj.n) < keep_prob
        mask_p = rng.random(traj.n) < keep_prob
        if mask_q.sum() >= 2 and mask_p.sum() >= 2:
            return SamplePair(
                traj.traj_id,
                query=traj.take(np.flatnonzero(mask_q)),
                positive=traj.take(np.flatnonzero(mask_p)),
            )
    return None


def sample_adjacent(traj: Trajectory, rng: np.random.Generator) -> Optional[SamplePair]:
    """Cut once; the prefix is the query, the suffix the positive."""
    if traj.n < 4:
        return None
    cut = int(rng.integers(2, traj.n - 1))  # both sides keep >= 2 records
    return SamplePair(
        traj.traj_id,
        query=traj.take(np.arange(0, cut)),
        positive=traj.take(np.arange(cut, traj.n)),
    )


def sample_overlap(traj: Trajectory, rng: np.random.Generator) -> Optional[SamplePair]:
    """Two overlapping windows: starts a1 < a2 <= b1 < b2 (1-indexed bounds).

    Uniform over all valid (a1, a2, b1, b2): quadruples with four distinct
    positions count C(N,4), those with a2 == b1 count C(N,3); draw the case
    with those weights, then sorted distinct positions.
    """
    n = traj.n
    if n < 3:
        return None
    n4 = comb(n, 4)
    n3 = comb(n, 3)
    if rng.random() < n4 / (n4 + n3):
        a1, a2, b1, b2 = np.sort(rng.choice(n, size=4, replace=False))
    else:
        a1, mid, b2 = np.sort(rng.choice(n, size=3, replace=False))
        a2 = b1 = mid
    return SamplePair(
        traj.traj_id,
        query=traj.take(np.arange(a1, b1 + 1)),
        positive=traj.take(np.arange(a2, b2 + 1)),
    )


def _draw_window(rng: np.random.Generator, n: int, min_len: int) -> tuple[int, int]:
    # Uniform over all (start, length) windows with length >= min_len inside n
    # positions: lengths L have n-L+1 placements; decode a flat uniform draw.
    counts = [n - length + 1 for length in range(min_len, n + 1)]
    total = sum(counts)
    r = int(rng.integers(total))
    for length, count in zip(range(min_len, n + 1), counts):
        if r < count:
            return r, length
        r -= count
    raise AssertionError("unreachable")


def sample_subsume(traj: Trajectory, rng: np.random.Generator) -> Optional[SamplePair]:
    """A long window (>= 4) as query, a strictly-contained short one as positive."""
    if traj.n < 4:
        return None
    long_start, long_len = _draw_window(rng, traj.n, 4)
    while True:
        short_off, short_len = _draw_window(rng, long_len, 2)
        if short_len < long_len:  # proper sub-window, not the long window itself
            break
    short_start = long_start + short_off
    return SamplePair(
        traj.traj_id,
        query=traj.take(np.arange(long_start, long_start + long_len)),
        positive=traj.take(np.arange(short_start, short_start + short_len)),
    )


_SAMPLERS: dict[str, Sampler] = {
    "two_hop": _two_hop_sampler,
    "random": sample_random,
    "adjacent": sample_adjacent,
    "overlap": sample_overlap,
    "subsume": sample_subsume,
}

SAMPLER_NAMES = tuple(_SAMPLERS)


def get_sampler(name: str, keep_prob: float = 0.5) -> Sampler:
    if name not in _SAMPLERS:
        raise ConfigError(f"unknown augmentation {name!r}; choose from {SAMPLER_NAMES}")
    if name == "random":
        return partial(sample_random, keep_prob=keep_prob)
    return _SAMPLERS[name]


def assign_negatives(
    n_pairs: int, n_neg: int, rng: np.random.Generator
) -> list[list[tuple[int, int]]]:
    """Per pair, draw n_neg (pair, side) refs uniformly from the other pairs.

    Each pair offers its query and its positive, so there are 2*(n_pairs-1)
    candidates; drawn without replacement.
    """
    if n_neg < 1:
        raise ConfigError(f"n_neg must be >= 1, got {n_neg}")
    available = 2 * (n_pairs - 1)
    if n_neg > available:
        raise ConfigError(
            f"n_neg={n_neg} exceeds the {available} negatives available "
            f"in a batch of {n_pairs} pairs"
        )
    out: list[list[tuple[int, int]]] = []
    for i in range(n_pairs):
        candidates = [(j, side) for j in range(n_pairs) if j != i for side in (0, 1)]
        chosen = rng.choice(len(candidates), size=n_neg, replace=False)
        out.append([candidates[int(c)] for c in chosen])
    return out
