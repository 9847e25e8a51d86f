"""Subjective-logic miner reputation.

Scalar functions (``local_window_opinion`` ... ``final_reputation``) follow the
opinion algebra one pair at a time. :func:`reputation_matrix` is the
vectorised path used by instance generation; it evaluates every ordered pair
``i -> j`` of an interaction log at once and is tested against the scalar
functions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateWeightsError,
    DomainError,
    FusionSingularityError,
    NoInteractionError,
    NoRecommendationError,
)

SUM_TOL = 1e-9


@dataclass(frozen=True)
class OpinionTuple:
    trust: float
    distrust: float
    uncertainty: float

    def __post_init__(self) -> None:
        for name in ("trust", "distrust", "uncertainty"):
            v = getattr(self, name)
            if not (-SUM_TOL <= v <= 1.0 + SUM_TOL):
                raise DomainError(f"{name}={v} outside [0, 1]")
        total = self.trust + self.distrust + self.uncertainty
        if abs(total - 1.0) > SUM_TOL:
            raise DomainError(f"opinion components sum to {total}, expected 1")

    @classmethod
    def vacuous(cls) -> "OpinionTuple":
        return cls(0.0, 0.0, 1.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.trust, self.distrust, self.uncertainty])


@dataclass(frozen=True)
class InteractionWindow:
    window_index: int
    positives: int
    negatives: int
    success_prob: float

    def __post_init__(self) -> None:
        if self.positives < 0 or self.negatives < 0:
            raise DomainError("interaction counts must be nonnegative")
        if not 0.0 <= self.success_prob <= 1.0:
            raise DomainError(f"success_prob={self.success_prob} outside [0, 1]")


@dataclass(frozen=True)
class ReputationParams:
    eta: float = 0.5
    xi: float = 2.0
    lambda_fresh: float = 0.5
    gamma_rec: float = 1.5
    delta_rec: float = 1.0
    sigma: float = 0.5
    windows: int = 10

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if not self.xi > 1.0:
            raise ConfigError(f"xi must exceed 1, got {self.xi}")
        if not 0.0 < self.lambda_fresh < 1.0:
            raise ConfigError(f"lambda_fresh must lie in (0, 1), got {self.lambda_fresh}")
        if not self.gamma_rec > 1.0:
            raise ConfigError(f"gamma_rec must exceed 1, got {self.gamma_rec}")
        if not self.delta_rec > 0.0:
            raise ConfigError(f"delta_rec must be positive, got {self.delta_rec}")
        if not 0.0 < self.sigma < 1.0:
            raise ConfigError(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.windows < 1:
            raise ConfigError("windows must be >= 1")


def freshness_weight(window_index: int, lambda_fresh: float) -> float:
    """``lambda * ln(t_k)`` with window time ``t_k = k + 1`` for 1-based ``k``."""
    return lambda_fresh * math.log(window_index + 1)


def local_window_opinion(w: InteractionWindow, xi: float) -> OpinionTuple:
    a, b = w.positives, w.negatives
    if a + b == 0:
        raise NoInteractionError(f"window {w.window_index} has no interactions")
    u = 1.0 - w.success_prob
    denom = a + xi * b
    t = (1.0 - u) * a / denom
    f = (1.0 - u) * xi * b / denom
    return OpinionTuple(t, f, 1.0 - t - f)


def _window_opinion_or_vacuous(w: InteractionWindow, xi: float) -> OpinionTuple:
    try:
        return local_window_opinion(w, xi)
    except NoInteractionError:
        return OpinionTuple.vacuous()


def weighted_average(opinions: Sequence[OpinionTuple], weights: Sequence[float]) -> OpinionTuple:
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("weights sum to zero")
    arr = np.array([o.as_array() for o in opinions])
    t, f, u = (w @ arr) / total
    # renormalise against rounding drift
    s = t + f + u
    return OpinionTuple(t / s, f / s, u / s)


def local_opinion(windows: Sequence[InteractionWindow], p: ReputationParams) -> OpinionTuple:
    """Freshness-weighted average of per-window opinions.

    Windows with no interactions contribute the vacuous opinion.
    """
    if not windows:
        raise DomainError("need at least one window")
    ops = [_window_opinion_or_vacuous(w, p.xi) for w in windows]
    weights = [freshness_weight(w.window_index, p.lambda_fresh) for w in windows]
    if len(ops) == 1:
        return ops[0]
    return weighted_average(ops, weights)


def local_reputation(o: OpinionTuple, eta: float) -> float:
    return o.trust + eta * o.uncertainty


final_reputation = local_reputation


@dataclass(frozen=True)
class Recommender:
    """A third party's local opinion of the target plus its interaction counts."""

    opinion: OpinionTuple
    positives: float
    negatives: float
    mean_interaction: float
    delta: float = 1.0


def interaction_frequency(positives: float, negatives: float, mean_interaction: float, gamma_rec: float) -> float:
    if mean_interaction <= 0:
        return 0.0
    return (gamma_rec * positives + negatives) / mean_interaction


def recommended_opinion(recommenders: Sequence[Recommender], p: ReputationParams) -> OpinionTuple:
    weights = [
        r.delta * interaction_frequency(r.positives, r.negatives, r.mean_interaction, p.gamma_rec)
        for r in recommenders
    ]
    if not recommenders or sum(weights) <= 0:
        raise NoRecommendationError("no recommender carries positive weight")
    return weighted_average([r.opinion for r in recommenders], weights)


def fuse_final_opinion(local: OpinionTuple, rec: OpinionTuple) -> OpinionTuple:
    # a vacuous side contributes nothing; return the other unchanged, bit for bit
    if local.uncertainty == 1.0:
        return rec
    if rec.uncertainty == 1.0:
        return local
    ul, ur = local.uncertainty, rec.uncertainty
    den = ul + ur - ul * ur
    if den <= 0:
        raise FusionSingularityError("both opinions are dogmatic (zero uncertainty)")
    t = (local.trust * ur + rec.trust * ul) / den
    f = (local.distrust * ur + rec.distrust * ul) / den
    u = ul * ur / den
    s = t + f + u
    return OpinionTuple(t / s, f / s, u / s)


def fuse_or_average(local: OpinionTuple, rec: OpinionTuple) -> OpinionTuple:
    """Fusion with the documented fallback: average two dogmatic opinions."""
    try:
        return fuse_final_opinion(local, rec)
    except FusionSingularityError:
        return weighted_average([local, rec], [1.0, 1.0])


# ---------------------------------------------------------------------------
# interaction logs


@dataclass
class InteractionLog:
    """Windowed interaction counts for every ordered pair ``i -> j``.

    Arrays have shape ``(M, M, K)``; entry ``[i, j, k]`` is what evaluator
    ``i`` observed of miner ``j`` in window ``k + 1``. Diagonals are zero.
    """

    positives: np.ndarray
    negatives: np.ndarray
    success_prob: np.ndarray
    honest: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def miner_count(self) -> int:
        return self.positives.shape[0]

    @property
    def windows(self) -> int:
        return self.positives.shape[2]

    def pair_windows(self, i: int, j: int) -> list[InteractionWindow]:
        return [
            InteractionWindow(k + 1, int(self.positives[i, j, k]), int(self.negatives[i, j, k]),
                              float(self.success_prob[i, j, k]))
            for k in range(self.windows)
        ]

    def to_csv(self, path: str | Path) -> None:
        M, _, K = self.positives.shape
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "k", "alpha", "beta", "q"])
            for i in range(M):
                for j in range(M):
                    if i == j:
                        continue
                    for k in range(K):
                        w.writerow([i, j, k + 1, int(self.positives[i, j, k]),
                                    int(self.negatives[i, j, k]), repr(float(self.success_prob[i, j, k]))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "InteractionLog":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DomainError(f"empty interaction log: {path}")
        M = max(max(int(r["i"]), int(r["j"])) for r in rows) + 1
        K = max(int(r["k"]) for r in rows)
        a = np.zeros((M, M, K), dtype=np.int64)
        b = np.zeros((M, M, K), dtype=np.int64)
        q = np.zeros((M, M, K))
        for r in rows:
            i, j, k = int(r["i"]), int(r["j"]), int(r["k"]) - 1
            a[i, j, k], b[i, j, k], q[i, j, k] = int(r["alpha"]), int(r["beta"]), float(r["q"])
        return cls(a, b, q, np.zeros(M, dtype=bool))


@dataclass(frozen=True)
class LogProfile:
    """Generator settings for synthetic interaction logs.

    Honest targets see many positive and few negative interactions over good
    links; dishonest targets the reverse. ``activity`` is the chance that a
    pair interacts at all in a given window.
    """

    honest_fraction: float = 0.8
    activity: float = 0.8
    honest_rates: tuple[float, float] = (6.0, 0.5)
    dishonest_rates: tuple[float, float] = (1.0, 5.0)
    honest_q: tuple[float, float] = (0.85, 0.99)
    dishonest_q: tuple[float, float] = (0.4, 0.7)

    def __post_init__(self) -> None:
        if not 0.0 <= self.honest_fraction <= 1.0:
            raise ConfigError(f"honest_fraction must lie in [0, 1], got {self.honest_fraction}")


def dishonest_count(miner_count: int, honest_fraction: float) -> int:
    return int(round(miner_count * (1.0 - honest_fraction)))


def simulate_interaction_logs(
    miner_count: int,
    profile: LogProfile | None = None,
    seed: int = 0,
    windows: int = 10,
    rng: np.random.Generator | None = None,
) -> InteractionLog:
    """Draw a synthetic log; exactly ``round(M * (1 - honest_fraction))`` miners are dishonest."""
    if miner_count < 2:
        raise DomainError("need at least 2 miners")
    profile = profile or LogProfile()
    rng = rng if rng is not None else np.random.default_rng(seed)
    M, K = miner_count, windows
    honest = np.ones(M, dtype=bool)
    bad = rng.choice(M, size=dishonest_count(M, profile.honest_fraction), replace=False)
    honest[bad] = False

    h = honest[None, :, None]
    lam_a = np.where(h, profile.honest_rates[0], profile.dishonest_rates[0])
    lam_b = np.where(h, profile.honest_rates[1], profile.dishonest_rates[1])
    shape = (M, M, K)
    active = rng.random(shape) < profile.activity
    a = rng.poisson(np.broadcast_to(lam_a, shape)) * active
    b = rng.poisson(np.broadcast_to(lam_b, shape)) * active
    lo = np.where(h, profile.honest_q[0], profile.dishonest_q[0])
    hi = np.where(h, profile.honest_q[1], profile.dishonest_q[1])
    q = lo + (hi - lo) * rng.random(shape)
    eye = np.eye(M, dtype=bool)[:, :, None]
    a = np.where(eye, 0, a)
    b = np.where(eye, 0, b)
    q = np.where(eye, 0.0, q)
    return InteractionLog(a.astype(np.int64), b.astype(np.int64), q, honest)


# ---------------------------------------------------------------------------
# vectorised engine


@dataclass
class ReputationResult:
    local: np.ndarray          # (M, M, 3)
    recommended: np.ndarray    # (M, M, 3); vacuous where no recommender
    has_recommendation: np.ndarray  # (M, M) bool
    final: np.ndarray          # (M, M, 3)
    pairwise: np.ndarray       # (M, M) final reputation R_{i->j}; diagonal nan
    per_miner: np.ndarray      # (M,) mean over evaluators i != j


def window_opinions(a: np.ndarray, b: np.ndarray, q: np.ndarray, xi: float) -> np.ndarray:
    """Per-window opinions stacked on a trailing axis of size 3; vacuous where a+b=0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = a + xi * b
    has = denom > 0
    safe = np.where(has, denom, 1.0)
    certain = np.asarray(q, dtype=float)
    t = np.where(has, certain * a / safe, 0.0)
    f = np.where(has, certain * xi * b / safe, 0.0)
    u = np.where(has, 1.0 - t - f, 1.0)
    return np.stack([t, f, u], axis=-1)


def reputation_matrix(log: InteractionLog, p: ReputationParams | None = None,
                      delta: np.ndarray | float | None = None) -> ReputationResult:
    """Local, recommended and fused opinions for every ordered pair.

    The recommenders for ``i -> j`` are all ``s`` other than ``i`` and ``j``
    that interacted with ``j`` at least once. ``delta`` is broadcast to
    ``(M, M)`` and indexed ``[s, j]``; it defaults to ``p.delta_rec``.
    """
    return reputation_arrays(log.positives, log.negatives, log.success_prob, p, delta)


def reputation_arrays(positives: np.ndarray, negatives: np.ndarray, success_prob: np.ndarray,
                      p: ReputationParams | None = None,
                      delta: np.ndarray | float | None = None) -> ReputationResult:
    """:func:`reputation_matrix` on raw ``(..., M, M, K)`` arrays; leading axes are a batch of logs."""
    p = p or ReputationParams()
    M, K = positives.shape[-2], positives.shape[-1]
    off = ~np.eye(M, dtype=bool)
    per_window = window_opinions(positives, negatives, success_prob, p.xi)
    fresh = np.array([freshness_weight(k + 1, p.lambda_fresh) for k in range(K)])
    if K == 1:
        local = per_window[..., 0, :]
    else:
        local = np.einsum("...ijkc,k->...ijc", per_window, fresh) / fresh.sum()
    local = local / local.sum(axis=-1, keepdims=True)

    a_tot = positives.sum(axis=-1).astype(float)
    b_tot = negatives.sum(axis=-1).astype(float)
    H = (p.gamma_rec * a_tot + b_tot) * off
    H_bar = H.sum(axis=-1, keepdims=True) / M
    IF = np.divide(H, H_bar, out=np.zeros_like(H), where=H_bar > 0)
    d = np.broadcast_to(np.asarray(p.delta_rec if delta is None else delta, dtype=float), (M, M))
    omega = d * IF  # [..., s, j]

    excl = np.ones((M, M, M), dtype=bool)  # [i, s, j]
    idx = np.arange(M)
    excl[idx, idx, :] = False
    excl[:, idx, idx] = False
    w = excl * omega[..., None, :, :]
    wsum = w.sum(axis=-2)  # [..., i, j]
    has_rec = wsum > 0
    num = np.einsum("...isj,...sjc->...ijc", w, local)
    rec = np.where(has_rec[..., None], num / np.where(has_rec, wsum, 1.0)[..., None], np.array([0.0, 0.0, 1.0]))
    rec = rec / rec.sum(axis=-1, keepdims=True)

    final = fuse_arrays(local, rec)
    final = np.where(has_rec[..., None], final, local)
    pairwise = np.where(off, final[..., 0] + p.eta * final[..., 2], np.nan)
    per_miner = np.nanmean(pairwise, axis=-2) if M > 1 else np.full(pairwise.shape[:-1], np.nan)
    return ReputationResult(local, rec, has_rec, final, pairwise, per_miner)


def fuse_arrays(local: np.ndarray, rec: np.ndarray) -> np.ndarray:
    """Vectorised fusion with the averaging fallback for two dogmatic opinions."""
    ul, ur = local[..., 2], rec[..., 2]
    den = ul + ur - ul * ur
    ok = den > 0
    safe = np.where(ok, den, 1.0)
    t = (local[..., 0] * ur + rec[..., 0] * ul) / safe
    f = (local[..., 1] * ur + rec[..., 1] * ul) / safe
    u = ul * ur / safe
    fused = np.stack([t, f, u], axis=-1)
    fused = np.where(ok[..., None], fused, 0.5 * (local + rec))
    fused = fused / fused.sum(axis=-1, keepdims=True)
    fused = np.where((ur == 1.0)[..., None], local, fused)
    return np.where((ul == 1.0)[..., None], rec, fused)


def miner_reputations(miner_count: int, profile: LogProfile | None = None, seed: int = 0,
                      p: ReputationParams | None = None,
                      rng: np.random.Generator | None = None) -> tuple[np.ndarray, InteractionLog]:
    """Per-miner scalar reputations from a freshly simulated log."""
    p = p or ReputationParams()
    log = simulate_interaction_logs(miner_count, profile, seed, windows=p.windows, rng=rng)
    return reputation_matrix(log, p).per_miner, log


def write_reputation_csv(result: ReputationResult, path: str | Path) -> None:
    M = result.pairwise.shape[0]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "trust", "distrust", "uncertainty", "reputation"])
        for i in range(M):
            for j in range(M):
                if i != j:
                    t, f, u = result.final[i, j]
                    w.writerow([i, j, repr(float(t)), repr(float(f)), repr(float(u)),
                                repr(float(result.pairwise[i, j]))])
