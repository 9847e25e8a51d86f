"""Age-of-Block analytics.

A hop between two miners is modelled as an FCFS single-server queue:
getdata requests arrive with exponential gaps of rate ``mu`` and each block
transfer takes an exponential time with mean ``gamma``.

Two closed forms are provided. :func:`aob_closed_form` is the per-hop
objective used everywhere else in the package,
``gamma + 1/mu + mu*gamma**3 / (1 - mu*gamma)``. :func:`aob_mm1_age` is the
textbook M/M/1 average age, which carries an extra factor ``mu`` on the last
term. :func:`simulate_aob` runs the Lindley recursion directly and is the
independent check of both; it converges to :func:`aob_mm1_age`.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, StabilityError

STABILITY_MARGIN = 1e-9


@dataclass(frozen=True)
class AobParams:
    mu: float
    gamma: float

    def __post_init__(self) -> None:
        if not (self.mu > 0 and self.gamma > 0):
            raise DomainError(f"mu and gamma must be positive, got mu={self.mu}, gamma={self.gamma}")
        check_stability(self.mu, self.gamma)

    @property
    def load(self) -> float:
        return self.mu * self.gamma


def check_stability(mu: float, gamma: float) -> None:
    if mu * gamma >= 1.0 - STABILITY_MARGIN:
        raise StabilityError(
            f"queue unstable: mu*gamma = {mu * gamma:.6g} >= 1 (mu={mu}, gamma={gamma})"
        )


def aob_closed_form(p: AobParams) -> float:
    """Per-hop AoB objective ``gamma + 1/mu + mu*gamma^3/(1 - mu*gamma)``."""
    mu, g = p.mu, p.gamma
    return g + 1.0 / mu + mu * g**3 / (1.0 - mu * g)


def aob_mm1_age(p: AobParams) -> float:
    """Standard M/M/1 FCFS average age, ``gamma + 1/mu + mu^2 gamma^3/(1 - mu gamma)``."""
    mu, g = p.mu, p.gamma
    return g + 1.0 / mu + mu**2 * g**3 / (1.0 - mu * g)


def aob_closed_form_array(mu: float, gamma: np.ndarray) -> np.ndarray:
    """Vectorised :func:`aob_closed_form` over an array of gammas."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise DomainError("gamma must be positive")
    worst = float(np.max(gamma)) if gamma.size else 0.0
    if gamma.size:
        check_stability(mu, worst)
    return gamma + 1.0 / mu + mu * gamma**3 / (1.0 - mu * gamma)


def system_time_pdf(p: AobParams, t: float) -> float:
    """Density of the FCFS system time, ``(1/gamma - mu) exp((mu - 1/gamma) t)``."""
    if t < 0:
        raise DomainError(f"system time density undefined for t={t} < 0")
    rate = 1.0 / p.gamma - p.mu
    return rate * math.exp(-rate * t)


def fork_probability(mu: float, gamma_total: float) -> float:
    """Probability a competing block is mined within ``gamma_total`` seconds."""
    if mu <= 0 or gamma_total < 0:
        raise DomainError(f"need mu > 0 and gamma_total >= 0, got {mu}, {gamma_total}")
    return -math.expm1(-mu * gamma_total)


def fork_probability_mc(mu: float, gamma_total: float, draws: int, seed: int) -> float:
    """Monte-Carlo estimate of :func:`fork_probability` from exponential draws."""
    rng = np.random.default_rng(seed)
    x = _exp_inverse_cdf(rng, 1.0 / mu, draws)
    return float(np.mean(x <= gamma_total))


@dataclass
class AgeTrace:
    """Sawtooth age process; each delivery adds (time, age before) and (time, age after)."""

    event_times: list[float] = field(default_factory=list)
    ages_at_events: list[float] = field(default_factory=list)
    horizon: float = 0.0

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["event_time", "age"])
            for t, a in zip(self.event_times, self.ages_at_events):
                w.writerow([repr(float(t)), repr(float(a))])


@dataclass
class AobSimResult:
    mean_age: float
    trace: AgeTrace
    num_arrivals: int


def _exp_inverse_cdf(rng: np.random.Generator, mean: float, n: int) -> np.ndarray:
    # 1 - U lies in (0, 1], so the log is finite
    return -mean * np.log1p(-rng.random(n))


def simulate_aob(p: AobParams, num_arrivals: int, seed: int, trace_limit: int = 10_000) -> AobSimResult:
    """Discrete-event estimate of the mean age over ``num_arrivals`` requests.

    Waiting time follows the Lindley recursion ``W_i = (D_{i-1} - X_i)^+``,
    system time ``D_i = W_i + P_i``, trapezoid area ``Q_i = X_i D_i + X_i^2/2``,
    and the estimate is ``sum(Q) / sum(X)``. Only the first ``trace_limit``
    deliveries are kept in the returned trace.
    """
    if num_arrivals < 1:
        raise DomainError("num_arrivals must be >= 1")
    rng = np.random.default_rng(seed)
    x = _exp_inverse_cdf(rng, 1.0 / p.mu, num_arrivals)
    service = _exp_inverse_cdf(rng, p.gamma, num_arrivals)

    d = _system_times(x, service)
    q = x * d + 0.5 * x * x
    mean_age = float(q.sum() / x.sum())

    trace = AgeTrace()
    n_tr = min(trace_limit, num_arrivals)
    if n_tr:
        arrivals = np.cumsum(x[:n_tr])
        deliveries = arrivals + d[:n_tr]
        prev_gen = 0.0
        for k in range(n_tr):
            t = float(deliveries[k])
            trace.event_times += [t, t]
            trace.ages_at_events += [t - prev_gen, float(d[k])]
            prev_gen = float(arrivals[k])
        trace.horizon = float(deliveries[n_tr - 1])
    return AobSimResult(mean_age=mean_age, trace=trace, num_arrivals=num_arrivals)


def _system_times(x: np.ndarray, service: np.ndarray) -> np.ndarray:
    d = np.empty_like(x)
    prev = 0.0
    # plain loop over Python floats; the recursion is inherently sequential
    xs = x.tolist()
    ss = service.tolist()
    for i in range(len(xs)):
        w = prev - xs[i]
        if w < 0.0:
            w = 0.0
        prev = w + ss[i]
        d[i] = prev
    return d


def replicate_aob(p: AobParams, num_arrivals: int, seeds: list[int]) -> dict[str, float]:
    """Mean age across independent seeds with a Student-t 95% interval."""
    from scipy import stats

    means = np.array([simulate_aob(p, num_arrivals, s, trace_limit=0).mean_age for s in seeds])
    n = len(means)
    center = float(means.mean())
    if n > 1:
        half = float(stats.t.ppf(0.975, n - 1) * means.std(ddof=1) / math.sqrt(n))
    else:
        half = float("nan")
    return {
        "mean_age": center,
        "ci_half_width": half,
        "ci_rel": half / center,
        "closed_form": aob_closed_form(p),
        "mm1_age": aob_mm1_age(p),
        "rel_err_closed_form": abs(center - aob_closed_form(p)) / aob_closed_form(p),
        "rel_err_mm1_age": abs(center - aob_mm1_age(p)) / aob_mm1_age(p),
        "replications": n,
    }
