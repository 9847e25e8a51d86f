"""Greedy (nearest-neighbour) and Gossip (uniform random neighbour) routing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ChannelParams
from .errors import ConfigError, InfeasibleError
from .network import DEFAULT_R_RATIO, MinerInstance, Trajectory, evaluate_trajectory, trajectory_length


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "greedy"
    use_reputation_mask: bool = False
    sigma: float = 0.5
    seed: int = 0
    r_ratio: float = DEFAULT_R_RATIO

    def __post_init__(self) -> None:
        if self.kind not in ("greedy", "gossip"):
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if not 0.0 < self.sigma < 1.0:
            raise ConfigError(f"sigma must lie in (0, 1), got {self.sigma}")


def _eligible(inst: MinerInstance, cfg: BaselineConfig) -> np.ndarray:
    if cfg.use_reputation_mask:
        return inst.eligible(cfg.sigma)
    return np.ones(inst.miner_count, dtype=bool)


def start_miner(inst: MinerInstance, cfg: BaselineConfig) -> int:
    """Highest-reputation eligible miner when masking, else miner 0."""
    if not cfg.use_reputation_mask:
        return 0
    eligible = _eligible(inst, cfg)
    rep = np.where(eligible, inst.reputation, -np.inf)
    return int(np.argmax(rep))


def _check_supply(inst: MinerInstance, cfg: BaselineConfig, m: int) -> None:
    n = int(_eligible(inst, cfg).sum())
    if n < m:
        raise InfeasibleError(f"{n} eligible miners but the trajectory needs {m} (shortfall {m - n})")


def greedy_order(inst: MinerInstance, cfg: BaselineConfig) -> list[int]:
    m = trajectory_length(inst.miner_count, cfg.r_ratio)
    _check_supply(inst, cfg, m)
    open_ = _eligible(inst, cfg).copy()
    cur = start_miner(inst, cfg)
    order = [cur]
    open_[cur] = False
    while len(order) < m:
        cand = open_ & inst.adjacency[cur]
        if not cand.any():
            raise InfeasibleError(f"no eligible unvisited neighbour of miner {cur} after {len(order)} hops")
        d = np.linalg.norm(inst.coords - inst.coords[cur], axis=1)
        d = np.where(cand, d, np.inf)
        cur = int(np.argmin(d))  # first minimum, i.e. lowest index on ties
        order.append(cur)
        open_[cur] = False
    return order


def gossip_order(inst: MinerInstance, cfg: BaselineConfig) -> list[int]:
    m = trajectory_length(inst.miner_count, cfg.r_ratio)
    _check_supply(inst, cfg, m)
    rng = np.random.default_rng(cfg.seed)
    open_ = _eligible(inst, cfg).copy()
    cur = start_miner(inst, cfg)
    order = [cur]
    open_[cur] = False
    while len(order) < m:
        cand = np.flatnonzero(open_ & inst.adjacency[cur])
        if not len(cand):
            raise InfeasibleError(f"no eligible unvisited neighbour of miner {cur} after {len(order)} hops")
        cur = int(rng.choice(cand))
        order.append(cur)
        open_[cur] = False
    return order


def greedy_trajectory(inst: MinerInstance, cfg: BaselineConfig, channel: ChannelParams | None = None) -> Trajectory:
    return evaluate_trajectory(inst, channel or ChannelParams(), greedy_order(inst, cfg), cfg.sigma)


def gossip_trajectory(inst: MinerInstance, cfg: BaselineConfig, channel: ChannelParams | None = None) -> Trajectory:
    return evaluate_trajectory(inst, channel or ChannelParams(), gossip_order(inst, cfg), cfg.sigma)


def baseline_order(inst: MinerInstance, cfg: BaselineConfig) -> list[int]:
    return greedy_order(inst, cfg) if cfg.kind == "greedy" else gossip_order(inst, cfg)
