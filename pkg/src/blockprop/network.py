"""Miner-network instances, link timing and trajectory evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .aob import aob_closed_form_array, check_stability
from .config import ChannelParams
from .errors import DomainError, InvalidInstanceError, InvalidTrajectoryError
from .reputation import LogProfile, ReputationParams, reputation_matrix, simulate_interaction_logs

DEFAULT_R_RATIO = 0.75

ReputationSource = Union[None, float, Sequence[float], np.ndarray, LogProfile]


@dataclass
class MinerInstance:
    coords: np.ndarray                 # (M, 2) in the unit square
    reputation: np.ndarray             # (M,) in [0, 1]
    adjacency: np.ndarray              # (M, M) bool, symmetric, irreflexive
    seed: int = 0
    pairwise_reputation: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=float)
        self.reputation = np.asarray(self.reputation, dtype=float)
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        M = self.coords.shape[0]
        if self.coords.shape != (M, 2) or M < 1:
            raise InvalidInstanceError(f"coords must have shape (M, 2), got {self.coords.shape}")
        if np.any(self.coords < 0) or np.any(self.coords > 1):
            raise InvalidInstanceError("coords must lie in the unit square")
        if self.reputation.shape != (M,):
            raise InvalidInstanceError(f"need {M} reputations, got shape {self.reputation.shape}")
        if np.any(self.reputation < 0) or np.any(self.reputation > 1):
            raise InvalidInstanceError("reputations must lie in [0, 1]")
        if self.adjacency.shape != (M, M):
            raise InvalidInstanceError("adjacency must be M x M")
        if np.any(np.diag(self.adjacency)) or np.any(self.adjacency != self.adjacency.T):
            raise InvalidInstanceError("adjacency must be symmetric with an empty diagonal")

    @property
    def miner_count(self) -> int:
        return self.coords.shape[0]

    def eligible(self, sigma: float) -> np.ndarray:
        return self.reputation > sigma

    def translated(self, shift: Sequence[float]) -> "MinerInstance":
        """Copy with coordinates shifted; the caller keeps them in the unit square."""
        return MinerInstance(self.coords + np.asarray(shift), self.reputation.copy(),
                             self.adjacency.copy(), self.seed, self.pairwise_reputation)

    def to_dict(self) -> dict:
        d = {
            "M": self.miner_count,
            "seed": self.seed,
            "coords": self.coords.tolist(),
            "reputations": self.reputation.tolist(),
        }
        if not np.array_equal(self.adjacency, fully_connected(self.miner_count)):
            d["adjacency"] = self.adjacency.astype(int).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MinerInstance":
        M = int(d["M"])
        adj = np.asarray(d["adjacency"], dtype=bool) if "adjacency" in d else fully_connected(M)
        inst = cls(np.asarray(d["coords"], dtype=float).reshape(-1, 2), d["reputations"], adj, int(d.get("seed", 0)))
        if inst.miner_count != M:
            raise InvalidInstanceError(f"record says M={M} but holds {inst.miner_count} coordinates")
        return inst

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "MinerInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fully_connected(M: int) -> np.ndarray:
    return ~np.eye(M, dtype=bool)


def knn_adjacency(coords: np.ndarray, k: int) -> np.ndarray:
    """Symmetrised k-nearest-neighbour adjacency."""
    M = len(coords)
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    adj = np.zeros((M, M), dtype=bool)
    nearest = np.argsort(d, axis=1, kind="stable")[:, : min(k, M - 1)]
    adj[np.repeat(np.arange(M), nearest.shape[1]), nearest.ravel()] = True
    return adj | adj.T


def generate_instance(
    M: int,
    seed: int,
    reputation_source: ReputationSource = None,
    rep_params: ReputationParams | None = None,
    k_nearest: int | None = None,
    rng: np.random.Generator | None = None,
) -> MinerInstance:
    """Sample a miner network.

    ``reputation_source`` is either a reputation vector, a scalar applied to
    every miner, or a :class:`LogProfile` (``None`` means the default
    profile) whose simulated interaction log is run through the reputation
    engine.
    """
    if M < 2:
        raise InvalidInstanceError(f"need at least 2 miners, got M={M}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    coords = rng.random((M, 2))
    adjacency = fully_connected(M) if k_nearest is None else knn_adjacency(coords, k_nearest)
    pairwise = None
    if reputation_source is None or isinstance(reputation_source, LogProfile):
        p = rep_params or ReputationParams()
        log = simulate_interaction_logs(M, reputation_source, windows=p.windows, rng=rng)
        result = reputation_matrix(log, p)
        reputation = np.clip(result.per_miner, 0.0, 1.0)
        pairwise = result.pairwise
    elif np.isscalar(reputation_source):
        reputation = np.full(M, float(reputation_source))
    else:
        reputation = np.asarray(reputation_source, dtype=float)
    return MinerInstance(coords, reputation, adjacency, seed, pairwise)


def trajectory_length(M: int, r_ratio: float = DEFAULT_R_RATIO) -> int:
    return int(math.floor(M * r_ratio + 1e-12))


def distance(inst: MinerInstance, i: int, j: int) -> float:
    """Euclidean distance between miners ``i != j`` in unit-square units."""
    M = inst.miner_count
    if not (0 <= i < M and 0 <= j < M):
        raise DomainError(f"indices ({i}, {j}) out of range for M={M}")
    if i == j:
        raise DomainError("distance is defined for distinct miners only")
    return float(np.linalg.norm(inst.coords[i] - inst.coords[j]))


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    return np.linalg.norm(coords[..., :, None, :] - coords[..., None, :, :], axis=-1)


def propagation_time(params: ChannelParams, d: float | np.ndarray) -> float | np.ndarray:
    """Shannon-rate block transfer time over distance ``d`` (unit-square units).

    ``d`` is scaled by ``params.meters_per_unit`` before the path-loss term.
    """
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr <= 0):
        raise DomainError("propagation time needs a positive distance")
    meters = d_arr * params.meters_per_unit
    snr = params.tx_power_watts * params.unit_gain * meters ** (-params.path_loss_exp) / (
        params.noise_density_w_per_hz * params.bandwidth_hz
    )
    gamma = params.block_size_bits / (params.bandwidth_hz * np.log2(1.0 + snr))
    return float(gamma) if np.ndim(gamma) == 0 else gamma


@dataclass
class Trajectory:
    order: list[int]
    hop_distances: list[float]
    hop_gamma_s: list[float]
    hop_aob_s: list[float]
    total_aob_s: float
    total_reputation: float
    route_length: float
    violation: bool = False
    edge_reputation: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "order": list(map(int, self.order)),
            "hop_distances": self.hop_distances,
            "hop_gamma_s": self.hop_gamma_s,
            "hop_aob_s": self.hop_aob_s,
            "total_aob_s": self.total_aob_s,
            "total_reputation": self.total_reputation,
            "route_length": self.route_length,
            "violation": self.violation,
        }


def validate_order(inst: MinerInstance, order: Sequence[int]) -> list[int]:
    order = [int(i) for i in order]
    M = inst.miner_count
    if not order:
        raise InvalidTrajectoryError("empty order")
    if any(not 0 <= i < M for i in order):
        raise InvalidTrajectoryError(f"order {order} has indices outside 0..{M - 1}")
    if len(set(order)) != len(order):
        raise InvalidTrajectoryError(f"order {order} repeats a miner")
    for a, b in zip(order, order[1:]):
        if not inst.adjacency[a, b]:
            raise InvalidTrajectoryError(f"miners {a} and {b} are not adjacent")
    return order


def evaluate_trajectory(inst: MinerInstance, params: ChannelParams, order: Sequence[int],
                        sigma: float) -> Trajectory:
    """Fill per-hop distance, transfer time and AoB for a propagation order.

    ``violation`` is set when any miner after the first has reputation at or
    below ``sigma``.
    """
    order = validate_order(inst, order)
    idx = np.asarray(order)
    if len(order) > 1:
        hops = np.linalg.norm(inst.coords[idx[1:]] - inst.coords[idx[:-1]], axis=1)
        gammas = np.atleast_1d(propagation_time(params, hops))
        mu = params.getdata_rate_mu
        for g in gammas:
            check_stability(mu, float(g))
        aobs = aob_closed_form_array(mu, gammas)
    else:
        hops = gammas = aobs = np.zeros(0)
    edge_rep: list[float] = []
    if inst.pairwise_reputation is not None and len(order) > 1:
        edge_rep = [float(inst.pairwise_reputation[a, b]) for a, b in zip(order, order[1:])]
    return Trajectory(
        order=order,
        hop_distances=hops.tolist(),
        hop_gamma_s=gammas.tolist(),
        hop_aob_s=aobs.tolist(),
        total_aob_s=float(aobs.sum()),
        total_reputation=float(inst.reputation[idx].sum()),
        route_length=float(hops.sum()),
        violation=bool(np.any(inst.reputation[idx[1:]] <= sigma)),
        edge_reputation=edge_rep,
    )
