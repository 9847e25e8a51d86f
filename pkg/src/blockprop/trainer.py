"""REINFORCE training with a greedy-rollout baseline.

Each step samples a batch of fresh instances, decodes them with the current
policy (sampling) and prices them against a baseline; the default baseline is
the greedy decoding of a frozen policy copy. At the end of every epoch the
frozen copy is replaced by the current policy when a one-sided paired t-test
on a fixed held-out set says the current policy is better.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import stats
from torch import nn

from .errors import CheckpointError, ConfigError, DomainError, TrainingDivergedError
from .network import generate_instance, trajectory_length
from .policy import (
    AttentionPolicy,
    GraphEncoder,
    PolicyConfig,
    fan_in_init,
    instances_to_tensors,
    load_checkpoint,
    route_lengths,
    save_checkpoint,
)
from .reputation import LogProfile, ReputationParams

log = logging.getLogger(__name__)

LR_SCHEMES = {
    "1e-3": (1e-3, 1.0),
    "1e-4": (1e-4, 1.0),
    "1e-3-decay": (1e-3, 0.96),
    "1e-4-decay": (1e-4, 0.96),
}


@dataclass
class TrainConfig:
    epochs: int = 100
    steps_per_epoch: int = 2500
    batch_size: int = 512
    miner_count: int = 19
    lr: float = 1e-3
    lr_decay: float = 1.0
    ttest_alpha: float = 0.05
    sigma: float = 0.5
    seed: int = 1234
    baseline: str = "rollout"
    exp_beta: float = 0.8
    heldout_size: int = 10_000
    heldout_seed: int = 999_983
    r_ratio: float = 0.75
    honest_fraction: float = 0.8
    max_grad_norm: float | None = 1.0
    mask_first: bool = True
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    reputation: ReputationParams = field(default_factory=ReputationParams)

    def __post_init__(self) -> None:
        if self.baseline not in ("rollout", "exponential", "critic"):
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        if min(self.epochs, self.steps_per_epoch, self.batch_size) < 1:
            raise ConfigError("epochs, steps_per_epoch and batch_size must be >= 1")
        if self.miner_count < 2:
            raise ConfigError("miner_count must be >= 2")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=10, steps_per_epoch=100, batch_size=128, heldout_size=256)
        base.update(overrides)
        return cls(**base)

    def with_scheme(self, scheme: str) -> "TrainConfig":
        if scheme not in LR_SCHEMES:
            raise ConfigError(f"unknown lr scheme {scheme!r}; choose from {sorted(LR_SCHEMES)}")
        lr, decay = LR_SCHEMES[scheme]
        return dataclasses.replace(self, lr=lr, lr_decay=decay)

    @property
    def trajectory_steps(self) -> int:
        return trajectory_length(self.miner_count, self.r_ratio)

    def fingerprint(self) -> dict:
        return {
            "embed_dim": self.policy.embed_dim,
            "n_layers": self.policy.n_layers,
            "n_heads": self.policy.n_heads,
            "sigma": self.sigma,
            "r_ratio": self.r_ratio,
            "seed": self.seed,
            "miner_count": self.miner_count,
        }

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("policy"), dict):
            d["policy"] = PolicyConfig(**d["policy"])
        if isinstance(d.get("reputation"), dict):
            d["reputation"] = ReputationParams(**d["reputation"])
        if "lr_schedule" in d:
            lr, decay = LR_SCHEMES[str(d.pop("lr_schedule"))]
            d.setdefault("lr", lr)
            d.setdefault("lr_decay", decay)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    mean_cost: float
    baseline_cost: float
    loss: float
    grad_norm: float
    lr: float
    baseline_refreshed: bool = False


@dataclass
class EpochSummary:
    epoch: int
    val_cost: float
    baseline_val_cost: float
    p_value: float
    baseline_refreshed: bool


@dataclass
class TrainResult:
    policy: AttentionPolicy
    log: list[TrainLogRecord]
    epochs: list[EpochSummary]
    baseline: "Baseline"


# -- statistics --------------------------------------------------------------

def paired_ttest_one_sided(costs_candidate, costs_baseline) -> float:
    """p-value for H1: mean(candidate - baseline) < 0.

    All-zero differences give 0.5; zero spread with a nonzero mean gives 0
    or 1 by the sign of the mean.
    """
    a = np.asarray(costs_candidate, dtype=float)
    b = np.asarray(costs_baseline, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise DomainError("need two equal-length cost vectors with at least 2 entries")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.5
        return 0.0 if mean < 0 else 1.0
    t = mean / (sd / math.sqrt(len(d)))
    return float(stats.t.cdf(t, df=len(d) - 1))


# -- instance batches ---------------------------------------------------------

@dataclass
class InstanceBatch:
    coords: torch.Tensor
    adjacency: torch.Tensor
    blocked: torch.Tensor


def sample_batch(size: int, cfg: TrainConfig, rng: np.random.Generator) -> InstanceBatch:
    profile = LogProfile(honest_fraction=cfg.honest_fraction)
    insts = [
        generate_instance(cfg.miner_count, 0, profile, cfg.reputation, rng=rng) for _ in range(size)
    ]
    return InstanceBatch(*instances_to_tensors(insts, cfg.sigma, with_reputation=cfg.policy.reputation_feature))


def heldout_batch(cfg: TrainConfig) -> InstanceBatch:
    return sample_batch(cfg.heldout_size, cfg, np.random.default_rng(cfg.heldout_seed))


@torch.no_grad()
def greedy_costs(policy: AttentionPolicy, batch: InstanceBatch, steps: int, mask_first: bool = True,
                 chunk: int = 1024) -> torch.Tensor:
    was_training = policy.training
    policy.eval()
    out = []
    for s in range(0, batch.coords.size(0), chunk):
        sl = slice(s, s + chunk)
        r = policy.rollout(batch.coords[sl], batch.adjacency[sl], batch.blocked[sl], steps, "greedy",
                           mask_first=mask_first)
        out.append(route_lengths(batch.coords[sl], r.actions))
    policy.train(was_training)
    return torch.cat(out)


# -- baselines -----------------------------------------------------------------

class Baseline:
    kind = "none"

    def predict(self, batch: InstanceBatch, costs: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def extra_loss(self, batch: InstanceBatch, costs: torch.Tensor) -> torch.Tensor | None:
        return None

    def parameters(self) -> list[nn.Parameter]:
        return []

    def epoch_end(self, policy: AttentionPolicy, epoch: int) -> tuple[bool, float]:
        return False, float("nan")

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class RolloutBaseline(Baseline):
    """Greedy decoding cost of a frozen policy copy, refreshed by t-test."""

    kind = "rollout"

    def __init__(self, policy: AttentionPolicy, heldout: InstanceBatch, steps: int, alpha: float = 0.05,
                 mask_first: bool = True):
        self.heldout = heldout
        self.steps = steps
        self.alpha = alpha
        self.mask_first = mask_first
        self._set(policy)

    def _set(self, policy: AttentionPolicy) -> None:
        self.policy = copy.deepcopy(policy)
        self.policy.eval()
        for p in self.policy.parameters():
            p.requires_grad_(False)
        self.heldout_costs = greedy_costs(self.policy, self.heldout, self.steps, self.mask_first)

    def predict(self, batch: InstanceBatch, costs: torch.Tensor) -> torch.Tensor:
        return greedy_costs(self.policy, batch, self.steps, self.mask_first)

    def epoch_end(self, policy: AttentionPolicy, epoch: int) -> tuple[bool, float]:
        candidate = greedy_costs(policy, self.heldout, self.steps, self.mask_first)
        p = paired_ttest_one_sided(candidate.numpy(), self.heldout_costs.numpy())
        refreshed = p < self.alpha
        if refreshed:
            self._set(policy)
        return refreshed, p

    def state_dict(self) -> dict:
        return {"policy": self.policy.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.policy.load_state_dict(state["policy"])
        self.heldout_costs = greedy_costs(self.policy, self.heldout, self.steps, self.mask_first)


class ExponentialBaseline(Baseline):
    """Running mean of batch costs: ``v <- beta * v + (1 - beta) * mean(cost)``."""

    kind = "exponential"

    def __init__(self, beta: float = 0.8):
        self.beta = beta
        self.value: float | None = None

    def update(self, mean_cost: float) -> float:
        self.value = mean_cost if self.value is None else self.beta * self.value + (1 - self.beta) * mean_cost
        return self.value

    def predict(self, batch: InstanceBatch, costs: torch.Tensor) -> torch.Tensor:
        return torch.full_like(costs, self.update(float(costs.mean())))

    def state_dict(self) -> dict:
        return {"value": self.value}

    def load_state_dict(self, state: dict) -> None:
        self.value = state["value"]


class CriticNetwork(nn.Module):
    """Graph encoder followed by a one-hidden-layer MLP on the graph embedding."""

    def __init__(self, cfg: PolicyConfig, hidden: int | None = None):
        super().__init__()
        self.encoder = GraphEncoder(cfg)
        hidden = hidden or cfg.embed_dim
        self.head = nn.Sequential(nn.Linear(cfg.embed_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        fan_in_init(self, cfg.embed_dim)

    def forward(self, coords: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        _, graph = self.encoder(coords, adjacency)
        return self.head(graph).squeeze(-1)


class CriticBaseline(Baseline):
    kind = "critic"

    def __init__(self, critic: CriticNetwork | None):
        self.critic = critic

    def _require(self) -> CriticNetwork:
        if self.critic is None:
            raise ConfigError("critic baseline used before its network was initialised")
        return self.critic

    def predict(self, batch: InstanceBatch, costs: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self._require()(batch.coords, batch.adjacency)

    def extra_loss(self, batch: InstanceBatch, costs: torch.Tensor) -> torch.Tensor:
        pred = self._require()(batch.coords, batch.adjacency)
        return nn.functional.mse_loss(pred, costs.detach())

    def parameters(self) -> list[nn.Parameter]:
        return list(self._require().parameters())

    def state_dict(self) -> dict:
        return {"critic": self._require().state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self._require().load_state_dict(state["critic"])


def make_baseline(cfg: TrainConfig, policy: AttentionPolicy, heldout: InstanceBatch,
                  baseline_policy: AttentionPolicy | None = None) -> Baseline:
    if cfg.baseline == "rollout":
        return RolloutBaseline(baseline_policy or policy, heldout, cfg.trajectory_steps, cfg.ttest_alpha,
                               cfg.mask_first)
    if cfg.baseline == "exponential":
        return ExponentialBaseline(cfg.exp_beta)
    return CriticBaseline(CriticNetwork(cfg.policy))


# -- training loop -----------------------------------------------------------

def reinforce_loss(costs: torch.Tensor, baseline: torch.Tensor, log_prob: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``(L - b) * log p``; its gradient is the REINFORCE estimator."""
    return ((costs - baseline).detach() * log_prob).mean()


def _rng_state(np_rng: np.random.Generator, gen: torch.Generator) -> dict:
    return {"numpy": np_rng.bit_generator.state, "torch": gen.get_state()}


def train(
    cfg: TrainConfig,
    policy: AttentionPolicy | None = None,
    baseline_policy: AttentionPolicy | None = None,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    callback: Callable[[TrainLogRecord], None] | None = None,
) -> TrainResult:
    """Run the training loop.

    ``policy`` and ``baseline_policy`` may be injected (e.g. for synthetic
    baseline-refresh checks); by default a fresh policy is initialised from
    ``cfg.seed`` and the baseline starts as a copy of it.
    """
    torch_gen = torch.Generator().manual_seed(cfg.seed)
    np_rng = np.random.default_rng(cfg.seed)
    if policy is None:
        policy = AttentionPolicy(cfg.policy)
        policy.reset_parameters(torch.Generator().manual_seed(cfg.seed))
    heldout = heldout_batch(cfg)
    baseline = make_baseline(cfg, policy, heldout, baseline_policy)
    params = list(policy.parameters())
    groups = [{"params": params}]
    if baseline.parameters():
        groups.append({"params": baseline.parameters()})
    optimizer = torch.optim.Adam(groups, lr=cfg.lr)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda e: cfg.lr_decay**e)
    start_epoch = 0
    records: list[TrainLogRecord] = []
    summaries: list[EpochSummary] = []

    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu", weights_only=False)
        if "optimizer" not in payload:
            raise CheckpointError(f"{resume_from} is not a resumable training checkpoint")
        policy.load_state_dict(payload["state_dict"])
        baseline.load_state_dict(payload["baseline"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        np_rng.bit_generator.state = payload["rng"]["numpy"]
        torch_gen.set_state(payload["rng"]["torch"])
        start_epoch = payload["epoch"] + 1

    steps = cfg.trajectory_steps
    for epoch in range(start_epoch, cfg.epochs):
        policy.train()
        for step in range(cfg.steps_per_epoch):
            batch = sample_batch(cfg.batch_size, cfg, np_rng)
            out = policy.rollout(batch.coords, batch.adjacency, batch.blocked, steps, "sample",
                                 generator=torch_gen, mask_first=cfg.mask_first)
            costs = route_lengths(batch.coords, out.actions)
            bl = baseline.predict(batch, costs)
            loss = reinforce_loss(costs, bl, out.log_prob)
            total = loss
            extra = baseline.extra_loss(batch, costs)
            if extra is not None:
                total = total + extra
            rec = TrainLogRecord(epoch, step, costs.mean().item(), bl.mean().item(), loss.item(), float("nan"),
                                 optimizer.param_groups[0]["lr"])
            if not torch.isfinite(total):
                log.error("non-finite loss: %s", rec)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}: {rec}")
            optimizer.zero_grad()
            total.backward()
            max_norm = cfg.max_grad_norm if cfg.max_grad_norm is not None else math.inf
            rec.grad_norm = float(torch.nn.utils.clip_grad_norm_(params, max_norm))
            optimizer.step()
            records.append(rec)
            if callback:
                callback(rec)

        refreshed, p = baseline.epoch_end(policy, epoch)
        val = greedy_costs(policy, heldout, steps, cfg.mask_first)
        bval = baseline.heldout_costs if isinstance(baseline, RolloutBaseline) else val
        if refreshed and records:
            records[-1].baseline_refreshed = True
        summaries.append(EpochSummary(epoch, float(val.mean()), float(bval.mean()), p, refreshed))
        log.info("epoch %d: val cost %.4f, p=%.4g, refreshed=%s", epoch, float(val.mean()), p, refreshed)
        scheduler.step()
        if checkpoint_dir is not None:
            save_training_checkpoint(Path(checkpoint_dir) / f"epoch-{epoch:03d}.pt", cfg, policy, baseline,
                                     optimizer, scheduler, np_rng, torch_gen, epoch)

    return TrainResult(policy, records, summaries, baseline)


def save_training_checkpoint(path: Path, cfg: TrainConfig, policy, baseline, optimizer, scheduler,
                             np_rng, torch_gen, epoch: int) -> None:
    save_checkpoint(
        path, policy, cfg.fingerprint(),
        train_config=cfg.to_dict(), optimizer=optimizer.state_dict(), scheduler=scheduler.state_dict(),
        baseline=baseline.state_dict(), rng=_rng_state(np_rng, torch_gen), epoch=epoch,
    )


def write_log_csv(records: list[TrainLogRecord], path: str | Path, fingerprint: dict | None = None) -> None:
    fingerprint = fingerprint or {}
    cols = [f.name for f in dataclasses.fields(TrainLogRecord)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + sorted(fingerprint))
        for r in records:
            row = dataclasses.asdict(r)
            w.writerow([row[c] for c in cols] + [fingerprint[k] for k in sorted(fingerprint)])


__all__ = [
    "TrainConfig", "TrainLogRecord", "EpochSummary", "TrainResult", "train", "paired_ttest_one_sided",
    "RolloutBaseline", "ExponentialBaseline", "CriticBaseline", "CriticNetwork", "reinforce_loss",
    "greedy_costs", "sample_batch", "heldout_batch", "InstanceBatch", "load_checkpoint", "write_log_csv",
]
