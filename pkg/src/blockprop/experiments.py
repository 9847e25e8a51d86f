"""Desk-scale experiment drivers: AoB and reputation sweeps, renders, ablations.

Every CSV row carries the run fingerprint (seed, sigma, mu, bandwidth,
checkpoint hash) so results can be traced back to their configuration.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from .aob import AobParams, replicate_aob
from .baselines import BaselineConfig, baseline_order
from .config import ChannelParams
from .errors import CheckpointError, ConfigError, InvalidInstanceError
from .network import MinerInstance, Trajectory, evaluate_trajectory, generate_instance, trajectory_length
from .policy import AttentionPolicy, instances_to_tensors, load_checkpoint
from .reputation import LogProfile, ReputationParams
from .trainer import TrainConfig, paired_ttest_one_sided, train

log = logging.getLogger(__name__)

MECHANISMS = ("gat", "gat+rep", "greedy", "greedy+rep", "gossip", "gossip+rep")
MIN_MINERS = 2


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    miner_counts: list[int] = field(default_factory=lambda: [9, 19, 29, 39, 49])
    bandwidths_hz: list[float] = field(default_factory=lambda: [180e3, 22e6, 100e6])
    mechanisms: list[str] = field(default_factory=lambda: list(MECHANISMS))
    repetitions: int = 100
    seed: int = 1234
    output_dir: Path = Path("results")
    sigma: float = 0.5
    honest_fraction: float = 0.8
    channel: ChannelParams = field(default_factory=ChannelParams)
    reputation: ReputationParams = field(default_factory=ReputationParams)
    checkpoints: dict[int, Path] = field(default_factory=dict)
    train_on_demand: bool = False
    train_config: TrainConfig | None = None

    def __post_init__(self) -> None:
        if not self.miner_counts or not self.bandwidths_hz or not self.mechanisms:
            raise ConfigError("miner_counts, bandwidths_hz and mechanisms must be nonempty")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        bad = set(self.mechanisms) - set(MECHANISMS)
        if bad:
            raise ConfigError(f"unknown mechanisms {sorted(bad)}; choose from {list(MECHANISMS)}")
        small = [M for M in self.miner_counts if M < MIN_MINERS]
        if small:
            raise InvalidInstanceError(f"miner counts {small} are below the minimum of {MIN_MINERS}")
        self.output_dir = Path(self.output_dir)

    @property
    def needs_policy(self) -> bool:
        return any(m.startswith("gat") for m in self.mechanisms)


def _instance_seed(spec_seed: int, M: int, rep: int) -> int:
    return int(np.random.SeedSequence([spec_seed, M, rep]).generate_state(1)[0])


def sweep_instances(spec: ExperimentSpec, M: int) -> list[MinerInstance]:
    profile = LogProfile(honest_fraction=spec.honest_fraction)
    return [
        generate_instance(M, s, profile, spec.reputation)
        for s in (_instance_seed(spec.seed, M, r) for r in range(spec.repetitions))
    ]


# -- policies -----------------------------------------------------------------

@dataclass
class LoadedPolicy:
    policy: AttentionPolicy
    digest: str


def resolve_policies(spec: ExperimentSpec) -> dict[int, LoadedPolicy]:
    """One policy per miner count, from checkpoints or trained on demand."""
    out: dict[int, LoadedPolicy] = {}
    if not spec.needs_policy:
        return out
    for M in spec.miner_counts:
        path = spec.checkpoints.get(M) or spec.checkpoints.get(0)
        if path is not None:
            policy, _ = load_checkpoint(path)
        elif spec.train_on_demand:
            cfg = dataclasses.replace(spec.train_config or TrainConfig.desk_scale(),
                                      miner_count=M, sigma=spec.sigma, seed=spec.seed)
            log.info("training policy for M=%d", M)
            policy = train(cfg).policy
            policy.eval()
        else:
            raise CheckpointError(
                f"no checkpoint for M={M}; run `blockprop train --miners {M} --checkpoint ckpt.pt` "
                f"and pass --checkpoint ckpt.pt, or use --train-on-demand"
            )
        out[M] = LoadedPolicy(policy, policy.fingerprint())
    return out


@torch.no_grad()
def policy_orders(policy: AttentionPolicy, instances: list[MinerInstance], sigma: float | None) -> list[list[int]]:
    policy.eval()
    coords, adj, blocked = instances_to_tensors(instances, sigma,
                                                with_reputation=policy.cfg.reputation_feature)
    m = trajectory_length(instances[0].miner_count)
    r = policy.rollout(coords, adj, blocked, m, "greedy")
    return r.actions.tolist()


def mechanism_orders(mechanism: str, instances: list[MinerInstance], spec: ExperimentSpec,
                     policy: AttentionPolicy | None = None) -> list[list[int]]:
    masked = mechanism.endswith("+rep")
    kind = mechanism.split("+")[0]
    if kind == "gat":
        if policy is None:
            raise CheckpointError("the gat mechanisms need a trained policy")
        return policy_orders(policy, instances, spec.sigma if masked else None)
    return [
        baseline_order(inst, BaselineConfig(kind, masked, spec.sigma, seed=inst.seed))
        for inst in instances
    ]


def _fingerprint(spec: ExperimentSpec, bandwidth: float | None, digest: str) -> dict:
    return {
        "seed": spec.seed,
        "sigma": spec.sigma,
        "mu": spec.channel.getdata_rate_mu,
        "bandwidth_hz": "" if bandwidth is None else bandwidth,
        "checkpoint": digest,
    }


def write_rows(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _plot(path: Path, series: Mapping[str, tuple[list, list]], xlabel: str, ylabel: str, title: str,
          logy: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if logy:
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# -- sweeps -------------------------------------------------------------------

@dataclass
class SweepCell:
    miner_count: int
    mechanism: str
    trajectories: dict[float, list[Trajectory]]


def evaluate_cells(spec: ExperimentSpec, policies: dict[int, LoadedPolicy] | None = None) -> list[SweepCell]:
    policies = resolve_policies(spec) if policies is None else policies
    cells = []
    for M in spec.miner_counts:
        insts = sweep_instances(spec, M)
        loaded = policies.get(M)
        for mech in spec.mechanisms:
            orders = mechanism_orders(mech, insts, spec, loaded.policy if loaded else None)
            by_bw = {
                bw: [evaluate_trajectory(i, spec.channel.with_bandwidth(bw), o, spec.sigma)
                     for i, o in zip(insts, orders)]
                for bw in spec.bandwidths_hz
            }
            cells.append(SweepCell(M, mech, by_bw))
    return cells


def run_aob_sweep(spec: ExperimentSpec, policies: dict[int, LoadedPolicy] | None = None,
                  cells: list[SweepCell] | None = None) -> list[dict]:
    policies = resolve_policies(spec) if policies is None else policies
    cells = evaluate_cells(spec, policies) if cells is None else cells
    rows = []
    for cell in cells:
        digest = policies[cell.miner_count].digest if cell.mechanism.startswith("gat") else ""
        for bw, trajs in cell.trajectories.items():
            aob = np.array([t.total_aob_s for t in trajs])
            rows.append({
                "miner_count": cell.miner_count, "mechanism": cell.mechanism,
                "mean_aob_s": float(aob.mean()), "std_aob_s": float(aob.std()),
                "mean_route_length": float(np.mean([t.route_length for t in trajs])),
                "instances": len(trajs), **_fingerprint(spec, bw, digest),
            })
    out = spec.output_dir
    write_rows(rows, out / f"{spec.name}_aob.csv")
    for bw in spec.bandwidths_hz:
        series = {
            mech: ([r["miner_count"] for r in rows if r["mechanism"] == mech and r["bandwidth_hz"] == bw],
                   [r["mean_aob_s"] for r in rows if r["mechanism"] == mech and r["bandwidth_hz"] == bw])
            for mech in spec.mechanisms
        }
        _plot(out / f"{spec.name}_aob_{int(bw)}hz.png", series, "miners M", "overall AoB (s)",
              f"AoB at b = {bw:g} Hz")
    return rows


def run_reputation_sweep(spec: ExperimentSpec, policies: dict[int, LoadedPolicy] | None = None,
                         cells: list[SweepCell] | None = None) -> list[dict]:
    policies = resolve_policies(spec) if policies is None else policies
    cells = evaluate_cells(dataclasses.replace(spec, bandwidths_hz=spec.bandwidths_hz[:1]), policies) \
        if cells is None else cells
    by_key = {(c.miner_count, c.mechanism): next(iter(c.trajectories.values())) for c in cells}
    rows = []
    for (M, mech), trajs in by_key.items():
        reps = np.array([t.total_reputation for t in trajs])
        row = {
            "miner_count": M, "mechanism": mech, "mean_total_reputation": float(reps.mean()),
            "std_total_reputation": float(reps.std()),
            "violations": int(sum(t.violation for t in trajs)), "instances": len(trajs),
            "p_masked_gt_unmasked": "",
        }
        if mech.endswith("+rep") and (M, mech[:-4]) in by_key:
            other = np.array([t.total_reputation for t in by_key[(M, mech[:-4])]])
            # H1: masked total exceeds unmasked, i.e. mean(unmasked - masked) < 0
            row["p_masked_gt_unmasked"] = paired_ttest_one_sided(other, reps) if len(reps) > 1 else ""
        digest = policies[M].digest if mech.startswith("gat") and M in policies else ""
        row.update(_fingerprint(spec, None, digest))
        rows.append(row)
    write_rows(rows, spec.output_dir / f"{spec.name}_reputation.csv")
    series = {
        mech: ([r["miner_count"] for r in rows if r["mechanism"] == mech],
               [r["mean_total_reputation"] for r in rows if r["mechanism"] == mech])
        for mech in spec.mechanisms
    }
    _plot(spec.output_dir / f"{spec.name}_reputation.png", series, "miners M", "total reputation",
          "Total trajectory reputation")
    return rows


def render_trajectory(inst: MinerInstance, traj: Trajectory, out_path: str | Path, sigma: float = 0.5) -> tuple[Path, Path]:
    """Draw miners (low-reputation in yellow, others green) and the route as arrows.

    Writes ``out_path`` (PNG) and a sidecar CSV with coordinates and per-hop metrics.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    low = ~inst.eligible(sigma)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(*inst.coords[~low].T, c="tab:green", s=40, label="reputation > sigma", zorder=3)
    ax.scatter(*inst.coords[low].T, c="gold", s=40, edgecolors="k", label="low reputation", zorder=3)
    pts = inst.coords[traj.order]
    for a, b in zip(pts[:-1], pts[1:]):
        ax.annotate("", xy=b, xytext=a, arrowprops=dict(arrowstyle="->", color="tab:blue", lw=1.5))
    ax.scatter(*pts[0], marker="*", c="tab:blue", s=160, zorder=4, label="start")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_aspect("equal")
    ax.set_title(f"M={inst.miner_count}  AoB={traj.total_aob_s:.2f}s  R={traj.total_reputation:.2f}")
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)

    csv_path = out_path.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "miner", "x", "y", "reputation", "hop_distance", "hop_gamma_s", "hop_aob_s"])
        for pos, idx in enumerate(traj.order):
            hop = [""] * 3 if pos == 0 else [traj.hop_distances[pos - 1], traj.hop_gamma_s[pos - 1],
                                             traj.hop_aob_s[pos - 1]]
            w.writerow([pos, idx, *inst.coords[idx].tolist(), float(inst.reputation[idx]), *hop])
    return out_path, csv_path


# -- training ablation -----------------------------------------------------------

@dataclass
class AblationSpec:
    name: str = "ablation"
    miner_count: int = 19
    lr_schemes: list[str] = field(default_factory=lambda: ["1e-3"])
    baselines: list[str] = field(default_factory=lambda: ["rollout", "exponential", "critic"])
    seeds: list[int] = field(default_factory=lambda: [1234, 1000])
    train_config: TrainConfig = field(default_factory=TrainConfig.desk_scale)
    output_dir: Path = Path("results")
    include_lr_zero: bool = False


def run_training_ablation(spec: AblationSpec) -> list[dict]:
    """Per-epoch validation cost for every (lr scheme, baseline, seed) combination."""
    rows = []
    runs: list[tuple[str, TrainConfig]] = []
    for scheme in spec.lr_schemes:
        for bl in spec.baselines:
            for seed in spec.seeds:
                cfg = dataclasses.replace(spec.train_config.with_scheme(scheme), baseline=bl, seed=seed,
                                          miner_count=spec.miner_count)
                runs.append((scheme, cfg))
    if spec.include_lr_zero:
        for seed in spec.seeds:
            runs.append(("0", dataclasses.replace(spec.train_config, lr=0.0, lr_decay=1.0, seed=seed,
                                                  miner_count=spec.miner_count)))
    for scheme, cfg in runs:
        res = train(cfg)
        digest = res.policy.fingerprint()
        for s in res.epochs:
            rows.append({
                "lr_scheme": scheme, "baseline": cfg.baseline, "seed": cfg.seed, "epoch": s.epoch,
                "val_cost": s.val_cost, "p_value": s.p_value, "baseline_refreshed": s.baseline_refreshed,
                "miner_count": cfg.miner_count, "sigma": cfg.sigma, "checkpoint": digest,
            })
    out = Path(spec.output_dir)
    write_rows(rows, out / f"{spec.name}_loss.csv")
    series: dict[str, tuple[list, list]] = {}
    for r in rows:
        key = f"lr={r['lr_scheme']} {r['baseline']} seed={r['seed']}"
        xs, ys = series.setdefault(key, ([], []))
        xs.append(r["epoch"])
        ys.append(r["val_cost"])
    _plot(out / f"{spec.name}_loss.png", series, "epoch", "validation route length", "Training curves")
    return rows


# -- AoB validation ----------------------------------------------------------------

def validate_aob(loads: Iterable[float] = (0.1, 0.3, 0.5, 0.8), mu: float = 0.1, arrivals: int = 1_000_000,
                 seeds: Iterable[int] = (0, 1, 2, 3, 4), output_dir: Path | None = None) -> list[dict]:
    """Compare the discrete-event mean age with both closed forms on a load grid."""
    rows = []
    seeds = list(seeds)
    for rho in loads:
        p = AobParams(mu, rho / mu)
        r = replicate_aob(p, arrivals, seeds)
        r["matches"] = "mm1_age" if r["rel_err_mm1_age"] < r["rel_err_closed_form"] else "closed_form"
        rows.append({"load": rho, "mu": mu, "gamma": p.gamma, "arrivals": arrivals, **r})
    if output_dir is not None:
        write_rows(rows, Path(output_dir) / "validate_aob.csv")
    return rows
