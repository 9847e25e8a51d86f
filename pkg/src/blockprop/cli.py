"""Command-line entry point: ``blockprop <subcommand> [options]``.

Failures exit nonzero and print a JSON object ``{"error": ..., "message": ...}``
on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import channel_from_config, load_config
from .errors import BlockPropError, ConfigError
from .reputation import ReputationParams

log = logging.getLogger("blockprop")


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def _strs(s: str) -> list[str]:
    return [x for x in s.split(",") if x]


def _checkpoints(values: Sequence[str] | None) -> dict[int, Path]:
    """``PATH`` applies to every M; ``M=PATH`` to one miner count."""
    out: dict[int, Path] = {}
    for v in values or []:
        if "=" in v:
            m, p = v.split("=", 1)
            out[int(m)] = Path(p)
        else:
            out[0] = Path(v)
    return out


def _train_config(cfg: dict, args: argparse.Namespace):
    from .trainer import TrainConfig

    section = dict(cfg.get("train", {}) or {})
    if "reputation" in cfg:
        section.setdefault("reputation", cfg["reputation"])
    scale = getattr(args, "scale", "desk")
    base = TrainConfig.desk_scale() if scale == "desk" else TrainConfig()
    merged = {**{f.name: getattr(base, f.name) for f in dataclasses.fields(base)}, **section}
    tc = TrainConfig.from_dict(merged)
    overrides: dict[str, Any] = {}
    for attr, key in [("seed", "seed"), ("miners", "miner_count"), ("epochs", "epochs"),
                      ("steps", "steps_per_epoch"), ("batch", "batch_size"), ("baseline", "baseline"),
                      ("sigma", "sigma"), ("heldout", "heldout_size")]:
        v = getattr(args, attr, None)
        if v is not None and not isinstance(v, list):
            overrides[key] = v
    tc = dataclasses.replace(tc, **overrides)
    if getattr(args, "lr_scheme", None):
        tc = tc.with_scheme(args.lr_scheme)
    return tc


def _experiment_spec(cfg: dict, args: argparse.Namespace, name: str):
    from .experiments import ExperimentSpec

    section = dict(cfg.get("experiment", {}) or {})
    kwargs: dict[str, Any] = {k: v for k, v in section.items()
                              if k in {f.name for f in dataclasses.fields(ExperimentSpec)}}
    unknown = set(section) - set(kwargs)
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    for attr, key in [("miners", "miner_counts"), ("bandwidths", "bandwidths_hz"), ("mechanisms", "mechanisms"),
                      ("repetitions", "repetitions"), ("seed", "seed"), ("sigma", "sigma")]:
        v = getattr(args, attr, None)
        if v is not None:
            kwargs[key] = v
    kwargs["name"] = name
    kwargs["output_dir"] = Path(args.output_dir)
    kwargs["channel"] = channel_from_config(cfg)
    kwargs["reputation"] = ReputationParams(**(cfg.get("reputation") or {}))
    kwargs["checkpoints"] = _checkpoints(getattr(args, "checkpoint", None))
    kwargs["train_on_demand"] = getattr(args, "train_on_demand", False)
    kwargs["train_config"] = _train_config(cfg, args) if kwargs["train_on_demand"] else None
    return ExperimentSpec(**kwargs)


# -- subcommands ----------------------------------------------------------------

def cmd_train(args: argparse.Namespace, cfg: dict) -> dict:
    from .policy import save_checkpoint
    from .trainer import train, write_log_csv

    tc = _train_config(cfg, args)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = train(tc, checkpoint_dir=out / "checkpoints" if args.save_epochs else None, resume_from=args.resume)
    ckpt = Path(args.checkpoint or out / "policy.pt")
    save_checkpoint(ckpt, res.policy, tc.fingerprint(), train_config=tc.to_dict())
    fp = {**tc.fingerprint(), "checkpoint": res.policy.fingerprint()}
    write_log_csv(res.log, out / "train_log.csv", fp)
    epochs = [dataclasses.asdict(s) for s in res.epochs]
    (out / "epochs.json").write_text(json.dumps(epochs, indent=2))
    return {"checkpoint": str(ckpt), "epochs": epochs}


def cmd_sweep_aob(args: argparse.Namespace, cfg: dict) -> dict:
    from .experiments import run_aob_sweep

    rows = run_aob_sweep(_experiment_spec(cfg, args, args.name or "aob"))
    return {"rows": len(rows), "output_dir": args.output_dir}


def cmd_sweep_reputation(args: argparse.Namespace, cfg: dict) -> dict:
    from .experiments import run_reputation_sweep

    rows = run_reputation_sweep(_experiment_spec(cfg, args, args.name or "reputation"))
    return {"rows": len(rows), "output_dir": args.output_dir}


def cmd_render(args: argparse.Namespace, cfg: dict) -> dict:
    from .experiments import mechanism_orders, render_trajectory, resolve_policies, sweep_instances
    from .network import evaluate_trajectory

    args.miners = [args.miners]
    args.mechanisms = [args.mechanism]
    args.repetitions = 1
    spec = _experiment_spec(cfg, args, "render")
    M = spec.miner_counts[0]
    inst = sweep_instances(spec, M)[0]
    policies = resolve_policies(spec)
    order = mechanism_orders(args.mechanism, [inst], spec, policies[M].policy if M in policies else None)[0]
    traj = evaluate_trajectory(inst, spec.channel, order, spec.sigma)
    png, csv_path = render_trajectory(inst, traj, Path(args.output_dir) / f"trajectory_M{M}_{args.mechanism}.png",
                                      spec.sigma)
    return {"image": str(png), "csv": str(csv_path), "trajectory": traj.to_dict()}


def cmd_ablate(args: argparse.Namespace, cfg: dict) -> dict:
    from .experiments import AblationSpec, run_training_ablation

    tc = _train_config(cfg, args)
    spec = AblationSpec(
        name=args.name or "ablation", miner_count=tc.miner_count, lr_schemes=args.schemes,
        baselines=args.baselines, seeds=args.seeds, train_config=tc, output_dir=Path(args.output_dir),
        include_lr_zero=args.lr_zero,
    )
    rows = run_training_ablation(spec)
    return {"rows": len(rows), "output_dir": args.output_dir}


def cmd_validate_aob(args: argparse.Namespace, cfg: dict) -> dict:
    from .experiments import validate_aob

    rows = validate_aob(args.loads, args.mu, args.arrivals, args.seeds, Path(args.output_dir))
    return {"rows": rows}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockprop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir", default="results")
        p.add_argument("--name")

    def training(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scale", choices=["desk", "full"], default="desk")
        p.add_argument("--epochs", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--heldout", type=int)
        p.add_argument("--baseline", choices=["rollout", "exponential", "critic"])
        p.add_argument("--lr-scheme", choices=["1e-3", "1e-4", "1e-3-decay", "1e-4-decay"])

    p = sub.add_parser("train", help="train the attention policy")
    common(p)
    training(p)
    p.add_argument("--miners", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--checkpoint", help="where to write the final checkpoint")
    p.add_argument("--resume", help="resume from a per-epoch checkpoint")
    p.add_argument("--save-epochs", action="store_true", help="checkpoint every epoch")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in [("sweep-aob", cmd_sweep_aob, "AoB vs miners and bandwidth"),
                                 ("sweep-reputation", cmd_sweep_reputation, "total trajectory reputation")]:
        p = sub.add_parser(name, help=helptext)
        common(p)
        training(p)
        p.add_argument("--miners", type=_ints)
        p.add_argument("--bandwidths", type=_floats)
        p.add_argument("--mechanisms", type=_strs)
        p.add_argument("--repetitions", type=int)
        p.add_argument("--sigma", type=float)
        p.add_argument("--checkpoint", action="append", help="PATH or M=PATH; repeatable")
        p.add_argument("--train-on-demand", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("render-traj", help="draw one trajectory")
    common(p)
    training(p)
    p.add_argument("--miners", type=int, default=19)
    p.add_argument("--mechanism", default="gat+rep")
    p.add_argument("--sigma", type=float)
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--train-on-demand", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", help="learning-rate and baseline ablations")
    common(p)
    training(p)
    p.add_argument("--miners", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--schemes", type=_strs, default=["1e-3"])
    p.add_argument("--baselines", type=_strs, default=["rollout", "exponential", "critic"])
    p.add_argument("--seeds", type=_ints, default=[1234, 1000])
    p.add_argument("--lr-zero", action="store_true", help="add an lr=0 control run")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("validate-aob", help="closed-form AoB vs discrete-event simulation")
    common(p)
    p.add_argument("--loads", type=_floats, default=[0.1, 0.3, 0.5, 0.8])
    p.add_argument("--mu", type=float, default=0.1)
    p.add_argument("--arrivals", type=int, default=1_000_000)
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p.set_defaults(func=cmd_validate_aob)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        result = args.func(args, cfg)
    except BlockPropError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as machine-readable JSON
        log.debug("unhandled error", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=str, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
