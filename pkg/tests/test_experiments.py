import csv
import json

import numpy as np
import pytest
import torch

from blockprop.cli import main
from blockprop.errors import CheckpointError, ConfigError, InvalidInstanceError
from blockprop.experiments import (
    AblationSpec,
    ExperimentSpec,
    LoadedPolicy,
    mechanism_orders,
    render_trajectory,
    run_aob_sweep,
    run_reputation_sweep,
    run_training_ablation,
    sweep_instances,
    validate_aob,
)
from blockprop.network import evaluate_trajectory
from blockprop.policy import AttentionPolicy, PolicyConfig
from blockprop.trainer import TrainConfig

TINY = PolicyConfig(embed_dim=16, n_layers=1, n_heads=2, ff_hidden=32)


@pytest.fixture
def tiny_policy():
    torch.manual_seed(0)
    pol = AttentionPolicy(TINY)
    pol.eval()
    return pol


def _spec(tmp_path, **kw):
    base = dict(name="t", miner_counts=[9], bandwidths_hz=[180e3, 22e6], repetitions=4, output_dir=tmp_path)
    base.update(kw)
    return ExperimentSpec(**base)


def _read(path):
    return list(csv.DictReader(path.open()))


def test_spec_validation(tmp_path):
    with pytest.raises(ConfigError):
        _spec(tmp_path, mechanisms=["flood"])
    with pytest.raises(ConfigError):
        _spec(tmp_path, repetitions=0)
    with pytest.raises(InvalidInstanceError):
        _spec(tmp_path, miner_counts=[1])


def test_instances_reproducible(tmp_path):
    a = sweep_instances(_spec(tmp_path), 9)
    b = sweep_instances(_spec(tmp_path), 9)
    assert all(np.array_equal(x.coords, y.coords) for x, y in zip(a, b))
    assert len({x.seed for x in a}) == 4


def test_missing_checkpoint_explains(tmp_path):
    with pytest.raises(CheckpointError, match="blockprop train"):
        run_aob_sweep(_spec(tmp_path, mechanisms=["gat"]))


def test_aob_sweep_outputs(tmp_path, tiny_policy):
    spec = _spec(tmp_path)
    rows = run_aob_sweep(spec, {9: LoadedPolicy(tiny_policy, tiny_policy.fingerprint())})
    assert len(rows) == 6 * 2
    disk = _read(tmp_path / "t_aob.csv")
    assert len(disk) == 12
    assert {"seed", "sigma", "mu", "bandwidth_hz", "checkpoint"} <= set(disk[0])
    assert (tmp_path / "t_aob_180000hz.png").exists()
    assert (tmp_path / "t_aob_22000000hz.png").exists()
    gat = [r for r in disk if r["mechanism"] == "gat"]
    assert gat[0]["checkpoint"] == tiny_policy.fingerprint()


def test_sweep_deterministic(tmp_path):
    spec = _spec(tmp_path, mechanisms=["greedy", "gossip+rep"])
    run_aob_sweep(spec, {})
    first = (tmp_path / "t_aob.csv").read_bytes()
    run_aob_sweep(spec, {})
    assert (tmp_path / "t_aob.csv").read_bytes() == first


def test_reputation_sweep(tmp_path, tiny_policy):
    spec = _spec(tmp_path, repetitions=6)
    rows = run_reputation_sweep(spec, {9: LoadedPolicy(tiny_policy, "x")})
    by = {r["mechanism"]: r for r in rows}
    assert set(by) == {"gat", "gat+rep", "greedy", "greedy+rep", "gossip", "gossip+rep"}
    for mech in ("gat+rep", "greedy+rep", "gossip+rep"):
        assert by[mech]["violations"] == 0
        assert 0.0 <= by[mech]["p_masked_gt_unmasked"] <= 1.0
    assert (tmp_path / "t_reputation.png").exists()


def test_gat_orders_respect_mask(tmp_path, tiny_policy):
    spec = _spec(tmp_path, repetitions=10)
    insts = sweep_instances(spec, 9)
    for inst, order in zip(insts, mechanism_orders("gat+rep", insts, spec, tiny_policy)):
        assert (inst.reputation[order] > spec.sigma).all()


def test_render(tmp_path):
    spec = _spec(tmp_path, repetitions=1)
    inst = sweep_instances(spec, 9)[0]
    order = mechanism_orders("greedy+rep", [inst], spec)[0]
    traj = evaluate_trajectory(inst, spec.channel, order, spec.sigma)
    png, side = render_trajectory(inst, traj, tmp_path / "traj.png")
    assert png.stat().st_size > 0
    rows = _read(side)
    assert [int(r["miner"]) for r in rows] == order


def test_validate_aob_small(tmp_path):
    rows = validate_aob([0.3], mu=0.1, arrivals=20_000, seeds=[0, 1], output_dir=tmp_path)
    assert rows[0]["matches"] == "mm1_age"
    assert (tmp_path / "validate_aob.csv").exists()


def test_ablation_small(tmp_path):
    tc = TrainConfig(epochs=1, steps_per_epoch=1, batch_size=4, heldout_size=8, policy=TINY, miner_count=6)
    spec = AblationSpec(miner_count=6, baselines=["rollout", "exponential"], seeds=[1], train_config=tc,
                        output_dir=tmp_path, include_lr_zero=True)
    rows = run_training_ablation(spec)
    assert len(rows) == 3
    assert (tmp_path / "ablation_loss.png").exists()


# -- CLI -----------------------------------------------------------------------

def _cli(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_validate_aob(tmp_path, capsys):
    code, out, _ = _cli(["validate-aob", "--loads", "0.1", "--arrivals", "5000", "--seeds", "0,1",
                         "--output-dir", str(tmp_path)], capsys)
    assert code == 0
    assert json.loads(out)["rows"][0]["load"] == 0.1


def test_cli_missing_checkpoint_is_json_error(tmp_path, capsys):
    code, _, err = _cli(["sweep-aob", "--miners", "9", "--repetitions", "2", "--mechanisms", "gat",
                         "--output-dir", str(tmp_path)], capsys)
    assert code == 2
    payload = json.loads(err)
    assert payload["error"] == CheckpointError.code
    assert "blockprop train" in payload["message"]


def test_cli_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("experiment:\n  bogus: 1\n")
    code, _, err = _cli(["sweep-aob", "--config", str(cfg), "--output-dir", str(tmp_path)], capsys)
    assert code == 2
    assert json.loads(err)["error"] == ConfigError.code


def test_cli_train_then_sweep(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(
        "train:\n  heldout_size: 8\n  policy: {embed_dim: 16, n_layers: 1, n_heads: 2, ff_hidden: 32}\n"
        "channel:\n  bandwidth_hz: 180000\n"
    )
    ckpt = tmp_path / "p.pt"
    code, out, _ = _cli(["train", "--config", str(cfg), "--miners", "9", "--epochs", "1", "--steps", "2",
                         "--batch", "4", "--checkpoint", str(ckpt), "--output-dir", str(tmp_path)], capsys)
    assert code == 0, out
    assert ckpt.exists()
    assert len(_read(tmp_path / "train_log.csv")) == 2
    code, out, err = _cli(["sweep-reputation", "--config", str(cfg), "--miners", "9", "--repetitions", "3",
                           "--checkpoint", f"9={ckpt}", "--output-dir", str(tmp_path)], capsys)
    assert code == 0, err
    assert json.loads(out)["rows"] == 6
    code, out, err = _cli(["render-traj", "--miners", "9", "--mechanism", "gat+rep", "--checkpoint", str(ckpt),
                           "--output-dir", str(tmp_path)], capsys)
    assert code == 0, err
    assert json.loads(out)["trajectory"]["violation"] is False


def test_cli_save_epochs_and_resume(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  heldout_size: 8\n  policy: {embed_dim: 16, n_layers: 1, n_heads: 2, ff_hidden: 32}\n")
    args = ["train", "--config", str(cfg), "--miners", "6", "--epochs", "2", "--steps", "1", "--batch", "4",
            "--output-dir", str(tmp_path), "--save-epochs"]
    assert _cli(args, capsys)[0] == 0
    assert (tmp_path / "checkpoints" / "epoch-001.pt").exists()
    code, _, err = _cli(args + ["--resume", str(tmp_path / "checkpoints" / "epoch-000.pt")], capsys)
    assert code == 0, err
