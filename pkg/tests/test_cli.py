"""End-to-end CLI: all subcommands, determinism, resume, and exit codes."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from rollcast.cli import main
from rollcast.config import read_csv

TINY = {
    "seed": 5,
    "data": {
        "num_vars": 2,
        "lat_points": 8,
        "lon_points": 16,
        "steps": 120,
        "train_frac": 0.7,
        "val_frac": 0.1,
        "regime": {"season_length_days": 10},
    },
    "model": {
        "embed_dim": 16,
        "num_blocks": 1,
        "num_heads": 2,
        "patch_size": 4,
        "moe_num_private": 2,
        "moe_top_k": 1,
        "moe_alpha": 0.01,
    },
    "pretrain": {"steps": 8, "batch_size": 4, "lr": 0.003},
    "dqn": {"sync_every": 5, "batch_size": 8, "season_length_days": 10},
    "finetune": {
        "epochs": 1,
        "episodes_per_epoch": 3,
        "iterations_per_epoch": 10,
        "finetune_episodes": 2,
        "t_max": 2,
        "lead_times": [24, 36],
    },
    "eval": {"leads": [6, 24], "episodes": 4, "policy": "greedy"},
    "compare": {"lead": 48, "episodes": 5},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(root / "data.grid")]) == 0
    assert (
        main(
            [
                "pretrain", "--config", str(cfg_path),
                "--data", str(root / "data.grid"),
                "--out-dir", str(root / "pre"),
            ]
        )
        == 0
    )
    return root, cfg_path


def test_gen_data_deterministic_and_seed_sensitive(tmp_path, workdir):
    root, cfg_path = workdir
    out_a = tmp_path / "a.grid"
    out_b = tmp_path / "b.grid"
    out_c = tmp_path / "c.grid"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out_a)]) == 0
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out_b)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    assert main(["gen-data", "--config", str(cfg_path), "--seed", "99", "--out", str(out_c)]) == 0
    assert out_a.read_bytes() != out_c.read_bytes()


def test_gen_data_steps_override_lands_in_header(tmp_path, workdir):
    _, cfg_path = workdir
    out = tmp_path / "steps.grid"
    assert main([
        "gen-data", "--config", str(cfg_path), "--set", "data.steps=50", "--out", str(out)
    ]) == 0
    blob = out.read_bytes()
    num_steps = struct.unpack_from("<I", blob, 12)[0]
    assert num_steps == 50


def test_print_config_applies_overrides(capsys, workdir):
    _, cfg_path = workdir
    assert main([
        "pe-viz", "--config", str(cfg_path), "--set", "seed=123", "--print-config",
        "--out-dir", "/nonexistent-not-used",
    ]) == 0
    dumped = json.loads(capsys.readouterr().out)
    assert dumped["seed"] == 123
    assert dumped["pretrain"]["steps"] == 8


def test_pretrain_outputs_and_training_csv_schema(workdir):
    root, _ = workdir
    pre = root / "pre"
    assert (pre / "model.ckpt").exists()
    assert (pre / "model.ckpt.meta.json").exists()
    prov, header, rows = read_csv(pre / "training.csv")
    assert header == ["step", "l_delta", "aux1", "aux2", "total"]
    assert len(rows) == TINY["pretrain"]["steps"]
    assert prov["seed"] == 5
    for row in rows:
        assert np.isfinite(float(row[4]))
    summary = json.loads((pre / "pretrain_summary.json").read_text())
    assert set(summary["per_interval"]) == {"6", "12", "24"}
    for entry in summary["per_interval"].values():
        assert entry["persistence_loss"] > 0


def test_pretrain_seeded_runs_are_identical(tmp_path, workdir):
    root, cfg_path = workdir
    for d in ("r1", "r2"):
        assert (
            main(
                [
                    "pretrain", "--config", str(cfg_path),
                    "--data", str(root / "data.grid"),
                    "--out-dir", str(tmp_path / d),
                ]
            )
            == 0
        )
    a = (tmp_path / "r1" / "training.csv").read_bytes()
    b = (tmp_path / "r2" / "training.csv").read_bytes()
    assert a == b
    assert (tmp_path / "r1" / "model.ckpt").read_bytes() == (tmp_path / "r2" / "model.ckpt").read_bytes()


def test_pretrain_resume_matches_uninterrupted(tmp_path, workdir):
    root, cfg_path = workdir
    # uninterrupted run with a write-through checkpoint halfway
    full_dir = tmp_path / "full"
    assert main([
        "pretrain", "--config", str(cfg_path), "--set", "pretrain.checkpoint_every=4",
        "--data", str(root / "data.grid"), "--out-dir", str(full_dir),
    ]) == 0
    # first leg is interrupted at step 4, second leg resumes to 8
    leg1 = tmp_path / "leg1"
    assert main([
        "pretrain", "--config", str(cfg_path), "--stop-after", "4",
        "--data", str(root / "data.grid"), "--out-dir", str(leg1),
    ]) == 0
    leg2 = tmp_path / "leg2"
    assert main([
        "pretrain", "--config", str(cfg_path),
        "--data", str(root / "data.grid"), "--out-dir", str(leg2),
        "--resume", str(leg1 / "model.ckpt"),
    ]) == 0
    _, _, full_rows = read_csv(full_dir / "training.csv")
    _, _, resumed_rows = read_csv(leg2 / "training.csv")
    assert resumed_rows == full_rows[4:]
    assert (full_dir / "model.ckpt").read_bytes() == (leg2 / "model.ckpt").read_bytes()


def test_finetune_eval_compare_pipeline(workdir, tmp_path):
    root, cfg_path = workdir
    fin = root / "fin"
    assert (
        main(
            [
                "finetune", "--config", str(cfg_path),
                "--data", str(root / "data.grid"),
                "--checkpoint", str(root / "pre" / "model.ckpt"),
                "--out-dir", str(fin),
            ]
        )
        == 0
    )
    assert (fin / "model_finetuned.ckpt").exists() and (fin / "dqn.ckpt").exists()
    prov, header, rows = read_csv(fin / "episodes.csv")
    assert header == [
        "episode", "epoch", "t0_hours", "lead_hours", "intervals", "rewards", "return", "epsilon",
    ]
    assert len(rows) == 3
    for row in rows:
        intervals = [int(x) for x in row[4].split(";")]
        assert sum(intervals) == int(row[3])
        rewards = [float(x) for x in row[5].split(";")]
        assert len(rewards) == len(intervals)
        # fields carry 6 decimals, so the sum can be off by rounding only
        assert abs(sum(rewards) - float(row[6])) < 1e-5 * max(1, len(rewards))

    # eval with fixed policy
    eval_csv = tmp_path / "eval.csv"
    assert (
        main(
            [
                "eval", "--config", str(cfg_path),
                "--data", str(root / "data.grid"),
                "--checkpoint", str(fin / "model_finetuned.ckpt"),
                "--out", str(eval_csv),
            ]
        )
        == 0
    )
    _, header, rows = read_csv(eval_csv)
    assert header == ["variable", "lead_hours", "rmse", "acc"]
    assert len(rows) == 2 * 2  # two variables x two leads
    names = {r[0] for r in rows}
    assert names == {"temperature", "zonal_wind"}
    for r in rows:
        assert float(r[2]) >= 0.0
        assert -1.0 <= float(r[3]) <= 1.0

    # compare without dqn: no adaptive row; with dqn: adaptive row present
    cmp_a = tmp_path / "cmp_a.csv"
    assert (
        main(
            [
                "compare-rollouts", "--config", str(cfg_path),
                "--data", str(root / "data.grid"),
                "--checkpoint", str(fin / "model_finetuned.ckpt"),
                "--out", str(cmp_a),
            ]
        )
        == 0
    )
    _, header_a, rows_a = read_csv(cmp_a)
    assert [r[0] for r in rows_a] == ["naive", "greedy", "random"]
    assert header_a[:2] == ["policy", "lead_hours"]
    assert "rmse_temperature" in header_a and "mean_return" in header_a

    cmp_b = tmp_path / "cmp_b.csv"
    assert (
        main(
            [
                "compare-rollouts", "--config", str(cfg_path),
                "--data", str(root / "data.grid"),
                "--checkpoint", str(fin / "model_finetuned.ckpt"),
                "--dqn", str(fin / "dqn.ckpt"),
                "--out", str(cmp_b),
            ]
        )
        == 0
    )
    _, _, rows_b = read_csv(cmp_b)
    assert [r[0] for r in rows_b] == ["naive", "greedy", "random", "adaptive"]
    # identical episode sets: fixed policies unchanged by the dqn flag
    assert [r[1:] for r in rows_a] == [r[1:] for r in rows_b[:3]]


def test_pe_viz_matrices(tmp_path, workdir):
    _, cfg_path = workdir
    out = tmp_path / "pe"
    assert main([
        "pe-viz", "--config", str(cfg_path), "--height-tokens", "3",
        "--width-tokens", "8", "--dim", "16", "--out-dir", str(out),
    ]) == 0
    _, header, ring_rows = read_csv(out / "ring_similarity.csv")
    _, _, conv_rows = read_csv(out / "conventional_similarity.csv")
    L = 24
    assert len(header) == L and len(ring_rows) == L and len(conv_rows) == L
    ring = np.array([[float(x) for x in row] for row in ring_rows])
    conv = np.array([[float(x) for x in row] for row in conv_rows])
    # ring: circular along the longitude axis of row 0 of the token grid
    w = 8
    for a in range(w):
        for b in range(w):
            d = min(abs(a - b), w - abs(a - b))
            assert abs(ring[a, b] - ring[0, d]) < 1e-9
    # conventional: flat-index table is not circular
    assert conv[0, w - 1] < conv[0, 1]


def test_exit_codes(tmp_path, workdir):
    root, cfg_path = workdir
    # 2: config error (unknown key)
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"nope": 1}))
    assert main(["gen-data", "--config", str(bad_cfg), "--out", str(tmp_path / "x.grid")]) == 2
    # 2: bad override path
    assert main([
        "gen-data", "--config", str(cfg_path), "--set", "data.nope=1",
        "--out", str(tmp_path / "y.grid"),
    ]) == 2
    # 4: missing data file
    assert main([
        "pretrain", "--config", str(cfg_path), "--data", str(tmp_path / "missing.grid"),
        "--out-dir", str(tmp_path / "out"),
    ]) == 4
    # 4: corrupt grid file
    corrupt = tmp_path / "corrupt.grid"
    corrupt.write_bytes(b"JUNKJUNKJUNK")
    assert main([
        "pretrain", "--config", str(cfg_path), "--data", str(corrupt),
        "--out-dir", str(tmp_path / "out2"),
    ]) == 4
    # 3: numeric divergence (absurd learning rate)
    assert main([
        "pretrain", "--config", str(cfg_path), "--set", "pretrain.lr=1e18",
        "--set", "pretrain.steps=30",
        "--data", str(root / "data.grid"), "--out-dir", str(tmp_path / "div"),
    ]) == 3
