import json

import numpy as np
import pytest

from safeproj.cli import config_hash, default_config, main

FAST_PRETRAIN = ["--set", "pretrain.days=10", "--set", "pretrain.epochs=2"]


def rows(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return lines[0].strip().split(","), lines[1:]


def comments(path):
    with open(path) as fh:
        return [ln[2:].strip() for ln in fh if ln.startswith("#")]


def test_run_building_96_rows(tmp_path):
    out = tmp_path / "a"
    assert main(["run", "--task", "building", "--steps", "96", "--out", str(out)] + FAST_PRETRAIN) == 0
    header, body = rows(out / "metrics.csv")
    assert header == ["step", "timestamp", "cost", "curtailment_or_energy", "violation_count",
                      "infeasible_relaxations", "u", "x"]
    assert len(body) == 96
    meta = comments(out / "metrics.csv")
    summary = json.loads((out / "summary.json").read_text())
    assert f"config_hash={summary['config_hash']}" in meta
    assert "seed=0" in meta and summary["version"] in meta[0]
    assert summary["steps"] == 96


def test_run_is_byte_identical(tmp_path):
    args = ["run", "--controller", "pcontroller", "--steps", "200", "--seed", "3"]
    for d in ("a", "b"):
        assert main(args + ["--out", str(tmp_path / d)]) == 0
    for f in ("metrics.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_inverter_paired_controllers(tmp_path):
    base = ["run", "--task", "inverter", "--cadence", "60", "--days", "1", "--steps", "120",
            "--set", "inverter.start=660", "--set", "inverter.scenario.margin_samples=300"]
    out = {}
    for c in ("voltvar", "prof"):
        assert main(base + ["--controller", c, "--out", str(tmp_path / c)]) == 0
        out[c] = json.loads((tmp_path / c / "summary.json").read_text())
    header, body = rows(tmp_path / "prof" / "metrics.csv")
    assert len(body) == 120 and header[6] == "p9" and header[-1].startswith("v")
    assert out["voltvar"]["violation_steps"] > 0
    assert out["prof"]["violation_steps"] == 0
    assert out["voltvar"]["config_hash"] != out["prof"]["config_hash"]


def test_synth_row_count(tmp_path):
    assert main(["synth", "--task", "inverter", "--seed", "7", "--days", "1", "--cadence", "1",
                 "--out", str(tmp_path)]) == 0
    _, body = rows(tmp_path / "trace.csv")
    assert len(body) == 86400


def test_gradcheck_exit_codes(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert rep["instances"] == 100 and rep["max_rel_error"] <= 1e-3
    assert main(["gradcheck", "--set", "gradcheck.instances=5", "--set", "gradcheck.tol=1e-30",
                 "--out", str(tmp_path)]) == 1


def test_sysid_noiseless_csv(tmp_path):
    rng = np.random.default_rng(0)
    N = 400
    x = np.zeros(N + 1)
    x[0] = 20.0
    u = rng.uniform(20, 65, N + 1)
    w = rng.normal(size=(N + 1, 3))
    for k in range(N):
        x[k + 1] = 0.9 * x[k] + 0.05 * u[k] + w[k] @ [0.02, 0.001, 0.3]
    data = tmp_path / "data.csv"
    with open(data, "w") as fh:
        fh.write("x0,u0,d0,d1,d2\n")
        for k in range(N + 1):
            fh.write(",".join(repr(float(v)) for v in (x[k], u[k], *w[k])) + "\n")
    assert main(["sysid", "--data", str(data), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "sysid_report.json").read_text())
    assert rep["train_rmse"] <= 1e-8 and rep["test_rmse"] <= 1e-8
    model = json.loads((tmp_path / "o" / "model.json").read_text())["model"]
    np.testing.assert_allclose(np.array(model["A"]).reshape(-1), [0.9], atol=1e-8)


def test_pretrain_checkpoint_reused(tmp_path):
    assert main(["pretrain", "--out", str(tmp_path / "p")] + FAST_PRETRAIN) == 0
    ckpt = tmp_path / "p" / "policy.ckpt.json"
    assert main(["run", "--steps", "20", "--checkpoint", str(ckpt), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--steps", "20", "--out", str(tmp_path / "b")] + FAST_PRETRAIN) == 0
    a = rows(tmp_path / "a" / "metrics.csv")[1]
    b = rows(tmp_path / "b" / "metrics.csv")[1]
    assert a == b
    # architecture mismatch is a configuration error
    assert main(["run", "--checkpoint", str(ckpt), "--set", "building.T=6",
                 "--out", str(tmp_path / "c")]) == 2


@pytest.mark.parametrize("argv", [
    ["run", "--set", "building.T=0"],
    ["run", "--set", "building.nope=1"],
    ["run", "--set", "building.hidden=2.5"],
    ["run", "--task", "inverter", "--controller", "clip"],
    ["run", "--trace", "/nonexistent/trace.csv"],
    ["run", "--set", "building.ppo.variant=bogus"],
    ["sysid", "--data", "/nonexistent/data.csv"],
    ["pretrain", "--task", "inverter"],
    ["run", "--seeds", "1,x"],
])
def test_configuration_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 4, "building": {"hidden": 16}}))
    assert main(["config", "--config", str(cfg), "--seed", "5"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["seed"] == 5 and shown["building"]["hidden"] == 16
    assert main(["config", "--print-defaults"]) == 0
    assert json.loads(capsys.readouterr().out) == default_config()


def test_config_hash_ignores_seed_and_output():
    a = default_config()
    b = dict(a, seed=9, output_dir="elsewhere")
    c = dict(a, controller="clip")
    assert config_hash(a) == config_hash(b) != config_hash(c)


def test_seed_fan_out_merges(tmp_path):
    assert main(["run", "--controller", "pcontroller", "--steps", "96", "--seeds", "0,1",
                 "--workers", "2", "--out", str(tmp_path)]) == 0
    merged = json.loads((tmp_path / "summary.json").read_text())
    assert merged["seeds"] == [0, 1] and len(merged["per_seed"]) == 2
    costs = [d["total_cost"] for d in merged["per_seed"]]
    assert merged["mean"]["total_cost"] == pytest.approx(np.mean(costs))
    single = tmp_path / "s1"
    assert main(["run", "--controller", "pcontroller", "--steps", "96", "--seed", "1",
                 "--out", str(single)]) == 0
    assert (single / "metrics.csv").read_bytes() == (tmp_path / "seed_1" / "metrics.csv").read_bytes()
