import csv

import numpy as np
import pytest

from dsac import neuro as nn
from dsac.cli import band_table, main, parse_config

FAST = ["--set", "agent.batch=8", "--set", "agent.warmup=20", "--set", "agent.buffer=500",
        "--set", "agent.critic_hidden=8", "--set", "agent.actor_hidden=8", "--set", "agent.embedding=4",
        "--set", "agent.n_fractions=4", "--set", "run.eval_every=20", "--set", "run.eval_episodes=2"]


def write(path, text):
    path.write_text(text)
    return path


def test_empty_file_gives_table_defaults(tmp_path):
    cfg = parse_config(write(tmp_path / "empty.txt", ""))
    agent = cfg.agent_config()
    assert (agent.gamma, agent.batch, agent.n_fractions, agent.kappa) == (0.99, 256, 32, 1.0)
    assert (agent.tau_soft, agent.warmup, agent.buffer, agent.critic_lr) == (0.005, 10_000, 1_000_000, 3e-4)
    assert agent.scheme == "random" and agent.risk.is_neutral


def test_cvar_beta_out_of_range_rejected_with_location(tmp_path):
    path = write(tmp_path / "bad.txt", "# risk settings\nrisk.kind = cvar\nrisk.beta = 1.5\n")
    with pytest.raises(nn.ConfigurationError, match="risk.beta"):
        parse_config(path)


@pytest.mark.parametrize("text, where", [("agent.gama = 0.9\n", "bad.txt:1"),
                                          ("\nagent.batch = 2.5\n", "bad.txt:2"),
                                          ("run.steps = many\n", "bad.txt:1"),
                                          ("no equals sign\n", "bad.txt:1")])
def test_bad_lines_rejected_with_location(tmp_path, text, where):
    with pytest.raises(nn.ConfigurationError, match=where):
        parse_config(write(tmp_path / "bad.txt", text))


def test_out_of_range_agent_value_rejected():
    with pytest.raises(nn.ConfigurationError, match="gamma"):
        parse_config(overrides=[("agent.gamma", "1.2")])


def test_unknown_env_param_rejected():
    with pytest.raises(nn.ConfigurationError, match="pendulum"):
        parse_config(overrides=[("env.torque", "3")])


def test_serialization_round_trip_is_stable(tmp_path):
    cfg = parse_config(overrides=[("risk.kind", "wang"), ("risk.beta", "-0.75"), ("env.name", "risky_path"),
                                  ("env.fail_prob", "0.1"), ("run.seeds", "3,1,2"), ("agent.alpha", "0.05")])
    once = cfg.serialize()
    again = parse_config(write(tmp_path / "c.txt", once)).serialize()
    assert once == again
    assert parse_config(write(tmp_path / "d.txt", once)).config_hash() == cfg.config_hash()


def test_hash_ignores_output_directory_only():
    a = parse_config(overrides=[("run.out", "x")])
    b = parse_config(overrides=[("run.out", "y")])
    c = parse_config(overrides=[("run.seeds", "1")])
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_train_evaluate_plot_round_trip(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--env", "risky_path", "--steps", "40", "--seed", "0,1", "--out", str(out), *FAST])
    assert code == 0
    for seed in (0, 1):
        lines = (out / f"seed_{seed}" / "metrics.csv").read_text().splitlines()
        assert lines[0] == f"# config_hash={parse_config(out / 'config.txt').config_hash()}"
        assert len(lines) == 4
        assert (out / f"seed_{seed}" / "checkpoint_40.npz").exists()

    assert main(["evaluate", str(out / "seed_0"), "--episodes", "3", "--risk", "cvar", "--beta", "0.25"]) == 0
    summary = (out / "seed_0" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("# config_hash=")
    row = dict(zip(summary[1].split(","), summary[2].split(",")))
    assert row["episodes"] == "3" and row["empty"] == "0" and row["risk"] == "cvar(0.25)"

    assert main(["plot-data", str(out), "--metric", "eval_return_mean"]) == 0
    with open(out / "band_eval_return_mean.csv") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    assert rows[0] == ["step", "mean", "variance", "lower", "upper"]
    assert [r[0] for r in rows[1:]] == ["20", "40"]


def test_evaluate_zero_episodes_warns_and_exits_zero(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--env", "risky_path", "--steps", "0", "--out", str(out), *FAST]) == 0
    with pytest.warns(UserWarning, match="0 episodes"):
        code = main(["evaluate", str(out), "--episodes", "0"])
    assert code == 0
    assert (out / "seed_0" / "summary.csv").read_text().splitlines()[2].split(",")[2] == "1"


def test_missing_artifacts_exit_nonzero(tmp_path, capsys):
    assert main(["evaluate", str(tmp_path / "nothing")]) != 0
    assert main(["plot-data", str(tmp_path)]) != 0
    assert main(["train", "--config", str(tmp_path / "absent.txt")]) != 0
    assert "error" in capsys.readouterr().err


def test_resume_with_changed_config_rejected(tmp_path):
    out = str(tmp_path / "run")
    assert main(["train", "--env", "risky_path", "--steps", "20", "--out", out, *FAST]) == 0
    code = main(["train", "--env", "risky_path", "--steps", "20", "--out", out, "--resume",
                 "--set", "agent.alpha=0.1", *FAST])
    assert code != 0


def test_verify_chain_passes_and_writes_report(tmp_path):
    assert main(["verify", "--mdp", "chain", "--out", str(tmp_path), "--trials", "30"]) == 0
    report = (tmp_path / "verify_report.txt").read_text()
    assert report.startswith("# config_hash=") and "FAIL" not in report
    assert (tmp_path / "verify.csv").exists()


def test_band_is_half_the_across_seed_variance():
    runs = [{"step": np.array([1.0, 2.0]), "m": np.array([v, 2 * v])} for v in (1.0, 2.0, 3.0, 4.0, 5.0)]
    table = band_table(runs, "m")
    var = np.var([1, 2, 3, 4, 5])
    np.testing.assert_allclose(table[0], [1, 3, var, 3 - var / 2, 3 + var / 2])
    np.testing.assert_allclose(table[1], [2, 6, 4 * var, 6 - 2 * var, 6 + 2 * var])


def test_band_rejects_misaligned_steps():
    runs = [{"step": np.array([1.0]), "m": np.array([0.0])}, {"step": np.array([2.0]), "m": np.array([0.0])}]
    with pytest.raises(nn.ConfigurationError):
        band_table(runs, "m")
