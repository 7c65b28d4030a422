import json

import numpy as np
import pytest

from sdnid import bla, cli
from sdnid.data import Signal, make_cts_dataset, measured_snr_db, read_table, write_table

def _col(table, name):
    return np.array(table[name], float)


TINY = "n_x = 2\nn_a = 3\nn_b = 3\nhidden = 8\nJ = 8\nbatch = 4\nmax_steps = 20\nval_interval = 10\n"


@pytest.fixture(scope="module")
def cts_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cts")
    assert cli.main(["make-data", "--K", "300", "--seed", "3", "--noise-snr", "30",
                     "--out", str(d)]) == 0
    (d / "tiny.cfg").write_text(TINY)
    return d


def _train(cts_dir, out, *extra):
    return cli.main(["train", "--config", str(cts_dir / "tiny.cfg"), "--train",
                     str(cts_dir / "est.csv"), "--test", str(cts_dir / "test.csv"),
                     "--out", str(out), *extra])


def test_config_precedence_flag_over_file_over_default(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("hidden = 12  # comment\nseed = 5\nlr_schedule = ((0, 0.01),)\n")
    c = cli.build_config(str(cfg), {"seed": 9, "hidden": None})
    assert c.hidden == 12 and c.seed == 9
    assert c.lr_schedule == ((0, 0.01),)
    assert c.J == cli.RunConfig().J


def test_config_rejects_unknown_keys_and_garbage():
    with pytest.raises(cli.UsageError, match="unknown"):
        cli.parse_config_text("nope = 1")
    with pytest.raises(cli.UsageError):
        cli.parse_config_text("just words")


def test_config_bare_word_is_string():
    assert cli.parse_config_text("tau_mode = trainable") == {"tau_mode": "trainable"}


def test_tau_mode_fixed_ratio_is_exact():
    assert cli.parse_tau_mode("fixed:0.1") == {"tau_mode": "fixed", "tau_init_ratio": 0.1}
    with pytest.raises(cli.UsageError):
        cli.parse_tau_mode("sometimes")


def test_grid_forms():
    assert cli.parse_grid("0.1,1,10") == [0.1, 1.0, 10.0]
    g = cli.parse_grid("geom:0.001:40:5")
    assert len(g) == 5 and g[0] == pytest.approx(1e-3) and g[-1] == pytest.approx(40)


def test_train_fixed_ratio_outputs(cts_dir, tmp_path, capsys):
    assert _train(cts_dir, tmp_path / "r", "--tau-mode", "fixed:0.1", "--seed", "1") == 0
    out = capsys.readouterr().out
    assert "train RMSE" in out and "test RMSE" in out
    metrics = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert metrics["ts_over_tau"] == [0.1]
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert manifest["manifest_id"] == metrics["manifest_id"]
    assert manifest["seed"] == 1
    assert set(manifest["inputs"]) == {str(cts_dir / "est.csv"), str(cts_dir / "test.csv")}


def test_train_is_deterministic(cts_dir, tmp_path):
    for name in "ab":
        assert _train(cts_dir, tmp_path / name, "--seed", "4") == 0
    a = (tmp_path / "a" / "history.csv").read_bytes()
    assert a == (tmp_path / "b" / "history.csv").read_bytes()


def test_train_bla_mode_logs_estimate(cts_dir, tmp_path, capsys):
    assert _train(cts_dir, tmp_path / "b", "--tau-mode", "bla") == 0
    line = [s for s in capsys.readouterr().out.splitlines() if s.startswith("BLA estimate")]
    ratio = float(line[0].split("=")[1])
    metrics = json.loads((tmp_path / "b" / "metrics.json").read_text())
    assert metrics["ts_over_tau"][0] == pytest.approx(ratio, rel=1e-5)


def test_simulate_reproduces_recorded_rmse(cts_dir, tmp_path, capsys):
    assert _train(cts_dir, tmp_path / "r") == 0
    capsys.readouterr()
    traj = tmp_path / "traj.csv"
    est = str(cts_dir / "est.csv")
    assert cli.main(["simulate", "--checkpoint", str(tmp_path / "r" / "checkpoint.json"),
                     "--data", est, "--out", str(traj)]) == 0
    rmse = float(capsys.readouterr().out.split("RMSE:")[1])
    recorded = json.loads((tmp_path / "r" / "metrics.json").read_text())["file_rmse"][est]
    assert abs(rmse - recorded) <= 1e-9
    table = read_table(traj)
    lag = max(3, 3)  # max(n_a, n_b)
    assert len(table["k"]) == 300 - lag
    assert _col(table, "k")[0] == lag


def test_simulate_missing_checkpoint_fails(tmp_path, capsys):
    code = cli.main(["simulate", "--checkpoint", str(tmp_path / "nope.json"),
                     "--data", str(tmp_path / "x.csv")])
    assert code != 0
    assert "not found" in capsys.readouterr().err


def test_train_missing_data_is_data_error(tmp_path):
    assert cli.main(["train", "--train", str(tmp_path / "nope.csv")]) == cli.EXIT_DATA


def test_sweep_single_point_table(cts_dir, tmp_path):
    out = tmp_path / "s"
    assert cli.main(["sweep", "--config", str(cts_dir / "tiny.cfg"), "--grid", "0.2",
                     "--seeds", "1", "--budget", "10", "--train", str(cts_dir / "est.csv"),
                     "--out", str(out)]) == 0
    table = read_table(out / "sweep.csv")
    assert len(table["ts_over_tau"]) == 1
    assert "diverged" in table
    summary = json.loads((out / "summary.json").read_text())
    assert summary["chosen_ts_over_tau"] == pytest.approx(0.2)


def test_sweep_rejects_unsorted_grid(cts_dir, tmp_path):
    code = cli.main(["sweep", "--config", str(cts_dir / "tiny.cfg"), "--grid", "1,0.1",
                     "--budget", "2", "--train", str(cts_dir / "est.csv"),
                     "--out", str(tmp_path / "s")])
    assert code == cli.EXIT_USAGE


def test_estimate_bla_order_zero_is_usage_error(cts_dir):
    code = cli.main(["estimate-bla", "--train", str(cts_dir / "est.csv"), "--Ts", "4",
                     "--order", "0"])
    assert code == cli.EXIT_USAGE


def test_estimate_bla_single_sine(tmp_path, capsys):
    # second-order plant, sampling fine against both the sine and the poles
    omega, Ts = 0.5, 0.1
    K = int(round(20 * 2 * np.pi / (omega * Ts)))
    u = np.sin(omega * Ts * np.arange(K))
    plant = bla.LinearSS([[-0.5, 0.0], [1.0, -2.0]], [[1.0], [0.0]], [[0.0, 1.0]], [[0.0]], Ts)
    x, _ = bla.bla_states(plant, Signal(u, Ts))
    write_table(tmp_path / "sine.csv", {"u": u, "y": x.values[:, 1]})
    out = tmp_path / "b"
    assert cli.main(["estimate-bla", "--train", str(tmp_path / "sine.csv"), "--Ts", str(Ts),
                     "--out", str(out)]) == 0
    report = json.loads((out / "bla.json").read_text())
    assert report["tau"] * omega == pytest.approx(1.0, rel=0.01)


def test_make_data_zero_input(tmp_path):
    assert cli.main(["make-data", "--zero-input", "--K", "50", "--out", str(tmp_path)]) == 0
    t = read_table(tmp_path / "est.csv")
    assert not _col(t, "u").any() and not _col(t, "y").any()


def test_make_data_is_byte_identical(tmp_path):
    for name in "ab":
        assert cli.main(["make-data", "--K", "200", "--seed", "7", "--noise-snr", "25",
                         "--out", str(tmp_path / name)]) == 0
    for f in ("est.csv", "test.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("snr", [10.0, 20.0, 40.0])
def test_make_data_snr_is_met(tmp_path, snr):
    assert cli.main(["make-data", "--K", "2000", "--seed", "2", "--noise-snr", str(snr),
                     "--out", str(tmp_path)]) == 0
    noisy = _col(read_table(tmp_path / "est.csv"), "y")
    clean = make_cts_dataset(K=2000, seed=2)["est"][1].values[:, 0]
    assert abs(measured_snr_db(clean, noisy) - snr) < 1.0


def test_unknown_system_is_usage_error(tmp_path):
    assert cli.main(["make-data", "--system", "pendulum", "--out", str(tmp_path)]) == 2
