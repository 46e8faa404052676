import pytest

from fedload.cli import CliError, load_config, main
from fedload.experiments import read_comparison_csv, read_prediction_csv
from fedload.data import read_dataset_csv

TINY = """
data: {households: 2, length: 200}
split: {train_minutes: 15, test_minutes: 5}
forecast: {window_len: 4, layer1_hidden: 2, layer2_hidden: 2, batch_size: 16}
experiment: {epochs: 1}
federated: {rounds: 2, local_epochs: 1}
disagg: {window_len: 16, conv_filters: 2, conv_kernel: 3, lstm_hidden: 2, mapping_dim: 2, epochs: 1, stride: 8}
sweep: {rounds: 2}
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return str(p)


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_flag():
    for argv in (["bogus"], ["synth", "--nope"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_failure_is_one_line(tmp_path, capsys):
    assert main(["synth", "--scenario", "nowhere", "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip()
    assert "\n" not in err and "data.scenario" in err


def test_synth_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--seed", "7", "--out-dir", str(a), "--length", "120"]) == 0
    assert main(["synth", "--seed", "7", "--out-dir", str(b), "--length", "120"]) == 0
    files = sorted(p.name for p in a.iterdir())
    assert len(files) == 5
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert len(read_dataset_csv(a / "house1.csv")) == 120


def test_config_precedence(cfg):
    c = load_config(cfg, {"federated.rounds": 9})
    assert c["federated"]["rounds"] == 9
    assert c["federated"]["local_epochs"] == 1
    assert c["forecast"]["lr"] == 0.001
    with pytest.raises(CliError, match="unknown key"):
        load_config(None, {"federated.roundz": 1})


def test_sweep_full_grid_writes_six_csvs(cfg, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", cfg, "--out-dir", str(out)]) == 0
    names = sorted(p.name for p in out.glob("sweep_*.csv"))
    assert names == sorted(f"sweep_E{e}_C{c}.csv" for e in (5, 50, 80) for c in (0.5, 1.0))
    lines = (out / "sweep_E5_C0.5.csv").read_text().strip().split("\n")
    assert lines[0] == "round,global_val_loss" and len(lines) == 3


def test_train_then_forecast(cfg, tmp_path):
    data = tmp_path / "d"
    main(["synth", "--config", cfg, "--out-dir", str(data)])
    csvs = [str(data / "house1.csv"), str(data / "house2.csv")]
    assert main(["train", "--config", cfg, "--data", *csvs, "--training", "federated",
                 "--out-dir", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "rounds_heater.csv").exists()
    assert main(["forecast", "--config", cfg, "--data", *csvs, "--checkpoints", str(tmp_path / "t"),
                 "--household", "house2", "--out-dir", str(tmp_path / "f")]) == 0
    ts, truth, pred = read_prediction_csv(tmp_path / "f" / "pred_total.csv")
    assert len(ts) == len(truth) == len(pred) == 50
    assert main(["forecast", "--config", cfg, "--data", *csvs, "--model", "lstm",
                 "--checkpoints", str(tmp_path / "t"), "--out-dir", str(tmp_path / "g")]) == 1


def test_evaluate_both_modes(cfg, tmp_path):
    out = tmp_path / "e"
    assert main(["evaluate", "--config", cfg, "--mode", "both", "--out-dir", str(out)]) == 0
    assert len(list((out / "integrated").glob("pred_*.csv"))) == 3 + 1
    assert len(list((out / "direct").glob("pred_*.csv"))) == 1
    rows = (out / "evaluation.csv").read_text().strip().split("\n")
    assert rows[0] == "mode,mae_norm,rmse_norm,mae_watts,rmse_watts" and len(rows) == 3
    assert main(["evaluate", "--predictions", str(out / "direct" / "pred_total.csv"),
                 "--out-dir", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "metrics.csv").read_text().startswith("scale,mae,rmse")


def test_compare_table(cfg, tmp_path):
    out = tmp_path / "c"
    assert main(["compare", "--config", cfg, "--out-dir", str(out), "--models", "lstm", "feddl"]) == 0
    rows = read_comparison_csv(out / "comparison.csv")
    measured = [r for r in rows if r.household != "reference"]
    assert len(measured) == 2 * 2
    ref = {r.model: (r.mae_norm, r.rmse_norm) for r in rows if r.household == "reference"}
    assert ref["feddl"] == (0.08141, 0.16739) and ref["lstm"] == (0.10956, 0.18266)
    assert main(["compare", "--config", cfg, "--out-dir", str(out), "--models", "gru"]) == 1


def test_disaggregate_and_ingest(cfg, tmp_path):
    data = tmp_path / "d"
    main(["synth", "--config", cfg, "--out-dir", str(data)])
    assert main(["disaggregate", "--config", cfg, "--data", str(data / "house1.csv"),
                 "--out-dir", str(tmp_path / "n")]) == 0
    nilm = read_dataset_csv(tmp_path / "n" / "house1_nilm.csv")
    assert sorted(nilm.appliances) == ["fridge", "heater", "pump"] and len(nilm) == 200
    house = tmp_path / "ukdale" / "house_1"
    house.mkdir(parents=True)
    (house / "labels.dat").write_text("1 aggregate\n2 kettle\n")
    (house / "channel_1.dat").write_text("0 10\n6 12\n12 11\n")
    (house / "channel_2.dat").write_text("0 0\n6 2\n12 1\n")
    assert main(["ingest", "--data", str(house), "--out-dir", str(tmp_path / "i")]) == 0
    ds = read_dataset_csv(tmp_path / "i" / "house_1.csv")
    assert ds.aggregate.values.tolist() == [10.0, 12.0, 11.0]
    assert main(["ingest", "--out-dir", str(tmp_path / "i")]) == 1
