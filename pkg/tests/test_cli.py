import csv
import json
from pathlib import Path

import numpy as np
import pytest

from fedod import boxkit, cli, datagen, report
from fedod.detector import DetectorModel
from fedod.metrics import FedIndicators

GOLDEN = Path(__file__).parent / "golden"
TINY = ["--seed", "4", "--server-train", "8", "--server-test", "4", "--client-train", "4", "--client-test", "3"]
QUICK_FED = ["--rounds", "2", "--epochs", "1", "--distill-epochs", "1", "--batch-size", "4"]


def _csv_body(path):
    return [row for row in csv.reader(ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#"))]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    d = {k: root / k for k in ("data", "base", "fed", "fedavg", "eval", "fusion")}
    assert cli.main(["gen-data", "--out", str(d["data"]), *TINY]) == 0
    assert cli.main(["train-base", "--data", str(d["data"]), "--out", str(d["base"]), "--epochs", "2",
                     "--batch-size", "4"]) == 0
    common = ["--data", str(d["data"]), "--base", str(d["base"]), *QUICK_FED]
    assert cli.main(["fed-run", *common, "--out", str(d["fed"])]) == 0
    assert cli.main(["fed-run", *common, "--out", str(d["fedavg"]), "--aggregator", "fedavg"]) == 0
    assert cli.main(["evaluate", "--data", str(d["data"]), "--run", str(d["fed"]), "--out", str(d["eval"])]) == 0
    assert cli.main(["fuse-compare", "--data", str(d["data"]), "--run", str(d["fed"]), "--out", str(d["fusion"])]) == 0
    return d


def test_gen_data_manifest_and_idempotence(pipeline, tmp_path):
    manifest = json.loads((pipeline["data"] / "manifest.json").read_text())
    counts = {k: v["count"] for k, v in manifest["splits"].items()}
    assert counts["server_train"] == 8 and counts["server_test"] == 4
    assert all(counts[f"client_{c}_train"] == 4 and counts[f"client_{c}_test"] == 3 for c in range(1, 5))
    assert cli.main(["gen-data", "--out", str(tmp_path / "again"), *TINY]) == 0
    again = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert again == manifest


def test_gen_data_default_counts_follow_benchmark_defaults():
    p = cli.build_parser().parse_args(["gen-data"])
    assert (p.server_train, p.server_test, p.client_train, p.client_test) == (2000, 400, 150, 100)


def test_output_root_env_var(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["gen-data", *TINY]) == 0
    assert (tmp_path / "root" / "data" / "manifest.json").exists()
    # the next stage finds the dataset under the same root without flags
    assert cli.main(["train-base", "--epochs", "0"]) == 0
    assert DetectorModel.load(tmp_path / "root" / "base" / "base.ckpt") == DetectorModel.init(0)


def test_train_base_outputs(pipeline):
    d = pipeline["base"]
    losses = [float(r[1]) for r in _csv_body(d / "loss.csv")[1:]]
    assert len(losses) == 2 and all(np.isfinite(losses))
    assert json.loads((d / "config.json").read_text())["epochs"] == 2


def test_train_base_resume_equals_straight(pipeline, tmp_path):
    data = str(pipeline["data"])
    out = tmp_path / "b"
    assert cli.main(["train-base", "--data", data, "--out", str(out), "--epochs", "1", "--batch-size", "4"]) == 0
    assert cli.main(["train-base", "--data", data, "--out", str(out), "--epochs", "2", "--batch-size", "4",
                     "--resume"]) == 0
    assert (out / "base.ckpt").read_bytes() == (pipeline["base"] / "base.ckpt").read_bytes()
    assert (out / "loss.csv").read_text() == (pipeline["base"] / "loss.csv").read_text()


def test_config_echo_replays_bit_for_bit(pipeline, tmp_path):
    echo = json.loads((pipeline["base"] / "config.json").read_text())
    echo["out"] = str(tmp_path / "replay")
    cfg = tmp_path / "replay.json"
    cfg.write_text(json.dumps(echo))
    assert cli.main(["train-base", "--config", str(cfg)]) == 0
    assert (tmp_path / "replay" / "base.ckpt").read_bytes() == (pipeline["base"] / "base.ckpt").read_bytes()


def test_fed_run_layout(pipeline):
    for name in ("fed", "fedavg"):
        d = pipeline[name]
        assert sorted(p.name for p in d.glob("round_*")) == ["round_0", "round_1", "round_2"]
        assert sorted(p.name for p in (d / "round_2").iterdir()) == ["client_1.ckpt", "client_2.ckpt",
                                                                    "client_3.ckpt", "client_4.ckpt", "global.ckpt"]
        assert len((d / "messages.log").read_text().splitlines()) == 2 * 2 * 4
        rows = _csv_body(d / "rounds.csv")
        assert rows[0][:2] == ["round", "model"] and len(rows) == 1 + 3
        assert [r[1] for r in rows[1:]] == ["w_b", "w^1_g", "w^2_g"]
    a = json.loads((pipeline["fed"] / "config.json").read_text())
    b = json.loads((pipeline["fedavg"] / "config.json").read_text())
    assert {k for k in a if a[k] != b[k]} == {"aggregator", "out"}


def test_fed_run_zero_rounds(pipeline, tmp_path):
    out = tmp_path / "f0"
    args = ["fed-run", "--data", str(pipeline["data"]), "--base", str(pipeline["base"]), "--rounds", "0"]
    assert cli.main([*args, "--out", str(out)]) == 0
    assert not (out / "round_1").exists() and not (out / "ensemble").exists()
    assert DetectorModel.load(out / "base.ckpt") == DetectorModel.load(pipeline["base"] / "base.ckpt")


def test_fed_run_resume_equals_straight(pipeline, tmp_path):
    out = tmp_path / "fr"
    common = ["fed-run", "--data", str(pipeline["data"]), "--base", str(pipeline["base"]), "--out", str(out),
              "--epochs", "1", "--distill-epochs", "1", "--batch-size", "4"]
    assert cli.main([*common, "--rounds", "1"]) == 0
    assert cli.main([*common, "--rounds", "2", "--resume"]) == 0
    for f in ("round_2/global.ckpt", "round_2/client_3.ckpt", "ensemble/personal_1.ckpt", "messages.log"):
        assert (out / f).read_bytes() == (pipeline["fed"] / f).read_bytes(), f


def test_evaluate_report_structure(pipeline):
    rows = _csv_body(pipeline["eval"] / "report.csv")
    header = rows[0]
    assert header == ["indicator", "w_b", "w^1_i", "E(w^1_i,w_b)", "w^1_g", "w^2_i", "E(w^2_i,w^1_g)",
                      "w^2_g", "w^3_i", "E(w^3_i,w^2_g)"]
    assert [r[0] for r in rows[1:]] == ["A_s", "A_p", "A_u", "A_com@0.1", "A_com@0.3", "A_com@0.5"]
    assert (pipeline["eval"] / "report.csv").read_text().startswith(report.HEADER_NOTE)
    doc = json.loads((pipeline["eval"] / "report.json").read_text())
    assert list(doc["columns"]) == header[1:]
    svg = (pipeline["eval"] / "report.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<rect") >= 6 * 9


def test_evaluate_base_only(pipeline, tmp_path):
    out = tmp_path / "e"
    args = ["evaluate", "--models", "base", "--data", str(pipeline["data"]), "--base", str(pipeline["base"])]
    assert cli.main([*args, "--out", str(out)]) == 0
    assert _csv_body(out / "report.csv")[0] == ["indicator", "w_b"]


def test_fuse_compare_structure_and_rerun(pipeline, tmp_path):
    rows = _csv_body(pipeline["fusion"] / "fusion.csv")
    assert rows[0] == ["indicator", "nms", "soft_nms", "nwm", "wbf"]
    assert [r[0] for r in rows[1:]] == ["A_s", "A_p"]
    out = tmp_path / "fc"
    assert cli.main(["fuse-compare", "--data", str(pipeline["data"]), "--run", str(pipeline["fed"]),
                     "--out", str(out)]) == 0
    assert (out / "fusion.csv").read_text() == (pipeline["fusion"] / "fusion.csv").read_text()


def test_fuse_command(tmp_path, capsys):
    sets = {
        0: boxkit.DetectionSet([[0.1, 0.1, 0.3, 0.3], [0.1, 0.1, 0.3, 0.3]], [0.6, 0.8], [2, 2], [0, 1]),
        3: boxkit.DetectionSet([[0.5, 0.5, 0.7, 0.7]], [0.8], [1], [1]),
    }
    src = tmp_path / "boxes.csv"
    src.write_text(boxkit.records_to_text(sets))
    assert cli.main(["fuse", str(src)]) == 0
    out = boxkit.load_records(iter(capsys.readouterr().out.splitlines()))
    assert out[0].scores.tolist() == pytest.approx([0.7])
    assert out[3].scores.tolist() == pytest.approx([0.4])
    dst = tmp_path / "fused.csv"
    assert cli.main(["fuse", str(src), "--method", "nms", "--output", str(dst)]) == 0
    assert len(boxkit.load_records(dst.open())[0]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        ["train-base", "--data", "/nonexistent/data", "--out", "{tmp}/x"],
        ["fed-run", "--data", "{data}", "--base", "/nonexistent/base.ckpt", "--out", "{tmp}/x"],
        ["evaluate", "--data", "{data}", "--run", "{tmp}/missing", "--out", "{tmp}/x"],
        ["fuse-compare", "--data", "{data}", "--run", "{tmp}/missing", "--out", "{tmp}/x"],
        ["fuse", "{tmp}/nothing.csv"],
        ["gen-data", "--config", "{tmp}/nothing.json"],
    ],
)
def test_error_cases_exit_nonzero(argv, pipeline, tmp_path, capsys):
    argv = [a.format(tmp=tmp_path, data=pipeline["data"]) for a in argv]
    assert cli.main(argv) == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_config_file_errors(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"no_such_option": 1}))
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    bad.write_text(json.dumps({"command": "fed-run"}))
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    bad.write_text("{not json")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"server_train": 3}))
    out = tmp_path / "d"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(out), *TINY]) == 0
    assert json.loads((out / "manifest.json").read_text())["splits"]["server_train"]["count"] == 3


def test_lock_rejects_concurrent_run(tmp_path, capsys):
    out = tmp_path / "d"
    (tmp_path / "d.lock").write_text("123")
    assert cli.main(["gen-data", "--out", str(out), *TINY]) == 1
    assert "locked" in capsys.readouterr().err
    assert not out.exists()


def test_failed_run_leaves_previous_output_intact(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["gen-data", "--out", str(out), *TINY]) == 0
    before = (out / "manifest.json").read_text()
    with pytest.raises(RuntimeError):
        with cli.locked_output(out) as tmp:
            (tmp / "manifest.json").write_text("partial")
            raise RuntimeError("boom")
    assert (out / "manifest.json").read_text() == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d"]


# -- report golden files -------------------------------------------------------------


def _fixed_columns():
    return {
        "w_b": FedIndicators(0.8, 0.05, 0.2, {0.1: 0.185, 0.3: 0.155, 0.5: 0.125}, {1: {"r_s": 0.8, "r_p": 0.05, "r_u": 0.2}}),
        "E(w^1_i,w_b)": FedIndicators(0.75, 0.5, 1 / 3, {0.1: 0.35, 0.3: 0.383333, 0.5: 0.416667}),
    }


def test_report_csv_matches_golden():
    assert report.table_csv(_fixed_columns()) == (GOLDEN / "report.csv").read_text()
    rows = [
        (0, "w_b", _fixed_columns()["w_b"]),
        (1, "w^1_g", _fixed_columns()["E(w^1_i,w_b)"]),
    ]
    assert report.round_log_csv(rows) == (GOLDEN / "rounds.csv").read_text()


def test_report_csv_round_trip():
    back = report.read_table_csv(report.table_csv(_fixed_columns()))
    assert back["E(w^1_i,w_b)"]["A_u"] == pytest.approx(1 / 3, abs=1e-6)
    assert np.isclose(back["w_b"]["A_com@0.3"], 0.155)


def test_datagen_reload_matches_cli_output(pipeline):
    bench = datagen.load_benchmark(pipeline["data"])
    assert bench.seed == 4 and bench.client_ids == [1, 2, 3, 4]
