import csv
import hashlib
import json
import warnings

import numpy as np
import pytest

from fedstyle.cli import main
from fedstyle.data import load_dataset
from fedstyle.federation import FederationConfig, read_metrics
from fedstyle.style import reports_from_bytes


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "d.fdgd"
    assert main(["gen-data", "--domains", "4", "--classes", "3", "--per-class", "6", "--image-size", "8", "--seed", "1", "--out", str(data)]) == 0
    return root, data


def train(root, data, name, *extra):
    out = root / name
    code = main(["train", "--data", str(data), "--out-dir", str(out), "--clients", "4", "--rounds", "3", "--channels", "4", *extra])
    return code, out


def test_gen_data_summary_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.fdgd", tmp_path / "b.fdgd"
    assert main(["gen-data", "--domains", "4", "--classes", "7", "--per-class", "50", "--seed", "1", "--out", str(a)]) == 0
    out = capsys.readouterr().out
    assert "4 domains x 7 classes x 50 per class = 1400 samples" in out
    assert main(["gen-data", "--domains", "4", "--classes", "7", "--per-class", "50", "--seed", "1", "--out", str(b)]) == 0
    assert sha(a) == sha(b)
    assert [len(d) for d in load_dataset(a)] == [350] * 4


def test_gen_data_validation(tmp_path, capsys):
    assert main(["gen-data", "--per-class", "0", "--out", str(tmp_path / "x")]) == 2
    assert "per_class" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_train_outputs_and_manifest(tiny):
    root, data = tiny
    code, out = train(root, data, "full")
    assert code == 0
    for name in ("metrics.jsonl", "summary.csv", "checkpoint.bin", "manifest.json", "styles.bin"):
        assert (out / name).exists()
    assert len(read_metrics(out / "metrics.jsonl")) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["variant"]["mode"] == "full"
    assert manifest["seed"] == 0
    assert manifest["dataset"]["sha256"] == sha(data)
    assert manifest["version"]
    cfg = manifest["config"]
    assert cfg["trainer"]["gamma1"] == 1.0 and cfg["trainer"]["lr"] == 0.01
    assert cfg["federation"]["train_domains"] == [0, 1, 2] and cfg["federation"]["eval_domains"] == [3]
    assert cfg["model"]["hidden"] == FederationConfig().hidden
    reports = reports_from_bytes((out / "styles.bin").read_bytes())
    assert len(reports) == 5 and reports[-1].client_id == 0xFFFFFFFF


def test_train_baseline_manifest(tiny):
    root, data = tiny
    code, out = train(root, data, "base", "--gamma1", "0", "--gamma2", "0")
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["variant"]["mode"] == "baseline"


@pytest.mark.parametrize(
    "flags,key,value",
    [
        (["--local-clustering", "mean"], "local_clustering", "mean"),
        (["--global-clustering", "mean"], "global_clustering", "mean"),
        (["--gamma1", "0"], "triplet", False),
    ],
)
def test_train_ablation_manifest(tiny, flags, key, value):
    root, data = tiny
    code, out = train(root, data, "abl_" + key, "--rounds", "1", *flags)
    assert code == 0
    variant = json.loads((out / "manifest.json").read_text())["variant"]
    assert variant[key] == value
    assert variant["mode"] == "ablation"


def test_train_config_file_and_override(tiny, tmp_path):
    root, data = tiny
    ini = tmp_path / "run.ini"
    ini.write_text("[federation]\nrounds = 2\nseed = 5\n\n[trainer]\nalpha = 0.5\n")
    code, out = train(root, data, "ini", "--config", str(ini), "--rounds", "1")
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["federation"]["rounds"] == 1
    assert manifest["config"]["federation"]["seed"] == 5 == manifest["seed"]
    assert manifest["config"]["trainer"]["alpha"] == 0.5


def test_train_unknown_config_key(tiny, tmp_path, capsys):
    root, data = tiny
    ini = tmp_path / "bad.ini"
    ini.write_text("[trainer]\ngamma3 = 1\n")
    code, _ = train(root, data, "bad", "--config", str(ini))
    assert code == 2
    assert "trainer.gamma3" in capsys.readouterr().err


def test_train_bad_config_value(tiny, tmp_path, capsys):
    root, data = tiny
    ini = tmp_path / "bad.ini"
    ini.write_text("[trainer]\nalpha = many\n")
    code, _ = train(root, data, "badv", "--config", str(ini))
    assert code == 2
    assert "trainer.alpha" in capsys.readouterr().err


def test_train_missing_dataset(tmp_path):
    code = main(["train", "--data", str(tmp_path / "nope.fdgd"), "--out-dir", str(tmp_path / "o")])
    assert code == 4


def test_train_corrupt_dataset(tmp_path):
    bad = tmp_path / "bad.fdgd"
    bad.write_bytes(b"JUNKJUNK")
    assert main(["train", "--data", str(bad), "--out-dir", str(tmp_path / "o")]) == 4


def test_train_invariant_violation(tiny):
    root, data = tiny
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code, _ = train(root, data, "diverge", "--lr", "1e200")
    assert code == 3


def test_eval_reproduces_final_round(tiny, tmp_path):
    root, data = tiny
    code, out = train(root, data, "evalrun")
    assert code == 0
    table = tmp_path / "acc.csv"
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(data), "--domains", "3", "--out", str(table)]) == 0
    rows = list(csv.reader(table.open()))
    assert rows[0] == ["domain", "accuracy"]
    assert len(rows) - 1 == 2
    last = read_metrics(out / "metrics.jsonl")[-1]
    assert float(rows[1][1]) == last["acc_by_domain"]["3"]
    assert rows[2][0] == "AVG" and float(rows[2][1]) == last["acc_avg"]


def test_eval_several_domains(tiny, tmp_path):
    root, data = tiny
    _, out = train(root, data, "evalmulti")
    table = tmp_path / "acc.csv"
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(data), "--domains", "0,1,3", "--out", str(table)]) == 0
    rows = list(csv.reader(table.open()))
    assert len(rows) - 1 == 4
    accs = [float(r[1]) for r in rows[1:4]]
    assert float(rows[4][1]) == pytest.approx(np.mean(accs), abs=1e-12)


def test_eval_empty_domain_list(tiny):
    root, data = tiny
    _, out = train(root, data, "evalempty", "--rounds", "1")
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(data), "--domains", ""]) == 2


def test_eval_manifest_mismatch(tiny, tmp_path):
    root, data = tiny
    _, out = train(root, data, "evalmm", "--rounds", "1")
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["config"]["model"]["channels"] = 8
    other = tmp_path / "m.json"
    other.write_text(json.dumps(manifest))
    code = main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(data), "--domains", "3", "--manifest", str(other)])
    assert code == 2


def test_partition_command(tiny, capsys):
    _, data = tiny
    assert main(["partition", "--data", str(data), "--clients", "3", "--lam", "0", "--domains", "0,1,2"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["client", "anchor", "n", "domain_0", "domain_1", "domain_2"]
    for r in rows[1:]:
        counts = [int(x) for x in r[3:]]
        assert sum(counts) == int(r[2])
        assert counts[int(r[1])] == int(r[2])


def test_cluster_command(tmp_path, capsys):
    pts = tmp_path / "v.csv"
    pts.write_text("# two angular groups\n1,0.01\n1,0.02\n1,0.03\n0.01,1\n0.02,1\n0.03,1\n")
    assert main(["cluster", "--input", str(pts)]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0][:2] == ["point", "level_1"]
    labels = [int(r[-1]) for r in rows[1:]]
    assert labels[:3] == [labels[0]] * 3 and labels[3:] == [labels[3]] * 3 and labels[0] != labels[3]


def test_cluster_command_bad_input(tmp_path):
    pts = tmp_path / "v.csv"
    pts.write_text("1,a\n")
    assert main(["cluster", "--input", str(pts)]) == 2


def test_styles_command(tiny, tmp_path):
    _, data = tiny
    out = tmp_path / "s.bin"
    assert main(["styles", "--data", str(data), "--out", str(out), "--clients", "3", "--channels", "4"]) == 0
    reports = reports_from_bytes(out.read_bytes())
    assert [r.client_id for r in reports] == [0, 1, 2, 0xFFFFFFFF]


def test_report_command(tiny, tmp_path):
    root, data = tiny
    _, out = train(root, data, "report")
    table = tmp_path / "plot.csv"
    assert main(["report", "--metrics", str(out / "metrics.jsonl"), "--out", str(table)]) == 0
    rows = list(csv.reader(table.open()))
    assert rows[0] == ["round", "acc_avg", "loss_ce", "loss_triplet", "loss_reg", "acc_domain_3"]
    assert len(rows) == 4
