import hashlib
import json
import os

import pytest

from sgdlab import cli


def _run(argv):
    return cli.main(argv)


def _tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, root)] = hashlib.sha256(
                open(path, "rb").read()).hexdigest()
    return out


CFG = """
[data]
kind = "gauss"
n = 12
d = 4
k = 3
n_test = 6

[net]
hidden = [4]

[optim]
variant = "vanilla"
eta = 0.05
batch = 3
iters = 5

[experiment]
runs = 2
seed = 7
snapshots = [5]
top_q = 2
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(CFG)
    return str(path)


def test_verify_passes(capsys):
    assert _run(["verify", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_unknown_flag_maps_to_validation_exit():
    assert _run(["verify", "--frobnicate"]) == 1


def test_unknown_subcommand_rejected():
    assert _run(["explode"]) == 1


def test_gen_data_roundtrip(tmp_path, capsys):
    out = tmp_path / "ds.dsc"
    code = _run(["gen-data", "--kind", "gauss", "--n", "20", "--d", "5", "--k", "2",
                 "--corruption", "0.2", "--seed", "3", "--out", str(out)])
    assert code == 0
    from sgdlab import datagen

    ds = datagen.load_dataset(out)
    assert ds.n == 20 and ds.d == 5 and ds.k == 2
    assert ds.meta["corruption_fraction"] == 0.2


def test_gen_data_validation_error(tmp_path):
    # n not divisible by k
    code = _run(["gen-data", "--kind", "gauss", "--n", "21", "--d", "5", "--k", "2",
                 "--out", str(tmp_path / "x.dsc")])
    assert code == 1


def test_train_is_deterministic(config_path, tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert _run(["train", "--config", config_path, "--out", str(out1)]) == 0
    assert _run(["train", "--config", config_path, "--out", str(out2)]) == 0
    assert _tree_hashes(str(out1)) == _tree_hashes(str(out2))


def test_pipeline_train_bound_report(config_path, tmp_path, capsys):
    out = tmp_path / "exp"
    assert _run(["train", "--config", config_path, "--out", str(out)]) == 0
    assert _run(["report", "--runs-dir", str(out)]) == 0
    jsonl = tmp_path / "bounds.jsonl"
    assert _run(["bound", "--runs-dir", str(out), "--delta", "0.05",
                 "--mc-draws", "10", "--out", str(jsonl)]) == 0
    lines = jsonl.read_text().strip().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) >= {"run_id", "kl_rhs", "pop_loss_upper", "train_loss_mc"}
    # aggregation subcommands run on the same artifacts
    assert _run(["overlap", "--runs-dir", str(out)]) == 0
    assert _run(["spectra", "--runs-dir", str(out)]) == 0
    assert _run(["dynamics", "--runs-dir", str(out)]) == 0


def test_report_flags_broken_artifacts(config_path, tmp_path, capsys):
    out = tmp_path / "exp"
    assert _run(["train", "--config", config_path, "--out", str(out)]) == 0
    os.remove(out / "runs" / "run_0000" / "trace.csv")
    assert _run(["report", "--runs-dir", str(out)]) == 1
