import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mvc.cli import SUMMARY_COLUMNS, main
from mvc.config import load_config
from mvc.data import ChipDataset
from mvc.transfer import LEDGER_COLUMNS
from mvc.views import ViewSpec

SMALL_NET = "stage_widths = [8, 16]\nembedding_dim = 16\nd_h = 8\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.cfg").write_text("H = 16\nnum_chips = 60\nname = toy\n")
    (root / "pretrain.cfg").write_text(SMALL_NET + "batch_size = 10\nk = 16\n")
    assert main(["synth", "--config", str(root / "synth.cfg"), "--out", str(root / "ds"), "--seed", "3"]) == 0
    return root


def _pretrain(work, out, *extra):
    argv = ["pretrain", "--config", str(work / "pretrain.cfg"), "--dataset", str(work / "ds"), "--views", "bands",
            "--out", str(out), *extra]
    return main(argv)


def _log_losses(path):
    with (path / "train_log.csv").open() as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


# -- synth ------------------------------------------------------------------------------


def test_synth_writes_loadable_dataset(work):
    data = ChipDataset.load(work / "ds")
    assert len(data) == 60 and data.chips.shape[1:] == (10, 16, 16)
    index = [json.loads(line) for line in (work / "ds" / "index.jsonl").read_text().splitlines()]
    assert len(index) == 60 and all((work / "ds" / e["path"]).exists() for e in index)
    assert json.loads((work / "ds" / "dataset.json").read_text())["name"] == "toy"
    resolved = load_config(work / "ds" / "resolved_config.txt")
    assert resolved["seed"] == 3 and resolved["H"] == 16 and resolved["num_chips"] == 60


def test_synth_rerun_is_byte_identical(work, tmp_path):
    assert main(["synth", "--config", str(work / "synth.cfg"), "--out", str(tmp_path / "again"), "--seed", "3"]) == 0
    for entry in (work / "ds" / "index.jsonl").read_text().splitlines():
        rel = json.loads(entry)["path"]
        assert (work / "ds" / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()
    assert (work / "ds" / "index.jsonl").read_bytes() == (tmp_path / "again" / "index.jsonl").read_bytes()


def test_synth_flag_beats_config_file(work, tmp_path):
    assert main(["synth", "--config", str(work / "synth.cfg"), "--out", str(tmp_path / "d"), "--num-chips", "12"]) == 0
    assert len(ChipDataset.load(tmp_path / "d")) == 12


def test_synth_multi_label(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "m"), "--num-chips", "20", "--multi-label"]) == 0
    data = ChipDataset.load(tmp_path / "m")
    assert data.task_mode == "multi_label" and data.labels.shape == (20, 8)


# -- pca-fit ----------------------------------------------------------------------------


def test_pca_fit_spec_reloads_orthonormal_and_deterministic(work, capsys):
    for name in ("a", "b"):
        assert main(["pca-fit", "--dataset", str(work / "ds"), "--seed", "1", "--out", str(work / f"pca_{name}.json")]) == 0
    assert "of the variance" in capsys.readouterr().out
    spec, again = ViewSpec.from_json(work / "pca_a.json"), ViewSpec.from_json(work / "pca_b.json")
    for name in ("mean", "basis", "eigenvalues"):
        assert getattr(spec.pca, name).tobytes() == getattr(again.pca, name).tobytes()
    basis = spec.pca.basis
    np.testing.assert_allclose(basis @ basis.T, np.eye(10), atol=1e-6)
    assert list(spec.channels_view1) == [0, 6, 7, 8, 9] and list(spec.channels_view2) == [1, 2, 3, 4, 5]
    assert load_config(work / "pca_a.config.txt")["pixels_per_chip"] == 144


# -- pretrain ---------------------------------------------------------------------------


def test_pretrain_logs_falling_loss(work):
    out = work / "pre"
    assert _pretrain(work, out, "--epochs", "5") == 0
    losses = _log_losses(out)
    assert len(losses) == 5 and all(np.isfinite(losses))
    assert losses[-1] < losses[0]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["epoch"] == 5 and manifest["dataset_name"] == "toy"
    assert load_config(out / "resolved_config.txt")["k"] == 16
    assert ViewSpec.from_json(out / "view_spec.json").spec_id == "bands"


def test_pretrain_resume_is_bit_identical(work, tmp_path):
    assert _pretrain(work, tmp_path / "straight", "--epochs", "4") == 0
    assert _pretrain(work, tmp_path / "split", "--epochs", "2") == 0
    assert _pretrain(work, tmp_path / "split", "--epochs", "4", "--resume") == 0
    assert _log_losses(tmp_path / "straight") == _log_losses(tmp_path / "split")
    for name in sorted(p.name for p in (tmp_path / "straight" / "model").iterdir()):
        assert (tmp_path / "straight" / "model" / name).read_bytes() == (tmp_path / "split" / "model" / name).read_bytes()


def test_pretrain_pca_views_need_spec(work):
    assert _pretrain(work, work / "nope", "--views", "pca", "--epochs", "1") == 1
    assert _pretrain(work, work / "pcarun", "--views", "pca", "--view-spec", str(work / "pca_a.json"), "--epochs", "1") == 0


# -- probe / finetune -------------------------------------------------------------------


def test_probe_random_init_appends_ledger(work, tmp_path):
    ledger = tmp_path / "ledger.csv"
    for seed in ("0", "1"):
        argv = ["probe", "--random-init", "--dataset", str(work / "ds"), "--epochs", "3", "--seed", seed,
                "--ledger", str(ledger), "--out", str(tmp_path / f"r{seed}.json")]
        assert main(argv) == 0
    with ledger.open() as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LEDGER_COLUMNS and len(rows) == 2
    assert {r["pretrain_source"] for r in rows} == {"random"} and {r["task"] for r in rows} == {"toy"}
    report = json.loads((tmp_path / "r0.json").read_text())
    assert report["protocol"] == "linear" and 0.0 <= report["value"] <= 1.0
    assert load_config(tmp_path / "r0.config.txt")["epochs"] == 3


def test_probe_from_checkpoint_and_preset(work, tmp_path):
    argv = ["probe", "--checkpoint", str(work / "pre"), "--dataset", str(work / "ds"), "--epochs", "2",
            "--preset", "mlrsnet", "--out", str(tmp_path / "p.json")]
    assert main(argv) == 0
    report = json.loads((tmp_path / "p.json").read_text())
    assert report["pretrain_source"] == "cmc:toy" and report["n_pretrain"] == 30
    resolved = load_config(tmp_path / "p.config.txt")
    assert resolved["lr"] == 0.01 and resolved["weight_decay"] == 0.01 and resolved["epochs"] == 2


def test_finetune_save_model_feeds_supervised_init(work, tmp_path):
    argv = ["finetune", "--random-init", "--config", str(work / "pretrain.cfg"), "--dataset", str(work / "ds"),
            "--epochs", "1", "--save-model", str(tmp_path / "sup"), "--out", str(tmp_path / "f.json")]
    # the pretrain config carries network keys finetune does not take
    assert main(argv) == 1
    argv[3] = str(_write(tmp_path / "ft.cfg", "batch_size = 10\n"))
    assert main(argv) == 0
    assert json.loads((tmp_path / "f.json").read_text())["protocol"] == "finetune"
    argv = ["probe", "--supervised-init", str(tmp_path / "sup"), "--dataset", str(work / "ds"), "--epochs", "2",
            "--out", str(tmp_path / "s.json")]
    assert main(argv) == 0
    assert json.loads((tmp_path / "s.json").read_text())["pretrain_source"] == "supervised"


def _write(path, text):
    path.write_text(text)
    return path


# -- report -----------------------------------------------------------------------------


def test_report_groups_match_ledger(work, tmp_path):
    ledger = tmp_path / "ledger.csv"
    for seed in ("0", "1", "2"):
        for init in (["--random-init"], ["--checkpoint", str(work / "pre")]):
            argv = ["probe", *init, "--dataset", str(work / "ds"), "--epochs", "1", "--seed", seed,
                    "--ledger", str(ledger)]
            assert main(argv) == 0
    assert main(["report", "--ledger", str(ledger), "--out", str(tmp_path / "rep")]) == 0
    with (tmp_path / "rep" / "summary.csv").open() as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == SUMMARY_COLUMNS
        summary = list(reader)
    assert len(summary) == 2 and sum(int(r["n_runs"]) for r in summary) == 6
    for row in summary:
        assert float(row["min"]) <= float(row["mean"]) <= float(row["max"])
    plot = json.loads((tmp_path / "rep" / "plot_data.json").read_text())
    assert set(plot["toy/linear"]) == {"random/bands", "cmc:toy/bands"}
    assert plot["toy/linear"]["cmc:toy/bands"][0][0] == 30


def test_report_rejects_missing_or_malformed_ledger(tmp_path):
    assert main(["report", "--ledger", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    assert main(["report", "--ledger", str(tmp_path / "bad.csv"), "--out", str(tmp_path)]) == 2


# -- exit codes -------------------------------------------------------------------------


def test_usage_errors_exit_1(work):
    with pytest.raises(SystemExit) as exc:
        main(["probe", "--dataset", str(work / "ds")])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    assert main([]) == 1


def test_data_errors_exit_2(work, tmp_path):
    assert main(["probe", "--random-init", "--dataset", str(tmp_path / "missing")]) == 2
    chip = next((work / "ds").rglob("*.msc"))
    broken = tmp_path / "broken"
    subprocess.run(["cp", "-r", str(work / "ds"), str(broken)], check=True)
    (broken / chip.relative_to(work / "ds")).write_bytes(b"MSCHIP01")
    assert main(["probe", "--random-init", "--dataset", str(broken)]) == 2


def test_numeric_failure_exits_3(work, tmp_path):
    assert _pretrain(work, tmp_path / "boom", "--epochs", "2", "--lr", "1e30") == 3


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mvc.cli"], capture_output=True, text=True)
    assert proc.returncode == 1 and "synth" in proc.stderr
