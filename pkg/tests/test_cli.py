import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from advmask.checkpoint import Checkpoint
from advmask.cli import main
from advmask.config import RunConfig
from advmask.data import CHAPMAN_BALANCE, load_dataset
from advmask.training import PretrainConfig


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--n", "60", "--length", "64", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def adv_ckpt(data_dir):
    out = data_dir.parent / "pre"
    assert main(["pretrain", "--data", str(data_dir), "--out", str(out), "--max-epochs", "1", "--seed", "1"]) == 0
    return out / "checkpoint.amck"


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def _json_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_gen_data_counts_and_balance(data_dir):
    ds = load_dataset(data_dir, normalize=False)
    assert len(ds) == 60
    manifest = json.loads((data_dir / "manifest.json").read_text())
    for k, p in CHAPMAN_BALANCE.items():
        assert abs(manifest["class_counts"][k] - 60 * p) <= 1


def test_gen_data_rerun_is_byte_identical(tmp_path, data_dir):
    assert main(["gen-data", "--out", str(tmp_path / "again"), "--n", "60", "--length", "64", "--seed", "3"]) == 0
    for f in sorted(data_dir.iterdir()):
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()


def test_existing_output_needs_force(data_dir, capsys):
    assert main(["gen-data", "--out", str(data_dir), "--n", "60", "--length", "64", "--seed", "3"]) == 1
    err = _json_error(capsys)
    assert err["command"] == "gen-data" and err["error"] == "FileExistsError" and "--force" in err["message"]
    assert main(["gen-data", "--out", str(data_dir), "--n", "60", "--length", "64", "--seed", "3", "--force"]) == 0


def test_uniform_balance(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "u"), "--n", "40", "--length", "32", "--balance", "uniform"]) == 0
    counts = json.loads((tmp_path / "u" / "manifest.json").read_text())["class_counts"]
    assert set(counts.values()) == {10}


def test_pretrain_zero_epochs_is_initialization(tmp_path, data_dir):
    assert main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path / "p"), "--max-epochs", "0",
                 "--seed", "9"]) == 0
    cfg = PretrainConfig(seed=9)
    init = Checkpoint.initialize(cfg.encoder, cfg.mask_config(), 9, "adversarial")
    assert (tmp_path / "p" / "checkpoint.amck").read_bytes() == init.to_bytes()
    assert _rows(tmp_path / "p" / "metrics.csv")[1:] == []


def test_pretrain_outputs_and_config_snapshot(adv_ckpt):
    out = adv_ckpt.parent
    rows = _rows(out / "metrics.csv")
    assert rows[0][:4] == ["phase", "epoch", "l_ssl", "l_sparse"] and len(rows) == 2
    cfg = RunConfig.load(out / "config.json")
    assert cfg.pretrain.seed == 1 and cfg.pretrain.max_epochs == 1
    assert Checkpoint.load(adv_ckpt).mask_model.config.n_masks == 2


def test_pretrain_deterministic(tmp_path, data_dir, adv_ckpt):
    assert main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path / "b"), "--max-epochs", "1",
                 "--seed", "1"]) == 0
    for name in ("checkpoint.amck", "metrics.csv", "config.json"):
        assert (tmp_path / "b" / name).read_bytes() == (adv_ckpt.parent / name).read_bytes()


def test_pretrain_from_config_file(tmp_path, data_dir):
    cfg = RunConfig()
    cfg.pretrain.max_epochs = 1
    cfg.pretrain.augmentation = "blockmask"
    cfg.data = str(data_dir)
    (tmp_path / "c.json").write_text(cfg.dumps())
    assert main(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "p")]) == 0
    ck = Checkpoint.load(tmp_path / "p" / "checkpoint.amck")
    assert ck.augmentation == "blockmask" and ck.mask_model is None


def test_invalid_aug_lists_valid_names(tmp_path, data_dir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path / "p"), "--aug", "bogus"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "gaussian" in err and "adversarial" in err


def test_missing_data_is_json_error(tmp_path, capsys):
    assert main(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "p")]) == 1
    assert _json_error(capsys)["error"] == "DatasetError"


def test_bad_config_is_json_error(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"pretrain": {"learning_rate": 1}}))
    assert main(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "p")]) == 1
    err = _json_error(capsys)
    assert err["error"] == "ConfigError" and "learning_rate" in err["message"]


def test_corrupt_checkpoint_is_json_error(tmp_path, data_dir, capsys):
    (tmp_path / "x.amck").write_bytes(b"AMCK" + bytes(40))
    assert main(["transfer", "--checkpoint", str(tmp_path / "x.amck"), "--data", str(data_dir),
                 "--out", str(tmp_path / "t")]) == 1
    assert _json_error(capsys)["error"] == "CheckpointError"


def test_transfer_probe_and_scratch(tmp_path, data_dir, adv_ckpt):
    assert main(["transfer", "--checkpoint", str(adv_ckpt), "--data", str(data_dir), "--out", str(tmp_path / "t"),
                 "--max-epochs", "2", "--task", "gender"]) == 0
    rows = _rows(tmp_path / "t" / "transfer.csv")
    assert rows[0] == ["arm", "task", "fraction", "seed", "n_train", "val_accuracy_pct", "test_accuracy_pct"]
    assert rows[1][:2] == ["adversarial", "gender"] and 0 <= float(rows[1][-1]) <= 100
    assert main(["transfer", "--data", str(data_dir), "--out", str(tmp_path / "s"), "--max-epochs", "1",
                 "--scratch"]) == 0
    assert _rows(tmp_path / "s" / "transfer.csv")[1][0] == "scratch"


def test_sweep_outputs(tmp_path, data_dir, adv_ckpt):
    assert main(["sweep", "--checkpoint", f"adv={adv_ckpt}", "--data", str(data_dir), "--out", str(tmp_path / "s"),
                 "--fractions", "1.0,0.5", "--seeds", "2", "--task", "arrhythmia", "--max-epochs", "1"]) == 0
    assert len(_rows(tmp_path / "s" / "trials.csv")) == 1 + 2 * 2
    table = _rows(tmp_path / "s" / "table.csv")
    assert table[0] == ["augmentation", "arrhythmia 100% DS", "arrhythmia 50% DS"]
    assert [r[0] for r in table[1:]] == ["adv"]
    assert all("±" in cell for cell in table[1][1:])


@pytest.mark.parametrize("value", ["", "0", "1.5", "a,b"])
def test_sweep_bad_fractions_usage_error(tmp_path, data_dir, adv_ckpt, value, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--checkpoint", str(adv_ckpt), "--data", str(data_dir), "--out", str(tmp_path / "s"),
              "--fractions", value])
    assert exc.value.code == 2
    assert "--fractions" in capsys.readouterr().err


def test_preview_two_masks_sum_to_one(tmp_path, data_dir, adv_ckpt):
    out = tmp_path / "p.csv"
    assert main(["augment-preview", "--data", str(data_dir), "--checkpoint", str(adv_ckpt), "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["t", "lead_II_original", "lead_II_augmented", "mask_0", "mask_1"]
    m = np.array([[float(v) for v in r[3:]] for r in rows[1:]])
    assert len(m) == 64
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-5)


def test_preview_baseline_has_no_mask_columns(tmp_path, data_dir):
    out = tmp_path / "p.csv"
    assert main(["augment-preview", "--data", str(data_dir), "--aug", "gaussian", "--out", str(out),
                 "--record", load_dataset(data_dir).records[3].record_id]) == 0
    assert _rows(out)[0] == ["t", "lead_II_original", "lead_II_augmented"]


def test_preview_per_lead_masks(tmp_path, data_dir):
    pre = tmp_path / "pre12"
    assert main(["pretrain", "--data", str(data_dir), "--out", str(pre), "--max-epochs", "0", "--n-masks", "12"]) == 0
    out = tmp_path / "p.csv"
    assert main(["augment-preview", "--data", str(data_dir), "--checkpoint", str(pre / "checkpoint.amck"),
                 "--out", str(out)]) == 0
    header = _rows(out)[0]
    assert len(header) == 1 + 2 * 12 + 12
    assert "lead_V6_augmented" in header and "mask_11" in header


def test_preview_adversarial_needs_checkpoint(tmp_path, data_dir):
    with pytest.raises(SystemExit) as exc:
        main(["augment-preview", "--data", str(data_dir), "--out", str(tmp_path / "p.csv")])
    assert exc.value.code == 2


def test_unknown_record(tmp_path, data_dir, capsys):
    assert main(["augment-preview", "--data", str(data_dir), "--aug", "gaussian", "--record", "zzz",
                 "--out", str(tmp_path / "p.csv")]) == 1
    assert "zzz" in _json_error(capsys)["message"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "advmask", "gen-data", "--out", str(tmp_path / "d"), "--n", "8",
                           "--length", "32"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(load_dataset(tmp_path / "d")) == 8
