import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from stereo_aec.acoustics import load_rir
from stereo_aec.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from stereo_aec.dataset import DatasetManifest
from stereo_aec.dsp import read_audio

TINY = {"model": {"conv_channels": 8, "n_conv": 2, "lstm_hidden": 8, "n_lstm": 1}}


def test_param_count_text(capsys):
    assert main(["param-count"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "550,786" in out and "552,708" in out


def test_param_count_json(capsys):
    assert main(["param-count", "--json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {"dcsm": 550786, "dcdm": 552708}


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "stereo_aec.cli", "param-count", "--variant",
                           "dcsm"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0 and "550,786" in proc.stdout


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["rir-gen"])  # --out missing
    assert exc.value.code == EXIT_USAGE
    assert main(["--threads", "0", "param-count"]) == EXIT_USAGE


def test_rir_gen_anechoic(tmp_path):
    out = tmp_path / "rirs"
    assert main(["--seed", "3", "rir-gen", "--out", str(out), "--anechoic", "--set", "test"]) == 0
    h = load_rir(out / "scene_00000" / "ls1_mic1.rir")
    assert len(h.taps) == 5600
    assert np.count_nonzero(h.taps) == 1
    assert (out / "config.yaml").exists() and (out / "args.json").exists()
    rec = json.loads((out / "geometry.jsonl").read_text())
    assert rec["anechoic"] and rec["n_taps"] == 5600 and rec["t60"] == 0.35


def test_rir_length_follows_t60(tmp_path):
    main(["rir-gen", "--out", str(tmp_path), "--t60", "0.2", "--anechoic"])
    assert len(load_rir(tmp_path / "scene_00000" / "ls2_mic2.rir").taps) == 3200


def test_rir_gen_seeded(tmp_path):
    for name in ("a", "b"):
        main(["rir-gen", "--out", str(tmp_path / name), "--seed", "11"])
    a = load_rir(tmp_path / "a" / "scene_00000" / "talker_mic1.rir").taps
    b = load_rir(tmp_path / "b" / "scene_00000" / "talker_mic1.rir").taps
    assert np.array_equal(a, b)


def test_simulate_and_ser_sweep(tmp_path):
    out = tmp_path / "ds"
    argv = ["simulate", "--out", str(out), "--count", "3", "--seconds", "0.3",
            "--ser-choices", "-5", "0", "5"]
    assert main(argv) == EXIT_OK
    m = DatasetManifest.load(out)
    assert len(m) == 3
    assert all(e["ser_db"] in (-5.0, 0.0, 5.0) for e in m.entries)
    for ex, entry in zip(m, m.entries):
        assert ex.measured_ser_db() == pytest.approx(entry["ser_db"], abs=0.02)
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    assert cfg["dataset"]["utterance_seconds"] == 0.3


def test_simulate_missing_corpus(tmp_path, capsys):
    rc = main(["simulate", "--out", str(tmp_path / "x"), "--far-dir", str(tmp_path / "nope")])
    assert rc == EXIT_DATA
    assert "not found" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("dataset:\n  utterance_sec: 3\n")
    assert main(["simulate", "--out", str(tmp_path / "x"), "--config", str(cfg)]) == EXIT_DATA


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--json"]) == EXIT_OK
    cases = json.loads(capsys.readouterr().out)
    assert all(c["passed"] for c in cases)
    assert any(c["case"].startswith("tiny") for c in cases)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_manifest):
    root = tmp_path_factory.mktemp("train")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    out = root / "run"
    argv = ["train", "--manifest", str(small_manifest.root), "--out", str(out), "--config",
            str(cfg), "--variant", "dcdm", "--epochs", "1", "--batch-size", "3"]
    assert main(argv) == EXIT_OK
    return cfg, out, argv


def test_train_outputs(trained):
    _, out, _ = trained
    for name in ("best.lcsm", "last.lcsm", "last.lcsm.json", "metrics.jsonl", "config.yaml",
                 "args.json"):
        assert (out / name).exists(), name
    saved = yaml.safe_load((out / "config.yaml").read_text())
    assert saved["model"]["conv_channels"] == 8 and saved["model"]["variant"] == "dcdm"


def test_train_resume(trained):
    _, out, argv = trained
    argv = [a if a != "1" else "2" for a in argv] + ["--resume"]
    assert main(argv) == EXIT_OK
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]


def test_evaluate_json(trained, small_manifest, tmp_path, capsys):
    _, out, _ = trained
    rc = main(["evaluate", "--manifest", str(small_manifest.root), "--checkpoint",
               str(out / "best.lcsm"), "--json", "--csv", "--out", str(tmp_path / "ev")])
    assert rc == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["overall"]["n"] == 3
    assert (tmp_path / "ev" / "report.csv").exists()
    assert (tmp_path / "ev" / "config.yaml").exists()
    assert main(["evaluate", "--manifest", str(small_manifest.root)]) == EXIT_USAGE


def test_infer_zero_checkpoint_is_silent(tmp_path, small_manifest):
    from stereo_aec.model import LcsmConfig, LcsmModel

    m = LcsmModel(LcsmConfig("dcsm", conv_channels=8, n_conv=2, lstm_hidden=8, n_lstm=1))
    m.zero_()
    ckpt = tmp_path / "zero.lcsm"
    m.save(ckpt)
    ex = small_manifest.root / small_manifest.entries[0]["id"]
    rc = main(["infer", "--checkpoint", str(ckpt), "--far", str(ex / "x1.wav"), str(ex / "x2.wav"),
               "--mic", str(ex / "y1.wav"), str(ex / "y2.wav"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_OK
    for j in (1, 2):
        s = read_audio(tmp_path / "o" / f"s{j}_hat.wav")
        assert len(s.samples) == len(read_audio(ex / "y1.wav").samples)
        assert not np.any(s.samples)


def test_infer_missing_checkpoint(tmp_path):
    rc = main(["infer", "--checkpoint", str(tmp_path / "none.lcsm"), "--far", "a", "b",
               "--mic", "c", "d", "--out", str(tmp_path)])
    assert rc == EXIT_DATA
